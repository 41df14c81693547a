import csv
import json
import struct
import xml.etree.ElementTree as ET
import zlib

import numpy as np
import pytest

from stiefattn import artifacts as art
from stiefattn import decoder as dec
from stiefattn import stief
from stiefattn.cli import main
from stiefattn.config import EPSILON_PRESETS, RunConfig
from stiefattn.errors import ConfigError, FormatError, StaleArtifactError
from stiefattn.rng import RngState

from conftest import TINY

TINY_RUN = {
    "decoder": {"d_model": 16, "n_heads_q": 2, "n_heads_kv": 1, "d_h": 8, "d_ff": 24, "n_layers": 2},
    "train": {"max_epochs": 2, "patience": 1},
    "calibration": {"n_sequences": 3, "seq_len": 10},
    "eval": {"n_sequences": 2, "seq_len": 10},
}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Tiny end-to-end run: calibrate, train two methods, allocate, eval, diagnose."""
    out = tmp_path_factory.mktemp("run")
    cfg = out / "tiny.json"
    cfg.write_text(json.dumps(TINY_RUN))
    base = ["--config", cfg, "--out", out]
    assert run("calibrate", *base) == 0
    assert run("train", "--method", "stief", *base) == 0
    assert run("train", "--method", "k_svd", *base) == 0
    assert run("allocate", *base) == 0
    assert run("eval", *base) == 0
    assert run("diagnose", *base) == 0
    return out, base


# --- artifacts -------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_store():
    rng = RngState(0)
    stack = dec.init_stack(TINY, rng.child(1))
    xs = dec.gaussian_inputs(TINY, 2, 6, rng.child(2))
    store, _ = stief.baseline_store("eigen", stack, xs, [2, 4], [3, 4])
    return stack, xs, store


FP = "ab" * 32


def test_basis_file_roundtrip_is_byte_identical(small_store):
    _, _, store = small_store
    blob = art.encode_basis_store(store, FP)
    assert blob[:4] == b"STF1"
    back, fp = art.decode_basis_store(blob)
    assert fp == FP and back.provenance == "eigen"
    assert art.encode_basis_store(back, fp) == blob
    for (name, p), (_, q) in zip(store.all_bases(), back.all_bases()):
        assert np.array_equal(p, q), name


def test_basis_file_column_major_payload(small_store):
    _, _, store = small_store
    blob = art.encode_basis_store(store, FP)
    p = store.key_basis(0, 2)
    assert p.astype("<f8").tobytes(order="F") in blob


def test_basis_file_corruption_detected(small_store):
    _, _, store = small_store
    blob = bytearray(art.encode_basis_store(store, FP))
    rng = RngState(5)
    for _ in range(30):
        bad = bytearray(blob)
        i = rng.below(len(bad))
        bad[i] ^= 1 << rng.below(8)
        with pytest.raises(FormatError):
            art.decode_basis_store(bytes(bad))
    with pytest.raises(FormatError):
        art.decode_basis_store(bytes(blob[:-9]))
    with pytest.raises(FormatError):
        art.decode_basis_store(b"XXXX" + bytes(blob[4:]))


def test_basis_file_shape_mismatch_with_valid_crc(small_store):
    _, _, store = small_store
    blob = art.encode_basis_store(store, FP)
    body = blob[:-4] + b"\x00" * 8
    with pytest.raises(FormatError):
        art.decode_basis_store(body + struct.pack("<I", zlib.crc32(body)))


def test_stack_file_roundtrip(small_store, tmp_path):
    stack, _, _ = small_store
    path = tmp_path / "s.stw"
    art.write_stack_file(path, stack, FP)
    back, fp = art.read_stack_file(path)
    assert fp == FP and back[0].config == stack[0].config
    for a, b in zip(stack, back):
        for (_, wa), (_, wb) in zip(a.named_weights(), b.named_weights()):
            assert np.array_equal(wa, wb)
    assert (path.stat().st_mode & 0o777) == 0o644


def test_activations_roundtrip_and_errors(small_store):
    stack, xs, _ = small_store
    per_layer = dec.layer_inputs(stack, xs)
    blob = art.encode_activations(per_layer)
    n, d_model, L = struct.unpack("<3Q", blob[:24])
    assert (n, d_model, L) == (6, TINY.d_model, TINY.n_layers)
    assert len(blob) - 24 == L * len(xs) * n * d_model * 8
    back = art.decode_activations(blob)
    assert all(np.array_equal(a, b) for la, lb in zip(per_layer, back) for a, b in zip(la, lb))
    for bad, where in [(blob[:10], "offset 10"), (blob[:24], "offset 24"), (blob[:-8], "offset")]:
        with pytest.raises(FormatError, match=where):
            art.decode_activations(bad)
    nan = bytearray(blob)
    nan[24:32] = struct.pack("<d", float("nan"))
    with pytest.raises(FormatError, match="offset 24"):
        art.decode_activations(bytes(nan))
    with pytest.raises(FormatError):
        art.decode_activations(struct.pack("<3Q", 0, 4, 1))


def test_train_log_csv():
    log = stief.TrainLog(0, "key", 2, initial_loss=0.5, best_loss=0.4,
                         epochs=[stief.EpochLog(1, 0.4, 1e-3, 0)])
    rows = list(csv.reader(art.train_log_csv([log]).splitlines()))
    assert rows[0] == ["layer", "target", "rank", "epoch", "loss", "lr", "jitter_events"]
    assert rows[1][3] == "0" and rows[1][5] == "" and rows[2][3] == "1"


# --- config ------------------------------------------------------------------------


def test_config_roundtrip_and_defaults(tmp_path):
    cfg = RunConfig()
    assert cfg.calibration.n_sequences == 32 and cfg.calibration.seq_len == 128
    assert cfg.policy.epsilon in EPSILON_PRESETS
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert RunConfig.load(path) == cfg
    assert RunConfig.from_dict(TINY_RUN).decoder.d_h == 8
    assert cfg.candidate_ranks() == [8, 10, 11, 13, 14, 16] and cfg.middle_rank() == 11


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"bogus": {}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"nope": 1}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"policy": {"kind": "greedy"}})
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError):
        RunConfig.load(bad)


def test_fingerprint_tracks_training_inputs():
    a = RunConfig()
    assert a.fingerprint() == RunConfig().fingerprint()
    assert a.with_seed(1).fingerprint() != a.fingerprint()
    b = RunConfig.from_dict({"policy": {"epsilon": 0.09}})
    assert b.fingerprint() == a.fingerprint()


# --- CLI ---------------------------------------------------------------------------


def test_init_config(tmp_path):
    assert run("init-config", "--out", tmp_path) == 0
    assert RunConfig.load(tmp_path / "config.json") == RunConfig()


def test_exit_codes(tmp_path):
    assert run("train", "--method", "svd", "--out", tmp_path) == 2
    assert run("calibrate", "--out", tmp_path / "missing") == 1
    assert run() == 2
    assert run("calibrate", "--threads", 0, "--out", tmp_path) == 2
    (tmp_path / "bad.json").write_text('{"decoder": {"d_model": 7}}')
    assert run("calibrate", "--config", tmp_path / "bad.json", "--out", tmp_path) == 2


def test_pipeline_artifacts(pipeline):
    out, _ = pipeline
    for name in ["stack.stw", "activations.bin", "calibration.json", "bases_stief.stf", "bases_k_svd.stf",
                 "surface_stief.json", "surface_k_svd.json", "allocation.json", "eval.csv", "trainlog_stief.csv",
                 "diagnostics.csv", "diagnostics_attn_rel_err.svg"]:
        assert (out / name).is_file(), name
    store, _ = art.read_basis_file(out / "bases_stief.stf")
    assert store.max_orthonormality_residual() < 1e-8
    surfaces, doc = art.surfaces_from_json((out / "surface_k_svd.json").read_text())
    assert all(s.at(8, 8) < 1e-8 for s in surfaces) and doc["method"] == "k_svd"


def test_eval_csv_header(pipeline):
    out, _ = pipeline
    rows = list(csv.reader((out / "eval.csv").read_text().splitlines()))
    assert rows[0] == ["layer", "r_k", "r_v", "delta", "compression_ratio"]
    assert len(rows) == 2 + 2 and rows[-1][0] == "aggregate"
    deltas = [float(r[3]) for r in rows[1:-1]]
    assert float(rows[-1][3]) == pytest.approx(np.mean(deltas), rel=1e-15)


def test_diagnose_two_methods(pipeline):
    out, _ = pipeline
    rows = list(csv.DictReader((out / "diagnostics.csv").read_text().splitlines()))
    assert len(rows) == 2 * 2 and {r["method"] for r in rows} == {"stief", "k_svd"}
    for metric in ("attn_rel_err", "layer_rel_err", "mean_cosine"):
        ET.fromstring((out / f"diagnostics_{metric}.svg").read_text())


def test_unit_weights_match_pareto_bytes(pipeline):
    out, base = pipeline
    assert run("allocate", *base, "--policy", "pareto", "--epsilon", 0.03, "--output", out / "p.json") == 0
    assert run("allocate", *base, "--policy", "weighted_pareto", "--weights", "1,1", "--epsilon", 0.03,
               "--output", out / "w.json") == 0
    assert (out / "p.json").read_bytes() == (out / "w.json").read_bytes()


def test_epsilon_sweep_and_uniform(pipeline):
    out, base = pipeline
    ratios = []
    for eps in EPSILON_PRESETS:
        assert run("allocate", *base, "--policy", "pareto", "--epsilon", eps, "--output", out / "s.json") == 0
        ratios.append(json.loads((out / "s.json").read_text())["aggregate_ratio"])
    assert all(a >= b for a, b in zip(ratios, ratios[1:]))
    assert run("allocate", *base, "--policy", "uniform", "--output", out / "u.json") == 0
    doc = json.loads((out / "u.json").read_text())
    assert {(l["r_k"], l["r_v"]) for l in doc["layers"]} == {(6, 6)}
    assert run("allocate", *base, "--epsilon", -1) == 2
    assert run("allocate", *base, "--policy", "uniform", "--rank-k", 3, "--output", out / "x.json") == 1


def test_full_rank_eval_is_exact(pipeline):
    out, base = pipeline
    assert run("allocate", *base, "--policy", "uniform", "--rank-k", 8, "--rank-v", 8,
               "--output", out / "full.json") == 0
    assert run("eval", *base, "--allocation", out / "full.json", "--output", out / "full.csv") == 0
    last = (out / "full.csv").read_text().strip().splitlines()[-1].split(",")
    assert float(last[3]) < 1e-8 and float(last[4]) == 1.0


def test_commands_are_idempotent(pipeline):
    out, base = pipeline
    names = ["stack.stw", "activations.bin", "calibration.json", "bases_stief.stf", "surface_stief.json",
             "allocation.json", "eval.csv"]
    before = {n: (out / n).read_bytes() for n in names}
    assert run("calibrate", *base) == 0
    assert run("train", "--method", "stief", *base) == 0
    assert run("allocate", *base) == 0
    assert run("eval", *base) == 0
    assert {n: (out / n).read_bytes() for n in names} == before


def test_stale_fingerprint_is_rejected(pipeline, tmp_path):
    out, base = pipeline
    assert run("eval", *base, "--seed", 5, "--output", tmp_path / "e.csv") == 1
    assert run("train", *base, "--seed", 5) == 1
    with pytest.raises(StaleArtifactError):
        art.require_fingerprint("a" * 64, "b" * 64, "x")


def test_external_activation_ingestion(pipeline, tmp_path):
    out, _ = pipeline
    cfg = RunConfig.from_dict(TINY_RUN)
    stack = cfg.build_stack()
    per_layer = dec.layer_inputs(stack, dec.gaussian_inputs(cfg.decoder, 2, 5, RngState(99)))
    dump = tmp_path / "dump.bin"
    art.write_activations(dump, per_layer)
    work = tmp_path / "w"
    work.mkdir()
    base = ["--config", out / "tiny.json", "--out", work]
    assert run("calibrate", *base, "--activations", dump) == 0
    assert json.loads((work / "calibration.json").read_text())["source"] == "external"
    assert run("train", "--method", "k_svd", *base) == 0
    wrong = tmp_path / "wrong.bin"
    art.write_activations(wrong, per_layer[:1])
    assert run("calibrate", *base, "--activations", wrong) == 2
    (tmp_path / "junk.bin").write_bytes(b"\x01\x02")
    assert run("calibrate", *base, "--activations", tmp_path / "junk.bin") == 1
