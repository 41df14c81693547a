"""Command-line driver: init-config, calibrate, train, allocate, eval, diagnose.

Exit codes: 0 success, 1 runtime/numeric/I-O failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import artifacts as art
from .baselines import BaselineKind
from .config import EPSILON_PRESETS, POLICIES, RunConfig
from .decoder import layer_inputs, record_for
from .diagnostics import compare_methods, diagnostics_csv, metric_charts
from .errors import AllocationError, ConfigError, StaleArtifactError, StiefError
from .stief import baseline_store, delta_from_records, run_algorithm_1
from .surface import (allocate_pareto, allocate_uniform, allocate_weighted_pareto, compression_ratio,
                      sensitivity_weights)

log = logging.getLogger("stiefattn")

METHODS = ("stief",) + tuple(k.value for k in BaselineKind)
STACK_FILE = "stack.stw"
ACTIVATIONS_FILE = "activations.bin"
MANIFEST_FILE = "calibration.json"
EVAL_COLUMNS = ("layer", "r_k", "r_v", "delta", "compression_ratio")


class UsageError(StiefError):
    pass


def bases_file(method: str) -> str:
    return f"bases_{method}.stf"


def surface_file(method: str) -> str:
    return f"surface_{method}.json"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.out)
    if not out.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {out}")
    return out


# --- commands ----------------------------------------------------------------


def cmd_init_config(cfg: RunConfig, args) -> Path:
    path = _out_dir(cfg) / "config.json"
    art.atomic_write(path, RunConfig().to_json())
    return path


def cmd_calibrate(cfg: RunConfig, args) -> Path:
    out = _out_dir(cfg)
    stack = cfg.build_stack()
    fp = cfg.fingerprint()
    if args.activations:
        per_layer = art.read_activations(args.activations)
        n_tokens, d_model = per_layer[0][0].shape
        if d_model != cfg.decoder.d_model or len(per_layer) != cfg.decoder.n_layers:
            raise ConfigError(f"{args.activations}: dump has d_model={d_model}, L={len(per_layer)}; config "
                              f"expects d_model={cfg.decoder.d_model}, L={cfg.decoder.n_layers}")
        source = "external"
    else:
        per_layer = layer_inputs(stack, cfg.calibration_inputs())
        source = "seeded"
    art.write_stack_file(out / STACK_FILE, stack, fp)
    art.write_activations(out / ACTIVATIONS_FILE, per_layer)
    manifest = {"fingerprint": fp, "source": source, "n_sequences": len(per_layer[0]),
                "stack_sha256": _sha256(out / STACK_FILE),
                "activations_sha256": _sha256(out / ACTIVATIONS_FILE)}
    art.atomic_write(out / MANIFEST_FILE, art.canonical_json(manifest))
    log.info("calibration: %d sequences x %d layers written to %s", len(per_layer[0]), len(per_layer), out)
    return out / ACTIVATIONS_FILE


def _load_calibration(cfg: RunConfig, out: Path):
    fp = cfg.fingerprint()
    manifest_path = out / MANIFEST_FILE
    manifest = json.loads(manifest_path.read_text())
    art.require_fingerprint(manifest["fingerprint"], fp, str(manifest_path))
    if _sha256(out / STACK_FILE) != manifest["stack_sha256"]:
        raise StaleArtifactError(f"{out / STACK_FILE} does not match {manifest_path}")
    if _sha256(out / ACTIVATIONS_FILE) != manifest["activations_sha256"]:
        raise StaleArtifactError(f"{out / ACTIVATIONS_FILE} does not match {manifest_path}")
    stack, stack_fp = art.read_stack_file(out / STACK_FILE)
    art.require_fingerprint(stack_fp, fp, str(out / STACK_FILE))
    return stack, art.read_activations(out / ACTIVATIONS_FILE)


def cmd_train(cfg: RunConfig, args) -> Path:
    out = _out_dir(cfg)
    stack, per_layer = _load_calibration(cfg, out)
    ranks = cfg.candidate_ranks()
    fp = cfg.fingerprint()
    if args.method == "stief":
        store, surfaces = run_algorithm_1(stack, None, ranks, ranks, cfg.train, per_layer_inputs=per_layer)
        art.atomic_write(out / "trainlog_stief.csv", art.train_log_csv(store.logs))
    else:
        store, surfaces = baseline_store(args.method, stack, None, ranks, ranks, per_layer_inputs=per_layer)
    art.write_basis_file(out / bases_file(args.method), store, fp)
    art.atomic_write(out / surface_file(args.method),
                     art.surfaces_to_json(surfaces, args.method, cfg.decoder.d_h, fp))
    log.info("%s: max orthonormality residual %.3e", args.method, store.max_orthonormality_residual())
    return out / bases_file(args.method)


def _parse_weights(text: str, n_layers: int):
    if text is None:
        return sensitivity_weights(n_layers)
    try:
        return [float(w) for w in text.split(",")]
    except ValueError:
        raise UsageError(f"--weights must be comma-separated numbers, got {text!r}") from None


def cmd_allocate(cfg: RunConfig, args) -> Path:
    out = _out_dir(cfg)
    surface_path = Path(args.surface) if args.surface else out / surface_file("stief")
    surfaces, doc = art.surfaces_from_json(surface_path.read_text())
    art.require_fingerprint(doc["fingerprint"], cfg.fingerprint(), str(surface_path))
    d_h = doc["d_h"]
    policy = args.policy or cfg.policy.kind
    eps = cfg.policy.epsilon if args.epsilon is None else args.epsilon
    if not eps > 0:
        raise UsageError(f"epsilon must be positive, got {eps}")
    if policy == "uniform":
        r_k = args.rank_k or cfg.policy.rank_k or cfg.middle_rank()
        r_v = args.rank_v or cfg.policy.rank_v or cfg.middle_rank()
        alloc = allocate_uniform(r_k, r_v, surfaces, d_h)
    elif policy == "pareto":
        alloc = allocate_pareto(surfaces, eps, d_h)
    else:
        alloc = allocate_weighted_pareto(surfaces, eps, _parse_weights(args.weights, len(surfaces)), d_h)
    path = Path(args.output) if args.output else out / "allocation.json"
    art.atomic_write(path, art.allocation_to_json(alloc, cfg.fingerprint(), doc["method"]))
    for ell, c in enumerate(alloc.layers):
        log.info("layer %d: r_K=%d r_V=%d delta=%.5f CR=%.4f%s", ell, c.r_k, c.r_v, c.delta,
                 compression_ratio(c.r_k, c.r_v, d_h), " (fallback)" if c.fallback else "")
    log.info("aggregate KV ratio %.4f", alloc.aggregate_ratio())
    return path


def cmd_eval(cfg: RunConfig, args) -> Path:
    out = _out_dir(cfg)
    fp = cfg.fingerprint()
    bases_path = Path(args.bases) if args.bases else out / bases_file("stief")
    alloc_path = Path(args.allocation) if args.allocation else out / "allocation.json"
    store, bases_fp = art.read_basis_file(bases_path)
    art.require_fingerprint(bases_fp, fp, str(bases_path))
    alloc, doc = art.allocation_from_json(alloc_path.read_text())
    art.require_fingerprint(doc["fingerprint"], fp, str(alloc_path))
    stack, _ = _load_calibration(cfg, out)
    if len(alloc.layers) != len(stack):
        raise StaleArtifactError(f"{alloc_path} covers {len(alloc.layers)} layers, stack has {len(stack)}")
    per_layer = layer_inputs(stack, cfg.eval_inputs())
    lines = [",".join(EVAL_COLUMNS)]
    deltas, ratios = [], []
    for ell, (layer, choice) in enumerate(zip(stack, alloc.layers)):
        key = store.key_basis(ell, choice.r_k)
        values = store.value_bases(ell, choice.r_v)
        records = [record_for(layer, x) for x in per_layer[ell]]
        d = delta_from_records(layer, records, key, values)
        cr = compression_ratio(choice.r_k, choice.r_v, store.d_h)
        deltas.append(d)
        ratios.append(cr)
        lines.append(f"{ell},{choice.r_k},{choice.r_v},{d!r},{cr!r}")
    agg_d, agg_cr = sum(deltas) / len(deltas), sum(ratios) / len(ratios)
    lines.append(f"aggregate,,,{agg_d!r},{agg_cr!r}")
    path = Path(args.output) if args.output else out / "eval.csv"
    art.atomic_write(path, "\n".join(lines) + "\n")
    log.info("held-out aggregate delta %.6f at KV ratio %.4f", agg_d, agg_cr)
    return path


def cmd_diagnose(cfg: RunConfig, args) -> Path:
    out = _out_dir(cfg)
    fp = cfg.fingerprint()
    paths = [Path(p) for p in args.bases] if args.bases else [out / bases_file(m) for m in ("stief", "k_svd")]
    stores = {}
    for p in paths:
        store, bases_fp = art.read_basis_file(p)
        art.require_fingerprint(bases_fp, fp, str(p))
        name = store.provenance
        n = 2
        while name in stores:
            name, n = f"{store.provenance}_{n}", n + 1
        stores[name] = store
    stack, calib = _load_calibration(cfg, out)
    mid = cfg.middle_rank()
    ranks = (args.rank_k or mid, args.rank_v or mid)
    if args.data == "calibration":
        rows = compare_methods(stack, None, stores, ranks, per_layer_inputs=calib)
    else:
        rows = compare_methods(stack, cfg.eval_inputs(), stores, ranks)
    path = out / "diagnostics.csv"
    art.atomic_write(path, diagnostics_csv(rows))
    for metric, svg in metric_charts(rows).items():
        art.atomic_write(out / f"diagnostics_{metric}.svg", svg)
    return path


COMMANDS = {"init-config": cmd_init_config, "calibrate": cmd_calibrate, "train": cmd_train,
            "allocate": cmd_allocate, "eval": cmd_eval, "diagnose": cmd_diagnose}


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # Subcommands repeat the global flags with suppressed defaults so that a
    # flag given before the command name is not reset by the subparser.
    p = argparse.ArgumentParser(add_help=False)
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="RunConfig JSON (defaults used when omitted)")
    p.add_argument("--seed", type=int, default=d(None), help="override calibration and training seeds")
    p.add_argument("--threads", type=int, default=d(1), help="BLAS thread cap (default 1)")
    p.add_argument("--out", default=d(None), help="artifact directory (must exist)")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="stiefattn", parents=[_global_flags(suppress=False)],
                                     description="Learned low-rank KV-cache bases for a toy decoder.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("init-config", parents=[common], help="write a full-defaults config.json")
    p = sub.add_parser("calibrate", parents=[common], help="seed the stack and record per-layer inputs")
    p.add_argument("--activations", help="ingest an external activation dump instead of seeded inputs")
    p = sub.add_parser("train", parents=[common], help="fit bases and error surfaces")
    p.add_argument("--method", choices=METHODS, default="stief")
    p = sub.add_parser("allocate", parents=[common], help="choose per-layer ranks from a surface file")
    p.add_argument("--surface")
    p.add_argument("--policy", choices=POLICIES)
    p.add_argument("--epsilon", type=float, help=f"error budget (presets: {EPSILON_PRESETS})")
    p.add_argument("--rank-k", type=int)
    p.add_argument("--rank-v", type=int)
    p.add_argument("--weights", help="comma-separated per-layer weights (default: positional ramp)")
    p.add_argument("--output")
    p = sub.add_parser("eval", parents=[common], help="held-out per-layer error for an allocation")
    p.add_argument("--bases")
    p.add_argument("--allocation")
    p.add_argument("--output")
    p = sub.add_parser("diagnose", parents=[common], help="compare methods layer by layer")
    p.add_argument("--bases", nargs="+")
    p.add_argument("--data", choices=("heldout", "calibration"), default="heldout")
    p.add_argument("--rank-k", type=int)
    p.add_argument("--rank-v", type=int)
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig().validate()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg.paths.out = args.out
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("stiefattn: error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = _resolve_config(args)
        with threadpool_limits(limits=args.threads):
            path = COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"stiefattn: error: {exc}", file=sys.stderr)
        return 2
    except AllocationError as exc:
        print(f"stiefattn: allocation error: {exc}", file=sys.stderr)
        return 1
    except (StiefError, OSError, KeyError, ValueError) as exc:
        print(f"stiefattn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
