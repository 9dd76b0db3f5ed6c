"""Command-line front end: training, evaluation, sweeps, and diagnostics.

Subcommands: ``train``, ``eval``, ``sweep-tau``, ``analyze``, ``energy``,
``make-data``, ``convert-idx``. Run settings come from a TOML key/value
config file with per-key CLI overrides (``--override key=value``,
repeatable); precedence is override > config file > built-in default.
Every command is deterministic given ``--seed``; outputs land in ``--out``
(or ``$SPIKEMATCH_OUT``, default ``./runs``) as plot-ready CSV/JSON files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - version-dependent import
    import tomli as tomllib

from .analysis import (
    cosine_diversity,
    diversity_probe,
    energy_estimate,
    last_layer_features,
    measured_zetas,
    pairwise_kl,
)
from .data import Dataset, convert_idx, load_sdf, make_synthetic, save_sdf
from .network import forward_sequence, load_checkpoint
from .objectives import softmax
from .training import RunConfig, evaluate, run_training

EXIT_USAGE = 2

_KEY_ALIASES = {"lambda": "lam"}
_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


class ConfigKeyError(Exception):
    """Unknown or unparsable configuration key."""

    def __init__(self, key: str, detail: str = "unknown key"):
        super().__init__(f"invalid config entry {key!r}: {detail}")
        self.key = key


def _coerce(key: str, value):
    field = _KEY_ALIASES.get(key, key)
    if field not in _FIELD_TYPES:
        raise ConfigKeyError(key)
    kind = _FIELD_TYPES[field]
    try:
        if kind == "bool":
            if isinstance(value, bool):
                return field, value
            text = str(value).strip().lower()
            if text in ("true", "1", "yes"):
                return field, True
            if text in ("false", "0", "no"):
                return field, False
            raise ValueError(f"not a boolean: {value!r}")
        if kind == "int":
            return field, int(value)
        if kind == "float":
            return field, float(value)
        return field, str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigKeyError(key, str(exc)) from exc


def load_run_config(path: str | None, overrides, flag_values: dict) -> RunConfig:
    """Defaults, then config file, then convenience flags, then overrides."""
    values: dict = {}
    if path:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        for key, val in raw.items():
            field, coerced = _coerce(key, val)
            values[field] = coerced
    for key, val in flag_values.items():
        if val is not None:
            values[key] = val
    for entry in overrides or []:
        key, sep, val = entry.partition("=")
        if not sep:
            raise ConfigKeyError(entry, "expected key=value")
        field, coerced = _coerce(key.strip(), val.strip())
        values[field] = coerced
    try:
        return RunConfig(**values)
    except ValueError as exc:
        raise ConfigKeyError(", ".join(sorted(values)), str(exc)) from exc


def _out_dir(args) -> str:
    out = args.out or os.environ.get("SPIKEMATCH_OUT") or "runs"
    os.makedirs(out, exist_ok=True)
    return out


def _load_dataset(path: str) -> Dataset:
    if not path:
        raise FileNotFoundError("no dataset path configured (key 'data')")
    return load_sdf(path)


def _write_matrix_csv(path, matrix: np.ndarray, prefix: str) -> None:
    cols = ",".join(f"{prefix}{j + 1}" for j in range(matrix.shape[1]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(cols + "\n")
        for row in matrix:
            fh.write(",".join(f"{v:.10g}" for v in row) + "\n")


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_run_config(
        args.config,
        args.override,
        {"seed": args.seed, "threads": args.threads, "eval_every": args.eval_every},
    )
    ds = _load_dataset(cfg.data)
    eval_ds = load_sdf(cfg.test_data) if cfg.test_data else None
    out = _out_dir(args)
    result = run_training(ds, cfg, eval_ds=eval_ds, out_dir=out)
    last = result.metrics[-1]
    print(
        f"finished {cfg.iterations} iterations: acc={last['acc']:.4f} "
        f"ema_acc={last['ema_acc']:.4f} (outputs in {out})"
    )
    return 0


def cmd_eval(args) -> int:
    net, ncfg, run_cfg = load_checkpoint(args.checkpoint)
    ds = load_sdf(args.data)
    num_steps = (run_cfg or {}).get("num_steps", 4)
    report = evaluate(net, ds, ncfg, num_steps)
    summary = {
        "accuracy": report.accuracy,
        "per_class_accuracy": report.per_class_accuracy.tolist(),
        "mean_prediction": report.mean_prediction.tolist(),
        "ece": report.calibration.ece,
    }
    out = _out_dir(args)
    with open(os.path.join(out, "eval.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_sweep_tau(args) -> int:
    taus = [float(v) for v in args.taus.split(",") if v.strip()]
    if len(taus) < 2:
        print("sweep-tau needs at least two tau values", file=sys.stderr)
        return EXIT_USAGE
    cfg = load_run_config(
        args.config,
        args.override,
        {"seed": args.seed, "threads": args.threads, "eval_every": args.eval_every},
    )
    ds = _load_dataset(cfg.data)
    eval_ds = load_sdf(cfg.test_data) if cfg.test_data else ds
    out = _out_dir(args)
    probe = eval_ds.images[: min(len(eval_ds), args.probe_samples)]
    rows = []
    for tau in taus:
        run_cfg = dataclasses.replace(cfg, tau=tau)
        result = run_training(ds, run_cfg)
        metrics = diversity_probe(
            result.ema_model, run_cfg.neuron(), probe, run_cfg.num_steps
        )
        rows.append(
            (
                tau,
                result.metrics[-1]["ema_acc"],
                metrics["mean_cosine"],
                metrics["effective_rank"],
            )
        )
    path = os.path.join(out, "sweep_tau.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("tau,accuracy,mean_cosine,effective_rank\n")
        for row in rows:
            fh.write(",".join(f"{v:.10g}" for v in row) + "\n")
    print(f"wrote {path}")
    return 0


def cmd_analyze(args) -> int:
    net, ncfg, run_cfg = load_checkpoint(args.checkpoint)
    ds = load_sdf(args.data)
    num_steps = (run_cfg or {}).get("num_steps", 4)
    out = _out_dir(args)

    probe = ds.images[: min(len(ds), args.probe_samples)]
    trace, tape = forward_sequence(probe, net, num_steps, ncfg)
    feats = last_layer_features(net, tape)
    dists = softmax(trace.O).transpose(1, 0, 2)
    cos_mats = []
    kl_mats = []
    for b in range(feats.shape[0]):
        mat, _ = cosine_diversity(feats[b])
        cos_mats.append(mat)
        kl_mats.append(pairwise_kl(dists[b]))
    stacked = np.stack(cos_mats)
    defined = ~np.isnan(stacked)
    counts = defined.sum(axis=0)
    mean_cos_mat = np.where(
        counts > 0, np.where(defined, stacked, 0.0).sum(axis=0) / np.maximum(counts, 1), np.nan
    )
    _write_matrix_csv(os.path.join(out, "cosine_matrix.csv"), mean_cos_mat, "t")
    _write_matrix_csv(
        os.path.join(out, "kl_matrix.csv"), np.mean(np.stack(kl_mats), axis=0), "t"
    )

    report = evaluate(net, ds, ncfg, num_steps, bins=args.bins)
    cal = report.calibration
    with open(os.path.join(out, "calibration.csv"), "w", encoding="utf-8") as fh:
        fh.write("bin_low,bin_high,confidence,accuracy,count\n")
        for i in range(cal.bins):
            fh.write(
                f"{i / cal.bins:.10g},{(i + 1) / cal.bins:.10g},"
                f"{cal.bin_confidence[i]:.10g},{cal.bin_accuracy[i]:.10g},"
                f"{int(cal.bin_count[i])}\n"
            )

    summary = diversity_probe(net, ncfg, probe, num_steps)
    summary.update({"accuracy": report.accuracy, "ece": cal.ece, "bins": cal.bins})
    with open(os.path.join(out, "analysis.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_energy(args) -> int:
    net, ncfg, run_cfg = load_checkpoint(args.checkpoint)
    ds = load_sdf(args.data)
    num_steps = (run_cfg or {}).get("num_steps", 4)
    probe = ds.images[: min(len(ds), args.probe_samples)]
    _, tape = forward_sequence(probe, net, num_steps, ncfg)
    zetas = measured_zetas(net, tape)
    total, rows = energy_estimate(net, zetas, input_hw=ds.image_shape[1:])
    out = _out_dir(args)
    path = os.path.join(out, "energy.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("layer,kind,zeta,ops,energy_pj\n")
        for row, zeta in zip(rows, zetas):
            fh.write(
                f"{row['layer']},{row['kind']},{zeta:.10g},"
                f"{row['ops']:.10g},{row['energy_pj']:.10g}\n"
            )
    print(f"{'layer':>5} {'kind':>8} {'zeta':>8} {'ops':>14} {'energy_pj':>14}")
    for row, zeta in zip(rows, zetas):
        print(
            f"{row['layer']:>5} {row['kind']:>8} {zeta:>8.4f} "
            f"{row['ops']:>14.1f} {row['energy_pj']:>14.2f}"
        )
    print(f"total energy: {total:.2f} pJ (written to {path})")
    return 0


def cmd_make_data(args) -> int:
    ds = make_synthetic(
        args.kind,
        args.classes,
        args.per_class,
        args.height,
        args.width,
        args.noise,
        args.seed if args.seed is not None else 0,
    )
    save_sdf(args.out_file, ds)
    print(f"wrote {args.out_file}: {len(ds)} images, {ds.classes} classes")
    return 0


def cmd_convert_idx(args) -> int:
    ds = convert_idx(args.images, args.labels)
    save_sdf(args.out_file, ds)
    print(f"wrote {args.out_file}: {len(ds)} images, {ds.classes} classes")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="TOML run-config file")
    p.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory ($SPIKEMATCH_OUT)")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--eval-every", dest="eval_every", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spikematch",
        description="Spiking-network semi-supervised training and diagnostics",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model per the run config")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep-tau", help="train at several leakage factors")
    _add_common(p)
    p.add_argument("--taus", required=True, help="comma-separated leakage factors")
    p.add_argument("--probe-samples", type=int, default=64)
    p.set_defaults(fn=cmd_sweep_tau)

    p = sub.add_parser("analyze", help="diversity and calibration reports")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--probe-samples", type=int, default=64)
    p.add_argument("--bins", type=int, default=10)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("energy", help="estimate inference energy")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--probe-samples", type=int, default=64)
    p.set_defaults(fn=cmd_energy)

    p = sub.add_parser("make-data", help="generate a synthetic SDF dataset")
    _add_common(p)
    p.add_argument("--kind", choices=("gaussian_blobs", "striped_patterns"),
                   default="gaussian_blobs")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", dest="per_class", type=int, default=500)
    p.add_argument("--height", type=int, default=28)
    p.add_argument("--width", type=int, default=28)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--out-file", dest="out_file", required=True)
    p.set_defaults(fn=cmd_make_data)

    p = sub.add_parser("convert-idx", help="convert IDX digit files to SDF")
    _add_common(p)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out-file", dest="out_file", required=True)
    p.set_defaults(fn=cmd_convert_idx)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigKeyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
