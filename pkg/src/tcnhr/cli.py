"""Command-line entry point.

Every subcommand parses and validates all of its inputs before writing
anything. Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from . import model as M
from . import nas
from . import pipeline as P
from . import quantizer as Q
from . import synth
from . import trainer as T
from .errors import ArgumentError, TcnHrError

log = logging.getLogger("tcnhr")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
VAL_FRACTION = 0.2
MODEL_KEYS = ("channels", "hidden")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; usage errors here are 1
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# validation helpers
# --------------------------------------------------------------------------


def _need_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {path}")
    return p


def _need_out(path: str) -> Path:
    p = Path(path)
    parent = p.parent if str(p.parent) else Path(".")
    if not parent.is_dir():
        raise UsageError(f"output directory does not exist: {parent}")
    if p.is_dir():
        raise UsageError(f"output path is a directory: {path}")
    return p


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def _read_json(path: str | None, what: str):
    if path is None:
        return None
    p = _need_file(path, what)
    try:
        return json.loads(p.read_text())
    except (ValueError, UnicodeDecodeError) as e:
        raise UsageError(f"{what} {path} is not valid JSON: {e}") from None


def _train_config(raw) -> tuple[T.TrainConfig, dict, dict]:
    """Split a config JSON object into training, model and split options."""
    if raw is not None and not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    raw = dict(raw or {})
    model_opts = {k: raw.pop(k) for k in MODEL_KEYS if k in raw}
    split = {k: raw.pop(k) for k in ("val_subject", "val_fraction") if k in raw}
    try:
        return T.TrainConfig.from_dict(raw), model_opts, split
    except (ArgumentError, TypeError) as e:
        raise UsageError(f"bad config: {e}") from None


def _seed_spec(model_opts: dict) -> M.NetworkSpec:
    try:
        return M.build_seed(**{k: tuple(v) for k, v in model_opts.items()})
    except (TcnHrError, TypeError, ValueError) as e:
        raise UsageError(f"bad model options: {e}") from None


# --------------------------------------------------------------------------
# data helpers
# --------------------------------------------------------------------------


def _split(recordings, val_subject=None, val_fraction=VAL_FRACTION):
    """(train, val) datasets: a named validation subject, else the
    chronologically last ``val_fraction`` of every subject."""
    per = {r.subject_id: P.windows_for(r) for r in recordings}
    if val_subject is not None:
        if val_subject not in per:
            raise ArgumentError(f"validation subject {val_subject!r} not in data")
        rest = [d for s, d in per.items() if s != val_subject]
        if not rest:
            raise ArgumentError("no training subjects left after holding out the validation subject")
        return T.Dataset.concat(rest), per[val_subject]
    if not 0 < val_fraction < 1:
        raise ArgumentError(f"val_fraction must be in (0, 1), got {val_fraction}")
    tr, va = [], []
    for d in per.values():
        cut = len(d) - max(1, int(round(val_fraction * len(d))))
        tr.append(d.subset(slice(0, cut)))
        va.append(d.subset(slice(cut, len(d))))
    return T.Dataset.concat(tr), T.Dataset.concat(va)


def _normalize(d: T.Dataset, norm: P.NormStats) -> T.Dataset:
    return T.Dataset(norm.apply(d.x), d.y)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_synth(a) -> None:
    out = _need_out(a.out)
    if a.subjects < 1 or a.minutes <= 0:
        raise UsageError("--subjects and --minutes must be positive")
    try:
        profiles = synth.default_profiles(a.subjects, a.minutes, seed=a.seed, alpha=a.alpha)
    except ArgumentError as e:
        raise UsageError(str(e)) from None
    recs = synth.synth_set(profiles)
    io.save_recordings(out, recs)
    print(f"wrote {len(recs)} subjects to {out}")


def cmd_train(a) -> None:
    data = _need_file(a.data, "data")
    cfg, model_opts, split = _train_config(_read_json(a.config, "config"))
    spec = _seed_spec(model_opts)
    out = _need_out(a.out)
    curve_path = _need_out(a.curve) if a.curve else _sibling(out, ".curve.csv")
    recs = io.load_recording_set(data)
    tr, va = _split(recs, **split)
    norm = P.NormStats.fit(tr.x)
    res = T.train(spec, _normalize(tr, norm), _normalize(va, norm), cfg)
    io.save_checkpoint(out, spec, res.weights, norm, meta={"best_epoch": res.best_epoch})
    T.write_curve(res.curve, curve_path)
    print(f"best epoch {res.best_epoch}: validation MAE {res.best_val_mae:.3f} BPM")


def cmd_crossval(a) -> None:
    data = _need_file(a.data, "data")
    cfg, model_opts, _ = _train_config(_read_json(a.config, "config"))
    spec = _seed_spec(model_opts)
    out_dir = Path(a.out_dir)
    if out_dir.exists() and not out_dir.is_dir():
        raise UsageError(f"--out-dir is not a directory: {out_dir}")
    recs = io.load_recording_set(data)
    result = T.loso_crossval(spec, recs, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    T.write_folds(result, out_dir / "folds.csv")
    print(f"mean MAE over {len(result.folds)} subjects: {result.mean_mae:.3f} BPM")


def _grid(raw) -> list[nas.RegularizerConfig]:
    if raw is None:
        return nas.default_grid()
    if not isinstance(raw, list) or not raw:
        raise UsageError("grid must be a non-empty JSON list of regularizer settings")
    try:
        return [nas.RegularizerConfig(**entry) for entry in raw]
    except (ArgumentError, TypeError) as e:
        raise UsageError(f"bad grid entry: {e}") from None


def cmd_search(a) -> None:
    data = _need_file(a.data, "data")
    grid = _grid(_read_json(a.grid, "grid"))
    cfg, model_opts, split = _train_config(_read_json(a.config, "config"))
    seed = _seed_spec(model_opts)
    out = _need_out(a.out)
    pareto_path = _need_out(a.pareto) if a.pareto else _sibling(out, ".pareto.csv")
    if a.iterations < 1:
        raise UsageError("--iterations must be >= 1")
    recs = io.load_recording_set(data)
    tr, va = _split(recs, **split)
    norm = P.NormStats.fit(tr.x)
    points = nas.morph_search(
        seed, _normalize(tr, norm), _normalize(va, norm), grid, cfg,
        iterations=a.iterations, retrain=not a.no_retrain, mae_bound=a.mae_bound,
    )
    nas.write_points(points, out)
    front = nas.pareto_front([p for p in points if not p.degenerate] or points, a.axis)
    nas.write_points(front, pareto_path)
    print(f"{len(points)} grid points, {len(front)} on the Pareto front")


def cmd_quantize(a) -> None:
    ckpt_path = _need_file(a.ckpt, "checkpoint")
    calib_path = _need_file(a.calib, "calibration data")
    out = _need_out(a.out)
    if a.windows < 1:
        raise UsageError("--windows must be >= 1")
    ckpt = io.load_checkpoint(ckpt_path)
    if ckpt.weights is None:
        raise ArgumentError("checkpoint has no float weights to quantize")
    norm = ckpt.norm or P.NormStats.identity(ckpt.spec.in_channels)
    windows = T.Dataset.concat(P.windows_for(r) for r in io.load_recording_set(calib_path))
    if len(windows) == 0:
        raise ArgumentError("calibration data yields no windows")
    pick = np.linspace(0, len(windows) - 1, min(a.windows, len(windows))).round().astype(int)
    calib = norm.apply(windows.x[pick])
    flat_spec, flat_w = Q.flatten_dilation(ckpt.spec, ckpt.weights)
    qm = Q.quantize_model(flat_spec, flat_w, Q.calibrate(flat_spec, flat_w, calib))
    io.save_checkpoint(out, flat_spec, flat_w, ckpt.norm, qm, meta={**ckpt.meta, "calibration_windows": len(pick)})
    print(f"quantized {len(qm.ops)} ops with {len(pick)} calibration windows")


REPORT_FIELDS = ["subject", "windows", "mae_bpm"]


def cmd_eval(a) -> None:
    ckpt_path = _need_file(a.ckpt, "checkpoint")
    data = _need_file(a.data, "data")
    out = _need_out(a.out)
    trace_path = _need_out(a.trace) if a.trace else _sibling(out, ".trace.csv")
    ckpt = io.load_checkpoint(ckpt_path)
    use_int8 = ckpt.quantized is not None and not a.float
    if a.finetune and use_int8:
        raise UsageError("--finetune adapts float weights; add --float for a quantized checkpoint")
    if not use_int8 and ckpt.weights is None:
        raise ArgumentError("checkpoint has no float weights")
    recs = io.load_recording_set(data)
    norm = ckpt.norm or P.NormStats.identity(ckpt.spec.in_channels)

    fields = list(REPORT_FIELDS)
    if a.postprocess:
        fields.append("mae_post_bpm")
    if a.finetune:
        fields += ["mae_tail_bpm", "mae_finetune_bpm"]
    rows, trace = [], []
    for rec in recs:
        d = P.windows_for(rec)
        if len(d) == 0:
            raise ArgumentError(f"subject {rec.subject_id} has no windows")
        x = norm.apply(d.x)
        raw = Q.infer_int8(ckpt.quantized, x) if use_int8 else T.predict(ckpt.spec, ckpt.weights, x)
        post = P.HRPostProcessor().run(raw) if a.postprocess else np.asarray(raw, np.float64)
        row = {"subject": rec.subject_id, "windows": len(d), "mae_bpm": T.mae(raw, d.y)}
        if a.postprocess:
            row["mae_post_bpm"] = T.mae(post, d.y)
        if a.finetune:
            ft = P.finetune(ckpt.spec, ckpt.weights, T.Dataset(x, d.y))
            row["mae_tail_bpm"] = T.mae(raw[ft.split :], d.y[ft.split :])
            row["mae_finetune_bpm"] = ft.mae
        rows.append(row)
        trace += [(rec.subject_id, i, r, p, t) for i, (r, p, t) in enumerate(zip(raw, post, d.y))]

    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for row in rows:
            w.writerow([row[f] if f in ("subject", "windows") else f"{row[f]:.4f}" for f in fields])
        w.writerow(["mean", sum(r["windows"] for r in rows)] + [f"{np.mean([r[f] for r in rows]):.4f}" for f in fields[2:]])
    with open(trace_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "window", "raw_bpm", "post_bpm", "truth_bpm"])
        for sid, i, r, p, t in trace:
            w.writerow([sid, i, f"{r:.4f}", f"{p:.4f}", f"{t:.4f}"])
    summary = "  ".join(f"{f}={np.mean([r[f] for r in rows]):.3f}" for f in fields[2:])
    print(f"{'int8' if use_int8 else 'float'} model on {len(rows)} subjects: {summary}")


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tcnhr", description="Heart-rate TCNs: data synthesis, training, search, int8 export.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="generate a synthetic recording set")
    s.add_argument("--subjects", type=int, default=6)
    s.add_argument("--minutes", type=float, default=10.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--alpha", type=float, default=0.3, help="motion-artifact intensity in [0, 1]")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train the seed network")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="JSON training options")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--curve", help="learning-curve CSV (default: <out>.curve.csv)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("crossval", help="leave-one-subject-out evaluation")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_crossval)

    s = sub.add_parser("search", help="channel-width search over a regularizer grid")
    s.add_argument("--data", required=True)
    s.add_argument("--grid", help="JSON list of {kind, strength, threshold, expansion}")
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="CSV of all grid points")
    s.add_argument("--pareto", help="Pareto CSV (default: <out>.pareto.csv)")
    s.add_argument("--axis", choices=("params", "macs"), default="params")
    s.add_argument("--iterations", type=int, default=1)
    s.add_argument("--no-retrain", action="store_true")
    s.add_argument("--mae-bound", type=float, default=7.0)
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("quantize", help="flatten dilations and quantize to int8")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--calib", required=True, help="recording set used for calibration")
    s.add_argument("--windows", type=int, default=256, help="calibration windows to sample")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("eval", help="per-subject MAE report and prediction trace")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", default="report.csv")
    s.add_argument("--trace", help="trace CSV (default: <out>.trace.csv)")
    s.add_argument("--postprocess", action="store_true")
    s.add_argument("--finetune", action="store_true")
    s.add_argument("--float", action="store_true", help="use float weights of a quantized checkpoint")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except UsageError as e:
        print(f"tcnhr {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TcnHrError, OSError) as e:
        print(f"tcnhr {args.command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
