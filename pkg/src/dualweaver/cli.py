"""Command-line entry point: ``dualweaver <command> [options]``.

Commands write into an output directory together with a ``manifest.json``
that records the resolved config, seed, timestamps and a sha256 for every
file produced. Exit codes: 0 success, 1 validation error, 2 numerical-check
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import AnalysisError, CorrelationSpec, dataset_corr, noise_sweep, rows_to_csv, scale_sweep
from .data import DataError, gen_coupled_ar, inject_noise_channels, write_csv
from .experiment import (
    ConfigError,
    ExperimentConfig,
    adapt,
    eval_summary,
    evaluate,
    fit_forecaster,
    load_series,
    prepare,
)
from .forecaster import ForecasterError
from .gradcheck import run_gradcheck
from .weaver import DenominatorError, DualWeaverModel

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
OUT_ENV = "DUALWEAVER_OUT"


class ValidationFailure(Exception):
    pass


_ACTIVE_RUNS: list["RunDir"] = []


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


class RunDir:
    """Output directory with clobber protection, a lock file and a manifest."""

    def __init__(self, path: Path, command: str, overwrite: bool):
        self.path = Path(path)
        self.command = command
        if self.path.exists() and any(p.name != ".lock" for p in self.path.iterdir()) and not overwrite:
            raise ValidationFailure(f"output directory {self.path} is not empty; pass --overwrite")
        self.path.mkdir(parents=True, exist_ok=True)
        self.lock = self.path / ".lock"
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ValidationFailure(f"{self.path} is locked by another run ({self.lock})") from None
        os.close(fd)
        self.files: list[str] = []
        self.manifest = {"command": command, "version": __version__, "started_at": _now(), "status": "running"}
        _ACTIVE_RUNS.append(self)

    def start(self, config: dict, seed: int, **extra) -> None:
        self.manifest.update(config=config, seed=seed, **extra)
        self._write_manifest()

    def write(self, name: str, text: str) -> Path:
        p = self.path / name
        p.write_text(text, encoding="utf-8")
        if name not in self.files:
            self.files.append(name)
        return p

    def _write_manifest(self) -> None:
        (self.path / "manifest.json").write_text(_dump(self.manifest), encoding="utf-8")

    def abandon(self, error: str) -> None:
        if self.lock.exists():
            self.manifest.update(status="failed", error=error, finished_at=_now())
            self._write_manifest()
            self.lock.unlink(missing_ok=True)

    def finish(self, status: str = "ok", **extra) -> None:
        self.manifest.update(extra)
        self.manifest["status"] = status
        self.manifest["finished_at"] = _now()
        self.manifest["files"] = {n: sha256_file(self.path / n) for n in self.files}
        self._write_manifest()
        self.lock.unlink(missing_ok=True)


def _out_dir(args, default: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / default


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args) -> ExperimentConfig:
    """Config file (if any), then ``--set section.key=value`` overrides, then dedicated flags."""
    d = {}
    if getattr(args, "config", None):
        try:
            d = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, val = item.split("=", 1)
        parts = key.split(".")
        cur = d
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
        cur[parts[-1]] = _parse_value(val)
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    tr = d.setdefault("train", {})
    if getattr(args, "no_bound_reg", False):
        tr["use_bound_reg"] = False
    if getattr(args, "lr", None) is not None:
        tr["lr"] = args.lr
        tr["lr_grid"] = [args.lr]
    if getattr(args, "epochs", None) is not None:
        tr["epochs"] = args.epochs
    if getattr(args, "fusion", None):
        d.setdefault("fusion", {})["kind"] = args.fusion
    cfg = ExperimentConfig.from_dict(d)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    dc = cfg.data
    run = RunDir(_out_dir(args, "synth"), "synth", args.overwrite)
    run.start(cfg.to_dict(), cfg.seed)
    s = gen_coupled_ar(cfg.seed, dc.T, dc.C, dc.phi, dc.coupling, dc.noise_std)
    s = inject_noise_channels(s, dc.noise_channels, cfg.seed)
    out = run.path / "data.csv"
    write_csv(s, out)
    run.files.append("data.csv")
    stats = {"T": s.T, "C": s.C, "mean": s.values.mean(axis=0).tolist(), "std": s.values.std(axis=0).tolist()}
    run.finish(summary=stats)
    print(f"wrote {out} (T={s.T}, C={s.C})")
    for name, m, sd in zip(s.channel_names, stats["mean"], stats["std"]):
        print(f"  {name:>10s}  mean={m:+.4f}  std={sd:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    run = RunDir(_out_dir(args, "train"), "train", args.overwrite)
    run.start(cfg.to_dict(), cfg.seed, use_bound_reg=cfg.train.use_bound_reg)
    series = load_series(cfg)
    prep = prepare(series, cfg)
    fc = fit_forecaster(prep, cfg)
    steps = []
    res = adapt(prep, fc, cfg, on_step=steps.append)
    aborted = [r for r in res.grid.reports if r.aborted]
    for r in aborted:
        run.write(f"diagnostic_lr{r.config['lr']:g}.json", _dump(r.to_dict()))
        print(f"warning: lr={r.config['lr']:g} aborted ({r.aborted}); kept its pre-abort best", file=sys.stderr)
    if len(aborted) == len(res.grid.reports):
        run.write("steps.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in steps))
        run.finish("aborted", error="; ".join(r.aborted for r in aborted))
        print("training aborted for every learning rate", file=sys.stderr)
        return EXIT_NUMERIC
    if fc.digest() != res.model.forecaster.digest():
        raise RuntimeError("forecaster digest changed")
    best = res.grid.best
    report = best.to_dict()
    report["grid"] = [{"lr": r.config["lr"], "best_val_mse": r.best_val_mse, "best_epoch": r.best_epoch,
                       "init_digest": r.init_digest, "aborted": r.aborted} for r in res.grid.reports]
    report["channel_names"] = list(prep.scaled.channel_names)
    if res.test_eval:
        report["test"] = eval_summary(res.test_eval, prep.scaled.channel_names)
    run.write("report.json", _dump(report))
    ckpt = res.model.to_dict()
    ckpt["scaler"] = {"mean": prep.scaler.mean.tolist(), "std": prep.scaler.std.tolist()}
    ckpt["channel_names"] = list(prep.scaled.channel_names)
    run.write("checkpoint.json", _dump(ckpt))
    run.write("steps.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in steps))
    run.finish(timing={str(r.config["lr"]): r.epoch_seconds for r in res.grid.reports})
    line = f"best lr={best.config['lr']} epoch={best.best_epoch} val_mse={best.best_val_mse:.6f}"
    if res.test_eval:
        line += (f" test_mse baseline={report['test']['baseline']['mse']:.6f}"
                 f" dualweaver={report['test']['dualweaver']['mse']:.6f}")
    print(line)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    try:
        ckpt = json.loads(Path(args.checkpoint).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationFailure(f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    model = DualWeaverModel.from_dict(ckpt)
    cfg.window.L, cfg.window.H = model.forecaster.L, model.forecaster.H
    prep = prepare(load_series(cfg), cfg)
    if prep.scaled.C != model.n_channels:
        raise ValidationFailure(f"checkpoint has {model.n_channels} channels, dataset has {prep.scaled.C}")
    run = RunDir(_out_dir(args, "eval"), "eval", args.overwrite)
    run.start(cfg.to_dict(), cfg.seed, checkpoint=str(args.checkpoint),
              checkpoint_sha256=sha256_file(Path(args.checkpoint)), split=args.split)
    ev = evaluate(model, prep.windows(args.split))
    summary = eval_summary(ev, prep.scaled.channel_names)
    summary["split"] = args.split
    run.write("metrics.json", _dump(summary))
    run.finish()
    print(f"{args.split}: baseline mse={summary['baseline']['mse']:.6f} mae={summary['baseline']['mae']:.6f} | "
          f"dualweaver mse={summary['dualweaver']['mse']:.6f} mae={summary['dualweaver']['mae']:.6f}")
    for row in summary["per_channel"]:
        print(f"  {row['channel']:>10s} omega={row['omega']:.6f} ori={row['mse_ori']:.6f} "
              f"our={row['mse_our']:.6f} condition={'yes' if row['condition_holds'] else 'no'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    run = RunDir(_out_dir(args, "gradcheck"), "gradcheck", args.overwrite)
    cfgd = {"seed": args.seed or 0, "tol": args.tol, "h": args.h, "corrupt": args.corrupt}
    run.start(cfgd, cfgd["seed"])
    reports = run_gradcheck(seed=cfgd["seed"], h=args.h, corrupt=args.corrupt)
    rows = [{"name": r.name, "max_rel_error": r.max_rel_error, "worst_index": list(r.worst_param_index),
             "passed": r.passed(args.tol)} for r in reports]
    run.write("gradcheck.json", _dump({"tol": args.tol, "h": args.h, "checks": rows}))
    ok = all(r["passed"] for r in rows)
    run.finish("ok" if ok else "failed")
    width = max(len(r["name"]) for r in rows)
    for r in rows:
        print(f"{'PASS' if r['passed'] else 'FAIL'}  {r['name']:<{width}}  max_rel_error={r['max_rel_error']:.3e}")
    worst = max(r["max_rel_error"] for r in rows)
    print(f"{len(rows)} tensors checked, worst relative error {worst:.3e} (tol {args.tol:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_correlate(args) -> int:
    cfg = resolve_config(args)
    series = load_series(cfg)
    spec = CorrelationSpec(patch_sizes=args.patch_sizes or cfg.analysis.patch_sizes,
                           samples=args.samples or cfg.analysis.samples, seed=cfg.seed)
    if series.C < 2:
        raise ValidationFailure(f"correlation needs at least two channels; dataset has {series.C}")
    run = RunDir(_out_dir(args, "correlate"), "correlate", args.overwrite)
    run.start({**cfg.to_dict(), "correlation": vars(spec)}, cfg.seed)
    res = dataset_corr(series, spec)
    run.write("correlation.json", _dump(res))
    run.finish()
    for p, v in res["per_patch"].items():
        print(f"P={p:>4s}  mean R={v:+.4f}  mean|R|={res['per_patch_abs'][p]:.4f}")
    print(f"avg     mean R={res['average']:+.4f}  mean|R|={res['average_abs']:.4f}")
    return EXIT_OK


def _sweep(args, name: str, fn, key: str, values) -> int:
    cfg = resolve_config(args)
    series = load_series(cfg)
    run = RunDir(_out_dir(args, name), name, args.overwrite)
    run.start(cfg.to_dict(), cfg.seed, **{key: values})
    rows = fn(series, values, cfg)
    run.write(f"{name.replace('-', '_')}.csv", rows_to_csv(rows))
    run.finish()
    print(rows_to_csv(rows), end="")
    return EXIT_OK


def cmd_noise_sweep(args) -> int:
    cfg_k = args.k_list
    if cfg_k is None:
        cfg_k = resolve_config(args).analysis.k_list
    return _sweep(args, "noise-sweep", noise_sweep, "k_list", cfg_k)


def cmd_scale_sweep(args) -> int:
    n = args.n_list
    if n is None:
        n = resolve_config(args).analysis.n_list
    return _sweep(args, "scale-sweep", scale_sweep, "n_list", n)


def cmd_verify(args) -> int:
    d = Path(args.run_dir)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationFailure(f"cannot read manifest in {d}: {exc}") from None
    bad = []
    for name, digest in manifest.get("files", {}).items():
        p = d / name
        actual = sha256_file(p) if p.exists() else None
        status = "ok" if actual == digest else ("missing" if actual is None else "MODIFIED")
        if status != "ok":
            bad.append(name)
        print(f"{status:>8s}  {name}")
    return EXIT_OK if not bad else EXIT_INVALID


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dualweaver", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command> or runs/<command>)")
        p.add_argument("--overwrite", action="store_true", help="allow writing into a non-empty directory")
        p.add_argument("--seed", type=int)
        if config:
            p.add_argument("--config", help="JSON experiment config")
            p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                           help="override one config field (value parsed as JSON when possible)")

    p = sub.add_parser("synth", help="generate a coupled-AR panel as CSV")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit + freeze the forecaster, adapt, write report/checkpoint/log")
    common(p)
    p.add_argument("--no-bound-reg", action="store_true", help="drop the bound regularizer from the objective")
    p.add_argument("--lr", type=float, help="single learning rate instead of the grid")
    p.add_argument("--epochs", type=int)
    p.add_argument("--fusion", choices=["mlp", "cnn"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every analytic gradient")
    common(p, config=False)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("correlate", help="cross-time cross-variate correlation summary")
    common(p)
    p.add_argument("--patch-sizes", type=_int_list)
    p.add_argument("--samples", type=int)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("noise-sweep", help="adaptation error vs number of injected noise channels")
    common(p)
    p.add_argument("--k-list", type=_int_list)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_noise_sweep)

    p = sub.add_parser("scale-sweep", help="adaptation gain vs number of leading channels kept")
    common(p)
    p.add_argument("--n-list", type=_int_list)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_scale_sweep)

    p = sub.add_parser("verify", help="recompute file digests recorded in a run manifest")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationFailure, ConfigError, DataError, AnalysisError, ForecasterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (DenominatorError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        while _ACTIVE_RUNS:
            _ACTIVE_RUNS.pop().abandon("command did not complete")


if __name__ == "__main__":
    sys.exit(main())
