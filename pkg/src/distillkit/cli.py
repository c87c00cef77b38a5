"""Command line entry point: ``distillkit <command> --config run.yaml --out DIR``.

One run writes one directory. The manifest goes in last and lists every other
file with its sha256, so a directory with a valid manifest is a finished run.

Exit codes: 0 ok, 2 configuration, 3 runtime, 4 I/O. Failures print one JSON
line on stderr: ``{"error": kind, "exit": code, "field": path-or-null, "message": text}``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import subprocess
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import torch

from . import __version__
from .config import RunConfig, dump_yaml, load_config, load_data, parse_config, to_tree
from .datasets import SyntheticDataset
from .engine import RECORD_FIELDS, Embedder, distill, resume
from .errors import ConfigError, DistillError, IngestionError, IntegrityError
from .evaluation import (
    CORESETS,
    SWEEP_FIELDS,
    SweepContext,
    continual_learning,
    cross_architecture,
    diagnostics,
    evaluate_from_scratch,
    run_sweep,
)
from .io import file_sha256, write_csv, write_json
from .models import load_params, pretrain_embedder, save_params

log = logging.getLogger("distillkit")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    version: str
    started: str
    finished: str = ""
    files: list[dict] = field(default_factory=list)


def code_version() -> str:
    """``git describe`` of the source tree, or the package version outside a checkout."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=here, capture_output=True, text=True, timeout=10, check=True,
        )
        return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        return __version__


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, command: str, argv: list[str], config: RunConfig, out: Path):
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[Path] = []
        self.manifest = RunManifest(command, argv, to_tree(config), code_version(), _now())

    def path(self, name: str) -> Path:
        return self.out / name

    def add(self, *paths):
        for p in paths:
            p = Path(p)
            if p not in self.files:
                self.files.append(p)

    def finish(self) -> Path:
        self.manifest.finished = _now()
        self.manifest.files = [
            {"path": str(p.relative_to(self.out)), "sha256": file_sha256(p), "bytes": p.stat().st_size}
            for p in sorted(self.files)
        ]
        return write_json(self.out / "manifest.json", asdict(self.manifest))


def verify_manifest(out_dir) -> bool:
    """True when every file listed in ``out_dir/manifest.json`` exists with the recorded hash."""
    out_dir = Path(out_dir)
    manifest = json.loads((out_dir / "manifest.json").read_text())
    return all(
        (out_dir / f["path"]).is_file() and file_sha256(out_dir / f["path"]) == f["sha256"] for f in manifest["files"]
    )


def manifest_config(out_dir) -> RunConfig:
    """Re-parse the resolved config stored in a run manifest."""
    return parse_config(json.loads((Path(out_dir) / "manifest.json").read_text())["config"])


# --- shared steps -------------------------------------------------------------------


def _embedder(cfg: RunConfig, real, run: Run, path: str | None) -> Embedder:
    """Load the embedder named on the command line or in the config; otherwise pretrain one into the run dir."""
    path = path or cfg.distill.embedder_checkpoint
    if path:
        spec, params = load_params(_stem(path))
        return Embedder(spec, params)
    e = cfg.embedder
    log.info("pretraining %s embedder for %d epochs", e.spec.family, e.epochs)
    params = pretrain_embedder(e.spec, real, e.epochs, e.seed, e.recipe)
    run.add(*save_params(run.path("embedder"), e.spec, params))
    return Embedder(e.spec, params)


def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".npz", ".json") else path


def _load_synthetic(path) -> SyntheticDataset:
    syn, _ = resume(_stem(path))
    return syn


def _write_records(path: Path, records) -> Path:
    return write_csv(path, [r.to_row() for r in records], list(RECORD_FIELDS))


# --- commands --------------------------------------------------------------------------


def cmd_distill(cfg: RunConfig, args, run: Run) -> None:
    real, _ = load_data(cfg.data)
    embedder = None
    if cfg.distill.weights.lambda_cc > 0 or args.embedder:
        embedder = _embedder(cfg, real, run, args.embedder)
    syn, records = distill(cfg.distill, real, embedder, out_dir=run.out)
    run.add(run.path("synthetic.npz"), run.path("synthetic.json"))
    run.add(*sorted(run.out.glob("checkpoint_*.npz")), *sorted(run.out.glob("checkpoint_*.json")))
    run.add(_write_records(run.path("iterations.csv"), records))
    log.info("distilled %d images; final loss %.5g", len(syn.labels), records[-1].loss_total if records else float("nan"))


def _training_set(cfg: RunConfig, args, run: Run):
    if args.checkpoint:
        return _load_synthetic(args.checkpoint[0]), str(args.checkpoint[0])
    real, _ = load_data(cfg.data)
    if args.baseline == "full":
        return real, "full"
    embed = _embedder(cfg, real, run, args.embedder) if args.baseline in ("herding", "kcenter") else None
    rng = cfg.eval.seed
    return CORESETS[args.baseline](real, cfg.distill.ipc, embed, rng), f"coreset:{args.baseline}"


def cmd_eval(cfg: RunConfig, args, run: Run) -> None:
    train, source = _training_set(cfg, args, run)
    _, test = load_data(cfg.data)
    e = cfg.eval
    report = evaluate_from_scratch(train, e.arch, test, e.repeats, e.seed, e.recipe, e.augment)
    run.add(write_json(run.path("report.json"), dict(asdict(report), source=source)))
    log.info("top-1 %.4f +- %.4f over %d repeats", report.top1_mean, report.top1_std, report.repeats)


def cmd_xarch(cfg: RunConfig, args, run: Run) -> None:
    train, source = _training_set(cfg, args, run)
    _, test = load_data(cfg.data)
    e = cfg.eval
    reports = cross_architecture(train, e.arch_list(), test, e.repeats, e.seed, e.recipe, e.augment)
    run.add(write_json(run.path("xarch.json"), {"source": source, "reports": [asdict(r) for r in reports]}))
    first = reports[0].top1_mean
    rows = [{"arch": r.arch, "top1_mean": r.top1_mean, "top1_std": r.top1_std, "drop": first - r.top1_mean}
            for r in reports]
    run.add(write_csv(run.path("xarch.csv"), rows, ["arch", "top1_mean", "top1_std", "drop"]))


def cmd_sweep(cfg: RunConfig, args, run: Run) -> None:
    real, test = load_data(cfg.data)
    embedder = _embedder(cfg, real, run, args.embedder)
    ctx = SweepContext(real, test, embedder, cfg.eval.arch, cfg.eval.repeats, cfg.eval.recipe,
                       cfg.eval.seed, cfg.diagnose.extractor_seed)
    rows = run_sweep(cfg.sweep.axis, cfg.distill, list(cfg.sweep.values), ctx)
    run.add(write_csv(run.path("sweep.csv"), rows, SWEEP_FIELDS))


def cmd_continual(cfg: RunConfig, args, run: Run) -> None:
    real, test = load_data(cfg.data)
    c = cfg.continual
    embedder = None
    if "herding" in c.methods or ("distill" in c.methods and cfg.distill.weights.lambda_cc > 0):
        embedder = _embedder(cfg, real, run, args.embedder)
    rows, results = [], {}
    for method in c.methods:
        res = continual_learning(real, test, c.steps, c.buffer_per_class, method, c.seed, cfg.distill, embedder,
                                 cfg.eval.arch, cfg.eval.recipe, c.orders, c.nets)
        results[method] = {"curves": res.curves, "orders": res.orders, "mean": res.mean, "std": res.std}
        rows += [dict(method=method, **r) for r in res.rows()]
    run.add(write_csv(run.path("continual.csv"), rows, ["method", "step", "mean", "std"]))
    run.add(write_json(run.path("continual.json"), results))


def cmd_diagnose(cfg: RunConfig, args, run: Run) -> None:
    if not args.checkpoint:
        raise ConfigError("diagnose needs at least one --checkpoint", field="checkpoint")
    real, _ = load_data(cfg.data)
    embedder = _embedder(cfg, real, run, args.embedder)
    records = []
    real_proj = None
    for i, ck in enumerate(args.checkpoint):
        rec = diagnostics(_load_synthetic(ck), real, embedder, cfg.diagnose.extractor_seed, cfg.distill.extractor)
        proj = run.path(f"projection_syn_{i}.csv")
        run.add(write_csv(proj, [dict(zip("xy", p[:2]), **{"class": p[2]}) for p in rec.projection_syn],
                          ["x", "y", "class"]))
        records.append(dict(rec.summary(), checkpoint=str(ck), projection=proj.name))
        real_proj = rec.projection_real
    run.add(write_csv(run.path("projection_real.csv"), [dict(zip("xy", p[:2]), **{"class": p[2]}) for p in real_proj],
                      ["x", "y", "class"]))
    run.add(write_json(run.path("diagnostics.json"), {"records": records}))


COMMANDS = {
    "distill": cmd_distill,
    "eval": cmd_eval,
    "xarch": cmd_xarch,
    "sweep": cmd_sweep,
    "continual": cmd_continual,
    "diagnose": cmd_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distillkit", description="Dataset distillation with class centralization "
                                     "and covariance matching.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run config; omitted keys take the toy defaults")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the master distillation seed (distill.seed)")
        p.add_argument("--quiet", action="store_true", help="only log warnings and errors")
        p.add_argument("--embedder", help="pretrained embedder checkpoint (path stem or .npz)")
        if name in ("eval", "xarch", "diagnose"):
            p.add_argument("--checkpoint", action="append", help="synthetic checkpoint (repeat for diagnose)")
        if name in ("eval", "xarch"):
            p.add_argument("--baseline", choices=["random", "herding", "kcenter", "full"],
                           help="evaluate a coreset of size distill.ipc, or the full train set, instead of a checkpoint")
        if name == "sweep":
            p.add_argument("--axis", choices=["beta", "lambda_cc", "lambda_cm", "ipc", "iterations"])
            p.add_argument("--values", help="comma-separated sweep values")
    return parser


def _fail(kind: str, code: int, exc: BaseException) -> int:
    line = {"error": kind, "exit": code, "field": getattr(exc, "field", None), "message": str(exc)}
    print(json.dumps(line, sort_keys=True), file=sys.stderr)
    return code


def _threads():
    value = os.environ.get("DISTILLKIT_THREADS")
    if value is None:
        return
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"DISTILLKIT_THREADS must be a positive integer, got {value!r}",
                          field="DISTILLKIT_THREADS") from None
    torch.set_num_threads(n)


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, distill=cfg.distill.replace(seed=args.seed))
    if args.command in ("eval", "xarch"):
        if bool(args.checkpoint) == bool(args.baseline):
            raise ConfigError("give exactly one of --checkpoint or --baseline", field="checkpoint")
        if args.checkpoint and len(args.checkpoint) > 1:
            raise ConfigError("only one --checkpoint is allowed here", field="checkpoint")
    if args.command == "sweep" and (args.axis or args.values):
        try:
            values = tuple(float(v) for v in args.values.split(",")) if args.values else cfg.sweep.values
        except ValueError:
            raise ConfigError(f"bad --values {args.values!r}", field="sweep.values") from None
        tree = to_tree(cfg)
        tree["sweep"] = {"axis": args.axis or cfg.sweep.axis, "values": list(values)}
        cfg = parse_config(tree)
    return cfg


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        _threads()
        cfg = _resolve(args)
        run = Run(args.command, argv, cfg, Path(args.out))
        (run.path("config.yaml")).write_text(dump_yaml(cfg))
        run.add(run.path("config.yaml"))
        COMMANDS[args.command](cfg, args, run)
        run.finish()
    except ConfigError as exc:
        return _fail("config", EXIT_CONFIG, exc)
    except (IngestionError, IntegrityError, OSError) as exc:
        return _fail("io", EXIT_IO, exc)
    except (DistillError, ValueError, RuntimeError) as exc:
        return _fail("runtime", EXIT_RUNTIME, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
