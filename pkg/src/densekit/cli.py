"""Command-line entry point: ``densekit <command> [spec] [options]``.

Every command writes its files into the output directory (``--out``, else
``$DENSEKIT_OUT``, else ``./densekit-out``) together with ``manifest.json``,
which is the only file holding timestamps and timings. Failures print one
line ``E_CODE: message`` to stderr and exit with the code of the error class.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from densekit import __version__
from densekit.builder.config import NETWORK_EXTRA, apply_fields, load_file, spec_from_section
from densekit.builder.spec import NetworkSpec
from densekit.errors import ConfigError, DataError, DenseKitError, UsageError

OUT_ENV = "DENSEKIT_OUT"
DEFAULT_OUT = "densekit-out"
GRADCHECK_EXIT = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------------ inputs


def _parse_sets(items: List[str]) -> Dict[str, Dict[str, str]]:
    """``--set key=value`` (network) or ``--set section.key=value``."""
    out: Dict[str, Dict[str, str]] = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip().lower()
        section, _, name = key.rpartition(".")
        section = section or "network"
        if section not in ("network", "train", "sweep"):
            raise ConfigError(f"unknown key {key!r}: section {section!r} does not exist")
        out.setdefault(section, {})[name] = value.strip()
    return out


def _load(args) -> Dict[str, Dict[str, object]]:
    """Config sections from the spec argument (file or preset name) plus overrides."""
    cfg: Dict[str, Dict[str, object]] = {}
    src = getattr(args, "spec", None)
    if src:
        if Path(src).exists():
            cfg = {k: dict(v) for k, v in load_file(src).items()}
        elif src.endswith((".cfg", ".ini", ".json", ".conf")) or os.sep in src:
            raise ConfigError(f"cannot read config {src}: no such file")
        else:
            cfg = {"network": {"preset": src}}
    for section, values in _parse_sets(getattr(args, "set", None)).items():
        cfg.setdefault(section, {}).update(values)
    return cfg


def _spec(cfg, default: Optional[NetworkSpec] = None) -> NetworkSpec:
    values = cfg.get("network")
    if not values:
        if default is None:
            raise UsageError("a network spec (config file or preset name) is required")
        return default
    return spec_from_section(values)


def _train_config(cfg, args):
    from densekit.train.config import TrainConfig

    values = dict(cfg.get("train", {}))
    if getattr(args, "epochs", None) is not None:
        values["epochs"] = args.epochs
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return apply_fields(TrainConfig, values, "train")


def _input_shape(text: Optional[str], spec: NetworkSpec, batch: int = 1) -> tuple:
    if not text:
        size = 224 if spec.stem == "imagenet" else 32
        return (batch, spec.in_channels, size, size)
    try:
        parts = tuple(int(p) for p in text.replace("x", ",").split(",") if p.strip())
    except ValueError:
        raise UsageError(f"--input-shape: cannot parse {text!r}; use H,W or N,C,H,W")
    if len(parts) == 2:
        return (batch, spec.in_channels) + parts
    if len(parts) == 4:
        return parts
    raise UsageError(f"--input-shape: expected H,W or N,C,H,W, got {text!r}")


def _ints(text: str, flag: str) -> List[int]:
    try:
        out = []
        for part in text.split(","):
            part = part.strip()
            if ":" in part:  # start:stop:step, stop inclusive
                a, b, *c = (int(v) for v in part.split(":"))
                out.extend(range(a, b + 1, c[0] if c else 1))
            elif part:
                out.append(int(part))
        return out
    except ValueError:
        raise UsageError(f"{flag}: cannot parse {text!r}")


def _datasets(args, cfg, spec, seed):
    from densekit.train.data import GENERATORS, load_dataset, normalize, split, synthetic

    name = args.dataset
    if name in GENERATORS:
        kw = {"channels": spec.in_channels}
        if name == "blobs":
            kw["classes"] = min(spec.classes, args.classes) if args.classes else min(spec.classes, 2)
        train = synthetic(name, args.samples, args.size, seed=seed, **kw)
        ev = synthetic(name, args.eval_samples, args.size, seed=seed + 1, **kw)
    else:
        full = load_dataset(name, classes=spec.classes)
        train, ev = split(full, 0.2, seed)
    train = normalize(train)
    return train, normalize(ev, train.mean, train.std)


# ------------------------------------------------------------------ outputs


class Outputs:
    def __init__(self, args, command: str):
        out = args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT
        self.dir = Path(out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.files: List[Path] = []
        self.started = time.perf_counter()
        self.when = datetime.now(timezone.utc).isoformat(timespec="seconds")
        self.plot = not args.no_plot
        self.extra: dict = {}

    def text(self, name: str, content: str) -> Path:
        path = self.dir / name
        path.write_text(content)
        self.files.append(path)
        return path

    def add(self, path: Path) -> Path:
        self.files.append(Path(path))
        return Path(path)

    def figure(self, fn, data, name: str):
        if self.plot:
            self.add(fn(data, self.dir / name))

    def manifest(self, argv):
        entries = {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in self.files}
        body = {
            "command": self.command,
            "argv": list(argv),
            "version": __version__,
            "started_utc": self.when,
            "elapsed_ms": round((time.perf_counter() - self.started) * 1e3, 3),
            "files": entries,
        }
        body.update(self.extra)
        (self.dir / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ commands


def cmd_describe(args, out: Outputs):
    from densekit.accounting import cross_check

    spec = _spec(_load(args))
    report = cross_check(spec, _input_shape(args.input_shape, spec))
    out.text("describe.json", report.to_json() + "\n")
    out.text("layers.csv", report.to_csv())
    print(report.summary())
    print(f"edges per block: {report.edges} (total {report.total_edges})")
    return 0


def cmd_memplan(args, out: Outputs):
    from densekit.accounting import block_resolutions
    from densekit.builder.graph import build
    from densekit.memory.plan import STRATEGIES, BlockShape, audit_peak, plan, write_csv

    spec = _spec(_load(args))
    strategies = STRATEGIES if args.strategy == "all" else (args.strategy,)
    shape = _input_shape(args.input_shape, spec, args.batch)
    graph = build(spec)  # zero weights: only channel layout matters
    n = shape[0]
    sizes = block_resolutions(spec, shape[2:])
    if not 1 <= args.block <= len(graph.blocks):
        raise UsageError(f"--block: {args.block} outside 1..{len(graph.blocks)}")
    elem = args.elem_bytes
    jobs = []
    if args.layers:
        base = BlockShape.from_block(graph.blocks[args.block - 1])
        h, w = sizes[args.block - 1]
        for M in _ints(args.layers, "--layers"):
            jobs.append((BlockShape(base.k0, base.growth, M, base.bottleneck_mult), h, w))
    else:
        for block, (h, w) in zip(graph.blocks, sizes):
            jobs.append((BlockShape.from_block(block), h, w))
    reports = []
    for strategy in strategies:
        for blk, h, w in jobs:
            r = audit_peak(plan(strategy, blk, args.mode, n, h, w, elem))
            if args.time:
                from densekit.memory.execute import time_block

                r.wall_ms = time_block(blk, strategy, n, h, w, repeats=args.time)
            reports.append(r)
    out.text("memplan.csv", write_csv(reports))
    out.figure(_plot("plot_memory"), reports, "memplan.png")
    for r in reports:
        print(f"{r.strategy:17s} M={r.depth:3d} fwd={r.feature_bytes_forward:,} peak={r.feature_peak_bytes:,} "
              f"stored_maps={r.stored_maps}")
    return 0


def cmd_train(args, out: Outputs):
    from densekit.train.loop import build_for_training, train

    cfg = _load(args)
    spec = _spec(cfg)
    tc = _train_config(cfg, args)
    train_set, eval_set = _datasets(args, cfg, spec, tc.seed)
    graph = build_for_training(spec, tc)
    result = train(graph, train_set, tc, args.strategy, eval_set, out.dir / "checkpoint.dkc", timing=args.time,
                   log=lambda m: print(f"epoch {m.epoch:3d} lr {m.lr:.4g} loss {m.train_loss:.4f} "
                                       f"train_err {m.train_err:.4f} eval_err {m.eval_err:.4f}"))
    out.add(result.checkpoint)
    out.text("metrics.csv", result.to_csv())
    out.figure(_plot("plot_metrics"), result.metrics, "metrics.png")
    return 0


def cmd_sweep(args, out: Outputs):
    from densekit.train.sweep import SweepSpec, run_sweep, sweep_csv

    cfg = _load(args)
    base = _spec(cfg)
    tc = _train_config(cfg, args)
    values = dict(cfg.get("sweep", {}))
    if args.vary:
        values["vary"] = args.vary
    if args.no_train:
        values["train"] = "false"
    if args.workers:
        values["workers"] = str(args.workers)
    vary = str(values.get("vary", "growth")).strip()
    if "values" in values and isinstance(values["values"], str):
        raw = [v.strip() for v in values["values"].split(",") if v.strip()]
        typ = type(getattr(base, vary, ""))
        values["values"] = tuple(typ(v) if typ in (int, float) else v for v in raw)
    if "depths" in values and isinstance(values["depths"], str):
        values["depths"] = tuple(tuple(int(x) for x in grp.replace(",", " ").split())
                                 for grp in values["depths"].split(";") if grp.strip())
    from densekit.train.sweep import SweepSpec as _S

    sweep = apply_fields(_S, values, "sweep", base=_S(vary=vary))
    train_set, eval_set = _datasets(args, cfg, base, tc.seed)
    rows = run_sweep(sweep, base, tc, train_set, eval_set, args.strategy)
    out.text("sweep.csv", sweep_csv(rows))
    out.figure(_plot("plot_sweep"), rows, "sweep.png")
    for r in rows:
        err = "" if r.error is None else f" error {r.error:.4f}"
        print(f"{r.config}: params {r.params:,} macs {r.macs:,}{err}")
    return 0


def cmd_heatmap(args, out: Outputs):
    from densekit.builder.graph import build
    from densekit.train.checkpoint import load_checkpoint, read_checkpoint
    from densekit.train.heatmap import feature_reuse_heatmap

    cfg = _load(args)
    spec = _spec(cfg)
    if args.checkpoint:
        mode = read_checkpoint(args.checkpoint)["mode"]
        # dropout only inserts identity layers at eval time; match the spec the checkpoint was saved with
        graph = build(spec, mode)
        try:
            load_checkpoint(graph, args.checkpoint)
        except DataError:
            tc = _train_config(cfg, args)
            graph = build(spec.replace(dropout_rate=tc.dropout_rate), mode)
            load_checkpoint(graph, args.checkpoint)
    else:
        graph = build(spec, "float64", seed=args.seed or 0)
    report = feature_reuse_heatmap(graph)
    out.text("heatmap.csv", report.to_csv())
    out.figure(_plot("plot_heatmap"), report, "heatmap.png")
    for b in report.blocks:
        print(f"block {b.block}: {b.matrix.shape[0]} targets x {b.matrix.shape[1]} sources"
              + (f", last row = {b.consumer}" if b.consumer else ""))
    return 0


DEFAULT_GRADCHECK_SPEC = NetworkSpec(blocks=(2, 2), growth=4, classes=3, name="gradcheck-tiny")


def cmd_gradcheck(args, out: Outputs):
    from densekit.autodiff.gradcheck import gradcheck_network

    if args.samples < 1:
        raise UsageError(f"--samples: must be >= 1, got {args.samples}")
    spec = _spec(_load(args), DEFAULT_GRADCHECK_SPEC)
    result = gradcheck_network(spec, args.samples, seed=args.seed or 0, strategy=args.strategy,
                               corrupt=args.corrupt, tol=args.tol)
    lines = ["param,index,analytic,numeric,rel_err"]
    for p in result.probes:
        lines.append(f"{p.name},{' '.join(map(str, p.index))},{p.analytic!r},{p.numeric!r},{p.rel_err!r}")
    out.text("gradcheck.csv", "\n".join(lines) + "\n")
    print(f"{len(result.probes)} coordinates, max rel err {result.max_rel_err:.3e} (tol {result.tol:g})")
    if result.passed:
        print("PASS")
        return 0
    for p in result.failures():
        print(f"FAIL {p.name}[{','.join(map(str, p.index))}]: analytic {p.analytic:.6e} numeric {p.numeric:.6e} "
              f"rel err {p.rel_err:.3e}")
    w = result.worst
    print(f"E_GRADCHECK: gradient mismatch at {w.name}[{','.join(map(str, w.index))}]", file=sys.stderr)
    return GRADCHECK_EXIT


def _plot(name):
    def call(data, path):
        from densekit import plotting

        return getattr(plotting, name)(data, path)

    return call


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="densekit", description="Build, audit and train DenseNet-style networks.")
    p.add_argument("--version", action="version", version=f"densekit {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, spec_required=True):
        sp.add_argument("spec", nargs=None if spec_required else "?",
                        help="config file (key=value sections or JSON) or preset name")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key; prefix with train. or sweep. for those sections")
        sp.add_argument("-o", "--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
        sp.add_argument("--no-plot", action="store_true", help="skip PNG figures")
        sp.add_argument("--seed", type=int)

    def data(sp):
        sp.add_argument("--dataset", default="blobs", help="blobs, shapes, or a .dkds binary file")
        sp.add_argument("--samples", type=int, default=256, help="synthetic training samples")
        sp.add_argument("--eval-samples", type=int, default=128)
        sp.add_argument("--size", type=int, default=16, help="synthetic image size")
        sp.add_argument("--classes", type=int, default=None, help="classes for the blobs generator")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--strategy", default="naive", choices=("naive", "shared", "shared+recompute"))

    sp = sub.add_parser("describe", help="parameter/MAC/depth report")
    common(sp)
    sp.add_argument("--input-shape", help="H,W or N,C,H,W (default 32x32, or 224x224 for ImageNet stems)")

    sp = sub.add_parser("memplan", help="memory plans per strategy")
    common(sp)
    sp.add_argument("--strategy", default="all", choices=("all", "naive", "shared", "shared+recompute"))
    sp.add_argument("--mode", default="training", choices=("training", "inference"))
    sp.add_argument("--batch", type=int, default=1)
    sp.add_argument("--input-shape")
    sp.add_argument("--layers", help="block depths to plan, e.g. 4:64:4 or 1,2,6")
    sp.add_argument("--block", type=int, default=1, help="block whose k0, k, m and resolution --layers uses")
    sp.add_argument("--elem-bytes", type=int, default=4)
    sp.add_argument("--time", type=int, default=0, metavar="REPEATS",
                    help="also time forward+backward per row (fills wall_ms)")

    sp = sub.add_parser("train", help="train on a desk dataset")
    common(sp)
    data(sp)
    sp.add_argument("--time", action="store_true", help="fill the wall_ms metrics column")

    sp = sub.add_parser("sweep", help="vary one hyperparameter across block layouts")
    common(sp)
    data(sp)
    sp.add_argument("--vary")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--no-train", action="store_true", help="counts only")

    sp = sub.add_parser("heatmap", help="feature-reuse heatmap of a (trained) network")
    common(sp)
    sp.add_argument("--checkpoint")

    sp = sub.add_parser("gradcheck", help="finite-difference gradient check")
    common(sp, spec_required=False)
    sp.add_argument("--samples", type=int, default=20)
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.add_argument("--strategy", default="naive", choices=("naive", "shared", "shared+recompute"))
    sp.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    return p


COMMANDS = {
    "describe": cmd_describe,
    "memplan": cmd_memplan,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "heatmap": cmd_heatmap,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        out = Outputs(args, args.command)
        code = COMMANDS[args.command](args, out)
        out.manifest(argv)
        return code
    except DenseKitError as e:
        print(f"{e.code}: {_one_line(e)}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        print("E_INTERRUPTED: interrupted", file=sys.stderr)
        return 130
    except Exception as e:  # noqa: BLE001 - last-resort single-line report
        print(f"E_INTERNAL: {type(e).__name__}: {_one_line(e)}", file=sys.stderr)
        return 5


def _one_line(e) -> str:
    return " ".join(str(e).split())


if __name__ == "__main__":
    sys.exit(main())
