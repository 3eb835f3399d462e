"""``pievit`` command-line entry point.

Every failure prints exactly one line ``error: <category>: <message>`` on
stderr and exits nonzero (1 for runtime failures, 2 for usage errors).
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from dataclasses import asdict
from importlib import metadata
from pathlib import Path

import numpy as np

from . import analysis, distill, pipeline, plotting, trainer
from .checkpoint import Checkpoint, config_hash, digest, load_checkpoint, save_checkpoint
from .config import TrainConfig, load_config
from .errors import DataError, DegenerateInputError, PievitError
from .vit import ViTConfig, param_shapes as vit_param_shapes

log = logging.getLogger("pievit")

PRESETS = {"desk": TrainConfig.desk, "paper": TrainConfig}


class UsageError(PievitError):
    category = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0.0.0"


def write_manifest(path, command: str, args: argparse.Namespace, config: TrainConfig | None = None,
                   artifacts: dict | None = None) -> Path:
    """Record everything needed to rerun a command, before it touches anything else."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    argv = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
            if k not in ("func",)}
    body = {
        "tool": "pievit",
        "version": tool_version(),
        "command": command,
        "arguments": argv,
        "seed": config.seed if config is not None else argv.get("seed"),
        "config": asdict(config) if config is not None else None,
        "config_hash": config.hash() if config is not None else None,
        "artifacts": {k: str(v) for k, v in (artifacts or {}).items()},
    }
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def _thread_limit():
    cap = pipeline.thread_cap()
    if cap is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=cap)


# --------------------------------------------------------------------------
# config resolution

def resolve_config(args) -> TrainConfig:
    """Preset defaults, then the config file, then explicit flags."""
    if args.no_gpc and (args.top_k is not None or args.neighborhood is not None):
        raise UsageError("--no-gpc disables neighbour selection; drop --top-k/--neighborhood")
    cfg = PRESETS[args.preset]()
    if args.config:
        cfg = load_config(args.config, cfg)
    flags = {}
    if args.seed is not None:
        flags["seed"] = args.seed
    if args.head is not None:
        flags["head"] = args.head
    if args.no_gpc:
        flags["gpc"] = False
    if args.neighborhood is not None:
        flags["neighborhood"] = args.neighborhood
    if args.top_k is not None:
        flags["top_k"] = args.top_k
    if args.teacher_momentum is not None:
        flags["teacher_momentum"] = args.teacher_momentum
    if args.max_steps is not None:
        flags["max_steps"] = args.max_steps
    return cfg.replace(**flags) if flags else cfg


# --------------------------------------------------------------------------
# shared loaders

def _load_images(args, need_labels: bool = False) -> list[pipeline.ImageSample]:
    if getattr(args, "corpus", None):
        samples = pipeline.load_corpus(args.corpus)
    elif getattr(args, "images", None):
        samples = [pipeline.load_ppm(p) for p in args.images]
    else:
        raise UsageError("give --corpus or --images")
    if not samples:
        raise DataError("no images found")
    if need_labels and any(s.label is None for s in samples):
        raise DataError("every image needs a class label (use a corpus index with labels)")
    cls = getattr(args, "label", None)
    if cls is not None:
        samples = [s for s in samples if s.label == cls]
        if not samples:
            raise DataError(f"no images with label {cls}")
    limit = getattr(args, "limit", None)
    if limit:
        samples = samples[:limit]
    return samples


def _features(ckpt: Checkpoint, samples, stream: str) -> analysis.FeatureDump:
    cfg, params = analysis.stream_params(ckpt, stream)
    if not params:
        raise DataError(f"checkpoint holds no {stream} parameters")
    return analysis.extract_features(params, np.stack([s.pixels for s in samples]),
                                     cfg.model_config(), stream,
                                     sources=[s.path or "" for s in samples],
                                     labels=[s.label for s in samples])


def random_init_checkpoint(cfg: TrainConfig) -> Checkpoint:
    """The untrained state a run with ``cfg`` starts from."""
    state = distill.init_state(cfg.model_config(), cfg.seed)
    return trainer.state_to_checkpoint(state, trainer.AdamState(), cfg)


# --------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    out = Path(args.out)
    spec = pipeline.SyntheticCorpusSpec(classes=args.classes, samples_per_class=args.per_class,
                                        resolution=args.resolution, seed=args.seed)
    write_manifest(out / "manifest.json", "synth", args, artifacts={"index": out / "index.tsv"})
    if args.classes == 1:
        log.warning("a single class makes any linear probe on this corpus degenerate")
    index = pipeline.write_corpus(pipeline.synth_corpus(spec), out)
    print(f"wrote {args.classes * args.per_class} images\t{index}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    ckpt_path = out / "checkpoint.piev"
    write_manifest(out / "manifest.json", "pretrain", args, cfg,
                   {"checkpoint": ckpt_path, "metrics": out / "metrics.tsv", "config": out / "config.txt"})
    corpus = pipeline.load_corpus(args.corpus)
    resume = trainer.resume_from(args.resume, cfg) if args.resume else None
    (out / "config.txt").write_text(cfg.to_text())

    def progress(rec):
        if not args.quiet and (rec["step"] % args.log_every == 0):
            print(f"step {rec['step']}\tL_total {rec['L_total']:.4f}\tL_cls {rec['L_cls']:.4f}"
                  f"\tL_mim {rec['L_mim']:.4f}\tlr {rec['lr']:.3g}", flush=True)

    result = trainer.train(cfg, corpus, out, resume=resume, steps=args.steps, progress=progress)
    print(f"checkpoint\t{ckpt_path}\tstep\t{result.state.step}\tsha256\t{digest(ckpt_path)}")
    return 0


def cmd_extract(args) -> int:
    out = Path(args.out)
    write_manifest(out.with_name(out.name + ".manifest.json"), "extract", args, artifacts={"dump": out})
    ckpt = load_checkpoint(args.checkpoint)
    dump = _features(ckpt, _load_images(args), args.stream)
    save_checkpoint(dump.to_checkpoint(), out)
    print(f"dump\t{out}\timages\t{len(dump)}\tdim\t{dump.cls.shape[1]}\tsha256\t{digest(out)}")
    return 0


def probe_checkpoint(ckpt: Checkpoint, samples, args) -> analysis.ProbeResult:
    dump = _features(ckpt, samples, args.stream)
    labels = np.array([s.label for s in samples])
    tr, te = analysis.split_train_test(labels, args.test_fraction, args.split_seed)
    return analysis.linear_probe(dump.cls[tr], labels[tr], dump.cls[te], labels[te],
                                 epochs=args.epochs, lr=args.lr)


def cmd_probe(args) -> int:
    out = Path(args.out)
    write_manifest(out / "manifest.json", "probe", args, artifacts={"results": out / "probe.tsv"})
    samples = _load_images(args, need_labels=True)
    ckpt = load_checkpoint(args.checkpoint)
    if args.baseline == "random":
        base = random_init_checkpoint(TrainConfig.from_text(ckpt.config_text))
    else:
        base = load_checkpoint(args.baseline)
    res = probe_checkpoint(ckpt, samples, args)
    ref = probe_checkpoint(base, samples, args)
    rows = [("checkpoint", res.accuracy), ("baseline", ref.accuracy), ("delta", res.accuracy - ref.accuracy)]
    text = "".join(f"{k}\t{v:.6f}\n" for k, v in rows)
    (out / "probe.tsv").write_text("name\taccuracy\n" + text)
    sys.stdout.write(text)
    if res.degenerate:
        log.warning("probe degenerate: single class in the training split")
    return 0


def render_pca(dump: analysis.FeatureDump, args) -> list[analysis.PCAViz]:
    sets = list(dump.patches)
    vizs = analysis.pca_visualize(sets, dump.grid, args.threshold, args.flip_fg,
                                  pooled=not args.per_image)
    if any(v.degenerate for v in vizs):
        raise DegenerateInputError("patch features are rank deficient; nothing to separate")
    return vizs


def cmd_pca(args) -> int:
    out = Path(args.out)
    write_manifest(out / "manifest.json", "pca", args, artifacts={"renders": out})
    if args.dump:
        dump = analysis.FeatureDump.from_checkpoint(load_checkpoint(args.dump))
        images = None
    else:
        if not args.checkpoint:
            raise UsageError("give --dump or --checkpoint with --corpus/--images")
        samples = _load_images(args)
        dump = _features(load_checkpoint(args.checkpoint), samples, args.stream)
        images = [s.pixels for s in samples]
    vizs = render_pca(dump, args)
    for n, v in enumerate(vizs):
        path = out / f"pca_{n:03d}.ppm"
        pipeline.save_ppm(analysis.upscale(v.rgb, args.scale).astype(np.float64) / 255.0, path)
        print(f"render\t{path}\tforeground\t{int(v.fg_mask.sum())}/{v.fg_mask.size}")
    if args.png:
        renders = [v.rgb for v in vizs]
        shown = images if images is not None else [np.zeros((*v.rgb.shape[:2], 3)) for v in vizs]
        plotting.pca_panel(shown, renders, out / "pca.png")
    return 0


def count_params(shapes) -> int:
    return int(sum(int(np.prod(s)) for s in shapes))


def module_of(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "fip" and len(parts) > 1:
        return "fip." + parts[1]
    return parts[0]


def cmd_inspect(args) -> int:
    if args.preset:
        vcfg = ViTConfig.vit_b16() if args.preset == "vit-b16" else TrainConfig.desk().model_config().vit
        n = count_params(vit_param_shapes(vcfg).values())
        print(f"preset\t{args.preset}\nencoder\t{n}\ntotal\t{n}")
        return 0
    if not args.checkpoint:
        raise UsageError("give --checkpoint or --preset")
    ckpt = load_checkpoint(args.checkpoint)
    groups = ckpt.group("student")
    if not groups:
        # feature dumps and bare record files: count every record
        groups = {k: v for k, v in ckpt.records.items() if "/" not in k and k != "rng"}
    per_module: dict[str, int] = {}
    for name, arr in groups.items():
        per_module[module_of(name)] = per_module.get(module_of(name), 0) + int(arr.size)
    total = sum(per_module.values())
    for mod in sorted(per_module):
        print(f"{mod}\t{per_module[mod]}")
    print(f"total\t{total}")
    if total == 0:
        print("0 parameters")
    print(f"step\t{ckpt.step}")
    print(f"config_hash\t{config_hash(ckpt.config_text).hex()}")
    return 0


def loss_drop(records: list[dict], window: int = 10) -> float:
    if len(records) < window:
        raise DataError(f"need at least {window} logged steps, found {len(records)}")
    first = float(np.mean([r["L_total"] for r in records[:window]]))
    last = float(np.mean([r["L_total"] for r in records[-window:]]))
    return 1.0 - last / first


def cmd_report(args) -> int:
    run, out = Path(args.run), Path(args.out)
    write_manifest(out / "manifest.json", "report", args,
                   artifacts={"losses": out / "losses.png", "schedules": out / "schedules.png",
                              "summary": out / "summary.tsv"})
    records = trainer.read_metrics(run / "metrics.tsv")
    plotting.loss_curves(records, out / "losses.png")
    plotting.schedule_curves(records, out / "schedules.png")
    rows = [("steps", len(records)), ("loss_drop", loss_drop(records))]
    ckpt_path = run / "checkpoint.piev"
    if args.corpus and ckpt_path.exists():
        ckpt = load_checkpoint(ckpt_path)
        samples = _load_images(args, need_labels=True)
        trained = probe_checkpoint(ckpt, samples, args).accuracy
        rand = probe_checkpoint(random_init_checkpoint(TrainConfig.from_text(ckpt.config_text)),
                                samples, args).accuracy
        rows += [("probe_trained", trained), ("probe_random", rand), ("probe_delta", trained - rand)]
        plotting.probe_bars({"random init": rand, "pretrained": trained}, out / "probe.png",
                            chance=1.0 / len({s.label for s in samples}))
        first = samples[0].label
        picks = [s for s in samples if s.label == first][:4]
        dump = _features(ckpt, picks, args.stream)
        vizs = analysis.pca_visualize(list(dump.patches), dump.grid)
        plotting.pca_panel([s.pixels for s in picks], [v.rgb for v in vizs], out / "pca.png")
    text = "".join(f"{k}\t{v:.6f}\n" if isinstance(v, float) else f"{k}\t{v}\n" for k, v in rows)
    (out / "summary.tsv").write_text("metric\tvalue\n" + text)
    sys.stdout.write(text)
    return 0


# --------------------------------------------------------------------------
# parser

def _add_probe_opts(p):
    p.add_argument("--stream", choices=analysis.STREAMS, default="student")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.add_argument("--split-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="pievit", description="Self-distillation pretraining and feature analysis.")
    ap.add_argument("--version", action="version", version=f"pievit {tool_version()}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write the synthetic texture corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=64)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="run self-distillation pretraining")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int, help="total schedule length in steps")
    p.add_argument("--steps", type=int, help="stop after this many steps in this invocation")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--head", choices=("fip", "avg"))
    p.add_argument("--no-gpc", action="store_true")
    p.add_argument("--neighborhood", type=int, choices=(3, 5, 7))
    p.add_argument("--top-k", type=int, choices=(2, 3, 4))
    p.add_argument("--teacher-momentum", help="'cosine' or 'const:<lambda>'")
    p.add_argument("--log-every", type=int, default=10)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("extract", help="dump frozen features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--images", nargs="+")
    p.add_argument("--stream", choices=analysis.STREAMS, default="student")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("probe", help="linear probe against a baseline checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--baseline", default="random", help="'random' or a checkpoint path")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    _add_probe_opts(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("pca", help="two-stage PCA renders of patch features")
    p.add_argument("--dump")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--images", nargs="+")
    p.add_argument("--label", type=int, help="only images of this class")
    p.add_argument("--limit", type=int, default=4)
    p.add_argument("--stream", choices=analysis.STREAMS, default="student")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--flip-fg", action="store_true")
    p.add_argument("--per-image", action="store_true", help="first-stage PCA per image, not pooled")
    p.add_argument("--scale", type=int, default=8, help="pixels per patch in the output")
    p.add_argument("--png", action="store_true", help="also write a matplotlib panel")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pca)

    p = sub.add_parser("inspect", help="parameter counts and header of a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--preset", choices=("vit-b16", "desk"))
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("report", help="figures and summary for a pretraining run")
    p.add_argument("--run", required=True, help="pretrain output directory")
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", help="labelled corpus for probe and PCA figures")
    _add_probe_opts(p)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="warning: %(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        with _thread_limit():
            return args.func(args)
    except PievitError as exc:
        print(f"error: {exc.category}: {_one_line(exc)}", file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1
    except OSError as exc:
        where = f" ({exc.filename})" if exc.filename else ""
        print(f"error: io: {_one_line(exc.strerror or exc)}{where}", file=sys.stderr)
        return 1


def _one_line(msg) -> str:
    return " ".join(str(msg).split())


if __name__ == "__main__":
    sys.exit(main())
