"""Command-line entry point: ``gazepref <command> [options]``.

Exit codes: 0 ok, 2 bad input, 3 malformed file (cascade, manifest, PNM,
weights), 4 numerical divergence during training.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .cascade import CascadeFormatError, detect_face_then_eyes, load_cascade
from .cnn import (DivergenceError, TrainConfig, WeightsError, init_state, load_weights,
                  reference_spec, save_weights, train)
from .composer import compose_pair, quality_gate
from .dataset import (LabeledImages, Manifest, ManifestError, Sample, augment_set, kfold_split,
                      read_manifest_file, synth_generate, write_manifest_file)
from .evaluate import evaluate, run_kfold
from .imaging import GrayImage, PnmError, iter_pnm, load_pnm, save_pnm, to_grayscale
from .session import (FrameDecodeError, SamplerConfig, benchmark, benchmark_pipeline,
                      classify_stream, summarize)

CONFIG_ENV = "GAZEPREF_CONFIG"
EXIT_INPUT, EXIT_FORMAT, EXIT_DIVERGED = 2, 3, 4


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# Config file
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Config:
    face_cascade: str | None = None
    eye_cascade: str | None = None
    manifest: str | None = None
    root: str | None = None
    weights: str | None = None
    seed: int = 0
    iterations: int = 6000
    batch: int = 100
    lr: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 0.1
    lr_decay_step: int = 4000
    dropout: float = 0.5
    val_every: int = 500
    skip: int = 300
    stride: int = 15
    classes: int = 3
    k: int = 5
    lanes: int = 1

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.iterations, self.batch, self.lr, self.momentum, self.lr_decay,
                           self.lr_decay_step, self.dropout, self.seed, self.val_every)

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.skip, self.stride)


_PATH_KEYS = ("face_cascade", "eye_cascade", "manifest", "root", "weights")
_TYPES = {f.name: f.type for f in fields(Config)}


def _coerce(key: str, value: str):
    t = _TYPES[key]
    if "int" in t and "str" not in t:
        return int(value)
    if "float" in t:
        return float(value)
    return value


def parse_config(text: str, base: Path = Path(".")) -> Config:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"config line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise InputError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, value)
        except ValueError:
            raise InputError(f"config line {lineno}: bad value for {key}: {value!r}") from None
        if key in _PATH_KEYS:
            values[key] = str((base / value) if not os.path.isabs(value) else Path(value))
    cfg = Config(**values)
    for key in _PATH_KEYS:
        path = getattr(cfg, key)
        if path is not None and not Path(path).exists():
            raise InputError(f"config: {key} path does not exist: {path}")
    return cfg


def load_config(path: str | None) -> Config:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return Config()
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {path}")
    return parse_config(p.read_text(encoding="utf-8"), p.parent)


def resolve(args: argparse.Namespace) -> Config:
    """Defaults, then the config file, then explicit flags."""
    cfg = load_config(args.config)
    flags = {k: v for k, v in vars(args).items() if k in _TYPES and v is not None}
    return replace(cfg, **flags)


def _echo(cfg: Config, stream=None) -> None:
    print("# config " + json.dumps(asdict(cfg), sort_keys=True), file=stream or sys.stderr)


@contextmanager
def _lanes(n: int):
    """Cap BLAS and compiled-kernel threads; one lane is the bit-reproducible path."""
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=n):
        yield


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _need(cfg: Config, *keys: str) -> None:
    missing = [k for k in keys if getattr(cfg, k) is None]
    if missing:
        raise InputError("missing required setting(s): " + ", ".join(
            "--" + k.replace("_", "-") for k in missing))


def _file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {path}")
    return p


@contextmanager
def _binary_in(path: str):
    if path == "-":
        yield sys.stdin.buffer
    else:
        with open(_file(path, "input"), "rb") as fh:
            yield fh


def _models(cfg: Config):
    _need(cfg, "face_cascade", "eye_cascade")
    return (load_cascade(_file(cfg.face_cascade, "face cascade")),
            load_cascade(_file(cfg.eye_cascade, "eye cascade")))


def _labeled(cfg: Config) -> LabeledImages:
    _need(cfg, "manifest")
    m = read_manifest_file(_file(cfg.manifest, "manifest"))
    root = cfg.root or str(Path(cfg.manifest).parent)
    return LabeledImages.from_manifest(m, root)


def _state(cfg: Config):
    spec = reference_spec(cfg.classes)
    if cfg.weights is None:
        return init_state(spec, cfg.seed)
    return load_weights(_file(cfg.weights, "weights").read_bytes(), spec)


def _dump(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_detect(args, cfg: Config) -> int:
    face, eye = _models(cfg)
    with _binary_in(args.input) as fh:
        for img in iter_pnm(fh):
            gray = img if isinstance(img, GrayImage) else to_grayscale(img)
            found = detect_face_then_eyes(face, eye, gray)
            gate = quality_gate(found)
            if not gate.accepted:
                print(f"REJECT {gate.reason}")
                continue
            f, l, r = found.face, found.left_eye, found.right_eye
            print(f"FACE {f.x} {f.y} {f.w} {f.h} EYES {l.x} {l.y} {l.w} {l.h} "
                  f"{r.x} {r.y} {r.w} {r.h}")
    return 0


def cmd_compose(args, cfg: Config) -> int:
    face, eye = _models(cfg)
    out_root = Path(args.out_root)
    sampler = cfg.sampler()
    samples, rejected = [], {}
    with _binary_in(args.frames) as fh:
        for i, img in enumerate(iter_pnm(fh)):
            if not sampler.keeps(i):
                continue
            gray = img if isinstance(img, GrayImage) else to_grayscale(img)
            found = detect_face_then_eyes(face, eye, gray)
            gate = quality_gate(found)
            if not gate.accepted:
                rejected[gate.reason] = rejected.get(gate.reason, 0) + 1
                continue
            pair = compose_pair(gray, found, f"{i:06d}", args.person)
            rel = pair.file_name(args.label)
            dest = out_root / rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            save_pnm(dest, pair.image)
            samples.append(Sample(rel, args.label, args.person, args.source))
    mpath = Path(args.out_manifest)
    if mpath.exists():
        m = read_manifest_file(mpath)
        m = m.with_samples(list(m.samples) + samples)
    else:
        m = Manifest(samples, args.name)
    write_manifest_file(mpath, m)
    print(f"{len(samples)} composed, {sum(rejected.values())} rejected")
    for reason, n in sorted(rejected.items()):
        print(f"  {reason} {n}")
    return 0


def cmd_augment(args, cfg: Config) -> int:
    data = _labeled(cfg)
    out = augment_set(data)
    out.write(args.out_root)
    write_manifest_file(args.out_manifest, out.manifest)
    counts = out.manifest.class_counts()
    print(f"{len(out)} images")
    for c in sorted(counts):
        print(f"  class {c} {counts[c]}")
    return 0


def cmd_synth(args, cfg: Config) -> int:
    mix = tuple(float(v) for v in args.mix.split(","))
    data = synth_generate(cfg.seed, args.n, mix, args.persons)
    out = Path(args.out)
    data.write(out)
    write_manifest_file(out / "manifest.tsv", data.manifest)
    counts = data.manifest.class_counts()
    print(f"{len(data)} images, {args.persons} persons, classes "
          + " ".join(f"{c}:{counts.get(c, 0)}" for c in range(3)))
    return 0


def cmd_split(args, cfg: Config) -> int:
    _need(cfg, "manifest")
    m = read_manifest_file(_file(cfg.manifest, "manifest"))
    try:
        plan = kfold_split(m, cfg.k, cfg.seed)
    except ValueError as e:
        raise InputError(str(e)) from None
    Path(args.out).write_text(plan.to_tsv(), encoding="utf-8")
    print("fold sizes " + " ".join(str(s) for s in plan.fold_sizes(m)))
    return 0


def cmd_train(args, cfg: Config) -> int:
    data = _labeled(cfg)
    if cfg.classes == 2:
        data = data.filter_classes({0, 1})
    val = None
    if args.val_manifest:
        vm = read_manifest_file(_file(args.val_manifest, "validation manifest"))
        val = LabeledImages.from_manifest(vm, args.val_root or Path(args.val_manifest).parent)
        if cfg.classes == 2:
            val = val.filter_classes({0, 1})
    log = None
    if args.log:
        log_fh = open(args.log, "w", encoding="utf-8")
        log = lambda rec: log_fh.write(json.dumps(rec) + "\n")  # noqa: E731
    try:
        state, report = train(reference_spec(cfg.classes), data, val, cfg.train_config(),
                              log=log)
    finally:
        if args.log:
            log_fh.close()
    Path(args.out).write_bytes(save_weights(state))
    _dump({"config": asdict(cfg), "seed": cfg.seed, "train_size": len(data),
           "report": report.summary()})
    return 0


def cmd_eval(args, cfg: Config) -> int:
    _need(cfg, "weights")
    data = _labeled(cfg)
    if cfg.classes == 2:
        data = data.filter_classes({0, 1})
    acc, cm = evaluate(_state(cfg), data, cfg.classes)
    _dump({"config": asdict(cfg), "seed": cfg.seed, "size": len(data),
           "accuracy": round(100 * acc, 2), "confusion": cm.to_dict()})
    return 0


def cmd_kfold(args, cfg: Config) -> int:
    data = _labeled(cfg)
    try:
        kfold_split(data.manifest, cfg.k, cfg.seed)
    except ValueError as e:
        raise InputError(str(e)) from None
    report = run_kfold(reference_spec(cfg.classes), data, cfg.k, cfg.train_config(),
                       cfg.classes)
    out = report.to_dict()
    out["config"] = asdict(cfg)
    _dump(out)
    return 0


def cmd_infer(args, cfg: Config) -> int:
    face, eye = _models(cfg)
    state = _state(cfg)
    with _binary_in(args.frames) as fh:
        records = classify_stream(face, eye, state, iter_pnm(fh), cfg.sampler())
    report = summarize(records, cfg.classes)
    if args.text:
        sys.stdout.write(report.to_text())
    else:
        out = report.to_dict(with_records=not args.no_frames)
        out["config"] = asdict(cfg)
        out["seed"] = cfg.seed
        _dump(out)
    return 0


def cmd_bench(args, cfg: Config) -> int:
    state = _state(cfg)
    out = {"config": asdict(cfg), "seed": cfg.seed,
           "forward": benchmark(state, args.repetitions, cfg.seed).to_dict()}
    if args.frame:
        face, eye = _models(cfg)
        frame = load_pnm(_file(args.frame, "frame"))
        out["pipeline"] = benchmark_pipeline(face, eye, state, frame,
                                             args.pipeline_repetitions).to_dict()
    _dump(out)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, *groups: str) -> None:
    p.add_argument("--config", help=f"key=value config file (default: ${CONFIG_ENV})")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--lanes", type=int, help="thread lanes; 1 is bit-reproducible (default 1)")
    if "cascades" in groups:
        p.add_argument("--face-cascade", dest="face_cascade", help="LBP face cascade XML")
        p.add_argument("--eye-cascade", dest="eye_cascade", help="Haar eye cascade XML")
    if "data" in groups:
        p.add_argument("--manifest", help="input manifest (TSV)")
        p.add_argument("--root", help="image root (default: the manifest's directory)")
    if "net" in groups:
        p.add_argument("--classes", type=int, choices=(2, 3), help="class mode (default 3)")
        p.add_argument("--weights", help="weight file (default: freshly initialized network)")
    if "train" in groups:
        p.add_argument("--iterations", type=int, help="SGD iterations (default 6000)")
        p.add_argument("--batch", type=int, help="mini-batch size (default 100)")
        p.add_argument("--lr", type=float, help="learning rate (default 0.01)")
        p.add_argument("--momentum", type=float, help="momentum (default 0.9)")
        p.add_argument("--lr-decay", dest="lr_decay", type=float,
                       help="learning-rate factor per step (default 0.1)")
        p.add_argument("--lr-decay-step", dest="lr_decay_step", type=int,
                       help="iterations per decay step (default 4000)")
        p.add_argument("--dropout", type=float, help="dropout probability (default 0.5)")
        p.add_argument("--val-every", dest="val_every", type=int,
                       help="validation period in iterations (default 500)")
    if "sampler" in groups:
        p.add_argument("--skip", type=int, help="leading frames to drop (default 300)")
        p.add_argument("--stride", type=int, help="keep every Nth frame (default 15)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gazepref", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="face and eye detection on a PNM frame stream")
    _common(p, "cascades")
    p.add_argument("input", help="PNM file or concatenated stream; '-' for stdin")
    p.set_defaults(func=cmd_detect)

    ds = sub.add_parser("dataset", help="build, augment, generate and split datasets")
    dsub = ds.add_subparsers(dest="action", required=True)

    p = dsub.add_parser("compose", help="pair-eye images from a frame stream")
    _common(p, "cascades", "sampler")
    p.add_argument("--frames", required=True, help="PNM frame stream; '-' for stdin")
    p.add_argument("--label", type=int, choices=(0, 1, 2), required=True,
                   help="class of every frame in the stream")
    p.add_argument("--person", required=True, help="person id")
    p.add_argument("--source", default="child", choices=("adult", "child", "synthetic"))
    p.add_argument("--name", default="composed", help="manifest name for a new manifest")
    p.add_argument("--out-root", dest="out_root", required=True, help="image output directory")
    p.add_argument("--out-manifest", dest="out_manifest", required=True,
                   help="manifest to create or append to")
    p.set_defaults(func=cmd_compose)

    p = dsub.add_parser("augment", help="expand every image into its 15 variants")
    _common(p, "data")
    p.add_argument("--out-root", dest="out_root", required=True)
    p.add_argument("--out-manifest", dest="out_manifest", required=True)
    p.set_defaults(func=cmd_augment)

    p = dsub.add_parser("synth", help="generate a synthetic pair-eye dataset")
    _common(p)
    p.add_argument("--n", type=int, required=True, help="number of images")
    p.add_argument("--persons", type=int, default=10, help="number of synthetic persons")
    p.add_argument("--mix", default="0.34,0.59,0.07", help="class proportions 0,1,2")
    p.add_argument("--out", required=True, help="output directory (manifest.tsv + images)")
    p.set_defaults(func=cmd_synth)

    p = dsub.add_parser("split", help="person-disjoint k-fold plan")
    _common(p, "data")
    p.add_argument("--k", type=int, help="number of folds (default 5)")
    p.add_argument("--out", required=True, help="fold plan TSV (person, fold)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train the network")
    _common(p, "data", "net", "train")
    p.add_argument("--out", required=True, help="output weight file")
    p.add_argument("--val-manifest", dest="val_manifest")
    p.add_argument("--val-root", dest="val_root")
    p.add_argument("--log", help="write per-iteration JSON lines here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and confusion matrix on a manifest")
    _common(p, "data", "net")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("kfold", help="person-disjoint k-fold cross-validation")
    _common(p, "data", "net", "train")
    p.add_argument("--k", type=int, help="number of folds (default 5)")
    p.set_defaults(func=cmd_kfold)

    p = sub.add_parser("infer", help="score a stimulus session from a frame stream")
    _common(p, "cascades", "net", "sampler")
    p.add_argument("frames", help="PNM frame stream; '-' for stdin")
    p.add_argument("--text", action="store_true", help="plain-text summary instead of JSON")
    p.add_argument("--no-frames", dest="no_frames", action="store_true",
                   help="omit per-frame records from the JSON")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="forward-pass (and optional full-pipeline) latency")
    _common(p, "cascades", "net")
    p.add_argument("--repetitions", type=int, default=100, help="timed runs, >= 30")
    p.add_argument("--frame", help="PNM frame for the full-pipeline benchmark")
    p.add_argument("--pipeline-repetitions", dest="pipeline_repetitions", type=int, default=30)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        if args.command in ("detect", "dataset"):
            _echo(cfg)
        with _lanes(cfg.lanes):
            return args.func(args, cfg)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CascadeFormatError, ManifestError, PnmError, WeightsError, FrameDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except (InputError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
