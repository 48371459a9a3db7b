"""Command-line entry point: ``dpnet <command> [--config FILE] [--key=value ...]``.

Commands: train, eval, generate, gradcheck, trace, bench, summary.

Exit codes: 0 success, 1 invalid configuration or inputs (reported before any
work starts), 2 failure while running (including a failed gradient check).
"""
from __future__ import annotations

import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from . import bench, checkpoint, gradcheck
from .data import (DEFAULT_AFFINE_RANGES, Dataset, load_dataset, load_mnist, make_affine_testset,
                   make_translation_trainset, save_dataset)
from .metrics import evaluate, export_features
from .model import ModelConfig, build_baseline_cnn, build_dpn, extract_parse_trace
from .tensor import Rng
from .training import TrainConfig, train

log = logging.getLogger("dpnet")

COMMANDS = ("train", "eval", "generate", "gradcheck", "trace", "bench", "summary")
NEEDS_SEED = ("train", "generate")
MNIST_SOURCES = {"mnist-train": "train", "mnist-test": "test"}

class ConfigError(ValueError):
    pass

def _ints(v):
    return tuple(int(x) for x in str(v).replace(" ", "").split(",") if x)

def _floats(v):
    return tuple(float(x) for x in str(v).replace(" ", "").split(",") if x)

def _bool(v):
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")

def _opt(conv):
    def parse(v):
        return None if str(v).strip().lower() in ("", "none") else conv(v)
    return parse

@dataclass
class RunConfig:
    command: str = "train"
    # paths
    data_dir: str = field(default_factory=lambda: os.environ.get("DPN_MNIST_DIR", "data/mnist"))
    train_data: str = "mnist-train"
    test_data: str = "mnist-test"
    train_limit: Optional[int] = None
    test_limit: Optional[int] = None
    out_dir: str = "runs/default"
    checkpoint: Optional[str] = None
    output: Optional[str] = None
    # model
    model: str = "dpn"
    channels: tuple = (8, 16, 32)
    width: int = 3
    downsample_after: tuple = (0, 1)
    batch_norm: bool = False
    dm_window: int = 3
    num_classes: int = 10
    # optimization
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_milestones: tuple = ()
    epochs: int = 20
    batch_size: int = 128
    chunk_size: int = 32
    seed: Optional[int] = None
    threads: int = 1
    log_interval: int = 10
    stop_at_accuracy: Optional[float] = None
    resume: bool = False
    # generate
    kind: str = "translation"
    source: str = "mnist-train"
    limit: Optional[int] = None
    max_shift: Optional[int] = None
    rotation: tuple = DEFAULT_AFFINE_RANGES["rotation"]
    shear: tuple = DEFAULT_AFFINE_RANGES["shear"]
    scale: tuple = DEFAULT_AFFINE_RANGES["scale"]
    translate: tuple = DEFAULT_AFFINE_RANGES["translate"]
    # eval / trace
    features: Optional[str] = None
    image_index: int = 0
    fanout: int = 1
    trace_channels: tuple = ()
    # gradcheck / bench
    instances: int = 20
    layers: tuple = ()
    repeats: int = 5

    def model_config(self) -> ModelConfig:
        return ModelConfig(channels=self.channels, width=self.width,
                           downsample_after=self.downsample_after, num_classes=self.num_classes,
                           batch_norm=self.batch_norm, dm_window=self.dm_window)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, optimizer=self.optimizer,
                           lr=self.lr, lr_milestones=self.lr_milestones, seed=self.seed or 0,
                           threads=self.threads, chunk_size=self.chunk_size,
                           log_interval=self.log_interval, stop_at_accuracy=self.stop_at_accuracy,
                           out_dir=Path(self.out_dir))

_PARSERS = {
    "train_limit": _opt(int), "test_limit": _opt(int), "limit": _opt(int), "max_shift": _opt(int),
    "seed": _opt(int), "stop_at_accuracy": _opt(float),
    "checkpoint": _opt(str), "output": _opt(str), "features": _opt(str),
    "channels": _ints, "downsample_after": _ints, "lr_milestones": _ints, "trace_channels": _ints,
    "rotation": _floats, "shear": _floats, "scale": _floats, "translate": _floats,
    "layers": lambda v: tuple(x for x in str(v).split(",") if x),
    "batch_norm": _bool, "resume": _bool,
}
_KEYS = {f.name for f in fields(RunConfig)} - {"command"}

def _convert(key, value):
    if key not in _KEYS:
        raise ConfigError(f"unknown setting {key!r}")
    if key in _PARSERS:
        conv = _PARSERS[key]
    else:
        default = getattr(RunConfig(), key)
        conv = type(default)
    try:
        return conv(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {key}: {value!r} ({e})") from None

def read_config_file(path) -> dict:
    """Plain ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    out = {}
    for n, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{n}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out

def parse_args(argv) -> RunConfig:
    argv = list(argv)
    if not argv or argv[0] in ("-h", "--help"):
        raise ConfigError("usage: dpnet {" + ",".join(COMMANDS) + "} [--config FILE] [--key=value ...]")
    command, rest = argv[0], argv[1:]
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}")
    overrides, file_values = [], {}
    i = 0
    while i < len(rest):
        arg = rest[i]
        if not arg.startswith("--") or arg == "--":
            raise ConfigError(f"unexpected argument {arg!r}")
        key, eq, value = arg[2:].partition("=")
        if not eq:
            if i + 1 >= len(rest):
                raise ConfigError(f"missing value for --{key}")
            value = rest[i + 1]
            i += 1
        key = key.replace("-", "_")
        if key == "config":
            file_values.update(read_config_file(value))
        else:
            overrides.append((key, value))
        i += 1
    values = {k: _convert(k, v) for k, v in file_values.items()}
    values.update({k: _convert(k, v) for k, v in overrides})
    return replace(RunConfig(command=command), **values)

# ---------------------------------------------------------------------------
# validation

def _check_dataset_source(cfg: RunConfig, source: str):
    if source in MNIST_SOURCES:
        split = MNIST_SOURCES[source]
        stems = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte") if split == "train" else \
            ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
        d = Path(cfg.data_dir)
        for stem in stems:
            if not ((d / stem).is_file() or (d / f"{stem}.gz").is_file()):
                raise ConfigError(f"missing MNIST file {d / stem}[.gz]")
    elif not Path(source).is_file():
        raise ConfigError(f"dataset not found: {source}")

def _check_writable_dir(path):
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {p}: {e}") from None
    if not os.access(p, os.W_OK):
        raise ConfigError(f"output directory is not writable: {p}")

def _checkpoint_path(cfg: RunConfig) -> Path:
    if cfg.checkpoint:
        return Path(cfg.checkpoint)
    return Path(cfg.out_dir) / ("last.dpnc" if cfg.command == "train" else "best.dpnc")

def validate(cfg: RunConfig) -> RunConfig:
    if cfg.command in NEEDS_SEED and cfg.seed is None:
        raise ConfigError(f"--seed is required for {cfg.command}")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    if cfg.model not in ("dpn", "cnn", "cnn-matched"):
        raise ConfigError(f"model must be dpn, cnn or cnn-matched, got {cfg.model!r}")
    if cfg.optimizer not in ("adam", "sgd"):
        raise ConfigError(f"optimizer must be adam or sgd, got {cfg.optimizer!r}")
    for key in ("epochs", "image_index"):
        if getattr(cfg, key) < 0:
            raise ConfigError(f"{key} must be >= 0")
    for key in ("batch_size", "chunk_size", "instances", "repeats", "fanout"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key} must be >= 1")
    if cfg.lr <= 0:
        raise ConfigError("lr must be positive")
    try:
        cfg.model_config().validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if cfg.command == "train":
        _check_dataset_source(cfg, cfg.train_data)
        if cfg.test_data:
            _check_dataset_source(cfg, cfg.test_data)
        _check_writable_dir(cfg.out_dir)
        if cfg.resume and not _checkpoint_path(cfg).is_file():
            raise ConfigError(f"checkpoint to resume from not found: {_checkpoint_path(cfg)}")
    elif cfg.command in ("eval", "trace"):
        _check_dataset_source(cfg, cfg.test_data)
        if not _checkpoint_path(cfg).is_file():
            raise ConfigError(f"checkpoint not found: {_checkpoint_path(cfg)}")
        _check_writable_dir(cfg.out_dir)
    elif cfg.command == "generate":
        if cfg.kind not in ("translation", "affine"):
            raise ConfigError(f"kind must be translation or affine, got {cfg.kind!r}")
        _check_dataset_source(cfg, cfg.source)
        for key in ("rotation", "shear", "scale", "translate"):
            r = getattr(cfg, key)
            if len(r) != 2 or r[0] > r[1]:
                raise ConfigError(f"{key} must be 'low,high' with low <= high")
        out = Path(cfg.output or Path(cfg.out_dir) / f"{cfg.kind}.dpnd")
        _check_writable_dir(out.parent)
    elif cfg.command == "gradcheck":
        unknown = set(cfg.layers) - set(gradcheck.CASES)
        if unknown:
            raise ConfigError(f"unknown gradcheck layers {sorted(unknown)}; "
                              f"choose from {', '.join(gradcheck.CASES)}")
    return cfg

# ---------------------------------------------------------------------------
# commands

def load_source(cfg: RunConfig, source: str, limit: Optional[int]) -> Dataset:
    if source in MNIST_SOURCES:
        x, y = load_mnist(cfg.data_dir, MNIST_SOURCES[source], limit)
        return Dataset(x, y)
    ds = load_dataset(source)
    return ds.subset(limit) if limit is not None else ds

def build_model(cfg: RunConfig):
    mc = cfg.model_config()
    rng = Rng(cfg.seed or 0)
    if cfg.model == "dpn":
        return build_dpn(mc, rng)
    return build_baseline_cnn(mc, rng, match_params=cfg.model == "cnn-matched")

def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    tc = cfg.train_config()
    state, start_epoch, start_iter, best = None, 0, 0, -1.0
    if cfg.resume:
        model, state, extra = checkpoint.load(_checkpoint_path(cfg))
        start_epoch = int(extra.get("epoch", 0))
        start_iter = int(extra.get("iteration", 0))
        best = float(extra.get("best_accuracy", -1.0))
        log.info("resuming from %s at epoch %d", _checkpoint_path(cfg), start_epoch)
    else:
        model = build_model(cfg)
    train_set = load_source(cfg, cfg.train_data, cfg.train_limit)
    test_set = load_source(cfg, cfg.test_data, cfg.test_limit) if cfg.test_data else None
    if cfg.epochs == 0 and not cfg.resume:
        path = checkpoint.save(out / "last.dpnc", model, None,
                               {"epoch": 0, "iteration": 0, "best_accuracy": -1.0, "seed": tc.seed})
        print(f"wrote initial checkpoint {path}")
        return 0
    hist = train(model, train_set, test_set, tc, state=state, start_epoch=start_epoch,
                 start_iteration=start_iter, best_accuracy=best, log_path=out / "metrics.csv")
    print(f"epochs run: {hist.epochs_run}; iterations: {hist.iteration}; "
          f"best test accuracy: {hist.best_accuracy:.4f}")
    print(f"log: {out / 'metrics.csv'}; checkpoints: {out}")
    return 0

def cmd_eval(cfg: RunConfig) -> int:
    model, _, _ = checkpoint.load(_checkpoint_path(cfg))
    ds = load_source(cfg, cfg.test_data, cfg.test_limit)
    report = evaluate(model, ds)
    stem = Path(cfg.output) if cfg.output else Path(cfg.out_dir) / "report"
    txt, js = report.write(stem)
    if cfg.features:
        export_features(model, ds, cfg.features)
    sys.stdout.write(report.to_text())
    print(f"wrote {txt} and {js}")
    return 0

def cmd_generate(cfg: RunConfig) -> int:
    src = load_source(cfg, cfg.source, cfg.limit)
    if cfg.kind == "translation":
        ds = make_translation_trainset(src.images, src.labels, cfg.max_shift, seed=cfg.seed)
    else:
        ranges = {"rotation": cfg.rotation, "shear": cfg.shear, "scale": cfg.scale,
                  "translate": cfg.translate}
        ds = make_affine_testset(src.images, src.labels, ranges, seed=cfg.seed)
    out = save_dataset(ds, cfg.output or Path(cfg.out_dir) / f"{cfg.kind}.dpnd")
    print(f"wrote {len(ds)} samples to {out}")
    return 0

def cmd_gradcheck(cfg: RunConfig) -> int:
    rows = gradcheck.run_gradcheck(cfg.layers or None, cfg.instances, cfg.seed or 0)
    print(gradcheck.format_table(rows))
    failed = [r.layer for r in rows if not r.passed]
    if failed:
        print(f"gradient check FAILED for: {', '.join(failed)}", file=sys.stderr)
        return 2
    return 0

def cmd_trace(cfg: RunConfig) -> int:
    model, _, _ = checkpoint.load(_checkpoint_path(cfg))
    ds = load_source(cfg, cfg.test_data, cfg.test_limit)
    if cfg.image_index >= len(ds):
        raise IndexError(f"image_index {cfg.image_index} out of range for {len(ds)} images")
    tr = extract_parse_trace(model, ds.images[cfg.image_index], cfg.trace_channels or None, cfg.fanout)
    out = Path(cfg.output) if cfg.output else Path(cfg.out_dir) / f"trace_{cfg.image_index}.txt"
    out.write_text(tr.to_text())
    sys.stdout.write(tr.to_text())
    print(f"wrote {out}")
    return 0

def cmd_bench(cfg: RunConfig) -> int:
    rows = bench.run_bench(repeats=cfg.repeats, seed=cfg.seed or 0)
    print(bench.format_table(rows))
    mc = cfg.model_config()
    rng = Rng(cfg.seed or 0)
    x = rng.uniform(0.0, 1.0, (cfg.batch_size,) + mc.input_shape)
    y = rng.integers(0, mc.num_classes - 1, cfg.batch_size)
    print()
    print(f"forward+backward seconds per batch of {cfg.batch_size}:")
    for name, m in (("dpn", build_dpn(mc, rng.child(1))),
                    ("cnn (width 1)", build_baseline_cnn(mc, rng.child(2))),
                    ("cnn (matched)", build_baseline_cnn(mc, rng.child(3), match_params=True))):
        t = bench.time_training_step(m, x, y, cfg.repeats)
        print(f"  {name:<14} params {m.num_parameters():>8}  {t:.3f} s")
    return 0 if all(r.counts_match for r in rows) else 2

def cmd_summary(cfg: RunConfig) -> int:
    print(build_model(cfg).summary())
    return 0

HANDLERS = {"train": cmd_train, "eval": cmd_eval, "generate": cmd_generate,
            "gradcheck": cmd_gradcheck, "trace": cmd_trace, "bench": cmd_bench,
            "summary": cmd_summary}

def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s",
                        stream=sys.stderr)
    try:
        cfg = validate(parse_args(sys.argv[1:] if argv is None else argv))
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        return HANDLERS[cfg.command](cfg)
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit code 2
        log.debug("command failed", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2

if __name__ == "__main__":
    sys.exit(main())
