"""Experiment configuration and the four reproducible pipelines behind the CLI.

Every output file is a pure function of the configuration (seeds included).
"""

import csv
import dataclasses
import os
from dataclasses import dataclass, fields

import numpy as np

from . import data as data_io
from .cnn import (
    REGULARIZERS,
    TrainConfig,
    evaluate,
    lenet5,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .core import FeatureMapBatch, InvalidArgument, RandomSource, StateError
from .regularizers import Mode, RegularizerConfig, build_mask
from .tendency import channel_tendency_report, tendency_histogram

OUTPUT_DIR_ENV = "DROPCLUSTER_OUTPUT_DIR"

METRICS_HEADER = ["epoch", "lr", "train_loss", "top1", "top5"]
SUMMARY_HEADER = ["regularizer", "p", "seed", "train_size", "epochs", "window", "final_top1", "final_top5"]
TENDENCY_HEADER = ["channel", "spatial_hopkins"]
HISTOGRAM_HEADER = ["bin_low", "bin_high", "count"]
CORRUPTION_HEADER = ["kind", "severity", "top1", "top5"]

UNSTRUCTURED_COLOR = (0, 0, 64)


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    data_dir: str = ""
    synthetic_train: int = 2000
    synthetic_test: int = 500
    synthetic_classes: int = 5
    synthetic_noise: float = 0.12
    data_seed: int = 0
    regularizer: str = "none"
    p: float = 0.1
    n: int = 15
    s: int = 50
    block_size: int = 5
    max_iter: int = 1000
    epochs: int = 250
    batch_size: int = 64
    milestones: tuple = (150, 200)
    decay: float = 0.1
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    eval_window: int = 50
    augment: bool = True
    seed: int = 0
    train_fraction: float = 1.0
    corruptions: tuple = data_io.CORRUPTIONS
    severities: tuple = (1, 2, 3, 4, 5)
    ladder_gaussian: tuple = data_io.SEVERITY_LADDERS["gaussian"]
    ladder_shot: tuple = data_io.SEVERITY_LADDERS["shot"]
    ladder_impulse: tuple = data_io.SEVERITY_LADDERS["impulse"]
    ladder_defocus: tuple = data_io.SEVERITY_LADDERS["defocus"]
    tendency_samples: int = 50
    histogram_bins: int = 10
    output_dir: str = "out"

    def __post_init__(self):
        if self.dataset not in ("synthetic", "cifar10"):
            raise InvalidArgument(f"dataset must be 'synthetic' or 'cifar10', got {self.dataset!r}")
        if self.regularizer not in REGULARIZERS:
            raise InvalidArgument(f"regularizer must be one of {REGULARIZERS}, got {self.regularizer!r}")
        if not 0 < self.train_fraction <= 1:
            raise InvalidArgument(f"train_fraction must be in (0, 1], got {self.train_fraction}")
        for kind in self.corruptions:
            if kind not in data_io.SEVERITY_LADDERS:
                raise InvalidArgument(f"unknown corruption {kind!r}")
        for kind, ladder in self.ladders().items():
            if len(ladder) != 5 or any(v <= 0 for v in ladder):
                raise InvalidArgument(f"ladder_{kind} needs 5 positive levels, got {ladder}")
        for sev in self.severities:
            if not 0 <= sev <= 5:
                raise InvalidArgument(f"severity must be in 0..5, got {sev}")
        RegularizerConfig(self.p, self.n, self.s)

    def train_config(self):
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
            weight_decay=self.weight_decay, milestones=self.milestones, decay=self.decay,
            regularizer=self.regularizer, p=self.p, n=self.n, s=self.s, block_size=self.block_size,
            max_iter=self.max_iter, eval_window=self.eval_window, augment=self.augment, seed=self.seed,
        )

    def ladders(self):
        return {kind: tuple(getattr(self, f"ladder_{kind}")) for kind in data_io.CORRUPTIONS}

    def to_dict(self):
        return {f.name: list(v) if isinstance(v := getattr(self, f.name), tuple) else v for f in fields(self)}


def _field_types():
    return {f.name: f.default for f in fields(ExperimentConfig)}


def parse_value(key, text):
    """Convert a config string to the type of the field's default."""
    defaults = _field_types()
    if key not in defaults:
        raise InvalidArgument(f"unknown config key {key!r}")
    default = defaults[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(t) for t in items)
            if default and isinstance(default[0], int):
                return tuple(int(t) for t in items)
            return tuple(items)
        return type(default)(text)
    except ValueError as exc:
        raise InvalidArgument(f"bad value for {key}: {text!r}") from exc


def read_config_file(path):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidArgument(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            key = key.strip().replace("-", "_")
            values[key] = parse_value(key, value)
    return values


def load_config(path=None, overrides=None, environ=None):
    """Defaults < config file < output-dir environment variable < explicit overrides."""
    environ = os.environ if environ is None else environ
    values = {}
    if path:
        values.update(read_config_file(path))
    if environ.get(OUTPUT_DIR_ENV):
        values["output_dir"] = environ[OUTPUT_DIR_ENV]
    for key, value in (overrides or {}).items():
        values[key] = parse_value(key, value) if isinstance(value, str) else value
    return ExperimentConfig(**values)


# -- data ----------------------------------------------------------------------------

def load_datasets(cfg):
    """Train and test sets, with the stratified train-fraction applied."""
    data_rng = RandomSource(cfg.data_seed)
    if cfg.dataset == "synthetic":
        train_set = data_io.synthetic_shapes(cfg.synthetic_train, cfg.synthetic_classes, data_rng.child(0), cfg.synthetic_noise)
        test_set = data_io.synthetic_shapes(cfg.synthetic_test, cfg.synthetic_classes, data_rng.child(1), cfg.synthetic_noise)
    else:
        train_files, test_file = data_io.find_cifar10_files(cfg.data_dir)
        if not train_files or not os.path.exists(test_file):
            raise InvalidArgument(f"no CIFAR-10 binary batches found in {cfg.data_dir!r}")
        train_set = data_io.load_cifar10_binary(train_files)
        test_set = data_io.load_cifar10_binary(test_file)
    if cfg.train_fraction < 1:
        train_set = train_set.subset(data_io.stratified_subset(train_set.labels, cfg.train_fraction, data_rng.child(2)))
    return train_set, test_set


def class_count(cfg):
    return cfg.synthetic_classes if cfg.dataset == "synthetic" else 10


# -- CSV helpers -------------------------------------------------------------------------

def _fmt(value):
    return f"{value:.6f}" if isinstance(value, float) else str(value)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _outdir(cfg, output_dir=None):
    path = output_dir or cfg.output_dir
    os.makedirs(path, exist_ok=True)
    return path


# -- pipelines ------------------------------------------------------------------------------

@dataclass
class TrainOutput:
    metrics_path: str
    summary_path: str
    checkpoint_path: str
    result: object


def run_train(cfg, output_dir=None, log=None):
    out = _outdir(cfg, output_dir)
    train_set, test_set = load_datasets(cfg)
    rng = RandomSource(cfg.seed)
    net = lenet5(train_set.images.shape[1:], class_count(cfg), rng.child(0))
    result = train(net, train_set, test_set, cfg.train_config(), rng, log=log)

    metrics_path = os.path.join(out, "metrics.csv")
    write_csv(metrics_path, METRICS_HEADER, [
        (r.epoch, r.lr, r.train_loss, r.top1, r.top5) for r in result.metrics.epochs
    ])
    summary_path = os.path.join(out, "summary.csv")
    m = result.metrics
    write_csv(summary_path, SUMMARY_HEADER, [(
        cfg.regularizer, cfg.p, cfg.seed, len(train_set), cfg.epochs,
        min(m.window, len(m.epochs)), m.final_top1, m.final_top5,
    )])
    state = getattr(result.regularizer, "state", None)
    checkpoint_path = os.path.join(out, "checkpoint.npz")
    # the output location is not part of the experiment; leaving it out keeps
    # checkpoints byte-identical across output directories
    saved = {k: v for k, v in cfg.to_dict().items() if k != "output_dir"}
    save_checkpoint(checkpoint_path, net, result.optimizer, state, result.mean, result.std, saved)
    return TrainOutput(metrics_path, summary_path, checkpoint_path, result)


def palette(k):
    """``k`` distinct RGB colors, deterministic, avoiding the unstructured color."""
    colors = []
    for i in range(k):
        hue = (i * 0.618033988749895) % 1.0
        value = 0.95 if i % 2 == 0 else 0.7
        h6 = hue * 6
        c = value * 0.8
        x = c * (1 - abs(h6 % 2 - 1))
        m = value - c
        r, g, b = [(c, x, 0), (x, c, 0), (0, c, x), (0, x, c), (x, 0, c), (c, 0, x)][int(h6) % 6]
        colors.append(tuple(int(round(255 * (v + m))) for v in (r, g, b)))
    return np.array(colors, dtype=np.uint8)


def render_cluster_maps(state, scale=1):
    """One ``(w*scale, h*scale, 3)`` image per channel; unstructured channels are a dark field."""
    colors = palette(state.n_clusters)
    images = []
    for i in range(state.t):
        labels = state.labels(i)
        if i in state.unstructured:
            img = np.empty((*labels.shape, 3), dtype=np.uint8)
            img[:] = UNSTRUCTURED_COLOR
        else:
            img = colors[labels]
        if scale > 1:
            img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
        images.append(img)
    return images


def write_ppm(path, image):
    """Binary P6 pixmap; rows run along the first image axis."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    rows, cols, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{cols} {rows}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        raw = f.read()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P6" or maxval != b"255":
        raise InvalidArgument(f"{path} is not an 8-bit P6 pixmap")
    cols, rows = (int(v) for v in dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(rows, cols, 3)


def run_cluster_viz(checkpoint_path, output_dir, scale=8):
    ckpt = load_checkpoint(checkpoint_path)
    if ckpt.state is None:
        raise StateError(f"{checkpoint_path} holds no cluster state; train with regularizer=dropcluster")
    os.makedirs(output_dir, exist_ok=True)
    paths = []
    for i, img in enumerate(render_cluster_maps(ckpt.state, scale)):
        path = os.path.join(output_dir, f"channel_{i:02d}.ppm")
        write_ppm(path, img)
        paths.append(path)
    rows = [(i, "unstructured" if i in ckpt.state.unstructured else "structured") for i in range(ckpt.state.t)]
    write_csv(os.path.join(output_dir, "channels.csv"), ["channel", "status"], rows)
    return paths


def first_conv_batch(ckpt, cfg):
    """First-conv activations on the first ``batch_size`` normalized test images."""
    _, test_set = load_datasets(cfg)
    x = test_set.images[:cfg.batch_size].astype(ckpt.net.dtype)
    x = data_io.normalize(x, ckpt.mean, ckpt.std)
    return FeatureMapBatch(ckpt.net.first_conv_activations(x).astype(np.float64))


def run_tendency_report(cfg, output_dir, checkpoint_path=None, activations=None):
    """Per-channel Spatial Hopkins CSV plus histogram CSV."""
    if activations is not None:
        batch = FeatureMapBatch(np.load(activations) if isinstance(activations, str) else activations)
    elif checkpoint_path is not None:
        batch = first_conv_batch(load_checkpoint(checkpoint_path), cfg)
    else:
        raise InvalidArgument("tendency report needs a checkpoint or an activations array")
    os.makedirs(output_dir, exist_ok=True)
    report = channel_tendency_report(batch, cfg.tendency_samples, RandomSource(cfg.seed, 7))
    report_path = os.path.join(output_dir, "tendency.csv")
    write_csv(report_path, TENDENCY_HEADER, list(enumerate(report.per_channel_mean.tolist())))
    counts, edges = tendency_histogram(report.per_channel_mean, cfg.histogram_bins)
    hist_path = os.path.join(output_dir, "tendency_histogram.csv")
    write_csv(hist_path, HISTOGRAM_HEADER, [
        (float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts)
    ])
    return report, report_path, hist_path


def inference_mask(ckpt):
    """The mask DropCluster applies at test time (unstructured channels only), or None."""
    if ckpt.state is None:
        return None
    saved = ckpt.config or {}
    cfg = RegularizerConfig(saved.get("p", 0.1), ckpt.state.n_clusters, saved.get("s", 50), Mode.INFERENCE)
    return build_mask(ckpt.state, cfg, RandomSource(0))


def run_corrupt_eval(cfg, checkpoint_path, output_dir):
    """Top-1/top-5 on the corrupted test set for every (kind, severity) cell."""
    ckpt = load_checkpoint(checkpoint_path)
    _, test_set = load_datasets(cfg)
    mask = inference_mask(ckpt)
    ladders = cfg.ladders()
    rng = RandomSource(cfg.seed, 11)
    rows = []
    for ki, kind in enumerate(cfg.corruptions):
        for sev in cfg.severities:
            stream = rng.child(ki).child(sev)
            images = np.stack([data_io.corrupt(img, kind, sev, stream, ladders) for img in test_set.images])
            x = data_io.normalize(images.astype(ckpt.net.dtype), ckpt.mean, ckpt.std)
            top1, top5 = evaluate(ckpt.net, x, test_set.labels, mask=mask)
            rows.append((kind, sev, top1, top5))
    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, "corruption.csv")
    write_csv(path, CORRUPTION_HEADER, rows)
    return rows, path


def replace(cfg, **changes):
    return dataclasses.replace(cfg, **changes)
