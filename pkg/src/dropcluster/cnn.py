"""A LeNet-5-sized CNN in numpy with hand-written backward passes.

The first convolution is followed by a regularizer slot where dropout,
SpatialDropout, DropBlock or DropCluster masks are applied.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import data as data_io
from .core import InvalidArgument, StateError, as_random_source, npz_bytes
from .regularizers import (
    ClusterState,
    DropBlockRegularizer,
    DropClusterRegularizer,
    DropoutRegularizer,
    Mode,
    Regularizer,
    RegularizerConfig,
    SpatialDropoutRegularizer,
    mask_gradient,
    schedule_should_recompute,
)

CHECKPOINT_VERSION = 1


# -- layers ----------------------------------------------------------------------

class Conv2D:
    def __init__(self, out_channels, kernel, stride=1, pad=0):
        self.out_channels, self.kernel, self.stride, self.pad = out_channels, kernel, stride, pad
        self.params = {}

    def spec(self):
        return ("conv", self.out_channels, self.kernel, self.stride, self.pad)

    def build(self, in_shape, rng, dtype):
        c, w, h = in_shape
        k, s, p = self.kernel, self.stride, self.pad
        ow, oh = (w + 2 * p - k) // s + 1, (h + 2 * p - k) // s + 1
        if ow < 1 or oh < 1:
            raise InvalidArgument(f"conv kernel {k} does not fit input {in_shape}")
        fan_in = c * k * k
        self.params = {
            "W": (rng.normal(size=(self.out_channels, c, k, k)) * np.sqrt(2.0 / fan_in)).astype(dtype),
            "b": np.zeros(self.out_channels, dtype=dtype),
        }
        return (self.out_channels, ow, oh)

    def forward(self, x, ctx):
        if self.pad:
            x = np.pad(x, ((0, 0), (0, 0), (self.pad, self.pad), (self.pad, self.pad)))
        b, c = x.shape[:2]
        win = sliding_window_view(x, (self.kernel, self.kernel), axis=(2, 3))
        win = win[:, :, ::self.stride, ::self.stride]
        oh, ow = win.shape[2:4]
        # im2col: one row per output position, (c, i, j) along columns
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, -1)
        W = self.params["W"]
        out = cols @ W.reshape(W.shape[0], -1).T + self.params["b"]
        return out.reshape(b, oh, ow, -1).transpose(0, 3, 1, 2), (x.shape, cols)

    def backward(self, grad, cache, need_dx=True):
        padded_shape, cols = cache
        W = self.params["W"]
        b, o, oh, ow = grad.shape
        g2 = grad.transpose(0, 2, 3, 1).reshape(-1, o)
        grads = {"W": (g2.T @ cols).reshape(W.shape), "b": g2.sum(axis=0)}
        if not need_dx:
            return None, grads
        dcols = (g2 @ W.reshape(o, -1)).reshape(b, oh, ow, *W.shape[1:])
        dxp = np.zeros(padded_shape, dtype=grad.dtype)
        s = self.stride
        for i in range(self.kernel):
            for j in range(self.kernel):
                dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[..., i, j].transpose(0, 3, 1, 2)
        p = self.pad
        dx = dxp[:, :, p:padded_shape[2] - p, p:padded_shape[3] - p] if p else dxp
        return dx, grads


class ReLU:
    params = {}

    def spec(self):
        return ("relu",)

    def build(self, in_shape, rng, dtype):
        return in_shape

    def forward(self, x, ctx):
        keep = x > 0
        return x * keep, keep

    def backward(self, grad, keep):
        return grad * keep, {}


class MaxPool2D:
    params = {}

    def __init__(self, k):
        self.k = k

    def spec(self):
        return ("maxpool", self.k)

    def build(self, in_shape, rng, dtype):
        c, w, h = in_shape
        if w % self.k or h % self.k:
            raise InvalidArgument(f"maxpool {self.k} does not tile input {in_shape}")
        return (c, w // self.k, h // self.k)

    def forward(self, x, ctx):
        b, c, w, h = x.shape
        k = self.k
        tiles = x.reshape(b, c, w // k, k, h // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, w // k, h // k, k * k)
        arg = tiles.argmax(axis=-1)
        return np.take_along_axis(tiles, arg[..., None], axis=-1)[..., 0], (x.shape, arg)

    def backward(self, grad, cache):
        (b, c, w, h), arg = cache
        k = self.k
        tiles = np.zeros((b, c, w // k, h // k, k * k), dtype=grad.dtype)
        np.put_along_axis(tiles, arg[..., None], grad[..., None], axis=-1)
        dx = tiles.reshape(b, c, w // k, h // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, w, h)
        return dx, {}


class RegularizerSlot:
    params = {}

    def spec(self):
        return ("regularizer",)

    def build(self, in_shape, rng, dtype):
        return in_shape

    def forward(self, x, ctx):
        mask = ctx.get("mask")
        if mask is None and ctx.get("regularizer") is not None:
            mask = ctx["regularizer"].mask(x.shape[1:], ctx["mode"], ctx["epoch"])
        ctx["applied_mask"] = mask
        if mask is None:
            return x, None
        return x * (mask.M * mask.scale).astype(x.dtype)[None], mask

    def backward(self, grad, mask):
        if mask is None:
            return grad, {}
        return mask_gradient(grad, mask), {}


class Flatten:
    params = {}

    def spec(self):
        return ("flatten",)

    def build(self, in_shape, rng, dtype):
        return (int(np.prod(in_shape)),)

    def forward(self, x, ctx):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, shape):
        return grad.reshape(shape), {}


class Dense:
    def __init__(self, out):
        self.out = out
        self.params = {}

    def spec(self):
        return ("dense", self.out)

    def build(self, in_shape, rng, dtype):
        if len(in_shape) != 1:
            raise InvalidArgument(f"dense layer needs a flat input, got {in_shape}; add flatten first")
        fan_in = in_shape[0]
        self.params = {
            "W": (rng.normal(size=(fan_in, self.out)) * np.sqrt(2.0 / fan_in)).astype(dtype),
            "b": np.zeros(self.out, dtype=dtype),
        }
        return (self.out,)

    def forward(self, x, ctx):
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, grad, x):
        return grad @ self.params["W"].T, {"W": x.T @ grad, "b": grad.sum(axis=0)}


_LAYERS = {"conv": Conv2D, "relu": ReLU, "maxpool": MaxPool2D, "regularizer": RegularizerSlot,
           "flatten": Flatten, "dense": Dense}


def make_layer(spec):
    return _LAYERS[spec[0]](*spec[1:])


class Network:
    """Sequential network ending in a softmax cross-entropy head."""

    def __init__(self, input_shape, specs, rng=0, dtype=np.float32):
        rng = as_random_source(rng)
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self.layers = [make_layer(tuple(s)) for s in specs]
        slots = [i for i, layer in enumerate(self.layers) if isinstance(layer, RegularizerSlot)]
        convs = [i for i, layer in enumerate(self.layers) if isinstance(layer, Conv2D)]
        if len(slots) != 1 or not convs or slots[0] != convs[0] + 1:
            raise InvalidArgument("need exactly one regularizer slot directly after the first conv")
        self.slot = slots[0]
        shape = self.input_shape
        self.shapes = [shape]
        for layer in self.layers:
            shape = layer.build(shape, rng, self.dtype)
            self.shapes.append(shape)
        if len(shape) != 1:
            raise InvalidArgument(f"network must end in a flat output, got {shape}")
        self.classes = shape[0]
        self.version = 0

    @property
    def feature_shape(self):
        """Shape of the maps entering the regularizer slot."""
        return self.shapes[self.slot]

    def param_items(self):
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                yield f"{i}.{name}", value

    def params(self):
        return dict(self.param_items())

    def specs(self):
        return [layer.spec() for layer in self.layers]

    def load_params(self, params):
        for key, value in params.items():
            i, name = key.split(".")
            layer = self.layers[int(i)]
            if layer.params[name].shape != value.shape:
                raise InvalidArgument(f"parameter {key} has shape {value.shape}")
            layer.params[name] = np.asarray(value, dtype=self.dtype)
        self.version += 1

    def first_conv_activations(self, x):
        out = np.asarray(x, dtype=self.dtype)
        for layer in self.layers[:self.slot]:
            out, _ = layer.forward(out, {})
        return out


def lenet5(input_shape=(3, 32, 32), classes=10, rng=0, dtype=np.float32, width=(6, 16), hidden=(120, 84)):
    specs = [
        ("conv", width[0], 5, 1, 0), ("regularizer",), ("relu",), ("maxpool", 2),
        ("conv", width[1], 5, 1, 0), ("relu",), ("maxpool", 2),
        ("flatten",),
        *[s for units in hidden for s in (("dense", units), ("relu",))],
        ("dense", classes),
    ]
    return Network(input_shape, specs, rng, dtype)


# -- forward / backward ----------------------------------------------------------

def forward(net, x, mode=Mode.TRAINING, regularizer=None, epoch=0, mask=None):
    """Return ``(logits, cache)``; ``mask`` pins the regularizer slot to a fixed mask."""
    x = np.asarray(x, dtype=net.dtype)
    if x.shape[1:] != net.input_shape:
        raise InvalidArgument(f"input {x.shape[1:]} does not match network input {net.input_shape}")
    ctx = {"mode": Mode(mode), "regularizer": regularizer, "epoch": epoch, "mask": mask}
    caches = []
    out = x
    for layer in net.layers:
        out, cache = layer.forward(out, ctx)
        caches.append(cache)
    return out, {"layers": caches, "version": net.version, "mask": ctx["applied_mask"]}


def softmax_cross_entropy(logits, labels):
    """Mean loss and its gradient with respect to the logits."""
    labels = np.asarray(labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_prob = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    b = logits.shape[0]
    loss = -log_prob[np.arange(b), labels].mean()
    grad = np.exp(log_prob)
    grad[np.arange(b), labels] -= 1
    return float(loss), grad / b


def backward(net, cache, labels=None, upstream=None, logits=None):
    """Gradients of every parameter, keyed like ``net.params()``.

    Pass ``labels`` (with the forward ``logits``) for the cross-entropy head,
    or an explicit ``upstream`` gradient on the logits.
    """
    if cache.get("version") != net.version:
        raise StateError("forward cache is stale: parameters changed since it was computed")
    if upstream is None:
        if logits is None or labels is None:
            raise InvalidArgument("need labels and logits, or an upstream gradient")
        _, upstream = softmax_cross_entropy(logits, labels)
    grad = upstream
    grads = {}
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if i == 0 and isinstance(layer, Conv2D):
            grad, layer_grads = layer.backward(grad, cache["layers"][i], need_dx=False)
        else:
            grad, layer_grads = layer.backward(grad, cache["layers"][i])
        for name, g in layer_grads.items():
            grads[f"{i}.{name}"] = g
    return grads


# -- optimizer -------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    milestones: tuple = ()
    decay: float = 0.1
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise InvalidArgument("need lr >= 0 and 0 <= momentum < 1")


def sgd_momentum_step(params, grads, opt, lr=None):
    """Classical momentum in place: ``v = mu*v - lr*(g + wd*theta); theta += v``."""
    lr = opt.lr if lr is None else lr
    for key, theta in params.items():
        g = grads[key]
        if g.shape != theta.shape:
            raise InvalidArgument(f"gradient for {key} has shape {g.shape}, expected {theta.shape}")
        if opt.weight_decay:
            g = g + opt.weight_decay * theta
        v = opt.velocity.get(key)
        v = -lr * g if v is None else opt.momentum * v - lr * g
        opt.velocity[key] = v.astype(theta.dtype, copy=False)
        theta += opt.velocity[key]
    return params


def lr_schedule(epoch, opt):
    crossed = sum(1 for m in opt.milestones if epoch >= m)
    return opt.lr * opt.decay**crossed


def scale_milestones(milestones, reference_epochs, epochs):
    return tuple(max(1, int(round(m * epochs / reference_epochs))) for m in milestones)


# -- training --------------------------------------------------------------------

REGULARIZERS = ("none", "dropout", "spatialdropout", "dropblock", "dropcluster")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple = (150, 200)
    decay: float = 0.1
    regularizer: str = "none"
    p: float = 0.1
    n: int = 15
    s: int = 50
    block_size: int = 5
    max_iter: int = 1000
    eval_window: int = 50
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.regularizer not in REGULARIZERS:
            raise InvalidArgument(f"unknown regularizer {self.regularizer!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_window < 1:
            raise InvalidArgument("epochs, batch_size and eval_window must be >= 1")
        self.milestones = tuple(int(m) for m in self.milestones)


def make_regularizer(cfg, rng):
    kind = cfg.regularizer
    if kind == "dropout":
        return DropoutRegularizer(cfg.p, rng)
    if kind == "spatialdropout":
        return SpatialDropoutRegularizer(cfg.p, rng)
    if kind == "dropblock":
        return DropBlockRegularizer(cfg.p, cfg.block_size, rng)
    if kind == "dropcluster":
        return DropClusterRegularizer(RegularizerConfig(cfg.p, cfg.n, cfg.s, max_iter=cfg.max_iter), rng)
    return Regularizer()


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    top1: float
    top5: float


@dataclass
class Metrics:
    epochs: list = field(default_factory=list)
    window: int = 50

    @property
    def final_top1(self):
        return float(np.mean([r.top1 for r in self.epochs[-self.window:]]))

    @property
    def final_top5(self):
        return float(np.mean([r.top5 for r in self.epochs[-self.window:]]))


def topk_accuracy(logits, labels, ks=(1, 5)):
    order = np.argsort(-logits, axis=1, kind="stable")
    labels = np.asarray(labels)[:, None]
    return tuple(float(np.mean(np.any(order[:, :k] == labels, axis=1))) for k in ks)


def evaluate(net, images, labels, regularizer=None, epoch=0, batch_size=256, mask=None):
    """Top-1/top-5 accuracy in inference mode."""
    logits = []
    for start in range(0, len(labels), batch_size):
        out, _ = forward(net, images[start:start + batch_size], Mode.INFERENCE, regularizer, epoch, mask)
        logits.append(out)
    return topk_accuracy(np.concatenate(logits), labels)


@dataclass
class TrainResult:
    net: Network
    metrics: Metrics
    optimizer: OptimizerState
    regularizer: Regularizer
    mean: np.ndarray
    std: np.ndarray


def train(net, train_set, test_set, cfg, rng=None, mean=None, std=None, log=None):
    """Run the full schedule: plain training, then cluster learning every ``s`` epochs.

    Shuffling, augmentation and mask sampling draw from separate child
    streams, so the regularizer never perturbs the data order.
    """
    if len(train_set) == 0:
        raise InvalidArgument("training set is empty")
    rng = as_random_source(cfg.seed if rng is None else rng)
    shuffle_rng, augment_rng, reg_rng = rng.child(1), rng.child(2), rng.child(3)
    if mean is None:
        mean, std = data_io.channel_stats(train_set.images)
    test_x = data_io.normalize(test_set.images.astype(net.dtype), mean, std)
    regularizer = make_regularizer(cfg, reg_rng)
    opt = OptimizerState(cfg.lr, cfg.momentum, cfg.weight_decay, cfg.milestones, cfg.decay)
    metrics = Metrics(window=cfg.eval_window)
    params = net.params()
    n = len(train_set)

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, opt)
        order = shuffle_rng.permutation(n)
        losses = []
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x = train_set.images[idx]
            if cfg.augment:
                x = np.stack([data_io.apply_augment(img, data_io.sample_augment(augment_rng)) for img in x])
            x = data_io.normalize(x.astype(net.dtype), mean, std)
            y = train_set.labels[idx]
            if bi == 0 and cfg.regularizer == "dropcluster" and schedule_should_recompute(epoch, cfg.s):
                regularizer.update(net.first_conv_activations(x).astype(np.float64), epoch)
            logits, cache = forward(net, x, Mode.TRAINING, regularizer, epoch)
            loss, dlogits = softmax_cross_entropy(logits.astype(np.float64), y)
            grads = backward(net, cache, upstream=dlogits.astype(net.dtype))
            sgd_momentum_step(params, grads, opt, lr)
            net.version += 1
            losses.append(loss)
        top1, top5 = evaluate(net, test_x, test_set.labels, regularizer, epoch)
        record = EpochRecord(epoch, lr, float(np.mean(losses)), top1, top5)
        metrics.epochs.append(record)
        if log is not None:
            log(record)
    return TrainResult(net, metrics, opt, regularizer, np.asarray(mean), np.asarray(std))


# -- checkpoints -------------------------------------------------------------------

def save_checkpoint(path, net, opt=None, state=None, mean=None, std=None, config=None):
    header = {
        "version": CHECKPOINT_VERSION,
        "input_shape": list(net.input_shape),
        "specs": [list(s) for s in net.specs()],
        "dtype": net.dtype.name,
        "optimizer": None if opt is None else {
            k: v for k, v in asdict(opt).items() if k != "velocity"
        },
        "config": config,
    }
    arrays = {f"param/{k}": v for k, v in net.param_items()}
    if opt is not None:
        arrays.update({f"velocity/{k}": v for k, v in opt.velocity.items()})
    if state is not None:
        t, n, w, h = state.T.shape
        arrays["state/header"] = np.array([t, n, w, h, state.epoch_computed])
        arrays["state/T"] = state.T.astype(np.uint8)
        arrays["state/unstructured"] = np.array(sorted(state.unstructured), dtype=np.int64)
    if mean is not None:
        arrays["norm/mean"] = np.asarray(mean, dtype=np.float64)
        arrays["norm/std"] = np.asarray(std, dtype=np.float64)
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(npz_bytes(arrays))


@dataclass
class Checkpoint:
    net: Network
    optimizer: OptimizerState
    state: ClusterState
    mean: np.ndarray
    std: np.ndarray
    config: dict


def load_checkpoint(path):
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise StateError(f"unsupported checkpoint version {header.get('version')}")
        net = Network(header["input_shape"], [tuple(s) for s in header["specs"]], 0, header["dtype"])
        net.load_params({k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")})
        opt = None
        if header["optimizer"] is not None:
            fields = dict(header["optimizer"])
            fields["milestones"] = tuple(fields["milestones"])
            opt = OptimizerState(**fields)
            opt.velocity = {k[len("velocity/"):]: z[k] for k in z.files if k.startswith("velocity/")}
        state = None
        if "state/header" in z.files:
            state = ClusterState.from_arrays(z["state/header"], z["state/T"], z["state/unstructured"])
        mean = z["norm/mean"] if "norm/mean" in z.files else None
        std = z["norm/std"] if "norm/std" in z.files else None
    return Checkpoint(net, opt, state, mean, std, header.get("config"))
