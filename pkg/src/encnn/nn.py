"""Plaintext CNN: layer graph, forward/backward, SGD training, model files.

Two presets mirror the encrypted pipeline's expectations:

* "train-fig2": conv(5x5, 5 filters, same padding) -> ReLU -> mean-pool(2x2,
  stride 2) -> conv(5x5, 10) -> ReLU -> mean-pool -> fc(490->128) -> ReLU ->
  fc(128->10) -> softmax.
* "infer-fig3": the same graph with the activation after the second
  convolution removed and no softmax — the exact layer sequence the
  encrypted evaluator runs, so weights trained here drop straight in.

Activations are exact ReLU/Sigmoid or a fitted polynomial (ChebApprox,
evaluated in the monomial basis with its analytic derivative in backprop).
Training is plain mini-batch SGD with momentum, bit-reproducible for a fixed
seed because every array op is single-threaded and order-stable.

The published pooling row reads window 2x2 / stride (1,1) / output 14x14,
which is self-contradictory; the output shape wins, so pooling uses stride 2.
Mean-pooling divides by the window size exactly (the encrypted path instead
absorbs the 1/4 into its scale denominator — same arithmetic, shifted
bookkeeping).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .chebyshev import ChebApprox

__all__ = [
    "Tensor",
    "Conv",
    "Activation",
    "MeanPool",
    "FC",
    "Softmax",
    "NetworkConfig",
    "Model",
    "Hyperparams",
    "get_network",
    "forward",
    "backward",
    "train",
    "accuracy",
    "init_model",
    "save_model",
    "load_model",
]

Tensor = np.ndarray
ActivationSpec = Union[str, ChebApprox]


# ---------------------------------------------------------------------------
# layer descriptions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Conv:
    filters: int
    window: int = 5
    padding: str = "same"


@dataclass(frozen=True)
class Activation:
    spec: ActivationSpec  # "relu" | "sigmoid" | fitted polynomial


@dataclass(frozen=True)
class MeanPool:
    window: int = 2
    stride: int = 2


@dataclass(frozen=True)
class FC:
    out_dim: int


@dataclass(frozen=True)
class Softmax:
    pass


Layer = Union[Conv, Activation, MeanPool, FC, Softmax]


def _check_activation_spec(spec: ActivationSpec):
    if isinstance(spec, str):
        if spec not in ("relu", "sigmoid"):
            raise ValueError(f"unknown activation {spec!r}")
    elif not isinstance(spec, ChebApprox):
        raise TypeError(f"activation spec must be a name or ChebApprox, got {type(spec)}")


class NetworkConfig:
    """An ordered layer list with shapes composed and checked up front.

    Each layer gets a stable name (conv1, act1, pool1, ...) used for weight
    tensors, gradients, and the encrypted evaluator's per-layer reports.
    """

    def __init__(self, layers: Sequence[Layer], input_shape: Tuple[int, int, int] = (1, 28, 28)):
        self.input_shape = tuple(input_shape)
        self.layers: List[Layer] = list(layers)
        self.names: List[str] = []
        self.in_shapes: List[tuple] = []
        self.out_shapes: List[tuple] = []
        self.param_shapes: Dict[str, Dict[str, tuple]] = {}

        counters = {"conv": 0, "act": 0, "pool": 0, "fc": 0}
        shape = self.input_shape
        for pos, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                counters["conv"] += 1
                name = f"conv{counters['conv']}"
                if len(shape) != 3:
                    raise ValueError(f"{name}: expects a (C,H,W) input, got {shape}")
                if layer.padding != "same":
                    raise ValueError(f"{name}: only 'same' padding is supported")
                if layer.window % 2 != 1 or layer.window < 1:
                    raise ValueError(f"{name}: window must be odd, got {layer.window}")
                c, h, w = shape
                self.param_shapes[name] = {
                    "weight": (layer.filters, c, layer.window, layer.window),
                    "bias": (layer.filters,),
                }
                out = (layer.filters, h, w)
            elif isinstance(layer, Activation):
                _check_activation_spec(layer.spec)
                counters["act"] += 1
                name = f"act{counters['act']}"
                out = shape
            elif isinstance(layer, MeanPool):
                counters["pool"] += 1
                name = f"pool{counters['pool']}"
                if len(shape) != 3:
                    raise ValueError(f"{name}: expects a (C,H,W) input, got {shape}")
                c, h, w = shape
                if layer.window != layer.stride:
                    raise ValueError(f"{name}: only non-overlapping pooling is supported")
                if h % layer.stride or w % layer.stride:
                    raise ValueError(f"{name}: {h}x{w} not divisible by stride {layer.stride}")
                out = (c, h // layer.stride, w // layer.stride)
            elif isinstance(layer, FC):
                counters["fc"] += 1
                name = f"fc{counters['fc']}"
                in_dim = int(np.prod(shape))
                self.param_shapes[name] = {
                    "weight": (layer.out_dim, in_dim),
                    "bias": (layer.out_dim,),
                }
                out = (layer.out_dim,)
            elif isinstance(layer, Softmax):
                name = "softmax"
                if pos != len(self.layers) - 1:
                    raise ValueError("softmax must be the final layer")
                if len(shape) != 1:
                    raise ValueError(f"softmax: expects a vector input, got {shape}")
                out = shape
            else:
                raise TypeError(f"unknown layer type {type(layer)}")
            self.names.append(name)
            self.in_shapes.append(shape)
            self.out_shapes.append(out)
            shape = out
        self.output_shape = shape

    def with_activation(self, spec: ActivationSpec) -> "NetworkConfig":
        """The same graph with every activation layer replaced by `spec`."""
        _check_activation_spec(spec)
        return NetworkConfig(
            [replace(l, spec=spec) if isinstance(l, Activation) else l for l in self.layers],
            self.input_shape,
        )


def get_network(name: str, activation: ActivationSpec = "relu") -> NetworkConfig:
    """Named presets for the training and inference graphs."""
    _check_activation_spec(activation)
    a = Activation(activation)
    if name == "train-fig2":
        layers = [
            Conv(5), a, MeanPool(), Conv(10), a, MeanPool(),
            FC(128), a, FC(10), Softmax(),
        ]
    elif name == "infer-fig3":
        layers = [
            Conv(5), a, MeanPool(), Conv(10), MeanPool(),
            FC(128), a, FC(10),
        ]
    else:
        raise ValueError(f"unknown network preset {name!r}; use train-fig2 or infer-fig3")
    return NetworkConfig(layers)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class Model:
    tensors: Dict[str, np.ndarray]
    epochs: int = 0
    seed: int = 0
    final_accuracy: float = 0.0
    curve: List[dict] = field(default_factory=list)

    def check_against(self, config: NetworkConfig):
        for lname, parts in config.param_shapes.items():
            for pname, shape in parts.items():
                key = f"{lname}.{pname}"
                if key not in self.tensors:
                    raise ValueError(f"model is missing tensor {key}")
                if self.tensors[key].shape != shape:
                    raise ValueError(
                        f"tensor {key} has shape {self.tensors[key].shape}, "
                        f"config wants {shape}"
                    )


def init_model(config: NetworkConfig, seed: int, zero: bool = False) -> Model:
    """Uniform(+-sqrt(6/(fan_in+fan_out))) weights, zero biases, seeded."""
    rng = np.random.default_rng(seed)
    tensors: Dict[str, np.ndarray] = {}
    for lname in config.names:
        if lname not in config.param_shapes:
            continue
        wshape = config.param_shapes[lname]["weight"]
        if len(wshape) == 4:  # conv: (F, C, k, k)
            fan_in = int(np.prod(wshape[1:]))
            fan_out = wshape[0] * wshape[2] * wshape[3]
        else:  # fc: (out, in)
            fan_in, fan_out = wshape[1], wshape[0]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = np.zeros(wshape) if zero else rng.uniform(-limit, limit, wshape)
        tensors[f"{lname}.weight"] = w
        tensors[f"{lname}.bias"] = np.zeros(config.param_shapes[lname]["bias"])
    return Model(tensors, epochs=0, seed=seed)


# ---------------------------------------------------------------------------
# layer arithmetic (batched, channel-first)
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, window: int) -> np.ndarray:
    """(N,C,H,W) -> (N, C*window^2, H*W) patches under zero 'same' padding."""
    n, c, h, w = x.shape
    pad = window // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, window, window, h, w), dtype=x.dtype)
    for i in range(window):
        for j in range(window):
            cols[:, :, i, j] = xp[:, :, i : i + h, j : j + w]
    return cols.reshape(n, c * window * window, h * w)


def _col2im(dcols: np.ndarray, x_shape: tuple, window: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch gradients back to the image."""
    n, c, h, w = x_shape
    pad = window // 2
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    d = dcols.reshape(n, c, window, window, h, w)
    for i in range(window):
        for j in range(window):
            dxp[:, :, i : i + h, j : j + w] += d[:, :, i, j]
    return dxp[:, :, pad : pad + h, pad : pad + w]


def _act_forward(spec: ActivationSpec, x: np.ndarray) -> np.ndarray:
    if spec == "relu":
        return np.maximum(x, 0.0)
    if spec == "sigmoid":
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out
    # polynomial in the monomial basis — the same arithmetic the encrypted
    # evaluator performs, minus quantization
    acc = np.zeros_like(x)
    for coef in reversed(spec.mono_coeffs):
        acc = acc * x + coef
    return acc


def _act_backward(spec: ActivationSpec, x: np.ndarray, y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    if spec == "relu":
        return dy * (x > 0)
    if spec == "sigmoid":
        return dy * y * (1.0 - y)
    deriv = [k * c for k, c in enumerate(spec.mono_coeffs)][1:]
    acc = np.zeros_like(x)
    for coef in reversed(deriv):
        acc = acc * x + coef
    return dy * acc


def _as_batch(config: NetworkConfig, x: np.ndarray) -> Tuple[np.ndarray, bool]:
    c, h, w = config.input_shape
    x = np.asarray(x, dtype=np.float64)
    if x.shape == (h, w) and c == 1:
        return x.reshape(1, 1, h, w), True
    if x.shape == (c, h, w):
        return x.reshape(1, c, h, w), True
    if x.ndim == 3 and x.shape[1:] == (h, w) and c == 1:
        return x.reshape(-1, 1, h, w), False
    if x.ndim == 4 and x.shape[1:] == (c, h, w):
        return x, False
    raise ValueError(
        f"input shape {x.shape} does not match network input {config.input_shape}"
    )


def _forward_pass(
    config: NetworkConfig,
    model: Model,
    xb: np.ndarray,
    need_cache: bool,
    stop_before_softmax: bool = False,
):
    """Run the graph; optionally keep per-layer inputs for backprop."""
    caches = []
    x = xb
    for layer, name, in_shape in zip(config.layers, config.names, config.in_shapes):
        if x.shape[1:] != in_shape and not isinstance(layer, FC):
            raise ValueError(
                f"layer {name}: expected input {in_shape}, got {x.shape[1:]}"
            )
        if isinstance(layer, Softmax):
            if stop_before_softmax:
                break
            shifted = x - x.max(axis=1, keepdims=True)
            ex = np.exp(shifted)
            x = ex / ex.sum(axis=1, keepdims=True)
            if need_cache:
                caches.append((name, None))
        elif isinstance(layer, Conv):
            w = model.tensors[f"{name}.weight"]
            b = model.tensors[f"{name}.bias"]
            f, c, k, _ = w.shape
            cols = _im2col(x, k)
            out = np.einsum("fk,nkp->nfp", w.reshape(f, c * k * k), cols)
            out += b[None, :, None]
            nh, nw = x.shape[2], x.shape[3]
            if need_cache:
                caches.append((name, (x.shape, cols)))
            x = out.reshape(x.shape[0], f, nh, nw)
        elif isinstance(layer, Activation):
            y = _act_forward(layer.spec, x)
            if need_cache:
                caches.append((name, (layer.spec, x, y)))
            x = y
        elif isinstance(layer, MeanPool):
            s = layer.stride
            n, c, h, w = x.shape
            y = x.reshape(n, c, h // s, s, w // s, s).mean(axis=(3, 5))
            if need_cache:
                caches.append((name, (x.shape, s)))
            x = y
        elif isinstance(layer, FC):
            w = model.tensors[f"{name}.weight"]
            b = model.tensors[f"{name}.bias"]
            xf = x.reshape(x.shape[0], -1)
            if xf.shape[1] != w.shape[1]:
                raise ValueError(
                    f"layer {name}: expected {w.shape[1]} inputs, got {xf.shape[1]}"
                )
            y = xf @ w.T + b
            if need_cache:
                caches.append((name, (x.shape, xf)))
            x = y
    return x, caches


def forward(config: NetworkConfig, model: Model, x: np.ndarray) -> np.ndarray:
    """Logits (or probabilities, when the graph ends in softmax)."""
    model.check_against(config)
    xb, single = _as_batch(config, x)
    out, _ = _forward_pass(config, model, xb, need_cache=False)
    return out[0] if single else out


def _backward_pass(config: NetworkConfig, model: Model, caches, dlogits):
    grads = {k: np.zeros_like(v) for k, v in model.tensors.items()}
    dx = dlogits
    for (name, cache), layer in zip(reversed(caches), reversed(config.layers[: len(caches)])):
        if isinstance(layer, Softmax):
            continue  # folded into the loss gradient
        if isinstance(layer, FC):
            x_shape, xf = cache
            w = model.tensors[f"{name}.weight"]
            grads[f"{name}.weight"] += dx.T @ xf
            grads[f"{name}.bias"] += dx.sum(axis=0)
            dx = (dx @ w).reshape(x_shape)
        elif isinstance(layer, Activation):
            spec, x_in, y = cache
            dx = _act_backward(spec, x_in, y, dx)
        elif isinstance(layer, MeanPool):
            x_shape, s = cache
            n, c, h, w = x_shape
            dx = dx[:, :, :, None, :, None] * (1.0 / (s * s))
            dx = np.broadcast_to(dx, (n, c, h // s, s, w // s, s)).reshape(n, c, h, w)
        elif isinstance(layer, Conv):
            x_shape, cols = cache
            w = model.tensors[f"{name}.weight"]
            f, c, k, _ = w.shape
            n = x_shape[0]
            dout = dx.reshape(n, f, -1)
            grads[f"{name}.weight"] += np.einsum("nfp,nkp->fk", dout, cols).reshape(w.shape)
            grads[f"{name}.bias"] += dout.sum(axis=(0, 2))
            dcols = np.einsum("kf,nfp->nkp", w.reshape(f, c * k * k).T, dout)
            dx = _col2im(dcols, x_shape, k)
    return grads


def backward(config: NetworkConfig, model: Model, batch) -> Tuple[Dict[str, np.ndarray], float]:
    """Cross-entropy gradients for one (images, labels) batch, plus the loss.

    The loss is softmax cross-entropy over the final layer's logits whether
    or not the graph itself ends in a softmax layer.
    """
    images, labels = batch
    model.check_against(config)
    xb, _ = _as_batch(config, np.asarray(images))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) != xb.shape[0]:
        raise ValueError(f"{xb.shape[0]} images but {len(labels)} labels")
    logits, caches = _forward_pass(config, model, xb, need_cache=True, stop_before_softmax=True)
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    probs = ex / ex.sum(axis=1, keepdims=True)
    nb = xb.shape[0]
    loss = float(-np.log(probs[np.arange(nb), labels] + 1e-300).mean())
    dlogits = probs.copy()
    dlogits[np.arange(nb), labels] -= 1.0
    dlogits /= nb
    grads = _backward_pass(config, model, caches, dlogits)
    return grads, loss


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 10

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def train(
    config: NetworkConfig,
    dataset,
    hyperparams: Hyperparams = Hyperparams(),
    seed: int = 0,
    eval_dataset=None,
    log=None,
) -> Model:
    """Mini-batch SGD with momentum; deterministic for a fixed seed.

    The per-epoch curve records mean training loss and accuracy on
    `eval_dataset` (falling back to the training set).
    """
    if dataset.count == 0:
        raise ValueError("cannot train on an empty dataset")
    model = init_model(config, seed)
    rng = np.random.default_rng(seed ^ 0x5EED)
    velocity = {k: np.zeros_like(v) for k, v in model.tensors.items()}
    images, labels = dataset.images, dataset.labels
    probe = eval_dataset if eval_dataset is not None else dataset

    for epoch in range(hyperparams.epochs):
        perm = rng.permutation(dataset.count)
        losses = []
        for start in range(0, dataset.count, hyperparams.batch_size):
            idx = perm[start : start + hyperparams.batch_size]
            grads, loss = backward(config, model, (images[idx], labels[idx]))
            if not np.isfinite(loss):
                raise ValueError(
                    f"training diverged at epoch {epoch + 1} (loss is not finite); "
                    "try a smaller learning rate"
                )
            losses.append(loss)
            for k, g in grads.items():
                velocity[k] = hyperparams.momentum * velocity[k] - hyperparams.learning_rate * g
                model.tensors[k] += velocity[k]
        acc = accuracy(config, model, probe)
        model.curve.append(
            {"epoch": epoch + 1, "loss": float(np.mean(losses)), "accuracy": acc}
        )
        if log is not None:
            log(f"epoch {epoch + 1}/{hyperparams.epochs}: "
                f"loss {np.mean(losses):.4f}, accuracy {acc:.4f}")
    model.epochs = hyperparams.epochs
    model.final_accuracy = model.curve[-1]["accuracy"] if model.curve else accuracy(
        config, model, probe
    )
    return model


def accuracy(config: NetworkConfig, model: Model, dataset, batch_size: int = 256) -> float:
    """Fraction of argmax-correct predictions."""
    if dataset.count == 0:
        raise ValueError("empty dataset")
    hits = 0
    for start in range(0, dataset.count, batch_size):
        xs = dataset.images[start : start + batch_size]
        ys = dataset.labels[start : start + batch_size]
        out = forward(config, model, xs)
        hits += int((out.argmax(axis=1) == ys).sum())
    return hits / dataset.count


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------

_MODEL_MAGIC = b"BFNN"
_MODEL_VERSION = 1


def save_model(model: Model, path):
    """Write magic, version, and named float64 tensors (little-endian).

    Training metadata rides along as reserved scalar tensors named meta.*,
    and the loss/accuracy curve as an (epochs, 3) tensor.
    """
    entries = dict(model.tensors)
    entries["meta.epochs"] = np.array([float(model.epochs)])
    entries["meta.seed"] = np.array([float(model.seed)])
    entries["meta.final_accuracy"] = np.array([float(model.final_accuracy)])
    entries["meta.curve"] = np.array(
        [[e["epoch"], e["loss"], e["accuracy"]] for e in model.curve], dtype=np.float64
    ).reshape(-1, 3)

    blob = [_MODEL_MAGIC, struct.pack("<HH", _MODEL_VERSION, len(entries))]
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name], dtype="<f8")
        nb = name.encode()
        blob.append(struct.pack("<H", len(nb)))
        blob.append(nb)
        blob.append(struct.pack("<H", arr.ndim))
        blob.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blob.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MODEL_MAGIC:
        raise ValueError(f"not a model file (bad magic): {path}")
    version, count = struct.unpack("<HH", raw[4:8])
    if version != _MODEL_VERSION:
        raise ValueError(f"unsupported model file version {version}")
    off = 8
    entries: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", raw[off : off + 2])
        off += 2
        name = raw[off : off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack("<H", raw[off : off + 2])
        off += 2
        dims = struct.unpack(f"<{rank}I", raw[off : off + 4 * rank])
        off += 4 * rank
        total = int(np.prod(dims)) if rank else 1
        end = off + 8 * total
        if end > len(raw):
            raise ValueError(f"truncated model file: {path}")
        entries[name] = np.frombuffer(raw[off:end], dtype="<f8").reshape(dims).copy()
        off = end
    curve_arr = entries.pop("meta.curve", np.zeros((0, 3)))
    model = Model(
        tensors={k: v for k, v in entries.items() if not k.startswith("meta.")},
        epochs=int(entries.get("meta.epochs", [0])[0]),
        seed=int(entries.get("meta.seed", [0])[0]),
        final_accuracy=float(entries.get("meta.final_accuracy", [0.0])[0]),
        curve=[
            {"epoch": int(e), "loss": float(l), "accuracy": float(a)}
            for e, l, a in curve_arr
        ],
    )
    return model
