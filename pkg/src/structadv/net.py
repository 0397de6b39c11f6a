"""A small self-contained classifier (conv / dense / relu / maxpool) with
manual backpropagation, softmax cross-entropy, SGD and adversarial training,
and a bit-exact JSON parameter format.

Everything runs in double precision so finite-difference gradient checks are
meaningful.  Batched inputs are (N, C, H, W); single images are (C, H, W).
"""

import base64
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

PARAMS_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Conv:
    """3x3 convolution, stride 1, zero padding 1 (shape preserving)."""

    out_channels: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class MaxPool:
    """2x2 max pooling, stride 2; requires even spatial dims."""


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    out_dim: int


@dataclass(frozen=True)
class NetSpec:
    layers: tuple
    input_shape: tuple
    num_classes: int

    def __post_init__(self):
        shapes = layer_shapes(self)
        final = shapes[-1]
        if final != (self.num_classes,):
            raise ValueError(f"final layer outputs {final}, expected ({self.num_classes},) logits")


def layer_shapes(spec):
    """Per-layer output shapes; raises if the chain is inconsistent."""
    shape = tuple(spec.input_shape)
    out = [shape]
    for layer in spec.layers:
        if isinstance(layer, Conv):
            c, h, w = shape
            shape = (layer.out_channels, h, w)
        elif isinstance(layer, Relu):
            pass
        elif isinstance(layer, MaxPool):
            c, h, w = shape
            if h % 2 or w % 2:
                raise ValueError(f"maxpool needs even spatial dims, got {h}x{w}")
            shape = (c, h // 2, w // 2)
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(layer, Dense):
            if len(shape) != 1:
                raise ValueError("dense layer needs a flattened input")
            shape = (layer.out_dim,)
        else:
            raise TypeError(f"unknown layer {layer!r}")
        out.append(shape)
    return out


def mlp_spec(input_shape, num_classes, hidden=128):
    return NetSpec((Flatten(), Dense(hidden), Relu(), Dense(num_classes)),
                   tuple(input_shape), num_classes)


def cnn_spec(input_shape, num_classes):
    c, h, w = input_shape
    return NetSpec((Conv(8), Relu(), MaxPool(), Conv(16), Relu(), MaxPool(),
                    Flatten(), Dense(num_classes)),
                   tuple(input_shape), num_classes)


PRESETS = {"mlp": mlp_spec, "cnn": cnn_spec}


def init_params(spec, seed=0):
    """Glorot-uniform weights, zero biases; deterministic given the seed."""
    rng = np.random.default_rng(seed)
    shapes = layer_shapes(spec)
    params = []
    for layer, in_shape in zip(spec.layers, shapes):
        if isinstance(layer, Conv):
            c_in = in_shape[0]
            fan_in, fan_out = c_in * 9, layer.out_channels * 9
            a = np.sqrt(6.0 / (fan_in + fan_out))
            params.append({"w": rng.uniform(-a, a, size=(layer.out_channels, c_in, 3, 3)),
                           "b": np.zeros(layer.out_channels)})
        elif isinstance(layer, Dense):
            fan_in = in_shape[0]
            a = np.sqrt(6.0 / (fan_in + layer.out_dim))
            params.append({"w": rng.uniform(-a, a, size=(layer.out_dim, fan_in)),
                           "b": np.zeros(layer.out_dim)})
        else:
            params.append(None)
    return params


def _im2col(x):
    # (N, C, H, W) -> (N, C*9, H*W) with 3x3 windows, pad 1, stride 1
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 9, h, w))
    k = 0
    for di in range(3):
        for dj in range(3):
            cols[:, :, k] = xp[:, :, di:di + h, dj:dj + w]
            k += 1
    return cols.reshape(n, c * 9, h * w)


def _col2im(cols, shape):
    # adjoint of _im2col
    n, c, h, w = shape
    cols = cols.reshape(n, c, 9, h, w)
    xp = np.zeros((n, c, h + 2, w + 2))
    k = 0
    for di in range(3):
        for dj in range(3):
            xp[:, :, di:di + h, dj:dj + w] += cols[:, :, k]
            k += 1
    return xp[:, :, 1:-1, 1:-1]


def _forward(spec, params, x):
    """Batched forward pass returning logits and per-layer caches."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != tuple(spec.input_shape):
        raise ValueError(f"input shape {x.shape[1:]} does not match spec {spec.input_shape}")
    caches = []
    out = x
    for layer, p in zip(spec.layers, params):
        if isinstance(layer, Conv):
            n, c, h, w = out.shape
            cols = _im2col(out)
            wmat = p["w"].reshape(layer.out_channels, c * 9)
            z = np.einsum("oc,ncp->nop", wmat, cols) + p["b"][None, :, None]
            caches.append((out.shape, cols))
            out = z.reshape(n, layer.out_channels, h, w)
        elif isinstance(layer, Relu):
            caches.append(out > 0)
            out = np.maximum(out, 0.0)
        elif isinstance(layer, MaxPool):
            n, c, h, w = out.shape
            win = out.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
            win = win.reshape(n, c, h // 2, w // 2, 4)
            idx = np.argmax(win, axis=-1)
            caches.append((out.shape, idx))
            out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        elif isinstance(layer, Flatten):
            caches.append(out.shape)
            out = out.reshape(out.shape[0], -1)
        elif isinstance(layer, Dense):
            caches.append(out)
            out = out @ p["w"].T + p["b"]
    return out, caches


def _backward(spec, params, caches, dlogits, want_param_grads):
    """Backpropagate dlogits; returns (dinput, param_grads or None)."""
    grads = [None] * len(spec.layers) if want_param_grads else None
    d = dlogits
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, p, cache = spec.layers[i], params[i], caches[i]
        if isinstance(layer, Conv):
            in_shape, cols = cache
            n, o = d.shape[0], layer.out_channels
            dz = d.reshape(n, o, -1)
            if want_param_grads:
                dw = np.einsum("nop,ncp->oc", dz, cols)
                grads[i] = {"w": dw.reshape(p["w"].shape), "b": dz.sum(axis=(0, 2))}
            wmat = p["w"].reshape(o, -1)
            dcols = np.einsum("oc,nop->ncp", wmat, dz)
            d = _col2im(dcols, in_shape)
        elif isinstance(layer, Relu):
            d = d * cache
        elif isinstance(layer, MaxPool):
            in_shape, idx = cache
            n, c, h, w = in_shape
            dwin = np.zeros((n, c, h // 2, w // 2, 4))
            np.put_along_axis(dwin, idx[..., None], d[..., None], axis=-1)
            d = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(in_shape)
        elif isinstance(layer, Flatten):
            d = d.reshape(cache)
        elif isinstance(layer, Dense):
            if want_param_grads:
                grads[i] = {"w": d.T @ cache, "b": d.sum(axis=0)}
            d = d @ p["w"]
    return d, grads


def forward(spec, params, x):
    """Logits for a batch (N, C, H, W) or a single image (C, H, W)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    logits, _ = _forward(spec, params, x)
    return logits[0] if single else logits


def predict(spec, params, x):
    logits = forward(spec, params, x)
    return int(np.argmax(logits)) if logits.ndim == 1 else np.argmax(logits, axis=1)


def _softmax_ce(logits, labels):
    """Mean softmax cross-entropy and dloss/dlogits for a batch."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    losses = -shifted[np.arange(n), labels] + np.log(exp.sum(axis=1))
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return float(losses.mean()), dlogits / n


def loss_and_input_grad(spec, params, x, y):
    """Softmax cross-entropy of one image vs label y, and its input gradient."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected a single (c, h, w) image, got shape {x.shape}")
    if not 0 <= y < spec.num_classes:
        raise ValueError(f"label {y} outside [0, {spec.num_classes})")
    logits, caches = _forward(spec, params, x[None])
    loss, dlogits = _softmax_ce(logits, np.array([y]))
    dx, _ = _backward(spec, params, caches, dlogits, want_param_grads=False)
    return loss, dx[0]


def loss_and_grads(spec, params, x, y):
    """Batch loss, parameter gradients, and input gradients (training path)."""
    logits, caches = _forward(spec, params, np.asarray(x, dtype=np.float64))
    loss, dlogits = _softmax_ce(logits, np.asarray(y))
    dx, grads = _backward(spec, params, caches, dlogits, want_param_grads=True)
    return loss, grads, dx


def _clone_params(params):
    return [None if p is None else {"w": p["w"].copy(), "b": p["b"].copy()} for p in params]


def accuracy(spec, params, images, labels, batch=256):
    hits = 0
    for i in range(0, len(images), batch):
        pred = np.argmax(forward(spec, params, images[i:i + batch]), axis=1)
        hits += int(np.sum(pred == labels[i:i + batch]))
    return hits / len(images)


def _batched_pgd(spec, params, x, y, epsilon, alpha, iters):
    """PGD in l-inf for a whole training batch; epsilon 0 is exactly identity."""
    delta = np.zeros_like(x)
    for _ in range(iters):
        logits, caches = _forward(spec, params, x + delta)
        _, dlogits = _softmax_ce(logits, y)
        dx, _ = _backward(spec, params, caches, dlogits, want_param_grads=False)
        delta = np.clip(delta + alpha * np.sign(dx), -epsilon, epsilon)
        delta = np.clip(x + delta, 0.0, 1.0) - x
    return x + delta


def train_sgd(spec, images, labels, epochs, lr, batch=64, seed=0,
              val_images=None, val_labels=None, log_path=None,
              inner_attack=None):
    """Minibatch SGD; deterministic given the seed.

    ``inner_attack`` = {"epsilon": e, "alpha": a, "iters": k} switches on
    adversarial training: each batch is replaced by its PGD perturbation before
    the gradient step.  With epsilon 0 this reduces exactly to standard SGD.
    Appends per-epoch metrics to ``log_path`` as line-delimited JSON.
    """
    if len(images) == 0:
        raise ValueError("dataset is empty")
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    params = init_params(spec, seed=seed)
    rng = np.random.default_rng(seed + 1)
    n = len(images)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        hits = 0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            xb = np.asarray(images[idx], dtype=np.float64)
            yb = np.asarray(labels[idx])
            if inner_attack is not None:
                xb = _batched_pgd(spec, params, xb, yb,
                                  inner_attack["epsilon"], inner_attack["alpha"],
                                  inner_attack["iters"])
            loss, grads, _ = loss_and_grads(spec, params, xb, yb)
            if not np.isfinite(loss):
                raise RuntimeError(f"training diverged: non-finite loss at epoch {epoch}")
            epoch_loss += loss * len(idx)
            hits += int(np.sum(np.argmax(forward(spec, params, xb), axis=1) == yb))
            for p, g in zip(params, grads):
                if p is not None:
                    p["w"] -= lr * g["w"]
                    p["b"] -= lr * g["b"]
        entry = {"epoch": epoch, "loss": epoch_loss / n, "train_accuracy": hits / n}
        if val_images is not None:
            entry["val_accuracy"] = accuracy(spec, params, val_images, val_labels)
        history.append(entry)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return params, history


def adversarial_train(spec, images, labels, epochs, lr, epsilon, alpha, iters,
                      batch=64, seed=0, **kw):
    """Madry-style training: fit on PGD-perturbed batches."""
    return train_sgd(spec, images, labels, epochs, lr, batch=batch, seed=seed,
                     inner_attack={"epsilon": epsilon, "alpha": alpha, "iters": iters},
                     **kw)


def _spec_to_json(spec):
    layers = []
    for layer in spec.layers:
        if isinstance(layer, Conv):
            layers.append({"type": "conv", "out_channels": layer.out_channels})
        elif isinstance(layer, Relu):
            layers.append({"type": "relu"})
        elif isinstance(layer, MaxPool):
            layers.append({"type": "maxpool"})
        elif isinstance(layer, Flatten):
            layers.append({"type": "flatten"})
        elif isinstance(layer, Dense):
            layers.append({"type": "dense", "out_dim": layer.out_dim})
    return {"layers": layers, "input_shape": list(spec.input_shape),
            "num_classes": spec.num_classes}


def spec_from_json(obj):
    builders = {"conv": lambda d: Conv(d["out_channels"]),
                "relu": lambda d: Relu(),
                "maxpool": lambda d: MaxPool(),
                "flatten": lambda d: Flatten(),
                "dense": lambda d: Dense(d["out_dim"])}
    layers = tuple(builders[d["type"]](d) for d in obj["layers"])
    return NetSpec(layers, tuple(obj["input_shape"]), obj["num_classes"])


def _encode(arr):
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _decode(text, shape):
    raw = base64.b64decode(text.encode("ascii"))
    expected = int(np.prod(shape)) * 8
    if len(raw) != expected:
        raise ValueError(f"parameter payload holds {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def save_params(path, spec, params, seed=None):
    """JSON manifest with base64 little-endian float64 arrays; round trips
    bit-exactly."""
    doc = {"format_version": PARAMS_FORMAT_VERSION,
           "spec": _spec_to_json(spec),
           "seed": seed,
           "layers": [None if p is None else
                      {"w": _encode(p["w"]), "w_shape": list(p["w"].shape),
                       "b": _encode(p["b"]), "b_shape": list(p["b"].shape)}
                      for p in params]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_params(path):
    """Load a parameter manifest; returns (spec, params).  Malformed files are
    refused with the failing byte position; version mismatches are explicit."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed parameter file {path} at position {exc.pos}: {exc.msg}") from exc
    version = doc.get("format_version")
    if version != PARAMS_FORMAT_VERSION:
        raise ValueError(f"parameter file version {version!r} unsupported "
                         f"(expected {PARAMS_FORMAT_VERSION})")
    spec = spec_from_json(doc["spec"])
    params = []
    for entry in doc["layers"]:
        if entry is None:
            params.append(None)
        else:
            params.append({"w": _decode(entry["w"], entry["w_shape"]),
                           "b": _decode(entry["b"], entry["b_shape"])})
    shapes = [None if p is None else p["w"].shape for p in init_params(spec, seed=0)]
    for want, have in zip(shapes, params):
        if (want is None) != (have is None) or (want is not None and tuple(want) != have["w"].shape):
            raise ValueError("parameter shapes do not match the declared spec")
    return spec, params
