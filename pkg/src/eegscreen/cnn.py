"""Small from-scratch convolutional network with verified gradients.

The default stack is six 3x3 same-padding convolutions (16/16/32/32/64/64
filters, ReLU after each), 2x2 max-pools after the second and fourth
convolution, dropout after each pool and after the first dense layer, then
dense-128, dense-2 and a softmax output.  Everything runs in double
precision so analytic gradients can be compared against central finite
differences tightly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .features import tensor_to_bytes, tensor_from_bytes
from .ingest import Group


class CnnError(Exception):
    pass


class ShapeMismatchError(CnnError):
    pass


class EmptySetError(CnnError):
    pass


class InputTooSmallError(CnnError):
    pass


class InvalidEpsilonError(CnnError):
    pass


LAYER_KINDS = ("conv", "maxpool", "relu", "dropout", "flatten", "dense", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    params: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


def conv(out_channels: int, kernel: int = 3, stride: int = 1, padding: str = "same") -> LayerSpec:
    return LayerSpec("conv", {"out_channels": out_channels, "kernel": kernel,
                              "stride": stride, "padding": padding})


def maxpool(window: int = 2, stride: int = 2) -> LayerSpec:
    return LayerSpec("maxpool", {"window": window, "stride": stride})


def relu() -> LayerSpec:
    return LayerSpec("relu")


def dropout(rate: float) -> LayerSpec:
    return LayerSpec("dropout", {"rate": rate})


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", {"units": units})


def softmax() -> LayerSpec:
    return LayerSpec("softmax")


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 50
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    early_stop_patience: int = 0  # 0 disables early stopping

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or not self.learning_rate >= 0:
            raise ValueError("batch_size/epochs must be >= 1 and learning_rate >= 0")
        if self.optimizer not in ("sgd", "sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainHistory:
    train_loss: list[float] = dc_field(default_factory=list)
    train_acc: list[float] = dc_field(default_factory=list)
    val_acc: list[float] = dc_field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,train_acc,val_acc"]
        for i, (l, ta, va) in enumerate(zip(self.train_loss, self.train_acc, self.val_acc)):
            lines.append(f"{i},{l!r},{ta!r},{va!r}")
        return "\n".join(lines) + "\n"


class CnnModel:
    """Layer stack plus per-layer weight arrays and the dropout generator."""

    def __init__(self, layers: list[LayerSpec], input_shape: tuple[int, int, int],
                 seed: int = 0):
        if layers[-1].kind != "softmax":
            raise ValueError("softmax must be the terminal layer")
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.seed = seed
        self.mode = "infer"
        self.rng = np.random.default_rng(seed)
        self.weights: list[dict[str, np.ndarray]] = []
        self._init_weights()

    def _init_weights(self) -> None:
        rng = np.random.default_rng(self.seed)
        c, h, w = self.input_shape
        for spec in self.layers:
            entry: dict[str, np.ndarray] = {}
            if spec.kind == "conv":
                oc = spec.params["out_channels"]
                k = spec.params["kernel"]
                fan_in = c * k * k
                limit = np.sqrt(6.0 / fan_in)
                entry["w"] = rng.uniform(-limit, limit, size=(oc, c, k, k))
                entry["b"] = np.zeros(oc)
                c = oc
                if spec.params["padding"] != "same" or spec.params["stride"] != 1:
                    raise ValueError("conv supports stride 1 with same padding")
            elif spec.kind == "maxpool":
                win, st = spec.params["window"], spec.params["stride"]
                if h % st or w % st:
                    raise ShapeMismatchError(f"pool window does not tile {h}x{w}")
                h //= st
                w //= st
                if h < 1 or w < 1:
                    raise ValueError("spatial dims collapsed to zero")
            elif spec.kind == "flatten":
                c, h, w = c * h * w, 1, 1
            elif spec.kind == "dense":
                units = spec.params["units"]
                fan_in = c
                limit = np.sqrt(6.0 / fan_in)
                entry["w"] = rng.uniform(-limit, limit, size=(fan_in, units))
                entry["b"] = np.zeros(units)
                c = units
            self.weights.append(entry)
        if c != 2:
            raise ValueError(f"final layer must produce 2 units, got {c}")

    def weight_arrays(self) -> list[tuple[str, int, str]]:
        """(name, layer index, key) triples for every weight array, in order."""
        out = []
        for i, (spec, entry) in enumerate(zip(self.layers, self.weights)):
            for key in ("w", "b"):
                if key in entry:
                    out.append((f"layer{i:02d}.{spec.kind}.{key}", i, key))
        return out

    def copy_weights(self) -> list[dict[str, np.ndarray]]:
        return [{k: v.copy() for k, v in entry.items()} for entry in self.weights]

    def set_weights(self, weights) -> None:
        self.weights = [{k: v.copy() for k, v in entry.items()} for entry in weights]

    def parameter_count(self) -> int:
        return sum(v.size for entry in self.weights for v in entry.values())


def build_default(input_shape: tuple[int, int, int], seed: int = 0) -> CnnModel:
    """The six-convolution reference stack for inputs of at least 16x16."""
    c, h, w = input_shape
    if h < 16 or w < 16:
        raise InputTooSmallError(f"input {h}x{w} too small, need at least 16x16")
    layers = [
        conv(16), relu(), conv(16), relu(), maxpool(), dropout(0.25),
        conv(32), relu(), conv(32), relu(), maxpool(), dropout(0.25),
        conv(64), relu(), conv(64), relu(),
        flatten(), dense(128), relu(), dropout(0.5), dense(2), softmax(),
    ]
    return CnnModel(layers, input_shape, seed)


# ---------------------------------------------------------------------------
# Layer arithmetic
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int, pad: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    oh, ow = h, w  # stride 1, same padding
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, oh, ow, k, k),
        strides=(s[0], s[1], s[2], s[3], s[2], s[3]))
    cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(dcols: np.ndarray, xshape, k: int, pad: int) -> np.ndarray:
    n, c, h, w = xshape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    dview = dcols.reshape(n, h, w, c, k, k)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + w] += dview[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, pad:pad + h, pad:pad + w]


def _conv_forward(x, w, b):
    oc, ic, k, _ = w.shape
    pad = (k - 1) // 2
    cols, oh, ow = _im2col(x, k, pad)
    out = cols @ w.reshape(oc, -1).T + b
    out = out.reshape(x.shape[0], oh, ow, oc).transpose(0, 3, 1, 2)
    return out, (cols, x.shape, w.shape)


def _conv_backward(dout, w, cache):
    cols, xshape, wshape = cache
    oc = wshape[0]
    k = wshape[2]
    pad = (k - 1) // 2
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, oc)
    dw = (dmat.T @ cols).reshape(wshape)
    db = dmat.sum(axis=0)
    dcols = dmat @ w.reshape(oc, -1)
    dx = _col2im(dcols, xshape, k, pad)
    return dx, dw, db


def _pool_forward(x, win, stride):
    n, c, h, w = x.shape
    h2, w2 = h // stride, w // stride
    blocks = x.reshape(n, c, h2, win, w2, win).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, h2, w2, win * win)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape, win, stride)


def _pool_backward(dout, cache):
    arg, xshape, win, stride = cache
    n, c, h, w = xshape
    h2, w2 = h // stride, w // stride
    dflat = np.zeros((n, c, h2, w2, win * win))
    np.put_along_axis(dflat, arg[..., None], dout[..., None], axis=-1)
    dx = dflat.reshape(n, c, h2, w2, win, win).transpose(0, 1, 2, 4, 3, 5)
    return dx.reshape(n, c, h, w)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _forward_pass(model: CnnModel, x: np.ndarray, train: bool,
                  masks: list | None):
    """Run the stack; returns (probabilities, per-layer caches, masks used)."""
    caches: list = []
    used_masks: list = []
    out = x
    for i, spec in enumerate(model.layers):
        entry = model.weights[i]
        if spec.kind == "conv":
            out, cache = _conv_forward(out, entry["w"], entry["b"])
            caches.append(cache)
        elif spec.kind == "relu":
            caches.append(out > 0)
            out = np.maximum(out, 0.0)
        elif spec.kind == "maxpool":
            out, cache = _pool_forward(out, spec.params["window"], spec.params["stride"])
            caches.append(cache)
        elif spec.kind == "dropout":
            rate = spec.params["rate"]
            if train:
                if masks is not None:
                    mask = masks[len(used_masks)]
                else:
                    mask = model.rng.random(out.shape) >= rate
                used_masks.append(mask)
                out = out * mask / (1.0 - rate)
                caches.append(mask)
            else:
                caches.append(None)
        elif spec.kind == "flatten":
            caches.append(out.shape)
            out = out.reshape(out.shape[0], -1)
        elif spec.kind == "dense":
            caches.append(out)
            out = out @ entry["w"] + entry["b"]
        elif spec.kind == "softmax":
            out = _softmax(out)
            caches.append(out)
    return out, caches, used_masks


def _check_batch(model: CnnModel, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or batch.shape[1:] != model.input_shape:
        raise ShapeMismatchError(
            f"batch shape {batch.shape} does not match input {model.input_shape}")
    return batch


def forward(model: CnnModel, batch: np.ndarray) -> np.ndarray:
    """Class probabilities (n, 2); dropout is inactive outside training."""
    batch = _check_batch(model, batch)
    probs, _, _ = _forward_pass(model, batch, train=False, masks=None)
    return probs


def loss_and_grad(model: CnnModel, batch: np.ndarray, labels: np.ndarray,
                  masks: list | None = None):
    """Mean cross-entropy and per-layer weight gradients (train mode).

    Fresh dropout masks come from the model's generator unless ``masks``
    pins them (gradient checking needs frozen masks).
    """
    batch = _check_batch(model, batch)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch.shape[0],):
        raise ShapeMismatchError(f"labels shape {labels.shape} vs batch {batch.shape[0]}")
    n = batch.shape[0]
    probs, caches, used_masks = _forward_pass(model, batch, train=True, masks=masks)
    eps = np.finfo(np.float64).tiny
    loss = float(-np.log(probs[np.arange(n), labels] + eps).mean())

    grads: list[dict[str, np.ndarray]] = [{} for _ in model.layers]
    # softmax + cross-entropy collapse to (p - onehot)/n at the logits
    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    for i in range(len(model.layers) - 2, -1, -1):
        spec = model.layers[i]
        entry = model.weights[i]
        cache = caches[i]
        if spec.kind == "dense":
            grads[i]["w"] = cache.T @ delta
            grads[i]["b"] = delta.sum(axis=0)
            delta = delta @ entry["w"].T
        elif spec.kind == "relu":
            delta = delta * cache
        elif spec.kind == "dropout":
            delta = delta * cache / (1.0 - spec.params["rate"])
        elif spec.kind == "flatten":
            delta = delta.reshape(cache)
        elif spec.kind == "maxpool":
            delta = _pool_backward(delta, cache)
        elif spec.kind == "conv":
            delta, dw, db = _conv_backward(delta, entry["w"], cache)
            grads[i]["w"] = dw
            grads[i]["b"] = db
    return loss, grads, used_masks


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _as_xy(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, tuple):
        x, y = data
        return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)
    tensors = list(data)
    if not tensors:
        raise EmptySetError("empty tensor set")
    x = np.stack([t.data for t in tensors])
    y = np.array([1 if t.label is Group.ALCOHOLIC else 0 for t in tensors],
                 dtype=np.int64)
    return x, y


def _accuracy(model: CnnModel, x: np.ndarray, y: np.ndarray, chunk: int = 64) -> float:
    hits = 0
    for start in range(0, x.shape[0], chunk):
        probs = forward(model, x[start:start + chunk])
        hits += int((probs.argmax(axis=1) == y[start:start + chunk]).sum())
    return hits / x.shape[0]


class _Optimizer:
    def __init__(self, cfg: TrainConfig, model: CnnModel):
        self.kind = cfg.optimizer
        self.lr = cfg.learning_rate
        self.t = 0
        self.slots = [{k: np.zeros_like(v) for k, v in entry.items()}
                      for entry in model.weights]
        if self.kind == "adam":
            self.slots2 = [{k: np.zeros_like(v) for k, v in entry.items()}
                           for entry in model.weights]

    def step(self, model: CnnModel, grads) -> None:
        self.t += 1
        for entry, g, m1 in zip(model.weights, grads, self.slots):
            for key in entry:
                grad = g[key]
                if self.kind == "sgd":
                    entry[key] -= self.lr * grad
                elif self.kind == "sgd_momentum":
                    m1[key] = 0.9 * m1[key] - self.lr * grad
                    entry[key] += m1[key]
        if self.kind == "adam":
            b1, b2, eps = 0.9, 0.999, 1e-8
            for entry, g, m1, m2 in zip(model.weights, grads, self.slots, self.slots2):
                for key in entry:
                    grad = g[key]
                    m1[key] = b1 * m1[key] + (1 - b1) * grad
                    m2[key] = b2 * m2[key] + (1 - b2) * grad * grad
                    mhat = m1[key] / (1 - b1 ** self.t)
                    vhat = m2[key] / (1 - b2 ** self.t)
                    entry[key] -= self.lr * mhat / (np.sqrt(vhat) + eps)


def train(model: CnnModel, train_set, val_set, cfg: TrainConfig) -> tuple[CnnModel, TrainHistory]:
    """Mini-batch gradient descent; returns the best-validation weights.

    Batch order derives from cfg.seed per epoch, dropout masks from the
    model's generator, so a rerun from a freshly built model reproduces the
    history bit for bit.
    """
    x_train, y_train = _as_xy(train_set)
    x_val, y_val = _as_xy(val_set)
    if x_train.shape[0] == 0 or x_val.shape[0] == 0:
        raise EmptySetError("training and validation sets must be nonempty")
    _check_batch(model, x_train)
    _check_batch(model, x_val)

    order_rng = np.random.default_rng(cfg.seed)
    optimizer = _Optimizer(cfg, model)
    history = TrainHistory()
    best_acc = -1.0
    best_weights = model.copy_weights()
    since_best = 0
    model.mode = "train"
    for _ in range(cfg.epochs):
        perm = order_rng.permutation(x_train.shape[0])
        losses = []
        for start in range(0, perm.size, cfg.batch_size):
            sel = perm[start:start + cfg.batch_size]
            loss, grads, _ = loss_and_grad(model, x_train[sel], y_train[sel])
            optimizer.step(model, grads)
            losses.append(loss)
        train_acc = _accuracy(model, x_train, y_train)
        val_acc = _accuracy(model, x_val, y_val)
        history.train_loss.append(float(np.mean(losses)))
        history.train_acc.append(train_acc)
        history.val_acc.append(val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            best_weights = model.copy_weights()
            since_best = 0
        else:
            since_best += 1
            if cfg.early_stop_patience and since_best >= cfg.early_stop_patience:
                break
    model.set_weights(best_weights)
    model.mode = "infer"
    return model, history


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def grad_check(model: CnnModel, batch, labels, epsilon: float = 1e-5,
               samples_per_array: int | None = 16, seed: int = 0) -> dict[str, float]:
    """Max relative error |g_a - g_n| / max(|g_a|, |g_n|, 1e-12) per array.

    Checks ``samples_per_array`` randomly chosen entries of each weight
    array (None checks every entry; feasible only for small stacks).
    Dropout masks are drawn once and frozen across all evaluations.
    """
    if not epsilon > 0:
        raise InvalidEpsilonError(f"epsilon must be > 0, got {epsilon}")
    batch = _check_batch(model, np.asarray(batch, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)

    mask_rng = np.random.default_rng(seed)
    masks = _frozen_masks(model, batch, mask_rng)

    _, grads, _ = loss_and_grad(model, batch, labels, masks=masks)
    pick_rng = np.random.default_rng(seed + 1)
    report: dict[str, float] = {}
    for name, layer_idx, key in model.weight_arrays():
        arr = model.weights[layer_idx][key]
        flat = arr.ravel()
        if samples_per_array is None or samples_per_array >= flat.size:
            indices = np.arange(flat.size)
        else:
            indices = pick_rng.choice(flat.size, size=samples_per_array, replace=False)
        worst = 0.0
        for idx in indices:
            orig = flat[idx]
            flat[idx] = orig + epsilon
            lp, _, _ = loss_and_grad(model, batch, labels, masks=masks)
            flat[idx] = orig - epsilon
            lm, _, _ = loss_and_grad(model, batch, labels, masks=masks)
            flat[idx] = orig
            numeric = (lp - lm) / (2.0 * epsilon)
            analytic = grads[layer_idx][key].ravel()[idx]
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
            worst = max(worst, rel)
        report[name] = worst
    return report


def _frozen_masks(model: CnnModel, batch: np.ndarray, rng) -> list[np.ndarray]:
    """Dropout masks with the same shapes a training pass would produce."""
    masks = []
    shape = batch.shape
    c, h, w = model.input_shape
    cur = (shape[0], c, h, w)
    for spec in model.layers:
        if spec.kind == "conv":
            cur = (cur[0], spec.params["out_channels"], cur[2], cur[3])
        elif spec.kind == "maxpool":
            st = spec.params["stride"]
            cur = (cur[0], cur[1], cur[2] // st, cur[3] // st)
        elif spec.kind == "flatten":
            cur = (cur[0], cur[1] * cur[2] * cur[3])
        elif spec.kind == "dense":
            cur = (cur[0], spec.params["units"])
        elif spec.kind == "dropout":
            masks.append(rng.random(cur) >= spec.params["rate"])
    return masks


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_model(model: CnnModel, prefix) -> None:
    """JSON manifest plus concatenated binary weight records."""
    prefix = Path(prefix)
    arrays = model.weight_arrays()
    manifest = {
        "format": "eegscreen-cnn/1",
        "input_shape": list(model.input_shape),
        "seed": model.seed,
        "layers": [{"kind": s.kind, "params": s.params} for s in model.layers],
        "arrays": [{"name": name, "shape": list(model.weights[i][k].shape)}
                   for name, i, k in arrays],
    }
    Path(str(prefix) + ".json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    blob = b"".join(
        tensor_to_bytes(0, model.weights[i][k].reshape(1, 1, -1))
        for _, i, k in arrays)
    Path(str(prefix) + ".bin").write_bytes(blob)


def load_model(prefix) -> CnnModel:
    prefix = Path(prefix)
    manifest = json.loads(Path(str(prefix) + ".json").read_text())
    layers = [LayerSpec(d["kind"], d["params"]) for d in manifest["layers"]]
    model = CnnModel(layers, tuple(manifest["input_shape"]), manifest["seed"])
    blob = Path(str(prefix) + ".bin").read_bytes()
    offset = 0
    header = struct.Struct("<3sBIII")
    for meta, (name, i, k) in zip(manifest["arrays"], model.weight_arrays()):
        if meta["name"] != name:
            raise CnnError(f"weight order mismatch: {meta['name']} != {name}")
        _, _, d0, d1, d2 = header.unpack_from(blob, offset)
        size = header.size + d0 * d1 * d2 * 8
        _, data = tensor_from_bytes(blob[offset:offset + size])
        model.weights[i][k] = data.reshape(meta["shape"])
        offset += size
    return model
