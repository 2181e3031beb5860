"""Small fully connected network engine in float64 numpy.

Parameters live in one flat vector per model. Layer weight matrices and bias
vectors are views into that vector, so flatten/unflatten is free and exact.
The layout of layer ``l`` is its ``(n_in, n_out)`` weight block in row-major
order followed by its ``n_out`` biases.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

ACTIVATIONS = ("elu", "linear")
OPTIMIZERS = ("sgd", "adam")


class TrainingDiverged(RuntimeError):
    """Raised when the loss or the parameters stop being finite."""


@dataclass(frozen=True)
class NetworkSpec:
    layer_sizes: tuple[int, ...]
    activations: tuple[str, ...]
    seed: int = 0
    weight_init: str = "scaled_uniform"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        object.__setattr__(self, "activations", tuple(a.lower() for a in self.activations))
        if len(self.layer_sizes) < 2:
            raise ValueError("layer_sizes needs at least an input and an output size")
        if any(s <= 0 for s in self.layer_sizes):
            raise ValueError(f"layer sizes must be positive, got {self.layer_sizes}")
        if len(self.activations) != len(self.layer_sizes) - 1:
            raise ValueError(
                f"{len(self.layer_sizes) - 1} layers need as many activations, "
                f"got {len(self.activations)}"
            )
        bad = [a for a in self.activations if a not in ACTIVATIONS]
        if bad:
            raise ValueError(f"unknown activation(s) {bad}; choose from {ACTIVATIONS}")
        if self.weight_init != "scaled_uniform":
            raise ValueError(f"unknown weight_init {self.weight_init!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def layer_slices(self) -> list[tuple[slice, slice]]:
        """(weight slice, bias slice) into the flat vector for every layer."""
        out = []
        pos = 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = slice(pos, pos + n_in * n_out)
            pos += n_in * n_out
            b = slice(pos, pos + n_out)
            pos += n_out
            out.append((w, b))
        return out

    def index_map(self) -> list[tuple[int, str, int, int]]:
        """Describe every flat index as ``(layer, kind, row, col)``.

        ``kind`` is ``"w"`` for weights (row = input unit, col = output unit) or
        ``"b"`` for biases (row = -1, col = output unit).
        """
        entries = []
        for layer, (n_in, n_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            entries.extend((layer, "w", r, c) for r in range(n_in) for c in range(n_out))
            entries.extend((layer, "b", -1, c) for c in range(n_out))
        return entries

    def layer_mask(self, layers) -> np.ndarray:
        """Boolean mask selecting all weights and biases of the given layers.

        Negative layer numbers count from the output layer.
        """
        mask = np.zeros(self.n_params, dtype=bool)
        for layer in layers:
            w, b = self.layer_slices()[layer]
            mask[w] = True
            mask[b] = True
        return mask

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activations": list(self.activations),
            "seed": self.seed,
            "weight_init": self.weight_init,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            layer_sizes=tuple(d["layer_sizes"]),
            activations=tuple(d["activations"]),
            seed=int(d.get("seed", 0)),
            weight_init=d.get("weight_init", "scaled_uniform"),
        )


@dataclass(frozen=True, eq=False)
class ModelState:
    """A network specification together with its flat parameters and mask.

    Treated as an immutable value: the arrays are flagged read-only.
    """

    spec: NetworkSpec
    params: np.ndarray
    trainable_mask: np.ndarray = None

    def __post_init__(self):
        params = np.array(self.params, dtype=np.float64).reshape(-1)
        if params.size != self.spec.n_params:
            raise ValueError(f"expected {self.spec.n_params} parameters, got {params.size}")
        if not np.all(np.isfinite(params)):
            raise ValueError("parameters must be finite")
        if self.trainable_mask is None:
            mask = np.ones(params.size, dtype=bool)
        else:
            mask = np.array(self.trainable_mask, dtype=bool).reshape(-1)
            if mask.size != params.size:
                raise ValueError(f"mask has {mask.size} entries, expected {params.size}")
        params.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "trainable_mask", mask)

    @property
    def n_params(self) -> int:
        return self.spec.n_params

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return unflatten(self.spec, self.params)

    def with_params(self, params) -> "ModelState":
        return ModelState(self.spec, params, self.trainable_mask)

    def with_mask(self, mask) -> "ModelState":
        return ModelState(self.spec, self.params, mask)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        h.update(self.params.tobytes())
        h.update(self.trainable_mask.tobytes())
        return h.hexdigest()


def unflatten(spec: NetworkSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat parameter vector into per-layer ``(W, b)`` views."""
    params = np.asarray(params)
    out = []
    for (w, b), n_in, n_out in zip(spec.layer_slices(), spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        out.append((params[w].reshape(n_in, n_out), params[b]))
    return out


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([np.ravel(W), np.ravel(b)]) for W, b in layers])


def build_network(spec: NetworkSpec) -> ModelState:
    """Initialise a network with scaled-uniform weights and zero biases.

    Weights of each layer are drawn from U(-a, a) with a = sqrt(6 / (n_in + n_out)).
    """
    rng = np.random.default_rng(spec.seed)
    params = np.zeros(spec.n_params)
    for (w, _), n_in, n_out in zip(spec.layer_slices(), spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        bound = math.sqrt(6.0 / (n_in + n_out))
        params[w] = rng.uniform(-bound, bound, size=n_in * n_out)
    return ModelState(spec, params)


def elu(x):
    return np.where(x >= 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_grad_from_output(a, z):
    # derivative of ELU expressed through its output: 1 for z >= 0, a + 1 otherwise
    return np.where(z >= 0, 1.0, a + 1.0)


def _as_batch(model: ModelState, inputs) -> tuple[np.ndarray, bool]:
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != model.spec.layer_sizes[0]:
        raise ValueError(
            f"input has {x.shape[1]} features, network expects {model.spec.layer_sizes[0]}"
        )
    return x, single


def forward(model: ModelState, inputs) -> np.ndarray:
    """Evaluate the network. Accepts one input vector or a 2-D batch."""
    h, single = _as_batch(model, inputs)
    for (W, b), act in zip(model.layers(), model.spec.activations):
        h = h @ W + b
        if act == "elu":
            h = elu(h)
    return h[0] if single else h


def forward_many(spec: NetworkSpec, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Evaluate a different parameter vector on every input row.

    ``params`` has shape (n, K) and ``inputs`` shape (n, n_in); row ``i`` of the
    result is the network with ``params[i]`` applied to ``inputs[i]``.
    """
    params = np.asarray(params, dtype=np.float64)
    h = np.asarray(inputs, dtype=np.float64)
    if params.ndim != 2 or params.shape[1] != spec.n_params:
        raise ValueError(f"params must have shape (n, {spec.n_params})")
    if h.shape != (params.shape[0], spec.layer_sizes[0]):
        raise ValueError(f"inputs must have shape ({params.shape[0]}, {spec.layer_sizes[0]})")
    n = params.shape[0]
    for (w, b), n_in, n_out, act in zip(
        spec.layer_slices(), spec.layer_sizes[:-1], spec.layer_sizes[1:], spec.activations
    ):
        W = params[:, w].reshape(n, n_in, n_out)
        h = np.einsum("ni,nio->no", h, W) + params[:, b]
        if act == "elu":
            h = elu(h)
    return h


def mse(model: ModelState, inputs, targets) -> float:
    pred = forward(model, np.atleast_2d(inputs))
    return float(np.mean((pred - np.atleast_2d(targets)) ** 2))


def _loss_and_grad(spec: NetworkSpec, params: np.ndarray, x: np.ndarray, y: np.ndarray):
    layers = unflatten(spec, params)
    acts = [x]
    h = x
    for (W, b), act in zip(layers, spec.activations):
        z = h @ W + b
        h = elu(z) if act == "elu" else z
        acts.append((z, h))
    err = acts[-1][1] - y
    loss = float(np.mean(err**2))
    grad = np.empty_like(params)
    delta = 2.0 * err / err.size
    for layer in range(spec.n_layers - 1, -1, -1):
        z, a = acts[layer + 1]
        if spec.activations[layer] == "elu":
            delta = delta * _elu_grad_from_output(a, z)
        h_prev = acts[layer] if layer == 0 else acts[layer][1]
        w, b = spec.layer_slices()[layer]
        grad[w] = (h_prev.T @ delta).ravel()
        grad[b] = delta.sum(axis=0)
        if layer:
            delta = delta @ layers[layer][0].T
    return loss, grad


def _check_batch(spec: NetworkSpec, inputs, targets):
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    y = np.asarray(targets, dtype=np.float64)
    y = y.reshape(x.shape[0], -1) if y.ndim < 2 else y
    if x.shape[0] == 0:
        raise ValueError("batch is empty")
    if x.shape[1] != spec.layer_sizes[0] or y.shape[1] != spec.layer_sizes[-1]:
        raise ValueError(
            f"batch shapes {x.shape}/{y.shape} do not match network "
            f"{spec.layer_sizes[0]}->{spec.layer_sizes[-1]}"
        )
    if y.shape[0] != x.shape[0]:
        raise ValueError("inputs and targets have different lengths")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("batch contains NaN or infinite values")
    return x, y


def backward(model: ModelState, inputs, targets) -> np.ndarray:
    """Gradient of the batch MSE with respect to every parameter.

    The loss is the mean of squared errors over all batch rows and outputs.
    Entries of frozen parameters (mask false) are zero.
    """
    x, y = _check_batch(model.spec, inputs, targets)
    _, grad = _loss_and_grad(model.spec, model.params, x, y)
    grad[~model.trainable_mask] = 0.0
    return grad


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")

    @classmethod
    def create(cls, kind: str, learning_rate: float, n_params: int, **kw) -> "OptimizerState":
        opt = cls(kind=kind, learning_rate=learning_rate, **kw)
        if opt.kind == "adam":
            opt.m = np.zeros(n_params)
            opt.v = np.zeros(n_params)
        return opt

    def copy(self) -> "OptimizerState":
        return replace(
            self,
            m=None if self.m is None else self.m.copy(),
            v=None if self.v is None else self.v.copy(),
        )


def _apply_update(params, grads, opt: OptimizerState, mask):
    """In-place optimizer update on ``params`` (and ``opt``)."""
    g = np.where(mask, grads, 0.0)
    opt.step_count += 1
    if opt.kind == "sgd":
        params -= opt.learning_rate * g
        return
    if opt.m is None:
        opt.m = np.zeros_like(params)
        opt.v = np.zeros_like(params)
    opt.m *= opt.beta1
    opt.m += (1.0 - opt.beta1) * g
    opt.v *= opt.beta2
    opt.v += (1.0 - opt.beta2) * g * g
    m_hat = opt.m / (1.0 - opt.beta1**opt.step_count)
    v_hat = opt.v / (1.0 - opt.beta2**opt.step_count)
    step = opt.learning_rate * m_hat / (np.sqrt(v_hat) + opt.epsilon)
    params -= np.where(mask, step, 0.0)


def optimizer_step(model: ModelState, grads, opt: OptimizerState):
    """One optimizer update. Returns a new model and a new optimizer state."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != (model.n_params,):
        raise ValueError(f"gradient must have length {model.n_params}")
    if not opt.learning_rate > 0:
        raise ValueError("learning rate must be positive")
    params = model.params.copy()
    new_opt = opt.copy()
    _apply_update(params, grads, new_opt, model.trainable_mask)
    return model.with_params(params), new_opt


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    shuffle_seed: int = 0
    shuffle: bool = True


@dataclass
class TrainResult:
    model: ModelState
    final_mse: float
    history: list[float] = field(default_factory=list)


def train(model: ModelState, inputs, targets, cfg: TrainConfig, opt: OptimizerState | None = None) -> TrainResult:
    """Mini-batch training on MSE. Fully deterministic for fixed seeds.

    ``history`` holds the mean batch loss of every epoch; ``final_mse`` is the
    MSE of the returned model on the full training set.
    """
    x, y = _check_batch(model.spec, inputs, targets)
    if cfg.epochs < 0 or cfg.batch_size < 1:
        raise ValueError("epochs must be >= 0 and batch_size >= 1")
    if cfg.epochs == 0:
        return TrainResult(model, mse(model, x, y), [])
    if opt is None:
        opt = OptimizerState.create(cfg.optimizer, cfg.learning_rate, model.n_params)
    else:
        opt = opt.copy()
    spec, mask = model.spec, model.trainable_mask
    params = model.params.copy()
    rng = np.random.default_rng(cfg.shuffle_seed)
    n = x.shape[0]
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grad = _loss_and_grad(spec, params, x[idx], y[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became {loss} in epoch {epoch} at batch offset {start} "
                    f"(lr={opt.learning_rate}, optimizer={opt.kind})"
                )
            total += loss * idx.size
            _apply_update(params, grad, opt, mask)
        history.append(total / n)
        if not np.all(np.isfinite(params)):
            raise TrainingDiverged(f"parameters became non-finite in epoch {epoch}")
    out = model.with_params(params)
    return TrainResult(out, mse(out, x, y), history)


def fmt_float(v: float) -> str:
    """Decimal text that round-trips a float64 exactly."""
    return format(float(v), ".17g")


def save_checkpoint(path, model: ModelState, optimizer: str = "adam", seeds: dict | None = None, extra=None):
    doc = {
        "spec": model.spec.to_dict(),
        "params": [fmt_float(v) for v in model.params],
        "mask": [bool(m) for m in model.trainable_mask],
        "optimizer": optimizer,
        "seeds": dict(seeds or {}),
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path) -> tuple[ModelState, dict]:
    doc = json.loads(Path(path).read_text())
    spec = NetworkSpec.from_dict(doc["spec"])
    params = np.array([float(v) for v in doc["params"]])
    return ModelState(spec, params, np.array(doc["mask"], dtype=bool)), doc
