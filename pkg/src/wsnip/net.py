"""Small numpy neural-network core: MLPs with hand-written backprop, Adam,
learning-rate schedules and JSON checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
from scipy.special import expit

LN2 = math.log(2.0)
CHECKPOINT_FORMAT = "wsnip-checkpoint/1"

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
STLR_CUT_FRAC, STLR_RATIO = 0.1, 25.0
LINEAR_END_LR = 1e-5


class NetStateError(RuntimeError):
    """Backward called without a matching forward pass."""


class TrainingDivergedError(FloatingPointError):
    pass


class CheckpointFormatError(ValueError):
    pass


class IncompatibleCheckpointError(ValueError):
    pass


def ssp(x):
    """Shifted softplus ``ln(0.5 e^x + 0.5)``; zero at the origin."""
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))) - LN2


def ssp_with_grad(x):
    """``ssp(x)`` and its derivative, the logistic sigmoid."""
    val = np.log1p(np.exp(-np.abs(x)))
    val += np.maximum(x, 0.0)
    val -= LN2
    return val, expit(x)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Module:
    """Container of named parameter arrays, gradients and child modules."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add_param(self, name: str, value: np.ndarray):
        self.params[name] = np.asarray(value, dtype=np.float64)
        self.grads[name] = np.zeros_like(self.params[name])

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, arr in self.params.items():
            yield prefix + name, arr
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_grads(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, arr in self.grads.items():
            yield prefix + name, arr
        for cname, child in self.children.items():
            yield from child.named_grads(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, arr in self.buffers.items():
            yield prefix + name, arr
        for cname, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def zero_grad(self):
        for _, g in self.named_grads():
            g.fill(0.0)

    def state_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Parameters plus fixed buffers (normalization constants)."""
        out = dict(self.named_parameters(prefix))
        out.update(self.named_buffers(prefix))
        return out

    def load_arrays(self, arrays: Mapping[str, np.ndarray], prefix: str = "", strict: bool = True):
        """Copy arrays in place; every target is shape-checked before any write."""
        targets = self.state_arrays(prefix)
        selected = {k: v for k, v in arrays.items() if k.startswith(prefix)}
        if strict:
            missing = sorted(set(targets) - set(selected))
            if missing:
                raise IncompatibleCheckpointError(f"checkpoint lacks arrays {missing}")
        for name, value in selected.items():
            if name not in targets:
                raise IncompatibleCheckpointError(f"unexpected array {name!r}")
            if targets[name].shape != np.shape(value):
                raise IncompatibleCheckpointError(
                    f"array {name!r}: checkpoint shape {np.shape(value)} != model shape {targets[name].shape}"
                )
        for name, value in selected.items():
            targets[name][...] = value

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def n_parameters(self) -> int:
        return sum(a.size for _, a in self.named_parameters())


class Mlp(Module):
    """Fully connected net with ssp on hidden layers.

    The output layer is linear unless ``activate_output`` is set (used when the
    MLP is itself a representation). Forward retains activations for one
    backward call.
    """

    def __init__(self, widths, rng: np.random.Generator | None = None, activate_output: bool = False):
        super().__init__()
        self.widths = [int(w) for w in widths]
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.activate_output = activate_output
        rng = rng if rng is not None else np.random.default_rng(0)
        for l, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            self.add_param(f"W{l}", glorot(rng, a, b))
            self.add_param(f"b{l}", np.zeros(b))
        self._cache = None

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def forward(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.widths[0]:
            raise ValueError(f"expected input (B, {self.widths[0]}), got {X.shape}")
        inputs, slopes = [], []
        h = X
        for l in range(self.n_layers):
            inputs.append(h)
            z = h @ self.params[f"W{l}"] + self.params[f"b{l}"]
            if l < self.n_layers - 1 or self.activate_output:
                h, s = ssp_with_grad(z)
            else:
                h, s = z, None
            slopes.append(s)
        self._cache = (inputs, slopes)
        return h

    def backward(self, dY: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; return the gradient w.r.t. the input."""
        if self._cache is None:
            raise NetStateError("backward called before forward")
        inputs, slopes = self._cache
        self._cache = None
        g = np.asarray(dY, dtype=np.float64)
        for l in reversed(range(self.n_layers)):
            if slopes[l] is not None:
                g = g * slopes[l]
            self.grads[f"W{l}"] += inputs[l].T @ g
            self.grads[f"b{l}"] += g.sum(axis=0)
            g = g @ self.params[f"W{l}"].T
        return g


# --- optimization --------------------------------------------------------------------

@dataclass
class TrainState:
    """Optimizer bookkeeping: Adam moments, step counter and schedule."""

    total_steps: int
    scheduler: str = "linear_decay"
    base_lr: float = 1e-3
    batch_size: int = 32
    step: int = 0
    weight_decay: float = 0.0
    clip_norm: float | None = None
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.scheduler not in ("slanted_triangular", "linear_decay", "constant"):
            raise ValueError(f"unknown scheduler {self.scheduler!r}")
        if self.step < 0:
            raise ValueError("step must be >= 0")

    def scalars(self) -> dict:
        return {
            "total_steps": self.total_steps,
            "scheduler": self.scheduler,
            "base_lr": self.base_lr,
            "batch_size": self.batch_size,
            "step": self.step,
            "weight_decay": self.weight_decay,
            "clip_norm": self.clip_norm,
        }


def lr_at(state: TrainState, step: int | None = None) -> float:
    """Learning rate for a 0-based update index; clamps past the last step.

    ``slanted_triangular`` ramps linearly from ``lr/25`` to ``lr`` over the
    first 10% of updates and back down to ``lr/25`` at the last one;
    ``linear_decay`` goes from ``lr`` to 1e-5.
    """
    step = state.step if step is None else step
    span = max(state.total_steps - 1, 1)
    t = min(max(step, 0), span) / span
    lr = state.base_lr
    if state.scheduler == "constant":
        return lr
    if state.scheduler == "linear_decay":
        return lr + (LINEAR_END_LR - lr) * t
    cut = STLR_CUT_FRAC
    p = t / cut if t < cut else 1.0 - (t - cut) / (1.0 - cut)
    return lr * (1.0 + p * (STLR_RATIO - 1.0)) / STLR_RATIO


def adam_step(state: TrainState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> float:
    """One in-place Adam update of ``params``; returns the learning rate used."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient in {name!r} at step {state.step}")
    scale = 1.0
    if state.clip_norm is not None:
        total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if total > state.clip_norm:
            scale = state.clip_norm / total
    lr = lr_at(state)
    t = state.step + 1
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        if scale != 1.0:
            g = g * scale
        if state.weight_decay:
            g = g + state.weight_decay * p
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    state.step = t
    return lr


def optimize_step(model: Module, state: TrainState) -> float:
    params = dict(model.named_parameters())
    grads = dict(model.named_grads())
    return adam_step(state, params, grads)


# --- checkpoints ----------------------------------------------------------------------

def _encode(arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "values": arr.ravel().tolist()}


def _decode(name: str, d) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in d["shape"])
        values = np.array(d["values"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"array {name!r} is malformed: {exc}") from None
    if values.size != math.prod(shape):
        raise CheckpointFormatError(f"array {name!r} has {values.size} values for shape {shape}")
    return values.reshape(shape)


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray], state: TrainState | None = None,
                    meta: Mapping | None = None):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "arrays": {k: _encode(v) for k, v in sorted(arrays.items())},
        "meta": dict(meta or {}),
    }
    if state is not None:
        doc["state"] = state.scalars()
        doc["moments"] = {
            "m": {k: _encode(v) for k, v in sorted(state.m.items())},
            "v": {k: _encode(v) for k, v in sorted(state.v.items())},
        }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], TrainState | None, dict]:
    """Read a checkpoint fully before returning (no partial state on error)."""
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: not a checkpoint ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointFormatError(f"{path}: unknown checkpoint format")
    arrays = {k: _decode(k, v) for k, v in doc.get("arrays", {}).items()}
    state = None
    if "state" in doc:
        try:
            state = TrainState(**doc["state"])
        except TypeError as exc:
            raise CheckpointFormatError(f"{path}: bad train state ({exc})") from None
        moments = doc.get("moments", {})
        state.m = {k: _decode(k, v) for k, v in moments.get("m", {}).items()}
        state.v = {k: _decode(k, v) for k, v in moments.get("v", {}).items()}
    return arrays, state, doc.get("meta", {})
