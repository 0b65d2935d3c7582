"""Minimal differentiable building blocks with hand-derived gradients.

Forward functions return outputs (plus whatever the matching backward needs);
backward functions return input gradients and accumulate parameter gradients
into :class:`ParamTensor` buffers. Everything is float64 so finite-difference
verification is tight. There is deliberately no autodiff here: models chain
these pairs by hand and :func:`gradcheck` certifies the result.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np


@dataclass
class ParamTensor:
    """A named parameter with its gradient and Adam moment buffers."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    step: int = field(init=False, default=0)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in (0, 1)")


def adam_step(params: Iterable[ParamTensor], cfg: AdamConfig) -> None:
    """Bias-corrected Adam update on every parameter; gradients are zeroed.

    Raises ValueError naming the parameter if its gradient is non-finite.
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise ValueError(f"non-finite gradient in parameter {p.name!r}")
        p.step += 1
        p.m = cfg.beta1 * p.m + (1.0 - cfg.beta1) * p.grad
        p.v = cfg.beta2 * p.v + (1.0 - cfg.beta2) * p.grad ** 2
        m_hat = p.m / (1.0 - cfg.beta1 ** p.step)
        v_hat = p.v / (1.0 - cfg.beta2 ** p.step)
        p.value -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        p.zero_grad()


# --- layer forward/backward pairs -------------------------------------------

def dense_forward(x: np.ndarray, w: ParamTensor, b: ParamTensor) -> np.ndarray:
    """y = x @ W + b with W shaped (in, out)."""
    if x.shape[-1] != w.value.shape[0]:
        raise ValueError(
            f"dense input dim {x.shape[-1]} != weight fan-in {w.value.shape[0]}")
    return x @ w.value + b.value


def dense_backward(x: np.ndarray, w: ParamTensor, b: ParamTensor,
                   dy: np.ndarray) -> np.ndarray:
    if dy.shape != x.shape[:-1] + (w.value.shape[1],):
        raise ValueError(f"dense grad shape {dy.shape} mismatches output")
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    w.grad += x2.T @ dy2
    b.grad += dy2.sum(axis=0)
    return dy @ w.value.T


def tanh_forward(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Takes the forward output y = tanh(x)."""
    return dy * (1.0 - y * y)


def softmax_forward(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax along the last axis."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Takes the forward output p = softmax(x)."""
    inner = (dp * p).sum(axis=-1, keepdims=True)
    return p * (dp - inner)


def meanpool_forward(x: np.ndarray) -> np.ndarray:
    """Mean over rows of a (k, E) matrix."""
    return x.mean(axis=0)


def meanpool_backward(num_rows: int, dm: np.ndarray) -> np.ndarray:
    return np.broadcast_to(dm / num_rows, (num_rows,) + dm.shape).copy()


# --- finite-difference verification ------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    max_abs_diff: float
    rel_error: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    max_rel_error: float

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance

    def to_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "tensors": {e.name: {"max_abs_diff": e.max_abs_diff,
                                 "rel_error": e.rel_error} for e in self.entries},
        }


def gradcheck(fn: Callable[[bool], float], params: Sequence[ParamTensor],
              h: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    `fn(want_grad)` evaluates the loss at the current parameter values; when
    `want_grad` is true it must also accumulate gradients into the parameters.
    Every element of every parameter is perturbed. The per-tensor relative
    error is the max elementwise difference scaled by the larger of the two
    gradients' max-norms, so a uniformly tiny gradient cannot mask a wrong
    formula and finite-difference noise on near-zero entries cannot fail a
    correct one.
    """
    for p in params:
        p.zero_grad()
    fn(True)
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    entries = []
    for p, ga in zip(params, analytic):
        gn = np.zeros_like(p.value)
        flat = p.value.ravel()
        gflat = gn.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = fn(False)
            flat[i] = orig - h
            lm = fn(False)
            flat[i] = orig
            gflat[i] = (lp - lm) / (2.0 * h)
        diff = float(np.max(np.abs(ga - gn))) if ga.size else 0.0
        scale = max(float(np.max(np.abs(ga))) if ga.size else 0.0,
                    float(np.max(np.abs(gn))) if gn.size else 0.0, 1e-12)
        entries.append(GradCheckEntry(p.name, diff, diff / scale))
    for p in params:
        p.zero_grad()
    return GradCheckReport(entries, max(e.rel_error for e in entries))


# --- checkpoints: raw float64 blob + JSON manifest ---------------------------

def save_params(params: Sequence[ParamTensor], path: str | Path) -> None:
    """Write parameter values as one binary blob with a JSON manifest."""
    path = Path(path)
    manifest = []
    offset = 0
    chunks = []
    for p in params:
        raw = p.value.astype("<f8").tobytes()
        manifest.append({"name": p.name, "shape": list(p.value.shape),
                         "offset": offset})
        offset += len(raw)
        chunks.append(raw)
    path.write_bytes(b"".join(chunks))
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps({"dtype": "f64", "tensors": manifest}, sort_keys=True))


def load_params(params: Sequence[ParamTensor], path: str | Path) -> None:
    """Restore parameter values bit-exactly from :func:`save_params` output."""
    path = Path(path)
    manifest_path = path.with_suffix(path.suffix + ".json")
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing checkpoint manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    blob = path.read_bytes()
    by_name = {p.name: p for p in params}
    for entry in manifest["tensors"]:
        p = by_name.get(entry["name"])
        if p is None:
            raise ValueError(f"checkpoint tensor {entry['name']!r} has no target")
        shape = tuple(entry["shape"])
        if shape != p.value.shape:
            raise ValueError(
                f"checkpoint tensor {entry['name']!r} shape {shape} != {p.value.shape}")
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        p.value[...] = arr.reshape(shape)
