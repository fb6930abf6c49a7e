"""Divergence-free velocity noise fields sigma^k(x, v) and derived quantities.

A :class:`NoiseModel` is one of four kinds:

* ``zero``: sigma^k = 0,
* ``additive``: sigma^k = c^k,
* ``affine``: sigma^k = S^k v + c^k with trace(S^k) = 0,
* ``custom``: user evaluators for sigma, its (x, v) Jacobian and optionally
  its Hessian, all vectorized over points and modes.

Evaluators broadcast over leading axes: ``x`` and ``v`` of shape ``(..., d)``
give ``sigma_all`` of shape ``(..., K, d)`` and ``sigma_jacobian`` of shape
``(..., K, d, 2d)`` with derivative columns ordered ``(x_1..x_d, v_1..v_d)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

KINDS = ("zero", "additive", "affine", "custom")


class NoiseError(ValueError):
    """Invalid noise specification or unsupported query."""


@dataclass(frozen=True)
class CustomField:
    """Vectorized user-supplied noise field.

    ``sigma(x, v) -> (..., K, d)``; ``jacobian(x, v) -> (..., K, d, 2d)``;
    ``hessian(x, v) -> (..., K, d, 2d, 2d)``. Jacobian and Hessian are
    optional but required by integration and the Ito correction.
    """

    sigma: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jacobian: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    hessian: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    x_independent: bool = False
    name: str = "custom"


@dataclass(frozen=True, eq=False)
class NoiseModel:
    kind: str
    dim: int
    modes: int
    matrices: Optional[np.ndarray] = None     # (K, d, d) for affine
    constants: Optional[np.ndarray] = None    # (K, d) for additive / affine
    custom: Optional[CustomField] = None
    similarity: Optional[np.ndarray] = None   # optional Jordan similarity for K=1 affine
    eligibility: str = "bounds"               # "bounds" (derivative sup-norms) or "catalog"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise NoiseError(f"unknown noise kind {self.kind!r}; expected one of {KINDS}")
        if self.dim < 1 or self.modes < 1:
            raise NoiseError("dim and modes must be positive")
        for name in ("matrices", "constants", "similarity"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.array(arr, dtype=float)
                arr.flags.writeable = False
                object.__setattr__(self, name, arr)

    @property
    def x_independent(self) -> bool:
        if self.kind == "custom":
            return self.custom.x_independent
        return True

    @property
    def is_trivial(self) -> bool:
        return self.kind == "zero"


def zero(dim: int, modes: int = 1) -> NoiseModel:
    return NoiseModel("zero", dim, modes, eligibility="bounds")


def additive(constants) -> NoiseModel:
    c = np.atleast_2d(np.asarray(constants, dtype=float))
    return NoiseModel("additive", c.shape[1], c.shape[0], constants=c, eligibility="bounds")


def affine(matrices, constants=None, similarity=None, check: bool = True) -> NoiseModel:
    """Affine-linear noise sigma^k(v) = S^k v + c^k.

    ``matrices`` is ``(d, d)`` for a single mode or ``(K, d, d)``.
    Raises :class:`NoiseError` if any matrix has nonzero trace and ``check``.
    """
    m = np.asarray(matrices, dtype=float)
    if m.ndim == 2:
        m = m[None]
    if m.ndim != 3 or m.shape[1] != m.shape[2]:
        raise NoiseError(f"affine matrices must be (K, d, d), got {m.shape}")
    k, d, _ = m.shape
    c = np.zeros((k, d)) if constants is None else np.asarray(constants, dtype=float).reshape(k, d)
    if check:
        tr = np.trace(m, axis1=1, axis2=2)
        bad = np.flatnonzero(np.abs(tr) > 1e-12 * max(1.0, np.abs(m).max()))
        if bad.size:
            raise NoiseError(f"mode {bad[0]} has trace {tr[bad[0]]!r}; div_v sigma must vanish")
    if similarity is not None:
        similarity = np.asarray(similarity, dtype=float)
        if similarity.shape != (d, d):
            raise NoiseError("similarity must be a (d, d) matrix")
    return NoiseModel("affine", d, k, matrices=m, constants=c, similarity=similarity,
                      eligibility="catalog")


def custom(field_: CustomField, dim: int, modes: int) -> NoiseModel:
    return NoiseModel("custom", dim, modes, custom=field_, eligibility="bounds")


def smooth_bounded(dim: int, amplitude: float = 0.3, phase: float = 0.4) -> NoiseModel:
    """Smooth bounded single-mode field used for integrator studies.

    sigma_i = A sin(v_{i+1} + x_i + phase_i) (indices mod d), which has zero
    v-divergence for d >= 2. For d = 1 the field is A sin(x + phase).
    """
    d = dim
    ph = phase * (1.0 + np.arange(d))
    nxt = (np.arange(d) + 1) % d if d > 1 else None

    def arg(x, v):
        return x + (v[..., nxt] if d > 1 else 0.0) + ph

    def sigma(x, v):
        return (amplitude * np.sin(arg(x, v)))[..., None, :]

    def jacobian(x, v):
        c = amplitude * np.cos(arg(x, v))
        out = np.zeros(c.shape[:-1] + (1, d, 2 * d))
        i = np.arange(d)
        out[..., 0, i, i] = c
        if d > 1:
            out[..., 0, i, d + nxt] = c
        return out

    def hessian(x, v):
        s = -amplitude * np.sin(arg(x, v))
        out = np.zeros(s.shape[:-1] + (1, d, 2 * d, 2 * d))
        i = np.arange(d)
        cols = [i] if d == 1 else [i, d + nxt]
        for a in cols:
            for b in cols:
                out[..., 0, i, a, b] = s
        return out

    return custom(CustomField(sigma, jacobian, hessian, name="smooth-bounded"), d, 1)


def _check_mode(model: NoiseModel, k: int):
    if not 0 <= k < model.modes:
        raise IndexError(f"mode index {k} out of range for {model.modes} modes")


def sigma_all(model: NoiseModel, x, v) -> np.ndarray:
    """All modes at once: shape ``(..., K, d)``."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    lead = np.broadcast_shapes(x.shape[:-1], v.shape[:-1])
    d, kk = model.dim, model.modes
    if model.kind == "zero":
        return np.zeros(lead + (kk, d))
    if model.kind == "additive":
        return np.broadcast_to(model.constants, lead + (kk, d)).copy()
    if model.kind == "affine":
        return np.einsum("kij,...j->...ki", model.matrices, v) + model.constants
    return np.asarray(model.custom.sigma(x, v), dtype=float)


def eval_sigma(model: NoiseModel, k: int, x, v) -> np.ndarray:
    """sigma^k(x, v)."""
    _check_mode(model, k)
    return sigma_all(model, x, v)[..., k, :]


def sigma_jacobian(model: NoiseModel, x, v) -> np.ndarray:
    """Derivative of every mode in (x, v): shape ``(..., K, d, 2d)``."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    lead = np.broadcast_shapes(x.shape[:-1], v.shape[:-1])
    d, kk = model.dim, model.modes
    if model.kind in ("zero", "additive"):
        return np.zeros(lead + (kk, d, 2 * d))
    if model.kind == "affine":
        out = np.zeros(lead + (kk, d, 2 * d))
        out[..., :, :, d:] = model.matrices
        return out
    if model.custom.jacobian is None:
        raise NoiseError("custom noise model has no jacobian evaluator")
    return np.asarray(model.custom.jacobian(x, v), dtype=float)


def sigma_hessian(model: NoiseModel, x, v) -> np.ndarray:
    """Second derivatives: shape ``(..., K, d, 2d, 2d)``."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    lead = np.broadcast_shapes(x.shape[:-1], v.shape[:-1])
    d, kk = model.dim, model.modes
    if model.kind != "custom":
        return np.zeros(lead + (kk, d, 2 * d, 2 * d))
    if model.custom.hessian is None:
        raise NoiseError("custom noise model has no hessian evaluator")
    return np.asarray(model.custom.hessian(x, v), dtype=float)


@dataclass(frozen=True)
class ItoCorrection:
    """Evaluator of b(x, v) = 1/2 sum_k (D_v sigma^k) sigma^k."""

    model: NoiseModel

    def __call__(self, x, v) -> np.ndarray:
        m = self.model
        d = m.dim
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        if m.kind in ("zero", "additive"):
            return np.zeros(np.broadcast_shapes(x.shape, v.shape))
        s = sigma_all(m, x, v)
        dv = sigma_jacobian(m, x, v)[..., d:]
        return 0.5 * np.einsum("...kij,...kj->...i", dv, s)


def ito_correction(model: NoiseModel) -> ItoCorrection:
    if model.kind == "custom" and model.custom.jacobian is None:
        raise NoiseError("Ito correction needs the v-derivatives of a custom field")
    return ItoCorrection(model)


def _probe_points(dim2: int, probes: int, box: float) -> np.ndarray:
    pts = qmc.Halton(d=dim2, scramble=False).random(probes + 1)[1:]
    return box * (2.0 * pts - 1.0)


@dataclass(frozen=True)
class DivergenceReport:
    passed: bool
    max_abs: float
    per_mode: tuple
    method: str
    tol: float


def check_divergence_free(model: NoiseModel, tol: float = 1e-8, probes: int = 64,
                          box: float = 3.0, step: float = 1e-5) -> DivergenceReport:
    """Verify div_v sigma^k = 0.

    Catalog kinds are checked exactly via the trace; custom fields by
    central differences at ``probes`` Halton points in ``[-box, box]^{2d}``.
    """
    if probes < 1:
        raise NoiseError("probes must be >= 1")
    d, kk = model.dim, model.modes
    if model.kind in ("zero", "additive"):
        per = (0.0,) * kk
        method = "exact"
    elif model.kind == "affine":
        per = tuple(float(abs(np.trace(m))) for m in model.matrices)
        method = "trace"
    else:
        z = _probe_points(2 * d, probes, box)
        x, v = z[:, :d], z[:, d:]
        div = np.zeros((probes, kk))
        for j in range(d):
            e = np.zeros(d)
            e[j] = step
            div += (sigma_all(model, x, v + e)[..., j] - sigma_all(model, x, v - e)[..., j]) / (2 * step)
        per = tuple(float(a) for a in np.abs(div).max(axis=0))
        method = "central-difference"
    mx = max(per)
    return DivergenceReport(mx <= tol, mx, per, method, tol)


def _order_tensor(model: NoiseModel, order: int, x, v, step: float) -> np.ndarray:
    # returns (..., K, F) flattened derivative tensor of the given order
    if order == 0:
        t = sigma_all(model, x, v)
    elif order == 1:
        t = sigma_jacobian(model, x, v)
    elif order == 2:
        t = sigma_hessian(model, x, v)
    elif order == 3:
        if model.kind != "custom":
            t = np.zeros(np.broadcast_shapes(x.shape[:-1], v.shape[:-1])
                         + (model.modes, model.dim, 2 * model.dim, 2 * model.dim, 2 * model.dim))
        else:
            d = model.dim
            parts = []
            for j in range(2 * d):
                e = np.zeros(2 * d)
                e[j] = step
                hp = sigma_hessian(model, x + e[:d], v + e[d:])
                hm = sigma_hessian(model, x - e[:d], v - e[d:])
                parts.append((hp - hm) / (2 * step))
            t = np.stack(parts, axis=-1)
    else:
        raise NoiseError(f"derivative order must be in 0..3, got {order}")
    return t.reshape(t.shape[: t.ndim - (order + 1)] + (-1,)) if order else t


def _sup(model, order, z, norm, step):
    d = model.dim
    t = _order_tensor(model, order, z[:, :d], z[:, d:], step)
    t = t.reshape(t.shape[0], model.modes, -1)
    per = np.linalg.norm(t, axis=-1) if norm == "euclidean" else np.abs(t).max(axis=-1)
    return float(per.max(axis=0).sum())


def derivative_bounds(model: NoiseModel, order: int, probes: int = 256, *, box: float = 2.0,
                      norm: str = "euclidean", cumulative: bool = False,
                      growth: float = 2.0, step: float = 1e-4) -> float:
    """Probe estimate of sum_k sup |D^order sigma^k| over a phase-space box.

    The estimate is taken on ``[-box, box]^{2d}`` and on a box four times as
    large; if the larger box raises the sup by more than ``growth``, the field
    is reported unbounded (``inf``). With ``cumulative=True`` the bounds of
    all orders up to ``order`` are summed.
    """
    if norm not in ("euclidean", "max"):
        raise NoiseError(f"norm must be 'euclidean' or 'max', got {norm!r}")
    if not 0 <= order <= 3:
        raise NoiseError(f"derivative order must be in 0..3, got {order}")
    orders = range(order + 1) if cumulative else (order,)
    total = 0.0
    for o in orders:
        z = _probe_points(2 * model.dim, probes, box)
        small = _sup(model, o, z, norm, step)
        large = _sup(model, o, 4.0 * z, norm, step)
        if large > growth * small + 1e-12:
            return float("inf")
        total += max(small, large)
    return total


def from_config(spec: dict, dim: int) -> NoiseModel:
    """Build a catalog model from a JSON-style mapping.

    Recognized ``kind`` values: ``zero``, ``additive``, ``affine``,
    ``smooth-bounded``. Matrices are given row-major as nested lists.
    """
    kind = spec.get("kind", "zero")
    if kind == "zero":
        return zero(dim, int(spec.get("modes", 1)))
    if kind == "additive":
        c = np.asarray(spec["constants"], dtype=float).reshape(-1, dim)
        return additive(c)
    if kind == "affine":
        m = np.asarray(spec["matrices"], dtype=float).reshape(-1, dim, dim)
        c = spec.get("constants")
        c = None if c is None else np.asarray(c, dtype=float).reshape(-1, dim)
        sim = spec.get("similarity")
        return affine(m, c, None if sim is None else np.asarray(sim, dtype=float).reshape(dim, dim))
    if kind == "smooth-bounded":
        return smooth_bounded(dim, float(spec.get("amplitude", 0.3)), float(spec.get("phase", 0.4)))
    raise NoiseError(f"unknown noise kind {kind!r}")
