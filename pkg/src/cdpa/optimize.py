"""Data-consistency loss, Adam, iterative reconstruction, and inference-time fine-tuning.

The data-consistency loss is the squared residual between forward-projected
estimates and the measured per-view projections; its gradient uses the exact
adjoint, so finite-difference checks agree to discretization level.

A ``DCProblem`` may be *stacked*: the iterate carries a leading batch axis and
the measurements one extra leading axis to match. Stacked members are
independent problems that share a geometry; their losses add, and losses per
member remain available for per-member bookkeeping.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import AngleSet

__all__ = [
    "DivergenceError",
    "AdamState",
    "adam_init",
    "adam_step",
    "DCProblem",
    "dc_loss",
    "dc_gradient",
    "gd_reconstruct",
    "finetune",
    "iterate_shape",
]

DEFAULT_VIEW_BATCH = 30


class DivergenceError(RuntimeError):
    """Raised when an optimization run produces non-finite values."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3

    def __post_init__(self):
        if self.m.shape != self.v.shape:
            raise ValueError("moment shapes differ")
        if self.step < 0:
            raise ValueError("step must be nonnegative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")


def adam_init(shape, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    zeros = np.zeros(shape, dtype=np.float64)
    return AdamState(m=zeros, v=zeros.copy(), step=0, beta1=beta1, beta2=beta2, eps=eps, lr=lr)


def adam_step(iterate: np.ndarray, gradient: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns (new iterate, new state)."""
    if iterate.shape != gradient.shape or iterate.shape != state.m.shape:
        raise ValueError("iterate, gradient, and state shapes must match")
    g = gradient.astype(np.float64)
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_x = iterate.astype(np.float64) - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_x.astype(iterate.dtype), replace(state, m=m, v=v, step=t)


# ---------------------------------------------------------------------------
# Data-consistency problems
# ---------------------------------------------------------------------------

@dataclass
class DCProblem:
    """Measurements plus the operator handle that produced them.

    ``operator`` must expose ``forward(x, view_indices)``,
    ``adjoint(y, view_indices)``, ``angles``, ``num_views`` and ``view_shape``
    (``ParallelProjector`` and ``ConeProjector`` both do).
    """

    operator: object
    measurements: np.ndarray
    view_batch_size: int | None = None
    noise_sigma: float = 0.0

    def __post_init__(self):
        self.measurements = np.asarray(self.measurements, dtype=np.float32)
        k = self.operator.num_views
        vshape = tuple(self.operator.view_shape)
        per_view = (k,) + vshape
        if self.measurements.shape == per_view:
            self.stacked = False
        elif self.measurements.ndim == len(per_view) + 1 and self.measurements.shape[1:] == per_view:
            self.stacked = True
        else:
            raise ValueError(
                f"measurements shape {self.measurements.shape} does not match {k} views of {vshape}")
        if self.view_batch_size is None:
            self.view_batch_size = min(DEFAULT_VIEW_BATCH, k)
        if not 1 <= self.view_batch_size <= k:
            raise ValueError("view batch size out of range")

    @property
    def num_views(self) -> int:
        return self.operator.num_views

    @property
    def num_members(self) -> int:
        return self.measurements.shape[0] if self.stacked else 1

    def view_indices_for(self, subset) -> np.ndarray:
        """Resolve an AngleSet / index list / None into view indices."""
        if subset is None:
            return np.arange(self.num_views)
        if isinstance(subset, AngleSet):
            mine = self.operator.angles.as_array()
            idx = []
            for a in subset.angles:
                hits = np.nonzero(np.abs(mine - a) < 1e-9)[0]
                if hits.size == 0:
                    raise ValueError(f"angle {a} deg is not one of the problem's views")
                idx.append(int(hits[0]))
            return np.asarray(idx)
        idx = np.asarray(subset, dtype=int)
        if idx.size == 0 or np.any(idx < 0) or np.any(idx >= self.num_views):
            raise ValueError("view indices out of range")
        return idx

    def _measured(self, idx: np.ndarray) -> np.ndarray:
        return self.measurements[:, idx] if self.stacked else self.measurements[idx]

    def residual(self, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
        return self.operator.forward(x, idx) - self._measured(idx)

    def member_losses(self, x: np.ndarray, subset=None) -> np.ndarray:
        """Per-member squared-residual sums (length 1 when not stacked), float64."""
        idx = self.view_indices_for(subset)
        r = self.residual(x, idx).astype(np.float64)
        if self.stacked:
            return np.sum(r * r, axis=tuple(range(1, r.ndim)))
        return np.array([np.sum(r * r)])

    def loss(self, x: np.ndarray, subset=None) -> float:
        return float(np.sum(self.member_losses(x, subset)))

    def gradient(self, x: np.ndarray, subset=None) -> np.ndarray:
        idx = self.view_indices_for(subset)
        return 2.0 * self.operator.adjoint(self.residual(x, idx), idx)


def dc_loss(x: np.ndarray, problem: DCProblem, view_subset=None) -> float:
    """Sum over the view subset of ||A_psi x - y_psi||^2."""
    return problem.loss(x, view_subset)


def dc_gradient(x: np.ndarray, problem: DCProblem, view_subset=None) -> np.ndarray:
    """Exact gradient of :func:`dc_loss`: 2 sum A_psi^T (A_psi x - y_psi)."""
    return problem.gradient(x, view_subset)


# ---------------------------------------------------------------------------
# Reconstruction loops
# ---------------------------------------------------------------------------

def iterate_shape(problem: DCProblem) -> tuple[int, ...]:
    """Shape of the reconstruction the problem optimizes over."""
    op = problem.operator
    base = getattr(op, "image_shape", None)
    if base is None:
        base = op.grid.shape
    if problem.stacked:
        return (problem.num_members,) + tuple(base)
    return tuple(base)


def _check_finite(x: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(x)):
        raise DivergenceError("iterate became non-finite", step)


def gd_reconstruct(problem: DCProblem, init="zero", epochs: int = 100, lr: float = 1e-2,
                   seed: int = 0, nonneg: bool = False, on_epoch=None) -> np.ndarray:
    """Adam minimization of the data-consistency loss over view mini-batches.

    ``init`` is "zero" or a starting array (for analytic warm starts). The view
    order is a fresh seeded permutation each epoch; results are deterministic
    given the seed. ``on_epoch(epoch, x)`` is called after each epoch.
    """
    shape = iterate_shape(problem)
    if isinstance(init, str):
        if init != "zero":
            raise ValueError(f"unknown init {init!r}")
        x = np.zeros(shape, dtype=np.float32)
    else:
        x = np.asarray(init, dtype=np.float32).copy()
        if x.shape != shape:
            raise ValueError(f"init shape {x.shape} != problem iterate shape {shape}")
    state = adam_init(shape, lr=lr)
    rng = np.random.Generator(np.random.Philox(seed))
    step = 0
    for epoch in range(epochs):
        perm = rng.permutation(problem.num_views)
        for lo in range(0, perm.size, problem.view_batch_size):
            idx = perm[lo:lo + problem.view_batch_size]
            g = problem.gradient(x, idx)
            x, state = adam_step(x, g, state)
            step += 1
            _check_finite(x, step)
            if nonneg:
                np.maximum(x, 0.0, out=x)
        if on_epoch is not None:
            on_epoch(epoch, x)
    return x


def finetune(x0_hat: np.ndarray, problem: DCProblem, steps: int = 100, lr: float = 1e-4,
             seed: int = 0) -> np.ndarray:
    """Short Adam refinement of a reconstruction toward data consistency.

    Runs ``steps`` mini-batch Adam updates from ``x0_hat``; the returned
    iterate is the best full-view-loss checkpoint seen (start, epoch
    boundaries, end), so the full-view loss never ends above its start.
    """
    shape = iterate_shape(problem)
    x = np.asarray(x0_hat, dtype=np.float32).copy()
    if x.shape != shape:
        raise ValueError(f"input shape {x.shape} != problem iterate shape {shape}")
    if steps == 0:
        return x
    state = adam_init(shape, lr=lr)
    rng = np.random.Generator(np.random.Philox(seed))
    best = x.copy()
    best_losses = problem.member_losses(x)
    done = 0
    perm = rng.permutation(problem.num_views)
    pos = 0
    while done < steps:
        if pos >= perm.size:
            perm = rng.permutation(problem.num_views)
            pos = 0
            losses = problem.member_losses(x)
            better = losses < best_losses
            if np.any(better):
                _copy_members(best, x, better, problem.stacked)
                best_losses = np.where(better, losses, best_losses)
        idx = perm[pos:pos + problem.view_batch_size]
        pos += problem.view_batch_size
        g = problem.gradient(x, idx)
        x, state = adam_step(x, g, state)
        done += 1
        _check_finite(x, done)
    losses = problem.member_losses(x)
    better = losses < best_losses
    if np.any(better):
        _copy_members(best, x, better, problem.stacked)
    return best


def _copy_members(dst: np.ndarray, src: np.ndarray, mask: np.ndarray, stacked: bool) -> None:
    if stacked:
        dst[mask] = src[mask]
    elif mask[0]:
        dst[...] = src
