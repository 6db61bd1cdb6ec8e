"""Noise schedules, DDIM stepping, and posterior-alignment sampling loops.

The samplers interleave three ingredients per DDIM step: a denoised estimate
from the score model, a short Adam refinement of that estimate against the
data-consistency loss (image space only; gradients never flow through the
score model), and a re-noising map back onto the noisy manifold at the next
time.

Randomness comes from counter-based streams keyed by
``(seed, slice position, timestep, purpose)``, so per-slice results do not
depend on execution order or batching, and conditioning inputs never change
which noise gets drawn.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .optimize import DCProblem, DivergenceError, adam_init, adam_step, iterate_shape

__all__ = [
    "NoiseSchedule",
    "AnalyticGaussianScore",
    "UNetScore",
    "SamplerConfig",
    "resample_map",
    "ddim_sample",
    "dpa_sample",
    "cdpa_sample",
]

_TAG_INIT = 0
_TAG_DDIM = 1
_TAG_RESAMPLE = 2
_TAG_GUIDE = 3


def _stream(seed: int, slice_key: int, t: int, tag: int) -> np.random.Generator:
    seq = np.random.SeedSequence((int(seed), int(slice_key), int(t), int(tag)))
    return np.random.Generator(np.random.Philox(seq))


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Variance-preserving schedule: arrays alpha_t, sigma_t of length T+1.

    alpha_0 = 1 and sigma_0 = 0 exactly; alpha is strictly decreasing and
    alpha_t^2 + sigma_t^2 = 1.
    """

    training_steps: int
    alphas: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        t = self.training_steps
        if self.alphas.shape != (t + 1,) or self.sigmas.shape != (t + 1,):
            raise ValueError("schedule arrays must have length T+1")
        if abs(self.alphas[0] - 1.0) > 1e-12 or abs(self.sigmas[0]) > 1e-12:
            raise ValueError("schedule must start at alpha=1, sigma=0")
        if np.any(np.diff(self.alphas) >= 0):
            raise ValueError("alpha_t must be strictly decreasing")
        if np.max(np.abs(self.alphas ** 2 + self.sigmas ** 2 - 1.0)) > 1e-6:
            raise ValueError("schedule is not variance preserving")

    @classmethod
    def linear_beta(cls, training_steps: int = 1000, beta_min: float = 1e-4,
                    beta_max: float = 2e-2) -> "NoiseSchedule":
        betas = np.linspace(beta_min, beta_max, training_steps, dtype=np.float64)
        alpha_bar = np.cumprod(1.0 - betas)
        alphas = np.concatenate([[1.0], np.sqrt(alpha_bar)])
        sigmas = np.sqrt(1.0 - alphas ** 2)
        return cls(training_steps, alphas, sigmas)

    def _check_t(self, t: int, lo: int = 0) -> int:
        t = int(t)
        if not lo <= t <= self.training_steps:
            raise ValueError(f"t={t} outside [{lo}, {self.training_steps}]")
        return t

    def add_noise(self, x0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
        """x_t = alpha_t x0 + sigma_t eps."""
        t = self._check_t(t)
        if np.shape(x0) != np.shape(eps):
            raise ValueError("x0 and eps shapes differ")
        return self.alphas[t] * x0 + self.sigmas[t] * eps

    def tweedie(self, x_t: np.ndarray, eps_hat: np.ndarray, t: int) -> np.ndarray:
        """Denoised estimate (x_t - sigma_t eps_hat) / alpha_t; identity at t=0."""
        t = self._check_t(t)
        if t == 0:
            return np.array(x_t, copy=True)
        return (x_t - self.sigmas[t] * eps_hat) / self.alphas[t]

    def ddim_step(self, x_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int,
                  eta: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
        """One (possibly stochastic) DDIM update from time t to t_prev < t."""
        t = self._check_t(t, lo=1)
        t_prev = self._check_t(t_prev)
        if not t_prev < t:
            raise ValueError(f"t_prev={t_prev} must be below t={t}")
        if not 0.0 <= eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        a_t, s_t = self.alphas[t], self.sigmas[t]
        a_p, s_p = self.alphas[t_prev], self.sigmas[t_prev]
        x0_hat = (x_t - s_t * eps_hat) / a_t
        sigma_tilde = (s_p / s_t) * math.sqrt(max(1.0 - (a_t / a_p) ** 2, 0.0))
        direction = math.sqrt(max(s_p ** 2 - (eta * sigma_tilde) ** 2, 0.0))
        out = a_p * x0_hat + direction * eps_hat
        if eta > 0.0 and sigma_tilde > 0.0:
            if rng is None:
                raise ValueError("eta > 0 requires an rng")
            out = out + eta * sigma_tilde * rng.standard_normal(np.shape(x_t))
        return out

    def inference_timesteps(self, steps: int) -> np.ndarray:
        """Uniformly strided descending trajectory T = tau_0 > ... > tau_steps = 0."""
        if not 1 <= steps <= self.training_steps:
            raise ValueError("steps must lie in [1, T]")
        taus = np.round(np.linspace(self.training_steps, 0, steps + 1)).astype(int)
        if np.any(np.diff(taus) >= 0):
            raise ValueError("trajectory is not strictly decreasing; reduce steps")
        return taus


def resample_map(x0_refined: np.ndarray, t_prev: int, schedule: NoiseSchedule,
                 mode: str = "forward-renoise", rng: np.random.Generator | None = None,
                 x_prev_plain: np.ndarray | None = None, blend_weight: float = 1.0) -> np.ndarray:
    """Map a refined denoised estimate back onto the noisy manifold at t_prev.

    forward-renoise draws ``alpha x + sigma z``; posterior-blend mixes with the
    pre-refinement ``x_prev_plain`` using variance weight ``blend_weight``.
    """
    t_prev = schedule._check_t(t_prev)
    if t_prev == 0:
        return np.array(x0_refined, copy=True)
    a_p, s_p = schedule.alphas[t_prev], schedule.sigmas[t_prev]
    if rng is None:
        raise ValueError("resample_map needs an rng for t_prev > 0")
    z = rng.standard_normal(np.shape(x0_refined))
    if mode == "forward-renoise":
        return a_p * x0_refined + s_p * z
    if mode == "posterior-blend":
        if x_prev_plain is None:
            raise ValueError("posterior-blend needs the pre-refinement x_prev")
        var = s_p ** 2
        gamma = float(blend_weight)
        mean = (var * a_p * x0_refined + gamma * x_prev_plain) / (var + gamma)
        std = math.sqrt(var * gamma / (var + gamma))
        return mean + std * z
    raise ValueError(f"unknown resample mode {mode!r}")


# ---------------------------------------------------------------------------
# Score models
# ---------------------------------------------------------------------------

class AnalyticGaussianScore:
    """Closed-form noise prediction for a diagonal Gaussian prior N(mu0, v0).

    Validation oracle: with this score, Tweedie reproduces the conjugate
    posterior mean of x0 given x_t exactly.
    """

    conditional = False

    def __init__(self, mean, variance, schedule: NoiseSchedule):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.variance = np.asarray(variance, dtype=np.float64)
        if np.any(self.variance <= 0):
            raise ValueError("prior variance must be positive")
        self.schedule = schedule

    def predict(self, x_t: np.ndarray, t: int, conditions=None) -> np.ndarray:
        a = self.schedule.alphas[t]
        s = self.schedule.sigmas[t]
        return s * (x_t - a * self.mean) / (a * a * self.variance + s * s)


class UNetScore:
    """Noise prediction from a loaded U-Net, slice-batched.

    ``conditional=False`` zeroes the reconstruction channel and the
    slice/view context (the condition-dropout convention), giving the
    unconditional score from the same weights.
    """

    def __init__(self, model, conditional: bool = True):
        if model.mode != "noise-prediction":
            raise ValueError("UNetScore requires a noise-prediction network")
        self.model = model
        self.conditional = bool(conditional)

    def predict(self, x_t: np.ndarray, t: int, conditions=None) -> np.ndarray:
        x = np.asarray(x_t, dtype=np.float32)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        n = x.shape[0]
        if self.conditional:
            if conditions is None:
                raise ValueError("conditional score needs per-slice conditions")
            fdk = np.stack([np.asarray(c.fdk_slice, dtype=np.float32) for c in conditions])
            slice_idx = np.array([c.slice_index for c in conditions], dtype=np.int64)
            num_views = np.array([c.num_views for c in conditions], dtype=np.int64)
            dropped = False
        else:
            fdk = np.zeros_like(x)
            slice_idx = np.zeros(n, dtype=np.int64)
            num_views = np.zeros(n, dtype=np.int64)
            dropped = True
        inp = np.stack([x, fdk], axis=1) if self.model.in_channels == 2 else x[:, None]
        out = self.model.forward(inp, timestep=np.full(n, int(t), dtype=np.int64),
                                 slice_index=slice_idx, num_views=num_views,
                                 drop_condition=dropped)
        return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Posterior-alignment samplers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    eta: float = 0.0
    guidance_epochs: int = 5
    guidance_lr: float = 5e-4
    resample_mode: str = "forward-renoise"
    blend_weight: float = 1.0
    seed: int = 0
    schedule: NoiseSchedule | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.resample_mode not in ("forward-renoise", "posterior-blend"):
            raise ValueError(f"unknown resample mode {self.resample_mode!r}")

    def resolved_schedule(self) -> NoiseSchedule:
        return self.schedule if self.schedule is not None else _default_schedule()


_DEFAULT_SCHEDULE = None


def _default_schedule() -> NoiseSchedule:
    global _DEFAULT_SCHEDULE
    if _DEFAULT_SCHEDULE is None:
        _DEFAULT_SCHEDULE = NoiseSchedule.linear_beta()
    return _DEFAULT_SCHEDULE


def _guide(x0h: np.ndarray, problem: DCProblem, cfg: SamplerConfig, t: int,
           monitor=None) -> np.ndarray:
    """Adam epochs on the data-consistency loss, returning the best full-view
    checkpoint per member so the loss never ends above its start."""
    x = x0h.astype(np.float32)
    state = adam_init(x.shape, lr=cfg.guidance_lr)
    best = x.copy()
    best_losses = problem.member_losses(x)
    if monitor is not None:
        monitor("start", t, float(np.sum(best_losses)))
    rng = _stream(cfg.seed, 0, t, _TAG_GUIDE)
    for _ in range(cfg.guidance_epochs):
        perm = rng.permutation(problem.num_views)
        for lo in range(0, perm.size, problem.view_batch_size):
            idx = perm[lo:lo + problem.view_batch_size]
            g = problem.gradient(x, idx)
            x, state = adam_step(x, g, state)
        losses = problem.member_losses(x)
        better = losses < best_losses
        if np.any(better):
            if problem.stacked:
                best[better] = x[better]
            else:
                best = x.copy()
            best_losses = np.where(better, losses, best_losses)
    if monitor is not None:
        monitor("end", t, float(np.sum(best_losses)))
    return best


def _run_loop(problem, score, cfg, stack_shape, squeeze, conditions, slice_keys,
              seeds, monitor=None) -> np.ndarray:
    schedule = cfg.resolved_schedule()
    n_slices = stack_shape[0]
    if slice_keys is None:
        slice_keys = list(range(n_slices))
    if seeds is None:
        seeds = [cfg.seed] * n_slices
    if conditions is not None and len(conditions) != n_slices:
        raise ValueError("need one condition per slice")
    taus = schedule.inference_timesteps(cfg.steps)
    t0 = int(taus[0])
    x = np.empty(stack_shape, dtype=np.float32)
    for s in range(n_slices):
        x[s] = _stream(seeds[s], slice_keys[s], t0, _TAG_INIT).standard_normal(stack_shape[1:])
    for step_idx in range(len(taus) - 1):
        t, t_prev = int(taus[step_idx]), int(taus[step_idx + 1])
        eps = np.asarray(score.predict(x, t, conditions), dtype=np.float32)
        if eps.shape != x.shape:
            raise ValueError("score model changed the iterate shape")
        x0h = schedule.tweedie(x, eps, t)
        guided = problem is not None and cfg.guidance_epochs > 0
        if guided:
            refined = _guide(x0h[0] if squeeze else x0h, problem, cfg, t, monitor)
            x0h = refined[None] if squeeze else refined
        x_plain = np.empty_like(x)
        for s in range(n_slices):
            rng = _stream(seeds[s], slice_keys[s], t, _TAG_DDIM)
            x_plain[s] = schedule.ddim_step(x[s], eps[s], t, t_prev, cfg.eta, rng)
        if guided:
            nxt = np.empty_like(x)
            for s in range(n_slices):
                rng = _stream(seeds[s], slice_keys[s], t_prev, _TAG_RESAMPLE)
                nxt[s] = resample_map(x0h[s], t_prev, schedule, cfg.resample_mode, rng,
                                      x_prev_plain=x_plain[s], blend_weight=cfg.blend_weight)
            x = nxt
        else:
            x = x_plain
        if not np.all(np.isfinite(x)):
            raise DivergenceError("sampler iterate became non-finite", step_idx)
    return x[0] if squeeze else x


def _normalize_stack(shape) -> tuple[tuple[int, ...], bool]:
    if len(shape) == 2:
        return (1,) + tuple(shape), True
    if len(shape) == 3:
        return tuple(shape), False
    raise ValueError(f"unsupported iterate shape {shape}")


def ddim_sample(score, shape, cfg: SamplerConfig, conditions=None, slice_keys=None,
                seeds=None) -> np.ndarray:
    """Plain DDIM sampling of the score model's prior, no alignment."""
    stack_shape, squeeze = _normalize_stack(tuple(shape))
    return _run_loop(None, score, cfg, stack_shape, squeeze, conditions, slice_keys, seeds)


def dpa_sample(problem: DCProblem, score, cfg: SamplerConfig, monitor=None,
               seeds=None, slice_keys=None) -> np.ndarray:
    """Unconditional diffusion sampling aligned to the measurements.

    Per DDIM step: Tweedie estimate, guidance epochs of Adam on the
    data-consistency loss in image space, then a resample back to the next
    noise level. Returns the final denoised estimate.
    """
    if getattr(score, "conditional", False):
        raise ValueError("dpa_sample expects an unconditional score model")
    stack_shape, squeeze = _normalize_stack(iterate_shape(problem))
    return _run_loop(problem, score, cfg, stack_shape, squeeze, None, slice_keys,
                     seeds, monitor)


def cdpa_sample(problem: DCProblem, fdk_condition: np.ndarray, slice_index, num_views: int,
                score, cfg: SamplerConfig, monitor=None, seeds=None,
                slice_keys=None) -> np.ndarray:
    """Conditional variant: the score model additionally sees the analytic
    reconstruction slice, the slice index, and the view count at every step.

    ``fdk_condition`` matches the iterate: a 2D slice for image problems, the
    analytic volume for volume problems, a (members, H, W) stack for stacked
    ones. ``slice_index`` is a scalar, a per-slice sequence, or None for
    positional volume indices.
    """
    from .denoiser import ConditionBundle
    stack_shape, squeeze = _normalize_stack(iterate_shape(problem))
    n = stack_shape[0]
    cond_arr = np.asarray(fdk_condition, dtype=np.float32)
    if squeeze:
        cond_arr = cond_arr[None]
    if cond_arr.shape != stack_shape:
        raise ValueError(f"condition shape {cond_arr.shape} != iterate stack {stack_shape}")
    if slice_index is None:
        indices = list(range(n))
    elif np.isscalar(slice_index) or isinstance(slice_index, (int, np.integer)):
        indices = [int(slice_index)] * n
    else:
        indices = [int(i) for i in slice_index]
        if len(indices) != n:
            raise ValueError("need one slice index per slice")
    conditions = [ConditionBundle(fdk_slice=cond_arr[s], slice_index=indices[s],
                                  num_views=int(num_views)) for s in range(n)]
    return _run_loop(problem, score, cfg, stack_shape, squeeze, conditions,
                     slice_keys, seeds, monitor)
