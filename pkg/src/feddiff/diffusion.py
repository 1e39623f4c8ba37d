"""DDPM forward process, training loss, and ancestral sampler.

Implements the closed-form forward corruption

    x_t = sqrt(abar_t) * x_0 + sqrt(1 - abar_t) * eps,   eps ~ N(0, I)

the noise-prediction loss (per-sample squared L2, batch mean), and the
iterative reverse step

    x_{t-1} = (x_t - (1 - a_t) / sqrt(1 - abar_t) * eps_hat) / sqrt(a_t)
              + sigma_t * z

independent of any particular noise predictor. All operations are pure
functions over numpy arrays; randomness comes from injected Generators.

Conventions: timesteps t in {1..T}, abar_0 := 1, image batches are rank-4
(batch, channels, height, width) with data in [-1, 1] (intermediate x_t
is unbounded).
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np


class VarianceChoice(Enum):
    """Per-step sampling variance: sigma_t^2 = beta_t or the posterior form."""

    BETA = "beta"
    BETA_TILDE = "beta_tilde"


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed variance schedule for T timesteps.

    Vectors are indexed by t-1 (``betas[0]`` is beta_1). ``posterior_vars``
    holds the sigma^2 used by :data:`VarianceChoice.BETA_TILDE`; by default
    the posterior variance beta_tilde_t = (1 - abar_{t-1}) / (1 - abar_t)
    * beta_t with abar_0 := 1.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_vars: np.ndarray

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        for name in ("betas", "alphas", "alpha_bars", "posterior_vars"):
            v = getattr(self, name)
            if v.shape != (self.T,):
                raise ValueError(f"{name} must have shape ({self.T},), got {v.shape}")
        if not np.all((self.betas > 0.0) & (self.betas < 1.0)):
            raise ValueError("betas must lie in (0, 1)")
        if not np.allclose(self.alphas + self.betas, 1.0, rtol=0.0, atol=0.0):
            raise ValueError("alphas must equal 1 - betas exactly")
        if not np.all((self.alpha_bars > 0.0) & (self.alpha_bars < 1.0)):
            raise ValueError("alpha_bars must lie in (0, 1)")
        if self.T > 1 and not np.all(np.diff(self.alpha_bars) < 0.0):
            raise ValueError("alpha_bars must be strictly decreasing")

    def sigma2(self, vc: VarianceChoice) -> np.ndarray:
        """Length-T vector of sampling variances for the given choice."""
        if vc is VarianceChoice.BETA:
            return self.betas
        return self.posterior_vars


def build_linear_schedule(
    T: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    literal_posterior: bool = False,
) -> NoiseSchedule:
    """Build a schedule with betas linearly spaced over [beta_start, beta_end].

    Args:
        T: number of timesteps (>= 1).
        beta_start, beta_end: endpoints, 0 < beta_start <= beta_end < 1.
        literal_posterior: if True, store the unscaled variance ratio
            (1 - abar_{t-1}) / (1 - abar_t) in ``posterior_vars`` instead of
            the posterior variance (ratio times beta_t). Provided for
            comparison only; the ratio can exceed 1 and is not a posterior
            variance.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    # abar_0 := 1, so beta_tilde_1 = 0 and sampling adds no noise at t=1.
    alpha_bars_prev = np.concatenate(([1.0], alpha_bars[:-1]))
    ratio = (1.0 - alpha_bars_prev) / (1.0 - alpha_bars)
    posterior_vars = ratio if literal_posterior else ratio * betas
    return NoiseSchedule(
        T=T,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        posterior_vars=posterior_vars,
    )


def _check_batch(x: np.ndarray, name: str = "batch") -> None:
    if x.ndim != 4:
        raise ValueError(f"{name} must be rank-4 (B, C, H, W), got shape {x.shape}")
    if any(d <= 0 for d in x.shape):
        raise ValueError(f"{name} has non-positive dims: {x.shape}")


def _check_t(t: np.ndarray, T: int) -> np.ndarray:
    t = np.asarray(t)
    if not np.issubdtype(t.dtype, np.integer):
        raise ValueError(f"timesteps must be integers, got dtype {t.dtype}")
    if np.any(t < 1) or np.any(t > T):
        raise ValueError(f"timesteps must lie in [1, {T}], got range "
                         f"[{t.min()}, {t.max()}]")
    return t


def _per_sample(coefs: np.ndarray, t: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Gather coefs at t (1-based) and shape for broadcasting over a batch."""
    c = coefs[t - 1].astype(like.dtype)
    if c.ndim == 0:
        return c
    return c.reshape(-1, 1, 1, 1)


def forward_sample(
    x0: np.ndarray, t: np.ndarray, eps: np.ndarray, sched: NoiseSchedule
) -> np.ndarray:
    """Closed-form forward corruption to timestep t.

    Returns sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps, with a per-sample t.
    """
    _check_batch(x0, "x0")
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    t = _check_t(t, sched.T)
    a = _per_sample(np.sqrt(sched.alpha_bars), t, x0)
    b = _per_sample(np.sqrt(1.0 - sched.alpha_bars), t, x0)
    return a * x0 + b * eps


def forward_step(
    x_prev: np.ndarray, t: np.ndarray, eps: np.ndarray, sched: NoiseSchedule
) -> np.ndarray:
    """Single forward step x_t = sqrt(a_t) * x_{t-1} + sqrt(beta_t) * eps."""
    _check_batch(x_prev, "x_prev")
    if eps.shape != x_prev.shape:
        raise ValueError(f"eps shape {eps.shape} != x_prev shape {x_prev.shape}")
    t = _check_t(t, sched.T)
    a = _per_sample(np.sqrt(sched.alphas), t, x_prev)
    b = _per_sample(np.sqrt(sched.betas), t, x_prev)
    return a * x_prev + b * eps


def training_loss(predict, x0_batch: np.ndarray, sched: NoiseSchedule, rng):
    """Noise-prediction loss on one batch.

    For each batch element draws t ~ Uniform{1..T} and eps ~ N(0, I) (in
    that order: all t first, then all eps), forms x_t, and accumulates the
    squared L2 residual ||eps - predict(x_t, t)||^2 over all pixels of the
    sample. Returns (batch mean loss, t, eps) so draws can be replayed.
    """
    _check_batch(x0_batch, "x0_batch")
    n = x0_batch.shape[0]
    t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal(x0_batch.shape, dtype=x0_batch.dtype)
    x_t = forward_sample(x0_batch, t, eps, sched)
    pred = predict(x_t, t)
    if pred.shape != eps.shape:
        raise ValueError(f"predict returned shape {pred.shape}, expected {eps.shape}")
    resid = (eps - pred).astype(np.float64)
    loss = float(np.mean(np.sum(resid * resid, axis=(1, 2, 3))))
    return loss, t, eps


def reverse_step(
    x_t: np.ndarray,
    t: int,
    eps_pred: np.ndarray,
    z: np.ndarray,
    sched: NoiseSchedule,
    vc: VarianceChoice,
) -> np.ndarray:
    """One ancestral sampling step from x_t to x_{t-1}.

    The caller supplies z = 0 at t = 1 so no noise enters the final output.
    """
    _check_batch(x_t, "x_t")
    if eps_pred.shape != x_t.shape:
        raise ValueError(f"eps_pred shape {eps_pred.shape} != x_t shape {x_t.shape}")
    if z.shape != x_t.shape:
        raise ValueError(f"z shape {z.shape} != x_t shape {x_t.shape}")
    if not 1 <= t <= sched.T:
        raise ValueError(f"t must lie in [1, {sched.T}], got {t}")
    i = t - 1
    alpha = sched.alphas[i]
    coef = (1.0 - alpha) / np.sqrt(1.0 - sched.alpha_bars[i])
    sigma = np.sqrt(sched.sigma2(vc)[i])
    dt = x_t.dtype
    mean = (x_t - dt.type(coef) * eps_pred) / dt.type(np.sqrt(alpha))
    return mean + dt.type(sigma) * z


def generate(
    predict,
    sched: NoiseSchedule,
    n: int,
    shape: tuple,
    rng,
    vc: VarianceChoice,
    dtype=np.float32,
) -> np.ndarray:
    """Sample n images by running the reverse chain from x_T ~ N(0, I).

    Draw order (replayable): x_T first, then one z per step for t = T..2;
    z = 0 at t = 1. Pure function of (predict, seed, config).
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    x = rng.standard_normal((n, *shape), dtype=dtype)
    for t in range(sched.T, 0, -1):
        t_vec = np.full(n, t, dtype=np.int64)
        eps_pred = predict(x, t_vec)
        if t > 1:
            z = rng.standard_normal(x.shape, dtype=dtype)
        else:
            z = np.zeros_like(x)
        x = reverse_step(x, t, eps_pred, z, sched, vc)
    return x


def oracle_epsilon_single_point(
    x_t: np.ndarray, t, x0: np.ndarray, sched: NoiseSchedule
) -> np.ndarray:
    """Loss-optimal noise predictor for a dataset containing only x0.

    Inverts the closed-form forward process:
    eps_hat = (x_t - sqrt(abar_t) * x0) / sqrt(1 - abar_t). Useful as a
    test oracle for the sampler; accepts scalar or per-sample t.
    """
    _check_batch(x_t, "x_t")
    t = _check_t(np.asarray(t), sched.T)
    a = _per_sample(np.sqrt(sched.alpha_bars), t, x_t)
    b = _per_sample(np.sqrt(1.0 - sched.alpha_bars), t, x_t)
    return (x_t - a * x0) / b
