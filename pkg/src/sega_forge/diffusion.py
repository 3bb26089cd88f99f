"""Analytic Gaussian-mixture diffusion testbed.

A variance-preserving forward process pushes a labeled Gaussian mixture
through time: component k at time t becomes N(alpha_t * mu_k,
alpha_t^2 * Sigma_k + omega_t^2 * I).  Because the marginals stay mixtures of
Gaussians, the score and therefore the ideal noise estimate have closed
forms, for the full mixture and for any labeled subset.  That gives the
guidance engine a ground-truth estimator to steer, and gives tests an
independent probability route (densities, posteriors, classifier gradients)
to check it against.

Sampling runs the deterministic update z_{t-1} = alpha_{t-1} * xhat
+ omega_{t-1} * eps_bar with xhat = (z_t - omega_t * eps_bar) / alpha_t,
stepping t = T..1.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from sega_forge.guidance import GuidanceConfig, GuidanceState, _apply_total, cfg_term, sega_step
from sega_forge.tensors import Latent, Rng, gaussian_sample

__all__ = [
    "Schedule",
    "MixtureComponent",
    "MixtureModel",
    "NoiseEstimator",
    "AnalyticEstimator",
    "ProductEstimator",
    "exact_noise_estimate",
    "log_density",
    "implicit_classifier_gradient",
    "label_posterior",
    "classify",
    "sampler_step",
    "predict_original",
    "GuidedRun",
    "run_guided",
    "run_replay",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Schedule:
    """Signal/noise coefficients alpha_t, omega_t for t = 0..T.

    t = 0 is the data end (alpha ~ 1), t = T the noise end (alpha ~ 0).
    The variance-preserving identity alpha^2 + omega^2 = 1 must hold to
    1e-12 at every index and alpha must decrease strictly.
    """

    alphas: np.ndarray
    omegas: np.ndarray

    def __post_init__(self) -> None:
        alphas = np.ascontiguousarray(self.alphas, dtype=np.float64)
        omegas = np.ascontiguousarray(self.omegas, dtype=np.float64)
        if alphas.ndim != 1 or omegas.shape != alphas.shape or alphas.size < 2:
            raise ValueError("schedule needs matching 1-D alpha/omega arrays of length >= 2")
        if not (np.isfinite(alphas).all() and np.isfinite(omegas).all()):
            raise ValueError("schedule coefficients must be finite")
        if alphas.min() < 0.0 or alphas.max() > 1.0 or omegas.min() < 0.0 or omegas.max() > 1.0:
            raise ValueError("schedule coefficients must lie in [0, 1]")
        if not (np.diff(alphas) < 0.0).all():
            raise ValueError("alpha must decrease strictly from the data end to the noise end")
        drift = np.abs(alphas**2 + omegas**2 - 1.0)
        if drift.max() > 1e-12:
            raise ValueError(f"alpha^2 + omega^2 deviates from 1 by {drift.max():.3e} (> 1e-12)")
        for arr in (alphas, omegas):
            arr.flags.writeable = False
        token = hashlib.sha1(alphas.tobytes() + omegas.tobytes()).hexdigest()
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "omegas", omegas)
        object.__setattr__(self, "_token", token)

    @property
    def steps(self) -> int:
        return self.alphas.size - 1

    @property
    def token(self) -> str:
        return self._token  # type: ignore[attr-defined]

    @classmethod
    def cosine(cls, steps: int = 50) -> "Schedule":
        """Cosine schedule alpha_t = cos(pi t / 2T), omega_t = sin(pi t / 2T).

        The noise endpoint is evaluated at t = T - 1/2: at exactly t = T the
        cosine underflows to ~6e-17, and dividing by it in the x-prediction
        amplifies rounding noise in (z - omega * eps) by sixteen orders of
        magnitude.  The half-step endpoint keeps that divide well conditioned
        while staying within O(1/T) of the pure-noise marginal.
        """
        if not isinstance(steps, int) or steps < 1:
            raise ValueError(f"steps must be a positive integer, got {steps!r}")
        grid = np.arange(steps + 1, dtype=np.float64)
        grid[steps] = steps - 0.5
        angle = 0.5 * np.pi * grid / steps
        return cls(np.cos(angle), np.sin(angle))


@dataclass(frozen=True)
class MixtureComponent:
    """One labeled Gaussian: weight, mean, covariance, and concept tags."""

    weight: float
    mean: np.ndarray
    covariance: np.ndarray
    labels: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        mean = np.ascontiguousarray(self.mean, dtype=np.float64).ravel()
        cov = np.ascontiguousarray(self.covariance, dtype=np.float64)
        if not (isinstance(self.weight, (int, float)) and np.isfinite(self.weight) and self.weight > 0):
            raise ValueError(f"component weight must be a positive finite number, got {self.weight!r}")
        if not np.isfinite(mean).all():
            raise ValueError("component mean must be finite")
        d = mean.size
        if cov.shape != (d, d) or not np.isfinite(cov).all():
            raise ValueError(f"covariance must be a finite ({d}, {d}) matrix, got shape {cov.shape}")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-9 * max(1.0, float(np.abs(cov).max()))):
            raise ValueError("covariance must be symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("covariance must be positive definite") from None
        labels = frozenset(self.labels)
        if not all(isinstance(tag, str) and tag for tag in labels):
            raise ValueError("labels must be non-empty strings")
        for arr in (mean, cov):
            arr.flags.writeable = False
        object.__setattr__(self, "weight", float(self.weight))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "labels", labels)


@dataclass(frozen=True)
class MixtureModel:
    """Labeled Gaussian mixture over R^d; weights are normalized on entry."""

    components: tuple[MixtureComponent, ...]
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        components = tuple(self.components)
        if not components:
            raise ValueError("mixture needs at least one component")
        d = components[0].mean.size
        for comp in components:
            if comp.mean.size != d:
                raise ValueError(
                    f"components disagree on dimension: {comp.mean.size} vs {d}"
                )
        total = sum(comp.weight for comp in components)
        if abs(total - 1.0) > 1e-8:
            raise ValueError(f"component weights sum to {total!r}, expected 1 within 1e-8")
        if abs(total - 1.0) > 0.0:
            components = tuple(
                MixtureComponent(comp.weight / total, comp.mean, comp.covariance, comp.labels)
                for comp in components
            )
        object.__setattr__(self, "components", components)

    def __getstate__(self) -> dict:
        state = self.__dict__.copy()
        state["_cache"] = {}
        return state

    @property
    def dimension(self) -> int:
        return self.components[0].mean.size

    @property
    def tags(self) -> tuple[str, ...]:
        seen: set[str] = set()
        for comp in self.components:
            seen.update(comp.labels)
        return tuple(sorted(seen))

    def indices_for(self, condition: str | None) -> np.ndarray:
        if condition is None:
            return np.arange(len(self.components))
        hits = [k for k, comp in enumerate(self.components) if condition in comp.labels]
        if not hits:
            raise ValueError(f"unknown concept tag {condition!r}")
        return np.asarray(hits)

    # -- closed-form moments and direct sampling ------------------------------

    def mixture_mean(self) -> np.ndarray:
        w = np.array([c.weight for c in self.components])
        means = np.stack([c.mean for c in self.components])
        return w @ means

    def mixture_covariance(self) -> np.ndarray:
        w = np.array([c.weight for c in self.components])
        means = np.stack([c.mean for c in self.components])
        covs = np.stack([c.covariance for c in self.components])
        m = w @ means
        second = np.einsum("k,kij->ij", w, covs) + np.einsum("k,ki,kj->ij", w, means, means)
        return second - np.outer(m, m)

    def sample(self, rng: Rng, n: int) -> np.ndarray:
        """n draws from the data mixture (t = 0), deterministic in the stream."""
        w = np.array([c.weight for c in self.components])
        picks = np.searchsorted(np.cumsum(w), rng.uniforms(n), side="right")
        picks = np.minimum(picks, len(self.components) - 1)
        noise = rng.normals(n * self.dimension).reshape(n, self.dimension)
        chols = np.stack([self._chol(k) for k in range(len(self.components))])
        means = np.stack([c.mean for c in self.components])
        return means[picks] + np.einsum("nij,nj->ni", chols[picks], noise)

    def _chol(self, k: int) -> np.ndarray:
        key = ("chol", k)
        if key not in self._cache:
            self._cache[key] = np.linalg.cholesky(self.components[k].covariance)
        return self._cache[key]

    # -- pushed-forward parameters at schedule time t -------------------------

    def _pushed(self, schedule: Schedule, t: int):
        key = (schedule.token, t)
        if key not in self._cache:
            alpha = float(schedule.alphas[t])
            omega = float(schedule.omegas[t])
            d = self.dimension
            means = np.stack([alpha * c.mean for c in self.components])
            invs = np.empty((len(self.components), d, d))
            logdets = np.empty(len(self.components))
            for k, comp in enumerate(self.components):
                pushed_cov = alpha**2 * comp.covariance + omega**2 * np.eye(d)
                sign, logdet = np.linalg.slogdet(pushed_cov)
                if sign <= 0:
                    raise ValueError("pushed covariance lost positive definiteness")
                invs[k] = np.linalg.inv(pushed_cov)
                logdets[k] = logdet
            logw = np.log(np.array([c.weight for c in self.components]))
            self._cache[key] = (means, invs, logdets, logw, alpha, omega)
        return self._cache[key]

    def estimator(self, schedule: Schedule) -> "AnalyticEstimator":
        return AnalyticEstimator(self, schedule)


def _check_t(schedule: Schedule, t: int) -> None:
    if not isinstance(t, (int, np.integer)) or isinstance(t, bool) or not 0 <= t <= schedule.steps:
        raise ValueError(f"t must be an integer in [0, {schedule.steps}], got {t!r}")


def _component_stats(model: MixtureModel, schedule: Schedule, z: np.ndarray, t: int):
    """Per-component solves and joint log densities at (z, t), all components."""
    means, invs, logdets, logw, _, _ = model._pushed(schedule, t)
    diff = z[None, :] - means
    sol = np.einsum("kij,kj->ki", invs, diff)
    quad = np.einsum("ki,ki->k", diff, sol)
    logdens = logw - 0.5 * (quad + logdets + model.dimension * _LOG_2PI)
    return sol, logdens


def _as_vector(model_dim: int, z: Latent | np.ndarray) -> np.ndarray:
    arr = z.data if isinstance(z, Latent) else np.asarray(z, dtype=np.float64).ravel()
    if arr.size != model_dim:
        raise ValueError(f"latent has {arr.size} entries, model dimension is {model_dim}")
    return arr


def _logsumexp(values: np.ndarray) -> float:
    peak = values.max()
    return float(peak + np.log(np.exp(values - peak).sum()))


def exact_noise_estimate(
    model: MixtureModel, schedule: Schedule, z: Latent, t: int, condition: str | None = None
) -> Latent:
    """Ideal noise estimate -omega_t * grad log p_t at z, optionally label-conditioned.

    Conditioning restricts the mixture to the components carrying the tag and
    renormalizes; the gradient is the responsibility-weighted sum of the
    per-component Gaussian scores.
    """
    _check_t(schedule, t)
    arr = _as_vector(model.dimension, z)
    sel = model.indices_for(condition)
    sol, logdens = _component_stats(model, schedule, arr, t)
    sol, logdens = sol[sel], logdens[sel]
    resp = np.exp(logdens - logdens.max())
    resp /= resp.sum()
    omega = float(schedule.omegas[t])
    shape = z.shape if isinstance(z, Latent) else (arr.size,)
    return Latent(omega * (resp @ sol), shape)


def log_density(
    model: MixtureModel, schedule: Schedule, z: Latent | np.ndarray, t: int,
    condition: str | None = None,
) -> float:
    """log p_t(z | condition): the pushed, label-restricted, renormalized mixture."""
    _check_t(schedule, t)
    arr = _as_vector(model.dimension, z)
    sel = model.indices_for(condition)
    _, logdens = _component_stats(model, schedule, arr, t)
    prior = sum(model.components[k].weight for k in sel.tolist())
    return _logsumexp(logdens[sel]) - math.log(prior)


def implicit_classifier_gradient(
    model: MixtureModel, schedule: Schedule, z: Latent | np.ndarray, t: int, tag: str
) -> Latent:
    """grad_z log p(tag | z_t), computed through component posteriors.

    This is an independent route from differencing two noise estimates: it
    weighs every per-component solve by (posterior - tag-restricted posterior)
    in one pass, and satisfies
    -omega_t * grad == estimate(z, t, tag) - estimate(z, t, None).
    """
    _check_t(schedule, t)
    arr = _as_vector(model.dimension, z)
    sel = model.indices_for(tag)
    sol, logdens = _component_stats(model, schedule, arr, t)
    resp_all = np.exp(logdens - _logsumexp(logdens))
    resp_tag = np.exp(logdens[sel] - _logsumexp(logdens[sel]))
    grad = resp_all @ sol - resp_tag @ sol[sel]
    shape = z.shape if isinstance(z, Latent) else (arr.size,)
    return Latent(grad, shape)


def label_posterior(model: MixtureModel, x: Latent | np.ndarray, tag: str) -> float:
    """P(tag | x) under the data mixture (t = 0)."""
    arr = _as_vector(model.dimension, x)
    sel = model.indices_for(tag)
    logdens = _data_logdens(model, arr)
    return math.exp(_logsumexp(logdens[sel]) - _logsumexp(logdens))


def _data_logdens(model: MixtureModel, arr: np.ndarray) -> np.ndarray:
    key = "data_params"
    if key not in model._cache:
        invs = np.stack([np.linalg.inv(c.covariance) for c in model.components])
        logdets = np.array([np.linalg.slogdet(c.covariance)[1] for c in model.components])
        means = np.stack([c.mean for c in model.components])
        logw = np.log(np.array([c.weight for c in model.components]))
        model._cache[key] = (means, invs, logdets, logw)
    means, invs, logdets, logw = model._cache[key]
    diff = arr[None, :] - means
    quad = np.einsum("ki,kij,kj->k", diff, invs, diff)
    return logw - 0.5 * (quad + logdets + model.dimension * _LOG_2PI)


def classify(model: MixtureModel, x: Latent | np.ndarray) -> str:
    """The tag with the highest posterior at x; ties break toward the first tag."""
    tags = model.tags
    if not tags:
        raise ValueError("mixture carries no labels to classify against")
    scores = [label_posterior(model, x, tag) for tag in tags]
    return tags[int(np.argmax(scores))]


# -- estimator interface ------------------------------------------------------

@runtime_checkable
class NoiseEstimator(Protocol):
    """Anything that can predict noise for a latent at schedule time t."""

    @property
    def dimension(self) -> int: ...

    @property
    def schedule(self) -> Schedule: ...

    def estimate(self, z: Latent, t: int, condition: str | None = None) -> Latent: ...


@dataclass(frozen=True)
class AnalyticEstimator:
    """The exact mixture estimator bound to a schedule."""

    model: MixtureModel
    schedule: Schedule

    @property
    def dimension(self) -> int:
        return self.model.dimension

    @property
    def tags(self) -> tuple[str, ...]:
        return self.model.tags

    def estimate(self, z: Latent, t: int, condition: str | None = None) -> Latent:
        return exact_noise_estimate(self.model, self.schedule, z, t, condition)

    def log_density(self, z: Latent | np.ndarray, t: int, condition: str | None = None) -> float:
        return log_density(self.model, self.schedule, z, t, condition)

    def label_posterior(self, x: Latent | np.ndarray, tag: str) -> float:
        return label_posterior(self.model, x, tag)

    def sample_data(self, rng: Rng, n: int) -> np.ndarray:
        return self.model.sample(rng, n)


@dataclass(frozen=True)
class ProductEstimator:
    """Product of independent block mixtures over consecutive coordinate slices.

    Each conditioning tag must belong to at least one block; blocks that do
    not know a tag contribute their unconditional estimate.  Because every
    block only ever sees its own slice, cross-block values are bitwise
    independent, which makes exact isolation between concepts on different
    blocks attainable rather than merely approximate.
    """

    blocks: tuple[AnalyticEstimator, ...]

    def __post_init__(self) -> None:
        blocks = tuple(self.blocks)
        if not blocks:
            raise ValueError("product estimator needs at least one block")
        token = blocks[0].schedule.token
        if any(b.schedule.token != token for b in blocks):
            raise ValueError("product blocks must share one schedule")
        object.__setattr__(self, "blocks", blocks)

    @property
    def dimension(self) -> int:
        return sum(b.dimension for b in self.blocks)

    @property
    def schedule(self) -> Schedule:
        return self.blocks[0].schedule

    @property
    def tags(self) -> tuple[str, ...]:
        seen: set[str] = set()
        for b in self.blocks:
            seen.update(b.tags)
        return tuple(sorted(seen))

    def _route(self, condition: str | None) -> list[str | None]:
        if condition is None:
            return [None] * len(self.blocks)
        routed = [condition if condition in b.tags else None for b in self.blocks]
        if all(r is None for r in routed):
            raise ValueError(f"unknown concept tag {condition!r}")
        return routed

    def estimate(self, z: Latent, t: int, condition: str | None = None) -> Latent:
        arr = _as_vector(self.dimension, z)
        routed = self._route(condition)
        parts = []
        offset = 0
        for block, cond in zip(self.blocks, routed):
            piece = Latent(arr[offset:offset + block.dimension], (block.dimension,))
            parts.append(block.estimate(piece, t, cond).data)
            offset += block.dimension
        return Latent(np.concatenate(parts), z.shape if isinstance(z, Latent) else (arr.size,))

    def log_density(self, z: Latent | np.ndarray, t: int, condition: str | None = None) -> float:
        arr = _as_vector(self.dimension, z)
        routed = self._route(condition)
        total = 0.0
        offset = 0
        for block, cond in zip(self.blocks, routed):
            total += block.log_density(arr[offset:offset + block.dimension], t, cond)
            offset += block.dimension
        return total

    def label_posterior(self, x: Latent | np.ndarray, tag: str) -> float:
        arr = _as_vector(self.dimension, x)
        prob = 1.0
        offset = 0
        hit = False
        for block in self.blocks:
            piece = arr[offset:offset + block.dimension]
            if tag in block.tags:
                prob *= block.label_posterior(piece, tag)
                hit = True
            offset += block.dimension
        if not hit:
            raise ValueError(f"unknown concept tag {tag!r}")
        return prob

    def sample_data(self, rng: Rng, n: int) -> np.ndarray:
        return np.concatenate([b.sample_data(rng, n) for b in self.blocks], axis=1)


def _resolve_estimator(model, schedule: Schedule):
    if isinstance(model, MixtureModel):
        return model.estimator(schedule)
    if hasattr(model, "estimate") and hasattr(model, "schedule"):
        if model.schedule.token != schedule.token:
            raise ValueError("estimator was built for a different schedule")
        return model
    raise TypeError(f"expected a MixtureModel or noise estimator, got {type(model).__name__}")


# -- deterministic sampler ----------------------------------------------------

def _xhat(z: Latent, eps_bar: Latent, t: int, schedule: Schedule) -> np.ndarray:
    alpha = float(schedule.alphas[t])
    if alpha == 0.0:
        raise ValueError(f"alpha is zero at t={t}; the x-prediction is undefined")
    omega = float(schedule.omegas[t])
    return (z.data - omega * eps_bar.data) / alpha


def predict_original(z: Latent, eps_bar: Latent, t: int, schedule: Schedule) -> Latent:
    """The sampler's x-prediction xhat = (z - omega_t * eps_bar) / alpha_t."""
    _check_t(schedule, t)
    if z.shape != eps_bar.shape:
        raise ValueError(f"latent shape {z.shape} does not match prediction shape {eps_bar.shape}")
    return Latent(_xhat(z, eps_bar, t, schedule), z.shape)


def sampler_step(z: Latent, eps_bar: Latent, t: int, schedule: Schedule) -> Latent:
    """One deterministic update from schedule position t to t - 1."""
    _check_t(schedule, t)
    if t < 1:
        raise ValueError("sampler_step needs t >= 1")
    if z.shape != eps_bar.shape:
        raise ValueError(f"latent shape {z.shape} does not match prediction shape {eps_bar.shape}")
    xhat = _xhat(z, eps_bar, t, schedule)
    alpha_prev = float(schedule.alphas[t - 1])
    omega_prev = float(schedule.omegas[t - 1])
    return Latent(alpha_prev * xhat + omega_prev * eps_bar.data, z.shape)


# -- full runs ----------------------------------------------------------------

@dataclass
class GuidedRun:
    """Everything a finished run exposes: the path, predictions, and state."""

    seed: int
    trajectory: list[Latent]
    predictions: list[Latent]
    state: GuidanceState | None

    @property
    def final(self) -> Latent:
        return self.trajectory[-1]


def _step_once(est, schedule: Schedule, config: GuidanceConfig, state: GuidanceState,
               z: Latent, t: int) -> tuple[Latent, Latent]:
    """Estimate, compose guidance, advance one schedule position."""
    memo: dict[str | None, Latent] = {}

    def estimate(condition: str | None) -> Latent:
        if condition not in memo:
            memo[condition] = est.estimate(z, t, condition)
        return memo[condition]

    eps_uncond = estimate(None)
    eps_prompt = estimate(config.prompt_condition)
    eps_edits = [estimate(edit.condition) for edit in config.concepts]
    eps_bar = sega_step(state, eps_uncond, eps_prompt, eps_edits, config)
    return sampler_step(z, eps_bar, t, schedule), eps_bar


def run_guided(
    model,
    schedule: Schedule,
    config: GuidanceConfig,
    seed: int,
    record: bool = True,
    keep_trajectory: bool = True,
) -> GuidedRun:
    """Run the guided sampler from a fresh seed down the whole schedule.

    The initial latent is drawn from the seed's stream, then T composed
    steps walk t = T..1.  ``record`` keeps per-step guidance totals and masks
    on the state (needed for replay and mask diagnostics); ``keep_trajectory``
    keeps every intermediate latent rather than just the endpoints.
    """
    est = _resolve_estimator(model, schedule)
    z = gaussian_sample(Rng(seed), (est.dimension,))
    state = GuidanceState.fresh(z.shape, record=record)
    trajectory = [z]
    predictions: list[Latent] = []
    for k in range(schedule.steps):
        z, eps_bar = _step_once(est, schedule, config, state, z, schedule.steps - k)
        if record:
            predictions.append(eps_bar)
        if keep_trajectory:
            trajectory.append(z)
    if not keep_trajectory:
        trajectory.append(z)
    return GuidedRun(seed=seed, trajectory=trajectory, predictions=predictions, state=state)


def run_replay(
    model,
    schedule: Schedule,
    config: GuidanceConfig,
    seed: int,
    log: Sequence[Latent],
) -> GuidedRun:
    """Re-run a trajectory applying a recorded guidance log verbatim.

    Edit estimates are never computed; each step adds the recorded total to
    the live classifier-free guidance term, reproducing the original
    trajectory bit for bit when model, schedule, config, and seed match.
    """
    est = _resolve_estimator(model, schedule)
    if len(log) != schedule.steps:
        raise ValueError(f"recorded log has {len(log)} steps, schedule has {schedule.steps}")
    z = gaussian_sample(Rng(seed), (est.dimension,))
    for entry in log:
        if entry.shape != z.shape:
            raise ValueError(f"recorded entry shape {entry.shape} does not match latent shape {z.shape}")
    trajectory = [z]
    predictions: list[Latent] = []
    for k in range(schedule.steps):
        t = schedule.steps - k
        eps_uncond = est.estimate(z, t, None)
        eps_prompt = eps_uncond if config.prompt_condition is None else est.estimate(z, t, config.prompt_condition)
        eps_bar = _apply_total(cfg_term(eps_uncond, eps_prompt, config.guidance_scale), log[k])
        predictions.append(eps_bar)
        z = sampler_step(z, eps_bar, t, schedule)
        trajectory.append(z)
    return GuidedRun(seed=seed, trajectory=trajectory, predictions=predictions, state=None)
