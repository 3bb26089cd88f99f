"""Semantic guidance composition on top of classifier-free guidance.

The engine steers a diffusion trajectory by adding, per step, a sparse
combination of concept edit directions to the usual classifier-free guidance
prediction.  For each concept the direction between the concept-conditioned
and unconditional noise estimates is thresholded so only the largest-magnitude
coordinates act, scaled, optionally sign-flipped to suppress the concept, and
summed across concepts with per-concept warmup gates.  A shared momentum
accumulator smooths the combined term over time: it is built up from the very
first step but only applied once every concept is past its warmup.

The step operator is architecture-agnostic: it consumes noise estimates and
never looks inside the model that produced them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from sega_forge.tensors import Latent, ShapeMismatchError, percentile_threshold

__all__ = [
    "POSITIVE",
    "NEGATIVE",
    "ParameterError",
    "ConceptEdit",
    "GuidanceConfig",
    "GuidanceState",
    "cfg_term",
    "edit_direction",
    "threshold_mask",
    "guidance_term",
    "combine_concepts",
    "momentum_update",
    "sega_step",
    "recorded_guidance",
    "apply_recorded",
]

POSITIVE = "positive"
NEGATIVE = "negative"


class ParameterError(ValueError):
    """A configuration field is out of range; carries the field name."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(message)


def _require(cond: bool, field_name: str, message: str) -> None:
    if not cond:
        raise ParameterError(field_name, message)


def _finite_number(value: object) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and np.isfinite(value)


@dataclass(frozen=True)
class ConceptEdit:
    """One concept to promote or suppress.

    condition   opaque conditioning token understood by the noise estimator
    edit_scale  strength applied on the selected coordinates, in [0, 20]
    threshold   fraction of coordinates masked out, strictly inside (0, 1);
                larger values keep fewer, larger-magnitude coordinates
    warmup      number of initial steps during which this concept's term is
                withheld from the output (it still feeds momentum)
    direction   "positive" promotes the concept, "negative" suppresses it
    weight      relative weight in the multi-concept combination
    """

    condition: str
    edit_scale: float
    threshold: float
    warmup: int = 0
    direction: str = POSITIVE
    weight: float = 1.0

    def __post_init__(self) -> None:
        _require(isinstance(self.condition, str) and self.condition != "",
                 "condition", "condition must be a non-empty string")
        _require(_finite_number(self.edit_scale) and 0.0 <= self.edit_scale <= 20.0,
                 "edit_scale", f"edit_scale must be in [0, 20], got {self.edit_scale!r}")
        _require(_finite_number(self.threshold) and 0.0 < self.threshold < 1.0,
                 "threshold", f"threshold must be in (0, 1), got {self.threshold!r}")
        _require(isinstance(self.warmup, int) and not isinstance(self.warmup, bool)
                 and self.warmup >= 0,
                 "warmup", f"warmup must be a non-negative integer, got {self.warmup!r}")
        _require(self.direction in (POSITIVE, NEGATIVE),
                 "direction", f"direction must be '{POSITIVE}' or '{NEGATIVE}', got {self.direction!r}")
        _require(_finite_number(self.weight),
                 "weight", f"weight must be a finite number, got {self.weight!r}")


@dataclass(frozen=True)
class GuidanceConfig:
    """Full guidance setup for one run.

    prompt_condition  token for the classifier-free guidance prompt, or None
                      for unconditional sampling
    guidance_scale    classifier-free guidance strength, in [0, 20]
    momentum_scale    weight of the momentum term added to the output, in [0, 1]
    momentum_beta     decay of the momentum accumulator, in [0, 1)
    concepts          the concept edits, applied in the given order
    """

    prompt_condition: str | None = None
    guidance_scale: float = 1.0
    momentum_scale: float = 0.0
    momentum_beta: float = 0.9
    concepts: tuple[ConceptEdit, ...] = ()

    def __post_init__(self) -> None:
        _require(self.prompt_condition is None
                 or (isinstance(self.prompt_condition, str) and self.prompt_condition != ""),
                 "prompt_condition", "prompt_condition must be None or a non-empty string")
        _require(_finite_number(self.guidance_scale) and 0.0 <= self.guidance_scale <= 20.0,
                 "guidance_scale", f"guidance_scale must be in [0, 20], got {self.guidance_scale!r}")
        _require(_finite_number(self.momentum_scale) and 0.0 <= self.momentum_scale <= 1.0,
                 "momentum_scale", f"momentum_scale must be in [0, 1], got {self.momentum_scale!r}")
        _require(_finite_number(self.momentum_beta) and 0.0 <= self.momentum_beta < 1.0,
                 "momentum_beta", f"momentum_beta must be in [0, 1), got {self.momentum_beta!r}")
        concepts = tuple(self.concepts)
        for item in concepts:
            if not isinstance(item, ConceptEdit):
                raise ParameterError("concepts", f"concepts must be ConceptEdit instances, got {type(item).__name__}")
        object.__setattr__(self, "concepts", concepts)

    @property
    def max_warmup(self) -> int:
        return max((c.warmup for c in self.concepts), default=0)


@dataclass
class GuidanceState:
    """Mutable per-run state threaded through the step operator.

    momentum   the smoothed accumulator (zero at start)
    t          number of completed steps
    gamma_log  per step, the guidance total actually added to the output
    mask_log   per step, one boolean selection array per concept
    """

    momentum: Latent
    t: int = 0
    record: bool = True
    gamma_log: list[Latent] = field(default_factory=list)
    mask_log: list[tuple[np.ndarray, ...]] = field(default_factory=list)

    @classmethod
    def fresh(cls, shape: Sequence[int], record: bool = True) -> "GuidanceState":
        return cls(momentum=Latent.zeros(shape), record=record)


# -- step algebra -------------------------------------------------------------

def cfg_term(eps_uncond: Latent, eps_prompt: Latent, scale: float) -> Latent:
    """Classifier-free guidance prediction: uncond + scale * (prompt - uncond)."""
    return eps_uncond.add(eps_prompt.sub(eps_uncond).scale(scale))


def edit_direction(eps_uncond: Latent, eps_edit: Latent, direction: str = POSITIVE) -> Latent:
    """Difference between the concept-conditioned and unconditional estimates.

    Negative direction is the exact sign flip, so suppression mirrors
    promotion coordinate for coordinate.
    """
    if direction not in (POSITIVE, NEGATIVE):
        raise ParameterError("direction", f"direction must be '{POSITIVE}' or '{NEGATIVE}', got {direction!r}")
    diff = eps_edit.sub(eps_uncond)
    return diff if direction == POSITIVE else diff.scale(-1.0)


def _selection(direction_vec: Latent, threshold: float) -> np.ndarray:
    magnitude = np.abs(direction_vec.data)
    eta = percentile_threshold(magnitude, threshold)
    return magnitude >= eta  # ties included


def threshold_mask(direction_vec: Latent, edit_scale: float, threshold: float) -> Latent:
    """Field that is ``edit_scale`` on the selected coordinates and 0 elsewhere.

    A coordinate is selected when its magnitude reaches the nearest-rank
    percentile of the flattened magnitudes at ``threshold``, ties included.
    """
    sel = _selection(direction_vec, threshold)
    return Latent(np.where(sel, float(edit_scale), 0.0), direction_vec.shape)


def guidance_term(direction_vec: Latent, edit_scale: float, threshold: float) -> Latent:
    """Sparse per-concept term: the mask applied to the edit direction."""
    return threshold_mask(direction_vec, edit_scale, threshold).mul(direction_vec)


def combine_concepts(terms: Sequence[Latent], edits: Sequence[ConceptEdit], t: int) -> Latent:
    """Weighted sum of per-concept terms, skipping concepts still in warmup.

    Summation is sequential in concept order, starting from zero.
    """
    if len(terms) != len(edits):
        raise ValueError(f"got {len(terms)} terms for {len(edits)} concepts")
    if not terms:
        raise ValueError("combine_concepts needs at least one concept")
    acc = Latent.zeros(terms[0].shape)
    for term, edit in zip(terms, edits):
        if t >= edit.warmup:
            acc = acc.add(term.scale(edit.weight))
    return acc


def momentum_update(momentum: Latent, combined: Latent, beta: float) -> Latent:
    """Exponential moving average: beta * momentum + (1 - beta) * combined."""
    return momentum.scale(beta).add(combined.scale(1.0 - beta))


def _apply_total(cfg: Latent, total: Latent) -> Latent:
    # Skip the addition when there is nothing to add, so an inert step is
    # bitwise identical to the plain classifier-free guidance path.
    if not np.any(total.data):
        return cfg
    return cfg.add(total)


def sega_step(
    state: GuidanceState,
    eps_uncond: Latent,
    eps_prompt: Latent,
    eps_edits: Sequence[Latent],
    config: GuidanceConfig,
) -> Latent:
    """One guidance step; mutates ``state`` and returns the combined prediction.

    Order of operations: every concept's edit direction, then its thresholded
    term, then the warmup-gated weighted sum; the momentum term joins the
    output only once ``t`` has reached every concept's warmup; the accumulator
    is then updated from the ungated sum (so warmup builds momentum without
    applying it) and ``t`` advances.  With no concepts the result reduces to
    the classifier-free guidance term exactly.
    """
    if eps_prompt.shape != eps_uncond.shape:
        raise ShapeMismatchError(eps_uncond.shape, eps_prompt.shape)
    if state.momentum.shape != eps_uncond.shape:
        raise ShapeMismatchError(state.momentum.shape, eps_uncond.shape)
    if len(eps_edits) != len(config.concepts):
        raise ValueError(f"got {len(eps_edits)} edit estimates for {len(config.concepts)} concepts")

    cfg = cfg_term(eps_uncond, eps_prompt, config.guidance_scale)

    if not config.concepts:
        state.momentum = momentum_update(state.momentum, Latent.zeros(cfg.shape), config.momentum_beta)
        if state.record:
            state.gamma_log.append(Latent.zeros(cfg.shape))
            state.mask_log.append(())
        state.t += 1
        return cfg

    t = state.t
    selections: list[np.ndarray] = []
    gated = Latent.zeros(cfg.shape)
    ungated = Latent.zeros(cfg.shape)
    for edit, eps_edit in zip(config.concepts, eps_edits):
        direction_vec = edit_direction(eps_uncond, eps_edit, edit.direction)
        selections.append(_selection(direction_vec, edit.threshold))
        term = guidance_term(direction_vec, edit.edit_scale, edit.threshold).scale(edit.weight)
        ungated = ungated.add(term)
        if t >= edit.warmup:
            gated = gated.add(term)

    total = gated
    if config.momentum_scale != 0.0 and t >= config.max_warmup:
        total = total.add(state.momentum.scale(config.momentum_scale))

    state.momentum = momentum_update(state.momentum, ungated, config.momentum_beta)
    if state.record:
        state.gamma_log.append(total)
        state.mask_log.append(tuple(selections))
    state.t += 1
    return _apply_total(cfg, total)


# -- record and replay --------------------------------------------------------

def recorded_guidance(state: GuidanceState) -> tuple[Latent, ...]:
    """The per-step guidance totals recorded so far, oldest first."""
    return tuple(state.gamma_log)


def apply_recorded(log: Sequence[Latent], step: int) -> Latent:
    """The recorded guidance total for ``step``; bounds-checked."""
    if not 0 <= step < len(log):
        raise ValueError(f"recorded log has {len(log)} steps, requested step {step}")
    return log[step]
