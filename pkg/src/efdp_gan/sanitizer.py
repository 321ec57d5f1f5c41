"""Clipped error-feedback sanitization of the generator image gradient.

For each gradient source ``s`` (critic, classifier, encoder) with accumulated
clipping error ``e_s``::

    v_s = clip(g_s, C1) + clip(e_s, C2)
    e_s <- e_s + g_s - v_s

The released direction is ``sum_s v_s + w`` with ``w ~ N(0, sigma^2 C1^2 (1 + 2 C2))``.
The error recursion uses ``v`` before noise; noise is never fed back.

Privacy accounting charges this as one subsampled Gaussian release per
iteration, even though all three sources see the same real batch.  The noise
scales with ``C1`` alone, so the unclipped part carried forward by ``clip(e_s, C2)``
rests on that assumption.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numeric import InvalidParameterError, InvalidStateError, ParamVector, RngStream, l2_norm

PER_SOURCE = "per_source"
AGGREGATE = "aggregate"


@dataclass(frozen=True)
class ClipConfig:
    c1: float = 1.0
    c2: float = 1.0

    def __post_init__(self):
        if not self.c1 > 0:
            raise InvalidParameterError("clip threshold c1 must be positive")
        if not self.c2 >= 0:
            raise InvalidParameterError("clip threshold c2 must be nonnegative")


@dataclass(frozen=True)
class DpNoiseConfig:
    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvalidParameterError("noise multiplier sigma must be positive")


@dataclass
class EfState:
    """Accumulated clipping error per source plus the step counter."""

    errors: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    mode: str = PER_SOURCE

    @classmethod
    def zeros(cls, shape, sources=("d", "c", "e"), mode: str = PER_SOURCE) -> "EfState":
        if mode not in (PER_SOURCE, AGGREGATE):
            raise InvalidParameterError(f"unknown error-feedback mode {mode!r}")
        keys = ("all",) if mode == AGGREGATE else tuple(sources)
        return cls({s: np.zeros(tuple(shape)) for s in keys}, 0, mode)

    def copy(self) -> "EfState":
        return EfState({k: v.copy() for k, v in self.errors.items()}, self.step, self.mode)


def clip(g, c: float) -> np.ndarray:
    """``g / max(1, |g|_2 / c)``; vectors already within the threshold come back unchanged."""
    if not c > 0:
        raise InvalidParameterError(f"clip threshold must be positive, got {c}")
    g = np.asarray(g, dtype=np.float64)
    norm = l2_norm(g)
    if norm <= c:
        return g.copy()
    return g * (c / norm)


def ef_step(state: EfState, grads: dict[str, np.ndarray], clip_cfg: ClipConfig):
    """One error-feedback step; returns ``(v, new_state, per_source_v)``.

    In aggregate mode the sources are summed first and a single error is tracked.
    ``c2 = 0`` feeds nothing back, which is plain clipping.
    """
    if state.mode == AGGREGATE:
        if not grads:
            raise InvalidStateError("no gradients given")
        grads = {"all": sum(np.asarray(g, dtype=np.float64) for g in grads.values())}
    unknown = set(grads) - set(state.errors)
    if unknown:
        raise InvalidStateError(f"no error buffer for sources {sorted(unknown)}")
    new = state.copy()
    parts = {}
    for s, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        e = state.errors[s]
        if g.shape != e.shape:
            raise InvalidStateError(f"gradient for {s!r} has shape {g.shape}, error buffer {e.shape}")
        fed = clip(e, clip_cfg.c2) if clip_cfg.c2 > 0 else np.zeros_like(e)
        v_s = clip(g, clip_cfg.c1) + fed
        new.errors[s] = e + g - v_s
        parts[s] = v_s
    v = sum(parts.values())
    new.step = state.step + 1
    return v, new, parts


def noise_std(noise_cfg: DpNoiseConfig, clip_cfg: ClipConfig) -> float:
    return noise_cfg.sigma * clip_cfg.c1 * np.sqrt(1.0 + 2.0 * clip_cfg.c2)


def dp_noise(shape, noise_cfg: DpNoiseConfig, clip_cfg: ClipConfig, rng: RngStream) -> np.ndarray:
    """I.i.d. Gaussian entries with variance ``sigma^2 C1^2 (1 + 2 C2)``."""
    return rng.normal(shape, 0.0, noise_std(noise_cfg, clip_cfg))


def sanitize_hook(grads_wrt_images: dict[str, np.ndarray], state: EfState, clip_cfg: ClipConfig,
                  noise_cfg: DpNoiseConfig | None, rng: RngStream | None):
    """Error-feedback direction plus DP noise; returns ``(sanitized, new_state)``.

    ``noise_cfg=None`` switches the noise off (testing only).
    """
    v, new_state, _ = ef_step(state, grads_wrt_images, clip_cfg)
    if noise_cfg is None:
        return v, new_state
    return v + dp_noise(v.shape, noise_cfg, clip_cfg, rng), new_state


def apply_update(params: ParamVector, direction: ParamVector, eta: float) -> ParamVector:
    """``params - eta * direction`` as a new ParamVector."""
    if params.segments != direction.segments:
        raise InvalidParameterError("parameter and direction layouts differ")
    if not eta > 0:
        raise InvalidParameterError("learning rate must be positive")
    return params.with_data(params.data - eta * direction.data)
