"""Row-boundary-aware decay schedules.

A flattened h x w token grid visits a row boundary every ``width``
steps. The schedule maps per-position base decay vectors to spatially
aware ones: at 1-based positions t with t mod width == 0 (the last token
of a row) the decay is overridden so the running state is carried intact
into the next row; everywhere else it is the base decay unchanged.
Equivalently, in log space the override multiplies log(decay) by an
indicator that is 0 exactly at boundaries.

Construction is differentiable when the base tensor is tracked: the
override is a constant mask, so gradients flow to the base decay at
non-boundary positions and are blocked at boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError
from .numerics import Tensor

__all__ = [
    "CLAMP_FLOOR",
    "CLAMP_CEIL",
    "SpatialDecaySchedule",
    "boundary_positions",
    "boundary_mask",
    "build_schedule",
    "verify_logspace_equivalence",
]

# Decay factors produced from a sigmoid are clipped into [CLAMP_FLOOR,
# CLAMP_CEIL]: the floor keeps log(decay) finite, the ceiling keeps a
# saturated gate from freezing the state at exactly 1.
CLAMP_FLOOR = 1e-6
CLAMP_CEIL = 1.0 - 1e-6

_BOUNDARY_VALUES = {"retain": 1.0, "reset": CLAMP_FLOOR}


@dataclass
class SpatialDecaySchedule:
    """Base and boundary-overridden decay vectors for one sequence."""

    width: int
    length: int
    base: Tensor
    spatial: Tensor
    boundary_positions: list[int]


def boundary_positions(length: int, width: int) -> list[int]:
    """1-based positions that end a grid row: {width, 2*width, ...} up to length."""
    if width < 1:
        raise ConfigError(f"row width must be >= 1, got {width}")
    return list(range(width, length + 1, width))


def boundary_mask(length: int, width: int) -> np.ndarray:
    """Float vector over positions: 0.0 at row boundaries, 1.0 elsewhere."""
    mask = np.ones(length)
    for t in boundary_positions(length, width):
        mask[t - 1] = 0.0
    return mask


def build_schedule(base_decay: Tensor, width: int,
                   boundary_mode: str = "retain") -> SpatialDecaySchedule:
    """Construct the spatially aware schedule for an N x d_k base decay.

    ``boundary_mode`` "retain" (the default) overrides the boundary decay
    to 1 so the state survives the row transition intact; "reset" is the
    experimental alternative that overrides it to the clamp floor,
    flushing the state instead.
    """
    if width < 1:
        raise ConfigError(f"row width must be >= 1, got {width}")
    if boundary_mode not in _BOUNDARY_VALUES:
        raise ConfigError(f"unknown boundary mode {boundary_mode!r}")
    if not isinstance(base_decay, Tensor) or base_decay.ndim != 2:
        raise ConfigError(
            f"base decay must be an N x d_k tensor, got shape "
            f"{getattr(base_decay, 'shape', None)}")
    d = base_decay.data
    if not (np.all(d > 0.0) and np.all(d <= 1.0)):
        raise ContractError(
            f"base decay entries must lie in (0, 1]; got min={d.min():.3g} max={d.max():.3g}")
    n, dk = base_decay.shape
    mask_vec = boundary_mask(n, width)
    mask = np.repeat(mask_vec[:, None], dk, axis=1)
    override = _BOUNDARY_VALUES[boundary_mode] * (1.0 - mask)
    spatial = nx.add(nx.mul(base_decay, nx.tensor(mask)), nx.tensor(override))
    return SpatialDecaySchedule(
        width=width,
        length=n,
        base=base_decay,
        spatial=spatial,
        boundary_positions=boundary_positions(n, width),
    )


def verify_logspace_equivalence(schedule: SpatialDecaySchedule,
                                tol: float = 1e-12) -> bool:
    """Check the branch-built spatial field against its log-space form.

    The override-to-1 construction and exp(log(base) * indicator) must
    agree elementwise within ``tol``; a schedule whose spatial field was
    tampered with fails. Only meaningful for the retain mode, where the
    boundary value is exactly 1 (log 0).
    """
    base = schedule.base.data
    indicator = boundary_mask(schedule.length, schedule.width)[:, None]
    logspace = np.exp(np.log(base) * indicator)
    return bool(np.max(np.abs(logspace - schedule.spatial.data)) <= tol)
