"""Synthetic token-grid tasks and the toy grayscale quantizer.

Each task isolates a 2-D dependency that a flattened 1-D model must
recover: within-row copying, cross-row copying at a class-determined
shift, column-determined tokens, and 2x2 uniform blocks. Every task is
deterministic given (spec, index) and admits an exact Bayes-optimal
predictor, so the achievable loss floor is known analytically.

Grid files are one grid per line: ``label: t1 t2 ... tN`` in ASCII
decimal, raster order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError

__all__ = [
    "TokenGrid",
    "SyntheticSpec",
    "TASKS",
    "grid_at",
    "generate",
    "bayes_floor",
    "bayes_ce",
    "rule_compliance",
    "quantize_image",
    "dequantize_grid",
    "write_grids",
    "read_grids",
    "write_pgm",
]

TASKS = ("row_copy", "row_shift", "column_stripe", "blockworld")


@dataclass
class TokenGrid:
    """An h x w grid of token ids plus its class label."""

    tokens: np.ndarray  # (height, width) ints
    label: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2:
            raise InputError(f"token grid must be 2-D, got shape {self.tokens.shape}")

    @property
    def height(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    def flat(self) -> np.ndarray:
        """Raster-order 1-D view of the tokens."""
        return self.tokens.reshape(-1)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a deterministic synthetic grid stream."""

    task: str
    grid_height: int
    grid_width: int
    vocab: int
    classes: int
    count: int
    seed: int

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.grid_height < 1 or self.grid_width < 1:
            raise ConfigError(f"grid dims must be >= 1, got {self.grid_height}x{self.grid_width}")
        if self.vocab < 2:
            raise ConfigError(f"vocab must be >= 2, got {self.vocab}")
        if self.classes < 1:
            raise ConfigError(f"classes must be >= 1, got {self.classes}")
        if self.count < 0:
            raise ConfigError(f"count must be >= 0, got {self.count}")
        if self.task == "blockworld" and (self.grid_height % 2 or self.grid_width % 2):
            raise ConfigError(
                f"blockworld needs even grid dims, got {self.grid_height}x{self.grid_width}")


def _shift_for(label: int, width: int) -> int:
    return label % width


def grid_at(spec: SyntheticSpec, index: int) -> TokenGrid:
    """The index-th grid of the stream; a pure function of (spec, index)."""
    rng = np.random.default_rng([spec.seed, index])
    h, w, v = spec.grid_height, spec.grid_width, spec.vocab
    label = int(rng.integers(spec.classes))
    if spec.task == "row_copy":
        leaders = rng.integers(v, size=h)
        tokens = np.repeat(leaders[:, None], w, axis=1)
    elif spec.task == "row_shift":
        tokens = np.empty((h, w), dtype=np.int64)
        tokens[0] = rng.integers(v, size=w)
        shift = _shift_for(label, w)
        for r in range(1, h):
            tokens[r] = np.roll(tokens[r - 1], shift)
    elif spec.task == "column_stripe":
        stripe = rng.integers(v, size=w)
        tokens = np.repeat(stripe[None, :], h, axis=0)
    else:  # blockworld
        leaders = rng.integers(v, size=(h // 2, w // 2))
        tokens = np.kron(leaders, np.ones((2, 2), dtype=np.int64))
    return TokenGrid(tokens=tokens, label=label)


def generate(spec: SyntheticSpec):
    """Yield the spec's grids in order (deterministic for equal seeds)."""
    for i in range(spec.count):
        yield grid_at(spec, i)


def _free_positions(spec: SyntheticSpec) -> int:
    """Number of raster positions the Bayes predictor cannot determine."""
    h, w = spec.grid_height, spec.grid_width
    if spec.task == "row_copy":
        return h  # each row's first token
    if spec.task in ("row_shift", "column_stripe"):
        return w  # the first row
    return (h // 2) * (w // 2)  # blockworld: top-left of each block


def bayes_floor(spec: SyntheticSpec) -> float:
    """Exact mean per-position cross-entropy of the Bayes predictor.

    Undetermined positions are uniform over the vocab (ln V each); every
    other position is a deterministic function of the visible prefix and
    the label, so it contributes zero.
    """
    n = spec.grid_height * spec.grid_width
    return math.log(spec.vocab) * _free_positions(spec) / n


def _bayes_distributions(spec: SyntheticSpec, grid: TokenGrid) -> np.ndarray:
    """Per-position predictive distributions of the Bayes predictor.

    Position t's distribution conditions on tokens < t and the label.
    """
    h, w, v = spec.grid_height, spec.grid_width, spec.vocab
    flat = grid.flat()
    n = flat.size
    probs = np.full((n, v), 1.0 / v)
    for t in range(n):
        r, c = divmod(t, w)
        det: int | None = None
        if spec.task == "row_copy":
            if c > 0:
                det = int(flat[t - c])  # the row's first token
        elif spec.task == "row_shift":
            if r > 0:
                shift = _shift_for(grid.label, w)
                det = int(grid.tokens[r - 1, (c - shift) % w])
        elif spec.task == "column_stripe":
            if r > 0:
                det = int(flat[t - w])
        else:  # blockworld
            if r % 2 or c % 2:
                det = int(grid.tokens[r - r % 2, c - c % 2])
        if det is not None:
            probs[t] = 0.0
            probs[t, det] = 1.0
    return probs


def bayes_ce(spec: SyntheticSpec, grid: TokenGrid) -> float:
    """Mean cross-entropy of the Bayes predictor on one grid."""
    probs = _bayes_distributions(spec, grid)
    flat = grid.flat()
    p = probs[np.arange(flat.size), flat]
    if np.any(p <= 0):
        raise InputError("grid is inconsistent with its task's deterministic rule")
    return float(-np.log(p).mean())


def rule_compliance(spec: SyntheticSpec, grid: TokenGrid) -> float:
    """Fraction of rule-determined positions a grid actually satisfies.

    1.0 for grids drawn from the task; for sampled grids this measures
    how well a generator respects the task structure.
    """
    probs = _bayes_distributions(spec, grid)
    flat = grid.flat()
    determined = probs.max(axis=1) == 1.0
    if not determined.any():
        return 1.0
    hit = probs[np.arange(flat.size), flat] == 1.0
    return float(hit[determined].mean())


# ---------------------------------------------------------------------------
# toy quantizer

def quantize_image(pixels: np.ndarray, levels: int, patch: int,
                   label: int = 0) -> TokenGrid:
    """Mean-pool patch x patch blocks of a [0, 1] grayscale image, then
    uniformly quantize the means into ``levels`` bins.

    A deliberately trivial stand-in for a learned tokenizer; the
    round-trip error through :func:`dequantize_grid` is at most half a
    bin width per patch mean.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 2:
        raise InputError(f"expected a 2-D grayscale image, got shape {pixels.shape}")
    if patch < 1 or pixels.shape[0] % patch or pixels.shape[1] % patch:
        raise InputError(
            f"image dims {pixels.shape} are not divisible by patch size {patch}")
    if levels < 2:
        raise ConfigError(f"levels must be >= 2, got {levels}")
    h, w = pixels.shape[0] // patch, pixels.shape[1] // patch
    means = pixels.reshape(h, patch, w, patch).mean(axis=(1, 3))
    tokens = np.clip(np.floor(means * levels), 0, levels - 1).astype(np.int64)
    return TokenGrid(tokens=tokens, label=label)


def dequantize_grid(grid: TokenGrid, levels: int, patch: int = 1) -> np.ndarray:
    """Bin centers of the grid's tokens, upsampled back to pixel blocks."""
    centers = (grid.tokens + 0.5) / levels
    return np.kron(centers, np.ones((patch, patch)))


# ---------------------------------------------------------------------------
# file formats

def write_grids(path, grids) -> int:
    """Write grids one per line as ``label: t1 t2 ... tN``; returns the count."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for g in grids:
            toks = " ".join(str(int(t)) for t in g.flat())
            fh.write(f"{int(g.label)}: {toks}\n")
            count += 1
    return count


def read_grids(path, grid_height: int, grid_width: int) -> list[TokenGrid]:
    n = grid_height * grid_width
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                head, _, tail = line.partition(":")
                label = int(head)
                tokens = np.array([int(t) for t in tail.split()], dtype=np.int64)
            except ValueError as e:
                raise InputError(f"{path}:{lineno}: malformed grid line ({e})") from e
            if tokens.size != n:
                raise InputError(
                    f"{path}:{lineno}: expected {n} tokens for a "
                    f"{grid_height}x{grid_width} grid, got {tokens.size}")
            out.append(TokenGrid(tokens=tokens.reshape(grid_height, grid_width), label=label))
    return out


def write_pgm(path, pixels: np.ndarray) -> None:
    """Write a [0, 1] grayscale array as a binary PGM raster."""
    arr = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
