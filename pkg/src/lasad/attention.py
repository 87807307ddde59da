"""Attention mechanisms in two forms each: an efficient sequential or
chunked scan and a materialized quadratic oracle used to verify it.

All operations here work on per-head 2-D tensors (N x d_k queries/keys,
N x d_v values) and are pure functions of their inputs. The sequential
forms are differentiable through the shared scan primitive; the chunked
form and the quadratic oracle are forward-only verification/benchmark
paths.

Decay contract: a "none" scan uses decay 1 everywhere; decay-augmented
scans take per-step, per-channel factors in (0, 1]. The parameter-shared
family ties the key to the decay via k_t = 1 - decay_t, and the
spatially aware variant additionally overrides the decay to 1 at the
last token of each grid row (the key keeps using the raw decay).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, ShapeError, SingularNormalizerError
from .numerics import Tensor
from .spatial_decay import build_schedule

__all__ = [
    "AttentionInputs",
    "RecurrentState",
    "DecayVariant",
    "softmax_attention",
    "linear_attention_parallel",
    "linear_attention_recurrent",
    "decay_attention_recurrent",
    "hgrn2_recurrent",
    "lasad_recurrent",
    "lasad_chunked",
    "materialized_decay_oracle",
    "scan_step",
]

ORACLE_MAX_LEN = 256


@dataclass
class AttentionInputs:
    """Per-head query/key/value triple (queries already activated)."""

    q: Tensor
    k: Tensor
    v: Tensor

    def __post_init__(self):
        if self.q.ndim != 2 or self.k.ndim != 2 or self.v.ndim != 2:
            raise ShapeError(
                f"attention inputs must be 2-D, got q{self.q.shape} k{self.k.shape} v{self.v.shape}")
        if self.q.shape != self.k.shape or self.q.shape[0] != self.v.shape[0]:
            raise ShapeError(
                f"attention input shapes disagree: q{self.q.shape} k{self.k.shape} v{self.v.shape}")
        if self.q.shape[0] < 1:
            raise ShapeError("attention needs at least one position")
        for name, t in (("q", self.q), ("k", self.k), ("v", self.v)):
            if not np.isfinite(t.data).all():
                raise ContractError(f"attention input {name} contains non-finite values")

    @property
    def length(self) -> int:
        return self.q.shape[0]


@dataclass
class RecurrentState:
    """The d_k x d_v running state of a decayed scan plus its position.

    ``t`` counts processed steps (1-based); a fresh state is the zero
    matrix at t = 0.
    """

    s: Tensor
    t: int = 0

    @classmethod
    def fresh(cls, d_k: int, d_v: int) -> "RecurrentState":
        return cls(s=nx.zeros((d_k, d_v)), t=0)


@dataclass(frozen=True)
class DecayVariant:
    """Which decay family a scan uses.

    kind: one of "none", "constant", "data_dependent", "hgrn2_shared",
    "lasad". The constant kind carries its factor; the parameter-shared
    kinds derive the key as 1 - decay.
    """

    kind: str
    constant: float | None = None

    KINDS = ("none", "constant", "data_dependent", "hgrn2_shared", "lasad")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown decay variant {self.kind!r}")
        if self.kind == "constant":
            if self.constant is None or not (0.0 < self.constant <= 1.0):
                raise ConfigError(f"constant decay must lie in (0, 1], got {self.constant}")
        elif self.constant is not None:
            raise ConfigError(f"decay variant {self.kind!r} takes no constant")

    @property
    def shares_key(self) -> bool:
        return self.kind in ("hgrn2_shared", "lasad")


def _check_decay(decay: Tensor, shape, *, open_top: bool, what: str) -> None:
    if decay.shape != tuple(shape):
        raise ShapeError(f"{what} shape {decay.shape} does not match q/k shape {tuple(shape)}")
    d = decay.data
    top_ok = np.all(d < 1.0) if open_top else np.all(d <= 1.0)
    if not (np.all(d > 0.0) and top_ok):
        hi = "1)" if open_top else "1]"
        raise ContractError(f"{what} entries must lie in (0, {hi}; "
                            f"got min={d.min():.3g} max={d.max():.3g}")


def softmax_attention(inputs: AttentionInputs, causal: bool = True) -> Tensor:
    """Quadratic reference: softmax(q k^T / sqrt(d_k)) v with optional causal mask."""
    dk = inputs.q.shape[1]
    scores = nx.scale(nx.matmul(inputs.q, nx.permute(inputs.k, (1, 0))), 1.0 / np.sqrt(dk))
    weights = nx.softmax_rows(scores, causal=causal)
    return nx.matmul(weights, inputs.v)


_KERNELS = {
    "identity": lambda t: t,
    "elu1": nx.elu1,
}


def linear_attention_parallel(inputs: AttentionInputs, kernel="elu1",
                              norm: str = "rms", causal: bool = False,
                              eps: float = 1e-6) -> Tensor:
    """Kernelized attention in its materialized (non-scan) form.

    norm="delta" divides by the per-row sum of kernel scores (only the
    non-causal reference is supported; the sum must be nonzero).
    norm="rms" replaces the divisive normalizer with an RMS normalization
    of the raw mix, which is the form the model path uses. The causal
    variant masks future scores before mixing.
    """
    phi = _KERNELS[kernel] if isinstance(kernel, str) else kernel
    fq, fk = phi(inputs.q), phi(inputs.k)
    if norm == "delta":
        if causal:
            raise ConfigError("the divisive-normalizer form is a non-causal reference only")
        mix = nx.matmul(fq, nx.matmul(nx.permute(fk, (1, 0)), inputs.v))
        denom = fq.data @ fk.data.sum(axis=0)
        if np.any(denom == 0.0):
            raise SingularNormalizerError("a query row has zero kernel-score sum")
        return nx.mul(mix, nx.tensor((1.0 / denom)[:, None] * np.ones((1, inputs.v.shape[1]))))
    if norm != "rms":
        raise ConfigError(f"unknown normalization {norm!r}")
    if causal:
        n = inputs.length
        tri = nx.tensor(np.tril(np.ones((n, n))))
        scores = nx.mul(nx.matmul(fq, nx.permute(fk, (1, 0))), tri)
        mix = nx.matmul(scores, inputs.v)
    else:
        mix = nx.matmul(fq, nx.matmul(nx.permute(fk, (1, 0)), inputs.v))
    gain = nx.ones((inputs.v.shape[1],))
    return nx.rms_norm(mix, gain, eps=eps)


def linear_attention_recurrent(inputs: AttentionInputs) -> Tensor:
    """Causal scan without decay: state accumulates outer(k_t, v_t)."""
    dec = nx.ones(inputs.q.shape)
    return nx.decay_scan(inputs.q, inputs.k, inputs.v, dec)


def decay_attention_recurrent(inputs: AttentionInputs, decay: Tensor) -> Tensor:
    """Causal scan with per-step, per-channel state decay in (0, 1]."""
    _check_decay(decay, inputs.q.shape, open_top=False, what="decay")
    return nx.decay_scan(inputs.q, inputs.k, inputs.v, decay)


def hgrn2_recurrent(q: Tensor, v: Tensor, decay: Tensor) -> Tensor:
    """Parameter-shared decayed scan: the key is tied to 1 - decay."""
    _check_decay(decay, q.shape, open_top=True, what="decay")
    k = nx.sub(1.0, decay)
    return decay_attention_recurrent(AttentionInputs(q=q, k=k, v=v), decay)


def lasad_recurrent(q: Tensor, v: Tensor, decay: Tensor, width: int,
                    boundary_mode: str = "retain") -> Tensor:
    """Parameter-shared scan with spatially aware decay.

    The effective decay is overridden at the last token of each length
    ``width`` grid row (positions are 1-based, so at t with t mod width
    == 0). The key stays tied to the raw decay, 1 - decay, even at
    boundary positions. ``boundary_mode`` "retain" holds the state fully
    (override to 1); "reset" is the experimental alternative that flushes
    it (override to the clamp floor).
    """
    _check_decay(decay, q.shape, open_top=True, what="decay")
    schedule = build_schedule(decay, width, boundary_mode=boundary_mode)
    k = nx.sub(1.0, decay)
    return nx.decay_scan(q, k, v, schedule.spatial)


def scan_step(state: RecurrentState, q_t: Tensor, k_t: Tensor, v_t: Tensor,
              decay_t: Tensor) -> tuple[Tensor, RecurrentState]:
    """One decayed scan step for incremental decoding.

    Takes 1-D q_t/k_t/decay_t (d_k) and v_t (d_v); returns the step
    output (d_v) and the advanced state.
    """
    dk, dv = state.s.shape
    dmat = nx.matmul(nx.reshape(decay_t, (dk, 1)), nx.ones((1, dv)))
    update = nx.matmul(nx.reshape(k_t, (dk, 1)), nx.reshape(v_t, (1, dv)))
    s_new = nx.add(nx.mul(state.s, dmat), update)
    o = nx.matmul(nx.reshape(q_t, (1, dk)), s_new)
    return nx.reshape(o, (dv,)), RecurrentState(s=s_new, t=state.t + 1)


def lasad_chunked(q: Tensor, v: Tensor, decay: Tensor, width: int,
                  chunk: int, boundary_mode: str = "retain") -> Tensor:
    """Chunkwise evaluation of the spatially aware scan (forward only).

    Within each chunk the per-position cumulative decay products are
    materialized, giving an intra-chunk masked mix plus an inter-chunk
    read through the carried state; the per-position spatial decay makes
    row boundaries transparent to the chunk partition. Output matches
    the sequential scan to floating-point reassociation error.
    """
    if chunk < 1:
        raise ConfigError(f"chunk size must be >= 1, got {chunk}")
    _check_decay(decay, q.shape, open_top=True, what="decay")
    schedule = build_schedule(decay, width, boundary_mode=boundary_mode)
    qd = q.data
    vd = v.data
    kd = 1.0 - decay.data
    dd = schedule.spatial.data
    n, dk = qd.shape
    dv = vd.shape[1]
    out = np.empty((n, dv))
    state = np.zeros((dk, dv))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        c = stop - start
        qc, kc, vc, dc = qd[start:stop], kd[start:stop], vd[start:stop], dd[start:stop]
        # prod[i, j] = product of decays over steps j+1 .. i within the chunk
        prod = np.zeros((c, c, dk))
        for j in range(c):
            prod[j, j] = 1.0
            if j + 1 < c:
                prod[j + 1:, j] = np.cumprod(dc[j + 1:], axis=0)
        # cum[i] = product of decays over steps 1 .. i (state carry factor)
        cum = np.cumprod(dc, axis=0)
        inter = np.einsum("id,dv->iv", qc * cum, state)
        scores = np.einsum("ijd,jd->ij", qc[:, None, :] * prod, kc)
        scores = np.tril(scores)
        intra = scores @ vc
        out[start:stop] = inter + intra
        state = cum[-1][:, None] * state + np.einsum("jd,jv->dv", prod[-1] * kc, vc)
    return Tensor(out)


def materialized_decay_oracle(q: Tensor, k: Tensor, v: Tensor,
                              decay_effective: Tensor) -> Tensor:
    """Explicit O(N^2 d) evaluation of a decayed scan, for verification.

    o_t = sum_{j<=t} (q_t * a_{t,j}) . k_j  *  v_j, where a_{t,j} is the
    elementwise product of the effective decays at steps j+1 .. t (and
    a_{t,t} = 1). Refuses sequences longer than ORACLE_MAX_LEN; this
    path exists for tests, not for production use.
    """
    inputs = AttentionInputs(q=q, k=k, v=v)
    n, dk = q.shape
    if n > ORACLE_MAX_LEN:
        raise ConfigError(
            f"materialized oracle is capped at N={ORACLE_MAX_LEN} (got {n}); "
            "it exists for verification only")
    _check_decay(decay_effective, q.shape, open_top=False, what="effective decay")
    qd, kd, vd, dd = q.data, k.data, v.data, decay_effective.data
    out = np.zeros((n, vd.shape[1]))
    for t in range(n):
        a = np.ones(dk)
        for j in range(t, -1, -1):
            # a currently holds the decay product over steps j+1 .. t
            weight = float((qd[t] * a) @ kd[j])
            out[t] += weight * vd[j]
            if j > 0:
                a = a * dd[j]
    return Tensor(out)
