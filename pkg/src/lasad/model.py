"""The class-conditional autoregressive token-grid generator.

Architecture: a token embedding plus a class embedding (one extra row
serves as the unconditional null label), a stack of pre-norm residual
blocks (attention sublayer, then a SwiGLU MLP), a final RMS norm and an
untied output head. The class embedding occupies input slot 0; image
token x_t occupies slot t, so the logits at slot t predict x_{t+1} from
the label and tokens before it.

Attention sublayers come in several kinds. The spatially aware decay
kind ("lasad") ties the key to 1 - decay and holds the running state
across grid-row boundaries; "hgrn2_shared" is the same scan without the
boundary override, which is exactly the ablation pair. Plain ("none"),
constant-decay and data-dependent-decay kinds and a quadratic softmax
kind (with rotary phases) round out the family; "hybrid" places one
softmax layer in the middle of an otherwise spatially aware stack.

Decoding is incremental: each linear layer carries a fixed-size
d_k x d_v state per head, the (optional) softmax layer appends to a
key/value cache, and the prefix is never re-run.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import numerics as nx
from .data import TokenGrid
from .errors import ConfigError, DivergenceError, InputError, NonFiniteError
from .numerics import Tensor
from .optim import AdamW, OptimizerConfig
from .spatial_decay import CLAMP_CEIL, CLAMP_FLOOR, boundary_mask

__all__ = [
    "ModelConfig",
    "PRESETS",
    "preset_config",
    "param_count",
    "Model",
    "DecodeSession",
    "train",
    "TraceRow",
]

VARIANTS = ("none", "constant", "data_dependent", "hgrn2_shared", "lasad",
            "softmax", "hybrid")
RMS_EPS = 1e-6
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    hidden: int
    heads: int
    vocab: int
    grid_width: int
    grid_height: int
    classes: int
    attention_variant: str = "lasad"
    cfg_dropout: float = 0.1
    decay_constant: float = 0.96

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.hidden < 1 or self.heads < 1 or self.hidden % self.heads:
            raise ConfigError(
                f"hidden ({self.hidden}) must be a positive multiple of heads ({self.heads})")
        if self.head_dim % 2:
            raise ConfigError(f"head dim must be even for rotary phases, got {self.head_dim}")
        if self.vocab < 2:
            raise ConfigError(f"vocab must be >= 2, got {self.vocab}")
        if self.grid_width < 1 or self.grid_height < 1:
            raise ConfigError(
                f"grid dims must be >= 1, got {self.grid_height}x{self.grid_width}")
        if self.classes < 1:
            raise ConfigError(f"classes must be >= 1, got {self.classes}")
        if self.attention_variant not in VARIANTS:
            raise ConfigError(
                f"unknown attention variant {self.attention_variant!r}; choose from {VARIANTS}")
        if not 0.0 <= self.cfg_dropout <= 1.0:
            raise ConfigError(f"cfg_dropout must lie in [0, 1], got {self.cfg_dropout}")
        if not 0.0 < self.decay_constant <= 1.0:
            raise ConfigError(f"decay_constant must lie in (0, 1], got {self.decay_constant}")

    @property
    def sequence_length(self) -> int:
        return self.grid_width * self.grid_height

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def mlp_dim(self) -> int:
        return round(self.hidden * 8 / 3)

    @property
    def null_label(self) -> int:
        return self.classes

    def layer_kinds(self) -> list[str]:
        if self.attention_variant == "softmax":
            return ["softmax"] * self.layers
        if self.attention_variant == "hybrid":
            kinds = ["lasad"] * self.layers
            kinds[self.layers // 2] = "softmax"
            return kinds
        return [self.attention_variant] * self.layers


PRESETS = {
    "nano": dict(layers=2, hidden=64, heads=2),
    "micro": dict(layers=4, hidden=128, heads=4),
    "B": dict(layers=12, hidden=768, heads=12),
    "L": dict(layers=24, hidden=1024, heads=16),
    "XL": dict(layers=36, hidden=1280, heads=20),
    "XXL": dict(layers=48, hidden=1536, heads=24),
}

_PAPER_SCALE_DEFAULTS = dict(vocab=16384, grid_width=16, grid_height=16, classes=1000)


def preset_config(name: str, **overrides) -> ModelConfig:
    """A named size preset; B/L/XL/XXL default to the 16x16, 16384-vocab,
    1000-class setting, the small presets require explicit task dims."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    args = dict(PRESETS[name])
    if name in ("B", "L", "XL", "XXL"):
        for k, v in _PAPER_SCALE_DEFAULTS.items():
            args.setdefault(k, v)
    args.update(overrides)
    return ModelConfig(**args)


def _layer_param_shapes(cfg: ModelConfig, kind: str) -> dict[str, tuple[int, ...]]:
    d, m, dh = cfg.hidden, cfg.mlp_dim, cfg.head_dim
    shapes: dict[str, tuple[int, ...]] = {
        "attn_norm": (d,),
        "wq": (d, d),
        "wv": (d, d),
        "wo": (d, d),
        "mlp_norm": (d,),
        "w1": (d, m),
        "w3": (d, m),
        "w2": (m, d),
    }
    if kind == "softmax":
        shapes["wk"] = (d, d)
        return shapes
    shapes["out_gain"] = (dh,)
    if kind in ("none", "constant"):
        shapes["wk"] = (d, d)
    elif kind == "data_dependent":
        shapes["wk"] = (d, d)
        shapes["wg"] = (d, d)
        shapes["g_bias"] = (d,)
    else:  # hgrn2_shared / lasad: key tied to the gate
        shapes["wg"] = (d, d)
        shapes["g_bias"] = (d,)
    return shapes


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.hidden
    shapes: dict[str, tuple[int, ...]] = {
        "tok_embed": (cfg.vocab, d),
        "cls_embed": (cfg.classes + 1, d),
    }
    for i, kind in enumerate(cfg.layer_kinds()):
        for name, shape in _layer_param_shapes(cfg, kind).items():
            shapes[f"layers.{i}.{name}"] = shape
    shapes["final_norm"] = (d,)
    shapes["head"] = (d, cfg.vocab)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    """Analytic parameter count implied by a config (no allocation)."""
    return sum(int(np.prod(s)) for s in _param_shapes(cfg).values())


def _gate_bias_init(cfg: ModelConfig) -> np.ndarray:
    """Spread initial decay rates across channels, tiled per head.

    sigmoid(bias) spans roughly [0.5, 0.97] within each head, giving the
    scan a multi-timescale memory basis from the first step.
    """
    target = np.linspace(0.5, 0.97, cfg.head_dim)
    lam = np.tile(target, cfg.heads)
    return np.log(lam / (1.0 - lam))


def _slot_boundary_mask(slots: int, width: int) -> np.ndarray:
    """Boundary mask over model input slots.

    Slot 0 holds the class token and never counts as a boundary; slot j
    (j >= 1) holds image token x_j, so it is a row boundary exactly when
    j mod width == 0.
    """
    return np.concatenate(([1.0], boundary_mask(slots - 1, width))) if slots > 1 \
        else np.ones(1)


class Model:
    """Parameters plus the forward/loss/decode machinery for one config."""

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        for name, shape in _param_shapes(config).items():
            base = name.rsplit(".", 1)[-1]
            if base in ("attn_norm", "mlp_norm", "final_norm", "out_gain"):
                self.params[name] = nx.ones(shape, requires_grad=True)
            elif base == "g_bias":
                self.params[name] = nx.tensor(_gate_bias_init(config), requires_grad=True)
            else:
                self.params[name] = nx.randn(shape, rng, std=INIT_STD, requires_grad=True)

    # -- parameter plumbing -------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def _p(self, layer: int, name: str) -> Tensor:
        return self.params[f"layers.{layer}.{name}"]

    # -- forward ------------------------------------------------------------

    def _heads(self, flat: Tensor, b: int, n: int) -> Tensor:
        cfg = self.config
        return nx.permute(nx.reshape(flat, (b, n, cfg.heads, cfg.head_dim)), (0, 2, 1, 3))

    def _merge(self, o: Tensor, b: int, n: int) -> Tensor:
        cfg = self.config
        return nx.reshape(nx.permute(o, (0, 2, 1, 3)), (b * n, cfg.hidden))

    def _gate(self, layer: int, flat: Tensor) -> Tensor:
        raw = nx.add_bias(nx.matmul(flat, self._p(layer, "wg")), self._p(layer, "g_bias"))
        return nx.clamp(nx.sigmoid(raw), CLAMP_FLOOR, CLAMP_CEIL)

    def _attn(self, layer: int, kind: str, x: Tensor, b: int, n: int) -> Tensor:
        cfg = self.config
        flat = nx.reshape(x, (b * n, cfg.hidden))
        if kind == "softmax":
            q = self._heads(nx.matmul(flat, self._p(layer, "wq")), b, n)
            k = self._heads(nx.matmul(flat, self._p(layer, "wk")), b, n)
            v = self._heads(nx.matmul(flat, self._p(layer, "wv")), b, n)
            q, k = nx.rope(q), nx.rope(k)
            scores = nx.scale(nx.bmm(q, nx.permute(k, (0, 1, 3, 2))),
                              1.0 / math.sqrt(cfg.head_dim))
            o = nx.bmm(nx.softmax_rows(scores, causal=True), v)
            return nx.matmul(self._merge(o, b, n), self._p(layer, "wo"))

        qp = nx.matmul(flat, self._p(layer, "wq"))
        v = nx.matmul(flat, self._p(layer, "wv"))
        if kind == "none":
            q = nx.elu1(qp)
            k = nx.elu1(nx.matmul(flat, self._p(layer, "wk")))
            decay = nx.ones((b * n, cfg.hidden))
        elif kind == "constant":
            q = qp
            k = nx.matmul(flat, self._p(layer, "wk"))
            decay = nx.full((b * n, cfg.hidden), cfg.decay_constant)
        elif kind == "data_dependent":
            q = qp
            k = nx.matmul(flat, self._p(layer, "wk"))
            decay = self._gate(layer, flat)
        else:  # hgrn2_shared / lasad
            q = nx.silu(qp)
            decay = self._gate(layer, flat)
            k = nx.sub(1.0, decay)
        qh, kh, vh = (self._heads(t, b, n) for t in (q, k, v))
        dh = self._heads(decay, b, n)
        if kind == "lasad":
            mask = _slot_boundary_mask(n, cfg.grid_width)[None, None, :, None]
            mask = np.broadcast_to(mask, dh.shape).copy()
            dh = nx.add(nx.mul(dh, nx.tensor(mask)), nx.tensor(1.0 - mask))
        o = nx.decay_scan(qh, kh, vh, dh)
        o = nx.rms_norm(o, self._p(layer, "out_gain"), eps=RMS_EPS)
        return nx.matmul(self._merge(o, b, n), self._p(layer, "wo"))

    def _mlp(self, layer: int, x: Tensor, b: int, n: int) -> Tensor:
        cfg = self.config
        flat = nx.reshape(x, (b * n, cfg.hidden))
        gate = nx.silu(nx.matmul(flat, self._p(layer, "w1")))
        h = nx.mul(gate, nx.matmul(flat, self._p(layer, "w3")))
        return nx.matmul(h, self._p(layer, "w2"))

    def _forward_slots(self, tokens: np.ndarray, labels: np.ndarray) -> Tensor:
        """Logits (B, T+1, V) for input slots [label, x_1 .. x_T]."""
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        b, t = tokens.shape
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
            raise InputError(f"token id out of range [0, {cfg.vocab})")
        if labels.min() < 0 or labels.max() > cfg.null_label:
            raise InputError(f"label out of range [0, {cfg.null_label}]")
        n = t + 1
        cls = nx.reshape(nx.gather_rows(self.params["cls_embed"], labels), (b, 1, cfg.hidden))
        if t:
            tok = nx.reshape(nx.gather_rows(self.params["tok_embed"], tokens.reshape(-1)),
                             (b, t, cfg.hidden))
            x = nx.concat(cls, tok, axis=1)
        else:
            x = cls
        for i, kind in enumerate(self.config.layer_kinds()):
            h = nx.rms_norm(x, self._p(i, "attn_norm"), eps=RMS_EPS)
            x = nx.add(x, nx.reshape(self._attn(i, kind, h, b, n), x.shape))
            h = nx.rms_norm(x, self._p(i, "mlp_norm"), eps=RMS_EPS)
            x = nx.add(x, nx.reshape(self._mlp(i, h, b, n), x.shape))
        x = nx.rms_norm(x, self.params["final_norm"], eps=RMS_EPS)
        logits = nx.matmul(nx.reshape(x, (b * n, cfg.hidden)), self.params["head"])
        return nx.reshape(logits, (b, n, cfg.vocab))

    def forward(self, sequence, label: int | None) -> Tensor:
        """Logits for one sequence prefix under a class label.

        ``sequence`` holds up to N image tokens; when the full N are
        given the last is dropped (it is never an input). Row j of the
        result predicts x_{j+1} from the label and x_1 .. x_j. ``label``
        None means the unconditional null label.
        """
        cfg = self.config
        seq = np.asarray(sequence, dtype=np.int64).reshape(-1)
        if seq.size > cfg.sequence_length:
            raise InputError(
                f"sequence length {seq.size} exceeds the configured {cfg.sequence_length}")
        if seq.size == cfg.sequence_length:
            seq = seq[:-1]
        lab = cfg.null_label if label is None else int(label)
        if not 0 <= lab <= cfg.null_label:
            raise InputError(f"label {label} out of range [0, {cfg.classes})")
        logits = self._forward_slots(seq[None, :], np.array([lab]))
        return nx.reshape(logits, (seq.size + 1, cfg.vocab))

    # -- losses -------------------------------------------------------------

    def loss_batch(self, tokens: np.ndarray, labels: np.ndarray) -> Tensor:
        """Mean next-token cross-entropy over a (B, N) token batch."""
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] != cfg.sequence_length:
            raise InputError(
                f"token batch must be (B, {cfg.sequence_length}), got {tokens.shape}")
        logits = self._forward_slots(tokens[:, :-1], labels)
        flat = nx.reshape(logits, (tokens.size, cfg.vocab))
        return nx.cross_entropy_mean(flat, tokens.reshape(-1))

    def loss(self, grid: TokenGrid, rng: np.random.Generator | None = None) -> Tensor:
        """Next-token cross-entropy for one grid.

        Pass a generator to enable training-time label dropout: with
        probability cfg_dropout the class label is swapped for the null
        label before the forward pass.
        """
        cfg = self.config
        if grid.tokens.shape != (cfg.grid_height, cfg.grid_width):
            raise InputError(
                f"grid shape {grid.tokens.shape} does not match config "
                f"{cfg.grid_height}x{cfg.grid_width}")
        label = int(grid.label)
        if rng is not None and cfg.cfg_dropout > 0 and rng.random() < cfg.cfg_dropout:
            label = cfg.null_label
        return self.loss_batch(grid.flat()[None, :], np.array([label]))

    # -- sampling -----------------------------------------------------------

    def sample(self, label: int, cfg_scale: float = 1.0, temperature: float = 1.0,
               top_k: int = 0, seed: int = 0) -> TokenGrid:
        """Autoregressively decode one grid under classifier-free guidance.

        Guided logits are uncond + cfg_scale * (cond - uncond); scale 0
        is pure unconditional and scale 1 pure conditional (both exact,
        with the unused stream never run). Decoding is recurrent: layer
        states advance token by token and the prefix is never re-run.
        """
        cfg = self.config
        if not 0 <= int(label) < cfg.classes:
            raise InputError(f"label {label} out of range [0, {cfg.classes})")
        if cfg_scale < 0:
            raise InputError(f"cfg scale must be >= 0, got {cfg_scale}")
        rng = np.random.default_rng(seed)
        need_cond = cfg_scale != 0.0
        need_unc = cfg_scale != 1.0
        cond = DecodeSession(self) if need_cond else None
        unc = DecodeSession(self) if need_unc else None
        lc = cond.start(int(label)) if cond else None
        lu = unc.start(None) if unc else None
        tokens = np.empty(cfg.sequence_length, dtype=np.int64)
        for t in range(cfg.sequence_length):
            if cfg_scale == 1.0:
                guided = lc
            elif cfg_scale == 0.0:
                guided = lu
            else:
                guided = lu + cfg_scale * (lc - lu)
            tok = _pick_token(guided, temperature, top_k, cfg.vocab, rng)
            tokens[t] = tok
            if t + 1 < cfg.sequence_length:
                lc = cond.feed(tok) if cond else None
                lu = unc.feed(tok) if unc else None
        return TokenGrid(tokens=tokens.reshape(cfg.grid_height, cfg.grid_width),
                         label=int(label))


def _pick_token(logits: np.ndarray, temperature: float, top_k: int,
                vocab: int, rng: np.random.Generator) -> int:
    if top_k == 1 or temperature <= 0.0:
        return int(np.argmax(logits))
    z = logits / temperature
    if top_k > 0:
        keep = np.argsort(z)[-top_k:]
        masked = np.full_like(z, -np.inf)
        masked[keep] = z[keep]
        z = masked
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(vocab, p=p))


def _rms_np(x: np.ndarray, gain: np.ndarray, eps: float = RMS_EPS) -> np.ndarray:
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * gain / r


class DecodeSession:
    """Incremental single-sequence decoder over a model's parameters.

    Linear layers keep one d_k x d_v state per head; a softmax layer
    appends to a key/value cache. Math mirrors the batched forward pass
    (the decode-equivalence check pins the two paths together).
    """

    def __init__(self, model: Model):
        self.model = model
        cfg = model.config
        self.kinds = cfg.layer_kinds()
        self.states: list = []
        for kind in self.kinds:
            if kind == "softmax":
                self.states.append({"k": [], "v": []})
            else:
                self.states.append(np.zeros((cfg.heads, cfg.head_dim, cfg.head_dim)))
        self.slot = -1

    def start(self, label: int | None) -> np.ndarray:
        """Feed the class slot; returns the logits that predict x_1."""
        cfg = self.model.config
        lab = cfg.null_label if label is None else int(label)
        return self._step(self.model.params["cls_embed"].data[lab])

    def feed(self, token: int) -> np.ndarray:
        """Feed one sampled image token; returns the next logits row."""
        cfg = self.model.config
        if not 0 <= int(token) < cfg.vocab:
            raise InputError(f"token id {token} out of range [0, {cfg.vocab})")
        return self._step(self.model.params["tok_embed"].data[int(token)])

    def _step(self, emb: np.ndarray) -> np.ndarray:
        m, cfg = self.model, self.model.config
        self.slot += 1
        h_count, dh = cfg.heads, cfg.head_dim
        x = emb.copy()
        for i, kind in enumerate(self.kinds):
            p = lambda name: m.params[f"layers.{i}.{name}"].data
            h = _rms_np(x, p("attn_norm"))
            if kind == "softmax":
                q = (h @ p("wq")).reshape(h_count, dh)
                k = (h @ p("wk")).reshape(h_count, dh)
                v = (h @ p("wv")).reshape(h_count, dh)
                cos, sin = nx._rope_tables(1, dh, self.slot, 10000.0)
                q, k = _rope_np(q, cos, sin), _rope_np(k, cos, sin)
                cache = self.states[i]
                cache["k"].append(k)
                cache["v"].append(v)
                ks = np.stack(cache["k"])   # (t+1, H, dh)
                vs = np.stack(cache["v"])
                scores = np.einsum("hd,thd->ht", q, ks) / math.sqrt(dh)
                scores -= scores.max(axis=1, keepdims=True)
                w = np.exp(scores)
                w /= w.sum(axis=1, keepdims=True)
                o = np.einsum("ht,thd->hd", w, vs)
            else:
                qp = (h @ p("wq")).reshape(h_count, dh)
                v = (h @ p("wv")).reshape(h_count, dh)
                if kind == "none":
                    q = _elu1_np(qp)
                    k = _elu1_np((h @ p("wk")).reshape(h_count, dh))
                    decay = np.ones((h_count, dh))
                elif kind == "constant":
                    q = qp
                    k = (h @ p("wk")).reshape(h_count, dh)
                    decay = np.full((h_count, dh), cfg.decay_constant)
                elif kind == "data_dependent":
                    q = qp
                    k = (h @ p("wk")).reshape(h_count, dh)
                    decay = np.clip(_sigmoid_np(h @ p("wg") + p("g_bias")),
                                    CLAMP_FLOOR, CLAMP_CEIL).reshape(h_count, dh)
                else:
                    q = _silu_np(qp)
                    decay = np.clip(_sigmoid_np(h @ p("wg") + p("g_bias")),
                                    CLAMP_FLOOR, CLAMP_CEIL).reshape(h_count, dh)
                    k = 1.0 - decay
                eff = decay
                if kind == "lasad" and self.slot >= 1 and self.slot % cfg.grid_width == 0:
                    eff = np.ones_like(decay)
                s = self.states[i]
                s *= eff[:, :, None]
                s += k[:, :, None] * v[:, None, :]
                o = np.einsum("hd,hdv->hv", q, s)
                o = _rms_np(o, p("out_gain"))
            x = x + o.reshape(cfg.hidden) @ p("wo")
            h = _rms_np(x, p("mlp_norm"))
            x = x + (_silu_np(h @ p("w1")) * (h @ p("w3"))) @ p("w2")
        x = _rms_np(x, m.params["final_norm"].data)
        logits = x @ m.params["head"].data
        if not np.isfinite(logits).all():
            raise NonFiniteError("decode step produced non-finite logits")
        return logits


def _sigmoid_np(x):
    return nx._sigmoid_stable(np.asarray(x, dtype=np.float64))


def _silu_np(x):
    return x * _sigmoid_np(x)


def _elu1_np(x):
    return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))


def _rope_np(x, cos, sin):
    out = np.empty_like(x)
    xe, xo = x[..., 0::2], x[..., 1::2]
    out[..., 0::2] = xe * cos[0] - xo * sin[0]
    out[..., 1::2] = xe * sin[0] + xo * cos[0]
    return out


# ---------------------------------------------------------------------------
# training

@dataclass
class TraceRow:
    step: int
    loss: float
    lr: float
    seconds: float


def _dataset_grid(dataset, index: int) -> TokenGrid:
    from .data import SyntheticSpec, grid_at
    if isinstance(dataset, SyntheticSpec):
        return grid_at(dataset, index)
    return dataset[index]


def _dataset_len(dataset) -> int:
    from .data import SyntheticSpec
    if isinstance(dataset, SyntheticSpec):
        return dataset.count
    return len(dataset)


def train(model: Model, dataset, opt_cfg: OptimizerConfig = OptimizerConfig(),
          steps: int = 100, batch: int = 8, seed: int = 0,
          optimizer: AdamW | None = None, start_step: int = 0,
          on_step=None) -> tuple[AdamW, list[TraceRow]]:
    """Run AdamW steps; returns the optimizer (for checkpointing) and the
    per-step trace.

    Batch composition and label dropout derive from (seed, global step),
    so a run resumed from a checkpoint replays exactly the batches the
    uninterrupted run would have seen. A non-finite loss aborts with a
    diagnostic rather than continuing.
    """
    cfg = model.config
    n_data = _dataset_len(dataset)
    if n_data < 1:
        raise ConfigError("training dataset is empty")
    opt = optimizer or AdamW(model.named_parameters(), opt_cfg)
    trace: list[TraceRow] = []
    for j in range(steps):
        gstep = start_step + j + 1
        t0 = time.perf_counter()
        rng = np.random.default_rng([seed, gstep])
        idx = rng.integers(0, n_data, size=batch)
        grids = [_dataset_grid(dataset, int(i)) for i in idx]
        tokens = np.stack([g.flat() for g in grids])
        labels = np.array([g.label for g in grids], dtype=np.int64)
        if cfg.cfg_dropout > 0:
            drop = rng.random(batch) < cfg.cfg_dropout
            labels = np.where(drop, cfg.null_label, labels)
        try:
            loss = model.loss_batch(tokens, labels)
            val = loss.item()
            if not math.isfinite(val):
                raise NonFiniteError("loss is non-finite")
            opt.zero_grad()
            nx.backward(loss)
            opt.step()
        except NonFiniteError as e:
            raise DivergenceError(f"training diverged at step {gstep}: {e}") from e
        trace.append(TraceRow(step=gstep, loss=val, lr=opt_cfg.lr,
                              seconds=time.perf_counter() - t0))
        if on_step is not None:
            on_step(trace[-1])
    return opt, trace


def eval_loss(model: Model, grids: list[TokenGrid], batch: int = 32) -> float:
    """Mean labeled cross-entropy over a fixed grid list (no dropout)."""
    total = 0.0
    count = 0
    with nx.no_grad():
        for start in range(0, len(grids), batch):
            part = grids[start:start + batch]
            tokens = np.stack([g.flat() for g in part])
            labels = np.array([g.label for g in part], dtype=np.int64)
            total += model.loss_batch(tokens, labels).item() * len(part)
            count += len(part)
    return total / count
