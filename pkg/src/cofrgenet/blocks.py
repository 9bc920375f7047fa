"""Token-mixing and feature-mixing blocks built from continued-fraction ladders.

Every block maps ``X`` of shape ``[..., l, p]`` to the same shape and treats
leading axes as independent sequences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cfcore import PoleGuard
from .ladders import (LadderConfig, LadderEnsemble, RangeTracker, augment, init_ladder_rows,
                      ladder_denominators)
from .module import Module, Parameter

ATTENTION_KINDS = ("baseline", "cattnu", "cattnm")
FFN_KINDS = ("baseline", "cffn")

# named model variants -> (attention kind, ffn kind)
VARIANTS = {
    "baseline": ("baseline", "baseline"),
    "cofrgenet-a": ("cattnm", "baseline"),
    "cofrgenet-f": ("baseline", "cffn"),
    "cofrgenet": ("cattnm", "cffn"),
    "cofrgenet-u": ("cattnu", "cffn"),
}


def csoftmax(scores) -> Tensor:
    """Causal softmax: row ``i`` is a distribution over columns ``0..i``."""
    return ad.causal_softmax(scores)


def _check_length(l: int, l_max: int) -> None:
    if l > l_max:
        raise ValueError(f"sequence length {l} exceeds l_max={l_max}")


class LayerNorm(Module):
    def __init__(self, p: int):
        self.gain = Parameter(np.ones(p))
        self.bias = Parameter(np.zeros(p))

    def forward(self, x):
        return ad.layer_norm(x, self.gain, self.bias)


class CAttnU(Module):
    """Transposed univariate ladders mixed by upper-triangular maps.

    Each of the ``p`` feature slices is a length-``l`` vector across positions.
    Position ``t`` owns one univariate ladder per ensemble with weights
    ``w_k[t]``; both ensembles feed row-vector products with upper-triangular
    ``U_1``, ``U_2`` (so output ``t`` sees positions ``<= t``), and the two
    results are multiplied element-wise.
    """

    def __init__(self, p: int, l_max: int, d: int, rng: np.random.Generator,
                 guard: PoleGuard = PoleGuard(), impl: str = "continuant"):
        self.p, self.l_max, self.d = p, l_max, d
        self.guard, self.impl = guard, impl
        self.w1 = [Parameter(np.ones(l_max), depth=k) for k in range(d + 1)]
        self.w2 = [Parameter(np.ones(l_max), depth=k) for k in range(d + 1)]
        mask = np.triu(np.ones((l_max, l_max)))
        mean = mask / np.arange(1, l_max + 1)[None, :]
        self.U1 = Parameter(mean + rng.normal(0.0, 0.02, (l_max, l_max)), mask=mask, decay=True)
        self.U2 = Parameter(mean + rng.normal(0.0, 0.02, (l_max, l_max)), mask=mask, decay=True)
        self.tracker1 = RangeTracker(l_max)
        self.tracker2 = RangeTracker(l_max)

    def _ensemble(self, xt: Tensor, w: list[Parameter], tracker: RangeTracker) -> Tensor:
        l = xt.shape[-1]
        ws = [wk[:l] for wk in w]
        a = ad.stack([xt * wk for wk in ws[1:]], axis=-1)
        z = tracker(ad.cf_layer(a, self.guard, impl=self.impl))
        return xt * ws[0] + z

    def forward(self, X: Tensor) -> Tensor:
        l = X.shape[-2]
        _check_length(l, self.l_max)
        xt = ad.transpose(X)
        y1 = self._ensemble(xt, self.w1, self.tracker1)
        y2 = self._ensemble(xt, self.w2, self.tracker2)
        o = ad.triu_matmul(y1, self.U1[:l, :l]) * ad.triu_matmul(y2, self.U2[:l, :l])
        return ad.transpose(o)


class CAttnM(Module):
    """Ladder-scored causal attention.

    Each token's ``L`` ladder outputs ``y_j = a_0 + f(W^(j) x)`` are mapped to
    per-position scores through ``F``, causally softmaxed and applied to the
    value projection ``X W_v``.
    """

    def __init__(self, p: int, l_max: int, L: int, d: int, rng: np.random.Generator,
                 guard: PoleGuard = PoleGuard(), impl: str = "continuant"):
        self.p, self.l_max, self.L, self.d = p, l_max, L, d
        self.guard, self.impl = guard, impl
        self.W = [Parameter(init_ladder_rows(rng, L, p, True, bias_value=0.0 if k == 0 else 1.0), depth=k)
                  for k in range(d + 1)]
        self.F = Parameter(rng.normal(0.0, 0.02, (L, l_max)), decay=True)
        self.Wv = Parameter(rng.normal(0.0, 0.02, (p, p)), decay=True)
        self.tracker = RangeTracker(L)

    def ladder_outputs(self, X: Tensor) -> Tensor:
        xa = augment(X)
        a0 = ad.matmul(xa, ad.transpose(self.W[0]))
        z = self.tracker(ad.cf_layer(ladder_denominators(xa, self.W[1:]), self.guard, impl=self.impl))
        return a0 + z

    def attention(self, X: Tensor) -> Tensor:
        l = X.shape[-2]
        _check_length(l, self.l_max)
        scores = ad.matmul(self.ladder_outputs(X), self.F[:, :l])
        return csoftmax(scores)

    def forward(self, X: Tensor) -> Tensor:
        return ad.matmul(self.attention(X), ad.matmul(X, self.Wv))


class Cffn(Module):
    """Gated width-``p`` representation fed to a ``p -> p`` ladder ensemble."""

    def __init__(self, p: int, L: int, d: int, rng: np.random.Generator,
                 guard: PoleGuard = PoleGuard(), impl: str = "continuant"):
        self.p = p
        self.Wg = Parameter(rng.normal(0.0, 0.02, (p, p)), decay=True)
        self.bg = Parameter(np.zeros(p))
        self.Wvv = Parameter(rng.normal(0.0, 0.02, (p, p)), decay=True)
        self.bv = Parameter(np.zeros(p))
        self.ensemble = LadderEnsemble(LadderConfig(p, p, L, d, guard), rng, impl=impl)

    def gate(self, X: Tensor) -> Tensor:
        return ad.silu(ad.matmul(X, self.Wg) + self.bg) * (ad.matmul(X, self.Wvv) + self.bv)

    def forward(self, X: Tensor) -> Tensor:
        return self.ensemble(self.gate(X))


class CausalSelfAttention(Module):
    def __init__(self, p: int, heads: int, rng: np.random.Generator):
        if p % heads:
            raise ValueError(f"p={p} is not divisible by heads={heads}")
        self.p, self.heads = p, heads
        for name in ("Wq", "Wk", "Wv", "Wo"):
            setattr(self, name, Parameter(rng.normal(0.0, 0.02, (p, p)), decay=True))
        for name in ("bq", "bk", "bv", "bo"):
            setattr(self, name, Parameter(np.zeros(p)))

    def forward(self, X: Tensor) -> Tensor:
        q = ad.matmul(X, self.Wq) + self.bq
        k = ad.matmul(X, self.Wk) + self.bk
        v = ad.matmul(X, self.Wv) + self.bv
        hd = self.p // self.heads
        outs = []
        for h in range(self.heads):
            sl = (Ellipsis, slice(h * hd, (h + 1) * hd))
            s = ad.matmul(q[sl], ad.transpose(k[sl])) * (1.0 / np.sqrt(hd))
            outs.append(ad.matmul(csoftmax(s), v[sl]))
        o = outs[0] if len(outs) == 1 else ad.concat(outs, axis=-1)
        return ad.matmul(o, self.Wo) + self.bo


class FFN(Module):
    def __init__(self, p: int, alpha: int, rng: np.random.Generator):
        self.W1 = Parameter(rng.normal(0.0, 0.02, (p, alpha * p)), decay=True)
        self.b1 = Parameter(np.zeros(alpha * p))
        self.W2 = Parameter(rng.normal(0.0, 0.02, (alpha * p, p)), decay=True)
        self.b2 = Parameter(np.zeros(p))

    def forward(self, X: Tensor) -> Tensor:
        return ad.matmul(ad.gelu(ad.matmul(X, self.W1) + self.b1), self.W2) + self.b2


def build_component(kind: str, *, p: int, l_max: int, L: int, d: int, alpha: int = 4, heads: int = 1,
                    rng: np.random.Generator, guard: PoleGuard = PoleGuard(),
                    impl: str = "continuant") -> Module:
    if kind == "attention":
        return CausalSelfAttention(p, heads, rng)
    if kind == "cattnu":
        return CAttnU(p, l_max, d, rng, guard, impl)
    if kind == "cattnm":
        return CAttnM(p, l_max, L, d, rng, guard, impl)
    if kind == "ffn":
        return FFN(p, alpha, rng)
    if kind == "cffn":
        return Cffn(p, L, d, rng, guard, impl)
    raise ValueError(f"unknown component kind {kind!r}")


@dataclass(frozen=True)
class BlockConfig:
    attention: str = "cattnm"
    ffn: str = "cffn"
    p: int = 64
    l_max: int = 64
    heads: int = 4
    alpha: int = 4
    L: int = 8
    d: int = 5
    guard: PoleGuard = field(default_factory=PoleGuard)
    impl: str = "continuant"

    def __post_init__(self):
        if self.attention not in ATTENTION_KINDS:
            raise ValueError(f"unknown attention variant {self.attention!r}; expected one of {ATTENTION_KINDS}")
        if self.ffn not in FFN_KINDS:
            raise ValueError(f"unknown ffn variant {self.ffn!r}; expected one of {FFN_KINDS}")

    @classmethod
    def from_variant(cls, variant: str, **kwargs) -> "BlockConfig":
        if variant not in VARIANTS:
            raise ValueError(f"unknown model variant {variant!r}; expected one of {sorted(VARIANTS)}")
        attention, ffn = VARIANTS[variant]
        return cls(attention=attention, ffn=ffn, **kwargs)


class Block(Module):
    """Pre-norm residual block: ``h = X + attn(norm(X))``, ``out = h + ffn(norm(h))``."""

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        self.cfg = cfg
        common = dict(p=cfg.p, l_max=cfg.l_max, L=cfg.L, d=cfg.d, alpha=cfg.alpha, heads=cfg.heads,
                      rng=rng, guard=cfg.guard, impl=cfg.impl)
        self.ln1 = LayerNorm(cfg.p)
        self.attn = build_component("attention" if cfg.attention == "baseline" else cfg.attention, **common)
        self.ln2 = LayerNorm(cfg.p)
        self.ffn = build_component("ffn" if cfg.ffn == "baseline" else cfg.ffn, **common)

    def forward(self, X: Tensor) -> Tensor:
        h = X + self.attn(self.ln1(X))
        return h + self.ffn(self.ln2(h))


def block_forward(X: Tensor, block: Block) -> Tensor:
    return block(X)


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "cofrgenet"
    vocab: int = 256
    n_layers: int = 2
    p: int = 64
    l_max: int = 64
    heads: int = 4
    alpha: int = 4
    L: int = 8
    d: int = 5
    epsilon: float = 0.01
    impl: str = "continuant"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        if self.impl not in ("continuant", "literal"):
            raise ValueError(f"impl must be continuant or literal, got {self.impl!r}")

    def block_config(self) -> BlockConfig:
        return BlockConfig.from_variant(self.variant, p=self.p, l_max=self.l_max, heads=self.heads,
                                        alpha=self.alpha, L=self.L, d=self.d,
                                        guard=PoleGuard(self.epsilon), impl=self.impl)


class CausalLM(Module):
    """Token and learned position embeddings, a block stack, final norm, untied head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.wte = Parameter(rng.normal(0.0, 0.02, (cfg.vocab, cfg.p)), decay=True)
        self.wpe = Parameter(rng.normal(0.0, 0.02, (cfg.l_max, cfg.p)), decay=True)
        bcfg = cfg.block_config()
        self.blocks = [Block(bcfg, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.p)
        self.head = Parameter(rng.normal(0.0, 0.02, (cfg.vocab, cfg.p)), decay=True)

    @property
    def dtype(self):
        return self.wte.dtype

    def hidden(self, ids) -> Tensor:
        ids = np.asarray(ids)
        l = ids.shape[-1]
        _check_length(l, self.cfg.l_max)
        x = ad.embedding(self.wte, ids) + self.wpe[:l]
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)

    def forward(self, ids) -> Tensor:
        return ad.matmul(self.hidden(ids), ad.transpose(self.head))

    def loss(self, ids, targets) -> Tensor:
        return ad.cross_entropy(self(ids), targets)

    def generate(self, prompt_ids, n_tokens: int, temperature: float = 1.0,
                 rng: np.random.Generator | None = None) -> list[int]:
        """Autoregressive sampling with ladder outputs clipped to trained ranges."""
        out = [int(t) for t in prompt_ids]
        if n_tokens <= 0:
            return out
        rng = rng if rng is not None else np.random.default_rng(0)
        modes = {name: t.mode for name, t in self.named_trackers()}
        self.set_range_mode("clipping")
        try:
            for _ in range(n_tokens):
                ctx = np.array(out[-self.cfg.l_max:] or [0], dtype=np.int64)[None, :]
                logits = self(ctx).data[0, -1].astype(np.float64)
                if temperature <= 0:
                    nxt = int(np.argmax(logits))
                else:
                    z = logits / temperature
                    pr = np.exp(z - z.max())
                    pr /= pr.sum()
                    nxt = int(rng.choice(len(pr), p=pr))
                out.append(nxt)
        finally:
            for name, t in self.named_trackers():
                t.mode = modes[name]
        return out
