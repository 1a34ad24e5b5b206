"""Decoder model definition, seeded weights, and head/weight sharding.

Architecture (pre-norm decoder):
    embed + sinusoidal positions
    L x [rms_norm -> multi-head causal attention -> residual
         rms_norm -> gelu MLP -> residual]
    final rms_norm -> output head -> logits

Matrix weights initialise from a seeded generator as N(0, 0.02^2); norm
gains initialise to one. Defaults: 4 layers, 8 heads of dim 16 (hidden
128), MLP width 512, vocab 256.

Sharding. ``tp_shard_view`` materialises the blocks a device owns under
tensor parallelism: attention projections split by the device's head
range (q/k/v by columns, the output projection by rows), MLP split f/P,
embedding rows and output-head columns split by vocab range. Sequence
parallelism keeps full replicas, so every TP shard is a sub-block of what
the device already holds for SP; ``check_shard_containment`` verifies
that claim and ``memory_report`` quantifies it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ContractViolation
from .kv_cache import KvCache
from .tensor_core import (
    Precision,
    attend_cached,
    gelu,
    matmul,
    rms_norm,
    sinusoidal_positions,
)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 8
    head_dim: int = 16
    ffn_dim: int = 512
    vocab_size: int = 256
    max_seq: int = 4096

    @property
    def hidden(self) -> int:
        return self.n_heads * self.head_dim

    def validate(self) -> "ModelConfig":
        for name in ("n_layers", "n_heads", "head_dim", "ffn_dim", "vocab_size", "max_seq"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if self.hidden % 2 != 0:
            raise ConfigError("hidden width must be even for sinusoidal positions")
        return self


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    attn_gain: np.ndarray
    mlp_gain: np.ndarray


@dataclass
class ModelWeights:
    config: ModelConfig
    precision: Precision
    seed: int
    embed: np.ndarray
    layers: List[LayerWeights]
    final_gain: np.ndarray
    head: np.ndarray


WEIGHT_SCALE = 0.02


def init_weights(config: ModelConfig, seed: int, precision: Precision = Precision.F64) -> ModelWeights:
    """Draw all weights from one seeded stream in a fixed order."""
    config.validate()
    rng = np.random.default_rng(seed)
    h, f, v = config.hidden, config.ffn_dim, config.vocab_size
    dt = precision.dtype

    def draw(*shape):
        return (rng.standard_normal(shape) * WEIGHT_SCALE).astype(dt)

    embed = draw(v, h)
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                wq=draw(h, h), wk=draw(h, h), wv=draw(h, h), wo=draw(h, h),
                w1=draw(h, f), w2=draw(f, h),
                attn_gain=np.ones(h, dtype=dt), mlp_gain=np.ones(h, dtype=dt),
            )
        )
    final_gain = np.ones(h, dtype=dt)
    head = draw(h, v)
    return ModelWeights(config=config, precision=precision, seed=seed,
                        embed=embed, layers=layers, final_gain=final_gain, head=head)


def induction_weights(max_seq: int = 1024, precision: Precision = Precision.F64) -> ModelWeights:
    """Hand-built two-layer copy model: greedy output replays history.

    Layer 1 head 0 attends each position to its predecessor (a rotation of
    the sinusoidal position channels) and deposits the predecessor's token
    code in a spare channel block. Layer 2 head 0 then matches the current
    token's code against those deposited predecessor codes, so position i
    attends wherever tok[i] occurred before and copies the token that
    followed; the output head reads that copied code as the next-token
    logits. The result: whenever the current token has appeared before,
    greedy decoding replays what followed it, which makes generation
    genuinely repetitive on template prompts. Used to exercise the
    speculation benefit deterministically; random init at this scale does
    not produce the copying behavior trained models have.

    Channel layout (hidden width 96): 0..31 position pairs, 32..63 token
    codes (one-hot, vocab 32), 64..95 deposited codes / next-token logits.
    MLPs are zeroed so residuals pass through untouched.
    """
    config = ModelConfig(
        n_layers=2, n_heads=2, head_dim=48, ffn_dim=8, vocab_size=32, max_seq=max_seq
    )
    h, v = config.hidden, config.vocab_size
    dt = precision.dtype
    alpha, beta1, gamma1, beta2, gamma2 = 16.0, 40.0, 4.0, 3.0, 32.0

    embed = np.zeros((v, h), dtype=dt)
    embed[np.arange(v), 32 + np.arange(v)] = alpha

    def blank():
        return LayerWeights(
            wq=np.zeros((h, h), dtype=dt), wk=np.zeros((h, h), dtype=dt),
            wv=np.zeros((h, h), dtype=dt), wo=np.zeros((h, h), dtype=dt),
            w1=np.zeros((h, config.ffn_dim), dtype=dt),
            w2=np.zeros((config.ffn_dim, h), dtype=dt),
            attn_gain=np.ones(h, dtype=dt), mlp_gain=np.ones(h, dtype=dt),
        )

    prev = blank()
    for m in range(16):  # rotate each position pair back by one step
        w = 10000.0 ** (-2.0 * m / h)
        s, c = np.sin(w), np.cos(w)
        prev.wq[2 * m, 2 * m] = c
        prev.wq[2 * m + 1, 2 * m] = -s
        prev.wq[2 * m, 2 * m + 1] = s
        prev.wq[2 * m + 1, 2 * m + 1] = c
        prev.wk[2 * m, 2 * m] = 1.0
        prev.wk[2 * m + 1, 2 * m + 1] = 1.0
    prev.wq[:, :32] *= beta1
    for t in range(32):
        prev.wv[32 + t, t] = 1.0
        prev.wo[t, 64 + t] = gamma1

    induct = blank()
    for t in range(32):
        induct.wq[32 + t, t] = beta2
        induct.wk[64 + t, t] = 1.0
        induct.wv[32 + t, t] = 1.0
        induct.wo[t, 64 + t] = gamma2

    head = np.zeros((h, v), dtype=dt)
    for t in range(32):
        head[64 + t, t] = 1.0

    return ModelWeights(
        config=config, precision=precision, seed=-1,
        embed=embed, layers=[prev, induct],
        final_gain=np.ones(h, dtype=dt), head=head,
    )


def partition_heads(n_heads: int, world_size: int) -> Tuple[Tuple[int, int], ...]:
    """Contiguous equal head ranges; device d owns [d*H/P, (d+1)*H/P)."""
    if world_size < 1:
        raise ConfigError("world_size must be >= 1")
    if n_heads % world_size != 0:
        raise ConfigError(f"n_heads {n_heads} not divisible by world_size {world_size}")
    span = n_heads // world_size
    return tuple((d * span, (d + 1) * span) for d in range(world_size))


@dataclass
class TpLayerShard:
    wq: np.ndarray  # (h, h/P) columns of owned heads
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray  # (h/P, h) rows of owned heads
    w1: np.ndarray  # (h, f/P)
    w2: np.ndarray  # (f/P, h)


@dataclass
class TpShard:
    """Everything one device holds under tensor parallelism."""

    rank: int
    world_size: int
    head_range: Tuple[int, int]
    vocab_range: Tuple[int, int]
    ffn_range: Tuple[int, int]
    layers: List[TpLayerShard]
    embed_rows: np.ndarray  # (V/P, h)
    head_cols: np.ndarray   # (h, V/P)


def tp_shard_view(weights: ModelWeights, rank: int, world_size: int) -> TpShard:
    """Materialise the contiguous blocks device ``rank`` owns under TP."""
    cfg = weights.config
    part = partition_heads(cfg.n_heads, world_size)
    if not 0 <= rank < world_size:
        raise ContractViolation(f"rank {rank} out of range for P={world_size}")
    if cfg.ffn_dim % world_size != 0:
        raise ConfigError(f"ffn_dim {cfg.ffn_dim} not divisible by world_size {world_size}")
    if cfg.vocab_size % world_size != 0:
        raise ConfigError(f"vocab_size {cfg.vocab_size} not divisible by world_size {world_size}")
    lo_h, hi_h = part[rank]
    d = cfg.head_dim
    c0, c1 = lo_h * d, hi_h * d
    fspan = cfg.ffn_dim // world_size
    f0, f1 = rank * fspan, (rank + 1) * fspan
    vspan = cfg.vocab_size // world_size
    v0, v1 = rank * vspan, (rank + 1) * vspan
    layers = [
        TpLayerShard(
            wq=np.ascontiguousarray(lw.wq[:, c0:c1]),
            wk=np.ascontiguousarray(lw.wk[:, c0:c1]),
            wv=np.ascontiguousarray(lw.wv[:, c0:c1]),
            wo=np.ascontiguousarray(lw.wo[c0:c1, :]),
            w1=np.ascontiguousarray(lw.w1[:, f0:f1]),
            w2=np.ascontiguousarray(lw.w2[f0:f1, :]),
        )
        for lw in weights.layers
    ]
    return TpShard(
        rank=rank, world_size=world_size,
        head_range=(lo_h, hi_h), vocab_range=(v0, v1), ffn_range=(f0, f1),
        layers=layers,
        embed_rows=np.ascontiguousarray(weights.embed[v0:v1, :]),
        head_cols=np.ascontiguousarray(weights.head[:, v0:v1]),
    )


def check_shard_containment(weights: ModelWeights, world_size: int) -> bool:
    """Every element of every TP shard is a sub-block of the SP-resident replica."""
    cfg = weights.config
    d = cfg.head_dim
    for rank in range(world_size):
        shard = tp_shard_view(weights, rank, world_size)
        c0, c1 = shard.head_range[0] * d, shard.head_range[1] * d
        f0, f1 = shard.ffn_range
        v0, v1 = shard.vocab_range
        for lw, sh in zip(weights.layers, shard.layers):
            ok = (
                np.array_equal(sh.wq, lw.wq[:, c0:c1])
                and np.array_equal(sh.wk, lw.wk[:, c0:c1])
                and np.array_equal(sh.wv, lw.wv[:, c0:c1])
                and np.array_equal(sh.wo, lw.wo[c0:c1, :])
                and np.array_equal(sh.w1, lw.w1[:, f0:f1])
                and np.array_equal(sh.w2, lw.w2[f0:f1, :])
            )
            if not ok:
                return False
        if not np.array_equal(shard.embed_rows, weights.embed[v0:v1, :]):
            return False
        if not np.array_equal(shard.head_cols, weights.head[:, v0:v1]):
            return False
    return True


def memory_report(config: ModelConfig, world_size: int) -> dict:
    """Parameter residency per device: sharded TP blocks vs full SP replicas.

    Matrix parameters shard exactly 1/P under TP; the tiny norm gains stay
    replicated in both modes and are reported separately, so the sharded
    ratio is exactly P.
    """
    h, f, v, l = config.hidden, config.ffn_dim, config.vocab_size, config.n_layers
    matrix = v * h + l * (4 * h * h + 2 * h * f) + h * v
    gains = l * 2 * h + h
    return {
        "matrix_params_total": matrix,
        "replicated_gain_params": gains,
        "sp_matrix_params_per_device": matrix,
        "tp_matrix_params_per_device": matrix // world_size,
        "sharded_ratio": world_size,
    }


def greedy_token(logits: np.ndarray) -> int:
    """Argmax over the vocab axis; lowest index wins ties."""
    if logits.ndim != 1:
        raise ContractViolation("greedy_token expects one logit row")
    return int(np.argmax(logits))


def forward_reference(
    weights: ModelWeights,
    tokens: Sequence[int],
    cache: Optional[KvCache] = None,
) -> Tuple[np.ndarray, KvCache]:
    """Single-device forward over new tokens, continuing an optional cache.

    Returns logits for every new position, (len(tokens), V), plus the
    cache (all heads on one device). With ``cache=None`` this is a full
    prefill from position 0; passing the returned cache back in processes
    a continuation, bit-identical to one longer forward over the
    concatenated sequence.
    """
    cfg = weights.config
    dt = weights.precision.dtype
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.ndim != 1 or toks.size == 0:
        raise ContractViolation("forward_reference expects a non-empty token sequence")
    if toks.min() < 0 or toks.max() >= cfg.vocab_size:
        raise ContractViolation("token id out of vocab range")
    if cache is None:
        cache = KvCache(cfg.n_layers, ((0, cfg.n_heads),), cfg.head_dim,
                        cfg.max_seq, dt)
    start = cache.token_count
    n = toks.size
    h, d = cfg.hidden, cfg.head_dim
    positions = np.arange(start, start + n)

    x = weights.embed[toks] + sinusoidal_positions(positions, h, dtype=dt)
    for layer_idx, lw in enumerate(weights.layers):
        xn = rms_norm(x, lw.attn_gain)
        q = matmul(xn, lw.wq).reshape(n, cfg.n_heads, d)
        k = matmul(xn, lw.wk).reshape(n, cfg.n_heads, d)
        v = matmul(xn, lw.wv).reshape(n, cfg.n_heads, d)
        cache.append(0, layer_idx, k, v)
        attn = np.empty((n, cfg.n_heads, d), dtype=dt)
        for head in range(cfg.n_heads):
            kw, vw = cache.read_window(0, layer_idx, head)
            attn[:, head, :] = attend_cached(q[:, head, :], kw, vw, start)
        x = x + matmul(attn.reshape(n, h), lw.wo)
        xn2 = rms_norm(x, lw.mlp_gain)
        x = x + matmul(gelu(matmul(xn2, lw.w1)), lw.w2)
    cache.commit(n)
    logits = matmul(rms_norm(x, weights.final_gain), weights.head)
    return logits, cache


def reference_greedy(weights: ModelWeights, prompt: Sequence[int], steps: int) -> List[int]:
    """Greedy continuation of a prompt using the reference forward."""
    if steps <= 0:
        return []
    logits, cache = forward_reference(weights, prompt)
    out = [greedy_token(logits[-1])]
    while len(out) < steps:
        logits, cache = forward_reference(weights, [out[-1]], cache)
        out.append(greedy_token(logits[-1]))
    return out
