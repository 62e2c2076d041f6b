"""Selective state-space sequence classifier.

The network is: token embedding, a stack of identical pre-norm blocks (gated
selective-scan mixer followed by an MLP, each behind a layer norm and a
residual), a final layer norm, and output heads for next-token prediction and
per-rank classification.

Per head h the mixer's recurrence over positions t is

    H_t = exp(delta_t * a_h) * H_{t-1} + delta_t * (x_t outer B_t)
    y_t = H_t @ C_t + D_h * x_t,        H_0 = 0

with H_t a (p x N) state, delta positive via softplus and a_h < 0. The scan is
recorded as a single graph node with a hand-derived adjoint; finite
differences and a dense quadratic-time oracle check it in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ContractError, ShapeError
from .numcore import Tensor
from .records import N_RANKS

HEAD_MODES = ("multi", "single")


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_blocks: int = 2
    head_dim: int = 16
    expand: int = 2
    d_state: int = 64
    conv_kernel: int = 4
    max_len: int = 1024
    head_mode: str = "multi"

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_blocks", "head_dim", "expand",
                     "d_state", "conv_kernel", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if (self.expand * self.d_model) % self.head_dim != 0:
            raise ConfigError(
                f"expand*d_model = {self.expand * self.d_model} "
                f"not divisible by head_dim = {self.head_dim}"
            )
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"head_mode must be one of {HEAD_MODES}, got '{self.head_mode}'")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def n_heads(self) -> int:
        return self.d_inner // self.head_dim

    def backbone_fields(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_blocks": self.n_blocks,
            "head_dim": self.head_dim,
            "expand": self.expand,
            "d_state": self.d_state,
            "conv_kernel": self.conv_kernel,
        }


def preset_config(name: str, vocab_size: int, **overrides) -> ModelConfig:
    """Named model sizes; dimensions chosen for this artifact, not published ones."""
    presets = {
        "tiny": dict(d_model=64, n_blocks=2, head_dim=16, d_state=16),
        "base": dict(d_model=256, n_blocks=6, head_dim=64, d_state=64),
        "large": dict(d_model=512, n_blocks=10, head_dim=64, d_state=64),
    }
    if name not in presets:
        raise ConfigError(f"unknown preset '{name}', have {sorted(presets)}")
    kwargs = dict(presets[name])
    kwargs.update(overrides)
    return ModelConfig(vocab_size=vocab_size, **kwargs)


# ---------------------------------------------------------------------------
# scan kernels


def _as_batched(*arrays, want_dims):
    batched = arrays[0].ndim == want_dims + 1
    if batched:
        return arrays, True
    return tuple(a[None] for a in arrays), False


def ssd_scan_sequential(x, delta, a, B, C, D):
    """Reference recurrence, one position at a time.

    Shapes: x (T,H,P), delta (T,H), a (H,), B and C (T,H,N), D (H,). A leading
    batch dimension on x/delta/B/C is accepted and preserved.
    """
    x, delta, B, C = np.asarray(x), np.asarray(delta), np.asarray(B), np.asarray(C)
    a, D = np.asarray(a), np.asarray(D)
    (xb, db, Bb, Cb), batched = _as_batched(x, delta, B, C, want_dims=3)
    y, _ = _scan_forward(xb, db, a, Bb, Cb, D)
    return y if batched else y[0]


def _scan_forward(x, delta, a, B, C, D):
    """Batched forward of the recurrence; also returns the per-step states."""
    Bsz, T, H, P = x.shape
    N = B.shape[-1]
    if delta.shape != (Bsz, T, H):
        raise ShapeError(f"delta shape {delta.shape} != {(Bsz, T, H)}")
    if B.shape != (Bsz, T, H, N) or C.shape != (Bsz, T, H, N):
        raise ShapeError(f"B/C shapes {B.shape}/{C.shape} != {(Bsz, T, H, N)}")
    if a.shape != (H,) or D.shape != (H,):
        raise ShapeError(f"a/D shapes {a.shape}/{D.shape} != {(H,)}")
    A = np.exp(delta * a)  # (Bsz,T,H)
    Hs = np.empty((Bsz, T, H, P, N), dtype=x.dtype)
    state = np.zeros((Bsz, H, P, N), dtype=x.dtype)
    y = np.empty_like(x)
    for t in range(T):
        state = A[:, t, :, None, None] * state + delta[:, t, :, None, None] * (
            x[:, t, :, :, None] * B[:, t, :, None, :]
        )
        Hs[:, t] = state
        y[:, t] = np.einsum("bhpn,bhn->bhp", state, C[:, t])
    y = y + D[None, None, :, None] * x
    return y, (A, Hs)


def _scan_backward(g, x, delta, a, B, C, D, A, Hs):
    """Adjoint of _scan_forward; returns gradients for every input."""
    Bsz, T, H, P = x.shape
    dD = np.einsum("bthp,bthp->h", g, x)
    dx = D[None, None, :, None] * g
    ddelta = np.empty_like(delta)
    dB = np.empty_like(B)
    dC = np.empty_like(C)
    da = np.zeros_like(a)
    G = np.zeros((Bsz, H, P, Hs.shape[-1]), dtype=x.dtype)
    for t in range(T - 1, -1, -1):
        G = G + g[:, t, :, :, None] * C[:, t, :, None, :]
        dC[:, t] = np.einsum("bhpn,bhp->bhn", Hs[:, t], g[:, t])
        h_prev = Hs[:, t - 1] if t > 0 else np.zeros_like(G)
        s_decay = np.einsum("bhpn,bhpn->bh", G, h_prev)
        s_input = np.einsum("bhpn,bhpn->bh", G, x[:, t, :, :, None] * B[:, t, :, None, :])
        ddelta[:, t] = s_decay * a * A[:, t] + s_input
        da += np.einsum("bh,bh->h", s_decay, delta[:, t] * A[:, t])
        dx[:, t] += delta[:, t, :, None] * np.einsum("bhpn,bhn->bhp", G, B[:, t])
        dB[:, t] = delta[:, t, :, None] * np.einsum("bhpn,bhp->bhn", G, x[:, t])
        G = A[:, t, :, None, None] * G
    return dx, ddelta, da, dB, dC, dD


def scan_op(x: Tensor, delta: Tensor, a: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Differentiable scan node over batched (Bsz,T,H,P) inputs."""
    y, (A, Hs) = _scan_forward(x.data, delta.data, a.data, B.data, C.data, D.data)

    def bw(g):
        return _scan_backward(g, x.data, delta.data, a.data, B.data, C.data, D.data, A, Hs)

    return nc.make_op(y, (x, delta, a, B, C, D), bw)


def ssd_scan_chunked(x, delta, a, B, C, D, chunk_size: int):
    """Block-processed scan: dense within each chunk, state carried between chunks.

    Numerically equivalent to ssd_scan_sequential; the dense intra-chunk form
    trades memory (chunk_size^2) for vectorization.
    """
    if chunk_size < 1:
        raise ConfigError(f"chunk_size must be >= 1, got {chunk_size}")
    x, delta, B, C = np.asarray(x), np.asarray(delta), np.asarray(B), np.asarray(C)
    a, D = np.asarray(a), np.asarray(D)
    (xb, Bb, Cb), batched = _as_batched(x, B, C, want_dims=3)
    (db,), _ = _as_batched(delta, want_dims=2)

    Bsz, T, H, P = xb.shape
    N = Bb.shape[-1]
    if db.shape != (Bsz, T, H) or Bb.shape != (Bsz, T, H, N) or Cb.shape != (Bsz, T, H, N):
        raise ShapeError(
            f"inconsistent scan shapes x={xb.shape} delta={db.shape} B={Bb.shape} C={Cb.shape}"
        )
    y = np.empty_like(xb)
    state = np.zeros((Bsz, H, P, N), dtype=xb.dtype)
    for s in range(0, T, chunk_size):
        e = min(s + chunk_size, T)
        q = e - s
        xq, dq, Bq, Cq = xb[:, s:e], db[:, s:e], Bb[:, s:e], Cb[:, s:e]
        log_decay = dq * a                        # (Bsz,q,H), all <= 0 for a < 0
        cum = np.cumsum(log_decay, axis=1)        # inclusive from chunk start
        diff = cum[:, :, None, :] - cum[:, None, :, :]
        causal = np.tril(np.ones((q, q), dtype=bool))[None, :, :, None]
        decay = np.exp(np.where(causal, diff, -np.inf))
        weights = np.einsum("bthn,buhn->btuh", Cq, Bq) * decay * dq[:, None, :, :]
        y_intra = np.einsum("btuh,buhp->bthp", weights, xq)
        y_state = np.exp(cum)[:, :, :, None] * np.einsum("bhpn,bthn->bthp", state, Cq)
        y[:, s:e] = y_intra + y_state + D[None, None, :, None] * xq
        carry = np.exp(cum[:, -1:, :] - cum) * dq  # (Bsz,q,H)
        state = np.exp(cum[:, -1])[:, :, None, None] * state + np.einsum(
            "buh,buhp,buhn->bhpn", carry, xq, Bq
        )
    return y if batched else y[0]


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ModelState:
    """All trainable arrays plus the configuration they were built from."""

    config: ModelConfig
    params: dict[str, Tensor]
    class_counts: list[int] | None = None
    norm_param_names: set[str] = field(default_factory=set)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def astype(self, dtype) -> "ModelState":
        cast = {
            k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)
            for k, v in self.params.items()
        }
        return ModelState(self.config, cast, self.class_counts, set(self.norm_param_names))


def _normal(rng, shape, std, dtype):
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def _const(value, shape, dtype):
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)


def init_model(cfg: ModelConfig, seed: int = 0, dtype=nc.F32) -> ModelState:
    """Backbone + LM head. Classification heads are attached separately."""
    rng = np.random.default_rng(seed)
    d, di, H = cfg.d_model, cfg.d_inner, cfg.n_heads
    params: dict[str, Tensor] = {}
    norms: set[str] = set()
    params["embedding"] = _normal(rng, (cfg.vocab_size, d), 0.02, dtype)
    for i in range(cfg.n_blocks):
        pre = f"blocks.{i}."
        for ln in ("ln1", "ln2"):
            params[pre + ln + "_g"] = _const(1.0, (d,), dtype)
            params[pre + ln + "_b"] = _const(0.0, (d,), dtype)
            norms.update({pre + ln + "_g", pre + ln + "_b"})
        params[pre + "w_val"] = _normal(rng, (d, di), 0.02, dtype)
        params[pre + "w_gate"] = _normal(rng, (d, di), 0.02, dtype)
        params[pre + "conv"] = _normal(rng, (di, cfg.conv_kernel), 0.02, dtype)
        params[pre + "w_dt"] = _normal(rng, (d, H), 0.02, dtype)
        # softplus(b_dt) lands in [1e-3, 1e-1] so the decay exp(delta*a) starts near 1
        dt0 = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=H))
        params[pre + "b_dt"] = Tensor(
            (dt0 + np.log(-np.expm1(-dt0))).astype(dtype), requires_grad=True
        )
        params[pre + "a_log"] = Tensor(
            rng.uniform(np.log(1.0), np.log(16.0), size=H).astype(dtype), requires_grad=True
        )
        params[pre + "w_B"] = _normal(rng, (d, cfg.d_state), 0.02, dtype)
        params[pre + "w_C"] = _normal(rng, (d, cfg.d_state), 0.02, dtype)
        params[pre + "skip_D"] = _const(1.0, (H,), dtype)
        params[pre + "w_out"] = _normal(rng, (di, d), 0.02, dtype)
        params[pre + "mlp_w1"] = _normal(rng, (d, 4 * d), 0.02, dtype)
        params[pre + "mlp_b1"] = _const(0.0, (4 * d,), dtype)
        params[pre + "mlp_w2"] = _normal(rng, (4 * d, d), 0.02, dtype)
        params[pre + "mlp_b2"] = _const(0.0, (d,), dtype)
    params["final_ln_g"] = _const(1.0, (d,), dtype)
    params["final_ln_b"] = _const(0.0, (d,), dtype)
    norms.update({"final_ln_g", "final_ln_b"})
    params["lm_head"] = _const(0.0, (d, cfg.vocab_size), dtype)  # uniform logits at init
    return ModelState(cfg, params, norm_param_names=norms)


def add_classification_heads(state: ModelState, class_counts: list[int], seed: int = 0):
    """Attach fresh linear heads: one per rank (multi) or species only (single)."""
    if len(class_counts) != N_RANKS:
        raise ConfigError(f"need {N_RANKS} class counts, got {len(class_counts)}")
    rng = np.random.default_rng(seed)
    dtype = state.params["embedding"].data.dtype
    d = state.config.d_model
    ranks = range(N_RANKS) if state.config.head_mode == "multi" else (N_RANKS - 1,)
    for r in ranks:
        if class_counts[r] < 1:
            raise ConfigError(f"rank {r} has no classes; cannot build a head")
        state.params[f"heads.{r}.w"] = _normal(rng, (d, class_counts[r]), 0.02, dtype)
        state.params[f"heads.{r}.b"] = _const(0.0, (class_counts[r],), dtype)
    state.class_counts = list(class_counts)


def param_count(cfg: ModelConfig, class_counts: list[int] | None = None,
                include_lm_head: bool = True) -> int:
    """Exact trainable-parameter count for a configuration."""
    d, di, H, N, K, V = (cfg.d_model, cfg.d_inner, cfg.n_heads, cfg.d_state,
                         cfg.conv_kernel, cfg.vocab_size)
    block = (4 * d                 # two layer norms
             + 2 * d * di          # value + gate projections
             + di * K              # depthwise conv
             + d * H + H           # delta projection + bias
             + 2 * d * N           # B and C projections
             + 2 * H               # per-head a and D
             + di * d              # output projection
             + d * 4 * d + 4 * d + 4 * d * d + d)  # MLP
    total = V * d + cfg.n_blocks * block + 2 * d
    if include_lm_head:
        total += d * V
    if class_counts is not None:
        ranks = range(N_RANKS) if cfg.head_mode == "multi" else (N_RANKS - 1,)
        total += sum(d * class_counts[r] + class_counts[r] for r in ranks)
    return total


# ---------------------------------------------------------------------------
# forward passes


def block_forward(params: dict[str, Tensor], prefix: str, x: Tensor, cfg: ModelConfig) -> Tensor:
    """One pre-norm block: x + Mixer(LN(x)), then u + MLP(LN(u)). x is (Bsz,T,d)."""
    p = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
    Bsz, T, _ = x.data.shape
    H, P, N = cfg.n_heads, cfg.head_dim, cfg.d_state

    mix_in = nc.layer_norm(x, p["ln1_g"], p["ln1_b"])
    value = nc.silu(nc.causal_depthwise_conv(nc.matmul(mix_in, p["w_val"]), p["conv"]))
    gate = nc.matmul(mix_in, p["w_gate"])
    delta = nc.softplus(nc.matmul(mix_in, p["w_dt"]) + p["b_dt"])  # (Bsz,T,H)
    Bm = nc.matmul(mix_in, p["w_B"])
    Cm = nc.matmul(mix_in, p["w_C"])
    a = nc.neg(nc.exp(p["a_log"]))

    xh = nc.reshape(value, (Bsz, T, H, P))
    Bh = nc.broadcast_to(nc.reshape(Bm, (Bsz, T, 1, N)), (Bsz, T, H, N))
    Ch = nc.broadcast_to(nc.reshape(Cm, (Bsz, T, 1, N)), (Bsz, T, H, N))
    y = scan_op(xh, delta, a, Bh, Ch, p["skip_D"])
    y = nc.mul(nc.reshape(y, (Bsz, T, cfg.d_inner)), nc.silu(gate))
    u = nc.add(x, nc.matmul(y, p["w_out"]))

    mlp_in = nc.layer_norm(u, p["ln2_g"], p["ln2_b"])
    hidden = nc.silu(nc.add(nc.matmul(mlp_in, p["mlp_w1"]), p["mlp_b1"]))
    return nc.add(u, nc.add(nc.matmul(hidden, p["mlp_w2"]), p["mlp_b2"]))


def model_forward(state: ModelState, token_ids: np.ndarray, pad_mask: np.ndarray) -> Tensor:
    """Embed, run the block stack and the final norm. Returns (Bsz,T,d) hidden states.

    `pad_mask` is 1.0 at real positions and 0.0 at PAD; padded positions are
    re-zeroed between blocks so they cannot leak through the conv or the scan.
    """
    token_ids = np.asarray(token_ids)
    if token_ids.ndim != 2:
        raise ShapeError(f"token_ids must be (batch, T), got {token_ids.shape}")
    dtype = state.params["embedding"].data.dtype
    mask = Tensor(np.asarray(pad_mask, dtype=dtype)[:, :, None])
    h = nc.mul(nc.embedding_lookup(state.params["embedding"], token_ids), mask)
    for i in range(state.config.n_blocks):
        h = nc.mul(block_forward(state.params, f"blocks.{i}.", h, state.config), mask)
    h = nc.layer_norm(h, state.params["final_ln_g"], state.params["final_ln_b"])
    return nc.mul(h, mask)


def lm_logits(state: ModelState, hidden: Tensor) -> Tensor:
    """Next-token logits; position t predicts token t+1."""
    return nc.matmul(hidden, state.params["lm_head"])


def classify(state: ModelState, hidden: Tensor, pad_mask: np.ndarray) -> list[Tensor]:
    """Mean-pool non-PAD hidden states and apply the classification heads.

    Returns seven logit tensors in rank order (multi) or a single species
    tensor (single).
    """
    if state.class_counts is None:
        raise ContractError("model has no classification heads")
    mask = np.asarray(pad_mask, dtype=hidden.data.dtype)
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ContractError("a sample in the batch has no non-PAD positions")
    pooled = nc.mul(
        nc.tsum(nc.mul(hidden, Tensor(mask[:, :, None])), axis=1),
        Tensor((1.0 / counts)[:, None].astype(hidden.data.dtype)),
    )
    ranks = range(N_RANKS) if state.config.head_mode == "multi" else (N_RANKS - 1,)
    return [
        nc.add(nc.matmul(pooled, state.params[f"heads.{r}.w"]), state.params[f"heads.{r}.b"])
        for r in ranks
    ]
