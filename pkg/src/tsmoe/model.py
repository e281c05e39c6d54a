"""The network: residual-MLP patch projection, causal self-attention over
flattened variates, pre-norm transformer blocks with a mixture-of-experts
FFN, and a Gaussian-mixture output head scoring every step of the next
patch.

Attention is masked on the time index, not the flattened position: a token
may attend to every token (of any variate) whose time index does not exceed
its own, and rotary position encoding is likewise driven by the time index,
so reordering variates never changes a token's output.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import moe

SCALE_FLOOR = 1e-4
LN_EPS = 1e-5
_NEG_BIG = -1e30

GATE_KINDS = ("linear", "linear_balance", "cluster", "dense")
OBJECTIVES = ("decoder_only", "masked_encoder")


class ConfigError(ValueError):
    """Invalid model or run configuration."""


@dataclass
class ModelConfig:
    layers: int = 2
    d_model: int = 64
    d_ff: int = 96
    n_heads: int = 4
    n_experts: int = 8
    top_k: int = 2
    patch_size: int = 16
    mixture_components: int = 3
    gate_kind: str = "linear"
    objective: str = "decoder_only"
    final_norm: bool = True
    rope_base: float = 10000.0
    dtype: str = "f64"

    def __post_init__(self):
        if self.gate_kind not in GATE_KINDS:
            raise ConfigError(f"gate_kind must be one of {GATE_KINDS}, got {self.gate_kind!r}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.gate_kind == "dense" and (self.n_experts != 1 or self.top_k != 1):
            raise ConfigError("dense FFN requires n_experts = top_k = 1")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError("need 1 <= top_k <= n_experts")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ConfigError("head dimension must be even for rotary encoding")
        if self.mixture_components < 1:
            raise ConfigError("need at least one mixture component")
        if self.dtype not in ("f64", "f32"):
            raise ConfigError("dtype must be 'f64' or 'f32'")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "f64" else np.float32

    @property
    def head_out(self):
        return self.patch_size * self.mixture_components * 3


def _name_seed(seed, name):
    digest = hashlib.sha256(name.encode()).digest()
    return np.random.SeedSequence((seed, int.from_bytes(digest[:8], "little")))


def _normal(rng, shape, std):
    return rng.normal(0.0, std, size=shape)


def init_params(config, seed, centroids=None):
    """Create the full parameter store.

    Every tensor is drawn from its own named RNG stream, so adding or
    removing a tensor (e.g. the gate of a dense run) never shifts the
    initialization of the others. ``centroids`` (layer index -> (M, D))
    is required for the cluster gate and stored frozen.
    """
    c = config
    dt = c.np_dtype
    store = ad.ParamStore()

    def add(name, shape, std=None, value=None, frozen=False):
        if value is None:
            rng = np.random.default_rng(_name_seed(seed, name))
            value = _normal(rng, shape, std)
        store.add(name, value, frozen=frozen, dtype=dt)

    d = c.d_model
    add("in_proj.w_in", (2 * c.patch_size, d), std=(2 * c.patch_size) ** -0.5)
    add("in_proj.ln.g", None, value=np.ones(d))
    add("in_proj.ln.b", None, value=np.zeros(d))
    add("in_proj.w1", (d, d), std=d ** -0.5)
    add("in_proj.w2", (d, d), std=d ** -0.5)

    for l in range(c.layers):
        pre = f"blocks.{l}"
        add(f"{pre}.ln1.g", None, value=np.ones(d))
        add(f"{pre}.ln1.b", None, value=np.zeros(d))
        for w in ("wq", "wk", "wv", "wo"):
            add(f"{pre}.attn.{w}", (d, d), std=d ** -0.5)
        add(f"{pre}.ln2.g", None, value=np.ones(d))
        add(f"{pre}.ln2.b", None, value=np.zeros(d))
        for i in range(c.n_experts):
            add(f"{pre}.moe.experts.{i}.w1", (d, c.d_ff), std=d ** -0.5)
            add(f"{pre}.moe.experts.{i}.w2", (c.d_ff, d), std=c.d_ff ** -0.5)
        if c.gate_kind in ("linear", "linear_balance"):
            add(f"{pre}.moe.gate.w", (d, c.n_experts), std=d ** -0.5)
        elif c.gate_kind == "cluster":
            if centroids is None or l not in centroids:
                raise ConfigError("cluster gate requires fitted centroids for every layer")
            cent = np.asarray(centroids[l], dtype=np.float64)
            if cent.shape != (c.n_experts, d):
                raise ConfigError(f"centroids for layer {l} must have shape "
                                  f"({c.n_experts}, {d}), got {cent.shape}")
            add(f"gate.centroids.layer{l}", None, value=cent, frozen=True)

    if c.final_norm:
        add("final_ln.g", None, value=np.ones(d))
        add("final_ln.b", None, value=np.zeros(d))
    if c.objective == "masked_encoder":
        add("mask_embed", (d,), std=1.0)
    add("head.w", (d, c.head_out), std=d ** -0.5)
    return store


def count_params(config):
    """Closed-form (activated, total) parameter counts.

    "Activated" counts each token's compute path: top_k experts instead of
    all of them, everything else in full (the Activated/Total distinction
    of sparse-expert model sizing).
    """
    c = config
    d = c.d_model
    expert = d * c.d_ff + c.d_ff * d
    total = 2 * c.patch_size * d + 2 * d + 2 * d * d          # input projection
    per_block = 2 * d + 4 * d * d + 2 * d + c.n_experts * expert
    if c.gate_kind in ("linear", "linear_balance"):
        per_block += d * c.n_experts
    elif c.gate_kind == "cluster":
        per_block += c.n_experts * d
    total += c.layers * per_block
    if c.final_norm:
        total += 2 * d
    if c.objective == "masked_encoder":
        total += d
    total += d * c.head_out
    activated = total - c.layers * (c.n_experts - c.top_k) * expert
    return activated, total


# ---------------------------------------------------------------------------
# forward pieces


def input_projection(params, patches, pad_mask):
    """Project (B, N, P) patches (pad channel appended) into d_model tokens.

    h0 = W_in . [patch ; pad01]; out = h0 + W2 gelu(W1 LN(h0)).
    """
    dt = params["in_proj.w_in"].data.dtype
    x = np.concatenate([patches, pad_mask.astype(patches.dtype)], axis=-1)
    h0 = ad.matmul(ad.constant(x, dtype=dt), params["in_proj.w_in"])
    h = ad.layer_norm(h0, params["in_proj.ln.g"], params["in_proj.ln.b"], LN_EPS)
    h = ad.matmul(ad.gelu(ad.matmul(h, params["in_proj.w1"])), params["in_proj.w2"])
    return ad.add(h0, h)


def rope_tables(time_index, head_dim, base, dtype):
    """cos/sin tables (B, 1, N, head_dim/2) from integer time indices."""
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half) * 2.0 / head_dim)
    ang = time_index[..., None] * inv_freq          # (B, N, half)
    cos = np.cos(ang)[:, None, :, :].astype(dtype)
    sin = np.sin(ang)[:, None, :, :].astype(dtype)
    return cos, sin


def _apply_rope(q, cos, sin):
    half = q.data.shape[-1] // 2
    q1 = q[..., :half]
    q2 = q[..., half:]
    c = ad.constant(cos, dtype=q.data.dtype)
    s = ad.constant(sin, dtype=q.data.dtype)
    return ad.concat([ad.sub(ad.mul(q1, c), ad.mul(q2, s)),
                      ad.add(ad.mul(q1, s), ad.mul(q2, c))], axis=-1)


def attention_mask(time_index, key_real, causal=True):
    """(B, 1, N, N) additive bias: 0 where allowed, a large negative
    constant elsewhere. Self-attention is always allowed so no row is empty."""
    b, n = time_index.shape
    if causal:
        # query at [:, :, None], key at [:, None, :]: allow key time <= query time
        allowed = time_index[:, :, None] >= time_index[:, None, :]
        allowed = allowed & key_real[:, None, :]
    else:
        allowed = np.broadcast_to(key_real[:, None, :], (b, n, n)).copy()
    idx = np.arange(n)
    allowed[:, idx, idx] = True
    bias = np.where(allowed, 0.0, _NEG_BIG)
    return bias[:, None, :, :]


def causal_attention(params, prefix, x, time_index, key_real, config, causal=True):
    """Multi-head scaled dot-product attention over a (B, N, D) tensor."""
    b, n, d = x.data.shape
    h = config.n_heads
    dh = d // h

    def heads(t):
        return ad.transpose(ad.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

    q = heads(ad.matmul(x, params[f"{prefix}.wq"]))
    k = heads(ad.matmul(x, params[f"{prefix}.wk"]))
    v = heads(ad.matmul(x, params[f"{prefix}.wv"]))
    cos, sin = rope_tables(time_index, dh, config.rope_base, x.data.dtype)
    q = _apply_rope(q, cos, sin)
    k = _apply_rope(k, cos, sin)

    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * float(dh ** -0.5)
    bias = ad.constant(attention_mask(time_index, key_real, causal), dtype=x.data.dtype)
    attn = ad.softmax(ad.add(scores, bias))
    ctx = ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3))
    return ad.matmul(ad.reshape(ctx, (b, n, d)), params[f"{prefix}.wo"])


def _gate_for_layer(params, config, layer, tokens_flat):
    if config.gate_kind == "dense":
        return moe.unit_gate_batch(tokens_flat.data.shape[0], dtype=tokens_flat.data.dtype)
    if config.gate_kind == "cluster":
        return moe.cluster_gate_batch(tokens_flat, params[f"gate.centroids.layer{layer}"],
                                      config.top_k)
    return moe.linear_gate_batch(tokens_flat, params[f"blocks.{layer}.moe.gate.w"],
                                 config.top_k)


@dataclass
class ModelOutput:
    head: "ad.Tensor"                 # (B, N, P, C, 3) raw head output
    balance: list                     # per-layer balance loss Tensors (may be empty)
    gates: list                       # per-layer GateBatch (selection + weights)
    captures: dict = field(default_factory=dict)
    mask_positions: np.ndarray | None = None


def forward(params, config, batch, want_balance=None):
    """Run the full network on a batch; see :class:`ModelOutput`.

    ``want_balance`` defaults to True for the linear_balance gate. Balance
    statistics are computed over real (non-padding) tokens only.
    """
    c = config
    b, n = batch.patches.shape[:2]
    if want_balance is None:
        want_balance = c.gate_kind == "linear_balance"
    causal = c.objective != "masked_encoder"
    key_real = batch.pad_mask.any(axis=2)
    real_rows = np.nonzero(key_real.reshape(-1))[0]

    x = input_projection(params, batch.patches, batch.pad_mask)
    captures = {"input_projection": x.data}

    mask_positions = None
    if c.objective == "masked_encoder":
        n_real = key_real.sum(axis=1)
        mask_positions = np.maximum(n_real - 1, 0)
        onehot = np.zeros((b, n, 1), dtype=x.data.dtype)
        onehot[np.arange(b), mask_positions, 0] = 1.0
        oh = ad.constant(onehot, dtype=x.data.dtype)
        emb = ad.reshape(params["mask_embed"], (1, 1, c.d_model))
        x = ad.add(ad.mul(x, ad.constant(1.0 - onehot, dtype=x.data.dtype)),
                   ad.mul(emb, oh))

    balance = []
    gates = []
    for l in range(c.layers):
        pre = f"blocks.{l}"
        h = ad.layer_norm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"], LN_EPS)
        x = ad.add(causal_attention(params, f"{pre}.attn", h, batch.time_index,
                                    key_real, c, causal), x)
        captures[f"residual.{l}"] = x.data
        h = ad.layer_norm(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"], LN_EPS)
        captures[f"moe_input.{l}"] = h.data
        flat = ad.reshape(h, (b * n, c.d_model))
        gate = _gate_for_layer(params, c, l, flat)
        gates.append(gate)
        if want_balance and c.gate_kind != "dense":
            real_probs = ad.take_rows(gate.dense_probs, real_rows)
            balance.append(moe.load_balance_loss_graph(real_probs))
        experts = [(params[f"{pre}.moe.experts.{i}.w1"],
                    params[f"{pre}.moe.experts.{i}.w2"]) for i in range(c.n_experts)]
        y = moe.moe_forward(flat, experts, gate)
        x = ad.add(ad.reshape(y, (b, n, c.d_model)), x)

    if c.final_norm:
        x = ad.layer_norm(x, params["final_ln.g"], params["final_ln.b"], LN_EPS)
    captures["final"] = x.data
    head = ad.reshape(ad.matmul(x, params["head.w"]),
                      (b, n, c.patch_size, c.mixture_components, 3))
    return ModelOutput(head, balance, gates, captures, mask_positions)


# ---------------------------------------------------------------------------
# mixture head


@dataclass
class MixtureParams:
    """Mixture weights / means / scales; component axis last."""

    weights: np.ndarray
    means: np.ndarray
    scales: np.ndarray


def head_to_mixture_graph(head):
    """Split raw head output (..., C, 3) into graph-tensor mixture params."""
    logits = head[..., 0]
    means = head[..., 1]
    scales = ad.softplus(head[..., 2]) + SCALE_FLOOR
    return logits, means, scales


def mixture_head(params, config, token):
    """Mixture parameters for all P steps of the next patch of one token."""
    token = np.asarray(token)
    raw = (token[None, :] @ params["head.w"].data).reshape(
        config.patch_size, config.mixture_components, 3)
    return mixture_params_from_head(raw)


def mixture_log_prob_graph(logits, means, scales, target):
    """log p(target) under the mixture, reduced over the component axis."""
    log_w = ad.sub(logits, ad.reshape(ad.logsumexp(logits), logits.data.shape[:-1] + (1,)))
    t = ad.constant(np.asarray(target)[..., None], dtype=means.data.dtype)
    z = ad.div(ad.sub(t, means), scales)
    log_pdf = -(ad.square(z) * 0.5) - (ad.log(scales) + 0.5 * np.log(2.0 * np.pi))
    return ad.logsumexp(ad.add(log_w, log_pdf))


def mixture_log_prob(mp, x):
    """Numeric log-density of the Gaussian mixture at x (broadcasts)."""
    w = np.asarray(mp.weights, dtype=np.float64)
    mu = np.asarray(mp.means, dtype=np.float64)
    s = np.asarray(mp.scales, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)[..., None]
    log_comp = (np.log(w) - 0.5 * ((x - mu) / s) ** 2
                - np.log(s) - 0.5 * np.log(2.0 * np.pi))
    m = log_comp.max(axis=-1)
    return m + np.log(np.exp(log_comp - m[..., None]).sum(axis=-1))


def sample_mixture(mp, rng, n_samples):
    """Ancestral sampling: component index from the weights, then a normal
    draw. Leading shape of the params is preserved: output (n_samples, ...)."""
    if n_samples < 1:
        raise ValueError("need n_samples >= 1")
    w = np.asarray(mp.weights, dtype=np.float64)
    mu = np.asarray(mp.means, dtype=np.float64)
    s = np.asarray(mp.scales, dtype=np.float64)
    cum = np.cumsum(w, axis=-1)
    cum = cum / cum[..., -1:]
    u = rng.random((n_samples,) + w.shape[:-1])
    idx = (u[..., None] > cum).sum(axis=-1)
    z = rng.standard_normal(idx.shape)
    return np.take_along_axis(np.broadcast_to(mu, idx.shape[:1] + mu.shape),
                              idx[..., None], axis=-1)[..., 0] + \
        np.take_along_axis(np.broadcast_to(s, idx.shape[:1] + s.shape),
                           idx[..., None], axis=-1)[..., 0] * z


def mixture_params_from_head(head_raw):
    """Numeric mixture params from raw head values (..., C, 3)."""
    from . import kernels
    logits = head_raw[..., 0]
    means = head_raw[..., 1]
    scales = kernels.softplus_fwd(np.ascontiguousarray(head_raw[..., 2])) + SCALE_FLOOR
    weights = kernels.softmax_fwd(np.ascontiguousarray(logits))
    return MixtureParams(weights, means, scales)


def next_patch_mixture(params, config, batch):
    """Mixture params for the next patch following each position: numeric
    (B, N, P, C) arrays, used by sampling-time code."""
    out = forward(params, config, batch, want_balance=False)
    return mixture_params_from_head(out.head.data), out
