"""Trainable transformer encoder over per-frame caption embeddings, from scratch.

The stack maps a T x d_model sequence through L pre-layer-norm encoder
layers (multi-head self-attention + GELU feed-forward, residual around
each), then a masked mean pool and affine projection produce the latent
description vector.  Forward passes record the intermediates needed for the
manual backward pass; analytic gradients are verified against central
finite differences in the test suite, so every derivative here is exact for
the implemented forward computation.

Fixed sinusoidal positional encodings are added before the first layer
(caption order is frame order, so position carries signal); an empty stack
is the identity.  Masked positions are excluded from attention via additive
-inf scores and zeroed in the output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .embedding import TokenEmbeddingSeq
from .errors import TbvadError, ValidationError

LN_EPS = 1e-5
_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def f32_exact(arr: np.ndarray) -> np.ndarray:
    """Round values to float32 precision but keep float64 storage.

    Parameters live on the float32 grid so the float32 model file format
    round-trips bitwise; all arithmetic stays in float64.
    """
    return arr.astype(np.float32).astype(np.float64)


def gelu(x: np.ndarray) -> np.ndarray:
    inner = _GELU_K * (x + _GELU_C * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    inner = _GELU_K * (x + _GELU_C * x ** 3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * _GELU_K * (1.0 + 3.0 * _GELU_C * x ** 2)


def sinusoidal_positions(t: int, d: int) -> np.ndarray:
    """Standard fixed sin/cos positional encodings, shape (t, d)."""
    pos = np.arange(t, dtype=np.float64)[:, None]
    idx = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / d)
    enc = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    """Row-wise layer norm; returns (y, cache) with pre-gain xhat in the cache."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def layer_norm_backward(dy: np.ndarray, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


@dataclass
class LayerParams:
    """Tensors of one pre-LN encoder layer (attention projections carry no bias)."""

    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: np.ndarray
    c1: np.ndarray
    w2: np.ndarray
    c2: np.ndarray

    FIELDS = ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "c1", "w2", "c2")


@dataclass
class EncoderParams:
    """All encoder tensors plus the pooled projection (w_d, b_d)."""

    num_layers: int
    num_heads: int
    d_model: int
    d_ff: int
    d_latent: int
    layers: list[LayerParams] = field(default_factory=list)
    w_d: np.ndarray | None = None
    b_d: np.ndarray | None = None

    def __post_init__(self):
        if self.d_model % self.num_heads != 0:
            raise ValidationError(
                f"d_model ({self.d_model}) must be divisible by num_heads ({self.num_heads})"
            )
        if len(self.layers) != self.num_layers:
            raise ValidationError("layer list length must equal num_layers")

    def tensors(self) -> dict[str, np.ndarray]:
        """Stable name -> array views over every tensor, for updates and serialization."""
        out: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            for name in LayerParams.FIELDS:
                out[f"layers.{i}.{name}"] = getattr(layer, name)
        out["w_d"] = self.w_d
        out["b_d"] = self.b_d
        return out


def init_encoder_params(num_layers: int, num_heads: int, d_model: int,
                        d_latent: int, seed: int, d_ff: int | None = None) -> EncoderParams:
    """Seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init; LN gains 1, biases 0."""
    d_ff = d_ff if d_ff is not None else 4 * d_model
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return f32_exact(rng.uniform(-bound, bound, size=shape))

    layers = []
    for _ in range(num_layers):
        layers.append(LayerParams(
            ln1_g=np.ones(d_model), ln1_b=np.zeros(d_model),
            wq=uniform((d_model, d_model), d_model),
            wk=uniform((d_model, d_model), d_model),
            wv=uniform((d_model, d_model), d_model),
            wo=uniform((d_model, d_model), d_model),
            ln2_g=np.ones(d_model), ln2_b=np.zeros(d_model),
            w1=uniform((d_ff, d_model), d_model), c1=uniform((d_ff,), d_model),
            w2=uniform((d_model, d_ff), d_ff), c2=uniform((d_model,), d_ff),
        ))
    return EncoderParams(
        num_layers=num_layers, num_heads=num_heads, d_model=d_model,
        d_ff=d_ff, d_latent=d_latent, layers=layers,
        w_d=uniform((d_latent, d_model), d_model),
        b_d=uniform((d_latent,), d_model),
    )


def _split_heads(x: np.ndarray, nh: int) -> np.ndarray:
    t, d = x.shape
    return x.reshape(t, nh, d // nh).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    nh, t, dh = x.shape
    return x.transpose(1, 0, 2).reshape(t, nh * dh)


def _layer_forward(x: np.ndarray, layer: LayerParams, mask: np.ndarray, nh: int):
    u, ln1_cache = layer_norm(x, layer.ln1_g, layer.ln1_b)
    q = _split_heads(u @ layer.wq.T, nh)
    k = _split_heads(u @ layer.wk.T, nh)
    v = _split_heads(u @ layer.wv.T, nh)
    dh = q.shape[-1]
    scores = q @ k.transpose(0, 2, 1) / math.sqrt(dh)
    scores[:, :, ~mask] = -np.inf
    shifted = scores - scores.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=-1, keepdims=True)
    o = _merge_heads(probs @ v)
    attn_out = o @ layer.wo.T
    a = x + attn_out

    w, ln2_cache = layer_norm(a, layer.ln2_g, layer.ln2_b)
    f1 = w @ layer.w1.T + layer.c1
    h1 = gelu(f1)
    f2 = h1 @ layer.w2.T + layer.c2
    out = a + f2
    cache = (u, ln1_cache, q, k, v, probs, o, a, ln2_cache, w, f1, h1)
    return out, cache


def _layer_backward(dout: np.ndarray, layer: LayerParams, cache, nh: int):
    u, ln1_cache, q, k, v, probs, o, a, ln2_cache, w, f1, h1 = cache
    grads = {}
    dh = q.shape[-1]

    # FFN branch.
    da = dout.copy()
    df2 = dout
    grads["c2"] = df2.sum(axis=0)
    grads["w2"] = df2.T @ h1
    dh1 = df2 @ layer.w2
    df1 = dh1 * gelu_grad(f1)
    grads["c1"] = df1.sum(axis=0)
    grads["w1"] = df1.T @ w
    dw = df1 @ layer.w1
    da_ln, grads["ln2_g"], grads["ln2_b"] = layer_norm_backward(dw, ln2_cache)
    da += da_ln

    # Attention branch.
    dx = da.copy()
    dattn = da
    grads["wo"] = dattn.T @ o
    do = _split_heads(dattn @ layer.wo, nh)
    dprobs = do @ v.transpose(0, 2, 1)
    dv = probs.transpose(0, 2, 1) @ do
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    dq = dscores @ k / math.sqrt(dh)
    dk = dscores.transpose(0, 2, 1) @ q / math.sqrt(dh)
    dq_f, dk_f, dv_f = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    grads["wq"] = dq_f.T @ u
    grads["wk"] = dk_f.T @ u
    grads["wv"] = dv_f.T @ u
    du = dq_f @ layer.wq + dk_f @ layer.wk + dv_f @ layer.wv
    du_ln, grads["ln1_g"], grads["ln1_b"] = layer_norm_backward(du, ln1_cache)
    dx += du_ln
    return dx, grads


def encoder_forward(x: np.ndarray, mask: np.ndarray, params: EncoderParams):
    """Run the stack; returns (h, caches).  Raises on NaN naming the layer.

    Inputs are scaled by sqrt(d_model) before the positional encodings are
    added, so content is not drowned out by the fixed sin/cos terms.
    """
    if x.shape[1] != params.d_model:
        raise ValidationError(f"input dim {x.shape[1]} does not match d_model {params.d_model}")
    if params.num_layers == 0:
        return x.copy(), []
    if not mask.any():
        raise ValidationError("encoder requires at least one unmasked position")
    z = x * math.sqrt(params.d_model) + sinusoidal_positions(x.shape[0], params.d_model)
    caches = []
    with np.errstate(over="ignore", invalid="ignore"):
        for i, layer in enumerate(params.layers):
            z, cache = _layer_forward(z, layer, mask, params.num_heads)
            if not np.all(np.isfinite(z)):
                raise TbvadError(f"non-finite values in encoder layer {i + 1} output")
            caches.append(cache)
    z = z * mask[:, None]
    return z, caches


def encoder_backward(dh: np.ndarray, mask: np.ndarray, params: EncoderParams, caches):
    """Backprop dh through the stack; returns (dx, grads keyed like tensors())."""
    grads = {name: np.zeros_like(arr) for name, arr in params.tensors().items()
             if not name.startswith("w_d") and not name.startswith("b_d")}
    if params.num_layers == 0:
        return dh.copy(), grads
    dz = dh * mask[:, None]
    for i in range(params.num_layers - 1, -1, -1):
        dz, layer_grads = _layer_backward(dz, params.layers[i], caches[i], params.num_heads)
        for name, g in layer_grads.items():
            grads[f"layers.{i}.{name}"] = g
    return dz * math.sqrt(params.d_model), grads


def encode_descriptions(x_d: TokenEmbeddingSeq, params: EncoderParams) -> TokenEmbeddingSeq:
    """Public forward pass: T x d_model in, T x d_model out, same mask."""
    h, _ = encoder_forward(x_d.vectors, x_d.mask, params)
    return TokenEmbeddingSeq(vectors=h, mask=x_d.mask.copy())


def project_description(h_d: TokenEmbeddingSeq, params: EncoderParams) -> np.ndarray:
    """Masked mean pool then affine projection into the latent space."""
    count = int(h_d.mask.sum())
    if count == 0:
        raise ValidationError("cannot project a fully masked sequence")
    pooled = h_d.vectors[h_d.mask].sum(axis=0) / count
    return params.w_d @ pooled + params.b_d
