"""Transformer-encoder reconstruction network with linear gene adapters.

Tokens are spots: each column of a ``g x (n+1)`` expression block becomes one
token. ``l_in`` lifts a token from gene space to the model width ``d_k``, a
stack of pre-norm encoder layers mixes tokens with presence-masked multi-head
self-attention, and ``l_out`` maps each token back to gene space.

Everything here is plain numpy with hand-derived backpropagation. Batched
arrays are token-major, ``[batch, tokens, genes]``; the single-block helpers
accept the ``[genes, tokens]`` layout used by :class:`ExpressionBlock`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .hexgrid import RING_OF_SLOT

LN_EPS = 1e-5
CHECKPOINT_MAGIC = b"SPCKLCKP"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    g: int
    d_k: int = 128
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int | None = None
    ring_embedding: bool = False
    dtype: str = "float32"
    # fixed per-gene affine applied before masking and undone on output; None = identity
    gene_center: tuple[float, ...] | None = None
    gene_scale: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.d_k)
        for name in ("g", "d_k", "num_layers", "num_heads", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_k % self.num_heads:
            raise ModelError(f"d_k={self.d_k} is not divisible by num_heads={self.num_heads}")
        if self.dtype not in ("float32", "float64"):
            raise ModelError(f"unsupported dtype {self.dtype!r}")
        if (self.gene_center is None) != (self.gene_scale is None):
            raise ModelError("gene_center and gene_scale must be given together")
        if self.gene_center is not None:
            center = tuple(float(v) for v in self.gene_center)
            scale = tuple(float(v) for v in self.gene_scale)
            if len(center) != self.g or len(scale) != self.g:
                raise ModelError(f"gene_center/gene_scale must have length g={self.g}")
            if not all(math.isfinite(c) for c in center) or not all(v > 0 and math.isfinite(v) for v in scale):
                raise ModelError("gene_center must be finite and gene_scale positive")
            object.__setattr__(self, "gene_center", center)
            object.__setattr__(self, "gene_scale", scale)

    @property
    def head_dim(self) -> int:
        return self.d_k // self.num_heads

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("gene_center", "gene_scale"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    def standardize(self, values, axis=-1):
        """Map expression to model coordinates along the gene ``axis``."""
        values = np.asarray(values)
        if self.gene_center is None:
            return values.astype(self.np_dtype, copy=False)
        c, s = self._affine(values.ndim, axis)
        return ((values - c) / s).astype(self.np_dtype)

    def unstandardize(self, values, axis=-1):
        values = np.asarray(values, dtype=np.float64)
        if self.gene_center is None:
            return values
        c, s = self._affine(values.ndim, axis)
        return values * s + c

    def _affine(self, ndim, axis):
        shape = [1] * ndim
        shape[axis] = self.g
        return (np.asarray(self.gene_center).reshape(shape), np.asarray(self.gene_scale).reshape(shape))


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes. Affine maps are stored as ``x @ W + b``."""
    d, g, f = config.d_k, config.g, config.ffn_dim
    shapes = {"l_in.weight": (g, d), "l_in.bias": (d,)}
    if config.ring_embedding:
        shapes["ring.embedding"] = (3, d)
    for i in range(config.num_layers):
        p = f"layers.{i}."
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"attn.w{proj}"] = (d, d)
            shapes[p + f"attn.b{proj}"] = (d,)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
        shapes[p + "ffn.w1"] = (d, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, d)
        shapes[p + "ffn.b2"] = (d,)
    shapes["l_out.weight"] = (d, g)
    shapes["l_out.bias"] = (g,)
    return shapes


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    dtype = config.np_dtype
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif name == "ring.embedding":
            arr = rng.normal(0.0, 0.02, size=shape)
        elif len(shape) == 2:
            bound = 1.0 / math.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            arr = np.zeros(shape)
        params[name] = arr.astype(dtype)
    return params


def count_parameters(params: dict[str, np.ndarray]) -> int:
    return int(sum(p.size for p in params.values()))


def _check_finite(arr, where):
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values in {where}")


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------


def attention(q, k, v, presence=None):
    """Single-head scaled dot-product attention ``softmax(q k^T / sqrt(d_h)) v``.

    Keys of absent tokens (``presence`` False) get zero weight. This is the
    same kernel path the batched encoder uses, exposed for one head.
    """
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    if q.ndim != 2 or q.shape != k.shape or k.shape[0] != v.shape[0]:
        raise ModelError(f"incompatible attention shapes {q.shape}, {k.shape}, {v.shape}")
    t = q.shape[0]
    presence = np.ones(t, dtype=bool) if presence is None else np.asarray(presence, dtype=bool)
    if presence.shape != (t,) or not presence.any():
        raise ModelError("presence must have one entry per token and at least one present token")
    scores = np.ascontiguousarray((q @ k.T / math.sqrt(q.shape[1]))[None])
    probs = np.empty_like(scores)
    kernels.masked_softmax_forward(scores, presence.astype(np.uint8)[None], 1, probs)
    return probs[0] @ v


def _layernorm(x2d, gain, bias):
    out = np.empty_like(x2d)
    xhat = np.empty_like(x2d)
    rstd = np.empty(x2d.shape[0], dtype=x2d.dtype)
    kernels.layernorm_forward(x2d, gain, bias, LN_EPS, out, xhat, rstd)
    return out, (xhat, rstd)


def forward_batch(params, config: ModelConfig, e_m, presence, *, keep_cache=False):
    """Reconstruct a batch of masked blocks.

    Parameters
    ----------
    e_m : array [B, T, g]
        Masked expression tokens.
    presence : bool array [B, T]
        False for padded tokens; they are zeroed on input and never attended to.

    Returns
    -------
    out : array [B, T, g]
    cache : dict or None
        Intermediates needed by :func:`backward_batch`.
    """
    dtype = config.np_dtype
    e_m = np.asarray(e_m, dtype=dtype)
    presence = np.asarray(presence, dtype=bool)
    if e_m.ndim != 3 or e_m.shape[2] != config.g:
        raise ModelError(f"expected input [B, T, {config.g}], got {e_m.shape}")
    B, T, g = e_m.shape
    if presence.shape != (B, T):
        raise ModelError(f"presence shape {presence.shape} does not match input {e_m.shape[:2]}")
    if not presence[:, 0].all():
        raise ModelError("token 0 (the center spot) must be present")
    d, H, dh = config.d_k, config.num_heads, config.head_dim
    N = B * T
    pres_u8 = np.ascontiguousarray(presence, dtype=np.uint8)
    scale = 1.0 / math.sqrt(dh)

    x_in = (e_m * presence[:, :, None]).reshape(N, g)
    h = x_in @ params["l_in.weight"]
    h += params["l_in.bias"]
    if config.ring_embedding:
        h = h.reshape(B, T, d) + params["ring.embedding"][RING_OF_SLOT[:T]]
        h = h.reshape(N, d)
    h = np.ascontiguousarray(h)
    cache = {"x_in": x_in, "layers": [], "shape": (B, T), "pres_u8": pres_u8} if keep_cache else None

    for i in range(config.num_layers):
        p = f"layers.{i}."
        a, ln1 = _layernorm(h, params[p + "ln1.gain"], params[p + "ln1.bias"])
        qkv = a @ _fused_qkv(params, p)
        qkv += np.concatenate([params[p + "attn.bq"], params[p + "attn.bk"], params[p + "attn.bv"]])
        qh, kh, vh = _split_qkv(qkv, B, T, H, dh)
        scores = np.matmul(qh, kh.transpose(0, 2, 1))
        scores *= scale
        probs = np.empty_like(scores)
        kernels.masked_softmax_forward(scores, pres_u8, H, probs)
        ctx = _merge_heads(np.matmul(probs, vh), B, T, H, dh)
        h1 = ctx @ params[p + "attn.wo"]
        h1 += params[p + "attn.bo"]
        h1 += h
        c, ln2 = _layernorm(h1, params[p + "ln2.gain"], params[p + "ln2.bias"])
        u = c @ params[p + "ffn.w1"]
        u += params[p + "ffn.b1"]
        z = np.empty_like(u)
        kernels.gelu_forward(u.reshape(-1), z.reshape(-1))
        h2 = z @ params[p + "ffn.w2"]
        h2 += params[p + "ffn.b2"]
        h2 += h1
        _check_finite(h2, f"encoder layer {i}")
        if keep_cache:
            cache["layers"].append(
                dict(a=a, ln1=ln1, qh=qh, kh=kh, vh=vh, probs=probs, ctx=ctx, c=c, ln2=ln2, u=u, z=z)
            )
        h = h2

    out = h @ params["l_out.weight"]
    out += params["l_out.bias"]
    if keep_cache:
        cache["h_final"] = h
    return out.reshape(B, T, g), cache


def _fused_qkv(params, p):
    return np.concatenate([params[p + "attn.wq"], params[p + "attn.wk"], params[p + "attn.wv"]], axis=1)


def _split_qkv(qkv, B, T, H, dh):
    """``[B*T, 3*d]`` -> three ``[B*H, T, dh]`` arrays."""
    heads = np.ascontiguousarray(qkv.reshape(B, T, 3, H, dh).transpose(2, 0, 3, 1, 4))
    return tuple(heads[j].reshape(B * H, T, dh) for j in range(3))


def _merge_qkv(dq, dk, dv, B, T, H, dh):
    stacked = np.stack([dq, dk, dv]).reshape(3, B, H, T, dh)
    return np.ascontiguousarray(stacked.transpose(1, 3, 0, 2, 4)).reshape(B * T, 3 * H * dh)


def _split_heads(x, B, T, H, dh):
    return np.ascontiguousarray(x.reshape(B, T, H, dh).transpose(0, 2, 1, 3)).reshape(B * H, T, dh)


def _merge_heads(x, B, T, H, dh):
    return np.ascontiguousarray(x.reshape(B, H, T, dh).transpose(0, 2, 1, 3)).reshape(B * T, H * dh)


def backward_batch(params, config: ModelConfig, cache, d_out):
    """Gradients of a scalar loss w.r.t. every parameter, given ``dL/d out``."""
    B, T = cache["shape"]
    d, H, dh = config.d_k, config.num_heads, config.head_dim
    N = B * T
    scale = 1.0 / math.sqrt(dh)
    grads = {}
    d_out = np.ascontiguousarray(d_out.reshape(N, config.g), dtype=config.np_dtype)

    grads["l_out.weight"] = cache["h_final"].T @ d_out
    grads["l_out.bias"] = d_out.sum(axis=0)
    dh_ = d_out @ params["l_out.weight"].T

    for i in reversed(range(config.num_layers)):
        p = f"layers.{i}."
        lc = cache["layers"][i]
        # feed-forward block: h2 = h1 + gelu(LN2(h1) W1 + b1) W2 + b2
        grads[p + "ffn.w2"] = lc["z"].T @ dh_
        grads[p + "ffn.b2"] = dh_.sum(axis=0)
        dz = dh_ @ params[p + "ffn.w2"].T
        du = np.empty_like(dz)
        kernels.gelu_backward(lc["u"].reshape(-1), dz.reshape(-1), du.reshape(-1))
        grads[p + "ffn.w1"] = lc["c"].T @ du
        grads[p + "ffn.b1"] = du.sum(axis=0)
        dc = du @ params[p + "ffn.w1"].T
        dh1 = _layernorm_backward(dc, lc["ln2"], params[p + "ln2.gain"], grads, p + "ln2")
        dh1 += dh_

        # attention block: h1 = h + MHA(LN1(h)) Wo + bo
        grads[p + "attn.wo"] = lc["ctx"].T @ dh1
        grads[p + "attn.bo"] = dh1.sum(axis=0)
        dctx = dh1 @ params[p + "attn.wo"].T
        dctx_h = _split_heads(dctx, B, T, H, dh)
        dprobs = np.matmul(dctx_h, lc["vh"].transpose(0, 2, 1))
        dvh = np.matmul(lc["probs"].transpose(0, 2, 1), dctx_h)
        dscores = np.empty_like(dprobs)
        kernels.softmax_backward(lc["probs"], dprobs, dscores)
        dscores *= scale
        dqh = np.matmul(dscores, lc["kh"])
        dkh = np.matmul(dscores.transpose(0, 2, 1), lc["qh"])
        dqkv = _merge_qkv(dqh, dkh, dvh, B, T, H, dh)
        gw = lc["a"].T @ dqkv
        gb = dqkv.sum(axis=0)
        for j, proj in enumerate("qkv"):
            grads[p + f"attn.w{proj}"] = np.ascontiguousarray(gw[:, j * d : (j + 1) * d])
            grads[p + f"attn.b{proj}"] = gb[j * d : (j + 1) * d].copy()
        da = dqkv @ _fused_qkv(params, p).T
        dh_ = _layernorm_backward(da, lc["ln1"], params[p + "ln1.gain"], grads, p + "ln1")
        dh_ += dh1

    if config.ring_embedding:
        per_slot = dh_.reshape(B, T, d).sum(axis=0)
        emb = np.zeros((3, d), dtype=config.np_dtype)
        np.add.at(emb, RING_OF_SLOT[:T], per_slot)
        grads["ring.embedding"] = emb
    grads["l_in.weight"] = cache["x_in"].T @ dh_
    grads["l_in.bias"] = dh_.sum(axis=0)

    ordered = {name: grads[name] for name in params}
    for name, gr in ordered.items():
        if not np.isfinite(gr).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
    return ordered


def _layernorm_backward(dy, ln_cache, gain, grads, prefix):
    xhat, rstd = ln_cache
    dx = np.empty_like(dy)
    dgain = np.empty_like(gain)
    dbias = np.empty_like(gain)
    kernels.layernorm_backward(np.ascontiguousarray(dy), xhat, rstd, gain, dx, dgain, dbias)
    grads[prefix + ".gain"] = dgain
    grads[prefix + ".bias"] = dbias
    return dx


def batch_loss(e_x, e_hat, presence):
    """Mean over blocks of each block's MSE across its present tokens."""
    e_x = np.asarray(e_x)
    e_hat = np.asarray(e_hat)
    if e_x.shape != e_hat.shape:
        raise ModelError(f"shape mismatch {e_x.shape} vs {e_hat.shape}")
    presence = np.asarray(presence, dtype=bool)
    B, T, g = e_x.shape
    weight = presence / (g * presence.sum(axis=1, keepdims=True) * B)
    diff = e_hat - e_x
    return float(np.sum(np.sum(diff * diff, axis=2) * weight)), diff, weight


def loss_and_gradients(params, config, e_x, e_m, presence):
    """Batch loss plus parameter gradients for blocks ``[B, T, g]``."""
    out, cache = forward_batch(params, config, e_m, presence, keep_cache=True)
    loss, diff, weight = batch_loss(np.asarray(e_x, dtype=config.np_dtype), out, presence)
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    d_out = 2.0 * diff * weight[:, :, None].astype(config.np_dtype)
    return loss, backward_batch(params, config, cache, d_out)


# single-block API, [g x (n+1)] layout -------------------------------------------------


def forward(params, config: ModelConfig, e_m, presence):
    """Reconstruct one masked block; input and output are ``[g, n+1]``."""
    e_m = np.asarray(e_m)
    if e_m.ndim != 2 or e_m.shape[0] != config.g:
        raise ModelError(f"expected block [{config.g}, n+1], got {e_m.shape}")
    out, _ = forward_batch(params, config, e_m.T[None], np.asarray(presence, bool)[None])
    return out[0].T


def loss(e_x, e_hat, presence=None):
    """Mean squared error between two ``[g, n+1]`` blocks over present columns."""
    e_x = np.asarray(e_x, dtype=float)
    e_hat = np.asarray(e_hat, dtype=float)
    if e_x.shape != e_hat.shape:
        raise ModelError(f"shape mismatch {e_x.shape} vs {e_hat.shape}")
    if presence is None:
        presence = np.ones(e_x.shape[1], dtype=bool)
    presence = np.asarray(presence, dtype=bool)
    diff = (e_hat - e_x)[:, presence]
    return float(np.mean(diff * diff))


def gradients(params, config, e_x, e_m, presence):
    """Exact gradients of :func:`loss` for one block w.r.t. every parameter."""
    _, grads = loss_and_gradients(
        params, config, np.asarray(e_x).T[None], np.asarray(e_m).T[None],
        np.asarray(presence, bool)[None],
    )
    return grads


def complete_spot(block, mask, params, config):
    """Completed center vector: observed where kept, reconstructed where masked.

    The mask is applied in model coordinates, so with a non-identity gene
    affine a hidden entry reads as that gene's center value.
    """
    from .masking import apply_mask

    scaled = dataclasses.replace(block, values=config.standardize(block.values, axis=0))
    e_m = apply_mask(scaled, mask)
    recon = config.unstandardize(forward(params, config, e_m, block.presence), axis=0)
    center = block.values[:, 0]
    return np.where(mask.m[:, 0], center, recon[:, 0].astype(center.dtype))


def complete_centers(params, config, e_m, presence, keep, center, batch_size=512):
    """Vectorised completion for many blocks.

    ``e_m``/``presence`` are token-major batches already in model
    coordinates, ``keep`` is the center-token mask ``[B, g]`` and ``center``
    the unmasked center values ``[B, g]`` in expression units.
    """
    recon = np.empty(center.shape, dtype=np.float64)
    for start in range(0, e_m.shape[0], batch_size):
        sl = slice(start, start + batch_size)
        out, _ = forward_batch(params, config, e_m[sl], presence[sl])
        recon[sl] = out[:, 0, :]
    return np.where(keep, center, config.unstandardize(recon))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    iteration: int = 0
    best_val_mse: float = float("inf")
    seed: int = 0
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_step: int = 0
    extra: dict = field(default_factory=dict)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write a checkpoint as magic + version + JSON header + raw tensors.

    Layout: ``b"SPCKLCKP"``, little-endian u32 version, u64 header length,
    UTF-8 JSON header, then each tensor's little-endian row-major bytes in
    header order. The header lists every tensor's name, dtype, shape, byte
    offset (relative to the end of the header) and byte length.
    """
    tensors = [("param/" + k, v) for k, v in ckpt.params.items()]
    tensors += [("optim/" + k, v) for k, v in ckpt.optimizer.items()]
    entries, blobs, offset = [], [], 0
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr)
        if not np.isfinite(arr).all():
            raise ModelError(f"refusing to save non-finite tensor {name}")
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str.lstrip("<>="), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": ckpt.config.to_dict(),
        "iteration": ckpt.iteration,
        "best_val_mse": ckpt.best_val_mse,
        "seed": ckpt.seed,
        "optimizer_step": ckpt.optimizer_step,
        "extra": ckpt.extra,
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path, *, expect_g=None, expect_d_k=None) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ModelError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[20 : 20 + hlen].decode("utf-8"))
    base = 20 + hlen
    config = ModelConfig(**header["config"])
    if expect_g is not None and config.g != expect_g:
        raise ModelError(f"checkpoint was trained for g={config.g}, dataset has g={expect_g}")
    if expect_d_k is not None and config.d_k != expect_d_k:
        raise ModelError(f"checkpoint has d_k={config.d_k}, expected {expect_d_k}")
    params, optim = {}, {}
    for ent in header["tensors"]:
        start = base + ent["offset"]
        arr = np.frombuffer(data[start : start + ent["nbytes"]], dtype=np.dtype("<" + ent["dtype"]))
        arr = arr.reshape(ent["shape"]).astype(np.dtype(ent["dtype"]))
        if not np.isfinite(arr).all():
            raise ModelError(f"{path}: non-finite tensor {ent['name']}")
        kind, name = ent["name"].split("/", 1)
        (params if kind == "param" else optim)[name] = arr
    expected = parameter_shapes(config)
    if list(params) != list(expected) or any(params[k].shape != expected[k] for k in expected):
        raise ModelError(f"{path}: parameter tensors do not match the stored config")
    return Checkpoint(config=config, params=params, iteration=header["iteration"],
                      best_val_mse=header["best_val_mse"], seed=header["seed"], optimizer=optim,
                      optimizer_step=header["optimizer_step"], extra=header.get("extra", {}))
