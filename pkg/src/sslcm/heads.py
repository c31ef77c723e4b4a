"""Mean-pooling (MP) and multi-head factorized attentive pooling (MHFA) heads.

Both heads are pure numpy functions in float64: parameter init, forward pass
to a single detection logit (higher = more bona fide) and exact analytic
gradients of the binary cross-entropy loss.

MHFA layout used here: softmax-normalised layer weights (layer 0 included)
aggregate the stack into key and value streams, each projected F -> D; H
attention heads score frames from the full keys, the value dimension is split
into H contiguous chunks of D/H, each chunk is attention-pooled over time and
the chunks are concatenated into the D-dim embedding.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterable, Sequence, Union

import numpy as np

from sslcm.errors import ConfigError, NumericalError, ShapeError

KINDS = ("mp", "mhfa")


@dataclass(frozen=True)
class HeadConfig:
    n_layers_in: int
    feat_dim: int
    embed_dim: int = 128
    n_heads: int = 8

    def __post_init__(self) -> None:
        if min(self.n_layers_in, self.feat_dim, self.embed_dim, self.n_heads) < 1:
            raise ConfigError(f"all head dimensions must be >= 1: {self}")
        if self.embed_dim % self.n_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")


class _Params:
    """Shared behaviour of the two parameter containers."""

    kind: str
    config: HeadConfig

    @classmethod
    def block_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls) if f.name != "config")

    def blocks(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.block_names()}

    def with_blocks(self, blocks: dict[str, np.ndarray]):
        return type(self)(self.config, **{k: blocks[k] for k in self.block_names()})

    def __post_init__(self) -> None:
        expected = self.block_shapes(self.config)
        for name in self.block_names():
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != expected[name]:
                raise ShapeError(f"{name}: shape {arr.shape}, expected {expected[name]}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def n_values(self) -> int:
        return sum(a.size for a in self.blocks().values())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.blocks().values()])

    def equals(self, other) -> bool:
        return (type(self) is type(other) and self.config == other.config
                and all(np.array_equal(a, b) for a, b in zip(self.blocks().values(), other.blocks().values())))


@dataclass(frozen=True, eq=False)
class MeanPoolParams(_Params):
    config: HeadConfig
    proj_weight: np.ndarray
    proj_bias: np.ndarray
    cls_weight: np.ndarray
    cls_bias: np.ndarray

    kind = "mp"

    @staticmethod
    def block_shapes(c: HeadConfig) -> dict[str, tuple]:
        return {"proj_weight": (c.feat_dim, c.embed_dim), "proj_bias": (c.embed_dim,),
                "cls_weight": (c.embed_dim,), "cls_bias": ()}


@dataclass(frozen=True, eq=False)
class MhfaParams(_Params):
    config: HeadConfig
    layer_w_k: np.ndarray
    layer_w_v: np.ndarray
    proj_k: np.ndarray
    proj_k_bias: np.ndarray
    proj_v: np.ndarray
    proj_v_bias: np.ndarray
    attn_weight: np.ndarray
    attn_bias: np.ndarray
    cls_weight: np.ndarray
    cls_bias: np.ndarray

    kind = "mhfa"

    @staticmethod
    def block_shapes(c: HeadConfig) -> dict[str, tuple]:
        L, F, D, H = c.n_layers_in, c.feat_dim, c.embed_dim, c.n_heads
        return {"layer_w_k": (L,), "layer_w_v": (L,), "proj_k": (F, D), "proj_k_bias": (D,),
                "proj_v": (F, D), "proj_v_bias": (D,), "attn_weight": (D, H), "attn_bias": (H,),
                "cls_weight": (D,), "cls_bias": ()}


HeadParams = Union[MeanPoolParams, MhfaParams]
PARAM_TYPES = {"mp": MeanPoolParams, "mhfa": MhfaParams}


def _check_kind(kind: str) -> None:
    if kind not in KINDS:
        raise ConfigError(f"unknown head kind {kind!r}, expected one of {KINDS}")


def head_param_count(config: HeadConfig, kind: str) -> int:
    _check_kind(kind)
    L, F, D, H = config.n_layers_in, config.feat_dim, config.embed_dim, config.n_heads
    if kind == "mp":
        return F * D + D + D + 1
    return 2 * L + 2 * (F * D + D) + D * H + H + D + 1


def init_params(config: HeadConfig, kind: str, seed: int) -> HeadParams:
    """Glorot-uniform matrices, zero biases and zero raw layer weights."""
    _check_kind(kind)
    cls = PARAM_TYPES[kind]
    rng = np.random.Generator(np.random.PCG64(seed))
    blocks = {}
    for name, shape in cls.block_shapes(config).items():
        if name.startswith("layer_w") or name.endswith("bias"):
            blocks[name] = np.zeros(shape)
        else:
            fan_in = shape[0]
            fan_out = shape[1] if len(shape) == 2 else 1
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            blocks[name] = rng.uniform(-limit, limit, size=shape)
    return cls(config, **blocks)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=axis, keepdims=True)


def _softmax_backward(p: np.ndarray, dp: np.ndarray, axis: int) -> np.ndarray:
    return p * (dp - np.sum(p * dp, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# mean pooling


def _mp_batch(z: np.ndarray, params: MeanPoolParams):
    """z: (B, T, F). The projection is affine, so pooling first is exact."""
    pooled = z.mean(axis=1)
    emb = pooled @ params.proj_weight + params.proj_bias
    logits = emb @ params.cls_weight + params.cls_bias
    return pooled, emb, logits


def _mp_backward(cache, params: MeanPoolParams, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    pooled, emb, _ = cache
    demb = np.outer(dlogits, params.cls_weight)
    return {
        "proj_weight": pooled.T @ demb,
        "proj_bias": demb.sum(axis=0),
        "cls_weight": emb.T @ dlogits,
        "cls_bias": np.asarray(dlogits.sum()),
    }


def mp_forward(z: np.ndarray, params: MeanPoolParams) -> tuple[np.ndarray, float]:
    """Embed one single-layer slice (T, F); returns (embedding, logit)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1 or z.shape[1] != params.config.feat_dim:
        raise ShapeError(f"mp input must be (T>=1, {params.config.feat_dim}), got {z.shape}")
    _, emb, logits = _mp_batch(z[None], params)
    return emb[0], float(logits[0])


# ---------------------------------------------------------------------------
# MHFA


@dataclass(frozen=True)
class MhfaTrace:
    keys: np.ndarray        # (T, D)
    vals: np.ndarray        # (T, D)
    attn: np.ndarray        # (T, H), columns sum to one
    embedding: np.ndarray   # (D,)
    logit: float


def _mhfa_batch(z: np.ndarray, p: MhfaParams) -> dict[str, np.ndarray]:
    """z: (B, L, T, F) -> forward cache."""
    B, L, T, F = z.shape
    H = p.config.n_heads
    Dh = p.config.embed_dim // H
    wk = softmax(p.layer_w_k)
    wv = softmax(p.layer_w_v)
    # contract layers on a contiguous (B, L, T*F) view; tensordot would copy z
    flat = z.reshape(B, L, T * F)
    zk = (wk @ flat).reshape(B, T, F)
    zv = (wv @ flat).reshape(B, T, F)
    D = p.config.embed_dim
    keys = (zk.reshape(-1, F) @ p.proj_k + p.proj_k_bias).reshape(B, T, D)
    vals = (zv.reshape(-1, F) @ p.proj_v + p.proj_v_bias).reshape(B, T, D)
    scores = keys @ p.attn_weight + p.attn_bias
    attn = softmax(scores, axis=1)
    vals_h = vals.reshape(B, T, H, Dh).transpose(0, 2, 1, 3)  # (B, H, T, Dh)
    pooled = (attn.transpose(0, 2, 1)[:, :, None, :] @ vals_h)[:, :, 0, :]
    emb = pooled.reshape(B, H * Dh)
    logits = emb @ p.cls_weight + p.cls_bias
    return {"z": z, "wk": wk, "wv": wv, "zk": zk, "zv": zv, "keys": keys, "vals": vals,
            "attn": attn, "emb": emb, "logits": logits}


def _mhfa_backward(c: dict, p: MhfaParams, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    z, attn, vals, keys = c["z"], c["attn"], c["vals"], c["keys"]
    B, T, H = attn.shape
    Dh = p.config.embed_dim // H
    flat = z.reshape(B, z.shape[1], -1)
    g = {"cls_weight": c["emb"].T @ dlogits, "cls_bias": np.asarray(dlogits.sum())}
    dpooled = np.outer(dlogits, p.cls_weight).reshape(B, H, Dh)
    vals_h = vals.reshape(B, T, H, Dh).transpose(0, 2, 1, 3)  # (B, H, T, Dh)
    dvals = (attn[:, :, :, None] * dpooled[:, None, :, :]).reshape(B, T, H * Dh)
    dattn = (vals_h @ dpooled[:, :, :, None])[..., 0].transpose(0, 2, 1)
    dscores = _softmax_backward(attn, dattn, axis=1)
    D = H * Dh
    g["attn_weight"] = keys.reshape(-1, D).T @ dscores.reshape(-1, H)
    g["attn_bias"] = dscores.sum(axis=(0, 1))
    dkeys = dscores @ p.attn_weight.T
    for stream, dout in (("k", dkeys), ("v", dvals)):
        zs = c["z" + stream]
        proj = getattr(p, "proj_" + stream)
        w = c["w" + stream]
        g["proj_" + stream] = zs.reshape(-1, zs.shape[-1]).T @ dout.reshape(-1, D)
        g["proj_" + stream + "_bias"] = dout.sum(axis=(0, 1))
        dz = (dout.reshape(-1, D) @ proj.T).reshape(B, T, -1)
        dw = (flat @ dz.reshape(B, -1, 1)).sum(axis=0)[:, 0]
        g["layer_w_" + stream] = _softmax_backward(w, dw, axis=0)
    return g


def _as_stack(z, config: HeadConfig) -> np.ndarray:
    arr = np.asarray(getattr(z, "values", z), dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"mhfa input must be (layers, T, F), got {arr.shape}")
    if arr.shape[0] != config.n_layers_in:
        raise ShapeError(f"layer-count mismatch: input has {arr.shape[0]}, head expects {config.n_layers_in}")
    if arr.shape[1] < 1 or arr.shape[2] != config.feat_dim:
        raise ShapeError(f"mhfa input must be ({config.n_layers_in}, T>=1, {config.feat_dim}), got {arr.shape}")
    return arr


def mhfa_forward(z, params: MhfaParams) -> MhfaTrace:
    """Full forward trace for one utterance stack (ActivationTensor or (L, T, F) array)."""
    arr = _as_stack(z, params.config)
    c = _mhfa_batch(arr[None], params)
    return MhfaTrace(c["keys"][0], c["vals"][0], c["attn"][0], c["emb"][0], float(c["logits"][0]))


# ---------------------------------------------------------------------------
# batched logits and loss


def _prepare(inputs: Sequence, params: HeadParams) -> list[np.ndarray]:
    cfg = params.config
    out = []
    for x in inputs:
        if params.kind == "mp":
            arr = np.asarray(getattr(x, "values", x), dtype=np.float64)
            if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] != cfg.feat_dim:
                raise ShapeError(f"mp input must be (T>=1, {cfg.feat_dim}), got {arr.shape}")
        else:
            arr = _as_stack(x, cfg)
        out.append(arr)
    return out


def _groups(arrays: list[np.ndarray]) -> dict[tuple, list[int]]:
    groups: dict[tuple, list[int]] = {}
    for i, a in enumerate(arrays):
        groups.setdefault(a.shape, []).append(i)
    return groups


def _forward(params: HeadParams, stacked: np.ndarray):
    if params.kind == "mp":
        cache = _mp_batch(stacked, params)
        return cache, cache[2]
    cache = _mhfa_batch(stacked, params)
    return cache, cache["logits"]


def _backward(params: HeadParams, cache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    if params.kind == "mp":
        return _mp_backward(cache, params, dlogits)
    return _mhfa_backward(cache, params, dlogits)


def forward_logits(params: HeadParams, inputs: Sequence) -> np.ndarray:
    """Logits for a list of inputs of possibly different lengths."""
    arrays = _prepare(inputs, params)
    logits = np.empty(len(arrays))
    for idx in _groups(arrays).values():
        _, lg = _forward(params, np.stack([arrays[i] for i in idx]))
        logits[idx] = lg
    return logits


def bce_with_logits(logits: np.ndarray, labels: np.ndarray, pos_weight: float = 1.0) -> np.ndarray:
    """Per-item binary cross-entropy, label 1 = bona fide."""
    labels = np.asarray(labels, dtype=np.float64)
    weights = np.where(labels > 0.5, pos_weight, 1.0)
    return weights * (np.logaddexp(0.0, logits) - labels * logits)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def loss_and_grad(batch: Iterable[tuple[object, int]], params: HeadParams, kind: str | None = None,
                  pos_weight: float = 1.0) -> tuple[float, HeadParams]:
    """Mean BCE over the batch and its exact gradient, shaped like ``params``."""
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    if kind is not None and kind != params.kind:
        raise ConfigError(f"kind {kind!r} does not match params of kind {params.kind!r}")
    arrays = _prepare([x for x, _ in batch], params)
    labels = np.array([float(y) for _, y in batch])
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 (spoof) or 1 (bona fide)")
    n = len(arrays)
    grads = {name: np.zeros_like(a) for name, a in params.blocks().items()}
    total = 0.0
    for idx in _groups(arrays).values():
        cache, logits = _forward(params, np.stack([arrays[i] for i in idx]))
        y = labels[idx]
        if not np.isfinite(logits).all():
            raise NumericalError("non-finite logits in forward pass")
        total += float(bce_with_logits(logits, y, pos_weight).sum())
        w = np.where(y > 0.5, pos_weight, 1.0)
        dlogits = w * (sigmoid(logits) - y) / n
        for name, g in _backward(params, cache, dlogits).items():
            grads[name] += g
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in parameter block {name!r}")
    return total / n, params.with_blocks(grads)
