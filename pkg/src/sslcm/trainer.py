"""Training loop: segment sampling, Adam with L2 weight decay, min-val-loss checkpointing."""
from __future__ import annotations

import csv
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from sslcm.actstore import ActivationTensor, Manifest
from sslcm.errors import ConfigError, NumericalError, ShapeError, TrainingError
from sslcm.heads import (
    KINDS,
    PARAM_TYPES,
    HeadConfig,
    HeadParams,
    bce_with_logits,
    forward_logits,
    init_params,
    loss_and_grad,
)
from sslcm.seeding import config_digest, derive_rng, derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    segment_frames: int = 150
    frames_per_second: int = 50
    lr: float = 1e-4
    beta1: float = 0.90
    beta2: float = 0.98
    epsilon: float = 1e-8
    weight_decay: float = 2e-6
    min_epochs: int = 6
    max_epochs: int = 10
    seed: int = 0
    pos_class_weight: float = 1.0
    embed_dim: int = 128
    n_heads: int = 8
    max_eval_frames: int = 1500

    def __post_init__(self) -> None:
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.segment_frames < 1 or self.batch_size < 1 or self.max_eval_frames < 1:
            raise ConfigError("segment_frames, batch_size and max_eval_frames must be >= 1")
        if not 1 <= self.min_epochs <= self.max_epochs:
            raise ConfigError("need 1 <= min_epochs <= max_epochs")
        if self.epsilon <= 0 or self.weight_decay < 0 or self.pos_class_weight <= 0:
            raise ConfigError("epsilon and pos_class_weight must be > 0, weight_decay >= 0")

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - names)
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {unknown}")
        return cls(**obj)

    def to_json(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return config_digest(self.to_json())


# ---------------------------------------------------------------------------
# segments


def sample_segment(tensor, layer: Optional[int], config: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Fixed-length training crop of ``config.segment_frames`` frames.

    ``layer=None`` keeps every layer (L, W, F); an int selects one layer (W, F).
    Longer utterances give a uniform random window, shorter ones are tiled
    cyclically.
    """
    values = getattr(tensor, "values", tensor)
    T = values.shape[1]
    W = config.segment_frames
    if T > W:
        start = int(rng.integers(0, T - W + 1))
        idx = slice(start, start + W)
    elif T == W:
        idx = slice(0, W)
    else:
        idx = np.arange(W) % T
    src = values if layer is None else values[layer]
    return np.asarray(src[..., idx, :] if layer is None else src[idx], dtype=np.float64)


# ---------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def zeros(cls, params: HeadParams) -> "AdamState":
        return cls(0, {k: np.zeros_like(a) for k, a in params.blocks().items()},
                   {k: np.zeros_like(a) for k, a in params.blocks().items()})


def adam_step(params: HeadParams, grads: HeadParams, state: AdamState, config: TrainConfig):
    """Classic bias-corrected Adam; weight decay enters as ``g + wd * theta``."""
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    gblocks = grads.blocks()
    for name, theta in params.blocks().items():
        g = gblocks[name]
        if g.shape != theta.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {theta.shape}")
        g = g + config.weight_decay * theta
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        update = config.lr * (m / bc1) / (np.sqrt(v / bc2) + config.epsilon)
        if not np.isfinite(update).all():
            raise NumericalError(f"non-finite Adam update in {name!r}")
        new_p[name] = theta - update
        new_m[name] = m
        new_v[name] = v
    return params.with_blocks(new_p), AdamState(t, new_m, new_v)


# ---------------------------------------------------------------------------
# checkpoints

_CKPT = struct.Struct("<4sIIIIIIiIdd")
CKPT_MAGIC = b"LHCK"
CKPT_VERSION = 1


@dataclass(frozen=True, eq=False)
class Checkpoint:
    epoch: int
    params: HeadParams
    val_loss: float
    val_eer: float
    layer: Optional[int] = None  # MP probes read a single layer; MHFA uses all

    @property
    def kind(self) -> str:
        return self.params.kind

    def to_bytes(self) -> bytes:
        c = self.params.config
        header = _CKPT.pack(CKPT_MAGIC, CKPT_VERSION, KINDS.index(self.kind), c.embed_dim, c.n_heads,
                            c.n_layers_in, c.feat_dim, -1 if self.layer is None else self.layer,
                            self.epoch, self.val_loss, self.val_eer)
        payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.params.blocks().values())
        return header + payload

    @classmethod
    def from_bytes(cls, buf: bytes, source: str = "<bytes>") -> "Checkpoint":
        if len(buf) < _CKPT.size or buf[:4] != CKPT_MAGIC:
            raise TrainingError(f"{source}: not a checkpoint file")
        _, version, kind_id, D, H, L, F, layer, epoch, val_loss, val_eer = _CKPT.unpack_from(buf)
        if version != CKPT_VERSION or kind_id >= len(KINDS):
            raise TrainingError(f"{source}: unsupported checkpoint version/kind")
        kind = KINDS[kind_id]
        config = HeadConfig(L, F, D, H)
        ptype = PARAM_TYPES[kind]
        offset = _CKPT.size
        blocks = {}
        for name, shape in ptype.block_shapes(config).items():
            n = int(np.prod(shape)) if shape else 1
            if offset + 8 * n > len(buf):
                raise TrainingError(f"{source}: truncated at block {name!r}")
            blocks[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
            offset += 8 * n
        if offset != len(buf):
            raise TrainingError(f"{source}: {len(buf) - offset} trailing bytes")
        return cls(epoch, ptype(config, **blocks), val_loss, val_eer, None if layer < 0 else layer)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(ckpt.to_bytes())


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return Checkpoint.from_bytes(fh.read(), str(path))


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_eer: float


@dataclass
class TrainResult:
    best: Checkpoint
    history: list[EpochRecord] = field(default_factory=list)


def _load_all(manifest: Manifest) -> list[ActivationTensor]:
    return [manifest.load(r) for r in manifest.records]


def eval_input(tensor, layer: Optional[int], max_frames: int) -> np.ndarray:
    """Inference view: first ``max_frames`` frames, one layer or the full stack."""
    values = getattr(tensor, "values", tensor)
    if layer is None:
        return np.asarray(values[:, :max_frames], dtype=np.float64)
    return np.asarray(values[layer, :max_frames], dtype=np.float64)


def _check_layer(layer: Optional[int], kind: str, n_layers: int) -> None:
    if kind == "mp":
        if layer is None or not 0 <= layer < n_layers:
            raise ConfigError(f"mp head needs a layer index in [0, {n_layers}), got {layer}")
    elif layer is not None:
        raise ConfigError("mhfa head consumes all layers; layer must be None")


def train_head(train: Manifest, val: Manifest, kind: str, layer: Optional[int], config: TrainConfig,
               *, init: Optional[HeadParams] = None,
               train_tensors: Optional[Sequence] = None,
               val_tensors: Optional[Sequence] = None) -> TrainResult:
    """Train one head and return the minimum-validation-loss checkpoint plus history.

    ``train_tensors``/``val_tensors`` let callers that train many probes on the
    same data (e.g. a layer sweep) skip re-reading the activation files.
    """
    from sslcm.evalkit import eer_from_arrays

    if kind not in KINDS:
        raise ConfigError(f"unknown head kind {kind!r}")
    if not train.records or not val.records:
        raise TrainingError("train and validation manifests must be non-empty")
    if (train.n_layers, train.n_features) != (val.n_layers, val.n_features):
        raise TrainingError(
            f"backbone shape mismatch: train ({train.n_layers}, {train.n_features}) vs val ({val.n_layers}, {val.n_features})"
        )
    _check_layer(layer, kind, train.n_layers)
    y_train = np.array([int(r.is_bonafide) for r in train.records])
    if y_train.min() == y_train.max():
        raise TrainingError("training set holds a single class")
    y_val = np.array([int(r.is_bonafide) for r in val.records])

    train_tensors = list(train_tensors) if train_tensors is not None else _load_all(train)
    val_tensors = list(val_tensors) if val_tensors is not None else _load_all(val)
    val_inputs = [eval_input(t, layer, config.max_eval_frames) for t in val_tensors]

    head_cfg = HeadConfig(train.n_layers, train.n_features, config.embed_dim, config.n_heads)
    params = init if init is not None else init_params(head_cfg, kind, derive_seed(config.seed, "init"))
    if params.config != head_cfg or params.kind != kind:
        raise ConfigError("initial parameters do not match the head configuration")
    state = AdamState.zeros(params)

    history: list[EpochRecord] = []
    best: Optional[Checkpoint] = None
    n = len(train_tensors)
    for epoch in range(1, config.max_epochs + 1):
        order = derive_rng(config.seed, "shuffle", epoch).permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = [
                (sample_segment(train_tensors[i], layer, config, derive_rng(config.seed, "segment", epoch, int(i))),
                 int(y_train[i]))
                for i in idx
            ]
            try:
                loss, grads = loss_and_grad(batch, params, pos_weight=config.pos_class_weight)
                params, state = adam_step(params, grads, state, config)
            except NumericalError as exc:
                raise TrainingError(f"divergence in epoch {epoch}: {exc}") from None
            total += loss * len(idx)
        train_loss = total / n
        logits = forward_logits(params, val_inputs)
        val_loss = float(bce_with_logits(logits, y_val, config.pos_class_weight).mean())
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise TrainingError(f"non-finite loss in epoch {epoch}")
        val_eer = eer_from_arrays(logits[y_val == 1], logits[y_val == 0]) if 0 < y_val.sum() < len(y_val) else float("nan")
        history.append(EpochRecord(epoch, train_loss, val_loss, val_eer))
        log.debug("epoch %d train_loss %.6f val_loss %.6f val_eer %.4f", epoch, train_loss, val_loss, val_eer)
        if best is None or val_loss < best.val_loss:
            best = Checkpoint(epoch, params, val_loss, val_eer, layer)
    return TrainResult(best, history)


def write_history(history: Sequence[EpochRecord], path: str | os.PathLike, digest: str = "") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if digest:
            fh.write(f"# config_digest={digest}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_eer"])
        for h in history:
            w.writerow([h.epoch, repr(h.train_loss), repr(h.val_loss), repr(h.val_eer)])
