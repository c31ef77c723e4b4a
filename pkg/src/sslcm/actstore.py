"""Activation tensors, manifests and score files.

LACT layout (little-endian, no padding, no footer)::

    0   4s  magic "LACT"
    4   u32 version (1)
    8   u32 n_layers
    12  u32 n_frames
    16  u32 n_features
    20  u32 reserved (0)
    24  f32 payload, [layer][frame][feature]
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from sslcm.errors import (
    ActivationFormatError,
    BadMagicError,
    DimensionError,
    DuplicateIdError,
    ManifestError,
    NonFiniteError,
    TruncatedPayloadError,
)

LACT_MAGIC = b"LACT"
LACT_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
HEADER_SIZE = _HEADER.size  # 24
# refuse headers whose payload could not sensibly be allocated
MAX_PAYLOAD_VALUES = 1 << 31

LABELS = ("bonafide", "spoof")
SPLITS = ("train", "validation", "test", "fusion")
RECORD_KEYS = ("utt_id", "path", "label", "corpus", "attack", "split")


@dataclass(frozen=True, eq=False)
class ActivationTensor:
    """Per-utterance stack of layer activations, shape (layers, frames, features).

    Layer 0 is the convolutional front-end output, so ``n_layers`` is the
    number of Transformer layers plus one.
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.ascontiguousarray(self.values, dtype="<f4")
        if v.ndim != 3:
            raise DimensionError(f"activation must be 3-D, got shape {v.shape}")
        if min(v.shape) < 1:
            raise DimensionError(f"every dimension must be >= 1, got {v.shape}")
        if not np.isfinite(v).all():
            raise NonFiniteError("activation contains NaN or Inf")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n_layers(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    @property
    def n_features(self) -> int:
        return self.values.shape[2]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ActivationTensor):
            return NotImplemented
        return self.values.shape == other.values.shape and self.values.tobytes() == other.values.tobytes()

    def layer(self, index: int) -> np.ndarray:
        return self.values[index]


def encode_activation(tensor: ActivationTensor) -> bytes:
    header = _HEADER.pack(LACT_MAGIC, LACT_VERSION, tensor.n_layers, tensor.n_frames, tensor.n_features, 0)
    return header + tensor.values.tobytes(order="C")


def write_activation(tensor: ActivationTensor, path: str | os.PathLike) -> None:
    if not isinstance(tensor, ActivationTensor):
        tensor = ActivationTensor(np.asarray(tensor))
    data = encode_activation(tensor)
    with open(path, "wb") as fh:
        fh.write(data)


def _parse_header(buf: bytes, source: str) -> tuple[int, int, int]:
    if len(buf) < 4 or buf[:4] != LACT_MAGIC:
        raise BadMagicError(f"{source}: bad magic {buf[:4]!r}, expected {LACT_MAGIC!r}")
    if len(buf) < HEADER_SIZE:
        raise TruncatedPayloadError(f"{source}: header truncated ({len(buf)} bytes)")
    _, version, n_layers, n_frames, n_features, _reserved = _HEADER.unpack_from(buf)
    if version != LACT_VERSION:
        raise ActivationFormatError(f"{source}: unsupported version {version}")
    if 0 in (n_layers, n_frames, n_features):
        raise DimensionError(f"{source}: zero dimension in header {(n_layers, n_frames, n_features)}")
    if n_layers * n_frames * n_features > MAX_PAYLOAD_VALUES:
        raise DimensionError(f"{source}: declared size {(n_layers, n_frames, n_features)} overflows")
    return n_layers, n_frames, n_features


def decode_activation(buf: bytes, source: str = "<bytes>") -> ActivationTensor:
    shape = _parse_header(buf, source)
    n = shape[0] * shape[1] * shape[2]
    payload = len(buf) - HEADER_SIZE
    if payload < 4 * n:
        raise TruncatedPayloadError(f"{source}: header declares {n} values, payload holds {payload // 4}")
    if payload > 4 * n:
        raise ActivationFormatError(f"{source}: {payload - 4 * n} trailing bytes after payload")
    values = np.frombuffer(buf, dtype="<f4", count=n, offset=HEADER_SIZE).reshape(shape)
    if not np.isfinite(values).all():
        raise NonFiniteError(f"{source}: payload contains NaN or Inf")
    return ActivationTensor(values)


def read_activation(path: str | os.PathLike) -> ActivationTensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode_activation(buf, str(path))


def read_activation_header(path: str | os.PathLike) -> tuple[int, int, int]:
    """Return (n_layers, n_frames, n_features) without reading the payload."""
    with open(path, "rb") as fh:
        buf = fh.read(HEADER_SIZE)
    return _parse_header(buf, str(path))


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    path: str
    label: str
    corpus: str
    attack: str = ""
    split: str = "test"

    def __post_init__(self) -> None:
        if not isinstance(self.utt_id, str) or not self.utt_id:
            raise ManifestError("utt_id must be a non-empty string")
        if self.label not in LABELS:
            raise ManifestError(f"unknown label {self.label!r} for {self.utt_id}")
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r} for {self.utt_id}")

    @property
    def is_bonafide(self) -> bool:
        return self.label == "bonafide"

    def to_json(self) -> dict[str, str]:
        return {k: getattr(self, k) for k in RECORD_KEYS}


@dataclass(frozen=True)
class Manifest:
    records: tuple[UtteranceRecord, ...]
    backbone_tag: str = ""
    n_layers: int = 0
    n_features: int = 0
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self) -> None:
        records = tuple(self.records)
        seen: set[str] = set()
        for r in records:
            if r.utt_id in seen:
                raise DuplicateIdError(f"duplicate utt_id {r.utt_id!r}")
            seen.add(r.utt_id)
        object.__setattr__(self, "records", records)
        object.__setattr__(self, "root", Path(self.root))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[UtteranceRecord]:
        return iter(self.records)

    def resolve(self, record: UtteranceRecord) -> Path:
        return self.root / record.path

    def load(self, record: UtteranceRecord) -> ActivationTensor:
        tensor = read_activation(self.resolve(record))
        if self.n_layers and tensor.n_layers != self.n_layers:
            raise DimensionError(f"{record.utt_id}: {tensor.n_layers} layers, manifest expects {self.n_layers}")
        if self.n_features and tensor.n_features != self.n_features:
            raise DimensionError(f"{record.utt_id}: {tensor.n_features} features, manifest expects {self.n_features}")
        return tensor

    def labels(self) -> dict[str, int]:
        """utt_id -> 1 for bona fide, 0 for spoof."""
        return {r.utt_id: int(r.is_bonafide) for r in self.records}

    def corpora(self) -> list[str]:
        return list(dict.fromkeys(r.corpus for r in self.records))

    def subset(self, keep) -> "Manifest":
        return Manifest(tuple(r for r in self.records if keep(r)), self.backbone_tag, self.n_layers, self.n_features, self.root)

    def validate(self) -> None:
        """Open every activation header and check it matches the manifest shape."""
        for r in self.records:
            n_layers, _, n_features = read_activation_header(self.resolve(r))
            if (n_layers, n_features) != (self.n_layers, self.n_features):
                raise DimensionError(
                    f"{r.utt_id}: shape ({n_layers}, *, {n_features}) != manifest ({self.n_layers}, *, {self.n_features})"
                )


def parse_manifest_lines(lines: Iterable[str], source: str = "<manifest>") -> list[UtteranceRecord]:
    records = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{source}:{lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise ManifestError(f"{source}:{lineno}: expected a JSON object")
        missing = [k for k in RECORD_KEYS if k not in obj]
        extra = sorted(set(obj) - set(RECORD_KEYS))
        if missing or extra:
            raise ManifestError(f"{source}:{lineno}: missing keys {missing}, unknown keys {extra}")
        if not all(isinstance(obj[k], str) for k in RECORD_KEYS):
            raise ManifestError(f"{source}:{lineno}: all values must be strings")
        try:
            rec = UtteranceRecord(**{k: obj[k] for k in RECORD_KEYS})
        except ManifestError as exc:
            raise ManifestError(f"{source}:{lineno}: {exc}") from None
        if rec.utt_id in seen:
            raise DuplicateIdError(f"{source}:{lineno}: duplicate utt_id {rec.utt_id!r} (first on line {seen[rec.utt_id]})")
        seen[rec.utt_id] = lineno
        records.append(rec)
    return records


def load_manifest(path: str | os.PathLike, backbone_tag: str | None = None) -> Manifest:
    """Read a JSONL manifest; activation paths resolve relative to its directory.

    Layer and feature counts come from the first record's LACT header.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        records = parse_manifest_lines(fh, str(path))
    root = path.parent
    n_layers = n_features = 0
    if records:
        n_layers, _, n_features = read_activation_header(root / records[0].path)
    tag = backbone_tag if backbone_tag is not None else root.name
    return Manifest(tuple(records), tag, n_layers, n_features, root)


def save_manifest(manifest: Manifest, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in manifest.records:
            fh.write(json.dumps(r.to_json(), sort_keys=False) + "\n")


@dataclass(frozen=True)
class ScoreSet:
    """Per-utterance detection scores of one system; higher means more bona fide."""

    system_tag: str
    entries: Mapping[str, float]

    def __post_init__(self) -> None:
        entries = {str(k): float(v) for k, v in dict(self.entries).items()}
        bad = [k for k, v in entries.items() if not math.isfinite(v)]
        if bad:
            raise ManifestError(f"non-finite score for {bad[0]!r}")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, utt_id: str) -> float:
        return self.entries[utt_id]

    def ids(self) -> list[str]:
        return list(self.entries)

    def array(self, ids: Iterable[str]) -> np.ndarray:
        return np.array([self.entries[i] for i in ids], dtype=np.float64)


def format_score(value: float) -> str:
    # 17 significant digits round-trip every float64 exactly
    return format(float(value), ".17g")


def save_scores(scores: ScoreSet, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for utt_id, s in scores.entries.items():
            fh.write(f"{utt_id}\t{format_score(s)}\n")


def load_scores(path: str | os.PathLike, system_tag: str | None = None) -> ScoreSet:
    path = Path(path)
    entries: dict[str, float] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0]:
                raise ManifestError(f"{path}:{lineno}: expected 'utt_id<TAB>score'")
            utt_id, raw = parts
            try:
                value = float(raw)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: cannot parse score {raw!r}") from None
            if not math.isfinite(value):
                raise ManifestError(f"{path}:{lineno}: non-finite score")
            if utt_id in entries:
                raise DuplicateIdError(f"{path}:{lineno}: duplicate utt_id {utt_id!r}")
            entries[utt_id] = value
    return ScoreSet(system_tag if system_tag is not None else path.stem, entries)
