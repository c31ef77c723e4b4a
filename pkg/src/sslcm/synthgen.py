"""Synthetic activation corpora with controllable per-layer separability.

Each frame of layer ``l`` is drawn as::

    c * (delta_l * scale_l / 2) * u_l + m_l + eps,   eps ~ N(0, sigma^2 I)

with ``c = +1`` for bona fide and ``-1`` for spoof, ``u_l`` a seeded unit
direction per layer and ``m_l`` a corpus-specific offset. Frames are i.i.d.
so mean pooling over ``n`` frames has a closed-form EER, see
:func:`oracle_eer`.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from sslcm.actstore import ActivationTensor, Manifest, UtteranceRecord, save_manifest, write_activation
from sslcm.errors import ConfigError
from sslcm.seeding import derive_rng


@dataclass(frozen=True)
class CorpusShift:
    corpus_tag: str
    separability_scale: float | tuple[float, ...] = 1.0
    mean_offset_scale: float = 0.0

    def __post_init__(self) -> None:
        scale = self.separability_scale
        if isinstance(scale, (list, tuple)):
            scale = tuple(float(s) for s in scale)
            values = scale
        else:
            scale = float(scale)
            values = (scale,)
        if not all(math.isfinite(s) and s >= 0 for s in values):
            raise ConfigError(f"{self.corpus_tag}: separability_scale must be finite and >= 0")
        if not (math.isfinite(self.mean_offset_scale) and self.mean_offset_scale >= 0):
            raise ConfigError(f"{self.corpus_tag}: mean_offset_scale must be finite and >= 0")
        object.__setattr__(self, "separability_scale", scale)
        object.__setattr__(self, "mean_offset_scale", float(self.mean_offset_scale))

    def scales(self, n_layers: int) -> np.ndarray:
        if isinstance(self.separability_scale, tuple):
            if len(self.separability_scale) != n_layers:
                raise ConfigError(
                    f"{self.corpus_tag}: {len(self.separability_scale)} scales for {n_layers} layers"
                )
            return np.array(self.separability_scale)
        return np.full(n_layers, self.separability_scale)


@dataclass(frozen=True)
class SynthProfile:
    n_layers: int
    n_features: int
    frames_per_utt: tuple[int, int]
    separability: tuple[float, ...]
    noise_sigma: float = 1.0
    corpora: tuple[CorpusShift, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "frames_per_utt", tuple(int(x) for x in self.frames_per_utt))
        object.__setattr__(self, "separability", tuple(float(d) for d in self.separability))
        object.__setattr__(self, "corpora", tuple(
            c if isinstance(c, CorpusShift) else CorpusShift(**c) for c in self.corpora
        ))
        if self.n_layers < 1 or self.n_features < 1:
            raise ConfigError("n_layers and n_features must be >= 1")
        if len(self.separability) != self.n_layers:
            raise ConfigError(f"{len(self.separability)} separability values for {self.n_layers} layers")
        if not all(math.isfinite(d) and d >= 0 for d in self.separability):
            raise ConfigError("separability values must be finite and >= 0")
        if not (math.isfinite(self.noise_sigma) and self.noise_sigma > 0):
            raise ConfigError("noise_sigma must be > 0")
        lo, hi = self.frames_per_utt
        if lo < 1 or hi < lo:
            raise ConfigError(f"invalid frame range {self.frames_per_utt}")
        tags = [c.corpus_tag for c in self.corpora]
        if len(set(tags)) != len(tags):
            raise ConfigError("corpus tags must be unique")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")
        for c in self.corpora:
            c.scales(self.n_layers)

    def corpus(self, tag: str) -> CorpusShift:
        for c in self.corpora:
            if c.corpus_tag == tag:
                return c
        raise ConfigError(f"unknown corpus_tag {tag!r}; profile has {[c.corpus_tag for c in self.corpora]}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["frames_per_utt"] = list(self.frames_per_utt)
        d["separability"] = list(self.separability)
        for c in d["corpora"]:
            if isinstance(c["separability_scale"], tuple):
                c["separability_scale"] = list(c["separability_scale"])
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "SynthProfile":
        allowed = {"n_layers", "n_features", "frames_per_utt", "separability", "noise_sigma", "corpora", "seed"}
        unknown = sorted(set(obj) - allowed)
        if unknown:
            raise ConfigError(f"unknown SynthProfile keys: {unknown}")
        corpora = []
        for c in obj.get("corpora", []):
            extra = sorted(set(c) - {"corpus_tag", "separability_scale", "mean_offset_scale"})
            if extra:
                raise ConfigError(f"unknown CorpusShift keys: {extra}")
            corpora.append(CorpusShift(**c))
        try:
            return cls(**{**obj, "corpora": tuple(corpora)})
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def load_profile(path: str | os.PathLike) -> SynthProfile:
    with open(path, encoding="utf-8") as fh:
        return SynthProfile.from_json(json.load(fh))


def shipped_config(name: str = "demo.json") -> dict:
    """A JSON file from the bundled ``sslcm/configs`` directory."""
    text = resources.files("sslcm.configs").joinpath(name).read_text(encoding="utf-8")
    return json.loads(text)


@dataclass(frozen=True)
class CorpusRequest:
    corpus_tag: str
    n_bona: int
    n_spoof: int
    split: str = "test"


@dataclass(frozen=True)
class SynthRun:
    """Profile plus which corpora to materialise and how large."""

    profile: SynthProfile
    generate: tuple[CorpusRequest, ...]
    backbone_tag: str = "synth"

    @classmethod
    def from_json(cls, obj: dict) -> "SynthRun":
        unknown = sorted(set(obj) - {"profile", "generate", "backbone_tag"})
        if unknown:
            raise ConfigError(f"unknown run-config keys: {unknown}")
        if "profile" not in obj:
            raise ConfigError("run config needs a 'profile'")
        profile = SynthProfile.from_json(obj["profile"])
        requests = []
        for g in obj.get("generate", []):
            extra = sorted(set(g) - {"corpus_tag", "n_bona", "n_spoof", "split"})
            if extra:
                raise ConfigError(f"unknown generate keys: {extra}")
            requests.append(CorpusRequest(**g))
        return cls(profile, tuple(requests), obj.get("backbone_tag", "synth"))

    def to_json(self) -> dict:
        return {"backbone_tag": self.backbone_tag, "profile": self.profile.to_json(),
                "generate": [asdict(g) for g in self.generate]}


def run_synthesis(run: SynthRun, out_dir: str | os.PathLike, threads: int = 1) -> dict[str, Manifest]:
    """Generate every requested corpus and save ``<corpus_tag>.jsonl`` manifests in ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifests = {}
    for req in run.generate:
        m = generate_corpus(run.profile, req.n_bona, req.n_spoof, req.corpus_tag, out_dir,
                            split=req.split, backbone_tag=run.backbone_tag, threads=threads)
        save_manifest(m, out_dir / f"{req.corpus_tag}.jsonl")
        manifests[req.corpus_tag] = m
    return manifests


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    while True:
        v = rng.standard_normal(dim)
        norm = np.linalg.norm(v)
        if norm > 1e-12:
            return v / norm


def layer_directions(profile: SynthProfile) -> np.ndarray:
    """Unit class-separation direction per layer, shape (n_layers, n_features)."""
    return np.stack([_unit(derive_rng(profile.seed, "direction", l), profile.n_features)
                     for l in range(profile.n_layers)])


def corpus_offsets(profile: SynthProfile, corpus_tag: str) -> np.ndarray:
    shift = profile.corpus(corpus_tag)
    return np.stack([
        shift.mean_offset_scale * _unit(derive_rng(profile.seed, "offset", corpus_tag, l), profile.n_features)
        for l in range(profile.n_layers)
    ])


def synth_utterance(profile: SynthProfile, corpus_tag: str, index: int, bonafide: bool,
                    directions: np.ndarray | None = None,
                    offsets: np.ndarray | None = None) -> ActivationTensor:
    """Draw one utterance; depends only on (seed, corpus_tag, index) and the label."""
    shift = profile.corpus(corpus_tag)
    if directions is None:
        directions = layer_directions(profile)
    if offsets is None:
        offsets = corpus_offsets(profile, corpus_tag)
    lo, hi = profile.frames_per_utt
    n_frames = int(derive_rng(profile.seed, "length", corpus_tag, index).integers(lo, hi + 1))
    half = 0.5 * np.asarray(profile.separability) * shift.scales(profile.n_layers)
    sign = 1.0 if bonafide else -1.0
    out = np.empty((profile.n_layers, n_frames, profile.n_features), dtype=np.float64)
    for l in range(profile.n_layers):
        rng = derive_rng(profile.seed, "noise", corpus_tag, index, l)
        eps = rng.standard_normal((n_frames, profile.n_features)) * profile.noise_sigma
        out[l] = sign * half[l] * directions[l] + offsets[l] + eps
    return ActivationTensor(out.astype(np.float32))


def generate_corpus(profile: SynthProfile, n_bona: int, n_spoof: int, corpus_tag: str,
                    out_dir: str | os.PathLike, *, split: str = "test", backbone_tag: str = "synth",
                    threads: int = 1) -> Manifest:
    """Write ``n_bona + n_spoof`` LACT files under ``out_dir/corpus_tag`` and return their manifest.

    Bona fide utterances take indices ``0..n_bona-1``; the manifest's root is
    ``out_dir`` so it can be saved there with relative paths intact.
    """
    profile.corpus(corpus_tag)
    if n_bona < 1 or n_spoof < 1:
        raise ConfigError("n_bona and n_spoof must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / corpus_tag).mkdir(parents=True, exist_ok=True)
    directions = layer_directions(profile)
    offsets = corpus_offsets(profile, corpus_tag)

    def make(index: int) -> UtteranceRecord:
        bona = index < n_bona
        utt_id = f"{corpus_tag}-{index:06d}"
        rel = f"{corpus_tag}/{utt_id}.lact"
        tensor = synth_utterance(profile, corpus_tag, index, bona, directions, offsets)
        write_activation(tensor, out_dir / rel)
        return UtteranceRecord(utt_id, rel, "bonafide" if bona else "spoof", corpus_tag,
                               "" if bona else "synth", split)

    indices = range(n_bona + n_spoof)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(make, indices))
    else:
        records = [make(i) for i in indices]
    return Manifest(tuple(records), backbone_tag, profile.n_layers, profile.n_features, out_dir)


def _std_normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def oracle_eer(delta: float, sigma: float, n_frames: int) -> float:
    """EER of the optimal linear detector on mean-pooled frames of the generator.

    Classes are ``+-delta/2`` apart along one direction, per-frame noise
    ``sigma``; pooling ``n_frames`` frames gives ``Phi(-delta*sqrt(n)/(2*sigma))``.
    """
    if not (math.isfinite(delta) and delta >= 0):
        raise ValueError("delta must be finite and >= 0")
    if not (math.isfinite(sigma) and sigma > 0):
        raise ValueError("sigma must be > 0")
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    return _std_normal_cdf(-delta * math.sqrt(n_frames) / (2.0 * sigma))


def oracle_llr(profile: SynthProfile, corpus_tag: str, layer: int, pooled: Sequence[float], n_frames: int) -> float:
    """Exact bona/spoof log-likelihood ratio of a mean-pooled frame vector."""
    u = layer_directions(profile)[layer]
    m = corpus_offsets(profile, corpus_tag)[layer]
    delta = profile.separability[layer] * profile.corpus(corpus_tag).scales(profile.n_layers)[layer]
    proj = float(np.dot(np.asarray(pooled, dtype=np.float64) - m, u))
    return delta * n_frames * proj / profile.noise_sigma**2
