"""Scoring, EER and the layer-wise analysis tables."""
from __future__ import annotations

import csv
import dataclasses
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from sslcm.actstore import ActivationTensor, Manifest, ScoreSet
from sslcm.errors import ConfigError, EvaluationError, SslcmError
from sslcm.heads import forward_logits, softmax
from sslcm.seeding import derive_seed
from sslcm.trainer import Checkpoint, TrainConfig, eval_input, train_head


@dataclass(frozen=True)
class EvalConfig:
    max_frames: int = 1500
    frames_per_second: int = 50

    def __post_init__(self) -> None:
        if self.max_frames < 1:
            raise ConfigError("max_frames must be >= 1")

    @classmethod
    def from_seconds(cls, seconds: float = 30.0, frames_per_second: int = 50) -> "EvalConfig":
        return cls(int(round(seconds * frames_per_second)), frames_per_second)


# ---------------------------------------------------------------------------
# scoring


def _check_shape(tensor: ActivationTensor, ckpt: Checkpoint) -> None:
    c = ckpt.params.config
    if tensor.n_features != c.feat_dim:
        raise EvaluationError(f"feature dim {tensor.n_features} != checkpoint {c.feat_dim}")
    if tensor.n_layers != c.n_layers_in:
        raise EvaluationError(f"{tensor.n_layers} layers != checkpoint backbone {c.n_layers_in}")
    if ckpt.kind == "mp" and not 0 <= (ckpt.layer if ckpt.layer is not None else -1) < tensor.n_layers:
        raise EvaluationError(f"checkpoint layer {ckpt.layer} absent from a {tensor.n_layers}-layer tensor")


def score_utterance(tensor: ActivationTensor, ckpt: Checkpoint, config: EvalConfig = EvalConfig()) -> float:
    """Detection logit on the first ``max_frames`` frames."""
    _check_shape(tensor, ckpt)
    return float(forward_logits(ckpt.params, [eval_input(tensor, ckpt.layer, config.max_frames)])[0])


def score_tensors(tensors: Sequence[ActivationTensor], ckpt: Checkpoint, config: EvalConfig = EvalConfig()) -> np.ndarray:
    for t in tensors:
        _check_shape(t, ckpt)
    return forward_logits(ckpt.params, [eval_input(t, ckpt.layer, config.max_frames) for t in tensors])


def score_manifest(manifest: Manifest, ckpt: Checkpoint, config: EvalConfig = EvalConfig(),
                   system_tag: str = "", tensors: Optional[Sequence[ActivationTensor]] = None) -> ScoreSet:
    if tensors is None:
        tensors = [manifest.load(r) for r in manifest.records]
    logits = score_tensors(tensors, ckpt, config)
    return ScoreSet(system_tag or manifest.backbone_tag, {r.utt_id: float(s) for r, s in zip(manifest.records, logits)})


# ---------------------------------------------------------------------------
# EER


def eer_from_arrays(bona: np.ndarray, spoof: np.ndarray) -> float:
    """Interpolated crossing of FRR (bona < t) and FAR (spoof >= t).

    Thresholds run over the distinct pooled scores plus +inf; FRR rises and
    FAR falls along them, so the first point with FRR >= FAR brackets the
    crossing together with its predecessor.
    """
    bona = np.sort(np.asarray(bona, dtype=np.float64))
    spoof = np.sort(np.asarray(spoof, dtype=np.float64))
    if bona.size == 0 or spoof.size == 0:
        raise EvaluationError("EER needs at least one bona fide and one spoof trial")
    thresholds = np.unique(np.concatenate([bona, spoof]))
    frr = np.append(np.searchsorted(bona, thresholds, side="left") / bona.size, 1.0)
    far = np.append((spoof.size - np.searchsorted(spoof, thresholds, side="left")) / spoof.size, 0.0)
    i = int(np.argmax(frr >= far))
    if frr[i] == far[i]:
        return float(frr[i])
    gap_prev = far[i - 1] - frr[i - 1]
    gap_here = far[i] - frr[i]
    frac = gap_prev / (gap_prev - gap_here)
    return float(frr[i - 1] + frac * (frr[i] - frr[i - 1]))


def label_map(labels) -> dict[str, int]:
    if isinstance(labels, Manifest):
        return labels.labels()
    return {k: int(v) for k, v in dict(labels).items()}


def split_by_label(scores: ScoreSet, labels) -> tuple[np.ndarray, np.ndarray]:
    lab = label_map(labels)
    missing = [u for u in scores.entries if u not in lab]
    if missing:
        raise EvaluationError(f"{len(missing)} scored trials have no label, e.g. {missing[0]!r}")
    bona = np.array([s for u, s in scores.entries.items() if lab[u] == 1])
    spoof = np.array([s for u, s in scores.entries.items() if lab[u] == 0])
    return bona, spoof


def compute_eer(scores: ScoreSet, labels, *, require_all: bool = False) -> float:
    """EER as a fraction. ``labels`` is a Manifest or ``utt_id -> 1/0`` mapping.

    With ``require_all`` every labelled trial must also carry a score.
    """
    if require_all:
        unscored = [u for u in label_map(labels) if u not in scores.entries]
        if unscored:
            raise EvaluationError(f"{len(unscored)} labelled trials are unscored, e.g. {unscored[0]!r}")
    bona, spoof = split_by_label(scores, labels)
    if bona.size == 0 or spoof.size == 0:
        raise EvaluationError("EER needs both bona fide and spoof trials")
    return eer_from_arrays(bona, spoof)


# ---------------------------------------------------------------------------
# layer-wise analysis


@dataclass(frozen=True)
class SweepRow:
    layer: int
    corpus: str
    eer: float
    n_trials: int


@dataclass
class LayerSweepReport:
    backbone_tag: str
    rows: list[SweepRow]
    seed: int = 0
    config_digest: str = ""
    checkpoints: dict = field(default_factory=dict, repr=False, compare=False)

    def layers(self) -> list[int]:
        return sorted({r.layer for r in self.rows})

    def corpora(self) -> list[str]:
        return list(dict.fromkeys(r.corpus for r in self.rows))

    def eer(self, layer: int, corpus: str) -> float:
        for r in self.rows:
            if r.layer == layer and r.corpus == corpus:
                return r.eer
        raise KeyError((layer, corpus))


def _eval_groups(manifests: Sequence[Manifest]) -> list[tuple[str, Manifest, list[ActivationTensor]]]:
    groups = []
    for m in manifests:
        tensors = [m.load(r) for r in m.records]
        for corpus in m.corpora():
            keep = [i for i, r in enumerate(m.records) if r.corpus == corpus]
            sub = Manifest(tuple(m.records[i] for i in keep), m.backbone_tag, m.n_layers, m.n_features, m.root)
            groups.append((corpus, sub, [tensors[i] for i in keep]))
    return groups


def layer_sweep(train: Manifest, val: Manifest, eval_corpora: Sequence[Manifest], config: TrainConfig,
                eval_config: Optional[EvalConfig] = None, layers: Optional[Iterable[int]] = None,
                threads: int = 1) -> LayerSweepReport:
    """Train an independent MP probe per layer and score every eval corpus with it."""
    eval_config = eval_config or EvalConfig(config.max_eval_frames, config.frames_per_second)
    train_t = [train.load(r) for r in train.records]
    val_t = [val.load(r) for r in val.records]
    groups = _eval_groups(eval_corpora)
    for corpus, sub, _ in groups:
        if (sub.n_layers, sub.n_features) != (train.n_layers, train.n_features):
            raise EvaluationError(f"eval corpus {corpus!r} has a different backbone shape")
    layer_ids = list(layers) if layers is not None else list(range(train.n_layers))

    def run(layer: int):
        cfg = dataclasses.replace(config, seed=derive_seed(config.seed, "layer", layer) % 2**63)
        try:
            result = train_head(train, val, "mp", layer, cfg, train_tensors=train_t, val_tensors=val_t)
            rows = []
            for corpus, sub, tensors in groups:
                logits = score_tensors(tensors, result.best, eval_config)
                y = np.array([int(r.is_bonafide) for r in sub.records])
                rows.append(SweepRow(layer, corpus, eer_from_arrays(logits[y == 1], logits[y == 0]), len(y)))
        except SslcmError as exc:
            raise type(exc)(f"layer {layer}: {exc}") from exc
        return layer, result.best, rows

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(run, layer_ids))
    else:
        outputs = [run(l) for l in layer_ids]
    rows = [row for _, _, rs in outputs for row in rs]
    return LayerSweepReport(train.backbone_tag, rows, config.seed, config.digest(),
                            {layer: ckpt for layer, ckpt, _ in outputs})


def select_best_single_layer(report: LayerSweepReport, ood_corpora: Sequence[str]) -> int:
    """Layer with the lowest unweighted mean EER over ``ood_corpora``; ties go to the lowest index."""
    if not ood_corpora:
        raise EvaluationError("need at least one corpus tag")
    known = set(report.corpora())
    unknown = [c for c in ood_corpora if c not in known]
    if unknown:
        raise EvaluationError(f"unknown corpus tags {unknown}")
    table = {(r.layer, r.corpus): r.eer for r in report.rows}
    best_layer, best_mean = None, None
    for layer in report.layers():
        vals = [table[(layer, c)] for c in ood_corpora]
        mean = sum(vals) / len(vals)
        if best_mean is None or mean < best_mean:
            best_layer, best_mean = layer, mean
    return best_layer


def average_eer(eers: Sequence[tuple[str, float]], tags: Sequence[str]) -> float:
    counts: dict[str, list[float]] = defaultdict(list)
    for tag, e in eers:
        counts[tag].append(float(e))
    for t in tags:
        if len(counts.get(t, [])) != 1:
            raise EvaluationError(f"corpus {t!r} must appear exactly once, found {len(counts.get(t, []))}")
    return sum(counts[t][0] for t in tags) / len(tags)


@dataclass(frozen=True)
class LayerWeightReport:
    w_k: np.ndarray
    w_v: np.ndarray


def extract_layer_weights(ckpt: Checkpoint) -> LayerWeightReport:
    if ckpt.kind != "mhfa":
        raise EvaluationError(f"layer weights exist only for mhfa heads, got {ckpt.kind!r}")
    return LayerWeightReport(softmax(ckpt.params.layer_w_k), softmax(ckpt.params.layer_w_v))


# ---------------------------------------------------------------------------
# tables

SWEEP_HEADER = ["backbone", "layer", "corpus", "eer", "n_trials"]


def _write_digest(fh, digest: str) -> None:
    if digest:
        fh.write(f"# config_digest={digest}\n")


def _data_lines(fh):
    return (line for line in fh if not line.startswith("#"))


def write_sweep_csv(report: LayerSweepReport, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        _write_digest(fh, report.config_digest)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in report.rows:
            w.writerow([report.backbone_tag, r.layer, r.corpus, f"{r.eer:.6f}", r.n_trials])


def read_sweep_csv(path: str | os.PathLike) -> LayerSweepReport:
    digest = ""
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline()
        if first.startswith("# config_digest="):
            digest = first.strip().split("=", 1)[1]
        else:
            fh.seek(0)
        reader = csv.DictReader(_data_lines(fh))
        if reader.fieldnames != SWEEP_HEADER:
            raise EvaluationError(f"{path}: expected header {','.join(SWEEP_HEADER)}")
        rows, tags = [], set()
        for rec in reader:
            tags.add(rec["backbone"])
            rows.append(SweepRow(int(rec["layer"]), rec["corpus"], float(rec["eer"]), int(rec["n_trials"])))
    if len(tags) > 1:
        raise EvaluationError(f"{path}: mixes backbones {sorted(tags)}")
    return LayerSweepReport(tags.pop() if tags else "", rows, config_digest=digest)


def write_weights_csv(weights: LayerWeightReport, path: str | os.PathLike, digest: str = "") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        _write_digest(fh, digest)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "w_k", "w_v"])
        for i, (k, v) in enumerate(zip(weights.w_k, weights.w_v)):
            w.writerow([i, repr(float(k)), repr(float(v))])


def read_weights_csv(path: str | os.PathLike) -> LayerWeightReport:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(_data_lines(fh))
        if reader.fieldnames != ["layer", "w_k", "w_v"]:
            raise EvaluationError(f"{path}: expected header layer,w_k,w_v")
        rows = [(int(r["layer"]), float(r["w_k"]), float(r["w_v"])) for r in reader]
    rows.sort()
    return LayerWeightReport(np.array([r[1] for r in rows]), np.array([r[2] for r in rows]))


def write_plot_tsv(points: Iterable[tuple[object, str, float]], path: str | os.PathLike, digest: str = "") -> None:
    """Long-format (x, series, y) rows for any plotting tool."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        _write_digest(fh, digest)
        fh.write("x\tseries\ty\n")
        for x, series, y in points:
            fh.write(f"{x}\t{series}\t{y:.6f}\n")


def sweep_plot_points(report: LayerSweepReport) -> list[tuple[int, str, float]]:
    return [(r.layer, f"{report.backbone_tag}/{r.corpus}", r.eer) for r in report.rows]


def weight_plot_points(tag: str, weights: LayerWeightReport) -> list[tuple[int, str, float]]:
    pts = [(i, f"{tag}/w_k", float(w)) for i, w in enumerate(weights.w_k)]
    return pts + [(i, f"{tag}/w_v", float(w)) for i, w in enumerate(weights.w_v)]
