"""Score calibration and fusion by prior-weighted logistic regression.

Fused (or calibrated) scores are log-likelihood ratios ``sum_i a_i s_i + b``.
The training objective is Cllr (in bits) of those LLRs at an effective prior
``pi`` plus an L2 penalty on the system weights only.
"""
from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from sslcm.actstore import ScoreSet
from sslcm.errors import FusionError
from sslcm.evalkit import label_map

LN2 = math.log(2.0)


class OrientationWarning(UserWarning):
    """A fitted calibration scale is negative: the system scores spoof higher."""


def _logit(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise FusionError(f"prior must lie in (0, 1), got {p}")
    return math.log(p / (1.0 - p))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def cllr_arrays(bona: np.ndarray, spoof: np.ndarray, prior: float = 0.5) -> float:
    off = _logit(prior)
    bona = np.asarray(bona, dtype=np.float64)
    spoof = np.asarray(spoof, dtype=np.float64)
    if bona.size == 0 or spoof.size == 0:
        raise FusionError("Cllr needs both bona fide and spoof trials")
    c_bona = _softplus(-(bona + off)).mean() / LN2
    c_spoof = _softplus(spoof + off).mean() / LN2
    return float(prior * c_bona + (1.0 - prior) * c_spoof)


def cllr(scores: ScoreSet, labels, prior: float = 0.5) -> float:
    lab = label_map(labels)
    missing = [u for u in scores.entries if u not in lab]
    if missing:
        raise FusionError(f"no label for trial {missing[0]!r}")
    bona = [s for u, s in scores.entries.items() if lab[u] == 1]
    spoof = [s for u, s in scores.entries.items() if lab[u] == 0]
    return cllr_arrays(np.array(bona), np.array(spoof), prior)


# ---------------------------------------------------------------------------
# the convex fit


@dataclass
class LogisticFit:
    weights: np.ndarray
    bias: float
    objective: float
    grad_norm: float
    n_iter: int
    objective_trace: list[float] = field(default_factory=list)


def _objective(theta: np.ndarray, X: np.ndarray, y: np.ndarray, w: np.ndarray, off: float, reg: float,
               need_derivs: bool = True):
    k = X.shape[1]
    o = X @ theta[:k] + theta[k] + off
    # bona fide: softplus(-o); spoof: softplus(o)
    signed = np.where(y == 1, -o, o)
    value = float(np.dot(w, _softplus(signed)) / LN2 + reg * np.dot(theta[:k], theta[:k]))
    if not need_derivs:
        return value, None, None
    s = _sigmoid(signed)
    d1 = np.where(y == 1, -s, s) * w / LN2
    d2 = s * (1.0 - s) * w / LN2
    Xa = np.hstack([X, np.ones((X.shape[0], 1))])
    grad = Xa.T @ d1
    grad[:k] += 2.0 * reg * theta[:k]
    hess = (Xa * d2[:, None]).T @ Xa
    hess[np.arange(k), np.arange(k)] += 2.0 * reg
    return value, grad, hess


def logistic_fit(X: np.ndarray, y: np.ndarray, prior: float = 0.5, reg: float = 1e-6,
                 tol: float = 1e-8, max_iter: int = 10_000) -> LogisticFit:
    """Damped Newton on the prior-weighted logistic objective.

    Every accepted step satisfies an Armijo decrease, so ``objective_trace``
    is non-increasing. Raises FusionError if ``tol`` is not reached.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(int)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise FusionError("score matrix and labels disagree in size")
    n_bona = int((y == 1).sum())
    n_spoof = int((y == 0).sum())
    if n_bona == 0 or n_spoof == 0:
        raise FusionError("fusion needs both bona fide and spoof trials")
    if reg < 0:
        raise FusionError("regularisation must be >= 0")
    off = _logit(prior)
    w = np.where(y == 1, prior / n_bona, (1.0 - prior) / n_spoof)
    theta = np.zeros(X.shape[1] + 1)
    value, grad, hess = _objective(theta, X, y, w, off, reg)
    trace = [value]
    it = 0
    while np.linalg.norm(grad) > tol and it < max_iter:
        it += 1
        step = np.linalg.lstsq(hess, -grad, rcond=None)[0]
        slope = float(np.dot(grad, step))
        if slope >= 0:  # lstsq on a near-singular Hessian; fall back to steepest descent
            step, slope = -grad, -float(np.dot(grad, grad))
        t = 1.0
        for _ in range(60):
            cand = theta + t * step
            new_value, _, _ = _objective(cand, X, y, w, off, reg, need_derivs=False)
            if new_value <= value + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            break  # no representable decrease left
        theta = cand
        value, grad, hess = _objective(theta, X, y, w, off, reg)
        trace.append(value)
    gnorm = float(np.linalg.norm(grad))
    if gnorm > tol:
        raise FusionError(f"logistic regression did not converge: gradient norm {gnorm:.3e} after {it} iterations")
    return LogisticFit(theta[:-1].copy(), float(theta[-1]), value, gnorm, it, trace)


# ---------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class FusionModel:
    system_tags: tuple[str, ...]
    alpha: tuple[float, ...]
    beta: float
    prior: float = 0.5

    def __post_init__(self) -> None:
        object.__setattr__(self, "system_tags", tuple(self.system_tags))
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if len(set(self.system_tags)) != len(self.system_tags):
            raise FusionError("system tags must be unique")
        if len(self.alpha) != len(self.system_tags):
            raise FusionError("one coefficient per system required")
        if not all(math.isfinite(v) for v in (*self.alpha, self.beta)):
            raise FusionError("fusion coefficients must be finite")

    def to_json(self) -> dict:
        return {"system_tags": list(self.system_tags), "alpha": list(self.alpha), "beta": self.beta, "prior": self.prior}


@dataclass(frozen=True)
class CalibrationModel:
    system_tag: str
    a: float
    b: float
    prior: float = 0.5

    def __post_init__(self) -> None:
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise FusionError("calibration parameters must be finite")

    @property
    def inverted(self) -> bool:
        return self.a < 0

    def to_json(self) -> dict:
        return {"system_tag": self.system_tag, "a": self.a, "b": self.b, "prior": self.prior}


def aligned_matrix(systems: Sequence[ScoreSet]) -> tuple[list[str], np.ndarray]:
    """Stack scores of systems that must cover exactly the same trials."""
    if not systems:
        raise FusionError("need at least one system")
    ids = list(systems[0].entries)
    ref = set(ids)
    for s in systems[1:]:
        if set(s.entries) != ref:
            diff = sorted(ref.symmetric_difference(s.entries))
            raise FusionError(f"system {s.system_tag!r} scores a different trial set, e.g. {diff[0]!r}")
    return ids, np.column_stack([s.array(ids) for s in systems])


def _labels_for(ids: Sequence[str], labels) -> np.ndarray:
    lab = label_map(labels)
    missing = [u for u in ids if u not in lab]
    if missing:
        raise FusionError(f"no label for trial {missing[0]!r}")
    return np.array([lab[u] for u in ids])


def fit_fusion(systems: Sequence[ScoreSet], labels, prior: float = 0.5, reg: float = 1e-6) -> FusionModel:
    tags = [s.system_tag for s in systems]
    if len(set(tags)) != len(tags):
        raise FusionError(f"system tags must be unique, got {tags}")
    ids, X = aligned_matrix(systems)
    fit = logistic_fit(X, _labels_for(ids, labels), prior, reg)
    return FusionModel(tuple(tags), tuple(fit.weights), fit.bias, prior)


def fit_calibration(system: ScoreSet, labels, prior: float = 0.5, reg: float = 1e-6) -> CalibrationModel:
    model = fit_fusion([system], labels, prior, reg)
    cal = CalibrationModel(system.system_tag, model.alpha[0], model.beta, prior)
    if cal.inverted:
        warnings.warn(f"calibration of {system.system_tag!r} has negative scale a={cal.a:.4g}; "
                      "scores are oriented spoof-high", OrientationWarning, stacklevel=2)
    return cal


def _match(tags: Sequence[str], systems: Sequence[ScoreSet]) -> list[ScoreSet]:
    by_tag = {s.system_tag: s for s in systems}
    if len(by_tag) != len(systems) or set(by_tag) != set(tags):
        raise FusionError(f"model expects systems {list(tags)}, got {[s.system_tag for s in systems]}")
    return [by_tag[t] for t in tags]


def fuse_lr(model: FusionModel, systems: Sequence[ScoreSet], system_tag: str = "fused") -> ScoreSet:
    ids, X = aligned_matrix(_match(model.system_tags, systems))
    fused = X @ np.array(model.alpha) + model.beta
    return ScoreSet(system_tag, dict(zip(ids, fused.tolist())))


def fuse_sum(calibrations: Sequence[CalibrationModel], systems: Sequence[ScoreSet], system_tag: str = "fused") -> ScoreSet:
    tags = [c.system_tag for c in calibrations]
    if len(calibrations) != len(systems):
        raise FusionError("one calibration per system required")
    ids, X = aligned_matrix(_match(tags, systems))
    a = np.array([c.a for c in calibrations])
    b = np.array([c.b for c in calibrations])
    fused = (X * a).sum(axis=1) + b.sum()
    return ScoreSet(system_tag, dict(zip(ids, fused.tolist())))


# ---------------------------------------------------------------------------
# JSON


def save_model(model: FusionModel | CalibrationModel | Sequence[CalibrationModel], path: str | os.PathLike,
               digest: str = "") -> None:
    """Write a fusion model, one calibration, or a list of calibrations (sum mode)."""
    if isinstance(model, (FusionModel, CalibrationModel)):
        obj = model.to_json()
    else:
        obj = {"calibrations": [c.to_json() for c in model]}
    if digest:
        obj["config_digest"] = digest
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path: str | os.PathLike):
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    obj.pop("config_digest", None)
    try:
        if "calibrations" in obj:
            return [CalibrationModel(**c) for c in obj["calibrations"]]
        if "system_tags" in obj:
            return FusionModel(**obj)
        return CalibrationModel(**obj)
    except TypeError as exc:
        raise FusionError(f"{path}: malformed model JSON ({exc})") from None
