"""Logistic discrimination on amplitude scores and warp knots, with a
cross-validation harness for misclassification rates."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .exceptions import ParameterError, SeparationError

# coefficient norm beyond which an unpenalized fit is declared separated
_DIVERGENCE_NORM = 1e6


@dataclass(frozen=True, eq=False)
class FeatureRow:
    id: str
    z: np.ndarray
    tau: Optional[np.ndarray]
    label: int

    def __post_init__(self):
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float).ravel())
        if self.tau is not None:
            object.__setattr__(self, "tau", np.asarray(self.tau, dtype=float).ravel())
        if self.label not in (0, 1):
            raise ParameterError(f"row {self.id!r}: label must be 0 or 1, got {self.label}")


def features_from_effects(effects, labels: Mapping[str, int]) -> List[FeatureRow]:
    """Feature rows from posterior-mean scores and warp knots."""
    return [FeatureRow(e.id, e.z_hat, e.tau_hat, int(labels[e.id])) for e in effects]


@dataclass
class LogisticModel:
    """Fitted ``logit P(y=1) = alpha + b^T z + d^T (tau - tau_center)``."""

    alpha: float
    b: np.ndarray
    d: np.ndarray
    ridge: float
    tau_center: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iterations: int = 0

    @property
    def include_tau(self) -> bool:
        return self.d.size > 0

    @property
    def alpha_raw(self) -> float:
        """Intercept on the uncentered warp-knot scale."""
        return float(self.alpha - self.d @ self.tau_center) if self.include_tau else float(self.alpha)

    def coef(self) -> np.ndarray:
        return np.concatenate(([self.alpha], self.b, self.d))

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "alpha_raw": self.alpha_raw,
            "b": self.b.tolist(),
            "d": self.d.tolist(),
            "tau_center": self.tau_center.tolist(),
            "ridge": self.ridge,
            "iterations": self.iterations,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LogisticModel":
        return cls(
            alpha=float(d["alpha"]),
            b=np.asarray(d["b"], dtype=float),
            d=np.asarray(d["d"], dtype=float),
            ridge=float(d["ridge"]),
            tau_center=np.asarray(d.get("tau_center", []), dtype=float),
            iterations=int(d.get("iterations", 0)),
        )


def _design(rows: Sequence[FeatureRow], include_tau: bool, tau_center=None):
    p = rows[0].z.size
    Z = np.array([r.z for r in rows], dtype=float).reshape(len(rows), p)
    if any(r.z.size != p for r in rows):
        raise ParameterError("inconsistent score lengths across rows")
    blocks = [np.ones((len(rows), 1)), Z]
    if include_tau:
        if any(r.tau is None for r in rows):
            raise ParameterError("warp features requested but some rows have no tau")
        T = np.array([r.tau for r in rows], dtype=float)
        if tau_center is None:
            tau_center = T.mean(axis=0)
        blocks.append(T - tau_center)
    else:
        tau_center = np.zeros(0)
    return np.hstack(blocks), np.asarray(tau_center, dtype=float), p


def _penalized_loglik(X, y, beta, P):
    eta = X @ beta
    return float(y @ eta - np.sum(np.logaddexp(0.0, eta)) - 0.5 * beta @ P @ beta)


def fit_logistic(rows: Sequence[FeatureRow], include_tau: bool = True, ridge: float = 1e-6,
                 max_iter: int = 100, tol: float = 1e-10) -> LogisticModel:
    """Ridge-penalized logistic regression by iteratively reweighted least squares.

    The intercept is never penalized. Warp knots are centred at their sample
    mean before fitting; the centre is stored in the returned model.

    Raises
    ------
    SeparationError
        With ``ridge == 0``, when the labels are single-class or the
        coefficients diverge (complete or quasi-complete separation).
    """
    if len(rows) < 2:
        raise ParameterError("need at least two rows")
    if ridge < 0:
        raise ParameterError("ridge must be non-negative")
    X, center, p = _design(rows, include_tau)
    y = np.array([r.label for r in rows], dtype=float)
    k = X.shape[1]
    n_pos = y.sum()
    if n_pos in (0, len(y)):
        if ridge == 0:
            raise SeparationError("all labels are identical; the intercept diverges (use ridge > 0)")
        prev = (n_pos + 0.5) / (len(y) + 1.0)
        return LogisticModel(math.log(prev / (1 - prev)), np.zeros(p), np.zeros(k - 1 - p), ridge, center, 0)

    P = ridge * np.eye(k)
    P[0, 0] = 0.0
    beta = np.zeros(k)
    prev = (n_pos + 0.5) / (len(y) + 1.0)
    beta[0] = math.log(prev / (1 - prev))
    obj = _penalized_loglik(X, y, beta, P)
    it = 0
    for it in range(1, max_iter + 1):
        pi = expit(X @ beta)
        W = pi * (1.0 - pi)
        g = X.T @ (y - pi) - P @ beta
        H = X.T @ (W[:, None] * X) + P
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            if ridge == 0:
                raise SeparationError("singular information matrix; classes appear separable (use ridge > 0)")
            raise
        # step halving keeps the penalized likelihood non-decreasing
        t = 1.0
        while True:
            cand = beta + t * step
            new = _penalized_loglik(X, y, cand, P)
            if new >= obj - 1e-12 * abs(obj) or t < 1e-8:
                break
            t *= 0.5
        change = np.max(np.abs(cand - beta))
        beta, obj = cand, new
        if ridge == 0 and np.linalg.norm(beta) > _DIVERGENCE_NORM:
            raise SeparationError(
                f"coefficients diverged (norm {np.linalg.norm(beta):.3g}); classes are separable, use ridge > 0"
            )
        if change < tol:
            break
    else:
        if ridge == 0:
            pi = expit(X @ beta)
            if np.all(np.abs(pi - y) < 1e-6):
                raise SeparationError("fitted probabilities reach 0/1; classes are separable, use ridge > 0")
    return LogisticModel(float(beta[0]), beta[1 : 1 + p].copy(), beta[1 + p :].copy(), ridge, center, it)


def predict_probs(model: LogisticModel, rows: Sequence[FeatureRow]) -> np.ndarray:
    out = np.empty(len(rows))
    for i, row in enumerate(rows):
        out[i] = predict_prob(model, row)
    return out


def predict_prob(model: LogisticModel, row: FeatureRow) -> float:
    """``logistic(alpha + b^T z + d^T (tau - tau_center))``."""
    if row.z.size != model.b.size:
        raise ParameterError(f"row {row.id!r} has {row.z.size} scores, model expects {model.b.size}")
    eta = model.alpha + float(row.z @ model.b)
    if model.include_tau:
        if row.tau is None or row.tau.size != model.d.size:
            raise ParameterError(f"row {row.id!r} lacks the {model.d.size} warp features the model expects")
        eta += float((row.tau - model.tau_center) @ model.d)
    return float(expit(eta))


def classify(prob: float) -> int:
    return int(prob >= 0.5)


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------


def make_folds(n: int, folds: Optional[int] = None, seed: int = 0) -> np.ndarray:
    """Fold index for each of ``n`` subjects; ``folds=None`` or ``n`` gives LOOCV."""
    if folds is None or folds >= n:
        return np.arange(n)
    if folds < 2:
        raise ParameterError("need at least two folds")
    perm = np.random.default_rng(seed).permutation(n)
    out = np.empty(n, dtype=int)
    out[perm] = np.arange(n) % folds
    return out


@dataclass
class CVEntry:
    p: int
    include_tau: bool
    cmr: float
    n_evaluated: int
    flagged_folds: List[int]
    probs: Dict[str, float]
    predicted: Dict[str, int]

    @property
    def features(self) -> str:
        return "z+tau" if self.include_tau else "z"


@dataclass
class CVReport:
    """Cross-validated misclassification rates per number of components."""

    entries: List[CVEntry]
    fold_of: Dict[str, int]
    n_folds: int
    ridge: float
    seed: int

    def get(self, p: int, include_tau: bool) -> Optional[CVEntry]:
        for e in self.entries:
            if e.p == p and e.include_tau == include_tau:
                return e
        return None

    def cmr(self, p: int, include_tau: bool) -> Optional[float]:
        e = self.get(p, include_tau)
        return None if e is None else e.cmr

    def table(self) -> List[Tuple[int, Optional[float], Optional[float]]]:
        ps = sorted({e.p for e in self.entries})
        return [(p, self.cmr(p, False), self.cmr(p, True)) for p in ps]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["p", "features", "folds", "cmr", "flagged_folds"])
            for e in sorted(self.entries, key=lambda e: (e.p, e.include_tau)):
                w.writerow([e.p, e.features, self.n_folds, repr(e.cmr), ";".join(map(str, e.flagged_folds))])

    def to_table_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["p", "cmr_without_tau", "cmr_with_tau"])
            for p, without, with_ in self.table():
                w.writerow([p, "" if without is None else repr(without), "" if with_ is None else repr(with_)])

    def to_dict(self) -> dict:
        return {
            "n_folds": self.n_folds,
            "ridge": self.ridge,
            "seed": self.seed,
            "fold_of": self.fold_of,
            "entries": [
                {
                    "p": e.p,
                    "features": e.features,
                    "cmr": e.cmr,
                    "n_evaluated": e.n_evaluated,
                    "flagged_folds": e.flagged_folds,
                    "heldout_prob": e.probs,
                    "predicted": e.predicted,
                }
                for e in self.entries
            ],
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")


def _cv_one(rows: Sequence[FeatureRow], fold: np.ndarray, include_tau: bool, ridge: float):
    probs, preds, flagged = {}, {}, []
    for f in np.unique(fold):
        train = [r for r, k in zip(rows, fold) if k != f]
        test = [r for r, k in zip(rows, fold) if k == f]
        try:
            model = fit_logistic(train, include_tau=include_tau, ridge=ridge)
        except SeparationError:
            flagged.append(int(f))
            continue
        for r in test:
            pr = predict_prob(model, r)
            probs[r.id] = pr
            preds[r.id] = classify(pr)
    wrong = sum(preds[r.id] != r.label for r in rows if r.id in preds)
    cmr = wrong / len(preds) if preds else float("nan")
    return cmr, len(preds), flagged, probs, preds


def cross_validate(features: Mapping[int, Sequence[FeatureRow]], p_values: Optional[Sequence[int]] = None,
                   folds: Optional[int] = None, ridge: float = 1e-6, seed: int = 0,
                   include_tau: Sequence[bool] = (False, True)) -> CVReport:
    """Cross-validated misclassification rates of the logistic stage.

    ``features[p]`` holds one row per subject built from the template model
    with ``p`` components (fitted once on all curves). Folds are shared
    across ``p`` and feature sets. The score-only model with ``p = 0`` has
    no features and is skipped.
    """
    p_values = sorted(features) if p_values is None else list(p_values)
    ref_ids = [r.id for r in features[p_values[0]]]
    fold = make_folds(len(ref_ids), folds, seed)
    entries = []
    for p in p_values:
        rows = list(features[p])
        if [r.id for r in rows] != ref_ids:
            raise ParameterError(f"feature rows for p={p} are not aligned with p={p_values[0]}")
        for with_tau in include_tau:
            if p == 0 and not with_tau:
                continue
            cmr, n_eval, flagged, probs, preds = _cv_one(rows, fold, with_tau, ridge)
            entries.append(CVEntry(p, with_tau, cmr, n_eval, flagged, probs, preds))
    n_folds = int(fold.max()) + 1
    return CVReport(entries, dict(zip(ref_ids, fold.tolist())), n_folds, ridge, seed)


def cross_validate_pipeline(dataset, p_values: Sequence[int], config, folds: Optional[int] = None,
                            ridge: float = 1e-6, seed: int = 0,
                            include_tau: Sequence[bool] = (False, True)) -> CVReport:
    """Cross-validation that refits the registration model inside every fold.

    Slow (one EM fit per fold and per ``p``) but free of the optimism of
    fitting the template on the held-out curves.
    """
    from dataclasses import replace

    from .model import e_step, fit_em

    ids = dataset.ids
    labels = dataset.labels
    fold = make_folds(len(ids), folds, seed)
    curves = {c.id: c for c in dataset.curves}
    entries = []
    for p in p_values:
        cfg = replace(config, p=p)
        results = {wt: ({}, {}, []) for wt in include_tau}
        for f in np.unique(fold):
            train_ids = [i for i, k in zip(ids, fold) if k != f]
            test_ids = [i for i, k in zip(ids, fold) if k == f]
            fit = fit_em([curves[i] for i in train_ids], cfg)
            train_rows = features_from_effects(fit.effects, labels)
            test_rows = features_from_effects([e_step(curves[i], fit.model, cfg)[1] for i in test_ids], labels)
            for wt in include_tau:
                if p == 0 and not wt:
                    continue
                probs, preds, flagged = results[wt]
                try:
                    lm = fit_logistic(train_rows, include_tau=wt, ridge=ridge)
                except SeparationError:
                    flagged.append(int(f))
                    continue
                for r in test_rows:
                    probs[r.id] = predict_prob(lm, r)
                    preds[r.id] = classify(probs[r.id])
        for wt in include_tau:
            if p == 0 and not wt:
                continue
            probs, preds, flagged = results[wt]
            wrong = sum(preds[i] != labels[i] for i in preds)
            cmr = wrong / len(preds) if preds else float("nan")
            entries.append(CVEntry(p, wt, cmr, len(preds), flagged, probs, preds))
    return CVReport(entries, dict(zip(ids, fold.tolist())), int(fold.max()) + 1, ridge, seed)
