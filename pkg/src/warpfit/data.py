"""Curve datasets: loading, saving, truncation, down-sampling and simulation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import DataFormatError, ParameterError
from .model import Curve, TemplateModel, _design_batch
from .splines import BSplineBasis, jupp_inverse

GROUP_CODES = {"upper": 1, "lower": 0}
DATASET_SCHEMA = "warpfit-dataset-v1"


@dataclass
class Dataset:
    """A collection of curves with optional binary labels (1 = "upper")."""

    curves: List[Curve]
    labels: Optional[Dict[str, int]] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.curves = sorted(self.curves, key=lambda c: c.id)
        ids = [c.id for c in self.curves]
        if len(set(ids)) != len(ids):
            raise DataFormatError("curve ids must be unique")
        if self.labels is not None:
            self.labels = {str(k): int(v) for k, v in self.labels.items()}
            unknown = set(self.labels) - set(ids)
            if unknown:
                raise DataFormatError(f"labels given for unknown ids: {sorted(unknown)}")
            missing = set(ids) - set(self.labels)
            if missing:
                raise DataFormatError(f"no label for ids: {sorted(missing)}")
            if any(v not in (0, 1) for v in self.labels.values()):
                raise DataFormatError("labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.curves)

    @property
    def ids(self) -> List[str]:
        return [c.id for c in self.curves]

    def label_vector(self) -> np.ndarray:
        if self.labels is None:
            raise DataFormatError("dataset has no labels")
        return np.array([self.labels[i] for i in self.ids], dtype=int)

    def subset(self, ids: Sequence[str]) -> "Dataset":
        keep = set(ids)
        labels = None if self.labels is None else {k: v for k, v in self.labels.items() if k in keep}
        return Dataset([c for c in self.curves if c.id in keep], labels, dict(self.meta))

    def total_rows(self) -> int:
        return sum(c.m for c in self.curves)


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def _parse_float(text, where):
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise DataFormatError(f"{where}: cannot parse {text!r} as a number") from None
    if not math.isfinite(v):
        raise DataFormatError(f"{where}: non-finite value {text!r}")
    return v


def _read_long_csv(path: Path, rows: Dict[str, list], default_id: Optional[str] = None):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataFormatError(f"{path}: empty file")
        header = [h.strip() for h in header]
        need = ["t", "value"] if default_id is not None else ["id", "t", "value"]
        if not all(h in header for h in need):
            raise DataFormatError(f"{path}:1: expected columns {need}, got {header}")
        col = {h: header.index(h) for h in header}
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            where = f"{path}:{lineno}"
            if len(rec) != len(header):
                raise DataFormatError(f"{where}: expected {len(header)} fields, got {len(rec)}")
            cid = rec[col["id"]].strip() if "id" in col else default_id
            if not cid:
                raise DataFormatError(f"{where}: empty id")
            t = _parse_float(rec[col["t"]], where)
            y = _parse_float(rec[col["value"]], where)
            rows.setdefault(cid, []).append((t, y, where))


def read_labels(path) -> Dict[str, int]:
    """Read an ``id,group`` CSV with group in {upper, lower} (or 1/0)."""
    labels = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if "id" not in header or "group" not in header:
            raise DataFormatError(f"{path}:1: expected columns id,group")
        ci, cg = header.index("id"), header.index("group")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            g = rec[cg].strip().lower()
            if g in GROUP_CODES:
                code = GROUP_CODES[g]
            elif g in ("0", "1"):
                code = int(g)
            else:
                raise DataFormatError(f"{path}:{lineno}: unknown group {rec[cg]!r}")
            labels[rec[ci].strip()] = code
    return labels


def load_curves(path, format: str = "long", labels_path=None) -> Dataset:
    """Load curves from a long CSV (``id,t,value``) or a directory of per-curve CSVs.

    In a directory each ``<id>.csv`` holds columns ``t,value``. Observations
    are sorted by ``t``; duplicated ``(id, t)`` pairs are rejected.
    """
    path = Path(path)
    rows: Dict[str, list] = {}
    if format == "long":
        _read_long_csv(path, rows)
    elif format == "dir":
        files = sorted(path.glob("*.csv"))
        if not files:
            raise DataFormatError(f"{path}: no .csv files found")
        for f in files:
            _read_long_csv(f, rows, default_id=f.stem)
    else:
        raise DataFormatError(f"unknown format {format!r}; expected 'long' or 'dir'")

    curves = []
    for cid, obs in rows.items():
        obs.sort(key=lambda r: r[0])
        for (t1, _, w1), (t2, _, w2) in zip(obs, obs[1:]):
            if t1 == t2:
                raise DataFormatError(f"duplicate observation (id={cid}, t={t1}) at {w1} and {w2}")
        curves.append(Curve(cid, [r[0] for r in obs], [r[1] for r in obs]))
    labels = read_labels(labels_path) if labels_path is not None else None
    meta = {"source": [str(path)] + ([str(labels_path)] if labels_path else [])}
    return Dataset(curves, labels, meta)


def write_long_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "t", "value"])
        for c in dataset.curves:
            for t, y in zip(c.grid, c.values):
                w.writerow([c.id, repr(float(t)), repr(float(y))])


def write_labels(dataset: Dataset, path) -> None:
    names = {v: k for k, v in GROUP_CODES.items()}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "group"])
        for cid in dataset.ids:
            w.writerow([cid, names[dataset.labels[cid]]])


def save_dataset(dataset: Dataset, path) -> None:
    """Write the JSON bundle (curves, labels, meta)."""
    doc = {
        "schema": DATASET_SCHEMA,
        "meta": dataset.meta,
        "labels": dataset.labels,
        "curves": [
            {"id": c.id, "t": c.grid.tolist(), "value": c.values.tolist()} for c in dataset.curves
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema") != DATASET_SCHEMA:
        raise DataFormatError(f"{path}: unsupported dataset schema {doc.get('schema')!r}")
    curves = [Curve(c["id"], c["t"], c["value"]) for c in doc["curves"]]
    return Dataset(curves, doc.get("labels"), doc.get("meta", {}))


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def truncate(dataset: Dataset, t_min: float) -> Dataset:
    """Drop observations with ``t < t_min``; curves left empty are removed."""
    curves, dropped = [], []
    for c in dataset.curves:
        keep = c.grid >= t_min
        if not np.any(keep):
            dropped.append(c.id)
            continue
        curves.append(c if keep.all() else Curve(c.id, c.grid[keep], c.values[keep]))
    labels = None
    if dataset.labels is not None:
        labels = {k: v for k, v in dataset.labels.items() if k not in dropped}
    meta = dict(dataset.meta)
    meta["truncation"] = float(t_min)
    meta["dropped_empty"] = meta.get("dropped_empty", []) + dropped
    return Dataset(curves, labels, meta)


def downsample_indices(grid: np.ndarray, m_target: int) -> np.ndarray:
    """Indices of the observations nearest to ``m_target`` equispaced positions.

    The positions are equispaced in ``t`` between the first and last grid
    point; the selection is strictly increasing and keeps both endpoints.
    """
    m = grid.size
    if m <= m_target:
        return np.arange(m)
    targets = np.linspace(grid[0], grid[-1], m_target)
    idx = np.empty(m_target, dtype=int)
    prev = -1
    for k, tk in enumerate(targets):
        lo = prev + 1
        hi = m - (m_target - k)  # leave room for the remaining picks
        j = int(np.searchsorted(grid, tk))
        cands = [c for c in (j - 1, j) if lo <= c <= hi]
        if not cands:
            j = min(max(j, lo), hi)
        else:
            j = min(cands, key=lambda c: (abs(grid[c] - tk), c))
        idx[k] = j
        prev = j
    idx[0], idx[-1] = 0, m - 1
    return idx


def downsample(dataset: Dataset, m_target: int = 30) -> Dataset:
    """Thin every curve with more than ``m_target`` points; shorter ones pass through."""
    if m_target < 2:
        raise ParameterError("m_target must be at least 2")
    curves = []
    for c in dataset.curves:
        if c.m <= m_target:
            curves.append(c)
        else:
            idx = downsample_indices(c.grid, m_target)
            curves.append(Curve(c.id, c.grid[idx], c.values[idx]))
    meta = dict(dataset.meta)
    meta["downsample"] = int(m_target)
    return Dataset(curves, dataset.labels, meta)


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


def _project(basis: BSplineBasis, f, n: int = 2001) -> np.ndarray:
    t = np.linspace(*basis.interval, n)
    return np.linalg.lstsq(basis(t), f(t), rcond=None)[0]


def default_template(
    p: int = 2,
    lam: Sequence[float] = (4.0, 1.0),
    sigma: float = 0.1,
    Sigma=0.04,
    interval: Tuple[float, float] = (-80.0, 0.0),
    tau0: Sequence[float] = (-60.0, -40.0, -20.0),
    degree: int = 3,
    n_interior_knots: int = 10,
) -> TemplateModel:
    """A synthetic curvature-like template.

    The mean has peaks at -40 and -20 (the "syphon") and a rise toward the
    origin; the first component modulates the two syphon peaks, the second
    the region near the origin, further components are smooth bumps.
    """
    lo, hi = interval
    basis = BSplineBasis.equispaced(degree, n_interior_knots, interval)

    def bump(c, w):
        return lambda t: np.exp(-0.5 * ((t - c) / w) ** 2)

    mean = _project(
        basis,
        lambda t: 0.15 + 0.5 * bump(-40, 4.5)(t) + 0.7 * bump(-20, 4.5)(t)
        + 0.35 * bump(-60, 6)(t) + 0.45 * bump(hi, 5)(t),
    )
    shapes = [
        lambda t: bump(-40, 5)(t) + bump(-20, 5)(t),
        lambda t: bump(hi, 6)(t),
        lambda t: bump(-60, 7)(t),
        lambda t: np.sin(2 * np.pi * (t - lo) / (hi - lo)),
        lambda t: np.cos(2 * np.pi * (t - lo) / (hi - lo)),
    ]
    if p > len(shapes):
        raise ParameterError(f"default_template supports p <= {len(shapes)}")
    lam = np.asarray(lam, dtype=float)[:p]
    if lam.size != p:
        raise ParameterError("need one variance per component")
    r = len(tau0)
    Sig = np.asarray(Sigma, dtype=float)
    Sig = Sig * np.eye(r) if Sig.ndim == 0 else Sig
    if p:
        J = basis.gram
        # Gram-Schmidt in L2 so the components keep their intended order
        cols = []
        for f in shapes[:p]:
            c = _project(basis, f)
            for prev in cols:
                c = c - (prev @ J @ c) * prev
            cols.append(c / math.sqrt(c @ J @ c))
        C = np.column_stack(cols)
        big = np.argmax(np.abs(C), axis=0)
        C = C * np.sign(C[big, np.arange(p)])
    else:
        C = np.zeros((basis.q, 0))
    return TemplateModel(basis, mean, C, lam, sigma**2, np.asarray(tau0), Sig)


@dataclass
class SimSpec:
    """Recipe for a synthetic dataset drawn from the warping model.

    ``grid`` is ``"common"`` (``m`` equispaced points on the whole interval)
    or ``"random"``: each curve gets ``m`` sorted uniform points on
    ``[start_i, t_hi]`` with ``start_i`` uniform on
    ``[t_lo, t_lo + incomplete_frac * (t_hi - t_lo)]``, mimicking curves
    that stop short of the far end. ``labels`` optionally maps to a dict
    with keys ``alpha``, ``b``, ``d`` for a logistic label mechanism on the
    drawn ``(z_i, tau_i)``. ``sigma`` overrides the model's noise standard
    deviation (0 gives noise-free curves).
    """

    model: TemplateModel
    n: int
    m: int = 30
    grid: str = "common"
    incomplete_frac: float = 0.4
    labels: Optional[dict] = None
    seed: int = 0
    sigma: Optional[float] = None

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ParameterError("n and m must be >= 1")
        if self.grid not in ("common", "random"):
            raise ParameterError(f"unknown grid policy {self.grid!r}")
        if self.sigma is not None and not self.sigma >= 0:
            raise ParameterError("sigma must be non-negative")
        if not 0 <= self.incomplete_frac < 1:
            raise ParameterError("incomplete_frac must be in [0, 1)")


@dataclass
class SimTruth:
    theta: np.ndarray
    tau: np.ndarray
    z: np.ndarray
    prob: Optional[np.ndarray]
    ids: List[str]

    def to_dict(self) -> dict:
        return {
            "ids": self.ids,
            "theta": self.theta.tolist(),
            "tau": self.tau.tolist(),
            "z": self.z.tolist(),
            "prob": None if self.prob is None else self.prob.tolist(),
        }


def _draw_mvn(rng, mean, cov, n):
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    L = V * np.sqrt(np.clip(w, 0.0, None))
    return mean + rng.standard_normal((n, mean.size)) @ L.T


def simulate(spec: SimSpec) -> Tuple[Dataset, SimTruth]:
    """Draw a dataset from the warping model; a pure function of ``spec``."""
    model = spec.model
    rng = np.random.default_rng(spec.seed)
    lo, hi = model.interval
    n, m = spec.n, spec.m
    theta = _draw_mvn(rng, model.theta0, model.Sigma, n)
    z = _draw_mvn(rng, np.zeros(model.p), np.diag(model.lam), n)
    if spec.grid == "common":
        starts = np.full(n, lo)
    else:
        starts = lo + rng.uniform(0.0, spec.incomplete_frac, n) * (hi - lo)
    width = len(str(n - 1))
    ids = [f"S{i:0{width}d}" for i in range(n)]
    sigma = math.sqrt(model.sigma2) if spec.sigma is None else spec.sigma
    curves, taus = [], []
    for i in range(n):
        if spec.grid == "common":
            grid = np.linspace(lo, hi, m)
        else:
            inner = np.sort(rng.uniform(starts[i], hi, max(m - 2, 0)))
            grid = np.concatenate(([starts[i]], inner, [hi]))[:m] if m > 1 else np.array([hi])
        Phi = _design_batch(model, grid, theta[i][None, :])[0]
        y = Phi @ (model.a + model.C @ z[i])
        y = y + sigma * rng.standard_normal(grid.size)
        curves.append(Curve(ids[i], grid, y))
        taus.append(jupp_inverse(theta[i], model.interval))
    tau = np.array(taus)

    labels, prob = None, None
    if spec.labels is not None:
        alpha = float(spec.labels.get("alpha", 0.0))
        b = np.asarray(spec.labels.get("b", np.zeros(model.p)), dtype=float)
        d = np.asarray(spec.labels.get("d", np.zeros(model.r)), dtype=float)
        eta = alpha + z @ b + tau @ d
        prob = 1.0 / (1.0 + np.exp(-eta))
        draws = (rng.uniform(size=n) < prob).astype(int)
        labels = dict(zip(ids, draws.tolist()))
    meta = {"simulated": True, "seed": spec.seed, "n": n, "m": m, "grid": spec.grid}
    return Dataset(curves, labels, meta), SimTruth(theta, tau, z, prob, ids)
