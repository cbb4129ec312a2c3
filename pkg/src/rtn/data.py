"""Synthetic domain-shift benchmarks, CSV feature ingestion, and batching.

Both generators place the class structure in the first two coordinates and
fill the remaining ``d - 2`` coordinates with isotropic noise.

* ``covariate_rotation``: c Gaussian clusters on a circle; the label is the
  generating cluster. Target inputs are the same construction rotated by
  ``severity`` radians in the first plane, so ``p(x) != q(x)``.
* ``conditional_boundary``: both domains draw inputs from the same marginal
  (clusters centred in angular sectors, or an isotropic Gaussian). Labels are
  the angular sector of a point. The target sectors are the source sectors
  rotated by ``severity`` radians, so ``f_s != f_t``. Target sectors are the
  ones whose boundaries sit in the low-density gaps between clusters.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import make_rng

FAMILIES = ("covariate_rotation", "conditional_boundary")


class DataFormatError(ValueError):
    """Malformed CSV or manifest input."""


class EvaluationUnavailable(RuntimeError):
    """Raised when target evaluation labels were not supplied."""


@dataclass(frozen=True)
class ShiftSpec:
    family: str = "conditional_boundary"
    severity: float = 0.6
    n_s: int = 800
    n_t: int = 800
    noise: float = 0.5
    seed: int = 0
    c: int = 4
    d: int = 10
    radius: float = 2.0
    clustered: bool = True

    def validate(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown shift family {self.family!r}")
        if self.severity < 0:
            raise ValueError("severity must be non-negative")
        if self.c < 2 or self.d < 2:
            raise ValueError("need c >= 2 classes and d >= 2 dimensions")
        if min(self.n_s, self.n_t) < 2 * self.c:
            raise ValueError(f"need at least {2 * self.c} examples per domain")
        if self.noise < 0 or self.radius < 0:
            raise ValueError("noise and radius must be non-negative")


@dataclass
class TrainingView:
    """Everything training may see: labeled source, unlabeled target."""
    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    c: int


@dataclass
class DomainDataset:
    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    c: int
    target_y_eval: np.ndarray | None = field(default=None, repr=False)
    provenance: str = ""

    def __post_init__(self):
        if self.source_x.ndim != 2 or self.target_x.ndim != 2:
            raise ValueError("inputs must be 2-D")
        if self.source_x.shape[1] != self.target_x.shape[1]:
            raise ValueError("source and target widths differ")
        if len(self.source_y) != len(self.source_x):
            raise ValueError("source label count does not match rows")
        labels = [self.source_y]
        if self.target_y_eval is not None:
            if len(self.target_y_eval) != len(self.target_x):
                raise ValueError("target label count does not match rows")
            labels.append(self.target_y_eval)
        for y in labels:
            if y.size and (y.min() < 0 or y.max() >= self.c):
                raise ValueError(f"labels must lie in [0, {self.c})")

    @property
    def d(self) -> int:
        return self.source_x.shape[1]

    @property
    def has_eval(self) -> bool:
        return self.target_y_eval is not None

    def eval_labels(self) -> np.ndarray:
        if self.target_y_eval is None:
            raise EvaluationUnavailable("dataset has no target evaluation labels")
        return self.target_y_eval

    def training_view(self) -> TrainingView:
        return TrainingView(self.source_x, self.source_y, self.target_x, self.c)


# --- generators -------------------------------------------------------------

def rotation_2d(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def cluster_means(spec: ShiftSpec) -> np.ndarray:
    """``[c x 2]`` cluster centres at the middle of each angular sector."""
    angles = 2 * np.pi * (np.arange(spec.c) + 0.5) / spec.c
    return spec.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def sector_labels(x: np.ndarray, c: int, offset: float = 0.0) -> np.ndarray:
    """Index of the angular sector of width 2π/c (starting at ``offset``) holding x[:, :2]."""
    angle = np.arctan2(x[:, 1], x[:, 0]) - offset
    k = np.floor(np.mod(angle, 2 * np.pi) / (2 * np.pi / c)).astype(np.int64)
    return np.minimum(k, c - 1)


def _balanced_labels(n, c, rng):
    return rng.permutation(np.arange(n) % c)


def _sample_marginal(spec, n, rng):
    if spec.clustered:
        which = _balanced_labels(n, spec.c, rng)
        x = rng.normal(0.0, spec.noise, size=(n, spec.d))
        x[:, :2] += cluster_means(spec)[which]
    else:
        x = rng.normal(0.0, 1.0, size=(n, spec.d))
        which = None
    return x, which


def gen_covariate_shift(spec: ShiftSpec) -> DomainDataset:
    if spec.family != "covariate_rotation":
        raise ValueError(f"gen_covariate_shift needs family covariate_rotation, got {spec.family!r}")
    spec.validate()
    rng = make_rng(spec.seed)
    means = cluster_means(spec)
    xs_list, ys_list = [], []
    for n in (spec.n_s, spec.n_t):
        y = _balanced_labels(n, spec.c, rng)
        x = rng.normal(0.0, spec.noise, size=(n, spec.d))
        x[:, :2] += means[y]
        xs_list.append(x)
        ys_list.append(y)
    xt = xs_list[1]
    xt[:, :2] = xt[:, :2] @ rotation_2d(spec.severity).T
    return DomainDataset(xs_list[0], ys_list[0], xt, spec.c, ys_list[1],
                         provenance=json.dumps(asdict(spec), sort_keys=True))


def _quota_sample(spec, n, offset, rng):
    """Draw ``n`` points from the shared marginal with class counts balanced to ±1."""
    quota = np.bincount(np.arange(n) % spec.c, minlength=spec.c)
    taken = np.zeros(spec.c, dtype=np.int64)
    xs, ys = [], []
    while taken.sum() < n:
        x, _ = _sample_marginal(spec, n, rng)
        y = sector_labels(x, spec.c, offset)
        for xi, yi in zip(x, y):
            if taken[yi] < quota[yi]:
                xs.append(xi)
                ys.append(yi)
                taken[yi] += 1
    order = rng.permutation(n)
    return np.array(xs)[order], np.array(ys, dtype=np.int64)[order]


def source_offset(spec: ShiftSpec) -> float:
    """Angular offset of the source sectors; target sectors start at 0."""
    return -spec.severity


def gen_conditional_shift(spec: ShiftSpec) -> DomainDataset:
    if spec.family != "conditional_boundary":
        raise ValueError(f"gen_conditional_shift needs family conditional_boundary, got {spec.family!r}")
    spec.validate()
    rng = make_rng(spec.seed)
    xs, ys = _quota_sample(spec, spec.n_s, source_offset(spec), rng)
    xt, yt = _quota_sample(spec, spec.n_t, 0.0, rng)
    return DomainDataset(xs, ys, xt, spec.c, yt,
                         provenance=json.dumps(asdict(spec), sort_keys=True))


def generate(spec: ShiftSpec) -> DomainDataset:
    if spec.family == "covariate_rotation":
        return gen_covariate_shift(spec)
    return gen_conditional_shift(spec)


def oracle_source_accuracy(ds: DomainDataset, spec: ShiftSpec) -> tuple[float, float]:
    """Accuracy of the true source labeling rule on (source, target)."""
    if spec.family == "covariate_rotation":
        means = cluster_means(spec)

        def rule(x):
            return np.argmin(((x[:, None, :2] - means[None]) ** 2).sum(-1), axis=1)
    else:
        def rule(x):
            return sector_labels(x, spec.c, source_offset(spec))
    return (float(np.mean(rule(ds.source_x) == ds.source_y)),
            float(np.mean(rule(ds.target_x) == ds.eval_labels())))


# --- CSV I/O ----------------------------------------------------------------

def _read_rows(path, labeled):
    rows, labels = [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or (lineno == 1 and text.startswith("#")):
                continue
            cells = next(csv.reader([text]))
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise DataFormatError(f"{path}:{lineno}: expected {width} columns, got {len(cells)}")
            try:
                values = [float(v) for v in (cells[:-1] if labeled else cells)]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in values):
                raise DataFormatError(f"{path}:{lineno}: non-finite value")
            if labeled:
                try:
                    label = int(cells[-1])
                except ValueError:
                    raise DataFormatError(f"{path}:{lineno}: label {cells[-1]!r} is not an integer") from None
                if label < 0:
                    raise DataFormatError(f"{path}:{lineno}: negative label {label}")
                labels.append((lineno, label))
            rows.append(values)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return np.array(rows, dtype=np.float64), labels


def load_features_csv(path_source_labeled, path_target_unlabeled, path_target_eval=None,
                      c: int | None = None) -> DomainDataset:
    """Load precomputed features. Labeled files carry the class as the last column.

    ``path_target_eval`` may be None or empty, in which case evaluation
    queries raise :class:`EvaluationUnavailable`. When ``c`` is omitted it is
    inferred as one more than the largest label seen.
    """
    xs, src_labels = _read_rows(path_source_labeled, labeled=True)
    xt, _ = _read_rows(path_target_unlabeled, labeled=False)
    if xs.shape[1] != xt.shape[1]:
        raise DataFormatError(
            f"{path_target_unlabeled}: width {xt.shape[1]} does not match source width {xs.shape[1]}")
    eval_labels = None
    if path_target_eval:
        xe, eval_labels = _read_rows(path_target_eval, labeled=True)
        if xe.shape != xt.shape:
            raise DataFormatError(f"{path_target_eval}: shape {xe.shape} does not match target {xt.shape}")
    all_labels = src_labels + (eval_labels or [])
    if c is None:
        c = max(label for _, label in all_labels) + 1
    for path, labels in ((path_source_labeled, src_labels), (path_target_eval, eval_labels or [])):
        for lineno, label in labels:
            if label >= c:
                raise DataFormatError(f"{path}:{lineno}: label {label} >= class count {c}")
    ys = np.array([l for _, l in src_labels], dtype=np.int64)
    yt = None if eval_labels is None else np.array([l for _, l in eval_labels], dtype=np.int64)
    return DomainDataset(xs, ys, xt, c, yt, provenance=str(path_source_labeled))


def _write_rows(path, x, y=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for i, row in enumerate(x):
            cells = [repr(float(v)) for v in row]
            if y is not None:
                cells.append(str(int(y[i])))
            w.writerow(cells)


def export_dataset(ds: DomainDataset, out_dir) -> Path:
    """Write the three CSVs plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "source.csv", ds.source_x, ds.source_y)
    _write_rows(out / "target.csv", ds.target_x)
    manifest = {"source": "source.csv", "target": "target.csv",
                "target_eval": None, "c": ds.c, "d": ds.d}
    if ds.has_eval:
        _write_rows(out / "target_eval.csv", ds.target_x, ds.target_y_eval)
        manifest["target_eval"] = "target_eval.csv"
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(path) -> DomainDataset:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        base = path.parent
        ev = doc.get("target_eval")
        ds = load_features_csv(base / doc["source"], base / doc["target"],
                               base / ev if ev else None, c=int(doc["c"]))
    except (KeyError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: bad manifest ({exc})") from None
    if "d" in doc and ds.d != int(doc["d"]):
        raise DataFormatError(f"{path}: manifest says d={doc['d']} but files have {ds.d}")
    return ds


# --- batching ---------------------------------------------------------------

@dataclass
class DomainBatch:
    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    source_idx: np.ndarray
    target_idx: np.ndarray


def batches(view: TrainingView, batch_size: int, rng, epochs: int | None = None) -> Iterator[DomainBatch]:
    """Equal-size source/target mini-batches, reshuffled every epoch.

    An epoch is one pass over a fresh permutation of the source set; the
    trailing partial batch is dropped. Target indices come from their own
    permutation, refreshed whenever it runs out. ``epochs=None`` streams
    forever.
    """
    if isinstance(view, DomainDataset):
        view = view.training_view()
    n_s, n_t = len(view.source_x), len(view.target_x)
    if batch_size < 1 or batch_size > min(n_s, n_t):
        raise ValueError(f"batch_size must lie in [1, {min(n_s, n_t)}], got {batch_size}")
    t_perm, t_pos = rng.permutation(n_t), 0
    epoch = 0
    while epochs is None or epoch < epochs:
        s_perm = rng.permutation(n_s)
        for start in range(0, n_s - batch_size + 1, batch_size):
            si = s_perm[start:start + batch_size]
            if t_pos + batch_size > n_t:
                t_perm, t_pos = rng.permutation(n_t), 0
            ti = t_perm[t_pos:t_pos + batch_size]
            t_pos += batch_size
            yield DomainBatch(view.source_x[si], view.source_y[si], view.target_x[ti], si, ti)
        epoch += 1
