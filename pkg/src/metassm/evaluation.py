"""Reconstruction and forecast r², embedding diagnostics and figure-data exports."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .checkpoint import atomic_write_bytes
from .errors import ContractError, DimensionError, UsageError
from .inference import Encoders, infer_embedding, infer_states
from .ssm import GenerativeModel, emission_mean, read_in, rollout_mean
from .synthdata import write_array


# r² ---------------------------------------------------------------------------

def r2_parts(y: np.ndarray, y_hat: np.ndarray, y_bar: np.ndarray) -> tuple[float, float]:
    """(SSE, SST) pooled over every entry; ``y_bar`` broadcasts against ``y``."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape:
        raise DimensionError(f"targets {y.shape} and predictions {y_hat.shape} differ")
    return float(np.sum((y - y_hat) ** 2)), float(np.sum((y - y_bar) ** 2))


def r2_from_parts(sse: float, sst: float) -> float:
    if sst <= 0.0:
        return 1.0 if sse == 0.0 else -np.inf
    return 1.0 - sse / sst


def r2_score(y, y_hat, y_bar=None) -> float:
    """``1 - SSE/SST``; ``y_bar`` defaults to the per-trial mean over time of ``(trials, T, d)`` data."""
    y = np.asarray(y, dtype=float)
    if y_bar is None:
        y_bar = trial_means(y)
    return r2_from_parts(*r2_parts(y, y_hat, y_bar))


def trial_means(y: np.ndarray) -> np.ndarray:
    """Mean activity over each trial's full window, shaped to broadcast over time."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 3:
        raise DimensionError(f"expected (trials, T, d), got {y.shape}")
    return y.mean(axis=1, keepdims=True)


# model-based metrics ------------------------------------------------------------

def reconstruct(model: GenerativeModel, enc: Encoders, dataset_id: str, y) -> np.ndarray:
    """Posterior-mean reconstruction of full trials."""
    ybar = read_in(model, dataset_id, y)
    q_e = infer_embedding(enc.embedding, ybar)
    q_z = infer_states(enc.state, ybar, q_e.mean)
    return emission_mean(model, dataset_id, q_z.mean).data


def r2_reconstruction(model: GenerativeModel, enc: Encoders, y, dataset_id: str) -> float:
    y = np.asarray(y, dtype=float)
    return r2_score(y, reconstruct(model, enc, dataset_id, y))


def forecast(model: GenerativeModel, enc: Encoders, dataset_id: str, y, context: int, horizon: int,
             ) -> tuple[np.ndarray, np.ndarray]:
    """Predicted observations for steps ``context+1 .. context+horizon``.

    Only ``y[:, :context]`` is passed to the encoders.  Returns the predictions
    ``(trials, horizon, d_y)`` and the embedding mean used.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 3:
        raise DimensionError(f"expected (trials, T, d_y), got {y.shape}")
    if context < 1 or horizon < 1:
        raise UsageError("context and horizon must be positive")
    if context + horizon > y.shape[1]:
        raise UsageError(f"context {context} + horizon {horizon} exceeds trial length {y.shape[1]}")
    seen = np.ascontiguousarray(y[:, :context])
    ybar = read_in(model, dataset_id, seen)
    e = infer_embedding(enc.embedding, ybar).mean
    q_z = infer_states(enc.state, ybar, e)
    return forecast_from_state(model, dataset_id, q_z.mean.data[:, -1], e.data, horizon), e.data.copy()


def forecast_from_state(model: GenerativeModel, dataset_id: str, z_last, e, horizon: int) -> np.ndarray:
    """Mean rollout from ``z_t`` mapped through the emission mean: ``(trials, horizon, d_y)``."""
    z_future = rollout_mean(model, z_last, horizon, e)
    return emission_mean(model, dataset_id, z_future).data


@dataclass
class KStepResult:
    r2: dict[int, float]
    sse: dict[int, float]
    sst: dict[int, float]

    def at(self, k: int) -> float:
        return self.r2[k]


def r2_kstep(model: GenerativeModel, enc: Encoders, y, dataset_id: str, context: int, horizon: int,
             ) -> KStepResult:
    """Per-step forecast r² for k = 1..horizon, pooled over trials and channels."""
    y = np.asarray(y, dtype=float)
    pred, _ = forecast(model, enc, dataset_id, y, context, horizon)
    return kstep_scores(y, pred, context)


def kstep_scores(y: np.ndarray, pred: np.ndarray, context: int) -> KStepResult:
    """Score ``pred[:, k-1]`` against ``y[:, context+k-1]``; ȳ is each trial's full-window mean."""
    y = np.asarray(y, dtype=float)
    horizon = pred.shape[1]
    if context + horizon > y.shape[1]:
        raise UsageError(f"context {context} + horizon {horizon} exceeds trial length {y.shape[1]}")
    y_bar = trial_means(y)[:, 0]
    out = KStepResult({}, {}, {})
    for k in range(1, horizon + 1):
        sse, sst = r2_parts(y[:, context + k - 1], pred[:, k - 1], y_bar)
        out.sse[k], out.sst[k] = sse, sst
        out.r2[k] = r2_from_parts(sse, sst)
    return out


def combine_kstep(results: dict[str, KStepResult]) -> dict[str, dict[int, float]]:
    """Across datasets: pooled (summed SSE/SST) and macro (mean of per-dataset r²)."""
    if not results:
        raise UsageError("no results to combine")
    ks = sorted(set.intersection(*(set(r.r2) for r in results.values())))
    pooled = {k: r2_from_parts(sum(r.sse[k] for r in results.values()), sum(r.sst[k] for r in results.values()))
              for k in ks}
    macro = {k: float(np.mean([r.r2[k] for r in results.values()])) for k in ks}
    return {"pooled": pooled, "macro": macro}


# reports ----------------------------------------------------------------------

@dataclass
class MetricsReport:
    dataset_id: str
    recon_r2: float | None
    kstep_r2: dict[int, float]
    context: int | None
    trials: int
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.kstep_r2.items():
            if int(k) < 1:
                raise ContractError(f"forecast step keys must be positive, got {k}")
        self.kstep_r2 = {int(k): float(v) for k, v in self.kstep_r2.items()}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kstep_r2"] = {str(k): v for k, v in sorted(self.kstep_r2.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode())


def write_kstep_csv(path, curves: dict[str, dict[int, float]]) -> None:
    """One row per (dataset, k)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset_id", "k", "r2"])
        for ds, curve in curves.items():
            for k in sorted(curve):
                w.writerow([ds, k, repr(float(curve[k]))])


# embedding diagnostics ----------------------------------------------------------

@dataclass
class EmbeddingDiagnostics:
    dataset_ids: list[str]
    means: np.ndarray                 # (M, d_e) aggregated posterior means
    params: np.ndarray | None = None  # (M,) generator parameter per dataset

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        if self.means.shape[0] != len(self.dataset_ids):
            self.means = self.means.T
        if self.means.shape[0] != len(self.dataset_ids):
            raise DimensionError("one embedding mean per dataset is required")
        if self.params is not None:
            self.params = np.asarray(self.params, dtype=float)
            if self.params.shape != (len(self.dataset_ids),):
                raise DimensionError("one generator parameter per dataset is required")

    def magnitudes(self) -> np.ndarray:
        return np.linalg.norm(self.means, axis=1)


def collect_embeddings(model: GenerativeModel, enc: Encoders, data: dict[str, np.ndarray],
                       params: dict[str, float] | None = None) -> EmbeddingDiagnostics:
    ids = list(data)
    means = np.stack([infer_embedding(enc.embedding, read_in(model, k, data[k])).mean.data for k in ids])
    p = None if params is None else np.array([params[k] for k in ids], dtype=float)
    return EmbeddingDiagnostics(ids, means, p)


def embedding_velocity_correlation(diag: EmbeddingDiagnostics) -> float:
    """Spearman correlation between |embedding mean| and the generator parameter."""
    if diag.params is None:
        raise UsageError("generator parameters are required")
    if len(diag.dataset_ids) < 3:
        raise UsageError("need at least 3 datasets for a rank correlation")
    rho = spearmanr(diag.magnitudes(), diag.params).statistic
    return 0.0 if np.isnan(rho) else float(rho)


def _threshold_fit(x: np.ndarray, labels: np.ndarray) -> float:
    """Threshold t maximizing accuracy of ``x > t -> 1``; ties go to the smallest t."""
    u = np.unique(x)
    cands = np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2, [u[-1] + 1.0]])
    acc = [(np.mean((x > t) == labels), -i) for i, t in enumerate(cands)]
    return float(cands[-max(acc)[1]])


def regime_separability(diag: EmbeddingDiagnostics, labels: Sequence[int]) -> float:
    """Leave-one-out accuracy of a threshold on the centroid-difference projection."""
    labels = np.asarray(labels).astype(bool)
    X = diag.means
    if len(labels) != len(X):
        raise DimensionError("one label per dataset is required")
    if labels.all() or not labels.any():
        raise UsageError("separability needs both classes present")
    hits = 0
    for i in range(len(X)):
        keep = np.arange(len(X)) != i
        Xtr, ltr = X[keep], labels[keep]
        if ltr.all() or not ltr.any():
            hits += int(labels[i] == ltr[0])
            continue
        w = Xtr[ltr].mean(0) - Xtr[~ltr].mean(0)
        if not np.any(w):
            w = np.ones_like(w)
        w = w / np.linalg.norm(w)   # keeps the outer threshold candidates scale-free
        t = _threshold_fit(Xtr @ w, ltr)
        hits += int((X[i] @ w > t) == labels[i])
    return hits / len(X)


def write_scatter_csv(path, diag: EmbeddingDiagnostics) -> None:
    """``dataset_id,e1,e2,param``; e2 is blank for 1-D embeddings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset_id", "e1", "e2", "param"])
        for i, ds in enumerate(diag.dataset_ids):
            m = diag.means[i]
            e2 = repr(float(m[1])) if m.size > 1 else ""
            p = "" if diag.params is None else repr(float(diag.params[i]))
            w.writerow([ds, repr(float(m[0])), e2, p])


# figure data --------------------------------------------------------------------

def interpolation_grid(model: GenerativeModel, anchor, offsets: Sequence[float], z0, steps: int,
                       rng: np.random.Generator, var: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Roll out the mean dynamics for embeddings drawn around a 2-D grid.

    Grid points are ``anchor + (dx, dy)`` for ``dx, dy`` in ``offsets`` (dx fastest);
    each uses ``e ~ N(point, var I)``.  Returns ``(points (G, 2), trajectories (G, steps, d_z))``.
    """
    anchor = np.asarray(anchor, dtype=float)
    if anchor.shape != (2,) or model.d_e != 2:
        raise DimensionError("interpolation grids need a 2-D embedding")
    offsets = np.asarray(offsets, dtype=float)
    gx, gy = np.meshgrid(offsets, offsets)
    points = anchor + np.column_stack([gx.ravel(), gy.ravel()])
    trajs = []
    for p in points:
        e = p + np.sqrt(var) * rng.standard_normal(2) if var > 0 else p
        trajs.append(rollout_mean(model, z0, steps, e))
    return points, np.stack(trajs)


def export_trajectories(directory, trajectories: np.ndarray, prefix: str = "traj") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, tr in enumerate(trajectories):
        p = directory / f"{prefix}_{i:03d}.bin"
        write_array(p, np.asarray(tr, dtype=float))
        paths.append(p)
    return paths


def fit_affine(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares ``target ≈ source @ A + b``; for plotting only."""
    X = np.asarray(source, dtype=float).reshape(-1, np.shape(source)[-1])
    Y = np.asarray(target, dtype=float).reshape(-1, np.shape(target)[-1])
    if len(X) != len(Y):
        raise DimensionError("source and target need the same number of points")
    Xa = np.column_stack([X, np.ones(len(X))])
    sol, *_ = np.linalg.lstsq(Xa, Y, rcond=None)
    return sol[:-1], sol[-1]


def apply_affine(x: np.ndarray, A: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.asarray(x) @ A + b
