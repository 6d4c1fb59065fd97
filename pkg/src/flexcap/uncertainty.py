"""Joint uncertainty sets over the stacked prosumption driver.

Scenarios are rows of driver profiles over the horizon; the uncertainty vector
``zeta`` collects per-driver deviations from the in-sample mean, driver-major
(``zeta = [d0_t0..d0_T, d1_t0.., ...]``), so that the nominal point is zero.
Four constructors provide a target coverage ``1 - eps`` of the empirical
distribution: a Gaussian fit (chi-square radius), the minimum-volume
(Löwner-John) ellipsoid of all points, an empirical-coverage ellipsoid built
on the densest ``1 - eps`` neighborhood, and an axis-aligned hyperbox.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats
from scipy.spatial.distance import cdist


class DegenerateGeometryError(ValueError):
    """Input points do not affinely span the space."""


@dataclass(frozen=True)
class ScenarioSet:
    """Sampled driver profiles split into in-sample and out-of-sample rows."""

    drivers: tuple[str, ...]
    T: int
    samples: np.ndarray       # (N, n_drivers * T), driver-major columns
    n_in_sample: int

    def __post_init__(self):
        n, d = self.samples.shape
        if d != len(self.drivers) * self.T:
            raise ValueError("sample width does not match drivers * T")
        if np.isnan(self.samples).any():
            raise ValueError("scenario matrix contains missing values")
        if not (1 <= self.n_in_sample <= n):
            raise ValueError("in-sample count out of range")
        if self.n_in_sample < 10 * d:
            warnings.warn(
                f"only {self.n_in_sample} in-sample scenarios for dimension {d}; "
                "at least 10x the dimension is recommended",
                stacklevel=2,
            )

    @property
    def dimension(self) -> int:
        return self.samples.shape[1]

    @property
    def mean(self) -> np.ndarray:
        """In-sample mean profile; the forecast around which zeta deviates."""
        return self.samples[: self.n_in_sample].mean(axis=0)

    def deviations(self, which: str = "in") -> np.ndarray:
        if which == "in":
            rows = self.samples[: self.n_in_sample]
        elif which == "out":
            rows = self.samples[self.n_in_sample:]
        elif which == "all":
            rows = self.samples
        else:
            raise ValueError("which must be 'in', 'out' or 'all'")
        return rows - self.mean

    def driver_slice(self, name: str) -> slice:
        k = self.drivers.index(name)
        return slice(k * self.T, (k + 1) * self.T)

    def mean_profile(self, name: str) -> np.ndarray:
        return self.mean[self.driver_slice(name)]

    @classmethod
    def from_csv(cls, path: str | Path, *, in_sample: int | float = 0.75) -> "ScenarioSet":
        """Read a scenario CSV with ``driver_tt`` columns (e.g. ``load_00``).

        Columns are regrouped driver-major in first-appearance order; rows are
        scenarios.  ``in_sample`` is a row count or a fraction of rows.
        """
        df = pd.read_csv(path)
        drivers: list[str] = []
        steps: dict[str, list[int]] = {}
        for col in df.columns:
            name, _, idx = col.rpartition("_")
            if not name or not idx.isdigit():
                raise ValueError(f"scenario column {col!r} is not of the form driver_t")
            if name not in drivers:
                drivers.append(name)
                steps[name] = []
            steps[name].append(int(idx))
        T = len(steps[drivers[0]])
        for name in drivers:
            if sorted(steps[name]) != list(range(T)):
                raise ValueError(f"driver {name!r} does not cover steps 0..{T - 1}")
        ordered = [f"{name}_{t:02d}" for name in drivers for t in range(T)]
        try:
            data = df[ordered].to_numpy(float)
        except KeyError:
            ordered = [f"{name}_{t}" for name in drivers for t in range(T)]
            data = df[ordered].to_numpy(float)
        n = len(df)
        n_in = int(round(in_sample * n)) if isinstance(in_sample, float) and in_sample <= 1 else int(in_sample)
        return cls(tuple(drivers), T, data, max(1, min(n, n_in)))


@dataclass(frozen=True)
class UncertaintySet:
    """Ellipsoid ``||S^-1 (z - c)|| <= 1`` or hyperbox ``lo <= z <= hi``."""

    kind: str                       # "ellipsoid" | "hyperbox"
    epsilon: float
    center: np.ndarray | None = None
    shape: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    achieved_coverage: float | None = None

    def __post_init__(self):
        if self.kind == "ellipsoid":
            if self.center is None or self.shape is None:
                raise ValueError("ellipsoid needs center and shape factor")
            if np.linalg.matrix_rank(self.shape) < self.shape.shape[0]:
                raise ValueError("ellipsoid shape factor must be invertible")
        elif self.kind == "hyperbox":
            if self.lower is None or self.upper is None:
                raise ValueError("hyperbox needs bounds")
            if np.any(self.lower > self.upper):
                raise ValueError("hyperbox bounds must satisfy lower <= upper")
        else:
            raise ValueError(f"unknown uncertainty set kind {self.kind!r}")

    @property
    def dimension(self) -> int:
        if self.kind == "ellipsoid":
            return self.center.shape[0]
        return self.lower.shape[0]

    def contains(self, zeta: np.ndarray) -> bool:
        """Exact evaluation of the defining inequality."""
        zeta = np.asarray(zeta, float)
        if zeta.shape != (self.dimension,):
            raise ValueError(
                f"dimension mismatch: set is {self.dimension}-dimensional, "
                f"point has shape {zeta.shape}"
            )
        if self.kind == "ellipsoid":
            return bool(np.linalg.norm(np.linalg.solve(self.shape, zeta - self.center)) <= 1.0)
        return bool(np.all(zeta >= self.lower) and np.all(zeta <= self.upper))

    def support(self, direction: np.ndarray) -> float:
        """Support function ``sup_{z in set} direction . z``."""
        direction = np.asarray(direction, float)
        if self.kind == "ellipsoid":
            return float(direction @ self.center + np.linalg.norm(self.shape.T @ direction))
        mid = 0.5 * (self.lower + self.upper)
        half = 0.5 * (self.upper - self.lower)
        return float(direction @ mid + np.abs(direction) @ half)

    def sample(self, rng: np.random.Generator, n: int = 1, *, boundary: bool = False) -> np.ndarray:
        """Uniform-ish samples from the set (exact boundary when requested)."""
        d = self.dimension
        if self.kind == "ellipsoid":
            g = rng.standard_normal((n, d))
            g /= np.linalg.norm(g, axis=1, keepdims=True)
            if not boundary:
                g *= rng.random((n, 1)) ** (1.0 / d)
            return self.center + g @ self.shape.T
        pts = self.lower + rng.random((n, d)) * (self.upper - self.lower)
        if boundary:
            for k in range(n):
                j = rng.integers(d)
                pts[k, j] = self.upper[j] if rng.random() < 0.5 else self.lower[j]
        return pts

    def to_json(self) -> dict:
        doc = {"kind": self.kind, "epsilon": self.epsilon,
               "achieved_coverage": self.achieved_coverage}
        if self.kind == "ellipsoid":
            doc["center"] = self.center.tolist()
            doc["shape"] = self.shape.tolist()
        else:
            doc["lower"] = self.lower.tolist()
            doc["upper"] = self.upper.tolist()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "UncertaintySet":
        kw = dict(kind=doc["kind"], epsilon=doc["epsilon"],
                  achieved_coverage=doc.get("achieved_coverage"))
        if doc["kind"] == "ellipsoid":
            kw["center"] = np.asarray(doc["center"], float)
            kw["shape"] = np.asarray(doc["shape"], float)
        else:
            kw["lower"] = np.asarray(doc["lower"], float)
            kw["upper"] = np.asarray(doc["upper"], float)
        return cls(**kw)


def membership(uset: UncertaintySet, zeta: np.ndarray) -> bool:
    return uset.contains(zeta)


# ---------------------------------------------------------------------------
# Constructors
# ---------------------------------------------------------------------------


def _in_sample(points_or_scenarios) -> np.ndarray:
    if isinstance(points_or_scenarios, ScenarioSet):
        return points_or_scenarios.deviations("in")
    return np.asarray(points_or_scenarios, float)


def fit_gaussian_ellipsoid(
    scenarios, eps: float = 0.1, *, ridge: bool = True
) -> UncertaintySet:
    """Ellipsoid of a fitted multivariate Gaussian at the ``1 - eps``
    chi-square level: ``(z - mu)' Sigma^-1 (z - mu) <= chi2_{d,1-eps}``."""
    pts = _in_sample(scenarios)
    n, d = pts.shape
    mu = pts.mean(axis=0)
    cov = np.cov(pts, rowvar=False, ddof=1).reshape(d, d)
    eigvals = np.linalg.eigvalsh(cov)
    if eigvals[0] <= 1e-12 * max(eigvals[-1], 1.0):
        if not ridge:
            raise DegenerateGeometryError(
                "sample covariance is singular; enable ridge regularization"
            )
        cov = cov + np.eye(d) * (1e-8 * max(np.trace(cov), 1e-30) / d + 1e-30)
        if np.linalg.eigvalsh(cov)[0] <= 0:
            raise DegenerateGeometryError("covariance not positive definite")
    radius2 = stats.chi2.ppf(1.0 - eps, df=d)
    L = np.linalg.cholesky(cov)
    return UncertaintySet(
        kind="ellipsoid", epsilon=eps, center=mu, shape=L * np.sqrt(radius2),
        achieved_coverage=None,
    )


def min_volume_ellipsoid(
    points, *, tol: float = 1e-6, max_iter: int = 200000
) -> UncertaintySet:
    """Löwner-John ellipsoid of a point cloud via the Khachiyan iteration.

    The ascent step is applied through a rank-one update of the inverse
    moment matrix (periodically refreshed against drift), so one iteration
    costs O(n d).  All points end up inside within relative tolerance 1e-6:
    the shape factor is inflated to the worst achieved radius at the end,
    independently of the optimality tolerance.
    """
    pts = _in_sample(points)
    n, d = pts.shape
    if n < d + 1 or np.linalg.matrix_rank(pts - pts.mean(axis=0)) < d:
        raise DegenerateGeometryError(
            "points do not affinely span the space; reduce the dimension first"
        )
    q = np.hstack([pts, np.ones((n, 1))])
    u = np.full(n, 1.0 / n)

    def refresh():
        x = q.T @ (q * u[:, None])
        m = np.linalg.inv(x)
        return m, np.einsum("ij,jk,ik->i", q, m, q)

    m_inv, scores = refresh()
    for it in range(max_iter):
        j = int(np.argmax(scores))
        maximum = scores[j]
        if maximum <= (d + 1) * (1.0 + tol):
            break
        step = (maximum - d - 1.0) / ((d + 1.0) * (maximum - 1.0))
        u *= 1.0 - step
        u[j] += step
        if (it + 1) % 1000 == 0:
            m_inv, scores = refresh()
            continue
        # Sherman-Morrison update of inv((1-s) X + s q_j q_j')
        ratio = step / (1.0 - step)
        mq = m_inv @ q[j]
        coef = ratio / (1.0 + ratio * maximum)
        w = q @ mq
        scores = (scores - coef * w * w) / (1.0 - step)
        m_inv = (m_inv - coef * np.outer(mq, mq)) / (1.0 - step)
    center = pts.T @ u
    cov = pts.T @ (pts * u[:, None]) - np.outer(center, center)
    # membership matrix A = cov^-1 / d;  shape factor S = sqrtm(d * cov)
    eigval, eigvec = np.linalg.eigh(cov * d)
    if eigval[0] <= 0:
        raise DegenerateGeometryError("degenerate ellipsoid from collapsed weights")
    S = eigvec @ np.diag(np.sqrt(eigval)) @ eigvec.T
    radii = np.linalg.norm(np.linalg.solve(S, (pts - center).T), axis=0)
    worst = radii.max()
    if worst > 1.0:
        S = S * (worst * (1.0 + 1e-9))
    return UncertaintySet(kind="ellipsoid", epsilon=0.0, center=center, shape=S,
                          achieved_coverage=1.0)


def coverage_ellipsoid(scenarios, eps: float = 0.1) -> UncertaintySet:
    """Empirical-coverage ellipsoid: pick the sample with the smallest maximum
    standardized distance to its nearest ``ceil((1-eps) N)`` points and wrap
    those points in their minimum-volume ellipsoid."""
    pts = _in_sample(scenarios)
    n, d = pts.shape
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must lie in [0, 1)")
    if eps > 0 and n < 1.0 / eps:
        raise ValueError(f"need at least {int(np.ceil(1 / eps))} in-sample points")
    k = int(np.ceil((1.0 - eps) * n))
    sd = pts.std(axis=0, ddof=1)
    sd[sd <= 0] = 1.0
    dist = cdist(pts / sd, pts / sd)
    kth = np.partition(dist, k - 1, axis=1)[:, k - 1]
    best = int(np.argmin(kth))
    neighbors = np.argsort(dist[best])[:k]
    ell = min_volume_ellipsoid(pts[neighbors])
    inside = sum(ell.contains(p) for p in pts)
    cov = inside / n
    if cov < 1.0 - eps - 1e-12:
        raise RuntimeError("coverage ellipsoid lost nominal in-sample coverage")
    return UncertaintySet(kind="ellipsoid", epsilon=eps, center=ell.center,
                          shape=ell.shape, achieved_coverage=cov)


def hyperbox(scenarios, eps: float = 0.0) -> UncertaintySet:
    """Axis-aligned box: per-dimension min/max for ``eps = 0``; otherwise
    symmetric per-dimension quantile trimming followed by a greedy repair that
    re-admits the cheapest excluded samples until ``>= (1-eps) N`` are inside."""
    pts = _in_sample(scenarios)
    n, d = pts.shape
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must lie in [0, 1)")
    if eps == 0.0 or n == 1:
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        return UncertaintySet(kind="hyperbox", epsilon=eps, lower=lo, upper=hi,
                              achieved_coverage=1.0)
    target = int(np.ceil((1.0 - eps) * n))
    srt = np.sort(pts, axis=0)
    m = int(np.floor(eps * n / 2.0))
    lo, hi = srt[m].copy(), srt[n - 1 - m].copy()

    def inside_mask():
        return np.all((pts >= lo) & (pts <= hi), axis=1)

    mask = inside_mask()
    while mask.sum() < target:
        out = np.where(~mask)[0]
        # widening needed per excluded point, relative to current widths
        width = np.maximum(hi - lo, 1e-12)
        need_lo = np.maximum(lo - pts[out], 0.0) / width
        need_hi = np.maximum(pts[out] - hi, 0.0) / width
        cost = (need_lo + need_hi).sum(axis=1)
        j = out[int(np.argmin(cost))]
        lo = np.minimum(lo, pts[j])
        hi = np.maximum(hi, pts[j])
        mask = inside_mask()
    return UncertaintySet(kind="hyperbox", epsilon=eps, lower=lo, upper=hi,
                          achieved_coverage=float(mask.sum()) / n)


def save_uncertainty_set(uset: UncertaintySet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(uset.to_json(), indent=2, sort_keys=True),
                          encoding="utf-8")


def load_uncertainty_set(path: str | Path) -> UncertaintySet:
    return UncertaintySet.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
