"""Mixed-model rating adjustment, quadratic least squares and Wundt-curve tests.

Ratings are first adjusted for per-subject offsets estimated by a
random-intercept model fitted by maximum likelihood.  Adjusted ratings are
then regressed on a per-clip surprisal covariate with a quadratic OLS fit.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize
from scipy import stats as sps

from .streams import stream

N_PARAMS = 3
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
RHO_MAX = 1.0 - 1e-10
VERDICTS = ("inverted_u", "u", "flat", "inconclusive")


class SingularDesignError(ValueError):
    pass


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class RatingTable:
    subject_id: list[str]
    clip_id: list[str]
    rating: np.ndarray
    baseline: dict[str, float] | None = None

    def __post_init__(self):
        self.subject_id = [str(s) for s in self.subject_id]
        self.clip_id = [str(c) for c in self.clip_id]
        self.rating = np.asarray(self.rating, dtype=np.float64)
        if not len(self.subject_id) == len(self.clip_id) == len(self.rating):
            raise ValueError("column lengths differ")
        if not np.all(np.isfinite(self.rating)):
            raise ValueError("ratings must be finite")
        pairs = set(zip(self.subject_id, self.clip_id))
        if len(pairs) != len(self.rating):
            raise ValueError("duplicate (subject_id, clip_id) pairs")

    def __len__(self) -> int:
        return len(self.rating)

    def subjects(self) -> list[str]:
        return sorted(set(self.subject_id))


def read_ratings_csv(path: str | Path) -> RatingTable:
    subj, clip, rating = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            subj.append(row["subject_id"])
            clip.append(row["clip_id"])
            rating.append(float(row["rating"]))
    return RatingTable(subj, clip, np.array(rating))


def write_ratings_csv(path: str | Path, table: RatingTable, column: str = "rating") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "clip_id", column])
        for s, c, r in zip(table.subject_id, table.clip_id, table.rating):
            w.writerow([s, c, repr(float(r))])


def read_covariate_csv(path: str | Path, column: str = "value") -> dict[str, float]:
    with open(path, newline="") as fh:
        return {row["clip_id"]: float(row[column]) for row in csv.DictReader(fh)}


# ---------------------------------------------------------------------------
# random-intercept model
# ---------------------------------------------------------------------------

@dataclass
class MixedFit:
    beta0: float
    sigma_b2: float
    sigma_e2: float
    blup: dict[str, float]
    loglik: float
    ratio: float = 0.0
    n_obs: int = 0
    warning: str | None = None

    def shrinkage(self, n_i: int) -> float:
        if self.sigma_b2 == 0.0:
            return 0.0
        return self.sigma_b2 / (self.sigma_b2 + self.sigma_e2 / n_i)


@dataclass
class _GroupStats:
    subjects: list[str]
    n: np.ndarray
    ybar: np.ndarray
    ssw: float
    N: int

    @classmethod
    def of(cls, ratings: RatingTable) -> _GroupStats:
        subjects = ratings.subjects()
        index = {s: i for i, s in enumerate(subjects)}
        g = np.array([index[s] for s in ratings.subject_id])
        n = np.bincount(g, minlength=len(subjects)).astype(np.float64)
        ybar = np.bincount(g, weights=ratings.rating, minlength=len(subjects)) / n
        ssw = float(np.sum((ratings.rating - ybar[g]) ** 2))
        return cls(subjects, n, ybar, ssw, len(ratings))

    def gls_mean(self, lam: float):
        w = self.n / (1.0 + self.n * lam)
        return float(np.sum(w * self.ybar) / np.sum(w)), w

    def quad_form(self, lam: float) -> float:
        beta, w = self.gls_mean(lam)
        return self.ssw + float(np.sum(w * (self.ybar - beta) ** 2))

    def loglik(self, lam: float) -> float:
        Q = self.quad_form(lam)
        if Q <= 0.0:
            return math.inf
        return (-0.5 * self.N * (math.log(2.0 * math.pi) + 1.0 + math.log(Q / self.N))
                - 0.5 * float(np.sum(np.log1p(self.n * lam))))

    def score(self, lam: float) -> float:
        beta, _ = self.gls_mean(lam)
        Q = self.quad_form(lam)
        d = 1.0 + self.n * lam
        return (0.5 * self.N / Q * float(np.sum(self.n ** 2 * (self.ybar - beta) ** 2 / d ** 2))
                - 0.5 * float(np.sum(self.n / d)))


def _lam(rho: float) -> float:
    return rho / (1.0 - rho)


def profiled_loglik(ratings: RatingTable, ratio: float) -> float:
    """ML log-likelihood at variance ratio sigma_b^2 / sigma_e^2, other parameters profiled."""
    return _GroupStats.of(ratings).loglik(ratio)


def _golden_max(f, a: float, b: float, tol: float = 1e-12) -> float:
    c, d = b - GOLDEN * (b - a), a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def fit_random_intercept(ratings: RatingTable, grid: int = 200) -> MixedFit:
    """ML fit of ``rating = beta0 + b_subject + e``.

    The variance ratio is found by golden-section search (after a coarse grid
    scan) on the profiled log-likelihood over rho = ratio / (1 + ratio) in
    [0, 1), then refined by root-finding on the analytic score.
    """
    gs = _GroupStats.of(ratings)
    if len(gs.subjects) < 2:
        raise ValueError("need at least two subjects")
    if gs.n.max() < 2:
        raise ValueError("need at least one subject with two or more observations")

    if gs.quad_form(0.0) <= 0.0:
        warnings.warn("all ratings identical; returning sigma_b2 = 0", RuntimeWarning)
        beta = float(gs.ybar[0])
        return MixedFit(beta, 0.0, 0.0, {s: 0.0 for s in gs.subjects}, math.nan, 0.0, gs.N,
                        "all ratings identical")

    f = lambda rho: gs.loglik(_lam(rho))
    rhos = np.linspace(0.0, RHO_MAX, grid + 1)
    vals = [f(r) for r in rhos]
    k = int(np.argmax(vals))
    warning = None
    if k == 0 and gs.score(0.0) <= 0.0:
        lam = 0.0
    elif gs.ssw <= 0.0:
        lam = _lam(RHO_MAX)
        warning = "no within-subject variation; variance ratio at search bound"
    else:
        lo, hi = rhos[max(k - 1, 0)], rhos[min(k + 1, grid)]
        rho = _golden_max(f, lo, hi)
        lam = _lam(rho)
        s_lo, s_hi = gs.score(_lam(lo)), gs.score(_lam(hi))
        if s_lo > 0.0 > s_hi:
            lam = optimize.brentq(gs.score, _lam(lo), _lam(hi), xtol=1e-15, rtol=1e-15)
        if lam >= _lam(rhos[-2]):
            warning = "variance ratio at search bound"

    beta, _ = gs.gls_mean(lam)
    sigma_e2 = gs.quad_form(lam) / gs.N
    sigma_b2 = lam * sigma_e2
    shrink = gs.n * lam / (1.0 + gs.n * lam)
    blup = {s: float(shrink[i] * (gs.ybar[i] - beta)) for i, s in enumerate(gs.subjects)}
    return MixedFit(beta, sigma_b2, sigma_e2, blup, gs.loglik(lam), lam, gs.N, warning)


def adjust_ratings(ratings: RatingTable, fit: MixedFit) -> RatingTable:
    """Subtract each subject's predicted random intercept from their ratings."""
    missing = sorted(set(ratings.subject_id) - set(fit.blup))
    if missing:
        raise KeyError(f"subjects not covered by the fit: {missing}")
    offsets = np.array([fit.blup[s] for s in ratings.subject_id])
    return RatingTable(ratings.subject_id, ratings.clip_id, ratings.rating - offsets,
                       ratings.baseline)


# ---------------------------------------------------------------------------
# quadratic least squares
# ---------------------------------------------------------------------------

def information_criteria(loglik: float, n: int, k: int = N_PARAMS) -> tuple[float, float]:
    """(AIC, BIC) = (2k - 2LL, k ln n - 2LL)."""
    return 2.0 * k - 2.0 * loglik, k * math.log(n) - 2.0 * loglik


@dataclass
class QuadraticFitReport:
    """Quadratic OLS fit ``y = c0 + c1 z + c2 z^2`` on the standardised covariate
    ``z = (s - center) / scale``.  ``raw_*`` fields describe the same curve in
    the original units of ``s``."""

    coeffs: np.ndarray
    cov: np.ndarray
    ci95: np.ndarray
    p_values: np.ndarray
    r2: float
    loglik: float
    aic: float
    bic: float
    n: int
    center: float = 0.0
    scale: float = 1.0
    raw_coeffs: np.ndarray = field(default_factory=lambda: np.zeros(3))
    raw_cov: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    raw_ci95: np.ndarray = field(default_factory=lambda: np.zeros((3, 2)))
    vertex_s: float | None = None
    residuals: np.ndarray | None = None

    def predict(self, s) -> np.ndarray:
        c = self.raw_coeffs
        s = np.asarray(s, dtype=np.float64)
        return c[0] + c[1] * s + c[2] * s * s

    def to_dict(self) -> dict:
        def fl(a):
            return np.asarray(a, dtype=float).tolist()
        return {
            "coeffs": fl(self.coeffs), "cov": fl(self.cov), "ci95": fl(self.ci95),
            "p_values": fl(self.p_values), "r2": self.r2, "loglik": self.loglik,
            "aic": self.aic, "bic": self.bic, "n": self.n, "k": N_PARAMS,
            "center": self.center, "scale": self.scale,
            "raw_coeffs": fl(self.raw_coeffs), "raw_cov": fl(self.raw_cov),
            "raw_ci95": fl(self.raw_ci95), "vertex_s": self.vertex_s,
        }


def quadratic_fit(x, y, *, standardize: bool = True) -> QuadraticFitReport:
    """Ordinary least squares of ``y`` on ``[1, z, z^2]`` via QR.

    Standard errors use the unbiased residual variance (n - 3 dof); the
    log-likelihood uses the ML variance RSS / n.
    """
    s = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(s)
    if n != len(y):
        raise ValueError("x and y lengths differ")
    if n < 4:
        raise ValueError("need at least 4 observations")
    if np.ptp(s) == 0.0:
        raise SingularDesignError("covariate is constant; quadratic design is singular")

    center, scale = (float(np.mean(s)), float(np.std(s))) if standardize else (0.0, 1.0)
    z = (s - center) / scale
    X = np.column_stack([np.ones(n), z, z * z])
    Q, R = np.linalg.qr(X)
    if np.min(np.abs(np.diag(R))) <= 1e-12 * np.max(np.abs(np.diag(R))):
        raise SingularDesignError("quadratic design is rank deficient")
    coeffs = np.linalg.solve(R, Q.T @ y)
    resid = y - X @ coeffs
    rss = float(resid @ resid)
    tss = float(np.sum((y - y.mean()) ** 2))
    dof = n - N_PARAMS
    Rinv = np.linalg.inv(R)
    cov = (rss / dof) * (Rinv @ Rinv.T)
    se = np.sqrt(np.diag(cov))
    tcrit = sps.t.ppf(0.975, dof)
    ci = np.column_stack([coeffs - tcrit * se, coeffs + tcrit * se])
    with np.errstate(divide="ignore", invalid="ignore"):
        tstat = np.where(se > 0, coeffs / np.where(se > 0, se, 1.0),
                         np.where(coeffs == 0, 0.0, np.inf))
    p = 2.0 * sps.t.sf(np.abs(tstat), dof)

    # y = c0 + c1 (s - m)/a + c2 (s - m)^2 / a^2, expanded in powers of s
    m, a = center, scale
    A = np.array([[1.0, -m / a, m * m / (a * a)],
                  [0.0, 1.0 / a, -2.0 * m / (a * a)],
                  [0.0, 0.0, 1.0 / (a * a)]])
    raw = A @ coeffs
    raw_cov = A @ cov @ A.T
    raw_se = np.sqrt(np.diag(raw_cov))
    raw_ci = np.column_stack([raw - tcrit * raw_se, raw + tcrit * raw_se])

    loglik = (-0.5 * n * (math.log(2.0 * math.pi * rss / n) + 1.0)) if rss > 0 else math.inf
    aic, bic = information_criteria(loglik, n)
    r2 = 1.0 - rss / tss if tss > 0 else (1.0 if rss == 0 else -math.inf)
    vertex = float(m - a * coeffs[1] / (2.0 * coeffs[2])) if coeffs[2] < 0 else None
    return QuadraticFitReport(coeffs, cov, ci, p, r2, loglik, aic, bic, n, center, scale,
                              raw, raw_cov, raw_ci, vertex, resid)


# ---------------------------------------------------------------------------
# verdicts and comparisons
# ---------------------------------------------------------------------------

@dataclass
class Verdict:
    label: str
    vertex_s: float | None = None
    p_quadratic: float = math.nan
    p_linear: float = math.nan


def wundt_verdict(report: QuadraticFitReport, alpha: float = 0.05) -> Verdict:
    c2 = float(report.coeffs[2])
    p1, p2 = float(report.p_values[1]), float(report.p_values[2])
    if p2 < alpha and c2 < 0:
        return Verdict("inverted_u", report.vertex_s, p2, p1)
    if p2 < alpha and c2 > 0:
        return Verdict("u", None, p2, p1)
    if p2 >= alpha and p1 >= alpha:
        return Verdict("flat", None, p2, p1)
    return Verdict("inconclusive", None, p2, p1)


METRICS = (("r2", max), ("loglik", max), ("aic", min), ("bic", min))


def compare_models(reports) -> list[dict]:
    """Goodness-of-fit table for ``[(name, report), ...]`` over the same data.

    Each row carries ``best_<metric>`` = True for every model attaining the
    best value (ties flag all of them).
    """
    reports = list(reports)
    if len(reports) < 2:
        raise ValueError("need at least two reports")
    ns = {rep.n for _, rep in reports}
    if len(ns) != 1:
        raise ValueError(f"reports cover different numbers of observations: {sorted(ns)}")
    rows = [{"model": name, **{m: getattr(rep, m) for m, _ in METRICS}} for name, rep in reports]
    for metric, pick in METRICS:
        best = pick(r[metric] for r in rows)
        for r in rows:
            r[f"best_{metric}"] = r[metric] == best
    return rows


# ---------------------------------------------------------------------------
# end-to-end helpers
# ---------------------------------------------------------------------------

@dataclass
class WundtAnalysis:
    mixed: MixedFit
    adjusted: RatingTable
    covariate: np.ndarray
    report: QuadraticFitReport
    verdict: Verdict


def wundt_analysis(ratings: RatingTable, covariate: dict[str, float],
                   alpha: float = 0.05) -> WundtAnalysis:
    """Mixed-model adjustment followed by the per-observation quadratic fit."""
    missing = sorted(set(ratings.clip_id) - set(covariate))
    if missing:
        raise KeyError(f"no covariate for clips: {missing}")
    mixed = fit_random_intercept(ratings)
    adjusted = adjust_ratings(ratings, mixed)
    s = np.array([covariate[c] for c in ratings.clip_id])
    report = quadratic_fit(s, adjusted.rating)
    return WundtAnalysis(mixed, adjusted, s, report, wundt_verdict(report, alpha))


def simulate_study(truth=(0.0, 0.0, -1.0), sigma_b: float = 1.0, sigma_e: float = 1.0,
                   n_subjects: int = 44, n_clips: int = 57, seed: int = 0,
                   s_range: tuple[float, float] = (-2.0, 2.0)):
    """Synthetic ratings ``y_ij = q(s_j) + b_i + e_ij``.

    Returns ``(RatingTable, {clip_id: s_j})``.
    """
    if n_subjects < 2 or n_clips < 2:
        raise ValueError("need at least two subjects and two clips")
    c0, c1, c2 = truth
    s = stream(seed, "simulate", "surprisal").uniform(*s_range, size=n_clips)
    b = stream(seed, "simulate", "subjects").normal(0.0, 1.0, size=n_subjects) * sigma_b
    e = stream(seed, "simulate", "noise").normal(0.0, 1.0, size=(n_subjects, n_clips)) * sigma_e
    y = c0 + c1 * s[None, :] + c2 * s[None, :] ** 2 + b[:, None] + e
    subj = [f"s{i:03d}" for i in range(n_subjects)]
    clips = [f"c{j:03d}" for j in range(n_clips)]
    table = RatingTable([subj[i] for i in range(n_subjects) for _ in range(n_clips)],
                        [clips[j] for _ in range(n_subjects) for j in range(n_clips)],
                        y.ravel())
    return table, dict(zip(clips, s.tolist()))
