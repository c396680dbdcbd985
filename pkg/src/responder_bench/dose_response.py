"""Hill-curve fitting and dose-independent response metrics.

A response curve is parameterized in ``-log10(M)`` dose space as::

    growth(x) = e_inf + (1 - e_inf) / (1 + 10**(hs * (ec50 - x)))

so growth rises from ``e_inf`` at high concentration (low ``x``) to 1 at
high dilution.  A fixed-window area under this curve of 1 therefore means
"no response".  Fitting is damped Gauss-Newton (Levenberg-Marquardt) with
box constraints and four fixed multi-starts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import pandas as pd
from scipy.integrate import quad
from scipy.special import expit

LN10 = math.log(10.0)

# Parameter boxes used by the fitter.
EINF_BOUNDS = (0.0, 1.0)
HS_BOUNDS = (0.05, 10.0)
EC50_MARGIN = 2.0  # ec50 box extends this far past the measured dose range

# Growth values are clipped to this range before fitting; goodness of fit
# is still reported against the unclipped values.
GROWTH_CLIP = (-1.0, 1.5)

# Fixed dose window for the study-independent AUC.
AUC_WINDOW = (4.0, 10.0)

# Growth-inhibition depth that counts as activity for the sensitivity score.
DSS_THRESHOLD = 0.1


class DegenerateInputError(ValueError):
    """Raised when inputs make the requested quantity undefined."""


@dataclass(frozen=True)
class DoseResponsePoint:
    """One measured (dose, growth) pair; dose in -log10(M), growth a fraction."""

    dose: float
    growth: float

    def __post_init__(self):
        if not (math.isfinite(self.dose) and math.isfinite(self.growth)):
            raise ValueError("dose and growth must be finite")


@dataclass(frozen=True)
class HillParams:
    """Fitted curve parameters: floor, midpoint dose, and slope."""

    e_inf: float
    ec50: float
    hs: float

    def __post_init__(self):
        if not math.isfinite(self.ec50):
            raise ValueError("ec50 must be finite")
        if self.hs <= 0:
            raise ValueError("hs must be > 0")


@dataclass(frozen=True)
class CurveFit:
    params: HillParams
    r2fit: float
    ec50_se: float
    n_points: int
    converged: bool
    degenerate: bool = False
    sse: float = float("nan")


@dataclass(frozen=True)
class DoseMetrics:
    """Dose-independent response metrics for one (cell, drug) series."""

    auc: float
    auc1: float
    aac1: float
    ic50: float | None
    dss1: float
    fit: CurveFit


@dataclass(frozen=True)
class Nci60Thresholds:
    """Inhibition-level doses; each is None when the level is not crossed."""

    gi50: float | None
    tgi: float | None
    lc50: float | None


def pgi(t_z: float, c: float, t_i: float) -> float:
    """Percentage growth inhibition from plate absorbances.

    Uses the growth branch ``100*(t_i - t_z)/(c - t_z)`` when the treated
    well grew past time zero, and the lethality branch
    ``100*(t_i - t_z)/t_z`` otherwise.

    Parameters
    ----------
    t_z : float
        Absorbance at time zero.
    c : float
        Control (untreated) absorbance.
    t_i : float
        Absorbance after drug application.

    Returns
    -------
    float
        Percentage growth in [-100, +inf).
    """
    if t_i >= t_z:
        if c == t_z:
            raise DegenerateInputError("control equals time-zero absorbance")
        return 100.0 * (t_i - t_z) / (c - t_z)
    if t_z <= 0:
        raise DegenerateInputError("time-zero absorbance must be positive")
    return 100.0 * (t_i - t_z) / t_z


def hill_growth(params: HillParams, dose):
    """Evaluate the growth curve at one dose or an array of doses.

    Monotone non-decreasing in dose; tends to 1 at high dilution and to
    ``e_inf`` at high concentration.
    """
    dose = np.asarray(dose, dtype=float)
    out = params.e_inf + (1.0 - params.e_inf) * expit(
        LN10 * params.hs * (dose - params.ec50)
    )
    return float(out) if out.ndim == 0 else out


def _hill_eval(theta: np.ndarray, doses: np.ndarray) -> np.ndarray:
    e, c, h = theta
    return e + (1.0 - e) * expit(LN10 * h * (doses - c))


def _hill_jacobian(theta: np.ndarray, doses: np.ndarray) -> np.ndarray:
    e, c, h = theta
    s = expit(LN10 * h * (doses - c))
    ds = s * (1.0 - s)
    J = np.empty((doses.size, 3))
    J[:, 0] = 1.0 - s
    J[:, 1] = -(1.0 - e) * LN10 * h * ds
    J[:, 2] = (1.0 - e) * LN10 * (doses - c) * ds
    return J


def _lm_minimize(
    doses: np.ndarray,
    y: np.ndarray,
    theta0: np.ndarray,
    lb: np.ndarray,
    ub: np.ndarray,
    max_iter: int = 200,
    rel_tol: float = 1e-10,
) -> tuple[np.ndarray, float, bool]:
    """Box-constrained Levenberg-Marquardt on the hill residuals.

    Damping starts at 1e-3, divides by 10 on accepted steps and multiplies
    by 10 on rejected ones; trial points are projected onto the box.
    """
    theta = np.clip(theta0, lb, ub)
    r = _hill_eval(theta, doses) - y
    sse = float(r @ r)
    lam = 1e-3
    converged = False
    for _ in range(max_iter):
        J = _hill_jacobian(theta, doses)
        JtJ = J.T @ J
        g = J.T @ r
        D = np.diag(np.maximum(np.diag(JtJ), 1e-12))
        try:
            step = np.linalg.solve(JtJ + lam * D, -g)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        trial = np.clip(theta + step, lb, ub)
        r_t = _hill_eval(trial, doses) - y
        sse_t = float(r_t @ r_t)
        if sse_t < sse:
            rel_change = (sse - sse_t) / max(sse, 1e-300)
            theta, r, sse = trial, r_t, sse_t
            lam = max(lam / 10.0, 1e-12)
            if rel_change < rel_tol:
                converged = True
                break
        else:
            lam *= 10.0
            if lam > 1e12:
                # Damping saturated: no direction improves the objective.
                converged = True
                break
    return theta, sse, converged


def _ec50_standard_error(theta: np.ndarray, doses: np.ndarray, sse: float) -> float:
    n = doses.size
    if n <= 3:
        return float("inf")
    J = _hill_jacobian(theta, doses)
    JtJ = J.T @ J
    s2 = sse / (n - 3)
    try:
        cov = s2 * np.linalg.inv(JtJ)
    except np.linalg.LinAlgError:
        return float("inf")
    var = cov[1, 1]
    if not math.isfinite(var) or var < 0:
        return float("inf")
    return math.sqrt(var)


def fit_hill(points: Iterable[DoseResponsePoint]) -> CurveFit:
    """Fit the growth curve to measured points.

    Growth values are clipped to ``GROWTH_CLIP`` for fitting; the reported
    r2 is computed against the unclipped values.  Four fixed starts
    (slope 0.5 or 2, floor 0 or 0.5, midpoint at the dose-range center)
    are refined independently and the lowest-objective fit wins.

    Raises
    ------
    ValueError
        Fewer than 3 points or fewer than 2 distinct doses.
    """
    pts = list(points)
    if len(pts) < 3:
        raise ValueError(f"need at least 3 points, got {len(pts)}")
    doses = np.array([p.dose for p in pts], dtype=float)
    y_raw = np.array([p.growth for p in pts], dtype=float)
    if np.unique(doses).size < 2:
        raise ValueError("need at least 2 distinct doses")

    y = np.clip(y_raw, *GROWTH_CLIP)
    lo, hi = float(doses.min()), float(doses.max())
    lb = np.array([EINF_BOUNDS[0], lo - EC50_MARGIN, HS_BOUNDS[0]])
    ub = np.array([EINF_BOUNDS[1], hi + EC50_MARGIN, HS_BOUNDS[1]])

    if np.ptp(y) == 0.0:
        # All-identical growth: a flat curve at the slope floor.  Near the
        # midpoint the curve sits at (1 + e_inf) / 2, so invert that.
        e_flat = float(np.clip(2.0 * y[0] - 1.0, 0.0, 1.0))
        params = HillParams(e_inf=e_flat, ec50=(lo + hi) / 2.0, hs=HS_BOUNDS[0])
        resid = hill_growth(params, doses) - y
        return CurveFit(
            params=params,
            r2fit=0.0,
            ec50_se=float("inf"),
            n_points=len(pts),
            converged=True,
            degenerate=True,
            sse=float(resid @ resid),
        )

    mid = (lo + hi) / 2.0
    starts = [
        np.array([e0, mid, h0]) for h0 in (0.5, 2.0) for e0 in (0.0, 0.5)
    ]
    best = None
    for theta0 in starts:
        theta, sse, ok = _lm_minimize(doses, y, theta0, lb, ub)
        if best is None or sse < best[1]:
            best = (theta, sse, ok)
    theta, sse, ok = best

    params = HillParams(e_inf=float(theta[0]), ec50=float(theta[1]), hs=float(theta[2]))
    yhat = hill_growth(params, doses)
    sst = float(np.sum((y_raw - y_raw.mean()) ** 2))
    if sst == 0.0:
        r2 = 0.0
    else:
        r2 = 1.0 - float(np.sum((y_raw - yhat) ** 2)) / sst
    return CurveFit(
        params=params,
        r2fit=r2,
        ec50_se=_ec50_standard_error(theta, doses, sse),
        n_points=len(pts),
        converged=ok,
        degenerate=False,
        sse=sse,
    )


def auc_fixed(params: HillParams, lo: float = AUC_WINDOW[0], hi: float = AUC_WINDOW[1]) -> float:
    """Width-normalized area under the growth curve over [lo, hi].

    Computed by adaptive quadrature to 1e-8 absolute tolerance; lies in
    [e_inf, 1] and equals 1 exactly when the curve is flat at 1.
    """
    if not lo < hi:
        raise ValueError("lo must be < hi")
    if params.e_inf == 1.0:
        return 1.0
    val, _ = quad(lambda x: hill_growth(params, x), lo, hi, epsabs=1e-8, limit=200)
    return val / (hi - lo)


def ic50(params: HillParams) -> float | None:
    """Dose where growth crosses 0.5, or None when the floor is >= 0.5."""
    if params.e_inf >= 0.5:
        return None
    # 0.5 = e + (1-e) * s  =>  s = (0.5-e)/(1-e); invert the logistic.
    s = (0.5 - params.e_inf) / (1.0 - params.e_inf)
    return params.ec50 + math.log(s / (1.0 - s)) / (LN10 * params.hs)


def _activity_onset(params: HillParams, level: float) -> float | None:
    """Dose where growth rises through ``level``; None if floor >= level."""
    if params.e_inf >= level:
        return None
    s = (level - params.e_inf) / (1.0 - params.e_inf)
    return params.ec50 + math.log(s / (1.0 - s)) / (LN10 * params.hs)


def dss1_score(params: HillParams, lo: float, hi: float) -> float:
    """Normalized activity area over the measured dose range.

    Integrates how far growth dips below the activity level
    ``1 - DSS_THRESHOLD`` over [lo, hi] and normalizes by
    ``(1 - e_inf) * (hi - lo)``; 0 when the curve never reaches the level.
    """
    level = 1.0 - DSS_THRESHOLD
    onset = _activity_onset(params, level)
    if onset is None or onset <= lo:
        return 0.0
    upper = min(hi, onset)
    area, _ = quad(
        lambda x: level - hill_growth(params, x), lo, upper, epsabs=1e-8, limit=200
    )
    return max(0.0, area / ((1.0 - params.e_inf) * (hi - lo)))


def dose_metrics(fit: CurveFit, points: Sequence[DoseResponsePoint]) -> DoseMetrics:
    """All dose-independent metrics for a converged fit.

    ``auc`` uses the fixed window; ``auc1``/``aac1`` use the measured dose
    range of ``points``.
    """
    if not fit.converged:
        raise ValueError("dose metrics require a converged fit")
    doses = [p.dose for p in points]
    lo, hi = min(doses), max(doses)
    if not lo < hi:
        raise ValueError("points must span at least two distinct doses")
    auc1 = auc_fixed(fit.params, lo, hi)
    return DoseMetrics(
        auc=auc_fixed(fit.params),
        auc1=auc1,
        aac1=1.0 - auc1,
        ic50=ic50(fit.params),
        dss1=dss1_score(fit.params, lo, hi),
        fit=fit,
    )


def nci60_thresholds(
    pgi_curve: Callable[[float], float], lo: float, hi: float, tol: float = 1e-6
) -> Nci60Thresholds:
    """Doses where a monotone PGI curve crosses +50, 0, and -50.

    The curve must be non-decreasing on [lo, hi] (it is sampled on a fine
    grid to verify).  Each crossing is located by bisection to ``tol`` dose
    units and reported as None when the level is outside the curve's range.
    """
    if not lo < hi:
        raise ValueError("lo must be < hi")
    grid = np.linspace(lo, hi, 1001)
    vals = np.array([pgi_curve(float(x)) for x in grid])
    if np.any(np.diff(vals) < -1e-9):
        raise ValueError("PGI curve is not monotone non-decreasing on the range")

    f_lo, f_hi = float(vals[0]), float(vals[-1])

    def solve(level: float) -> float | None:
        if not (f_lo <= level <= f_hi):
            return None
        a, b = lo, hi
        while b - a > tol:
            m = 0.5 * (a + b)
            if pgi_curve(m) < level:
                a = m
            else:
                b = m
        return 0.5 * (a + b)

    return Nci60Thresholds(gi50=solve(50.0), tgi=solve(0.0), lc50=solve(-50.0))


# ---------------------------------------------------------------------------
# CSV pipeline
# ---------------------------------------------------------------------------

DOSE_CSV_COLUMNS = ["SOURCE", "CELL", "DRUG", "DOSE", "GROWTH"]
METRIC_CSV_COLUMNS = [
    "SOURCE", "CELL", "DRUG", "AUC", "AUC1", "AAC1", "IC50", "GI50", "TGI",
    "LC50", "EC50SE", "R2FIT", "DSS1", "EINF", "HS", "EC50",
]


def fit_curves_table(dose_frame: pd.DataFrame) -> pd.DataFrame:
    """Fit every (source, cell, drug) series and tabulate its metrics.

    Duplicate (source, cell, drug, dose) rows are averaged before fitting.
    The inhibition-level doses are read off the fitted growth curve scaled
    to PGI units, so levels below zero growth are reported as missing.
    """
    missing = [c for c in DOSE_CSV_COLUMNS if c not in dose_frame.columns]
    if missing:
        raise ValueError(f"dose table is missing columns: {missing}")
    rows = []
    grouped = dose_frame.groupby(["SOURCE", "CELL", "DRUG"], sort=True)
    for (source, cell, drug), grp in grouped:
        per_dose = grp.groupby("DOSE")["GROWTH"].mean()
        points = [
            DoseResponsePoint(dose=float(d), growth=float(g))
            for d, g in per_dose.items()
        ]
        fit = fit_hill(points)
        metrics = dose_metrics(fit, points)
        doses = [p.dose for p in points]
        thresholds = nci60_thresholds(
            lambda x: 100.0 * hill_growth(fit.params, x), min(doses), max(doses)
        )
        rows.append({
            "SOURCE": source,
            "CELL": cell,
            "DRUG": drug,
            "AUC": metrics.auc,
            "AUC1": metrics.auc1,
            "AAC1": metrics.aac1,
            "IC50": metrics.ic50,
            "GI50": thresholds.gi50,
            "TGI": thresholds.tgi,
            "LC50": thresholds.lc50,
            "EC50SE": fit.ec50_se,
            "R2FIT": fit.r2fit,
            "DSS1": metrics.dss1,
            "EINF": fit.params.e_inf,
            "HS": fit.params.hs,
            "EC50": fit.params.ec50,
        })
    return pd.DataFrame(rows, columns=METRIC_CSV_COLUMNS)


def fit_curves_csv(in_path: str, out_path: str) -> pd.DataFrame:
    """Read a dose-response CSV, fit all series, and write the metrics CSV."""
    frame = pd.read_csv(in_path)
    table = fit_curves_table(frame)
    table.to_csv(out_path, index=False, na_rep="")
    return table
