"""Statistical machinery for paired ASR-difference samples.

Implements the three-step testing procedure (normality gate, one-sided
location test, step-up FDR correction across the group) plus the effect
sizes that accompany each test. Everything is deterministic and written
against exact small-sample distributions where feasible:

- Shapiro-Wilk normality via the Royston polynomial approximation (n <= 5000).
- One-sample t-test with the Student-t tail evaluated through a
  continued-fraction incomplete beta (abs error ~1e-14).
- Wilcoxon signed rank: zeros dropped, average ranks on ties, exact
  sign-enumeration p for up to 20 nonzero values, otherwise a normal
  approximation with tie and 0.5 continuity corrections. The standardized
  statistic Z is reported for the r effect size.
- Mann-Whitney U: exact rank-subset enumeration for small samples, otherwise
  tie-corrected normal approximation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_ALPHA = 0.05
DEFAULT_FDR = 0.05


class StatError(ValueError):
    pass


class DegenerateSampleError(StatError):
    pass


@dataclass
class DeltaSample:
    label: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.size == 0:
            raise StatError(f"{self.label}: empty sample")
        if not np.all(np.isfinite(self.values)):
            raise StatError(f"{self.label}: non-finite values")


@dataclass
class StatTestResult:
    label: str
    n: int
    shapiro_p: float
    normal: bool
    test_used: str          # "t-test" | "wilcoxon"
    statistic: float        # t_s or W (sum of positive ranks)
    one_tailed_p: float
    bh_adjusted_p: float
    effect_size: float      # d or r
    magnitude: str          # negligible | small | medium | large


# -- normal distribution helpers ---------------------------------------------

def normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


# inverse normal CDF, Wichura's PPND16 rational approximation
_PPND_A = (3.3871328727963666080, 133.14166789178437745, 1971.5909503065514427,
           13731.693765509461125, 45921.953931549871457, 67265.770927008700853,
           33430.575583588128105, 2509.0809287301226727)
_PPND_B = (1.0, 42.313330701600911252, 687.18700749205790830,
           5394.1960214247511077, 21213.794301586595867, 39307.895800092710610,
           28729.085735721942674, 5226.4952788528545610)
_PPND_C = (1.42343711074968357734, 4.63033784615654529590, 5.76949722146069140550,
           3.64784832476320460504, 1.27045825245236838258, 0.241780725177450611770,
           2.27238449892691845833e-2, 7.74545014278341407640e-4)
_PPND_D = (1.0, 2.05319162663775882187, 1.67638483018380384940,
           0.689767334985100004550, 0.148103976427480074590,
           1.51986665636164571966e-2, 5.47593808499534494600e-4,
           1.05075007164441684324e-9)
_PPND_E = (6.65790464350110377720, 5.46378491116411436990, 1.78482653991729133580,
           0.296560571828504891230, 2.65321895265761230930e-2,
           1.24266094738807843860e-3, 2.71155556874348757815e-5,
           2.01033439929228813265e-7)
_PPND_F = (1.0, 0.599832206555887937690, 0.136929880922735805310,
           1.48753612908506148525e-2, 7.86869131145613259100e-4,
           1.84631831751005468180e-5, 1.42151175831644588870e-7,
           2.04426310338993978564e-15)


def _ppnd_poly(coeffs, r):
    acc = 0.0
    for c in reversed(coeffs):
        acc = acc * r + c
    return acc


def normal_ppf(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise StatError(f"quantile argument must be in (0, 1), got {p}")
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * _ppnd_poly(_PPND_A, r) / _ppnd_poly(_PPND_B, r)
    r = p if q < 0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        val = _ppnd_poly(_PPND_C, r) / _ppnd_poly(_PPND_D, r)
    else:
        r -= 5.0
        val = _ppnd_poly(_PPND_E, r) / _ppnd_poly(_PPND_F, r)
    return -val if q < 0 else val


# -- incomplete beta / Student-t tail ------------------------------------------

def _betacf(a: float, b: float, x: float) -> float:
    tiny = 1e-30
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise StatError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_bt = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
             + a * math.log(x) + b * math.log1p(-x))
    bt = math.exp(ln_bt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: float) -> float:
    """Upper tail P(T >= t) for Student-t with df degrees of freedom."""
    if df <= 0:
        raise StatError(f"degrees of freedom must be > 0, got {df}")
    x = df / (df + t * t)
    tail = 0.5 * betainc(df / 2.0, 0.5, x)
    return tail if t >= 0 else 1.0 - tail


# -- Shapiro-Wilk (Royston polynomial approximation) ----------------------------

_SW_C1 = (-2.706056, 4.434685, -2.071190, -0.147981, 0.221157, 0.0)
_SW_C2 = (-3.582633, 5.682633, -1.752461, -0.293762, 0.042981, 0.0)
_SW_C3 = (-0.0006714, 0.025054, -0.39978, 0.544)
_SW_C4 = (-0.0020322, 0.062767, -0.77857, 1.3822)
_SW_C5 = (0.0038915, -0.083751, -0.31082, -1.5861)
_SW_C6 = (0.0030302, -0.082676, -0.4803)


def _poly(coeffs, x):
    acc = 0.0
    for c in coeffs:
        acc = acc * x + c
    return acc


def shapiro_wilk(sample) -> tuple[float, float]:
    """(W, p) for the normality null; requires 3 <= n <= 5000."""
    x = np.sort(np.asarray(sample, dtype=np.float64))
    n = len(x)
    if n < 3:
        raise StatError(f"Shapiro-Wilk needs n >= 3, got {n}")
    if n > 5000:
        raise StatError(f"Shapiro-Wilk approximation is valid up to n = 5000, got {n}")
    if x[-1] - x[0] == 0.0:
        raise DegenerateSampleError("constant sample")
    nn2 = n // 2
    if n == 3:
        weights = np.array([math.sqrt(0.5)])
    else:
        i = np.arange(1, nn2 + 1)
        m = np.array([normal_ppf(v) for v in (i - 0.375) / (n + 0.25)])  # negative half
        summ2 = 2.0 * float(np.sum(m * m))
        ssumm2 = math.sqrt(summ2)
        rsn = 1.0 / math.sqrt(n)
        w1 = _poly(_SW_C1, rsn) - m[0] / ssumm2
        if n > 5:
            w2 = _poly(_SW_C2, rsn) - m[1] / ssumm2
            fac = math.sqrt((summ2 - 2.0 * m[0] ** 2 - 2.0 * m[1] ** 2)
                            / (1.0 - 2.0 * w1 ** 2 - 2.0 * w2 ** 2))
            weights = np.concatenate([[w1, w2], -m[2:] / fac])
        else:
            fac = math.sqrt((summ2 - 2.0 * m[0] ** 2) / (1.0 - 2.0 * w1 ** 2))
            weights = np.concatenate([[w1], -m[1:] / fac])
    # weights[j] multiplies (x_(n-j) - x_(j+1)) in order statistics terms
    upper = x[::-1][:nn2]
    lower = x[:nn2]
    numerator = float(np.sum(weights * (upper - lower))) ** 2
    denominator = float(np.sum((x - x.mean()) ** 2))
    w_stat = numerator / denominator
    if w_stat > 1.0:
        w_stat = 1.0
    # p-value per sample-size regime
    if n == 3:
        pi6, stqr = 1.90985931710274, 1.04719755119660
        p = pi6 * (math.asin(math.sqrt(w_stat)) - stqr)
        return w_stat, min(max(p, 0.0), 1.0)
    one_minus = max(1.0 - w_stat, 1e-19)
    if n <= 11:
        gamma = -2.273 + 0.459 * n
        if gamma - math.log(one_minus) <= 0.0:
            return w_stat, 1e-99
        y = -math.log(gamma - math.log(one_minus))
        mu = _poly(_SW_C3, float(n))
        sigma = math.exp(_poly(_SW_C4, float(n)))
    else:
        y = math.log(one_minus)
        ln_n = math.log(n)
        mu = _poly(_SW_C5, ln_n)
        sigma = math.exp(_poly(_SW_C6, ln_n))
    return w_stat, normal_sf((y - mu) / sigma)


# -- location tests -------------------------------------------------------------

def t_test_one_sample(sample) -> tuple[float, float]:
    """One-sided one-sample t-test of mean > 0; returns (t_s, one-tailed p)."""
    x = np.asarray(sample, dtype=np.float64)
    n = len(x)
    if n < 2:
        raise StatError(f"t-test needs n >= 2, got {n}")
    sd = float(x.std(ddof=1))
    if sd == 0.0:
        raise DegenerateSampleError("zero variance")
    t_s = float(x.mean()) / (sd / math.sqrt(n))
    return t_s, student_t_sf(t_s, n - 1)


def _rankdata(values: np.ndarray) -> np.ndarray:
    """Average ranks, 1-based."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


@dataclass
class WilcoxonResult:
    w: float           # sum of positive ranks
    one_tailed_p: float
    z: float           # continuity-corrected standardized statistic
    n_nonzero: int
    exact: bool


def _wilcoxon_exact_p(scaled_ranks: np.ndarray, scaled_w: int) -> float:
    """P(W+ >= w) by enumerating all sign assignments via subset-sum counts."""
    total = int(scaled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in scaled_ranks:
        r = int(r)
        counts[r:] += counts[:-r] if r > 0 else counts
    return float(counts[scaled_w:].sum() / 2.0 ** len(scaled_ranks))


WILCOXON_EXACT_LIMIT = 20


def wilcoxon_signed_rank(sample) -> WilcoxonResult:
    """One-sided signed-rank test of median > 0.

    Zeros are dropped; ties share average ranks. Exact enumeration p for up
    to WILCOXON_EXACT_LIMIT nonzero values, otherwise normal approximation
    with tie correction and 0.5 continuity correction.
    """
    x = np.asarray(sample, dtype=np.float64)
    nz = x[x != 0.0]
    n = len(nz)
    if n == 0:
        raise DegenerateSampleError("all differences are zero")
    ranks = _rankdata(np.abs(nz))
    w_plus = float(ranks[nz > 0].sum())
    mu = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(nz), return_counts=True)
    tie_term = float(np.sum(tie_counts.astype(np.float64) ** 3 - tie_counts)) / 48.0
    sigma = math.sqrt(n * (n + 1) * (2 * n + 1) / 24.0 - tie_term)
    centered = w_plus - mu
    if centered == 0.0:
        z = 0.0
    else:
        z = (centered - 0.5 * math.copysign(1.0, centered)) / sigma
    if n <= WILCOXON_EXACT_LIMIT:
        scaled = np.rint(ranks * 2.0).astype(np.int64)
        p = _wilcoxon_exact_p(scaled, int(round(w_plus * 2.0)))
        return WilcoxonResult(w=w_plus, one_tailed_p=p, z=z, n_nonzero=n, exact=True)
    return WilcoxonResult(w=w_plus, one_tailed_p=normal_sf(z), z=z, n_nonzero=n, exact=False)


MANN_WHITNEY_EXACT_LIMIT = 16  # combined size for the exact path


def _mann_whitney_exact_p(all_ranks: np.ndarray, n_a: int, observed: float) -> float:
    """P(rank-sum of group A >= observed) over all C(N, n_a) assignments."""
    scaled = np.rint(all_ranks * 2.0).astype(np.int64)
    target = int(round(observed * 2.0))
    total = int(scaled.sum())
    # dp[k][s] = number of k-subsets with scaled rank sum s
    dp = np.zeros((n_a + 1, total + 1), dtype=np.float64)
    dp[0, 0] = 1.0
    for r in scaled:
        for k in range(min(n_a, 1000), 0, -1):
            dp[k, r:] += dp[k - 1, :total + 1 - r]
    from math import comb
    return float(dp[n_a, target:].sum() / comb(len(all_ranks), n_a))


@dataclass
class MannWhitneyResult:
    u: float
    one_tailed_p: float
    z: float
    exact: bool


def mann_whitney_u(sample_a, sample_b) -> MannWhitneyResult:
    """One-sided rank-sum test of A tending larger than B."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise StatError("both samples must be nonempty")
    n_a, n_b = len(a), len(b)
    combined = np.concatenate([a, b])
    ranks = _rankdata(combined)
    rank_sum_a = float(ranks[:n_a].sum())
    u = rank_sum_a - n_a * (n_a + 1) / 2.0
    n = n_a + n_b
    mu = n_a * n_b / 2.0
    _, tie_counts = np.unique(combined, return_counts=True)
    tie_adj = float(np.sum(tie_counts.astype(np.float64) ** 3 - tie_counts))
    sigma_sq = n_a * n_b / 12.0 * ((n + 1) - tie_adj / (n * (n - 1)))
    if sigma_sq <= 0:
        raise DegenerateSampleError("all pooled values identical")
    sigma = math.sqrt(sigma_sq)
    centered = u - mu
    z = 0.0 if centered == 0 else (centered - 0.5 * math.copysign(1.0, centered)) / sigma
    if n <= MANN_WHITNEY_EXACT_LIMIT:
        p = _mann_whitney_exact_p(ranks, n_a, rank_sum_a)
        return MannWhitneyResult(u=u, one_tailed_p=p, z=z, exact=True)
    return MannWhitneyResult(u=u, one_tailed_p=normal_sf(z), z=z, exact=False)


# -- multiple testing and effect sizes -------------------------------------------

def bh_correct(p_values, fdr: float = DEFAULT_FDR) -> tuple[np.ndarray, np.ndarray]:
    """Step-up FDR correction; returns (adjusted p, reject flags) in input order."""
    p = np.asarray(p_values, dtype=np.float64)
    if p.size == 0:
        raise StatError("no p-values to correct")
    if np.any((p < 0) | (p > 1)):
        raise StatError("p-values must lie in [0, 1]")
    m = len(p)
    order = np.argsort(p, kind="stable")
    adjusted_sorted = p[order] * m / np.arange(1, m + 1)
    adjusted_sorted = np.minimum.accumulate(adjusted_sorted[::-1])[::-1]
    adjusted_sorted = np.minimum(adjusted_sorted, 1.0)
    adjusted = np.empty(m)
    adjusted[order] = adjusted_sorted
    reject = adjusted <= fdr
    return adjusted, reject


def cohens_d(sample) -> float:
    """Standardized mean of a paired-difference sample: mean / sd (ddof=1)."""
    x = np.asarray(sample, dtype=np.float64)
    if len(x) < 2:
        raise StatError(f"Cohen's d needs n >= 2, got {len(x)}")
    sd = float(x.std(ddof=1))
    if sd == 0.0:
        raise DegenerateSampleError("zero standard deviation")
    return float(x.mean()) / sd


def wilcoxon_r(z: float, n_nonzero: int) -> float:
    """Rank-biserial-style effect size Z / sqrt(N) over nonzero differences."""
    if n_nonzero < 1:
        raise StatError(f"need at least one nonzero difference, got {n_nonzero}")
    return z / math.sqrt(n_nonzero)


def magnitude_class(effect: float, kind: str) -> str:
    e = abs(effect)
    if kind == "d":
        bands = (0.1, 0.5, 0.8)
    elif kind == "r":
        bands = (0.1, 0.3, 0.5)
    else:
        raise StatError(f"unknown effect kind {kind!r}")
    if e < bands[0]:
        return "negligible"
    if e < bands[1]:
        return "small"
    if e < bands[2]:
        return "medium"
    return "large"


# -- the three-step procedure -----------------------------------------------------

def run_procedure(samples: list[DeltaSample], alpha: float = DEFAULT_ALPHA,
                  fdr: float = DEFAULT_FDR) -> list[StatTestResult]:
    """Normality gate, one-sided location test, BH correction across the group."""
    if not samples:
        raise StatError("empty sample group")
    partial = []
    for s in samples:
        sw_w, sw_p = shapiro_wilk(s.values)
        normal = sw_p >= alpha
        if normal:
            t_s, p = t_test_one_sample(s.values)
            d = cohens_d(s.values)
            partial.append((s, sw_p, True, "t-test", t_s, p, d, "d", len(s.values)))
        else:
            res = wilcoxon_signed_rank(s.values)
            r = wilcoxon_r(res.z, res.n_nonzero)
            partial.append((s, sw_p, False, "wilcoxon", res.w, res.one_tailed_p,
                            r, "r", len(s.values)))
    adjusted, _reject = bh_correct([row[5] for row in partial], fdr)
    results = []
    for (s, sw_p, normal, test, stat, p, eff, kind, n), bh_p in zip(partial, adjusted):
        results.append(StatTestResult(
            label=s.label, n=n, shapiro_p=sw_p, normal=normal, test_used=test,
            statistic=stat, one_tailed_p=p, bh_adjusted_p=float(bh_p),
            effect_size=eff, magnitude=magnitude_class(eff, kind)))
    return results


def results_to_csv_rows(results: list[StatTestResult]) -> list[list[str]]:
    header = ["sample", "n", "shapiro_p", "normal", "test", "statistic",
              "one_tailed_p", "bh_adjusted_p", "effect_size", "magnitude"]
    rows = [header]
    for r in results:
        rows.append([r.label, str(r.n), repr(r.shapiro_p), str(r.normal), r.test_used,
                     repr(r.statistic), repr(r.one_tailed_p), repr(r.bh_adjusted_p),
                     repr(r.effect_size), r.magnitude])
    return rows
