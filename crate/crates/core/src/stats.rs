//! Heavy-tail fits, survival curves and two-sample tests.

use std::collections::BTreeMap;

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct TailEstimate {
    pub index: f64,
    pub se: f64,
    /// ĉ in P(X ≥ x) ≈ ĉ x^{-α̂}, from the order statistic at k.
    pub constant: f64,
    pub k_order: usize,
    pub n: usize,
    pub censored_fraction: f64,
    /// Threshold X_(k+1): the fit uses values above it.
    pub threshold: f64,
    pub plateau: Option<Plateau>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Plateau {
    /// Mean index over the most stable window of the k-scan.
    pub index: f64,
    pub k_range: (usize, usize),
    pub relative_range: f64,
    /// Relative change of the index across the whole scan, from a linear fit
    /// of α̂ on ln k.
    pub scan_drift: f64,
    /// Set when the scan drifts by more than 30%, as for light tails.
    pub no_plateau: bool,
}

fn sorted_desc(values: &[f64], censored: Option<&[bool]>) -> Vec<(f64, bool)> {
    let mut v: Vec<(f64, bool)> = match censored {
        Some(c) => values.iter().copied().zip(c.iter().copied()).collect(),
        None => values.iter().map(|&x| (x, false)).collect(),
    };
    v.sort_by(|a, b| b.0.total_cmp(&a.0));
    v
}

fn hill_sorted(v: &[(f64, bool)], k: usize) -> Result<(f64, f64)> {
    let threshold = v[k].0;
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument("Hill estimator needs positive order statistics".into()));
    }
    let ln_t = threshold.ln();
    let mut log_sum = 0.0;
    let mut events = 0usize;
    for &(x, c) in &v[..k] {
        log_sum += x.ln() - ln_t;
        if !c {
            events += 1;
        }
    }
    if log_sum <= 0.0 {
        return Err(Error::TooFewDistinct { k });
    }
    Ok((events as f64 / log_sum, threshold))
}

/// Hill estimator on the top `k` order statistics; SE = α̂/√k.
pub fn hill(samples: &[f64], k: usize) -> Result<TailEstimate> {
    hill_censored(samples, &vec![false; samples.len()], k)
}

/// Hill estimator for right-censored data: censored values count in the log
/// excesses but not as tail events.
pub fn hill_censored(samples: &[f64], censored: &[bool], k: usize) -> Result<TailEstimate> {
    let n = samples.len();
    let uncensored = censored.iter().filter(|c| !**c).count();
    if k == 0 || uncensored < 10 * k {
        return Err(Error::TooFewSamples { needed: 10 * k.max(1), have: uncensored });
    }
    let v = sorted_desc(samples, Some(censored));
    let (index, threshold) = hill_sorted(&v, k)?;
    Ok(TailEstimate {
        index,
        se: index / (k as f64).sqrt(),
        constant: (k as f64 / n as f64) * threshold.powf(index),
        k_order: k,
        n,
        censored_fraction: (n - uncensored) as f64 / n as f64,
        threshold,
        plateau: None,
    })
}

pub fn default_k(n: usize) -> usize {
    (n as f64).powf(2.0 / 3.0).floor() as usize
}

/// Hill estimate at the default order ⌊n^{2/3}⌋, with a plateau scan over
/// k ∈ [n^{1/2}, n^{4/5}].
pub fn hill_auto(samples: &[f64], censored: Option<&[bool]>) -> Result<TailEstimate> {
    let n = samples.len();
    let flags: Vec<bool> = censored.map(|c| c.to_vec()).unwrap_or_else(|| vec![false; n]);
    let mut est = hill_censored(samples, &flags, default_k(n))?;
    let v = sorted_desc(samples, Some(&flags));
    est.plateau = plateau_scan(&v);
    Ok(est)
}

fn plateau_scan(v: &[(f64, bool)]) -> Option<Plateau> {
    let n = v.len();
    let lo = (n as f64).sqrt();
    let hi = (n as f64).powf(0.8);
    let points = 20;
    let mut ks: Vec<usize> = (0..points)
        .map(|i| (lo * (hi / lo).powf(i as f64 / (points - 1) as f64)).round() as usize)
        .filter(|&k| k >= 2 && k < n)
        .collect();
    ks.dedup();
    let est: Vec<(usize, f64)> = ks.iter().filter_map(|&k| hill_sorted(v, k).ok().map(|(a, _)| (k, a))).collect();
    let w = 5;
    if est.len() < w {
        return None;
    }
    let mut best: Option<Plateau> = None;
    for win in est.windows(w) {
        let mean = win.iter().map(|x| x.1).sum::<f64>() / w as f64;
        let max = win.iter().map(|x| x.1).fold(f64::MIN, f64::max);
        let min = win.iter().map(|x| x.1).fold(f64::MAX, f64::min);
        let rel = (max - min) / mean.abs();
        if best.as_ref().is_none_or(|b| rel < b.relative_range) {
            best = Some(Plateau {
                index: mean,
                k_range: (win[0].0, win[w - 1].0),
                relative_range: rel,
                scan_drift: 0.0,
                no_plateau: false,
            });
        }
    }
    let xy: Vec<(f64, f64)> = est.iter().map(|&(k, a)| ((k as f64).ln(), a)).collect();
    let (slope, _, _) = least_squares(&xy);
    let mean = est.iter().map(|x| x.1).sum::<f64>() / est.len() as f64;
    let span = xy[xy.len() - 1].0 - xy[0].0;
    best.map(|mut b| {
        b.scan_drift = (slope * span / mean).abs();
        b.no_plateau = b.scan_drift > 0.3;
        b
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SurvivalPoint {
    pub x: f64,
    /// Kaplan–Meier estimate of P(X ≥ x).
    pub s: f64,
    /// Observations (censored or not) with value ≥ x.
    pub exceedances: usize,
}

/// Kaplan–Meier estimate of P(X ≥ x) on a grid. A censored value c means
/// X ≥ c; it stays at risk at c.
pub fn survival_curve(samples: &[f64], censored: Option<&[bool]>, grid: &[f64]) -> Result<Vec<SurvivalPoint>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("survival_curve samples"));
    }
    let mut v = sorted_desc(samples, censored);
    v.reverse();
    let n = v.len();
    // distinct event values with their multiplicity and risk set
    let mut steps: Vec<(f64, f64)> = Vec::new(); // (t, factor)
    let mut i = 0;
    while i < n {
        let t = v[i].0;
        let mut j = i;
        let mut events = 0usize;
        while j < n && v[j].0 == t {
            if !v[j].1 {
                events += 1;
            }
            j += 1;
        }
        if events > 0 {
            let at_risk = n - i;
            steps.push((t, 1.0 - events as f64 / at_risk as f64));
        }
        i = j;
    }
    let mut out = Vec::with_capacity(grid.len());
    let mut g: Vec<(usize, f64)> = grid.iter().copied().enumerate().collect();
    g.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut s = 1.0;
    let mut si = 0;
    let mut vi = 0;
    let mut res = vec![SurvivalPoint { x: 0.0, s: 0.0, exceedances: 0 }; grid.len()];
    for (gi, x) in g {
        while si < steps.len() && steps[si].0 < x {
            s *= steps[si].1;
            si += 1;
        }
        while vi < n && v[vi].0 < x {
            vi += 1;
        }
        res[gi] = SurvivalPoint { x, s, exceedances: n - vi };
    }
    out.extend(res);
    Ok(out)
}

/// Log-spaced grid of `points` values between `lo` and `hi`.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points < 2 {
        return vec![lo];
    }
    (0..points).map(|i| lo * (hi / lo).powf(i as f64 / (points - 1) as f64)).collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
}

/// Least squares of ln Ŝ(x) on ln x over grid points inside `range` with at
/// least 100 exceedances; needs 5 such points.
pub fn loglog_fit(points: &[SurvivalPoint], range: (f64, f64)) -> Result<LogLogFit> {
    let used: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.x >= range.0 && p.x <= range.1 && p.exceedances >= 100 && p.s > 0.0 && p.x > 0.0)
        .map(|p| (p.x.ln(), p.s.ln()))
        .collect();
    if used.len() < 5 {
        return Err(Error::RangeEmpty(format!(
            "{} grid points with >= 100 exceedances in [{}, {}], need 5",
            used.len(),
            range.0,
            range.1
        )));
    }
    let (slope, intercept, r2) = least_squares(&used);
    Ok(LogLogFit { slope, intercept, r2, points: used.len() })
}

/// Intercept of the log-log line with the slope held at `slope`.
pub fn loglog_intercept_fixed_slope(points: &[SurvivalPoint], range: (f64, f64), slope: f64) -> Result<f64> {
    let used: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.x >= range.0 && p.x <= range.1 && p.exceedances >= 100 && p.s > 0.0 && p.x > 0.0)
        .map(|p| (p.x.ln(), p.s.ln()))
        .collect();
    if used.len() < 5 {
        return Err(Error::RangeEmpty(format!("{} usable grid points, need 5", used.len())));
    }
    Ok(used.iter().map(|(x, y)| y - slope * x).sum::<f64>() / used.len() as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct TailSlope {
    pub fit: LogLogFit,
    pub range: (f64, f64),
    pub curve: Vec<SurvivalPoint>,
}

/// Log-log survival slope over the upper tail: from the value where the
/// empirical survival first drops to `start_survival` up to the largest value
/// still exceeded by `min_exceedances` observations, on a log grid of
/// `points` values.
pub fn tail_slope_fit(
    samples: &[f64],
    censored: Option<&[bool]>,
    start_survival: f64,
    min_exceedances: usize,
    points: usize,
) -> Result<TailSlope> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::EmptyInput("tail_slope_fit"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let rank_lo = ((start_survival * n as f64).floor() as usize).clamp(1, n) - 1;
    if min_exceedances == 0 || min_exceedances > n {
        return Err(Error::RangeEmpty(format!("{min_exceedances} exceedances requested from {n} samples")));
    }
    let lo = sorted[rank_lo];
    let hi = sorted[min_exceedances - 1];
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::RangeEmpty(format!("upper tail [{lo}, {hi}] is degenerate")));
    }
    let grid = log_grid(lo, hi, points);
    let curve = survival_curve(samples, censored, &grid)?;
    let fit = loglog_fit(&curve, (lo, hi))?;
    Ok(TailSlope { fit, range: (lo, hi), curve })
}

fn least_squares(xy: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = xy.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, my - slope * mx, r2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TestKind {
    Ks,
    ChiSquare,
}

#[derive(Debug, Clone, Serialize)]
pub struct TwoSampleResult {
    pub kind: TestKind,
    pub statistic: f64,
    pub p_value: f64,
    pub n1: usize,
    pub n2: usize,
    pub dof: Option<usize>,
}

/// Kolmogorov distribution tail Q(λ) = 2 Σ_{k≥1} (−1)^{k−1} e^{−2k²λ²}.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov–Smirnov test with the asymptotic p-value
/// (Stephens' small-sample correction). Ties are handled exactly.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<TwoSampleResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("ks_two_sample"));
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n1, n2) = (x.len(), y.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n1 && j < n2 {
        let t = if x[i].total_cmp(&y[j]).is_le() { x[i] } else { y[j] };
        while i < n1 && x[i] == t {
            i += 1;
        }
        while j < n2 && y[j] == t {
            j += 1;
        }
        d = d.max((i as f64 / n1 as f64 - j as f64 / n2 as f64).abs());
    }
    let en = ((n1 * n2) as f64 / (n1 + n2) as f64).sqrt();
    let p = kolmogorov_q((en + 0.12 + 0.11 / en) * d);
    Ok(TwoSampleResult { kind: TestKind::Ks, statistic: d, p_value: p, n1, n2, dof: None })
}

/// sup_x |F̂(x) − F(x)| for a sample against a right-continuous CDF. Just
/// below each sample point the empirical CDF is compared with the left limit
/// F(t−), so atoms of F are handled.
pub fn ks_distance_to_cdf(sample: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::EmptyInput("ks_distance_to_cdf"));
    }
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < x.len() {
        let t = x[i];
        let below = i as f64 / n;
        while i < x.len() && x[i] == t {
            i += 1;
        }
        let at = i as f64 / n;
        d = d.max((at - cdf(t)).abs()).max((below - cdf(t.next_down())).abs());
    }
    Ok(d)
}

/// Empirical CDF evaluated at `t` (fraction of values ≤ t).
pub fn ecdf(sorted: &[f64], t: f64) -> f64 {
    sorted.partition_point(|&x| x <= t) as f64 / sorted.len() as f64
}

fn chi2_sf(stat: f64, dof: usize) -> f64 {
    if dof == 0 {
        return 1.0;
    }
    ChiSquared::new(dof as f64).map(|c| c.sf(stat)).unwrap_or(f64::NAN)
}

/// Pools bins whose expectation is below 5: small bins are gathered into one,
/// which joins the smallest large bin if it is still small.
fn pool_bins(observed: &[f64], expected: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut obs = Vec::new();
    let mut exp = Vec::new();
    let (mut so, mut se) = (0.0, 0.0);
    for (&o, &e) in observed.iter().zip(expected) {
        if e >= 5.0 {
            obs.push(o);
            exp.push(e);
        } else {
            so += o;
            se += e;
        }
    }
    if se > 0.0 || so > 0.0 {
        if se >= 5.0 || exp.is_empty() {
            obs.push(so);
            exp.push(se);
        } else {
            let (idx, _) = exp.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
            obs[idx] += so;
            exp[idx] += se;
        }
    }
    (obs, exp)
}

/// Pearson goodness of fit; `expected` holds counts with the same total.
pub fn chi_square_gof(observed: &[f64], expected: &[f64]) -> Result<TwoSampleResult> {
    if observed.is_empty() || observed.len() != expected.len() {
        return Err(Error::EmptyInput("chi_square_gof bins"));
    }
    let (obs, exp) = pool_bins(observed, expected);
    let stat: f64 = obs.iter().zip(&exp).map(|(o, e)| (o - e).powi(2) / e).sum();
    let dof = obs.len().saturating_sub(1);
    let n: f64 = observed.iter().sum();
    Ok(TwoSampleResult {
        kind: TestKind::ChiSquare,
        statistic: stat,
        p_value: chi2_sf(stat, dof),
        n1: n as usize,
        n2: 0,
        dof: Some(dof),
    })
}

/// Goodness of fit of categorical samples against probabilities `probs[j]` for
/// category `j`; values ≥ probs.len() form an extra bin with the leftover mass.
pub fn chi_square_gof_categorical(samples: &[u64], probs: &[f64]) -> Result<TwoSampleResult> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("chi_square_gof_categorical"));
    }
    let k = probs.len();
    let mut observed = vec![0.0; k + 1];
    for &s in samples {
        observed[(s as usize).min(k)] += 1.0;
    }
    let n = samples.len() as f64;
    let rest = (1.0 - probs.iter().sum::<f64>()).max(0.0);
    let mut expected: Vec<f64> = probs.iter().map(|p| p * n).collect();
    expected.push(rest * n);
    chi_square_gof(&observed, &expected)
}

/// 2×K homogeneity test between two categorical samples.
pub fn chi_square_homogeneity<K: Ord + Clone>(a: &[K], b: &[K]) -> Result<TwoSampleResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("chi_square_homogeneity"));
    }
    let mut table: BTreeMap<K, (f64, f64)> = BTreeMap::new();
    for x in a {
        table.entry(x.clone()).or_default().0 += 1.0;
    }
    for x in b {
        table.entry(x.clone()).or_default().1 += 1.0;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let total = na + nb;
    // pool categories with a small expected count in either row
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let mut pooled = (0.0, 0.0);
    for &(ca, cb) in table.values() {
        let col = ca + cb;
        if col * na.min(nb) / total >= 5.0 {
            cells.push((ca, cb));
        } else {
            pooled.0 += ca;
            pooled.1 += cb;
        }
    }
    if pooled.0 + pooled.1 > 0.0 {
        let col = pooled.0 + pooled.1;
        if col * na.min(nb) / total >= 5.0 || cells.is_empty() {
            cells.push(pooled);
        } else {
            let idx = (0..cells.len()).min_by(|&i, &j| (cells[i].0 + cells[i].1).total_cmp(&(cells[j].0 + cells[j].1))).unwrap();
            cells[idx].0 += pooled.0;
            cells[idx].1 += pooled.1;
        }
    }
    let mut stat = 0.0;
    for &(ca, cb) in &cells {
        let col = ca + cb;
        let ea = col * na / total;
        let eb = col * nb / total;
        stat += (ca - ea).powi(2) / ea + (cb - eb).powi(2) / eb;
    }
    let dof = cells.len().saturating_sub(1);
    Ok(TwoSampleResult {
        kind: TestKind::ChiSquare,
        statistic: stat,
        p_value: chi2_sf(stat, dof),
        n1: a.len(),
        n2: b.len(),
        dof: Some(dof),
    })
}

/// Sample mean and its standard error.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if n == 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let m = values.iter().sum::<f64>() / n;
    if n < 2.0 {
        return (m, f64::NAN);
    }
    let var = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}
