//! Tilted one-dimensional walks from the many-to-one formula, path-box
//! identity checks and ladder renewal functions.
//!
//! `S` has increments `-ln A` with probability `prob_b · A`; `S^(κ)` uses
//! `prob_b · A^κ`. For a valid law `S` drifts to +∞ and `S^(κ)` to −∞.

use rand::Rng;
use serde::Serialize;

use crate::env::{EnvTree, ReproductionLaw};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{derive_seed, stream};

const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct TiltedIncrementLaw {
    /// (value, probability), sorted by value, equal values merged.
    pub atoms: Vec<(f64, f64)>,
    pub exponent: f64,
    #[serde(skip)]
    cum: Vec<f64>,
}

/// Increment law with probabilities `prob_b · A^exponent`.
pub fn tilt(law: &ReproductionLaw, exponent: f64) -> Result<TiltedIncrementLaw> {
    let residual = (law.psi(exponent) - 1.0).abs();
    if !(residual <= NORMALIZATION_TOL) {
        return Err(Error::NotNormalized { exponent, residual });
    }
    let mut atoms: Vec<(f64, f64)> = law
        .branches()
        .iter()
        .flat_map(|b| b.weights.iter().map(move |&a| (-a.ln(), b.prob * a.powf(exponent))))
        .collect();
    atoms.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
    for (v, p) in atoms {
        match merged.last_mut() {
            Some(last) if last.0 == v => last.1 += p,
            _ => merged.push((v, p)),
        }
    }
    let mut acc = 0.0;
    let cum = merged
        .iter()
        .map(|&(_, p)| {
            acc += p;
            acc
        })
        .collect();
    Ok(TiltedIncrementLaw { atoms: merged, exponent, cum })
}

impl TiltedIncrementLaw {
    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|(v, p)| v * p).sum()
    }

    pub fn total_prob(&self) -> f64 {
        self.cum.last().copied().unwrap_or(0.0)
    }

    pub fn sample_increment<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u = rng.random::<f64>() * self.total_prob();
        let idx = self.cum.partition_point(|&c| c <= u).min(self.atoms.len() - 1);
        self.atoms[idx].0
    }

    /// E[e^{θ S_1}].
    pub fn mgf(&self, theta: f64) -> f64 {
        self.atoms.iter().map(|(v, p)| p * (theta * v).exp()).sum()
    }
}

/// S_1, …, S_n started from 0 (empty for n = 0).
pub fn sample_path<R: Rng + ?Sized>(tilted: &TiltedIncrementLaw, n: usize, rng: &mut R) -> Vec<f64> {
    let mut s = 0.0;
    (0..n)
        .map(|_| {
            s += tilted.sample_increment(rng);
            s
        })
        .collect()
}

/// Indicator that `x_k ∈ (lo_k, hi_k)` for k = 1..n.
#[derive(Debug, Clone, Serialize)]
pub struct PathBox {
    pub name: String,
    pub bounds: Vec<(f64, f64)>,
}

impl PathBox {
    pub fn n(&self) -> usize {
        self.bounds.len()
    }

    pub fn contains_step(&self, k: usize, x: f64) -> bool {
        let (lo, hi) = self.bounds[k];
        x > lo && x < hi
    }

    pub fn contains(&self, path: &[f64]) -> bool {
        path.len() >= self.n() && (0..self.n()).all(|k| self.contains_step(k, path[k]))
    }
}

/// Five path boxes with n ≤ 5; faces sit at values unlikely to be sums of a
/// few displacements of the reference laws.
pub fn default_battery() -> Vec<PathBox> {
    let inf = f64::INFINITY;
    let b = |name: &str, bounds: Vec<(f64, f64)>| PathBox { name: name.into(), bounds };
    vec![
        b("all-n1", vec![(-inf, inf)]),
        b("min-above-n3", vec![(-0.1037, inf); 3]),
        b("corridor-n2", vec![(-inf, 0.5113), (-1.0219, 1.7071)]),
        b("max-below-n4", vec![(-inf, 2.9131); 4]),
        b("window-n5", vec![(-inf, 4.7177), (-inf, 4.7177), (-inf, 4.7177), (-inf, 4.7177), (0.3119, 4.1203)]),
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityRow {
    pub name: String,
    pub n: usize,
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub rhs_se: f64,
    /// (lhs − rhs) / combined SE.
    pub z: f64,
}

impl IdentityRow {
    fn new(name: &str, n: usize, lhs: (f64, f64), rhs: (f64, f64)) -> Self {
        let se = (lhs.1 * lhs.1 + rhs.1 * rhs.1).sqrt();
        let z = if se > 0.0 { (lhs.0 - rhs.0) / se } else if lhs.0 == rhs.0 { 0.0 } else { f64::INFINITY };
        Self { name: name.into(), n, lhs: lhs.0, lhs_se: lhs.1, rhs: rhs.0, rhs_se: rhs.1, z }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    sum: Vec<f64>,
    sum2: Vec<f64>,
}

impl Moments {
    fn new(k: usize) -> Self {
        Self { sum: vec![0.0; k], sum2: vec![0.0; k] }
    }

    fn add(&mut self, values: &[f64]) {
        for (i, &x) in values.iter().enumerate() {
            self.sum[i] += x;
            self.sum2[i] += x * x;
        }
    }

    fn merge(mut self, other: Self) -> Self {
        for i in 0..self.sum.len() {
            self.sum[i] += other.sum[i];
            self.sum2[i] += other.sum2[i];
        }
        self
    }

    fn mean_se(&self, i: usize, n: f64) -> (f64, f64) {
        let m = self.sum[i] / n;
        let var = (self.sum2[i] / n - m * m).max(0.0);
        (m, (var / n).sqrt())
    }
}

const CHUNK: u64 = 10_000;

/// Sums per-sample values over `samples` draws split into fixed chunks, each
/// chunk with its own stream, so the result does not depend on the thread count.
fn chunked_moments<F>(samples: u64, k: usize, seed: u64, label: &str, f: F) -> Moments
where
    F: Fn(&mut crate::rng::Stream, &mut Vec<f64>) + Sync,
{
    let chunks = samples.div_ceil(CHUNK);
    let parts = par::map(chunks, |c| {
        let mut rng = stream(seed, label, c);
        let mut m = Moments::new(k);
        let mut buf = vec![0.0; k];
        let count = CHUNK.min(samples - c * CHUNK);
        for _ in 0..count {
            f(&mut rng, &mut buf);
            m.add(&buf);
        }
        m
    });
    parts.into_iter().fold(Moments::new(k), Moments::merge)
}

/// E[Σ_{|z|=n} g(V(z_1), …, V(z_n))] over environments, per box.
fn environment_side(law: &ReproductionLaw, battery: &[PathBox], samples: u64, seed: u64) -> Moments {
    let depth = battery.iter().map(PathBox::n).max().unwrap_or(0) as u32;
    let k = battery.len();
    let env_base = derive_seed(seed, "mto-env", 0);
    let chunks = samples.div_ceil(CHUNK);
    let parts = par::map(chunks, |c| {
        let mut env = EnvTree::new(law, 0);
        let mut m = Moments::new(k);
        let mut buf = vec![0.0; k];
        let mut masks: Vec<u32> = Vec::new();
        let count = CHUNK.min(samples - c * CHUNK);
        for i in 0..count {
            env.reset(derive_seed(env_base, "env", c * CHUNK + i));
            env.generation(depth).expect("default node budget covers a few generations");
            masks.clear();
            masks.resize(env.len(), 0);
            masks[0] = (1u32 << k) - 1;
            buf.iter_mut().for_each(|x| *x = 0.0);
            for id in 1..env.len() {
                let node = env.node(id as u32);
                let d = node.depth as usize;
                let mut mask = masks[node.parent as usize];
                for (f, b) in battery.iter().enumerate() {
                    if d > b.n() || !b.contains_step(d - 1, node.v) {
                        mask &= !(1 << f);
                    }
                }
                masks[id] = mask;
                for (f, b) in battery.iter().enumerate() {
                    if d == b.n() && mask & (1 << f) != 0 {
                        buf[f] += 1.0;
                    }
                }
            }
            m.add(&buf);
        }
        m
    });
    parts.into_iter().fold(Moments::new(k), Moments::merge)
}

#[derive(Debug, Clone, Serialize)]
pub struct ManyToOneReport {
    pub samples: u64,
    /// Environment sum against E[e^{S_n} g(S)].
    pub many_to_one: Vec<IdentityRow>,
    /// E[g(S)] against E[e^{(κ−1) S^(κ)_n} g(S^(κ))]; empty when κ is infinite.
    pub change_of_measure: Vec<IdentityRow>,
}

impl ManyToOneReport {
    pub fn max_abs_z(&self) -> f64 {
        self.many_to_one.iter().chain(&self.change_of_measure).map(|r| r.z.abs()).fold(0.0, f64::max)
    }
}

/// Monte Carlo check of both identities for every box of `battery`.
pub fn many_to_one_check(law: &ReproductionLaw, battery: &[PathBox], samples: u64, seed: u64) -> Result<ManyToOneReport> {
    if battery.iter().any(|b| b.n() == 0 || b.n() > 5) {
        return Err(Error::InvalidArgument("path boxes need 1 <= n <= 5".into()));
    }
    let s1 = tilt(law, 1.0)?;
    let n_max = battery.iter().map(PathBox::n).max().unwrap_or(0);
    let k = battery.len();

    let env = environment_side(law, battery, samples, seed);
    // e^{S_n} g(S) and g(S) from the same paths
    let walk = chunked_moments(samples, 2 * k, seed, "mto-walk", |rng, buf| {
        let path = sample_path(&s1, n_max, rng);
        for (f, b) in battery.iter().enumerate() {
            let g = if b.contains(&path) { 1.0 } else { 0.0 };
            buf[f] = g * path[b.n() - 1].exp();
            buf[k + f] = g;
        }
    });
    let nf = samples as f64;
    let many_to_one = battery
        .iter()
        .enumerate()
        .map(|(f, b)| IdentityRow::new(&b.name, b.n(), env.mean_se(f, nf), walk.mean_se(f, nf)))
        .collect();

    let kappa = law.kappa()?;
    let mut change_of_measure = Vec::new();
    if let crate::Kappa::Finite(kv) = kappa.value {
        let sk = tilt(law, kv)?;
        let tilted = chunked_moments(samples, k, seed, "mto-kappa", |rng, buf| {
            let path = sample_path(&sk, n_max, rng);
            for (f, b) in battery.iter().enumerate() {
                let g = if b.contains(&path) { 1.0 } else { 0.0 };
                buf[f] = g * ((kv - 1.0) * path[b.n() - 1]).exp();
            }
        });
        change_of_measure = battery
            .iter()
            .enumerate()
            .map(|(f, b)| IdentityRow::new(&b.name, b.n(), walk.mean_se(k + f, nf), tilted.mean_se(f, nf)))
            .collect();
    }
    Ok(ManyToOneReport { samples, many_to_one, change_of_measure })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LadderKind {
    /// R_s^+(x) = U_s^+([0,x]): visits of S to [0,x] before the first k ≥ 1 with S_k ≤ 0.
    StrictAscending,
    /// R_s^-(x) = U_s^-([0,x]): visits of −S to [0,x] before the first k ≥ 1 with S_k ≥ 0.
    StrictDescending,
    /// U_w^+([0,x]): visits of S to [0,x] before the first k ≥ 1 with S_k < 0.
    WeakAscending,
    /// U_w^-([0,x]): visits of −S to [0,x] before the first k ≥ 1 with S_k > 0.
    WeakDescending,
}

impl LadderKind {
    pub const ALL: [LadderKind; 4] =
        [Self::StrictAscending, Self::StrictDescending, Self::WeakAscending, Self::WeakDescending];

    pub fn label(self) -> &'static str {
        match self {
            Self::StrictAscending => "strict+",
            Self::StrictDescending => "strict-",
            Self::WeakAscending => "weak+",
            Self::WeakDescending => "weak-",
        }
    }

    fn sign(self) -> f64 {
        match self {
            Self::StrictAscending | Self::WeakAscending => 1.0,
            _ => -1.0,
        }
    }

    /// True when the walk position `s` (k ≥ 1) ends the sum.
    fn stops(self, s: f64) -> bool {
        match self {
            Self::StrictAscending => s <= 0.0,
            Self::StrictDescending => s >= 0.0,
            Self::WeakAscending => s < 0.0,
            Self::WeakDescending => s > 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LadderEstimate {
    pub kind: LadderKind,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub se: Vec<f64>,
    pub samples: u64,
    /// Mean number of steps simulated per sample.
    pub mean_steps: f64,
    /// Fraction of samples stopped by the escape rule rather than the epoch.
    pub truncated_fraction: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LadderCaps {
    /// Steps allowed per sample.
    pub epoch_cap: u64,
    /// Neglected mass for the escape rule on defective epochs.
    pub eps: f64,
}

impl Default for LadderCaps {
    fn default() -> Self {
        Self { epoch_cap: 10_000_000, eps: 1e-9 }
    }
}

/// Renewal function estimates on `grid` (x ≥ 0) for a negative-drift walk.
///
/// The descending sums run until a ladder epoch that may never come; they stop
/// once S drops below −(max grid + L) with L = ln(1/eps)/θ, where θ > 0 solves
/// E[e^{θ S_1}] = 1, because the walk then comes back to the grid with
/// probability at most eps.
pub fn ladder_renewal(
    tilted: &TiltedIncrementLaw,
    kind: LadderKind,
    grid: &[f64],
    samples: u64,
    caps: &LadderCaps,
    seed: u64,
) -> Result<LadderEstimate> {
    if tilted.mean() >= 0.0 {
        return Err(Error::InvalidArgument(format!("ladder estimates need negative drift (mean {})", tilted.mean())));
    }
    if grid.iter().any(|&x| !(x >= 0.0)) || grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("grid must be sorted and nonnegative".into()));
    }
    let theta = cramer_root(tilted)?;
    let x_max = grid.last().copied().unwrap_or(0.0);
    let escape = -(x_max + (1.0 / caps.eps).ln() / theta);
    let g = grid.len();
    let sign = kind.sign();
    let chunks = samples.div_ceil(CHUNK);
    let parts = par::map(chunks, |c| -> Result<(Moments, u64, u64)> {
        let mut rng = stream(seed, kind.label(), c);
        let mut m = Moments::new(g);
        let mut hist = vec![0u64; g];
        let mut buf = vec![0.0; g];
        let (mut steps, mut truncated) = (0u64, 0u64);
        for _ in 0..CHUNK.min(samples - c * CHUNK) {
            hist.iter_mut().for_each(|h| *h = 0);
            let mut s = 0.0f64;
            let mut k = 0u64;
            loop {
                let y = sign * s;
                let idx = grid.partition_point(|&x| x < y);
                if y >= 0.0 && idx < g {
                    hist[idx] += 1;
                }
                s += tilted.sample_increment(&mut rng);
                k += 1;
                if kind.stops(s) {
                    break;
                }
                if s < escape {
                    truncated += 1;
                    break;
                }
                if k >= caps.epoch_cap {
                    return Err(Error::EpochCap { cap: caps.epoch_cap });
                }
            }
            steps += k;
            let mut acc = 0u64;
            for (b, h) in buf.iter_mut().zip(&hist) {
                acc += h;
                *b = acc as f64;
            }
            m.add(&buf);
        }
        Ok((m, steps, truncated))
    });
    let mut total = Moments::new(g);
    let (mut steps, mut truncated) = (0u64, 0u64);
    for p in parts {
        let (m, s, t) = p?;
        total = total.merge(m);
        steps += s;
        truncated += t;
    }
    let nf = samples as f64;
    let (values, se) = (0..g).map(|i| total.mean_se(i, nf)).unzip();
    Ok(LadderEstimate {
        kind,
        grid: grid.to_vec(),
        values,
        se,
        samples,
        mean_steps: steps as f64 / nf,
        truncated_fraction: truncated as f64 / nf,
    })
}

/// Positive root of E[e^{θ S_1}] = 1 for a negative-drift walk with some
/// positive atom.
fn cramer_root(tilted: &TiltedIncrementLaw) -> Result<f64> {
    if tilted.atoms.iter().all(|&(v, _)| v <= 0.0) {
        // the walk never goes up; no return is possible
        return Ok(f64::INFINITY);
    }
    let f = |t: f64| tilted.mgf(t) - 1.0;
    let mut hi = 1.0;
    while f(hi) < 0.0 {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::InvalidArgument("no Cramér root for the tilted walk".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}
