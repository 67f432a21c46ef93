//! Finite-support reproduction laws of the branching random walk.
//!
//! A law is a finite list of branches; branch `b` is drawn with probability
//! `prob_b` and produces `N_b` children with weights `A_{b,j} = e^{-ΔV}`,
//! where `ΔV` is the child's displacement from its parent.

use std::path::Path;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PROB_SUM_TOL: f64 = 1e-12;
const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct Branch {
    pub prob: f64,
    pub weights: Vec<f64>,
    /// `-ln A_j` for each child.
    pub displacements: Vec<f64>,
    pub total_weight: f64,
}

#[derive(Debug, Clone)]
struct ExactBranch {
    prob: BigRational,
    weights: Vec<BigRational>,
}

#[derive(Debug, Clone)]
pub struct ReproductionLaw {
    branches: Vec<Branch>,
    cum_prob: Vec<f64>,
    /// Cumulative `prob_b * W_b`, the size-biased branch law.
    cum_size_biased: Vec<f64>,
    exact: Option<Vec<ExactBranch>>,
}

/// JSON schema: `{"branches":[{"prob":"0.5","weights":["1.25"]}, ...]}`.
/// Numbers may be given as decimal strings (parsed exactly) or JSON numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LawFile {
    pub branches: Vec<BranchFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchFile {
    pub prob: Decimal,
    pub weights: Vec<Decimal>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Decimal {
    Text(String),
    Number(serde_json::Number),
}

impl Decimal {
    fn text(&self) -> String {
        match self {
            Decimal::Text(s) => s.trim().to_string(),
            Decimal::Number(n) => n.to_string(),
        }
    }
}

/// Parses a decimal literal such as `0.2925`, `3`, `1.5e-3` into an exact rational.
pub fn parse_decimal(s: &str) -> Option<BigRational> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    let (mantissa, exponent) = match s.find(['e', 'E']) {
        Some(pos) => (&s[..pos], s[pos + 1..].parse::<i32>().ok()?),
        None => (s, 0),
    };
    let (negative, digits) = match mantissa.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, mantissa.strip_prefix('+').unwrap_or(mantissa)),
    };
    let (int_part, frac_part) = match digits.find('.') {
        Some(pos) => (&digits[..pos], &digits[pos + 1..]),
        None => (digits, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.chars().chain(frac_part.chars()).all(|c| c.is_ascii_digit()) {
        return None;
    }
    let all_digits = format!("{int_part}{frac_part}");
    let mut numer: BigInt = all_digits.parse().ok()?;
    if negative {
        numer = -numer;
    }
    let scale = exponent - frac_part.len() as i32;
    let ten = BigInt::from(10);
    let value = if scale >= 0 {
        BigRational::from_integer(numer * num_traits::pow(ten, scale as usize))
    } else {
        BigRational::new(numer, num_traits::pow(ten, (-scale) as usize))
    };
    Some(value)
}

fn rational_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

impl ReproductionLaw {
    /// Builds a law from `(prob, weights)` pairs given as floats.
    pub fn from_branches(branches: Vec<(f64, Vec<f64>)>) -> Result<Self> {
        let built = branches
            .into_iter()
            .map(|(p, w)| Self::make_branch(p, w))
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(built, None)
    }

    pub fn from_law_file(file: &LawFile) -> Result<Self> {
        let mut exact = Vec::with_capacity(file.branches.len());
        let mut branches = Vec::with_capacity(file.branches.len());
        for (b, bf) in file.branches.iter().enumerate() {
            let prob = parse_decimal(&bf.prob.text())
                .ok_or_else(|| Error::LawParse(format!("branches[{b}].prob: not a decimal: {:?}", bf.prob.text())))?;
            let weights = bf
                .weights
                .iter()
                .enumerate()
                .map(|(j, w)| {
                    parse_decimal(&w.text()).ok_or_else(|| {
                        Error::LawParse(format!("branches[{b}].weights[{j}]: not a decimal: {:?}", w.text()))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            branches.push(Self::make_branch(
                rational_to_f64(&prob),
                weights.iter().map(rational_to_f64).collect(),
            )?);
            exact.push(ExactBranch { prob, weights });
        }
        let total: BigRational = exact.iter().map(|b| b.prob.clone()).sum();
        if !total.is_one() {
            return Err(Error::InvalidLaw(format!(
                "branch probabilities sum to {} (exactly), not 1",
                rational_to_f64(&total)
            )));
        }
        Self::assemble(branches, Some(exact))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: LawFile = serde_json::from_str(text).map_err(|e| Error::LawParse(e.to_string()))?;
        Self::from_law_file(&file)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::LawParse(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    /// Reference law with κ = 3.
    pub fn env_a() -> Self {
        Self::from_json_str(include_str!("../../fixtures/env_a.json")).expect("env_a fixture")
    }

    /// Reference law with κ ≈ 1.497.
    pub fn env_b() -> Self {
        Self::from_json_str(include_str!("../../fixtures/env_b.json")).expect("env_b fixture")
    }

    /// Reference law with κ = ∞.
    pub fn env_c() -> Self {
        Self::from_json_str(include_str!("../../fixtures/env_c.json")).expect("env_c fixture")
    }

    fn make_branch(prob: f64, weights: Vec<f64>) -> Result<Branch> {
        if !(prob.is_finite() && prob > 0.0 && prob <= 1.0) {
            return Err(Error::InvalidLaw(format!("branch probability {prob} outside (0, 1]")));
        }
        if weights.is_empty() {
            return Err(Error::InvalidLaw("branch without children".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidLaw(format!("non-positive weight {w}")));
        }
        let displacements = weights.iter().map(|w| -w.ln()).collect();
        let total_weight = weights.iter().sum();
        Ok(Branch { prob, weights, displacements, total_weight })
    }

    fn assemble(branches: Vec<Branch>, exact: Option<Vec<ExactBranch>>) -> Result<Self> {
        if branches.is_empty() {
            return Err(Error::InvalidLaw("no branches".into()));
        }
        let total: f64 = branches.iter().map(|b| b.prob).sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidLaw(format!("branch probabilities sum to {total}, not 1")));
        }
        let cum_prob = cumulative(branches.iter().map(|b| b.prob));
        let cum_size_biased = cumulative(branches.iter().map(|b| b.prob * b.total_weight));
        Ok(Self { branches, cum_prob, cum_size_biased, exact })
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn branch(&self, index: usize) -> &Branch {
        &self.branches[index]
    }

    pub fn has_exact(&self) -> bool {
        self.exact.is_some()
    }

    /// Largest number of children in any branch.
    pub fn max_children(&self) -> usize {
        self.branches.iter().map(|b| b.weights.len()).max().unwrap_or(0)
    }

    /// Branch index for a uniform `u ∈ [0, 1)`.
    pub fn pick_branch(&self, u: f64) -> usize {
        pick(&self.cum_prob, u)
    }

    /// Branch index under the size-biased law `prob_b * W_b / ψ(1)`.
    pub fn pick_size_biased_branch(&self, u: f64) -> usize {
        pick(&self.cum_size_biased, u)
    }

    /// ψ(t) = Σ_b prob_b Σ_j A_{b,j}^t.
    pub fn psi(&self, t: f64) -> f64 {
        self.branches
            .iter()
            .map(|b| b.prob * b.weights.iter().map(|a| a.powf(t)).sum::<f64>())
            .sum()
    }

    /// ψ'(t) = Σ_b prob_b Σ_j A^t ln A.
    pub fn psi_prime(&self, t: f64) -> f64 {
        self.branches
            .iter()
            .map(|b| b.prob * b.weights.iter().map(|a| a.powf(t) * a.ln()).sum::<f64>())
            .sum()
    }

    /// ψ(t) in exact rationals for integer `t`, when the law was parsed from decimals.
    pub fn psi_exact(&self, t: u32) -> Option<BigRational> {
        let exact = self.exact.as_ref()?;
        Some(
            exact
                .iter()
                .map(|b| {
                    let s: BigRational = b.weights.iter().map(|a| num_traits::pow(a.clone(), t as usize)).sum();
                    b.prob.clone() * s
                })
                .sum(),
        )
    }

    /// Mean number of children, ψ(0).
    pub fn mean_offspring(&self) -> f64 {
        self.branches.iter().map(|b| b.prob * b.weights.len() as f64).sum()
    }

    /// Root of ψ(t) = 1 on (1, t_max] by grid probe and bisection.
    pub fn solve_kappa(&self, t_max: f64, tol: f64) -> Result<KappaResult> {
        if !(t_max > 1.0) {
            return Err(Error::InvalidArgument(format!("t_max = {t_max} must exceed 1")));
        }
        let steps = 4000usize;
        let h = (t_max - 1.0) / steps as f64;
        let mut prev_t = 1.0;
        let mut dipped = false;
        for k in 1..=steps {
            let t = 1.0 + h * k as f64;
            let v = self.psi(t);
            if v < 1.0 {
                dipped = true;
            } else if dipped {
                let (mut lo, mut hi) = (prev_t, t);
                while hi - lo > tol {
                    let mid = 0.5 * (lo + hi);
                    if self.psi(mid) < 1.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let value = 0.5 * (lo + hi);
                return Ok(KappaResult {
                    value: Kappa::Finite(value),
                    bracket: (lo, hi),
                    residual: (self.psi(value) - 1.0).abs(),
                });
            }
            prev_t = t;
        }
        if !dipped {
            return Err(Error::NoRootBracket { t_max });
        }
        if self.psi_prime(t_max) <= 0.0 {
            Ok(KappaResult {
                value: Kappa::Infinite,
                bracket: (1.0, t_max),
                residual: (self.psi(t_max) - 1.0).abs(),
            })
        } else {
            Err(Error::KappaBeyondRange { t_max })
        }
    }

    /// κ with the default probe range.
    pub fn kappa(&self) -> Result<KappaResult> {
        self.solve_kappa(64.0, 1e-13)
    }

    /// Heuristic non-lattice check on the nonzero displacement values: the
    /// support is flagged lattice when every pair of values has a ratio within
    /// 1e-14 (relative) of a fraction with denominator at most 10^6.
    pub fn lattice_check(&self) -> LatticeCheck {
        let mut values: Vec<f64> = self
            .branches
            .iter()
            .flat_map(|b| b.displacements.iter().copied())
            .filter(|d| d.abs() > 1e-15)
            .collect();
        values.sort_by(f64::total_cmp);
        values.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * a.abs().max(1.0));
        for i in 0..values.len() {
            for j in i + 1..values.len() {
                let ratio = values[j] / values[i];
                if !is_rational_like(ratio, 1_000_000, 1e-14) {
                    return LatticeCheck { non_lattice: true, witness: Some((values[i], values[j])) };
                }
            }
        }
        LatticeCheck { non_lattice: false, witness: None }
    }

    pub fn conditions(&self) -> ConditionReport {
        let psi0 = self.mean_offspring();
        let psi1 = self.psi(1.0);
        let psi1_exact_one = self.psi_exact(1).map(|r| r.is_one());
        let normalized = match psi1_exact_one {
            Some(exact) => exact,
            None => (psi1 - 1.0).abs() <= NORMALIZATION_TOL,
        };
        let psi_prime1 = self.psi_prime(1.0);
        ConditionReport {
            psi0,
            supercritical: psi0 > 1.0,
            psi1,
            psi1_exact_one,
            normalized,
            psi_prime1,
            negative_derivative: psi_prime1 < 0.0,
            kappa: self.kappa(),
            finite_moments: true,
            lattice: self.lattice_check(),
        }
    }
}

fn cumulative(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = values
        .map(|v| {
            acc += v;
            acc
        })
        .collect();
    let total = acc;
    for c in &mut out {
        *c /= total;
    }
    if let Some(last) = out.last_mut() {
        *last = 1.0;
    }
    out
}

fn pick(cum: &[f64], u: f64) -> usize {
    cum.iter().position(|&c| u < c).unwrap_or(cum.len() - 1)
}

fn is_rational_like(x: f64, max_den: u64, tol: f64) -> bool {
    // continued-fraction convergents p/q with q <= max_den
    let target = x.abs();
    let (mut h0, mut h1) = (0f64, 1f64);
    let (mut k0, mut k1) = (1f64, 0f64);
    let mut r = target;
    for _ in 0..64 {
        let a = r.floor();
        let h2 = a * h1 + h0;
        let k2 = a * k1 + k0;
        if k2 > max_den as f64 {
            break;
        }
        if (target - h2 / k2).abs() <= tol * target.max(1.0) {
            return true;
        }
        (h0, h1, k0, k1) = (h1, h2, k1, k2);
        let frac = r - a;
        if frac < 1e-300 {
            break;
        }
        r = 1.0 / frac;
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Kappa {
    Finite(f64),
    Infinite,
}

impl Kappa {
    pub fn as_f64(self) -> f64 {
        match self {
            Kappa::Finite(k) => k,
            Kappa::Infinite => f64::INFINITY,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Kappa::Finite(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KappaResult {
    pub value: Kappa,
    pub bracket: (f64, f64),
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatticeCheck {
    pub non_lattice: bool,
    /// A pair of displacement values whose ratio is not rational-like.
    pub witness: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct ConditionReport {
    pub psi0: f64,
    pub supercritical: bool,
    pub psi1: f64,
    pub psi1_exact_one: Option<bool>,
    pub normalized: bool,
    pub psi_prime1: f64,
    pub negative_derivative: bool,
    pub kappa: Result<KappaResult>,
    /// Finite support makes every moment condition automatic.
    pub finite_moments: bool,
    pub lattice: LatticeCheck,
}

impl ConditionReport {
    /// Conditions that are hard requirements; the lattice check is only a warning.
    pub fn all_required_hold(&self) -> bool {
        self.supercritical && self.normalized && self.negative_derivative && self.kappa.is_ok() && self.finite_moments
    }

    /// Name of the first violated hard condition, if any.
    pub fn first_violation(&self) -> Option<String> {
        if !self.supercritical {
            return Some(format!("supercriticality: psi(0) = {} <= 1", self.psi0));
        }
        if !self.normalized {
            return Some(format!("normalization: psi(1) = {} != 1", self.psi1));
        }
        if !self.negative_derivative {
            return Some(format!("derivative: psi'(1) = {} >= 0", self.psi_prime1));
        }
        if let Err(e) = &self.kappa {
            return Some(format!("kappa: {e}"));
        }
        None
    }
}

/// Absolute value helper for exact comparisons in tests and reports.
pub fn rational_abs_diff(a: &BigRational, b: &BigRational) -> BigRational {
    (a - b).abs()
}

/// `true` when the rational is exactly zero.
pub fn rational_is_zero(r: &BigRational) -> bool {
    r.is_zero()
}
