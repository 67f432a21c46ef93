//! Size-biased constructions along a marked ray.
//!
//! The type chain along the spine of the size-biased local-time tree has
//! kernel `p_{i,j} = C(i+j-1, i) Σ_b prob_b Σ_u A_u^j / (1+A_u)^{i+j}`. Under
//! the spined environment law the same tree is rebuilt from killed walks.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::env::{EnvTree, ReproductionLaw};
use crate::error::{Error, Result};
use crate::ltgw::BetaTree;
use crate::walk::PARENT_OF_ROOT;

pub const DEFAULT_OVERFLOW_GUARD: u64 = 10_000;
pub const DEFAULT_TAIL_TOL: f64 = 1e-9;

fn atoms(law: &ReproductionLaw) -> Vec<(f64, f64)> {
    law.branches()
        .iter()
        .flat_map(|b| b.weights.iter().map(move |&a| (b.prob, a)))
        .collect()
}

fn ln_binom_i(i: u64, j: u64) -> f64 {
    // ln C(i+j-1, i)
    ln_gamma((i + j) as f64) - ln_gamma((i + 1) as f64) - ln_gamma(j as f64)
}

fn pij_atoms(atoms: &[(f64, f64)], i: u64, j: u64) -> f64 {
    let lc = ln_binom_i(i, j);
    atoms
        .iter()
        .map(|&(p, a)| p * (lc + j as f64 * a.ln() - (i + j) as f64 * a.ln_1p()).exp())
        .sum()
}

fn check_guard(i: u64, j: u64, guard: u64) -> Result<()> {
    if i + j > guard {
        return Err(Error::OverflowGuard { sum: i + j, guard });
    }
    Ok(())
}

/// Spine transition probability `p_{i,j}` for `i, j ≥ 1`.
pub fn compute_pij(law: &ReproductionLaw, i: u64, j: u64, guard: u64) -> Result<f64> {
    if i == 0 || j == 0 {
        return Err(Error::InvalidArgument(format!("p_ij needs i, j >= 1 (got i={i}, j={j})")));
    }
    check_guard(i, j, guard)?;
    Ok(pij_atoms(&atoms(law), i, j))
}

/// Bound on Σ_{j>J} p_{i,j}: within an atom the summand ratio from j to j+1
/// is x(i+j)/j with x = A/(1+A), decreasing in j, so the tail is dominated by
/// a geometric series as soon as the ratio drops below 1.
fn tail_bound(atoms: &[(f64, f64)], i: u64, big_j: u64) -> f64 {
    let j = big_j + 1;
    let lc = ln_binom_i(i, j);
    atoms
        .iter()
        .map(|&(p, a)| {
            let x = a / (1.0 + a);
            let r = x * (i + j) as f64 / j as f64;
            if r >= 1.0 {
                return f64::INFINITY;
            }
            let t = (lc + j as f64 * a.ln() - (i + j) as f64 * a.ln_1p()).exp();
            p * t / (1.0 - r)
        })
        .sum()
}

#[derive(Debug, Clone, Serialize)]
pub struct PijRow {
    pub i: u64,
    /// `probs[j-1] = p_{i,j}` for `j = 1..=j_max`.
    pub probs: Vec<f64>,
    #[serde(skip)]
    cum: Vec<f64>,
    pub tail_bound: f64,
}

impl PijRow {
    pub fn j_max(&self) -> u64 {
        self.probs.len() as u64
    }

    pub fn p(&self, j: u64) -> f64 {
        if j == 0 {
            return 0.0;
        }
        self.probs.get(j as usize - 1).copied().unwrap_or(0.0)
    }

    pub fn sum(&self) -> f64 {
        self.cum.last().copied().unwrap_or(0.0)
    }
}

/// Rows of the spine kernel, computed on first use and then shared read-only.
#[derive(Debug)]
pub struct PijTable {
    atoms: Vec<(f64, f64)>,
    i_max: u64,
    tol: f64,
    guard: u64,
    rows: Vec<OnceLock<Result<PijRow>>>,
}

impl PijTable {
    pub fn new(law: &ReproductionLaw, i_max: u64) -> Self {
        Self::with_params(law, i_max, DEFAULT_TAIL_TOL, DEFAULT_OVERFLOW_GUARD)
    }

    pub fn with_params(law: &ReproductionLaw, i_max: u64, tol: f64, guard: u64) -> Self {
        Self::from_atoms(atoms(law), i_max, tol, guard)
    }

    fn from_atoms(atoms: Vec<(f64, f64)>, i_max: u64, tol: f64, guard: u64) -> Self {
        Self { atoms, i_max, tol, guard, rows: (0..i_max).map(|_| OnceLock::new()).collect() }
    }

    pub fn i_max(&self) -> u64 {
        self.i_max
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn row(&self, i: u64) -> Result<&PijRow> {
        if i == 0 || i > self.i_max {
            return Err(Error::StateOutsideTable { state: i, i_max: self.i_max });
        }
        self.rows[i as usize - 1].get_or_init(|| self.build_row(i)).as_ref().map_err(Clone::clone)
    }

    fn build_row(&self, i: u64) -> Result<PijRow> {
        let mut probs = Vec::new();
        let mut cum = Vec::new();
        let mut acc = 0.0;
        let mut j = 0u64;
        loop {
            j += 1;
            check_guard(i, j, self.guard)?;
            let p = pij_atoms(&self.atoms, i, j);
            acc += p;
            probs.push(p);
            cum.push(acc);
            let tail = tail_bound(&self.atoms, i, j);
            if tail < self.tol {
                return Ok(PijRow { i, probs, cum, tail_bound: tail });
            }
        }
    }

    /// One transition from state `i`. States beyond the row's `j_max` are
    /// reported as `j_max + 1`; that mass is below the row's tail bound.
    pub fn sample_next<R: Rng + ?Sized>(&self, i: u64, rng: &mut R) -> Result<u64> {
        let row = self.row(i)?;
        if row.tail_bound > self.tol {
            return Err(Error::TailMass { row: i, tail: row.tail_bound, tol: self.tol });
        }
        let u = rng.random::<f64>() * (row.sum() + row.tail_bound);
        let idx = row.cum.partition_point(|&c| c <= u);
        Ok(idx as u64 + 1)
    }
}

/// Path of the spine type chain started at `start`, of length `steps + 1`.
pub fn sample_spine_chain<R: Rng + ?Sized>(table: &PijTable, start: u64, steps: usize, rng: &mut R) -> Result<Vec<u64>> {
    let mut path = Vec::with_capacity(steps + 1);
    path.push(start);
    let mut s = start;
    for _ in 0..steps {
        s = table.sample_next(s, rng)?;
        path.push(s);
    }
    Ok(path)
}

/// Environment under the spined law, with its spine materialized.
#[derive(Debug, Clone)]
pub struct SpinedEnv<'a> {
    pub env: EnvTree<'a>,
}

impl<'a> SpinedEnv<'a> {
    pub fn spine(&self) -> &[u32] {
        self.env.spine()
    }

    /// V(w_{k+1}) − V(w_k) along the materialized spine.
    pub fn displacements(&self) -> Vec<f64> {
        self.spine().windows(2).map(|w| self.env.v(w[1]) - self.env.v(w[0])).collect()
    }

    pub fn extend(&mut self, depth: usize) -> Result<()> {
        self.env.extend_spine(depth).map(|_| ())
    }
}

/// Spined environment with the spine built down to generation `depth`.
pub fn sample_qstar_env(law: &ReproductionLaw, depth: usize, env_seed: u64) -> Result<SpinedEnv<'_>> {
    let mut env = EnvTree::spined(law, env_seed);
    env.extend_spine(depth)?;
    Ok(SpinedEnv { env })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct KilledWalkCaps {
    pub max_steps: u64,
    pub max_nodes: usize,
}

impl Default for KilledWalkCaps {
    fn default() -> Self {
        Self { max_steps: 10_000_000, max_nodes: 5_000_000 }
    }
}

#[derive(Debug, Clone)]
pub struct SpinedBetaTree {
    /// Types down to generation `depth`, spine vertices marked.
    pub tree: BetaTree,
    /// Tree ids of w_0..w_depth.
    pub spine_ids: Vec<u32>,
    /// β(w_0), ..., β(w_depth).
    pub spine_beta: Vec<u64>,
    pub depth: usize,
    pub steps: u64,
    pub censored: bool,
}

impl SpinedBetaTree {
    pub fn z1(&self) -> u64 {
        self.tree.z(1)
    }
}

/// Runs one walk from `start` until it steps onto `kill`, adding its downward
/// crossings to `counts`. Returns false when a cap was hit.
fn killed_walk<R: Rng + ?Sized>(
    env: &mut EnvTree<'_>,
    start: u32,
    kill: u32,
    counts: &mut Vec<u64>,
    budget: &mut u64,
    rng: &mut R,
) -> Result<bool> {
    let mut u = start;
    loop {
        if *budget == 0 {
            return Ok(false);
        }
        *budget -= 1;
        let kids = match env.expand(u) {
            Ok(k) => k,
            Err(Error::NodeBudgetExceeded { .. }) => return Ok(false),
            Err(e) => return Err(e),
        };
        let node = env.node(u);
        let mut r = rng.random::<f64>() * (1.0 + node.child_sum);
        if r < 1.0 {
            let p = if u == EnvTree::ROOT { PARENT_OF_ROOT } else { node.parent };
            if p == kill {
                return Ok(true);
            }
            u = p;
        } else {
            r -= 1.0;
            let mut pick = kids.end - 1;
            for c in kids {
                let a = env.node(c).a;
                if r < a {
                    pick = c;
                    break;
                }
                r -= a;
            }
            if counts.len() <= pick as usize {
                counts.resize(env.len().max(pick as usize + 1), 0);
            }
            counts[pick as usize] += 1;
            u = pick;
        }
    }
}

/// Rebuilds the size-biased local-time tree of root type 1 down to generation
/// `depth`. From every spine vertex w_i with i < depth, two independent walks
/// run until they step onto the parent of w_i (the artificial parent of the
/// root for i = 0); β is their total downward crossing count plus 1 on the
/// spine. Walks from deeper spine vertices cannot reach generations ≤ depth
/// off the spine, so the types returned are exact.
pub fn killed_walk_beta<R: Rng + ?Sized>(
    spined: &mut SpinedEnv<'_>,
    depth: usize,
    caps: &KilledWalkCaps,
    rng: &mut R,
) -> Result<SpinedBetaTree> {
    spined.extend(depth)?;
    let env = &mut spined.env;
    env.set_max_nodes(caps.max_nodes.max(env.len()));
    let spine: Vec<u32> = env.spine()[..=depth].to_vec();
    let mut counts: Vec<u64> = vec![0; env.len()];
    let mut budget = caps.max_steps;
    let mut censored = false;
    'outer: for i in 0..depth {
        let kill = if i == 0 { PARENT_OF_ROOT } else { spine[i - 1] };
        for _family in 0..2 {
            if !killed_walk(env, spine[i], kill, &mut counts, &mut budget, rng)? {
                censored = true;
                break 'outer;
            }
        }
    }
    let steps = caps.max_steps - budget;
    let beta_of = |u: u32, counts: &[u64], env: &EnvTree<'_>| -> u64 {
        if u == EnvTree::ROOT {
            return 1;
        }
        counts.get(u as usize).copied().unwrap_or(0) + env.node(u).on_spine() as u64
    };

    let mut tree = BetaTree::with_root(1);
    tree.set_root_v(0.0);
    tree.mark_spine(0);
    tree.censored = censored;
    let mut spine_ids = vec![0u32];
    let mut queue = std::collections::VecDeque::from([(EnvTree::ROOT, 0u32)]);
    while let Some((u, id)) = queue.pop_front() {
        if env.node(u).depth as usize >= depth || beta_of(u, &counts, env) == 0 {
            continue;
        }
        let Some(kids) = env.children(u) else { continue };
        let types: Vec<u64> = kids.clone().map(|c| beta_of(c, &counts, env)).collect();
        let first = tree.push_children(id, &types);
        for (off, c) in kids.enumerate() {
            let cid = first + off as u32;
            tree.set_v(cid, env.v(c));
            if env.node(c).on_spine() {
                tree.mark_spine(cid);
                spine_ids.push(cid);
            }
            queue.push_back((c, cid));
        }
    }
    let spine_beta = spine.iter().map(|&w| beta_of(w, &counts, env)).collect();
    Ok(SpinedBetaTree { tree, spine_ids, spine_beta, depth, steps, censored })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpineHit {
    /// First k ≥ 1 with β(w_k) = 1, if reached before σ_A.
    pub tau_hat_1: Option<u64>,
    /// First k with β(w_k) > A, if reached before τ̂₁.
    pub sigma_a: Option<u64>,
    /// β^{σ_A}(w_{σ_A}) = β(w_{σ_A}) − 1 when σ_A < τ̂₁.
    pub beta_sigma: Option<u64>,
    pub hit_before: bool,
}

/// Hitting times along a recorded spine type sequence starting at β(w_0).
/// Only the first of τ̂₁ and σ_A is resolved.
pub fn spine_hitting(spine_beta: &[u64], a: u64) -> Result<SpineHit> {
    if spine_beta.first().is_some_and(|&b| b > a) {
        return Ok(SpineHit { tau_hat_1: None, sigma_a: Some(0), beta_sigma: Some(spine_beta[0] - 1), hit_before: true });
    }
    for (k, &b) in spine_beta.iter().enumerate().skip(1) {
        if b > a {
            return Ok(SpineHit { tau_hat_1: None, sigma_a: Some(k as u64), beta_sigma: Some(b - 1), hit_before: true });
        }
        if b == 1 {
            return Ok(SpineHit { tau_hat_1: Some(k as u64), sigma_a: None, beta_sigma: None, hit_before: false });
        }
    }
    Err(Error::SpineTooShort)
}

/// Runs the spine chain from state 1 until it returns to 1 or exceeds `a`.
pub fn chain_hitting<R: Rng + ?Sized>(table: &PijTable, a: u64, max_steps: usize, rng: &mut R) -> Result<SpineHit> {
    let mut path = vec![1u64];
    let mut s = 1;
    for _ in 0..max_steps {
        s = table.sample_next(s, rng)?;
        path.push(s);
        if s == 1 || s > a {
            return spine_hitting(&path, a);
        }
    }
    Err(Error::SpineTooShort)
}

#[derive(Debug, Clone, Serialize)]
pub struct KaEstimate {
    pub a: u64,
    pub mean: f64,
    pub se: f64,
    /// Fraction of runs with σ_A < τ̂₁.
    pub hit_fraction: f64,
    pub samples: usize,
}

/// Monte Carlo K_A = E[(β^{σ_A}(w_{σ_A}))^{κ−1}; σ_A < τ̂₁] from the spine chain.
pub fn estimate_ka<R: Rng + ?Sized>(table: &PijTable, a: u64, kappa: f64, samples: usize, rng: &mut R) -> Result<KaEstimate> {
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    let mut hits = 0usize;
    for _ in 0..samples {
        let h = chain_hitting(table, a, 1_000_000, rng)?;
        if let Some(b) = h.beta_sigma {
            let x = (b as f64).powf(kappa - 1.0);
            sum += x;
            sum2 += x * x;
            hits += 1;
        }
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum2 / n - mean * mean).max(0.0);
    Ok(KaEstimate { a, mean, se: (var / n).sqrt(), hit_fraction: hits as f64 / n, samples })
}

/// K_A from a linear solve on the states {2, …, A}: with
/// h(i) = Σ_{j>A} p_{ij}(j−1)^{κ−1} + Σ_{2≤j≤A} p_{ij} h(j), K_A is the same
/// expression evaluated at i = 1. Rows are truncated at their `j_max`.
pub fn exact_ka(table: &PijTable, a: u64, kappa: f64) -> Result<f64> {
    if a < 1 {
        return Err(Error::InvalidArgument("A must be at least 1".into()));
    }
    let payoff = |row: &PijRow| -> f64 {
        (a + 1..=row.j_max()).map(|j| row.p(j) * ((j - 1) as f64).powf(kappa - 1.0)).sum()
    };
    let m = (a - 1) as usize;
    let mut mat = DMatrix::<f64>::identity(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    for i in 2..=a {
        let row = table.row(i)?;
        rhs[(i - 2) as usize] = payoff(row);
        for j in 2..=a {
            mat[((i - 2) as usize, (j - 2) as usize)] -= row.p(j);
        }
    }
    let h = if m > 0 {
        mat.lu().solve(&rhs).ok_or_else(|| Error::InvalidArgument("singular spine system".into()))?
    } else {
        rhs
    };
    let row1 = table.row(1)?;
    Ok(payoff(row1) + (2..=a).map(|j| row1.p(j) * h[(j - 2) as usize]).sum::<f64>())
}
