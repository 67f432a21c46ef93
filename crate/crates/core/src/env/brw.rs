//! Additive martingale, minimum of the branching random walk, and joint
//! (W∞, M_e) samples.

use rand::Rng;
use serde::Serialize;

use super::law::{Kappa, ReproductionLaw};
use super::tree::EnvTree;
use crate::error::{Error, Result};

/// W_n = Σ_{|u|=n} e^{-V(u)}.
pub fn additive_martingale(env: &mut EnvTree<'_>, n: u32) -> Result<f64> {
    Ok(env.generation(n)?.iter().map(|&u| (-env.v(u)).exp()).sum())
}

/// Default pruning barrier `ln(1/eps)/κ`. An infinite κ is treated as 4,
/// otherwise the barrier would collapse to zero.
pub fn default_barrier(kappa: Kappa, eps: f64) -> f64 {
    let k = match kappa {
        Kappa::Finite(k) => k,
        Kappa::Infinite => 4.0,
    };
    (1.0 / eps).ln() / k.min(4.0)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ExploreCaps {
    pub barrier: f64,
    pub max_nodes: usize,
    /// Generations explored at most; the frontier beyond it is left unexpanded.
    pub max_depth: u32,
    /// Relative tolerance of the W_n depth policy.
    pub eps_w: f64,
    /// Depth cap of the W_n depth policy.
    pub w_depth_cap: u32,
}

impl ExploreCaps {
    pub fn for_law(law: &ReproductionLaw) -> Result<Self> {
        let kappa = law.kappa()?.value;
        Ok(Self {
            barrier: default_barrier(kappa, 1e-6),
            ..Self::default()
        })
    }
}

impl Default for ExploreCaps {
    fn default() -> Self {
        Self { barrier: 4.6, max_nodes: 5_000_000, max_depth: 100_000, eps_w: 1e-3, w_depth_cap: 60 }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MinRecord {
    /// Minimum of V over the explored region.
    pub m: f64,
    pub m_e: f64,
    pub ustar: u32,
    pub ustar_depth: u32,
    pub barrier: f64,
    /// False when a node or depth cap stopped the exploration early.
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct WPair {
    pub w_inf: f64,
    pub m_e: f64,
    /// e^{M} · W∞.
    pub w_m: f64,
    pub depth_used: u32,
    pub nodes: usize,
    pub censored: bool,
}

/// Result of one barrier-pruned exploration.
#[derive(Debug, Clone)]
pub struct Exploration {
    pub min: MinRecord,
    pub pair: WPair,
    /// Frontier sum (frozen plus still-active vertices) after each generation.
    pub w_history: Vec<f64>,
}

const TIE_TOL: f64 = 1e-12;

fn ties(v: f64, best: f64) -> bool {
    (v - best).abs() <= TIE_TOL * best.abs().max(1.0)
}

/// Explores the environment generation by generation. A vertex with
/// `V(u) >= current_min + barrier` is frozen: it is not expanded and enters the
/// W∞ estimate through `e^{-V(u)}`, the mean of its subtree's contribution.
/// Exploration ends when no active vertex remains, or at a cap.
///
/// `tie_rng` breaks ties between deepest minimizers.
pub fn explore<R: Rng + ?Sized>(env: &mut EnvTree<'_>, caps: &ExploreCaps, tie_rng: &mut R) -> Exploration {
    let mut min_v = 0.0f64;
    let mut minimizers: Vec<u32> = vec![EnvTree::ROOT];
    let mut frozen = 0.0f64;
    let mut active = vec![EnvTree::ROOT];
    let mut next = Vec::new();
    let mut w_history = vec![1.0];
    let mut converged = true;
    let mut depth = 0u32;

    'outer: while !active.is_empty() {
        if depth >= caps.max_depth {
            converged = false;
            break;
        }
        next.clear();
        for idx in 0..active.len() {
            let u = active[idx];
            let vu = env.v(u);
            if vu >= min_v + caps.barrier {
                frozen += (-vu).exp();
                continue;
            }
            let kids = match env.expand(u) {
                Ok(k) => k,
                Err(_) => {
                    // remaining vertices stay on the frontier unexpanded
                    frozen += active[idx..].iter().map(|&x| (-env.v(x)).exp()).sum::<f64>();
                    converged = false;
                    active.clear();
                    next.clear();
                    break 'outer;
                }
            };
            for c in kids {
                let vc = env.v(c);
                if vc < min_v && !ties(vc, min_v) {
                    min_v = vc;
                    minimizers.retain(|&x| ties(env.v(x), vc));
                    minimizers.push(c);
                } else if ties(vc, min_v) {
                    minimizers.push(c);
                }
                next.push(c);
            }
        }
        std::mem::swap(&mut active, &mut next);
        depth += 1;
        let active_sum: f64 = active.iter().map(|&x| (-env.v(x)).exp()).sum();
        w_history.push(frozen + active_sum);
    }
    if !active.is_empty() {
        frozen += active.iter().map(|&x| (-env.v(x)).exp()).sum::<f64>();
    }
    let w_inf = frozen;

    minimizers.retain(|&x| ties(env.v(x), min_v));
    let deepest = minimizers.iter().map(|&x| env.node(x).depth).max().unwrap_or(0);
    let youngest: Vec<u32> = minimizers.into_iter().filter(|&x| env.node(x).depth == deepest).collect();
    let ustar = if youngest.len() == 1 { youngest[0] } else { youngest[tie_rng.random_range(0..youngest.len())] };
    let m = env.v(ustar);

    let depth_used = w_policy_depth(&w_history, caps.eps_w, caps.w_depth_cap);
    let min = MinRecord {
        m,
        m_e: (-m).exp(),
        ustar,
        ustar_depth: env.node(ustar).depth,
        barrier: caps.barrier,
        converged,
    };
    let pair = WPair {
        w_inf,
        m_e: min.m_e,
        w_m: m.exp() * w_inf,
        depth_used,
        nodes: env.len(),
        censored: !converged,
    };
    Exploration { min, pair, w_history }
}

/// First n with |W_{n+5} − W_n| < eps·max(1, W_n), else the last recorded
/// generation, capped at `cap`.
pub fn w_policy_depth(history: &[f64], eps: f64, cap: u32) -> u32 {
    for n in 0..history.len() {
        if n as u32 >= cap {
            return cap;
        }
        if n + 5 >= history.len() {
            break;
        }
        if (history[n + 5] - history[n]).abs() < eps * history[n].max(1.0) {
            return n as u32;
        }
    }
    (history.len().saturating_sub(1) as u32).min(cap)
}

/// Minimum of the branching random walk over the barrier-pruned tree.
pub fn brw_minimum<R: Rng + ?Sized>(env: &mut EnvTree<'_>, caps: &ExploreCaps, tie_rng: &mut R) -> MinRecord {
    explore(env, caps, tie_rng).min
}

/// One joint (Ŵ∞, M̂_e) sample from the realization `env_seed` of `law`.
pub fn sample_w_pair<R: Rng + ?Sized>(
    law: &ReproductionLaw,
    env_seed: u64,
    caps: &ExploreCaps,
    tie_rng: &mut R,
) -> WPair {
    let mut env = EnvTree::new(law, env_seed).with_max_nodes(caps.max_nodes);
    explore(&mut env, caps, tie_rng).pair
}

/// Frontier mass below each vertex of an explored tree: unexpanded vertices
/// carry `e^{-V}`, expanded ones the sum over their children.
pub fn subtree_sums(env: &EnvTree<'_>) -> Vec<f64> {
    let nodes = env.nodes();
    let mut sums: Vec<f64> = nodes.iter().map(|n| if n.is_expanded() { 0.0 } else { (-n.v).exp() }).collect();
    for id in (1..nodes.len()).rev() {
        let p = nodes[id].parent as usize;
        sums[p] += sums[id];
    }
    sums
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TruncatedW {
    pub value: f64,
    /// True when `t >= |u*|`, in which case `value` is the full 𝒲^M.
    pub full_sum: bool,
}

/// 𝒲^{u*,≤t}: the part of 𝒲^M carried by u* and the brothers of its last
/// `t + 1` ancestors (u* included).
pub fn truncated_wm(env: &EnvTree<'_>, min: &MinRecord, sums: &[f64], t: u32) -> TruncatedW {
    let depth = min.ustar_depth;
    let lowest = depth.saturating_sub(t).max(1);
    let mut total = sums[min.ustar as usize];
    let mut z = min.ustar;
    loop {
        let dz = env.node(z).depth;
        if dz < lowest {
            break;
        }
        total += env.siblings(z).map(|s| sums[s as usize]).sum::<f64>();
        match env.parent(z) {
            Some(p) => z = p,
            None => break,
        }
    }
    TruncatedW { value: min.m.exp() * total, full_sum: t >= depth }
}

/// Strict form of [`truncated_wm`] that refuses `t >= |u*|`.
pub fn truncated_wm_strict(env: &EnvTree<'_>, min: &MinRecord, sums: &[f64], t: u32) -> Result<f64> {
    if t >= min.ustar_depth {
        return Err(Error::TExceedsDepth { t, depth: min.ustar_depth });
    }
    Ok(truncated_wm(env, min, sums, t).value)
}
