//! The quenched randomly biased walk on an environment tree.
//!
//! From a vertex `u` the walk moves to its parent with weight `e^{-V(u)}` and to
//! a child `z` with weight `e^{-V(z)}`; weights are used relative to `u`, so the
//! parent has weight 1 and child `z` weight `e^{-(V(z)-V(u))}`. The root has an
//! artificial parent [`PARENT_OF_ROOT`] that always steps back to the root.

use rand::Rng;
use serde::Serialize;

use crate::env::{EnvTree, ExploreCaps, NO_PARENT};
use crate::error::{Error, Result};
use crate::ltgw::BetaTree;

pub const PARENT_OF_ROOT: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct WalkCaps {
    /// Steps allowed for the whole batch of excursions.
    pub max_steps: u64,
    /// Arena size allowed for the environment.
    pub max_nodes: usize,
}

impl Default for WalkCaps {
    fn default() -> Self {
        Self { max_steps: 10_000_000, max_nodes: 5_000_000 }
    }
}

#[derive(Debug, Clone)]
pub struct WalkTrace {
    pub current: u32,
    pub step_count: u64,
    pub excursions_done: u64,
    /// Edge local times indexed by the lower vertex of the edge.
    local_times: Vec<u64>,
    /// Vertices with a positive local time, in order of first visit.
    visited: Vec<u32>,
    pub tau: Vec<u64>,
    pub max_lt: u64,
    pub argmax: u32,
    pub censored: bool,
    pub caps: WalkCaps,
}

impl WalkTrace {
    pub fn new(caps: WalkCaps) -> Self {
        Self {
            current: EnvTree::ROOT,
            step_count: 0,
            excursions_done: 0,
            local_times: Vec::new(),
            visited: Vec::new(),
            tau: Vec::new(),
            max_lt: 0,
            argmax: EnvTree::ROOT,
            censored: false,
            caps,
        }
    }

    /// Back to the root with all counters cleared.
    pub fn reset(&mut self) {
        for &u in &self.visited {
            self.local_times[u as usize] = 0;
        }
        self.visited.clear();
        self.tau.clear();
        self.current = EnvTree::ROOT;
        self.step_count = 0;
        self.excursions_done = 0;
        self.max_lt = 0;
        self.argmax = EnvTree::ROOT;
        self.censored = false;
    }

    #[inline]
    pub fn local_time(&self, u: u32) -> u64 {
        self.local_times.get(u as usize).copied().unwrap_or(0)
    }

    pub fn visited(&self) -> &[u32] {
        &self.visited
    }

    pub fn local_time_sum(&self) -> u64 {
        self.visited.iter().map(|&u| self.local_times[u as usize]).sum()
    }

    /// True right after a transition from the artificial parent to the root.
    pub fn at_boundary(&self) -> bool {
        !self.censored && self.current == EnvTree::ROOT && self.tau.last() == Some(&self.step_count)
    }

    #[inline]
    fn bump(&mut self, u: u32, depth_of: impl Fn(u32) -> u32) {
        let idx = u as usize;
        if idx >= self.local_times.len() {
            self.local_times.resize((idx + 1).max(self.local_times.len() * 2), 0);
        }
        let lt = &mut self.local_times[idx];
        if *lt == 0 {
            self.visited.push(u);
        }
        *lt += 1;
        if *lt > self.max_lt || (*lt == self.max_lt && depth_of(u) < depth_of(self.argmax)) {
            self.max_lt = *lt;
            self.argmax = u;
        }
    }
}

/// One transition of the walk. Returns the new position.
pub fn step<R: Rng + ?Sized>(env: &mut EnvTree<'_>, trace: &mut WalkTrace, rng: &mut R) -> Result<u32> {
    if trace.censored {
        return Err(Error::StepCap { max_steps: trace.caps.max_steps });
    }
    if trace.step_count >= trace.caps.max_steps {
        trace.censored = true;
        return Err(Error::StepCap { max_steps: trace.caps.max_steps });
    }
    let u = trace.current;
    let next = if u == PARENT_OF_ROOT {
        EnvTree::ROOT
    } else {
        let kids = match env.expand(u) {
            Ok(k) => k,
            Err(e) => {
                trace.censored = true;
                return Err(e);
            }
        };
        let node = env.node(u);
        let mut r = rng.random::<f64>() * (1.0 + node.child_sum);
        if r < 1.0 {
            if node.parent == NO_PARENT {
                PARENT_OF_ROOT
            } else {
                node.parent
            }
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
            trace.bump(pick, |x| env.node(x).depth);
            pick
        }
    };
    trace.step_count += 1;
    if u == PARENT_OF_ROOT {
        trace.excursions_done += 1;
        trace.tau.push(trace.step_count);
    }
    trace.current = next;
    Ok(next)
}

#[derive(Debug, Clone, Serialize)]
pub struct ExcursionStats {
    pub n: u64,
    pub tau: Vec<u64>,
    /// Running maximum; a lower bound when `censored`.
    pub max_edge_lt: u64,
    pub argmax_depth: u32,
    pub nodes_touched: usize,
    pub steps: u64,
    pub censored: bool,
}

/// Runs the walk from the root until the `n`-th transition from the artificial
/// parent back to the root. The trace is reset first.
pub fn run_excursions<R: Rng + ?Sized>(
    env: &mut EnvTree<'_>,
    trace: &mut WalkTrace,
    n: u64,
    rng: &mut R,
) -> ExcursionStats {
    trace.reset();
    env.set_max_nodes(trace.caps.max_nodes);
    while trace.excursions_done < n {
        if step(env, trace, rng).is_err() {
            break;
        }
    }
    ExcursionStats {
        n,
        tau: trace.tau.clone(),
        max_edge_lt: trace.max_lt,
        argmax_depth: if trace.max_lt == 0 { 0 } else { env.node(trace.argmax).depth },
        nodes_touched: trace.visited.len() + 1,
        steps: trace.step_count,
        censored: trace.censored,
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct WalkAndEnv {
    pub max_lt: u64,
    pub censored: bool,
    pub w_inf: f64,
    pub m_e: f64,
}

/// The walk's max edge local time at τ_n together with (Ŵ∞, M̂_e) of the same
/// environment.
pub fn max_over_excursions<R: Rng + ?Sized>(
    env: &mut EnvTree<'_>,
    trace: &mut WalkTrace,
    n: u64,
    explore_caps: &ExploreCaps,
    rng: &mut R,
) -> WalkAndEnv {
    let stats = run_excursions(env, trace, n, rng);
    env.set_max_nodes(explore_caps.max_nodes.max(env.len()));
    let ex = crate::env::explore(env, explore_caps, rng);
    WalkAndEnv { max_lt: stats.max_edge_lt, censored: stats.censored, w_inf: ex.pair.w_inf, m_e: ex.pair.m_e }
}

/// Exports the edge local times at an excursion boundary as a typed tree with
/// root type `n`. Every vertex of positive type comes with all its children;
/// vertices of type 0 are leaves.
pub fn local_time_tree(env: &EnvTree<'_>, trace: &WalkTrace) -> Result<BetaTree> {
    if !trace.at_boundary() {
        return Err(Error::NotAtBoundary);
    }
    let mut tree = BetaTree::with_root(trace.excursions_done);
    tree.set_root_v(0.0);
    let mut queue = std::collections::VecDeque::new();
    queue.push_back((EnvTree::ROOT, 0u32));
    while let Some((u, id)) = queue.pop_front() {
        let beta = if u == EnvTree::ROOT { trace.excursions_done } else { trace.local_time(u) };
        if beta == 0 {
            continue;
        }
        let Some(kids) = env.children(u) else { continue };
        let types: Vec<u64> = kids.clone().map(|c| trace.local_time(c)).collect();
        let first = tree.push_children(id, &types);
        for (off, c) in kids.enumerate() {
            let child_id = first + off as u32;
            tree.set_v(child_id, env.v(c));
            queue.push_back((c, child_id));
        }
    }
    Ok(tree)
}
