//! Lazily expanded arena for one realization of the branching random walk.
//!
//! The reproduction of a vertex is drawn from counter-based uniforms keyed by
//! `(env_seed, genealogical key)`, so the realization does not depend on which
//! vertices get expanded or in which order.

use std::ops::Range;

use super::law::ReproductionLaw;
use crate::error::{Error, Result};
use crate::rng::{combine, keyed_unit};

pub const NO_PARENT: u32 = u32::MAX;
const ROOT_KEY: u64 = 0x5eed_0f_7ee;

const SALT_BRANCH: u64 = 1;
const SALT_SPINE_BRANCH: u64 = 2;
const SALT_SPINE_CHILD: u64 = 3;

const FLAG_EXPANDED: u8 = 1;
const FLAG_SPINE: u8 = 2;

#[derive(Debug, Clone)]
pub struct EnvNode {
    /// Position V(u).
    pub v: f64,
    /// Relative weight e^{-(V(u) - V(parent))}; 1 for the root.
    pub a: f64,
    /// Sum of the children's relative weights once expanded.
    pub child_sum: f64,
    pub key: u64,
    pub parent: u32,
    pub depth: u32,
    pub first_child: u32,
    pub n_children: u32,
    pub branch: u32,
    flags: u8,
}

impl EnvNode {
    pub fn is_expanded(&self) -> bool {
        self.flags & FLAG_EXPANDED != 0
    }

    pub fn on_spine(&self) -> bool {
        self.flags & FLAG_SPINE != 0
    }

    pub fn children(&self) -> Option<Range<u32>> {
        self.is_expanded().then(|| self.first_child..self.first_child + self.n_children)
    }
}

#[derive(Debug, Clone)]
enum Source<'a> {
    Law(&'a ReproductionLaw),
    /// Root reproduces with fixed weights; every other vertex is a leaf.
    Star(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct EnvTree<'a> {
    source: Source<'a>,
    nodes: Vec<EnvNode>,
    env_seed: u64,
    max_nodes: usize,
    spined: bool,
    spine: Vec<u32>,
}

pub const DEFAULT_MAX_NODES: usize = 20_000_000;

impl<'a> EnvTree<'a> {
    pub fn new(law: &'a ReproductionLaw, env_seed: u64) -> Self {
        Self::build(Source::Law(law), env_seed, false)
    }

    /// Environment under the size-biased measure: spine vertices reproduce with
    /// the size-biased branch law and the next spine vertex is picked with
    /// probability proportional to its weight.
    pub fn spined(law: &'a ReproductionLaw, env_seed: u64) -> Self {
        Self::build(Source::Law(law), env_seed, true)
    }

    /// Quenched star: the root has children with the given weights, and the
    /// children are leaves.
    pub fn star(weights: &[f64]) -> EnvTree<'static> {
        EnvTree::build(Source::Star(weights.to_vec()), 0, false)
    }

    fn build(source: Source<'a>, env_seed: u64, spined: bool) -> Self {
        let mut tree = Self {
            source,
            nodes: Vec::with_capacity(1024),
            env_seed,
            max_nodes: DEFAULT_MAX_NODES,
            spined,
            spine: Vec::new(),
        };
        tree.push_root();
        tree
    }

    fn push_root(&mut self) {
        self.nodes.push(EnvNode {
            v: 0.0,
            a: 1.0,
            child_sum: 0.0,
            key: ROOT_KEY,
            parent: NO_PARENT,
            depth: 0,
            first_child: 0,
            n_children: 0,
            branch: 0,
            flags: if self.spined { FLAG_SPINE } else { 0 },
        });
        self.spine.clear();
        if self.spined {
            self.spine.push(0);
        }
    }

    pub fn with_max_nodes(mut self, max_nodes: usize) -> Self {
        self.max_nodes = max_nodes;
        self
    }

    pub fn set_max_nodes(&mut self, max_nodes: usize) {
        self.max_nodes = max_nodes;
    }

    /// Discards all vertices and switches to a new realization, keeping the allocation.
    pub fn reset(&mut self, env_seed: u64) {
        self.nodes.clear();
        self.env_seed = env_seed;
        self.push_root();
    }

    pub fn env_seed(&self) -> u64 {
        self.env_seed
    }

    pub fn law(&self) -> Option<&'a ReproductionLaw> {
        match self.source {
            Source::Law(law) => Some(law),
            Source::Star(_) => None,
        }
    }

    pub const ROOT: u32 = 0;

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn node(&self, id: u32) -> &EnvNode {
        &self.nodes[id as usize]
    }

    pub fn nodes(&self) -> &[EnvNode] {
        &self.nodes
    }

    #[inline]
    pub fn v(&self, id: u32) -> f64 {
        self.nodes[id as usize].v
    }

    pub fn parent(&self, id: u32) -> Option<u32> {
        let p = self.nodes[id as usize].parent;
        (p != NO_PARENT).then_some(p)
    }

    /// Children ids, materializing them on first call.
    pub fn expand(&mut self, id: u32) -> Result<Range<u32>> {
        let node = &self.nodes[id as usize];
        if node.is_expanded() {
            return Ok(node.first_child..node.first_child + node.n_children);
        }
        let (key, v, depth, on_spine) = (node.key, node.v, node.depth, node.on_spine());
        let (branch, weights): (usize, &[f64]) = match &self.source {
            Source::Star(w) => {
                if id == Self::ROOT {
                    (0, w.as_slice())
                } else {
                    (0, &[])
                }
            }
            Source::Law(law) => {
                let b = if on_spine {
                    law.pick_size_biased_branch(keyed_unit(self.env_seed, key, SALT_SPINE_BRANCH))
                } else {
                    law.pick_branch(keyed_unit(self.env_seed, key, SALT_BRANCH))
                };
                (b, law.branch(b).weights.as_slice())
            }
        };
        let n = weights.len();
        if self.nodes.len() + n > self.max_nodes {
            return Err(Error::NodeBudgetExceeded { max_nodes: self.max_nodes });
        }
        let first = self.nodes.len() as u32;
        let mut child_sum = 0.0;
        for (j, &a) in weights.iter().enumerate() {
            child_sum += a;
            self.nodes.push(EnvNode {
                v: v - a.ln(),
                a,
                child_sum: 0.0,
                key: combine(key, j as u64 + 1),
                parent: id,
                depth: depth + 1,
                first_child: 0,
                n_children: 0,
                branch: 0,
                flags: 0,
            });
        }
        if on_spine && n > 0 {
            let u = keyed_unit(self.env_seed, key, SALT_SPINE_CHILD) * child_sum;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (j, &a) in weights.iter().enumerate() {
                acc += a;
                if u < acc {
                    pick = j;
                    break;
                }
            }
            let spine_child = first + pick as u32;
            self.nodes[spine_child as usize].flags |= FLAG_SPINE;
            self.spine.push(spine_child);
        }
        let node = &mut self.nodes[id as usize];
        node.first_child = first;
        node.n_children = n as u32;
        node.child_sum = child_sum;
        node.branch = branch as u32;
        node.flags |= FLAG_EXPANDED;
        Ok(first..first + n as u32)
    }

    pub fn children(&self, id: u32) -> Option<Range<u32>> {
        self.nodes[id as usize].children()
    }

    /// Brothers of `z`: the parent's children minus `z`.
    pub fn siblings(&self, z: u32) -> impl Iterator<Item = u32> + '_ {
        let range = self.parent(z).and_then(|p| self.children(p)).unwrap_or(0..0);
        range.filter(move |&c| c != z)
    }

    /// Ancestor of `id` at generation `depth` (`depth <= depth(id)`).
    pub fn ancestor_at(&self, mut id: u32, depth: u32) -> u32 {
        while self.nodes[id as usize].depth > depth {
            id = self.nodes[id as usize].parent;
        }
        id
    }

    /// Spine vertices materialized so far (spined trees only).
    pub fn spine(&self) -> &[u32] {
        &self.spine
    }

    pub fn is_spined(&self) -> bool {
        self.spined
    }

    /// Materializes the spine down to generation `depth`.
    pub fn extend_spine(&mut self, depth: usize) -> Result<&[u32]> {
        if !self.spined {
            return Err(Error::InvalidArgument("extend_spine on a tree without spine".into()));
        }
        while self.spine.len() <= depth {
            let last = *self.spine.last().expect("spine has a root");
            let before = self.spine.len();
            self.expand(last)?;
            if self.spine.len() == before {
                return Err(Error::SpineTooShort);
            }
        }
        Ok(&self.spine[..=depth])
    }

    /// Generation `n` fully expanded; returns the ids at depth `n`.
    pub fn generation(&mut self, n: u32) -> Result<Vec<u32>> {
        let mut current = vec![Self::ROOT];
        for _ in 0..n {
            let mut next = Vec::with_capacity(current.len() * 2);
            for &u in &current {
                next.extend(self.expand(u)?);
            }
            current = next;
        }
        Ok(current)
    }
}
