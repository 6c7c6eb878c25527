// SPDX-License-Identifier: Apache-2.0

//! Explicit-state breadth-first reachability with cover/assume monitors.
//!
//! All nondeterminism sits in the initial configuration: a straight-line
//! program over the env's instruction alphabet plus an architectural state
//! drawn from the operand domain. The explored node is the machine state,
//! the not-yet-fetched program suffix, and the monitor state.

use std::collections::{BTreeSet, HashMap};
use std::hash::Hash;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::netlist::{mask, Netlist};
use crate::sim::{eval_nets, fetch_inputs, next_state, run_program_with, MachineState, Program, SimError, Trace};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("invalid environment: {0}")]
    InvalidEnv(String),
    #[error("simulation failed: {0}")]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UndeterminedPolicy {
    Reachable,
    Unreachable,
}

/// Input space and resource limits for a check.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PropertyEnv {
    /// Concrete instruction words a program may contain.
    pub alphabet: Vec<u64>,
    pub operand_domain: Vec<u64>,
    /// ARF word indices drawn from the operand domain; other words start at 0.
    pub arch_regs: Vec<usize>,
    pub max_len: usize,
    /// Cycle bound on explored traces.
    pub bound: usize,
    /// Maximum number of explored nodes.
    pub budget: usize,
    pub undetermined_as: UndeterminedPolicy,
}

impl PropertyEnv {
    pub fn fingerprint(&self, design_text: &str) -> EnvFingerprint {
        let mut h = Sha256::new();
        h.update(design_text.as_bytes());
        EnvFingerprint {
            operand_domain: self.operand_domain.clone(),
            max_len: self.max_len,
            bound: self.bound,
            budget: self.budget,
            undetermined_as: self.undetermined_as,
            design_hash: hex::encode(&h.finalize()[..8]),
        }
    }

    pub fn validate(&self, nl: &Netlist) -> Result<(), EngineError> {
        if self.bound == 0 {
            return Err(EngineError::InvalidEnv("zero cycle bound".into()));
        }
        if self.budget == 0 {
            return Err(EngineError::InvalidEnv("zero state budget".into()));
        }
        if self.operand_domain.is_empty() {
            return Err(EngineError::InvalidEnv("empty operand domain".into()));
        }
        if nl.annotations.fetch.is_some() && self.max_len > 0 && self.alphabet.is_empty() {
            return Err(EngineError::InvalidEnv("empty instruction alphabet".into()));
        }
        if !self.arch_regs.is_empty() {
            let arf = nl.annotations.arf.as_ref().and_then(|a| nl.mem(a));
            let Some(arf) = arf else {
                return Err(EngineError::InvalidEnv("arch registers given but no ARF annotated".into()));
            };
            let m = &nl.memories[arf];
            if self.arch_regs.iter().any(|&r| r >= m.depth) {
                return Err(EngineError::InvalidEnv("arch register outside ARF".into()));
            }
            if self.operand_domain.iter().any(|&v| v & !mask(m.width) != 0) {
                return Err(EngineError::InvalidEnv("operand value wider than ARF word".into()));
            }
        }
        if self.max_len > crate::sim::max_program_len(nl) && nl.annotations.fetch.is_some() {
            return Err(EngineError::InvalidEnv("max program length exceeds PC width".into()));
        }
        Ok(())
    }

    /// Programs in length-then-lexicographic order.
    pub fn programs(&self) -> Vec<Vec<u64>> {
        let mut alpha = self.alphabet.clone();
        alpha.sort_unstable();
        alpha.dedup();
        let mut out = vec![vec![]];
        let mut layer = vec![vec![]];
        for _ in 0..self.max_len {
            let mut next = Vec::new();
            for p in &layer {
                for &w in &alpha {
                    let mut q = p.clone();
                    q.push(w);
                    next.push(q);
                }
            }
            out.extend(next.iter().cloned());
            layer = next;
        }
        out
    }

    /// Architectural valuations of `arch_regs` in lexicographic order.
    pub fn arch_states(&self) -> Vec<Vec<u64>> {
        let mut dom = self.operand_domain.clone();
        dom.sort_unstable();
        dom.dedup();
        let mut out = vec![vec![]];
        for _ in &self.arch_regs {
            let mut next = Vec::new();
            for p in &out {
                for &v in &dom {
                    let mut q = p.clone();
                    q.push(v);
                    next.push(q);
                }
            }
            out = next;
        }
        out
    }

    /// Reset state with the ARF loaded from an architectural valuation.
    pub fn initial_state(&self, nl: &Netlist, arch: &[u64]) -> MachineState {
        let mut s = MachineState::reset(nl);
        if let Some(arf) = nl.annotations.arf.as_ref().and_then(|a| nl.mem(a)) {
            for (&r, &v) in self.arch_regs.iter().zip(arch) {
                s.mems[arf][r] = v;
            }
        }
        s
    }
}

/// Qualification stamped on every verdict and artifact.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvFingerprint {
    pub operand_domain: Vec<u64>,
    pub max_len: usize,
    pub bound: usize,
    pub budget: usize,
    pub undetermined_as: UndeterminedPolicy,
    pub design_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UndeterminedReason {
    Bound,
    Budget,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Witness {
    pub program: Program,
    pub arch: Vec<u64>,
    pub trace: Trace,
    /// Cycle whose state satisfied the property.
    pub cycle: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoverVerdict {
    Reachable(Box<Witness>),
    Unreachable,
    Undetermined(UndeterminedReason),
}

impl CoverVerdict {
    pub fn is_reachable(&self) -> bool {
        matches!(self, CoverVerdict::Reachable(_))
    }

    /// Collapse to a boolean under the undetermined policy.
    pub fn holds(&self, policy: UndeterminedPolicy) -> bool {
        match self {
            CoverVerdict::Reachable(_) => true,
            CoverVerdict::Unreachable => false,
            CoverVerdict::Undetermined(_) => policy == UndeterminedPolicy::Reachable,
        }
    }
}

/// State visible to a monitor at one cycle.
pub struct View<'a> {
    pub cycle: usize,
    pub state: &'a MachineState,
    pub nets: &'a [u64],
}

pub enum Step<M, R> {
    Continue(M),
    /// The property holds here; `R` summarizes the accepting trace.
    Accept(R),
    /// Record `R` and keep exploring.
    Emit(R, M),
    /// An assumption failed; drop the trace.
    Prune,
}

/// A trace predicate with assumptions, evaluated incrementally.
pub trait Monitor: Sync {
    /// Per-trace constants fixed at start (for example, which program slot is
    /// the instruction under verification).
    type Ctx: Clone + Eq + Hash + Send + Sync;
    type M: Clone + Eq + Hash + Send + Sync;
    type R: Clone + Ord + Send + Sync;

    fn init(&self, program: &[u64]) -> Vec<(Self::Ctx, Self::M)>;

    /// Set inputs beyond the fetch port (taint controls).
    fn drive(&self, _ctx: &Self::Ctx, _state: &MachineState, _inputs: &mut [u64]) {}

    fn observe(&self, ctx: &Self::Ctx, m: &Self::M, prev: Option<&View>, cur: &View) -> Step<Self::M, Self::R>;

    /// Whether `observe` reads `View::nets` of the current cycle; when false
    /// the engine passes an empty slice there.
    fn uses_nets(&self) -> bool {
        true
    }
}

#[derive(Clone)]
struct Key<C, M> {
    state: MachineState,
    prog: Arc<Vec<u64>>,
    off: usize,
    ctx: C,
    m: M,
}

impl<C: PartialEq, M: PartialEq> PartialEq for Key<C, M> {
    fn eq(&self, o: &Self) -> bool {
        self.state == o.state && self.prog[self.off..] == o.prog[o.off..] && self.ctx == o.ctx && self.m == o.m
    }
}
impl<C: Eq, M: Eq> Eq for Key<C, M> {}
impl<C: Hash, M: Hash> Hash for Key<C, M> {
    fn hash<H: std::hash::Hasher>(&self, h: &mut H) {
        self.state.hash(h);
        self.prog[self.off..].hash(h);
        self.ctx.hash(h);
        self.m.hash(h);
    }
}

struct Node<C, M> {
    key: Key<C, M>,
    parent: Option<usize>,
    root: usize,
    depth: usize,
}

struct Root {
    prog: Arc<Vec<u64>>,
    arch: Vec<u64>,
}

fn prog_offset(nl: &Netlist, state: &MachineState, len: usize) -> usize {
    match nl.annotations.im_pc.as_ref().and_then(|n| nl.reg(n)) {
        Some(r) => (state.regs[r] as usize).saturating_sub(1).min(len),
        None => 0,
    }
}

/// Outcome of an exhaustive exploration.
pub struct Exploration<R> {
    pub accepted: BTreeSet<R>,
    pub first: Option<(R, Witness)>,
    pub saturated: bool,
    pub reason: Option<UndeterminedReason>,
    pub nodes: usize,
    pub states: Option<Vec<MachineState>>,
}

/// Breadth-first exploration. With `stop_at_first`, returns at the first
/// accepting trace; otherwise collects every accepted summary.
pub fn explore<Mo: Monitor>(
    nl: &Netlist,
    mon: &Mo,
    env: &PropertyEnv,
    stop_at_first: bool,
    keep_states: bool,
) -> Result<Exploration<Mo::R>, EngineError> {
    env.validate(nl)?;
    let mut roots: Vec<Root> = Vec::new();
    let mut nodes: Vec<Node<Mo::Ctx, Mo::M>> = Vec::new();
    let mut index: HashMap<Key<Mo::Ctx, Mo::M>, usize> = HashMap::new();
    let mut out = Exploration { accepted: BTreeSet::new(), first: None, saturated: true, reason: None, nodes: 0, states: None };
    let mut budget_hit = false;
    let mut bound_hit = false;

    let finish = |nodes: &Vec<Node<Mo::Ctx, Mo::M>>, mut out: Exploration<Mo::R>, budget_hit: bool, bound_hit: bool| {
        out.nodes = nodes.len();
        if budget_hit {
            out.saturated = false;
            out.reason = Some(UndeterminedReason::Budget);
        } else if bound_hit {
            out.saturated = false;
            out.reason = Some(UndeterminedReason::Bound);
        }
        if keep_states {
            let mut s: Vec<MachineState> = nodes.iter().map(|n| n.key.state.clone()).collect();
            s.sort();
            s.dedup();
            out.states = Some(s);
        }
        out
    };

    let programs = if nl.annotations.fetch.is_some() { env.programs() } else { vec![vec![]] };
    let archs = env.arch_states();
    'roots: for p in &programs {
        let prog = Arc::new(p.clone());
        for arch in &archs {
            let s0 = env.initial_state(nl, arch);
            for (ctx, m) in mon.init(p) {
                let root = roots.len();
                roots.push(Root { prog: prog.clone(), arch: arch.clone() });
                let mut ins = fetch_inputs(nl, &s0, p);
                mon.drive(&ctx, &s0, &mut ins);
                let nets = eval_nets(nl, &s0, &ins);
                let view = View { cycle: 0, state: &s0, nets: &nets };
                let m = match mon.observe(&ctx, &m, None, &view) {
                    Step::Prune => continue,
                    Step::Accept(r) => {
                        if stop_at_first {
                            let w = replay(nl, mon, env, &roots[root], &ctx, 0)?;
                            out.first = Some((r.clone(), w));
                            out.accepted.insert(r);
                            return Ok(finish(&nodes, out, false, false));
                        }
                        out.accepted.insert(r);
                        continue;
                    }
                    Step::Emit(r, m) => {
                        out.accepted.insert(r);
                        m
                    }
                    Step::Continue(m) => m,
                };
                let key = Key { state: s0.clone(), prog: prog.clone(), off: prog_offset(nl, &s0, p.len()), ctx, m };
                if index.contains_key(&key) {
                    continue;
                }
                if nodes.len() >= env.budget {
                    budget_hit = true;
                    break 'roots;
                }
                index.insert(key.clone(), nodes.len());
                nodes.push(Node { key, parent: None, root, depth: 0 });
            }
        }
    }

    let mut head = 0;
    while head < nodes.len() && !budget_hit {
        let (state, prog, ctx, m, depth, root) = {
            let n = &nodes[head];
            (n.key.state.clone(), n.key.prog.clone(), n.key.ctx.clone(), n.key.m.clone(), n.depth, n.root)
        };
        let mut ins = fetch_inputs(nl, &state, &prog);
        mon.drive(&ctx, &state, &mut ins);
        let nets = eval_nets(nl, &state, &ins);
        let nx = next_state(nl, &state, &nets)?;
        let nets2 = if mon.uses_nets() {
            let mut ins2 = fetch_inputs(nl, &nx, &prog);
            mon.drive(&ctx, &nx, &mut ins2);
            eval_nets(nl, &nx, &ins2)
        } else {
            Vec::new()
        };
        let prev = View { cycle: depth, state: &state, nets: &nets };
        let cur = View { cycle: depth + 1, state: &nx, nets: &nets2 };
        let next_m = match mon.observe(&ctx, &m, Some(&prev), &cur) {
            Step::Prune => None,
            Step::Accept(r) => {
                if stop_at_first {
                    let w = replay(nl, mon, env, &roots[root], &ctx, path_len(&nodes, head) + 1)?;
                    out.first = Some((r.clone(), w));
                    out.accepted.insert(r);
                    return Ok(finish(&nodes, out, false, false));
                }
                out.accepted.insert(r);
                None
            }
            Step::Emit(r, m2) => {
                out.accepted.insert(r);
                Some(m2)
            }
            Step::Continue(m2) => Some(m2),
        };
        if let Some(m2) = next_m {
            let key = Key { state: nx.clone(), off: prog_offset(nl, &nx, prog.len()), prog, ctx, m: m2 };
            if !index.contains_key(&key) {
                if depth + 1 > env.bound {
                    bound_hit = true;
                } else if nodes.len() >= env.budget {
                    budget_hit = true;
                } else {
                    index.insert(key.clone(), nodes.len());
                    nodes.push(Node { key, parent: Some(head), root, depth: depth + 1 });
                }
            }
        }
        head += 1;
    }
    Ok(finish(&nodes, out, budget_hit, bound_hit))
}

fn path_len<C, M>(nodes: &[Node<C, M>], mut i: usize) -> usize {
    let mut n = 0;
    while let Some(p) = nodes[i].parent {
        i = p;
        n += 1;
    }
    n
}

fn replay<Mo: Monitor>(nl: &Netlist, mon: &Mo, env: &PropertyEnv, root: &Root, ctx: &Mo::Ctx, cycles: usize) -> Result<Witness, EngineError> {
    let init = env.initial_state(nl, &root.arch);
    let program = Program { words: root.prog.as_ref().clone() };
    let trace = run_program_with(nl, &program, &init, cycles.max(1), |_, st, ins| mon.drive(ctx, st, ins))?;
    Ok(Witness { program, arch: root.arch.clone(), trace, cycle: cycles })
}

/// Search for a trace satisfying `mon` within `env`.
pub fn check_cover<Mo: Monitor>(nl: &Netlist, mon: &Mo, env: &PropertyEnv) -> Result<CoverVerdict, EngineError> {
    let ex = explore(nl, mon, env, true, false)?;
    Ok(match (ex.first, ex.reason) {
        (Some((_, w)), _) => CoverVerdict::Reachable(Box::new(w)),
        (None, None) => CoverVerdict::Unreachable,
        (None, Some(r)) => CoverVerdict::Undetermined(r),
    })
}

/// Monitor that never accepts; used to enumerate reachable states.
pub struct NoProperty;

impl Monitor for NoProperty {
    type Ctx = ();
    type M = ();
    type R = ();
    fn init(&self, _program: &[u64]) -> Vec<((), ())> {
        vec![((), ())]
    }
    fn observe(&self, _: &(), _: &(), _: Option<&View>, _: &View) -> Step<(), ()> {
        Step::Continue(())
    }
}

/// Machine states reachable from reset under `env`, and whether the
/// closure was exhausted within budget and bound.
pub fn reachable_fixpoint(nl: &Netlist, env: &PropertyEnv) -> Result<(Vec<MachineState>, bool), EngineError> {
    let ex = explore(nl, &NoProperty, env, false, true)?;
    Ok((ex.states.unwrap_or_default(), ex.saturated))
}

/// A monitor given as closures over `(cycle, state, nets)`; accepts the first
/// cycle where the predicate holds and prunes any cycle where an assumption
/// fails.
pub struct StatePredicate<P, A> {
    pub pred: P,
    pub assume: A,
}

impl<P, A> Monitor for StatePredicate<P, A>
where
    P: Fn(usize, &MachineState, &[u64]) -> bool + Sync,
    A: Fn(usize, &MachineState, &[u64]) -> bool + Sync,
{
    type Ctx = ();
    type M = ();
    type R = usize;
    fn init(&self, _program: &[u64]) -> Vec<((), ())> {
        vec![((), ())]
    }
    fn observe(&self, _: &(), _: &(), _: Option<&View>, cur: &View) -> Step<(), usize> {
        if !(self.assume)(cur.cycle, cur.state, cur.nets) {
            Step::Prune
        } else if (self.pred)(cur.cycle, cur.state, cur.nets) {
            Step::Accept(cur.cycle)
        } else {
            Step::Continue(())
        }
    }
}

/// Run independent jobs on the current rayon pool, results in input order.
pub fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    items.par_iter().map(f).collect()
}
