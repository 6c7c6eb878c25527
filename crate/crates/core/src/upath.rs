// SPDX-License-Identifier: Apache-2.0
//! Performing locations, μpaths, and the synthesis pipeline that recovers
//! every cycle-accurate μpath of an instruction from cover queries.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{check_cover, explore, par_map, CoverVerdict, EngineError, Monitor, PropertyEnv, Step, View};
use crate::netlist::{mask, InstructionEncoding, Netlist, NetlistError};
use crate::sim::MachineState;

#[derive(Debug, Error)]
pub enum UpathError {
    #[error("unknown instruction `{0}`")]
    UnknownInstruction(String),
    #[error("`{0}` is not a performing location of this μpath")]
    NotARevisitPl(String),
    #[error("{0} performing locations exceed the 64-location limit")]
    TooManyPls(usize),
    #[error("design has no μFSM annotations")]
    NoFsms,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Netlist(#[from] NetlistError),
}

/// A non-idle state of one μFSM.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PerformingLocation {
    pub fsm: String,
    pub state: Vec<u64>,
    /// Display name: the annotated name, else `fsm[v,..]`.
    pub name: String,
}

impl PerformingLocation {
    pub fn new(nl: &Netlist, fsm: &str, state: Vec<u64>) -> Self {
        let name = nl
            .fsm(fsm)
            .and_then(|f| f.names.get(&state).cloned())
            .unwrap_or_else(|| format!("{fsm}[{}]", state.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")));
        PerformingLocation { fsm: fsm.to_string(), state, name }
    }
}

impl fmt::Display for PerformingLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

pub type PlSet = BTreeSet<PerformingLocation>;

struct FsmSlots {
    pcr: usize,
    vars: Vec<usize>,
}

/// Indexes the DUV performing locations of a netlist as bit positions.
pub struct PlTable {
    pls: Vec<PerformingLocation>,
    fsms: Vec<FsmSlots>,
    lookup: HashMap<(usize, Vec<u64>), usize>,
    con: Vec<u64>,
}

impl PlTable {
    pub fn new(nl: &Netlist, pls: &[PerformingLocation]) -> Result<Self, UpathError> {
        if pls.len() > 64 {
            return Err(UpathError::TooManyPls(pls.len()));
        }
        let fsms: Vec<FsmSlots> = nl
            .annotations
            .mufsms
            .iter()
            .map(|f| FsmSlots { pcr: nl.reg(&f.pcr).unwrap(), vars: f.vars.iter().map(|v| nl.reg(v).unwrap()).collect() })
            .collect();
        let mut lookup = HashMap::new();
        for (i, pl) in pls.iter().enumerate() {
            let fi = nl.annotations.mufsms.iter().position(|f| f.id == pl.fsm).ok_or_else(|| NetlistError::UnknownAnnotationTarget(pl.fsm.clone()))?;
            lookup.insert((fi, pl.state.clone()), i);
        }
        // con between μFSMs, lifted to their locations
        let nf = nl.annotations.mufsms.len();
        let mut fcon = vec![vec![false; nf]; nf];
        for (a, fa) in nl.annotations.mufsms.iter().enumerate() {
            let ra: Vec<String> = nl.fsm_regs(fa).iter().map(|&r| nl.registers[r].name.clone()).collect();
            let ra: Vec<&str> = ra.iter().map(|s| s.as_str()).collect();
            for (b, fb) in nl.annotations.mufsms.iter().enumerate() {
                let rb: Vec<String> = nl.fsm_regs(fb).iter().map(|&r| nl.registers[r].name.clone()).collect();
                let rb: Vec<&str> = rb.iter().map(|s| s.as_str()).collect();
                fcon[a][b] = nl.comb_cone(&ra, &rb)?;
            }
        }
        let fidx: Vec<usize> = pls.iter().map(|p| nl.annotations.mufsms.iter().position(|f| f.id == p.fsm).unwrap()).collect();
        let con = (0..pls.len())
            .map(|a| (0..pls.len()).filter(|&b| fcon[fidx[a]][fidx[b]]).fold(0u64, |m, b| m | 1 << b))
            .collect();
        Ok(PlTable { pls: pls.to_vec(), fsms, lookup, con })
    }

    pub fn len(&self) -> usize {
        self.pls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pls.is_empty()
    }

    pub fn pls(&self) -> &[PerformingLocation] {
        &self.pls
    }

    pub fn id(&self, pl: &PerformingLocation) -> Option<usize> {
        self.pls.iter().position(|p| p == pl)
    }

    pub fn pl(&self, id: usize) -> &PerformingLocation {
        &self.pls[id]
    }

    /// Locations whose registers feed `id`'s successor through logic only.
    pub fn con_succ(&self, id: usize) -> u64 {
        self.con[id]
    }

    pub fn con(&self, a: usize, b: usize) -> bool {
        self.con[a] >> b & 1 == 1
    }

    /// Locations visited by the instruction with program counter `pc`.
    /// Valuations outside the table are ignored.
    pub fn step(&self, state: &MachineState, pc: u64) -> u64 {
        let mut m = 0u64;
        for (fi, f) in self.fsms.iter().enumerate() {
            if state.regs[f.pcr] == pc {
                let vals: Vec<u64> = f.vars.iter().map(|&r| state.regs[r]).collect();
                if let Some(&i) = self.lookup.get(&(fi, vals)) {
                    m |= 1 << i;
                }
            }
        }
        m
    }

    /// Every location occupied by some instruction.
    pub fn occupied(&self, state: &MachineState) -> u64 {
        let mut m = 0u64;
        for (fi, f) in self.fsms.iter().enumerate() {
            if state.regs[f.pcr] != 0 {
                let vals: Vec<u64> = f.vars.iter().map(|&r| state.regs[r]).collect();
                if let Some(&i) = self.lookup.get(&(fi, vals)) {
                    m |= 1 << i;
                }
            }
        }
        m
    }

    pub fn set(&self, m: u64) -> PlSet {
        (0..self.pls.len()).filter(|&i| m >> i & 1 == 1).map(|i| self.pls[i].clone()).collect()
    }

    pub fn mask(&self, s: &PlSet) -> u64 {
        s.iter().filter_map(|p| self.id(p)).fold(0, |m, i| m | 1 << i)
    }

    /// Successors of `id` within `next`.
    pub fn next_of(&self, id: usize, next: u64) -> u64 {
        self.con[id] & next
    }
}

fn bits(m: u64) -> impl Iterator<Item = usize> {
    (0..64).filter(move |i| m >> i & 1 == 1)
}

// ---------------------------------------------------------------------------
// μpaths

/// One node of a μpath's step sequence. A repeated step held for two or more
/// consecutive cycles.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UStep {
    pub pls: PlSet,
    pub repeated: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RevisitFlags {
    pub consecutive: bool,
    pub non_consecutive: bool,
}

pub type Edge = (PerformingLocation, PerformingLocation);

/// A cycle-accurate execution path of one instruction.
#[serde_with::serde_as]
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MuPath {
    pub instruction: String,
    /// Per-cycle location sets with consecutive duplicates folded.
    pub steps: Vec<UStep>,
    /// `edges[n]`: one-cycle happens-before edges from step n to step n+1.
    pub edges: Vec<BTreeSet<Edge>>,
    /// Summary edges inside each repeated step (empty otherwise).
    pub summary: Vec<BTreeSet<Edge>>,
    #[serde_as(as = "Vec<(_, _)>")]
    pub revisits: BTreeMap<PerformingLocation, RevisitFlags>,
    #[serde_as(as = "Option<Vec<(_, _)>>")]
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<BTreeMap<PerformingLocation, BTreeSet<usize>>>,
}

/// Folded step sequence as bit masks: `(set, repeated)`.
pub type Folded = Vec<(u64, bool)>;

pub fn fold_steps(seq: &[u64]) -> Folded {
    let mut out: Folded = Vec::new();
    for &s in seq {
        match out.last_mut() {
            Some((m, rep)) if *m == s => *rep = true,
            _ => out.push((s, false)),
        }
    }
    out
}

fn fold_push(f: &mut Folded, s: u64) {
    match f.last_mut() {
        Some((m, rep)) if *m == s => *rep = true,
        _ => f.push((s, false)),
    }
}

impl MuPath {
    pub fn from_folded(table: &PlTable, instruction: &str, f: &Folded) -> MuPath {
        let steps = f.iter().map(|&(m, repeated)| UStep { pls: table.set(m), repeated }).collect();
        let mut edges = Vec::new();
        for w in f.windows(2) {
            let mut e = BTreeSet::new();
            for a in bits(w[0].0) {
                for b in bits(table.next_of(a, w[1].0)) {
                    e.insert((table.pl(a).clone(), table.pl(b).clone()));
                }
            }
            edges.push(e);
        }
        let summary = f
            .iter()
            .map(|&(m, rep)| {
                let mut e = BTreeSet::new();
                if rep {
                    for a in bits(m) {
                        for b in bits(table.next_of(a, m)) {
                            e.insert((table.pl(a).clone(), table.pl(b).clone()));
                        }
                    }
                }
                e
            })
            .collect();
        let mut revisits = BTreeMap::new();
        let support = f.iter().fold(0, |m, s| m | s.0);
        for id in bits(support) {
            let present: Vec<bool> = f.iter().map(|s| s.0 >> id & 1 == 1).collect();
            let consecutive = f.iter().any(|s| s.1 && s.0 >> id & 1 == 1) || present.windows(2).any(|w| w[0] && w[1]);
            let first = present.iter().position(|&p| p).unwrap();
            let last = present.iter().rposition(|&p| p).unwrap();
            let non_consecutive = present[first..=last].iter().any(|&p| !p);
            revisits.insert(table.pl(id).clone(), RevisitFlags { consecutive, non_consecutive });
        }
        MuPath { instruction: instruction.to_string(), steps, edges, summary, revisits, counts: None }
    }

    pub fn support(&self) -> PlSet {
        self.steps.iter().flat_map(|s| s.pls.iter().cloned()).collect()
    }

    /// Per source location, the family of next sets (`None` key never used).
    /// The last step yields the empty set.
    pub fn next_sets(&self) -> BTreeMap<PerformingLocation, BTreeSet<PlSet>> {
        let mut out: BTreeMap<PerformingLocation, BTreeSet<PlSet>> = BTreeMap::new();
        for (i, st) in self.steps.iter().enumerate() {
            for pl in &st.pls {
                let fam = out.entry(pl.clone()).or_default();
                if st.repeated {
                    fam.insert(self.summary[i].iter().filter(|e| &e.0 == pl).map(|e| e.1.clone()).collect());
                }
                let nx: PlSet = match self.edges.get(i) {
                    Some(es) => es.iter().filter(|e| &e.0 == pl).map(|e| e.1.clone()).collect(),
                    None => PlSet::new(),
                };
                fam.insert(nx);
            }
        }
        out
    }

    /// Cycles from the first step through the last, given per-step cycle
    /// counts for repeated steps.
    pub fn min_cycles(&self) -> usize {
        self.steps.iter().map(|s| if s.repeated { 2 } else { 1 }).sum()
    }
}

// ---------------------------------------------------------------------------
// IUV-tracking monitors

pub enum Probe<S, R> {
    Go(S),
    Emit(R, S),
    Accept(R),
    Prune,
}

/// Per-trace logic over the instruction under verification's step sets.
pub trait IuvProbe: Sync {
    type S: Clone + Eq + Hash + Send + Sync;
    type R: Clone + Ord + Send + Sync;
    fn start(&self) -> Self::S;
    /// `prev` is 0 on the first in-flight cycle.
    fn visit(&self, s: &Self::S, prev: u64, cur: u64) -> Probe<Self::S, Self::R>;
    /// Called on the first cycle the instruction occupies no PCR.
    fn finish(&self, s: &Self::S, last: u64) -> Option<Self::R>;
}

pub struct IuvMonitor<'a, P> {
    pub table: &'a PlTable,
    pub words: Vec<u64>,
    pub probe: P,
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub enum Phase<S> {
    Before,
    Live(u64, S),
}

impl<P: IuvProbe> Monitor for IuvMonitor<'_, P> {
    type Ctx = u64;
    type M = Phase<P::S>;
    type R = P::R;

    fn uses_nets(&self) -> bool {
        false
    }

    fn init(&self, program: &[u64]) -> Vec<(u64, Phase<P::S>)> {
        program.iter().enumerate().filter(|(_, w)| self.words.contains(w)).map(|(i, _)| (i as u64 + 1, Phase::Before)).collect()
    }

    fn observe(&self, pc: &u64, m: &Phase<P::S>, _prev: Option<&View>, cur: &View) -> Step<Phase<P::S>, P::R> {
        let step = self.table.step(cur.state, *pc);
        let (s, last) = match m {
            Phase::Before if step == 0 => return Step::Continue(Phase::Before),
            Phase::Before => (self.probe.start(), 0),
            Phase::Live(last, s) => {
                if step == 0 {
                    return match self.probe.finish(s, *last) {
                        Some(r) => Step::Accept(r),
                        None => Step::Prune,
                    };
                }
                (s.clone(), *last)
            }
        };
        match self.probe.visit(&s, last, step) {
            Probe::Go(s) => Step::Continue(Phase::Live(step, s)),
            Probe::Emit(r, s) => Step::Emit(r, Phase::Live(step, s)),
            Probe::Accept(r) => Step::Accept(r),
            Probe::Prune => Step::Prune,
        }
    }
}

/// Accumulates the visited set; accepts at dematerialization when `pred`
/// holds. Prunes as soon as a location outside `allowed` is visited.
pub struct VisitedProbe<F> {
    pub allowed: u64,
    pub pred: F,
}

impl<F: Fn(u64) -> bool + Sync> IuvProbe for VisitedProbe<F> {
    type S = u64;
    type R = ();
    fn start(&self) -> u64 {
        0
    }
    fn visit(&self, s: &u64, _prev: u64, cur: u64) -> Probe<u64, ()> {
        if cur & !self.allowed != 0 {
            Probe::Prune
        } else {
            Probe::Go(s | cur)
        }
    }
    fn finish(&self, s: &u64, _last: u64) -> Option<()> {
        (self.pred)(*s).then_some(())
    }
}

/// Emits every step set the instruction visits.
struct StepsProbe;

impl IuvProbe for StepsProbe {
    type S = ();
    type R = u64;
    fn start(&self) {}
    fn visit(&self, _: &(), _prev: u64, cur: u64) -> Probe<(), u64> {
        Probe::Emit(cur, ())
    }
    fn finish(&self, _: &(), _last: u64) -> Option<u64> {
        None
    }
}

/// Collects folded step sequences, optionally only those whose support is
/// exactly `support`.
pub struct FoldProbe {
    pub support: Option<u64>,
}

impl IuvProbe for FoldProbe {
    type S = (u64, Folded);
    type R = Folded;
    fn start(&self) -> (u64, Folded) {
        (0, Vec::new())
    }
    fn visit(&self, s: &(u64, Folded), _prev: u64, cur: u64) -> Probe<(u64, Folded), Folded> {
        if cur & !self.support.unwrap_or(u64::MAX) != 0 {
            return Probe::Prune;
        }
        let mut f = s.1.clone();
        fold_push(&mut f, cur);
        Probe::Go((s.0 | cur, f))
    }
    fn finish(&self, s: &(u64, Folded), _last: u64) -> Option<Folded> {
        self.support.map_or(true, |m| s.0 == m).then(|| s.1.clone())
    }
}

/// Folded sequences together with every maximal run `(location, length)`.
struct AllRunsProbe;

impl IuvProbe for AllRunsProbe {
    type S = (Folded, BTreeSet<(usize, usize)>, Vec<(usize, usize)>);
    type R = (Folded, BTreeSet<(usize, usize)>);
    fn start(&self) -> Self::S {
        (Vec::new(), BTreeSet::new(), Vec::new())
    }
    fn visit(&self, s: &Self::S, _prev: u64, cur: u64) -> Probe<Self::S, Self::R> {
        let mut f = s.0.clone();
        fold_push(&mut f, cur);
        let mut done = s.1.clone();
        let mut open = Vec::new();
        for &(pl, n) in &s.2 {
            if cur >> pl & 1 == 1 {
                open.push((pl, n + 1));
            } else {
                done.insert((pl, n));
            }
        }
        for pl in bits(cur) {
            if !s.2.iter().any(|o| o.0 == pl) {
                open.push((pl, 1));
            }
        }
        open.sort();
        Probe::Go((f, done, open))
    }
    fn finish(&self, s: &Self::S, _last: u64) -> Option<Self::R> {
        let mut done = s.1.clone();
        done.extend(s.2.iter().copied());
        Some((s.0.clone(), done))
    }
}

/// Accepts when `a` is visited in some cycle and `b` the next, within a
/// run whose support is exactly `support`.
struct EdgeProbe {
    a: usize,
    b: usize,
    support: u64,
}

impl IuvProbe for EdgeProbe {
    type S = (u64, bool);
    type R = ();
    fn start(&self) -> (u64, bool) {
        (0, false)
    }
    fn visit(&self, s: &(u64, bool), prev: u64, cur: u64) -> Probe<(u64, bool), ()> {
        if cur & !self.support != 0 {
            return Probe::Prune;
        }
        let hit = s.1 || (prev >> self.a & 1 == 1 && cur >> self.b & 1 == 1);
        Probe::Go((s.0 | cur, hit))
    }
    fn finish(&self, s: &(u64, bool), _last: u64) -> Option<()> {
        (s.0 == self.support && s.1).then_some(())
    }
}

/// Tracks visits of one location: consecutive, or left and re-entered.
struct RevisitProbe {
    pl: usize,
    support: u64,
    non_consecutive: bool,
}

impl IuvProbe for RevisitProbe {
    /// (visited, phase) where phase: 0 unseen, 1 in, 2 left, 3 hit.
    type S = (u64, u8);
    type R = ();
    fn start(&self) -> (u64, u8) {
        (0, 0)
    }
    fn visit(&self, s: &(u64, u8), prev: u64, cur: u64) -> Probe<(u64, u8), ()> {
        if cur & !self.support != 0 {
            return Probe::Prune;
        }
        let here = cur >> self.pl & 1 == 1;
        let before = prev >> self.pl & 1 == 1;
        let ph = match (s.1, here) {
            (3, _) => 3,
            (0, true) => 1,
            (0, false) => 0,
            (1, true) if !self.non_consecutive && before => 3,
            (1, true) => 1,
            (1, false) => 2,
            (2, true) if self.non_consecutive => 3,
            (2, _) => 2,
            (p, _) => p,
        };
        Probe::Go((s.0 | cur, ph))
    }
    fn finish(&self, s: &(u64, u8), _last: u64) -> Option<()> {
        (s.0 == self.support && s.1 == 3).then_some(())
    }
}

/// Emits maximal run lengths of one location in runs folding to `target`.
struct RunsProbe {
    pl: usize,
    target: Folded,
}

impl IuvProbe for RunsProbe {
    type S = (Folded, Vec<usize>, usize);
    type R = Vec<usize>;
    fn start(&self) -> Self::S {
        (Vec::new(), Vec::new(), 0)
    }
    fn visit(&self, s: &Self::S, _prev: u64, cur: u64) -> Probe<Self::S, Vec<usize>> {
        let mut f = s.0.clone();
        fold_push(&mut f, cur);
        // prefix check: all but the last folded step are final
        if f.len() > self.target.len() || f[..f.len() - 1] != self.target[..f.len() - 1] || f.last().unwrap().0 != self.target[f.len() - 1].0 {
            return Probe::Prune;
        }
        let mut runs = s.1.clone();
        let mut run = s.2;
        if cur >> self.pl & 1 == 1 {
            run += 1;
        } else if run > 0 {
            runs.push(run);
            run = 0;
        }
        Probe::Go((f, runs, run))
    }
    fn finish(&self, s: &Self::S, _last: u64) -> Option<Vec<usize>> {
        if s.0 != self.target {
            return None;
        }
        let mut runs = s.1.clone();
        if s.2 > 0 {
            runs.push(s.2);
        }
        Some(runs)
    }
}

// ---------------------------------------------------------------------------
// Pipeline

/// Occupancy of any μFSM by any instruction, one summary per cycle.
struct OccupancyMonitor {
    fsms: Vec<FsmSlots>,
}

impl Monitor for OccupancyMonitor {
    type Ctx = ();
    type M = ();
    type R = Vec<(usize, Vec<u64>)>;
    fn init(&self, _program: &[u64]) -> Vec<((), ())> {
        vec![((), ())]
    }
    fn uses_nets(&self) -> bool {
        false
    }
    fn observe(&self, _: &(), _: &(), _: Option<&View>, cur: &View) -> Step<(), Self::R> {
        let occ: Vec<(usize, Vec<u64>)> = self
            .fsms
            .iter()
            .enumerate()
            .filter(|(_, f)| cur.state.regs[f.pcr] != 0)
            .map(|(i, f)| (i, f.vars.iter().map(|&r| cur.state.regs[r]).collect()))
            .collect();
        if occ.is_empty() {
            Step::Continue(())
        } else {
            Step::Emit(occ, ())
        }
    }
}

/// Result of DUV location enumeration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuvPls {
    pub pls: Vec<PerformingLocation>,
    pub saturated: bool,
}

/// All non-idle μFSM valuations occupied by some instruction under `env`.
/// When exploration does not saturate and undetermined outcomes count as
/// reachable, every non-idle valuation of narrow μFSMs is kept.
pub fn enumerate_duv_pls(nl: &Netlist, env: &PropertyEnv) -> Result<DuvPls, UpathError> {
    if nl.annotations.mufsms.is_empty() {
        return Err(UpathError::NoFsms);
    }
    let fsms: Vec<FsmSlots> = nl
        .annotations
        .mufsms
        .iter()
        .map(|f| FsmSlots { pcr: nl.reg(&f.pcr).unwrap(), vars: f.vars.iter().map(|v| nl.reg(v).unwrap()).collect() })
        .collect();
    let ex = explore(nl, &OccupancyMonitor { fsms }, env, false, false)?;
    let mut found: BTreeSet<(usize, Vec<u64>)> = ex.accepted.into_iter().flatten().collect();
    if !ex.saturated && env.undetermined_as == crate::engine::UndeterminedPolicy::Reachable {
        for (fi, f) in nl.annotations.mufsms.iter().enumerate() {
            let widths: Vec<u32> = f.vars.iter().map(|v| nl.registers[nl.reg(v).unwrap()].width).collect();
            let total: u32 = widths.iter().sum();
            if total > 12 {
                continue;
            }
            for code in 0..(1u64 << total) {
                let mut vals = Vec::new();
                let mut c = code;
                for &w in &widths {
                    vals.push(c & mask(w));
                    c >>= w;
                }
                found.insert((fi, vals));
            }
        }
    }
    let mut pls: Vec<PerformingLocation> = found
        .into_iter()
        .filter(|(fi, v)| !nl.annotations.mufsms[*fi].idle_states.contains(v))
        .map(|(fi, v)| PerformingLocation::new(nl, &nl.annotations.mufsms[fi].id, v))
        .collect();
    pls.sort();
    Ok(DuvPls { pls, saturated: ex.saturated })
}

/// Alphabet words that are instances of `iuv`.
pub fn iuv_words(env: &PropertyEnv, iuv: &InstructionEncoding) -> Vec<u64> {
    env.alphabet.iter().copied().filter(|&w| iuv.matches(w)).collect()
}

/// DUV locations visited by some dynamic instance of `iuv`.
pub fn enumerate_iuv_pls(nl: &Netlist, table: &PlTable, iuv: &InstructionEncoding, env: &PropertyEnv) -> Result<Vec<PerformingLocation>, UpathError> {
    let words = iuv_words(env, iuv);
    if words.is_empty() {
        return Ok(Vec::new());
    }
    let mon = IuvMonitor { table, words, probe: StepsProbe };
    let ex = explore(nl, &mon, env, false, false)?;
    let m = ex.accepted.iter().fold(0u64, |a, s| a | s);
    Ok(table.set(m).into_iter().collect())
}

/// Per-instruction `dominates` and `exclusive` relations.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTables {
    /// `(a, b)`: every execution visiting `a` also visits `b`.
    pub dominates: BTreeSet<(PerformingLocation, PerformingLocation)>,
    /// Both orders of every pair no execution visits together.
    pub exclusive: BTreeSet<(PerformingLocation, PerformingLocation)>,
}

impl RelationTables {
    pub fn dominates(&self, a: &PerformingLocation, b: &PerformingLocation) -> bool {
        self.dominates.contains(&(a.clone(), b.clone()))
    }
    pub fn exclusive(&self, a: &PerformingLocation, b: &PerformingLocation) -> bool {
        self.exclusive.contains(&(a.clone(), b.clone()))
    }
}

fn cover_visited(nl: &Netlist, table: &PlTable, words: &[u64], allowed: u64, pred: impl Fn(u64) -> bool + Sync, env: &PropertyEnv) -> Result<CoverVerdict, UpathError> {
    let mon = IuvMonitor { table, words: words.to_vec(), probe: VisitedProbe { allowed, pred } };
    Ok(check_cover(nl, &mon, env)?)
}

/// Every set of locations some instance of `iuv` visits over its lifetime.
#[derive(Debug, Clone)]
pub struct SupportFamily {
    pub sets: BTreeSet<u64>,
    pub saturated: bool,
}

impl SupportFamily {
    pub fn collect(nl: &Netlist, table: &PlTable, iuv: &InstructionEncoding, env: &PropertyEnv) -> Result<Self, UpathError> {
        let words = iuv_words(env, iuv);
        if words.is_empty() {
            return Ok(SupportFamily { sets: BTreeSet::new(), saturated: true });
        }
        struct All;
        impl IuvProbe for All {
            type S = u64;
            type R = u64;
            fn start(&self) -> u64 {
                0
            }
            fn visit(&self, s: &u64, _prev: u64, cur: u64) -> Probe<u64, u64> {
                Probe::Go(s | cur)
            }
            fn finish(&self, s: &u64, _last: u64) -> Option<u64> {
                Some(*s)
            }
        }
        let ex = explore(nl, &IuvMonitor { table, words, probe: All }, env, false, false)?;
        Ok(SupportFamily { sets: ex.accepted, saturated: ex.saturated })
    }

    /// A cover over the visited set at dematerialization, answered from the
    /// family: the same verdict a dedicated exploration returns.
    pub fn cover(&self, pred: impl Fn(u64) -> bool) -> CoverVerdict {
        if self.sets.iter().any(|&s| pred(s)) {
            // witness traces are not kept in batch mode
            CoverVerdict::Reachable(Box::default())
        } else if self.saturated {
            CoverVerdict::Unreachable
        } else {
            CoverVerdict::Undetermined(crate::engine::UndeterminedReason::Budget)
        }
    }
}

fn relations_with(ids: &[usize], table: &PlTable, policy: crate::engine::UndeterminedPolicy, cover: impl Fn(usize, usize, bool) -> Result<CoverVerdict, UpathError> + Sync) -> Result<RelationTables, UpathError> {
    let mut jobs = Vec::new();
    for &a in ids {
        for &b in ids {
            jobs.push((a, b, false));
            jobs.push((a, b, true));
        }
    }
    let res = par_map(&jobs, |&(a, b, excl)| cover(a, b, excl).map(|v| !v.holds(policy)));
    let mut rel = RelationTables::default();
    for (&(a, b, excl), r) in jobs.iter().zip(res) {
        if r? {
            let pair = (table.pl(a).clone(), table.pl(b).clone());
            if excl {
                rel.exclusive.insert(pair);
            } else {
                rel.dominates.insert(pair);
            }
        }
    }
    Ok(rel)
}

fn dom_template(a: usize, b: usize) -> impl Fn(u64) -> bool {
    move |s| s >> a & 1 == 1 && s >> b & 1 == 0
}

fn excl_template(a: usize, b: usize) -> impl Fn(u64) -> bool {
    move |s| s >> a & 1 == 1 && s >> b & 1 == 1
}

/// Relations from the two cover templates, answered over one collected
/// support family; undetermined outcomes follow the env's policy.
pub fn build_relations(nl: &Netlist, table: &PlTable, iuv: &InstructionEncoding, iuv_pls: &[PerformingLocation], env: &PropertyEnv) -> Result<RelationTables, UpathError> {
    let fam = SupportFamily::collect(nl, table, iuv, env)?;
    relations_from_family(table, iuv_pls, &fam, env)
}

pub fn relations_from_family(table: &PlTable, iuv_pls: &[PerformingLocation], fam: &SupportFamily, env: &PropertyEnv) -> Result<RelationTables, UpathError> {
    let ids: Vec<usize> = iuv_pls.iter().filter_map(|p| table.id(p)).collect();
    relations_with(&ids, table, env.undetermined_as, |a, b, excl| Ok(if excl { fam.cover(excl_template(a, b)) } else { fam.cover(dom_template(a, b)) }))
}

/// Same relations, one dedicated cover exploration per template and pair.
pub fn build_relations_by_cover(nl: &Netlist, table: &PlTable, iuv: &InstructionEncoding, iuv_pls: &[PerformingLocation], env: &PropertyEnv) -> Result<RelationTables, UpathError> {
    let words = iuv_words(env, iuv);
    let ids: Vec<usize> = iuv_pls.iter().filter_map(|p| table.id(p)).collect();
    relations_with(&ids, table, env.undetermined_as, |a, b, excl| {
        if excl {
            cover_visited(nl, table, &words, u64::MAX, excl_template(a, b), env)
        } else {
            cover_visited(nl, table, &words, u64::MAX, dom_template(a, b), env)
        }
    })
}

/// Nonempty subsets of `iuv_pls` closed under `dominates` and free of
/// exclusive pairs.
pub fn candidate_pl_sets(iuv_pls: &[PerformingLocation], rel: &RelationTables) -> Vec<PlSet> {
    let n = iuv_pls.len();
    assert!(n < 32, "too many IUV locations for subset enumeration");
    let mut dom = vec![0u32; n];
    let mut exc = vec![0u32; n];
    for i in 0..n {
        for j in 0..n {
            if rel.dominates(&iuv_pls[i], &iuv_pls[j]) {
                dom[i] |= 1 << j;
            }
            if rel.exclusive(&iuv_pls[i], &iuv_pls[j]) {
                exc[i] |= 1 << j;
            }
        }
    }
    let mut out = Vec::new();
    for s in 1u32..(1u32 << n) {
        let ok = (0..n).filter(|&i| s >> i & 1 == 1).all(|i| dom[i] & !s == 0 && exc[i] & s == 0);
        if ok {
            out.push((0..n).filter(|&i| s >> i & 1 == 1).map(|i| iuv_pls[i].clone()).collect());
        }
    }
    out
}

/// Does some execution visit exactly `candidate` among the IUV locations?
pub fn check_pl_set(nl: &Netlist, table: &PlTable, iuv: &InstructionEncoding, candidate: &PlSet, env: &PropertyEnv) -> Result<CoverVerdict, UpathError> {
    let words = iuv_words(env, iuv);
    let want = table.mask(candidate);
    if candidate.is_empty() || want.count_ones() as usize != candidate.len() {
        return Ok(CoverVerdict::Unreachable);
    }
    cover_visited(nl, table, &words, want, move |s| s == want, env)
}

/// Revisit flags per location of a reachable set, from one cover per flag.
pub fn detect_revisits(nl: &Netlist, table: &PlTable, iuv: &InstructionEncoding, reachable: &PlSet, env: &PropertyEnv) -> Result<BTreeMap<PerformingLocation, RevisitFlags>, UpathError> {
    let words = iuv_words(env, iuv);
    let support = table.mask(reachable);
    let jobs: Vec<(usize, bool)> = bits(support).flat_map(|p| [(p, false), (p, true)]).collect();
    let res = par_map(&jobs, |&(pl, non_consecutive)| {
        let mon = IuvMonitor { table, words: words.clone(), probe: RevisitProbe { pl, support, non_consecutive } };
        check_cover(nl, &mon, env).map(|v| v.holds(env.undetermined_as))
    });
    let mut out: BTreeMap<PerformingLocation, RevisitFlags> = BTreeMap::new();
    for (&(pl, nc), r) in jobs.iter().zip(res) {
        let f = out.entry(table.pl(pl).clone()).or_default();
        if nc {
            f.non_consecutive = r?;
        } else {
            f.consecutive = r?;
        }
    }
    Ok(out)
}

/// Candidate edges are con-connected ordered pairs of the set; each is kept
/// when some execution with this support visits `a` then `b` a cycle later.
pub fn synth_hb_edges(nl: &Netlist, table: &PlTable, iuv: &InstructionEncoding, reachable: &PlSet, env: &PropertyEnv) -> Result<BTreeSet<Edge>, UpathError> {
    let words = iuv_words(env, iuv);
    let support = table.mask(reachable);
    let jobs: Vec<(usize, usize)> = bits(support).flat_map(|a| bits(support).filter(move |&b| table.con(a, b)).map(move |b| (a, b))).collect();
    let res = par_map(&jobs, |&(a, b)| {
        let mon = IuvMonitor { table, words: words.clone(), probe: EdgeProbe { a, b, support } };
        check_cover(nl, &mon, env).map(|v| v.holds(env.undetermined_as))
    });
    let mut out = BTreeSet::new();
    for (&(a, b), r) in jobs.iter().zip(res) {
        if r? {
            out.insert((table.pl(a).clone(), table.pl(b).clone()));
        }
    }
    Ok(out)
}

/// Distinct μpaths whose support is exactly `reachable`.
pub fn upaths_for_set(nl: &Netlist, table: &PlTable, iuv: &InstructionEncoding, reachable: &PlSet, env: &PropertyEnv) -> Result<(Vec<MuPath>, bool), UpathError> {
    let words = iuv_words(env, iuv);
    let mon = IuvMonitor { table, words, probe: FoldProbe { support: Some(table.mask(reachable)) } };
    let ex = explore(nl, &mon, env, false, false)?;
    Ok((ex.accepted.iter().map(|f| MuPath::from_folded(table, &iuv.mnemonic, f)).collect(), ex.saturated))
}

/// Consecutive-visit run lengths of `pl` over executions following `path`.
pub fn revisit_cycle_counts(nl: &Netlist, table: &PlTable, iuv: &InstructionEncoding, path: &MuPath, pl: &PerformingLocation, env: &PropertyEnv) -> Result<BTreeSet<usize>, UpathError> {
    if !path.support().contains(pl) {
        return Err(UpathError::NotARevisitPl(pl.name.clone()));
    }
    let id = table.id(pl).ok_or_else(|| UpathError::NotARevisitPl(pl.name.clone()))?;
    let target: Folded = path.steps.iter().map(|s| (table.mask(&s.pls), s.repeated)).collect();
    let mon = IuvMonitor { table, words: iuv_words(env, iuv), probe: RunsProbe { pl: id, target } };
    let ex = explore(nl, &mon, env, false, false)?;
    Ok(ex.accepted.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SynthOptions {
    pub cycle_counts: bool,
}

/// Everything the pipeline derived for one instruction.
#[serde_with::serde_as]
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpathReport {
    pub instruction: String,
    pub duv_pls: Vec<PerformingLocation>,
    pub iuv_pls: Vec<PerformingLocation>,
    pub relations: RelationTables,
    pub candidates: Vec<PlSet>,
    pub reachable: Vec<PlSet>,
    #[serde_as(as = "Vec<Vec<(_, _)>>")]
    pub revisits: Vec<BTreeMap<PerformingLocation, RevisitFlags>>,
    pub hb_edges: Vec<BTreeSet<Edge>>,
    pub upaths: Vec<MuPath>,
    /// False when any exploration stopped at the bound or budget.
    pub saturated: bool,
}

/// Revisit flags of a reachable set: the union over its μpaths.
pub fn revisits_of(paths: &[MuPath]) -> BTreeMap<PerformingLocation, RevisitFlags> {
    let mut out: BTreeMap<PerformingLocation, RevisitFlags> = BTreeMap::new();
    for p in paths {
        for (pl, f) in &p.revisits {
            let e = out.entry(pl.clone()).or_default();
            e.consecutive |= f.consecutive;
            e.non_consecutive |= f.non_consecutive;
        }
    }
    out
}

/// Confirmed one-cycle edges of a reachable set, summary self-loops included.
pub fn edges_of(paths: &[MuPath]) -> BTreeSet<Edge> {
    paths.iter().flat_map(|p| p.edges.iter().chain(p.summary.iter()).flatten().cloned()).collect()
}

/// The full pipeline for one instruction, reusing a location table built from
/// `enumerate_duv_pls`. Cover templates are answered in batch: one
/// exploration collects the support family, another the folded step
/// sequences, and every query is evaluated over those collections.
pub fn synth_with_table(nl: &Netlist, table: &PlTable, duv: &DuvPls, iuv: &InstructionEncoding, env: &PropertyEnv, opts: SynthOptions) -> Result<UpathReport, UpathError> {
    let fam = SupportFamily::collect(nl, table, iuv, env)?;
    let iuv_pls: Vec<PerformingLocation> = table.set(fam.sets.iter().fold(0, |a, s| a | s)).into_iter().collect();
    let relations = relations_from_family(table, &iuv_pls, &fam, env)?;
    let candidates = candidate_pl_sets(&iuv_pls, &relations);
    let mut saturated = duv.saturated && fam.saturated;
    let reachable: Vec<PlSet> = candidates
        .iter()
        .filter(|c| {
            let want = table.mask(c);
            fam.cover(|s| s == want).holds(env.undetermined_as)
        })
        .cloned()
        .collect();
    let words = iuv_words(env, iuv);
    let mut all: BTreeSet<MuPath> = BTreeSet::new();
    let mut runs: Vec<(Folded, BTreeSet<(usize, usize)>)> = Vec::new();
    if !words.is_empty() {
        let ex = explore(nl, &IuvMonitor { table, words: words.clone(), probe: FoldProbe { support: None } }, env, false, false)?;
        saturated &= ex.saturated;
        all = ex.accepted.iter().map(|f| MuPath::from_folded(table, &iuv.mnemonic, f)).collect();
        if opts.cycle_counts {
            let ex = explore(nl, &IuvMonitor { table, words, probe: AllRunsProbe }, env, false, false)?;
            saturated &= ex.saturated;
            runs = ex.accepted.into_iter().collect();
        }
    }
    let mut revisits = Vec::new();
    let mut hb_edges = Vec::new();
    let mut upaths = Vec::new();
    for set in &reachable {
        let ps: Vec<MuPath> = all.iter().filter(|p| &p.support() == set).cloned().collect();
        revisits.push(revisits_of(&ps));
        hb_edges.push(edges_of(&ps));
        upaths.extend(ps);
    }
    if opts.cycle_counts {
        for p in upaths.iter_mut() {
            let target: Folded = p.steps.iter().map(|s| (table.mask(&s.pls), s.repeated)).collect();
            let mut counts: BTreeMap<PerformingLocation, BTreeSet<usize>> = BTreeMap::new();
            for (f, rs) in &runs {
                if *f == target {
                    for &(pl, n) in rs {
                        counts.entry(table.pl(pl).clone()).or_default().insert(n);
                    }
                }
            }
            p.counts = Some(counts);
        }
    }
    Ok(UpathReport { instruction: iuv.mnemonic.clone(), duv_pls: duv.pls.clone(), iuv_pls, relations, candidates, reachable, revisits, hb_edges, upaths, saturated })
}

pub fn synth_all_upaths(nl: &Netlist, iuv: &InstructionEncoding, env: &PropertyEnv, opts: SynthOptions) -> Result<UpathReport, UpathError> {
    let duv = enumerate_duv_pls(nl, env)?;
    let table = PlTable::new(nl, &duv.pls)?;
    synth_with_table(nl, &table, &duv, iuv, env, opts)
}

// ---------------------------------------------------------------------------
// Simulation-side extraction, shared with the oracle.

/// Per-cycle step sets of the instruction with program counter `pc`, from
/// its first in-flight cycle through its last.
pub fn trace_steps(table: &PlTable, states: &[MachineState], pc: u64) -> Vec<u64> {
    let seq: Vec<u64> = states.iter().map(|s| table.step(s, pc)).collect();
    let first = seq.iter().position(|&m| m != 0);
    match first {
        None => Vec::new(),
        Some(f) => seq[f..].iter().take_while(|&&m| m != 0).copied().collect(),
    }
}
