// SPDX-License-Identifier: Apache-2.0
//! Brute-force two-trace non-interference checker and counterexample
//! attribution.
//!
//! Programs are straight-line, so both traces of a pair fetch the same
//! instruction stream. The shared initial microarchitectural state is the
//! reset state.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::designs::decode;
use crate::engine::{par_map, PropertyEnv};
use crate::leakage::LeakageSignature;
use crate::netlist::{InstructionEncoding, Netlist};
use crate::sim::{run_program, MachineState, Program, SimError};
use crate::upath::{PerformingLocation, PlSet, PlTable};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle: {runs} simulations exceed the limit of {limit}")]
    SpaceTooLarge { runs: usize, limit: usize },
    #[error("oracle: attribution failed: {0}")]
    AttributionFailed(String),
    #[error("oracle: the two traces never diverge")]
    NoDivergence,
    #[error("oracle: missing annotation {0}")]
    MissingAnnotation(&'static str),
    #[error("oracle: location {0} outside the design")]
    BadLocation(Location),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Observer {
    /// Sees the commit net each cycle.
    Commit,
    /// Sees the set of occupied performing locations each cycle.
    Upath,
}

/// An architectural storage word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Location {
    Arf(usize),
    Amem(usize),
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Arf(i) => write!(f, "r{i}"),
            Location::Amem(i) => write!(f, "mem[{i}]"),
        }
    }
}

/// Locations labelled high; everything else is low. Instruction memory is
/// not architectural state here and is always low.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PrivacyPolicy {
    pub high: BTreeSet<Location>,
}

impl PrivacyPolicy {
    pub fn all_low() -> Self {
        PrivacyPolicy::default()
    }

    pub fn single(loc: Location) -> Self {
        PrivacyPolicy { high: [loc].into_iter().collect() }
    }
}

/// Architectural initial state as explicit (location, value) words; unlisted
/// words are zero.
pub type ArchState = BTreeMap<Location, u64>;

#[serde_with::serde_as]
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub program: Vec<u64>,
    pub policy: PrivacyPolicy,
    pub observer: Observer,
    #[serde_as(as = "Vec<(_, _)>")]
    pub sigma: ArchState,
    #[serde_as(as = "Vec<(_, _)>")]
    pub sigma_alt: ArchState,
    /// Earliest cycle whose observations differ.
    pub cycle: usize,
    /// Observations at `cycle` in the two traces.
    pub seen: (u64, u64),
}

/// Policies with exactly one high location: each ARF register in the env,
/// then each AMEM word an address drawn from the operand domain can reach.
pub fn single_high_policies(nl: &Netlist, env: &PropertyEnv) -> Vec<PrivacyPolicy> {
    let mut out: Vec<PrivacyPolicy> = env.arch_regs.iter().map(|&r| PrivacyPolicy::single(Location::Arf(r))).collect();
    for w in addressable_words(nl, env) {
        out.push(PrivacyPolicy::single(Location::Amem(w)));
    }
    out
}

fn addressable_words(nl: &Netlist, env: &PropertyEnv) -> BTreeSet<usize> {
    let Some(m) = nl.annotations.amem.as_ref().and_then(|a| nl.mem(a)) else { return BTreeSet::new() };
    let depth = nl.memories[m].depth;
    env.operand_domain.iter().map(|&v| v as usize % depth).collect()
}

fn initial(nl: &Netlist, sigma: &ArchState) -> Result<MachineState, OracleError> {
    let mut s = MachineState::reset(nl);
    for (&loc, &v) in sigma {
        let (name, idx) = match loc {
            Location::Arf(i) => (nl.annotations.arf.as_ref(), i),
            Location::Amem(i) => (nl.annotations.amem.as_ref(), i),
        };
        let m = name.and_then(|n| nl.mem(n)).ok_or(OracleError::BadLocation(loc))?;
        let slot = s.mems[m].get_mut(idx).ok_or(OracleError::BadLocation(loc))?;
        *slot = v & crate::netlist::mask(nl.memories[m].width);
    }
    Ok(s)
}

/// Observation sequence of one run.
fn observe(nl: &Netlist, table: &PlTable, observer: Observer, states: &[MachineState]) -> Vec<u64> {
    match observer {
        Observer::Upath => states.iter().map(|s| table.occupied(s)).collect(),
        Observer::Commit => {
            let net = nl.annotations.commit.as_ref().and_then(|c| nl.net(c)).expect("commit annotation checked");
            states
                .iter()
                .map(|s| {
                    let ins = crate::sim::fetch_inputs(nl, s, &[]);
                    crate::sim::eval_nets(nl, s, &ins)[net]
                })
                .collect()
        }
    }
}

fn first_difference(a: &[u64], b: &[u64]) -> Option<usize> {
    a.iter().zip(b).position(|(x, y)| x != y)
}

/// Every low-equivalent initial-state family the policy induces: low ARF
/// words range over the domain, high words over the domain, low AMEM words
/// stay zero.
fn sigma_groups(env: &PropertyEnv, policy: &PrivacyPolicy) -> Vec<Vec<ArchState>> {
    let mut dom = env.operand_domain.clone();
    dom.sort_unstable();
    dom.dedup();
    let product = |locs: &[Location]| -> Vec<ArchState> {
        let mut out = vec![ArchState::new()];
        for &l in locs {
            out = out.iter().flat_map(|s| dom.iter().map(move |&v| { let mut t = s.clone(); t.insert(l, v); t })).collect();
        }
        out
    };
    let low: Vec<Location> = env.arch_regs.iter().map(|&r| Location::Arf(r)).filter(|l| !policy.high.contains(l)).collect();
    let high: Vec<Location> = policy.high.iter().copied().collect();
    product(&low)
        .into_iter()
        .map(|lo| product(&high).into_iter().map(|hi| lo.iter().chain(hi.iter()).map(|(&k, &v)| (k, v)).collect()).collect())
        .collect()
}

/// Enumerates `programs × policies × low-equivalent σ pairs` and reports
/// every pair whose observations differ. Within one low-equivalence class
/// each member is compared against the class's first member, which finds a
/// violation in every class that has one.
pub fn check_sc_safe(
    nl: &Netlist,
    table: &PlTable,
    observer: Observer,
    programs: &[Vec<u64>],
    policies: &[PrivacyPolicy],
    env: &PropertyEnv,
    max_runs: usize,
) -> Result<Vec<Violation>, OracleError> {
    if observer == Observer::Commit && nl.annotations.commit.as_ref().and_then(|c| nl.net(c)).is_none() {
        return Err(OracleError::MissingAnnotation("commit"));
    }
    let groups: Vec<(usize, Vec<Vec<ArchState>>)> = policies.iter().enumerate().map(|(i, p)| (i, sigma_groups(env, p))).collect();
    let mut distinct: BTreeSet<&ArchState> = BTreeSet::new();
    for (_, g) in &groups {
        distinct.extend(g.iter().flatten());
    }
    let runs = distinct.len() * programs.len();
    if runs > max_runs {
        return Err(OracleError::SpaceTooLarge { runs, limit: max_runs });
    }
    let sigmas: Vec<&ArchState> = distinct.into_iter().collect();
    let per_program = par_map(programs, |prog| -> Result<Vec<Violation>, OracleError> {
        let program = Program { words: prog.clone() };
        let mut obs: HashMap<&ArchState, Vec<u64>> = HashMap::new();
        for &s in &sigmas {
            let tr = run_program(nl, &program, &initial(nl, s)?, env.bound)?;
            obs.insert(s, observe(nl, table, observer, &tr.states));
        }
        let mut out = Vec::new();
        for (pi, fams) in &groups {
            for fam in fams {
                let base = &fam[0];
                for other in &fam[1..] {
                    if let Some(k) = first_difference(&obs[base], &obs[other]) {
                        out.push(Violation {
                            program: prog.clone(),
                            policy: policies[*pi].clone(),
                            observer,
                            sigma: base.clone(),
                            sigma_alt: other.clone(),
                            cycle: k,
                            seen: (obs[base][k], obs[other][k]),
                        });
                    }
                }
            }
        }
        Ok(out)
    });
    let mut out = Vec::new();
    for r in per_program {
        out.extend(r?);
    }
    Ok(out)
}

/// Re-simulates both traces of a violation over `horizon` cycles.
pub fn replay(nl: &Netlist, v: &Violation, horizon: usize) -> Result<(Vec<MachineState>, Vec<MachineState>), OracleError> {
    let p = Program { words: v.program.clone() };
    let a = run_program(nl, &p, &initial(nl, &v.sigma)?, horizon)?;
    let b = run_program(nl, &p, &initial(nl, &v.sigma_alt)?, horizon)?;
    Ok((a.states, b.states))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionPair {
    /// Program counter of the deciding instruction.
    pub pc: u64,
    pub transponder: String,
    pub src: PerformingLocation,
    pub dst: PlSet,
    pub dst_alt: PlSet,
    /// Cycle at which the destinations differ.
    pub cycle: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Attribution {
    /// The instruction whose locations differ at the observed cycle made
    /// diverging decisions from the same source one cycle earlier.
    Direct(DecisionPair),
    /// The observed difference involves another instruction, or the
    /// decision divergence happened before it became visible.
    DelayedObservation { decision: DecisionPair, observed_pc: u64, observed_cycle: usize },
}

impl Attribution {
    pub fn decision(&self) -> &DecisionPair {
        match self {
            Attribution::Direct(d) => d,
            Attribution::DelayedObservation { decision, .. } => decision,
        }
    }
}

fn pcr_of(nl: &Netlist, pl: &PerformingLocation) -> Option<usize> {
    nl.fsm(&pl.fsm).and_then(|f| nl.reg(&f.pcr))
}

/// Instruction (by PC) the observer saw diverge at the violation cycle.
fn observed_pc(nl: &Netlist, table: &PlTable, v: &Violation, a: &MachineState, b: &MachineState) -> Option<u64> {
    match v.observer {
        Observer::Upath => {
            let d = v.seen.0 ^ v.seen.1;
            let id = (0..table.len()).find(|&i| d >> i & 1 == 1)?;
            let pcr = pcr_of(nl, table.pl(id))?;
            let s = if v.seen.0 >> id & 1 == 1 { a } else { b };
            Some(s.regs[pcr])
        }
        Observer::Commit => {
            let pcr = nl.annotations.commit_pcr.as_ref().and_then(|r| nl.reg(r))?;
            let s = if v.seen.0 != 0 { a } else { b };
            Some(s.regs[pcr])
        }
    }
}

/// Locates the earliest same-instruction decision divergence behind a
/// violation. Among instructions whose location sets first differ at the
/// same cycle, the oldest one with a diverging source is reported.
pub fn attribute_violation(nl: &Netlist, table: &PlTable, isa: &[InstructionEncoding], v: &Violation) -> Result<Attribution, OracleError> {
    let (a, b) = replay(nl, v, v.cycle + 1)?;
    if a[v.cycle] == b[v.cycle] && v.seen.0 == v.seen.1 {
        return Err(OracleError::NoDivergence);
    }
    let pcs: Vec<u64> = (1..=v.program.len() as u64).collect();
    let first = |pc: u64| (0..=v.cycle).find(|&k| table.step(&a[k], pc) != table.step(&b[k], pc));
    let earliest = pcs.iter().filter_map(|&pc| first(pc)).min().ok_or_else(|| {
        OracleError::AttributionFailed(format!("no instruction's locations differ by cycle {}", v.cycle))
    })?;
    if earliest == 0 {
        return Err(OracleError::AttributionFailed("locations differ in the initial state".into()));
    }
    let j = earliest;
    let mut pair = None;
    for &pc in &pcs {
        if first(pc) != Some(j) {
            continue;
        }
        let before = table.step(&a[j - 1], pc);
        let (na, nb) = (table.step(&a[j], pc), table.step(&b[j], pc));
        let src = (0..table.len()).find(|&i| before >> i & 1 == 1 && table.next_of(i, na) != table.next_of(i, nb));
        if let Some(src) = src {
            let word = v.program[pc as usize - 1];
            let transponder = decode(isa, word).map(|e| e.mnemonic.clone()).unwrap_or_else(|| format!("{word:#x}"));
            pair = Some(DecisionPair {
                pc,
                transponder,
                src: table.pl(src).clone(),
                dst: table.set(table.next_of(src, na)),
                dst_alt: table.set(table.next_of(src, nb)),
                cycle: j,
            });
            break;
        }
    }
    let decision = pair.ok_or_else(|| OracleError::AttributionFailed(format!("no diverging source at cycle {}", j - 1)))?;
    let seen_pc = observed_pc(nl, table, v, &a[v.cycle], &b[v.cycle]);
    if j == v.cycle && seen_pc == Some(decision.pc) {
        Ok(Attribution::Direct(decision))
    } else {
        Ok(Attribution::DelayedObservation { decision, observed_pc: seen_pc.unwrap_or(0), observed_cycle: v.cycle })
    }
}

/// Whether some signature covers the attributed (transponder, source).
pub fn covered(att: &Attribution, signatures: &[LeakageSignature]) -> bool {
    let d = att.decision();
    signatures.iter().any(|s| s.transponder == d.transponder && s.src == d.src)
}
