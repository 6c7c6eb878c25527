// SPDX-License-Identifier: Apache-2.0
//! Transmitter classification, signature assembly and contract views.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decisions::{extract_decisions, Decision};
use crate::engine::{explore, par_map, CoverVerdict, EngineError, Monitor, PropertyEnv, Step, UndeterminedPolicy, View};
use crate::ift::{IftError, IftMode, Plane, TaintedNetlist, Trigger};
use crate::netlist::InstructionEncoding;
use crate::sim::MachineState;
use crate::upath::{iuv_words, MuPath, PerformingLocation, PlSet, PlTable, UpathError};

#[derive(Debug, Error)]
pub enum LeakageError {
    #[error("case {0} needs {1:?} instrumentation")]
    IncompatibleCase(Case, IftMode),
    #[error("`{0}` has no operand register for field `{1}`")]
    UnknownOperand(String, String),
    #[error("decision source `{0}` is not a design location")]
    UnknownLocation(String),
    #[error(transparent)]
    Ift(#[from] IftError),
    #[error(transparent)]
    Upath(#[from] UpathError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TransmitterType {
    N,
    #[serde(rename = "D_O")]
    DO,
    #[serde(rename = "D_Y")]
    DY,
    S,
}

impl fmt::Display for TransmitterType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransmitterType::N => "N",
            TransmitterType::DO => "D_O",
            TransmitterType::DY => "D_Y",
            TransmitterType::S => "S",
        })
    }
}

/// Assumption case relating the transmitter instance to the transponder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Case {
    /// Same dynamic instruction.
    #[serde(rename = "1")]
    Intrinsic,
    /// Older, in flight at the source visit.
    #[serde(rename = "2a")]
    Older,
    /// Younger, in flight at the source visit.
    #[serde(rename = "2b")]
    Younger,
    /// Older and gone before the transponder reaches the source.
    #[serde(rename = "3")]
    Static,
}

impl Case {
    pub const ALL: [Case; 4] = [Case::Intrinsic, Case::Older, Case::Younger, Case::Static];

    pub fn transmitter_type(self) -> TransmitterType {
        match self {
            Case::Intrinsic => TransmitterType::N,
            Case::Older => TransmitterType::DO,
            Case::Younger => TransmitterType::DY,
            Case::Static => TransmitterType::S,
        }
    }

    pub fn mode(self) -> IftMode {
        match self {
            Case::Static => IftMode::TwoBit,
            _ => IftMode::OneBit,
        }
    }

    /// Whether program slots `t` and `p` (PCs) fit the case.
    fn admits(self, t: u64, p: u64) -> bool {
        match self {
            Case::Intrinsic => t == p,
            Case::Older | Case::Static => t < p,
            Case::Younger => t > p,
        }
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Case::Intrinsic => "1",
            Case::Older => "2a",
            Case::Younger => "2b",
            Case::Static => "3",
        })
    }
}

/// One operand-dependence finding for a decision.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Tag {
    pub decision: Decision,
    pub transmitter: String,
    pub ttype: TransmitterType,
    pub operand: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SignatureInput {
    pub transmitter: String,
    pub ttype: TransmitterType,
    pub operand: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageSignature {
    pub name: String,
    pub transponder: String,
    pub src: PerformingLocation,
    pub range: BTreeSet<PlSet>,
    pub inputs: BTreeSet<SignatureInput>,
    pub tags: BTreeSet<Tag>,
}

impl LeakageSignature {
    pub fn has_input(&self, t: &str, ty: TransmitterType, op: &str) -> bool {
        self.inputs.iter().any(|i| i.transmitter == t && i.ttype == ty && i.operand == op)
    }
}

fn set_text(s: &PlSet) -> String {
    format!("{{{}}}", s.iter().map(|p| p.name.as_str()).collect::<Vec<_>>().join(","))
}

impl fmt::Display for LeakageSignature {
    /// `dst P_src(T^N i0, ...)` followed by the destination range.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let args: Vec<String> = self.inputs.iter().enumerate().map(|(i, x)| format!("{}^{} i{i}.{}", x.transmitter, x.ttype, x.operand)).collect();
        write!(f, "dst {}({})", self.name, args.join(", "))?;
        let range: Vec<String> = self.range.iter().map(set_text).collect();
        write!(f, " -> {}", range.join(" | "))
    }
}

/// Outcome of classifying one (decision, transmitter, operand, case).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub tagged: bool,
    pub verdict: CoverVerdict,
    /// Tainted non-operand registers feeding the destination μFSMs at the
    /// witness cycle.
    pub implicit: BTreeSet<String>,
}

/// Tracks one (transmitter, transponder) instance pair.
struct ClassifyMonitor {
    table: PlTable,
    per_ctx: HashMap<(u64, u64), TaintedNetlist>,
    case: Case,
    t_words: Vec<u64>,
    p_words: Vec<u64>,
    src: usize,
    /// Per decision: destination mask and the μFSMs whose taint counts.
    dsts: Vec<(u64, Vec<usize>)>,
    /// Stop at the first hit instead of recording and continuing.
    accept: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
struct Flags {
    t_seen: bool,
    t_gone: bool,
    p_seen: bool,
}

impl Monitor for ClassifyMonitor {
    type Ctx = (u64, u64);
    type M = Flags;
    type R = usize;

    fn uses_nets(&self) -> bool {
        false
    }

    fn init(&self, program: &[u64]) -> Vec<((u64, u64), Flags)> {
        let mut out = Vec::new();
        for (ti, tw) in program.iter().enumerate() {
            if !self.t_words.contains(tw) {
                continue;
            }
            for (pi, pw) in program.iter().enumerate() {
                let (t, p) = (ti as u64 + 1, pi as u64 + 1);
                if self.p_words.contains(pw) && self.case.admits(t, p) {
                    out.push(((t, p), Flags::default()));
                }
            }
        }
        out
    }

    fn drive(&self, ctx: &(u64, u64), state: &MachineState, inputs: &mut [u64]) {
        self.per_ctx[ctx].drive(state, inputs);
    }

    fn observe(&self, ctx: &(u64, u64), m: &Flags, prev: Option<&View>, cur: &View) -> Step<Flags, usize> {
        let tn = &self.per_ctx[ctx];
        let (t, p) = *ctx;
        if !tn.assumptions_hold(cur.state) {
            return Step::Prune;
        }
        let mut hit = None;
        if let Some(prev) = prev {
            let at_src = self.table.step(prev.state, p) >> self.src & 1 == 1;
            let case_ok = match self.case {
                Case::Intrinsic => true,
                Case::Older | Case::Younger => tn.in_flight(prev.state, t),
                Case::Static => m.t_gone,
            };
            if at_src && case_ok {
                let next = self.table.next_of(self.src, self.table.step(cur.state, p));
                hit = self
                    .dsts
                    .iter()
                    .position(|(mask, fsms)| *mask == next && fsms.iter().any(|&f| tn.fsm_tainted(cur.state, f, Plane::Lower)));
            }
        }
        let t_in = tn.in_flight(cur.state, t);
        let p_in = tn.in_flight(cur.state, p);
        let n = Flags { t_seen: m.t_seen || t_in, t_gone: m.t_gone || (m.t_seen && !t_in), p_seen: m.p_seen || p_in };
        match hit {
            Some(i) if self.accept => Step::Accept(i),
            Some(i) => Step::Emit(i, n),
            None if m.p_seen && !p_in => Step::Prune,
            None => Step::Continue(n),
        }
    }
}

fn operand_reg(tn: &TaintedNetlist, t: &InstructionEncoding, op: &str) -> Result<String, LeakageError> {
    if !t.fields.iter().any(|f| f.0 == op) {
        return Err(LeakageError::UnknownOperand(t.mnemonic.clone(), op.to_string()));
    }
    tn.base
        .annotations
        .operand_regs
        .iter()
        .find(|(f, _)| f == op)
        .map(|(_, r)| r.clone())
        .ok_or_else(|| LeakageError::UnknownOperand(t.mnemonic.clone(), op.to_string()))
}

/// Operand fields of `t` that the design maps to operand registers.
pub fn operand_fields(tn_or_base: &crate::netlist::Netlist, t: &InstructionEncoding) -> Vec<String> {
    t.fields
        .iter()
        .map(|f| f.0.clone())
        .filter(|f| tn_or_base.annotations.operand_regs.iter().any(|(g, _)| g == f))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn build_monitor(
    tn: &TaintedNetlist,
    pls: &[PerformingLocation],
    p: &InstructionEncoding,
    src: &PerformingLocation,
    decisions: &[Decision],
    t: &InstructionEncoding,
    op: &str,
    case: Case,
    env: &PropertyEnv,
    accept: bool,
) -> Result<ClassifyMonitor, LeakageError> {
    if tn.mode != case.mode() {
        return Err(LeakageError::IncompatibleCase(case, case.mode()));
    }
    let reg = operand_reg(tn, t, op)?;
    let table = PlTable::new(&tn.netlist, pls)?;
    let src_id = table.id(src).ok_or_else(|| LeakageError::UnknownLocation(src.name.clone()))?;
    let fsm_index = |pl: &PerformingLocation| tn.netlist.annotations.mufsms.iter().position(|f| f.id == pl.fsm).unwrap();
    // μFSMs the source steers next cycle; a destination that leaves one of
    // them unvisited is as informative as one that enters it
    let steered: BTreeSet<usize> = table.set(table.con_succ(src_id)).iter().chain(std::iter::once(src)).map(fsm_index).collect();
    let steered: Vec<usize> = steered.into_iter().collect();
    let dsts = decisions.iter().map(|d| (table.mask(&d.dst), steered.clone())).collect();
    let n = env.max_len as u64;
    let mut per_ctx = HashMap::new();
    for tp in 1..=n {
        for pp in 1..=n {
            if !case.admits(tp, pp) {
                continue;
            }
            let mut c = tn.clone().introduce_taint(&reg, Plane::Lower, Trigger::AtIssue(tp))?.block_architectural_flow(tp);
            if case == Case::Static {
                let window: Vec<u64> = (tp + 1..pp).collect();
                c = c.flush_dynamic_taint(&window, pp)?;
            }
            per_ctx.insert((tp, pp), c);
        }
    }
    Ok(ClassifyMonitor { table, per_ctx, case, t_words: iuv_words(env, t), p_words: iuv_words(env, p), src: src_id, dsts, accept })
}

/// Which of `decisions` (all sharing `src`) are reached with a tainted
/// destination under one case. Returns the tagged indices and whether the
/// exploration saturated.
#[allow(clippy::too_many_arguments)]
pub fn classify_decisions(
    tn: &TaintedNetlist,
    pls: &[PerformingLocation],
    p: &InstructionEncoding,
    src: &PerformingLocation,
    decisions: &[Decision],
    t: &InstructionEncoding,
    op: &str,
    case: Case,
    env: &PropertyEnv,
) -> Result<(BTreeSet<usize>, bool), LeakageError> {
    let mon = build_monitor(tn, pls, p, src, decisions, t, op, case, env, false)?;
    let ex = explore(&tn.netlist, &mon, env, false, false)?;
    let mut tagged = ex.accepted;
    if !ex.saturated && env.undetermined_as == UndeterminedPolicy::Reachable {
        tagged = (0..decisions.len()).collect();
    }
    Ok((tagged, ex.saturated))
}

/// Cover for one decision: transponder at the source, then exactly the
/// decision's destination with at least one destination μFSM tainted.
#[allow(clippy::too_many_arguments)]
pub fn classify(
    tn: &TaintedNetlist,
    pls: &[PerformingLocation],
    p: &InstructionEncoding,
    decision: &Decision,
    t: &InstructionEncoding,
    op: &str,
    case: Case,
    env: &PropertyEnv,
) -> Result<Classification, LeakageError> {
    let mon = build_monitor(tn, pls, p, &decision.src, std::slice::from_ref(decision), t, op, case, env, true)?;
    let ex = explore(&tn.netlist, &mon, env, true, false)?;
    let verdict = match (ex.first, ex.reason) {
        (Some((_, w)), _) => CoverVerdict::Reachable(Box::new(w)),
        (None, None) => CoverVerdict::Unreachable,
        (None, Some(r)) => CoverVerdict::Undetermined(r),
    };
    let implicit = match &verdict {
        CoverVerdict::Reachable(w) => implicit_inputs(tn, decision, &w.trace.states[w.cycle.min(w.trace.states.len() - 1)]),
        _ => BTreeSet::new(),
    };
    Ok(Classification { tagged: verdict.holds(env.undetermined_as), verdict, implicit })
}

fn implicit_inputs(tn: &TaintedNetlist, d: &Decision, state: &MachineState) -> BTreeSet<String> {
    let base = &tn.base;
    let fsms: Vec<&str> = if d.dst.is_empty() { vec![d.src.fsm.as_str()] } else { d.dst.iter().map(|p| p.fsm.as_str()).collect() };
    let vars: Vec<&str> = base.annotations.mufsms.iter().filter(|f| fsms.contains(&f.id.as_str())).flat_map(|f| f.vars.iter().map(|s| s.as_str())).collect();
    let ops: BTreeSet<&str> = base.annotations.operand_regs.iter().map(|(_, r)| r.as_str()).collect();
    base.registers
        .iter()
        .filter(|r| !ops.contains(r.name.as_str()))
        .filter(|r| tn.netlist.reg(&format!("taint.q.{}", r.name)).map(|i| state.regs[i] != 0).unwrap_or(false))
        .filter(|r| base.comb_cone(&[r.name.as_str()], &vars).unwrap_or(false))
        .map(|r| r.name.clone())
        .collect()
}

/// Signature for `src` when at least two of its decisions are tagged.
pub fn assemble_signature(p: &str, src: &PerformingLocation, decisions: &[Decision], tags: &[Tag]) -> Option<LeakageSignature> {
    let tags: BTreeSet<Tag> = tags.iter().filter(|t| &t.decision.src == src && t.decision.instruction == p).cloned().collect();
    let tagged: BTreeSet<&PlSet> = tags.iter().map(|t| &t.decision.dst).collect();
    if tagged.len() < 2 {
        return None;
    }
    Some(LeakageSignature {
        name: format!("{p}_{}", src.name),
        transponder: p.to_string(),
        src: src.clone(),
        range: decisions.iter().filter(|d| &d.src == src).map(|d| d.dst.clone()).collect(),
        inputs: tags.iter().map(|t| SignatureInput { transmitter: t.transmitter.clone(), ttype: t.ttype, operand: t.operand.clone() }).collect(),
        tags,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    Static,
    Dynamic,
    Both,
}

pub fn classify_channel(sig: &LeakageSignature) -> Channel {
    let st = sig.inputs.iter().any(|i| i.ttype == TransmitterType::S);
    let dy = sig.inputs.iter().any(|i| i.ttype != TransmitterType::S);
    match (st, dy) {
        (true, true) => Channel::Both,
        (true, false) => Channel::Static,
        _ => Channel::Dynamic,
    }
}

/// Output of signature synthesis over a design.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignatureReport {
    pub signatures: Vec<LeakageSignature>,
    pub tags: Vec<Tag>,
    /// Every classification exploration saturated.
    pub saturated: bool,
}

struct Job<'a> {
    p: &'a InstructionEncoding,
    src: PerformingLocation,
    decisions: Vec<Decision>,
    t: &'a InstructionEncoding,
    op: String,
    case: Case,
}

/// Classify every (transponder, source, transmitter, operand, case) and
/// assemble signatures. `upaths` maps transponder mnemonics to μpaths.
pub fn synth_signatures(
    one: &TaintedNetlist,
    two: &TaintedNetlist,
    pls: &[PerformingLocation],
    transponders: &[&InstructionEncoding],
    transmitters: &[&InstructionEncoding],
    upaths: &BTreeMap<String, Vec<MuPath>>,
    env: &PropertyEnv,
) -> Result<SignatureReport, LeakageError> {
    synth_signatures_with(one, two, pls, transponders, transmitters, upaths, env, &Case::ALL)
}

/// [`synth_signatures`] restricted to `cases`.
#[allow(clippy::too_many_arguments)]
pub fn synth_signatures_with(
    one: &TaintedNetlist,
    two: &TaintedNetlist,
    pls: &[PerformingLocation],
    transponders: &[&InstructionEncoding],
    transmitters: &[&InstructionEncoding],
    upaths: &BTreeMap<String, Vec<MuPath>>,
    env: &PropertyEnv,
    cases: &[Case],
) -> Result<SignatureReport, LeakageError> {
    let mut jobs = Vec::new();
    let mut tables = Vec::new();
    for p in transponders {
        let table = extract_decisions(upaths.get(&p.mnemonic).map(|v| v.as_slice()).unwrap_or(&[]));
        for src in &table.sources {
            let ds: Vec<Decision> = table.at(src).cloned().collect();
            for t in transmitters {
                for op in operand_fields(&one.base, t) {
                    for &case in cases {
                        if case == Case::Intrinsic && t.mnemonic != p.mnemonic {
                            continue;
                        }
                        jobs.push(Job { p, src: src.clone(), decisions: ds.clone(), t, op: op.clone(), case });
                    }
                }
            }
        }
        tables.push((p.mnemonic.clone(), table));
    }
    let results = par_map(&jobs, |j| {
        let tn = if j.case.mode() == IftMode::TwoBit { two } else { one };
        classify_decisions(tn, pls, j.p, &j.src, &j.decisions, j.t, &j.op, j.case, env)
    });
    let mut tags = BTreeSet::new();
    let mut saturated = true;
    for (j, r) in jobs.iter().zip(results) {
        let (hit, sat) = r?;
        saturated &= sat;
        for i in hit {
            tags.insert(Tag { decision: j.decisions[i].clone(), transmitter: j.t.mnemonic.clone(), ttype: j.case.transmitter_type(), operand: j.op.clone() });
        }
    }
    let tags: Vec<Tag> = tags.into_iter().collect();
    let mut signatures = Vec::new();
    for (p, table) in &tables {
        let ds: Vec<Decision> = table.decisions.iter().cloned().collect();
        for src in &table.sources {
            if let Some(s) = assemble_signature(p, src, &ds, &tags) {
                signatures.push(s);
            }
        }
    }
    Ok(SignatureReport { signatures, tags, saturated })
}

// ---------------------------------------------------------------------------
// Contract views

/// Columns of the contract table: μpaths, transponder, source, the three
/// transmitter kinds, operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Columns {
    mu: bool,
    p: bool,
    src: bool,
    tn: bool,
    td: bool,
    ts: bool,
    a: bool,
}

const fn cols(mu: bool, p: bool, src: bool, tn: bool, td: bool, ts: bool, a: bool) -> Columns {
    Columns { mu, p, src, tn, td, ts, a }
}

/// Contract row ids and their relevant columns.
const CONTRACTS: [(&str, Columns); 16] = [
    ("CT", cols(false, false, false, true, true, true, true)),
    ("MI6-dynamic", cols(false, true, true, true, true, false, false)),
    ("MI6-static", cols(false, true, true, false, false, true, false)),
    ("OISA", cols(false, false, true, true, false, false, true)),
    ("STT-explicit", cols(false, true, true, true, false, false, true)),
    ("STT-implicit", cols(false, true, true, false, true, true, true)),
    ("STT-implicit-branch", cols(false, true, false, false, true, true, true)),
    ("STT-prediction", cols(false, true, true, false, false, true, true)),
    ("STT-resolution", cols(false, true, true, false, true, false, true)),
    ("SDO-variants", cols(true, false, false, true, false, false, true)),
    ("Dolma-variable-time", cols(false, false, false, true, false, false, true)),
    ("Dolma-contention", cols(false, true, true, true, true, false, true)),
    ("Dolma-inducive", cols(false, true, false, false, true, false, true)),
    ("Dolma-resolvent", cols(false, false, false, false, true, false, true)),
    ("Dolma-prediction-resolution", cols(false, true, true, false, true, false, true)),
    ("Dolma-persistent-state", cols(false, false, false, false, false, true, true)),
];

pub fn contract_ids() -> Vec<&'static str> {
    CONTRACTS.iter().map(|c| c.0).collect()
}

/// One projected row; unchecked columns are `None`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContractRow {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub upaths: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub transponder: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub src: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub transmitter: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub operand: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractView {
    pub id: String,
    pub rows: BTreeSet<ContractRow>,
}

/// Project signatures onto each contract's columns. The μpath column counts
/// the transmitter's μpaths.
pub fn derive_contracts(signatures: &[LeakageSignature], upaths: &BTreeMap<String, Vec<MuPath>>) -> Vec<ContractView> {
    CONTRACTS
        .iter()
        .map(|(id, c)| {
            let mut rows = BTreeSet::new();
            for s in signatures {
                for i in &s.inputs {
                    let relevant = match i.ttype {
                        TransmitterType::N => c.tn,
                        TransmitterType::DO | TransmitterType::DY => c.td,
                        TransmitterType::S => c.ts,
                    };
                    if !relevant {
                        continue;
                    }
                    rows.insert(ContractRow {
                        upaths: c.mu.then(|| upaths.get(&i.transmitter).map(|v| v.len()).unwrap_or(0)),
                        transponder: c.p.then(|| s.transponder.clone()),
                        src: c.src.then(|| s.src.name.clone()),
                        transmitter: Some(i.transmitter.clone()),
                        operand: c.a.then(|| i.operand.clone()),
                    });
                }
            }
            ContractView { id: id.to_string(), rows }
        })
        .collect()
}
