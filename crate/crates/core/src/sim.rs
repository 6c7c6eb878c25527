// SPDX-License-Identifier: Apache-2.0

//! Cycle-accurate two-valued simulation of a [`Netlist`].

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netlist::{mask, CellKind, Netlist};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("state or input width mismatch: {0}")]
    WidthMismatch(String),
    #[error("memory `{0}` written by more than one port in a cycle")]
    WriteConflict(String),
    #[error("horizon must be at least one cycle")]
    HorizonZero,
    #[error("program of {0} instructions does not fit the PC width")]
    NonUniquePc(usize),
    #[error("design lacks `{0}` annotation")]
    MissingAnnotation(&'static str),
}

/// Register and memory contents, indexed like the netlist.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MachineState {
    pub regs: Vec<u64>,
    pub mems: Vec<Vec<u64>>,
}

impl MachineState {
    pub fn reset(nl: &Netlist) -> Self {
        MachineState {
            regs: nl.registers.iter().map(|r| r.reset).collect(),
            mems: nl.memories.iter().map(|m| vec![0; m.depth]).collect(),
        }
    }

    pub fn reg(&self, nl: &Netlist, name: &str) -> Option<u64> {
        nl.reg(name).map(|i| self.regs[i])
    }
}

/// Evaluate all nets for a state and input valuation.
pub fn eval_nets(nl: &Netlist, state: &MachineState, inputs: &[u64]) -> Vec<u64> {
    let mut v = vec![0u64; nl.nets.len()];
    for (i, (_, w, id)) in nl.inputs.iter().enumerate() {
        v[*id] = inputs.get(i).copied().unwrap_or(0) & mask(*w);
    }
    for (i, r) in nl.registers.iter().enumerate() {
        v[r.net] = state.regs[i];
    }
    for &ci in &nl.topo {
        let c = &nl.cells[ci];
        let w = nl.nets[c.output].width;
        let a = |k: usize| v[c.inputs[k]];
        let out = match c.kind {
            CellKind::Not => !a(0),
            CellKind::And => a(0) & a(1),
            CellKind::Or => a(0) | a(1),
            CellKind::Xor => a(0) ^ a(1),
            CellKind::Mux => {
                if a(0) & 1 == 1 {
                    a(2)
                } else {
                    a(1)
                }
            }
            CellKind::Eq => (a(0) == a(1)) as u64,
            CellKind::Add => a(0).wrapping_add(a(1)),
            CellKind::Sub => a(0).wrapping_sub(a(1)),
            CellKind::Shift { left } => {
                let s = a(1);
                if s >= 64 {
                    0
                } else if left {
                    a(0) << s
                } else {
                    a(0) >> s
                }
            }
            CellKind::Const(k) => k,
            CellKind::Slice { lo, .. } => a(0) >> lo,
            CellKind::Concat => {
                let mut acc = 0u64;
                for &i in &c.inputs {
                    let iw = nl.nets[i].width;
                    acc = if iw >= 64 { v[i] } else { (acc << iw) | v[i] };
                }
                acc
            }
        };
        v[c.output] = out & mask(w);
    }
    v
}

/// Successor state from already evaluated nets.
pub fn next_state(nl: &Netlist, state: &MachineState, nets: &[u64]) -> Result<MachineState, SimError> {
    let mut regs = Vec::with_capacity(state.regs.len());
    for (i, r) in nl.registers.iter().enumerate() {
        let v = if let Some(rd) = &r.read {
            let m = &state.mems[rd.mem];
            m[(nets[rd.addr] as usize) % m.len()]
        } else if let Some(n) = r.next {
            nets[n]
        } else {
            state.regs[i]
        };
        regs.push(v & mask(r.width));
    }
    let mut mems = state.mems.clone();
    for (mi, m) in nl.memories.iter().enumerate() {
        let mut wrote = false;
        for w in &m.writes {
            if nets[w.en] & 1 == 1 {
                if wrote {
                    return Err(SimError::WriteConflict(m.name.clone()));
                }
                wrote = true;
                let a = (nets[w.addr] as usize) % m.depth;
                mems[mi][a] = nets[w.data] & mask(m.width);
            }
        }
    }
    Ok(MachineState { regs, mems })
}

fn check_state(nl: &Netlist, state: &MachineState) -> Result<(), SimError> {
    if state.regs.len() != nl.registers.len() || state.mems.len() != nl.memories.len() {
        return Err(SimError::WidthMismatch("element count".into()));
    }
    for (r, v) in nl.registers.iter().zip(&state.regs) {
        if v & !mask(r.width) != 0 {
            return Err(SimError::WidthMismatch(r.name.clone()));
        }
    }
    for (m, c) in nl.memories.iter().zip(&state.mems) {
        if c.len() != m.depth || c.iter().any(|v| v & !mask(m.width) != 0) {
            return Err(SimError::WidthMismatch(m.name.clone()));
        }
    }
    Ok(())
}

/// The unique successor of `state` under `inputs`.
pub fn step(nl: &Netlist, state: &MachineState, inputs: &[u64]) -> Result<MachineState, SimError> {
    check_state(nl, state)?;
    if inputs.len() != nl.inputs.len() {
        return Err(SimError::WidthMismatch(format!("expected {} inputs, got {}", nl.inputs.len(), inputs.len())));
    }
    let nets = eval_nets(nl, state, inputs);
    next_state(nl, state, &nets)
}

/// A straight-line program. The instruction at index `j` has PC `j + 1`; PC 0
/// marks an empty PCR.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Program {
    pub words: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub initial: MachineState,
    pub inputs: Vec<Vec<u64>>,
    /// `states[0] == initial`, `states[k+1] = step(states[k], inputs[k])`.
    pub states: Vec<MachineState>,
}

/// Input valuation presenting `program[im_pc - 1]` at the fetch port.
pub fn fetch_inputs(nl: &Netlist, state: &MachineState, words: &[u64]) -> Vec<u64> {
    let mut ins = vec![0u64; nl.inputs.len()];
    let a = &nl.annotations;
    if let (Some((v, w)), Some(pc)) = (&a.fetch, &a.im_pc) {
        let pc = state.reg(nl, pc).unwrap_or(0) as usize;
        if pc >= 1 && pc - 1 < words.len() {
            ins[nl.input(v).unwrap()] = 1;
            ins[nl.input(w).unwrap()] = words[pc - 1];
        }
    }
    ins
}

/// Largest program length whose PCs stay distinct and nonzero.
pub fn max_program_len(nl: &Netlist) -> usize {
    let Some(pc) = nl.annotations.im_pc.as_ref().and_then(|n| nl.reg(n)) else { return 0 };
    let w = nl.registers[pc].width;
    // im_pc must also be able to point one past the end.
    (mask(w) as usize).saturating_sub(1)
}

pub fn run_program(nl: &Netlist, program: &Program, init: &MachineState, horizon: usize) -> Result<Trace, SimError> {
    run_program_with(nl, program, init, horizon, |_, _, _| {})
}

/// Like [`run_program`], with a hook that may set extra inputs each cycle.
pub fn run_program_with(
    nl: &Netlist,
    program: &Program,
    init: &MachineState,
    horizon: usize,
    mut extra: impl FnMut(usize, &MachineState, &mut Vec<u64>),
) -> Result<Trace, SimError> {
    if horizon == 0 {
        return Err(SimError::HorizonZero);
    }
    if nl.annotations.fetch.is_none() || nl.annotations.im_pc.is_none() {
        if !program.words.is_empty() {
            return Err(SimError::MissingAnnotation("fetch/impc"));
        }
    } else if program.words.len() > max_program_len(nl) {
        return Err(SimError::NonUniquePc(program.words.len()));
    }
    check_state(nl, init)?;
    let mut states = vec![init.clone()];
    let mut inputs = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let cur = &states[k];
        let mut ins = fetch_inputs(nl, cur, &program.words);
        extra(k, cur, &mut ins);
        let nets = eval_nets(nl, cur, &ins);
        let nx = next_state(nl, cur, &nets)?;
        inputs.push(ins);
        states.push(nx);
    }
    Ok(Trace { initial: init.clone(), inputs, states })
}

/// One line per cycle listing registers and memory words that changed.
///
/// Format: `@<cycle> name=value ... mem[addr]=value ...`; cycle 0 lists the
/// full initial register file and nonzero memory words.
pub fn dump_trace(nl: &Netlist, trace: &Trace) -> String {
    let mut s = String::new();
    for (k, st) in trace.states.iter().enumerate() {
        let _ = write!(s, "@{k}");
        let prev = if k == 0 { None } else { Some(&trace.states[k - 1]) };
        for (i, r) in nl.registers.iter().enumerate() {
            if prev.map(|p| p.regs[i] != st.regs[i]).unwrap_or(true) {
                let _ = write!(s, " {}={}", r.name, st.regs[i]);
            }
        }
        for (mi, m) in nl.memories.iter().enumerate() {
            for (a, v) in st.mems[mi].iter().enumerate() {
                let changed = match prev {
                    Some(p) => p.mems[mi][a] != *v,
                    None => *v != 0,
                };
                if changed {
                    let _ = write!(s, " {}[{}]={}", m.name, a, v);
                }
            }
        }
        s.push('\n');
    }
    s
}

/// Parse a dump back into the sequence of states.
pub fn parse_dump(nl: &Netlist, text: &str) -> Option<Vec<MachineState>> {
    let mut out: Vec<MachineState> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut toks = line.split_whitespace();
        toks.next()?.strip_prefix('@')?;
        let mut st = out.last().cloned().unwrap_or_else(|| {
            let mut s = MachineState::reset(nl);
            s.regs.iter_mut().for_each(|v| *v = 0);
            s
        });
        for t in toks {
            let (lhs, v) = t.split_once('=')?;
            let v: u64 = v.parse().ok()?;
            if let Some((m, a)) = lhs.split_once('[') {
                let mi = nl.mem(m)?;
                let a: usize = a.strip_suffix(']')?.parse().ok()?;
                *st.mems[mi].get_mut(a)? = v;
            } else {
                st.regs[nl.reg(lhs)?] = v;
            }
        }
        out.push(st);
    }
    Some(out)
}
