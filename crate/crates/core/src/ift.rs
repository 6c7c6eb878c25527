// SPDX-License-Identifier: Apache-2.0
//! Cell-level taint tracking.
//!
//! `instrument` emits shadow logic in the design language next to the base
//! design. For a base net `x` the lower-plane taint net is `taint.x` and, in
//! two-bit mode, the upper-plane net is `taint.hi.x`. Register taint state
//! lives in `taint.q.<reg>` (plus `taint.qa.<reg>` for the address taint of
//! a memory read port); memories get a shadow `taint.<mem>` per plane.
//! Control inputs: `taint.intro.<reg>` / `taint.introu.<reg>` force the
//! lower / upper taint of an operand register, and `taint.block` suppresses
//! taint at the architectural write ports.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netlist::{parse_netlist, CellKind, Netlist, NetlistError};
use crate::sim::MachineState;

#[derive(Debug, Error)]
pub enum IftError {
    #[error("`{0}` is not an annotated operand register")]
    NotAnOperandRegister(String),
    #[error("name `{0}` clashes with the taint namespace")]
    ReservedName(String),
    #[error("flushing needs two-bit instrumentation")]
    WrongMode,
    #[error("instrumented netlist failed to parse: {0}")]
    Netlist(#[from] NetlistError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IftMode {
    OneBit,
    TwoBit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Plane {
    Lower,
    Upper,
}

/// When a constraint is active, evaluated on the current state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Trigger {
    Never,
    /// The instruction with this PC occupies the issue μFSM's PCR.
    AtIssue(u64),
    /// The instruction with this PC occupies some PCR.
    InFlight(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Constraint {
    Introduce { reg: String, plane: Plane, trigger: Trigger },
    Block { trigger: Trigger },
    /// Lower-plane μFSM taint must be zero whenever the instruction with this
    /// PC is at issue.
    AssumeLowerClean { pc: u64 },
}

#[derive(Debug, Clone)]
pub struct TaintedNetlist {
    pub base: Arc<Netlist>,
    pub netlist: Arc<Netlist>,
    pub mode: IftMode,
    pub constraints: Vec<Constraint>,
    /// Per μFSM: taint state registers of its vars, lower then upper plane.
    fsm_taint: Vec<(Vec<usize>, Vec<usize>)>,
    pcrs: Vec<usize>,
    issue_pcr: Option<usize>,
    /// Operand register to its (lower, upper) introduction inputs.
    intro: HashMap<String, (usize, Option<usize>)>,
    block: usize,
}

struct Gen {
    out: String,
    n: usize,
    zeros: BTreeSet<u32>,
}

impl Gen {
    fn fresh(&mut self) -> String {
        self.n += 1;
        format!("taint.0t{}", self.n)
    }
    fn cell(&mut self, name: &str, w: u32, body: String) {
        let _ = writeln!(self.out, "cell {name}:{w} = {body}");
    }
    fn tmp(&mut self, w: u32, body: String) -> String {
        let t = self.fresh();
        self.cell(&t, w, body);
        t
    }
    fn zero(&mut self, w: u32) -> String {
        self.zeros.insert(w);
        format!("taint.0z{w}")
    }
    /// 1-bit OR-reduction.
    fn any(&mut self, t: &str, w: u32) -> String {
        if w == 1 {
            return t.to_string();
        }
        let z = self.zero(w);
        let e = self.tmp(1, format!("EQ {t} {z}"));
        self.tmp(1, format!("NOT {e}"))
    }
    fn rep_into(&mut self, name: &str, x: &str, w: u32) {
        if w == 1 {
            self.cell(name, 1, format!("SLICE {x} 0 0"));
        } else {
            self.cell(name, w, format!("CONCAT {}", vec![x; w as usize].join(" ")));
        }
    }
    fn rep(&mut self, x: &str, w: u32) -> String {
        if w == 1 {
            return x.to_string();
        }
        self.tmp(w, format!("CONCAT {}", vec![x; w as usize].join(" ")))
    }
}

fn tname(plane: Plane, net: &str) -> String {
    match plane {
        Plane::Lower => format!("taint.{net}"),
        Plane::Upper => format!("taint.hi.{net}"),
    }
}

fn pre(plane: Plane) -> &'static str {
    match plane {
        Plane::Lower => "taint.",
        Plane::Upper => "taint.hi.",
    }
}

/// Emit the propagation rule of one cell into `out`.
fn rule(g: &mut Gen, kind: CellKind, vals: &[String], t: &[String], widths: &[u32], w: u32, out: &str) {
    match kind {
        CellKind::Not => g.cell(out, w, format!("SLICE {} {} 0", t[0], w - 1)),
        CellKind::And => {
            let x1 = g.tmp(w, format!("AND {} {}", t[0], t[1]));
            let x2 = g.tmp(w, format!("AND {} {}", t[0], vals[1]));
            let x3 = g.tmp(w, format!("AND {} {}", t[1], vals[0]));
            let y = g.tmp(w, format!("OR {x1} {x2}"));
            g.cell(out, w, format!("OR {y} {x3}"));
        }
        CellKind::Or => {
            let na = g.tmp(w, format!("NOT {}", vals[0]));
            let nb = g.tmp(w, format!("NOT {}", vals[1]));
            let x1 = g.tmp(w, format!("AND {} {}", t[0], t[1]));
            let x2 = g.tmp(w, format!("AND {} {nb}", t[0]));
            let x3 = g.tmp(w, format!("AND {} {na}", t[1]));
            let y = g.tmp(w, format!("OR {x1} {x2}"));
            g.cell(out, w, format!("OR {y} {x3}"));
        }
        CellKind::Xor => g.cell(out, w, format!("OR {} {}", t[0], t[1])),
        CellKind::Mux => {
            let sel = g.tmp(w, format!("MUX {} {} {}", vals[0], t[1], t[2]));
            let diff = g.tmp(w, format!("XOR {} {}", vals[1], vals[2]));
            let d1 = g.tmp(w, format!("OR {diff} {}", t[1]));
            let d2 = g.tmp(w, format!("OR {d1} {}", t[2]));
            let rs = g.rep(&t[0], w);
            let x = g.tmp(w, format!("AND {rs} {d2}"));
            g.cell(out, w, format!("OR {sel} {x}"));
        }
        CellKind::Eq | CellKind::Add | CellKind::Sub | CellKind::Shift { .. } => {
            let mut acc: Option<String> = None;
            for (ti, &wi) in t.iter().zip(widths) {
                let a = g.any(ti, wi);
                acc = Some(match acc {
                    None => a,
                    Some(p) => g.tmp(1, format!("OR {p} {a}")),
                });
            }
            let a = acc.unwrap();
            g.rep_into(out, &a, w);
        }
        CellKind::Const(_) => g.cell(out, w, "CONST 0".into()),
        CellKind::Slice { hi, lo } => g.cell(out, w, format!("SLICE {} {hi} {lo}", t[0])),
        CellKind::Concat => g.cell(out, w, format!("CONCAT {}", t.join(" "))),
    }
}

fn operand_regs(nl: &Netlist) -> BTreeSet<String> {
    nl.annotations.operand_regs.iter().map(|(_, r)| r.clone()).collect()
}

/// Add shadow taint logic. The base design is unchanged.
pub fn instrument(nl: &Netlist, mode: IftMode) -> Result<TaintedNetlist, IftError> {
    let planes: &[Plane] = match mode {
        IftMode::OneBit => &[Plane::Lower],
        IftMode::TwoBit => &[Plane::Upper, Plane::Lower],
    };
    let two = mode == IftMode::TwoBit;
    const RESERVED: [&str; 6] = ["taint.", "q.", "qa.", "hi.", "intro.", "introu."];
    let names = nl.nets.iter().map(|n| &n.name).chain(nl.memories.iter().map(|m| &m.name));
    for n in names {
        if n == "block" || RESERVED.iter().any(|r| n.starts_with(r)) {
            return Err(IftError::ReservedName(n.clone()));
        }
    }
    let mut g = Gen { out: String::new(), n: 0, zeros: BTreeSet::new() };
    let ops = operand_regs(nl);
    let arch: BTreeSet<&str> = [&nl.annotations.arf, &nl.annotations.amem].into_iter().flatten().map(|s| s.as_str()).collect();
    let _ = writeln!(g.out, "\n# taint instrumentation ({})", if two { "two-bit" } else { "one-bit" });
    let _ = writeln!(g.out, "in taint.block:1");
    for r in &ops {
        let _ = writeln!(g.out, "in taint.intro.{r}:1");
        if two {
            let _ = writeln!(g.out, "in taint.introu.{r}:1");
        }
    }
    let nblock = g.tmp(1, "NOT taint.block".into());
    for (name, w, _) in &nl.inputs {
        for &p in planes {
            let z = g.zero(*w);
            g.cell(&tname(p, name), *w, format!("SLICE {z} {} 0", w - 1));
        }
    }
    // cells
    for c in &nl.cells {
        let o = &nl.nets[c.output];
        let vals: Vec<String> = c.inputs.iter().map(|&i| nl.nets[i].name.clone()).collect();
        let widths: Vec<u32> = c.inputs.iter().map(|&i| nl.nets[i].width).collect();
        for &p in planes {
            let t: Vec<String> = vals.iter().map(|v| tname(p, v)).collect();
            if two && p == Plane::Lower {
                let raw = g.fresh();
                rule(&mut g, c.kind, &vals, &t, &widths, o.width, &raw);
                let nh = g.tmp(o.width, format!("NOT {}", tname(Plane::Upper, &o.name)));
                g.cell(&tname(p, &o.name), o.width, format!("AND {raw} {nh}"));
            } else {
                rule(&mut g, c.kind, &vals, &t, &widths, o.width, &tname(p, &o.name));
            }
        }
    }
    // registers
    for r in &nl.registers {
        let w = r.width;
        for &p in planes {
            let q = format!("{}q.{}", pre(p), r.name);
            let mut parts = vec![q.clone()];
            if let Some(rd) = &r.read {
                let mem = &nl.memories[rd.mem].name;
                let addr = &nl.nets[rd.addr];
                let _ = writeln!(g.out, "memrd {q}:{w} = {}{mem}[{}]", pre(p), addr.name);
                let qa = format!("{}qa.{}", pre(p), r.name);
                let any = g.any(&tname(p, &addr.name), addr.width);
                let nx = if two && p == Plane::Lower {
                    let anyh = g.any(&tname(Plane::Upper, &addr.name), addr.width);
                    let nh = g.tmp(1, format!("NOT {anyh}"));
                    g.tmp(1, format!("AND {any} {nh}"))
                } else {
                    any
                };
                let _ = writeln!(g.out, "reg {qa}:1 reset 0 next {nx}");
                parts.push(g.rep(&qa, w));
            } else {
                let nx = r.next.map(|n| tname(p, &nl.nets[n].name));
                match nx {
                    Some(n) => {
                        let _ = writeln!(g.out, "reg {q}:{w} reset 0 next {n}");
                    }
                    None => {
                        let _ = writeln!(g.out, "reg {q}:{w} reset 0");
                    }
                }
            }
            if ops.contains(&r.name) {
                let ctl = match p {
                    Plane::Lower => format!("taint.intro.{}", r.name),
                    Plane::Upper => format!("taint.introu.{}", r.name),
                };
                parts.push(g.rep(&ctl, w));
            }
            let mut acc = parts[0].clone();
            for x in &parts[1..] {
                acc = g.tmp(w, format!("OR {acc} {x}"));
            }
            let out = tname(p, &r.name);
            if two && p == Plane::Lower {
                let nh = g.tmp(w, format!("NOT {}", tname(Plane::Upper, &r.name)));
                g.cell(&out, w, format!("AND {acc} {nh}"));
            } else {
                g.cell(&out, w, format!("SLICE {acc} {} 0", w - 1));
            }
        }
    }
    // memories
    for m in &nl.memories {
        let blocked = arch.contains(m.name.as_str());
        for &p in planes {
            let _ = writeln!(g.out, "mem {}{}:{} depth {}", pre(p), m.name, m.width, m.depth);
        }
        for wr in &m.writes {
            let (a, d, e) = (&nl.nets[wr.addr], &nl.nets[wr.data], &nl.nets[wr.en]);
            // extra[p]: the write may or may not have happened, or went elsewhere
            let mut extra = Vec::new();
            for &p in planes {
                let aa = g.any(&tname(p, &a.name), a.width);
                // an untainted, inactive enable writes nothing wherever the address points
                let aa = g.tmp(1, format!("AND {} {aa}", e.name));
                let x = g.tmp(1, format!("OR {} {aa}", tname(p, &e.name)));
                let x = if blocked { g.tmp(1, format!("AND {x} {nblock}")) } else { x };
                extra.push((p, x));
            }
            let mut en = e.name.clone();
            for (_, x) in &extra {
                en = g.tmp(1, format!("OR {en} {x}"));
            }
            let mut hi_data: Option<String> = None;
            for (p, x) in &extra {
                let td = tname(*p, &d.name);
                let td = if blocked {
                    let nb = g.rep(&nblock, m.width);
                    g.tmp(m.width, format!("AND {td} {nb}"))
                } else {
                    td
                };
                let rx = g.rep(x, m.width);
                let mut data = g.tmp(m.width, format!("OR {td} {rx}"));
                if let (Plane::Lower, Some(h)) = (p, &hi_data) {
                    let nh = g.tmp(m.width, format!("NOT {h}"));
                    data = g.tmp(m.width, format!("AND {data} {nh}"));
                }
                if *p == Plane::Upper {
                    hi_data = Some(data.clone());
                }
                let _ = writeln!(g.out, "memwr {}{}[{}] = {data} if {en}", pre(*p), m.name, a.name);
            }
        }
    }
    let mut text = nl.to_text();
    for w in &g.zeros {
        let _ = writeln!(text, "cell taint.0z{w}:{w} = CONST 0");
    }
    text.push_str(&g.out);
    let inst = parse_netlist(&text)?;
    let reg = |n: String| inst.reg(&n).expect("shadow register");
    let fsm_taint = nl
        .annotations
        .mufsms
        .iter()
        .map(|f| {
            let lo = f.vars.iter().map(|v| reg(format!("taint.q.{v}"))).collect();
            let hi = if two { f.vars.iter().map(|v| reg(format!("taint.hi.q.{v}"))).collect() } else { Vec::new() };
            (lo, hi)
        })
        .collect();
    let pcrs = nl.annotations.mufsms.iter().map(|f| inst.reg(&f.pcr).unwrap()).collect();
    let issue_pcr = nl.annotations.issue.as_ref().and_then(|i| inst.fsm(i)).map(|f| inst.reg(&f.pcr).unwrap());
    let intro = ops.iter().map(|r| (r.clone(), (inst.input(&format!("taint.intro.{r}")).unwrap(), inst.input(&format!("taint.introu.{r}"))))).collect();
    let block = inst.input("taint.block").unwrap();
    Ok(TaintedNetlist { base: Arc::new(nl.clone()), netlist: Arc::new(inst), mode, constraints: Vec::new(), fsm_taint, pcrs, issue_pcr, intro, block })
}

impl TaintedNetlist {
    /// Force `target`'s taint in `plane` exactly while `trigger` holds.
    pub fn introduce_taint(mut self, target: &str, plane: Plane, trigger: Trigger) -> Result<Self, IftError> {
        if !operand_regs(&self.base).contains(target) {
            return Err(IftError::NotAnOperandRegister(target.to_string()));
        }
        if plane == Plane::Upper && self.mode != IftMode::TwoBit {
            return Err(IftError::WrongMode);
        }
        self.constraints.push(Constraint::Introduce { reg: target.to_string(), plane, trigger });
        Ok(self)
    }

    /// Clear taint at the ARF/AMEM write ports while the transmitter is in
    /// flight.
    pub fn block_architectural_flow(mut self, transmitter_pc: u64) -> Self {
        self.constraints.push(Constraint::Block { trigger: Trigger::InFlight(transmitter_pc) });
        self
    }

    /// Upper-plane taint on every operand of the window instructions at their
    /// issue, and the assumption that lower μFSM taint is zero when the
    /// transponder issues.
    pub fn flush_dynamic_taint(mut self, window: &[u64], transponder_pc: u64) -> Result<Self, IftError> {
        if self.mode != IftMode::TwoBit {
            return Err(IftError::WrongMode);
        }
        for &pc in window {
            for r in operand_regs(&self.base) {
                self.constraints.push(Constraint::Introduce { reg: r, plane: Plane::Upper, trigger: Trigger::AtIssue(pc) });
            }
        }
        self.constraints.push(Constraint::AssumeLowerClean { pc: transponder_pc });
        Ok(self)
    }

    /// Whether the instruction with this PC occupies some PCR.
    pub fn in_flight(&self, state: &MachineState, pc: u64) -> bool {
        self.holds(&Trigger::InFlight(pc), state)
    }

    pub fn at_issue(&self, state: &MachineState, pc: u64) -> bool {
        self.holds(&Trigger::AtIssue(pc), state)
    }

    fn holds(&self, t: &Trigger, state: &MachineState) -> bool {
        match t {
            Trigger::Never => false,
            Trigger::AtIssue(pc) => self.issue_pcr.map(|r| state.regs[r] == *pc).unwrap_or(false),
            Trigger::InFlight(pc) => self.pcrs.iter().any(|&r| state.regs[r] == *pc),
        }
    }

    /// Set the taint control inputs for the current state.
    pub fn drive(&self, state: &MachineState, inputs: &mut [u64]) {
        for c in &self.constraints {
            match c {
                Constraint::Introduce { reg, plane, trigger } => {
                    if self.holds(trigger, state) {
                        let (lo, hi) = self.intro[reg.as_str()];
                        let i = match plane {
                            Plane::Lower => lo,
                            Plane::Upper => hi.expect("upper plane present"),
                        };
                        inputs[i] = 1;
                    }
                }
                Constraint::Block { trigger } => {
                    if self.holds(trigger, state) {
                        inputs[self.block] = 1;
                    }
                }
                Constraint::AssumeLowerClean { .. } => {}
            }
        }
    }

    /// Whether every `AssumeLowerClean` holds in `state`.
    pub fn assumptions_hold(&self, state: &MachineState) -> bool {
        self.constraints.iter().all(|c| match c {
            Constraint::AssumeLowerClean { pc } => !self.holds(&Trigger::AtIssue(*pc), state) || (0..self.fsm_taint.len()).all(|f| !self.fsm_tainted(state, f, Plane::Lower)),
            _ => true,
        })
    }

    /// OR of the taint of a μFSM's vars in one plane.
    pub fn fsm_tainted(&self, state: &MachineState, fsm: usize, plane: Plane) -> bool {
        let regs = match plane {
            Plane::Lower => &self.fsm_taint[fsm].0,
            Plane::Upper => &self.fsm_taint[fsm].1,
        };
        regs.iter().any(|&r| state.regs[r] != 0)
    }

    /// Pairs of taint state elements `(lower, upper)` for the clearing law:
    /// registers by index, then memories by index.
    pub fn plane_pairs(&self) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
        let mut regs = Vec::new();
        let mut mems = Vec::new();
        if self.mode == IftMode::TwoBit {
            for (i, r) in self.netlist.registers.iter().enumerate() {
                if let Some(rest) = r.name.strip_prefix("taint.") {
                    if rest.starts_with("q.") || rest.starts_with("qa.") {
                        if let Some(h) = self.netlist.reg(&format!("taint.hi.{rest}")) {
                            regs.push((i, h));
                        }
                    }
                }
            }
            for m in &self.base.memories {
                if let (Some(l), Some(h)) = (self.netlist.mem(&format!("taint.{}", m.name)), self.netlist.mem(&format!("taint.hi.{}", m.name))) {
                    mems.push((l, h));
                }
            }
        }
        (regs, mems)
    }

    /// Map a base state into the instrumented state space with zero taint.
    pub fn lift(&self, base: &MachineState) -> MachineState {
        let mut s = MachineState::reset(&self.netlist);
        for (i, r) in self.base.registers.iter().enumerate() {
            s.regs[self.netlist.reg(&r.name).unwrap()] = base.regs[i];
        }
        for (i, m) in self.base.memories.iter().enumerate() {
            s.mems[self.netlist.mem(&m.name).unwrap()] = base.mems[i].clone();
        }
        s
    }

    /// Project an instrumented state onto the base design.
    pub fn project(&self, s: &MachineState) -> MachineState {
        MachineState {
            regs: self.base.registers.iter().map(|r| s.regs[self.netlist.reg(&r.name).unwrap()]).collect(),
            mems: self.base.memories.iter().map(|m| s.mems[self.netlist.mem(&m.name).unwrap()].clone()).collect(),
        }
    }
}
