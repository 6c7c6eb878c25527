// SPDX-License-Identifier: Apache-2.0

//! Synchronous netlist IR, its textual design language, and structural queries.
//!
//! The grammar is documented in `docs/design-language.md`. Every net has a
//! single driver: a primary input, a register (including memory read ports,
//! which are registers whose next value is a memory word), or a cell.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NetId = usize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetlistError {
    #[error("syntax error at line {line}: {msg}")]
    SyntaxError { line: usize, msg: String },
    #[error("combinational cycle through nets {0:?}")]
    CombinationalCycle(Vec<String>),
    #[error("net `{0}` has multiple drivers")]
    MultipleDrivers(String),
    #[error("annotation refers to unknown element `{0}`")]
    UnknownAnnotationTarget(String),
    #[error("unknown register `{0}`")]
    UnknownRegister(String),
}

fn syn(line: usize, msg: impl Into<String>) -> NetlistError {
    NetlistError::SyntaxError { line, msg: msg.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellKind {
    Not,
    And,
    Or,
    Xor,
    /// `MUX sel if0 if1`
    Mux,
    Eq,
    Add,
    Sub,
    /// Logical shift; `left` selects direction. Shift amount is the second input.
    Shift { left: bool },
    Const(u64),
    Slice { hi: u32, lo: u32 },
    /// Inputs are listed most-significant first.
    Concat,
}

impl CellKind {
    pub fn mnemonic(&self) -> &'static str {
        match self {
            CellKind::Not => "NOT",
            CellKind::And => "AND",
            CellKind::Or => "OR",
            CellKind::Xor => "XOR",
            CellKind::Mux => "MUX",
            CellKind::Eq => "EQ",
            CellKind::Add => "ADD",
            CellKind::Sub => "SUB",
            CellKind::Shift { left: true } => "SHL",
            CellKind::Shift { left: false } => "SHR",
            CellKind::Const(_) => "CONST",
            CellKind::Slice { .. } => "SLICE",
            CellKind::Concat => "CONCAT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub kind: CellKind,
    pub inputs: Vec<NetId>,
    pub output: NetId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Driver {
    Input(usize),
    Register(usize),
    Cell(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Net {
    pub name: String,
    pub width: u32,
    pub driver: Driver,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemRead {
    pub mem: usize,
    pub addr: NetId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Register {
    pub name: String,
    pub width: u32,
    pub reset: u64,
    pub net: NetId,
    /// Next-state net; `None` holds the current value.
    pub next: Option<NetId>,
    /// Set for synchronous memory read ports.
    pub read: Option<MemRead>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemWrite {
    pub addr: NetId,
    pub data: NetId,
    pub en: NetId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Memory {
    pub name: String,
    pub width: u32,
    pub depth: usize,
    pub writes: Vec<MemWrite>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MuFsm {
    pub id: String,
    pub pcr: String,
    pub vars: Vec<String>,
    pub idle_states: BTreeSet<Vec<u64>>,
    /// Display names for specific non-idle valuations.
    pub names: BTreeMap<Vec<u64>, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Annotations {
    pub ifr: Option<String>,
    pub commit: Option<String>,
    /// PCR sampled together with the commit net.
    pub commit_pcr: Option<String>,
    pub arf: Option<String>,
    pub amem: Option<String>,
    /// (instruction field, register) pairs.
    pub operand_regs: Vec<(String, String)>,
    pub mufsms: Vec<MuFsm>,
    pub im_pc: Option<String>,
    /// μFSM whose PCR identifies the instruction held in the operand registers.
    pub issue: Option<String>,
    /// (valid input, word input) driven by the program environment.
    pub fetch: Option<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Netlist {
    pub inputs: Vec<(String, u32, NetId)>,
    pub outputs: Vec<(String, NetId)>,
    pub nets: Vec<Net>,
    pub cells: Vec<Cell>,
    pub registers: Vec<Register>,
    pub memories: Vec<Memory>,
    pub annotations: Annotations,
    /// Cell indices in evaluation order.
    pub topo: Vec<usize>,
}

pub fn mask(width: u32) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

impl Netlist {
    pub fn net(&self, name: &str) -> Option<NetId> {
        self.nets.iter().position(|n| n.name == name)
    }

    pub fn reg(&self, name: &str) -> Option<usize> {
        self.registers.iter().position(|r| r.name == name)
    }

    pub fn mem(&self, name: &str) -> Option<usize> {
        self.memories.iter().position(|m| m.name == name)
    }

    pub fn input(&self, name: &str) -> Option<usize> {
        self.inputs.iter().position(|i| i.0 == name)
    }

    pub fn fsm(&self, id: &str) -> Option<&MuFsm> {
        self.annotations.mufsms.iter().find(|f| f.id == id)
    }

    /// Register indices that hold state for the named μFSM (PCR first, then vars).
    pub fn fsm_regs(&self, fsm: &MuFsm) -> Vec<usize> {
        std::iter::once(&fsm.pcr)
            .chain(fsm.vars.iter())
            .filter_map(|n| self.reg(n))
            .collect()
    }

    /// Output bit of a register in `from` reaches the next-state input of a
    /// register in `to` through cells only.
    pub fn comb_cone(&self, from: &[&str], to: &[&str]) -> Result<bool, NetlistError> {
        let resolve = |names: &[&str]| -> Result<Vec<usize>, NetlistError> {
            names
                .iter()
                .map(|n| self.reg(n).ok_or_else(|| NetlistError::UnknownRegister(n.to_string())))
                .collect()
        };
        let from = resolve(from)?;
        let to = resolve(to)?;
        let mut fanout: Vec<Vec<NetId>> = vec![Vec::new(); self.nets.len()];
        for c in &self.cells {
            for &i in &c.inputs {
                fanout[i].push(c.output);
            }
        }
        let mut seen = vec![false; self.nets.len()];
        let mut q: VecDeque<NetId> = VecDeque::new();
        for r in from {
            let n = self.registers[r].net;
            if !seen[n] {
                seen[n] = true;
                q.push_back(n);
            }
        }
        while let Some(n) = q.pop_front() {
            for &o in &fanout[n] {
                if !seen[o] {
                    seen[o] = true;
                    q.push_back(o);
                }
            }
        }
        Ok(to.into_iter().any(|r| {
            let reg = &self.registers[r];
            reg.next.map(|n| seen[n]).unwrap_or(false) || reg.read.as_ref().map(|rd| seen[rd.addr]).unwrap_or(false)
        }))
    }

    /// Canonical design-language text; re-parsing yields an identical IR.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for m in &self.memories {
            let _ = writeln!(s, "mem {}:{} depth {}", m.name, m.width, m.depth);
        }
        for n in &self.nets {
            match n.driver {
                Driver::Input(_) => {
                    let _ = writeln!(s, "in {}:{}", n.name, n.width);
                }
                Driver::Register(r) => {
                    let reg = &self.registers[r];
                    match &reg.read {
                        Some(rd) => {
                            let _ = writeln!(
                                s,
                                "memrd {}:{} = {}[{}] reset {}",
                                reg.name, reg.width, self.memories[rd.mem].name, self.nets[rd.addr].name, reg.reset
                            );
                        }
                        None => {
                            let _ = writeln!(s, "reg {}:{} reset {}", reg.name, reg.width, reg.reset);
                        }
                    }
                }
                Driver::Cell(c) => {
                    let cell = &self.cells[c];
                    let args: Vec<String> = cell.inputs.iter().map(|&i| self.nets[i].name.clone()).collect();
                    let extra = match cell.kind {
                        CellKind::Const(v) => format!(" {v}"),
                        CellKind::Slice { hi, lo } => format!(" {hi} {lo}"),
                        _ => String::new(),
                    };
                    let sep = if args.is_empty() { "" } else { " " };
                    let _ = writeln!(s, "cell {}:{} = {}{}{}{}", n.name, n.width, cell.kind.mnemonic(), sep, args.join(" "), extra);
                }
            }
        }
        for reg in &self.registers {
            if let Some(nx) = reg.next {
                let _ = writeln!(s, "next {} = {}", reg.name, self.nets[nx].name);
            }
        }
        for m in &self.memories {
            for w in &m.writes {
                let _ = writeln!(s, "memwr {}[{}] = {} if {}", m.name, self.nets[w.addr].name, self.nets[w.data].name, self.nets[w.en].name);
            }
        }
        for (name, n) in &self.outputs {
            let _ = writeln!(s, "out {} = {}", name, self.nets[*n].name);
        }
        let a = &self.annotations;
        if let Some((v, w)) = &a.fetch {
            let _ = writeln!(s, "annot fetch {v} {w}");
        }
        if let Some(x) = &a.ifr {
            let _ = writeln!(s, "annot ifr {x}");
        }
        if let Some(x) = &a.im_pc {
            let _ = writeln!(s, "annot impc {x}");
        }
        if let Some(x) = &a.commit {
            match &a.commit_pcr {
                Some(p) => {
                    let _ = writeln!(s, "annot commit {x} pcr {p}");
                }
                None => {
                    let _ = writeln!(s, "annot commit {x}");
                }
            }
        }
        if let Some(x) = &a.arf {
            let _ = writeln!(s, "annot arf {x}");
        }
        if let Some(x) = &a.amem {
            let _ = writeln!(s, "annot amem {x}");
        }
        for (f, r) in &a.operand_regs {
            let _ = writeln!(s, "annot operand {f} {r}");
        }
        for f in &a.mufsms {
            let _ = writeln!(s, "annot mufsm {} pcr {} vars {}", f.id, f.pcr, f.vars.join(","));
            for st in &f.idle_states {
                let _ = writeln!(s, "annot idle {} {}", f.id, join_vals(st));
            }
            for (st, name) in &f.names {
                let _ = writeln!(s, "annot plname {} {} {}", f.id, join_vals(st), name);
            }
        }
        if let Some(x) = &a.issue {
            let _ = writeln!(s, "annot issue {x}");
        }
        s
    }
}

fn join_vals(v: &[u64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn parse_number(tok: &str) -> Option<u64> {
    if let Some(h) = tok.strip_prefix("0x") {
        u64::from_str_radix(h, 16).ok()
    } else if let Some(b) = tok.strip_prefix("0b") {
        u64::from_str_radix(b, 2).ok()
    } else {
        tok.parse().ok()
    }
}

fn parse_vals(tok: &str, line: usize) -> Result<Vec<u64>, NetlistError> {
    tok.split(',')
        .map(|t| parse_number(t).ok_or_else(|| syn(line, format!("bad value `{t}`"))))
        .collect()
}

fn is_ident(s: &str) -> bool {
    !s.is_empty()
        && s.chars().next().map(|c| c.is_ascii_alphabetic() || c == '_').unwrap_or(false)
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn name_width(tok: &str, line: usize) -> Result<(String, u32), NetlistError> {
    let (n, w) = tok.split_once(':').ok_or_else(|| syn(line, format!("expected NAME:WIDTH, got `{tok}`")))?;
    if !is_ident(n) {
        return Err(syn(line, format!("bad identifier `{n}`")));
    }
    let w: u32 = w.parse().map_err(|_| syn(line, format!("bad width `{w}`")))?;
    if w == 0 || w > 64 {
        return Err(syn(line, format!("width {w} out of range 1..=64")));
    }
    Ok((n.to_string(), w))
}

/// `MEM[ADDR]`
fn mem_ref(tok: &str, line: usize) -> Result<(String, String), NetlistError> {
    let (m, rest) = tok.split_once('[').ok_or_else(|| syn(line, format!("expected MEM[ADDR], got `{tok}`")))?;
    let a = rest.strip_suffix(']').ok_or_else(|| syn(line, "missing `]`"))?;
    Ok((m.to_string(), a.to_string()))
}

enum Stmt {
    In(String, u32),
    Out(String, String),
    Reg(String, u32, u64, Option<String>),
    Next(String, String),
    Mem(String, u32, usize),
    MemRd(String, u32, String, String, u64),
    MemWr(String, String, String, String),
    Cell(String, u32, CellKind, Vec<String>),
    Annot(Vec<String>),
}

fn parse_stmt(toks: &[&str], line: usize) -> Result<Stmt, NetlistError> {
    let need = |n: usize| -> Result<(), NetlistError> {
        if toks.len() < n {
            Err(syn(line, format!("`{}` expects more operands", toks[0])))
        } else {
            Ok(())
        }
    };
    match toks[0] {
        "in" => {
            need(2)?;
            let (n, w) = name_width(toks[1], line)?;
            if toks.len() != 2 {
                return Err(syn(line, "trailing tokens"));
            }
            Ok(Stmt::In(n, w))
        }
        "out" => {
            if toks.len() != 4 || toks[2] != "=" {
                return Err(syn(line, "expected `out NAME = NET`"));
            }
            Ok(Stmt::Out(toks[1].into(), toks[3].into()))
        }
        "reg" => {
            need(4)?;
            let (n, w) = name_width(toks[1], line)?;
            if toks[2] != "reset" {
                return Err(syn(line, "expected `reset`"));
            }
            let v = parse_number(toks[3]).ok_or_else(|| syn(line, "bad reset value"))?;
            let next = match toks.len() {
                4 => None,
                6 if toks[4] == "next" => Some(toks[5].to_string()),
                _ => return Err(syn(line, "expected `reg NAME:W reset V [next NET]`")),
            };
            Ok(Stmt::Reg(n, w, v, next))
        }
        "next" => {
            if toks.len() != 4 || toks[2] != "=" {
                return Err(syn(line, "expected `next REG = NET`"));
            }
            Ok(Stmt::Next(toks[1].into(), toks[3].into()))
        }
        "mem" => {
            if toks.len() != 4 || toks[2] != "depth" {
                return Err(syn(line, "expected `mem NAME:W depth D`"));
            }
            let (n, w) = name_width(toks[1], line)?;
            let d: usize = toks[3].parse().map_err(|_| syn(line, "bad depth"))?;
            if d == 0 {
                return Err(syn(line, "depth must be positive"));
            }
            Ok(Stmt::Mem(n, w, d))
        }
        "memrd" => {
            if !(toks.len() == 4 || toks.len() == 6) || toks[2] != "=" {
                return Err(syn(line, "expected `memrd NAME:W = MEM[ADDR] [reset V]`"));
            }
            let (n, w) = name_width(toks[1], line)?;
            let (m, a) = mem_ref(toks[3], line)?;
            let reset = if toks.len() == 6 {
                if toks[4] != "reset" {
                    return Err(syn(line, "expected `reset`"));
                }
                parse_number(toks[5]).ok_or_else(|| syn(line, "bad reset value"))?
            } else {
                0
            };
            Ok(Stmt::MemRd(n, w, m, a, reset))
        }
        "memwr" => {
            if toks.len() != 6 || toks[2] != "=" || toks[4] != "if" {
                return Err(syn(line, "expected `memwr MEM[ADDR] = DATA if EN`"));
            }
            let (m, a) = mem_ref(toks[1], line)?;
            Ok(Stmt::MemWr(m, a, toks[3].into(), toks[5].into()))
        }
        "cell" => {
            need(4)?;
            let (n, w) = name_width(toks[1], line)?;
            if toks[2] != "=" {
                return Err(syn(line, "expected `=`"));
            }
            let args: Vec<String> = toks[4..].iter().map(|s| s.to_string()).collect();
            let (kind, args) = match toks[3] {
                "NOT" => (CellKind::Not, args),
                "AND" => (CellKind::And, args),
                "OR" => (CellKind::Or, args),
                "XOR" => (CellKind::Xor, args),
                "MUX" => (CellKind::Mux, args),
                "EQ" => (CellKind::Eq, args),
                "ADD" => (CellKind::Add, args),
                "SUB" => (CellKind::Sub, args),
                "SHL" => (CellKind::Shift { left: true }, args),
                "SHR" => (CellKind::Shift { left: false }, args),
                "CONCAT" => (CellKind::Concat, args),
                "CONST" => {
                    if args.len() != 1 {
                        return Err(syn(line, "CONST takes one value"));
                    }
                    let v = parse_number(&args[0]).ok_or_else(|| syn(line, "bad constant"))?;
                    (CellKind::Const(v), vec![])
                }
                "SLICE" => {
                    if args.len() != 3 {
                        return Err(syn(line, "SLICE takes NET HI LO"));
                    }
                    let hi: u32 = args[1].parse().map_err(|_| syn(line, "bad slice bound"))?;
                    let lo: u32 = args[2].parse().map_err(|_| syn(line, "bad slice bound"))?;
                    (CellKind::Slice { hi, lo }, vec![args[0].clone()])
                }
                k => return Err(syn(line, format!("unknown cell kind `{k}`"))),
            };
            Ok(Stmt::Cell(n, w, kind, args))
        }
        "annot" => {
            need(2)?;
            Ok(Stmt::Annot(toks[1..].iter().map(|s| s.to_string()).collect()))
        }
        k => Err(syn(line, format!("unknown statement `{k}`"))),
    }
}

fn check_widths(kind: CellKind, ins: &[u32], out: u32, line: usize) -> Result<(), NetlistError> {
    let bad = |m: &str| Err(syn(line, format!("{}: {m}", kind.mnemonic())));
    match kind {
        CellKind::Not => {
            if ins.len() != 1 || ins[0] != out {
                return bad("expects one input of output width");
            }
        }
        CellKind::And | CellKind::Or | CellKind::Xor | CellKind::Add | CellKind::Sub => {
            if ins.len() != 2 || ins[0] != out || ins[1] != out {
                return bad("expects two inputs of output width");
            }
        }
        CellKind::Shift { .. } => {
            if ins.len() != 2 || ins[0] != out {
                return bad("expects value of output width and an amount");
            }
        }
        CellKind::Mux => {
            if ins.len() != 3 || ins[0] != 1 || ins[1] != out || ins[2] != out {
                return bad("expects 1-bit select and two inputs of output width");
            }
        }
        CellKind::Eq => {
            if ins.len() != 2 || ins[0] != ins[1] || out != 1 {
                return bad("expects two equal-width inputs and a 1-bit output");
            }
        }
        CellKind::Const(v) => {
            if !ins.is_empty() || v & !mask(out) != 0 {
                return bad("constant does not fit output width");
            }
        }
        CellKind::Slice { hi, lo } => {
            if ins.len() != 1 || hi < lo || hi >= ins[0] || out != hi - lo + 1 {
                return bad("slice bounds inconsistent with widths");
            }
        }
        CellKind::Concat => {
            if ins.is_empty() || ins.iter().sum::<u32>() != out {
                return bad("input widths must sum to output width");
            }
        }
    }
    Ok(())
}

/// Parse design-language text into a validated netlist.
pub fn parse_netlist(text: &str) -> Result<Netlist, NetlistError> {
    let mut stmts: Vec<(usize, Stmt)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("");
        for part in body.split(';') {
            let toks: Vec<&str> = part.split_whitespace().collect();
            if toks.is_empty() {
                continue;
            }
            stmts.push((line, parse_stmt(&toks, line)?));
        }
    }

    let mut nl = Netlist {
        inputs: vec![],
        outputs: vec![],
        nets: vec![],
        cells: vec![],
        registers: vec![],
        memories: vec![],
        annotations: Annotations::default(),
        topo: vec![],
    };
    let mut by_name: HashMap<String, NetId> = HashMap::new();
    let mut mems: HashMap<String, usize> = HashMap::new();

    // Pass 1: declarations.
    for (line, st) in &stmts {
        let mut define = |nl: &mut Netlist, name: &str, width: u32, driver: Driver| -> Result<NetId, NetlistError> {
            if by_name.contains_key(name) {
                return Err(NetlistError::MultipleDrivers(name.to_string()));
            }
            let id = nl.nets.len();
            nl.nets.push(Net { name: name.to_string(), width, driver });
            by_name.insert(name.to_string(), id);
            Ok(id)
        };
        match st {
            Stmt::In(n, w) => {
                let idx = nl.inputs.len();
                let id = define(&mut nl, n, *w, Driver::Input(idx))?;
                nl.inputs.push((n.clone(), *w, id));
            }
            Stmt::Reg(n, w, v, _) => {
                if v & !mask(*w) != 0 {
                    return Err(syn(*line, "reset value does not fit width"));
                }
                let idx = nl.registers.len();
                let id = define(&mut nl, n, *w, Driver::Register(idx))?;
                nl.registers.push(Register { name: n.clone(), width: *w, reset: *v, net: id, next: None, read: None });
            }
            Stmt::MemRd(n, w, _, _, v) => {
                if v & !mask(*w) != 0 {
                    return Err(syn(*line, "reset value does not fit width"));
                }
                let idx = nl.registers.len();
                let id = define(&mut nl, n, *w, Driver::Register(idx))?;
                nl.registers.push(Register { name: n.clone(), width: *w, reset: *v, net: id, next: None, read: None });
            }
            Stmt::Cell(n, w, kind, args) => {
                let idx = nl.cells.len();
                let id = define(&mut nl, n, *w, Driver::Cell(idx))?;
                nl.cells.push(Cell { kind: *kind, inputs: Vec::with_capacity(args.len()), output: id });
            }
            Stmt::Mem(n, w, d) => {
                if mems.contains_key(n) {
                    return Err(NetlistError::MultipleDrivers(n.clone()));
                }
                mems.insert(n.clone(), nl.memories.len());
                nl.memories.push(Memory { name: n.clone(), width: *w, depth: *d, writes: vec![] });
            }
            _ => {}
        }
    }

    let lookup = |name: &str, line: usize| -> Result<NetId, NetlistError> {
        by_name.get(name).copied().ok_or_else(|| syn(line, format!("unknown net `{name}`")))
    };

    // Pass 2: connections.
    let mut cell_i = 0;
    let mut reg_i = 0;
    for (line, st) in &stmts {
        let line = *line;
        match st {
            Stmt::Reg(_, _, _, next) => {
                if let Some(nx) = next {
                    let id = lookup(nx, line)?;
                    nl.registers[reg_i].next = Some(id);
                }
                reg_i += 1;
            }
            Stmt::MemRd(_, w, m, a, _) => {
                let mi = *mems.get(m).ok_or_else(|| syn(line, format!("unknown memory `{m}`")))?;
                if nl.memories[mi].width != *w {
                    return Err(syn(line, "read port width differs from memory width"));
                }
                let addr = lookup(a, line)?;
                nl.registers[reg_i].read = Some(MemRead { mem: mi, addr });
                reg_i += 1;
            }
            Stmt::Cell(_, w, kind, args) => {
                let ins: Vec<NetId> = args.iter().map(|a| lookup(a, line)).collect::<Result<_, _>>()?;
                let widths: Vec<u32> = ins.iter().map(|&i| nl.nets[i].width).collect();
                check_widths(*kind, &widths, *w, line)?;
                nl.cells[cell_i].inputs = ins;
                cell_i += 1;
            }
            Stmt::Next(r, n) => {
                let ri = nl.reg(r).ok_or_else(|| syn(line, format!("unknown register `{r}`")))?;
                if nl.registers[ri].next.is_some() || nl.registers[ri].read.is_some() {
                    return Err(NetlistError::MultipleDrivers(r.clone()));
                }
                let id = lookup(n, line)?;
                if nl.nets[id].width != nl.registers[ri].width {
                    return Err(syn(line, format!("next-state width mismatch for `{r}`")));
                }
                nl.registers[ri].next = Some(id);
            }
            Stmt::Out(n, net) => {
                let id = lookup(net, line)?;
                nl.outputs.push((n.clone(), id));
            }
            Stmt::MemWr(m, a, d, e) => {
                let mi = *mems.get(m).ok_or_else(|| syn(line, format!("unknown memory `{m}`")))?;
                let (addr, data, en) = (lookup(a, line)?, lookup(d, line)?, lookup(e, line)?);
                if nl.nets[data].width != nl.memories[mi].width || nl.nets[en].width != 1 {
                    return Err(syn(line, "write port width mismatch"));
                }
                nl.memories[mi].writes.push(MemWrite { addr, data, en });
            }
            Stmt::Annot(toks) => apply_annot(&mut nl, toks, line)?,
            _ => {}
        }
    }
    for r in &nl.registers {
        if let Some(n) = r.next {
            if nl.nets[n].width != r.width {
                return Err(NetlistError::SyntaxError { line: 0, msg: format!("next-state width mismatch for `{}`", r.name) });
            }
        }
    }
    nl.topo = topo_order(&nl)?;
    validate_annotations(&nl)?;
    Ok(nl)
}

fn apply_annot(nl: &mut Netlist, t: &[String], line: usize) -> Result<(), NetlistError> {
    let a = &mut nl.annotations;
    let arity = |n: usize| -> Result<(), NetlistError> {
        if t.len() != n {
            Err(syn(line, format!("annot {} expects {} operands", t[0], n - 1)))
        } else {
            Ok(())
        }
    };
    match t[0].as_str() {
        "ifr" => {
            arity(2)?;
            a.ifr = Some(t[1].clone());
        }
        "impc" => {
            arity(2)?;
            a.im_pc = Some(t[1].clone());
        }
        "arf" => {
            arity(2)?;
            a.arf = Some(t[1].clone());
        }
        "amem" => {
            arity(2)?;
            a.amem = Some(t[1].clone());
        }
        "issue" => {
            arity(2)?;
            a.issue = Some(t[1].clone());
        }
        "fetch" => {
            arity(3)?;
            a.fetch = Some((t[1].clone(), t[2].clone()));
        }
        "commit" => {
            if t.len() == 2 {
                a.commit = Some(t[1].clone());
            } else if t.len() == 4 && t[2] == "pcr" {
                a.commit = Some(t[1].clone());
                a.commit_pcr = Some(t[3].clone());
            } else {
                return Err(syn(line, "expected `annot commit NET [pcr REG]`"));
            }
        }
        "operand" => {
            arity(3)?;
            a.operand_regs.push((t[1].clone(), t[2].clone()));
        }
        "mufsm" => {
            if t.len() != 6 || t[2] != "pcr" || t[4] != "vars" {
                return Err(syn(line, "expected `annot mufsm ID pcr REG vars A,B`"));
            }
            if a.mufsms.iter().any(|f| f.id == t[1]) {
                return Err(syn(line, format!("duplicate μFSM `{}`", t[1])));
            }
            let vars: Vec<String> = t[5].split(',').map(|s| s.to_string()).collect();
            if vars.iter().any(|v| v.is_empty()) {
                return Err(syn(line, "empty var name"));
            }
            if vars.contains(&t[3]) {
                return Err(syn(line, "pcr must not be one of the vars"));
            }
            a.mufsms.push(MuFsm { id: t[1].clone(), pcr: t[3].clone(), vars, idle_states: BTreeSet::new(), names: BTreeMap::new() });
        }
        "idle" | "plname" => {
            let want = if t[0] == "idle" { 3 } else { 4 };
            arity(want)?;
            let vals = parse_vals(&t[2], line)?;
            let f = a
                .mufsms
                .iter_mut()
                .find(|f| f.id == t[1])
                .ok_or_else(|| NetlistError::UnknownAnnotationTarget(t[1].clone()))?;
            if vals.len() != f.vars.len() {
                return Err(syn(line, "valuation arity differs from vars"));
            }
            if t[0] == "idle" {
                f.idle_states.insert(vals);
            } else {
                f.names.insert(vals, t[3].clone());
            }
        }
        k => return Err(syn(line, format!("unknown annotation `{k}`"))),
    }
    Ok(())
}

fn validate_annotations(nl: &Netlist) -> Result<(), NetlistError> {
    let a = &nl.annotations;
    let reg = |n: &String| nl.reg(n).map(|_| ()).ok_or_else(|| NetlistError::UnknownAnnotationTarget(n.clone()));
    let mem = |n: &String| nl.mem(n).map(|_| ()).ok_or_else(|| NetlistError::UnknownAnnotationTarget(n.clone()));
    let net = |n: &String| nl.net(n).map(|_| ()).ok_or_else(|| NetlistError::UnknownAnnotationTarget(n.clone()));
    let input = |n: &String| nl.input(n).map(|_| ()).ok_or_else(|| NetlistError::UnknownAnnotationTarget(n.clone()));
    if let Some(x) = &a.ifr {
        reg(x)?;
    }
    if let Some(x) = &a.im_pc {
        reg(x)?;
    }
    if let Some(x) = &a.commit {
        net(x)?;
    }
    if let Some(x) = &a.commit_pcr {
        reg(x)?;
    }
    if let Some(x) = &a.arf {
        mem(x)?;
    }
    if let Some(x) = &a.amem {
        mem(x)?;
    }
    if let Some((v, w)) = &a.fetch {
        input(v)?;
        input(w)?;
    }
    for (_, r) in &a.operand_regs {
        reg(r)?;
    }
    for f in &a.mufsms {
        reg(&f.pcr)?;
        for v in &f.vars {
            reg(v)?;
        }
        if f.idle_states.is_empty() {
            return Err(NetlistError::SyntaxError { line: 0, msg: format!("μFSM `{}` has no idle state", f.id) });
        }
    }
    if let Some(x) = &a.issue {
        if nl.fsm(x).is_none() {
            return Err(NetlistError::UnknownAnnotationTarget(x.clone()));
        }
    }
    Ok(())
}

fn topo_order(nl: &Netlist) -> Result<Vec<usize>, NetlistError> {
    let n = nl.cells.len();
    let mut indeg = vec![0usize; n];
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (ci, c) in nl.cells.iter().enumerate() {
        for &i in &c.inputs {
            if let Driver::Cell(src) = nl.nets[i].driver {
                indeg[ci] += 1;
                users[src].push(ci);
            }
        }
    }
    let mut q: VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(c) = q.pop_front() {
        order.push(c);
        for &u in &users[c] {
            indeg[u] -= 1;
            if indeg[u] == 0 {
                q.push_back(u);
            }
        }
    }
    if order.len() != n {
        let placed: HashSet<usize> = order.iter().copied().collect();
        let mut names: Vec<String> = (0..n).filter(|i| !placed.contains(i)).map(|i| nl.nets[nl.cells[i].output].name.clone()).collect();
        names.sort();
        return Err(NetlistError::CombinationalCycle(names));
    }
    Ok(order)
}

/// One line of an instruction encoding list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionEncoding {
    pub mnemonic: String,
    /// MSB-first pattern over `0`, `1`, `-`.
    pub pattern: String,
    /// (field name, hi, lo)
    pub fields: Vec<(String, u32, u32)>,
}

impl InstructionEncoding {
    pub fn width(&self) -> u32 {
        self.pattern.len() as u32
    }

    fn fixed(&self) -> (u64, u64) {
        let mut care = 0u64;
        let mut val = 0u64;
        for c in self.pattern.chars() {
            care <<= 1;
            val <<= 1;
            match c {
                '0' => care |= 1,
                '1' => {
                    care |= 1;
                    val |= 1
                }
                _ => {}
            }
        }
        (care, val)
    }

    pub fn matches(&self, word: u64) -> bool {
        let (care, val) = self.fixed();
        word & care == val
    }

    /// Encode with the given field values; unspecified fields are zero.
    pub fn encode(&self, fields: &[(&str, u64)]) -> u64 {
        let (_, mut w) = self.fixed();
        for (name, v) in fields {
            if let Some((_, hi, lo)) = self.fields.iter().find(|f| f.0 == *name) {
                w |= (v & mask(hi - lo + 1)) << lo;
            }
        }
        w
    }

    pub fn field(&self, word: u64, name: &str) -> Option<u64> {
        self.fields.iter().find(|f| f.0 == name).map(|(_, hi, lo)| (word >> lo) & mask(hi - lo + 1))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodingError {
    #[error("syntax error at line {line}: {msg}")]
    SyntaxError { line: usize, msg: String },
    #[error("patterns of `{0}` and `{1}` overlap")]
    Overlap(String, String),
}

/// Parse an encoding list: `MNEMONIC pattern field@hi:lo ...` per line.
pub fn parse_encodings(text: &str) -> Result<Vec<InstructionEncoding>, EncodingError> {
    let mut out: Vec<InstructionEncoding> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let toks: Vec<&str> = raw.split('#').next().unwrap_or("").split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        let err = |msg: String| EncodingError::SyntaxError { line, msg };
        if toks.len() < 2 {
            return Err(err("expected MNEMONIC PATTERN".into()));
        }
        let pattern = toks[1].to_string();
        if pattern.is_empty() || pattern.len() > 64 || !pattern.chars().all(|c| matches!(c, '0' | '1' | '-')) {
            return Err(err(format!("bad pattern `{pattern}`")));
        }
        let width = pattern.len() as u32;
        let mut fields = Vec::new();
        for f in &toks[2..] {
            let (name, pos) = f.split_once('@').ok_or_else(|| err(format!("bad field `{f}`")))?;
            let (hi, lo) = match pos.split_once(':') {
                Some((h, l)) => (h.parse::<u32>(), l.parse::<u32>()),
                None => (pos.parse::<u32>(), pos.parse::<u32>()),
            };
            let (hi, lo) = match (hi, lo) {
                (Ok(h), Ok(l)) if h >= l && h < width => (h, l),
                _ => return Err(err(format!("field position `{pos}` outside instruction width"))),
            };
            fields.push((name.to_string(), hi, lo));
        }
        out.push(InstructionEncoding { mnemonic: toks[0].to_string(), pattern, fields });
    }
    for i in 0..out.len() {
        for j in i + 1..out.len() {
            let (ci, vi) = out[i].fixed();
            let (cj, vj) = out[j].fixed();
            if out[i].width() == out[j].width() && (vi ^ vj) & ci & cj == 0 {
                return Err(EncodingError::Overlap(out[i].mnemonic.clone(), out[j].mnemonic.clone()));
            }
        }
    }
    Ok(out)
}
