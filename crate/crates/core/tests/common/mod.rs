// SPDX-License-Identifier: Apache-2.0
//! Shared fixtures: per-design pipeline runs, exhaustive simulation, and the
//! flip-one-input influence oracle for single cells.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use upathlab::designs::{self, decode, Design};
use upathlab::engine::PropertyEnv;
use upathlab::ift::{instrument, IftMode};
use upathlab::leakage::{synth_signatures, SignatureReport};
use upathlab::netlist::{parse_netlist, InstructionEncoding, Netlist};
use upathlab::sim::{eval_nets, run_program, MachineState, Program};
use upathlab::upath::{enumerate_duv_pls, fold_steps, synth_with_table, trace_steps, DuvPls, Folded, MuPath, PerformingLocation, PlTable, SynthOptions, UpathReport};

pub struct Pipeline {
    pub design: &'static Design,
    pub nl: Netlist,
    pub env: PropertyEnv,
    pub isa: Vec<InstructionEncoding>,
    pub duv: DuvPls,
    pub table: PlTable,
    pub reports: BTreeMap<String, UpathReport>,
    pub upath_time: Duration,
    sigs: Option<(SignatureReport, Duration)>,
}

impl Pipeline {
    /// μpaths of every supported instruction, with revisit cycle counts.
    pub fn new(name: &str) -> Pipeline {
        let t = Instant::now();
        let design = designs::design(name).expect("bundled design");
        let nl = design.netlist().expect("design parses");
        let env = design.env();
        let isa = designs::toy_isa();
        let duv = enumerate_duv_pls(&nl, &env).expect("DUV locations");
        let table = PlTable::new(&nl, &duv.pls).expect("location table");
        let mut reports = BTreeMap::new();
        for m in design.supports() {
            let e = designs::encoding(&isa, &m).expect("supported mnemonic in ISA");
            let r = synth_with_table(&nl, &table, &duv, e, &env, SynthOptions { cycle_counts: true }).expect("μpath synthesis");
            reports.insert(m, r);
        }
        Pipeline { design, nl, env, isa, duv, table, reports, upath_time: t.elapsed(), sigs: None }
    }

    pub fn upaths(&self) -> BTreeMap<String, Vec<MuPath>> {
        self.reports.iter().map(|(k, r)| (k.clone(), r.upaths.clone())).collect()
    }

    pub fn pl(&self, name: &str) -> PerformingLocation {
        self.duv.pls.iter().find(|p| p.name == name).unwrap_or_else(|| panic!("no location {name}")).clone()
    }

    /// Signatures over every supported transponder and transmitter; cached.
    pub fn signatures(&mut self) -> &(SignatureReport, Duration) {
        if self.sigs.is_none() {
            let t = Instant::now();
            let one = instrument(&self.nl, IftMode::OneBit).expect("one-bit instrumentation");
            let two = instrument(&self.nl, IftMode::TwoBit).expect("two-bit instrumentation");
            let encs: Vec<&InstructionEncoding> = self.design.supports().iter().map(|m| designs::encoding(&self.isa, m).unwrap()).collect();
            let rep = synth_signatures(&one, &two, &self.duv.pls, &encs, &encs, &self.upaths(), &self.env).expect("signature synthesis");
            self.sigs = Some((rep, t.elapsed()));
        }
        self.sigs.as_ref().unwrap()
    }

    /// Signatures computed by [`Pipeline::signatures`]; panics before that.
    pub fn sig_report(&self) -> &SignatureReport {
        &self.sigs.as_ref().expect("signatures computed").0
    }

    /// Folded step sequences of every instance of each instruction over all
    /// programs and architectural states of the env, from plain simulation.
    /// Instances still in flight at the bound are skipped.
    pub fn simulated_paths(&self) -> BTreeMap<String, BTreeSet<Folded>> {
        let mut out: BTreeMap<String, BTreeSet<Folded>> = BTreeMap::new();
        for prog in self.env.programs() {
            for arch in self.env.arch_states() {
                let init = self.env.initial_state(&self.nl, &arch);
                let tr = run_program(&self.nl, &Program { words: prog.clone() }, &init, self.env.bound).expect("simulation");
                for (j, &w) in prog.iter().enumerate() {
                    let pc = j as u64 + 1;
                    let steps = trace_steps(&self.table, &tr.states, pc);
                    if steps.is_empty() {
                        continue;
                    }
                    let first = tr.states.iter().position(|s| self.table.step(s, pc) != 0).unwrap();
                    if first + steps.len() >= tr.states.len() {
                        continue;
                    }
                    let m = decode(&self.isa, w).expect("program words decode").mnemonic.clone();
                    out.entry(m).or_default().insert(fold_steps(&steps));
                }
            }
        }
        out
    }

    pub fn folded(&self, p: &MuPath) -> Folded {
        p.steps.iter().map(|s| (self.table.mask(&s.pls), s.repeated)).collect()
    }
}

/// Cycles `pl` is occupied along a μpath: one per plain step, the recorded
/// run lengths for repeated steps.
pub fn cycles_in(p: &MuPath, pl: &PerformingLocation) -> BTreeSet<usize> {
    let mut sums = BTreeSet::from([0usize]);
    for s in p.steps.iter().filter(|s| s.pls.contains(pl)) {
        let add: BTreeSet<usize> = if s.repeated {
            p.counts.as_ref().and_then(|c| c.get(pl)).cloned().unwrap_or_default()
        } else {
            BTreeSet::from([1])
        };
        sums = sums.iter().flat_map(|a| add.iter().map(move |b| a + b)).collect();
    }
    sums
}

/// Cycle count from the first step through the last.
pub fn latency(p: &MuPath) -> BTreeSet<usize> {
    let mut sums = BTreeSet::from([0usize]);
    for s in &p.steps {
        let add: BTreeSet<usize> = if s.repeated {
            s.pls.iter().filter_map(|pl| p.counts.as_ref().and_then(|c| c.get(pl))).next().cloned().unwrap_or_default()
        } else {
            BTreeSet::from([1])
        };
        sums = sums.iter().flat_map(|a| add.iter().map(move |b| a + b)).collect();
    }
    sums
}

// ---------------------------------------------------------------------------
// Single-cell influence oracle

/// One cell under test: its operand widths and the design-language cell text
/// over operands `a`, `b`, `c`.
pub struct CellCase {
    pub label: String,
    pub widths: Vec<u32>,
    pub out_width: u32,
    pub body: String,
}

/// Every cell kind at operand width `w`.
pub fn cell_cases(w: u32) -> Vec<CellCase> {
    let mut v = Vec::new();
    let mut add = |label: String, widths: Vec<u32>, out_width: u32, body: String| v.push(CellCase { label, widths, out_width, body });
    add(format!("NOT/{w}"), vec![w], w, "NOT a".into());
    for k in ["AND", "OR", "XOR", "ADD", "SUB", "SHL", "SHR"] {
        add(format!("{k}/{w}"), vec![w, w], w, format!("{k} a b"));
    }
    add(format!("EQ/{w}"), vec![w, w], 1, "EQ a b".into());
    add(format!("MUX/{w}"), vec![1, w, w], w, "MUX a b c".into());
    add(format!("CONCAT/{w}"), vec![w, w], 2 * w, "CONCAT a b".into());
    add(format!("CONST/{w}"), vec![], w, format!("CONST {}", (1u64 << w) - 1));
    for hi in 0..w {
        for lo in 0..=hi {
            add(format!("SLICE/{w}[{hi}:{lo}]"), vec![w], hi - lo + 1, format!("SLICE a {hi} {lo}"));
        }
    }
    v
}

#[derive(Debug, Default, Clone, Copy)]
pub struct CellStats {
    /// (valuation, taint mask, output bit) triples the oracle marks influenced
    /// but the rules leave clean.
    pub under: u64,
    /// Triples the rules taint but the oracle does not.
    pub over: u64,
    pub tainted: u64,
    pub cases: u64,
}

/// Exhaustive check of one cell. For every input valuation `x` and taint
/// mask `T`, output bit `o` must be tainted whenever flipping some nonempty
/// subset of `T` flips `o` (which includes every single tainted bit).
/// `upper` checks the upper plane of the two-bit instrumentation instead of
/// the one-bit rules.
pub fn check_cell(case: &CellCase, upper: bool) -> CellStats {
    let names = ["a", "b", "c"];
    let mut text = String::new();
    for (i, w) in case.widths.iter().enumerate() {
        text += &format!("reg {n}:{w} reset 0 next {n}\n", n = names[i]);
    }
    text += &format!("cell o:{} = {}\nout y = o\n", case.out_width, case.body);
    let nl = parse_netlist(&text).unwrap_or_else(|e| panic!("{}: {e}", case.label));
    let mode = if upper { IftMode::TwoBit } else { IftMode::OneBit };
    let tn = instrument(&nl, mode).expect("instrumentation");
    let tnl = &tn.netlist;
    let pre = if upper { "taint.hi." } else { "taint." };
    let val_regs: Vec<usize> = (0..case.widths.len()).map(|i| tnl.reg(names[i]).unwrap()).collect();
    let taint_regs: Vec<usize> = (0..case.widths.len()).map(|i| tnl.reg(&format!("{pre}q.{}", names[i])).unwrap()).collect();
    let out_taint = tnl.net(&format!("{pre}o")).expect("output taint net");
    let base_out = nl.net("o").unwrap();
    let n: u32 = case.widths.iter().sum();
    let split = |x: u64| -> Vec<u64> {
        let mut off = 0;
        case.widths
            .iter()
            .map(|&w| {
                let v = (x >> off) & ((1 << w) - 1);
                off += w;
                v
            })
            .collect()
    };
    // base function table
    let mut f = vec![0u64; 1 << n];
    let mut bs = MachineState::reset(&nl);
    let bins = vec![0u64; nl.inputs.len()];
    for x in 0..(1u64 << n) {
        for (i, v) in split(x).into_iter().enumerate() {
            bs.regs[i] = v;
        }
        f[x as usize] = eval_nets(&nl, &bs, &bins)[base_out];
    }
    let mut st = CellStats::default();
    let mut ts = tn.lift(&MachineState::reset(&nl));
    let tins = vec![0u64; tnl.inputs.len()];
    let full = 1usize << n;
    let mut closure = vec![0u64; full];
    for x in 0..full {
        for s in 0..full {
            closure[s] = f[x] ^ f[x ^ s];
        }
        for i in 0..n {
            for s in 0..full {
                if s >> i & 1 == 1 {
                    closure[s] |= closure[s ^ (1 << i)];
                }
            }
        }
        for (i, v) in split(x as u64).into_iter().enumerate() {
            ts.regs[val_regs[i]] = v;
        }
        for t in 0..full {
            for (i, v) in split(t as u64).into_iter().enumerate() {
                ts.regs[taint_regs[i]] = v;
            }
            let got = eval_nets(tnl, &ts, &tins)[out_taint];
            let want = closure[t];
            st.under += (want & !got).count_ones() as u64;
            st.over += (got & !want).count_ones() as u64;
            st.tainted += got.count_ones() as u64;
            st.cases += 1;
        }
    }
    st
}

// ---------------------------------------------------------------------------
// Random well-formed netlists

/// Design-language text for a random acyclic netlist: a few inputs and
/// registers, a memory with one read and one write port, and a layered
/// cell graph feeding every register's next state.
pub fn random_netlist_text(seed: u64) -> String {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::new();
    // (name, width) of every net so far
    let mut nets: Vec<(String, u32)> = Vec::new();
    for i in 0..rng.gen_range(1..3) {
        let w = rng.gen_range(1..5);
        text += &format!("in i{i}:{w}\n");
        nets.push((format!("i{i}"), w));
    }
    let nregs = rng.gen_range(1..5);
    let mut regs = Vec::new();
    for r in 0..nregs {
        let w = rng.gen_range(1..5);
        let reset = rng.gen_range(0..(1u64 << w));
        text += &format!("reg r{r}:{w} reset {reset}\n");
        nets.push((format!("r{r}"), w));
        regs.push((format!("r{r}"), w));
    }
    text += "mem m:2 depth 4\n";
    let a2 = nets.iter().position(|n| n.1 == 2);
    if let Some(a) = a2 {
        text += &format!("memrd md:2 = m[{}]\n", nets[a].0);
        nets.push(("md".into(), 2));
    }
    let ncells = rng.gen_range(1..14);
    for c in 0..ncells {
        let (src, w) = nets[rng.gen_range(0..nets.len())].clone();
        let same: Vec<String> = nets.iter().filter(|n| n.1 == w).map(|n| n.0.clone()).collect();
        let pick = |rng: &mut rand_chacha::ChaCha8Rng| same[rng.gen_range(0..same.len())].clone();
        let bits: Vec<String> = nets.iter().filter(|n| n.1 == 1).map(|n| n.0.clone()).collect();
        let name = format!("c{c}");
        let (body, ow) = match rng.gen_range(0..10) {
            0 => (format!("NOT {src}"), w),
            1..=3 => {
                let k = ["AND", "OR", "XOR", "ADD", "SUB", "SHL", "SHR"][rng.gen_range(0..7)];
                (format!("{k} {src} {}", pick(&mut rng)), w)
            }
            4 if !bits.is_empty() => (format!("MUX {} {src} {}", bits[rng.gen_range(0..bits.len())], pick(&mut rng)), w),
            5 => (format!("EQ {src} {}", pick(&mut rng)), 1),
            6 => {
                let hi = rng.gen_range(0..w);
                let lo = rng.gen_range(0..=hi);
                (format!("SLICE {src} {hi} {lo}"), hi - lo + 1)
            }
            7 if w < 4 => (format!("CONCAT {src} {}", pick(&mut rng)), 2 * w),
            8 => (format!("CONST {}", rng.gen_range(0..(1u64 << w))), w),
            _ => (format!("XOR {src} {src}"), w),
        };
        text += &format!("cell {name}:{ow} = {body}\n");
        nets.push((name, ow));
    }
    for (r, w) in &regs {
        let cands: Vec<&String> = nets.iter().filter(|n| n.1 == *w).map(|n| &n.0).collect();
        text += &format!("next {r} = {}\n", cands[rng.gen_range(0..cands.len())]);
    }
    if let (Some(a), Some(en)) = (a2, nets.iter().find(|n| n.1 == 1)) {
        let d = nets.iter().rev().find(|n| n.1 == 2).unwrap();
        text += &format!("memwr m[{}] = {} if {}\n", nets[a].0, d.0, en.0);
    }
    for (i, (n, _)) in nets.iter().enumerate().filter(|(i, _)| i % 3 == 0) {
        text += &format!("out o{i} = {n}\n");
    }
    text
}
