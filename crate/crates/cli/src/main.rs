// SPDX-License-Identifier: Apache-2.0
//! `upathlab`: μpath synthesis, leakage signatures, contract views and the
//! two-trace safety check from the command line.
//!
//! Exit status: 0 on success, 1 on usage, parse or module errors, 2 when a
//! check completes with a failing verdict.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use upathlab::decisions::{extract_decisions, DecisionTable};
use upathlab::designs::{self, variants};
use upathlab::engine::{EnvFingerprint, PropertyEnv, UndeterminedPolicy};
use upathlab::export::{self, from_json, to_json, Artifact};
use upathlab::ift::{instrument, IftMode};
use upathlab::leakage::{derive_contracts, synth_signatures_with, Case, ContractView, LeakageSignature, SignatureReport};
use upathlab::netlist::{parse_encodings, parse_netlist, InstructionEncoding, Netlist};
use upathlab::oracle::{attribute_violation, check_sc_safe, covered, replay, single_high_policies, Attribution, Observer, Violation};
use upathlab::sim::{dump_trace, parse_dump, Trace};
use upathlab::upath::{enumerate_duv_pls, synth_with_table, DuvPls, MuPath, PerformingLocation, PlTable, SynthOptions, UpathReport};

#[derive(Parser)]
#[command(name = "upathlab", version, about = "μpath and leakage-signature synthesis for small synchronous netlists")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize μpaths and decisions per instruction.
    SynthUpaths(Common),
    /// Synthesize leakage signatures for the chosen transponders.
    SynthSignatures(Common),
    /// Project synthesized signatures onto the contract table.
    DeriveContract(Common),
    /// Run the two-trace non-interference oracle.
    CheckSafety(SafetyArgs),
    /// Render an artifact as DOT or text; a trace dump needs --design.
    Render(RenderArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum IftChoice {
    OneBit,
    TwoBit,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum UndetChoice {
    Reachable,
    Unreachable,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObserverChoice {
    Commit,
    Upath,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Dot,
    Text,
}

#[derive(Args)]
struct Common {
    /// Bundled design name or path to a design file.
    #[arg(long)]
    design: String,
    /// Instruction encoding file; defaults to the bundled toy ISA.
    #[arg(long)]
    isa: Option<PathBuf>,
    /// Comma-separated mnemonics; defaults to every supported instruction.
    #[arg(long, value_delimiter = ',')]
    instr: Vec<String>,
    /// Comma-separated operand values.
    #[arg(long, value_delimiter = ',')]
    operand_domain: Option<Vec<u64>>,
    /// Cycle bound on explored traces.
    #[arg(long)]
    bound: Option<usize>,
    /// Maximum explored nodes per exploration.
    #[arg(long)]
    budget: Option<usize>,
    /// Worker threads.
    #[arg(long, env = "UPATHLAB_JOBS")]
    jobs: Option<usize>,
    #[arg(long, value_enum)]
    undetermined_as: Option<UndetChoice>,
    /// Transmitter cases to run: one-bit (1, 2a, 2b), two-bit (3) or both.
    #[arg(long, value_enum, default_value = "both")]
    ift_mode: IftChoice,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SafetyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "upath")]
    observer: ObserverChoice,
    /// Also synthesize signatures and fail unless every violation is covered.
    #[arg(long)]
    cross_check: bool,
    /// Limit on simulated runs.
    #[arg(long, default_value_t = 10_000_000)]
    max_runs: usize,
}

#[derive(Args)]
struct RenderArgs {
    /// A JSON artifact written by another subcommand, or a trace dump.
    #[arg(long)]
    from: PathBuf,
    /// Design of a trace dump (bundled name or path).
    #[arg(long)]
    design: Option<String>,
    #[arg(long, value_enum, default_value = "dot")]
    format: Format,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Loaded {
    nl: Netlist,
    text: String,
    isa: Vec<InstructionEncoding>,
    supported: Vec<InstructionEncoding>,
    env: PropertyEnv,
}

fn load(c: &Common) -> Result<Loaded> {
    let text = match designs::design(&c.design) {
        Some(d) => d.text.to_string(),
        None => fs::read_to_string(&c.design).with_context(|| format!("netlist: cannot read design {}", c.design))?,
    };
    let nl = parse_netlist(&text).context("netlist")?;
    let isa = match &c.isa {
        Some(p) => parse_encodings(&fs::read_to_string(p).with_context(|| format!("netlist: cannot read ISA {}", p.display()))?).context("netlist")?,
        None => designs::toy_isa(),
    };
    let hdr = designs::header(&text);
    let supports: Option<Vec<String>> = hdr.get("supports").and_then(|v| v.first().cloned());
    let supported: Vec<InstructionEncoding> = isa.iter().filter(|e| supports.as_ref().map_or(true, |s| s.contains(&e.mnemonic))).cloned().collect();
    let mut env = PropertyEnv {
        alphabet: supported.iter().flat_map(variants).collect(),
        operand_domain: vec![0, 1, 2, 255],
        arch_regs: vec![1, 2],
        max_len: 3,
        bound: 64,
        budget: 4_000_000,
        undetermined_as: UndeterminedPolicy::Unreachable,
    };
    if let Some(d) = &c.operand_domain {
        env.operand_domain = d.clone();
    }
    if let Some(b) = c.bound {
        env.bound = b;
    }
    if let Some(b) = c.budget {
        env.budget = b;
    }
    if let Some(u) = c.undetermined_as {
        env.undetermined_as = match u {
            UndetChoice::Reachable => UndeterminedPolicy::Reachable,
            UndetChoice::Unreachable => UndeterminedPolicy::Unreachable,
        };
    }
    env.validate(&nl).context("engine")?;
    Ok(Loaded { nl, text, isa, supported, env })
}

impl Loaded {
    fn fingerprint(&self) -> EnvFingerprint {
        self.env.fingerprint(&self.text)
    }

    /// Instructions named by `--instr`, or every supported one.
    fn chosen(&self, names: &[String]) -> Result<Vec<&InstructionEncoding>> {
        if names.is_empty() {
            return Ok(self.supported.iter().collect());
        }
        names
            .iter()
            .map(|n| {
                if !self.isa.iter().any(|e| &e.mnemonic == n) {
                    bail!("netlist: unknown instruction {n}");
                }
                self.supported.iter().find(|e| &e.mnemonic == n).ok_or_else(|| anyhow!("designs: {n} not supported by this design"))
            })
            .collect()
    }

    fn duv(&self) -> Result<(DuvPls, PlTable)> {
        let duv = enumerate_duv_pls(&self.nl, &self.env).context("upathsynth")?;
        let table = PlTable::new(&self.nl, &duv.pls).context("upathsynth")?;
        Ok((duv, table))
    }

    fn upaths(&self, duv: &DuvPls, table: &PlTable, instrs: &[&InstructionEncoding], counts: bool) -> Result<Vec<UpathReport>> {
        instrs
            .iter()
            .map(|e| synth_with_table(&self.nl, table, duv, e, &self.env, SynthOptions { cycle_counts: counts }).with_context(|| format!("upathsynth: {}", e.mnemonic)))
            .collect()
    }

    fn signatures(&self, c: &Common, duv: &DuvPls, table: &PlTable) -> Result<(SignatureReport, BTreeMap<String, Vec<MuPath>>)> {
        let all: Vec<&InstructionEncoding> = self.supported.iter().collect();
        let reports = self.upaths(duv, table, &all, false)?;
        let ups: BTreeMap<String, Vec<MuPath>> = reports.into_iter().map(|r| (r.instruction, r.upaths)).collect();
        let one = instrument(&self.nl, IftMode::OneBit).context("ift")?;
        let two = instrument(&self.nl, IftMode::TwoBit).context("ift")?;
        let cases: Vec<Case> = Case::ALL
            .into_iter()
            .filter(|k| match c.ift_mode {
                IftChoice::OneBit => k.mode() == IftMode::OneBit,
                IftChoice::TwoBit => k.mode() == IftMode::TwoBit,
                IftChoice::Both => true,
            })
            .collect();
        let transponders = self.chosen(&c.instr)?;
        let rep = synth_signatures_with(&one, &two, &duv.pls, &transponders, &all, &ups, &self.env, &cases).context("leakage")?;
        Ok((rep, ups))
    }
}

fn write(dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let p = dir.join(name);
    fs::write(&p, body).with_context(|| format!("cannot write {}", p.display()))?;
    Ok(p)
}

fn setup_jobs(jobs: Option<usize>) -> Result<()> {
    if let Some(n) = jobs {
        if n == 0 {
            bail!("--jobs must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("thread pool")?;
    }
    Ok(())
}

fn synth_upaths(c: &Common) -> Result<u8> {
    setup_jobs(c.jobs)?;
    let l = load(c)?;
    let fp = l.fingerprint();
    let instrs = l.chosen(&c.instr)?;
    let (duv, table) = l.duv()?;
    for r in l.upaths(&duv, &table, &instrs, true)? {
        let decisions = extract_decisions(&r.upaths);
        println!("{}: {} upaths{}", r.instruction, r.upaths.len(), if r.saturated { "" } else { " (not saturated)" });
        for p in &r.upaths {
            println!("  {}", export::upath_text(p));
        }
        write(&c.out, &format!("upaths-{}.json", r.instruction), &to_json(&r, Some(&fp)))?;
        write(&c.out, &format!("decisions-{}.json", r.instruction), &to_json(&decisions, Some(&fp)))?;
    }
    Ok(0)
}

fn synth_signatures_cmd(c: &Common) -> Result<u8> {
    setup_jobs(c.jobs)?;
    let l = load(c)?;
    let (duv, table) = l.duv()?;
    let (rep, _) = l.signatures(c, &duv, &table)?;
    for s in &rep.signatures {
        println!("{s}");
    }
    write(&c.out, "signatures.json", &to_json(&rep, Some(&l.fingerprint())))?;
    Ok(0)
}

fn derive_contract(c: &Common) -> Result<u8> {
    setup_jobs(c.jobs)?;
    let l = load(c)?;
    let (duv, table) = l.duv()?;
    let (rep, ups) = l.signatures(c, &duv, &table)?;
    let views = derive_contracts(&rep.signatures, &ups);
    print!("{}", export::contracts_text(&views));
    write(&c.out, "contracts.json", &to_json(&views, Some(&l.fingerprint())))?;
    Ok(0)
}

fn check_safety(a: &SafetyArgs) -> Result<u8> {
    let c = &a.common;
    setup_jobs(c.jobs)?;
    let l = load(c)?;
    let (duv, table) = l.duv()?;
    let observer = match a.observer {
        ObserverChoice::Commit => Observer::Commit,
        ObserverChoice::Upath => Observer::Upath,
    };
    let programs = l.env.programs();
    let policies = single_high_policies(&l.nl, &l.env);
    let vs = check_sc_safe(&l.nl, &table, observer, &programs, &policies, &l.env, a.max_runs).context("oracle")?;
    let mut atts: Vec<Attribution> = Vec::new();
    let mut failed = 0usize;
    for v in &vs {
        match attribute_violation(&l.nl, &table, &l.isa, v) {
            Ok(att) => atts.push(att),
            Err(e) => {
                failed += 1;
                eprintln!("{e}");
            }
        }
    }
    println!("{} programs, {} policies, {} violations, {} unattributed", programs.len(), policies.len(), vs.len(), failed);
    let fp = l.fingerprint();
    write(&c.out, "violations.json", &to_json(&vs, Some(&fp)))?;
    write(&c.out, "attributions.json", &to_json(&atts, Some(&fp)))?;
    if let Some(v) = vs.first() {
        let (a0, a1) = replay(&l.nl, v, v.cycle + 1).context("oracle")?;
        for (name, states) in [("witness.trace", a0), ("witness-alt.trace", a1)] {
            let tr = Trace { initial: states[0].clone(), inputs: Vec::new(), states };
            write(&c.out, name, &dump_trace(&l.nl, &tr))?;
        }
    }
    let mut verdict = if failed > 0 { 2 } else { 0 };
    if a.cross_check {
        let (rep, _) = l.signatures(c, &duv, &table)?;
        let mut missing: BTreeMap<(String, String), usize> = BTreeMap::new();
        for att in atts.iter().filter(|t| !covered(t, &rep.signatures)) {
            let d = att.decision();
            *missing.entry((d.transponder.clone(), d.src.name.clone())).or_default() += 1;
        }
        for ((p, src), n) in &missing {
            println!("uncovered: {p} at {src} ({n} violations)");
        }
        println!("cross-check: {}", if missing.is_empty() { "every violation covered" } else { "uncovered violations" });
        if !missing.is_empty() {
            verdict = 2;
        }
    }
    Ok(verdict)
}

fn render(a: &RenderArgs) -> Result<u8> {
    let text = fs::read_to_string(&a.from).with_context(|| format!("cannot read {}", a.from.display()))?;
    let body = match serde_json::from_str::<serde_json::Value>(&text) {
        Ok(v) => render_artifact(a.format, v.get("schema").and_then(|s| s.as_str()).unwrap_or(""), &text)?,
        Err(_) if text.starts_with('@') => render_dump(a, &text)?,
        Err(e) => bail!("export: schema mismatch: {e}"),
    };
    match &a.out {
        Some(p) => fs::write(p, body).with_context(|| format!("cannot write {}", p.display()))?,
        // a closed pipe (`| head`) is not an error
        None => {
            let _ = std::io::Write::write_all(&mut std::io::stdout(), body.as_bytes());
        }
    }
    Ok(0)
}

fn render_artifact(format: Format, schema: &str, text: &str) -> Result<String> {
    fn load<T: Artifact>(text: &str) -> Result<T> {
        Ok(from_json::<T>(text)?.0)
    }
    let paths = match schema {
        s if s == UpathReport::SCHEMA => load::<UpathReport>(text)?.upaths,
        s if s == <Vec<MuPath>>::SCHEMA => load(text)?,
        s if s == MuPath::SCHEMA => vec![load(text)?],
        _ => {
            if let Format::Dot = format {
                bail!("export: DOT rendering needs μpaths, found {schema:?}");
            }
            return Ok(match schema {
                s if s == DecisionTable::SCHEMA => export::decisions_text(&load(text)?),
                s if s == SignatureReport::SCHEMA => lines(&load::<SignatureReport>(text)?.signatures),
                s if s == <Vec<LeakageSignature>>::SCHEMA => lines(&load::<Vec<LeakageSignature>>(text)?),
                s if s == <Vec<ContractView>>::SCHEMA => export::contracts_text(&load::<Vec<ContractView>>(text)?),
                s if s == <Vec<Violation>>::SCHEMA => json_lines(&load::<Vec<Violation>>(text)?),
                s if s == <Vec<Attribution>>::SCHEMA => json_lines(&load::<Vec<Attribution>>(text)?),
                _ => bail!("export: schema mismatch: unknown schema {schema:?}"),
            });
        }
    };
    Ok(match format {
        Format::Dot => export::to_dot(&paths, Some(&extract_decisions(&paths))),
        Format::Text => paths.iter().map(|p| export::upath_text(p) + "\n").collect(),
    })
}

fn lines<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|i| format!("{i}\n")).collect()
}

fn json_lines<T: serde::Serialize>(items: &[T]) -> String {
    items.iter().map(|i| serde_json::to_string(i).expect("artifacts serialize") + "\n").collect()
}

/// One line per cycle: each occupied PL with the PC holding it.
fn render_dump(a: &RenderArgs, text: &str) -> Result<String> {
    let Some(design) = &a.design else { bail!("render: a trace dump needs --design") };
    if let Format::Dot = a.format {
        bail!("render: trace dumps render as text only");
    }
    let src = match designs::design(design) {
        Some(d) => d.text.to_string(),
        None => fs::read_to_string(design).with_context(|| format!("netlist: cannot read design {design}"))?,
    };
    let nl = parse_netlist(&src).context("netlist")?;
    let states = parse_dump(&nl, text).ok_or_else(|| anyhow!("sim: malformed trace dump"))?;
    let mut out = String::new();
    for (k, st) in states.iter().enumerate() {
        let mut occ = Vec::new();
        for f in &nl.annotations.mufsms {
            let pc = st.reg(&nl, &f.pcr).unwrap_or(0);
            let vars: Vec<u64> = f.vars.iter().map(|v| st.reg(&nl, v).unwrap_or(0)).collect();
            if pc != 0 && !f.idle_states.contains(&vars) {
                occ.push(format!("{}:{}", PerformingLocation::new(&nl, &f.id, vars).name, pc));
            }
        }
        out += &format!("@{k} {}\n", occ.join(" "));
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let r = match &cli.cmd {
        Cmd::SynthUpaths(c) => synth_upaths(c),
        Cmd::SynthSignatures(c) => synth_signatures_cmd(c),
        Cmd::DeriveContract(c) => derive_contract(c),
        Cmd::CheckSafety(a) => check_safety(a),
        Cmd::Render(a) => render(a),
    };
    match r {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
