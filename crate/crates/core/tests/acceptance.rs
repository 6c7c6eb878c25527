// SPDX-License-Identifier: Apache-2.0
//! Acceptance harness: one PASS/FAIL line per criterion.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{cell_cases, check_cell, cycles_in, latency, CellStats, Pipeline};
use upathlab::decisions::extract_decisions;
use upathlab::ift::{instrument, IftMode};
use upathlab::leakage::{LeakageSignature, TransmitterType};
use upathlab::oracle::{attribute_violation, check_sc_safe, covered, single_high_policies, Attribution, Observer};
use upathlab::sim::{run_program_with, Program};
use upathlab::upath::{PlSet, Folded};

const DESIGNS: [&str; 4] = ["zskip-mul", "op-pack", "st2ld", "mini-cache"];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn set(p: &Pipeline, names: &[&str]) -> PlSet {
    names.iter().map(|n| p.pl(n)).collect()
}

fn inputs_of(s: &LeakageSignature) -> BTreeSet<(String, TransmitterType, String)> {
    s.inputs.iter().map(|i| (i.transmitter.clone(), i.ttype, i.operand.clone())).collect()
}

fn input(t: &str, ty: TransmitterType, op: &str) -> (String, TransmitterType, String) {
    (t.to_string(), ty, op.to_string())
}

fn find<'a>(sigs: &'a [LeakageSignature], p: &str, src: &str) -> Option<&'a LeakageSignature> {
    sigs.iter().find(|s| s.transponder == p && s.src.name == src)
}

fn within(t: Duration, limit_s: u64) -> bool {
    t <= Duration::from_secs(limit_s)
}

fn c1(p: &mut Pipeline, t0: Instant) -> Verdict {
    let mul = &p.reports["MUL"];
    let n = mul.upaths.len();
    let mul_u = p.pl("mulU");
    let counts: BTreeSet<usize> = mul.upaths.iter().flat_map(|u| cycles_in(u, &mul_u)).collect();
    let sigs = &p.signatures().0.signatures;
    let got = find(sigs, "MUL", "scbIss").map(inputs_of);
    let want: BTreeSet<_> = [input("MUL", TransmitterType::N, "rs1"), input("MUL", TransmitterType::N, "rs2")].into();
    let dt = t0.elapsed();
    let ok = n == 2 && counts == BTreeSet::from([1, 4]) && got.as_ref() == Some(&want) && within(dt, 120);
    verdict(ok, format!("MUL upaths={n} mulU cycles={counts:?} MUL_scbIss inputs={got:?} time={dt:.1?}"))
}

fn c2(p: &mut Pipeline, t0: Instant) -> Verdict {
    let add = &p.reports["ADD"];
    let table = extract_decisions(&add.upaths);
    let got: BTreeSet<(String, PlSet)> = table.decisions.iter().map(|d| (d.src.name.clone(), d.dst.clone())).collect();
    let want: BTreeSet<(String, PlSet)> = [("ID".to_string(), set(p, &["issue", "scbIss"])), ("ID".to_string(), set(p, &["ID"]))].into();
    let (if_, cmt) = (p.pl("IF"), p.pl("scbCmt"));
    let spans = add.upaths.iter().all(|u| u.steps.first().is_some_and(|s| s.pls.contains(&if_)) && u.steps.last().is_some_and(|s| s.pls.contains(&cmt)));
    let mut lat: Vec<BTreeSet<usize>> = add.upaths.iter().map(latency).collect();
    lat.sort();
    let dt = t0.elapsed();
    let ok = got == want && spans && lat == vec![BTreeSet::from([4]), BTreeSet::from([5])] && within(dt, 120);
    let names: Vec<String> = got.iter().map(|(s, d)| format!("({s},{{{}}})", d.iter().map(|x| x.name.as_str()).collect::<Vec<_>>().join(","))).collect();
    verdict(ok, format!("ADD decisions={} fetch-to-commit latencies={lat:?} time={dt:.1?}", names.join(" ")))
}

fn c3(p: &mut Pipeline, t0: Instant) -> Verdict {
    let range_want: BTreeSet<PlSet> = [set(p, &["ldFin"]), set(p, &["LSQ", "ldStall"])].into();
    let sigs = p.signatures().0.signatures.clone();
    let ld = find(&sigs, "LD", "issue");
    let want: BTreeSet<_> = [input("LD", TransmitterType::N, "addr"), input("ST", TransmitterType::DO, "addr")].into();
    let ld_ok = ld.is_some_and(|s| inputs_of(s) == want && s.range == range_want);
    let st = find(&sigs, "ST", "comSTB");
    let st_ok = st.is_some_and(|s| s.has_input("LD", TransmitterType::DY, "addr"));
    let dt = t0.elapsed();
    verdict(
        ld_ok && st_ok && within(dt, 300),
        format!("{} | {} time={dt:.1?}", ld.map(|s| s.to_string()).unwrap_or("LD_issue missing".into()), st.map(|s| s.to_string()).unwrap_or("ST_comSTB missing".into())),
    )
}

fn c4(p: &mut Pipeline, t0: Instant) -> Verdict {
    let (rep, _) = p.signatures();
    let st = find(&rep.signatures, "ST", "wRTag").cloned();
    let has_ld_s = st.as_ref().is_some_and(|s| s.has_input("LD", TransmitterType::S, "addr"));
    let st_s: Vec<String> = rep.tags.iter().filter(|t| t.transmitter == "ST" && t.ttype == TransmitterType::S).map(|t| format!("{}_{}", t.decision.instruction, t.decision.src.name)).collect();
    let dt = t0.elapsed();
    verdict(
        has_ld_s && st_s.is_empty() && within(dt, 600),
        format!("{} ST^S tags={st_s:?} time={dt:.1?}", st.map(|s| s.to_string()).unwrap_or("ST_wRTag missing".into())),
    )
}

fn c5(ps: &mut [Pipeline]) -> Verdict {
    let mut total = Duration::ZERO;
    let mut misses = Vec::new();
    let mut parts = Vec::new();
    let mut failed = 0usize;
    let mut unconfirmed = 0usize;
    for p in ps.iter_mut() {
        let (rep, sig_time) = p.signatures();
        let sigs = rep.signatures.clone();
        total += *sig_time;
        let t = Instant::now();
        let programs = p.env.programs();
        let policies = single_high_policies(&p.nl, &p.env);
        let vs = check_sc_safe(&p.nl, &p.table, Observer::Upath, &programs, &policies, &p.env, 50_000_000).expect("oracle run");
        let mut direct = 0;
        let mut confirmed = BTreeSet::new();
        for v in &vs {
            match attribute_violation(&p.nl, &p.table, &p.isa, v) {
                Ok(a) => {
                    if matches!(a, Attribution::Direct(_)) {
                        direct += 1;
                    }
                    let d = a.decision();
                    confirmed.insert((d.transponder.clone(), d.src.clone()));
                    if !covered(&a, &sigs) {
                        misses.push(format!("{}: {}@{}", p.design.name, d.transponder, d.src.name));
                    }
                }
                Err(e) => {
                    failed += 1;
                    misses.push(format!("{}: {e}", p.design.name));
                }
            }
        }
        unconfirmed += sigs.iter().filter(|s| !confirmed.contains(&(s.transponder.clone(), s.src.clone()))).count();
        total += t.elapsed();
        parts.push(format!("{} {} violations ({} direct)", p.design.name, vs.len(), direct));
    }
    misses.sort();
    misses.dedup();
    verdict(
        misses.is_empty() && failed == 0 && within(total, 1800),
        format!("{}; misses={misses:?} unattributed={failed} oracle-unconfirmed signatures={unconfirmed} time={total:.1?}", parts.join(", ")),
    )
}

/// Criteria 6 and 9 share the exhaustive simulation.
fn c6_c9(ps: &[Pipeline]) -> (Verdict, Verdict) {
    let mut diff = 0usize;
    let mut skipped = Vec::new();
    let mut pruned = 0usize;
    let mut checked = 0usize;
    for p in ps {
        let sim = p.simulated_paths();
        for (m, r) in &p.reports {
            let observed = sim.get(m).cloned().unwrap_or_default();
            let supports: BTreeSet<u64> = observed.iter().map(|f: &Folded| f.iter().fold(0, |a, s| a | s.0)).collect();
            let cands: BTreeSet<u64> = r.candidates.iter().map(|c| p.table.mask(c)).collect();
            pruned += supports.iter().filter(|s| !cands.contains(s)).count();
            if !r.saturated {
                skipped.push(format!("{}:{m}", p.design.name));
                continue;
            }
            checked += 1;
            let synth: BTreeSet<Folded> = r.upaths.iter().map(|u| p.folded(u)).collect();
            diff += synth.symmetric_difference(&observed).count();
        }
    }
    (
        verdict(diff == 0, format!("{checked} (design, instruction) pairs compared, symmetric difference={diff}, unsaturated={skipped:?}")),
        verdict(pruned == 0, format!("oracle-observed PL sets missing from candidates={pruned}")),
    )
}

fn c7() -> Verdict {
    let mut worst = Vec::new();
    let mut tot = CellStats::default();
    let mut cells = 0;
    for upper in [false, true] {
        for w in 1..=4 {
            for case in cell_cases(w) {
                let s = check_cell(&case, upper);
                cells += 1;
                if s.under > 0 {
                    worst.push(format!("{}{}", case.label, if upper { "(upper)" } else { "" }));
                }
                tot.under += s.under;
                tot.over += s.over;
                tot.tainted += s.tainted;
                tot.cases += s.cases;
            }
        }
    }
    let rate = if tot.tainted == 0 { 0.0 } else { tot.over as f64 / tot.tainted as f64 };
    verdict(
        tot.under == 0,
        format!("{cells} cell configurations, {} (valuation, taint) cases, under-taint={} {worst:?}, over-taint rate={:.3}", tot.cases, tot.under, rate),
    )
}

fn c8(ps: &[Pipeline]) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let per_design = 10_000 / ps.len();
    let episode = 40;
    let mut cycles = 0usize;
    let mut law_breaks = 0usize;
    let mut mismatches = 0usize;
    let (mut upper_states, mut lower_states) = (0usize, 0usize);
    for p in ps {
        let one = instrument(&p.nl, IftMode::OneBit).unwrap();
        let two = instrument(&p.nl, IftMode::TwoBit).unwrap();
        let (rp, mp) = two.plane_pairs();
        // one-bit taint element -> same-named lower element of the two-bit design
        let reg_map: Vec<(usize, usize)> = one.netlist.registers.iter().enumerate().filter(|(_, r)| r.name.starts_with("taint.")).map(|(i, r)| (i, two.netlist.reg(&r.name).unwrap())).collect();
        let mem_map: Vec<(usize, usize)> = one.netlist.memories.iter().enumerate().filter(|(_, m)| m.name.starts_with("taint.")).map(|(i, m)| (i, two.netlist.mem(&m.name).unwrap())).collect();
        let ctl = |nl: &upathlab::netlist::Netlist, prefix: &str| -> Vec<usize> { nl.inputs.iter().enumerate().filter(|(_, i)| i.0.starts_with(prefix)).map(|(k, _)| k).collect() };
        let (lo1, lo2, hi2) = (ctl(&one.netlist, "taint.intro."), ctl(&two.netlist, "taint.intro."), ctl(&two.netlist, "taint.introu."));
        let (b1, b2) = (one.netlist.input("taint.block").unwrap(), two.netlist.input("taint.block").unwrap());
        let mut done = 0;
        while done < per_design {
            let len = rng.gen_range(1..=p.env.max_len);
            let prog = Program { words: (0..len).map(|_| p.env.alphabet[rng.gen_range(0..p.env.alphabet.len())]).collect() };
            let arch: Vec<u64> = p.env.arch_regs.iter().map(|_| p.env.operand_domain[rng.gen_range(0..p.env.operand_domain.len())]).collect();
            let base = p.env.initial_state(&p.nl, &arch);
            // control schedule shared by both zero-upper runs
            let sched: Vec<(Vec<u64>, u64, Vec<u64>)> = (0..episode)
                .map(|_| (lo1.iter().map(|_| rng.gen_bool(0.15) as u64).collect(), rng.gen_bool(0.1) as u64, hi2.iter().map(|_| rng.gen_bool(0.15) as u64).collect()))
                .collect();
            // law run: random upper and lower introduction
            let tr = run_program_with(&two.netlist, &prog, &two.lift(&base), episode, |k, _, ins| {
                for (j, &i) in lo2.iter().enumerate() {
                    ins[i] = sched[k].0[j];
                }
                for (j, &i) in hi2.iter().enumerate() {
                    ins[i] = sched[k].2[j];
                }
                ins[b2] = sched[k].1;
            })
            .unwrap();
            for s in &tr.states {
                upper_states += rp.iter().any(|&(_, h)| s.regs[h] != 0) as usize;
                lower_states += rp.iter().any(|&(l, _)| s.regs[l] != 0) as usize;
                law_breaks += rp.iter().filter(|&&(l, h)| s.regs[l] & s.regs[h] != 0).count();
                law_breaks += mp.iter().map(|&(l, h)| s.mems[l].iter().zip(&s.mems[h]).filter(|(a, b)| *a & *b != 0).count()).sum::<usize>();
            }
            // equivalence run: no upper introduction
            let t2 = run_program_with(&two.netlist, &prog, &two.lift(&base), episode, |k, _, ins| {
                for (j, &i) in lo2.iter().enumerate() {
                    ins[i] = sched[k].0[j];
                }
                ins[b2] = sched[k].1;
            })
            .unwrap();
            let t1 = run_program_with(&one.netlist, &prog, &one.lift(&base), episode, |k, _, ins| {
                for (j, &i) in lo1.iter().enumerate() {
                    ins[i] = sched[k].0[j];
                }
                ins[b1] = sched[k].1;
            })
            .unwrap();
            for (a, b) in t1.states.iter().zip(&t2.states) {
                let r = reg_map.iter().any(|&(i, j)| a.regs[i] != b.regs[j]);
                let m = mem_map.iter().any(|&(i, j)| a.mems[i] != b.mems[j]);
                let base_eq = one.project(a) == two.project(b);
                mismatches += (r || m || !base_eq) as usize;
            }
            done += episode;
            cycles += episode;
        }
    }
    verdict(law_breaks == 0 && mismatches == 0, format!("{cycles} cycles ({upper_states} states with upper taint, {lower_states} with lower), clearing-law violations={law_breaks}, one-bit vs zero-upper mismatched states={mismatches}"))
}

fn c10(ps: &[Pipeline]) -> Verdict {
    let mut bad = Vec::new();
    let mut pairs = 0;
    for p in ps {
        for (m, r) in &p.reports {
            let rel = &r.relations;
            let iuv = &r.iuv_pls;
            pairs += 1;
            for a in iuv {
                if !rel.dominates(a, a) {
                    bad.push(format!("{}:{m} dominates({a},{a}) missing", p.design.name));
                }
                if rel.exclusive(a, a) {
                    bad.push(format!("{}:{m} exclusive({a},{a})", p.design.name));
                }
                for b in iuv {
                    if rel.exclusive(a, b) != rel.exclusive(b, a) {
                        bad.push(format!("{}:{m} exclusive({a},{b}) asymmetric", p.design.name));
                    }
                    for c in iuv {
                        if rel.dominates(a, b) && rel.dominates(b, c) && !rel.dominates(a, c) {
                            bad.push(format!("{}:{m} dominates not transitive over {a},{b},{c}", p.design.name));
                        }
                    }
                }
            }
        }
    }
    verdict(bad.is_empty(), format!("{pairs} (design, instruction) pairs, violations={bad:?}"))
}

fn main() -> ExitCode {
    let mut results: BTreeMap<u32, (&str, Verdict, Duration)> = BTreeMap::new();
    let mut ps: Vec<Pipeline> = Vec::new();
    let checks: [(u32, &str, fn(&mut Pipeline, Instant) -> Verdict); 4] = [
        (1, "zskip-mul μpaths and signature", c1),
        (2, "op-pack decisions and latencies", c2),
        (3, "st2ld signatures", c3),
        (4, "mini-cache static transmitter", c4),
    ];
    for (i, (id, name, f)) in checks.into_iter().enumerate() {
        let t0 = Instant::now();
        let mut p = Pipeline::new(DESIGNS[i]);
        let v = f(&mut p, t0);
        results.insert(id, (name, v, t0.elapsed()));
        ps.push(p);
    }
    let t = Instant::now();
    let v = c5(&mut ps);
    results.insert(5, ("oracle completeness", v, t.elapsed()));
    let t = Instant::now();
    let (v6, v9) = c6_c9(&ps);
    let e = t.elapsed();
    results.insert(6, ("μpath oracle equivalence", v6, e));
    results.insert(9, ("pruning soundness", v9, e));
    let t = Instant::now();
    results.insert(7, ("IFT cell soundness", c7(), t.elapsed()));
    let t = Instant::now();
    results.insert(8, ("two-bit plane laws", c8(&ps), t.elapsed()));
    let t = Instant::now();
    results.insert(10, ("relation algebra", c10(&ps), t.elapsed()));
    let mut all = true;
    for (id, (name, v, dt)) in &results {
        all &= v.pass;
        println!("{} [{id}] {name}: {} ({dt:.1?})", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
