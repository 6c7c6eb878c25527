// SPDX-License-Identifier: Apache-2.0
mod common;

use proptest::prelude::*;
use upathlab::designs::{self, list_designs};
use upathlab::netlist::{parse_netlist, Netlist};
use upathlab::sim::{run_program, step, MachineState, Program};
use upathlab::upath::{enumerate_duv_pls, PlTable};

fn zskip() -> (Netlist, upathlab::engine::PropertyEnv) {
    let d = designs::design("zskip-mul").unwrap();
    (d.netlist().unwrap(), d.env())
}

fn word(m: &str, fields: &[(&str, u64)]) -> u64 {
    designs::encoding(&designs::toy_isa(), m).unwrap().encode(fields)
}

/// First cycle the commit stage holds `pc`.
fn commit_cycle(nl: &Netlist, states: &[MachineState], pc: u64) -> Option<usize> {
    states.iter().position(|s| s.reg(nl, "cmt_st") == Some(1) && s.reg(nl, "cmt_pc") == Some(pc))
}

#[test]
fn zero_operand_multiply_occupies_the_multiplier_once() {
    let (nl, env) = zskip();
    let mul = word("MUL", &[("rd", 3), ("rs1", 1), ("rs2", 2)]);
    for (a, b, want) in [(0, 2, 1), (2, 0, 1), (1, 2, 4), (255, 255, 4)] {
        let init = env.initial_state(&nl, &[a, b]);
        let tr = run_program(&nl, &Program { words: vec![mul] }, &init, 30).unwrap();
        let busy = tr.states.iter().filter(|s| s.reg(&nl, "mul_st") == Some(1)).count();
        assert_eq!(busy, want, "r1={a} r2={b}");
        // once finished the multiplier is idle again
        assert_eq!(tr.states.last().unwrap().reg(&nl, "mul_st"), Some(0));
    }
}

#[test]
fn fast_multiply_lets_the_next_instruction_commit_earlier() {
    let (nl, env) = zskip();
    let prog = Program { words: vec![word("MUL", &[("rd", 3), ("rs1", 1), ("rs2", 2)]), word("SUB", &[("rd", 3), ("rs1", 1), ("rs2", 2)])] };
    let run = |a| {
        let tr = run_program(&nl, &prog, &env.initial_state(&nl, &[a, 2]), 40).unwrap();
        (commit_cycle(&nl, &tr.states, 1).expect("MUL commits"), commit_cycle(&nl, &tr.states, 2).expect("SUB commits"))
    };
    let ((mul_fast, sub_fast), (mul_slow, sub_slow)) = (run(0), run(1));
    assert!(sub_fast < sub_slow);
    // the blocking core shifts SUB by exactly the multiply's extra latency
    assert_eq!(sub_slow - sub_fast, mul_slow - mul_fast);
}

#[test]
fn empty_program_stays_idle() {
    for d in list_designs() {
        let nl = d.netlist().unwrap();
        let env = d.env();
        let tr = run_program(&nl, &Program::default(), &env.initial_state(&nl, &[1, 2]), 20).unwrap();
        for s in &tr.states {
            for f in &nl.annotations.mufsms {
                let vars: Vec<u64> = f.vars.iter().map(|v| s.reg(&nl, v).unwrap()).collect();
                assert!(f.idle_states.contains(&vars), "{} {} busy", d.name, f.id);
            }
        }
    }
}

#[test]
fn single_instruction_is_the_only_pc_in_flight() {
    let (nl, env) = zskip();
    let add = word("ADD", &[("rd", 3), ("rs1", 1), ("rs2", 2)]);
    let tr = run_program(&nl, &Program { words: vec![add] }, &env.initial_state(&nl, &[1, 2]), 20).unwrap();
    let mut seen = false;
    for s in &tr.states {
        for f in &nl.annotations.mufsms {
            let pc = s.reg(&nl, &f.pcr).unwrap();
            assert!(pc == 0 || pc == 1);
            seen |= pc == 1;
        }
    }
    assert!(seen);
    assert!(commit_cycle(&nl, &tr.states, 1).is_some());
}

/// Over every bounded program and architectural state of each design's env,
/// the PL-sets occupied by different PCs never overlap.
#[test]
fn visits_are_exclusive() {
    for d in list_designs() {
        let nl = d.netlist().unwrap();
        let mut env = d.env();
        env.max_len = 2;
        let duv = enumerate_duv_pls(&nl, &env).unwrap();
        let table = PlTable::new(&nl, &duv.pls).unwrap();
        let pcs = 1..=env.max_len as u64;
        for prog in env.programs() {
            for arch in env.arch_states() {
                let tr = run_program(&nl, &Program { words: prog.clone() }, &env.initial_state(&nl, &arch), 40).unwrap();
                for s in &tr.states {
                    let mut acc = 0u64;
                    for pc in pcs.clone() {
                        let m = table.step(s, pc);
                        assert_eq!(acc & m, 0, "{}: shared PL", d.name);
                        acc |= m;
                    }
                }
            }
        }
    }
}

fn random_state(nl: &Netlist, vals: &[u64]) -> MachineState {
    let mut s = MachineState::reset(nl);
    let mut it = vals.iter().cycle();
    for (i, r) in nl.registers.iter().enumerate() {
        s.regs[i] = it.next().unwrap() & upathlab::netlist::mask(r.width);
    }
    for (i, m) in nl.memories.iter().enumerate() {
        for w in s.mems[i].iter_mut() {
            *w = it.next().unwrap() & upathlab::netlist::mask(m.width);
        }
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn step_is_deterministic(seed in any::<u64>(), vals in prop::collection::vec(any::<u64>(), 1..16)) {
        let nl = parse_netlist(&common::random_netlist_text(seed)).unwrap();
        let s = random_state(&nl, &vals);
        let ins: Vec<u64> = nl.inputs.iter().zip(vals.iter().cycle()).map(|(i, v)| v & upathlab::netlist::mask(i.1)).collect();
        let a = step(&nl, &s, &ins).unwrap();
        let b = step(&nl, &s.clone(), &ins.clone()).unwrap();
        prop_assert_eq!(a, b);
    }

    /// A register whose next state is itself, and a memory whose write port
    /// is disabled, keep their values.
    #[test]
    fn disabled_writes_keep_values(vals in prop::collection::vec(0u64..16, 6)) {
        let src = "in we:1\nin a:2\nin d:4\nreg r:4 reset 0 next r\nmem m:4 depth 4\nmemwr m[a] = d if we\n";
        let nl = parse_netlist(src).unwrap();
        let mut s = MachineState::reset(&nl);
        s.regs[0] = vals[0];
        for (i, w) in s.mems[0].iter_mut().enumerate() {
            *w = vals[1 + i];
        }
        let nx = step(&nl, &s, &[0, vals[5] & 3, vals[5]]).unwrap();
        prop_assert_eq!(nx, s);
    }
}
