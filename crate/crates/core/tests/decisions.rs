// SPDX-License-Identifier: Apache-2.0
mod common;

use std::collections::BTreeSet;
use std::sync::OnceLock;

use common::Pipeline;
use proptest::prelude::*;
use upathlab::decisions::extract_decisions;
use upathlab::upath::{MuPath, PlSet};

fn names(s: &PlSet) -> BTreeSet<&str> {
    s.iter().map(|p| p.name.as_str()).collect()
}

fn paths(design: &str, m: &str) -> Vec<MuPath> {
    static P: OnceLock<Vec<Pipeline>> = OnceLock::new();
    let ps = P.get_or_init(|| ["zskip-mul", "op-pack", "st2ld"].into_iter().map(Pipeline::new).collect());
    ps.iter().find(|p| p.design.name == design).unwrap().reports[m].upaths.clone()
}

#[test]
fn single_path_has_no_decisions() {
    let t = extract_decisions(&paths("zskip-mul", "ADD"));
    assert!(t.sources.is_empty() && t.decisions.is_empty());
}

#[test]
fn packed_add_decides_at_decode() {
    let t = extract_decisions(&paths("op-pack", "ADD"));
    let got: BTreeSet<(&str, BTreeSet<&str>)> = t.decisions.iter().map(|d| (d.src.name.as_str(), names(&d.dst))).collect();
    let want = BTreeSet::from([("ID", BTreeSet::from(["issue", "scbIss"])), ("ID", BTreeSet::from(["ID"]))]);
    assert_eq!(got, want);
}

#[test]
fn multiply_decides_after_the_scoreboard() {
    let t = extract_decisions(&paths("zskip-mul", "MUL"));
    let srcs: BTreeSet<&str> = t.sources.iter().map(|p| p.name.as_str()).collect();
    assert!(srcs.contains("scbIss"), "{srcs:?}");
    let scb = t.sources.iter().find(|p| p.name == "scbIss").unwrap();
    let range = t.range(scb);
    let dsts: BTreeSet<BTreeSet<&str>> = range.iter().map(names).collect();
    let want = BTreeSet::from([BTreeSet::from(["scbIss", "mulU"]), BTreeSet::from(["scbIss"]), BTreeSet::from(["scbCmt"])]);
    assert_eq!(dsts, want);
}

#[test]
fn decisions_are_adjacent_steps_of_some_path() {
    for (d, m) in [("zskip-mul", "MUL"), ("op-pack", "ADD"), ("st2ld", "LD"), ("st2ld", "ST")] {
        let ps = paths(d, m);
        let t = extract_decisions(&ps);
        assert!(!t.sources.is_empty(), "{d} {m}");
        for src in &t.sources {
            assert!(t.range(src).len() >= 2, "{d} {m} {src}");
        }
        for dec in &t.decisions {
            let seen = ps.iter().any(|p| p.next_sets().get(&dec.src).is_some_and(|f| f.contains(&dec.dst)));
            assert!(seen, "{d} {m} {} -> {:?}", dec.src, names(&dec.dst));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Dropping μpaths never adds a source or a decision.
    #[test]
    fn removing_paths_is_monotone(which in 0usize..4, keep in any::<u16>()) {
        let (d, m) = [("zskip-mul", "MUL"), ("op-pack", "ADD"), ("st2ld", "LD"), ("st2ld", "ST")][which];
        let all = paths(d, m);
        let full = extract_decisions(&all);
        let sub: Vec<MuPath> = all.iter().enumerate().filter(|(i, _)| keep >> i & 1 == 1).map(|(_, p)| p.clone()).collect();
        let part = extract_decisions(&sub);
        prop_assert!(part.sources.is_subset(&full.sources));
        prop_assert!(part.decisions.is_subset(&full.decisions));
    }
}
