// SPDX-License-Identifier: Apache-2.0
//! Decision sources and decisions of an instruction's μpath set.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::upath::{MuPath, PerformingLocation, PlSet};

/// A source location and the set visited the cycle after. An empty `dst`
/// stands for dematerialization.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Decision {
    pub instruction: String,
    pub src: PerformingLocation,
    pub dst: PlSet,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionTable {
    pub sources: BTreeSet<PerformingLocation>,
    pub decisions: BTreeSet<Decision>,
}

impl DecisionTable {
    /// Destinations of `src`, in order.
    pub fn range(&self, src: &PerformingLocation) -> BTreeSet<PlSet> {
        self.decisions.iter().filter(|d| &d.src == src).map(|d| d.dst.clone()).collect()
    }

    pub fn at<'a>(&'a self, src: &'a PerformingLocation) -> impl Iterator<Item = &'a Decision> + 'a {
        self.decisions.iter().filter(move |d| &d.src == src)
    }
}

/// A location is a source when two μpaths give it different families of
/// next sets; visit indices are ignored.
pub fn extract_decisions(upaths: &[MuPath]) -> DecisionTable {
    let mut fams: BTreeMap<PerformingLocation, BTreeSet<BTreeSet<PlSet>>> = BTreeMap::new();
    let mut instr = BTreeMap::new();
    for p in upaths {
        for (pl, fam) in p.next_sets() {
            instr.entry(pl.clone()).or_insert_with(|| p.instruction.clone());
            fams.entry(pl).or_default().insert(fam);
        }
    }
    let mut out = DecisionTable::default();
    for (pl, fs) in fams {
        if fs.len() < 2 {
            continue;
        }
        out.sources.insert(pl.clone());
        for dst in fs.into_iter().flatten() {
            out.decisions.insert(Decision { instruction: instr[&pl].clone(), src: pl.clone(), dst });
        }
    }
    out
}
