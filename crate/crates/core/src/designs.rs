// SPDX-License-Identifier: Apache-2.0
//! Bundled toy designs and the toy ISA.

use std::collections::BTreeMap;

use crate::engine::{PropertyEnv, UndeterminedPolicy};
use crate::netlist::{parse_encodings, parse_netlist, InstructionEncoding, Netlist, NetlistError};

pub const TOY_ISA: &str = include_str!("../designs/toy.isa");

pub struct Design {
    pub name: &'static str,
    pub text: &'static str,
}

const DESIGNS: [Design; 4] = [
    Design { name: "zskip-mul", text: include_str!("../designs/zskip-mul.nl") },
    Design { name: "op-pack", text: include_str!("../designs/op-pack.nl") },
    Design { name: "st2ld", text: include_str!("../designs/st2ld.nl") },
    Design { name: "mini-cache", text: include_str!("../designs/mini-cache.nl") },
];

pub fn list_designs() -> &'static [Design] {
    &DESIGNS
}

pub fn design(name: &str) -> Option<&'static Design> {
    DESIGNS.iter().find(|d| d.name == name)
}

pub fn toy_isa() -> Vec<InstructionEncoding> {
    parse_encodings(TOY_ISA).expect("bundled ISA parses")
}

/// `# header: KEY VALUES...` lines of a design file; repeated keys collect.
pub fn header(text: &str) -> BTreeMap<String, Vec<Vec<String>>> {
    let mut out: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    for line in text.lines() {
        if let Some(rest) = line.trim().strip_prefix("# header:") {
            let mut toks = rest.split_whitespace().map(String::from);
            if let Some(k) = toks.next() {
                out.entry(k).or_default().push(toks.collect());
            }
        }
    }
    out
}

impl Design {
    pub fn netlist(&self) -> Result<Netlist, NetlistError> {
        parse_netlist(self.text)
    }

    /// Mnemonics the design implements.
    pub fn supports(&self) -> Vec<String> {
        header(self.text).get("supports").and_then(|v| v.first().cloned()).unwrap_or_default()
    }

    pub fn header_count(&self, key: &str) -> Option<usize> {
        header(self.text).get(key)?.first()?.first()?.parse().ok()
    }

    /// Expected μpath count per mnemonic.
    pub fn expected_upaths(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for row in header(self.text).get("upaths").into_iter().flatten() {
            for kv in row {
                if let Some((k, v)) = kv.split_once('=') {
                    if let Ok(n) = v.parse() {
                        out.insert(k.to_string(), n);
                    }
                }
            }
        }
        out
    }

    /// Default exploration env over the supported instructions.
    pub fn env(&self) -> PropertyEnv {
        let isa = toy_isa();
        let supports = self.supports();
        let alphabet = isa.iter().filter(|e| supports.contains(&e.mnemonic)).flat_map(variants).collect();
        PropertyEnv {
            alphabet,
            operand_domain: vec![0, 1, 2, 255],
            arch_regs: vec![1, 2],
            max_len: 3,
            bound: 64,
            budget: 4_000_000,
            undetermined_as: UndeterminedPolicy::Unreachable,
        }
    }
}

/// Register assignments of one instruction: destination r3, sources drawn
/// from r1/r2 in both orders.
pub fn variants(e: &InstructionEncoding) -> Vec<u64> {
    let srcs: Vec<&str> = e.fields.iter().map(|f| f.0.as_str()).filter(|f| *f != "rd").collect();
    let orders: Vec<Vec<u64>> = match srcs.len() {
        0 => vec![vec![]],
        1 => vec![vec![1], vec![2]],
        _ => vec![vec![1, 2], vec![2, 1]],
    };
    let mut out = Vec::new();
    for o in orders {
        let mut fields: Vec<(&str, u64)> = srcs.iter().copied().zip(o.iter().copied().chain(std::iter::repeat(0))).collect();
        if e.fields.iter().any(|f| f.0 == "rd") {
            fields.push(("rd", 3));
        }
        out.push(e.encode(&fields));
    }
    out.dedup();
    out
}

pub fn encoding<'a>(isa: &'a [InstructionEncoding], mnemonic: &str) -> Option<&'a InstructionEncoding> {
    isa.iter().find(|e| e.mnemonic == mnemonic)
}

/// Mnemonic of an encoded word.
pub fn decode<'a>(isa: &'a [InstructionEncoding], word: u64) -> Option<&'a InstructionEncoding> {
    isa.iter().find(|e| e.matches(word))
}
