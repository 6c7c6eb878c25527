// SPDX-License-Identifier: Apache-2.0
//! DOT, JSON and text renderings of pipeline results.
//!
//! JSON artifacts are wrapped in an envelope carrying a schema tag and the
//! env fingerprint of the run that produced them. Schemas live in
//! `docs/schemas/`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decisions::{Decision, DecisionTable};
use crate::engine::EnvFingerprint;
use crate::leakage::{ContractView, LeakageSignature, SignatureReport};
use crate::oracle::{Attribution, Violation};
use crate::upath::{MuPath, PerformingLocation, UpathReport};

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("export: schema mismatch: {0}")]
    SchemaMismatch(String),
}

/// A result type with a versioned JSON schema.
pub trait Artifact: Serialize + DeserializeOwned {
    const SCHEMA: &'static str;
}

macro_rules! artifact {
    ($($t:ty => $s:literal),* $(,)?) => {
        $(impl Artifact for $t { const SCHEMA: &'static str = $s; })*
    };
}

artifact! {
    MuPath => "upathlab/mupath/v1",
    Vec<MuPath> => "upathlab/mupaths/v1",
    UpathReport => "upathlab/upath-report/v1",
    Decision => "upathlab/decision/v1",
    DecisionTable => "upathlab/decisions/v1",
    LeakageSignature => "upathlab/signature/v1",
    Vec<LeakageSignature> => "upathlab/signatures/v1",
    SignatureReport => "upathlab/signature-report/v1",
    Vec<ContractView> => "upathlab/contracts/v1",
    Vec<Violation> => "upathlab/violations/v1",
    Vec<Attribution> => "upathlab/attributions/v1",
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope<T> {
    schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fingerprint: Option<EnvFingerprint>,
    data: T,
}

pub fn to_json<T: Artifact>(value: &T, fingerprint: Option<&EnvFingerprint>) -> String {
    let env = Envelope { schema: T::SCHEMA.to_string(), fingerprint: fingerprint.cloned(), data: value };
    serde_json::to_string_pretty(&env).expect("artifact types serialize")
}

pub fn from_json<T: Artifact>(text: &str) -> Result<(T, Option<EnvFingerprint>), ExportError> {
    let env: Envelope<serde_json::Value> = serde_json::from_str(text).map_err(|e| ExportError::SchemaMismatch(e.to_string()))?;
    if env.schema != T::SCHEMA {
        return Err(ExportError::SchemaMismatch(format!("expected {}, found {}", T::SCHEMA, env.schema)));
    }
    let data = T::deserialize(env.data).map_err(|e| ExportError::SchemaMismatch(e.to_string()))?;
    Ok((data, env.fingerprint))
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// Node ids of one μpath: `plname.visitindex`, one per step and location.
/// A repeated step gets a first and a last node.
fn visit_nodes(path: &MuPath) -> Vec<BTreeMap<&PerformingLocation, (usize, usize)>> {
    let mut seen: BTreeMap<&PerformingLocation, usize> = BTreeMap::new();
    path.steps
        .iter()
        .map(|st| {
            st.pls
                .iter()
                .map(|pl| {
                    let n = seen.entry(pl).or_insert(0);
                    let first = *n + 1;
                    *n += if st.repeated { 2 } else { 1 };
                    (pl, (first, *n))
                })
                .collect()
        })
        .collect()
}

/// Column-per-μpath graph. Solid edges are one-cycle happens-before edges,
/// dashed edges summarize a repeated step. With `decisions`, sources are
/// classed `src` (orange) and the nodes entered from them `dst` (blue).
pub fn to_dot(paths: &[MuPath], decisions: Option<&DecisionTable>) -> String {
    let mut out = String::from("digraph upaths {\n");
    if paths.is_empty() {
        out.push_str("}\n");
        return out;
    }
    out.push_str("  rankdir=TB;\n  node [shape=box];\n");
    let sources: BTreeSet<&PerformingLocation> = decisions.map(|d| d.sources.iter().collect()).unwrap_or_default();
    let single = paths.len() == 1;
    for (ui, path) in paths.iter().enumerate() {
        let id = |pl: &PerformingLocation, v: usize| {
            if single {
                quote(&format!("{}.{v}", pl.name))
            } else {
                quote(&format!("u{ui}.{}.{v}", pl.name))
            }
        };
        let nodes = visit_nodes(path);
        let _ = writeln!(out, "  subgraph cluster_{ui} {{\n    label={};", quote(&format!("{} upath {ui}", path.instruction)));
        let mut entered: BTreeSet<(&PerformingLocation, usize)> = BTreeSet::new();
        for (si, es) in path.edges.iter().enumerate() {
            for (a, b) in es {
                if sources.contains(a) {
                    entered.insert((b, nodes[si + 1][b].0));
                }
            }
        }
        for (si, st) in path.steps.iter().enumerate() {
            for pl in &st.pls {
                let (first, last) = nodes[si][pl];
                let class = if sources.contains(pl) {
                    " class=\"src\" style=filled fillcolor=orange"
                } else if entered.contains(&(pl, first)) {
                    " class=\"dst\" style=filled fillcolor=lightblue"
                } else {
                    ""
                };
                if st.repeated {
                    let _ = writeln!(out, "    {} [label={}{class}];", id(pl, first), quote(&format!("{}(1)", pl.name)));
                    let _ = writeln!(out, "    {} [label={}];", id(pl, last), quote(&format!("{}(l)", pl.name)));
                } else {
                    let _ = writeln!(out, "    {} [label={}{class}];", id(pl, first), quote(&pl.name));
                }
            }
        }
        for (si, st) in path.steps.iter().enumerate() {
            if st.repeated {
                for (a, b) in &path.summary[si] {
                    let _ = writeln!(out, "    {} -> {} [style=dashed];", id(a, nodes[si][a].0), id(b, nodes[si][b].1));
                }
            }
            if let Some(es) = path.edges.get(si) {
                for (a, b) in es {
                    let _ = writeln!(out, "    {} -> {};", id(a, nodes[si][a].1), id(b, nodes[si + 1][b].0));
                }
            }
        }
        out.push_str("  }\n");
    }
    out.push_str("}\n");
    out
}

fn set_text<'a>(pls: impl IntoIterator<Item = &'a PerformingLocation>) -> String {
    let names: Vec<&str> = pls.into_iter().map(|p| p.name.as_str()).collect();
    if names.len() == 1 {
        names[0].to_string()
    } else {
        format!("{{{}}}", names.join(","))
    }
}

/// `IF -> ID+ -> {issue,scbIss} -> scbCmt`; `+` marks a repeated step.
pub fn upath_text(path: &MuPath) -> String {
    path.steps
        .iter()
        .map(|s| format!("{}{}", set_text(&s.pls), if s.repeated { "+" } else { "" }))
        .collect::<Vec<_>>()
        .join(" -> ")
}

pub fn decisions_text(table: &DecisionTable) -> String {
    let mut out = String::new();
    for d in &table.decisions {
        let _ = writeln!(out, "{} {} -> {{{}}}", d.instruction, d.src.name, d.dst.iter().map(|p| p.name.as_str()).collect::<Vec<_>>().join(","));
    }
    out
}

/// One table per contract view: header of its columns, one line per row.
pub fn contracts_text(views: &[ContractView]) -> String {
    let mut out = String::new();
    for v in views {
        let _ = writeln!(out, "[{}] {} rows", v.id, v.rows.len());
        for r in &v.rows {
            let _ = writeln!(out, "  {}", serde_json::to_string(r).expect("rows serialize"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_set_renders_empty_body() {
        assert_eq!(to_dot(&[], None), "digraph upaths {\n}\n");
    }

    #[test]
    fn malformed_json_is_schema_mismatch() {
        assert!(matches!(from_json::<Decision>("{not json"), Err(ExportError::SchemaMismatch(_))));
        let wrong = to_json(&DecisionTable::default(), None);
        assert!(matches!(from_json::<Decision>(&wrong), Err(ExportError::SchemaMismatch(_))));
    }

    #[test]
    fn quoting_escapes() {
        assert_eq!(quote("a\"b"), "\"a\\\"b\"");
    }
}
