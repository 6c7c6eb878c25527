// SPDX-License-Identifier: Apache-2.0
//! μpath and leakage-signature synthesis for small synchronous netlists.

pub mod decisions;
pub mod designs;
pub mod engine;
pub mod export;
pub mod leakage;
pub mod oracle;
pub mod ift;
pub mod netlist;
pub mod sim;
pub mod upath;
