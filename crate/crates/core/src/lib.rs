//! Profile-guided, LLM-driven optimization of tile-based Gaussian splatting
//! kernels.
//!
//! The pieces are layered: [`program`] handles the editable source,
//! [`oracle`] is the reference rasterizer, [`profile`] ingests hardware
//! metrics, [`planner`] builds and parses the planning exchanges, [`llm`]
//! talks to backends, [`evaluator`] scores candidates, [`checker`] screens
//! them for equivalence and [`search`] drives the evolutionary loop.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod catalog;
pub mod checker;
pub mod evaluator;
pub mod llm;
pub mod oracle;
pub mod planner;
pub mod profile;
pub mod program;
pub mod search;
pub mod templates;
