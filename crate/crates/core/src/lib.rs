//! Structured prediction over factor graphs with learned message estimators.
//!
//! The crate carries two inference routes for conditional random fields:
//! classic synchronous loopy belief propagation driven by explicit potential
//! tables, and parametric estimators that emit factor-to-variable messages
//! directly from image features. Exhaustive enumeration provides exact
//! answers on tiny graphs for checking both.

pub mod evaluation;
pub mod exact_oracle;
pub mod gradcheck;
pub mod factor_graph;
pub mod image;
pub mod instrumentation;
pub mod message_estimator;
pub mod message_passing;
pub mod numerics;
pub mod seeds;
pub mod synthetic_data;
pub mod trainer;
