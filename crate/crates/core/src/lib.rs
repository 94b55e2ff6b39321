//! Cross-stage label assignment and dynamic filter reuse for query-based
//! object detectors, built as small f64 reference kernels with hand-written
//! gradients.

pub mod geometry;
pub mod matching;
pub mod numerics;
pub mod assigner;
pub mod losses;
pub mod decoder;
pub mod harness;
