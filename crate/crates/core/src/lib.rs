//! Multi-view articulated pose estimation with flexible mixtures of parts.
//!
//! Single-view poses are found by exact dynamic programming over a kinematic
//! tree of part filters. Two calibrated views are coupled through epipolar
//! consistency of part positions and a learned co-occurrence prior over part
//! types, optimized by alternating exact maximization over one view while
//! the other is held fixed, with per-part gating of the coupling terms.

pub mod dt;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod infer;
pub mod joint;
pub mod learn;
pub mod model;
pub mod pipeline;
pub mod synth;
