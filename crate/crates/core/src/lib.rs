//! Single-view garment reconstruction from an adaptable body template.

pub mod mesh;
pub mod sparse;
pub mod spatial;
pub mod laplacian;
pub mod metrics;
pub mod implicit;
pub mod feature_line;
pub mod body;
pub mod template;
pub mod detail;
pub mod neural;
pub mod synth;
pub mod pipeline;
