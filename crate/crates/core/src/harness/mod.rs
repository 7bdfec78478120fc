//! Baselines, the evaluation pipeline and scanpath rendering.

mod baselines;
mod eval;
mod svg;

pub use baselines::{bbox_baseline, random_baseline, BaselineConfig};
pub use eval::{evaluate, Cell, EvalConfig, EvalReport, EvalRow, RecordFailure, Sampler, Source};
pub use svg::{render_svg, WordColors};
