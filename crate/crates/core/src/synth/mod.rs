//! Synthetic glyph scenes, the fIoU metric, and the evaluation and timing harnesses.

pub mod bench;
pub mod eval;
pub mod glyphs;
pub mod manifest;
pub mod scene;

pub use bench::{run_bench, BenchConfig, BenchReport};
pub use eval::{run_eval, EvalConfig, EvalReport};
pub use scene::{
    generate_corpus, generate_scene, BackgroundKind, GlyphScene, Instance, SceneConfig,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Foreground IoU of two binary maps; nonzero entries count as foreground.
/// Two empty maps score 1.0.
pub fn fiou(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "fiou: prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p != 0.0, g != 0.0);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Median of a nonempty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
