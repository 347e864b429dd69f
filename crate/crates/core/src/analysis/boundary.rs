//! Dense prediction grids over the plane for decision-boundary plots.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{argmax_rows, softmax, Predictor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
    pub class: usize,
    /// Softmax probability of class 1.
    pub prob: f64,
}

fn axis(range: (f64, f64), resolution: usize, i: usize) -> f64 {
    if resolution == 1 {
        0.5 * (range.0 + range.1)
    } else {
        range.0 + (range.1 - range.0) * i as f64 / (resolution - 1) as f64
    }
}

/// Evaluates `model` at time `t` on a `resolution × resolution` grid
/// spanning both ranges inclusively; `y` is the outer loop.
pub fn boundary_grid<P: Predictor + ?Sized>(
    model: &P,
    t: f64,
    x_range: (f64, f64),
    y_range: (f64, f64),
    resolution: usize,
) -> Result<Vec<GridPoint>> {
    if model.input_dim() != 2 {
        return Err(Error::Argument(format!(
            "decision grids need a 2-d input model, got {} inputs",
            model.input_dim()
        )));
    }
    if model.num_classes() < 2 {
        return Err(Error::Argument("decision grids need at least two classes".into()));
    }
    if resolution == 0 {
        return Err(Error::Argument("grid resolution must be positive".into()));
    }
    let n = resolution * resolution;
    let pts = Matrix::from_fn(n, 2, |i, j| {
        if j == 0 {
            axis(x_range, resolution, i % resolution)
        } else {
            axis(y_range, resolution, i / resolution)
        }
    });
    let logits = model.predict_logits(&pts, t)?;
    let probs = softmax(&logits);
    let classes = argmax_rows(&logits);
    Ok((0..n)
        .map(|i| GridPoint {
            x: pts[(i, 0)],
            y: pts[(i, 1)],
            class: classes[i],
            prob: probs[(i, 1)],
        })
        .collect())
}

pub fn write_grid_csv(grid: &[GridPoint], mut out: impl Write) -> Result<()> {
    writeln!(out, "x,y,class,prob")?;
    for g in grid {
        writeln!(out, "{},{},{},{}", g.x, g.y, g.class, g.prob)?;
    }
    Ok(())
}
