//! Adaptive learning-material update: erase the most informative region of
//! each image, with a configurable probability.

use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    DatasetMean,
    Zero,
    UniformNoise,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EraseConfig {
    /// Probability of erasing each image.
    pub prob: f64,
    /// Erased rectangle height and width in pixels.
    pub erase_h: usize,
    pub erase_w: usize,
    pub fill: FillMode,
    /// Per-channel means used by FillMode::DatasetMean.
    #[serde(default = "default_mean")]
    pub mean_rgb: Vec<f64>,
}

fn default_mean() -> Vec<f64> {
    vec![0.5, 0.5, 0.5]
}

impl Default for EraseConfig {
    fn default() -> Self {
        Self {
            prob: 0.4,
            erase_h: 16,
            erase_w: 8,
            fill: FillMode::DatasetMean,
            mean_rgb: default_mean(),
        }
    }
}

impl EraseConfig {
    pub fn validate(&self, image_h: usize, image_w: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prob) {
            return Err(HliError::Config {
                field: "erase.prob".into(),
                reason: format!("must be in [0,1], got {}", self.prob),
            });
        }
        if self.erase_h == 0 || self.erase_w == 0 || self.erase_h > image_h || self.erase_w > image_w
        {
            return Err(HliError::Config {
                field: "erase.erase_h/erase_w".into(),
                reason: format!(
                    "rectangle {}x{} invalid for {}x{} images",
                    self.erase_h, self.erase_w, image_h, image_w
                ),
            });
        }
        Ok(())
    }
}

/// Erase, per image and with probability `cfg.prob`, the rectangle of size
/// erase_w x erase_h centered at that image's point, clipped to bounds.
/// Decision and noise draws come from the supplied RNG only.
pub fn adaptive_erase(
    images: &Array4<f64>,
    points: &[(usize, usize)],
    cfg: &EraseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Array4<f64>> {
    let (n, c, h, w) = images.dim();
    if points.len() != n {
        return Err(HliError::ShapeMismatch(format!(
            "{} points for batch of {n}",
            points.len()
        )));
    }
    cfg.validate(h, w)?;
    for &(px, py) in points {
        if px >= w || py >= h {
            return Err(HliError::InvalidArgument(format!(
                "point ({px},{py}) outside {h}x{w} image (upstream mapping bug)"
            )));
        }
    }
    let mut out = images.clone();
    for i in 0..n {
        let erase: bool = rng.gen::<f64>() < cfg.prob;
        if !erase {
            continue;
        }
        let (px, py) = points[i];
        let x0 = px.saturating_sub(cfg.erase_w / 2);
        let y0 = py.saturating_sub(cfg.erase_h / 2);
        let x1 = (px + cfg.erase_w - cfg.erase_w / 2).min(w);
        let y1 = (py + cfg.erase_h - cfg.erase_h / 2).min(h);
        for ci in 0..c {
            for y in y0..y1 {
                for x in x0..x1 {
                    out[[i, ci, y, x]] = match cfg.fill {
                        FillMode::Zero => 0.0,
                        FillMode::DatasetMean => cfg.mean_rgb[ci.min(cfg.mean_rgb.len() - 1)],
                        FillMode::UniformNoise => rng.gen(),
                    };
                }
            }
        }
    }
    Ok(out)
}

/// The rectangle [x0,x1) x [y0,y1) that `adaptive_erase` fills for a point,
/// exposed for the per-pixel reference oracle.
pub fn erase_rect(
    point: (usize, usize),
    cfg: &EraseConfig,
    image_h: usize,
    image_w: usize,
) -> (usize, usize, usize, usize) {
    let (px, py) = point;
    let x0 = px.saturating_sub(cfg.erase_w / 2);
    let y0 = py.saturating_sub(cfg.erase_h / 2);
    let x1 = (px + cfg.erase_w - cfg.erase_w / 2).min(image_w);
    let y1 = (py + cfg.erase_h - cfg.erase_h / 2).min(image_h);
    (x0, x1, y0, y1)
}

/// Uniform-random points, the non-adaptive arm of the update comparison.
pub fn random_points(
    n: usize,
    image_h: usize,
    image_w: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    (0..n)
        .map(|_| (rng.gen_range(0..image_w), rng.gen_range(0..image_h)))
        .collect()
}
