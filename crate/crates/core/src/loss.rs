//! Training losses and quality metrics.
//!
//! SSIM here is the plain windowed form with uniform window statistics and
//! the unbiased `1/(N-1)` (co)variance normalization, averaged over every
//! window position at the configured stride.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SfarlError};
use crate::grid::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub stride: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 8,
            stride: 1,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

impl SsimConfig {
    fn validate(&self, x: &Image) -> Result<()> {
        if self.window < 2 || self.stride == 0 {
            return Err(SfarlError::InvalidArgument(format!(
                "ssim window must be >= 2 and stride >= 1, got {} / {}",
                self.window, self.stride
            )));
        }
        if self.window > x.height() || self.window > x.width() {
            return Err(SfarlError::Dimension(format!(
                "ssim window {} larger than image {}x{}",
                self.window,
                x.height(),
                x.width()
            )));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(SfarlError::InvalidArgument(
                "ssim constants must be positive".into(),
            ));
        }
        Ok(())
    }

    fn origins(&self, len: usize) -> impl Iterator<Item = usize> {
        (0..=len - self.window).step_by(self.stride)
    }
}

/// Which loss drives training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mse,
    NegSsim,
}

impl LossKind {
    pub fn value(self, x: &Image, gt: &Image, cfg: &SsimConfig) -> Result<f64> {
        match self {
            LossKind::Mse => mse(x, gt),
            LossKind::NegSsim => ssim(x, gt, cfg).map(|s| -s),
        }
    }

    pub fn grad(self, x: &Image, gt: &Image, cfg: &SsimConfig) -> Result<Image> {
        match self {
            LossKind::Mse => mse_grad(x, gt),
            LossKind::NegSsim => neg_ssim_grad(x, gt, cfg),
        }
    }
}

/// `1/2 |x - gt|^2`
pub fn mse(x: &Image, gt: &Image) -> Result<f64> {
    x.check_dims(gt)?;
    Ok(0.5
        * x.as_slice()
            .iter()
            .zip(gt.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>())
}

pub fn mse_grad(x: &Image, gt: &Image) -> Result<Image> {
    x.check_dims(gt)?;
    Ok(x.sub(gt))
}

/// Peak signal-to-noise ratio in dB for images on `[0, 1]`.
///
/// Identical images return `f64::INFINITY`.
pub fn psnr(x: &Image, gt: &Image) -> Result<f64> {
    x.check_dims(gt)?;
    let mean_sq = x
        .as_slice()
        .iter()
        .zip(gt.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    Ok(if mean_sq == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mean_sq).log10()
    })
}

/// Statistics of one window pair.
struct WindowStats {
    mu_x: f64,
    mu_y: f64,
    a1: f64,
    a2: f64,
    b1: f64,
    b2: f64,
}

impl WindowStats {
    fn ssim(&self) -> f64 {
        self.a1 * self.a2 / (self.b1 * self.b2)
    }
}

fn window_stats(x: &Image, y: &Image, top: usize, left: usize, cfg: &SsimConfig) -> WindowStats {
    let w = cfg.window;
    let n = (w * w) as f64;
    let stride = x.width();
    let xs = x.as_slice();
    let ys = y.as_slice();
    let (mut sx, mut sy) = (0.0, 0.0);
    for i in top..top + w {
        let row = i * stride + left;
        sx += xs[row..row + w].iter().sum::<f64>();
        sy += ys[row..row + w].iter().sum::<f64>();
    }
    let (mu_x, mu_y) = (sx / n, sy / n);
    let (mut vxx, mut vyy, mut vxy) = (0.0, 0.0, 0.0);
    for i in top..top + w {
        let row = i * stride + left;
        for (a, b) in xs[row..row + w].iter().zip(&ys[row..row + w]) {
            let (dx, dy) = (a - mu_x, b - mu_y);
            vxx += dx * dx;
            vyy += dy * dy;
            vxy += dx * dy;
        }
    }
    let norm = n - 1.0;
    let (var_x, var_y, cov) = (vxx / norm, vyy / norm, vxy / norm);
    WindowStats {
        mu_x,
        mu_y,
        a1: 2.0 * mu_x * mu_y + cfg.c1,
        a2: 2.0 * cov + cfg.c2,
        b1: mu_x * mu_x + mu_y * mu_y + cfg.c1,
        b2: var_x + var_y + cfg.c2,
    }
}

/// Mean windowed SSIM between `x` and `gt`.
pub fn ssim(x: &Image, gt: &Image, cfg: &SsimConfig) -> Result<f64> {
    x.check_dims(gt)?;
    cfg.validate(x)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for top in cfg.origins(x.height()) {
        for left in cfg.origins(x.width()) {
            total += window_stats(x, gt, top, left, cfg).ssim();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Gradient of `-ssim(x, gt)` with respect to `x`.
pub fn neg_ssim_grad(x: &Image, gt: &Image, cfg: &SsimConfig) -> Result<Image> {
    x.check_dims(gt)?;
    cfg.validate(x)?;
    let w = cfg.window;
    let n = (w * w) as f64;
    let stride = x.width();
    let xs = x.as_slice();
    let ys = gt.as_slice();
    let mut grad = vec![0.0; x.len()];
    let mut count = 0usize;
    for top in cfg.origins(x.height()) {
        for left in cfg.origins(x.width()) {
            count += 1;
            let st = window_stats(x, gt, top, left, cfg);
            let d = (st.b1 * st.b2).powi(2);
            // d ssim / d x_p = (c0 + cx * x_p + cy * y_p) / d
            let cx = -2.0 * st.a1 * st.a2 * st.b1 / (n - 1.0);
            let cy = 2.0 * st.a1 * st.b1 * st.b2 / (n - 1.0);
            let c0 = 2.0 * st.a2 * st.b1 * st.b2 * st.mu_y / n
                - 2.0 * st.a1 * st.a2 * st.b2 * st.mu_x / n
                - cy * st.mu_y
                - cx * st.mu_x;
            for i in top..top + w {
                let row = i * stride + left;
                for p in row..row + w {
                    grad[p] -= (c0 + cx * xs[p] + cy * ys[p]) / d;
                }
            }
        }
    }
    let inv = 1.0 / count as f64;
    for g in &mut grad {
        *g *= inv;
    }
    Ok(Image::from_vec_unchecked(x.height(), x.width(), grad))
}
