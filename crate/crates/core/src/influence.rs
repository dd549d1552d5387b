//! Gaussian-RBF influence functions `phi(z) = sum_j w_j exp(-gamma/2 (z - mu_j)^2)`
//! with equally spaced, fixed means and a shared precision.
//!
//! Two evaluation paths exist. The reference path ([`rbf_eval`],
//! [`rbf_deriv`], [`rbf_basis_matrix`]) sums every term with its own `exp`.
//! The fast path ([`RbfMixture::value_and_deriv`] and friends) only visits
//! means within a window where the Gaussian exceeds `exp(-40)` of its peak and
//! generates consecutive terms by a multiplicative recurrence, which is exact
//! up to rounding because the means are equally spaced.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SfarlError};
use crate::grid::Image;

/// Log-magnitude below which the fast path drops a term.
const WINDOW_LOG_CUTOFF: f64 = 40.0;

/// Means, spacing and precision shared by every function of one term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfGeometry {
    count: usize,
    radius: f64,
    gamma: f64,
}

impl RbfGeometry {
    /// `count` means equally spaced on `[-radius, radius]` with the given precision.
    pub fn new(count: usize, radius: f64, gamma: f64) -> Result<Self> {
        if count < 2 {
            return Err(SfarlError::InvalidArgument(format!(
                "need at least two RBF means, got {count}"
            )));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(SfarlError::InvalidArgument(format!(
                "RBF radius must be positive, got {radius}"
            )));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(SfarlError::InvalidArgument(format!(
                "RBF precision must be positive, got {gamma}"
            )));
        }
        Ok(Self {
            count,
            radius,
            gamma,
        })
    }

    /// Precision `1/spacing^2`: each Gaussian's standard deviation equals the spacing.
    pub fn with_default_precision(count: usize, radius: f64) -> Result<Self> {
        if count < 2 {
            return Err(SfarlError::InvalidArgument(format!(
                "need at least two RBF means, got {count}"
            )));
        }
        let spacing = 2.0 * radius / (count - 1) as f64;
        Self::new(count, radius, 1.0 / (spacing * spacing))
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.radius / (self.count - 1) as f64
    }

    #[inline]
    pub fn mean(&self, j: usize) -> f64 {
        -self.radius + j as f64 * self.spacing()
    }

    pub fn means(&self) -> Vec<f64> {
        (0..self.count).map(|j| self.mean(j)).collect()
    }

    /// `exp(-gamma/2 (z - mu_j)^2)` for one mean.
    #[inline]
    pub fn kernel(&self, z: f64, j: usize) -> f64 {
        let d = z - self.mean(j);
        (-0.5 * self.gamma * d * d).exp()
    }

    /// `exp(-gamma spacing^2)`, the per-step decay of successive recurrence ratios.
    #[inline]
    fn step(&self) -> f64 {
        let delta = self.spacing();
        (-self.gamma * delta * delta).exp()
    }

    /// Visits `(j, exp(-gamma/2 (z - mu_j)^2))` for every mean within the window.
    #[inline]
    pub fn for_each_active(&self, z: f64, mut f: impl FnMut(usize, f64)) {
        let delta = self.spacing();
        let q = self.gamma * delta * delta;
        let reach = (2.0 * WINDOW_LOG_CUTOFF / q).sqrt();
        let t = (z + self.radius) / delta;
        let last = (self.count - 1) as f64;
        if !t.is_finite() || t < -reach || t > last + reach {
            return;
        }
        let c = t.round().clamp(0.0, last);
        let lo = (t - reach).ceil().max(0.0) as usize;
        let hi = (t + reach).floor().min(last) as usize;
        let ci = c as usize;
        let d = t - c;
        let g_c = (-0.5 * q * d * d).exp();
        if g_c == 0.0 {
            return;
        }
        let step = self.step();
        if (lo..=hi).contains(&ci) {
            f(ci, g_c);
        }
        // upward: g_{j+1} = g_j * exp(q (t - j) - q/2)
        let up = (q * d - 0.5 * q).exp();
        let mut g = g_c;
        let mut ratio = up;
        for j in ci + 1..=hi {
            g *= ratio;
            ratio *= step;
            f(j, g);
        }
        // downward: g_{j-1} = g_j * exp(-q (t - j) - q/2), whose first ratio
        // is exp(-q) / up
        let mut g = g_c;
        let mut ratio = step / up;
        for j in (lo..ci).rev() {
            g *= ratio;
            ratio *= step;
            f(j, g);
        }
    }
}

/// One influence function: a weighted sum of the geometry's Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct RbfMixture {
    geometry: RbfGeometry,
    weights: Vec<f64>,
}

impl RbfMixture {
    pub fn new(geometry: RbfGeometry, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != geometry.count {
            return Err(SfarlError::shape(
                format!("{} RBF weights", geometry.count),
                weights.len(),
            ));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(SfarlError::InvalidArgument("non-finite RBF weight".into()));
        }
        Ok(Self { geometry, weights })
    }

    pub fn zeros(geometry: RbfGeometry) -> Self {
        Self {
            geometry,
            weights: vec![0.0; geometry.count],
        }
    }

    pub fn geometry(&self) -> &RbfGeometry {
        &self.geometry
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Reference evaluation at one point.
    pub fn eval(&self, z: f64) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .map(|(j, w)| w * self.geometry.kernel(z, j))
            .sum()
    }

    /// Reference derivative at one point.
    pub fn deriv(&self, z: f64) -> f64 {
        -self.geometry.gamma
            * self
                .weights
                .iter()
                .enumerate()
                .map(|(j, w)| w * self.geometry.kernel(z, j) * (z - self.geometry.mean(j)))
                .sum::<f64>()
    }

    /// Windowed evaluation of `(phi(z), phi'(z))`.
    #[inline]
    pub fn value_and_deriv(&self, z: f64) -> (f64, f64) {
        let geom = &self.geometry;
        let delta = geom.spacing();
        // z - mu_j = delta (t - j)
        let t = (z + geom.radius) / delta;
        let mut value = 0.0;
        let mut slope = 0.0;
        geom.for_each_active(z, |j, g| {
            let wg = self.weights[j] * g;
            value += wg;
            slope += wg * (t - j as f64);
        });
        (value, -geom.gamma * delta * slope)
    }

    /// Windowed evaluation of `phi` over a slice.
    pub fn eval_into(&self, z: &[f64], out: &mut [f64]) {
        let geom = &self.geometry;
        for (o, &zi) in out.iter_mut().zip(z) {
            let mut value = 0.0;
            geom.for_each_active(zi, |j, g| value += self.weights[j] * g);
            *o = value;
        }
    }

    /// Adds `G(z)^T s` to `grad`, i.e. the gradient of `<phi(z), s>` with
    /// respect to the weights.
    pub fn accumulate_weight_grad(&self, z: &[f64], s: &[f64], grad: &mut [f64]) {
        for (&zi, &si) in z.iter().zip(s) {
            if si == 0.0 {
                continue;
            }
            self.geometry.for_each_active(zi, |j, g| grad[j] += g * si);
        }
    }
}

/// Elementwise `phi(z)` (reference path).
pub fn rbf_eval(mix: &RbfMixture, z: &Image) -> Image {
    z.map(|v| mix.eval(v))
}

/// Elementwise `phi'(z)` (reference path).
pub fn rbf_deriv(mix: &RbfMixture, z: &Image) -> Image {
    z.map(|v| mix.deriv(v))
}

/// `G[n][j] = exp(-gamma/2 (b_n - mu_j)^2)`, so that `phi(b) = G(b) w`.
pub fn rbf_basis_matrix(geometry: &RbfGeometry, b: &[f64]) -> Vec<Vec<f64>> {
    b.iter()
        .map(|&bn| {
            (0..geometry.count)
                .map(|j| geometry.kernel(bn, j))
                .collect()
        })
        .collect()
}

/// Least-squares weights reproducing `target` at the RBF means.
///
/// The system is square, so this interpolates the target on the means.
/// Between means the error stays small in the interior but grows towards
/// `±radius`, where the basis is one-sided.
pub fn fit_weights(geometry: &RbfGeometry, target: impl Fn(f64) -> f64) -> Vec<f64> {
    let points = geometry.means();
    let n = points.len();
    let g = DMatrix::from_fn(n, geometry.count, |r, j| geometry.kernel(points[r], j));
    let rhs = DVector::from_iterator(n, points.iter().map(|&z| target(z)));
    let svd = g.svd(true, true);
    let w = svd
        .solve(&rhs, 1e-12)
        .expect("SVD was computed with both factors");
    w.iter().copied().collect()
}
