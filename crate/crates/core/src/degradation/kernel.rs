use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SfarlError};
use crate::grid::{conv2_same, rot180, Boundary, Filter, Image};
use crate::rng::Seeded;

/// A blur kernel: odd-sized, nonnegative, unit sum.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    filter: Filter,
    flipped: Filter,
}

impl Kernel {
    pub fn new(filter: Filter) -> Result<Self> {
        if filter.taps().iter().any(|&t| t < 0.0) {
            return Err(SfarlError::InvalidArgument(
                "blur kernel has negative taps".into(),
            ));
        }
        let sum = filter.sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SfarlError::InvalidArgument(format!(
                "blur kernel must sum to 1, sums to {sum}"
            )));
        }
        let flipped = rot180(&filter);
        Ok(Self { filter, flipped })
    }

    /// Clamps negatives to zero and rescales to unit sum.
    pub fn normalized(size: usize, taps: Vec<f64>) -> Result<Self> {
        let taps: Vec<f64> = taps.into_iter().map(|t| t.max(0.0)).collect();
        let sum: f64 = taps.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            return Err(SfarlError::InvalidArgument(
                "kernel has no positive mass".into(),
            ));
        }
        Self::new(Filter::new(
            size,
            taps.into_iter().map(|t| t / sum).collect(),
        )?)
    }

    pub fn filter(&self) -> &Filter {
        &self.filter
    }

    pub fn flipped(&self) -> &Filter {
        &self.flipped
    }

    pub fn size(&self) -> usize {
        self.filter.size()
    }

    pub fn taps(&self) -> &[f64] {
        self.filter.taps()
    }

    pub fn l1_distance(&self, other: &Kernel) -> f64 {
        assert_eq!(self.size(), other.size());
        self.taps()
            .iter()
            .zip(other.taps())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

pub fn box_kernel(size: usize) -> Kernel {
    Kernel::normalized(size, vec![1.0; size * size]).expect("box kernel is valid")
}

pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Kernel> {
    if !(sigma > 0.0) {
        return Err(SfarlError::InvalidArgument(format!(
            "gaussian sigma must be positive, got {sigma}"
        )));
    }
    let half = (size / 2) as f64;
    let taps = (0..size * size)
        .map(|n| {
            let (a, b) = ((n / size) as f64 - half, (n % size) as f64 - half);
            (-(a * a + b * b) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    Kernel::normalized(size, taps)
}

/// A camera-shake style kernel: a smooth random trajectory of roughly
/// `length` pixels splatted bilinearly onto a `size x size` grid and lightly
/// smoothed, in the manner of recorded motion-blur kernels.
pub fn motion_kernel(size: usize, length: f64, seed: u64) -> Result<Kernel> {
    if size.is_multiple_of(2) || size < 3 {
        return Err(SfarlError::InvalidArgument(format!(
            "motion kernel size must be odd and >= 3, got {size}"
        )));
    }
    let mut rng = Seeded::new(seed).rng();
    let steps = (4.0 * length).ceil().max(4.0) as usize;
    let step_len = length / steps as f64;
    let mut heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut turn = 0.0;
    let mut pts = Vec::with_capacity(steps + 1);
    let (mut px, mut py) = (0.0f64, 0.0f64);
    pts.push((px, py));
    for _ in 0..steps {
        turn = 0.7 * turn + rng.random_range(-0.25..0.25);
        heading += turn;
        px += step_len * heading.cos();
        py += step_len * heading.sin();
        pts.push((px, py));
    }
    let (cx, cy) = pts
        .iter()
        .fold((0.0, 0.0), |(sx, sy), (x, y)| (sx + x, sy + y));
    let (cx, cy) = (cx / pts.len() as f64, cy / pts.len() as f64);
    let half = (size / 2) as f64;
    let limit = half - 1.0;
    let mut taps = vec![0.0; size * size];
    for (x, y) in pts {
        let fx = (x - cx).clamp(-limit, limit) + half;
        let fy = (y - cy).clamp(-limit, limit) + half;
        splat(&mut taps, size, fy, fx, 1.0);
    }
    let raw = Image::new(size, size, taps)?;
    let smooth = conv2_same(&raw, gaussian_kernel(3, 0.5)?.filter(), Boundary::Zero);
    Kernel::normalized(size, smooth.into_vec())
}

/// Bilinear deposit of `mass` at fractional position `(r, c)`.
pub(crate) fn splat(taps: &mut [f64], size: usize, r: f64, c: f64, mass: f64) {
    let (r0, c0) = (r.floor(), c.floor());
    let (fr, fc) = (r - r0, c - c0);
    for (dr, wr) in [(0.0, 1.0 - fr), (1.0, fr)] {
        for (dc, wc) in [(0.0, 1.0 - fc), (1.0, fc)] {
            let (rr, cc) = (r0 + dr, c0 + dc);
            if rr >= 0.0 && cc >= 0.0 && (rr as usize) < size && (cc as usize) < size {
                taps[rr as usize * size + cc as usize] += mass * wr * wc;
            }
        }
    }
}

/// Maximum integer shift (pixels, per axis) at severity 1.
const MAX_SHIFT: f64 = 1.0;
/// Gaussian widening of the kernel at severity 1 (pixels).
const MAX_WIDEN_SIGMA: f64 = 0.8;
/// Additive tap noise at severity 1, relative to the peak tap.
const MAX_TAP_NOISE: f64 = 0.04;

/// Simulates a kernel estimation error: shift, widen, add tap noise, then
/// clamp to nonnegative and renormalize. All three effects scale with
/// `severity`; severity 0 returns the kernel unchanged.
pub fn perturb_kernel(k: &Kernel, severity: f64, seed: u64) -> Result<Kernel> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(SfarlError::InvalidArgument(format!(
            "severity must lie in [0, 1], got {severity}"
        )));
    }
    if severity == 0.0 {
        return Ok(k.clone());
    }
    let size = k.size();
    let mut rng = Seeded::new(seed).rng();
    let max_shift = (MAX_SHIFT * severity).floor() as i64;
    let shift_r = rng.random_range(-max_shift..=max_shift);
    let shift_c = rng.random_range(-max_shift..=max_shift);

    let mut taps = vec![0.0; size * size];
    for r in 0..size as i64 {
        for c in 0..size as i64 {
            let (sr, sc) = (r - shift_r, c - shift_c);
            if (0..size as i64).contains(&sr) && (0..size as i64).contains(&sc) {
                taps[(r * size as i64 + c) as usize] = k.filter().get(sr as usize, sc as usize);
            }
        }
    }
    let widened = {
        let sigma = MAX_WIDEN_SIGMA * severity;
        let width = 2 * (3.0 * sigma).ceil() as usize + 1;
        let g = gaussian_kernel(width.min(size | 1), sigma)?;
        conv2_same(&Image::new(size, size, taps)?, g.filter(), Boundary::Zero)
    };
    let peak = k.taps().iter().copied().fold(0.0, f64::max);
    let noise = Normal::new(0.0, MAX_TAP_NOISE * severity * peak)
        .map_err(|e| SfarlError::InvalidArgument(e.to_string()))?;
    let noisy: Vec<f64> = widened
        .as_slice()
        .iter()
        .map(|&t| t + noise.sample(&mut rng))
        .collect();
    Kernel::normalized(size, noisy)
}
