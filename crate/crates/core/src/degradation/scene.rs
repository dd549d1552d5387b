//! Procedural clean scenes: piecewise-smooth images with edges, shading and
//! a little texture, used where no photographic training data is available.

use rand::Rng;

use crate::error::{Result, SfarlError};
use crate::grid::Image;
use crate::rng::Seeded;

enum Shape {
    Rect {
        top: f64,
        left: f64,
        bottom: f64,
        right: f64,
    },
    Disk {
        ci: f64,
        cj: f64,
        r: f64,
    },
    Stripes {
        freq: f64,
        angle: f64,
        phase: f64,
        ci: f64,
        cj: f64,
        r: f64,
    },
}

/// A `height x width` scene in `[0, 1]` determined by `seed`.
pub fn synth_scene(height: usize, width: usize, seed: u64) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(SfarlError::Dimension("scene must be non-empty".into()));
    }
    let mut rng = Seeded::new(seed).rng();
    let (h, w) = (height as f64, width as f64);
    let base = rng.random_range(0.2..0.8);
    let gi = rng.random_range(-0.3..0.3) / h;
    let gj = rng.random_range(-0.3..0.3) / w;
    let mut img = Image::from_fn(height, width, |i, j| base + gi * i as f64 + gj * j as f64);

    let count = rng.random_range(6..14);
    for _ in 0..count {
        let shape = match rng.random_range(0..3) {
            0 => {
                let top = rng.random_range(-0.2 * h..h);
                let left = rng.random_range(-0.2 * w..w);
                Shape::Rect {
                    top,
                    left,
                    bottom: top + rng.random_range(0.1 * h..0.6 * h),
                    right: left + rng.random_range(0.1 * w..0.6 * w),
                }
            }
            1 => Shape::Disk {
                ci: rng.random_range(0.0..h),
                cj: rng.random_range(0.0..w),
                r: rng.random_range(0.05..0.35) * h.min(w),
            },
            _ => Shape::Stripes {
                freq: rng.random_range(0.15..0.8),
                angle: rng.random_range(0.0..std::f64::consts::PI),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                ci: rng.random_range(0.0..h),
                cj: rng.random_range(0.0..w),
                r: rng.random_range(0.1..0.3) * h.min(w),
            },
        };
        let level = rng.random_range(0.0..1.0);
        let shade_i = rng.random_range(-0.2..0.2) / h;
        let shade_j = rng.random_range(-0.2..0.2) / w;
        let contrast = rng.random_range(0.1..0.3);
        for i in 0..height {
            for j in 0..width {
                let (fi, fj) = (i as f64, j as f64);
                let value = match shape {
                    Shape::Rect {
                        top,
                        left,
                        bottom,
                        right,
                    } => (fi >= top && fi < bottom && fj >= left && fj < right)
                        .then_some(level + shade_i * (fi - top) + shade_j * (fj - left)),
                    Shape::Disk { ci, cj, r } => ((fi - ci).powi(2) + (fj - cj).powi(2) < r * r)
                        .then_some(level + shade_i * (fi - ci) + shade_j * (fj - cj)),
                    Shape::Stripes {
                        freq,
                        angle,
                        phase,
                        ci,
                        cj,
                        r,
                    } => ((fi - ci).powi(2) + (fj - cj).powi(2) < r * r).then(|| {
                        let t = fi * angle.cos() + fj * angle.sin();
                        img.get(i, j) + contrast * (freq * t + phase).sin()
                    }),
                };
                if let Some(v) = value {
                    img.set(i, j, v);
                }
            }
        }
    }
    Ok(img.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_seeded_and_bounded() {
        let a = synth_scene(32, 40, 7).unwrap();
        assert_eq!(a, synth_scene(32, 40, 7).unwrap());
        assert_ne!(a, synth_scene(32, 40, 8).unwrap());
        assert_eq!(a.dims(), (32, 40));
        assert!(a.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn scenes_have_structure() {
        let a = synth_scene(64, 64, 3).unwrap();
        let mean = a.mean();
        let var = a.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / a.len() as f64;
        assert!(var > 1e-3, "variance {var}");
        assert!(synth_scene(0, 4, 1).is_err());
    }
}
