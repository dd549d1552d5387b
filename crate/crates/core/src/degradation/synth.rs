use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageFormat};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::kernel::splat;
use super::{apply, gaussian_kernel, perturb_kernel, DegradationOp, Kernel};
use crate::error::{Result, SfarlError};
use crate::grid::{conv2_same, Boundary, Filter, Image};
use crate::rng::Seeded;

/// Codec used for the JPEG stage of the multi-degradation chain.
pub const JPEG_CODEC: &str = "image-rs 0.25 baseline jpeg, 8-bit luma";

// Stream ids for the sub-generators of one sample.
const STREAM_NOISE: u64 = 1;
const STREAM_KERNEL: u64 = 2;
const STREAM_STREAKS: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RainMode {
    Additive,
    Screen,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RainParams {
    pub angle_deg: f64,
    pub density: f64,
    pub length: usize,
    pub mode: RainMode,
}

/// Everything a generator consumed, besides the clean image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum GeneratorParams {
    Deconv {
        kernel_size: usize,
        kernel: Vec<f64>,
        severity: f64,
        sigma: f64,
    },
    MultiDegrade {
        kernel_size: usize,
        kernel: Vec<f64>,
        sigma: f64,
        saturation_gain: f64,
        jpeg_quality: u8,
        codec: String,
    },
    Rain(RainParams),
    Denoise {
        sigma: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub params: GeneratorParams,
    pub seed: u64,
}

/// A degraded/clean pair together with the operator the restorer is given.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub degraded: Image,
    pub ground_truth: Image,
    pub op: DegradationOp,
    pub meta: SampleMeta,
}

fn gaussian_noise(h: usize, w: usize, sigma: f64, seed: Seeded) -> Result<Image> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(SfarlError::InvalidArgument(format!(
            "noise sigma must be nonnegative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(Image::zeros(h, w));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| SfarlError::InvalidArgument(e.to_string()))?;
    let mut rng = seed.rng();
    Ok(Image::from_fn(h, w, |_, _| normal.sample(&mut rng)))
}

/// `y = k_true * x + n`; the restorer receives a perturbed kernel.
pub fn synth_deconv_pair(
    x: &Image,
    k_true: &Kernel,
    severity: f64,
    sigma: f64,
    seed: u64,
) -> Result<TrainingSample> {
    let s = Seeded::new(seed);
    let blurred = apply(&DegradationOp::blur(k_true.clone()), x);
    let noise = gaussian_noise(x.height(), x.width(), sigma, s.derive(STREAM_NOISE))?;
    let estimate = perturb_kernel(k_true, severity, s.derive(STREAM_KERNEL).seed())?;
    Ok(TrainingSample {
        degraded: blurred.add(&noise),
        ground_truth: x.clone(),
        op: DegradationOp::blur(estimate),
        meta: SampleMeta {
            params: GeneratorParams::Deconv {
                kernel_size: k_true.size(),
                kernel: k_true.taps().to_vec(),
                severity,
                sigma,
            },
            seed,
        },
    })
}

/// `y = x + n` with an identity operator.
pub fn synth_denoise_pair(x: &Image, sigma: f64, seed: u64) -> Result<TrainingSample> {
    let noise = gaussian_noise(
        x.height(),
        x.width(),
        sigma,
        Seeded::new(seed).derive(STREAM_NOISE),
    )?;
    Ok(TrainingSample {
        degraded: x.add(&noise),
        ground_truth: x.clone(),
        op: DegradationOp::Identity,
        meta: SampleMeta {
            params: GeneratorParams::Denoise { sigma },
            seed,
        },
    })
}

/// A procedural rain layer in `[0, 1]`.
///
/// Sparse Bernoulli impulses with random amplitudes are smeared along
/// `angle_deg` (degrees counter-clockwise from the horizontal axis, so 90 is
/// vertical) over `length` pixels, lightly smoothed and clipped.
pub fn synth_rain_streaks(
    h: usize,
    w: usize,
    angle_deg: f64,
    density: f64,
    length: usize,
    seed: u64,
) -> Result<Image> {
    if h == 0 || w == 0 {
        return Err(SfarlError::Dimension(format!("rain layer {h}x{w}")));
    }
    if !(0.0..180.0).contains(&angle_deg) {
        return Err(SfarlError::InvalidArgument(format!(
            "rain angle must lie in [0, 180), got {angle_deg}"
        )));
    }
    if !(density > 0.0 && density < 1.0) {
        return Err(SfarlError::InvalidArgument(format!(
            "rain density must lie in (0, 1), got {density}"
        )));
    }
    if length == 0 {
        return Err(SfarlError::InvalidArgument(
            "rain streak length must be >= 1".into(),
        ));
    }
    let mut rng = Seeded::new(seed).rng();
    let impulses = Image::from_fn(h, w, |_, _| {
        if rng.random::<f64>() < density {
            rng.random_range(0.4..1.0)
        } else {
            0.0
        }
    });
    let streak = line_filter(angle_deg, length);
    let smeared = conv2_same(&impulses, &streak, Boundary::Zero);
    let smooth = conv2_same(&smeared, gaussian_kernel(3, 0.6)?.filter(), Boundary::Zero);
    Ok(smooth.clamp(0.0, 1.0))
}

/// Bilinear line of `length` unit samples through the center, scaled so the
/// peak tap is 1.
fn line_filter(angle_deg: f64, length: usize) -> Filter {
    let size = length | 1;
    let half = (size / 2) as f64;
    let theta = angle_deg.to_radians();
    let (dc, dr) = (theta.cos(), -theta.sin());
    let mut taps = vec![0.0; size * size];
    let span = (length - 1) as f64 / 2.0;
    for n in 0..length {
        let t = n as f64 - span;
        splat(&mut taps, size, half + t * dr, half + t * dc, 1.0);
    }
    let peak = taps.iter().copied().fold(0.0, f64::max);
    Filter::new(size, taps.into_iter().map(|t| t / peak).collect())
        .expect("line filter is finite and odd-sized")
}

/// Combines a scene with a rain layer.
pub fn composite_rain(x: &Image, rain: &Image, mode: RainMode) -> Result<Image> {
    x.check_dims(rain)?;
    Ok(match mode {
        RainMode::Additive => x.zip_map(rain, |a, r| (a + r).clamp(0.0, 1.0)),
        RainMode::Screen => x.zip_map(rain, |a, r| a - a * r + r),
    })
}

/// `y = composite(x, streaks)`, identity operator.
pub fn synth_rain_pair(x: &Image, params: RainParams, seed: u64) -> Result<TrainingSample> {
    let streaks = synth_rain_streaks(
        x.height(),
        x.width(),
        params.angle_deg,
        params.density,
        params.length,
        Seeded::new(seed).derive(STREAM_STREAKS).seed(),
    )?;
    Ok(TrainingSample {
        degraded: composite_rain(x, &streaks, params.mode)?,
        ground_truth: x.clone(),
        op: DegradationOp::Identity,
        meta: SampleMeta {
            params: GeneratorParams::Rain(params),
            seed,
        },
    })
}

fn jpeg_round_trip(x: &Image, quality: u8) -> Result<Image> {
    let bytes: Vec<u8> = x
        .as_slice()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).encode(
        &bytes,
        x.width() as u32,
        x.height() as u32,
        ExtendedColorType::L8,
    )?;
    let decoded = image::load(Cursor::new(buf), ImageFormat::Jpeg)?.to_luma8();
    let data = decoded.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Image::new(x.height(), x.width(), data)
}

/// `y = jpeg(clip(gain * (k * x) + n, 0, 1), quality)`; the restorer only knows the blur.
pub fn synth_multi_degrade(
    x: &Image,
    k: &Kernel,
    sigma: f64,
    saturation_gain: f64,
    jpeg_quality: u8,
    seed: u64,
) -> Result<TrainingSample> {
    if !(1..=100).contains(&jpeg_quality) {
        return Err(SfarlError::InvalidArgument(format!(
            "jpeg quality must lie in [1, 100], got {jpeg_quality}"
        )));
    }
    let op = DegradationOp::blur(k.clone());
    let noise = gaussian_noise(
        x.height(),
        x.width(),
        sigma,
        Seeded::new(seed).derive(STREAM_NOISE),
    )?;
    let exposed = apply(&op, x).zip_map(&noise, |b, n| (saturation_gain * b + n).clamp(0.0, 1.0));
    Ok(TrainingSample {
        degraded: jpeg_round_trip(&exposed, jpeg_quality)?,
        ground_truth: x.clone(),
        op,
        meta: SampleMeta {
            params: GeneratorParams::MultiDegrade {
                kernel_size: k.size(),
                kernel: k.taps().to_vec(),
                sigma,
                saturation_gain,
                jpeg_quality,
                codec: JPEG_CODEC.to_string(),
            },
            seed,
        },
    })
}

/// Re-runs the generator recorded in `meta` on the clean image.
pub fn regenerate(x: &Image, meta: &SampleMeta) -> Result<TrainingSample> {
    match &meta.params {
        GeneratorParams::Deconv {
            kernel_size,
            kernel,
            severity,
            sigma,
        } => {
            let k = Kernel::new(Filter::new(*kernel_size, kernel.clone())?)?;
            synth_deconv_pair(x, &k, *severity, *sigma, meta.seed)
        }
        GeneratorParams::MultiDegrade {
            kernel_size,
            kernel,
            sigma,
            saturation_gain,
            jpeg_quality,
            ..
        } => {
            let k = Kernel::new(Filter::new(*kernel_size, kernel.clone())?)?;
            synth_multi_degrade(x, &k, *sigma, *saturation_gain, *jpeg_quality, meta.seed)
        }
        GeneratorParams::Rain(p) => synth_rain_pair(x, *p, meta.seed),
        GeneratorParams::Denoise { sigma } => synth_denoise_pair(x, *sigma, meta.seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::{box_kernel, motion_kernel};

    fn smooth_scene(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |i, j| {
            0.5 + 0.3 * ((i as f64) * 0.3).sin() * ((j as f64) * 0.2).cos()
        })
    }

    #[test]
    fn exact_kernel_and_noiseless_at_zero_settings() {
        let x = smooth_scene(16, 16);
        let k = box_kernel(3);
        let s = synth_deconv_pair(&x, &k, 0.0, 0.0, 5).unwrap();
        assert_eq!(s.op, DegradationOp::blur(k.clone()));
        assert_eq!(s.degraded, apply(&DegradationOp::blur(k), &x));
    }

    #[test]
    fn noise_level_on_unit_scale() {
        let x = Image::filled(128, 128, 0.5);
        let sigma = 0.25 / 255.0;
        let s = synth_denoise_pair(&x, sigma, 3).unwrap();
        let r = s.degraded.sub(&x);
        let var = r.as_slice().iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
        let std = var.sqrt();
        assert!((std - 9.8e-4).abs() < 5e-5, "std {std}");
    }

    #[test]
    fn deconv_noise_std_matches_sigma() {
        let x = Image::filled(128, 128, 0.5);
        let k = box_kernel(3);
        let sigma = 0.25 / 255.0;
        let s = synth_deconv_pair(&x, &k, 0.3, sigma, 3).unwrap();
        let r = s.degraded.sub(&apply(&DegradationOp::blur(k), &x));
        let std = (r.as_slice().iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt();
        assert!((std - sigma).abs() < 0.05 * sigma);
    }

    #[test]
    fn generators_regenerate_bit_exactly() {
        let x = smooth_scene(24, 20);
        let k = motion_kernel(9, 5.0, 1).unwrap();
        let samples = [
            synth_deconv_pair(&x, &k, 0.5, 0.01, 11).unwrap(),
            synth_multi_degrade(&x, &k, 0.01, 1.2, 80, 12).unwrap(),
            synth_rain_pair(
                &x,
                RainParams {
                    angle_deg: 75.0,
                    density: 0.02,
                    length: 9,
                    mode: RainMode::Screen,
                },
                13,
            )
            .unwrap(),
            synth_denoise_pair(&x, 0.1, 14).unwrap(),
        ];
        for s in samples {
            let again = regenerate(&x, &s.meta).unwrap();
            assert_eq!(again, s);
        }
    }

    #[test]
    fn vanishing_density_gives_empty_layer() {
        let r = synth_rain_streaks(32, 32, 80.0, 1e-12, 9, 1).unwrap();
        assert!(r.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rain_is_deterministic_and_bounded() {
        let a = synth_rain_streaks(40, 40, 70.0, 0.02, 11, 9).unwrap();
        let b = synth_rain_streaks(40, 40, 70.0, 0.02, 11, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.sum() > 0.0);
    }

    #[test]
    fn rain_rejects_bad_ranges() {
        assert!(synth_rain_streaks(8, 8, 180.0, 0.1, 3, 0).is_err());
        assert!(synth_rain_streaks(8, 8, 90.0, 0.0, 3, 0).is_err());
        assert!(synth_rain_streaks(8, 8, 90.0, 1.0, 3, 0).is_err());
        assert!(synth_rain_streaks(8, 8, 90.0, 0.1, 0, 0).is_err());
    }

    /// Bounding box of connected supports, aggregated over the layer.
    fn support_extents(layer: &Image, threshold: f64) -> (f64, f64) {
        let (h, w) = layer.dims();
        let mut seen = vec![false; h * w];
        let (mut tot_v, mut tot_h, mut count) = (0.0, 0.0, 0.0);
        for start in 0..h * w {
            if seen[start] || layer.as_slice()[start] <= threshold {
                continue;
            }
            let mut stack = vec![start];
            seen[start] = true;
            let (mut r0, mut r1, mut c0, mut c1) = (h, 0, w, 0);
            while let Some(p) = stack.pop() {
                let (r, c) = (p / w, p % w);
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
                for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if !seen[q] && layer.as_slice()[q] > threshold {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
            tot_v += (r1 - r0 + 1) as f64;
            tot_h += (c1 - c0 + 1) as f64;
            count += 1.0;
        }
        (tot_v / count, tot_h / count)
    }

    #[test]
    fn vertical_streaks_are_elongated_vertically() {
        for seed in 0..20 {
            let layer = synth_rain_streaks(64, 64, 90.0, 0.004, 9, seed).unwrap();
            let (v, h) = support_extents(&layer, 0.1);
            assert!(v > h, "seed {seed}: vertical {v} horizontal {h}");
        }
    }

    #[test]
    fn composite_rules() {
        let x = Image::filled(3, 3, 0.5);
        let zero = Image::zeros(3, 3);
        let one = Image::filled(3, 3, 1.0);
        for mode in [RainMode::Additive, RainMode::Screen] {
            assert_eq!(composite_rain(&x, &zero, mode).unwrap(), x);
        }
        let y = composite_rain(&x, &one, RainMode::Screen).unwrap();
        assert!(y.as_slice().iter().all(|v| *v == 1.0));
        let y = composite_rain(&x, &Image::filled(3, 3, 0.2), RainMode::Screen).unwrap();
        assert!((y.get(1, 1) - 0.6).abs() < 1e-15);
        assert!(composite_rain(&x, &Image::zeros(2, 3), RainMode::Screen).is_err());
    }

    proptest::proptest! {
        #[test]
        fn screen_stays_in_range(a in 0.0f64..=1.0, r in 0.0f64..=1.0) {
            let x = Image::filled(1, 1, a);
            let rain = Image::filled(1, 1, r);
            let y = composite_rain(&x, &rain, RainMode::Screen).unwrap().get(0, 0);
            proptest::prop_assert!((0.0..=1.0).contains(&y));
            proptest::prop_assert!(y >= r - 1e-15);
            proptest::prop_assert!(y >= a * (1.0 - r) - 1e-15);
        }
    }

    #[test]
    fn jpeg_round_trip_error_at_full_quality() {
        let x = smooth_scene(48, 48);
        let k = box_kernel(3);
        let s = synth_multi_degrade(&x, &k, 0.0, 1.0, 100, 1).unwrap();
        let clean = apply(&DegradationOp::blur(k), &x);
        let err = s.degraded.max_abs_diff(&clean);
        assert!(err <= 2.0 / 255.0, "round trip error {err}");
    }

    #[test]
    fn saturation_clips_bright_images() {
        let x = Image::from_fn(32, 32, |i, j| 0.7 + 0.3 * ((i + j) % 2) as f64);
        let s = synth_multi_degrade(&x, &box_kernel(3), 0.0, 1.2, 95, 1).unwrap();
        let clipped = s.degraded.as_slice().iter().filter(|&&v| v >= 1.0).count();
        assert!(clipped > 0);
        assert!(synth_multi_degrade(&x, &box_kernel(3), 0.0, 1.0, 0, 1).is_err());
    }
}
