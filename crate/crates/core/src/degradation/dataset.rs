//! Seeded construction of whole training sets from clean images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    motion_kernel, synth_deconv_pair, synth_denoise_pair, synth_multi_degrade, synth_rain_pair,
    Kernel, RainMode, RainParams, TrainingSample,
};
use crate::error::{Result, SfarlError};
use crate::grid::Image;
use crate::model::Task;
use crate::rng::Seeded;

/// Which degradation a dataset simulates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Deconv,
    MultiDegrade,
    Rain,
    Denoise,
}

impl DatasetKind {
    /// The restoration task a model trained on this data solves.
    pub fn task(self) -> Task {
        match self {
            DatasetKind::Deconv | DatasetKind::MultiDegrade => Task::Deconv,
            DatasetKind::Rain => Task::Rain,
            DatasetKind::Denoise => Task::Denoise,
        }
    }
}

/// Generator settings for a whole dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Degraded variants generated per clean image.
    pub variants: usize,
    pub sigma: f64,
    /// Kernel-estimate error severity in `[0, 1]` (deconvolution).
    pub severity: f64,
    /// Size of generated motion kernels when no kernel is supplied.
    pub kernel_size: usize,
    pub saturation_gain: f64,
    pub jpeg_quality: u8,
    /// Rain orientations are spread evenly over this range, in degrees.
    pub rain_angles: (f64, f64),
    pub rain_density: (f64, f64),
    pub rain_length: (usize, usize),
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind, seed: u64) -> Self {
        Self {
            kind,
            variants: if kind == DatasetKind::Rain { 7 } else { 1 },
            sigma: match kind {
                DatasetKind::Denoise => 25.0 / 255.0,
                _ => 0.01,
            },
            severity: 0.5,
            kernel_size: 9,
            saturation_gain: 1.2,
            jpeg_quality: 90,
            rain_angles: (60.0, 90.0),
            rain_density: (0.003, 0.008),
            rain_length: (7, 15),
            seed,
        }
    }
}

/// Degrades every clean image `variants` times. Sample `(i, v)` uses a seed
/// derived from `(spec.seed, i, v)`, so any subset can be regenerated alone.
/// `kernel` overrides the per-image random motion kernel.
pub fn synth_dataset(
    clean: &[Image],
    spec: &DatasetSpec,
    kernel: Option<&Kernel>,
) -> Result<Vec<TrainingSample>> {
    if spec.variants == 0 {
        return Err(SfarlError::InvalidArgument(
            "need at least one variant".into(),
        ));
    }
    let root = Seeded::new(spec.seed);
    let mut out = Vec::with_capacity(clean.len() * spec.variants);
    for (i, x) in clean.iter().enumerate() {
        let image_seed = root.derive(i as u64);
        let true_kernel = match (spec.kind, kernel) {
            (DatasetKind::Deconv | DatasetKind::MultiDegrade, Some(k)) => Some(k.clone()),
            (DatasetKind::Deconv | DatasetKind::MultiDegrade, None) => {
                let mut rng = image_seed.derive(u64::MAX).rng();
                let length = rng.random_range(0.4..0.9) * spec.kernel_size as f64;
                Some(motion_kernel(
                    spec.kernel_size,
                    length,
                    image_seed.derive(u64::MAX - 1).seed(),
                )?)
            }
            _ => None,
        };
        for v in 0..spec.variants {
            let seed = image_seed.derive(v as u64).seed();
            let sample = match spec.kind {
                DatasetKind::Deconv => synth_deconv_pair(
                    x,
                    true_kernel.as_ref().expect("kernel"),
                    spec.severity,
                    spec.sigma,
                    seed,
                )?,
                DatasetKind::MultiDegrade => synth_multi_degrade(
                    x,
                    true_kernel.as_ref().expect("kernel"),
                    spec.sigma,
                    spec.saturation_gain,
                    spec.jpeg_quality,
                    seed,
                )?,
                DatasetKind::Denoise => synth_denoise_pair(x, spec.sigma, seed)?,
                DatasetKind::Rain => {
                    let (lo, hi) = spec.rain_angles;
                    let angle = if spec.variants == 1 {
                        0.5 * (lo + hi)
                    } else {
                        lo + (hi - lo) * v as f64 / (spec.variants - 1) as f64
                    };
                    let mut rng = Seeded::new(seed).derive(0x7061_7261).rng();
                    let params = RainParams {
                        angle_deg: angle,
                        density: rng.random_range(spec.rain_density.0..=spec.rain_density.1),
                        length: rng.random_range(spec.rain_length.0..=spec.rain_length.1),
                        mode: RainMode::Screen,
                    };
                    synth_rain_pair(x, params, seed)?
                }
            };
            out.push(sample);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::{synth_scene, GeneratorParams};

    fn scenes(n: usize) -> Vec<Image> {
        (0..n)
            .map(|i| synth_scene(24, 24, i as u64).unwrap())
            .collect()
    }

    #[test]
    fn rain_variants_span_the_angle_range() {
        let data =
            synth_dataset(&scenes(2), &DatasetSpec::new(DatasetKind::Rain, 1), None).unwrap();
        assert_eq!(data.len(), 14);
        let angles: Vec<f64> = data[..7]
            .iter()
            .map(|s| match &s.meta.params {
                GeneratorParams::Rain(p) => p.angle_deg,
                other => panic!("unexpected {other:?}"),
            })
            .collect();
        assert_eq!(angles.first(), Some(&60.0));
        assert_eq!(angles.last(), Some(&90.0));
        for s in &data {
            assert!(s
                .degraded
                .as_slice()
                .iter()
                .zip(s.ground_truth.as_slice())
                .all(|(y, x)| y >= x));
        }
    }

    #[test]
    fn datasets_are_seeded() {
        for kind in [
            DatasetKind::Deconv,
            DatasetKind::MultiDegrade,
            DatasetKind::Rain,
            DatasetKind::Denoise,
        ] {
            let spec = DatasetSpec::new(kind, 5);
            let a = synth_dataset(&scenes(2), &spec, None).unwrap();
            let b = synth_dataset(&scenes(2), &spec, None).unwrap();
            assert_eq!(a, b, "{kind:?}");
            let c = synth_dataset(&scenes(2), &DatasetSpec::new(kind, 6), None).unwrap();
            assert_ne!(a, c, "{kind:?}");
        }
    }

    #[test]
    fn zero_severity_keeps_the_true_kernel() {
        let mut spec = DatasetSpec::new(DatasetKind::Deconv, 2);
        spec.severity = 0.0;
        let data = synth_dataset(&scenes(1), &spec, None).unwrap();
        let GeneratorParams::Deconv { kernel, .. } = &data[0].meta.params else {
            panic!("deconv params expected");
        };
        assert_eq!(data[0].op.kernel().unwrap().taps(), kernel.as_slice());
    }
}
