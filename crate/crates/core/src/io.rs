//! Image, kernel and dataset-manifest files.
//!
//! Images are exchanged as PNG (8- or 16-bit) or binary PGM and mapped to
//! `[0, 1]`. Writers always emit 16 bits per sample; values outside `[0, 1]`
//! are clipped. Color images are handled as separate channels.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::degradation::{DegradationOp, Kernel, SampleMeta};
use crate::error::{Result, SfarlError};
use crate::grid::Image;
use crate::model::Task;
use crate::trainer::Pair;

/// Reads an image as one (gray) or three (RGB) channels in `[0, 1]`.
/// Alpha is discarded.
pub fn read_channels(path: &Path) -> Result<Vec<Image>> {
    let dynamic = image::open(path)?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    let gray = matches!(
        dynamic,
        DynamicImage::ImageLuma8(_)
            | DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA8(_)
            | DynamicImage::ImageLumaA16(_)
    );
    if gray {
        let buf = dynamic.into_luma16();
        let data = buf
            .as_raw()
            .iter()
            .map(|&v| f64::from(v) / 65535.0)
            .collect();
        return Ok(vec![Image::new(h, w, data)?]);
    }
    let buf = dynamic.into_rgb16();
    (0..3)
        .map(|c| {
            let data = buf
                .as_raw()
                .chunks_exact(3)
                .map(|px| f64::from(px[c]) / 65535.0)
                .collect();
            Image::new(h, w, data)
        })
        .collect()
}

/// Reads a single-channel image; color inputs are rejected.
pub fn read_gray(path: &Path) -> Result<Image> {
    let mut channels = read_channels(path)?;
    if channels.len() != 1 {
        return Err(SfarlError::Format(format!(
            "{} has {} channels, expected a grayscale image",
            path.display(),
            channels.len()
        )));
    }
    Ok(channels.remove(0))
}

fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Writes one (gray) or three (RGB) channels as a 16-bit PNG or PGM,
/// chosen by the file extension.
pub fn write_channels(path: &Path, channels: &[Image]) -> Result<()> {
    let first = channels
        .first()
        .ok_or_else(|| SfarlError::InvalidArgument("no channels to write".into()))?;
    for c in channels {
        first.check_dims(c)?;
    }
    let (h, w) = first.dims();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let dynamic = match channels.len() {
        1 => {
            let raw: Vec<u16> = first.as_slice().iter().map(|&v| quantize(v)).collect();
            DynamicImage::ImageLuma16(
                ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, raw)
                    .expect("buffer length matches dimensions"),
            )
        }
        3 => {
            let mut raw = Vec::with_capacity(3 * h * w);
            for n in 0..h * w {
                raw.extend(channels.iter().map(|c| quantize(c.as_slice()[n])));
            }
            DynamicImage::ImageRgb16(
                ImageBuffer::<Rgb<u16>, _>::from_raw(w as u32, h as u32, raw)
                    .expect("buffer length matches dimensions"),
            )
        }
        n => {
            return Err(SfarlError::InvalidArgument(format!(
                "can write 1 or 3 channels, got {n}"
            )))
        }
    };
    match ext.as_str() {
        "png" => dynamic.save_with_format(path, image::ImageFormat::Png)?,
        "pgm" | "ppm" | "pnm" => write_pnm16(path, channels)?,
        _ => {
            return Err(SfarlError::InvalidArgument(format!(
                "unsupported image extension for {}",
                path.display()
            )))
        }
    }
    Ok(())
}

/// Binary PGM/PPM with maxval 65535 (big-endian samples).
fn write_pnm16(path: &Path, channels: &[Image]) -> Result<()> {
    let (h, w) = channels[0].dims();
    let magic = if channels.len() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n65535\n").into_bytes();
    for n in 0..h * w {
        for c in channels {
            out.extend_from_slice(&quantize(c.as_slice()[n]).to_be_bytes());
        }
    }
    fs::write(path, out).map_err(|e| SfarlError::io(path, e))
}

pub fn write_gray(path: &Path, image: &Image) -> Result<()> {
    write_channels(path, std::slice::from_ref(image))
}

/// Parses a kernel given as rows of whitespace-separated decimals. The grid
/// must be square with odd side; it is clipped to nonnegative values and
/// rescaled to unit sum.
pub fn parse_kernel_text(text: &str) -> Result<Kernel> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split(|c: char| c.is_whitespace() || c == ',')
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| SfarlError::Format(format!("bad kernel value {t:?}")))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let size = rows.len();
    if size == 0 || rows.iter().any(|r| r.len() != size) {
        return Err(SfarlError::Format("kernel grid must be square".into()));
    }
    Kernel::normalized(size, rows.into_iter().flatten().collect())
}

pub fn read_kernel_text(path: &Path) -> Result<Kernel> {
    let text = fs::read_to_string(path).map_err(|e| SfarlError::io(path, e))?;
    parse_kernel_text(&text)
}

pub fn format_kernel_text(kernel: &Kernel) -> String {
    let k = kernel.size();
    let mut out = String::new();
    for row in kernel.taps().chunks(k) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_kernel_text(path: &Path, kernel: &Kernel) -> Result<()> {
    fs::write(path, format_kernel_text(kernel)).map_err(|e| SfarlError::io(path, e))
}

pub const MANIFEST_FORMAT: &str = "sfarl-manifest";
pub const MANIFEST_VERSION: u32 = 1;

/// First line of a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub task: Task,
    pub seed: u64,
    pub producer: String,
    /// Free-form generator settings.
    pub config: serde_json::Value,
}

/// One sample; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub degraded: String,
    pub ground_truth: String,
    /// Kernel the restorer is given (deconvolution-like tasks).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<SampleMeta>,
    /// Held-out samples are excluded from training.
    #[serde(default)]
    pub held_out: bool,
}

/// A dataset manifest stored as JSON lines: a header line, then one line per
/// sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(task: Task, seed: u64, config: serde_json::Value) -> Self {
        Self {
            header: ManifestHeader {
                format: MANIFEST_FORMAT.into(),
                version: MANIFEST_VERSION,
                task,
                seed,
                producer: format!("sfarl {}", env!("CARGO_PKG_VERSION")),
                config,
            },
            entries: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| SfarlError::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut line = |v: String| writeln!(out, "{v}").map_err(|e| SfarlError::io(path, e));
        line(serde_json::to_string(&self.header)?)?;
        for e in &self.entries {
            line(serde_json::to_string(e)?)?;
        }
        out.flush().map_err(|e| SfarlError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| SfarlError::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| SfarlError::Format(format!("{} is empty", path.display())))?
            .map_err(|e| SfarlError::io(path, e))?;
        let header: ManifestHeader = serde_json::from_str(&header_line)?;
        if header.format != MANIFEST_FORMAT {
            return Err(SfarlError::Format(format!(
                "{} is not a dataset manifest",
                path.display()
            )));
        }
        if header.version == 0 || header.version > MANIFEST_VERSION {
            return Err(SfarlError::Format(format!(
                "manifest version {} is not supported",
                header.version
            )));
        }
        let mut entries = Vec::new();
        for line in lines {
            let line = line.map_err(|e| SfarlError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line)?);
        }
        Ok(Self { header, entries })
    }

    /// Loads every entry as a training pair; `held_out` selects the split.
    pub fn load_pairs(&self, base: &Path, held_out: bool) -> Result<Vec<Pair>> {
        self.entries
            .iter()
            .filter(|e| e.held_out == held_out)
            .map(|e| load_entry(base, e))
            .collect()
    }
}

/// Directory against which manifest paths are resolved.
pub fn manifest_base(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default()
}

fn load_entry(base: &Path, e: &ManifestEntry) -> Result<Pair> {
    let y = read_gray(&base.join(&e.degraded))?;
    let gt = read_gray(&base.join(&e.ground_truth))?;
    y.check_dims(&gt)?;
    let op = match &e.kernel {
        Some(k) => DegradationOp::blur(read_kernel_text(&base.join(k))?),
        None => DegradationOp::Identity,
    };
    Ok(Pair { y, gt, op })
}
