//! Inference-time postprocessing corruptions at five intensity levels:
//! Gaussian blur, down/up resize, YCbCr saturation and contrast stretching.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

pub const LEVELS: usize = 5;

/// Kernel sides used at full scale (256 px images).
pub const PAPER_KERNEL_SIDES: [usize; LEVELS] = [5, 9, 13, 17, 21];
/// Kernel sides used for desk-scale images.
pub const SCALED_KERNEL_SIDES: [usize; LEVELS] = [3, 5, 7, 9, 11];
/// Intermediate resolutions out of 256 for the resize degradation.
pub const RESIZE_NUMERATORS: [usize; LEVELS] = [128, 85, 64, 51, 41];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CorruptionKind {
    None,
    GaussianBlur,
    Resize,
    ColorSaturation,
    ColorContrast,
}

impl CorruptionKind {
    pub const ALL_ACTIVE: [CorruptionKind; 4] = [
        CorruptionKind::ColorContrast,
        CorruptionKind::ColorSaturation,
        CorruptionKind::Resize,
        CorruptionKind::GaussianBlur,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::GaussianBlur => "blur",
            Self::Resize => "resize",
            Self::ColorSaturation => "saturation",
            Self::ColorContrast => "contrast",
        }
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "none" => Self::None,
            "blur" | "gaussian_blur" => Self::GaussianBlur,
            "resize" => Self::Resize,
            "saturation" | "color_saturation" => Self::ColorSaturation,
            "contrast" | "color_contrast" => Self::ColorContrast,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown corruption kind `{other}`"
                )))
            }
        })
    }
}

/// A corruption kind and its intensity level (1..=5). `None` carries level 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Corruption {
    kind: CorruptionKind,
    intensity: u8,
}

impl Corruption {
    pub const NONE: Corruption = Corruption {
        kind: CorruptionKind::None,
        intensity: 0,
    };

    pub fn new(kind: CorruptionKind, intensity: u8) -> Result<Self> {
        if kind == CorruptionKind::None {
            return Ok(Self::NONE);
        }
        check_level(intensity)?;
        Ok(Self { kind, intensity })
    }

    pub fn kind(self) -> CorruptionKind {
        self.kind
    }

    pub fn intensity(self) -> u8 {
        self.intensity
    }

    /// All five levels of one kind.
    pub fn levels(kind: CorruptionKind) -> Vec<Corruption> {
        if kind == CorruptionKind::None {
            return vec![Self::NONE];
        }
        (1..=LEVELS as u8)
            .map(|i| Corruption { kind, intensity: i })
            .collect()
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            CorruptionKind::None => f.write_str("none"),
            k => write!(f, "{}:{}", k.tag(), self.intensity),
        }
    }
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.split_once(':') {
            None => {
                let kind: CorruptionKind = s.parse()?;
                if kind != CorruptionKind::None {
                    return Err(Error::InvalidArgument(format!(
                        "corruption `{s}` needs an intensity, e.g. `{s}:3`"
                    )));
                }
                Ok(Self::NONE)
            }
            Some((k, i)) => {
                let kind: CorruptionKind = k.parse()?;
                let level: u8 = i.trim().parse().map_err(|_| {
                    Error::InvalidArgument(format!("bad intensity `{i}` in `{s}`"))
                })?;
                Self::new(kind, level)
            }
        }
    }
}

impl Serialize for Corruption {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Corruption {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelSchedule {
    Scaled,
    Paper,
}

/// Tunable constants of the corruption family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    /// Gaussian sigma as a fraction of the kernel side.
    pub sigma_ratio: f64,
    pub kernel_schedule: KernelSchedule,
    pub saturation_factors: [f64; LEVELS],
    pub contrast_factors: [f64; LEVELS],
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            sigma_ratio: 0.25,
            kernel_schedule: KernelSchedule::Scaled,
            saturation_factors: [1.2, 1.6, 2.0, 2.6, 3.2],
            contrast_factors: [1.2, 1.5, 2.0, 2.6, 3.2],
        }
    }
}

impl PostprocessConfig {
    pub fn kernel_side(&self, intensity: u8) -> Result<usize> {
        check_level(intensity)?;
        let sides = match self.kernel_schedule {
            KernelSchedule::Scaled => SCALED_KERNEL_SIDES,
            KernelSchedule::Paper => PAPER_KERNEL_SIDES,
        };
        Ok(sides[intensity as usize - 1])
    }
}

fn check_level(intensity: u8) -> Result<()> {
    if !(1..=LEVELS as u8).contains(&intensity) {
        return Err(Error::InvalidArgument(format!(
            "intensity {intensity} outside 1..=5"
        )));
    }
    Ok(())
}

/// Normalized 1D Gaussian taps of odd length `side`.
pub fn gaussian_taps(side: usize, sigma: f64) -> Vec<f64> {
    let r = (side / 2) as f64;
    let raw: Vec<f64> = (0..side)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Mirror index about the edge pixels without repeating them (`dcb|abcd|cba`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

pub fn gaussian_blur(img: &Image, intensity: u8, cfg: &PostprocessConfig) -> Result<Image> {
    let side = cfg.kernel_side(intensity)?;
    let (h, w) = (img.height(), img.width());
    if side > h || side > w {
        return Err(Error::KernelTooLarge {
            kernel: side,
            height: h,
            width: w,
        });
    }
    let taps = gaussian_taps(side, side as f64 * cfg.sigma_ratio);
    let r = (side / 2) as isize;

    let mut tmp = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..CHANNELS {
                let acc: f64 = taps
                    .iter()
                    .enumerate()
                    .map(|(k, &t)| t * img.get(y, reflect(x as isize + k as isize - r, w), ch))
                    .sum();
                tmp.set(y, x, ch, acc);
            }
        }
    }
    let mut out = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..CHANNELS {
                let acc: f64 = taps
                    .iter()
                    .enumerate()
                    .map(|(k, &t)| t * tmp.get(reflect(y as isize + k as isize - r, h), x, ch))
                    .sum();
                out.set(y, x, ch, acc);
            }
        }
    }
    out.clamp_unit();
    Ok(out)
}

/// Intermediate side for the resize degradation of an axis of length `len`.
pub fn resize_intermediate(len: usize, intensity: u8) -> Result<usize> {
    check_level(intensity)?;
    let r = RESIZE_NUMERATORS[intensity as usize - 1] as f64 / 256.0;
    Ok((len as f64 * r).round() as usize)
}

/// Bilinear resampling with half-pixel centres and edge clamping.
fn bilinear(img: &Image, out_h: usize, out_w: usize) -> Image {
    let (h, w) = (img.height(), img.width());
    let coord = |i: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Image::filled(out_h, out_w, 0.0);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, out_h, h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, out_w, w);
            for ch in 0..CHANNELS {
                let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
                let bot = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
                out.set(y, x, ch, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

pub fn resize_degrade(img: &Image, intensity: u8) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    let (mh, mw) = (resize_intermediate(h, intensity)?, resize_intermediate(w, intensity)?);
    if mh < 2 || mw < 2 {
        return Err(Error::InvalidArgument(format!(
            "resize level {intensity} shrinks {h}x{w} to {mh}x{mw}, below 2 px"
        )));
    }
    let mut out = bilinear(&bilinear(img, mh, mw), h, w);
    out.clamp_unit();
    Ok(out)
}

// Full-range BT.601 (JPEG) on 0..255 values. Channel 0/1/2 are taken as
// R/G/B; for BGR storage only the row order of this matrix would change.
const RGB_TO_YCBCR: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168_736, -0.331_264, 0.5],
    [0.5, -0.418_688, -0.081_312],
];

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let det = m[0][0] * cof(1, 2, 1, 2) - m[0][1] * cof(1, 2, 0, 2) + m[0][2] * cof(1, 2, 0, 1);
    let adj = [
        [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
        [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
        [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
    ];
    adj.map(|row| row.map(|v| v / det))
}

fn apply3(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    m.map(|row| row[0] * v[0] + row[1] * v[1] + row[2] * v[2])
}

/// `(Y, Cb, Cr)` of one pixel on the 0..255 scale.
pub fn to_ycbcr(rgb: [f64; 3]) -> [f64; 3] {
    let [y, cb, cr] = apply3(&RGB_TO_YCBCR, rgb.map(|v| v * 255.0));
    [y, cb + 128.0, cr + 128.0]
}

pub fn from_ycbcr(ycc: [f64; 3]) -> [f64; 3] {
    let inv = invert3(&RGB_TO_YCBCR);
    apply3(&inv, [ycc[0], ycc[1] - 128.0, ycc[2] - 128.0]).map(|v| v / 255.0)
}

/// Pushes chroma away from 128 by `factor`, leaving luminance untouched.
pub fn saturate_by(img: &Image, factor: f64) -> Image {
    let mut out = img.clone();
    for px in out.pixels_mut().chunks_exact_mut(CHANNELS) {
        let [y, cb, cr] = to_ycbcr([px[0], px[1], px[2]]);
        let ycc = [y, 128.0 + (cb - 128.0) * factor, 128.0 + (cr - 128.0) * factor];
        let rgb = from_ycbcr(ycc);
        px.copy_from_slice(&rgb);
    }
    out.clamp_unit();
    out
}

pub fn color_saturation(img: &Image, intensity: u8, cfg: &PostprocessConfig) -> Result<Image> {
    check_level(intensity)?;
    Ok(saturate_by(img, cfg.saturation_factors[intensity as usize - 1]))
}

/// Per-channel `c := mean + (c - mean) * factor`, clipped.
pub fn contrast_by(img: &Image, factor: f64) -> Image {
    let n = (img.height() * img.width()) as f64;
    let mut means = [0.0; CHANNELS];
    for px in img.pixels().chunks_exact(CHANNELS) {
        for (m, &v) in means.iter_mut().zip(px) {
            *m += v;
        }
    }
    let means = means.map(|m| m / n);
    let mut out = img.clone();
    for px in out.pixels_mut().chunks_exact_mut(CHANNELS) {
        for (v, &m) in px.iter_mut().zip(&means) {
            *v = m + (*v - m) * factor;
        }
    }
    out.clamp_unit();
    out
}

pub fn color_contrast(img: &Image, intensity: u8, cfg: &PostprocessConfig) -> Result<Image> {
    check_level(intensity)?;
    Ok(contrast_by(img, cfg.contrast_factors[intensity as usize - 1]))
}

pub fn apply(img: &Image, corruption: Corruption, cfg: &PostprocessConfig) -> Result<Image> {
    let level = corruption.intensity();
    match corruption.kind() {
        CorruptionKind::None => Ok(img.clone()),
        CorruptionKind::GaussianBlur => gaussian_blur(img, level, cfg),
        CorruptionKind::Resize => resize_degrade(img, level),
        CorruptionKind::ColorSaturation => color_saturation(img, level, cfg),
        CorruptionKind::ColorContrast => color_contrast(img, level, cfg),
    }
}
