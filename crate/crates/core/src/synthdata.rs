//! Synthetic "real" and "fake" imagery and labeled test streams.
//!
//! Reals are smooth random fields: white Gaussian noise low-passed with a
//! Gaussian spectral envelope (a broad content band plus a weaker fine
//! texture band), mixed across channels and min-max rescaled. Fakes are
//! generated the way an upsampling generator produces them: a half-resolution
//! field is zero-insertion upsampled and convolved with a short interpolation
//! kernel, which leaves spectral replicas around the Nyquist band.

use std::io::{Read, Write};

use num_complex::Complex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::matrix::Matrix;
use crate::seed::{self, Stream};
use crate::spectrum::{self, circular_convolve, dft2, idft2, upsample2x};

pub const DEFAULT_SIZE: usize = 32;
pub const DEFAULT_FAKE_FRACTION: f64 = 0.67;

/// Correlation length of the fine texture added to the content field.
const TEXTURE_CORRELATION: f64 = 0.5;
/// RMS of the texture relative to the content field.
const TEXTURE_AMPLITUDE: f64 = 0.3;

const STREAM_MAGIC: &[u8; 8] = b"TTASTRM\0";
const STREAM_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionId {
    Source,
    Shifted,
}

impl DistributionId {
    pub fn name(self) -> &'static str {
        match self {
            Self::Source => "source",
            Self::Shifted => "shifted",
        }
    }

    /// Correlation length of the content field, in full-resolution pixels.
    fn correlation_length(self) -> f64 {
        match self {
            Self::Source => 1.5,
            Self::Shifted => 2.5,
        }
    }

    fn channel_mix(self) -> [[f64; 3]; 3] {
        match self {
            Self::Source => [[0.8, 0.15, 0.05], [0.1, 0.8, 0.1], [0.05, 0.15, 0.8]],
            Self::Shifted => [[0.5, 0.4, 0.1], [0.3, 0.4, 0.3], [0.2, 0.2, 0.6]],
        }
    }

    /// 1D taps of the separable interpolation kernel applied after zero
    /// insertion. Bilinear would be `[0.5, 1, 0.5]`; these fall slightly
    /// short, leaving a response of 0.1 at Nyquist.
    fn interpolation_taps(self) -> [f64; 3] {
        match self {
            Self::Source => [0.45, 1.0, 0.45],
            Self::Shifted => [0.4, 1.0, 0.5],
        }
    }
}

impl std::str::FromStr for DistributionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "source" => Ok(Self::Source),
            "shifted" => Ok(Self::Shifted),
            other => Err(Error::InvalidArgument(format!("unknown distribution `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Real = 0,
    Fake = 1,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Self::Real),
            1 => Ok(Self::Fake),
            other => Err(Error::Format(format!("label byte {other} is not 0 or 1"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Image,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub n_samples: usize,
    pub fake_fraction: f64,
    pub distribution: DistributionId,
    pub seed: u64,
    pub image_size: usize,
}

impl StreamSpec {
    pub fn new(n_samples: usize, distribution: DistributionId, seed: u64) -> Self {
        Self {
            n_samples,
            fake_fraction: DEFAULT_FAKE_FRACTION,
            distribution,
            seed,
            image_size: DEFAULT_SIZE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fake_fraction > 0.0 && self.fake_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "fake_fraction {} must lie in (0, 1)",
                self.fake_fraction
            )));
        }
        if self.image_size < 4 || !self.image_size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "image size {} must be even and at least 4",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn fake_count(&self) -> usize {
        (self.n_samples as f64 * self.fake_fraction).round() as usize
    }
}

/// Gaussian low-passed white noise with the given correlation length,
/// scaled to unit RMS.
fn smooth_field(rng: &mut impl Rng, size: usize, corr_len: f64) -> Matrix<f64> {
    let noise = Matrix::from_fn(size, size, |_, _| rng.sample::<f64, _>(StandardNormal));
    let spec = dft2(&noise).expect("non-empty field");
    let n = size as f64;
    let signed = |k: usize| if k <= size / 2 { k as f64 } else { k as f64 - n };
    let scale = 2.0 * std::f64::consts::PI * std::f64::consts::PI * corr_len * corr_len;
    let coeffs: Vec<Complex<f64>> = (0..size * size)
        .map(|i| {
            let (u, v) = (signed(i / size) / n, signed(i % size) / n);
            spec.coeffs()[i] * (-scale * (u * u + v * v)).exp()
        })
        .collect();
    let filtered = spectrum::Spectrum::from_coeffs(size, size, coeffs).expect("shape kept");
    let field = idft2(&filtered).values;
    let rms = (field.as_slice().iter().map(|v| v * v).sum::<f64>() / (size * size) as f64).sqrt();
    field.map(|v| if rms > 0.0 { v / rms } else { 0.0 })
}

/// Content plus fine texture per channel, then the channel mix. Lengths are
/// multiplied by `scale` (0.5 when drawing at half resolution).
fn content(rng: &mut impl Rng, size: usize, dist: DistributionId, scale: f64) -> [Matrix<f64>; CHANNELS] {
    let (corr, tex_corr) = (dist.correlation_length() * scale, TEXTURE_CORRELATION * scale);
    let fields = [0, 1, 2].map(|_| {
        let base = smooth_field(rng, size, corr);
        let tex = smooth_field(rng, size, tex_corr);
        Matrix::from_fn(size, size, |r, c| base.get(r, c) + TEXTURE_AMPLITUDE * tex.get(r, c))
    });
    mix_channels(fields, dist.channel_mix())
}

fn mix_channels(fields: [Matrix<f64>; CHANNELS], mix: [[f64; 3]; 3]) -> [Matrix<f64>; CHANNELS] {
    let (h, w) = fields[0].shape();
    let mixed = |row: [f64; 3]| {
        Matrix::from_fn(h, w, |r, c| {
            (0..CHANNELS).map(|k| row[k] * fields[k].get(r, c)).sum()
        })
    };
    [mixed(mix[0]), mixed(mix[1]), mixed(mix[2])]
}

/// Min-max rescale over all channels, then round through `f32` so the image
/// survives the stream file format bit-exactly.
fn finish(channels: [Matrix<f64>; CHANNELS]) -> Image {
    let mut img = Image::from_channels(&channels).expect("equal channel shapes");
    let (lo, hi) = img.min_max();
    let span = hi - lo;
    for v in img.pixels_mut() {
        let unit = if span > 0.0 { (*v - lo) / span } else { 0.5 };
        *v = f64::from(unit.clamp(0.0, 1.0) as f32);
    }
    img
}

/// Smooth content image of side `size`.
pub fn gen_real_sized(seed: u64, dist: DistributionId, size: usize) -> Image {
    let mut rng = seed::rng(seed, Stream::Sample, 0);
    finish(content(&mut rng, size, dist, 1.0))
}

/// Upsampled image of side `size` carrying zero-insertion replicas.
///
/// The half-resolution image is drawn like a real one with every length
/// halved, so after upsampling its content statistics match
/// [`gen_real_sized`]. It is rescaled to `[0, 1]` before upsampling, like the
/// nonnegative feature maps a generator upsamples, which puts the replica of
/// its mean at Nyquist.
pub fn gen_fake_sized(seed: u64, dist: DistributionId, size: usize) -> Image {
    let mut rng = seed::rng(seed, Stream::Sample, 0);
    let half = finish(content(&mut rng, size / 2, dist, 0.5)).channels();
    let kernel = interpolation_kernel(dist, size);
    let channels = half.map(|ch| {
        circular_convolve(&upsample2x(&ch), &kernel).expect("kernel matches upsampled size")
    });
    finish(channels)
}

/// Separable 3x3 kernel embedded in a `size x size` array, centred at the
/// origin with wrap-around, and scaled by `size^2` to cancel the `1/(MN)`
/// factor of [`circular_convolve`].
fn interpolation_kernel(dist: DistributionId, size: usize) -> Matrix<f64> {
    let taps = dist.interpolation_taps();
    let mut k = Matrix::zeros(size, size);
    let scale = (size * size) as f64;
    for (i, &a) in taps.iter().enumerate() {
        for (j, &b) in taps.iter().enumerate() {
            let r = (size + i - 1) % size;
            let c = (size + j - 1) % size;
            k.set(r, c, a * b * scale);
        }
    }
    k
}

pub fn gen_real(seed: u64, dist: DistributionId) -> Image {
    gen_real_sized(seed, dist, DEFAULT_SIZE)
}

pub fn gen_fake(seed: u64, dist: DistributionId) -> Image {
    gen_fake_sized(seed, dist, DEFAULT_SIZE)
}

/// Mean of the per-channel checkerboard scores (period 2).
pub fn image_checkerboard_score(img: &Image) -> f64 {
    let scores: Vec<f64> = img
        .channels()
        .iter()
        .map(|ch| {
            let spec = dft2(ch).expect("non-empty image");
            spectrum::checkerboard_score(&spec, 2)
                .expect("even image side")
                .value
        })
        .collect();
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// Label order for a stream: exactly `round(n * fake_fraction)` fakes in a
/// seeded shuffle.
pub fn stream_labels(spec: &StreamSpec) -> Vec<Label> {
    let fakes = spec.fake_count().min(spec.n_samples);
    let mut labels: Vec<Label> = (0..spec.n_samples)
        .map(|i| if i < fakes { Label::Fake } else { Label::Real })
        .collect();
    labels.shuffle(&mut seed::rng(spec.seed, Stream::Order, 0));
    labels
}

/// Deterministic labeled stream. Sample `i` is generated from a seed derived
/// from `(spec.seed, i)`, so generation order does not matter.
pub fn make_stream(spec: &StreamSpec) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    Ok(stream_labels(spec)
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let s = seed::derive(spec.seed, Stream::Sample, i as u64);
            let image = match label {
                Label::Real => gen_real_sized(s, spec.distribution, spec.image_size),
                Label::Fake => gen_fake_sized(s, spec.distribution, spec.image_size),
            };
            LabeledSample { image, label }
        })
        .collect())
}

/// Writes a stream: magic, version, H, W, count, then per sample the `f32`
/// pixels (row-major, channel-interleaved) followed by a `u8` label. All
/// integers and floats little-endian.
pub fn write_stream(mut w: impl Write, samples: &[LabeledSample]) -> Result<()> {
    let (h, wd) = samples
        .first()
        .map(|s| (s.image.height(), s.image.width()))
        .unwrap_or((0, 0));
    w.write_all(STREAM_MAGIC)?;
    w.write_all(&STREAM_VERSION.to_le_bytes())?;
    w.write_all(&(h as u32).to_le_bytes())?;
    w.write_all(&(wd as u32).to_le_bytes())?;
    w.write_all(&(samples.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(h * wd * CHANNELS * 4 + 1);
    for s in samples {
        if (s.image.height(), s.image.width()) != (h, wd) {
            return Err(Error::Dimension("stream images differ in size".into()));
        }
        buf.clear();
        for &v in s.image.pixels() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        buf.push(s.label.as_u8());
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn read_stream(mut r: impl Read) -> Result<Vec<LabeledSample>> {
    let magic: [u8; 8] = read_array(&mut r)?;
    if &magic != STREAM_MAGIC {
        return Err(Error::Format("not a stream file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != STREAM_VERSION {
        return Err(Error::Format(format!("unsupported stream version {version}")));
    }
    let h = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let w = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let count = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let mut samples = Vec::with_capacity(count);
    let mut buf = vec![0u8; h * w * CHANNELS * 4 + 1];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        let (px, label) = buf.split_at(h * w * CHANNELS * 4);
        let pixels = px
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        samples.push(LabeledSample {
            image: Image::new(h, w, pixels)?,
            label: Label::from_u8(label[0])?,
        });
    }
    Ok(samples)
}
