//! Two-dimensional discrete Fourier analysis and checkerboard artifact scoring.
//!
//! The forward transform carries the `1/(MN)` factor:
//!
//! ```text
//! X(u,v) = 1/(MN) * sum_{m,n} x(m,n) * exp(-j2pi(um/M + vn/N))
//! ```
//!
//! so the inverse carries no factor (it is `MN` times the conventionally
//! normalized inverse). Under this convention:
//!
//! * Parseval: `sum |x|^2 = MN * sum |X|^2`.
//! * Circular convolution defined with a `1/(MN)` prefactor maps to the plain
//!   product of spectra, `dft2(x1 (*) x2) = X1 . X2`.
//! * For zero-insertion upsampling of an `M x N` signal to `2M x 2N`,
//!   `X~(u,v) = X(u mod M, v mod N) / 4`: the four quadrants are exact copies of
//!   each other, each a quarter of the original spectrum.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Default number of base-band peaks tracked by [`checkerboard_score`].
pub const DEFAULT_PEAKS: usize = 8;

/// Complex 2D-DFT coefficients of an `M x N` signal, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum<T> {
    rows: usize,
    cols: usize,
    coeffs: Vec<Complex<T>>,
}

/// Fraction of non-DC spectral energy sitting at loci replicated from the
/// strongest base-band peaks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArtifactScore<T> {
    pub value: T,
    pub grid_period: usize,
}

/// Result of [`idft2`]: the real part plus the discarded imaginary residual.
#[derive(Debug, Clone)]
pub struct RealSignal<T> {
    pub values: Matrix<T>,
    /// Largest absolute imaginary component that was dropped.
    pub max_imag: T,
    /// False when the input spectrum violated Hermitian symmetry.
    pub hermitian: bool,
}

impl<T: Scalar> Spectrum<T> {
    pub fn from_coeffs(rows: usize, cols: usize, coeffs: Vec<Complex<T>>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Dimension("spectrum must be non-empty".into()));
        }
        if coeffs.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "expected {} coefficients, got {}",
                rows * cols,
                coeffs.len()
            )));
        }
        Ok(Self { rows, cols, coeffs })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Complex<T> {
        self.coeffs[u * self.cols + v]
    }

    pub fn coeffs(&self) -> &[Complex<T>] {
        &self.coeffs
    }

    /// Sum of squared magnitudes.
    pub fn energy(&self) -> T {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Largest deviation from `X(u,v) = conj(X(-u,-v))`.
    pub fn hermitian_defect(&self) -> T {
        let (m, n) = (self.rows, self.cols);
        let mut worst = T::zero();
        for u in 0..m {
            for v in 0..n {
                let mirror = self.get((m - u) % m, (n - v) % n).conj();
                worst = worst.max((self.get(u, v) - mirror).norm());
            }
        }
        worst
    }

    /// Elementwise product of two equally sized spectra.
    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::Dimension(format!(
                "spectrum shapes differ: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a * b)
                .collect(),
        })
    }

    /// Copy with the DC term moved to the centre, for heatmap display.
    pub fn fftshift(&self) -> Self {
        let (m, n) = (self.rows, self.cols);
        let mut coeffs = vec![Complex::new(T::zero(), T::zero()); m * n];
        for u in 0..m {
            for v in 0..n {
                coeffs[((u + m / 2) % m) * n + (v + n / 2) % n] = self.get(u, v);
            }
        }
        Self {
            rows: m,
            cols: n,
            coeffs,
        }
    }

    /// `log1p(|X|)` as comma-separated rows, row-major.
    pub fn log_magnitude_csv(&self) -> String {
        let mut out = String::new();
        for u in 0..self.rows {
            let row: Vec<String> = (0..self.cols)
                .map(|v| format!("{:.9e}", self.get(u, v).norm().as_f64().ln_1p()))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

fn zero_c<T: Scalar>() -> Complex<T> {
    Complex::new(T::zero(), T::zero())
}

/// In-place iterative radix-2 FFT. `sign` is -1 for forward, +1 for inverse.
/// No scaling is applied.
fn fft_pow2<T: Scalar>(buf: &mut [Complex<T>], sign: T) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    if n <= 1 {
        return;
    }
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = sign * T::TAU() / T::from_count(len);
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let w = Complex::from_polar(T::one(), step * T::from_count(k));
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

/// Direct O(n^2) 1D DFT for lengths that are not powers of two.
fn dft_direct<T: Scalar>(buf: &mut [Complex<T>], sign: T) {
    let n = buf.len();
    let input = buf.to_vec();
    let base = sign * T::TAU() / T::from_count(n);
    for (k, out) in buf.iter_mut().enumerate() {
        let mut acc = zero_c();
        for (t, &x) in input.iter().enumerate() {
            let phase = base * T::from_count((k * t) % n);
            acc = acc + x * Complex::from_polar(T::one(), phase);
        }
        *out = acc;
    }
}

fn transform_1d<T: Scalar>(buf: &mut [Complex<T>], sign: T) {
    if buf.len().is_power_of_two() {
        fft_pow2(buf, sign);
    } else {
        dft_direct(buf, sign);
    }
}

/// Unscaled separable 2D transform over a row-major buffer.
fn transform_2d<T: Scalar>(data: &mut [Complex<T>], rows: usize, cols: usize, sign: T) {
    for row in data.chunks_mut(cols) {
        transform_1d(row, sign);
    }
    let mut column = vec![zero_c(); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = data[r * cols + c];
        }
        transform_1d(&mut column, sign);
        for r in 0..rows {
            data[r * cols + c] = column[r];
        }
    }
}

/// Forward 2D-DFT with the `1/(MN)` normalization.
pub fn dft2<T: Scalar>(signal: &Matrix<T>) -> Result<Spectrum<T>> {
    let (m, n) = signal.shape();
    if m == 0 || n == 0 {
        return Err(Error::Dimension("cannot transform an empty matrix".into()));
    }
    let mut data: Vec<Complex<T>> = signal
        .as_slice()
        .iter()
        .map(|&x| Complex::new(x, T::zero()))
        .collect();
    transform_2d(&mut data, m, n, -T::one());
    let scale = T::one() / T::from_count(m * n);
    for c in &mut data {
        *c = *c * scale;
    }
    Ok(Spectrum {
        rows: m,
        cols: n,
        coeffs: data,
    })
}

/// Inverse of [`dft2`]. The imaginary residual is dropped and reported.
pub fn idft2<T: Scalar>(spec: &Spectrum<T>) -> RealSignal<T> {
    let (m, n) = (spec.rows, spec.cols);
    let scale = spec
        .coeffs
        .iter()
        .map(|c| c.norm())
        .fold(T::zero(), T::max)
        .max(T::one());
    let hermitian = spec.hermitian_defect() <= T::lit(1e-9) * scale;
    let mut data = spec.coeffs.clone();
    transform_2d(&mut data, m, n, T::one());
    let max_imag = data.iter().map(|c| c.im.abs()).fold(T::zero(), T::max);
    let values = Matrix::from_vec(m, n, data.into_iter().map(|c| c.re).collect())
        .expect("shape preserved");
    RealSignal {
        values,
        max_imag,
        hermitian,
    }
}

/// Circular convolution `(1/(MN)) sum_{k,l} x1(k,l) x2(m-k, n-l)`, computed
/// through the spectral product.
pub fn circular_convolve<T: Scalar>(x1: &Matrix<T>, x2: &Matrix<T>) -> Result<Matrix<T>> {
    if x1.shape() != x2.shape() {
        return Err(Error::Dimension(format!(
            "convolution operands differ: {:?} vs {:?}",
            x1.shape(),
            x2.shape()
        )));
    }
    let product = dft2(x1)?.hadamard(&dft2(x2)?)?;
    Ok(idft2(&product).values)
}

/// Zero-insertion 2x upsampling: `out(2k, 2l) = x(k, l)`, zero elsewhere.
pub fn upsample2x<T: Scalar>(signal: &Matrix<T>) -> Matrix<T> {
    let (m, n) = signal.shape();
    let mut out = Matrix::zeros(2 * m, 2 * n);
    for k in 0..m {
        for l in 0..n {
            out.set(2 * k, 2 * l, signal.get(k, l));
        }
    }
    out
}

/// [`checkerboard_score_with_peaks`] with [`DEFAULT_PEAKS`] peaks.
pub fn checkerboard_score<T: Scalar>(
    spec: &Spectrum<T>,
    grid_period: usize,
) -> Result<ArtifactScore<T>> {
    checkerboard_score_with_peaks(spec, grid_period, DEFAULT_PEAKS)
}

/// Energy at the replicated loci of the `peaks` strongest base-band
/// coefficients, over total non-DC energy.
///
/// The base band is the centred low-frequency block: signed frequencies in
/// `[-M/(2p), M/(2p)) x [-N/(2p), N/(2p))` for period `p`. Each base position
/// `(u, v)` has replicas at `(u + a M/p, v + b N/p)` (mod size) for every
/// `(a, b) != (0, 0)`, and these tile the rest of the spectrum.
/// Peaks may include the DC term itself, whose replicas are the classic
/// zero-insertion signature. Ties are broken by position, so the score is
/// deterministic. An all-zero (or DC-only) spectrum scores 0.
pub fn checkerboard_score_with_peaks<T: Scalar>(
    spec: &Spectrum<T>,
    grid_period: usize,
    peaks: usize,
) -> Result<ArtifactScore<T>> {
    let (m, n) = (spec.rows, spec.cols);
    if grid_period == 0 || m % grid_period != 0 || n % grid_period != 0 {
        return Err(Error::InvalidArgument(format!(
            "grid period {grid_period} must divide spectrum size {m}x{n}"
        )));
    }
    let (bm, bn) = (m / grid_period, n / grid_period);
    let non_dc = spec.energy() - spec.get(0, 0).norm_sqr();
    if non_dc <= T::zero() {
        return Ok(ArtifactScore {
            value: T::zero(),
            grid_period,
        });
    }

    // Index of the k-th base position along an axis: 0..len/2, then the
    // negative half at the top of the axis.
    let band = |k: usize, b: usize, len: usize| if k < b - b / 2 { k } else { len - (b - k) };
    let mut base: Vec<(T, usize, usize)> = Vec::with_capacity(bm * bn);
    for i in 0..bm {
        for j in 0..bn {
            let (u, v) = (band(i, bm, m), band(j, bn, n));
            base.push((spec.get(u, v).norm_sqr(), u, v));
        }
    }
    base.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then((a.1, a.2).cmp(&(b.1, b.2)))
    });

    let mut replicated = T::zero();
    for &(_, u, v) in base.iter().take(peaks) {
        for a in 0..grid_period {
            for b in 0..grid_period {
                if a == 0 && b == 0 {
                    continue;
                }
                replicated = replicated + spec.get((u + a * bm) % m, (v + b * bn) % n).norm_sqr();
            }
        }
    }
    let value = (replicated / non_dc).max(T::zero()).min(T::one());
    Ok(ArtifactScore { value, grid_period })
}

/// Energy of coefficients whose signed frequency exceeds `fraction` of the
/// axis length on either axis (`fraction = 0.25` is "above half Nyquist").
pub fn high_frequency_energy<T: Scalar>(spec: &Spectrum<T>, fraction: f64) -> T {
    let (m, n) = (spec.rows, spec.cols);
    let signed = |k: usize, len: usize| -> f64 {
        if k <= len / 2 {
            k as f64
        } else {
            len as f64 - k as f64
        }
    };
    let mut total = T::zero();
    for u in 0..m {
        for v in 0..n {
            if signed(u, m) > fraction * m as f64 || signed(v, n) > fraction * n as f64 {
                total = total + spec.get(u, v).norm_sqr();
            }
        }
    }
    total
}
