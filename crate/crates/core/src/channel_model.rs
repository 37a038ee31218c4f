//! Tapped-delay MIMO channels built from multipath parameters.
//!
//! A channel is a stack of `D` complex `Nr x Nt` matrices; tap `d` collects
//! every path weighted by the raised-cosine pulse sampled at
//! `d*T_s - (toa - t_off)` and shaped by the outer product of the receive
//! and transmit array responses.

use midband_autodiff::Real;
use num_complex::Complex;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("tap count must be at least 1")]
    NoTaps,
    #[error("no paths")]
    NoPaths,
    #[error("array dimensions must be at least 1, got {nx}x{ny}")]
    EmptyArray { nx: usize, ny: usize },
    #[error("invalid pulse configuration: {0}")]
    InvalidPulse(&'static str),
    #[error("{n_sc} subcarriers cannot represent {d} taps")]
    TooFewSubcarriers { n_sc: usize, d: usize },
    #[error("buffer of {got} entries does not match {d}x{nr}x{nt}")]
    ShapeMismatch {
        d: usize,
        nr: usize,
        nt: usize,
        got: usize,
    },
}

pub type Result<T> = std::result::Result<T, ChannelError>;

/// Uniform rectangular array with half-wavelength spacing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArrayGeometry {
    nx: usize,
    ny: usize,
}

impl ArrayGeometry {
    /// Element spacing in wavelengths.
    pub const SPACING: f64 = 0.5;

    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(ChannelError::EmptyArray { nx, ny });
        }
        Ok(Self { nx, ny })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// One multipath component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Path<T> {
    /// Complex channel gain.
    pub alpha: Complex<T>,
    /// Time of arrival in seconds.
    pub toa: T,
    pub aoa_az: T,
    pub aoa_el: T,
    pub aod_az: T,
    pub aod_el: T,
    /// Complex electric field at the receiver, V/m.
    pub field: Complex<T>,
}

/// Ordered collection of paths for one transmitter/receiver pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PathSet<T> {
    paths: Vec<Path<T>>,
}

impl<T: Real> PathSet<T> {
    pub fn new(paths: Vec<Path<T>>) -> Self {
        Self { paths }
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn paths(&self) -> &[Path<T>] {
        &self.paths
    }

    pub fn push(&mut self, p: Path<T>) {
        self.paths.push(p);
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Path<T>> {
        self.paths.iter()
    }

    pub fn fields(&self) -> Vec<Complex<T>> {
        self.paths.iter().map(|p| p.field).collect()
    }

    /// Earliest time of arrival, if any.
    pub fn first_arrival(&self) -> Option<T> {
        self.paths
            .iter()
            .map(|p| p.toa)
            .fold(None, |acc, t| Some(acc.map_or(t, |a: T| a.min(t))))
    }

    pub fn concat(&self, other: &Self) -> Self {
        let mut paths = self.paths.clone();
        paths.extend_from_slice(&other.paths);
        Self { paths }
    }
}

impl<T> FromIterator<Path<T>> for PathSet<T> {
    fn from_iter<I: IntoIterator<Item = Path<T>>>(iter: I) -> Self {
        Self {
            paths: iter.into_iter().collect(),
        }
    }
}

impl<'a, T> IntoIterator for &'a PathSet<T> {
    type Item = &'a Path<T>;
    type IntoIter = std::slice::Iter<'a, Path<T>>;
    fn into_iter(self) -> Self::IntoIter {
        self.paths.iter()
    }
}

/// Complex `D x Nr x Nt` tap-domain channel, tap-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelTensor<T> {
    d: usize,
    nr: usize,
    nt: usize,
    taps: Vec<Complex<T>>,
}

impl<T: Real> ChannelTensor<T> {
    pub fn zeros(d: usize, nr: usize, nt: usize) -> Self {
        Self {
            d,
            nr,
            nt,
            taps: vec![Complex::new(T::zero(), T::zero()); d * nr * nt],
        }
    }

    pub fn from_vec(d: usize, nr: usize, nt: usize, taps: Vec<Complex<T>>) -> Result<Self> {
        if taps.len() != d * nr * nt {
            return Err(ChannelError::ShapeMismatch {
                d,
                nr,
                nt,
                got: taps.len(),
            });
        }
        Ok(Self { d, nr, nt, taps })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn nr(&self) -> usize {
        self.nr
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.taps
    }

    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.taps
    }

    pub fn into_data(self) -> Vec<Complex<T>> {
        self.taps
    }

    pub fn get(&self, d: usize, r: usize, t: usize) -> Complex<T> {
        self.taps[(d * self.nr + r) * self.nt + t]
    }

    pub fn get_mut(&mut self, d: usize, r: usize, t: usize) -> &mut Complex<T> {
        &mut self.taps[(d * self.nr + r) * self.nt + t]
    }

    /// The `Nr x Nt` matrix of tap `d`, row-major.
    pub fn tap(&self, d: usize) -> &[Complex<T>] {
        let m = self.nr * self.nt;
        &self.taps[d * m..(d + 1) * m]
    }

    /// Squared Frobenius norm summed over taps, accumulated in `f64`.
    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|z| z.norm_sqr().as_f64()).sum()
    }

    /// `||self - other||^2`; panics if shapes differ.
    pub fn sq_distance(&self, other: &Self) -> f64 {
        assert_eq!(
            (self.d, self.nr, self.nt),
            (other.d, other.nr, other.nt),
            "channel shapes differ"
        );
        self.taps
            .iter()
            .zip(&other.taps)
            .map(|(a, b)| (*a - *b).norm_sqr().as_f64())
            .sum()
    }

    /// Normalized squared error of `self` as an estimate of `truth` (linear).
    pub fn nmse(&self, truth: &Self) -> f64 {
        self.sq_distance(truth) / truth.energy()
    }

    pub fn is_finite(&self) -> bool {
        self.taps.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn cast<U: Real>(&self) -> ChannelTensor<U> {
        ChannelTensor {
            d: self.d,
            nr: self.nr,
            nt: self.nt,
            taps: self
                .taps
                .iter()
                .map(|z| Complex::new(U::lit(z.re.as_f64()), U::lit(z.im.as_f64())))
                .collect(),
        }
    }
}

/// Raised-cosine pulse and receiver timing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PulseConfig<T> {
    /// Sampling interval in seconds.
    pub ts: T,
    /// Roll-off factor in `[0, 1]`.
    pub beta: T,
    /// Receiver clock offset in seconds.
    pub t_off: T,
    /// Half-width, in samples, beyond which the pulse is treated as zero.
    pub support: T,
}

impl<T: Real> PulseConfig<T> {
    pub fn new(ts: T, beta: T) -> Result<Self> {
        let cfg = Self {
            ts,
            beta,
            t_off: T::zero(),
            support: T::lit(8.0),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_offset(mut self, t_off: T) -> Self {
        self.t_off = t_off;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ts > T::zero()) || !self.ts.is_finite() {
            return Err(ChannelError::InvalidPulse("sampling interval must be positive"));
        }
        if !(self.beta >= T::zero() && self.beta <= T::one()) {
            return Err(ChannelError::InvalidPulse("roll-off must lie in [0, 1]"));
        }
        if !(self.support > T::zero()) {
            return Err(ChannelError::InvalidPulse("support must be positive"));
        }
        Ok(())
    }
}

/// Offsets closer than this to an integer number of samples are treated as
/// exactly on-grid, so the pulse's Nyquist zeros come out as exact zeros.
const ON_GRID_SAMPLES: f64 = 1e-9;

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Raised cosine at `x` sample periods, peak-normalized to 1.
fn raised_cosine_samples(x: f64, beta: f64) -> f64 {
    let nearest = x.round();
    if (x - nearest).abs() < ON_GRID_SAMPLES {
        return if nearest == 0.0 { 1.0 } else { 0.0 };
    }
    let tb = 2.0 * beta * x;
    let denom = 1.0 - tb * tb;
    if beta > 0.0 && denom.abs() < 1e-10 {
        return std::f64::consts::FRAC_PI_4 * sinc(1.0 / (2.0 * beta));
    }
    sinc(x) * (std::f64::consts::PI * beta * x).cos() / denom
}

/// Time-domain raised-cosine pulse with `f(0) = 1` and zeros at nonzero
/// multiples of `T_s`.
pub fn raised_cosine<T: Real>(t: T, cfg: &PulseConfig<T>) -> T {
    T::lit(raised_cosine_samples(
        t.as_f64() / cfg.ts.as_f64(),
        cfg.beta.as_f64(),
    ))
}

/// Uniform linear array response `[a]_n = exp(-j*pi*n*theta)`, `n = 0..len`.
pub fn steering_vector<T: Real>(theta: T, n: usize) -> Vec<Complex<T>> {
    let theta = theta.as_f64();
    (0..n)
        .map(|i| {
            let phase = -std::f64::consts::PI * i as f64 * theta;
            Complex::new(T::lit(phase.cos()), T::lit(phase.sin()))
        })
        .collect()
}

/// Kronecker product `a (x) b`, with `a`'s index varying slowest.
pub fn kron<T: Real>(a: &[Complex<T>], b: &[Complex<T>]) -> Vec<Complex<T>> {
    a.iter()
        .flat_map(|&x| b.iter().map(move |&y| x * y))
        .collect()
}

/// Rectangular array response for a plane wave from (`az`, `el`): the
/// x-axis steering vector at `cos(el) sin(az)` Kronecker the y-axis vector at
/// `sin(el)`.
pub fn ura_response<T: Real>(az: T, el: T, geom: ArrayGeometry) -> Vec<Complex<T>> {
    let (az, el) = (az.as_f64(), el.as_f64());
    let ux = T::lit(el.cos() * az.sin());
    let uy = T::lit(el.sin());
    kron(&steering_vector(ux, geom.nx), &steering_vector(uy, geom.ny))
}

/// Builds the tap-domain channel of a path set.
pub fn synth_channel<T: Real>(
    paths: &PathSet<T>,
    d: usize,
    cfg: &PulseConfig<T>,
    rx: ArrayGeometry,
    tx: ArrayGeometry,
) -> Result<ChannelTensor<T>> {
    if d == 0 {
        return Err(ChannelError::NoTaps);
    }
    if paths.is_empty() {
        return Err(ChannelError::NoPaths);
    }
    cfg.validate()?;
    let (nr, nt) = (rx.len(), tx.len());
    let mut h = ChannelTensor::zeros(d, nr, nt);
    let ts = cfg.ts.as_f64();
    let support = cfg.support.as_f64();
    let beta = cfg.beta.as_f64();
    for path in paths {
        let ar = ura_response(path.aoa_az, path.aoa_el, rx);
        let at = ura_response(path.aod_az, path.aod_el, tx);
        let delay = (path.toa - cfg.t_off).as_f64() / ts;
        for tap in 0..d {
            let x = tap as f64 - delay;
            if x.abs() > support {
                continue;
            }
            let w = raised_cosine_samples(x, beta);
            if w == 0.0 {
                continue;
            }
            let g = path.alpha * T::lit(w);
            for (r, &ar_r) in ar.iter().enumerate() {
                let gr = g * ar_r;
                let row = &mut h.taps[(tap * nr + r) * nt..(tap * nr + r + 1) * nt];
                for (dst, &at_t) in row.iter_mut().zip(&at) {
                    *dst += gr * at_t;
                }
            }
        }
    }
    Ok(h)
}

/// Complex `n_sc x Nr x Nt` per-subcarrier channel matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyResponse<T> {
    n_sc: usize,
    nr: usize,
    nt: usize,
    data: Vec<Complex<T>>,
}

impl<T: Real> FrequencyResponse<T> {
    pub fn zeros(n_sc: usize, nr: usize, nt: usize) -> Self {
        Self {
            n_sc,
            nr,
            nt,
            data: vec![Complex::new(T::zero(), T::zero()); n_sc * nr * nt],
        }
    }

    pub fn from_vec(n_sc: usize, nr: usize, nt: usize, data: Vec<Complex<T>>) -> Result<Self> {
        if data.len() != n_sc * nr * nt {
            return Err(ChannelError::ShapeMismatch {
                d: n_sc,
                nr,
                nt,
                got: data.len(),
            });
        }
        Ok(Self { n_sc, nr, nt, data })
    }

    pub fn n_sc(&self) -> usize {
        self.n_sc
    }

    pub fn nr(&self) -> usize {
        self.nr
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    /// Channel matrix at subcarrier `k`, row-major `Nr x Nt`.
    pub fn subcarrier(&self, k: usize) -> &[Complex<T>] {
        let m = self.nr * self.nt;
        &self.data[k * m..(k + 1) * m]
    }

    pub fn subcarrier_mut(&mut self, k: usize) -> &mut [Complex<T>] {
        let m = self.nr * self.nt;
        &mut self.data[k * m..(k + 1) * m]
    }
}

/// `exp(sign * j * 2*pi * m / n)` for `m = 0..n`.
pub(crate) fn twiddles<T: Real>(n: usize, sign: f64) -> Vec<Complex<T>> {
    (0..n)
        .map(|m| {
            let a = sign * 2.0 * std::f64::consts::PI * m as f64 / n as f64;
            Complex::new(T::lit(a.cos()), T::lit(a.sin()))
        })
        .collect()
}

/// Subcarrier responses `H_k = sum_d H_d exp(-j*2*pi*k*d/n_sc)`.
pub fn channel_frequency_response<T: Real>(
    h: &ChannelTensor<T>,
    n_sc: usize,
) -> Result<FrequencyResponse<T>> {
    if n_sc < h.d {
        return Err(ChannelError::TooFewSubcarriers { n_sc, d: h.d });
    }
    let w = twiddles::<T>(n_sc, -1.0);
    let mut out = FrequencyResponse::zeros(n_sc, h.nr, h.nt);
    for k in 0..n_sc {
        let dst = out.subcarrier_mut(k);
        for d in 0..h.d {
            let tw = w[(k * d) % n_sc];
            for (o, &v) in dst.iter_mut().zip(h.tap(d)) {
                *o += v * tw;
            }
        }
    }
    Ok(out)
}

/// Named array/tap presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArrayPreset {
    pub rx: ArrayGeometry,
    pub tx: ArrayGeometry,
    pub taps: usize,
}

impl ArrayPreset {
    /// 2x2 receive, 8x8 transmit, 8 taps.
    pub fn desk() -> Self {
        Self {
            rx: ArrayGeometry { nx: 2, ny: 2 },
            tx: ArrayGeometry { nx: 8, ny: 8 },
            taps: 8,
        }
    }

    /// 2x2 receive, 24x24 transmit, 16 taps.
    pub fn full_scale() -> Self {
        Self {
            rx: ArrayGeometry { nx: 2, ny: 2 },
            tx: ArrayGeometry { nx: 24, ny: 24 },
            taps: 16,
        }
    }
}
