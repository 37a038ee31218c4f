//! OFDM pilot sounding, least-squares estimation with magnitude/phase
//! interpolation, and an orthogonal matching pursuit baseline over an
//! angle-delay dictionary.

use crate::channel_model::{
    channel_frequency_response, kron, steering_vector, twiddles, ArrayGeometry, ChannelError,
    ChannelTensor, FrequencyResponse,
};
use midband_autodiff::Real;
use num_complex::{Complex, Complex64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EstimationError {
    #[error("invalid pilot configuration: {0}")]
    InvalidPilots(String),
    #[error("{n_sc} subcarriers cannot carry a {d}-tap channel")]
    TooFewSubcarriers { n_sc: usize, d: usize },
    #[error("observation does not match the configuration: {0}")]
    ShapeMismatch(String),
    #[error("dictionary is empty")]
    EmptyDictionary,
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

pub type Result<T> = std::result::Result<T, EstimationError>;

/// Noise reference for pilot transmission.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseLevel {
    /// Mean received pilot power per receive antenna over the noise
    /// variance, in dB, with the power averaged over the whole band.
    SnrDb(f64),
    /// Absolute complex noise variance in watts.
    Variance(f64),
}

/// Comb-type pilot layout and pilot power.
#[derive(Clone, Debug, PartialEq)]
pub struct PilotConfig {
    n_sc: usize,
    pilots: Vec<usize>,
    nt: usize,
    p_t: f64,
    noise: NoiseLevel,
}

impl PilotConfig {
    /// `n_pilot` equispaced pilots `round(i * n_sc / n_pilot)`, starting at
    /// subcarrier 0.
    pub fn comb(n_sc: usize, n_pilot: usize, nt: usize, p_t: f64, noise: NoiseLevel) -> Result<Self> {
        if n_pilot == 0 || n_pilot > n_sc {
            return Err(EstimationError::InvalidPilots(format!(
                "{n_pilot} pilots on {n_sc} subcarriers"
            )));
        }
        let pilots = (0..n_pilot)
            .map(|i| ((i * n_sc) as f64 / n_pilot as f64).round() as usize)
            .collect();
        Self::with_pilots(n_sc, pilots, nt, p_t, noise)
    }

    pub fn with_pilots(
        n_sc: usize,
        pilots: Vec<usize>,
        nt: usize,
        p_t: f64,
        noise: NoiseLevel,
    ) -> Result<Self> {
        let increasing = pilots.windows(2).all(|w| w[0] < w[1]);
        if pilots.is_empty() || !increasing || pilots.last().is_some_and(|&k| k >= n_sc) {
            return Err(EstimationError::InvalidPilots(format!(
                "placement {pilots:?} on {n_sc} subcarriers"
            )));
        }
        if nt == 0 {
            return Err(EstimationError::InvalidPilots("no transmit antennas".into()));
        }
        if !(p_t > 0.0) {
            return Err(EstimationError::InvalidPilots("transmit power must be positive".into()));
        }
        if let NoiseLevel::Variance(v) = noise {
            if !(v >= 0.0) {
                return Err(EstimationError::InvalidPilots("negative noise variance".into()));
            }
        }
        Ok(Self {
            n_sc,
            pilots,
            nt,
            p_t,
            noise,
        })
    }

    pub fn with_noise(mut self, noise: NoiseLevel) -> Self {
        self.noise = noise;
        self
    }

    pub fn n_sc(&self) -> usize {
        self.n_sc
    }

    pub fn n_pilot(&self) -> usize {
        self.pilots.len()
    }

    pub fn pilots(&self) -> &[usize] {
        &self.pilots
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn p_t(&self) -> f64 {
        self.p_t
    }

    pub fn noise(&self) -> NoiseLevel {
        self.noise
    }

    /// Unitary DFT across transmit antennas, `F[a][b] = exp(-j2pi ab/Nt)/sqrt(Nt)`.
    pub fn unitary_dft(&self) -> Vec<Complex64> {
        let nt = self.nt;
        let scale = 1.0 / (nt as f64).sqrt();
        let w = twiddles::<f64>(nt, -1.0);
        (0..nt * nt).map(|i| w[(i / nt * (i % nt)) % nt] * scale).collect()
    }

    /// Pilot block `S = sqrt(P_T) F` sent on every pilot subcarrier: column
    /// `b` is the antenna vector of the `b`-th pilot symbol.
    pub fn pilot_matrix(&self) -> Vec<Complex64> {
        let s = self.p_t.sqrt();
        self.unitary_dft().into_iter().map(|z| z * s).collect()
    }

    /// Noise variance used for channel `h`.
    pub fn noise_variance<T: Real>(&self, h: &ChannelTensor<T>) -> f64 {
        match self.noise {
            NoiseLevel::Variance(v) => v,
            NoiseLevel::SnrDb(db) => {
                let snr = 10f64.powf(db / 10.0);
                self.p_t * h.energy() / ((h.nr() * h.nt()) as f64 * snr)
            }
        }
    }
}

/// Per-pilot-subcarrier `Nr x Nt` complex matrices, pilot-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PilotBlocks<T> {
    n_sc: usize,
    pilots: Vec<usize>,
    nr: usize,
    nt: usize,
    data: Vec<Complex<T>>,
}

impl<T: Real> PilotBlocks<T> {
    pub fn new(n_sc: usize, pilots: Vec<usize>, nr: usize, nt: usize, data: Vec<Complex<T>>) -> Result<Self> {
        if data.len() != pilots.len() * nr * nt {
            return Err(EstimationError::ShapeMismatch(format!(
                "{} entries for {} pilots of {nr}x{nt}",
                data.len(),
                pilots.len()
            )));
        }
        Ok(Self {
            n_sc,
            pilots,
            nr,
            nt,
            data,
        })
    }

    pub fn n_sc(&self) -> usize {
        self.n_sc
    }

    pub fn pilots(&self) -> &[usize] {
        &self.pilots
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

    pub fn block(&self, i: usize) -> &[Complex<T>] {
        let m = self.nr * self.nt;
        &self.data[i * m..(i + 1) * m]
    }
}

/// Received pilot blocks `Y_k = H_k S + V_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PilotObservation<T> {
    pub blocks: PilotBlocks<T>,
    /// Noise variance that was applied.
    pub noise_var: f64,
}

/// Row-major complex product of an `m x k` and a `k x n` matrix.
fn cmatmul<T: Real>(a: &[Complex<T>], b: &[Complex64], m: usize, k: usize, n: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let av = Complex64::new(av.re.as_f64(), av.im.as_f64());
            let row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o += av * bv;
            }
        }
    }
    out
}

fn to_t<T: Real>(z: Complex64) -> Complex<T> {
    Complex::new(T::lit(z.re), T::lit(z.im))
}

fn to_f64<T: Real>(z: Complex<T>) -> Complex64 {
    Complex64::new(z.re.as_f64(), z.im.as_f64())
}

/// Simulates pilot reception on every pilot subcarrier; the noise draw is
/// fully determined by `seed`.
pub fn transmit_pilots<T: Real>(
    h: &ChannelTensor<T>,
    cfg: &PilotConfig,
    seed: u64,
) -> Result<PilotObservation<T>> {
    if cfg.n_sc < h.d() {
        return Err(EstimationError::TooFewSubcarriers { n_sc: cfg.n_sc, d: h.d() });
    }
    if cfg.nt != h.nt() {
        return Err(EstimationError::ShapeMismatch(format!(
            "pilot matrix for {} antennas, channel has {}",
            cfg.nt,
            h.nt()
        )));
    }
    let (nr, nt) = (h.nr(), h.nt());
    let freq = channel_frequency_response(h, cfg.n_sc)?;
    let s = cfg.pilot_matrix();
    let noise_var = cfg.noise_variance(h);
    let sigma = (noise_var / 2.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(cfg.n_pilot() * nr * nt);
    for &k in &cfg.pilots {
        let y = cmatmul(freq.subcarrier(k), &s, nr, nt, nt);
        for v in y {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            data.push(to_t(v + Complex64::new(re, im) * sigma));
        }
    }
    Ok(PilotObservation {
        blocks: PilotBlocks::new(cfg.n_sc, cfg.pilots.clone(), nr, nt, data)?,
        noise_var,
    })
}

/// Per-pilot least squares `H_k = Y_k S^-1 = Y_k F^H / sqrt(P_T)`.
pub fn ls_estimate<T: Real>(obs: &PilotObservation<T>, cfg: &PilotConfig) -> Result<PilotBlocks<T>> {
    let b = &obs.blocks;
    if b.nt != cfg.nt || b.pilots != cfg.pilots {
        return Err(EstimationError::ShapeMismatch("pilot layout differs".into()));
    }
    let nt = cfg.nt;
    let f = cfg.unitary_dft();
    let scale = 1.0 / cfg.p_t.sqrt();
    // F^H scaled
    let inv: Vec<Complex64> = (0..nt * nt)
        .map(|i| f[(i % nt) * nt + i / nt].conj() * scale)
        .collect();
    let mut data = Vec::with_capacity(b.data.len());
    for i in 0..b.pilots.len() {
        data.extend(cmatmul(b.block(i), &inv, b.nr, nt, nt).into_iter().map(to_t::<T>));
    }
    PilotBlocks::new(b.n_sc, b.pilots.clone(), b.nr, nt, data)
}

fn wrap_phase(x: f64) -> f64 {
    let mut y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y == -PI {
        y = PI;
    }
    y
}

/// Full-band response from pilot estimates: per antenna pair, magnitude and
/// unwrapped phase are interpolated linearly in subcarrier index. The band is
/// treated as periodic, so subcarriers past the last pilot interpolate
/// towards the first pilot of the next period.
pub fn interpolate_full_band<T: Real>(est: &PilotBlocks<T>) -> FrequencyResponse<T> {
    let (n, nr, nt) = (est.n_sc, est.nr, est.nt);
    let np = est.pilots.len();
    let m = nr * nt;
    let mut out = FrequencyResponse::zeros(n, nr, nt);
    // knots: pilot index positions plus the first pilot one period later
    let mut knots: Vec<f64> = est.pilots.iter().map(|&k| k as f64).collect();
    knots.push((est.pilots[0] + n) as f64);
    let mut mags = vec![0.0; np + 1];
    let mut phases = vec![0.0; np + 1];
    for pair in 0..m {
        for i in 0..=np {
            let z = to_f64(est.data[(i % np) * m + pair]);
            mags[i] = z.norm();
            let arg = z.arg();
            phases[i] = if i == 0 {
                arg
            } else {
                phases[i - 1] + wrap_phase(arg - phases[i - 1])
            };
        }
        let mut seg = 0;
        for k in 0..n {
            // position on the periodic axis, at or after the first pilot
            let pos = if k < est.pilots[0] { (k + n) as f64 } else { k as f64 };
            while seg + 1 < np && pos >= knots[seg + 1] {
                seg += 1;
            }
            let mut s = seg;
            while s > 0 && pos < knots[s] {
                s -= 1;
            }
            let w = (pos - knots[s]) / (knots[s + 1] - knots[s]);
            let mag = mags[s] + w * (mags[s + 1] - mags[s]);
            let ph = phases[s] + w * (phases[s + 1] - phases[s]);
            out.subcarrier_mut(k)[pair] = to_t(Complex64::from_polar(mag, ph));
        }
    }
    out
}

/// Inverse DFT across subcarriers, keeping the first `d` taps.
pub fn to_time_domain<T: Real>(hf: &FrequencyResponse<T>, d: usize) -> Result<ChannelTensor<T>> {
    let n = hf.n_sc();
    if d > n || d == 0 {
        return Err(EstimationError::TooFewSubcarriers { n_sc: n, d });
    }
    let (nr, nt) = (hf.nr(), hf.nt());
    let m = nr * nt;
    let w = twiddles::<f64>(n, 1.0);
    let mut acc = vec![Complex64::new(0.0, 0.0); d * m];
    for k in 0..n {
        let src = hf.subcarrier(k);
        for tap in 0..d {
            let tw = w[(k * tap) % n];
            for (o, &v) in acc[tap * m..(tap + 1) * m].iter_mut().zip(src) {
                *o += to_f64(v) * tw;
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    let taps = acc.into_iter().map(|z| to_t::<T>(z * inv_n)).collect();
    Ok(ChannelTensor::from_vec(d, nr, nt, taps)?)
}

/// Pilots, LS, interpolation and inverse DFT back to `h.d()` taps.
pub fn coarse_estimate<T: Real>(h: &ChannelTensor<T>, cfg: &PilotConfig, seed: u64) -> Result<ChannelTensor<T>> {
    let obs = transmit_pilots(h, cfg, seed)?;
    let ls = ls_estimate(&obs, cfg)?;
    to_time_domain(&interpolate_full_band(&ls), h.d())
}

/// Stopping rules for [`omp_estimate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OmpConfig {
    pub k_max: usize,
    /// Stop once the residual norm is at most this fraction of the
    /// observation norm.
    pub resid_tol: f64,
}

/// Angle-delay dictionary: every atom is a delay phase ramp over the pilot
/// subcarriers times receive and transmit array responses on
/// direction-cosine grids, normalized to unit norm.
#[derive(Clone, Debug)]
pub struct OmpDictionary {
    n_sc: usize,
    pilots: Vec<usize>,
    d: usize,
    nr: usize,
    nt: usize,
    rx_atoms: Vec<Vec<Complex64>>,
    tx_atoms: Vec<Vec<Complex64>>,
    delay_atoms: Vec<Vec<Complex64>>,
    scale: f64,
}

/// Direction-cosine grid `-1 + 2i/g`, `g = oversample * n` (a single point
/// for one-element axes).
fn cosine_grid(n: usize, oversample: usize) -> Vec<f64> {
    let g = if n == 1 { 1 } else { oversample * n };
    (0..g).map(|i| -1.0 + 2.0 * i as f64 / g as f64).collect()
}

fn array_atoms(geom: ArrayGeometry, oversample: usize) -> Vec<Vec<Complex64>> {
    let gx = cosine_grid(geom.nx(), oversample);
    let gy = cosine_grid(geom.ny(), oversample);
    let mut out = Vec::with_capacity(gx.len() * gy.len());
    for &ux in &gx {
        let ax = steering_vector(ux, geom.nx());
        for &uy in &gy {
            out.push(kron(&ax, &steering_vector(uy, geom.ny())));
        }
    }
    out
}

impl OmpDictionary {
    /// Grids of `oversample` points per antenna along each array axis and
    /// one delay per sample interval over `d` taps.
    pub fn new(
        rx: ArrayGeometry,
        tx: ArrayGeometry,
        d: usize,
        cfg: &PilotConfig,
        oversample: usize,
    ) -> Result<Self> {
        if d == 0 || oversample == 0 {
            return Err(EstimationError::EmptyDictionary);
        }
        let n = cfg.n_sc;
        let w = twiddles::<f64>(n, -1.0);
        let delay_atoms = (0..d)
            .map(|tau| cfg.pilots.iter().map(|&k| w[(k * tau) % n]).collect())
            .collect();
        let (nr, nt) = (rx.len(), tx.len());
        Ok(Self {
            n_sc: n,
            pilots: cfg.pilots.clone(),
            d,
            nr,
            nt,
            rx_atoms: array_atoms(rx, oversample),
            tx_atoms: array_atoms(tx, oversample),
            delay_atoms,
            scale: 1.0 / ((cfg.pilots.len() * nr * nt) as f64).sqrt(),
        })
    }

    pub fn len(&self) -> usize {
        self.d * self.rx_atoms.len() * self.tx_atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(delay, rx grid index, tx grid index)` of a flat atom index.
    pub fn split(&self, idx: usize) -> (usize, usize, usize) {
        let gt = self.tx_atoms.len();
        let gr = self.rx_atoms.len();
        (idx / (gr * gt), (idx / gt) % gr, idx % gt)
    }

    /// Unit-norm atom over (pilot, rx, tx), pilot-major.
    pub fn atom(&self, idx: usize) -> Vec<Complex64> {
        let (tau, ir, it) = self.split(idx);
        let mut out = Vec::with_capacity(self.pilots.len() * self.nr * self.nt);
        for &dz in &self.delay_atoms[tau] {
            for &ar in &self.rx_atoms[ir] {
                let g = dz * ar * self.scale;
                out.extend(self.tx_atoms[it].iter().map(|&at| g * at));
            }
        }
        out
    }

    /// `|a_i^H r|` for every atom, computed separably.
    fn correlations(&self, resid: &[Complex64]) -> Vec<f64> {
        let (np, nr, nt) = (self.pilots.len(), self.nr, self.nt);
        let (gr, gt) = (self.rx_atoms.len(), self.tx_atoms.len());
        let mut out = Vec::with_capacity(self.len());
        let mut z = vec![Complex64::new(0.0, 0.0); nr * nt];
        let mut wv = vec![Complex64::new(0.0, 0.0); gr * nt];
        for tau in 0..self.d {
            z.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
            for i in 0..np {
                let c = self.delay_atoms[tau][i].conj();
                for (o, &r) in z.iter_mut().zip(&resid[i * nr * nt..(i + 1) * nr * nt]) {
                    *o += c * r;
                }
            }
            for (ir, ar) in self.rx_atoms.iter().enumerate() {
                let row = &mut wv[ir * nt..(ir + 1) * nt];
                row.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
                for r in 0..nr {
                    let c = ar[r].conj();
                    for (o, &v) in row.iter_mut().zip(&z[r * nt..(r + 1) * nt]) {
                        *o += c * v;
                    }
                }
            }
            for ir in 0..gr {
                let row = &wv[ir * nt..(ir + 1) * nt];
                for at in &self.tx_atoms {
                    let s: Complex64 = row.iter().zip(at).map(|(&v, &a)| a.conj() * v).sum();
                    out.push((s * self.scale).norm());
                }
            }
            let _ = gt;
        }
        out
    }
}

/// Outcome of a matching-pursuit run.
#[derive(Clone, Debug)]
pub struct OmpResult<T> {
    pub channel: ChannelTensor<T>,
    /// Selected atom indices in selection order.
    pub support: Vec<usize>,
    /// Least-squares gains of the selected atoms.
    pub gains: Vec<Complex64>,
    /// Residual norm before the first and after every accepted selection.
    pub residual_norms: Vec<f64>,
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn vec_norm(a: &[Complex64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Solves the Hermitian positive definite system `g x = b` by Cholesky;
/// `None` when a pivot collapses (rank deficiency).
fn cholesky_solve(g: &[Complex64], b: &[Complex64], n: usize) -> Option<Vec<Complex64>> {
    let max_diag = (0..n).map(|i| g[i * n + i].re).fold(0.0, f64::max);
    let mut l = vec![Complex64::new(0.0, 0.0); n * n];
    for j in 0..n {
        let mut diag = g[j * n + j].re;
        for k in 0..j {
            diag -= l[j * n + k].norm_sqr();
        }
        if diag <= 1e-10 * max_diag {
            return None;
        }
        let ljj = diag.sqrt();
        l[j * n + j] = Complex64::new(ljj, 0.0);
        for i in j + 1..n {
            let mut s = g[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k].conj();
            }
            l[i * n + j] = s / ljj;
        }
    }
    let mut y = vec![Complex64::new(0.0, 0.0); n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i].conj() * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Some(x)
}

/// Greedy sparse recovery from the LS pilot estimates of `obs`.
pub fn omp_estimate<T: Real>(
    obs: &PilotObservation<T>,
    cfg: &PilotConfig,
    dict: &OmpDictionary,
    omp: &OmpConfig,
) -> Result<OmpResult<T>> {
    if dict.is_empty() {
        return Err(EstimationError::EmptyDictionary);
    }
    if dict.pilots != cfg.pilots || dict.n_sc != cfg.n_sc || dict.nr != obs.blocks.nr || dict.nt != obs.blocks.nt {
        return Err(EstimationError::ShapeMismatch("dictionary built for a different layout".into()));
    }
    let ls = ls_estimate(obs, cfg)?;
    let y: Vec<Complex64> = ls.data.iter().map(|&z| to_f64(z)).collect();
    let y_norm = vec_norm(&y);
    let mut resid = y.clone();
    let mut support: Vec<usize> = Vec::new();
    let mut atoms: Vec<Vec<Complex64>> = Vec::new();
    let mut gram: Vec<Vec<Complex64>> = Vec::new();
    let mut rhs: Vec<Complex64> = Vec::new();
    let mut gains: Vec<Complex64> = Vec::new();
    let mut residual_norms = vec![y_norm];

    while support.len() < omp.k_max && *residual_norms.last().unwrap() > omp.resid_tol * y_norm {
        let corr = dict.correlations(&resid);
        let best = corr
            .iter()
            .enumerate()
            .filter(|(i, _)| !support.contains(i))
            .fold(None, |acc: Option<(usize, f64)>, (i, &c)| match acc {
                Some((_, bc)) if bc >= c => acc,
                _ => Some((i, c)),
            });
        let Some((idx, _)) = best else { break };
        let atom = dict.atom(idx);
        let row: Vec<Complex64> = atoms.iter().map(|a| dot(a, &atom)).collect();
        for (g, &v) in gram.iter_mut().zip(&row) {
            g.push(v);
        }
        let mut new_row: Vec<Complex64> = row.iter().map(|v| v.conj()).collect();
        new_row.push(dot(&atom, &atom));
        gram.push(new_row);
        rhs.push(dot(&atom, &y));
        atoms.push(atom);
        support.push(idx);

        let n = support.len();
        let flat: Vec<Complex64> = gram.iter().flatten().copied().collect();
        let Some(x) = cholesky_solve(&flat, &rhs, n) else {
            support.pop();
            atoms.pop();
            rhs.pop();
            gram.pop();
            gram.iter_mut().for_each(|g| {
                g.pop();
            });
            break;
        };
        resid.copy_from_slice(&y);
        for (a, &g) in atoms.iter().zip(&x) {
            for (r, &v) in resid.iter_mut().zip(a) {
                *r -= g * v;
            }
        }
        gains = x;
        residual_norms.push(vec_norm(&resid));
    }

    let mut h = ChannelTensor::zeros(dict.d, dict.nr, dict.nt);
    for (&idx, &g) in support.iter().zip(&gains) {
        let (tau, ir, it) = dict.split(idx);
        let g = g * dict.scale;
        for (r, &ar) in dict.rx_atoms[ir].iter().enumerate() {
            for (t, &at) in dict.tx_atoms[it].iter().enumerate() {
                *h.get_mut(tau, r, t) += to_t::<T>(g * ar * at);
            }
        }
    }
    Ok(OmpResult {
        channel: h,
        support,
        gains,
        residual_norms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn comb_placement_is_equispaced_from_zero() {
        let cfg = PilotConfig::comb(128, 4, 1, 1.0, NoiseLevel::Variance(0.0)).unwrap();
        assert_eq!(cfg.pilots(), &[0, 32, 64, 96]);
        let cfg = PilotConfig::comb(10, 3, 1, 1.0, NoiseLevel::Variance(0.0)).unwrap();
        assert_eq!(cfg.pilots(), &[0, 3, 7]);
        assert!(PilotConfig::comb(8, 9, 1, 1.0, NoiseLevel::Variance(0.0)).is_err());
        assert!(PilotConfig::comb(8, 0, 1, 1.0, NoiseLevel::Variance(0.0)).is_err());
    }

    #[test]
    fn pilot_matrix_is_scaled_unitary() {
        let cfg = PilotConfig::comb(16, 4, 4, 2.0, NoiseLevel::Variance(0.0)).unwrap();
        let f = cfg.unitary_dft();
        for i in 0..4 {
            for j in 0..4 {
                let s: Complex64 = (0..4).map(|k| f[i * 4 + k] * f[j * 4 + k].conj()).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((s - c(want, 0.0)).norm() < 1e-12);
            }
        }
        let s = cfg.pilot_matrix();
        assert!((s[0] - c(2f64.sqrt() / 2.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn scalar_ls_returns_observation() {
        let h = ChannelTensor::from_vec(1, 1, 1, vec![c(0.5, -1.0)]).unwrap();
        let cfg = PilotConfig::comb(1, 1, 1, 1.0, NoiseLevel::Variance(0.3)).unwrap();
        let obs = transmit_pilots(&h, &cfg, 5).unwrap();
        let est = ls_estimate(&obs, &cfg).unwrap();
        assert_eq!(est.data()[0], obs.blocks.data()[0]);
    }

    #[test]
    fn interpolation_wraps_around_the_band() {
        // linear phase ramp exp(-j 2 pi k / 16), pilots every 4th subcarrier
        let n = 16;
        let pilots: Vec<usize> = (0..n).step_by(4).collect();
        let val = |k: usize| Complex64::from_polar(1.5, -2.0 * PI * k as f64 / n as f64);
        let data = pilots.iter().map(|&k| val(k)).collect();
        let est = PilotBlocks::new(n, pilots, 1, 1, data).unwrap();
        let full = interpolate_full_band(&est);
        for k in 0..n {
            assert!((full.subcarrier(k)[0] - val(k)).norm() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn single_pilot_extrapolates_constant() {
        let est = PilotBlocks::new(8, vec![3], 1, 1, vec![c(0.2, 0.7)]).unwrap();
        let full = interpolate_full_band(&est);
        for k in 0..8 {
            assert!((full.subcarrier(k)[0] - c(0.2, 0.7)).norm() < 1e-15);
        }
    }

    #[test]
    fn cholesky_detects_rank_deficiency() {
        let g = vec![c(1.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(1.0, 0.0)];
        assert!(cholesky_solve(&g, &[c(1.0, 0.0), c(1.0, 0.0)], 2).is_none());
        let g = vec![c(2.0, 0.0), c(0.0, 1.0), c(0.0, -1.0), c(2.0, 0.0)];
        let x = cholesky_solve(&g, &[c(1.0, 0.0), c(0.0, 0.0)], 2).unwrap();
        // check g x = b
        let r0 = g[0] * x[0] + g[1] * x[1];
        let r1 = g[2] * x[0] + g[3] * x[1];
        assert!((r0 - c(1.0, 0.0)).norm() < 1e-12 && r1.norm() < 1e-12);
    }
}
