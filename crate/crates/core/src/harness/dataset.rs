use super::scene::ScenePreset;
use super::{HarnessError, Result};
use crate::channel_model::{synth_channel, ArrayGeometry, ArrayPreset, ChannelTensor, PulseConfig};
use crate::estimation::{coarse_estimate, NoiseLevel, PilotConfig};
use crate::pinn::{channel_to_planes, norm_constant, planes_to_channel, Sample, SampleMeta};
use crate::propagation::{
    generate_rss_map, rss_from_fields, rss_patch_at, trace_paths, GainCalibration, RssPatch,
};
use midband_autodiff::Tensor;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};

pub const DATASET_MAGIC: [u8; 4] = *b"MBCE";
pub const DATASET_VERSION: u32 = 1;

/// Receiver positions drawn per requested sample before giving up.
const ATTEMPTS_PER_SAMPLE: usize = 200;

/// What to generate.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub scene: ScenePreset,
    pub n_samples: usize,
    pub n_sc: usize,
    pub n_pilot: usize,
    pub snr_db: f64,
    pub p_t: f64,
    pub rx: ArrayGeometry,
    pub tx: ArrayGeometry,
    pub d_taps: usize,
    pub patch_side: usize,
    pub rx_height: f64,
    pub rolloff: f64,
    /// Train / validation / test fractions, used for the stored
    /// normalization constant.
    pub split: [f64; 3],
}

impl DatasetSpec {
    /// 2048 samples, 2x2 by 8x8 arrays, 8 taps, 128 subcarriers, 4 pilots
    /// at 0 dB.
    pub fn desk(scene: ScenePreset) -> Self {
        let preset = ArrayPreset::desk();
        Self {
            scene,
            n_samples: 2048,
            n_sc: 128,
            n_pilot: 4,
            snr_db: 0.0,
            p_t: 1.0,
            rx: preset.rx,
            tx: preset.tx,
            d_taps: preset.taps,
            patch_side: 9,
            rx_height: 1.5,
            rolloff: 0.25,
            split: [0.8, 0.1, 0.1],
        }
    }

    pub fn pilot_config(&self) -> Result<PilotConfig> {
        Ok(PilotConfig::comb(
            self.n_sc,
            self.n_pilot,
            self.tx.len(),
            self.p_t,
            NoiseLevel::SnrDb(self.snr_db),
        )?)
    }
}

/// Fixed-size metadata stored ahead of the samples.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub scene: ScenePreset,
    pub d_taps: usize,
    pub rx: ArrayGeometry,
    pub tx: ArrayGeometry,
    pub patch_side: usize,
    pub n_sc: usize,
    pub n_pilot: usize,
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub snr_db: f64,
    pub p_t: f64,
    pub norm_c: f64,
    pub seed: u64,
    pub split: [f64; 3],
}

impl DatasetHeader {
    pub fn pilot_config(&self) -> Result<PilotConfig> {
        Ok(PilotConfig::comb(
            self.n_sc,
            self.n_pilot,
            self.tx.len(),
            self.p_t,
            NoiseLevel::SnrDb(self.snr_db),
        )?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
}

/// Contiguous train / validation / test partition.
#[derive(Clone, Copy, Debug)]
pub struct Splits<'a> {
    pub train: &'a [Sample],
    pub val: &'a [Sample],
    pub test: &'a [Sample],
}

fn split_counts(n: usize, split: [f64; 3]) -> (usize, usize) {
    let train = ((split[0] * n as f64).round() as usize).min(n);
    let val = ((split[1] * n as f64).round() as usize).min(n - train);
    (train, val)
}

impl Dataset {
    pub fn splits(&self) -> Splits<'_> {
        let (a, b) = split_counts(self.samples.len(), self.header.split);
        Splits {
            train: &self.samples[..a],
            val: &self.samples[a..a + b],
            test: &self.samples[a + b..],
        }
    }
}

fn round_f32(h: &mut ChannelTensor<f64>) {
    for z in h.data_mut() {
        *z = Complex64::new(z.re as f32 as f64, z.im as f32 as f64);
    }
}

/// Traces random receiver positions in the scene and builds truth
/// channels, pilot-based coarse estimates and RSS patches. Every stored
/// value is representable in single precision, so the file round trip is
/// exact and coarse estimates can be regenerated bit for bit from the
/// stored truth and per-sample seed.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    if spec.n_samples == 0 {
        return Err(HarnessError::Config("n_samples must be at least 1".into()));
    }
    let scene = spec.scene.scene()?;
    let grid = spec.scene.grid();
    let map = generate_rss_map(&scene, grid, spec.rx_height)?;
    let pilot = spec.pilot_config()?;
    let calib = GainCalibration {
        p_t: spec.p_t,
        nr: spec.rx.len(),
        nt: spec.tx.len(),
    };
    let ts = 1.0 / spec.scene.bandwidth_hz();
    let lambda = scene.wavelength();
    let lo = grid.cell_center(0, 0);
    let hi = grid.cell_center(grid.rows - 1, grid.cols - 1);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(spec.n_samples);
    let mut attempts = 0;
    while samples.len() < spec.n_samples {
        attempts += 1;
        if attempts > ATTEMPTS_PER_SAMPLE * spec.n_samples && samples.is_empty() {
            return Err(HarnessError::NoReachablePositions(spec.scene.to_string()));
        }
        let ue = [rng.gen_range(lo[0]..hi[0]), rng.gen_range(lo[1]..hi[1]), spec.rx_height];
        let sample_seed: u64 = rng.gen();
        if scene.is_inside_building(ue) {
            continue;
        }
        let paths = trace_paths(&scene, ue, &calib)?;
        let Some(first) = paths.first_arrival() else { continue };
        let pulse = PulseConfig::new(ts, spec.rolloff)?.with_offset(first - ts);
        let mut truth = synth_channel(&paths, spec.d_taps, &pulse, spec.rx, spec.tx)?;
        round_f32(&mut truth);
        let mut coarse = coarse_estimate(&truth, &pilot, sample_seed)?;
        round_f32(&mut coarse);
        let patch = rss_patch_at(&map, [ue[0], ue[1]], spec.patch_side)?;
        let values = patch.values().iter().map(|&v| v as f32 as f64).collect();
        samples.push(Sample {
            coarse,
            truth,
            rss_patch: RssPatch::new(spec.patch_side, patch.center(), values)?,
            rss_scalar: rss_from_fields(&paths.fields(), lambda) as f32 as f64,
            meta: SampleMeta {
                ue,
                carrier_hz: scene.carrier_hz(),
                seed: sample_seed,
            },
        });
    }
    let (n_train, _) = split_counts(samples.len(), spec.split);
    let norm_c = norm_constant(&samples[..n_train.max(1)])?;
    Ok(Dataset {
        header: DatasetHeader {
            scene: spec.scene,
            d_taps: spec.d_taps,
            rx: spec.rx,
            tx: spec.tx,
            patch_side: spec.patch_side,
            n_sc: spec.n_sc,
            n_pilot: spec.n_pilot,
            carrier_hz: scene.carrier_hz(),
            bandwidth_hz: spec.scene.bandwidth_hz(),
            snr_db: spec.snr_db,
            p_t: spec.p_t,
            norm_c,
            seed,
            split: spec.split,
        },
        samples,
    })
}

/// Copies of `samples` whose coarse estimates come from `pilot` instead,
/// using each sample's stored noise seed.
pub fn with_pilots(samples: &[Sample], pilot: &PilotConfig) -> Result<Vec<Sample>> {
    samples
        .iter()
        .map(|s| {
            let mut coarse = coarse_estimate(&s.truth, pilot, s.meta.seed)?;
            round_f32(&mut coarse);
            Ok(Sample { coarse, ..s.clone() })
        })
        .collect()
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| HarnessError::Format(format!("{v} does not fit in u32")))?;
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f32s<W: Write>(w: &mut W, vals: impl Iterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = vals.flat_map(|v| (v as f32).to_le_bytes()).collect();
    Ok(w.write_all(&bytes)?)
}

/// Writes `MBCE`, the version, the header, then per sample: coarse planes,
/// truth planes, RSS patch and RSS scalar as little-endian f32, followed by
/// the patch centre (u32 pair), receiver position (f64 x3) and noise seed
/// (u64).
pub fn write_dataset<W: Write>(mut w: W, ds: &Dataset) -> Result<()> {
    let h = &ds.header;
    w.write_all(&DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    for v in [
        h.scene.id() as usize,
        h.d_taps,
        h.rx.nx(),
        h.rx.ny(),
        h.tx.nx(),
        h.tx.ny(),
        h.patch_side,
        h.n_sc,
        h.n_pilot,
        ds.samples.len(),
    ] {
        put_u32(&mut w, v)?;
    }
    for v in [h.carrier_hz, h.bandwidth_hz, h.snr_db, h.p_t, h.norm_c] {
        put_f64(&mut w, v)?;
    }
    for v in h.split {
        put_f64(&mut w, v)?;
    }
    w.write_all(&h.seed.to_le_bytes())?;
    for s in &ds.samples {
        put_f32s(&mut w, channel_to_planes(&s.coarse).data().iter().copied())?;
        put_f32s(&mut w, channel_to_planes(&s.truth).data().iter().copied())?;
        put_f32s(&mut w, s.rss_patch.values().iter().copied())?;
        put_f32s(&mut w, std::iter::once(s.rss_scalar))?;
        let (row, col) = s.rss_patch.center();
        put_u32(&mut w, row)?;
        put_u32(&mut w, col)?;
        for v in s.meta.ue {
            put_f64(&mut w, v)?;
        }
        w.write_all(&s.meta.seed.to_le_bytes())?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| HarnessError::Format(format!("truncated file: {e}")))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; 4 * n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| HarnessError::Format(format!("truncated sample data: {e}")))?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn channel(&mut self, d: usize, nr: usize, nt: usize) -> Result<ChannelTensor<f64>> {
        let planes = Tensor::from_vec(vec![2 * d, nr, nt], self.f32s(2 * d * nr * nt)?)
            .map_err(|e| HarnessError::Format(e.to_string()))?;
        Ok(planes_to_channel(&planes)?)
    }
}

pub fn read_dataset<R: Read>(r: R) -> Result<Dataset> {
    let mut r = Reader { inner: r };
    if r.bytes::<4>()? != DATASET_MAGIC {
        return Err(HarnessError::Format("bad magic".into()));
    }
    let version = r.u32()? as u32;
    if version != DATASET_VERSION {
        return Err(HarnessError::Format(format!("unsupported version {version}")));
    }
    let scene_id = r.u32()?;
    let scene = ScenePreset::from_id(scene_id as u32)
        .ok_or_else(|| HarnessError::Format(format!("unknown scene id {scene_id}")))?;
    let d_taps = r.u32()?;
    let geom = |nx: usize, ny: usize| {
        ArrayGeometry::new(nx, ny).map_err(|e| HarnessError::Format(e.to_string()))
    };
    let rx = {
        let (nx, ny) = (r.u32()?, r.u32()?);
        geom(nx, ny)?
    };
    let tx = {
        let (nx, ny) = (r.u32()?, r.u32()?);
        geom(nx, ny)?
    };
    let patch_side = r.u32()?;
    let n_sc = r.u32()?;
    let n_pilot = r.u32()?;
    let count = r.u32()?;
    if d_taps == 0 || patch_side == 0 {
        return Err(HarnessError::Format("zero taps or patch side".into()));
    }
    let header = DatasetHeader {
        scene,
        d_taps,
        rx,
        tx,
        patch_side,
        n_sc,
        n_pilot,
        carrier_hz: r.f64()?,
        bandwidth_hz: r.f64()?,
        snr_db: r.f64()?,
        p_t: r.f64()?,
        norm_c: r.f64()?,
        split: [r.f64()?, r.f64()?, r.f64()?],
        seed: r.u64()?,
    };
    let (nr, nt) = (rx.len(), tx.len());
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let coarse = r.channel(d_taps, nr, nt)?;
        let truth = r.channel(d_taps, nr, nt)?;
        let patch = r.f32s(patch_side * patch_side)?;
        let rss_scalar = r.f32s(1)?[0];
        let center = (r.u32()?, r.u32()?);
        let ue = [r.f64()?, r.f64()?, r.f64()?];
        let seed = r.u64()?;
        samples.push(Sample {
            coarse,
            truth,
            rss_patch: RssPatch::new(patch_side, center, patch)?,
            rss_scalar,
            meta: SampleMeta {
                ue,
                carrier_hz: header.carrier_hz,
                seed,
            },
        });
    }
    let mut extra = [0u8; 1];
    if r.inner.read(&mut extra)? != 0 {
        return Err(HarnessError::Format(format!("trailing bytes after {count} samples")));
    }
    Ok(Dataset { header, samples })
}
