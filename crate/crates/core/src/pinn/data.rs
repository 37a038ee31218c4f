use super::config::ModelConfig;
use super::model::channel_to_planes;
use super::{PinnError, Result};
use crate::channel_model::ChannelTensor;
use crate::propagation::RssPatch;
use midband_autodiff::{Real, Tensor};

/// Where and how a sample was generated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMeta {
    pub ue: [f64; 3],
    pub carrier_hz: f64,
    pub seed: u64,
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Pilot-based estimate fed to the network.
    pub coarse: ChannelTensor<f64>,
    pub truth: ChannelTensor<f64>,
    pub rss_patch: RssPatch,
    /// Received power from the coherent field sum, watts.
    pub rss_scalar: f64,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let dims = |h: &ChannelTensor<f64>| (h.d(), h.nr(), h.nt());
        let want = (cfg.d_taps, cfg.nr, cfg.nt);
        if dims(&self.coarse) != want || dims(&self.truth) != want {
            return Err(PinnError::ShapeMismatch(format!(
                "sample channel {:?}/{:?}, model expects {want:?}",
                dims(&self.coarse),
                dims(&self.truth)
            )));
        }
        if self.rss_patch.side() != cfg.patch_side {
            return Err(PinnError::ShapeMismatch(format!(
                "patch side {}, model expects {}",
                self.rss_patch.side(),
                cfg.patch_side
            )));
        }
        if !(self.rss_scalar >= 0.0) {
            return Err(PinnError::ShapeMismatch("negative RSS target".into()));
        }
        Ok(())
    }
}

/// Dataset-wide channel scale: root mean per-sample truth energy over the
/// training split, rounded to single precision so checkpoints store it
/// exactly.
pub fn norm_constant(train: &[Sample]) -> Result<f64> {
    if train.is_empty() {
        return Err(PinnError::EmptySplit("train"));
    }
    let mean = train.iter().map(|s| s.truth.energy()).sum::<f64>() / train.len() as f64;
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(PinnError::InvalidConfig("training channels carry no energy".into()));
    }
    Ok(mean.sqrt() as f32 as f64)
}

/// Network-ready tensors for a list of samples.
///
/// Coarse planes are divided by `c * s`, where `s` is the per-sample RMS of
/// `coarse / c`, so every input has unit RMS; targets use the same scale.
/// RSS patches enter as `ln(1 + patch / (P_T ||coarse||^2))`.
#[derive(Clone, Debug)]
pub struct PreparedSet<T> {
    plane_len: usize,
    patch_len: usize,
    patch_side: usize,
    plane_shape: [usize; 3],
    inputs: Vec<T>,
    targets: Vec<T>,
    patches: Vec<T>,
    /// `c * s` per sample.
    pub scale: Vec<f64>,
    /// `s^2` per sample.
    pub scale_sq: Vec<f64>,
    /// `rss_scalar / (c^2 P_T)` per sample.
    pub rss_target: Vec<f64>,
    /// `||target||^2` per sample, in network units.
    pub target_energy: Vec<f64>,
}

/// One minibatch.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub inputs: Tensor<T>,
    pub patches: Tensor<T>,
    pub targets: Tensor<T>,
    pub scale_sq: Vec<f64>,
    pub rss_target: Vec<f64>,
    /// `1 / (||target_i||^2 * valid)` for samples with nonzero truth, 0
    /// for excluded samples.
    pub nmse_weight: Vec<f64>,
}

impl<T: Real> PreparedSet<T> {
    pub fn new(samples: &[Sample], cfg: &ModelConfig, norm_c: f64, p_t: f64) -> Result<Self> {
        let plane_shape = [cfg.in_channels(), cfg.nr, cfg.nt];
        let plane_len = plane_shape.iter().product();
        let patch_len = cfg.patch_side * cfg.patch_side;
        let n = samples.len();
        let mut set = Self {
            plane_len,
            patch_len,
            patch_side: cfg.patch_side,
            plane_shape,
            inputs: Vec::with_capacity(n * plane_len),
            targets: Vec::with_capacity(n * plane_len),
            patches: Vec::with_capacity(n * patch_len),
            scale: Vec::with_capacity(n),
            scale_sq: Vec::with_capacity(n),
            rss_target: Vec::with_capacity(n),
            target_energy: Vec::with_capacity(n),
        };
        let mut zero_truth = 0;
        for s in samples {
            s.validate(cfg)?;
            let coarse = channel_to_planes(&s.coarse);
            let truth = channel_to_planes(&s.truth);
            let coarse_energy = coarse.sq_norm_f64();
            let ms = coarse_energy / (norm_c * norm_c * plane_len as f64);
            let s_rms = if ms > 0.0 { ms.sqrt() } else { 1.0 };
            let k = 1.0 / (norm_c * s_rms);
            set.inputs.extend(coarse.data().iter().map(|&v| T::lit(v * k)));
            let mut energy = 0.0;
            for &v in truth.data() {
                let t = T::lit(v * k);
                energy += t.as_f64() * t.as_f64();
                set.targets.push(t);
            }
            if energy == 0.0 {
                zero_truth += 1;
            }
            let denom = p_t * norm_c * norm_c * s_rms * s_rms * plane_len as f64;
            set.patches
                .extend(s.rss_patch.values().iter().map(|&v| T::lit((v / denom).ln_1p())));
            set.scale.push(norm_c * s_rms);
            set.scale_sq.push(s_rms * s_rms);
            set.rss_target.push(s.rss_scalar / (norm_c * norm_c * p_t));
            set.target_energy.push(energy);
        }
        if zero_truth > 0 {
            eprintln!("warning: {zero_truth} sample(s) with zero-norm truth excluded from NMSE");
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.scale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scale.is_empty()
    }

    pub fn input(&self, i: usize) -> &[T] {
        &self.inputs[i * self.plane_len..(i + 1) * self.plane_len]
    }

    pub fn target(&self, i: usize) -> &[T] {
        &self.targets[i * self.plane_len..(i + 1) * self.plane_len]
    }

    pub fn batch(&self, idx: &[usize]) -> Batch<T> {
        let b = idx.len();
        let gather = |src: &[T], len: usize| -> Vec<T> {
            idx.iter().flat_map(|&i| src[i * len..(i + 1) * len].iter().copied()).collect()
        };
        let [c, h, w] = self.plane_shape;
        let valid = idx.iter().filter(|&&i| self.target_energy[i] > 0.0).count().max(1) as f64;
        Batch {
            inputs: Tensor::from_vec(vec![b, c, h, w], gather(&self.inputs, self.plane_len)).expect("batch"),
            targets: Tensor::from_vec(vec![b, c, h, w], gather(&self.targets, self.plane_len)).expect("batch"),
            patches: Tensor::from_vec(
                vec![b, 1, self.patch_side, self.patch_side],
                gather(&self.patches, self.patch_len),
            )
            .expect("batch"),
            scale_sq: idx.iter().map(|&i| self.scale_sq[i]).collect(),
            rss_target: idx.iter().map(|&i| self.rss_target[i]).collect(),
            nmse_weight: idx
                .iter()
                .map(|&i| {
                    let e = self.target_energy[i];
                    if e > 0.0 {
                        1.0 / (e * valid)
                    } else {
                        0.0
                    }
                })
                .collect(),
        }
    }
}
