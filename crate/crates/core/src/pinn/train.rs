use super::adam::{adam_step, AdamConfig, AdamState};
use super::config::{ModelConfig, TrainConfig};
use super::data::{norm_constant, PreparedSet, Sample};
use super::loss::total_loss;
use super::metrics::{summarize_nmse, to_db, NmseSummary};
use super::model::{channel_to_planes, forward, planes_to_channel, ForwardTrace};
use super::params::{ModelParams, TrainedModel};
use super::{PinnError, Result};
use crate::channel_model::ChannelTensor;
use midband_autodiff::{AutodiffError, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4531;
const SUBSET_SALT: u64 = 0x5355_4253_4554_0001;
const EVAL_BATCH: usize = 64;

/// Progress of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Sample-weighted mean of the total loss over the epoch's batches.
    pub train_loss: f64,
    pub val_nmse_db: f64,
}

/// Outcome of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Parameters with the lowest validation NMSE seen, the starting point
    /// (epoch 0) included.
    pub model: TrainedModel,
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
}

impl TrainReport {
    /// `epoch,train_loss,val_nmse_db` rows with a header line.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_nmse_db\n");
        for e in &self.curve {
            out.push_str(&format!("{},{:.9e},{:.6}\n", e.epoch, e.train_loss, e.val_nmse_db));
        }
        out
    }
}

fn adam_config(tc: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: tc.lr,
        beta1: tc.beta1,
        beta2: tc.beta2,
        eps: tc.eps,
    }
}

fn diverged(epoch: usize) -> impl Fn(PinnError) -> PinnError {
    move |e| match e {
        PinnError::Autodiff(AutodiffError::NumericFault { .. }) => PinnError::Diverged { epoch },
        other => other,
    }
}

/// Network output planes for every sample of `set`, in network units.
fn predict(params: &ModelParams<f32>, cfg: &ModelConfig, set: &PreparedSet<f32>) -> Result<(Vec<f32>, Vec<f32>)> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut outputs = Vec::new();
    let mut corrections = Vec::new();
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = set.batch(chunk);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let x = tape.constant(batch.inputs);
        let p = tape.constant(batch.patches);
        let out = forward(&mut tape, cfg, &vars, x, p, &mut ForwardTrace::default())?;
        outputs.extend_from_slice(tape.value(out.output).data());
        corrections.extend_from_slice(tape.value(out.correction).data());
    }
    Ok((outputs, corrections))
}

/// Mean per-sample NMSE of the network output against the prepared targets.
fn prepared_nmse(params: &ModelParams<f32>, cfg: &ModelConfig, set: &PreparedSet<f32>) -> Result<f64> {
    let (out, _) = predict(params, cfg, set)?;
    let len = out.len() / set.len().max(1);
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..set.len() {
        let e = set.target_energy[i];
        if e == 0.0 {
            continue;
        }
        let err: f64 = out[i * len..(i + 1) * len]
            .iter()
            .zip(set.target(i))
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum();
        total += err / e;
        count += 1;
    }
    if count == 0 {
        return Err(PinnError::EmptySplit("validation"));
    }
    Ok(total / count as f64)
}

#[allow(clippy::too_many_arguments)]
fn run(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    init: ModelParams<f32>,
    norm_c: f64,
    train: &[Sample],
    val: &[Sample],
    seed: u64,
    snapshots: &[usize],
    observer: &mut dyn FnMut(&EpochStats),
) -> Result<Vec<TrainReport>> {
    cfg.validate()?;
    tc.validate()?;
    init.check_against(cfg)?;
    if train.is_empty() {
        return Err(PinnError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(PinnError::EmptySplit("validation"));
    }
    let tp = PreparedSet::<f32>::new(train, cfg, norm_c, tc.p_t)?;
    let vp = PreparedSet::<f32>::new(val, cfg, norm_c, tc.p_t)?;
    let adam = adam_config(tc);
    let mut params = init;
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..tp.len()).collect();
    let last = snapshots.iter().copied().max().unwrap_or(0);

    let mut best = (prepared_nmse(&params, cfg, &vp)?, 0usize, params.clone());
    let mut curve = Vec::with_capacity(last);
    let mut reports = Vec::new();
    let snapshot = |best: &(f64, usize, ModelParams<f32>), curve: &[EpochStats]| TrainReport {
        model: TrainedModel {
            params: best.2.clone(),
            norm_c,
        },
        curve: curve.to_vec(),
        best_epoch: best.1,
    };
    if snapshots.contains(&0) {
        reports.push(snapshot(&best, &curve));
    }
    for epoch in 1..=last {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(tc.batch) {
            let batch = tp.batch(chunk);
            let mut tape = Tape::new();
            let grads = {
                let vars = params.bind(&mut tape);
                let x = tape.constant(batch.inputs.clone());
                let p = tape.constant(batch.patches.clone());
                let out = forward(&mut tape, cfg, &vars, x, p, &mut ForwardTrace::default())
                    .map_err(diverged(epoch))?;
                let loss = total_loss(&mut tape, out.output, &batch, tc.zeta).map_err(diverged(epoch))?;
                let value = tape.value(loss.total).data()[0] as f64;
                if !value.is_finite() {
                    return Err(PinnError::Diverged { epoch });
                }
                loss_sum += value * chunk.len() as f64;
                tape.backward(loss.total)?;
                vars.take_grads(&mut tape)
            };
            adam_step(&mut params, &grads, &mut state, &adam).map_err(diverged(epoch))?;
        }
        let val_nmse = prepared_nmse(&params, cfg, &vp).map_err(diverged(epoch))?;
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / tp.len() as f64,
            val_nmse_db: to_db(val_nmse),
        };
        observer(&stats);
        curve.push(stats);
        if val_nmse < best.0 {
            best = (val_nmse, epoch, params.clone());
        }
        if snapshots.contains(&epoch) {
            reports.push(snapshot(&best, &curve));
        }
    }
    Ok(reports)
}

/// Trains from a seeded initialization. The normalization constant is
/// taken from `train` alone.
pub fn train(cfg: &ModelConfig, tc: &TrainConfig, train: &[Sample], val: &[Sample], seed: u64) -> Result<TrainReport> {
    train_observed(cfg, tc, None, train, val, seed, &mut |_| {})
}

/// Continues training `init` with a fresh optimizer state, keeping its
/// normalization constant.
pub fn train_from(
    init: &TrainedModel,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    seed: u64,
) -> Result<TrainReport> {
    train_observed(cfg, tc, Some(init), train, val, seed, &mut |_| {})
}

/// [`train`] / [`train_from`] with a per-epoch callback.
pub fn train_observed(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    init: Option<&TrainedModel>,
    train: &[Sample],
    val: &[Sample],
    seed: u64,
    observer: &mut dyn FnMut(&EpochStats),
) -> Result<TrainReport> {
    let (params, c) = match init {
        Some(m) => (m.params.clone(), m.norm_c),
        None => (ModelParams::init(cfg, seed)?, norm_constant(train)?),
    };
    let mut reports = run(cfg, tc, params, c, train, val, seed, &[tc.epochs], observer)?;
    Ok(reports.pop().expect("final snapshot"))
}

/// Refined channel estimates, `coarse + c * s * correction` in double
/// precision.
pub fn refine(model: &TrainedModel, cfg: &ModelConfig, samples: &[Sample], p_t: f64) -> Result<Vec<ChannelTensor<f64>>> {
    model.params.check_against(cfg)?;
    let set = PreparedSet::<f32>::new(samples, cfg, model.norm_c, p_t)?;
    let (_, corr) = predict(&model.params, cfg, &set)?;
    let len = cfg.in_channels() * cfg.nr * cfg.nt;
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let coarse = channel_to_planes(&s.coarse);
            let k = set.scale[i];
            let data = coarse
                .data()
                .iter()
                .zip(&corr[i * len..(i + 1) * len])
                .map(|(&c, &d)| c + k * d as f64)
                .collect();
            let planes = Tensor::from_vec(coarse.shape().to_vec(), data)?;
            planes_to_channel(&planes)
        })
        .collect()
}

/// Per-sample NMSE of estimates against the samples' truth; zero-norm
/// truths are skipped.
pub fn per_sample_nmse(estimates: &[ChannelTensor<f64>], samples: &[Sample]) -> Vec<f64> {
    estimates
        .iter()
        .zip(samples)
        .filter(|(_, s)| s.truth.energy() > 0.0)
        .map(|(e, s)| e.nmse(&s.truth))
        .collect()
}

/// Test-set NMSE of a trained model.
pub fn evaluate(model: &TrainedModel, cfg: &ModelConfig, samples: &[Sample], p_t: f64) -> Result<NmseSummary> {
    let refined = refine(model, cfg, samples, p_t)?;
    summarize_nmse(&per_sample_nmse(&refined, samples)).ok_or(PinnError::EmptySplit("evaluation"))
}

/// Squared gap between each sample's normalized field-side power and the
/// normalized power of its estimate.
pub fn phy_residuals(estimates: &[ChannelTensor<f64>], samples: &[Sample], norm_c: f64, p_t: f64) -> Vec<f64> {
    let c2 = norm_c * norm_c;
    estimates
        .iter()
        .zip(samples)
        .map(|(e, s)| (s.rss_scalar / (c2 * p_t) - e.energy() / c2).powi(2))
        .collect()
}

/// One cell of a fine-tuning grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FineTunePoint {
    pub fraction: f64,
    pub epochs: usize,
    pub nmse: NmseSummary,
}

/// Fine-tunes `pretrained` on nested random subsets of `train`. For each
/// fraction a single trajectory runs to the largest budget, and the
/// best-validation parameters up to each budget are scored on `test`.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune(
    pretrained: &TrainedModel,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    test: &[Sample],
    fractions: &[f64],
    budgets: &[usize],
    seed: u64,
) -> Result<Vec<FineTunePoint>> {
    pretrained.params.check_against(cfg)?;
    if fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(PinnError::InvalidConfig("fractions must lie in (0, 1]".into()));
    }
    if train.is_empty() {
        return Err(PinnError::EmptySplit("train"));
    }
    let mut perm: Vec<usize> = (0..train.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SUBSET_SALT));
    let mut sorted = budgets.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out = Vec::new();
    for &fraction in fractions {
        let n = ((fraction * train.len() as f64).round() as usize).clamp(1, train.len());
        let subset: Vec<Sample> = perm[..n].iter().map(|&i| train[i].clone()).collect();
        let reports = run(
            cfg,
            tc,
            pretrained.params.clone(),
            pretrained.norm_c,
            &subset,
            val,
            seed,
            &sorted,
            &mut |_| {},
        )?;
        for (&epochs, report) in sorted.iter().zip(&reports) {
            let nmse = evaluate(&report.model, cfg, test, tc.p_t)?;
            out.push(FineTunePoint { fraction, epochs, nmse });
        }
    }
    // report in the caller's budget order
    let order = |e: usize| budgets.iter().position(|&b| b == e).unwrap_or(usize::MAX);
    out.sort_by(|a, b| {
        let fa = fractions.iter().position(|&f| f == a.fraction);
        let fb = fractions.iter().position(|&f| f == b.fraction);
        fa.cmp(&fb).then(order(a.epochs).cmp(&order(b.epochs)))
    });
    Ok(out)
}
