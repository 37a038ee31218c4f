use super::config::{Init, ModelConfig};
use super::data::Batch;
use super::loss::total_loss;
use super::model::{forward, ForwardTrace};
use super::params::ModelParams;
use super::Result;
use midband_autodiff::{GradCheckReport, Real, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Parameters with every tensor random, including the ones that start at
/// zero or one, so every path through the network carries gradient.
pub fn randomized_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    let mut params = ModelParams::<T>::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for (spec, t) in cfg.layout().iter().zip(params.tensors_mut()) {
        let (center, half) = match spec.init {
            Init::FanIn(_) => continue,
            Init::Zeros if spec.name.starts_with("head.out.w") => (0.0, (3.0 / spec.shape[1] as f64).sqrt()),
            Init::Zeros => (0.0, 0.1),
            Init::Ones => (1.0, 0.2),
        };
        for v in t.data_mut() {
            *v = T::lit(center + rng.gen_range(-half..half));
        }
    }
    Ok(params)
}

/// Random inputs, targets and power targets shaped for `cfg`.
pub fn synthetic_batch<T: Real>(cfg: &ModelConfig, batch: usize, seed: u64) -> Batch<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |n: usize| -> Vec<T> {
        (0..n)
            .map(|_| T::lit(StandardNormal.sample(&mut rng)))
            .collect()
    };
    let plane = [batch, cfg.in_channels(), cfg.nr, cfg.nt];
    let len: usize = plane.iter().product();
    let inputs = Tensor::from_vec(plane.to_vec(), normal(len)).expect("batch");
    let targets = Tensor::from_vec(plane.to_vec(), normal(len)).expect("batch");
    let p = cfg.patch_side;
    let patch_vals: Vec<T> = normal(batch * p * p).into_iter().map(|v| T::lit(v.as_f64().abs())).collect();
    let patches = Tensor::from_vec(vec![batch, 1, p, p], patch_vals).expect("batch");
    let per = len / batch;
    let nmse_weight = targets
        .data()
        .chunks(per)
        .map(|c| 1.0 / (c.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() * batch as f64))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    Batch {
        inputs,
        patches,
        targets,
        scale_sq: (0..batch).map(|_| rng.gen_range(0.5..1.5) / per as f64).collect(),
        rss_target: (0..batch).map(|_| rng.gen_range(0.5..2.0)).collect(),
        nmse_weight,
    }
}

/// Total loss of `batch` under `params`.
pub fn batch_loss<T: Real>(params: &ModelParams<T>, cfg: &ModelConfig, batch: &Batch<T>, zeta: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let x = tape.constant(batch.inputs.clone());
    let p = tape.constant(batch.patches.clone());
    let out = forward(&mut tape, cfg, &vars, x, p, &mut ForwardTrace::default())?;
    let loss = total_loss(&mut tape, out.output, batch, zeta)?;
    Ok(tape.value(loss.total).data()[0].as_f64())
}

/// Compares the backpropagated gradient of the total loss with central
/// differences at `coords` randomly chosen parameter coordinates.
pub fn end_to_end_grad_check<T: Real>(
    cfg: &ModelConfig,
    zeta: f64,
    coords: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let params = randomized_params::<T>(cfg, seed)?;
    let batch = synthetic_batch::<T>(cfg, 2, seed ^ 0x77);
    let grads = {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let x = tape.constant(batch.inputs.clone());
        let p = tape.constant(batch.patches.clone());
        let out = forward(&mut tape, cfg, &vars, x, p, &mut ForwardTrace::default())?;
        let loss = total_loss(&mut tape, out.output, &batch, zeta)?;
        tape.backward(loss.total)?;
        vars.take_grads(&mut tape)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let mut probe = params.clone();
    let (mut max_abs, mut max_a, mut max_n) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..coords {
        let ti = rng.gen_range(0..params.len());
        let ci = rng.gen_range(0..params.tensors()[ti].numel());
        let orig = params.tensors()[ti].data()[ci];
        probe.tensors_mut()[ti].data_mut()[ci] = T::lit(orig.as_f64() + eps);
        let plus = batch_loss(&probe, cfg, &batch, zeta)?;
        probe.tensors_mut()[ti].data_mut()[ci] = T::lit(orig.as_f64() - eps);
        let minus = batch_loss(&probe, cfg, &batch, zeta)?;
        probe.tensors_mut()[ti].data_mut()[ci] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads[ti].data()[ci].as_f64();
        max_abs = max_abs.max((analytic - numeric).abs());
        max_a = max_a.max(analytic.abs());
        max_n = max_n.max(numeric.abs());
    }
    let scale = max_a.max(max_n);
    Ok(GradCheckReport {
        max_abs_err: max_abs,
        rel_err: if scale > 0.0 { max_abs / scale } else { 0.0 },
        checked: coords,
    })
}
