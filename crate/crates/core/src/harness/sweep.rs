use super::dataset::{with_pilots, Dataset};
use super::experiment::ExperimentConfig;
use super::{HarnessError, Result};
use crate::channel_model::{ArrayGeometry, ChannelTensor};
use crate::estimation::{omp_estimate, transmit_pilots, NoiseLevel, OmpConfig, OmpDictionary, PilotConfig};
use crate::pinn::{
    evaluate, fine_tune, per_sample_nmse, refine, summarize_nmse, train, NmseSummary, Sample, TrainReport,
    TrainedModel,
};
use std::fmt::Write as _;

/// Estimators compared by the sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Ls,
    Omp,
    Pinn,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Ls => "ls",
            Method::Omp => "omp",
            Method::Pinn => "pinn",
        }
    }

    fn with_budget(&self, n_pilot: usize) -> String {
        format!("{}_np{n_pilot}", self.name())
    }
}

/// One point of an NMSE curve.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub x: f64,
    pub method: String,
    pub nmse_db: f64,
    pub stderr_db: f64,
}

/// One cell of a transfer grid; fraction 0 marks the zero-shot row.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferRow {
    pub fraction: f64,
    pub epochs: usize,
    pub nmse_db: f64,
    pub stderr_db: f64,
}

/// Mean NMSE of `estimates` against the samples' truth channels.
pub fn eval_nmse(estimates: &[ChannelTensor<f64>], samples: &[Sample]) -> Result<NmseSummary> {
    if estimates.len() != samples.len() {
        return Err(HarnessError::Config(format!(
            "{} estimates for {} samples",
            estimates.len(),
            samples.len()
        )));
    }
    summarize_nmse(&per_sample_nmse(estimates, samples)).ok_or(HarnessError::EmptySplit("evaluation"))
}

pub fn ls_estimates(samples: &[Sample], pilot: &PilotConfig) -> Result<Vec<ChannelTensor<f64>>> {
    Ok(with_pilots(samples, pilot)?.into_iter().map(|s| s.coarse).collect())
}

/// Residual stopping threshold of OMP relative to the observation norm:
/// the expected noise share of the observed energy at `snr_db`.
fn omp_tolerance(pilot: &PilotConfig) -> f64 {
    match pilot.noise() {
        NoiseLevel::SnrDb(snr) => (1.0 / (1.0 + 10f64.powf(snr / 10.0))).sqrt(),
        NoiseLevel::Variance(_) => 0.0,
    }
}

/// OMP estimates from the same pilot observations the LS baseline sees.
pub fn omp_estimates(
    samples: &[Sample],
    pilot: &PilotConfig,
    rx: ArrayGeometry,
    tx: ArrayGeometry,
    oversample: usize,
    k_max: usize,
) -> Result<Vec<ChannelTensor<f64>>> {
    let Some(first) = samples.first() else { return Ok(Vec::new()) };
    let dict = OmpDictionary::new(rx, tx, first.truth.d(), pilot, oversample)?;
    let omp = OmpConfig {
        k_max,
        resid_tol: omp_tolerance(pilot),
    };
    samples
        .iter()
        .map(|s| {
            let obs = transmit_pilots(&s.truth, pilot, s.meta.seed)?;
            Ok(omp_estimate(&obs, pilot, &dict, &omp)?.channel)
        })
        .collect()
}

pub fn train_pinn(exp: &ExperimentConfig, train_set: &[Sample], val: &[Sample], seed: u64) -> Result<TrainReport> {
    Ok(train(&exp.model, &exp.train, train_set, val, seed)?)
}

fn pilot_config(ds: &Dataset, n_pilot: usize, snr_db: f64) -> Result<PilotConfig> {
    let h = &ds.header;
    Ok(PilotConfig::comb(h.n_sc, n_pilot, h.tx.len(), h.p_t, NoiseLevel::SnrDb(snr_db))?)
}

fn row(x: f64, method: String, s: NmseSummary) -> SweepRow {
    SweepRow {
        x,
        method,
        nmse_db: s.mean_db,
        stderr_db: s.stderr_db,
    }
}

fn classical_rows(
    exp: &ExperimentConfig,
    ds: &Dataset,
    pilot: &PilotConfig,
    x: f64,
    labels: [String; 2],
) -> Result<[SweepRow; 2]> {
    let test = ds.splits().test;
    let ls = eval_nmse(&ls_estimates(test, pilot)?, test)?;
    let omp = omp_estimates(test, pilot, ds.header.rx, ds.header.tx, exp.omp_oversample, exp.omp_k_max)?;
    let omp = eval_nmse(&omp, test)?;
    let [l, o] = labels;
    Ok([row(x, l, ls), row(x, o, omp)])
}

/// Network trained and tested on coarse inputs from `pilot`, pooled over
/// the configured seeds.
fn pinn_summary(exp: &ExperimentConfig, ds: &Dataset, pilot: &PilotConfig) -> Result<NmseSummary> {
    let s = ds.splits();
    let (tr, val, test) = (with_pilots(s.train, pilot)?, with_pilots(s.val, pilot)?, with_pilots(s.test, pilot)?);
    let mut pooled = Vec::new();
    for &seed in &exp.seeds {
        let report = train_pinn(exp, &tr, &val, seed)?;
        let refined = refine(&report.model, &exp.model, &test, exp.train.p_t)?;
        pooled.extend(per_sample_nmse(&refined, &test));
    }
    summarize_nmse(&pooled).ok_or(HarnessError::EmptySplit("test"))
}

/// NMSE against SNR: LS and OMP at every classical pilot budget and the
/// network at its own budget. Rows are SNR-major in the order LS budgets,
/// OMP budgets, network.
pub fn sweep_snr(exp: &ExperimentConfig, ds: &Dataset) -> Result<Vec<SweepRow>> {
    exp.validate()?;
    let mut rows = Vec::new();
    for &snr in &exp.snrs {
        let mut ls = Vec::new();
        let mut omp = Vec::new();
        for &p in &exp.classical_pilots {
            let pilot = pilot_config(ds, p, snr)?;
            let [l, o] = classical_rows(exp, ds, &pilot, snr, [Method::Ls.with_budget(p), Method::Omp.with_budget(p)])?;
            ls.push(l);
            omp.push(o);
        }
        rows.extend(ls);
        rows.extend(omp);
        let pilot = pilot_config(ds, exp.pinn_pilots, snr)?;
        rows.push(row(snr, Method::Pinn.with_budget(exp.pinn_pilots), pinn_summary(exp, ds, &pilot)?));
    }
    Ok(rows)
}

/// NMSE against pilot count at 0 dB SNR for LS, OMP and the network.
pub fn sweep_pilots(exp: &ExperimentConfig, ds: &Dataset) -> Result<Vec<SweepRow>> {
    exp.validate()?;
    let mut rows = Vec::new();
    for &p in &exp.pilots {
        let pilot = pilot_config(ds, p, 0.0)?;
        let x = p as f64;
        rows.extend(classical_rows(exp, ds, &pilot, x, [Method::Ls.name().into(), Method::Omp.name().into()])?);
        rows.push(row(x, Method::Pinn.name().into(), pinn_summary(exp, ds, &pilot)?));
    }
    Ok(rows)
}

/// Zero-shot row followed by the fraction x budget fine-tuning grid on the
/// target dataset's stored coarse estimates.
pub fn transfer_experiment(
    pretrained: &TrainedModel,
    exp: &ExperimentConfig,
    target: &Dataset,
    seed: u64,
) -> Result<Vec<TransferRow>> {
    let s = target.splits();
    let zero = evaluate(pretrained, &exp.model, s.test, exp.train.p_t)?;
    let mut rows = vec![TransferRow {
        fraction: 0.0,
        epochs: 0,
        nmse_db: zero.mean_db,
        stderr_db: zero.stderr_db,
    }];
    let grid = fine_tune(
        pretrained,
        &exp.model,
        &exp.train,
        s.train,
        s.val,
        s.test,
        &exp.fractions,
        &exp.budgets,
        seed,
    )?;
    rows.extend(grid.into_iter().map(|p| TransferRow {
        fraction: p.fraction,
        epochs: p.epochs,
        nmse_db: p.nmse.mean_db,
        stderr_db: p.nmse.stderr_db,
    }));
    Ok(rows)
}

/// `x_name,method,nmse_db,stderr` CSV text.
pub fn rows_csv(x_name: &str, rows: &[SweepRow]) -> String {
    let mut out = format!("{x_name},method,nmse_db,stderr\n");
    for r in rows {
        writeln!(out, "{},{},{:.6},{:.6}", r.x, r.method, r.nmse_db, r.stderr_db).expect("write to string");
    }
    out
}

/// `fraction,epochs,nmse_db,stderr` CSV text.
pub fn transfer_csv(rows: &[TransferRow]) -> String {
    let mut out = String::from("fraction,epochs,nmse_db,stderr\n");
    for r in rows {
        writeln!(out, "{},{},{:.6},{:.6}", r.fraction, r.epochs, r.nmse_db, r.stderr_db).expect("write to string");
    }
    out
}
