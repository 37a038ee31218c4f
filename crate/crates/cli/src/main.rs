use clap::{Args, Parser, Subcommand};
use midband_core::estimation::{NoiseLevel, PilotConfig};
use midband_core::harness::{
    emit_plot, eval_nmse, generate_dataset, ls_estimates, omp_estimates, parse_config, read_dataset, rows_csv,
    sweep_pilots, sweep_snr, transfer_csv, transfer_experiment, with_pilots, write_dataset, Dataset,
    ExperimentConfig, HarnessError, PlotKind, Result, ScenePreset,
};
use midband_core::pinn::{count_params_flops, end_to_end_grad_check, evaluate, train_observed, EpochStats, TrainedModel};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "midband", about = "Mid-band MIMO channel estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` experiment config; defaults to the desk preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset file (`dataset.mbce`).
    GenData {
        #[command(flatten)]
        common: Common,
        /// Scene preset, overriding the config.
        #[arg(long)]
        scene: Option<String>,
        /// Sample count, overriding the config.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train the refinement network on a dataset (`model.ckpt`, `curve.csv`).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Test-split NMSE of LS, OMP and a trained model (`eval.csv`).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Pilot count override; the dataset's own by default.
        #[arg(long)]
        n_pilot: Option<usize>,
        /// SNR override in dB.
        #[arg(long, allow_hyphen_values = true)]
        snr: Option<f64>,
    },
    /// NMSE against SNR (`sweep_snr.csv`, `sweep_snr.svg`).
    SweepSnr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// NMSE against pilot count at 0 dB (`sweep_pilots.csv`, `sweep_pilots.svg`).
    SweepPilots {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Fine-tune a pretrained model on a target dataset (`transfer.csv`, `transfer.svg`).
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of the end-to-end loss gradient.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Parameter coordinates to probe.
        #[arg(long, default_value_t = 20)]
        coords: usize,
    },
    /// Per-layer parameter and FLOP counts (`flops.csv`).
    Flops {
        #[command(flatten)]
        common: Common,
    },
}

fn config_error(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(e.to_string())
}

fn load_config(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut exp = match &common.config {
        Some(path) => parse_config(&fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        exp.seeds = vec![seed];
    }
    let out = common.out.clone().unwrap_or_else(|| exp.out_dir.clone());
    fs::create_dir_all(&out)?;
    Ok((exp, out))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

fn load_model(path: &Path, exp: &ExperimentConfig) -> Result<TrainedModel> {
    Ok(TrainedModel::load(BufReader::new(File::open(path)?), &exp.model)?)
}

fn write(out: &Path, name: &str, text: &str) -> Result<()> {
    let path = out.join(name);
    fs::write(&path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_plot(out: &Path, stem: &str, csv: &str, kind: PlotKind) -> Result<()> {
    write(out, &format!("{stem}.csv"), csv)?;
    write(out, &format!("{stem}.svg"), &emit_plot(csv, kind)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, scene, samples } => {
            let (mut exp, out) = load_config(&common)?;
            if let Some(s) = scene {
                exp.dataset.scene = s.parse::<ScenePreset>()?;
            }
            if let Some(n) = samples {
                exp.dataset.n_samples = n;
            }
            let seed = exp.seeds[0];
            let ds = generate_dataset(&exp.dataset, seed)?;
            let path = out.join("dataset.mbce");
            write_dataset(BufWriter::new(File::create(&path)?), &ds)?;
            println!(
                "wrote {} ({} samples, scene {}, norm constant {:.6e})",
                path.display(),
                ds.samples.len(),
                ds.header.scene,
                ds.header.norm_c
            );
        }
        Command::Train { common, data } => {
            let (exp, out) = load_config(&common)?;
            let ds = load_dataset(&data)?;
            let s = ds.splits();
            let mut log = |e: &EpochStats| {
                println!("epoch {:4}  train loss {:.6e}  val NMSE {:7.2} dB", e.epoch, e.train_loss, e.val_nmse_db)
            };
            let report = train_observed(&exp.model, &exp.train, None, s.train, s.val, exp.seeds[0], &mut log)?;
            report.model.save(BufWriter::new(File::create(out.join("model.ckpt"))?))?;
            println!("best epoch {}; wrote {}", report.best_epoch, out.join("model.ckpt").display());
            write(&out, "curve.csv", &report.curve_csv())?;
        }
        Command::Eval { common, data, model, n_pilot, snr } => {
            let (exp, out) = load_config(&common)?;
            let ds = load_dataset(&data)?;
            let trained = load_model(&model, &exp)?;
            let h = &ds.header;
            let pilot = PilotConfig::comb(
                h.n_sc,
                n_pilot.unwrap_or(h.n_pilot),
                h.tx.len(),
                h.p_t,
                NoiseLevel::SnrDb(snr.unwrap_or(h.snr_db)),
            )?;
            let test = with_pilots(ds.splits().test, &pilot)?;
            let ls = eval_nmse(&ls_estimates(&test, &pilot)?, &test)?;
            let omp = omp_estimates(&test, &pilot, h.rx, h.tx, exp.omp_oversample, exp.omp_k_max)?;
            let omp = eval_nmse(&omp, &test)?;
            let pinn = evaluate(&trained, &exp.model, &test, h.p_t)?;
            let mut csv = String::from("method,nmse_db,stderr\n");
            for (name, s) in [("ls", ls), ("omp", omp), ("pinn", pinn)] {
                println!("{name:5} {:8.2} dB (+/- {:.2})", s.mean_db, s.stderr_db);
                csv.push_str(&format!("{name},{:.6},{:.6}\n", s.mean_db, s.stderr_db));
            }
            write(&out, "eval.csv", &csv)?;
        }
        Command::SweepSnr { common, data } => {
            let (exp, out) = load_config(&common)?;
            let rows = sweep_snr(&exp, &load_dataset(&data)?)?;
            write_plot(&out, "sweep_snr", &rows_csv("snr_db", &rows), PlotKind::Snr)?;
        }
        Command::SweepPilots { common, data } => {
            let (exp, out) = load_config(&common)?;
            let rows = sweep_pilots(&exp, &load_dataset(&data)?)?;
            write_plot(&out, "sweep_pilots", &rows_csv("n_pilot", &rows), PlotKind::Pilots)?;
        }
        Command::Finetune { common, model, data } => {
            let (exp, out) = load_config(&common)?;
            let pretrained = load_model(&model, &exp)?;
            let rows = transfer_experiment(&pretrained, &exp, &load_dataset(&data)?, exp.seeds[0])?;
            write_plot(&out, "transfer", &transfer_csv(&rows), PlotKind::Transfer)?;
        }
        Command::GradCheck { common, coords } => {
            let (exp, _) = load_config(&common)?;
            let seed = exp.seeds[0];
            let single = end_to_end_grad_check::<f32>(&exp.model, exp.train.zeta, coords, 1e-3, seed)?;
            let double = end_to_end_grad_check::<f64>(&exp.model, exp.train.zeta, coords, 1e-6, seed)?;
            println!("f32: max abs err {:.3e}, rel err {:.3e} over {} coordinates", single.max_abs_err, single.rel_err, single.checked);
            println!("f64: max abs err {:.3e}, rel err {:.3e} over {} coordinates", double.max_abs_err, double.rel_err, double.checked);
            if !(single.passes(1e-2) && double.passes(1e-4)) {
                return Err(HarnessError::CheckFailed("gradient check above tolerance".into()));
            }
        }
        Command::Flops { common } => {
            let (exp, out) = load_config(&common)?;
            let c = count_params_flops(&exp.model)?;
            println!("{} parameters, {} FLOPs per forward pass", c.params, c.flops);
            write(&out, "flops.csv", &c.csv())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
