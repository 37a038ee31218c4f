use super::dataset::DatasetSpec;
use super::scene::ScenePreset;
use super::{HarnessError, Result};
use crate::channel_model::ArrayGeometry;
use crate::pinn::{ModelConfig, TrainConfig};
use std::collections::HashSet;
use std::path::PathBuf;
use std::str::FromStr;

/// Everything a sweep or transfer run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Pilot counts of the pilot sweep.
    pub pilots: Vec<usize>,
    /// SNR points of the SNR sweep, dB.
    pub snrs: Vec<f64>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Pilot budget of the network in the SNR sweep.
    pub pinn_pilots: usize,
    /// Pilot budgets of the classical baselines in the SNR sweep.
    pub classical_pilots: Vec<usize>,
    pub omp_oversample: usize,
    pub omp_k_max: usize,
    pub target_scene: ScenePreset,
    pub target_samples: usize,
    pub fractions: Vec<f64>,
    pub budgets: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let dataset = DatasetSpec::desk(ScenePreset::Urban15);
        Self {
            dataset,
            model: ModelConfig::desk(),
            train: TrainConfig {
                epochs: 150,
                ..TrainConfig::default()
            },
            pilots: vec![2, 4, 8, 16, 32, 64],
            snrs: vec![-10.0, -5.0, 0.0, 5.0, 10.0],
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("out"),
            pinn_pilots: 4,
            classical_pilots: vec![4, 64],
            omp_oversample: 2,
            omp_k_max: 8,
            target_scene: ScenePreset::Canyon,
            target_samples: 1024,
            fractions: vec![0.1, 0.25, 0.5, 1.0],
            budgets: vec![20, 100],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.pilots.is_empty() || self.snrs.is_empty() || self.seeds.is_empty() {
            return bad("pilot, SNR and seed lists must be non-empty".into());
        }
        if self.classical_pilots.is_empty() || self.fractions.is_empty() || self.budgets.is_empty() {
            return bad("classical pilot, fraction and budget lists must be non-empty".into());
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        let ds = &self.dataset;
        let m = &self.model;
        if (m.d_taps, m.nr, m.nt, m.patch_side) != (ds.d_taps, ds.rx.len(), ds.tx.len(), ds.patch_side) {
            return bad("model dimensions disagree with the dataset".into());
        }
        if ds.n_samples == 0 || self.target_samples == 0 {
            return bad("sample counts must be positive".into());
        }
        if self.omp_oversample == 0 || self.omp_k_max == 0 {
            return bad("OMP oversampling and sparsity must be positive".into());
        }
        let top = self.pilots.iter().chain(&self.classical_pilots).chain([&self.pinn_pilots]);
        if let Some(p) = top.copied().find(|&p| p == 0 || p > ds.n_sc) {
            return bad(format!("pilot count {p} outside 1..={}", ds.n_sc));
        }
        m.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| HarnessError::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn parse_array<const N: usize, T: FromStr + Copy + Default>(key: &str, v: &str) -> Result<[T; N]> {
    let items: Vec<T> = parse_list(key, v)?;
    items
        .try_into()
        .map_err(|_| HarnessError::Config(format!("`{key}` takes {N} comma-separated values")))
}

/// Parses flat `key = value` text on top of the defaults. Blank lines and
/// `#` comments are ignored; an unknown key is an error.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::default();
    let mut rx = (c.dataset.rx.nx(), c.dataset.rx.ny());
    let mut tx = (c.dataset.tx.nx(), c.dataset.tx.ny());
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, v) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", n + 1)))?;
        match key {
            "scene" => c.dataset.scene = v.parse()?,
            "target_scene" => c.target_scene = v.parse()?,
            "n_samples" => c.dataset.n_samples = parse(key, v)?,
            "target_samples" => c.target_samples = parse(key, v)?,
            "n_sc" => c.dataset.n_sc = parse(key, v)?,
            "n_pilot" => c.dataset.n_pilot = parse(key, v)?,
            "snr_db" => c.dataset.snr_db = parse(key, v)?,
            "p_t" => {
                c.dataset.p_t = parse(key, v)?;
                c.train.p_t = c.dataset.p_t;
            }
            "d_taps" => c.dataset.d_taps = parse(key, v)?,
            "rx_nx" => rx.0 = parse(key, v)?,
            "rx_ny" => rx.1 = parse(key, v)?,
            "tx_nx" => tx.0 = parse(key, v)?,
            "tx_ny" => tx.1 = parse(key, v)?,
            "patch_side" => c.dataset.patch_side = parse(key, v)?,
            "rx_height" => c.dataset.rx_height = parse(key, v)?,
            "rolloff" => c.dataset.rolloff = parse(key, v)?,
            "encoder_widths" => c.model.encoder_widths = parse_array(key, v)?,
            "rss_widths" => c.model.rss_widths = parse_array(key, v)?,
            "rss_tokens" => c.model.rss_tokens = parse(key, v)?,
            "attn_heads" => c.model.attn_heads = parse(key, v)?,
            "transformer_blocks" => c.model.transformer_blocks = parse(key, v)?,
            "mlp_ratio" => c.model.mlp_ratio = parse(key, v)?,
            "batch" => c.train.batch = parse(key, v)?,
            "epochs" => c.train.epochs = parse(key, v)?,
            "lr" => c.train.lr = parse(key, v)?,
            "beta1" => c.train.beta1 = parse(key, v)?,
            "beta2" => c.train.beta2 = parse(key, v)?,
            "eps" => c.train.eps = parse(key, v)?,
            "zeta" => c.train.zeta = parse(key, v)?,
            "split" => {
                c.train.split = parse_array(key, v)?;
                c.dataset.split = c.train.split;
            }
            "pilots" => c.pilots = parse_list(key, v)?,
            "snrs" => c.snrs = parse_list(key, v)?,
            "seeds" => c.seeds = parse_list(key, v)?,
            "out" => c.out_dir = PathBuf::from(v),
            "pinn_pilots" => c.pinn_pilots = parse(key, v)?,
            "classical_pilots" => c.classical_pilots = parse_list(key, v)?,
            "omp_oversample" => c.omp_oversample = parse(key, v)?,
            "omp_k_max" => c.omp_k_max = parse(key, v)?,
            "fractions" => c.fractions = parse_list(key, v)?,
            "budgets" => c.budgets = parse_list(key, v)?,
            _ => return Err(HarnessError::Config(format!("unknown key `{key}`"))),
        }
    }
    let geom = |(nx, ny): (usize, usize)| ArrayGeometry::new(nx, ny).map_err(|e| HarnessError::Config(e.to_string()));
    c.dataset.rx = geom(rx)?;
    c.dataset.tx = geom(tx)?;
    c.model.d_taps = c.dataset.d_taps;
    c.model.nr = c.dataset.rx.len();
    c.model.nt = c.dataset.tx.len();
    c.model.patch_side = c.dataset.patch_side;
    c.validate()?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = parse_config("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn overrides_and_errors() {
        let c = parse_config("# desk run\nepochs = 3\nseeds=4,5\nencoder_widths = 8,16,32\nscene=canyon\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.seeds, vec![4, 5]);
        assert_eq!(c.model.encoder_widths, [8, 16, 32]);
        assert_eq!(c.dataset.scene, ScenePreset::Canyon);
        for bad in ["bogus = 1", "epochs = x", "seeds = 1,1", "snrs =", "encoder_widths = 1,2", "no equals"] {
            let e = parse_config(bad).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}: {e}");
        }
    }
}
