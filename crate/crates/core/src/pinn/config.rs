use super::{PinnError, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_taps: usize,
    pub nr: usize,
    pub nt: usize,
    /// Output widths of the three encoder blocks; the last is the latent
    /// token width.
    pub encoder_widths: [usize; 3],
    /// Channel widths of the two RSS convolutions; the embedding is the
    /// second width pooled to 2x2.
    pub rss_widths: [usize; 2],
    pub rss_tokens: usize,
    pub attn_heads: usize,
    pub transformer_blocks: usize,
    pub mlp_ratio: usize,
    pub patch_side: usize,
}

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `+-sqrt(3 / fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

/// Name, shape and initializer of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ModelConfig {
    /// Large configuration: 16 taps, 4 receive and 576 transmit antennas,
    /// encoder widths 64/128/256.
    pub fn full_scale() -> Self {
        Self {
            d_taps: 16,
            nr: 4,
            nt: 576,
            encoder_widths: [64, 128, 256],
            rss_widths: [32, 64],
            rss_tokens: 8,
            attn_heads: 4,
            transformer_blocks: 2,
            mlp_ratio: 2,
            patch_side: 9,
        }
    }

    /// Laptop-sized configuration: 8 taps, 4 x 64 antennas, encoder widths
    /// 32/64/128.
    pub fn desk() -> Self {
        Self {
            d_taps: 8,
            nr: 4,
            nt: 64,
            encoder_widths: [32, 64, 128],
            rss_widths: [16, 64],
            ..Self::full_scale()
        }
    }

    pub fn in_channels(&self) -> usize {
        2 * self.d_taps
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder_widths[2]
    }

    pub fn rss_embed_dim(&self) -> usize {
        4 * self.rss_widths[1]
    }

    /// Stride of each encoder block: both axes while the height exceeds
    /// one, then the width only.
    pub fn strides(&self) -> [(usize, usize); 3] {
        let mut h = self.nr;
        let mut out = [(1, 2); 3];
        for s in &mut out {
            if h > 1 {
                *s = (2, 2);
                h /= 2;
            }
        }
        out
    }

    /// Spatial size after each encoder block.
    pub fn encoder_dims(&self) -> [(usize, usize); 3] {
        let mut hw = (self.nr, self.nt);
        let mut out = [(0, 0); 3];
        for (o, s) in out.iter_mut().zip(self.strides()) {
            hw = (hw.0 / s.0, hw.1 / s.1);
            *o = hw;
        }
        out
    }

    /// Number of latent tokens (spatial positions after the encoder).
    pub fn tokens(&self) -> usize {
        let (h, w) = self.encoder_dims()[2];
        h * w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PinnError::InvalidConfig(m));
        if self.d_taps == 0 || self.nr == 0 || self.nt == 0 {
            return bad("channel dimensions must be positive".into());
        }
        if self.encoder_widths.iter().chain(&self.rss_widths).any(|&w| w == 0) {
            return bad("layer widths must be positive".into());
        }
        if self.rss_tokens == 0 || self.attn_heads == 0 || self.mlp_ratio == 0 {
            return bad("token count, heads and MLP ratio must be positive".into());
        }
        if self.latent_dim() % self.attn_heads != 0 {
            return bad(format!(
                "latent width {} is not divisible by {} heads",
                self.latent_dim(),
                self.attn_heads
            ));
        }
        if self.patch_side < 4 {
            return Err(PinnError::PatchTooSmall(self.patch_side));
        }
        let mut hw = (self.nr, self.nt);
        for s in self.strides() {
            if hw.0 % s.0 != 0 || hw.1 % s.1 != 0 {
                return bad(format!(
                    "{}x{} antenna grid does not halve cleanly through three blocks",
                    self.nr, self.nt
                ));
            }
            hw = (hw.0 / s.0, hw.1 / s.1);
        }
        Ok(())
    }

    /// Every parameter tensor in a fixed order.
    pub fn layout(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init| out.push(ParamSpec { name, shape, init });
        let res_block = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str, c_in: usize, c_out: usize| {
            push(format!("{p}.conv1.w"), vec![c_out, c_in, 3, 3], Init::FanIn(9 * c_in));
            push(format!("{p}.conv1.b"), vec![c_out], Init::Zeros);
            push(format!("{p}.ln1.g"), vec![c_out], Init::Ones);
            push(format!("{p}.ln1.b"), vec![c_out], Init::Zeros);
            push(format!("{p}.conv2.w"), vec![c_out, c_out, 3, 3], Init::FanIn(9 * c_out));
            push(format!("{p}.conv2.b"), vec![c_out], Init::Zeros);
            push(format!("{p}.ln2.g"), vec![c_out], Init::Ones);
            push(format!("{p}.ln2.b"), vec![c_out], Init::Zeros);
            push(format!("{p}.proj.w"), vec![c_out, c_in, 1, 1], Init::FanIn(c_in));
            push(format!("{p}.proj.b"), vec![c_out], Init::Zeros);
        };
        let w = self.encoder_widths;
        let mut c_in = self.in_channels();
        for (i, &c_out) in w.iter().enumerate() {
            res_block(&mut push, &format!("enc{i}"), c_in, c_out);
            c_in = c_out;
        }

        let [r1, r2] = self.rss_widths;
        push("rss.conv1.w".into(), vec![r1, 1, 3, 3], Init::FanIn(9));
        push("rss.conv1.b".into(), vec![r1], Init::Zeros);
        push("rss.conv2.w".into(), vec![r2, r1, 3, 3], Init::FanIn(9 * r1));
        push("rss.conv2.b".into(), vec![r2], Init::Zeros);

        let dz = self.latent_dim();
        let e = self.rss_embed_dim();
        push("fusion.W_Channel".into(), vec![dz, dz], Init::FanIn(dz));
        push("fusion.b_Channel".into(), vec![dz], Init::Zeros);
        push("fusion.W_RSS".into(), vec![e, self.rss_tokens * dz], Init::FanIn(e));
        push("fusion.b_RSS".into(), vec![self.rss_tokens * dz], Init::Zeros);
        push("fusion.W_o".into(), vec![dz, dz], Init::FanIn(dz));
        push("fusion.b_o".into(), vec![dz], Init::Zeros);

        let hidden = self.mlp_ratio * dz;
        for b in 0..self.transformer_blocks {
            let p = format!("tf{b}");
            push(format!("{p}.ln1.g"), vec![dz], Init::Ones);
            push(format!("{p}.ln1.b"), vec![dz], Init::Zeros);
            for m in ["wq", "wk", "wv", "wo"] {
                push(format!("{p}.attn.{m}"), vec![dz, dz], Init::FanIn(dz));
                push(format!("{p}.attn.{m}.b"), vec![dz], Init::Zeros);
            }
            push(format!("{p}.ln2.g"), vec![dz], Init::Ones);
            push(format!("{p}.ln2.b"), vec![dz], Init::Zeros);
            push(format!("{p}.mlp.w1"), vec![dz, hidden], Init::FanIn(dz));
            push(format!("{p}.mlp.b1"), vec![hidden], Init::Zeros);
            push(format!("{p}.mlp.w2"), vec![hidden, dz], Init::FanIn(hidden));
            push(format!("{p}.mlp.b2"), vec![dz], Init::Zeros);
        }

        let strides = self.strides();
        for k in 0..2 {
            let (c_in, c_out) = (w[2 - k], w[1 - k]);
            let (sh, sw) = strides[2 - k];
            let p = format!("dec{k}");
            push(format!("{p}.up.w"), vec![c_in, c_out, sh, sw], Init::FanIn(c_in));
            push(format!("{p}.up.b"), vec![c_out], Init::Zeros);
            res_block(&mut push, &p, 2 * c_out, c_out);
        }
        let (sh, sw) = strides[0];
        let c = self.in_channels();
        push("head.up.w".into(), vec![w[0], c, sh, sw], Init::FanIn(w[0]));
        push("head.up.b".into(), vec![c], Init::Zeros);
        push("head.out.w".into(), vec![c, c, 1, 1], Init::Zeros);
        push("head.out.b".into(), vec![c], Init::Zeros);
        out
    }
}

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight of the power-consistency term.
    pub zeta: f64,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    /// Transmit power in watts.
    pub p_t: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 32,
            epochs: 500,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            zeta: 0.01,
            split: [0.8, 0.1, 0.1],
            p_t: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PinnError::InvalidConfig(m.into()));
        if self.batch == 0 {
            return bad("batch size must be positive");
        }
        if !(self.zeta >= 0.0) {
            return bad("zeta must be non-negative");
        }
        if !(self.lr > 0.0) || !(self.p_t > 0.0) {
            return bad("learning rate and transmit power must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam moments must lie in [0, 1) and eps must be positive");
        }
        if self.split.iter().any(|&f| !(f >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("split fractions must be non-negative and sum to 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_schedules() {
        let full = ModelConfig::full_scale();
        assert_eq!(full.strides(), [(2, 2), (2, 2), (1, 2)]);
        assert_eq!(full.encoder_dims(), [(2, 288), (1, 144), (1, 72)]);
        assert_eq!(full.tokens(), 72);
        let desk = ModelConfig::desk();
        assert_eq!(desk.encoder_dims(), [(2, 32), (1, 16), (1, 8)]);
        let flat = ModelConfig { nr: 1, ..ModelConfig::desk() };
        assert_eq!(flat.strides(), [(1, 2); 3]);
        flat.validate().unwrap();
    }

    #[test]
    fn validation_catches_bad_geometry() {
        assert!(ModelConfig { nt: 56, ..ModelConfig::desk() }.validate().is_ok());
        assert!(ModelConfig { nt: 62, ..ModelConfig::desk() }.validate().is_err());
        assert!(ModelConfig { nr: 6, ..ModelConfig::desk() }.validate().is_err());
        assert!(ModelConfig { attn_heads: 5, ..ModelConfig::desk() }.validate().is_err());
        assert!(matches!(
            ModelConfig { patch_side: 3, ..ModelConfig::desk() }.validate(),
            Err(PinnError::PatchTooSmall(3))
        ));
    }

    #[test]
    fn layout_names_are_unique_and_include_fusion_maps() {
        let layout = ModelConfig::desk().layout();
        let mut names: Vec<&str> = layout.iter().map(|p| p.name.as_str()).collect();
        for n in ["fusion.W_RSS", "fusion.W_Channel", "fusion.b_RSS", "fusion.b_Channel"] {
            assert!(names.contains(&n));
        }
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn default_training_settings() {
        let tc = TrainConfig::default();
        assert_eq!((tc.batch, tc.epochs, tc.zeta), (32, 500, 0.01));
        tc.validate().unwrap();
        assert!(TrainConfig { split: [0.5, 0.1, 0.1], ..tc }.validate().is_err());
    }
}
