use super::config::ModelConfig;
use super::Result;

/// Parameters and forward multiply-add FLOPs (2 per multiply-add) of one
/// layer for a single sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub params: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Complexity {
    pub layers: Vec<LayerCost>,
    pub params: usize,
    pub flops: u64,
}

impl Complexity {
    /// `layer,params,flops` rows plus a total row.
    pub fn csv(&self) -> String {
        let mut out = String::from("layer,params,flops\n");
        for l in &self.layers {
            out.push_str(&format!("{},{},{}\n", l.name, l.params, l.flops));
        }
        out.push_str(&format!("total,{},{}\n", self.params, self.flops));
        out
    }
}

struct Counter(Vec<LayerCost>);

impl Counter {
    fn add(&mut self, name: String, params: usize, flops: usize) {
        self.0.push(LayerCost {
            name,
            params,
            flops: flops as u64,
        });
    }

    fn conv(&mut self, name: String, c_in: usize, c_out: usize, k: usize, out_hw: (usize, usize)) {
        let taps = c_in * k * k;
        self.add(name, c_out * taps + c_out, 2 * c_out * taps * out_hw.0 * out_hw.1);
    }

    fn conv_t(&mut self, name: String, c_in: usize, c_out: usize, kernel: (usize, usize), in_hw: (usize, usize)) {
        let rows = c_out * kernel.0 * kernel.1;
        self.add(name, c_in * rows + c_out, 2 * rows * c_in * in_hw.0 * in_hw.1);
    }

    fn linear(&mut self, name: String, rows: usize, k: usize, n: usize) {
        self.add(name, k * n + n, 2 * rows * k * n);
    }

    fn norm(&mut self, name: String, width: usize) {
        self.add(name, 2 * width, 0);
    }

    fn res_block(&mut self, p: &str, c_in: usize, c_out: usize, out_hw: (usize, usize)) {
        self.conv(format!("{p}.conv1"), c_in, c_out, 3, out_hw);
        self.norm(format!("{p}.ln1"), c_out);
        self.conv(format!("{p}.conv2"), c_out, c_out, 3, out_hw);
        self.norm(format!("{p}.ln2"), c_out);
        self.conv(format!("{p}.proj"), c_in, c_out, 1, out_hw);
    }
}

/// Analytic per-layer parameter and FLOP counts. Only products are counted
/// (convolutions, transposed convolutions, dense and attention products);
/// normalization, activations and pooling are treated as free.
pub fn count_params_flops(cfg: &ModelConfig) -> Result<Complexity> {
    cfg.validate()?;
    let mut c = Counter(Vec::new());
    let w = cfg.encoder_widths;
    let dims = cfg.encoder_dims();
    let mut c_in = cfg.in_channels();
    for i in 0..3 {
        c.res_block(&format!("enc{i}"), c_in, w[i], dims[i]);
        c_in = w[i];
    }

    let p = cfg.patch_side;
    let [r1, r2] = cfg.rss_widths;
    c.conv("rss.conv1".into(), 1, r1, 3, (p, p));
    c.conv("rss.conv2".into(), r1, r2, 3, (p / 2, p / 2));

    let dz = cfg.latent_dim();
    let t = cfg.tokens();
    let tr = cfg.rss_tokens;
    let heads = cfg.attn_heads;
    let dh = dz / heads;
    c.linear("fusion.channel".into(), t, dz, dz);
    c.linear("fusion.rss".into(), 1, cfg.rss_embed_dim(), tr * dz);
    c.add("fusion.scores".into(), 0, 2 * heads * t * dh * tr);
    c.add("fusion.mix".into(), 0, 2 * heads * t * tr * dh);
    c.linear("fusion.out".into(), t, dz, dz);

    let hidden = cfg.mlp_ratio * dz;
    for b in 0..cfg.transformer_blocks {
        c.norm(format!("tf{b}.ln1"), dz);
        for m in ["q", "k", "v"] {
            c.linear(format!("tf{b}.attn.{m}"), t, dz, dz);
        }
        c.add(format!("tf{b}.attn.scores"), 0, 2 * heads * t * dh * t);
        c.add(format!("tf{b}.attn.mix"), 0, 2 * heads * t * t * dh);
        c.linear(format!("tf{b}.attn.out"), t, dz, dz);
        c.norm(format!("tf{b}.ln2"), dz);
        c.linear(format!("tf{b}.mlp.1"), t, dz, hidden);
        c.linear(format!("tf{b}.mlp.2"), t, hidden, dz);
    }

    let strides = cfg.strides();
    for k in 0..2 {
        let (ci, co) = (w[2 - k], w[1 - k]);
        c.conv_t(format!("dec{k}.up"), ci, co, strides[2 - k], dims[2 - k]);
        c.res_block(&format!("dec{k}"), 2 * co, co, dims[1 - k]);
    }
    let ch = cfg.in_channels();
    c.conv_t("head.up".into(), w[0], ch, strides[0], dims[0]);
    c.conv("head.out".into(), ch, ch, 1, (cfg.nr, cfg.nt));

    let params = c.0.iter().map(|l| l.params).sum();
    let flops = c.0.iter().map(|l| l.flops).sum();
    Ok(Complexity {
        layers: c.0,
        params,
        flops,
    })
}
