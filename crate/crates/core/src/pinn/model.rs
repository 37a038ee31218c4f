//! Forward graph: ResUNet encoder, RSS encoder, cross-attention fusion,
//! transformer latent and skip-connected decoder, with a global residual
//! from the coarse input planes to the output.

use super::config::ModelConfig;
use super::params::ParamVars;
use super::{PinnError, Result};
use crate::channel_model::ChannelTensor;
use midband_autodiff::{Real, Tape, Tensor, Var};
use num_complex::Complex;

/// Real and imaginary planes per tap, real first: `[2D, Nr, Nt]`.
pub fn channel_to_planes<T: Real>(h: &ChannelTensor<T>) -> Tensor<T> {
    let (d, nr, nt) = (h.d(), h.nr(), h.nt());
    let m = nr * nt;
    let mut data = vec![T::zero(); 2 * d * m];
    for tap in 0..d {
        for (i, z) in h.tap(tap).iter().enumerate() {
            data[2 * tap * m + i] = z.re;
            data[(2 * tap + 1) * m + i] = z.im;
        }
    }
    Tensor::from_vec(vec![2 * d, nr, nt], data).expect("plane shape")
}

/// Inverse of [`channel_to_planes`].
pub fn planes_to_channel<T: Real>(planes: &Tensor<T>) -> Result<ChannelTensor<T>> {
    let s = planes.shape();
    if s.len() != 3 || s[0] % 2 != 0 || s[0] == 0 {
        return Err(PinnError::ShapeMismatch(format!("expected [2D, Nr, Nt] planes, got {s:?}")));
    }
    let (d, nr, nt) = (s[0] / 2, s[1], s[2]);
    let m = nr * nt;
    let p = planes.data();
    let taps = (0..d)
        .flat_map(|tap| (0..m).map(move |i| Complex::new(p[2 * tap * m + i], p[(2 * tap + 1) * m + i])))
        .collect();
    Ok(ChannelTensor::from_vec(d, nr, nt, taps)?)
}

/// Intermediate shapes (batch axis dropped) and the cross-attention weights
/// of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub shapes: Vec<(String, Vec<usize>)>,
    /// `[batch * heads, tokens, rss_tokens]` attention weights.
    pub cross_attention: Option<Var>,
}

impl ForwardTrace {
    fn record<T: Real>(&mut self, tape: &Tape<T>, name: &str, v: Var) {
        self.shapes.push((name.to_string(), tape.shape(v)[1..].to_vec()));
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.shapes.iter().find(|(n, _)| n == name).map(|(_, s)| s.as_slice())
    }
}

/// Network outputs for one batch.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Refined planes in the normalized input units.
    pub output: Var,
    /// Decoder correction added to the input planes.
    pub correction: Var,
}

fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

/// conv - norm - ReLU - conv - norm, plus a strided 1x1 projection of the
/// input, then ReLU.
fn res_block<T: Real>(
    tape: &mut Tape<T>,
    vars: &ParamVars<T>,
    prefix: &str,
    x: Var,
    stride: (usize, usize),
) -> Result<Var> {
    let p = |s: &str| vars.get(&format!("{prefix}.{s}"));
    let h = tape.conv2d(x, p("conv1.w"), Some(p("conv1.b")), stride, (1, 1))?;
    let h = tape.layer_norm(h, 1, p("ln1.g"), p("ln1.b"))?;
    let h = tape.relu(h)?;
    let h = tape.conv2d(h, p("conv2.w"), Some(p("conv2.b")), (1, 1), (1, 1))?;
    let h = tape.layer_norm(h, 1, p("ln2.g"), p("ln2.b"))?;
    let r = tape.conv2d(x, p("proj.w"), Some(p("proj.b")), stride, (0, 0))?;
    let s = tape.add(h, r)?;
    Ok(tape.relu(s)?)
}

/// Three downsampling residual blocks. Returns the latent map and the
/// outputs of the first two blocks for the decoder skips.
pub fn encode<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    vars: &ParamVars<T>,
    x: Var,
    trace: &mut ForwardTrace,
) -> Result<(Var, [Var; 2])> {
    let expect = [cfg.in_channels(), cfg.nr, cfg.nt];
    if tape.shape(x).len() != 4 || tape.shape(x)[1..] != expect {
        return Err(PinnError::ShapeMismatch(format!(
            "encoder input {:?}, expected [batch, {}, {}, {}]",
            tape.shape(x),
            expect[0],
            expect[1],
            expect[2]
        )));
    }
    let mut h = x;
    let mut outs = Vec::with_capacity(3);
    for (i, stride) in cfg.strides().into_iter().enumerate() {
        h = res_block(tape, vars, &format!("enc{i}"), h, stride)?;
        trace.record(tape, &format!("enc{i}"), h);
        outs.push(h);
    }
    Ok((outs[2], [outs[0], outs[1]]))
}

/// Two conv/ReLU/max-pool stages and a 2x2 adaptive average pool over
/// `[batch, 1, p, p]` patches, flattened to `[batch, embed]`.
pub fn rss_encoder<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    vars: &ParamVars<T>,
    patch: Var,
    trace: &mut ForwardTrace,
) -> Result<Var> {
    let s = tape.shape(patch).to_vec();
    if s.len() != 4 || s[1] != 1 || s[2] != s[3] {
        return Err(PinnError::ShapeMismatch(format!("RSS patch batch {s:?}")));
    }
    if s[2] < 4 {
        return Err(PinnError::PatchTooSmall(s[2]));
    }
    let h = tape.conv2d(patch, vars.get("rss.conv1.w"), Some(vars.get("rss.conv1.b")), (1, 1), (1, 1))?;
    let h = tape.relu(h)?;
    let h = tape.max_pool2d(h)?;
    let h = tape.conv2d(h, vars.get("rss.conv2.w"), Some(vars.get("rss.conv2.b")), (1, 1), (1, 1))?;
    let h = tape.relu(h)?;
    let h = tape.max_pool2d(h)?;
    let h = tape.adaptive_avg_pool2d(h, (2, 2))?;
    let e = tape.reshape(h, &[s[0], cfg.rss_embed_dim()])?;
    trace.record(tape, "rss_embed", e);
    Ok(e)
}

/// `[B, L, H*dh] -> [B*H, L, dh]`.
fn split_heads<T: Real>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, l, dz) = (s[0], s[1], s[2]);
    let dh = dz / heads;
    let x = tape.reshape(x, &[b, l, heads, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    Ok(tape.reshape(x, &[b * heads, l, dh])?)
}

/// `[B*H, L, dh] -> [B, L, H*dh]`.
fn merge_heads<T: Real>(tape: &mut Tape<T>, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (l, dh) = (s[1], s[2]);
    let x = tape.reshape(x, &[batch, heads, l, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    Ok(tape.reshape(x, &[batch, l, heads * dh])?)
}

/// Channel tokens attend to key/value tokens expanded from the RSS
/// embedding; the result is projected and added to the tokens.
///
/// Returns the fused tokens and the attention weights
/// `[batch * heads, tokens, rss_tokens]`.
pub fn cross_attention<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    vars: &ParamVars<T>,
    tokens: Var,
    rss_embed: Var,
) -> Result<(Var, Var)> {
    let dz = cfg.latent_dim();
    let st = tape.shape(tokens).to_vec();
    let se = tape.shape(rss_embed).to_vec();
    if st.len() != 3 || st[2] != dz || se != [st[0], cfg.rss_embed_dim()] {
        return Err(PinnError::ShapeMismatch(format!("cross attention tokens {st:?}, embedding {se:?}")));
    }
    let batch = st[0];
    let heads = cfg.attn_heads;
    let q = linear(tape, tokens, vars.get("fusion.W_Channel"), vars.get("fusion.b_Channel"))?;
    let kv = linear(tape, rss_embed, vars.get("fusion.W_RSS"), vars.get("fusion.b_RSS"))?;
    let kv = tape.reshape(kv, &[batch, cfg.rss_tokens, dz])?;
    let qh = split_heads(tape, q, heads)?;
    let kvh = split_heads(tape, kv, heads)?;
    let scores = tape.bmm(qh, kvh, true)?;
    let scores = tape.scale(scores, T::lit(1.0 / (dz as f64).sqrt()))?;
    let attn = tape.softmax(scores, 2)?;
    let mixed = tape.bmm(attn, kvh, false)?;
    let mixed = merge_heads(tape, mixed, batch, heads)?;
    let out = linear(tape, mixed, vars.get("fusion.W_o"), vars.get("fusion.b_o"))?;
    Ok((tape.add(tokens, out)?, attn))
}

/// Pre-norm self-attention and MLP blocks with residual connections.
pub fn transformer_latent<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    vars: &ParamVars<T>,
    x: Var,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[2] != cfg.latent_dim() {
        return Err(PinnError::ShapeMismatch(format!("transformer input {s:?}")));
    }
    let batch = s[0];
    let heads = cfg.attn_heads;
    let inv_sqrt = T::lit(1.0 / ((cfg.latent_dim() / heads) as f64).sqrt());
    let mut x = x;
    for b in 0..cfg.transformer_blocks {
        let p = |n: &str| vars.get(&format!("tf{b}.{n}"));
        let h = tape.layer_norm(x, 2, p("ln1.g"), p("ln1.b"))?;
        let q = linear(tape, h, p("attn.wq"), p("attn.wq.b"))?;
        let k = linear(tape, h, p("attn.wk"), p("attn.wk.b"))?;
        let v = linear(tape, h, p("attn.wv"), p("attn.wv.b"))?;
        let (q, k, v) = (
            split_heads(tape, q, heads)?,
            split_heads(tape, k, heads)?,
            split_heads(tape, v, heads)?,
        );
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, inv_sqrt)?;
        let attn = tape.softmax(scores, 2)?;
        let mixed = tape.bmm(attn, v, false)?;
        let mixed = merge_heads(tape, mixed, batch, heads)?;
        let out = linear(tape, mixed, p("attn.wo"), p("attn.wo.b"))?;
        x = tape.add(x, out)?;
        let h = tape.layer_norm(x, 2, p("ln2.g"), p("ln2.b"))?;
        let h = linear(tape, h, p("mlp.w1"), p("mlp.b1"))?;
        let h = tape.relu(h)?;
        let h = linear(tape, h, p("mlp.w2"), p("mlp.b2"))?;
        x = tape.add(x, h)?;
    }
    Ok(x)
}

/// Upsampling chain mirroring the encoder: transposed convolution, skip
/// concatenation and a residual block per stage, then a transposed
/// convolution back to the input grid and a 1x1 output convolution.
pub fn decode<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    vars: &ParamVars<T>,
    latent: Var,
    skips: [Var; 2],
    trace: &mut ForwardTrace,
) -> Result<Var> {
    let strides = cfg.strides();
    let mut z = latent;
    for k in 0..2 {
        let p = format!("dec{k}");
        let up = tape.conv_transpose2d(
            z,
            vars.get(&format!("{p}.up.w")),
            Some(vars.get(&format!("{p}.up.b"))),
            strides[2 - k],
            (0, 0),
        )?;
        let skip = skips[1 - k];
        if tape.shape(up) != tape.shape(skip) {
            return Err(PinnError::ShapeMismatch(format!(
                "decoder stage {k}: upsampled {:?} vs skip {:?}",
                tape.shape(up),
                tape.shape(skip)
            )));
        }
        let cat = tape.concat(&[up, skip], 1)?;
        trace.record(tape, &format!("{p}.concat"), cat);
        z = res_block(tape, vars, &p, cat, (1, 1))?;
        trace.record(tape, &p, z);
    }
    let up = tape.conv_transpose2d(z, vars.get("head.up.w"), Some(vars.get("head.up.b")), strides[0], (0, 0))?;
    let up = tape.relu(up)?;
    let out = tape.conv2d(up, vars.get("head.out.w"), Some(vars.get("head.out.b")), (1, 1), (0, 0))?;
    trace.record(tape, "correction", out);
    Ok(out)
}

/// Full network on a batch of normalized coarse planes `[B, 2D, Nr, Nt]`
/// and RSS patches `[B, 1, p, p]`.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    vars: &ParamVars<T>,
    planes: Var,
    patch: Var,
    trace: &mut ForwardTrace,
) -> Result<ForwardVars> {
    trace.record(tape, "input", planes);
    let (latent, skips) = encode(tape, cfg, vars, planes, trace)?;
    let ls = tape.shape(latent).to_vec();
    let (batch, dz, h, w) = (ls[0], ls[1], ls[2], ls[3]);
    let embed = rss_encoder(tape, cfg, vars, patch, trace)?;
    let tokens = tape.permute(latent, &[0, 2, 3, 1])?;
    let tokens = tape.reshape(tokens, &[batch, h * w, dz])?;
    trace.record(tape, "tokens", tokens);
    let (fused, attn) = cross_attention(tape, cfg, vars, tokens, embed)?;
    trace.record(tape, "cross_attention", fused);
    trace.cross_attention = Some(attn);
    let refined = transformer_latent(tape, cfg, vars, fused)?;
    trace.record(tape, "transformer", refined);
    let z = tape.reshape(refined, &[batch, h, w, dz])?;
    let z = tape.permute(z, &[0, 3, 1, 2])?;
    let correction = decode(tape, cfg, vars, z, skips, trace)?;
    let output = tape.add(planes, correction)?;
    trace.record(tape, "output", output);
    Ok(ForwardVars { output, correction })
}
