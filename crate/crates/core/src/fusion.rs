//! Clinical–imaging fusion: clinical encoder, reconstruction encoder with a
//! one-layer Transformer over timesteps, gated fusion and the two
//! cross-modal losses.

use alloc::format;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{scaled_dot_attention, ModelConfig};
use crate::params::{ParamInit, Params};

pub fn declare_params(cfg: &ModelConfig, init: &mut ParamInit) {
    let d = cfg.fused_dim;
    let [r0, r1] = cfg.recon_encoder_channels;
    init.linear("fusion.clin1", cfg.clinical_dim, d)
        .linear("fusion.clin2", d, d)
        .uniform("fusion.recon.conv1.w", &[r0, 1, 3, 3, 3], 27)
        .uniform("fusion.recon.conv1.b", &[r0], 27)
        .uniform("fusion.recon.conv2.w", &[r1, r0, 3, 3, 3], r0 * 27)
        .uniform("fusion.recon.conv2.b", &[r1], r0 * 27)
        .linear("fusion.recon.token", r1, d)
        .linear("fusion.tf.q", d, d)
        .linear("fusion.tf.k", d, d)
        .linear("fusion.tf.v", d, d)
        .constant("fusion.tf.ln1.gain", &[d], 1.0)
        .constant("fusion.tf.ln1.bias", &[d], 0.0)
        .linear("fusion.tf.ffn1", d, cfg.ffn_dim)
        .linear("fusion.tf.ffn2", cfg.ffn_dim, d)
        .constant("fusion.tf.ln2.gain", &[d], 1.0)
        .constant("fusion.tf.ln2.bias", &[d], 0.0)
        .linear("fusion.img", cfg.st_channels(), d)
        .constant("fusion.gate0", &[1], 0.0)
        .constant("fusion.gate1", &[1], 0.0);
}

fn linear(g: &mut Graph, params: &Params, prefix: &str, x: Var) -> Result<Var> {
    let w = params.bind(g, &format!("{prefix}.w"))?;
    let b = params.bind(g, &format!("{prefix}.b"))?;
    if g.shape(x).last() != g.shape(w).first() {
        return Err(Error::shape(
            "linear",
            g.shape(x),
            g.shape(w),
        ));
    }
    g.linear(x, w, b)
}

/// Two-layer perceptron `C_clin → d → d` with GELU between: `[1, C_clin] -> [1, d]`.
pub fn encode_clinical(g: &mut Graph, params: &Params, x: Var) -> Result<Var> {
    let h = linear(g, params, "fusion.clin1", x)?;
    let h = g.gelu(h)?;
    linear(g, params, "fusion.clin2", h)
}

/// Output of [`encode_recon`].
#[derive(Clone, Copy, Debug)]
pub struct ReconEncoding {
    /// Mean of the Transformer output tokens, `[1, d]`.
    pub h_recon: Var,
    /// Per-timestep tokens after the Transformer layer, `[T, d]`.
    pub tokens: Var,
    /// Token self-attention weights, `[T, T]`.
    pub weights: Var,
}

/// Per-timestep conv stack + global average pool to a width-d token, one
/// Transformer encoder layer across the T tokens, then a mean over tokens.
pub fn encode_recon(g: &mut Graph, params: &Params, x_recon: Var) -> Result<ReconEncoding> {
    let shape = g.shape(x_recon).to_vec();
    let [t, 1, ..] = shape[..] else {
        return Err(Error::invalid("encode_recon", format!("expected [T, 1, D, H, W], got {shape:?}")));
    };
    let (w1, b1) = (params.bind(g, "fusion.recon.conv1.w")?, params.bind(g, "fusion.recon.conv1.b")?);
    let (w2, b2) = (params.bind(g, "fusion.recon.conv2.w")?, params.bind(g, "fusion.recon.conv2.b")?);
    let h = g.conv3d(x_recon, w1, Some(b1), 2, 1)?;
    let h = g.gelu(h)?;
    let h = g.conv3d(h, w2, Some(b2), 2, 1)?;
    let h = g.gelu(h)?;
    let hs = g.shape(h).to_vec();
    let pooled = g.reshape(h, &[t, hs[1], hs[2] * hs[3] * hs[4]])?;
    let pooled = g.mean_axis(pooled, 2)?; // [T, r1]
    let tokens = linear(g, params, "fusion.recon.token", pooled)?; // [T, d]
    let (tokens, weights) = transformer_layer(g, params, tokens)?;
    let mean = g.mean_axis(tokens, 0)?;
    let d = g.shape(mean)[0];
    let h_recon = g.reshape(mean, &[1, d])?;
    Ok(ReconEncoding { h_recon, tokens, weights })
}

/// Post-norm single-head encoder layer over `[T, d]` tokens.
pub fn transformer_layer(g: &mut Graph, params: &Params, tokens: Var) -> Result<(Var, Var)> {
    let q = linear(g, params, "fusion.tf.q", tokens)?;
    let k = linear(g, params, "fusion.tf.k", tokens)?;
    let v = linear(g, params, "fusion.tf.v", tokens)?;
    let (att, weights) = scaled_dot_attention(g, q, k, v)?;
    let x = g.add(tokens, att)?;
    let x = affine_norm(g, params, "fusion.tf.ln1", x)?;
    let f = linear(g, params, "fusion.tf.ffn1", x)?;
    let f = g.gelu(f)?;
    let f = linear(g, params, "fusion.tf.ffn2", f)?;
    let y = g.add(x, f)?;
    Ok((affine_norm(g, params, "fusion.tf.ln2", y)?, weights))
}

fn affine_norm(g: &mut Graph, params: &Params, prefix: &str, x: Var) -> Result<Var> {
    let gain = params.bind(g, &format!("{prefix}.gain"))?;
    let bias = params.bind(g, &format!("{prefix}.bias"))?;
    let n = g.layer_norm(x)?;
    let n = g.mul_row(n, gain)?;
    g.add_row(n, bias)
}

/// Channel means over every other axis, `[.., C at channel_axis, ..] -> [1, C]`.
pub fn channel_means(g: &mut Graph, x: Var, channel_axis: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if channel_axis >= shape.len() {
        return Err(Error::invalid("channel_means", "channel axis out of range"));
    }
    let c = shape[channel_axis];
    let rest = shape.iter().product::<usize>() / c;
    let mut perm: alloc::vec::Vec<usize> = (0..shape.len()).collect();
    perm.remove(channel_axis);
    perm.insert(0, channel_axis);
    let p = g.permute(x, &perm)?;
    let flat = g.reshape(p, &[c, rest])?;
    let m = g.mean_axis(flat, 1)?;
    g.reshape(m, &[1, c])
}

/// Global average over `(t, d, h, w)` per channel of `[T, C, D', H', W']`,
/// then the linear map `prefix` (`C → d`): `[1, d]`.
pub fn pool_img_features(g: &mut Graph, params: &Params, attended: Var, prefix: &str) -> Result<Var> {
    let pooled = channel_means(g, attended, 1)?;
    linear(g, params, prefix, pooled)
}

/// `σ(gate₀)·h_img + σ(gate₁)·h_recon + h_clin`.
pub fn gated_fuse(g: &mut Graph, h_img: Var, h_recon: Var, h_clin: Var, gate0: Var, gate1: Var) -> Result<Var> {
    fuse_terms(g, &[(h_img, gate0), (h_recon, gate1)], Some(h_clin))
}

/// Sum of sigmoid-gated terms plus an optional ungated term.
pub fn fuse_terms(g: &mut Graph, gated: &[(Var, Var)], ungated: Option<Var>) -> Result<Var> {
    let mut acc = ungated;
    for &(h, gate) in gated {
        let s = g.sigmoid(gate)?;
        let term = g.scale_by(h, s)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or(Error::Empty { op: "gated_fuse" })
}

/// `−(1/B)·Σᵢ cos(h_img⁽ⁱ⁾, h_clin⁽ⁱ⁾)` over `[B, d]` batches.
pub fn alignment_loss(g: &mut Graph, h_img: Var, h_clin: Var) -> Result<Var> {
    let cos = g.row_cosine(h_img, h_clin)?;
    let m = g.mean(cos)?;
    g.scale(m, -1.0)
}

/// `‖Cov(H_img) − Cov(H_clin)‖_F / d²` with population covariance.
pub fn disentanglement_loss(g: &mut Graph, h_img: Var, h_clin: Var) -> Result<Var> {
    if g.shape(h_img).len() != 2 || g.shape(h_img)[1] != g.shape(h_clin).get(1).copied().unwrap_or(0) {
        return Err(Error::shape("disentanglement_loss", g.shape(h_img), g.shape(h_clin)));
    }
    let d = g.shape(h_img)[1] as f64;
    let ci = g.covariance(h_img)?;
    let cc = g.covariance(h_clin)?;
    let diff = g.sub(ci, cc)?;
    let f = g.frobenius(diff)?;
    g.scale(f, 1.0 / (d * d))
}
