//! The 4D spatiotemporal attention pathway.
//!
//! A single preoperative volume is encoded once, broadcast against a
//! learnable per-year timestep table, mixed by a separable
//! spatial-then-temporal convolution block, aggregated across timesteps by
//! per-voxel scaled dot-product attention and finally upsampled back to one
//! reconstructed volume per timestep.
//!
//! Shapes used throughout (S = D'·H'·W' encoded sites):
//!
//! | value        | shape                 |
//! |--------------|-----------------------|
//! | volume       | `[1, D, H, W]`        |
//! | X_ct         | `[C_f, D', H', W']`   |
//! | E            | `[T, E]`              |
//! | feature map  | `[T, C, D', H', W']`  |
//! | weights      | `[S, T, T]`           |
//! | X_recon      | `[T, 1, D, H, W]`     |

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::conv_out_extent;
use crate::params::{ParamInit, Params};

const ENC_KERNEL: usize = 3;
const ENC_STRIDE: usize = 2;
const ENC_PAD: usize = 1;

/// Architecture hyperparameters shared by every pathway of the network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of virtual postoperative timesteps (years).
    pub timesteps: usize,
    /// Width of each timestep embedding row.
    pub embed_dim: usize,
    /// Channels of the first encoder layer.
    pub encoder_hidden: usize,
    /// Channels of the encoded spatial map X_ct.
    pub feature_channels: usize,
    /// Query/key width of the timestep attention.
    pub key_dim: usize,
    /// Preprocessed input extents `(D, H, W)`.
    pub input_extents: [usize; 3],
    /// Channels between the two transposed-convolution layers.
    pub recon_hidden: usize,
    /// Stride (and kernel) of each transposed-convolution layer.
    pub upsample_stride: usize,
    /// Width d of every fused feature vector.
    pub fused_dim: usize,
    /// Width of the clinical covariate vector.
    pub clinical_dim: usize,
    /// Channels of the two conv layers of the reconstruction encoder.
    pub recon_encoder_channels: [usize; 2],
    /// Hidden width of the Transformer feed-forward block.
    pub ffn_dim: usize,
    /// Number of yearly outputs of each head.
    pub years: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: 12 years, 40×32×32 input.
    pub fn desk() -> Self {
        ModelConfig {
            timesteps: 12,
            embed_dim: 4,
            encoder_hidden: 8,
            feature_channels: 4,
            key_dim: 8,
            input_extents: [40, 32, 32],
            recon_hidden: 8,
            upsample_stride: 2,
            fused_dim: 32,
            clinical_dim: 6,
            recon_encoder_channels: [4, 8],
            ffn_dim: 64,
            years: 12,
        }
    }

    /// Small configuration for gradient checks: T = 3 on an 8×16×16 input.
    pub fn toy() -> Self {
        ModelConfig {
            timesteps: 3,
            embed_dim: 2,
            encoder_hidden: 2,
            feature_channels: 2,
            key_dim: 2,
            input_extents: [8, 16, 16],
            recon_hidden: 2,
            upsample_stride: 2,
            fused_dim: 32,
            clinical_dim: 6,
            recon_encoder_channels: [2, 2],
            ffn_dim: 64,
            years: 12,
        }
    }

    /// Channels of the spatiotemporal feature map, `C_f + E`.
    pub fn st_channels(&self) -> usize {
        self.feature_channels + self.embed_dim
    }

    /// Extents after the two strided encoder layers.
    pub fn encoded_extents(&self) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for (ax, &n) in self.input_extents.iter().enumerate() {
            let once = conv_out_extent(n, ENC_KERNEL, ENC_STRIDE, ENC_PAD);
            out[ax] = once
                .and_then(|m| conv_out_extent(m, ENC_KERNEL, ENC_STRIDE, ENC_PAD))
                .ok_or_else(|| Error::invalid("model_config", "input extents too small for the encoder"))?;
        }
        Ok(out)
    }

    /// Minimum input extent per axis for which reconstruction can restore the input.
    pub fn min_extent(&self) -> usize {
        self.upsample_stride * self.upsample_stride
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("timesteps", self.timesteps),
            ("embed_dim", self.embed_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("feature_channels", self.feature_channels),
            ("key_dim", self.key_dim),
            ("recon_hidden", self.recon_hidden),
            ("upsample_stride", self.upsample_stride),
            ("fused_dim", self.fused_dim),
            ("clinical_dim", self.clinical_dim),
            ("recon_encoder_channels[0]", self.recon_encoder_channels[0]),
            ("recon_encoder_channels[1]", self.recon_encoder_channels[1]),
            ("ffn_dim", self.ffn_dim),
            ("years", self.years),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid("model_config", format!("{name} must be >= 1")));
            }
        }
        let min = self.min_extent();
        if self.input_extents.iter().any(|&n| n < min) {
            return Err(Error::invalid(
                "model_config",
                format!("input extents {:?} below the minimum {min}×{min}×{min}", self.input_extents),
            ));
        }
        let enc = self.encoded_extents()?;
        let s = self.upsample_stride;
        for ax in 0..3 {
            if enc[ax] * s * s != self.input_extents[ax] {
                return Err(Error::invalid(
                    "model_config",
                    format!(
                        "reconstruction of {:?} from encoded {:?} with stride {s} cannot restore the input; \
                         use extents divisible by {}",
                        self.input_extents,
                        enc,
                        s * s
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Declares the pathway's parameters (`st.*`).
pub fn declare_params(cfg: &ModelConfig, init: &mut ParamInit) {
    let (h, cf, e) = (cfg.encoder_hidden, cfg.feature_channels, cfg.embed_dim);
    let c = cfg.st_channels();
    let k3 = ENC_KERNEL * ENC_KERNEL * ENC_KERNEL;
    let s = cfg.upsample_stride;
    init.uniform("st.embed.table", &[cfg.timesteps, e], 1)
        .uniform("st.enc1.w", &[h, 1, 3, 3, 3], k3)
        .uniform("st.enc1.b", &[h], k3)
        .uniform("st.enc2.w", &[cf, h, 3, 3, 3], h * k3)
        .uniform("st.enc2.b", &[cf], h * k3)
        .uniform("st.spatial.w", &[c, c, 3, 3, 3], c * k3)
        .uniform("st.spatial.b", &[c], c * k3)
        .uniform("st.temporal.w", &[c, c, 3], c * 3)
        .uniform("st.temporal.b", &[c], c * 3)
        .linear("st.attn.q", c + e, cfg.key_dim)
        .linear("st.attn.k", c + e, cfg.key_dim)
        .linear("st.attn.v", c + e, c)
        .uniform("st.up1.w", &[c, cfg.recon_hidden, s, s, s], c * s * s * s)
        .uniform("st.up1.b", &[cfg.recon_hidden], c * s * s * s)
        .uniform("st.up2.w", &[cfg.recon_hidden, 1, s, s, s], cfg.recon_hidden * s * s * s)
        .uniform("st.up2.b", &[1], cfg.recon_hidden * s * s * s);
}

/// Looks up the first `t` rows of the timestep table: `[t, E]`.
pub fn embed_timesteps(g: &mut Graph, params: &Params, t: usize) -> Result<Var> {
    let table = params.bind(g, "st.embed.table")?;
    let rows = g.shape(table)[0];
    if t == 0 || t > rows {
        return Err(Error::invalid(
            "embed_timesteps",
            format!("requested {t} timesteps from a table of {rows}"),
        ));
    }
    let idx: Vec<usize> = (0..t).collect();
    g.gather_rows(table, &idx)
}

/// Two strided 3×3×3 conv + GELU layers: `[1, D, H, W] -> [C_f, D', H', W']`.
pub fn spatial_encoder(g: &mut Graph, params: &Params, cfg: &ModelConfig, volume: Var) -> Result<Var> {
    let expected = [1, cfg.input_extents[0], cfg.input_extents[1], cfg.input_extents[2]];
    if g.shape(volume) != expected {
        let min = cfg.min_extent();
        return Err(Error::invalid(
            "spatial_encoder",
            format!(
                "volume shape {:?} does not match the configured input {expected:?} (minimum extents {min}×{min}×{min})",
                g.shape(volume)
            ),
        ));
    }
    let (w1, b1) = (params.bind(g, "st.enc1.w")?, params.bind(g, "st.enc1.b")?);
    let (w2, b2) = (params.bind(g, "st.enc2.w")?, params.bind(g, "st.enc2.b")?);
    let h = g.conv3d(volume, w1, Some(b1), ENC_STRIDE, ENC_PAD)?;
    let h = g.gelu(h)?;
    let h = g.conv3d(h, w2, Some(b2), ENC_STRIDE, ENC_PAD)?;
    g.gelu(h)
}

/// Builds `X̃_t = [X_ct; E_t]` for every t: `[T, C_f + E, D', H', W']`.
pub fn broadcast_concat(g: &mut Graph, x_ct: Var, embed: Var) -> Result<Var> {
    let [cf, d, h, w] = *g.shape(x_ct) else {
        return Err(Error::invalid("broadcast_concat", "X_ct must be [C, D, H, W]"));
    };
    let [t, e] = *g.shape(embed) else {
        return Err(Error::invalid("broadcast_concat", "E must be [T, E]"));
    };
    let sites = d * h * w;
    let x = g.reshape(x_ct, &[1, cf, sites])?;
    let x = g.expand(x, 0, t)?;
    let emb = broadcast_embedding(g, embed, sites)?;
    debug_assert_eq!(g.shape(emb), [t, e, sites]);
    let cat = g.concat(&[x, emb], 1)?;
    g.reshape(cat, &[t, cf + e, d, h, w])
}

/// `[T, E] -> [T, E, sites]`, constant over sites.
fn broadcast_embedding(g: &mut Graph, embed: Var, sites: usize) -> Result<Var> {
    let [t, e] = *g.shape(embed) else {
        return Err(Error::invalid("broadcast_embedding", "E must be [T, E]"));
    };
    let col = g.reshape(embed, &[t, e, 1])?;
    g.expand(col, 2, sites)
}

/// Shared-weight 3×3×3 spatial conv per timestep, then a length-3 temporal
/// conv at every site, GELU after each. Preserves `[T, C, D', H', W']`.
pub fn st_separable_block(g: &mut Graph, params: &Params, input: Var) -> Result<Var> {
    if g.shape(input).len() != 5 {
        return Err(Error::invalid("st_separable_block", "input must be [T, C, D, H, W]"));
    }
    let (ws, bs) = (params.bind(g, "st.spatial.w")?, params.bind(g, "st.spatial.b")?);
    let (wt, bt) = (params.bind(g, "st.temporal.w")?, params.bind(g, "st.temporal.b")?);
    let h = g.conv3d(input, ws, Some(bs), 1, 1)?;
    let h = g.gelu(h)?;
    let h = g.temporal_conv(h, wt, Some(bt))?;
    g.gelu(h)
}

/// Output of [`attention4d`].
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    /// Aggregated features, `[T, C, D', H', W']`.
    pub output: Var,
    /// Row-stochastic weights per site, `[S, T, T]` (query × key).
    pub weights: Var,
}

/// Per-site temporal attention, `softmax(Q·Kᵀ/√d_k)·V`.
///
/// At every encoded site the T timestep vectors (with `E_t` re-appended)
/// are the tokens; Q, K and V are pointwise projections shared by all sites.
pub fn attention4d(g: &mut Graph, params: &Params, features: Var, embed: Var) -> Result<Attention> {
    let [t, c, d, h, w] = *g.shape(features) else {
        return Err(Error::invalid("attention4d", "features must be [T, C, D, H, W]"));
    };
    let sites = d * h * w;
    let e = g.shape(embed)[1];
    let wq = params.bind(g, "st.attn.q.w")?;
    let key_dim = g.shape(wq)[1];
    if key_dim == 0 {
        return Err(Error::invalid("attention4d", "d_k must be >= 1"));
    }
    let flat = g.reshape(features, &[t, c, sites])?;
    let emb = broadcast_embedding(g, embed, sites)?;
    let tokens = g.concat(&[flat, emb], 1)?; // [T, C+E, S]
    let tokens = g.permute(tokens, &[2, 0, 1])?; // [S, T, C+E]
    let rows = g.reshape(tokens, &[sites * t, c + e])?;

    let project = |g: &mut Graph, name: &str| -> Result<Var> {
        let w = params.bind(g, &format!("st.attn.{name}.w"))?;
        let b = params.bind(g, &format!("st.attn.{name}.b"))?;
        g.linear(rows, w, b)
    };
    let q = project(g, "q")?;
    let k = project(g, "k")?;
    let v = project(g, "v")?;
    let q = g.reshape(q, &[sites, t, key_dim])?;
    let k = g.reshape(k, &[sites, t, key_dim])?;
    let v = g.reshape(v, &[sites, t, c])?;
    let (out, weights) = scaled_dot_attention(g, q, k, v)?;
    let out = g.permute(out, &[1, 2, 0])?; // [T, C, S]
    let output = g.reshape(out, &[t, c, d, h, w])?;
    Ok(Attention { output, weights })
}

/// `softmax(Q·Kᵀ/√d_k)·V` for `[B, T, d_k]` queries/keys and `[B, T, c]`
/// values (or unbatched `[T, ·]`). Returns `(output, weights)`.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let rank = g.shape(q).len();
    let key_dim = *g.shape(q).last().ok_or(Error::Empty { op: "attention" })?;
    if key_dim == 0 {
        return Err(Error::invalid("attention", "d_k must be >= 1"));
    }
    let kt = if rank == 3 { g.permute(k, &[0, 2, 1])? } else { g.transpose(k)? };
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / libm::sqrt(key_dim as f64))?;
    let weights = g.softmax(scores, rank - 1)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Two stride-s transposed convolutions (GELU between) per timestep:
/// `[T, C, D', H', W'] -> [T, 1, D, H, W]`.
pub fn reconstruct_upsample(g: &mut Graph, params: &Params, cfg: &ModelConfig, aggregated: Var) -> Result<Var> {
    let s = cfg.upsample_stride;
    let (w1, b1) = (params.bind(g, "st.up1.w")?, params.bind(g, "st.up1.b")?);
    let (w2, b2) = (params.bind(g, "st.up2.w")?, params.bind(g, "st.up2.b")?);
    let h = g.conv_transpose3d(aggregated, w1, Some(b1), s, 0)?;
    let h = g.gelu(h)?;
    let out = g.conv_transpose3d(h, w2, Some(b2), s, 0)?;
    let shape = g.shape(out);
    if shape[2..] != cfg.input_extents {
        return Err(Error::invalid(
            "reconstruct_upsample",
            format!(
                "reconstructed extents {:?} differ from the input extents {:?}",
                &shape[2..],
                cfg.input_extents
            ),
        ));
    }
    Ok(out)
}

/// Every intermediate of one pass through the pathway.
#[derive(Clone, Copy, Debug)]
pub struct PathwayOutput {
    pub x_ct: Var,
    pub embed: Var,
    pub features: Var,
    pub attention: Attention,
}

/// Encoder → broadcast → separable block → attention (no reconstruction).
pub fn attend(g: &mut Graph, params: &Params, cfg: &ModelConfig, volume: Var) -> Result<PathwayOutput> {
    let x_ct = spatial_encoder(g, params, cfg, volume)?;
    let embed = embed_timesteps(g, params, cfg.timesteps)?;
    let fused = broadcast_concat(g, x_ct, embed)?;
    let features = st_separable_block(g, params, fused)?;
    let attention = attention4d(g, params, features, embed)?;
    Ok(PathwayOutput { x_ct, embed, features, attention })
}

/// Parameter counts of one separable block against a dense 4-D kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub channels: usize,
    /// `C·C·27 + C` spatial plus `C·C·3 + C` temporal.
    pub separable_block: usize,
    /// `C·C·81 + C`: one dense 3×3×3×3 spatiotemporal kernel.
    pub dense_baseline: usize,
    pub reduction_pct: f64,
}

pub fn count_params(channels: usize) -> ParamCount {
    let c = channels;
    let separable_block = (c * c * 27 + c) + (c * c * 3 + c);
    let dense_baseline = c * c * 81 + c;
    ParamCount {
        channels,
        separable_block,
        dense_baseline,
        reduction_pct: 100.0 * (1.0 - separable_block as f64 / dense_baseline as f64),
    }
}

/// `lim C→∞` of the reduction: `100·(1 − 30/81)`.
pub const ASYMPTOTIC_REDUCTION_PCT: f64 = 100.0 * (1.0 - 30.0 / 81.0);

/// Block parameter count read off a declared parameter set, for cross-checking
/// [`count_params`] against the arrays actually allocated.
pub fn declared_block_params(params: &Params) -> Result<usize> {
    ["st.spatial.w", "st.spatial.b", "st.temporal.w", "st.temporal.b"]
        .iter()
        .map(|n| params.get(n).map(|t| t.len()))
        .sum()
}
