//! Full network assembly: the 4D pathway, fusion and heads, plus the two
//! comparison baselines (spatial-only and spatial + LSTM).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion;
use crate::graph::{Graph, Var};
use crate::heads::{self, Labels, LossWeights, SurvivalLoss};
use crate::model::{self, ModelConfig};
use crate::params::{ParamInit, Params};
use crate::tensor::Tensor;

/// Image backbone of a variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Base {
    /// Spatial encoder → pooled features; no timesteps, attention or reconstruction.
    ThreeDOnly,
    /// Spatial features tiled over T through an LSTM chain.
    ThreeDLstm,
    /// The complete 4D attention pathway with reconstruction encoder.
    Full,
}

impl Base {
    pub const ALL: [Base; 3] = [Base::ThreeDOnly, Base::ThreeDLstm, Base::Full];

    pub fn name(self) -> &'static str {
        match self {
            Base::ThreeDOnly => "3d_only",
            Base::ThreeDLstm => "3d_lstm",
            Base::Full => "full",
        }
    }
}

/// A backbone plus the fusion / loss-term toggles.
///
/// Written as `base` followed by `+mod` / `-mod` modifiers, e.g.
/// `3d_only+fuse+align` or `full-dis`. `full` defaults to everything on,
/// the baselines to everything off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub base: Base,
    /// Clinical branch and gated fusion.
    pub fuse: bool,
    /// Alignment loss term.
    pub align: bool,
    /// Disentanglement loss term.
    pub dis: bool,
}

impl Variant {
    pub const fn full() -> Self {
        Variant {
            base: Base::Full,
            fuse: true,
            align: true,
            dis: true,
        }
    }

    pub const fn bare(base: Base) -> Self {
        match base {
            Base::Full => Self::full(),
            _ => Variant {
                base,
                fuse: false,
                align: false,
                dis: false,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (self.align || self.dis) && !self.fuse {
            return Err(Error::invalid(
                "variant",
                format!("`{self}`: alignment and disentanglement need the clinical branch (+fuse)"),
            ));
        }
        Ok(())
    }

    /// The objective weights with disabled terms zeroed.
    pub fn loss_weights(&self, base: LossWeights) -> LossWeights {
        LossWeights {
            align: if self.align { base.align } else { 0.0 },
            dis: if self.dis { base.dis } else { 0.0 },
            ..base
        }
    }

    pub fn has_aux(&self) -> bool {
        self.align || self.dis
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.base.name())?;
        let default = Variant::bare(self.base);
        for (name, on, def) in [
            ("fuse", self.fuse, default.fuse),
            ("align", self.align, default.align),
            ("dis", self.dis, default.dis),
        ] {
            if on != def {
                write!(f, "{}{name}", if on { '+' } else { '-' })?;
            }
        }
        Ok(())
    }
}

pub const VARIANT_GRAMMAR: &str =
    "base (3d_only | 3d_lstm | full) followed by any of +fuse -fuse +align -align +dis -dis";

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let split = s.find(['+', '-']).unwrap_or(s.len());
        let base = match &s[..split] {
            "3d_only" => Base::ThreeDOnly,
            "3d_lstm" => Base::ThreeDLstm,
            "full" => Base::Full,
            other => {
                return Err(Error::invalid(
                    "variant",
                    format!("unknown variant `{other}`; valid: {VARIANT_GRAMMAR}"),
                ))
            }
        };
        let mut v = Variant::bare(base);
        let mut rest = &s[split..];
        while !rest.is_empty() {
            let on = rest.starts_with('+');
            let body = &rest[1..];
            let end = body.find(['+', '-']).unwrap_or(body.len());
            match &body[..end] {
                "fuse" => v.fuse = on,
                "align" => v.align = on,
                "dis" => v.dis = on,
                other => {
                    return Err(Error::invalid(
                        "variant",
                        format!("unknown modifier `{other}` in `{s}`; valid: {VARIANT_GRAMMAR}"),
                    ))
                }
            }
            rest = &body[end..];
        }
        v.validate()?;
        Ok(v)
    }
}

// ------------------------------------------------------------------ LSTM

/// Declares one LSTM cell: per gate `{prefix}.{i,f,g,o}.{wx,wh,b}`.
pub fn declare_lstm(init: &mut ParamInit, prefix: &str, input: usize, hidden: usize) {
    for gate in ["i", "f", "g", "o"] {
        init.uniform(&format!("{prefix}.{gate}.wx"), &[input, hidden], hidden)
            .uniform(&format!("{prefix}.{gate}.wh"), &[hidden, hidden], hidden)
            .uniform(&format!("{prefix}.{gate}.b"), &[hidden], hidden);
    }
}

/// Standard four-gate LSTM step on `[1, in]` input and `[1, H]` states.
pub fn lstm_cell(g: &mut Graph, params: &Params, prefix: &str, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
    if g.shape(h_prev) != g.shape(c_prev) {
        return Err(Error::shape("lstm_cell", g.shape(h_prev), g.shape(c_prev)));
    }
    let pre = |g: &mut Graph, gate: &str| -> Result<Var> {
        let wx = params.bind(g, &format!("{prefix}.{gate}.wx"))?;
        let wh = params.bind(g, &format!("{prefix}.{gate}.wh"))?;
        let b = params.bind(g, &format!("{prefix}.{gate}.b"))?;
        if g.shape(x).last() != g.shape(wx).first() || g.shape(h_prev).last() != g.shape(wh).first() {
            return Err(Error::shape("lstm_cell", g.shape(x), g.shape(wx)));
        }
        let a = g.linear(x, wx, b)?;
        let r = g.matmul(h_prev, wh)?;
        g.add(a, r)
    };
    let i = pre(g, "i")?;
    let f = pre(g, "f")?;
    let c_hat = pre(g, "g")?;
    let o = pre(g, "o")?;
    let i = g.sigmoid(i)?;
    let f = g.sigmoid(f)?;
    let c_hat = g.tanh(c_hat)?;
    let o = g.sigmoid(o)?;
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, c_hat)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

// --------------------------------------------------------------- network

/// Every node of one forward pass that later stages need.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub h_img: Var,
    pub h_clin: Option<Var>,
    /// Tape length right after `h_img`/`h_clin`: truncating to it keeps
    /// exactly what the batch-level loss terms differentiate through.
    pub trunk_len: usize,
    pub h_recon: Option<Var>,
    /// `[T, 1, D, H, W]` reconstruction (full model only).
    pub recon: Option<Var>,
    /// `[S, T, T]` timestep attention weights (full model only).
    pub attention: Option<Var>,
    pub h_fused: Var,
    pub recurrence: Var,
    pub survival: Var,
}

/// Head outputs for one sample, detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub recurrence: Vec<f64>,
    pub survival: Vec<f64>,
    pub recon: Option<Tensor>,
}

/// Architecture + variant + parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub cfg: ModelConfig,
    pub variant: Variant,
    pub params: Params,
}

fn uses(variant: Variant, name: &str) -> bool {
    let clin = name.starts_with("fusion.clin");
    let common = name.starts_with("head.") || name.starts_with("st.enc");
    match variant.base {
        Base::ThreeDOnly | Base::ThreeDLstm => {
            let backbone = match variant.base {
                Base::ThreeDOnly => name.starts_with("base.img"),
                _ => name.starts_with("lstm."),
            };
            common || backbone || (variant.fuse && (clin || name == "fusion.gate0"))
        }
        Base::Full => {
            name.starts_with("head.")
                || name.starts_with("st.")
                || (name.starts_with("fusion.") && !clin)
                || (variant.fuse && clin)
        }
    }
}

impl Network {
    /// Seeded initialization of exactly the arrays `variant` uses.
    pub fn new(cfg: ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        cfg.validate()?;
        variant.validate()?;
        let mut init = ParamInit::new(seed);
        model::declare_params(&cfg, &mut init);
        fusion::declare_params(&cfg, &mut init);
        heads::declare_params(&cfg, &mut init);
        init.linear("base.img", cfg.feature_channels, cfg.fused_dim);
        declare_lstm(&mut init, "lstm", cfg.feature_channels, cfg.fused_dim);
        let mut params = init.finish();
        params.retain(|n| uses(variant, n));
        Ok(Network { cfg, variant, params })
    }

    /// Wraps existing parameters, checking that every array the variant
    /// needs is present with the expected shape.
    pub fn with_params(cfg: ModelConfig, variant: Variant, params: Params) -> Result<Self> {
        let reference = Network::new(cfg.clone(), variant, 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::invalid(
                    "params",
                    format!("`{name}` has shape {:?}, expected {:?}", got.shape(), t.shape()),
                ));
            }
        }
        if params.len() != reference.params.len() {
            let extra: Vec<&str> = params.names().into_iter().filter(|n| !reference.params.contains(n)).collect();
            return Err(Error::invalid("params", format!("unexpected parameters {extra:?}")));
        }
        Ok(Network { cfg, variant, params })
    }

    fn input_shape(&self) -> [usize; 4] {
        let [d, h, w] = self.cfg.input_extents;
        [1, d, h, w]
    }

    /// Builds the forward pass on `volume` (`[1, D, H, W]`) and `clinical`
    /// (`[1, C_clin]`, already standardized).
    ///
    /// Image and clinical embeddings are recorded first so that the tape
    /// can be truncated to [`Forward::trunk_len`] once the per-sample
    /// backward pass is done.
    pub fn forward(&self, g: &mut Graph, volume: Var, clinical: Var) -> Result<Forward> {
        let p = &self.params;
        let cfg = &self.cfg;
        if g.shape(clinical) != [1, cfg.clinical_dim] {
            return Err(Error::shape("forward", &[1, cfg.clinical_dim], g.shape(clinical)));
        }
        let mut attended = None;
        let mut attention = None;
        let h_img = match self.variant.base {
            Base::Full => {
                let out = model::attend(g, p, cfg, volume)?;
                attended = Some(out.attention.output);
                attention = Some(out.attention.weights);
                fusion::pool_img_features(g, p, out.attention.output, "fusion.img")?
            }
            Base::ThreeDOnly => {
                let x_ct = model::spatial_encoder(g, p, cfg, volume)?;
                let pooled = fusion::channel_means(g, x_ct, 0)?;
                let (w, b) = (p.bind(g, "base.img.w")?, p.bind(g, "base.img.b")?);
                g.linear(pooled, w, b)?
            }
            Base::ThreeDLstm => {
                let x_ct = model::spatial_encoder(g, p, cfg, volume)?;
                let pooled = fusion::channel_means(g, x_ct, 0)?;
                let zero = g.leaf(Tensor::zeros([1, cfg.fused_dim])?);
                let (mut h, mut c) = (zero, zero);
                for _ in 0..cfg.timesteps {
                    (h, c) = lstm_cell(g, p, "lstm", pooled, h, c)?;
                }
                h
            }
        };
        let h_clin = if self.variant.fuse {
            Some(fusion::encode_clinical(g, p, clinical)?)
        } else {
            None
        };
        let trunk_len = g.len();

        let (mut recon, mut h_recon) = (None, None);
        if let Some(att) = attended {
            let r = model::reconstruct_upsample(g, p, cfg, att)?;
            recon = Some(r);
            h_recon = Some(fusion::encode_recon(g, p, r)?.h_recon);
        }
        let gate = |g: &mut Graph, i: usize| p.bind(g, &format!("fusion.gate{i}"));
        let h_fused = match (h_recon, h_clin) {
            (Some(hr), hc) => {
                let (g0, g1) = (gate(g, 0)?, gate(g, 1)?);
                fusion::fuse_terms(g, &[(h_img, g0), (hr, g1)], hc)?
            }
            (None, Some(hc)) => {
                let g0 = gate(g, 0)?;
                fusion::fuse_terms(g, &[(h_img, g0)], Some(hc))?
            }
            (None, None) => h_img,
        };
        let recurrence = heads::recurrence_head(g, p, h_fused)?;
        let survival = heads::survival_head(g, p, h_fused)?;
        Ok(Forward {
            h_img,
            h_clin,
            trunk_len,
            h_recon,
            recon,
            attention,
            h_fused,
            recurrence,
            survival,
        })
    }

    /// Binds raw tensors as graph inputs, reshaping `[D, H, W]` / `[C]`
    /// to the batch-of-one layout.
    pub fn inputs(&self, g: &mut Graph, volume: &Tensor, clinical: &Tensor) -> Result<(Var, Var)> {
        let vol = volume.clone().reshape(self.input_shape().to_vec())?;
        let clin = clinical.clone().reshape(alloc::vec![1, clinical.len()])?;
        Ok((g.leaf(vol), g.leaf(clin)))
    }

    pub fn predict(&self, volume: &Tensor, clinical: &Tensor, keep_recon: bool) -> Result<Prediction> {
        let mut g = Graph::new();
        let (v, c) = self.inputs(&mut g, volume, clinical)?;
        let f = self.forward(&mut g, v, c)?;
        Ok(Prediction {
            recurrence: g.value(f.recurrence).data().to_vec(),
            survival: g.value(f.survival).data().to_vec(),
            recon: if keep_recon { f.recon.map(|r| g.value(r).clone()) } else { None },
        })
    }

    /// `w_surv·L_surv + w_recur·L_recur` for one sample; returns
    /// `(objective, L_recur, L_surv)`.
    pub fn task_objective(
        &self,
        g: &mut Graph,
        fwd: &Forward,
        labels: Labels,
        weights: LossWeights,
        survival_loss: SurvivalLoss,
    ) -> Result<(Var, Var, Var)> {
        let (lr, ls) = heads::task_losses(g, fwd.recurrence, fwd.survival, labels, survival_loss)?;
        let a = g.scale(ls, weights.surv)?;
        let b = g.scale(lr, weights.recur)?;
        Ok((g.add(a, b)?, lr, ls))
    }

    /// Batch-level terms `w_align·L_align + w_dis·L_dis` over `[1, d]`
    /// feature rows; returns `(objective, L_align, L_dis)`. Disabled terms
    /// are reported as 0 and not recorded.
    pub fn aux_objective(
        &self,
        g: &mut Graph,
        h_img: &[Var],
        h_clin: &[Var],
        weights: LossWeights,
    ) -> Result<(Var, Option<Var>, Option<Var>)> {
        if h_img.is_empty() || h_img.len() != h_clin.len() {
            return Err(Error::shape("aux_objective", &[h_img.len()], &[h_clin.len()]));
        }
        let hi = g.concat(h_img, 0)?;
        let hc = g.concat(h_clin, 0)?;
        let mut total = g.leaf(Tensor::scalar(0.0));
        let (mut la, mut ld) = (None, None);
        if self.variant.align {
            let l = fusion::alignment_loss(g, hi, hc)?;
            let s = g.scale(l, weights.align)?;
            total = g.add(total, s)?;
            la = Some(l);
        }
        if self.variant.dis {
            let l = fusion::disentanglement_loss(g, hi, hc)?;
            let s = g.scale(l, weights.dis)?;
            total = g.add(total, s)?;
            ld = Some(l);
        }
        Ok((total, la, ld))
    }

    /// The whole objective of a batch in one graph: per-sample task terms
    /// summed, plus the batch-level terms once.
    pub fn batch_objective(
        &self,
        g: &mut Graph,
        batch: &[(Var, Var, Labels)],
        weights: LossWeights,
        survival_loss: SurvivalLoss,
    ) -> Result<Var> {
        let weights = self.variant.loss_weights(weights);
        let mut total = None;
        let (mut his, mut hcs) = (Vec::new(), Vec::new());
        for &(vol, clin, labels) in batch {
            let f = self.forward(g, vol, clin)?;
            let (obj, _, _) = self.task_objective(g, &f, labels, weights, survival_loss)?;
            total = Some(match total {
                Some(t) => g.add(t, obj)?,
                None => obj,
            });
            his.push(f.h_img);
            if let Some(hc) = f.h_clin {
                hcs.push(hc);
            }
        }
        let mut total = total.ok_or(Error::Empty { op: "batch_objective" })?;
        if self.variant.has_aux() {
            let (aux, _, _) = self.aux_objective(g, &his, &hcs, weights)?;
            total = g.add(total, aux)?;
        }
        Ok(total)
    }

    /// Names of all arrays, for diagnostics.
    pub fn param_names(&self) -> Vec<String> {
        self.params.names().into_iter().map(String::from).collect()
    }
}

/// Batch-level loss values and the gradient they send back into each
/// sample's `(h_img, h_clin)`.
#[derive(Clone, Debug)]
pub struct AuxResult {
    pub align: f64,
    pub dis: f64,
    pub grads: Vec<(Tensor, Tensor)>,
}

impl Network {
    /// Evaluates the batch-level terms on detached feature rows.
    pub fn aux_losses(&self, h_img: &[Tensor], h_clin: &[Tensor], weights: LossWeights) -> Result<AuxResult> {
        let weights = self.variant.loss_weights(weights);
        let mut g = Graph::new();
        let hi: Vec<Var> = h_img.iter().map(|t| g.leaf(t.clone())).collect();
        let hc: Vec<Var> = h_clin.iter().map(|t| g.leaf(t.clone())).collect();
        let (total, la, ld) = self.aux_objective(&mut g, &hi, &hc, weights)?;
        let grads = g.backward(total)?;
        let value = |v: Option<Var>| v.map_or(Ok(0.0), |v| g.value(v).item());
        Ok(AuxResult {
            align: value(la)?,
            dis: value(ld)?,
            grads: hi
                .iter()
                .zip(&hc)
                .zip(h_img.iter().zip(h_clin))
                .map(|((&a, &b), (ta, tb))| (grads.wrt(a, ta), grads.wrt(b, tb)))
                .collect(),
        })
    }
}
