//! Central-difference checks of every differentiable operation, the model
//! building blocks and the end-to-end objective on the small configuration.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fusion;
use crate::gradcheck::{grad_check, param_grad_check, Coverage, GradCheckReport, DEFAULT_EPS};
use crate::graph::{Graph, Var};
use crate::heads::{self, Labels, SurvivalLoss};
use crate::model::{self, ModelConfig};
use crate::network::{lstm_cell, Network, Variant};
use crate::params::Params;
use crate::rng::keyed_rng;
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.coords_checked > 0 && self.report.max_rel_error <= self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi)).expect("valid shape")
}

struct Suite {
    rng: ChaCha8Rng,
    out: Vec<SuiteEntry>,
}

impl Suite {
    fn rand(&mut self, shape: &[usize]) -> Tensor {
        uniform(&mut self.rng, shape, -1.0, 1.0)
    }

    /// Weights a non-scalar output by a fixed random tensor so every output
    /// coordinate contributes to the checked scalar.
    fn weighting<F>(&mut self, build: F) -> Result<Tensor>
    where
        F: FnOnce(&mut Graph) -> Result<Var>,
    {
        let mut g = Graph::new();
        let y = build(&mut g)?;
        let shape = g.shape(y).to_vec();
        Ok(self.rand(&shape))
    }

    fn op<F>(&mut self, name: &str, inputs: Vec<Tensor>, f: F) -> Result<()>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let r = self.weighting(|g| {
            let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
            f(g, &vars)
        })?;
        let report = grad_check(&inputs, DEFAULT_EPS, |g, v| {
            let y = f(g, v)?;
            let w = g.leaf(r.clone());
            let p = g.mul(y, w)?;
            g.sum(p)
        })?;
        self.out.push(SuiteEntry { name: name.to_string(), tolerance: OP_TOLERANCE, report });
        Ok(())
    }

    fn block<F>(&mut self, name: &str, params: &Params, coverage: Coverage, tolerance: f64, f: F) -> Result<()>
    where
        F: Fn(&mut Graph, &Params) -> Result<Var>,
    {
        let r = self.weighting(|g| f(g, params))?;
        let report = param_grad_check(params, DEFAULT_EPS, coverage, |g, p| {
            let y = f(g, p)?;
            let w = g.leaf(r.clone());
            let m = g.mul(y, w)?;
            g.sum(m)
        })?;
        self.out.push(SuiteEntry { name: name.to_string(), tolerance, report });
        Ok(())
    }
}

/// Parameters of `variant` on `cfg`, jittered away from constant
/// initializations (unit gains, zero gates) so no check sits on a
/// symmetric point.
pub fn jittered_params(cfg: &ModelConfig, variant: Variant, seed: u64) -> Result<Params> {
    let mut params = Network::new(cfg.clone(), variant, seed)?.params;
    let mut rng = keyed_rng(seed, "gradsuite/jitter");
    for (_, t) in params.iter_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.1..0.1);
        }
    }
    Ok(params)
}

fn elementwise_ops(s: &mut Suite) -> Result<()> {
    let (a, b) = (s.rand(&[3, 4]), s.rand(&[3, 4]));
    s.op("add", vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]))?;
    s.op("sub", vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]))?;
    s.op("mul", vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]))?;
    s.op("affine", vec![a.clone()], |g, v| g.affine(v[0], 1.5, -0.3))?;
    s.op("scale", vec![a.clone()], |g, v| g.scale(v[0], -2.0))?;
    let k = s.rand(&[1]);
    s.op("scale_by", vec![a.clone(), k], |g, v| g.scale_by(v[0], v[1]))?;
    let row = s.rand(&[4]);
    s.op("add_row", vec![a.clone(), row.clone()], |g, v| g.add_row(v[0], v[1]))?;
    s.op("mul_row", vec![a.clone(), row], |g, v| g.mul_row(v[0], v[1]))?;
    let wide = uniform(&mut s.rng, &[3, 4], -3.0, 3.0);
    s.op("gelu", vec![wide.clone()], |g, v| g.gelu(v[0]))?;
    s.op("sigmoid", vec![wide.clone()], |g, v| g.sigmoid(v[0]))?;
    s.op("tanh", vec![wide], |g, v| g.tanh(v[0]))?;
    s.op("exp", vec![a.clone()], |g, v| g.exp(v[0]))?;
    let pos = uniform(&mut s.rng, &[3, 4], 0.5, 2.0);
    s.op("log", vec![pos], |g, v| g.log(v[0]))?;
    // keep clear of the clamp bounds, where the slope is undefined
    let c = Tensor::vector(&[-0.9, -0.3, 0.1, 0.4, 0.8, 1.2])?;
    s.op("clamp", vec![c], |g, v| g.clamp(v[0], -0.5, 0.5))?;
    Ok(())
}

fn shape_ops(s: &mut Suite) -> Result<()> {
    let (a, b) = (s.rand(&[3, 4]), s.rand(&[4, 2]));
    s.op("matmul", vec![a.clone(), b], |g, v| g.matmul(v[0], v[1]))?;
    let (a3, b3) = (s.rand(&[2, 3, 4]), s.rand(&[2, 4, 2]));
    s.op("matmul (batched)", vec![a3.clone(), b3], |g, v| g.matmul(v[0], v[1]))?;
    s.op("permute", vec![a3.clone()], |g, v| g.permute(v[0], &[2, 0, 1]))?;
    s.op("transpose", vec![a.clone()], |g, v| g.transpose(v[0]))?;
    s.op("reshape", vec![a.clone()], |g, v| g.reshape(v[0], &[2, 6]))?;
    let e = s.rand(&[3, 1, 2]);
    s.op("expand", vec![e], |g, v| g.expand(v[0], 1, 4))?;
    let (c0, c1, c2) = (s.rand(&[2, 3]), s.rand(&[1, 3]), s.rand(&[2, 2]));
    s.op("concat (axis 0)", vec![c0.clone(), c1], |g, v| g.concat(&[v[0], v[1]], 0))?;
    s.op("concat (axis 1)", vec![c0, c2], |g, v| g.concat(&[v[0], v[1]], 1))?;
    let table = s.rand(&[5, 3]);
    s.op("gather_rows", vec![table], |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]))?;
    s.op("sum", vec![a.clone()], |g, v| g.sum(v[0]))?;
    s.op("mean", vec![a.clone()], |g, v| g.mean(v[0]))?;
    s.op("mean_axis", vec![a3], |g, v| g.mean_axis(v[0], 1))?;
    let m = uniform(&mut s.rng, &[3, 5], -2.0, 2.0);
    s.op("softmax (last axis)", vec![m.clone()], |g, v| g.softmax(v[0], 1))?;
    s.op("softmax (axis 0)", vec![m.clone()], |g, v| g.softmax(v[0], 0))?;
    s.op("layer_norm", vec![m], |g, v| g.layer_norm(v[0]))?;
    let (x, w, bias) = (s.rand(&[2, 4]), s.rand(&[4, 3]), s.rand(&[3]));
    s.op("linear", vec![x, w, bias], |g, v| g.linear(v[0], v[1], v[2]))?;
    Ok(())
}

fn conv_ops(s: &mut Suite) -> Result<()> {
    let (x, w, b) = (s.rand(&[2, 5, 4, 6]), s.rand(&[3, 2, 3, 3, 3]), s.rand(&[3]));
    s.op("conv3d (stride 1, pad 1)", vec![x.clone(), w.clone(), b.clone()], |g, v| {
        g.conv3d(v[0], v[1], Some(v[2]), 1, 1)
    })?;
    s.op("conv3d (stride 2, pad 1)", vec![x, w.clone(), b.clone()], |g, v| g.conv3d(v[0], v[1], Some(v[2]), 2, 1))?;
    let xb = s.rand(&[2, 2, 4, 4, 4]);
    s.op("conv3d (batched, no bias)", vec![xb, w], |g, v| g.conv3d(v[0], v[1], None, 2, 0))?;
    let (xt, wt, bt) = (s.rand(&[2, 2, 3, 3]), s.rand(&[2, 3, 2, 2, 2]), s.rand(&[3]));
    s.op("conv_transpose3d (stride 2)", vec![xt.clone(), wt, bt.clone()], |g, v| {
        g.conv_transpose3d(v[0], v[1], Some(v[2]), 2, 0)
    })?;
    let wt3 = s.rand(&[2, 3, 3, 3, 3]);
    s.op("conv_transpose3d (stride 1, pad 1)", vec![xt, wt3, bt], |g, v| {
        g.conv_transpose3d(v[0], v[1], Some(v[2]), 1, 1)
    })?;
    let (xtc, wtc, btc) = (s.rand(&[4, 2, 3, 2]), s.rand(&[3, 2, 3]), s.rand(&[3]));
    s.op("temporal_conv", vec![xtc, wtc, btc], |g, v| g.temporal_conv(v[0], v[1], Some(v[2])))?;
    Ok(())
}

fn statistic_ops(s: &mut Suite) -> Result<()> {
    let h = s.rand(&[5, 3]);
    s.op("covariance", vec![h], |g, v| g.covariance(v[0]))?;
    let (a, b) = (s.rand(&[4, 3]), s.rand(&[4, 3]));
    s.op("row_cosine", vec![a.clone(), b.clone()], |g, v| g.row_cosine(v[0], v[1]))?;
    let m = s.rand(&[3, 3]);
    s.op("frobenius", vec![m], |g, v| g.frobenius(v[0]))?;
    s.op("alignment_loss", vec![a.clone(), b.clone()], |g, v| fusion::alignment_loss(g, v[0], v[1]))?;
    s.op("disentanglement_loss", vec![a, b], |g, v| fusion::disentanglement_loss(g, v[0], v[1]))?;
    let (q, k, v) = (s.rand(&[2, 3, 2]), s.rand(&[2, 3, 2]), s.rand(&[2, 3, 4]));
    s.op("scaled_dot_attention", vec![q, k, v], |g, x| Ok(model::scaled_dot_attention(g, x[0], x[1], x[2])?.0))?;
    let hs: Vec<Tensor> = (0..3).map(|_| s.rand(&[1, 6])).collect();
    let gates = vec![s.rand(&[1]), s.rand(&[1])];
    s.op("gated_fuse", [hs, gates].concat(), |g, v| fusion::gated_fuse(g, v[0], v[1], v[2], v[3], v[4]))?;
    let (lr, ls) = (s.rand(&[1, 12]), s.rand(&[1, 12]));
    let labels = Labels { recurrence_year: 3, survival_year: 5 };
    for (name, mode) in [
        ("task_losses (cross-entropy)", SurvivalLoss::CrossEntropy),
        ("task_losses (expected-year MSE)", SurvivalLoss::ExpectedYearMse),
    ] {
        s.op(name, vec![lr.clone(), ls.clone()], |g, v| {
            let rec = g.sigmoid(v[0])?;
            let surv = g.softmax(v[1], 1)?;
            let (a, b) = heads::task_losses(g, rec, surv, labels, mode)?;
            g.add(a, b)
        })?;
    }
    Ok(())
}

fn model_blocks(s: &mut Suite, seed: u64) -> Result<()> {
    let cfg = ModelConfig::toy();
    let p = jittered_params(&cfg, Variant::full(), seed)?;
    let all = Coverage::All;
    let tol = OP_TOLERANCE;
    let [d, h, w] = cfg.input_extents;
    let [ed, eh, ew] = cfg.encoded_extents()?;
    let (t, c) = (cfg.timesteps, cfg.st_channels());

    let vol = s.rand(&[1, d, h, w]);
    s.block("spatial_encoder", &p, all, tol, |g, p| {
        let v = g.leaf(vol.clone());
        model::spatial_encoder(g, p, &cfg, v)
    })?;
    let x_ct = s.rand(&[cfg.feature_channels, ed, eh, ew]);
    s.block("embed + broadcast_concat", &p, all, tol, |g, p| {
        let x = g.leaf(x_ct.clone());
        let e = model::embed_timesteps(g, p, t)?;
        model::broadcast_concat(g, x, e)
    })?;
    let feats = s.rand(&[t, c, ed, eh, ew]);
    s.block("st_separable_block", &p, all, tol, |g, p| {
        let x = g.leaf(feats.clone());
        model::st_separable_block(g, p, x)
    })?;
    s.block("attention4d", &p, all, tol, |g, p| {
        let x = g.leaf(feats.clone());
        let e = model::embed_timesteps(g, p, t)?;
        Ok(model::attention4d(g, p, x, e)?.output)
    })?;
    let agg = s.rand(&[t, c, ed, eh, ew]);
    s.block("reconstruct_upsample", &p, all, tol, |g, p| {
        let x = g.leaf(agg.clone());
        model::reconstruct_upsample(g, p, &cfg, x)
    })?;
    let recon = s.rand(&[t, 1, d, h, w]);
    s.block("encode_recon", &p, all, tol, |g, p| {
        let x = g.leaf(recon.clone());
        Ok(fusion::encode_recon(g, p, x)?.h_recon)
    })?;
    let tokens = s.rand(&[t, cfg.fused_dim]);
    s.block("transformer_layer", &p, all, tol, |g, p| {
        let x = g.leaf(tokens.clone());
        Ok(fusion::transformer_layer(g, p, x)?.0)
    })?;
    let clin = s.rand(&[1, cfg.clinical_dim]);
    s.block("encode_clinical", &p, all, tol, |g, p| {
        let x = g.leaf(clin.clone());
        fusion::encode_clinical(g, p, x)
    })?;
    s.block("pool_img_features", &p, all, tol, |g, p| {
        let x = g.leaf(feats.clone());
        fusion::pool_img_features(g, p, x, "fusion.img")
    })?;
    let fused = s.rand(&[1, cfg.fused_dim]);
    s.block("recurrence_head", &p, all, tol, |g, p| {
        let x = g.leaf(fused.clone());
        heads::recurrence_head(g, p, x)
    })?;
    s.block("survival_head", &p, all, tol, |g, p| {
        let x = g.leaf(fused.clone());
        heads::survival_head(g, p, x)
    })?;

    let lstm: Variant = "3d_lstm".parse()?;
    let pl = jittered_params(&cfg, lstm, seed)?;
    let (x, h0, c0) = (s.rand(&[1, cfg.feature_channels]), s.rand(&[1, cfg.fused_dim]), s.rand(&[1, cfg.fused_dim]));
    s.block("lstm_cell", &pl, all, tol, |g, p| {
        let (x, h0, c0) = (g.leaf(x.clone()), g.leaf(h0.clone()), g.leaf(c0.clone()));
        let (h, c) = lstm_cell(g, p, "lstm", x, h0, c0)?;
        g.concat(&[h, c], 1)
    })?;
    Ok(())
}

/// The training objective of a two-sample batch, every loss term active
/// for the variant, against sampled coordinates of every parameter array.
fn end_to_end(s: &mut Suite, seed: u64) -> Result<()> {
    let cfg = ModelConfig::toy();
    let [d, h, w] = cfg.input_extents;
    let weights = TrainConfig::default().weights;
    let batch: Vec<(Tensor, Tensor, Labels)> = [(2u8, 4u8), (7, 9)]
        .iter()
        .map(|&(r, sv)| {
            let vol = s.rand(&[1, d, h, w]);
            let clin = s.rand(&[1, cfg.clinical_dim]);
            (vol, clin, Labels { recurrence_year: r, survival_year: sv })
        })
        .collect();
    for name in ["full", "3d_lstm+fuse+align", "3d_only+fuse+align+dis", "3d_only"] {
        let variant: Variant = name.parse()?;
        let params = jittered_params(&cfg, variant, seed)?;
        let coverage = Coverage::Sample { per_input: 8, seed };
        let report = param_grad_check(&params, DEFAULT_EPS, coverage, |g, p| {
            let net = Network { cfg: cfg.clone(), variant, params: p.clone() };
            let vars: Vec<(Var, Var, Labels)> =
                batch.iter().map(|(v, c, l)| (g.leaf(v.clone()), g.leaf(c.clone()), *l)).collect();
            net.batch_objective(g, &vars, weights, SurvivalLoss::CrossEntropy)
        })?;
        s.out.push(SuiteEntry {
            name: alloc::format!("end-to-end objective ({name}, B=2)"),
            tolerance: END_TO_END_TOLERANCE,
            report,
        });
    }
    Ok(())
}

/// Runs every check; the result lists one entry per operation or block.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut s = Suite { rng: keyed_rng(seed, "gradsuite"), out: Vec::new() };
    elementwise_ops(&mut s)?;
    shape_ops(&mut s)?;
    conv_ops(&mut s)?;
    statistic_ops(&mut s)?;
    model_blocks(&mut s, seed)?;
    end_to_end(&mut s, seed)?;
    Ok(s.out)
}
