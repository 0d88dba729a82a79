//! Kernels against direct nested-loop references on random small instances.

use acfnet_core::heads::metrics;
use acfnet_core::kernels;
use acfnet_core::model::attention4d;
use acfnet_core::params::Params;
use acfnet_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: usize = 120;
const TOL: f64 = 1e-10;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= TOL, "{what}[{i}]: {x} vs {y}");
    }
}

/// `out[o, z, y, x] = b[o] + Σ w[o, c, i, j, k] · in[c, z·s + i − p, …]`.
fn conv3d_ref(x: &Tensor, w: &Tensor, b: &Tensor, s: usize, p: usize) -> (Vec<usize>, Vec<f64>) {
    let [c_in, d, h, wd] = x.shape().try_into().unwrap();
    let [c_out, _, kd, kh, kw] = w.shape().try_into().unwrap();
    let out_ext = |n: usize, k: usize| (n + 2 * p - k) / s + 1;
    let (od, oh, ow) = (out_ext(d, kd), out_ext(h, kh), out_ext(wd, kw));
    let xs = |c: usize, z: isize, y: isize, xx: isize| -> f64 {
        if z < 0 || y < 0 || xx < 0 || z >= d as isize || y >= h as isize || xx >= wd as isize {
            0.0
        } else {
            x.data()[((c * d + z as usize) * h + y as usize) * wd + xx as usize]
        }
    };
    let mut out = Vec::new();
    for o in 0..c_out {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..c_in {
                        for i in 0..kd {
                            for j in 0..kh {
                                for k in 0..kw {
                                    let wv = w.data()[(((o * c_in + c) * kd + i) * kh + j) * kw + k];
                                    let zz = (z * s + i) as isize - p as isize;
                                    let yy = (y * s + j) as isize - p as isize;
                                    let xq = (xx * s + k) as isize - p as isize;
                                    acc += wv * xs(c, zz, yy, xq);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (vec![c_out, od, oh, ow], out)
}

/// Scatter form: every input voxel adds `in · w` onto the window it maps to.
fn conv_transpose3d_ref(x: &Tensor, w: &Tensor, b: &Tensor, s: usize, p: usize) -> (Vec<usize>, Vec<f64>) {
    let [c_in, d, h, wd] = x.shape().try_into().unwrap();
    let [_, c_out, kd, kh, kw] = w.shape().try_into().unwrap();
    let big = |n: usize, k: usize| (n - 1) * s + k - 2 * p;
    let (od, oh, ow) = (big(d, kd), big(h, kh), big(wd, kw));
    let mut out = vec![0.0; c_out * od * oh * ow];
    for o in 0..c_out {
        for v in &mut out[o * od * oh * ow..(o + 1) * od * oh * ow] {
            *v = b.data()[o];
        }
    }
    for c in 0..c_in {
        for z in 0..d {
            for y in 0..h {
                for xx in 0..wd {
                    let xv = x.data()[((c * d + z) * h + y) * wd + xx];
                    for o in 0..c_out {
                        for i in 0..kd {
                            for j in 0..kh {
                                for k in 0..kw {
                                    let zz = (z * s + i) as isize - p as isize;
                                    let yy = (y * s + j) as isize - p as isize;
                                    let xq = (xx * s + k) as isize - p as isize;
                                    if zz < 0 || yy < 0 || xq < 0 || zz >= od as isize || yy >= oh as isize || xq >= ow as isize {
                                        continue;
                                    }
                                    let wv = w.data()[(((c * c_out + o) * kd + i) * kh + j) * kw + k];
                                    out[((o * od + zz as usize) * oh + yy as usize) * ow + xq as usize] += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (vec![c_out, od, oh, ow], out)
}

#[test]
fn conv3d_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..INSTANCES {
        let (ci, co) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let ext: [usize; 3] = std::array::from_fn(|_| rng.random_range(3..=6));
        let (s, p) = (rng.random_range(1..=2), rng.random_range(0..=1));
        let x = rand_tensor(&mut rng, &[ci, ext[0], ext[1], ext[2]]);
        let w = rand_tensor(&mut rng, &[co, ci, 3, 3, 3]);
        let b = rand_tensor(&mut rng, &[co]);
        let got = kernels::conv3d(&x, &w, Some(&b), s, p).unwrap();
        let (shape, want) = conv3d_ref(&x, &w, &b, s, p);
        assert_eq!(got.shape(), shape.as_slice());
        assert_close(got.data(), &want, "conv3d");
    }
}

#[test]
fn conv3d_batch_axis_is_independent_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[3, 2, 4, 5, 4]);
    let w = rand_tensor(&mut rng, &[2, 2, 3, 3, 3]);
    let b = rand_tensor(&mut rng, &[2]);
    let got = kernels::conv3d(&x, &w, Some(&b), 1, 1).unwrap();
    let per = got.len() / 3;
    for k in 0..3 {
        let xk = Tensor::new(vec![2, 4, 5, 4], x.data()[k * 160..(k + 1) * 160].to_vec()).unwrap();
        let (_, want) = conv3d_ref(&xk, &w, &b, 1, 1);
        assert_close(&got.data()[k * per..(k + 1) * per], &want, "batched conv3d");
    }
}

#[test]
fn conv_transpose3d_matches_scatter_and_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..INSTANCES {
        let (ci, co) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let ext: [usize; 3] = std::array::from_fn(|_| rng.random_range(2..=4));
        let (k, s, p) = match rng.random_range(0..3) {
            0 => (2, 2, 0),
            1 => (3, 1, 1),
            _ => (3, 2, 1),
        };
        let x = rand_tensor(&mut rng, &[ci, ext[0], ext[1], ext[2]]);
        let w = rand_tensor(&mut rng, &[ci, co, k, k, k]);
        let b = rand_tensor(&mut rng, &[co]);
        let got = kernels::conv_transpose3d(&x, &w, Some(&b), s, p).unwrap();
        let (shape, want) = conv_transpose3d_ref(&x, &w, &b, s, p);
        assert_eq!(got.shape(), shape.as_slice());
        assert_close(got.data(), &want, "conv_transpose3d");

        // ⟨convT(x), y⟩ = ⟨x, conv(y)⟩ with the same weights and no bias
        let y = rand_tensor(&mut rng, &shape);
        // the transposed weight [C_small, C_big, …] is a conv weight [out, in, …] big → small
        let tx = kernels::conv_transpose3d(&x, &w, None, s, p).unwrap();
        let cy = kernels::conv3d(&y, &w, None, s, p).unwrap();
        assert_eq!(cy.shape(), x.shape());
        let lhs = tx.dot(&y).unwrap();
        let rhs = x.dot(&cy).unwrap();
        assert!((lhs - rhs).abs() <= TOL * (1.0 + lhs.abs()), "adjoint: {lhs} vs {rhs}");
    }
}

#[test]
fn temporal_conv_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..INSTANCES {
        let t = rng.random_range(1..=5);
        let (c, co) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let sp: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=3));
        let sites = sp.iter().product::<usize>();
        let x = rand_tensor(&mut rng, &[t, c, sp[0], sp[1], sp[2]]);
        let w = rand_tensor(&mut rng, &[co, c, 3]);
        let b = rand_tensor(&mut rng, &[co]);
        let got = kernels::temporal_conv(&x, &w, Some(&b)).unwrap();
        assert_eq!(got.shape(), [t, co, sp[0], sp[1], sp[2]]);
        let mut want = Vec::new();
        for tt in 0..t {
            for o in 0..co {
                for site in 0..sites {
                    let mut acc = b.data()[o];
                    for ci in 0..c {
                        for k in 0..3 {
                            let src = tt as isize + k as isize - 1;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            acc += w.data()[(o * c + ci) * 3 + k] * x.data()[(src as usize * c + ci) * sites + site];
                        }
                    }
                    want.push(acc);
                }
            }
        }
        assert_close(got.data(), &want, "temporal_conv");
    }
}

#[test]
fn attention4d_matches_explicit_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..INSTANCES {
        let t = rng.random_range(1..=4);
        let (c, e, dk) = (rng.random_range(1..=3), rng.random_range(1..=2), rng.random_range(1..=3));
        let sp: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=2));
        let sites = sp.iter().product::<usize>();
        let feats = rand_tensor(&mut rng, &[t, c, sp[0], sp[1], sp[2]]);
        let embed = rand_tensor(&mut rng, &[t, e]);
        let mut params = Params::new();
        for (name, out) in [("q", dk), ("k", dk), ("v", c)] {
            params.insert(format!("st.attn.{name}.w"), rand_tensor(&mut rng, &[c + e, out]));
            params.insert(format!("st.attn.{name}.b"), rand_tensor(&mut rng, &[out]));
        }
        let mut g = Graph::new();
        let fv = g.leaf(feats.clone());
        let ev = g.leaf(embed.clone());
        let att = attention4d(&mut g, &params, fv, ev).unwrap();
        let got = g.value(att.output).clone();

        let p = |n: &str| params.get(n).unwrap().data().to_vec();
        let project = |tok: &[f64], w: &[f64], b: &[f64], out: usize| -> Vec<f64> {
            (0..out).map(|j| b[j] + tok.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>()).collect()
        };
        let mut want = vec![0.0; t * c * sites];
        for site in 0..sites {
            let tokens: Vec<Vec<f64>> = (0..t)
                .map(|tt| {
                    let mut v: Vec<f64> = (0..c).map(|ci| feats.data()[(tt * c + ci) * sites + site]).collect();
                    v.extend_from_slice(&embed.data()[tt * e..(tt + 1) * e]);
                    v
                })
                .collect();
            let q: Vec<Vec<f64>> = tokens.iter().map(|x| project(x, &p("st.attn.q.w"), &p("st.attn.q.b"), dk)).collect();
            let k: Vec<Vec<f64>> = tokens.iter().map(|x| project(x, &p("st.attn.k.w"), &p("st.attn.k.b"), dk)).collect();
            let v: Vec<Vec<f64>> = tokens.iter().map(|x| project(x, &p("st.attn.v.w"), &p("st.attn.v.b"), c)).collect();
            for qt in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|s| q[qt].iter().zip(&k[s]).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = ex.iter().sum();
                for ci in 0..c {
                    want[(qt * c + ci) * sites + site] = (0..t).map(|s| ex[s] / z * v[s][ci]).sum();
                }
            }
        }
        assert_close(got.data(), &want, "attention4d");
    }
}

#[test]
fn covariance_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..INSTANCES {
        let (b, d) = (rng.random_range(1..=9), rng.random_range(1..=6));
        let h = rand_tensor(&mut rng, &[b, d]);
        let got = kernels::covariance(&h).unwrap();
        let x = |i: usize, j: usize| h.data()[i * d + j];
        let mean: Vec<f64> = (0..d).map(|j| (0..b).map(|i| x(i, j)).sum::<f64>() / b as f64).collect();
        let mut want = Vec::new();
        for p in 0..d {
            for q in 0..d {
                want.push((0..b).map(|i| (x(i, p) - mean[p]) * (x(i, q) - mean[q])).sum::<f64>() / b as f64);
            }
        }
        assert_close(got.data(), &want, "covariance");
    }
}

#[test]
fn metrics_match_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let n = rng.random_range(1..=20);
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(1..=12)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(1..=12)).collect();
        let m = metrics(&pred, &truth).unwrap();
        let (mut hit, mut se, mut ae) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let e = pred[i] as f64 - truth[i] as f64;
            if e.abs() <= 1.0 {
                hit += 1.0;
            }
            se += e * e;
            ae += e.abs();
        }
        assert!((m.taa - hit / n as f64).abs() <= TOL);
        assert!((m.mse - se / n as f64).abs() <= TOL);
        assert!((m.mae - ae / n as f64).abs() <= TOL);
        assert!((0.0..=1.0).contains(&m.taa) && m.mse >= 0.0 && m.mae >= 0.0);
    }
}

#[test]
fn metrics_hand_examples() {
    let m = metrics(&[3, 5, 9], &[4, 7, 9]).unwrap();
    assert!((m.taa - 2.0 / 3.0).abs() < 1e-15);
    assert!((m.mse - 5.0 / 3.0).abs() < 1e-15);
    assert!((m.mae - 1.0).abs() < 1e-15);
    assert_eq!(metrics(&[4], &[5]).unwrap().taa, 1.0);
    assert!(metrics(&[], &[]).is_err());
}
