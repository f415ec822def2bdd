use rayon::prelude::*;

use super::linalg::{gemm, linear, linear_backward, View};
use super::{ModelConfig, Parameters};
use crate::dataset::ClassWeights;
use crate::dsp::FilterbankFeature;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-6;
/// Scores are clamped to `[LOSS_CLAMP, 1 - LOSS_CLAMP]` before taking logs.
pub const LOSS_CLAMP: f64 = 1e-7;

/// Flattens the overlapping patch grid, frequency-major.
///
/// Returns `n_patches x patch_dim` values; patch `(fi, ti)` is at row
/// `fi * n_t + ti` and holds the block row by row.
pub fn patchify(cfg: &ModelConfig, feature: &FilterbankFeature) -> Result<Vec<f64>> {
    if !feature.normalized {
        return Err(Error::State("patchify expects a normalized feature".into()));
    }
    let (rows, cols) = cfg.input_shape;
    if feature.values.len() != rows * cols {
        return Err(Error::Shape {
            expected: format!("{rows}x{cols}"),
            actual: format!("{} values", feature.values.len()),
        });
    }
    let (nf, nt) = cfg.grid();
    let (ph, pw) = cfg.patch_size;
    let (sh, sw) = cfg.stride;
    let mut out = Vec::with_capacity(nf * nt * ph * pw);
    for fi in 0..nf {
        for ti in 0..nt {
            for r in 0..ph {
                let row = (fi * sh + r) * cols + ti * sw;
                out.extend_from_slice(&feature.values[row..row + pw]);
            }
        }
    }
    Ok(out)
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, LnCache) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = s;
        for j in 0..d {
            let h = (xr[j] - mean) * s;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(dy: &[f64], d: usize, cache: &LnCache, gain: &[f64], dgain: &mut [f64], dbias: &mut [f64]) -> Vec<f64> {
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let s = cache.rstd[r];
        for j in 0..d {
            dx[r * d + j] = s * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

struct LayerCache {
    ln1: LnCache,
    a: Vec<f64>,
    qkv: Vec<f64>,
    /// `n_heads x T x T` attention probabilities.
    probs: Vec<f64>,
    attn: Vec<f64>,
    ln2: LnCache,
    b: Vec<f64>,
    h: Vec<f64>,
    g: Vec<f64>,
}

struct Cache {
    patches: Vec<f64>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    cls_out: Vec<f64>,
    score: f64,
}

fn check_finite(values: &[f64], layer: impl FnOnce() -> String) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { layer: layer() })
    }
}

fn forward_cached(params: &Parameters, patches: Vec<f64>) -> Result<Cache> {
    let cfg = &params.config;
    let lay = &params.layout;
    let p = &params.data;
    let (n, t, d) = (cfg.n_patches(), cfg.n_tokens(), cfg.embed_dim);
    let (nh, dh, hid) = (cfg.n_heads, cfg.head_dim(), cfg.hidden_dim());
    if patches.len() != n * cfg.patch_dim() {
        return Err(Error::Shape {
            expected: format!("{n}x{} patch values", cfg.patch_dim()),
            actual: format!("{} values", patches.len()),
        });
    }

    let emb = linear(&patches, n, cfg.patch_dim(), &p[lay.patch_w.clone()], &p[lay.patch_b.clone()], d);
    let mut x = Vec::with_capacity(t * d);
    x.extend_from_slice(&p[lay.cls.clone()]);
    x.extend_from_slice(&emb);
    for (xi, pi) in x.iter_mut().zip(&p[lay.pos.clone()]) {
        *xi += pi;
    }
    check_finite(&x, || "patch embedding".into())?;

    let scale = 1.0 / (dh as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (li, l) in lay.layers.iter().enumerate() {
        let (a, ln1) = layer_norm(&x, d, &p[l.ln1_gain.clone()], &p[l.ln1_bias.clone()]);
        let qkv = linear(&a, t, d, &p[l.qkv_w.clone()], &p[l.qkv_b.clone()], 3 * d);
        let mut probs = vec![0.0; nh * t * t];
        let mut attn = vec![0.0; t * d];
        for h in 0..nh {
            let s = &mut probs[h * t * t..(h + 1) * t * t];
            let q = View::rows(&qkv, h * dh, 3 * d);
            let kt = View::t(&qkv, d + h * dh, 3 * d);
            gemm(t, dh, t, scale, q, kt, 0.0, s, 0, t);
            for row in s.chunks_exact_mut(t) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                let inv = 1.0 / sum;
                row.iter_mut().for_each(|v| *v *= inv);
            }
            let v = View::rows(&qkv, 2 * d + h * dh, 3 * d);
            gemm(t, t, dh, 1.0, View::rows(s, 0, t), v, 0.0, &mut attn, h * dh, d);
        }
        let y = linear(&attn, t, d, &p[l.proj_w.clone()], &p[l.proj_b.clone()], d);
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi += yi;
        }
        check_finite(&x, || format!("block {li} attention"))?;

        let (b, ln2) = layer_norm(&x, d, &p[l.ln2_gain.clone()], &p[l.ln2_bias.clone()]);
        let h = linear(&b, t, d, &p[l.fc1_w.clone()], &p[l.fc1_b.clone()], hid);
        let g: Vec<f64> = h.iter().map(|&v| gelu(v)).collect();
        let z = linear(&g, t, hid, &p[l.fc2_w.clone()], &p[l.fc2_b.clone()], d);
        for (xi, zi) in x.iter_mut().zip(&z) {
            *xi += zi;
        }
        check_finite(&x, || format!("block {li} mlp"))?;
        layers.push(LayerCache {
            ln1,
            a,
            qkv,
            probs,
            attn,
            ln2,
            b,
            h,
            g,
        });
    }

    // only the classification token reaches the head
    let (cls_out, lnf) = layer_norm(&x[..d], d, &p[lay.lnf_gain.clone()], &p[lay.lnf_bias.clone()]);
    let logit = p[lay.head_b.start] + cls_out.iter().zip(&p[lay.head_w.clone()]).map(|(a, b)| a * b).sum::<f64>();
    check_finite(&[logit], || "head".into())?;
    Ok(Cache {
        patches,
        layers,
        lnf,
        cls_out,
        score: sigmoid(logit),
    })
}

/// Score in (0, 1) for a normalized feature.
pub fn forward(params: &Parameters, feature: &FilterbankFeature) -> Result<f64> {
    Ok(forward_cached(params, patchify(&params.config, feature)?)?.score)
}

/// Score from pre-extracted patch vectors (`n_patches x patch_dim`).
pub fn forward_patches(params: &Parameters, patches: &[f64]) -> Result<f64> {
    Ok(forward_cached(params, patches.to_vec())?.score)
}

/// Intermediate values exposed for inspection.
#[derive(Debug, Clone)]
pub struct Trace {
    pub score: f64,
    /// Per layer, `n_heads x T x T` row-stochastic attention matrices.
    pub attention: Vec<Vec<f64>>,
}

pub fn forward_trace(params: &Parameters, feature: &FilterbankFeature) -> Result<Trace> {
    let cache = forward_cached(params, patchify(&params.config, feature)?)?;
    Ok(Trace {
        score: cache.score,
        attention: cache.layers.into_iter().map(|l| l.probs).collect(),
    })
}

/// Class-weighted binary cross-entropy.
pub fn loss(score: f64, label: f64, w_pos: f64, w_neg: f64) -> f64 {
    let s = score.clamp(LOSS_CLAMP, 1.0 - LOSS_CLAMP);
    -(w_pos * label * s.ln() + w_neg * (1.0 - label) * (1.0 - s).ln())
}

/// Loss, score and exact gradient of the loss for one sample.
///
/// The head gradient is `w * (score - label)`, the derivative of the
/// unclamped loss with respect to the logit.
pub fn backward(
    params: &Parameters,
    feature: &FilterbankFeature,
    label: f64,
    weights: ClassWeights,
) -> Result<(f64, f64, Parameters)> {
    let cache = forward_cached(params, patchify(&params.config, feature)?)?;
    let mut grads = params.zeros_like();
    let (l, s) = backward_into(params, &cache, label, weights, &mut grads);
    Ok((l, s, grads))
}

fn backward_into(params: &Parameters, cache: &Cache, label: f64, weights: ClassWeights, grads: &mut Parameters) -> (f64, f64) {
    let cfg = &params.config;
    let lay = &params.layout;
    let p = &params.data;
    let (n, t, d) = (cfg.n_patches(), cfg.n_tokens(), cfg.embed_dim);
    let (nh, dh, hid) = (cfg.n_heads, cfg.head_dim(), cfg.hidden_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let score = cache.score;
    let w = if label > 0.5 { weights.pos } else { weights.neg };
    let loss_value = loss(score, label, weights.pos, weights.neg);
    let g = &mut grads.data;

    let dlogit = w * (score - label);
    g[lay.head_b.start] += dlogit;
    for (gw, f) in g[lay.head_w.clone()].iter_mut().zip(&cache.cls_out) {
        *gw += dlogit * f;
    }
    let dcls: Vec<f64> = p[lay.head_w.clone()].iter().map(|hw| dlogit * hw).collect();
    let (mut dgain, mut dbias) = (vec![0.0; d], vec![0.0; d]);
    let dx_cls = layer_norm_backward(&dcls, d, &cache.lnf, &p[lay.lnf_gain.clone()], &mut dgain, &mut dbias);
    add(&mut g[lay.lnf_gain.clone()], &dgain);
    add(&mut g[lay.lnf_bias.clone()], &dbias);

    let mut dx = vec![0.0; t * d];
    dx[..d].copy_from_slice(&dx_cls);

    for (l, c) in lay.layers.iter().zip(&cache.layers).rev() {
        // mlp sub-block
        let mut dw = vec![0.0; hid * d];
        let mut db = vec![0.0; d];
        let dg = linear_backward(&c.g, &dx, t, hid, d, &p[l.fc2_w.clone()], &mut dw, &mut db);
        add(&mut g[l.fc2_w.clone()], &dw);
        add(&mut g[l.fc2_b.clone()], &db);
        let dh_pre: Vec<f64> = dg.iter().zip(&c.h).map(|(gv, hv)| gv * gelu_grad(*hv)).collect();
        let mut dw = vec![0.0; d * hid];
        let mut db = vec![0.0; hid];
        let dbn = linear_backward(&c.b, &dh_pre, t, d, hid, &p[l.fc1_w.clone()], &mut dw, &mut db);
        add(&mut g[l.fc1_w.clone()], &dw);
        add(&mut g[l.fc1_b.clone()], &db);
        let (mut dgain, mut dbias) = (vec![0.0; d], vec![0.0; d]);
        let dln2 = layer_norm_backward(&dbn, d, &c.ln2, &p[l.ln2_gain.clone()], &mut dgain, &mut dbias);
        add(&mut g[l.ln2_gain.clone()], &dgain);
        add(&mut g[l.ln2_bias.clone()], &dbias);
        add(&mut dx, &dln2);

        // attention sub-block
        let mut dw = vec![0.0; d * d];
        let mut db = vec![0.0; d];
        let dattn = linear_backward(&c.attn, &dx, t, d, d, &p[l.proj_w.clone()], &mut dw, &mut db);
        add(&mut g[l.proj_w.clone()], &dw);
        add(&mut g[l.proj_b.clone()], &db);
        let mut dqkv = vec![0.0; t * 3 * d];
        let mut dp = vec![0.0; t * t];
        for h in 0..nh {
            let probs = &c.probs[h * t * t..(h + 1) * t * t];
            let d_o = View::rows(&dattn, h * dh, d);
            gemm(t, dh, t, 1.0, d_o, View::t(&c.qkv, 2 * d + h * dh, 3 * d), 0.0, &mut dp, 0, t);
            gemm(t, t, dh, 1.0, View::t(probs, 0, t), d_o, 0.0, &mut dqkv, 2 * d + h * dh, 3 * d);
            for (prow, dprow) in probs.chunks_exact(t).zip(dp.chunks_exact_mut(t)) {
                let dot: f64 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                for (dv, pv) in dprow.iter_mut().zip(prow) {
                    *dv = pv * (*dv - dot);
                }
            }
            let k = View::rows(&c.qkv, d + h * dh, 3 * d);
            gemm(t, t, dh, scale, View::rows(&dp, 0, t), k, 0.0, &mut dqkv, h * dh, 3 * d);
            let q = View::rows(&c.qkv, h * dh, 3 * d);
            gemm(t, t, dh, scale, View::t(&dp, 0, t), q, 0.0, &mut dqkv, d + h * dh, 3 * d);
        }
        let mut dw = vec![0.0; d * 3 * d];
        let mut db = vec![0.0; 3 * d];
        let da = linear_backward(&c.a, &dqkv, t, d, 3 * d, &p[l.qkv_w.clone()], &mut dw, &mut db);
        add(&mut g[l.qkv_w.clone()], &dw);
        add(&mut g[l.qkv_b.clone()], &db);
        let (mut dgain, mut dbias) = (vec![0.0; d], vec![0.0; d]);
        let dln1 = layer_norm_backward(&da, d, &c.ln1, &p[l.ln1_gain.clone()], &mut dgain, &mut dbias);
        add(&mut g[l.ln1_gain.clone()], &dgain);
        add(&mut g[l.ln1_bias.clone()], &dbias);
        add(&mut dx, &dln1);
    }

    add(&mut g[lay.pos.clone()], &dx);
    add(&mut g[lay.cls.clone()], &dx[..d]);
    let mut dw = vec![0.0; cfg.patch_dim() * d];
    let mut db = vec![0.0; d];
    linear_backward(&cache.patches, &dx[d..], n, cfg.patch_dim(), d, &p[lay.patch_w.clone()], &mut dw, &mut db);
    add(&mut g[lay.patch_w.clone()], &dw);
    add(&mut g[lay.patch_b.clone()], &db);
    (loss_value, score)
}

fn add(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Scores a batch of normalized features in parallel, preserving order.
pub fn score_features(params: &Parameters, features: &[FilterbankFeature]) -> Result<Vec<f64>> {
    features.par_iter().map(|f| forward(params, f)).collect()
}
