//! Stage 1: sentence-level contrastive alignment of the two encoders.

use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::corpus::sample_sentence;
use crate::error::{contract, Result};
use crate::model::TrrgModel;
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Cosine similarity of two vectors.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return contract("similarity of vectors with different lengths");
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        return contract("similarity of a zero vector");
    }
    Ok(dot / (na * nb))
}

/// `(L_v2t, L_t2v)` for index-aligned image rows `v` and text rows `t`
/// (`[N, d]` each). `L_v2t` normalises each text's similarities over all
/// images, `L_t2v` each image's over all texts.
pub fn infonce<T: Real>(g: &mut Graph<T>, v: Var, t: Var, tau: T) -> Result<(Var, Var)> {
    if !(tau > T::zero()) {
        return contract("InfoNCE temperature must be positive");
    }
    let n = g.shape(v)[0];
    if n < 2 {
        return contract("InfoNCE needs at least two pairs");
    }
    if g.shape(v) != g.shape(t) {
        return contract("image and text batches differ in shape");
    }
    let vn = g.normalize_rows(v)?;
    let tn = g.normalize_rows(t)?;
    let vt = g.transpose(vn)?;
    let s = g.matmul(tn, vt)?;
    let s = g.scale(s, T::one() / tau);
    let diag: Vec<usize> = (0..n).collect();
    let v2t = g.cross_entropy(s, &diag, None)?;
    let st = g.transpose(s)?;
    let t2v = g.cross_entropy(st, &diag, None)?;
    Ok((v2t, t2v))
}

/// Plain-value `(L_v2t, L_t2v)`.
pub fn infonce_values(v: &Tensor<f64>, t: &Tensor<f64>, tau: f64) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let (vv, tv) = (g.constant(v.clone()), g.constant(t.clone()));
    let (a, b) = infonce(&mut g, vv, tv, tau)?;
    Ok((g.value(a).item(), g.value(b).item()))
}

#[derive(Clone, Copy, Debug)]
pub struct PretrainLoss {
    pub v2t: Var,
    pub t2v: Var,
    pub total: Var,
}

/// `L_v2t + L_t2v` over `(patches, sentence ids)` pairs, using the vision
/// pooled token and the text CLS token.
pub fn pretrain_loss<T: Real>(
    model: &TrrgModel,
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    pairs: &[(Tensor<T>, Vec<usize>)],
) -> Result<PretrainLoss> {
    let mut vs = Vec::with_capacity(pairs.len());
    let mut ts = Vec::with_capacity(pairs.len());
    for (patches, ids) in pairs {
        let p = g.constant(patches.clone());
        let v = model.vision.forward(g, ps, p)?;
        vs.push(g.narrow(v, 0, 0, 1)?);
        let t = model.text.forward(g, ps, ids)?;
        ts.push(g.narrow(t, 0, 0, 1)?);
    }
    let v = g.concat(&vs, 0)?;
    let t = g.concat(&ts, 0)?;
    let (v2t, t2v) = infonce(g, v, t, T::of(model.config.temperature as f64))?;
    let total = g.add(v2t, t2v)?;
    Ok(PretrainLoss { v2t, t2v, total })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PretrainStats {
    pub v2t: f64,
    pub t2v: f64,
    pub total: f64,
}

/// Samples one sentence per study, evaluates the contrastive loss and
/// applies one optimiser step. Each batch item is `(pixels, report)`.
pub fn pretrain_step(
    model: &TrrgModel,
    store: &mut ParamStore,
    opt: &mut Adam,
    batch: &[(&[f32], &str)],
    rng: &mut impl Rng,
) -> Result<PretrainStats> {
    let pairs = sample_pairs(model, batch, rng)?;
    let mut g = Graph::new();
    let l = pretrain_loss(model, &mut g, store, &pairs)?;
    g.backward(l.total)?;
    g.accumulate_param_grads(store, 1.0);
    opt.step(store);
    Ok(PretrainStats {
        v2t: g.value(l.v2t).item() as f64,
        t2v: g.value(l.t2v).item() as f64,
        total: g.value(l.total).item() as f64,
    })
}

/// Patchifies each image and encodes one randomly drawn report sentence.
pub fn sample_pairs(model: &TrrgModel, batch: &[(&[f32], &str)], rng: &mut impl Rng) -> Result<Vec<(Tensor<f32>, Vec<usize>)>> {
    let side = model.config.image_size;
    batch
        .iter()
        .map(|(px, report)| {
            let sentence = sample_sentence(report, rng)?;
            Ok((model.patches_of(px, side, side)?, model.vocab.encode(sentence)))
        })
        .collect()
}
