//! The release gradient-check suite: every differentiable op, every
//! trainable component and both training objectives, in `f64` at micro
//! dimensions.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::pretrain_loss;
use crate::autodiff::{Graph, OpKind, Var};
use crate::config::{ModelConfig, Variant};
use crate::corpus::{generate_corpus, GeneratorConfig};
use crate::error::Result;
use crate::gradcheck::{grad_check_params, grad_check_with, CheckOptions};
use crate::interaction::dc_loss;
use crate::model::TrrgModel;
use crate::nn::causal_mask;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-3;
const EPSILON: f64 = 1e-6;
/// Coordinates sampled per parameter tensor in component checks.
const COORDS_PER_TENSOR: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckEntry {
    pub name: String,
    pub max_error: f64,
    pub coords: usize,
}

impl CheckEntry {
    pub fn passed(&self) -> bool {
        self.max_error < TOLERANCE
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `Σ (out ⊙ w)` with a fixed random `w`, so every output coordinate
/// carries a distinct adjoint.
fn weighted(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(g.shape(out), &mut rng));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>;

fn op_cases() -> Vec<(&'static str, Tensor<f64>, OpFn)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let a34 = random(&[3, 4], &mut rng);
    let c34 = random(&[3, 4], &mut rng);
    let b45 = random(&[4, 5], &mut rng);
    let b245 = random(&[2, 4, 5], &mut rng);
    let x234 = random(&[2, 3, 4], &mut rng);
    let k54 = random(&[5, 4], &mut rng);
    let v53 = random(&[5, 3], &mut rng);
    let pos = a34.map(|v| v.abs() + 0.5);
    let ids = [3usize, 0, 3, 5];
    let targets = [1usize, 3, 0];
    let mask: Vec<bool> = (0..12).map(|i| i % 4 == 3).collect();

    let mut cases: Vec<(&'static str, Tensor<f64>, OpFn)> = Vec::new();
    macro_rules! case {
        ($name:expr, $x:expr, $f:expr) => {
            cases.push(($name, $x, Box::new($f)));
        };
    }
    let c = c34.clone();
    case!("add", a34.clone(), move |g, x| {
        let k = g.constant(c.clone());
        let y = g.add(x, k)?;
        weighted(g, y, 1)
    });
    let c = c34.clone();
    case!("sub", a34.clone(), move |g, x| {
        let k = g.constant(c.clone());
        let y = g.sub(k, x)?;
        weighted(g, y, 2)
    });
    case!("mul", a34.clone(), |g, x| {
        let y = g.mul(x, x)?;
        weighted(g, y, 3)
    });
    let c = c34.clone();
    case!("add_bias", random(&[4], &mut rng), move |g, b| {
        let k = g.constant(c.clone());
        let y = g.add_bias(k, b)?;
        weighted(g, y, 4)
    });
    case!("scale", a34.clone(), |g, x| {
        let y = g.scale(x, -1.7);
        weighted(g, y, 5)
    });
    let c = c34.clone();
    case!("scale_by", Tensor::scalar(0.8), move |g, s| {
        let k = g.constant(c.clone());
        let y = g.scale_by(k, s)?;
        weighted(g, y, 6)
    });
    let c = c34.clone();
    case!("scale_rows", random(&[3], &mut rng), move |g, s| {
        let k = g.constant(c.clone());
        let y = g.scale_rows(k, s)?;
        weighted(g, y, 7)
    });
    case!("recip", pos.clone(), |g, x| {
        let y = g.recip(x)?;
        weighted(g, y, 8)
    });
    case!("gelu", a34.map(|v| 3.0 * v), |g, x| {
        let y = g.gelu(x);
        weighted(g, y, 9)
    });
    let b = b45.clone();
    case!("matmul", a34.clone(), move |g, x| {
        let k = g.constant(b.clone());
        let y = g.matmul(x, k)?;
        weighted(g, y, 10)
    });
    let a = a34.clone();
    case!("matmul_rhs", b45.clone(), move |g, x| {
        let k = g.constant(a.clone());
        let y = g.matmul(k, x)?;
        weighted(g, y, 11)
    });
    let b = b245.clone();
    case!("matmul_batched", x234.clone(), move |g, x| {
        let k = g.constant(b.clone());
        let y = g.matmul(x, k)?;
        weighted(g, y, 12)
    });
    case!("transpose", x234.clone(), |g, x| {
        let y = g.transpose(x)?;
        weighted(g, y, 13)
    });
    case!("reshape", a34.clone(), |g, x| {
        let y = g.reshape(x, &[2, 6])?;
        weighted(g, y, 14)
    });
    let c = c34.clone();
    case!("concat", a34.clone(), move |g, x| {
        let k = g.constant(c.clone());
        let y = g.concat(&[k, x, x], 1)?;
        weighted(g, y, 15)
    });
    case!("narrow", x234.clone(), |g, x| {
        let y = g.narrow(x, 1, 1, 2)?;
        weighted(g, y, 16)
    });
    case!("sum", a34.clone(), |g, x| {
        let y = g.mul(x, x)?;
        Ok(g.sum(y))
    });
    case!("mean", a34.clone(), |g, x| {
        let y = g.mul(x, x)?;
        Ok(g.mean(y))
    });
    case!("sum_axis", x234.clone(), |g, x| {
        let y = g.sum_axis(x, 1)?;
        weighted(g, y, 17)
    });
    case!("mean_axis", x234.clone(), |g, x| {
        let y = g.mean_axis(x, 0)?;
        weighted(g, y, 18)
    });
    case!("l2_norm", a34.clone(), |g, x| {
        let y = g.l2_norm(x)?;
        weighted(g, y, 19)
    });
    case!("softmax", a34.clone(), |g, x| {
        let y = g.softmax(x, 1)?;
        weighted(g, y, 20)
    });
    case!("softmax_axis0", x234.clone(), |g, x| {
        let y = g.softmax(x, 0)?;
        weighted(g, y, 21)
    });
    let m = mask.clone();
    case!("mask_fill", a34.clone(), move |g, x| {
        let y = g.mask_fill(x, &m)?;
        let y = g.softmax(y, 1)?;
        weighted(g, y, 22)
    });
    let (gm, bt) = (random(&[4], &mut rng), random(&[4], &mut rng));
    case!("layer_norm", a34.clone(), move |g, x| {
        let (gv, bv) = (g.constant(gm.clone()), g.constant(bt.clone()));
        let y = g.layer_norm(x, gv, bv)?;
        weighted(g, y, 23)
    });
    let a = a34.clone();
    case!("layer_norm_gamma", random(&[4], &mut rng), move |g, gm| {
        let x = g.constant(a.clone());
        let bv = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gm, bv)?;
        weighted(g, y, 24)
    });
    case!("embedding", random(&[6, 3], &mut rng), move |g, t| {
        let y = g.embedding(t, &ids)?;
        weighted(g, y, 25)
    });
    case!("cross_entropy", a34.map(|v| 2.0 * v), move |g, x| g.cross_entropy(x, &targets, None));
    let (k, v) = (k54.clone(), v53.clone());
    case!("attention", a34.clone(), move |g, q| {
        let (kv, vv) = (g.constant(k.clone()), g.constant(v.clone()));
        let y = g.scaled_dot_attention(q, kv, vv, None)?;
        weighted(g, y, 26)
    });
    let v = v53.clone();
    case!("attention_causal", random(&[5, 4], &mut rng), move |g, q| {
        let vv = g.constant(v.clone());
        let m = causal_mask(5);
        let y = g.scaled_dot_attention(q, q, vv, Some(&m))?;
        weighted(g, y, 27)
    });
    let c = c34.clone();
    case!("cosine_rows", a34.clone(), move |g, x| {
        let k = g.constant(c.clone());
        let y = g.cosine_rows(x, k)?;
        weighted(g, y, 28)
    });
    case!("normalize_rows", a34.clone(), |g, x| {
        let y = g.normalize_rows(x)?;
        weighted(g, y, 29)
    });
    cases
}

fn micro_setup(variant: Variant) -> Result<(TrrgModel, ParamStore)> {
    TrrgModel::new(&ModelConfig {
        variant,
        ..ModelConfig::micro()
    })
}

fn param_check<F>(
    name: &str,
    store: &ParamStore<f64>,
    ids: &[ParamId],
    fault: Option<(OpKind, f64)>,
    f: F,
) -> Result<CheckEntry>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let opts = CheckOptions {
        epsilon: EPSILON,
        max_coords: Some(COORDS_PER_TENSOR),
        fault,
    };
    let r = grad_check_params(store, ids, f, opts)?;
    Ok(CheckEntry {
        name: name.to_string(),
        max_error: r.max_error,
        coords: r.coords,
    })
}

fn prefixed(store: &ParamStore<f64>, prefixes: &[&str]) -> Vec<ParamId> {
    prefixes.iter().flat_map(|p| store.ids_with_prefix(p)).collect()
}

fn component_cases(fault: Option<(OpKind, f64)>) -> Result<Vec<CheckEntry>> {
    let (model, store32) = micro_setup(Variant::Full)?;
    let store = store32.cast::<f64>();
    let studies = generate_corpus(2, 17, &GeneratorConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut out = Vec::new();

    // Stage 1: both encoders under the contrastive objective.
    let batch: Vec<(&[f32], &str)> = studies.iter().map(|s| (s.pixels.as_slice(), s.report.as_str())).collect();
    let pairs: Vec<(Tensor<f64>, Vec<usize>)> = crate::align::sample_pairs(&model, &batch, &mut rng)?
        .into_iter()
        .map(|(p, ids)| (p.cast(), ids))
        .collect();
    let contrastive = |g: &mut Graph<f64>, ps: &ParamStore<f64>| Ok(pretrain_loss(&model, g, ps, &pairs)?.total);
    out.push(param_check("vision_encoder", &store, &prefixed(&store, &["vision."]), fault, contrastive)?);
    out.push(param_check("text_encoder", &store, &prefixed(&store, &["text."]), fault, contrastive)?);

    // Stage 2 on one study.
    let study = &studies[0];
    let bank = model.clue_bank(&store32, &mut rng)?;
    let features = model.features(&store32, &study.pixels, study.height, study.width)?;
    let input = model.prepare(features, Some(&bank), Some(&study.report))?;
    let total = |g: &mut Graph<f64>, ps: &ParamStore<f64>| Ok(model.finetune_loss(g, ps, &input)?.total);
    out.push(param_check("visual_mapper", &store, &prefixed(&store, &["mapper."]), fault, total)?);
    out.push(param_check("clue_projection", &store, &prefixed(&store, &["clue_proj."]), fault, total)?);
    out.push(param_check(
        "interaction_streams",
        &store,
        &prefixed(&store, &["interaction.visual", "interaction.clue"]),
        fault,
        total,
    )?);
    out.push(param_check(
        "learnable_queries",
        &store,
        &prefixed(&store, &["interaction.queries", "interaction.query_self"]),
        fault,
        total,
    )?);
    out.push(param_check(
        "query_readers",
        &store,
        &prefixed(&store, &["interaction.read_"]),
        fault,
        total,
    )?);
    let consistency = |g: &mut Graph<f64>, ps: &ParamStore<f64>| {
        let p = model.prefix(g, ps, &input)?;
        dc_loss(g, p.ev, p.ec.expect("full variant has clue tokens"))
    };
    out.push(param_check("consistency_loss", &store, &prefixed(&store, &["interaction."]), fault, consistency)?);
    let lm = |g: &mut Graph<f64>, ps: &ParamStore<f64>| Ok(model.finetune_loss(g, ps, &input)?.lm);
    out.push(param_check("report_decoder", &store, &prefixed(&store, &["decoder."]), fault, lm)?);
    let trainable = model.stage2_params(&store32);
    out.push(param_check("finetune_total_loss", &store, &trainable, fault, total)?);
    Ok(out)
}

/// Runs every check; `fault` corrupts one adjoint rule for negative
/// controls.
pub fn run_suite(fault: Option<(OpKind, f64)>) -> Result<Vec<CheckEntry>> {
    let mut out = Vec::new();
    for (name, x, f) in op_cases() {
        let opts = CheckOptions {
            epsilon: EPSILON,
            max_coords: None,
            fault,
        };
        let err = grad_check_with(f, &x, opts)?;
        out.push(CheckEntry {
            name: name.to_string(),
            max_error: err,
            coords: x.numel(),
        });
    }
    out.extend(component_cases(fault)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let report = run_suite(None).unwrap();
        assert!(report.len() >= 10);
        for e in &report {
            assert!(e.passed(), "{} failed with {:.3e}", e.name, e.max_error);
        }
    }

    #[test]
    fn corrupted_softmax_is_caught() {
        let report = run_suite(Some((OpKind::Softmax, 1.3))).unwrap();
        let failed: Vec<&str> = report.iter().filter(|e| !e.passed()).map(|e| e.name.as_str()).collect();
        assert!(failed.contains(&"softmax"));
        assert!(failed.contains(&"attention"));
        assert!(!failed.contains(&"matmul"));
    }
}
