//! Training drivers: stage-1 alignment, stage-2 fine-tuning, generation,
//! evaluation and ablation sweeps. Every function here is deterministic
//! given the config seed; the rayon pool is only used for per-study work
//! whose results do not depend on scheduling.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use anyhow::{bail, ensure, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use trrg_core::align::pretrain_step;
use trrg_core::clue::ClueBank;
use trrg_core::config::Variant;
use trrg_core::corpus::{SyntheticStudy, DISEASES};
use trrg_core::decoder::GenerationConfig;
use trrg_core::metrics::{self, MetricsSummary};
use trrg_core::model::{StudyFeatures, StudyInput, TrrgModel, ENCODER_PREFIXES};
use trrg_core::optim::Adam;
use trrg_core::{ModelConfig, ParamStore, Tensor};

use crate::checkpoint::Checkpoint;
use crate::formats::{ClueRecord, Hypothesis};

/// RNG streams carved from the config seed.
const PRETRAIN_STREAM: u64 = 1;
const FINETUNE_STREAM: u64 = 2;
const INFERENCE_STREAM: u64 = 3;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A trained model together with its parameters.
pub struct Trained {
    pub model: TrrgModel,
    pub store: ParamStore,
}

impl Trained {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.model.config, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (model, mut store) = TrrgModel::new(&ck.config)?;
        ck.restore_all(&mut store)?;
        Ok(Self { model, store })
    }
}

pub struct PretrainRun {
    pub trained: Trained,
    /// Loss of every optimiser step.
    pub losses: Vec<f64>,
    /// Mean step loss of the last epoch.
    pub final_epoch_loss: f64,
}

/// Stage 1: contrastive alignment of the vision and text encoders.
pub fn pretrain(cfg: &ModelConfig, studies: &[SyntheticStudy], epochs: usize) -> Result<PretrainRun> {
    ensure!(studies.len() >= 2, "pretraining needs at least two studies, got {}", studies.len());
    let (model, mut store) = TrrgModel::new(cfg)?;
    let mut opt = Adam::new(model.config.lr);
    let mut rng = rng_for(model.config.seed, PRETRAIN_STREAM);
    let mut order: Vec<usize> = (0..studies.len()).collect();
    let mut losses = Vec::new();
    let mut final_epoch_loss = f64::NAN;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(model.config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<(&[f32], &str)> = chunk
                .iter()
                .map(|&i| (studies[i].pixels.as_slice(), studies[i].report.as_str()))
                .collect();
            let s = pretrain_step(&model, &mut store, &mut opt, &batch, &mut rng)?;
            losses.push(s.total);
            sum += s.total;
            steps += 1;
        }
        final_epoch_loss = sum / steps.max(1) as f64;
        log::info!("pretrain epoch {}/{epochs}: mean loss {final_epoch_loss:.4}", epoch + 1);
    }
    Ok(PretrainRun {
        trained: Trained { model, store },
        losses,
        final_epoch_loss,
    })
}

/// Per-step stage-2 losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneRow {
    pub step: usize,
    pub lm: f64,
    pub dc: f64,
    pub total: f64,
}

pub struct FinetuneRun {
    pub trained: Trained,
    pub rows: Vec<FinetuneRow>,
}

/// Frozen vision features of every study, computed on the rayon pool.
pub fn extract_features(model: &TrrgModel, store: &ParamStore, studies: &[SyntheticStudy]) -> Result<Vec<StudyFeatures>> {
    studies
        .par_iter()
        .map(|s| {
            model
                .features(store, &s.pixels, s.height, s.width)
                .with_context(|| format!("study {}", s.id))
        })
        .collect()
}

fn encoder_snapshot(store: &ParamStore) -> Vec<(String, Tensor<f32>)> {
    TrrgModel::encoder_params(store)
        .into_iter()
        .map(|id| (store.param(id).name.clone(), store.value(id).clone()))
        .collect()
}

/// Names of encoder tensors whose bits differ from `snapshot`.
pub fn encoder_drift(store: &ParamStore, snapshot: &[(String, Tensor<f32>)]) -> Vec<String> {
    snapshot
        .iter()
        .filter(|(name, t)| {
            let now = store.id(name).map(|id| store.value(id));
            !matches!(now, Ok(v) if v.shape() == t.shape()
                && v.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()))
        })
        .map(|(n, _)| n.clone())
        .collect()
}

/// Stage 2: trains the variant's mapper, interaction block and decoder on
/// top of the frozen encoders taken from `init`.
pub fn finetune(cfg: &ModelConfig, init: &Checkpoint, studies: &[SyntheticStudy]) -> Result<FinetuneRun> {
    ensure!(!studies.is_empty(), "fine-tuning needs at least one study");
    let (model, mut store) = TrrgModel::new(cfg)?;
    init.restore(&mut store, &ENCODER_PREFIXES)
        .context("loading encoders from the stage-1 checkpoint")?;
    let frozen = encoder_snapshot(&store);
    model.prepare_stage2(&mut store);

    let features = extract_features(&model, &store, studies)?;
    let mut opt = Adam::new(model.config.lr);
    let mut rng = rng_for(model.config.seed, FINETUNE_STREAM);
    let mut order: Vec<usize> = (0..studies.len()).collect();
    let mut rows = Vec::new();
    for epoch in 0..model.config.finetune_epochs {
        let bank = match model.variant().uses_clues() {
            true => Some(model.clue_bank(&store, &mut rng)?),
            false => None,
        };
        let inputs: Vec<StudyInput> = features
            .iter()
            .zip(studies)
            .map(|(f, s)| model.prepare(f.clone(), bank.as_ref(), Some(&s.report)))
            .collect::<trrg_core::Result<_>>()?;
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let start = rows.len();
        for chunk in order.chunks(model.config.batch_size) {
            let batch: Vec<&StudyInput> = chunk.iter().map(|&i| &inputs[i]).collect();
            let s = model.finetune_step(&mut store, &mut opt, &batch)?;
            sum += s.total;
            rows.push(FinetuneRow {
                step: rows.len(),
                lm: s.lm,
                dc: s.dc,
                total: s.total,
            });
        }
        log::info!(
            "finetune {} epoch {}/{}: mean loss {:.4}",
            model.variant().label(),
            epoch + 1,
            model.config.finetune_epochs,
            sum / (rows.len() - start).max(1) as f64
        );
    }

    let drift = encoder_drift(&store, &frozen);
    ensure!(drift.is_empty(), "frozen encoder parameters changed: {}", drift.join(", "));
    Ok(FinetuneRun {
        trained: Trained { model, store },
        rows,
    })
}

/// The clue bank used at inference: one fixed prompt draw per seed.
pub fn inference_bank(t: &Trained) -> Result<Option<ClueBank>> {
    if !t.model.variant().uses_clues() {
        return Ok(None);
    }
    let mut rng = rng_for(t.model.config.seed, INFERENCE_STREAM);
    Ok(Some(t.model.clue_bank(&t.store, &mut rng)?))
}

pub struct Generation {
    pub hypotheses: Vec<Hypothesis>,
    pub clues: Vec<ClueRecord>,
}

/// Generates one report per study.
pub fn generate(t: &Trained, studies: &[SyntheticStudy], gen: &GenerationConfig) -> Result<Generation> {
    let bank = inference_bank(t)?;
    let features = extract_features(&t.model, &t.store, studies)?;
    let mut hypotheses = Vec::with_capacity(studies.len());
    let mut clues = Vec::with_capacity(studies.len());
    for (s, f) in studies.iter().zip(features) {
        let input = t.model.prepare(f, bank.as_ref(), None)?;
        let text = t
            .model
            .generate_text(&t.store, &input, gen)
            .with_context(|| format!("generating study {}", s.id))?;
        let (names, weights) = match &input.selection {
            Some(sel) => (
                sel.indices.iter().map(|&i| DISEASES[i].to_string()).collect(),
                sel.indices.iter().map(|&i| sel.weights[i]).collect(),
            ),
            None => (Vec::new(), Vec::new()),
        };
        clues.push(ClueRecord {
            id: s.id.clone(),
            clues: names,
            weights,
        });
        hypotheses.push(Hypothesis {
            id: s.id.clone(),
            hypothesis: text,
        });
    }
    Ok(Generation { hypotheses, clues })
}

/// Scores hypotheses against the reports of `refs`, matched by id.
pub fn evaluate(refs: &[SyntheticStudy], hyps: &[Hypothesis]) -> Result<MetricsSummary> {
    ensure!(!hyps.is_empty(), "hypothesis file is empty");
    let ref_ids: BTreeSet<&str> = refs.iter().map(|s| s.id.as_str()).collect();
    let hyp_ids: BTreeSet<&str> = hyps.iter().map(|h| h.id.as_str()).collect();
    ensure!(hyp_ids.len() == hyps.len(), "hypothesis file repeats an id");
    let missing: Vec<&str> = ref_ids.difference(&hyp_ids).copied().collect();
    let unknown: Vec<&str> = hyp_ids.difference(&ref_ids).copied().collect();
    if !missing.is_empty() || !unknown.is_empty() {
        let mut msg = String::from("reference and hypothesis ids differ");
        if !missing.is_empty() {
            msg.push_str(&format!("; missing hypotheses: {}", missing.join(", ")));
        }
        if !unknown.is_empty() {
            msg.push_str(&format!("; no reference for: {}", unknown.join(", ")));
        }
        bail!(msg);
    }
    let by_id: std::collections::HashMap<&str, &str> =
        hyps.iter().map(|h| (h.id.as_str(), h.hypothesis.as_str())).collect();
    let references: Vec<(String, String)> = refs.iter().map(|s| (s.id.clone(), s.report.clone())).collect();
    let hypotheses: Vec<String> = refs.iter().map(|s| by_id[s.id.as_str()].to_string()).collect();
    Ok(metrics::evaluate(&references, &hypotheses)?)
}

/// What an ablation sweep varies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Sweep {
    Component,
    TopK(Vec<usize>),
    Queries(Vec<usize>),
}

#[derive(Debug, thiserror::Error)]
#[error("unknown sweep `{0}`; expected `component`, `k=<values>` or `L=<values>`")]
pub struct SweepError(String);

fn parse_values(spec: &str) -> Option<Vec<usize>> {
    if let Some((a, b)) = spec.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse().ok()?, b.trim().parse().ok()?);
        return (a <= b).then(|| (a..=b).collect());
    }
    spec.split(',').map(|v| v.trim().parse().ok()).collect()
}

impl FromStr for Sweep {
    type Err = SweepError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let err = || SweepError(s.to_string());
        if s == "component" {
            return Ok(Sweep::Component);
        }
        let (key, values) = s.split_once('=').ok_or_else(err)?;
        let values = parse_values(values).filter(|v| !v.is_empty() && !v.contains(&0)).ok_or_else(err)?;
        match key {
            "k" => Ok(Sweep::TopK(values)),
            "L" | "l" => Ok(Sweep::Queries(values)),
            _ => Err(err()),
        }
    }
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        match self {
            Sweep::Component => f.write_str("component"),
            Sweep::TopK(v) => write!(f, "k={}", join(v)),
            Sweep::Queries(v) => write!(f, "L={}", join(v)),
        }
    }
}

impl Sweep {
    /// Fine-tuning configs of every row, derived from `base`.
    pub fn configs(&self, base: &ModelConfig) -> Vec<ModelConfig> {
        match self {
            Sweep::Component => Variant::ALL
                .iter()
                .map(|&variant| ModelConfig { variant, ..base.clone() })
                .collect(),
            Sweep::TopK(ks) => ks.iter().map(|&top_k| ModelConfig { top_k, ..base.clone() }).collect(),
            Sweep::Queries(ls) => ls.iter().map(|&queries| ModelConfig { queries, ..base.clone() }).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: &'static str,
    pub k: usize,
    pub queries: usize,
    pub metrics: MetricsSummary,
}

pub const ABLATION_HEADER: [&str; 12] = [
    "variant", "k", "L", "bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider", "ce_precision", "ce_recall", "ce_f1",
];

impl AblationRow {
    pub fn fields(&self) -> Vec<String> {
        let m = &self.metrics;
        let mut out = vec![self.variant.to_string(), self.k.to_string(), self.queries.to_string()];
        out.extend(
            [m.bleu1, m.bleu2, m.bleu3, m.bleu4, m.rouge_l, m.cider, m.ce_precision, m.ce_recall, m.ce_f1]
                .iter()
                .map(|v| format!("{v:.6}")),
        );
        out
    }
}

/// Fine-tunes, generates and scores one sweep row.
pub fn run_row(cfg: &ModelConfig, stage1: &Checkpoint, train: &[SyntheticStudy], test: &[SyntheticStudy]) -> Result<AblationRow> {
    let run = finetune(cfg, stage1, train)?;
    let gen = generate(&run.trained, test, &GenerationConfig::default())?;
    let metrics = evaluate(test, &gen.hypotheses)?;
    Ok(AblationRow {
        variant: cfg.variant.label(),
        k: cfg.top_k,
        queries: cfg.queries,
        metrics,
    })
}

/// Every row of `sweep`, sharing one stage-1 checkpoint.
pub fn ablate(
    sweep: &Sweep,
    base: &ModelConfig,
    stage1: &Checkpoint,
    train: &[SyntheticStudy],
    test: &[SyntheticStudy],
) -> Result<Vec<AblationRow>> {
    sweep
        .configs(base)
        .iter()
        .map(|cfg| {
            let row = run_row(cfg, stage1, train, test)?;
            log::info!(
                "{} k={} L={}: bleu4 {:.4} ce_f1 {:.4}",
                row.variant,
                row.k,
                row.queries,
                row.metrics.bleu4,
                row.metrics.ce_f1
            );
            Ok(row)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use trrg_core::corpus::{generate_corpus, GeneratorConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            d: 8,
            d_llm: 8,
            patch_size: 16,
            queries: 2,
            heads: 2,
            encoder_heads: 2,
            encoder_depth: 1,
            decoder_depth: 1,
            ffn_mult: 2,
            batch_size: 4,
            finetune_epochs: 1,
            lr: 1e-3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn sweep_specs() {
        assert_eq!("component".parse::<Sweep>().unwrap(), Sweep::Component);
        assert_eq!("k=1..5".parse::<Sweep>().unwrap(), Sweep::TopK(vec![1, 2, 3, 4, 5]));
        assert_eq!("L=4,8,16,32".parse::<Sweep>().unwrap(), Sweep::Queries(vec![4, 8, 16, 32]));
        for bad in ["", "depth=2", "k=", "k=3..1", "k=0,1", "L=a"] {
            assert!(bad.parse::<Sweep>().is_err(), "{bad}");
        }
        for s in ["component", "k=1,2,3,4,5", "L=4,8"] {
            assert_eq!(s.parse::<Sweep>().unwrap().to_string(), s);
        }
        let rows = Sweep::Component.configs(&ModelConfig::default());
        assert_eq!(rows.iter().map(|c| c.variant).collect::<Vec<_>>(), Variant::ALL);
    }

    #[test]
    fn evaluate_lists_missing_ids() {
        let refs = generate_corpus(3, 1, &GeneratorConfig::default());
        let hyps = vec![Hypothesis {
            id: refs[1].id.clone(),
            hypothesis: "x".into(),
        }];
        let msg = evaluate(&refs, &hyps).unwrap_err().to_string();
        assert!(msg.contains(&refs[0].id) && msg.contains(&refs[2].id) && !msg.contains(&refs[1].id), "{msg}");
        assert!(evaluate(&refs, &[]).unwrap_err().to_string().contains("empty"));
        let selfie: Vec<Hypothesis> = refs
            .iter()
            .map(|s| Hypothesis {
                id: s.id.clone(),
                hypothesis: s.report.clone(),
            })
            .collect();
        let m = evaluate(&refs, &selfie).unwrap();
        assert_eq!((m.bleu4, m.ce_f1), (1.0, 1.0));
    }

    #[test]
    fn finetune_keeps_encoders_and_logs_every_step() {
        let studies = generate_corpus(10, 4, &GeneratorConfig::default());
        let stage1 = pretrain(&tiny(), &studies, 1).unwrap();
        assert_eq!(stage1.losses.len(), 3);
        let ck = stage1.trained.checkpoint();
        let run = finetune(&tiny(), &ck, &studies).unwrap();
        assert_eq!(run.rows.len(), 3);
        for r in &run.rows {
            assert!((r.total - (r.lm + r.dc)).abs() < 1e-6);
        }
        let snap: Vec<(String, Tensor<f32>)> = ck
            .tensors
            .iter()
            .filter(|(n, _)| ENCODER_PREFIXES.iter().any(|p| n.starts_with(p)))
            .cloned()
            .collect();
        assert!(encoder_drift(&run.trained.store, &snap).is_empty());
        let gen = generate(&run.trained, &studies[..2], &GenerationConfig::default()).unwrap();
        assert_eq!(gen.hypotheses.len(), 2);
        assert_eq!(gen.clues[0].clues.len(), 1.max(tiny().top_k));
    }
}
