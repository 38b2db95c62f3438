//! The full two-stage model: encoders, visual mapper, clue projection,
//! interaction block and decoder, plus the stage-2 training step and
//! report generation.
//!
//! Prefix seen by the decoder, per variant:
//!
//! | variant        | prefix                                   | loss       |
//! |----------------|------------------------------------------|------------|
//! | BASE           | `E^v`                                    | LM         |
//! | +DCI           | `[E^v; proj(c_s)]`                       | LM         |
//! | +DCI+CMCI      | `[E^v; E^c]`                             | LM         |
//! | +DCI+CMCI+DAL  | `[E^v; E^c]`                             | LM + DC    |

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::clue::{self, ClueBank, ClueSelection};
use crate::config::{ModelConfig, Variant};
use crate::corpus::DiseaseCatalog;
use crate::decoder::{self, Decoder, GenerationConfig, Generated};
use crate::encoders::{patchify, TextEncoder, VisionEncoder, VisualMapper};
use crate::error::{Error, Result};
use crate::interaction::{dc_loss, InteractionBlock};
use crate::nn::Linear;
use crate::optim::Adam;
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

/// Parameter-name prefixes of the two encoders, frozen in stage 2.
pub const ENCODER_PREFIXES: [&str; 2] = ["vision.", "text."];

#[derive(Clone, Debug)]
pub struct TrrgModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub mapper: VisualMapper,
    /// Lifts clue tokens from encoder width to decoder width.
    pub clue_proj: Linear,
    pub interaction: InteractionBlock,
    pub decoder: Decoder,
}

/// Frozen vision-encoder outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyFeatures {
    /// Patch rows `v_e` without the pooled row, `[n, d]`.
    pub patches: Tensor<f32>,
    /// Expert token `v_cls`: the patch mean.
    pub v_cls: Vec<f32>,
}

/// Everything stage 2 needs for one study.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyInput {
    pub features: StudyFeatures,
    pub selection: Option<ClueSelection>,
    /// `BOS report EOS` ids (empty when only generating).
    pub target: Vec<usize>,
}

/// Graph handles of the decoder prefix.
#[derive(Clone, Copy, Debug)]
pub struct Prefix {
    pub tokens: Var,
    pub ev: Var,
    pub ec: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub lm: Var,
    pub dc: Option<Var>,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub lm: f64,
    pub dc: f64,
    pub total: f64,
}

impl TrrgModel {
    /// The vocabulary shared by every model: all corpus and clue words.
    pub fn default_vocabulary() -> Vocabulary {
        let lex = DiseaseCatalog::new().lexicon();
        Vocabulary::build(lex.iter().map(String::as_str))
    }

    /// Builds the model and its freshly initialised parameters. The resolved
    /// vocabulary size is written back into the returned config.
    pub fn new(config: &ModelConfig) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let vocab = Self::default_vocabulary();
        let mut config = config.clone();
        if config.vocab_size == 0 {
            config.vocab_size = vocab.len();
        } else if config.vocab_size != vocab.len() {
            return Err(Error::Config {
                field: "vocab_size",
                reason: alloc::format!("vocabulary has {} tokens, config says {}", vocab.len(), config.vocab_size),
            });
        }
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let vision = VisionEncoder::new(s, "vision", c.image_size, c.patch_size, c.d, c.encoder_depth, c.encoder_heads, c.ffn_mult, &mut rng)?;
        let text = TextEncoder::new(s, "text", c.vocab_size, c.max_text_len, c.d, c.encoder_depth, c.encoder_heads, c.ffn_mult, &mut rng)?;
        let mapper = Linear::new(s, "mapper", c.d, c.d_llm, true, &mut rng);
        let clue_proj = Linear::new(s, "clue_proj", c.d, c.d_llm, true, &mut rng);
        let interaction = InteractionBlock::new(s, "interaction", c.d_llm, c.queries, c.heads, c.interaction_layers, c.ffn_mult, &mut rng)?;
        let decoder = Decoder::new(s, "decoder", c.vocab_size, c.max_text_len, c.d_llm, c.decoder_depth, c.heads, c.ffn_mult, &mut rng)?;
        Ok((
            Self {
                config,
                vocab,
                vision,
                text,
                mapper,
                clue_proj,
                interaction,
                decoder,
            },
            store,
        ))
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn encoder_params(store: &ParamStore) -> Vec<ParamId> {
        ENCODER_PREFIXES.iter().flat_map(|p| store.ids_with_prefix(p)).collect()
    }

    pub fn freeze_encoders(store: &mut ParamStore) {
        for p in ENCODER_PREFIXES {
            store.set_trainable_prefix(p, false);
        }
    }

    /// Parameters updated in stage 2 for this variant. The clue projection
    /// only exists on the clue path; the clue-stream self-attention and
    /// reader only when the interaction is active.
    pub fn stage2_params(&self, store: &ParamStore) -> Vec<ParamId> {
        let v = self.variant();
        let mut prefixes: Vec<&str> = alloc::vec!["mapper.", "decoder.", "interaction.visual", "interaction.queries", "interaction.query_self", "interaction.read_visual"];
        if v.uses_clues() {
            prefixes.push("clue_proj.");
        }
        if v.uses_interaction() {
            prefixes.push("interaction.clue");
            prefixes.push("interaction.read_clue");
        }
        prefixes.iter().flat_map(|p| store.ids_with_prefix(p)).collect()
    }

    /// Freezes everything outside [`Self::stage2_params`].
    pub fn prepare_stage2(&self, store: &mut ParamStore) {
        let live = self.stage2_params(store);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            store.set_trainable(id, live.contains(&id));
        }
    }

    pub fn patches_of(&self, pixels: &[f32], height: usize, width: usize) -> Result<Tensor<f32>> {
        if height != self.config.image_size || width != self.config.image_size {
            return Err(Error::Shape {
                shape: alloc::vec![height, width],
                reason: alloc::format!("model expects {0}×{0} images", self.config.image_size),
            });
        }
        patchify(pixels, height, width, self.config.patch_size)
    }

    /// Runs the frozen vision encoder.
    pub fn features(&self, store: &ParamStore, pixels: &[f32], height: usize, width: usize) -> Result<StudyFeatures> {
        let p = self.patches_of(pixels, height, width)?;
        let mut g = Graph::new();
        let p = g.constant(p);
        let out = self.vision.forward(&mut g, store, p)?;
        let out = g.value(out);
        Ok(StudyFeatures {
            v_cls: out.row(0).to_vec(),
            patches: out.slice_rows(1, out.rows())?,
        })
    }

    /// Encodes a fresh clue bank from prompts drawn with `rng`.
    pub fn clue_bank(&self, store: &ParamStore, rng: &mut impl rand::Rng) -> Result<ClueBank> {
        let prompts = clue::build_prompts(&DiseaseCatalog::new(), rng);
        clue::encode_clue_bank(&prompts, &self.text, store, &self.vocab, self.config.clue_len)
    }

    pub fn prepare(&self, features: StudyFeatures, bank: Option<&ClueBank>, report: Option<&str>) -> Result<StudyInput> {
        let selection = match (self.variant().uses_clues(), bank) {
            (true, Some(b)) => Some(clue::inject(&features.v_cls, b, self.config.top_k)?),
            (true, None) => return crate::error::contract("this variant needs a clue bank"),
            (false, _) => None,
        };
        let target = report
            .map(|r| self.vocab.encode_target(r, self.config.max_text_len))
            .unwrap_or_default();
        Ok(StudyInput {
            features,
            selection,
            target,
        })
    }

    pub fn prefix<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, input: &StudyInput) -> Result<Prefix> {
        let v = g.constant(input.features.patches.cast());
        let vd = self.mapper.forward(g, ps, v)?;
        let v_stream = self.interaction.attend_stream(g, ps, &self.interaction.visual, vd)?;
        let variant = self.variant();
        let clue_tokens = match (&input.selection, variant.uses_clues()) {
            (Some(sel), true) => {
                let c = g.constant(sel.flatten().cast());
                Some(self.clue_proj.forward(g, ps, c)?)
            }
            (None, true) => return crate::error::contract("clue variant without a clue selection"),
            _ => None,
        };
        match clue_tokens {
            None => {
                let ev = self.interaction.compress_visual(g, ps, v_stream)?;
                Ok(Prefix { tokens: ev, ev, ec: None })
            }
            Some(ct) if variant.uses_interaction() => {
                let c_stream = self.interaction.attend_stream(g, ps, &self.interaction.clue, ct)?;
                let (ev, ec) = self.interaction.query_compress(g, ps, v_stream, c_stream)?;
                let tokens = g.concat(&[ev, ec], 0)?;
                Ok(Prefix { tokens, ev, ec: Some(ec) })
            }
            Some(ct) => {
                let ev = self.interaction.compress_visual(g, ps, v_stream)?;
                let tokens = g.concat(&[ev, ct], 0)?;
                Ok(Prefix { tokens, ev, ec: None })
            }
        }
    }

    /// Stage-2 objective for one study.
    pub fn finetune_loss<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, input: &StudyInput) -> Result<LossVars> {
        let p = self.prefix(g, ps, input)?;
        let lm = self.decoder.lm_loss(g, ps, p.tokens, &input.target)?;
        let dc = match (self.variant().uses_consistency_loss(), p.ec) {
            (true, Some(ec)) => Some(dc_loss(g, p.ev, ec)?),
            _ => None,
        };
        let total = decoder::total_loss(g, lm, dc)?;
        Ok(LossVars { lm, dc, total })
    }

    /// One optimiser step on the batch mean of the stage-2 objective.
    pub fn finetune_step(&self, store: &mut ParamStore, opt: &mut Adam, batch: &[&StudyInput]) -> Result<StepStats> {
        if batch.is_empty() {
            return crate::error::contract("empty fine-tuning batch");
        }
        let scale = 1.0 / batch.len() as f32;
        let mut stats = StepStats::default();
        for input in batch {
            let mut g = Graph::new();
            let l = self.finetune_loss(&mut g, store, input)?;
            g.backward(l.total)?;
            g.accumulate_param_grads(store, scale);
            stats.lm += g.value(l.lm).item() as f64;
            stats.dc += l.dc.map_or(0.0, |d| g.value(d).item() as f64);
            stats.total += g.value(l.total).item() as f64;
        }
        let n = batch.len() as f64;
        stats.lm /= n;
        stats.dc /= n;
        stats.total /= n;
        opt.step(store);
        Ok(stats)
    }

    /// Decoder prefix values for one study.
    pub fn prefix_tensor(&self, store: &ParamStore, input: &StudyInput) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = self.prefix(&mut g, store, input)?;
        Ok(g.value(p.tokens).clone())
    }

    /// Next-token logits after `ids` given prefix values.
    pub fn next_logits(&self, store: &ParamStore, prefix: &Tensor<f32>, ids: &[usize]) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let p = g.constant(prefix.clone());
        let logits = self.decoder.forward(&mut g, store, p, ids)?;
        let l = g.value(logits);
        Ok(l.row(l.rows() - 1).to_vec())
    }

    pub fn generate(&self, store: &ParamStore, input: &StudyInput, cfg: &GenerationConfig) -> Result<Generated> {
        let prefix = self.prefix_tensor(store, input)?;
        let cfg = GenerationConfig {
            max_len: cfg.max_len.min(self.config.max_text_len - 1),
            ..*cfg
        };
        decoder::generate(&cfg, |ids| self.next_logits(store, &prefix, ids))
    }

    pub fn generate_text(&self, store: &ParamStore, input: &StudyInput, cfg: &GenerationConfig) -> Result<String> {
        let out = self.generate(store, input, cfg)?;
        Ok(self.vocab.decode(&out.ids))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, GeneratorConfig};

    fn micro(variant: Variant) -> (TrrgModel, ParamStore) {
        TrrgModel::new(&ModelConfig {
            variant,
            ..ModelConfig::micro()
        })
        .unwrap()
    }

    #[test]
    fn variant_prefix_lengths() {
        let study = &generate_corpus(1, 2, &GeneratorConfig::default())[0];
        for (variant, len) in [(Variant::Base, 2), (Variant::Dci, 2 + 8), (Variant::DciCmci, 4), (Variant::Full, 4)] {
            let (m, store) = micro(variant);
            let f = m.features(&store, &study.pixels, 64, 64).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let bank = m.clue_bank(&store, &mut rng).unwrap();
            let input = m.prepare(f, Some(&bank), Some(&study.report)).unwrap();
            assert_eq!(m.prefix_tensor(&store, &input).unwrap().rows(), len, "{variant:?}");
            let mut g = Graph::new();
            let l = m.finetune_loss(&mut g, &store, &input).unwrap();
            assert_eq!(l.dc.is_some(), variant == Variant::Full);
        }
    }

    #[test]
    fn features_pool_matches_patch_mean() {
        let (m, store) = micro(Variant::Full);
        let study = &generate_corpus(1, 5, &GeneratorConfig::default())[0];
        let f = m.features(&store, &study.pixels, 64, 64).unwrap();
        let mean = crate::encoders::mean_rows(&f.patches);
        for (a, b) in mean.iter().zip(&f.v_cls) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(f.patches.shape(), &[16, 8]);
    }

    #[test]
    fn stage2_never_touches_encoders() {
        let (m, mut store) = micro(Variant::Full);
        m.prepare_stage2(&mut store);
        let before: Vec<Tensor<f32>> = TrrgModel::encoder_params(&store).iter().map(|&id| store.value(id).clone()).collect();
        let studies = generate_corpus(3, 1, &GeneratorConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bank = m.clue_bank(&store, &mut rng).unwrap();
        let inputs: Vec<StudyInput> = studies
            .iter()
            .map(|s| {
                let f = m.features(&store, &s.pixels, 64, 64).unwrap();
                m.prepare(f, Some(&bank), Some(&s.report)).unwrap()
            })
            .collect();
        let refs: Vec<&StudyInput> = inputs.iter().collect();
        let mut opt = Adam::new(1e-3);
        for _ in 0..3 {
            let s = m.finetune_step(&mut store, &mut opt, &refs).unwrap();
            assert!((s.total - (s.lm + s.dc)).abs() < 1e-6);
        }
        let after: Vec<Tensor<f32>> = TrrgModel::encoder_params(&store).iter().map(|&id| store.value(id).clone()).collect();
        assert_eq!(before, after);
    }
}
