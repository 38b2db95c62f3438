//! Causal report decoder conditioned on prefix tokens through
//! cross-attention, its language-modelling loss, and greedy/beam decoding.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{contract, Error, Result};
use crate::nn::{causal_mask, normal_tensor, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::vocab::{BOS, EOS, PAD};

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderBlock {
    fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn_mult: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), dim),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, dim, heads, rng)?,
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), dim),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, dim, heads, rng)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, dim * ffn_mult, rng),
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var, prefix: Var, mask: &[bool]) -> Result<Var> {
        let h = self.ln_self.forward(g, ps, x)?;
        let a = self.self_attn.forward(g, ps, h, h, Some(mask))?;
        let x = g.add(x, a)?;
        let h = self.ln_cross.forward(g, ps, x)?;
        let a = self.cross_attn.forward(g, ps, h, prefix, None)?;
        let x = g.add(x, a)?;
        let h = self.ln_ffn.forward(g, ps, x)?;
        let f = self.ffn.forward(g, ps, h)?;
        g.add(x, f)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub token_embed: ParamId,
    pub position: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
    pub max_len: usize,
    pub vocab: usize,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        max_len: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        ffn_mult: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let token_embed = store.add(&format!("{name}.token_embed"), normal_tensor(&[vocab, dim], 0.02, rng));
        let position = store.add(&format!("{name}.position"), normal_tensor(&[max_len, dim], 0.02, rng));
        let blocks = (0..depth)
            .map(|i| DecoderBlock::new(store, &format!("{name}.block{i}"), dim, heads, ffn_mult, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            token_embed,
            position,
            blocks,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            head: Linear::new(store, &format!("{name}.head"), dim, vocab, true, rng),
            max_len,
            vocab,
        })
    }

    /// Next-token logits `[len, vocab]` for every position of `ids`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, prefix: Var, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return contract("decoder input is empty");
        }
        if ids.len() > self.max_len {
            return Err(Error::Shape {
                shape: alloc::vec![ids.len()],
                reason: format!("decoder input exceeds {} positions", self.max_len),
            });
        }
        let table = g.param(ps, self.token_embed);
        let x = g.embedding(table, ids)?;
        let pos = g.param(ps, self.position);
        let pos = g.narrow(pos, 0, 0, ids.len())?;
        let mut x = g.add(x, pos)?;
        let mask = causal_mask(ids.len());
        for b in &self.blocks {
            x = b.forward(g, ps, x, prefix, &mask)?;
        }
        let x = self.norm.forward(g, ps, x)?;
        self.head.forward(g, ps, x)
    }

    /// Teacher-forced mean token NLL of a `BOS … EOS` target; PAD targets are
    /// not scored.
    pub fn lm_loss<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, prefix: Var, target: &[usize]) -> Result<Var> {
        if target.len() < 2 {
            return contract("language-model target needs at least BOS and one token");
        }
        let logits = self.forward(g, ps, prefix, &target[..target.len() - 1])?;
        g.cross_entropy(logits, &target[1..], Some(PAD))
    }
}

/// `L = L_CE + L_DC`.
pub fn total_loss<T: Real>(g: &mut Graph<T>, lm: Var, dc: Option<Var>) -> Result<Var> {
    match dc {
        Some(dc) => g.add(lm, dc),
        None => Ok(lm),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationConfig {
    /// Generated tokens, EOS included.
    pub max_len: usize,
    pub strategy: Strategy,
    pub eos: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_len: 63,
            strategy: Strategy::Greedy,
            eos: EOS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    /// Tokens after BOS, without EOS.
    pub ids: Vec<usize>,
    /// Sum of token log-probabilities, EOS step included when emitted.
    pub log_prob: f64,
    /// Scored steps (generated tokens including EOS).
    pub steps: usize,
}

impl Generated {
    pub fn normalized(&self) -> f64 {
        self.log_prob / self.steps.max(1) as f64
    }
}

fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let z: f64 = logits.iter().map(|&l| libm::exp(l as f64 - m)).sum();
    let lse = m + libm::log(z);
    logits.iter().map(|&l| l as f64 - lse).collect()
}

/// Decodes with `next` returning the next-token logits for a sequence that
/// starts with BOS.
pub fn generate<F>(cfg: &GenerationConfig, mut next: F) -> Result<Generated>
where
    F: FnMut(&[usize]) -> Result<Vec<f32>>,
{
    if cfg.max_len == 0 {
        return contract("generation needs max_len >= 1");
    }
    match cfg.strategy {
        Strategy::Greedy => greedy(cfg, &mut next),
        Strategy::Beam(0) => contract("beam width must be positive"),
        Strategy::Beam(w) => beam(cfg, w, &mut next),
    }
}

fn greedy<F>(cfg: &GenerationConfig, next: &mut F) -> Result<Generated>
where
    F: FnMut(&[usize]) -> Result<Vec<f32>>,
{
    let mut seq = alloc::vec![BOS];
    let mut log_prob = 0.0;
    for _ in 0..cfg.max_len {
        let lp = log_softmax(&next(&seq)?);
        let mut best = 0;
        for (i, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = i;
            }
        }
        log_prob += lp[best];
        seq.push(best);
        if best == cfg.eos {
            break;
        }
    }
    Ok(finish(seq, log_prob, cfg.eos))
}

fn finish(seq: Vec<usize>, log_prob: f64, eos: usize) -> Generated {
    let steps = seq.len() - 1;
    let ids = seq[1..].iter().copied().take_while(|&t| t != eos).collect();
    Generated { ids, log_prob, steps }
}

fn beam<F>(cfg: &GenerationConfig, width: usize, next: &mut F) -> Result<Generated>
where
    F: FnMut(&[usize]) -> Result<Vec<f32>>,
{
    let mut beams: Vec<(Vec<usize>, f64)> = alloc::vec![(alloc::vec![BOS], 0.0)];
    let mut done: Vec<Generated> = Vec::new();
    for _ in 0..cfg.max_len {
        let mut cand: Vec<(f64, usize, usize)> = Vec::new();
        for (b, (seq, score)) in beams.iter().enumerate() {
            let lp = log_softmax(&next(seq)?);
            cand.extend(lp.iter().enumerate().map(|(t, &l)| (score + l, b, t)));
        }
        cand.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut fresh = Vec::with_capacity(width);
        for &(score, b, t) in cand.iter().take(width) {
            let mut seq = beams[b].0.clone();
            seq.push(t);
            if t == cfg.eos {
                done.push(finish(seq, score, cfg.eos));
            } else {
                fresh.push((seq, score));
            }
        }
        beams = fresh;
        if beams.is_empty() {
            break;
        }
    }
    done.extend(beams.into_iter().map(|(s, l)| finish(s, l, cfg.eos)));
    let mut best = 0;
    for (i, c) in done.iter().enumerate() {
        if c.normalized() > done[best].normalized() {
            best = i;
        }
    }
    Ok(done.swap_remove(best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn decoder() -> (ParamStore, Decoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = Decoder::new(&mut store, "dec", 12, 10, 8, 2, 2, 2, &mut rng).unwrap();
        (store, d)
    }

    fn forced(seq: &'static [usize], vocab: usize) -> impl FnMut(&[usize]) -> Result<Vec<f32>> {
        move |ctx: &[usize]| {
            let mut l = alloc::vec![0.0; vocab];
            l[seq[(ctx.len() - 1).min(seq.len() - 1)]] = 10.0;
            Ok(l)
        }
    }

    #[test]
    fn forced_logits_are_reproduced() {
        let seq: &'static [usize] = &[5, 7, 4, EOS];
        for strategy in [Strategy::Greedy, Strategy::Beam(1), Strategy::Beam(3)] {
            let cfg = GenerationConfig {
                max_len: 10,
                strategy,
                eos: EOS,
            };
            let out = generate(&cfg, forced(seq, 9)).unwrap();
            assert_eq!(out.ids, [5, 7, 4]);
            assert_eq!(out.steps, 4);
        }
    }

    #[test]
    fn greedy_ties_go_to_lowest_id_and_stop_at_max_len() {
        let cfg = GenerationConfig {
            max_len: 3,
            strategy: Strategy::Greedy,
            eos: EOS,
        };
        let out = generate(&cfg, |_: &[usize]| Ok(alloc::vec![0.0, 0.0, -1.0, 1.0, 1.0])).unwrap();
        assert_eq!(out.ids, [3, 3, 3]);
        assert!(generate(&GenerationConfig { max_len: 0, ..cfg }, |_: &[usize]| Ok(alloc::vec![0.0])).is_err());
    }

    #[test]
    fn beam_finds_better_sequence_than_greedy() {
        // Step 1 prefers token 3 slightly, but token 4 leads to a confident EOS.
        let next = |ctx: &[usize]| -> Result<Vec<f32>> {
            Ok(match ctx {
                [_] => alloc::vec![-9.0, -9.0, -9.0, 0.1, 0.0],
                [_, 3] => alloc::vec![-9.0, -9.0, 0.0, 0.0, 0.0],
                [_, 4] => alloc::vec![-9.0, -9.0, 5.0, -9.0, -9.0],
                _ => alloc::vec![-9.0, -9.0, 5.0, -9.0, -9.0],
            })
        };
        let cfg = GenerationConfig {
            max_len: 5,
            strategy: Strategy::Greedy,
            eos: EOS,
        };
        let g = generate(&cfg, next).unwrap();
        let b = generate(&GenerationConfig { strategy: Strategy::Beam(3), ..cfg }, next).unwrap();
        assert_eq!(g.ids, [3]);
        assert_eq!(b.ids, [4]);
        assert!(b.log_prob > g.log_prob);
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let (mut store, d) = decoder();
        store.value_mut(d.head.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::new();
        let prefix = g.constant(Tensor::full(&[3, 8], 0.5));
        let l = d.lm_loss(&mut g, &store, prefix, &[BOS, 4, 5, 6, EOS]).unwrap();
        assert!((g.value(l).item() - libm::logf(12.0)).abs() < 1e-5);
        assert!(d.lm_loss(&mut g, &store, prefix, &[BOS]).is_err());
    }

    #[test]
    fn causality() {
        let (store, d) = decoder();
        let mut g = Graph::new();
        let prefix = g.constant(Tensor::full(&[2, 8], 0.1));
        let a = d.forward(&mut g, &store, prefix, &[BOS, 4, 5, 6]).unwrap();
        let b = d.forward(&mut g, &store, prefix, &[BOS, 4, 9, 6]).unwrap();
        let (a, b) = (g.value(a), g.value(b));
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn total_is_the_sum() {
        let mut g = Graph::<f64>::new();
        let lm = g.constant(Tensor::scalar(2.0));
        let dc = g.constant(Tensor::scalar(-0.5));
        let t = total_loss(&mut g, lm, Some(dc)).unwrap();
        assert_eq!(g.value(t).item(), 1.5);
    }
}
