//! Disease-clue prompts, the frozen clue bank, clue weighting and top-k
//! selection.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::corpus::{DiseaseCatalog, Severity, DISEASES, LOCATIONS};
use crate::encoders::TextEncoder;
use crate::error::{contract, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

/// Probability that the severity (and, independently, the location) slot
/// of a prompt is filled.
pub const SLOT_PROB: f64 = 0.75;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CluePrompt {
    pub disease: usize,
    pub severity: Option<Severity>,
    pub location: Option<usize>,
    pub rendered: String,
}

impl CluePrompt {
    pub fn new(disease: usize, severity: Option<Severity>, location: Option<usize>) -> Self {
        let mut rendered = String::from("Clue:");
        if let Some(s) = severity {
            rendered.push(' ');
            rendered.push_str(s.name());
        }
        rendered.push(' ');
        rendered.push_str(DISEASES[disease]);
        if let Some(l) = location {
            rendered.push_str(" at ");
            rendered.push_str(LOCATIONS[l]);
        }
        Self {
            disease,
            severity,
            location,
            rendered,
        }
    }
}

/// One prompt per disease with independently resampled severity and
/// location slots.
pub fn build_prompts(catalog: &DiseaseCatalog, rng: &mut impl Rng) -> Vec<CluePrompt> {
    (0..catalog.len())
        .map(|d| {
            let severity = rng
                .random_bool(SLOT_PROB)
                .then(|| Severity::ALL[rng.random_range(0..Severity::ALL.len())]);
            let location = rng.random_bool(SLOT_PROB).then(|| rng.random_range(0..LOCATIONS.len()));
            CluePrompt::new(d, severity, location)
        })
        .collect()
}

/// Encoded clue prompts: `embeddings` is `[m, r + 1, d]` (row 0 of each
/// clue is its CLS, padding rows are zero) and `experts` is `[m, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClueBank {
    pub prompts: Vec<CluePrompt>,
    pub embeddings: Tensor<f32>,
    pub experts: Tensor<f32>,
    /// Prompts whose token rows were cut to fit `r`.
    pub truncated: usize,
}

impl ClueBank {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// Token rows per clue, excluding CLS.
    pub fn rows(&self) -> usize {
        self.embeddings.shape()[1] - 1
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[2]
    }

    /// `[r + 1, d]` slice of clue `i`.
    pub fn clue(&self, i: usize) -> &[f32] {
        let per = (self.rows() + 1) * self.dim();
        &self.embeddings.data()[i * per..(i + 1) * per]
    }
}

/// Encodes each prompt with the (frozen) text encoder. The CLS row sees the
/// whole prompt; token rows beyond `rows` are dropped.
pub fn encode_clue_bank(
    prompts: &[CluePrompt],
    encoder: &TextEncoder,
    store: &ParamStore,
    vocab: &Vocabulary,
    rows: usize,
) -> Result<ClueBank> {
    if prompts.is_empty() {
        return contract("clue bank needs at least one prompt");
    }
    let mut embeddings = Vec::new();
    let mut experts = Vec::new();
    let mut truncated = 0;
    let mut dim = 0;
    for p in prompts {
        let ids = vocab.encode(&p.rendered);
        if ids.len() > rows {
            truncated += 1;
        }
        let mut g = Graph::new();
        let out = encoder.forward(&mut g, store, &ids)?;
        let t = g.value(out);
        dim = t.cols();
        experts.extend_from_slice(t.row(0));
        let keep = t.rows().min(rows + 1);
        embeddings.extend_from_slice(&t.data()[..keep * dim]);
        embeddings.resize(embeddings.len() + (rows + 1 - keep) * dim, 0.0);
    }
    if truncated > 0 {
        log::warn!("{truncated} clue prompt(s) longer than {rows} tokens were truncated");
    }
    Ok(ClueBank {
        prompts: prompts.to_vec(),
        embeddings: Tensor::new(&[prompts.len(), rows + 1, dim], embeddings)?,
        experts: Tensor::new(&[prompts.len(), dim], experts)?,
        truncated,
    })
}

/// Softmax over the clue axis of `v_cls · c_cls^i`.
pub fn clue_weights(v_cls: &[f32], bank: &ClueBank) -> Result<Vec<f32>> {
    weights_from_experts(v_cls, &bank.experts)
}

pub fn weights_from_experts(v_cls: &[f32], experts: &Tensor<f32>) -> Result<Vec<f32>> {
    if experts.rank() != 2 || v_cls.len() != experts.cols() {
        return Err(Error::Dimension {
            op: "clue_weights",
            lhs: alloc::vec![1, v_cls.len()],
            rhs: experts.shape().to_vec(),
        });
    }
    let logits: Vec<f64> = (0..experts.rows())
        .map(|i| {
            experts
                .row(i)
                .iter()
                .zip(v_cls)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum()
        })
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| libm::exp(l - m)).collect();
    let z: f64 = e.iter().sum();
    Ok(e.iter().map(|v| (v / z) as f32).collect())
}

/// `w_i ⊙ c^i` for every clue.
pub fn weight_clues(bank: &ClueBank, w: &[f32]) -> Result<Tensor<f32>> {
    if w.len() != bank.len() {
        return Err(Error::Dimension {
            op: "weight_clues",
            lhs: alloc::vec![w.len()],
            rhs: bank.embeddings.shape().to_vec(),
        });
    }
    let per = (bank.rows() + 1) * bank.dim();
    let mut out = bank.embeddings.clone();
    for (chunk, &wi) in out.data_mut().chunks_mut(per).zip(w) {
        chunk.iter_mut().for_each(|v| *v *= wi);
    }
    Ok(out)
}

/// Indices of the `k` largest weights, ordered by descending weight with
/// ties going to the lower index.
pub fn topk_indices(w: &[f32], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > w.len() {
        return contract(format!("top-k needs 1 <= k <= {}, got {k}", w.len()));
    }
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// The injected clues: weights, chosen indices and `c_s` (`[k, r, d]`, CLS
/// rows dropped after weighting).
#[derive(Clone, Debug, PartialEq)]
pub struct ClueSelection {
    pub weights: Vec<f32>,
    pub indices: Vec<usize>,
    pub tokens: Tensor<f32>,
}

impl ClueSelection {
    /// `c_s` flattened clue-major into `[k·r, d]`.
    pub fn flatten(&self) -> Tensor<f32> {
        flatten_clues(&self.tokens)
    }
}

pub fn select_topk(weighted: &Tensor<f32>, w: &[f32], k: usize) -> Result<ClueSelection> {
    let indices = topk_indices(w, k)?;
    let (rows, dim) = (weighted.shape()[1] - 1, weighted.shape()[2]);
    let per = (rows + 1) * dim;
    let mut data = Vec::with_capacity(k * rows * dim);
    for &i in &indices {
        data.extend_from_slice(&weighted.data()[i * per + dim..(i + 1) * per]);
    }
    Ok(ClueSelection {
        weights: w.to_vec(),
        indices,
        tokens: Tensor::new(&[k, rows, dim], data)?,
    })
}

/// Weights, weighs and selects in one go.
pub fn inject(v_cls: &[f32], bank: &ClueBank, k: usize) -> Result<ClueSelection> {
    let w = clue_weights(v_cls, bank)?;
    let weighted = weight_clues(bank, &w)?;
    select_topk(&weighted, &w, k)
}

/// `[k, r, d]` → `[k·r, d]`, clue-major.
pub fn flatten_clues(cs: &Tensor<f32>) -> Tensor<f32> {
    let s = cs.shape();
    cs.clone().reshape(&[s[0] * s[1], s[2]]).expect("same element count")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn template_rendering() {
        let p = CluePrompt::new(6, Some(Severity::Severe), Some(3));
        assert_eq!(p.rendered, "Clue: severe pneumonia at left lower lobe");
        assert_eq!(CluePrompt::new(6, None, None).rendered, "Clue: pneumonia");
        assert_eq!(CluePrompt::new(4, None, Some(7)).rendered, "Clue: edema at pleural space");
    }

    #[test]
    fn prompts_are_seeded() {
        let cat = DiseaseCatalog::new();
        let a = build_prompts(&cat, &mut ChaCha8Rng::seed_from_u64(3));
        let b = build_prompts(&cat, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert_eq!(a.len(), 14);
        assert!(a.iter().enumerate().all(|(i, p)| p.disease == i));
    }

    fn bank_from(experts: Tensor<f32>, rows: usize) -> ClueBank {
        let m = experts.rows();
        let d = experts.cols();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ClueBank {
            prompts: (0..m).map(|i| CluePrompt::new(i % 14, None, None)).collect(),
            embeddings: normal_tensor(&[m, rows + 1, d], 1.0, &mut rng),
            experts,
            truncated: 0,
        }
    }

    #[test]
    fn weight_examples() {
        let experts = Tensor::new(&[3, 2], alloc::vec![2.0, 0.0, 0.0, 1.0, 0.0, -1.0]).unwrap();
        let w = weights_from_experts(&[1.0, 0.0], &experts).unwrap();
        assert!((w[0] - 0.7870).abs() < 1e-4);
        assert!((w[1] - 0.1065).abs() < 1e-4 && (w[2] - 0.1065).abs() < 1e-4);

        let same = Tensor::full(&[14, 4], 0.5);
        let w = weights_from_experts(&[1.0, 2.0, 3.0, 4.0], &same).unwrap();
        assert!(w.iter().all(|&x| (x - 1.0 / 14.0).abs() < 1e-7));
        assert!(weights_from_experts(&[1.0], &same).is_err());
    }

    #[test]
    fn weighting_scales_each_clue() {
        let bank = bank_from(Tensor::zeros(&[3, 4]), 2);
        let w = [0.0, 1.0, 0.25];
        let out = weight_clues(&bank, &w).unwrap();
        let per = 3 * 4;
        for i in 0..3 {
            for j in 0..per {
                let expect = w[i] * bank.embeddings.data()[i * per + j];
                assert!((out.data()[i * per + j] - expect).abs() < 1e-6);
            }
        }
        assert!(out.data()[..per].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn topk_rules() {
        assert_eq!(topk_indices(&[0.5, 0.3, 0.2], 2).unwrap(), [0, 1]);
        assert_eq!(topk_indices(&[0.2, 0.5, 0.3], 3).unwrap(), [1, 2, 0]);
        assert_eq!(topk_indices(&[0.25; 4], 2).unwrap(), [0, 1]);
        assert!(topk_indices(&[0.5, 0.5], 0).is_err());
        assert!(topk_indices(&[0.5, 0.5], 3).is_err());
    }

    #[test]
    fn selection_drops_cls_rows() {
        let bank = bank_from(Tensor::zeros(&[4, 3]), 2);
        let w = [0.1, 0.4, 0.2, 0.3];
        let weighted = weight_clues(&bank, &w).unwrap();
        let sel = select_topk(&weighted, &w, 2).unwrap();
        assert_eq!(sel.indices, [1, 3]);
        assert_eq!(sel.tokens.shape(), &[2, 2, 3]);
        let per = 3 * 3;
        assert_eq!(&sel.tokens.data()[..6], &weighted.data()[per + 3..2 * per]);
        let flat = sel.flatten();
        assert_eq!(flat.shape(), &[4, 3]);
        // token (i·r + j) is c_s[i][j]
        assert_eq!(flat.row(3), &sel.tokens.data()[9..12]);
    }
}
