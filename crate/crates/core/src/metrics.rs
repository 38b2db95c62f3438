//! Language-generation and clinical-efficacy metrics.
//!
//! NLG scores (BLEU-1..4, ROUGE-L, CIDEr) compare tokenised hypotheses with
//! their single reference. Clinical-efficacy scores compare disease labels
//! extracted from both texts by a negation-scoped keyword labeler.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::DISEASES;
use crate::error::{contract, Result};
use crate::vocab::tokenize;

/// One boolean per disease, in catalog order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct LabelVector([bool; DISEASES.len()]);

impl LabelVector {
    pub fn new(values: [bool; DISEASES.len()]) -> Self {
        Self(values)
    }

    pub fn get(&self, disease: usize) -> bool {
        self.0[disease]
    }

    pub fn set(&mut self, disease: usize, value: bool) {
        self.0[disease] = value;
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn values(&self) -> &[bool; DISEASES.len()] {
        &self.0
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }
}

/// A tokenised (reference, hypothesis) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub id: String,
    pub reference: Vec<String>,
    pub hypothesis: Vec<String>,
}

impl EvalPair {
    pub fn new(id: &str, reference: &str, hypothesis: &str) -> Self {
        Self {
            id: id.into(),
            reference: tokenize(reference),
            hypothesis: tokenize(hypothesis),
        }
    }
}

fn ngrams(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU with uniform weights over orders `1..=n`, brevity penalty,
/// and no smoothing.
pub fn bleu(pairs: &[EvalPair], n: usize) -> Result<f64> {
    if pairs.is_empty() {
        return contract("BLEU needs at least one hypothesis");
    }
    if !(1..=4).contains(&n) {
        return contract("BLEU order must be in 1..=4");
    }
    let mut clipped = vec![0usize; n];
    let mut totals = vec![0usize; n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for p in pairs {
        hyp_len += p.hypothesis.len();
        ref_len += p.reference.len();
        for k in 1..=n {
            let h = ngrams(&p.hypothesis, k);
            let r = ngrams(&p.reference, k);
            clipped[k - 1] += h
                .iter()
                .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            totals[k - 1] += p.hypothesis.len().saturating_sub(k - 1);
        }
    }
    if hyp_len == 0 || clipped.iter().any(|&c| c == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = clipped
        .iter()
        .zip(&totals)
        .map(|(&c, &t)| libm::log(c as f64 / t as f64))
        .sum::<f64>()
        / n as f64;
    let bp = if hyp_len < ref_len {
        libm::exp(1.0 - ref_len as f64 / hyp_len as f64)
    } else {
        1.0
    };
    Ok(bp * libm::exp(log_p))
}

/// Longest common subsequence length.
pub fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// Mean LCS F-measure (β = 1.2) over pairs.
pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64> {
    if pairs.is_empty() {
        return contract("ROUGE-L needs at least one pair");
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    let total: f64 = pairs
        .iter()
        .map(|p| {
            let l = lcs(&p.hypothesis, &p.reference);
            if l == 0 {
                return 0.0;
            }
            let prec = l as f64 / p.hypothesis.len() as f64;
            let rec = l as f64 / p.reference.len() as f64;
            (1.0 + b2) * prec * rec / (rec + b2 * prec)
        })
        .sum();
    Ok(total / pairs.len() as f64)
}

fn tf_idf<'a>(counts: BTreeMap<&'a [String], usize>, df: &BTreeMap<&[String], usize>, log_n: f64) -> BTreeMap<&'a [String], f64> {
    counts
        .into_iter()
        .map(|(g, c)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g, c as f64 * (log_n - libm::log(d)))
        })
        .collect()
}

/// CIDEr: TF-IDF weighted n-gram cosine (n = 1..4), averaged over orders,
/// scaled by 10 and averaged over pairs. Document frequencies come from
/// the reference corpus.
pub fn cider(pairs: &[EvalPair]) -> Result<f64> {
    if pairs.len() < 2 {
        return contract("CIDEr needs at least two pairs for document frequencies");
    }
    let log_n = libm::log(pairs.len() as f64);
    let mut total = 0.0;
    let mut per_pair = vec![0.0f64; pairs.len()];
    for n in 1..=4 {
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for p in pairs {
            let uniq: BTreeSet<&[String]> = ngrams(&p.reference, n).into_keys().collect();
            for g in uniq {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        for (i, p) in pairs.iter().enumerate() {
            let h = tf_idf(ngrams(&p.hypothesis, n), &df, log_n);
            let r = tf_idf(ngrams(&p.reference, n), &df, log_n);
            let dot: f64 = h.iter().map(|(g, &w)| w * r.get(g).copied().unwrap_or(0.0)).sum();
            let nh = libm::sqrt(h.values().map(|w| w * w).sum::<f64>());
            let nr = libm::sqrt(r.values().map(|w| w * w).sum::<f64>());
            if nh > 0.0 && nr > 0.0 {
                per_pair[i] += dot / (nh * nr);
            }
        }
    }
    for s in per_pair {
        total += s / 4.0 * 10.0;
    }
    Ok(total / pairs.len() as f64)
}

const NEGATION_UNIGRAMS: [&str; 3] = ["no", "not", "without"];
const NEGATION_BIGRAMS: [[&str; 2]; 2] = [["free", "of"], ["negative", "for"]];

fn negated(prefix: &[String]) -> bool {
    prefix.iter().any(|t| NEGATION_UNIGRAMS.contains(&t.as_str()))
        || prefix
            .windows(2)
            .any(|w| NEGATION_BIGRAMS.iter().any(|b| w[0] == b[0] && w[1] == b[1]))
}

/// A disease is positive when its name occurs in a sentence with no
/// negation cue before it in that sentence.
pub fn label_report(text: &str) -> LabelVector {
    let tokens = tokenize(text);
    let names: Vec<Vec<String>> = DISEASES.iter().map(|d| tokenize(d)).collect();
    let mut labels = LabelVector::default();
    for sentence in tokens.split(|t| t == ".") {
        for (d, name) in names.iter().enumerate() {
            if labels.get(d) || sentence.len() < name.len() {
                continue;
            }
            let hit = sentence
                .windows(name.len())
                .enumerate()
                .any(|(p, w)| w == name.as_slice() && !negated(&sentence[..p]));
            if hit {
                labels.set(d, true);
            }
        }
    }
    labels
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CeScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro-averaged precision/recall/F1 over every (study, disease) decision.
pub fn ce_scores(predicted: &[LabelVector], truth: &[LabelVector]) -> Result<CeScores> {
    if predicted.len() != truth.len() {
        return contract("predicted and true label counts differ");
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, t) in predicted.iter().zip(truth) {
        for d in 0..DISEASES.len() {
            match (p.get(d), t.get(d)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    Ok(ce_from_counts(tp, fp, fn_))
}

pub fn ce_from_counts(tp: usize, fp: usize, fn_: usize) -> CeScores {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    CeScores {
        precision,
        recall,
        f1,
    }
}

/// The full metric table for one evaluated corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub ce_precision: f64,
    pub ce_recall: f64,
    pub ce_f1: f64,
}

/// Scores hypotheses against references; label vectors are extracted from
/// both texts with [`label_report`].
pub fn evaluate(references: &[(String, String)], hypotheses: &[String]) -> Result<MetricsSummary> {
    if hypotheses.is_empty() {
        return contract("no hypotheses to evaluate");
    }
    if references.len() != hypotheses.len() {
        return contract("reference and hypothesis counts differ");
    }
    let pairs: Vec<EvalPair> = references
        .iter()
        .zip(hypotheses)
        .map(|((id, r), h)| EvalPair::new(id, r, h))
        .collect();
    let truth: Vec<LabelVector> = references.iter().map(|(_, r)| label_report(r)).collect();
    let pred: Vec<LabelVector> = hypotheses.iter().map(|h| label_report(h)).collect();
    let ce = ce_scores(&pred, &truth)?;
    let cider = if pairs.len() >= 2 { cider(&pairs)? } else { 0.0 };
    Ok(MetricsSummary {
        bleu1: bleu(&pairs, 1)?,
        bleu2: bleu(&pairs, 2)?,
        bleu3: bleu(&pairs, 3)?,
        bleu4: bleu(&pairs, 4)?,
        rouge_l: rouge_l(&pairs)?,
        cider,
        ce_precision: ce.precision,
        ce_recall: ce.recall,
        ce_f1: ce.f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(r: &str, h: &str) -> EvalPair {
        EvalPair::new("x", r, h)
    }

    #[test]
    fn bleu_examples() {
        let p = [pair("the cat sat on the mat", "the cat sat on the mat")];
        assert_eq!(bleu(&p, 4).unwrap(), 1.0);
        let p = [pair("the cat sat on the mat", "the cat sat")];
        assert!((bleu(&p, 3).unwrap() - libm::exp(-1.0)).abs() < 1e-12);
        assert!((bleu(&p, 3).unwrap() - 0.3679).abs() < 1e-4);
        // No 4-gram in a 3-token hypothesis.
        assert_eq!(bleu(&p, 4).unwrap(), 0.0);
        assert!(bleu(&[], 1).is_err());
        assert!(bleu(&p, 5).is_err());
    }

    #[test]
    fn bleu_clips_repeated_ngrams() {
        let p = [pair("the cat", "the the the")];
        // clipped unigram precision 1/3, BP = 1
        assert!((bleu(&p, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&[pair("a b c", "a b c")]).unwrap(), 1.0);
        assert_eq!(rouge_l(&[pair("a b c", "x y")]).unwrap(), 0.0);
        assert!((rouge_l(&[pair("a c b d", "a b c d")]).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn lcs_matches_brute_force() {
        // Oracle: longest subsequence of `a` (by subset enumeration) that is
        // also a subsequence of `b`.
        fn is_subseq(s: &[&str], b: &[&str]) -> bool {
            let mut it = b.iter();
            s.iter().all(|x| it.any(|y| y == x))
        }
        let words = ["a", "b", "c"];
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as usize
        };
        for _ in 0..200 {
            let a: Vec<&str> = (0..next() % 7).map(|_| words[next() % 3]).collect();
            let b: Vec<&str> = (0..next() % 7).map(|_| words[next() % 3]).collect();
            let mut best = 0;
            for mask in 0u32..(1 << a.len()) {
                let s: Vec<&str> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| a[i]).collect();
                if is_subseq(&s, &b) {
                    best = best.max(s.len());
                }
            }
            let sa: Vec<String> = a.iter().map(|s| String::from(*s)).collect();
            let sb: Vec<String> = b.iter().map(|s| String::from(*s)).collect();
            assert_eq!(lcs(&sa, &sb), best);
        }
    }

    #[test]
    fn cider_properties() {
        let p = [pair("a b c d", "x y z"), pair("e f g h", "e f g h")];
        let s = cider(&p).unwrap();
        // First pair shares nothing, second is a perfect match.
        assert!((s - 5.0).abs() < 1e-9, "{s}");
        let mut doubled = p.to_vec();
        doubled.extend(p.iter().cloned());
        assert!((cider(&doubled).unwrap() - s).abs() < 1e-9);
        assert!(cider(&p[..1]).is_err());
    }

    #[test]
    fn cider_identical_references_score_zero() {
        let p = [pair("a b c", "a b c"), pair("a b c", "a b c")];
        assert_eq!(cider(&p).unwrap(), 0.0);
    }

    #[test]
    fn labeler_rules() {
        let l = label_report("there is severe pneumonia in the left lower lobe .");
        assert!(l.get(6));
        assert_eq!(l.count(), 1);
        assert_eq!(label_report("no pneumothorax is seen .").count(), 0);
        assert_eq!(label_report("Lung is free of edema.").count(), 0);
        assert_eq!(label_report("negative for fracture .").count(), 0);
        assert_eq!(label_report("edema without fracture .").count(), 1);
        let upper = label_report("There is mild EDEMA.");
        assert!(upper.get(4));
        // Negation does not cross sentence boundaries.
        let l = label_report("no fracture . there is mild edema .");
        assert!(l.get(4) && !l.get(11));
    }

    #[test]
    fn ce_examples() {
        let mut t = LabelVector::default();
        t.set(1, true);
        t.set(2, true);
        let s = ce_scores(&[t], &[t]).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let s = ce_scores(&[LabelVector::default()], &[t]).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        let s = ce_from_counts(2, 1, 2);
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.recall - 0.5).abs() < 1e-12);
        assert!((s.f1 - 4.0 / 7.0).abs() < 1e-12);
        assert!(ce_scores(&[t], &[]).is_err());
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let refs: Vec<(String, String)> = crate::corpus::generate_corpus(30, 3, &Default::default())
            .into_iter()
            .map(|s| (s.id, s.report))
            .collect();
        let hyps: Vec<String> = refs.iter().map(|(_, r)| r.clone()).collect();
        let m = evaluate(&refs, &hyps).unwrap();
        assert_eq!(m.bleu4, 1.0);
        assert_eq!(m.ce_f1, 1.0);
        assert_eq!(m.rouge_l, 1.0);
        assert!(evaluate(&refs, &[]).is_err());
    }
}
