//! Synthetic chest-radiograph corpus.
//!
//! Each study is a 64×64 grayscale image with background noise and up to
//! three disease glyphs, a templated report describing the glyphs, and the
//! ground-truth label vector. Generation is a pure function of
//! `(seed, study index, config)`: every study draws from its own ChaCha
//! stream, so studies can be generated in any order or in parallel.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::metrics::LabelVector;

/// The 14 disease labels, following the CheXpert/CheXbert label set with
/// the two non-finding classes ("no finding", "pleural other") replaced by
/// concrete findings so every label names a visible abnormality.
pub const DISEASES: [&str; 14] = [
    "enlarged cardiomediastinum",
    "cardiomegaly",
    "lung opacity",
    "lung lesion",
    "edema",
    "consolidation",
    "pneumonia",
    "atelectasis",
    "pneumothorax",
    "pleural effusion",
    "pleural thickening",
    "fracture",
    "support devices",
    "hernia",
];

pub const LOCATIONS: [&str; 8] = [
    "right upper lobe",
    "left upper lobe",
    "right lower lobe",
    "left lower lobe",
    "right lung",
    "left lung",
    "cardiac silhouette",
    "pleural space",
];

/// Top-left pixel of each location's glyph; all regions are disjoint and
/// aligned to the 8-pixel patch grid.
const ANCHORS: [(usize, usize); 8] = [(8, 8), (8, 40), (40, 8), (40, 40), (24, 0), (24, 48), (24, 24), (48, 24)];

pub const IMAGE_SIDE: usize = 64;
pub const GLYPH_SIDE: usize = 16;
/// Every rendered glyph pixel exceeds this level; background noise stays below it.
pub const GLYPH_THRESHOLD: f32 = 0.3;

const OPENERS: [&str; 3] = [
    "frontal and lateral views of the chest were obtained .",
    "the patient is positioned upright .",
    "comparison is made to the prior study .",
];

const CLOSERS: [&str; 3] = [
    "the trachea is midline .",
    "the mediastinal contours are stable .",
    "the upper abdomen is unremarkable .",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Mild,
    Moderate,
    Severe,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Mild, Severity::Moderate, Severity::Severe];

    pub fn name(self) -> &'static str {
        match self {
            Severity::Mild => "mild",
            Severity::Moderate => "moderate",
            Severity::Severe => "severe",
        }
    }

    /// Glyph intensity added on top of the background.
    pub fn amplitude(self) -> f32 {
        match self {
            Severity::Mild => 0.45,
            Severity::Moderate => 0.7,
            Severity::Severe => 0.95,
        }
    }
}

/// Disease names, severities, locations and per-disease glyph textures.
#[derive(Clone, Debug)]
pub struct DiseaseCatalog {
    glyphs: Vec<Vec<f32>>,
}

impl Default for DiseaseCatalog {
    fn default() -> Self {
        Self::new()
    }
}

impl DiseaseCatalog {
    pub fn new() -> Self {
        let glyphs = (0..DISEASES.len())
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(0x676c_7970_6800 + i as u64);
                (0..GLYPH_SIDE * GLYPH_SIDE)
                    .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        Self { glyphs }
    }

    pub fn len(&self) -> usize {
        DISEASES.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn name(&self, disease: usize) -> &'static str {
        DISEASES[disease]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        DISEASES.iter().position(|d| *d == name)
    }

    /// Binary 16×16 texture, row-major.
    pub fn glyph(&self, disease: usize) -> &[f32] {
        &self.glyphs[disease]
    }

    pub fn anchor(&self, location: usize) -> (usize, usize) {
        ANCHORS[location]
    }

    /// Every word a generated report or clue prompt can contain.
    pub fn lexicon(&self) -> Vec<String> {
        let mut texts: Vec<String> = Vec::new();
        texts.extend(OPENERS.iter().chain(&CLOSERS).map(|s| String::from(*s)));
        texts.extend(DISEASES.iter().map(|d| String::from(*d)));
        texts.extend(LOCATIONS.iter().map(|l| String::from(*l)));
        texts.extend(Severity::ALL.iter().map(|s| String::from(s.name())));
        texts.push("there is in the . no is seen .".into());
        texts.push("Clue: at".into());
        texts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Upper bound of the uniform background noise.
    pub noise: f32,
    /// Probability of adding one negated mention of an absent disease.
    pub negation_prob: f64,
    /// Probability of 0, 1, 2 and 3 positive diseases.
    pub count_probs: [f64; 4],
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            noise: 0.25,
            negation_prob: 0.3,
            count_probs: [0.25, 0.4, 0.25, 0.1],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Finding {
    pub disease: usize,
    pub severity: Severity,
    pub location: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticStudy {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major intensities in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub report: String,
    pub labels: LabelVector,
}

impl SyntheticStudy {
    pub fn positives(&self) -> usize {
        self.labels.count()
    }
}

fn quantize(v: f32) -> f32 {
    // Multiples of 1/256 survive a decimal text round-trip exactly.
    libm::roundf(v.clamp(0.0, 1.0) * 256.0) / 256.0
}

fn sample_count(rng: &mut impl Rng, probs: &[f64; 4]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// Generates study `index` of the corpus seeded with `seed`.
pub fn generate_study(catalog: &DiseaseCatalog, seed: u64, index: u64, cfg: &GeneratorConfig) -> SyntheticStudy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);

    let mut pixels: Vec<f32> = (0..IMAGE_SIDE * IMAGE_SIDE)
        .map(|_| rng.random::<f32>() * cfg.noise)
        .collect();

    let count = sample_count(&mut rng, &cfg.count_probs);
    let mut diseases = index::sample(&mut rng, DISEASES.len(), count).into_vec();
    diseases.sort_unstable();
    let locations = index::sample(&mut rng, LOCATIONS.len(), count).into_vec();
    let findings: Vec<Finding> = diseases
        .iter()
        .zip(&locations)
        .map(|(&disease, &location)| Finding {
            disease,
            severity: *Severity::ALL.choose(&mut rng).expect("severities"),
            location,
        })
        .collect();

    for f in &findings {
        let (r0, c0) = ANCHORS[f.location];
        let glyph = catalog.glyph(f.disease);
        let amp = f.severity.amplitude();
        for r in 0..GLYPH_SIDE {
            for c in 0..GLYPH_SIDE {
                let px = &mut pixels[(r0 + r) * IMAGE_SIDE + c0 + c];
                *px = (*px + amp * glyph[r * GLYPH_SIDE + c]).min(1.0);
            }
        }
    }
    pixels.iter_mut().for_each(|p| *p = quantize(*p));

    let mut sentences: Vec<String> = Vec::with_capacity(6);
    sentences.push(String::from(*OPENERS.choose(&mut rng).expect("openers")));
    for f in &findings {
        sentences.push(format!(
            "there is {} {} in the {} .",
            f.severity.name(),
            DISEASES[f.disease],
            LOCATIONS[f.location]
        ));
    }
    if rng.random_bool(cfg.negation_prob) {
        let negatives: Vec<usize> = (0..DISEASES.len()).filter(|d| !diseases.contains(d)).collect();
        let d = *negatives.choose(&mut rng).expect("at least 11 negatives");
        sentences.push(format!("no {} is seen .", DISEASES[d]));
    }
    sentences.push(String::from(*CLOSERS.choose(&mut rng).expect("closers")));

    let mut labels = LabelVector::default();
    for &d in &diseases {
        labels.set(d, true);
    }
    SyntheticStudy {
        id: format!("s{seed}-{index:06}"),
        height: IMAGE_SIDE,
        width: IMAGE_SIDE,
        pixels,
        report: sentences.join(" "),
        labels,
    }
}

/// Studies `0..count` of the corpus seeded with `seed`.
pub fn generate_corpus(count: usize, seed: u64, cfg: &GeneratorConfig) -> Vec<SyntheticStudy> {
    generate_range(seed, 0, count, cfg)
}

/// Studies `start..start + count`; used to carve disjoint splits from one seed.
pub fn generate_range(seed: u64, start: u64, count: usize, cfg: &GeneratorConfig) -> Vec<SyntheticStudy> {
    let catalog = DiseaseCatalog::new();
    (0..count as u64)
        .map(|i| generate_study(&catalog, seed, start + i, cfg))
        .collect()
}

/// Non-empty sentences of a report, split on ".", without the period.
pub fn sentences(report: &str) -> Vec<&str> {
    report.split('.').map(str::trim).filter(|s| !s.is_empty()).collect()
}

/// Draws one sentence uniformly from the report.
pub fn sample_sentence<'a>(report: &'a str, rng: &mut impl Rng) -> Result<&'a str> {
    let all = sentences(report);
    match all.choose(rng) {
        Some(s) => Ok(s),
        None => contract("cannot sample a sentence from an empty report"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::label_report;

    #[test]
    fn generation_is_deterministic() {
        let cfg = GeneratorConfig::default();
        assert_eq!(generate_corpus(1, 7, &cfg), generate_corpus(1, 7, &cfg));
        assert_ne!(generate_corpus(1, 7, &cfg), generate_corpus(1, 8, &cfg));
    }

    #[test]
    fn range_matches_corpus_suffix() {
        let cfg = GeneratorConfig::default();
        let all = generate_corpus(6, 3, &cfg);
        assert_eq!(generate_range(3, 4, 2, &cfg), all[4..].to_vec());
    }

    #[test]
    fn negative_studies_are_background_only() {
        let cfg = GeneratorConfig::default();
        let studies = generate_corpus(200, 11, &cfg);
        let mut seen = 0;
        for s in studies.iter().filter(|s| s.positives() == 0) {
            seen += 1;
            assert!(s.pixels.iter().all(|&p| p < GLYPH_THRESHOLD));
            assert!(label_report(&s.report).count() == 0, "{}", s.report);
        }
        assert!(seen > 20);
    }

    #[test]
    fn count_histogram_matches_distribution() {
        let cfg = GeneratorConfig::default();
        let mut hist = [0usize; 4];
        for s in generate_corpus(2000, 5, &cfg) {
            hist[s.positives()] += 1;
        }
        for (h, p) in hist.iter().zip(cfg.count_probs) {
            let f = *h as f64 / 2000.0;
            assert!((f - p).abs() < 0.05, "{hist:?}");
        }
    }

    #[test]
    fn reports_have_two_to_six_sentences() {
        for s in generate_corpus(300, 2, &GeneratorConfig::default()) {
            let n = sentences(&s.report).len();
            assert!((2..=6).contains(&n), "{}", s.report);
        }
    }

    #[test]
    fn positives_appear_once_in_plain_sentences() {
        for s in generate_corpus(300, 9, &GeneratorConfig::default()) {
            for d in 0..DISEASES.len() {
                let hits: Vec<&str> = sentences(&s.report)
                    .into_iter()
                    .filter(|x| x.contains(DISEASES[d]))
                    .collect();
                if s.labels.get(d) {
                    assert_eq!(hits.len(), 1);
                    assert!(hits[0].starts_with("there is"));
                } else {
                    assert!(hits.iter().all(|h| h.starts_with("no ")));
                }
            }
        }
    }

    #[test]
    fn glyphs_pairwise_distinct() {
        let cat = DiseaseCatalog::new();
        for a in 0..14 {
            for b in a + 1..14 {
                let dist: f32 = cat
                    .glyph(a)
                    .iter()
                    .zip(cat.glyph(b))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f32>()
                    .sqrt();
                assert!(dist > 0.5, "{a} {b} {dist}");
            }
        }
    }

    #[test]
    fn sampling_sentences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_sentence("only one .", &mut rng).unwrap(), "only one");
        assert!(sample_sentence("", &mut rng).is_err());
        assert!(sample_sentence(" . . ", &mut rng).is_err());
        assert_eq!(sentences("a b . c ."), ["a b", "c"]);

        let report = "a . b . c . d .";
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            let s = sample_sentence(report, &mut rng).unwrap();
            counts[(s.as_bytes()[0] - b'a') as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e4 - 0.25).abs() < 0.02, "{counts:?}");
        }
    }
}
