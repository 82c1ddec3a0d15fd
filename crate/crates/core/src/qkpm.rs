//! Training-free query-key prompt matching.
//!
//! Inference runs coarse to fine:
//!
//! 1. the class-shared prompt gives a coarse distribution `p(x)`;
//! 2. the image feature is matched against the bank keys,
//!    `γ_c = softmax_c(⟨q(x), k_c⟩ / τ)`, and the top-K entries are kept;
//! 3. each retrieved class-specific prompt classifies the image over the test
//!    catalog, and the results are summed with weights `γ`;
//! 4. the refined score is `p(x) + β · Σ γ_i p^(s_i)(x)`, classified by argmax.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::bank::{bank_lookup, KeyTemplate, PromptBank};
use crate::encoder::{ClassCatalog, Embedding, Encoder, TokenMatrix};
use crate::error::{CakiError, Result};
use crate::numerics::{argmax, cosine, softmax};
use crate::prompt::TextHead;
use crate::seed;

/// Score vector over the test catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scores: Vec<f64>,
    /// True when `scores` is a probability distribution.
    pub normalized: bool,
}

impl Prediction {
    pub fn label(&self) -> usize {
        argmax(&self.scores)
    }

    /// Scores rescaled to sum to one, for display.
    pub fn display_normalized(&self) -> Vec<f64> {
        let total: f64 = self.scores.iter().sum();
        self.scores.iter().map(|s| s / total).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchResult {
    pub cache_index: usize,
    pub gamma: f64,
}

/// How the matching scores weight the fine ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaMode {
    /// Full-bank softmax scores, used as they are.
    #[default]
    Raw,
    /// Scores renormalised over the retrieved entries.
    Topk,
}

impl FromStr for GammaMode {
    type Err = CakiError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "raw" => Ok(GammaMode::Raw),
            "topk" => Ok(GammaMode::Topk),
            _ => Err(CakiError::invalid(format!("unknown gamma mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QkpmConfig {
    pub top_k: usize,
    pub beta: f64,
    pub temperature: f64,
    pub gamma_mode: GammaMode,
    pub key_template: KeyTemplate,
}

impl Default for QkpmConfig {
    fn default() -> Self {
        QkpmConfig {
            top_k: 3,
            beta: 0.3,
            temperature: 1.0,
            gamma_mode: GammaMode::Raw,
            key_template: KeyTemplate::Shared,
        }
    }
}

impl QkpmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(CakiError::invalid("K must be at least 1"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(CakiError::invalid(format!("beta must be nonnegative, got {}", self.beta)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(CakiError::invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Prompt selection strategy for the fine ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    /// Top-K query-key matching.
    Matching,
    /// K random entries with uniform weights.
    Random,
    /// Every entry, weighted by its matching score.
    All,
}

impl Strategy {
    pub fn tag(self) -> &'static str {
        match self {
            Strategy::Matching => "M",
            Strategy::Random => "R",
            Strategy::All => "A",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Strategy {
    type Err = CakiError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m" | "matching" => Ok(Strategy::Matching),
            "r" | "random" => Ok(Strategy::Random),
            "a" | "all" => Ok(Strategy::All),
            _ => Err(CakiError::invalid(format!("unknown strategy {s:?}"))),
        }
    }
}

/// Coarse distribution from the class-shared prompt.
pub fn coarse_predict(
    backend: &dyn Encoder,
    shared_prompt: &TokenMatrix,
    test_catalog: &ClassCatalog,
    image: &Embedding,
    temperature: f64,
) -> Result<Prediction> {
    let head = TextHead::new(backend, shared_prompt, test_catalog)?;
    Ok(Prediction {
        scores: head.probabilities(image, temperature)?,
        normalized: true,
    })
}

/// Matching scores of `query` against every bank key.
pub fn match_scores(query: &[f64], bank: &PromptBank, temperature: f64) -> Result<Vec<f64>> {
    if bank.is_empty() {
        return Err(CakiError::EmptyBank);
    }
    let sims = bank
        .keys()
        .map(|k| cosine(query, k))
        .collect::<Result<Vec<_>>>()?;
    softmax(&sims, temperature)
}

/// Indices of the `k` largest scores, descending, ties to the lower index.
fn select_top(scores: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    let mut top: Vec<usize> = Vec::with_capacity(k + 1);
    for (i, &s) in scores.iter().enumerate() {
        // Later indices lose ties, so only a strictly larger score moves ahead.
        let pos = top.partition_point(|&j| scores[j] >= s);
        if pos < k {
            top.insert(pos, i);
            top.truncate(k);
        }
    }
    top
}

/// Top-K bank entries for `query`. `K` larger than the bank is clamped.
pub fn match_topk(query: &[f64], bank: &PromptBank, k: usize, temperature: f64) -> Result<Vec<MatchResult>> {
    if k == 0 {
        return Err(CakiError::invalid("K must be at least 1"));
    }
    let gammas = match_scores(query, bank, temperature)?;
    if k > gammas.len() {
        log::debug!("K={k} exceeds bank size {}; clamping", gammas.len());
    }
    Ok(select_top(&gammas, k)
        .into_iter()
        .map(|i| MatchResult { cache_index: i, gamma: gammas[i] })
        .collect())
}

fn weighted_sum(heads: &[(&TextHead, f64)], image: &[f64], temperature: f64, classes: usize) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; classes];
    for (head, gamma) in heads {
        let p = head.probabilities(image, temperature)?;
        for (a, v) in acc.iter_mut().zip(p) {
            *a += gamma * v;
        }
    }
    Ok(acc)
}

/// `Σ_i γ_i · p^(s_i)`, where `p^(s_i)` classifies the image over the test
/// catalog using the retrieved class-specific prompt. Unnormalised.
pub fn fine_ensemble(
    backend: &dyn Encoder,
    bank: &PromptBank,
    matches: &[MatchResult],
    test_catalog: &ClassCatalog,
    image: &Embedding,
    temperature: f64,
) -> Result<Vec<f64>> {
    if matches.is_empty() {
        return Err(CakiError::invalid("fine ensemble needs at least one match"));
    }
    let indices: Vec<usize> = matches.iter().map(|m| m.cache_index).collect();
    let entries = bank_lookup(bank, &indices)?;
    let heads = entries
        .iter()
        .map(|e| TextHead::new(backend, &e.value, test_catalog))
        .collect::<Result<Vec<_>>>()?;
    let weighted: Vec<(&TextHead, f64)> = heads.iter().zip(matches).map(|(h, m)| (h, m.gamma)).collect();
    weighted_sum(&weighted, image, temperature, test_catalog.len())
}

/// `coarse + β · fine`. The result is a score, not a distribution.
pub fn refine(coarse: &Prediction, fine: &[f64], beta: f64) -> Result<Prediction> {
    if coarse.scores.len() != fine.len() {
        return Err(CakiError::invalid(format!(
            "coarse has {} scores, fine has {}",
            coarse.scores.len(),
            fine.len()
        )));
    }
    Ok(Prediction {
        scores: coarse.scores.iter().zip(fine).map(|(c, f)| c + beta * f).collect(),
        normalized: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub label: usize,
    pub prediction: Prediction,
    pub coarse: Prediction,
    pub matches: Vec<MatchResult>,
}

/// Inference engine with every text head precomputed for one test catalog.
///
/// Produces the same numbers as the free functions in this module, computed
/// once per prompt instead of once per image.
pub struct Qkpm<'a> {
    bank: &'a PromptBank,
    config: QkpmConfig,
    coarse_head: TextHead,
    entry_heads: Vec<TextHead>,
    classes: usize,
}

impl<'a> Qkpm<'a> {
    pub fn new(
        backend: &dyn Encoder,
        bank: &'a PromptBank,
        test_catalog: &ClassCatalog,
        config: QkpmConfig,
    ) -> Result<Self> {
        config.validate()?;
        if bank.is_empty() {
            return Err(CakiError::EmptyBank);
        }
        bank.check_encoder(backend)?;
        if test_catalog.is_empty() {
            return Err(CakiError::invalid("empty test catalog"));
        }
        let coarse_head = TextHead::new(backend, bank.shared_prompt(), test_catalog)?;
        let entry_heads = bank
            .entries()
            .iter()
            .map(|e| TextHead::new(backend, &e.value, test_catalog))
            .collect::<Result<Vec<_>>>()?;
        Ok(Qkpm {
            bank,
            config,
            coarse_head,
            entry_heads,
            classes: test_catalog.len(),
        })
    }

    pub fn config(&self) -> &QkpmConfig {
        &self.config
    }

    pub fn coarse(&self, image: &Embedding) -> Result<Prediction> {
        Ok(Prediction {
            scores: self.coarse_head.probabilities(image, self.config.temperature)?,
            normalized: true,
        })
    }

    /// Entries chosen by `strategy` with their ensemble weights.
    pub fn select(&self, image: &Embedding, strategy: Strategy, strategy_seed: u64) -> Result<Vec<MatchResult>> {
        let tau = self.config.temperature;
        let n = self.bank.len();
        let mut matches = match strategy {
            Strategy::Matching => match_topk(image, self.bank, self.config.top_k, tau)?,
            Strategy::All => match_scores(image, self.bank, tau)?
                .into_iter()
                .enumerate()
                .map(|(i, gamma)| MatchResult { cache_index: i, gamma })
                .collect(),
            Strategy::Random => {
                let k = self.config.top_k.min(n);
                let mut rng = seed::rng(&[strategy_seed, seed::TAG_RANDOM_STRATEGY]);
                let gamma = 1.0 / k as f64;
                index::sample(&mut rng, n, k)
                    .into_iter()
                    .map(|i| MatchResult { cache_index: i, gamma })
                    .collect()
            }
        };
        if self.config.gamma_mode == GammaMode::Topk {
            let total: f64 = matches.iter().map(|m| m.gamma).sum();
            matches.iter_mut().for_each(|m| m.gamma /= total);
        }
        Ok(matches)
    }

    pub fn fine(&self, image: &Embedding, matches: &[MatchResult]) -> Result<Vec<f64>> {
        if matches.is_empty() {
            return Err(CakiError::invalid("fine ensemble needs at least one match"));
        }
        let weighted = matches
            .iter()
            .map(|m| {
                self.entry_heads
                    .get(m.cache_index)
                    .map(|h| (h, m.gamma))
                    .ok_or_else(|| CakiError::invalid(format!("cache index {} out of range", m.cache_index)))
            })
            .collect::<Result<Vec<_>>>()?;
        weighted_sum(&weighted, image, self.config.temperature, self.classes)
    }

    pub fn classify(&self, image: &Embedding, strategy: Strategy, strategy_seed: u64) -> Result<Classification> {
        let coarse = self.coarse(image)?;
        let matches = self.select(image, strategy, strategy_seed)?;
        let fine = self.fine(image, &matches)?;
        let prediction = refine(&coarse, &fine, self.config.beta)?;
        Ok(Classification {
            label: prediction.label(),
            prediction,
            coarse,
            matches,
        })
    }
}

/// Full pipeline for a single image.
pub fn classify(
    backend: &dyn Encoder,
    bank: &PromptBank,
    test_catalog: &ClassCatalog,
    image: &Embedding,
    config: QkpmConfig,
    strategy: Strategy,
    strategy_seed: u64,
) -> Result<Classification> {
    Qkpm::new(backend, bank, test_catalog, config)?.classify(image, strategy, strategy_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::build_bank;
    use crate::encoder::{make_synthetic_world, SampleFactory, SyntheticWorld, SyntheticWorldSpec};
    use crate::numerics::Matrix;
    use crate::prompt::{class_probabilities, initial_prompt};

    fn setup(classes: usize) -> (SyntheticWorld, ClassCatalog, SampleFactory, PromptBank) {
        let (w, cat, f) = make_synthetic_world(SyntheticWorldSpec::new(7, classes, 16)).unwrap();
        let shared = initial_prompt(&w);
        let prompts: Vec<_> = (0..classes)
            .map(|c| {
                let mut p = shared.clone();
                p.set(c % 4, c % 8, p.get(c % 4, c % 8) + 0.03);
                p
            })
            .collect();
        let bank = build_bank(&w, &cat, &shared, &prompts, KeyTemplate::Shared).unwrap();
        (w, cat, f, bank)
    }

    #[test]
    fn select_top_orders_and_breaks_ties() {
        assert_eq!(select_top(&[3.0, 1.0, 2.0], 2), vec![0, 2]);
        assert_eq!(select_top(&[1.0, 1.0, 1.0], 2), vec![0, 1]);
        assert_eq!(select_top(&[1.0, 5.0, 5.0, 0.0], 9), vec![1, 2, 0, 3]);
    }

    #[test]
    fn single_key_bank_matches_with_certainty() {
        let (w, cat, f, _) = setup(1);
        let shared = initial_prompt(&w);
        let bank = build_bank(&w, &cat, &shared, &[shared.clone()], KeyTemplate::Shared).unwrap();
        let img = w.encode_image(&f.sample(0, 3)).unwrap();
        let m = match_topk(&img, &bank, 1, 1.0).unwrap();
        assert_eq!(m, vec![MatchResult { cache_index: 0, gamma: 1.0 }]);
        let coarse = coarse_predict(&w, &shared, &cat, &img, 1.0).unwrap();
        assert_eq!(coarse.scores, vec![1.0]);
    }

    #[test]
    fn self_match_dominates_orthogonal_keys() {
        let (w, cat, _, _) = setup(8);
        let shared = initial_prompt(&w);
        let mut bank = build_bank(&w, &cat, &shared, &vec![shared.clone(); 8], KeyTemplate::Shared).unwrap();
        // Rebuild the keys as basis vectors through the byte format.
        let mut bytes = bank.to_bytes().unwrap();
        let prompt_bytes = 4 * 4 * 8;
        let mut at = 8 + 20 + 33 + prompt_bytes;
        for c in 0..8 {
            at += 2 + 9;
            for d in 0..16 {
                let v: f32 = if d == c { 1.0 } else { 0.0 };
                bytes[at + 4 * d..at + 4 * d + 4].copy_from_slice(&v.to_le_bytes());
            }
            at += 4 * 16 + prompt_bytes;
        }
        let n = bytes.len();
        let crc = crc32c::crc32c(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        bank = PromptBank::from_bytes(&bytes).unwrap();
        let mut query = vec![0.0; 16];
        query[3] = 1.0;
        let m = match_topk(&query, &bank, 1, 1.0).unwrap();
        assert_eq!(m[0].cache_index, 3);
    }

    #[test]
    fn topk_clamps_and_gammas_sum_to_one() {
        let (w, _, f, bank) = setup(5);
        let img = w.encode_image(&f.sample(1, 0)).unwrap();
        let all = match_scores(&img, &bank, 1.0).unwrap();
        assert!((all.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let m = match_topk(&img, &bank, 9, 1.0).unwrap();
        assert_eq!(m.len(), 5);
        assert!(m.windows(2).all(|p| p[0].gamma >= p[1].gamma));
        assert!(matches!(match_topk(&img, &bank, 0, 1.0), Err(CakiError::InvalidArgument(_))));
    }

    #[test]
    fn empty_bank_errors() {
        let (w, cat, f, _) = setup(3);
        let empty = build_bank(&w, &cat.subset(&[]).unwrap(), &initial_prompt(&w), &[], KeyTemplate::Shared).unwrap();
        let img = w.encode_image(&f.sample(0, 0)).unwrap();
        assert!(matches!(match_topk(&img, &empty, 1, 1.0), Err(CakiError::EmptyBank)));
    }

    #[test]
    fn fine_ensemble_degenerate_cases() {
        let (w, cat, f, bank) = setup(4);
        let img = w.encode_image(&f.sample(2, 0)).unwrap();
        let one = fine_ensemble(&w, &bank, &[MatchResult { cache_index: 1, gamma: 1.0 }], &cat, &img, 1.0).unwrap();
        let direct = class_probabilities(&w, &bank.entries()[1].value, &cat, &img, 1.0).unwrap();
        assert_eq!(one, direct);

        // Identical prompts with equal weights.
        let shared = initial_prompt(&w);
        let same = build_bank(&w, &cat, &shared, &vec![shared.clone(); 4], KeyTemplate::Shared).unwrap();
        let half = [MatchResult { cache_index: 0, gamma: 0.5 }, MatchResult { cache_index: 3, gamma: 0.5 }];
        let got = fine_ensemble(&w, &same, &half, &cat, &img, 1.0).unwrap();
        let expected = class_probabilities(&w, &shared, &cat, &img, 1.0).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }

        assert!(fine_ensemble(&w, &bank, &[], &cat, &img, 1.0).is_err());
        let bad = [MatchResult { cache_index: 9, gamma: 1.0 }];
        assert!(matches!(fine_ensemble(&w, &bank, &bad, &cat, &img, 1.0), Err(CakiError::InvalidArgument(_))));
    }

    #[test]
    fn fine_ensemble_three_terms() {
        let (w, cat, f, bank) = setup(6);
        let img = w.encode_image(&f.sample(5, 2)).unwrap();
        let m = match_topk(&img, &bank, 3, 1.0).unwrap();
        let got = fine_ensemble(&w, &bank, &m, &cat, &img, 1.0).unwrap();
        let p: Vec<Vec<f64>> = m
            .iter()
            .map(|r| class_probabilities(&w, &bank.entries()[r.cache_index].value, &cat, &img, 1.0).unwrap())
            .collect();
        for j in 0..6 {
            let expected = m[0].gamma * p[0][j] + m[1].gamma * p[1][j] + m[2].gamma * p[2][j];
            assert!((got[j] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn refine_cases() {
        let coarse = Prediction { scores: vec![0.6, 0.4], normalized: true };
        let out = refine(&coarse, &[0.1, 0.9], 0.5).unwrap();
        assert!((out.scores[0] - 0.65).abs() < 1e-15 && (out.scores[1] - 0.85).abs() < 1e-15);
        assert_eq!(coarse.label(), 0);
        assert_eq!(out.label(), 1);
        assert!(!out.normalized);
        assert_eq!(refine(&coarse, &[0.1, 0.9], 0.0).unwrap().scores, coarse.scores);
        assert!(refine(&coarse, &[0.1], 0.5).is_err());
        assert_eq!(QkpmConfig::default().beta, 0.3);
        assert_eq!(QkpmConfig::default().top_k, 3);
    }

    #[test]
    fn strategies() {
        let (w, cat, f, bank) = setup(6);
        let img = w.encode_image(&f.sample(4, 1)).unwrap();
        let cfg = QkpmConfig::default();
        let a = classify(&w, &bank, &cat, &img, cfg, Strategy::All, 0).unwrap();
        assert_eq!(a.matches.len(), 6);
        let r = classify(&w, &bank, &cat, &img, cfg, Strategy::Random, 11).unwrap();
        assert_eq!(r.matches.len(), 3);
        assert!(r.matches.iter().all(|m| m.gamma == 1.0 / 3.0));
        let mut idx: Vec<_> = r.matches.iter().map(|m| m.cache_index).collect();
        idx.sort();
        idx.dedup();
        assert_eq!(idx.len(), 3);
        assert_eq!(r, classify(&w, &bank, &cat, &img, cfg, Strategy::Random, 11).unwrap());

        let flat = QkpmConfig { beta: 0.0, ..cfg };
        let m = classify(&w, &bank, &cat, &img, flat, Strategy::Matching, 0).unwrap();
        let coarse = coarse_predict(&w, bank.shared_prompt(), &cat, &img, 1.0).unwrap();
        assert_eq!(m.prediction.scores, coarse.scores);
        assert_eq!(m.label, coarse.label());
        assert_eq!(m.coarse, coarse);
    }

    #[test]
    fn topk_gamma_mode_renormalises() {
        let (w, cat, f, bank) = setup(6);
        let img = w.encode_image(&f.sample(0, 1)).unwrap();
        let cfg = QkpmConfig { gamma_mode: GammaMode::Topk, ..Default::default() };
        let engine = Qkpm::new(&w, &bank, &cat, cfg).unwrap();
        let m = engine.select(&img, Strategy::Matching, 0).unwrap();
        assert!((m.iter().map(|r| r.gamma).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn parse_names() {
        assert_eq!("m".parse::<Strategy>().unwrap(), Strategy::Matching);
        assert_eq!("R".parse::<Strategy>().unwrap(), Strategy::Random);
        assert_eq!("a".parse::<Strategy>().unwrap(), Strategy::All);
        assert!("x".parse::<Strategy>().is_err());
        assert_eq!("topk".parse::<GammaMode>().unwrap(), GammaMode::Topk);
    }

    #[test]
    fn novel_catalog_with_base_bank() {
        let (w, cat, f, _) = setup(6);
        let base = cat.subset(&[0, 1, 2]).unwrap();
        let novel = cat.subset(&[3, 4, 5]).unwrap();
        let shared = initial_prompt(&w);
        let bank = build_bank(&w, &base, &shared, &vec![Matrix::zeros(4, 8); 3], KeyTemplate::Shared).unwrap();
        let img = w.encode_image(&f.sample(4, 0)).unwrap();
        let out = classify(&w, &bank, &novel, &img, QkpmConfig::default(), Strategy::Matching, 0).unwrap();
        assert_eq!(out.prediction.scores.len(), 3);
        assert!(out.matches.iter().all(|m| m.cache_index < 3));
    }
}
