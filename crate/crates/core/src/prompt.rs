//! Class-shared and class-specific prompt learning.
//!
//! Both objectives minimise `-log p(y | x)` where
//! `p(c | x) = softmax_c(⟨w_c^P, f⟩ / τ)` and `w_c^P` encodes class `c` under
//! prompt `P`. A shared prompt sees samples of every base class; a
//! class-specific prompt `P_c` sees only samples of class `c` but keeps the
//! full-catalog denominator.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::{template_prompt, ClassCatalog, Embedding, Encoder, Sample, TokenMatrix, DEFAULT_TEMPLATE};
use crate::error::{CakiError, Result};
use crate::numerics::{adamw_step, cosine, cross_entropy, softmax, AdamWHyper, AdamWState, Matrix};
use crate::seed;

/// Labelled few-shot samples; labels index the training catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotDataset {
    samples: Vec<(Sample, usize)>,
}

impl FewShotDataset {
    pub fn new(samples: Vec<(Sample, usize)>, classes: usize) -> Result<Self> {
        if let Some((_, c)) = samples.iter().find(|(_, c)| *c >= classes) {
            return Err(CakiError::invalid(format!(
                "sample label {c} out of range for {classes} classes"
            )));
        }
        Ok(FewShotDataset { samples })
    }

    pub fn samples(&self) -> &[(Sample, usize)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Shot count per class present.
    pub fn shots_per_class(&self) -> BTreeMap<usize, usize> {
        let mut shots = BTreeMap::new();
        for (_, c) in &self.samples {
            *shots.entry(*c).or_insert(0) += 1;
        }
        shots
    }

    /// Samples of one class only.
    pub fn restrict(&self, class: usize) -> FewShotDataset {
        FewShotDataset {
            samples: self.samples.iter().filter(|(_, c)| *c == class).copied().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub seed: u64,
    pub adamw: AdamWHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 1,
            temperature: 1.0,
            seed: 0,
            adamw: AdamWHyper::default(),
        }
    }
}

impl TrainConfig {
    pub fn learning_rate(&self) -> f64 {
        self.adamw.learning_rate
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CakiError::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(CakiError::invalid("batch size must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(CakiError::invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        self.adamw.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean per-sample loss of each epoch, measured before each update.
    pub epoch_losses: Vec<f64>,
    pub prompt: TokenMatrix,
    pub steps: usize,
}

impl TrainReport {
    pub fn first_loss(&self) -> f64 {
        self.epoch_losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.epoch_losses.last().unwrap()
    }
}

/// Text features of one prompt over a catalog, computed once and reused for
/// many images.
#[derive(Debug, Clone)]
pub struct TextHead {
    features: Vec<Embedding>,
}

impl TextHead {
    pub fn new(backend: &dyn Encoder, prompt: &TokenMatrix, catalog: &ClassCatalog) -> Result<Self> {
        backend.check_prompt(prompt)?;
        let features = catalog
            .tokens()
            .iter()
            .map(|t| backend.encode_text(prompt, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(TextHead { features })
    }

    pub fn features(&self) -> &[Embedding] {
        &self.features
    }

    pub fn similarities(&self, image: &[f64]) -> Result<Vec<f64>> {
        self.features.iter().map(|w| cosine(w, image)).collect()
    }

    pub fn probabilities(&self, image: &[f64], temperature: f64) -> Result<Vec<f64>> {
        softmax(&self.similarities(image)?, temperature)
    }
}

/// Class distribution over `catalog` for one image feature under `prompt`.
pub fn class_probabilities(
    backend: &dyn Encoder,
    prompt: &TokenMatrix,
    catalog: &ClassCatalog,
    image: &Embedding,
    temperature: f64,
) -> Result<Vec<f64>> {
    TextHead::new(backend, prompt, catalog)?.probabilities(image, temperature)
}

/// Cross-entropy of `target` and its gradient with respect to the prompt.
///
/// Backward chain: `∂L/∂s_j = (p_j − δ_jy)/τ`, `∂L/∂w_j = ∂L/∂s_j · f` (both
/// features are unit-norm, so the cosine is a plain dot product here), then
/// the encoder's VJP for each class.
pub fn prompt_loss_and_grad(
    backend: &dyn Encoder,
    prompt: &TokenMatrix,
    catalog: &ClassCatalog,
    image: &Embedding,
    target: usize,
    temperature: f64,
) -> Result<(f64, TokenMatrix)> {
    let probs = class_probabilities(backend, prompt, catalog, image, temperature)?;
    let loss = cross_entropy(&probs, target)?;
    let mut grad = Matrix::zeros(prompt.rows(), prompt.cols());
    let mut cotangent = vec![0.0; image.len()];
    for (j, p) in probs.iter().enumerate() {
        let indicator = if j == target { 1.0 } else { 0.0 };
        let ds = (p - indicator) / temperature;
        for (c, f) in cotangent.iter_mut().zip(image.iter()) {
            *c = ds * f;
        }
        let g = backend.encode_text_vjp(prompt, catalog.token(j), &cotangent)?;
        grad.add_scaled(&g, 1.0);
    }
    Ok((loss, grad))
}

/// Prompt initialised from the pseudo word embeddings of the default template.
pub fn initial_prompt(backend: &dyn Encoder) -> TokenMatrix {
    let dims = backend.dims();
    template_prompt(DEFAULT_TEMPLATE, dims.prompt_len, dims.token_dim)
}

fn train_prompt(
    backend: &dyn Encoder,
    dataset: &FewShotDataset,
    catalog: &ClassCatalog,
    config: &TrainConfig,
    shuffle_seed: u64,
) -> Result<TrainReport> {
    config.validate()?;
    if !backend.supports_vjp() {
        return Err(CakiError::Unsupported(
            "prompt training needs an encoder with a text gradient".into(),
        ));
    }
    if dataset.is_empty() {
        return Err(CakiError::invalid("cannot train on an empty dataset"));
    }
    if let Some((_, c)) = dataset.samples().iter().find(|(_, c)| *c >= catalog.len()) {
        return Err(CakiError::invalid(format!(
            "sample label {c} out of range for a {}-class catalog",
            catalog.len()
        )));
    }

    // Image features are frozen; encode them once.
    let images = dataset
        .samples()
        .iter()
        .map(|(s, _)| backend.encode_image(s))
        .collect::<Result<Vec<_>>>()?;

    let mut prompt = initial_prompt(backend);
    let mut state = AdamWState::for_params(&prompt);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut steps = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut seed::rng(&[shuffle_seed, seed::TAG_SHUFFLE, epoch as u64]));
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grad = Matrix::zeros(prompt.rows(), prompt.cols());
            for &i in batch {
                let target = dataset.samples()[i].1;
                let (loss, g) =
                    prompt_loss_and_grad(backend, &prompt, catalog, &images[i], target, config.temperature)?;
                total += loss;
                grad.add_scaled(&g, 1.0);
            }
            grad.scale(1.0 / batch.len() as f64);
            (prompt, state) = adamw_step(&prompt, &grad, &state, &config.adamw)?;
            steps += 1;
        }
        epoch_losses.push(total / dataset.len() as f64);
    }
    Ok(TrainReport { epoch_losses, prompt, steps })
}

/// Learns one prompt shared by all classes of `catalog`.
pub fn train_shared_prompt(
    backend: &dyn Encoder,
    dataset: &FewShotDataset,
    catalog: &ClassCatalog,
    config: &TrainConfig,
) -> Result<TrainReport> {
    train_prompt(backend, dataset, catalog, config, config.seed)
}

/// Learns the class-specific prompt of `class_index` from that class's samples.
pub fn train_class_prompt(
    backend: &dyn Encoder,
    class_index: usize,
    dataset: &FewShotDataset,
    catalog: &ClassCatalog,
    config: &TrainConfig,
) -> Result<TrainReport> {
    if class_index >= catalog.len() {
        return Err(CakiError::invalid(format!(
            "class {class_index} out of range for a {}-class catalog",
            catalog.len()
        )));
    }
    if let Some((_, c)) = dataset.samples().iter().find(|(_, c)| *c != class_index) {
        return Err(CakiError::invalid(format!(
            "class-specific dataset for class {class_index} contains a sample of class {c}"
        )));
    }
    train_prompt(
        backend,
        dataset,
        catalog,
        config,
        seed::derive(&[config.seed, class_index as u64]),
    )
}
