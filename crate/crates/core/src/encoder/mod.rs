//! Frozen encoder backends.
//!
//! A backend maps samples to unit-norm image features and (prompt, class
//! token) pairs to unit-norm text features. Backends that support prompt
//! training also expose the vector-Jacobian product of the text path.

use std::fmt;
use std::ops::Deref;

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{CakiError, Result};
use crate::numerics::{self, Matrix};
use crate::seed;

mod offline;
mod synthetic;

pub use offline::{
    export_features, load_offline_features, read_feature_bytes, write_feature_file, FeatureClass,
    FeatureFile, OfflineBackend, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use synthetic::{make_synthetic_world, SampleFactory, SyntheticWorld, SyntheticWorldSpec};

/// Learnable prompt: `L` token rows of width `Dt`.
pub type TokenMatrix = Matrix;

/// Template used to initialise prompts.
pub const DEFAULT_TEMPLATE: &str = "a photo of a";
/// Prompt token count.
pub const DEFAULT_PROMPT_LEN: usize = 4;
/// Standard deviation of token embeddings (template rows, class tokens).
pub const TOKEN_SCALE: f64 = 0.02;

/// Tolerance on the unit-norm invariant.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// A unit-norm feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalises `raw` to unit length.
    pub fn normalized(raw: &[f64]) -> Result<Self> {
        Ok(Embedding(numerics::normalize(raw)?))
    }

    /// Wraps a vector that is already unit-norm.
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let n = numerics::norm(&values);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(CakiError::invalid(format!("embedding norm {n} is not 1")));
        }
        Ok(Embedding(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Ordered class names with their token embeddings. Order defines class
/// indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCatalog {
    names: Vec<String>,
    class_tokens: Vec<Vec<f64>>,
}

impl ClassCatalog {
    pub fn new(names: Vec<String>, class_tokens: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != class_tokens.len() {
            return Err(CakiError::invalid(format!(
                "{} class names but {} class tokens",
                names.len(),
                class_tokens.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(CakiError::invalid(format!("duplicate class name {name:?}")));
            }
        }
        if let Some(first) = class_tokens.first() {
            let width = first.len();
            if class_tokens.iter().any(|t| t.len() != width) {
                return Err(CakiError::invalid("class tokens have unequal widths"));
            }
        }
        Ok(ClassCatalog { names, class_tokens })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn token(&self, index: usize) -> &[f64] {
        &self.class_tokens[index]
    }

    pub fn tokens(&self) -> &[Vec<f64>] {
        &self.class_tokens
    }

    /// Catalog restricted to `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut names = Vec::with_capacity(indices.len());
        let mut tokens = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(CakiError::invalid(format!(
                    "class index {i} out of range for {} classes",
                    self.len()
                )));
            }
            names.push(self.names[i].clone());
            tokens.push(self.class_tokens[i].clone());
        }
        ClassCatalog::new(names, tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum BackendKind {
    Synthetic = 1,
    Offline = 2,
}

impl BackendKind {
    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(BackendKind::Synthetic),
            2 => Some(BackendKind::Offline),
            _ => None,
        }
    }

    pub fn tag(self) -> u8 {
        self as u8
    }
}

/// Identity of a frozen encoder. Equal fingerprints mean equal encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EncoderFingerprint {
    pub kind: BackendKind,
    pub dim: usize,
    pub token_dim: usize,
    pub prompt_len: usize,
    /// SHA-256 of the world spec (synthetic) or of the source file (offline).
    pub digest: [u8; 32],
}

impl fmt::Display for EncoderFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            BackendKind::Synthetic => "synthetic",
            BackendKind::Offline => "offline",
        };
        write!(
            f,
            "{kind}(D={}, Dt={}, L={}, digest={})",
            self.dim,
            self.token_dim,
            self.prompt_len,
            hex(&self.digest[..8])
        )
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Encoder dimensions: feature width `dim`, token width `token_dim`, prompt
/// length `prompt_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub dim: usize,
    pub token_dim: usize,
    pub prompt_len: usize,
}

/// Identity of an image sample in a backend's sample space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sample {
    /// A draw from class `class` of a synthetic world, with its own noise seed.
    Synthetic { class: usize, noise: u64 },
    /// A stored record of an offline feature file.
    Record(u64),
}

pub trait Encoder: Send + Sync {
    fn dims(&self) -> Dims;

    fn fingerprint(&self) -> EncoderFingerprint;

    fn encode_image(&self, sample: &Sample) -> Result<Embedding>;

    fn encode_text(&self, prompt: &TokenMatrix, class_token: &[f64]) -> Result<Embedding>;

    /// Pullback of `cotangent` through `encode_text` with respect to the prompt.
    fn encode_text_vjp(
        &self,
        _prompt: &TokenMatrix,
        _class_token: &[f64],
        _cotangent: &[f64],
    ) -> Result<TokenMatrix> {
        Err(CakiError::Unsupported(
            "this backend does not expose a text-encoder gradient".into(),
        ))
    }

    fn supports_vjp(&self) -> bool {
        false
    }

    fn check_prompt(&self, prompt: &TokenMatrix) -> Result<()> {
        let dims = self.dims();
        if prompt.shape() != (dims.prompt_len, dims.token_dim) {
            return Err(CakiError::invalid(format!(
                "prompt shape {:?} does not match encoder ({}, {})",
                prompt.shape(),
                dims.prompt_len,
                dims.token_dim
            )));
        }
        Ok(())
    }
}

/// Deterministic pseudo word embeddings for a template string: `rows × cols`
/// Gaussian entries with standard deviation [`TOKEN_SCALE`], seeded only by
/// the template text.
pub fn template_prompt(template: &str, rows: usize, cols: usize) -> TokenMatrix {
    let digest = Sha256::digest(template.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    let mut rng = seed::rng(&[u64::from_le_bytes(head), seed::TAG_TEMPLATE]);
    Matrix::from_fn(rows, cols, |_, _| {
        TOKEN_SCALE * rng.sample::<f64, _>(StandardNormal)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_is_stable_and_prefix_consistent() {
        let a = template_prompt(DEFAULT_TEMPLATE, 4, 8);
        let b = template_prompt(DEFAULT_TEMPLATE, 4, 8);
        assert_eq!(a, b);
        let other = template_prompt("a picture of a", 4, 8);
        assert_ne!(a, other);
        assert!(a.as_slice().iter().all(|v| v.abs() < 10.0 * TOKEN_SCALE));
    }

    #[test]
    fn catalog_rejects_duplicates() {
        let err = ClassCatalog::new(vec!["a".into(), "a".into()], vec![vec![0.0], vec![1.0]]);
        assert!(matches!(err, Err(CakiError::InvalidArgument(_))));
    }

    #[test]
    fn catalog_subset_keeps_order() {
        let cat = ClassCatalog::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![vec![0.0], vec![1.0], vec![2.0]],
        )
        .unwrap();
        let sub = cat.subset(&[2, 0]).unwrap();
        assert_eq!(sub.names(), &["c".to_string(), "a".to_string()]);
        assert_eq!(sub.token(0), &[2.0]);
        assert!(cat.subset(&[3]).is_err());
    }

    #[test]
    fn embedding_normalizes() {
        let e = Embedding::normalized(&[3.0, 4.0]).unwrap();
        assert_eq!(e.as_slice(), &[0.6, 0.8]);
        assert!(Embedding::normalized(&[0.0, 0.0]).is_err());
        assert!(Embedding::from_unit(vec![1.0, 1.0]).is_err());
    }
}
