//! Precomputed-feature backend and its binary file format.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "CAKIFEAT" | version u32 | D u32 | Dt u32 | C u32 | N u64
//! C × ( name_len u16 | name bytes | Dt × f32 class token | D × f32 text feature )
//! N × ( class id u32 | D × f32 image feature )
//! ```
//!
//! The stored text feature of a class is its encoding under the hand-written
//! template prompt. Feature vectors are renormalised on load.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{
    template_prompt, BackendKind, ClassCatalog, Dims, Embedding, Encoder, EncoderFingerprint,
    Sample, TokenMatrix, DEFAULT_PROMPT_LEN, DEFAULT_TEMPLATE,
};
use crate::error::{CakiError, Result};
use crate::numerics::norm;
use crate::wire::{put_f32s, ByteReader};

pub const FEATURE_MAGIC: &[u8; 8] = b"CAKIFEAT";
pub const FEATURE_VERSION: u32 = 1;

/// Norm deviation above which a renormalisation is counted as a warning.
const RENORM_WARN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureClass {
    pub name: String,
    pub token: Vec<f64>,
    pub text_feature: Vec<f64>,
}

/// In-memory form of a feature file. Values are rounded to `f32` on write.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub dim: usize,
    pub token_dim: usize,
    pub classes: Vec<FeatureClass>,
    pub records: Vec<(u32, Vec<f64>)>,
}

impl FeatureFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&to_u32(self.dim, "D")?.to_le_bytes());
        out.extend_from_slice(&to_u32(self.token_dim, "Dt")?.to_le_bytes());
        out.extend_from_slice(&to_u32(self.classes.len(), "class count")?.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for class in &self.classes {
            let name = class.name.as_bytes();
            let len = u16::try_from(name.len())
                .map_err(|_| CakiError::invalid(format!("class name too long: {}", class.name)))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            put_f32s(&mut out, &class.token, self.token_dim, "class token")?;
            put_f32s(&mut out, &class.text_feature, self.dim, "text feature")?;
        }
        for (class, feature) in &self.records {
            if *class as usize >= self.classes.len() {
                return Err(CakiError::invalid(format!("record class id {class} out of range")));
            }
            out.extend_from_slice(&class.to_le_bytes());
            put_f32s(&mut out, feature, self.dim, "image feature")?;
        }
        Ok(out)
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| CakiError::invalid(format!("{what} {v} exceeds u32")))
}

/// Parses a feature file image without renormalising anything.
pub fn read_feature_bytes(bytes: &[u8]) -> Result<FeatureFile> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(8, "header magic")?;
    if magic != FEATURE_MAGIC {
        return Err(CakiError::format(0, "bad magic: not a CAKIFEAT feature file"));
    }
    let version = r.u32("header version")?;
    if version != FEATURE_VERSION {
        return Err(CakiError::format(8, format!("unsupported feature file version {version}")));
    }
    let dim_at = r.offset();
    let dim = r.u32("header D")? as usize;
    let token_dim = r.u32("header Dt")? as usize;
    let classes = r.u32("header class count")? as usize;
    let records = r.u64("header record count")?;
    if dim == 0 || token_dim == 0 {
        return Err(CakiError::format(
            dim_at,
            format!("dimension mismatch: D={dim}, Dt={token_dim} must be positive"),
        ));
    }

    let mut seen = HashMap::new();
    let mut class_entries = Vec::with_capacity(classes.min(1 << 16));
    for i in 0..classes {
        let at = r.offset();
        let name = r.name("class entry name")?;
        if let Some(prev) = seen.insert(name.clone(), i) {
            return Err(CakiError::format(
                at,
                format!("duplicate class name {name:?} (entries {prev} and {i})"),
            ));
        }
        let token = r.f32s(token_dim, "class entry token")?;
        let text_feature = r.f32s(dim, "class entry text feature")?;
        class_entries.push(FeatureClass { name, token, text_feature });
    }

    let per_record = 4 + 4 * dim as u64;
    if records.saturating_mul(per_record) > r.remaining() as u64 {
        return Err(CakiError::format(
            r.offset(),
            format!(
                "truncated file: missing record section ({records} records need {} bytes, {} available)",
                records.saturating_mul(per_record),
                r.remaining()
            ),
        ));
    }
    let mut record_entries = Vec::with_capacity(records as usize);
    for _ in 0..records {
        let at = r.offset();
        let class = r.u32("record class id")?;
        if class as usize >= classes {
            return Err(CakiError::format(
                at,
                format!("record class id {class} out of range for {classes} classes"),
            ));
        }
        record_entries.push((class, r.f32s(dim, "record image feature")?));
    }
    if r.remaining() != 0 {
        return Err(CakiError::format(
            r.offset(),
            format!("{} trailing bytes after record section", r.remaining()),
        ));
    }
    Ok(FeatureFile {
        dim,
        token_dim,
        classes: class_entries,
        records: record_entries,
    })
}

pub fn write_feature_file(path: impl AsRef<Path>, file: &FeatureFile) -> Result<()> {
    fs::write(path, file.to_bytes()?)?;
    Ok(())
}

/// Exports a backend's features: class tokens, hand-template text features,
/// and one image feature per sample.
pub fn export_features(
    backend: &dyn Encoder,
    catalog: &ClassCatalog,
    samples: &[(Sample, usize)],
) -> Result<FeatureFile> {
    let dims = backend.dims();
    let template = template_prompt(DEFAULT_TEMPLATE, dims.prompt_len, dims.token_dim);
    let classes = (0..catalog.len())
        .map(|c| {
            Ok(FeatureClass {
                name: catalog.name(c).to_string(),
                token: catalog.token(c).to_vec(),
                text_feature: backend.encode_text(&template, catalog.token(c))?.into_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let records = samples
        .iter()
        .map(|(s, class)| Ok((to_u32(*class, "class id")?, backend.encode_image(s)?.into_vec())))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureFile {
        dim: dims.dim,
        token_dim: dims.token_dim,
        classes,
        records,
    })
}

/// Serves stored features by record id.
///
/// Text encoding returns the stored template text feature of the class whose
/// token matches; the prompt content is ignored (only its shape is checked),
/// and no gradient is available.
#[derive(Debug, Clone)]
pub struct OfflineBackend {
    dims: Dims,
    text_features: Vec<Embedding>,
    token_index: HashMap<Vec<u64>, usize>,
    records: Vec<(usize, Embedding)>,
    renormalization_warnings: usize,
    fingerprint: EncoderFingerprint,
}

fn token_key(token: &[f64]) -> Vec<u64> {
    token.iter().map(|v| v.to_bits()).collect()
}

impl OfflineBackend {
    /// Builds a backend from raw file bytes; the digest covers the bytes.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, ClassCatalog)> {
        let file = read_feature_bytes(bytes)?;
        let mut warnings = 0;
        let mut renorm = |v: &[f64]| -> Result<Embedding> {
            if (norm(v) - 1.0).abs() > RENORM_WARN {
                warnings += 1;
            }
            Embedding::normalized(v)
        };
        let text_features = file
            .classes
            .iter()
            .map(|c| renorm(&c.text_feature))
            .collect::<Result<Vec<_>>>()?;
        let records = file
            .records
            .iter()
            .map(|(c, v)| Ok((*c as usize, renorm(v)?)))
            .collect::<Result<Vec<_>>>()?;
        let token_index = file
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| (token_key(&c.token), i))
            .collect();
        let catalog = ClassCatalog::new(
            file.classes.iter().map(|c| c.name.clone()).collect(),
            file.classes.iter().map(|c| c.token.clone()).collect(),
        )?;
        let dims = Dims {
            dim: file.dim,
            token_dim: file.token_dim,
            prompt_len: DEFAULT_PROMPT_LEN,
        };
        let fingerprint = EncoderFingerprint {
            kind: BackendKind::Offline,
            dim: dims.dim,
            token_dim: dims.token_dim,
            prompt_len: dims.prompt_len,
            digest: Sha256::digest(bytes).into(),
        };
        if warnings > 0 {
            log::warn!("{warnings} stored feature vectors were renormalised by more than {RENORM_WARN}");
        }
        Ok((
            OfflineBackend {
                dims,
                text_features,
                token_index,
                records,
                renormalization_warnings: warnings,
                fingerprint,
            },
            catalog,
        ))
    }

    pub fn renormalization_warnings(&self) -> usize {
        self.renormalization_warnings
    }

    pub fn record_count(&self) -> usize {
        self.records.len()
    }

    /// Class index of a stored record.
    pub fn record_class(&self, id: u64) -> Result<usize> {
        self.records
            .get(id as usize)
            .map(|(c, _)| *c)
            .ok_or_else(|| CakiError::NotFound(format!("record {id}")))
    }

    /// All records as (sample, class) pairs, in file order.
    pub fn samples(&self) -> Vec<(Sample, usize)> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, (c, _))| (Sample::Record(i as u64), *c))
            .collect()
    }
}

pub fn load_offline_features(path: impl AsRef<Path>) -> Result<(OfflineBackend, ClassCatalog)> {
    let bytes = fs::read(path)?;
    OfflineBackend::from_bytes(&bytes)
}

impl Encoder for OfflineBackend {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn fingerprint(&self) -> EncoderFingerprint {
        self.fingerprint
    }

    fn encode_image(&self, sample: &Sample) -> Result<Embedding> {
        match *sample {
            Sample::Record(id) => self
                .records
                .get(id as usize)
                .map(|(_, e)| e.clone())
                .ok_or_else(|| CakiError::NotFound(format!("record {id}"))),
            Sample::Synthetic { class, .. } => Err(CakiError::NotFound(format!(
                "offline backend has no synthetic sample of class {class}"
            ))),
        }
    }

    fn encode_text(&self, prompt: &TokenMatrix, class_token: &[f64]) -> Result<Embedding> {
        self.check_prompt(prompt)?;
        self.token_index
            .get(&token_key(class_token))
            .map(|&i| self.text_features[i].clone())
            .ok_or_else(|| CakiError::NotFound("class token not present in feature file".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    fn fixture() -> FeatureFile {
        FeatureFile {
            dim: 2,
            token_dim: 1,
            classes: vec![
                FeatureClass { name: "cat".into(), token: vec![0.5], text_feature: vec![1.0, 0.0] },
                FeatureClass { name: "dog".into(), token: vec![-0.5], text_feature: vec![0.0, 1.0] },
            ],
            records: vec![(0, vec![3.0, 4.0]), (1, vec![0.0, 2.0])],
        }
    }

    #[test]
    fn record_zero_is_renormalised() {
        let bytes = fixture().to_bytes().unwrap();
        let (backend, catalog) = OfflineBackend::from_bytes(&bytes).unwrap();
        assert_eq!(catalog.names(), &["cat".to_string(), "dog".to_string()]);
        let img = backend.encode_image(&Sample::Record(0)).unwrap();
        assert!((img[0] - 0.6).abs() < 1e-7 && (img[1] - 0.8).abs() < 1e-7);
        assert_eq!(backend.renormalization_warnings(), 2);
        assert!(matches!(backend.encode_image(&Sample::Record(2)), Err(CakiError::NotFound(_))));
        assert_eq!(backend.record_class(1).unwrap(), 1);
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = fixture().to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"CAKIFEAT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[24..32].try_into().unwrap()), 2);
        // header + 2 × (2 + 3 + 4 + 8) + 2 × (4 + 8)
        assert_eq!(bytes.len(), 32 + 2 * 17 + 2 * 12);
    }

    #[test]
    fn text_lookup_by_token() {
        let bytes = fixture().to_bytes().unwrap();
        let (backend, catalog) = OfflineBackend::from_bytes(&bytes).unwrap();
        let prompt = Matrix::zeros(DEFAULT_PROMPT_LEN, 1);
        assert_eq!(backend.encode_text(&prompt, catalog.token(1)).unwrap().as_slice(), &[0.0, 1.0]);
        assert!(matches!(backend.encode_text(&prompt, &[9.0]), Err(CakiError::NotFound(_))));
        assert!(matches!(
            backend.encode_text(&Matrix::zeros(2, 1), catalog.token(0)),
            Err(CakiError::InvalidArgument(_))
        ));
        assert!(matches!(
            backend.encode_text_vjp(&prompt, catalog.token(0), &[1.0, 0.0]),
            Err(CakiError::Unsupported(_))
        ));
    }

    #[test]
    fn empty_record_section() {
        let mut f = fixture();
        f.records.clear();
        let (backend, catalog) = OfflineBackend::from_bytes(&f.to_bytes().unwrap()).unwrap();
        assert_eq!(backend.record_count(), 0);
        assert_eq!(catalog.len(), 2);
    }

    #[test]
    fn truncation_names_the_section() {
        let bytes = fixture().to_bytes().unwrap();
        let msg = |n: usize| match OfflineBackend::from_bytes(&bytes[..n]) {
            Err(CakiError::Format { message, .. }) => message,
            other => panic!("expected format error, got {other:?}"),
        };
        assert!(msg(4).contains("header magic"));
        assert!(msg(20).contains("header"));
        assert!(msg(40).contains("class entry"));
        assert!(msg(bytes.len() - 3).contains("record"));
    }

    #[test]
    fn malformed_inputs() {
        let mut bytes = fixture().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(OfflineBackend::from_bytes(&bytes), Err(CakiError::Format { offset: 0, .. })));

        let mut f = fixture();
        f.classes[1].name = "cat".into();
        let err = OfflineBackend::from_bytes(&f.to_bytes().unwrap()).unwrap_err();
        assert!(matches!(err, CakiError::Format { offset: 49, .. }), "{err}");

        let mut bytes = fixture().to_bytes().unwrap();
        bytes[12..16].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(OfflineBackend::from_bytes(&bytes), Err(CakiError::Format { .. })));

        let mut bytes = fixture().to_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(OfflineBackend::from_bytes(&bytes), Err(CakiError::Format { .. })));
    }
}
