//! Class-level key-value prompt bank.
//!
//! Each entry pairs a class text feature (the key) with the class-specific
//! prompt learned for that class (the value). The class-shared prompt is kept
//! alongside so queries and keys can be recomputed consistently.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic "CAKIBANK" | version u32 | D u32 | Dt u32 | L u32 | C u32
//! fingerprint: kind u8 | digest [u8; 32]
//! shared prompt: L × Dt f32
//! C × ( name_len u16 | name bytes | key D × f32 | value L × Dt f32 )
//! CRC32C u32 over all preceding bytes
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::wire::{put_f32s, ByteReader};
use crate::encoder::{BackendKind, ClassCatalog, Encoder, EncoderFingerprint, TokenMatrix};
use crate::error::{CakiError, Result};
use crate::numerics::{norm, Matrix};
use crate::prompt::initial_prompt;

pub const BANK_MAGIC: &[u8; 8] = b"CAKIBANK";
pub const BANK_VERSION: u32 = 1;

/// Keys read back from disk are `f32`-rounded; their norms are checked
/// against this looser tolerance.
const LOADED_KEY_NORM_TOL: f64 = 1e-5;

/// Which prompt produces the bank keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyTemplate {
    /// Text features under the learned class-shared prompt.
    #[default]
    Shared,
    /// Text features under the hand-written template prompt.
    Handcrafted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub class_name: String,
    /// Unit-norm class text feature.
    pub key: Vec<f64>,
    /// Class-specific prompt.
    pub value: TokenMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    entries: Vec<BankEntry>,
    shared_prompt: TokenMatrix,
    fingerprint: EncoderFingerprint,
    format_version: u32,
}

impl PromptBank {
    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn shared_prompt(&self) -> &TokenMatrix {
        &self.shared_prompt
    }

    pub fn fingerprint(&self) -> &EncoderFingerprint {
        &self.fingerprint
    }

    pub fn format_version(&self) -> u32 {
        self.format_version
    }

    pub fn dim(&self) -> usize {
        self.fingerprint.dim
    }

    /// Fails unless the bank was built for `backend`.
    pub fn check_encoder(&self, backend: &dyn Encoder) -> Result<()> {
        let encoder = backend.fingerprint();
        if encoder != self.fingerprint {
            return Err(CakiError::FingerprintMismatch {
                bank: self.fingerprint.to_string(),
                encoder: encoder.to_string(),
            });
        }
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(|e| e.key.as_slice())
    }

    /// Serialised size in bytes.
    pub fn byte_len(&self) -> usize {
        let fp = &self.fingerprint;
        let prompt = 4 * fp.prompt_len * fp.token_dim;
        let header = 8 + 4 * 5 + 33 + prompt + 4;
        header
            + self
                .entries
                .iter()
                .map(|e| 2 + e.class_name.len() + 4 * fp.dim + prompt)
                .sum::<usize>()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let fp = &self.fingerprint;
        let prompt_len = fp.prompt_len * fp.token_dim;
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        for v in [fp.dim, fp.token_dim, fp.prompt_len, self.entries.len()] {
            let v = u32::try_from(v).map_err(|_| CakiError::invalid("bank dimension exceeds u32"))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(fp.kind.tag());
        out.extend_from_slice(&fp.digest);
        put_f32s(&mut out, self.shared_prompt.as_slice(), prompt_len, "shared prompt")?;
        for e in &self.entries {
            let name = e.class_name.as_bytes();
            let len = u16::try_from(name.len())
                .map_err(|_| CakiError::invalid(format!("class name too long: {}", e.class_name)))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            put_f32s(&mut out, &e.key, fp.dim, "bank key")?;
            put_f32s(&mut out, e.value.as_slice(), prompt_len, "bank value")?;
        }
        let crc = crc32c::crc32c(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8, "header magic")? != BANK_MAGIC {
            return Err(CakiError::format(0, "bad magic: not a CAKIBANK prompt bank"));
        }
        let version = r.u32("header version")?;
        if version != BANK_VERSION {
            return Err(CakiError::format(8, format!("unsupported bank version {version}")));
        }
        let dims_at = r.offset();
        let dim = r.u32("header D")? as usize;
        let token_dim = r.u32("header Dt")? as usize;
        let prompt_len = r.u32("header L")? as usize;
        let count = r.u32("header C")? as usize;
        if dim == 0 || token_dim == 0 || prompt_len == 0 {
            return Err(CakiError::format(dims_at, "bank dimensions must be positive"));
        }
        let kind_at = r.offset();
        let kind = BackendKind::from_tag(r.u8("fingerprint block")?)
            .ok_or_else(|| CakiError::format(kind_at, "unknown encoder kind in fingerprint"))?;
        let mut digest = [0u8; 32];
        digest.copy_from_slice(r.take(32, "fingerprint block")?);
        let fingerprint = EncoderFingerprint { kind, dim, token_dim, prompt_len, digest };

        let shared = r.f32s(prompt_len * token_dim, "shared prompt")?;
        let shared_prompt = Matrix::from_vec(prompt_len, token_dim, shared)?;

        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let name_at = r.offset();
            let class_name = r.name("bank entry name")?;
            if entries.iter().any(|e: &BankEntry| e.class_name == class_name) {
                return Err(CakiError::format(name_at, format!("duplicate class name {class_name:?}")));
            }
            let key_at = r.offset();
            let key = r.f32s(dim, "bank entry key")?;
            if (norm(&key) - 1.0).abs() > LOADED_KEY_NORM_TOL {
                return Err(CakiError::format(key_at, format!("key {i} is not unit-norm")));
            }
            let value = Matrix::from_vec(prompt_len, token_dim, r.f32s(prompt_len * token_dim, "bank entry value")?)?;
            entries.push(BankEntry { class_name, key, value });
        }
        let body_len = r.offset() as usize;
        let stored = r.u32("checksum")?;
        if r.remaining() != 0 {
            return Err(CakiError::format(
                r.offset(),
                format!("{} trailing bytes after checksum", r.remaining()),
            ));
        }
        let computed = crc32c::crc32c(&bytes[..body_len]);
        if stored != computed {
            return Err(CakiError::format(
                body_len as u64,
                format!("checksum mismatch: stored {stored:08x}, computed {computed:08x}"),
            ));
        }
        Ok(PromptBank {
            entries,
            shared_prompt,
            fingerprint,
            format_version: version,
        })
    }
}

/// Builds the bank: one entry per catalog class, keyed by the class text
/// feature under the shared prompt (or the hand-written template).
pub fn build_bank(
    backend: &dyn Encoder,
    catalog: &ClassCatalog,
    shared_prompt: &TokenMatrix,
    class_prompts: &[TokenMatrix],
    key_template: KeyTemplate,
) -> Result<PromptBank> {
    if class_prompts.len() != catalog.len() {
        return Err(CakiError::invalid(format!(
            "{} class prompts for a {}-class catalog",
            class_prompts.len(),
            catalog.len()
        )));
    }
    backend.check_prompt(shared_prompt)?;
    let key_prompt = match key_template {
        KeyTemplate::Shared => shared_prompt.clone(),
        KeyTemplate::Handcrafted => initial_prompt(backend),
    };
    let entries = class_prompts
        .iter()
        .enumerate()
        .map(|(c, value)| {
            backend.check_prompt(value)?;
            if catalog.name(c).len() > u16::MAX as usize {
                return Err(CakiError::invalid(format!("class name {c} longer than 65535 bytes")));
            }
            Ok(BankEntry {
                class_name: catalog.name(c).to_string(),
                key: backend.encode_text(&key_prompt, catalog.token(c))?.into_vec(),
                value: value.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PromptBank {
        entries,
        shared_prompt: shared_prompt.clone(),
        fingerprint: backend.fingerprint(),
        format_version: BANK_VERSION,
    })
}

pub fn save_bank(bank: &PromptBank, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, bank.to_bytes()?)?;
    Ok(())
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<PromptBank> {
    PromptBank::from_bytes(&fs::read(path)?)
}

/// Entries at `indices`, in the given order.
pub fn bank_lookup<'a>(bank: &'a PromptBank, indices: &[usize]) -> Result<Vec<&'a BankEntry>> {
    indices
        .iter()
        .map(|&i| {
            bank.entries.get(i).ok_or_else(|| {
                CakiError::invalid(format!("cache index {i} out of range for {} entries", bank.len()))
            })
        })
        .collect()
}
