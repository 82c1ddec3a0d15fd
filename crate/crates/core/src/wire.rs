//! Little-endian helpers shared by the binary file formats.

use crate::error::{CakiError, Result};

pub(crate) fn put_f32s(out: &mut Vec<u8>, values: &[f64], expected: usize, what: &str) -> Result<()> {
    if values.len() != expected {
        return Err(CakiError::invalid(format!(
            "{what} has {} values, expected {expected}",
            values.len()
        )));
    }
    for &v in values {
        let f = v as f32;
        if !f.is_finite() {
            return Err(CakiError::invalid(format!("{what} contains a non-finite value")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(())
}

/// Bounds-checked little-endian cursor that names the section it is reading.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(CakiError::format(
                self.offset(),
                format!(
                    "truncated file: missing {section} ({n} bytes needed, {} available)",
                    self.remaining()
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, section: &str) -> Result<u8> {
        Ok(self.take(1, section)?[0])
    }

    pub(crate) fn u16(&mut self, section: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, section)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, section: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, section: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, count: usize, section: &str) -> Result<Vec<f64>> {
        let start = self.offset();
        let bytes = self.take(count * 4, section)?;
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(CakiError::format(
                start + 4 * i as u64,
                format!("non-finite value in {section}"),
            ));
        }
        Ok(values)
    }

    pub(crate) fn name(&mut self, section: &str) -> Result<String> {
        let len = self.u16(section)? as usize;
        let start = self.offset();
        let bytes = self.take(len, section)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CakiError::format(start, format!("{section} is not valid UTF-8")))
    }
}

