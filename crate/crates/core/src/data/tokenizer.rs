//! Byte-level tokenizer: token ids 0..=255 are raw bytes, everything above
//! is reserved for special and compressed tokens owned by the model config.

use crate::{Error, Result};

/// Number of ordinary byte tokens.
pub const BYTE_VOCAB: usize = 256;

pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| u32::from(b)).collect()
}

/// Inverse of [`tokenize`]. Ids at or above [`BYTE_VOCAB`] (special or
/// compressed tokens) are a contract violation here.
pub fn detokenize(ids: &[u32]) -> Result<String> {
    let bytes = detokenize_bytes(ids)?;
    String::from_utf8(bytes)
        .map_err(|e| Error::DataValidation(format!("detokenized bytes are not UTF-8: {e}")))
}

pub fn detokenize_bytes(ids: &[u32]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| {
            u8::try_from(id).map_err(|_| {
                Error::Contract(format!("id {id} is not a byte token; specials cannot be detokenized"))
            })
        })
        .collect()
}

/// Display form that never fails: specials become `⟨id⟩`, invalid UTF-8 is
/// replaced. For CLI output, not for metrics.
pub fn detokenize_lossy(ids: &[u32]) -> String {
    let mut out = String::new();
    let mut bytes: Vec<u8> = Vec::new();
    let flush = |bytes: &mut Vec<u8>, out: &mut String| {
        if !bytes.is_empty() {
            out.push_str(&String::from_utf8_lossy(bytes));
            bytes.clear();
        }
    };
    for &id in ids {
        match u8::try_from(id) {
            Ok(b) => bytes.push(b),
            Err(_) => {
                flush(&mut bytes, &mut out);
                out.push_str(&format!("⟨{id}⟩"));
            }
        }
    }
    flush(&mut bytes, &mut out);
    out
}
