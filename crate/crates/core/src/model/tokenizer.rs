//! Byte-level tokenisation: byte `b` is id `b`, every text starts with BOS.

use super::config::{BOS, EOS};

/// BOS followed by the raw bytes.
pub fn encode(text: &[u8]) -> Vec<usize> {
    let mut ids = Vec::with_capacity(text.len() + 1);
    ids.push(BOS);
    ids.extend(text.iter().map(|&b| b as usize));
    ids
}

/// Printable rendering of ids; specials are dropped.
pub fn decode(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Split an id sequence into windows of at most `context_len` ids with
/// stride `context_len / 2`; windowing stops at the first window that
/// reaches the end of the sequence.
pub fn windows(ids: &[usize], context_len: usize) -> Vec<Vec<usize>> {
    assert!(context_len >= 2, "context_len must be at least 2");
    if ids.len() <= context_len {
        return vec![ids.to_vec()];
    }
    let stride = context_len / 2;
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + context_len).min(ids.len());
        out.push(ids[start..end].to_vec());
        if end == ids.len() {
            break;
        }
        start += stride;
    }
    out
}

/// `encode` followed by `windows`.
pub fn tokenize(text: &[u8], context_len: usize) -> Vec<Vec<usize>> {
    windows(&encode(text), context_len)
}

pub fn is_special(id: usize) -> bool {
    id == BOS || id == EOS || id >= 256
}
