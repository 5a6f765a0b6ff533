//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by three specials.

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const VOCAB: usize = 259;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn vocab(&self) -> usize {
        VOCAB
    }

    pub fn encode(&self, bytes: &[u8]) -> Vec<u32> {
        bytes.iter().map(|&b| b as u32).collect()
    }

    /// Drops special tokens; ids outside the vocabulary are an error.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                0..=255 => out.push(id as u8),
                BOS | EOS | PAD => {}
                _ => return Err(Error::Input(format!("token id {id} outside vocabulary of {VOCAB}"))),
            }
        }
        Ok(out)
    }

    /// Lossy text rendering for logs and traces.
    pub fn decode_lossy(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn token_text(&self, id: u32) -> String {
        match id {
            BOS => "<bos>".into(),
            EOS => "<eos>".into(),
            PAD => "<pad>".into(),
            b if b < 256 => {
                let c = b as u8;
                if c.is_ascii_graphic() || c == b' ' {
                    (c as char).to_string()
                } else {
                    format!("\\x{c:02x}")
                }
            }
            _ => "<unk>".into(),
        }
    }
}
