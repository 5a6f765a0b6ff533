//! Corpus windows, seeded batch order and the byte-unigram entropy baseline.

use std::cell::RefCell;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::tokenizer::ByteTokenizer;

/// Non-overlapping `seq_len` windows over the tokenized corpus, drawn in a
/// per-epoch seeded permutation. Sample `i` of step `s` is global draw
/// `s·B + i`, so any step can be reproduced without replaying earlier ones.
#[derive(Debug)]
pub struct Batcher {
    windows: Vec<Vec<u32>>,
    batch: usize,
    stream: SeedStream,
    perm: RefCell<Option<(u64, Vec<usize>)>>,
}

impl Batcher {
    pub fn new(tokens: &[u32], seq_len: usize, batch: usize, seed: u64) -> Result<Self> {
        if seq_len < 2 || batch == 0 {
            return Err(Error::Config("seq_len must be >= 2 and batch >= 1".into()));
        }
        let windows: Vec<Vec<u32>> = tokens.chunks_exact(seq_len).map(|w| w.to_vec()).collect();
        if windows.len() < batch {
            return Err(Error::Data(format!(
                "corpus of {} tokens yields {} windows of {seq_len}, fewer than one batch of {batch}",
                tokens.len(),
                windows.len()
            )));
        }
        Ok(Self {
            windows,
            batch,
            stream: SeedStream::new(seed).split("data-order"),
            perm: RefCell::new(None),
        })
    }

    pub fn from_bytes(bytes: &[u8], seq_len: usize, batch: usize, seed: u64) -> Result<Self> {
        Self::new(&ByteTokenizer.encode(bytes), seq_len, batch, seed)
    }

    pub fn n_windows(&self) -> usize {
        self.windows.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut cached = self.perm.borrow_mut();
        if let Some((e, p)) = cached.as_ref() {
            if *e == epoch {
                return p.clone();
            }
        }
        let mut p: Vec<usize> = (0..self.windows.len()).collect();
        p.shuffle(&mut self.stream.split_index(epoch).rng());
        *cached = Some((epoch, p.clone()));
        p
    }

    pub fn batch_at(&self, step: u64) -> Vec<Vec<u32>> {
        let n = self.windows.len() as u64;
        let mut out = Vec::with_capacity(self.batch);
        for i in 0..self.batch as u64 {
            let g = step * self.batch as u64 + i;
            let perm = self.permutation(g / n);
            out.push(self.windows[perm[(g % n) as usize]].clone());
        }
        out
    }
}

/// Consecutive evaluation windows of at most `len` tokens; a trailing chunk
/// is kept when it still has a next-token target.
pub fn eval_windows(tokens: &[u32], len: usize) -> Vec<Vec<u32>> {
    tokens
        .chunks(len.max(2))
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

/// Entropy in nats of the byte frequency distribution.
pub fn unigram_entropy(bytes: &[u8]) -> f64 {
    let mut counts = [0u64; 256];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    let n = bytes.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn too_short_is_data_error() {
        let e = Batcher::from_bytes(b"abcdefgh", 4, 3, 0).unwrap_err();
        assert!(matches!(e, Error::Data(_)));
    }

    #[test]
    fn epoch_covers_every_window_once() {
        let bytes: Vec<u8> = (0..=255u8).cycle().take(64 * 10).collect();
        let b = Batcher::from_bytes(&bytes, 64, 2, 9).unwrap();
        let mut seen: Vec<u32> = (0..5).flat_map(|s| b.batch_at(s)).map(|w| w[0]).collect();
        seen.sort();
        let mut expect: Vec<u32> = (0..10).map(|i| (i * 64 % 256) as u32).collect();
        expect.sort();
        assert_eq!(seen, expect);
    }

    #[test]
    fn order_is_seeded_and_random_access() {
        let bytes: Vec<u8> = (0..4000u32).map(|i| (i * 7 % 251) as u8).collect();
        let a = Batcher::from_bytes(&bytes, 16, 4, 1).unwrap();
        let b = Batcher::from_bytes(&bytes, 16, 4, 1).unwrap();
        let c = Batcher::from_bytes(&bytes, 16, 4, 2).unwrap();
        let late = a.batch_at(300);
        for s in 0..10 {
            assert_eq!(a.batch_at(s), b.batch_at(s));
        }
        assert_eq!(b.batch_at(300), late);
        assert_ne!(a.batch_at(0), c.batch_at(0));
    }

    #[test]
    fn entropy_oracle() {
        assert_eq!(unigram_entropy(b"aaaa"), 0.0);
        assert!((unigram_entropy(b"abab") - 2f64.ln()).abs() < 1e-15);
        assert!((unigram_entropy(b"abcd") - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn eval_windows_keep_tail() {
        let w = eval_windows(&[1, 2, 3, 4, 5, 6, 7], 3);
        assert_eq!(w, vec![vec![1, 2, 3], vec![4, 5, 6]]);
        let w = eval_windows(&[1, 2, 3, 4, 5], 3);
        assert_eq!(w.len(), 2);
    }
}
