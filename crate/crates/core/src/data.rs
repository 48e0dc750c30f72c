//! Byte tokenization, train/validation splitting, deterministic batching and
//! synthetic corpora.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::{rng, Error, Result};

pub const BYTE_VOCAB: usize = 256;

pub fn byte_tokenize(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Inverse of [`byte_tokenize`]; ids outside a byte are an error.
pub fn detokenize(tokens: &[usize]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| u8::try_from(t).map_err(|_| Error::Decode(format!("token {t} is not a byte"))))
        .collect()
}

/// An `(inputs, targets)` pair; `targets[t] == inputs[t + 1]` in the
/// underlying stream.
pub type Window = (Vec<usize>, Vec<usize>);

/// Token stream split into a training head and a validation tail.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    tokens: Vec<usize>,
    split: usize,
}

impl Corpus {
    /// Holds out the final `validation_fraction` of the stream.
    pub fn new(tokens: Vec<usize>, validation_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&validation_fraction) {
            return Err(Error::Data(format!("validation fraction {validation_fraction} outside [0, 1)")));
        }
        let n = tokens.len();
        let held = (n as f64 * validation_fraction) as usize;
        Ok(Self {
            split: n - held,
            tokens,
        })
    }

    pub fn from_bytes(bytes: &[u8], validation_fraction: f64) -> Result<Self> {
        Self::new(byte_tokenize(bytes), validation_fraction)
    }

    pub fn train(&self) -> &[usize] {
        &self.tokens[..self.split]
    }

    pub fn validation(&self) -> &[usize] {
        &self.tokens[self.split..]
    }

    pub fn split(&self) -> usize {
        self.split
    }

    /// Batch `step` of the seeded stream: `batch_size` windows of `len`
    /// inputs drawn uniformly from the training region. Each step has its
    /// own generator, so any step can be reproduced without replaying the
    /// ones before it.
    pub fn batch(&self, len: usize, batch_size: usize, seed: u64, step: u64) -> Result<Vec<Window>> {
        let train = self.train();
        if train.len() <= len {
            return Err(Error::Data(format!(
                "training region of {} tokens is too short for windows of {len}",
                train.len()
            )));
        }
        let mut r = rng::stream(seed, step);
        let span = train.len() - len;
        Ok((0..batch_size)
            .map(|_| {
                let s = r.random_range(0..span);
                (train[s..s + len].to_vec(), train[s + 1..s + len + 1].to_vec())
            })
            .collect())
    }

    /// Endless iterator over [`Self::batch`] for steps `0, 1, ...`.
    pub fn batch_iter(&self, len: usize, batch_size: usize, seed: u64) -> Result<BatchIter<'_>> {
        if self.train().len() <= len {
            return Err(Error::Data(format!(
                "training region of {} tokens is too short for windows of {len}",
                self.train().len()
            )));
        }
        Ok(BatchIter {
            corpus: self,
            len,
            batch_size,
            seed,
            step: 0,
        })
    }

    /// Consecutive non-overlapping validation windows, at most `limit`.
    pub fn validation_windows(&self, len: usize, limit: usize) -> Result<Vec<Window>> {
        let v = self.validation();
        if v.len() <= len {
            return Err(Error::Data(format!("validation region of {} tokens is too short for windows of {len}", v.len())));
        }
        Ok((0..(v.len() - 1) / len)
            .take(limit)
            .map(|i| {
                let s = i * len;
                (v[s..s + len].to_vec(), v[s + 1..s + len + 1].to_vec())
            })
            .collect())
    }
}

pub struct BatchIter<'c> {
    corpus: &'c Corpus,
    len: usize,
    batch_size: usize,
    seed: u64,
    step: u64,
}

impl BatchIter<'_> {
    /// Skips to `step`, e.g. when resuming.
    pub fn seek(&mut self, step: u64) {
        self.step = step;
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Vec<Window>;

    fn next(&mut self) -> Option<Self::Item> {
        let b = self.corpus.batch(self.len, self.batch_size, self.seed, self.step).ok()?;
        self.step += 1;
        Some(b)
    }
}

/// Names accepted by [`synthetic`].
pub const SYNTHETIC: [&str; 3] = ["fib_mod", "mod_counter", "repeat_copy"];

const DIGITS: &[u8; 16] = b"0123456789abcdef";

/// A synthetic state-tracking byte stream of `len` bytes.
///
/// * `fib_mod`: segments `|a b c ...` over hex digits where each digit is
///   the sum of the two before it mod 16; every segment starts from two
///   random digits and has a random length in 8..=32.
/// * `mod_counter`: random increments `+1`..`+3` each followed by the
///   running total mod 10, as `+2 7 +1 8 ...`, with the total printed only
///   every fourth step (others show `.`).
/// * `repeat_copy`: random lowercase strings of length 4..=12 each written
///   twice, `abc=abc;`.
pub fn synthetic(name: &str, len: usize, seed: u64) -> Result<Vec<u8>> {
    let mut r = rng::seeded(seed);
    let mut out = Vec::with_capacity(len + 64);
    match name {
        "fib_mod" => {
            while out.len() < len {
                out.push(b'|');
                let n = r.random_range(8..=32);
                let (mut a, mut b) = (r.random_range(0..16usize), r.random_range(0..16usize));
                out.push(DIGITS[a]);
                out.push(DIGITS[b]);
                for _ in 2..n {
                    let c = (a + b) % 16;
                    out.push(DIGITS[c]);
                    (a, b) = (b, c);
                }
            }
        }
        "mod_counter" => {
            let mut total = 0usize;
            let mut step = 0usize;
            while out.len() < len {
                let inc = r.random_range(1..=3usize);
                total = (total + inc) % 10;
                step += 1;
                out.push(b'+');
                out.push(b'0' + inc as u8);
                out.push(b' ');
                out.push(if step % 4 == 0 { b'0' + total as u8 } else { b'.' });
                out.push(b' ');
            }
        }
        "repeat_copy" => {
            while out.len() < len {
                let n = r.random_range(4..=12);
                let word: Vec<u8> = (0..n).map(|_| b'a' + r.random_range(0..26u8)).collect();
                out.extend_from_slice(&word);
                out.push(b'=');
                out.extend_from_slice(&word);
                out.push(b';');
            }
        }
        other => {
            return Err(Error::Data(format!(
                "unknown synthetic corpus {other:?} (expected one of {})",
                SYNTHETIC.join(", ")
            )))
        }
    }
    out.truncate(len);
    Ok(out)
}

/// A short original text used by the overfit-and-recite check.
pub const RECITE_TEXT: &str = "the lamp on the quay went out at nine. \
a boat came in without lights, its oars muffled in sacking, \
and the harbour master wrote one line in his book: \
arrived late, cargo of salt, crew of three, no names given.";

pub fn recite_text() -> String {
    String::from(RECITE_TEXT)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(byte_tokenize(b"A"), [65]);
        assert!(byte_tokenize(b"").is_empty());
        assert!(detokenize(&[256]).is_err());
        assert!(RECITE_TEXT.len() >= 190 && RECITE_TEXT.len() <= 220, "{}", RECITE_TEXT.len());
    }

    #[test]
    fn fib_mod_is_a_recurrence() {
        let s = synthetic("fib_mod", 4000, 1).unwrap();
        for seg in s.split(|&b| b == b'|').filter(|s| s.len() >= 3) {
            let v: Vec<usize> = seg.iter().map(|c| DIGITS.iter().position(|d| d == c).unwrap()).collect();
            for i in 2..v.len() {
                assert_eq!(v[i], (v[i - 1] + v[i - 2]) % 16);
            }
        }
        assert!(synthetic("nope", 10, 0).is_err());
        assert_eq!(synthetic("repeat_copy", 500, 3).unwrap().len(), 500);
        assert_eq!(synthetic("mod_counter", 500, 3).unwrap(), synthetic("mod_counter", 500, 3).unwrap());
    }

    #[test]
    fn batches_respect_split() {
        let c = Corpus::new((0..1000).collect(), 0.2).unwrap();
        assert_eq!(c.split(), 800);
        for step in 0..20 {
            for (x, y) in c.batch(16, 4, 7, step).unwrap() {
                assert!(x.iter().chain(&y).all(|&t| t < 800));
                assert_eq!(&x[1..], &y[..15]);
            }
        }
        assert_eq!(c.batch(16, 4, 7, 3).unwrap(), c.batch(16, 4, 7, 3).unwrap());
        let short = Corpus::new((0..10).collect(), 0.0).unwrap();
        assert!(short.batch(16, 1, 0, 0).is_err());
        let v = c.validation_windows(16, 100).unwrap();
        assert_eq!(v.len(), 12);
        assert!(v.iter().all(|(x, _)| x.iter().all(|&t| t >= 800)));
    }
}
