//! Packed bit rows used for tree masks and survivor sets.

use std::fmt;

const WORD: usize = 64;

/// A fixed-length vector of bits packed into `u64` words.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct BitRow {
    len: usize,
    words: Vec<u64>,
}

impl BitRow {
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            words: vec![0; len.div_ceil(WORD)],
        }
    }

    pub fn from_indices(len: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut row = Self::zeros(len);
        for i in indices {
            row.set(i, true);
        }
        row
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range for row of {}", self.len);
        self.words[i / WORD] >> (i % WORD) & 1 == 1
    }

    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "bit {i} out of range for row of {}", self.len);
        let mask = 1u64 << (i % WORD);
        if value {
            self.words[i / WORD] |= mask;
        } else {
            self.words[i / WORD] &= !mask;
        }
    }

    /// Grows (or shrinks) the row, new bits are zero.
    pub fn resize(&mut self, len: usize) {
        self.words.resize(len.div_ceil(WORD), 0);
        self.len = len;
        let tail = len % WORD;
        if tail != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << tail) - 1;
            }
        }
    }

    pub fn or(&self, other: &BitRow) -> BitRow {
        self.zip_with(other, |a, b| a | b)
    }

    pub fn and(&self, other: &BitRow) -> BitRow {
        self.zip_with(other, |a, b| a & b)
    }

    fn zip_with(&self, other: &BitRow, f: impl Fn(u64, u64) -> u64) -> BitRow {
        assert_eq!(self.len, other.len, "bit rows of different length");
        BitRow {
            len: self.len,
            words: self
                .words
                .iter()
                .zip(&other.words)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn any(&self) -> bool {
        self.words.iter().any(|&w| w != 0)
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &word)| {
            let mut w = word;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let bit = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * WORD + bit)
            })
        })
    }

    /// Keeps only the positions where `keep` is set, compacting them to the front.
    pub fn select(&self, keep: &BitRow) -> BitRow {
        assert_eq!(self.len, keep.len, "selector length mismatch");
        let mut out = BitRow::zeros(keep.count_ones());
        for (dst, src) in keep.iter_ones().enumerate() {
            if self.get(src) {
                out.set(dst, true);
            }
        }
        out
    }

    /// Little-endian byte image: bit `j` lives in byte `j / 8`, bit `j % 8`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len.div_ceil(8);
        let mut out = Vec::with_capacity(n);
        for byte in 0..n {
            let word = self.words[byte / 8];
            out.push((word >> ((byte % 8) * 8)) as u8);
        }
        out
    }

    pub fn from_bytes(len: usize, bytes: &[u8]) -> Option<BitRow> {
        if bytes.len() != len.div_ceil(8) {
            return None;
        }
        let mut row = BitRow::zeros(len);
        for (i, &b) in bytes.iter().enumerate() {
            row.words[i / 8] |= (b as u64) << ((i % 8) * 8);
        }
        // Bits past `len` must be clear.
        let before = row.count_ones();
        row.resize(len);
        (row.count_ones() == before).then_some(row)
    }
}

impl fmt::Debug for BitRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len {
            f.write_str(if self.get(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}
