//! Packed binary masks and indexed label maps.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, usage_err, Result};

/// Binary `height x width` mask stored one bit per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitMask {
    height: usize,
    width: usize,
    words: Vec<u64>,
}

impl BitMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            words: vec![0; (height * width).div_ceil(64)],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut mask = Self::new(height, width);
        for row in 0..height {
            for col in 0..width {
                if f(row, col) {
                    mask.set(row, col, true);
                }
            }
        }
        mask
    }

    /// Mask from row-major booleans.
    pub fn from_bools(height: usize, width: usize, bits: &[bool]) -> Result<Self> {
        if bits.len() != height * width {
            return Err(config_err!(
                "mask has {} pixels, expected {height}x{width}",
                bits.len()
            ));
        }
        let mut mask = Self::new(height, width);
        for (i, _) in bits.iter().enumerate().filter(|(_, b)| **b) {
            mask.words[i / 64] |= 1 << (i % 64);
        }
        Ok(mask)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.get_index(row * self.width + col)
    }

    #[inline]
    pub fn get_index(&self, index: usize) -> bool {
        self.words[index / 64] >> (index % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.set_index(row * self.width + col, value);
    }

    #[inline]
    pub fn set_index(&mut self, index: usize, value: bool) {
        let bit = 1u64 << (index % 64);
        if value {
            self.words[index / 64] |= bit;
        } else {
            self.words[index / 64] &= !bit;
        }
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn intersection_count(&self, other: &BitMask) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    pub fn union_count(&self, other: &BitMask) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum()
    }

    /// Intersection over union; two empty masks give 0.
    pub fn iou(&self, other: &BitMask) -> f64 {
        let union = self.union_count(other);
        if union == 0 {
            0.0
        } else {
            self.intersection_count(other) as f64 / union as f64
        }
    }

    /// Flat indices of set pixels in increasing order.
    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        let len = self.len();
        self.words.iter().enumerate().flat_map(move |(wi, &word)| {
            let mut w = word;
            core::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let bit = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * 64 + bit)
            })
            .filter(move |&i| i < len)
        })
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.get_index(i)).collect()
    }
}

/// Single-channel integer label map, one category id per pixel.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(config_err!(
                "label map has {} pixels, expected {height}x{width}",
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, label: u8) {
        self.data[row * self.width + col] = label;
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Fails when any label is `>= num_classes`.
    pub fn check_range(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&l| l as usize >= num_classes) {
            Some(l) => Err(usage_err!(
                "label {l} out of range for {num_classes} categories"
            )),
            None => Ok(()),
        }
    }

    pub fn same_shape(&self, other: &LabelMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Pixels carrying `label`.
    pub fn mask_of(&self, label: u8) -> BitMask {
        let mut mask = BitMask::new(self.height, self.width);
        for (i, _) in self.data.iter().enumerate().filter(|(_, &l)| l == label) {
            mask.set_index(i, true);
        }
        mask
    }

    /// 4-connected component of equal labels containing `(row, col)`.
    pub fn component(&self, row: usize, col: usize) -> BitMask {
        let label = self.get(row, col);
        let mut mask = BitMask::new(self.height, self.width);
        let mut stack = vec![(row, col)];
        mask.set(row, col, true);
        while let Some((r, c)) = stack.pop() {
            let mut visit = |nr: usize, nc: usize| {
                if self.get(nr, nc) == label && !mask.get(nr, nc) {
                    mask.set(nr, nc, true);
                    stack.push((nr, nc));
                }
            };
            if r > 0 {
                visit(r - 1, c);
            }
            if r + 1 < self.height {
                visit(r + 1, c);
            }
            if c > 0 {
                visit(r, c - 1);
            }
            if c + 1 < self.width {
                visit(r, c + 1);
            }
        }
        mask
    }
}
