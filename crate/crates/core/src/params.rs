//! Named access to trainable tensors.

use alloc::string::String;
use alloc::vec::Vec;

/// Borrowed view of one named tensor.
#[derive(Debug)]
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// A set of trainable tensors with stable names and a stable order.
pub trait Parameters {
    fn named(&self) -> Vec<NamedTensor<'_>>;

    /// Mutable slices in the same order as [`Parameters::named`].
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.named().iter().map(|t| t.data.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for t in self.named() {
            flat.extend_from_slice(t.data);
        }
        flat
    }

    /// Overwrites every tensor from a flat buffer produced by [`Parameters::flatten`].
    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for slice in self.slices_mut() {
            let n = slice.len();
            slice.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter buffer length mismatch");
    }
}

pub(crate) fn tensor<'a>(name: &str, shape: &[usize], data: &'a [f64]) -> NamedTensor<'a> {
    NamedTensor {
        name: name.into(),
        shape: shape.into(),
        data,
    }
}

/// Prefixes every name with `prefix.`.
pub(crate) fn prefixed<'a>(prefix: &str, tensors: Vec<NamedTensor<'a>>) -> Vec<NamedTensor<'a>> {
    tensors
        .into_iter()
        .map(|mut t| {
            t.name = alloc::format!("{prefix}.{}", t.name);
            t
        })
        .collect()
}

pub(crate) fn init_gaussian(rng: &mut crate::RngHandle, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.normal()).collect()
}
