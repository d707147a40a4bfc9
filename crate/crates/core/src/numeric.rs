//! Reductions with a fixed evaluation order.
//!
//! Every mean, dot product and norm in the crate goes through the pairwise
//! (tree) reductions below, so results depend only on the input sequence and
//! not on how a caller happened to chunk it.

use alloc::vec::Vec;

const LEAF: usize = 16;

/// Pairwise sum of `values`.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= LEAF {
        let mut acc = 0.0;
        for v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Pairwise dot product. Panics if the lengths differ.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot: length mismatch");
    dot_rec(a, b)
}

fn dot_rec(a: &[f64], b: &[f64]) -> f64 {
    if a.len() <= LEAF {
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b) {
            acc += x * y;
        }
        return acc;
    }
    let mid = a.len() / 2;
    dot_rec(&a[..mid], &b[..mid]) + dot_rec(&a[mid..], &b[mid..])
}

pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// Mean of `values`; `None` when empty.
pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(pairwise_sum(values) / values.len() as f64)
    }
}

/// Population mean and standard deviation; `None` when empty.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    let mu = mean(values)?;
    let sq: Vec<f64> = values.iter().map(|v| (v - mu) * (v - mu)).collect();
    let var = pairwise_sum(&sq) / values.len() as f64;
    Some((mu, libm::sqrt(var)))
}

/// Mean of `values` that is exactly invariant to their order: the values are
/// sorted (IEEE total order) before the pairwise reduction.
pub fn order_free_mean(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    pairwise_sum(values) / values.len() as f64
}

/// 64-bit FNV-1a, used for architecture fingerprints and seed derivation.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
