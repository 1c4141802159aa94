//! Deterministic reductions.

use rayon::prelude::*;

use crate::Real;

/// Fixed chunk length for all reductions. Partial sums are formed over
/// these chunks and combined in index order, so the result does not depend
/// on how rayon schedules the chunks.
pub const REDUCTION_CHUNK: usize = 4096;

/// Sums `term(i)` for `i in 0..n` with a thread-count independent result.
pub fn chunked_sum<S, F>(n: usize, term: F) -> S
where
    S: Real,
    F: Fn(usize) -> S + Sync,
{
    let chunks = n.div_ceil(REDUCTION_CHUNK);
    let partials: Vec<S> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * REDUCTION_CHUNK;
            let hi = (lo + REDUCTION_CHUNK).min(n);
            let mut acc = S::zero();
            for i in lo..hi {
                acc += term(i);
            }
            acc
        })
        .collect();
    partials.into_iter().fold(S::zero(), |a, b| a + b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_sequential_sum_for_integers() {
        let s: f64 = chunked_sum(10_000, |i| i as f64);
        assert_eq!(s, (0..10_000).map(|i| i as f64).sum::<f64>());
    }

    #[test]
    fn bit_identical_across_pools() {
        let term = |i: usize| ((i as f64) * 0.37).sin() * 1e-3 + 1.0 / (1.0 + i as f64);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a: f64 = one.install(|| chunked_sum(100_003, term));
        let b: f64 = four.install(|| chunked_sum(100_003, term));
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn empty_is_zero() {
        assert_eq!(chunked_sum::<f64, _>(0, |_| 1.0), 0.0);
    }
}
