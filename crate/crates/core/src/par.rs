//! Reproducible parallel reductions. Work is cut into fixed-size chunks and
//! the partial results are combined in index order, so floating-point sums
//! do not depend on thread scheduling.

use num_complex::Complex64;
use rayon::prelude::*;

const CHUNK: usize = 256;

/// One accumulator per chunk of `0..n`, in chunk order.
pub(crate) fn chunked<A, I, F>(n: usize, init: I, step: F) -> Vec<A>
where
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(&mut A, usize) + Sync + Send,
{
    (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut a = init();
            for i in c * CHUNK..n.min((c + 1) * CHUNK) {
                step(&mut a, i);
            }
            a
        })
        .collect()
}

/// Σ_{i<n} f(i).
pub(crate) fn sum<F: Fn(usize) -> f64 + Sync + Send>(n: usize, f: F) -> f64 {
    chunked(n, || 0.0, |a, i| *a += f(i)).into_iter().sum()
}

/// Σ_{i<n} f(i) for complex terms.
pub(crate) fn csum<F: Fn(usize) -> Complex64 + Sync + Send>(n: usize, f: F) -> Complex64 {
    chunked(n, || Complex64::new(0.0, 0.0), |a, i| *a += f(i)).into_iter().sum()
}

/// Element-wise sum of equally long accumulators, in order.
pub(crate) fn add_all<'a>(parts: impl IntoIterator<Item = &'a [Complex64]>, len: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); len];
    for p in parts {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sums_are_bitwise_stable() {
        let f = |i: usize| ((i as f64) * 0.37).sin() / (1.0 + i as f64);
        let a = sum(100_003, f);
        for _ in 0..5 {
            assert_eq!(sum(100_003, f).to_bits(), a.to_bits());
        }
        let seq: f64 = (0..100_003).map(f).sum();
        assert!((a - seq).abs() < 1e-12);
        assert_eq!(sum(0, f), 0.0);
        let c = csum(10, |i| Complex64::new(i as f64, 1.0));
        assert_eq!(c, Complex64::new(45.0, 10.0));
    }
}
