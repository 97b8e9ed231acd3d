//! Work-efficient prefix scan for first-order linear recurrences.
//!
//! `h_t = a_t h_{t-1} + u_t` composes under
//! `(a, u) ∘ (a', u') = (a·a', a'·u + u')`, which is associative, so the
//! states are the inclusive prefix of the pairs. The sequence is cut into
//! fixed-size chunks scanned independently; the chunk totals go through a
//! Blelloch up-sweep/down-sweep, and each chunk is then corrected by the
//! state entering it.

use rayon::prelude::*;

use crate::tensor::Real;

/// Exclusive prefix scan by the Blelloch up-sweep/down-sweep. `op` must be
/// associative with `identity` as its neutral element; it is applied as
/// `op(earlier, later)`.
pub fn blelloch_exclusive_scan<E: Copy>(items: &[E], identity: E, op: impl Fn(E, E) -> E) -> Vec<E> {
    let n = items.len();
    if n == 0 {
        return Vec::new();
    }
    let size = n.next_power_of_two();
    let mut tree = vec![identity; size];
    tree[..n].copy_from_slice(items);

    let mut stride = 1;
    while stride < size {
        for i in (2 * stride - 1..size).step_by(2 * stride) {
            tree[i] = op(tree[i - stride], tree[i]);
        }
        stride *= 2;
    }
    tree[size - 1] = identity;
    let mut stride = size / 2;
    while stride >= 1 {
        for i in (2 * stride - 1..size).step_by(2 * stride) {
            let left = tree[i - stride];
            tree[i - stride] = tree[i];
            tree[i] = op(tree[i], left);
        }
        stride /= 2;
    }
    tree.truncate(n);
    tree
}

#[inline]
fn compose<T: Real>((a1, u1): (T, T), (a2, u2): (T, T)) -> (T, T) {
    (a1 * a2, a2 * u1 + u2)
}

/// States `h_t` of `h_t = a_t h_{t-1} + u_t` from `h_{-1} = 0`.
pub fn linear_recurrence_scan<T: Real>(a: &[T], u: &[T], partition: usize) -> Vec<T> {
    assert_eq!(a.len(), u.len(), "decay and input lengths differ");
    assert!(partition > 0, "partition must be positive");
    let n = a.len();
    if n == 0 {
        return Vec::new();
    }
    // chunk-local inclusive scans: (A, U) with h = A·h_in + U
    let local: Vec<Vec<(T, T)>> = a
        .par_chunks(partition)
        .zip(u.par_chunks(partition))
        .map(|(ac, uc)| {
            let mut acc = (T::one(), T::zero());
            ac.iter()
                .zip(uc)
                .map(|(&av, &uv)| {
                    acc = compose(acc, (av, uv));
                    acc
                })
                .collect()
        })
        .collect();
    let totals: Vec<(T, T)> = local.iter().map(|c| *c.last().expect("nonempty chunk")).collect();
    let entering = blelloch_exclusive_scan(&totals, (T::one(), T::zero()), compose);
    let mut h = vec![T::zero(); n];
    h.par_chunks_mut(partition)
        .zip(local.par_iter())
        .zip(entering.par_iter())
        .for_each(|((out, loc), &(_, h_in))| {
            for (o, &(pa, pu)) in out.iter_mut().zip(loc) {
                *o = pa * h_in + pu;
            }
        });
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blelloch_sums() {
        let v: Vec<u64> = (1..=10).collect();
        let ex = blelloch_exclusive_scan(&v, 0, |a, b| a + b);
        let mut expect = vec![0u64];
        for i in 1..10 {
            expect.push(expect[i - 1] + v[i - 1]);
        }
        assert_eq!(ex, expect);
        assert!(blelloch_exclusive_scan::<u64>(&[], 0, |a, b| a + b).is_empty());
    }

    #[test]
    fn blelloch_respects_operand_order() {
        // affine composition is associative but not commutative
        let f = |(a1, u1): (i64, i64), (a2, u2): (i64, i64)| (a1 * a2, a2 * u1 + u2);
        let v: Vec<(i64, i64)> = vec![(2, 1), (-1, 3), (3, 0), (1, -2), (2, 2), (-2, 1)];
        let ex = blelloch_exclusive_scan(&v, (1, 0), f);
        let mut acc = (1, 0);
        for (i, e) in v.iter().enumerate() {
            assert_eq!(ex[i], acc);
            acc = f(acc, *e);
        }
    }

    #[test]
    fn matches_sequential_for_every_partition() {
        let a: Vec<f64> = (0..37).map(|i| ((i * 13) % 7) as f64 / 7.0 - 0.3).collect();
        let u: Vec<f64> = (0..37).map(|i| ((i * 5) % 11) as f64 - 5.0).collect();
        let mut h = 0.0;
        let seq: Vec<f64> = a
            .iter()
            .zip(&u)
            .map(|(av, uv)| {
                h = av * h + uv;
                h
            })
            .collect();
        for part in 1..=40 {
            let par = linear_recurrence_scan(&a, &u, part);
            for (p, s) in par.iter().zip(&seq) {
                assert!((p - s).abs() < 1e-9, "partition {part}");
            }
        }
    }

    #[test]
    fn fixed_partition_is_bit_stable() {
        let a: Vec<f32> = (0..1000).map(|i| 0.9 + 0.0001 * (i % 17) as f32).collect();
        let u: Vec<f32> = (0..1000).map(|i| (i % 23) as f32 * 0.01).collect();
        let first = linear_recurrence_scan(&a, &u, 64);
        for threads in [1, 2, 4] {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let again = pool.install(|| linear_recurrence_scan(&a, &u, 64));
            assert_eq!(first, again);
        }
    }
}
