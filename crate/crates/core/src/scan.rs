//! Associative operators and prefix scans over them.

/// An associative composition with a two-sided identity.
///
/// `compose(later, earlier)` is the operator that applies `earlier` first.
pub trait Monoid: Copy {
    fn identity() -> Self;
    fn compose(later: Self, earlier: Self) -> Self;
}

/// Inclusive prefix scan in tree order (Hillis-Steele): on return
/// `xs[i] = xs[i] ∘ xs[i-1] ∘ ... ∘ xs[0]`.
///
/// Each round only combines elements `offset` apart, so every level is
/// data-parallel; this evaluates the rounds in place, sequentially.
pub fn inclusive_scan_tree<M: Monoid>(xs: &mut [M]) {
    let n = xs.len();
    let mut offset = 1;
    while offset < n {
        for i in (offset..n).rev() {
            xs[i] = M::compose(xs[i], xs[i - offset]);
        }
        offset <<= 1;
    }
}

/// Left fold prefix scan, the sequential reference for [`inclusive_scan_tree`].
pub fn inclusive_scan_seq<M: Monoid>(xs: &mut [M]) {
    for i in 1..xs.len() {
        xs[i] = M::compose(xs[i], xs[i - 1]);
    }
}

/// Composes a whole slice into one operator (first element applied first).
pub fn fold<M: Monoid>(xs: &[M]) -> M {
    xs.iter().fold(M::identity(), |acc, &m| M::compose(m, acc))
}

#[cfg(test)]
mod tests {
    use super::*;

    // 2x2 integer matrices under multiplication: associative, not commutative.
    #[derive(Clone, Copy, Debug, PartialEq)]
    struct M2([i64; 4]);

    impl Monoid for M2 {
        fn identity() -> Self {
            M2([1, 0, 0, 1])
        }
        fn compose(l: Self, r: Self) -> Self {
            let (a, b) = (l.0, r.0);
            M2([
                a[0] * b[0] + a[1] * b[2],
                a[0] * b[1] + a[1] * b[3],
                a[2] * b[0] + a[3] * b[2],
                a[2] * b[1] + a[3] * b[3],
            ])
        }
    }

    #[test]
    fn tree_matches_sequential_exactly_on_integers() {
        for n in [0usize, 1, 2, 3, 7, 16, 33] {
            let xs: Vec<M2> = (0..n as i64)
                .map(|i| M2([1, i % 3, (i * 7) % 2, 1]))
                .collect();
            let mut a = xs.clone();
            let mut b = xs.clone();
            inclusive_scan_tree(&mut a);
            inclusive_scan_seq(&mut b);
            assert_eq!(a, b);
            if n > 0 {
                assert_eq!(fold(&xs), b[n - 1]);
            }
        }
    }
}
