/// Splits `n` into three ascending factors with the smallest max/min ratio.
///
/// Ties go to the lexicographically smallest triple. Primes give `(1, 1, n)`.
pub fn factorize_channels(n: usize) -> (usize, usize, usize) {
    assert!(n >= 1, "cannot factorize 0");
    let mut best = (1, 1, n);
    let mut f1 = 1;
    while f1 * f1 * f1 <= n {
        if n.is_multiple_of(f1) {
            let rest = n / f1;
            let mut f2 = f1;
            while f2 * f2 <= rest {
                if rest.is_multiple_of(f2) {
                    let cand = (f1, f2, rest / f2);
                    // cand.2 / cand.0 < best.2 / best.0, compared exactly
                    let better = cand.2 * best.0 < best.2 * cand.0
                        || (cand.2 * best.0 == best.2 * cand.0 && cand < best);
                    if better {
                        best = cand;
                    }
                }
                f2 += 1;
            }
        }
        f1 += 1;
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Every ordered triple, scored the same way.
    fn exhaustive(n: usize) -> (usize, usize, usize) {
        let mut all = Vec::new();
        for a in 1..=n {
            for b in a..=n {
                for c in b..=n {
                    if a * b * c == n {
                        all.push((a, b, c));
                    }
                }
            }
        }
        all.sort_by(|x, y| {
            let rx = x.2 as f64 / x.0 as f64;
            let ry = y.2 as f64 / y.0 as f64;
            rx.partial_cmp(&ry).unwrap().then(x.cmp(y))
        });
        all[0]
    }

    #[test]
    fn known_values() {
        assert_eq!(factorize_channels(64), (4, 4, 4));
        assert_eq!(factorize_channels(8), (2, 2, 2));
        assert_eq!(factorize_channels(96), (4, 4, 6));
        assert_eq!(factorize_channels(1), (1, 1, 1));
        assert_eq!(factorize_channels(13), (1, 1, 13));
    }

    #[test]
    fn agrees_with_exhaustive_search() {
        for n in 1..=200 {
            let f = factorize_channels(n);
            assert_eq!(f.0 * f.1 * f.2, n);
            assert_eq!(f, exhaustive(n), "n = {n}");
        }
    }
}
