//! Distance and match functions over recompiled bytes and source text.
//!
//! The byte distance is a Levenshtein distance where a substitution at a
//! position covered by a pending relocation (on either side) is free.
//! Insertions and deletions always cost one, wildcard or not.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::toolchain::ByteListing;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("listing for `{symbol}` has {bytes} bytes but a {mask}-entry wildcard mask")]
    MaskLength {
        symbol: String,
        bytes: usize,
        mask: usize,
    },
}

/// Edit count plus the count normalized by the longer input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceResult {
    pub raw: usize,
    pub normalized: f64,
}

impl DistanceResult {
    pub fn new(raw: usize, len_a: usize, len_b: usize) -> Self {
        let longest = len_a.max(len_b);
        let normalized = if longest == 0 {
            0.0
        } else {
            raw as f64 / longest as f64
        };
        Self { raw, normalized }
    }
}

/// Levenshtein distance with unit costs where `free_sub(i, j)` marks
/// substitutions of `a[i]` by `b[j]` that cost nothing.
///
/// Runs in O(len_a * len_b) time and O(min(len_a, len_b)) memory: the
/// shorter sequence is always the inner dimension.
fn levenshtein_by<F>(len_a: usize, len_b: usize, same: F) -> usize
where
    F: Fn(usize, usize) -> bool,
{
    if len_a < len_b {
        levenshtein_rows(len_b, len_a, |i, j| same(j, i))
    } else {
        levenshtein_rows(len_a, len_b, same)
    }
}

/// The DP with `row` spanning the second (shorter) sequence.
fn levenshtein_rows(len_a: usize, len_b: usize, same: impl Fn(usize, usize) -> bool) -> usize {
    if len_b == 0 {
        return len_a;
    }
    let mut row: Vec<usize> = (0..=len_b).collect();
    for i in 0..len_a {
        let mut diag = row[0];
        row[0] = i + 1;
        for j in 0..len_b {
            let sub = diag + usize::from(!same(i, j));
            let del = row[j + 1] + 1;
            let ins = row[j] + 1;
            diag = row[j + 1];
            row[j + 1] = sub.min(del).min(ins);
        }
    }
    row[len_b]
}

/// Classic Levenshtein distance over any comparable slices.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    levenshtein_by(a.len(), b.len(), |i, j| a[i] == b[j])
}

/// Wildcard-aware Levenshtein over raw slices. Masks must match their byte
/// slices in length; callers holding a [`ByteListing`] should go through
/// [`wildcard_levenshtein`], which checks this.
pub fn masked_levenshtein(a: &[u8], a_mask: &[bool], b: &[u8], b_mask: &[bool]) -> usize {
    debug_assert_eq!(a.len(), a_mask.len());
    debug_assert_eq!(b.len(), b_mask.len());
    levenshtein_by(a.len(), b.len(), |i, j| {
        a_mask[i] || b_mask[j] || a[i] == b[j]
    })
}

fn check_mask(listing: &ByteListing) -> Result<(), MetricsError> {
    if listing.bytes.len() != listing.wildcard_mask.len() {
        return Err(MetricsError::MaskLength {
            symbol: listing.symbol.clone(),
            bytes: listing.bytes.len(),
            mask: listing.wildcard_mask.len(),
        });
    }
    Ok(())
}

/// Byte distance between two function listings, relocation spans free on
/// both sides.
pub fn wildcard_levenshtein(a: &ByteListing, b: &ByteListing) -> Result<DistanceResult, MetricsError> {
    check_mask(a)?;
    check_mask(b)?;
    let raw = masked_levenshtein(&a.bytes, &a.wildcard_mask, &b.bytes, &b.wildcard_mask);
    Ok(DistanceResult::new(raw, a.bytes.len(), b.bytes.len()))
}

/// Equal length and equal bytes everywhere outside relocation spans.
pub fn exact_match(a: &ByteListing, b: &ByteListing) -> bool {
    if a.bytes.len() != b.bytes.len() {
        return false;
    }
    let wild = |l: &ByteListing, i: usize| l.wildcard_mask.get(i).copied().unwrap_or(false);
    a.bytes
        .iter()
        .zip(&b.bytes)
        .enumerate()
        .all(|(i, (x, y))| x == y || wild(a, i) || wild(b, i))
}

/// Collapses every whitespace run to a single space and trims both ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Character-level distance between two sources after whitespace
/// normalization.
pub fn source_edit_distance(a: &str, b: &str) -> DistanceResult {
    let a: Vec<char> = normalize_whitespace(a).chars().collect();
    let b: Vec<char> = normalize_whitespace(b).chars().collect();
    DistanceResult::new(levenshtein(&a, &b), a.len(), b.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn listing(bytes: &[u8], mask: &[bool]) -> ByteListing {
        ByteListing {
            bytes: bytes.to_vec(),
            wildcard_mask: mask.to_vec(),
            symbol: "f".into(),
            origin_profile: "test".into(),
        }
    }

    fn plain(bytes: &[u8]) -> ByteListing {
        listing(bytes, &vec![false; bytes.len()])
    }

    /// Exponential recursion over all alignments.
    fn brute(a: &[u8], am: &[bool], b: &[u8], bm: &[bool]) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        let sub_cost = usize::from(!(am[0] || bm[0] || a[0] == b[0]));
        let sub = brute(&a[1..], &am[1..], &b[1..], &bm[1..]) + sub_cost;
        let del = brute(&a[1..], &am[1..], b, bm) + 1;
        let ins = brute(a, am, &b[1..], &bm[1..]) + 1;
        sub.min(del).min(ins)
    }

    #[test]
    fn identity_is_zero() {
        let a = plain(b"\x55\x48\x89\xe5");
        let d = wildcard_levenshtein(&a, &a).unwrap();
        assert_eq!(d.raw, 0);
        assert_eq!(d.normalized, 0.0);
    }

    #[test]
    fn wildcard_absorbs_substitution() {
        let a = listing(b"axc", &[false, true, false]);
        let b = plain(b"abc");
        assert_eq!(brute(b"axc", &[false, true, false], b"abc", &[false; 3]), 0);
        assert_eq!(wildcard_levenshtein(&a, &b).unwrap().raw, 0);
        assert_eq!(wildcard_levenshtein(&b, &a).unwrap().raw, 0);
    }

    #[test]
    fn kitten_sitting() {
        let d = wildcard_levenshtein(&plain(b"kitten"), &plain(b"sitting")).unwrap();
        assert_eq!(d.raw, 3);
        assert_eq!(d.normalized, 3.0 / 7.0);
    }

    #[test]
    fn wildcards_do_not_make_length_changes_free() {
        let a = listing(b"ab", &[true, true]);
        let b = plain(b"abcd");
        assert_eq!(wildcard_levenshtein(&a, &b).unwrap().raw, 2);
    }

    #[test]
    fn both_empty_is_perfect() {
        let d = wildcard_levenshtein(&plain(b""), &plain(b"")).unwrap();
        assert_eq!(d.raw, 0);
        assert_eq!(d.normalized, 0.0);
    }

    #[test]
    fn mask_length_mismatch_is_rejected() {
        let bad = listing(b"abc", &[false]);
        assert!(matches!(
            wildcard_levenshtein(&bad, &plain(b"abc")),
            Err(MetricsError::MaskLength { bytes: 3, mask: 1, .. })
        ));
    }

    #[test]
    fn exact_match_cases() {
        let a = plain(b"\x01\x02\x03\x04");
        assert!(exact_match(&a, &a));
        let masked = listing(b"\x01\xff\x03\x04", &[false, true, false, false]);
        assert!(exact_match(&a, &masked));
        assert!(exact_match(&masked, &a));
        assert!(!exact_match(&a, &plain(b"\x01\x02\x03")));
        assert!(!exact_match(&a, &plain(b"\x01\x02\x03\x05")));
    }

    #[test]
    fn source_distance_cases() {
        assert_eq!(source_edit_distance("int f;", "int f;").raw, 0);
        let d = source_edit_distance("", "x");
        assert_eq!(d.raw, 1);
        assert_eq!(d.normalized, 1.0);
        assert_eq!(source_edit_distance("int f;", "int  f;").raw, 0);
        assert_eq!(source_edit_distance("  int\n\tf;  ", "int f;").raw, 0);
    }

    #[test]
    fn normalization_counts_chars_not_bytes() {
        let d = source_edit_distance("é", "e");
        assert_eq!(d.raw, 1);
        assert_eq!(d.normalized, 1.0);
    }

    fn masked_pair() -> impl Strategy<Value = (Vec<u8>, Vec<bool>, Vec<u8>, Vec<bool>)> {
        (0usize..=6, 0usize..=6).prop_flat_map(|(la, lb)| {
            (
                proptest::collection::vec(0u8..3, la),
                proptest::collection::vec(proptest::bool::weighted(0.2), la),
                proptest::collection::vec(0u8..3, lb),
                proptest::collection::vec(proptest::bool::weighted(0.2), lb),
            )
        })
    }

    proptest! {
        #[test]
        fn dp_equals_brute_force((a, am, b, bm) in masked_pair()) {
            prop_assert_eq!(masked_levenshtein(&a, &am, &b, &bm), brute(&a, &am, &b, &bm));
        }

        #[test]
        fn symmetric((a, am, b, bm) in masked_pair()) {
            prop_assert_eq!(
                masked_levenshtein(&a, &am, &b, &bm),
                masked_levenshtein(&b, &bm, &a, &am)
            );
        }

        #[test]
        fn exact_match_implies_zero_distance((a, am, b, bm) in masked_pair()) {
            let la = listing(&a, &am);
            let lb = listing(&b, &bm);
            let d = wildcard_levenshtein(&la, &lb).unwrap();
            if exact_match(&la, &lb) {
                prop_assert_eq!(d.raw, 0);
            }
            if a.len() == b.len() && d.raw == 0 {
                prop_assert!(exact_match(&la, &lb));
            }
            prop_assert!(d.normalized >= 0.0 && d.normalized <= 1.0);
            prop_assert!(d.raw <= a.len().max(b.len()));
        }

        #[test]
        fn classic_triangle_inequality(
            a in proptest::collection::vec(0u8..4, 0..10),
            b in proptest::collection::vec(0u8..4, 0..10),
            c in proptest::collection::vec(0u8..4, 0..10),
        ) {
            prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        }
    }
}
