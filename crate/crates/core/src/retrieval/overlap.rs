use crate::corpus::{content_vec, TokenId};

/// Length of the longest common run of consecutive tokens, PAD removed.
pub fn lcs_tokens(a: &[TokenId], b: &[TokenId]) -> usize {
    let a = content_vec(a);
    let b = content_vec(b);
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    // rolling row of run lengths ending at (i, j)
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    let mut best = 0;
    for &x in &a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { 0 };
            best = best.max(cur[j + 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    best
}

/// True iff the two sequences share no consecutive run longer than
/// `threshold` tokens.
pub fn overlap_ok(seq: &[TokenId], context: &[TokenId], threshold: usize) -> bool {
    lcs_tokens(seq, context) <= threshold
}

pub const DEFAULT_OVERLAP_THRESHOLD: usize = 8;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PAD;

    #[test]
    fn examples() {
        assert_eq!(lcs_tokens(&[1, 2, 3, 4], &[9, 2, 3, 4, 7]), 3);
        assert_eq!(lcs_tokens(&[], &[1, 2]), 0);
        assert_eq!(lcs_tokens(&[5, 6, 7, 8, 9], &[5, 6, 7, 8, 9]), 5);
        // PAD is removed before matching, so runs can span former padding
        assert_eq!(lcs_tokens(&[5, PAD, 6], &[5, 6]), 2);
    }

    #[test]
    fn threshold_is_inclusive() {
        let run: Vec<TokenId> = (10..19).collect();
        assert!(overlap_ok(&run[..8], &run, 8));
        assert!(!overlap_ok(&run, &run, 8));
        assert!(overlap_ok(&[4, 5], &[6, 7], 8));
    }
}
