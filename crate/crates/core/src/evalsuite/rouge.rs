//! ROUGE-L: longest-common-subsequence F-score over whitespace tokens.

/// LCS length between two token sequences.
fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut prev = vec![0usize; m + 1];
    let mut curr = vec![0usize; m + 1];
    for i in 0..n {
        for j in 0..m {
            curr[j + 1] = if a[i] == b[j] { prev[j] + 1 } else { curr[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[m]
}

/// F1 form (beta = 1): R = LCS/|ref|, P = LCS/|cand|, F = 2PR/(P+R).
/// Both empty -> 1.0; exactly one empty -> 0.0; LCS = 0 -> 0.0.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    match (c.is_empty(), r.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let lcs = lcs_len(&c, &r) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let recall = lcs / r.len() as f64;
    let precision = lcs / c.len() as f64;
    2.0 * precision * recall / (precision + recall)
}
