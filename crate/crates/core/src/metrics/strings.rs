use super::MetricError;

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// Global alignment score with match 1, mismatch 0, gap 0, divided by the
/// longer length. Under this scoring the best alignment is an LCS.
pub fn sequence_score<T: PartialEq>(a: &[T], b: &[T]) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::Contract("sequence score needs non-empty strings".into()));
    }
    Ok(lcs_len(a, b) as f64 / a.len().max(b.len()) as f64)
}

/// Levenshtein distance with unit insert, delete and substitute costs.
pub fn fixation_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = (diag + usize::from(x != y)).min(up + 1).min(row[j] + 1);
            diag = up;
        }
    }
    row[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        assert_eq!(sequence_score(b"ABC", b"ABC").unwrap(), 1.0);
        assert_eq!(sequence_score(b"AB", b"CD").unwrap(), 0.0);
        assert!((sequence_score(b"ABC", b"ABD").unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(sequence_score::<u8>(b"", b"A").is_err());
        assert_eq!(fixation_edit_distance(b"ABC", b"ABC"), 0);
        assert_eq!(fixation_edit_distance(b"", b"ABCD"), 4);
        assert_eq!(fixation_edit_distance(b"ABC", b"ABD"), 1);
    }
}
