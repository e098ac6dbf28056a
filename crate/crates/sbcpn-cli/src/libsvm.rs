//! Reader for the plain-text sparse sample format: one sample per line,
//! `label index:value index:value ...` with 1-based feature indices.

use std::io::BufRead;

use ndarray::Array1;
use sbcpn::experiments::classify::FeatureColumns;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LibsvmError {
    #[error("line {line}: {what}")]
    Malformed { line: usize, what: String },
    #[error("line {line}: feature index {index} outside 1..={n}")]
    IndexRange { line: usize, index: usize, n: usize },
    #[error("line {line}: duplicate feature index {index}")]
    Duplicate { line: usize, index: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Columns(String),
}

#[derive(Debug)]
pub struct ParsedData {
    pub features: FeatureColumns,
    /// Signs: positive input labels become 1, everything else -1.
    pub labels: Array1<f64>,
    /// 1-based line numbers of samples dropped for having no features.
    pub dropped: Vec<usize>,
}

pub fn parse_libsvm(reader: impl BufRead, n: usize) -> Result<ParsedData, LibsvmError> {
    let mut cols: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels: Vec<f64> = Vec::new();
    let mut lines: Vec<usize> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        // comments per the common convention
        let line = line.split('#').next().unwrap_or("");
        let mut fields = line.split_whitespace();
        let Some(first) = fields.next() else { continue };
        let label: f64 = first.parse().map_err(|_| LibsvmError::Malformed {
            line: lineno,
            what: format!("bad label {first:?}"),
        })?;
        let mut col: Vec<(usize, f64)> = Vec::new();
        for field in fields {
            let (idx, val) = field
                .split_once(':')
                .ok_or_else(|| LibsvmError::Malformed {
                    line: lineno,
                    what: format!("expected index:value, got {field:?}"),
                })?;
            let index: usize = idx.parse().map_err(|_| LibsvmError::Malformed {
                line: lineno,
                what: format!("bad feature index {idx:?}"),
            })?;
            if index == 0 || index > n {
                return Err(LibsvmError::IndexRange {
                    line: lineno,
                    index,
                    n,
                });
            }
            let value: f64 = val.parse().map_err(|_| LibsvmError::Malformed {
                line: lineno,
                what: format!("bad feature value {val:?}"),
            })?;
            col.push((index - 1, value));
        }
        col.sort_by_key(|&(i, _)| i);
        for w in col.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(LibsvmError::Duplicate {
                    line: lineno,
                    index: w[0].0 + 1,
                });
            }
        }
        cols.push(col);
        labels.push(if label > 0.0 { 1.0 } else { -1.0 });
        lines.push(lineno);
    }
    let features = FeatureColumns::new(n, cols).map_err(|e| LibsvmError::Columns(e.to_string()))?;
    let (features, dropped_pos) = features.normalized();
    let mut dropped = Vec::new();
    // walk backwards so earlier removals keep later positions valid
    for &j in dropped_pos.iter().rev() {
        labels.remove(j);
        dropped.push(lines.remove(j));
    }
    dropped.reverse();
    Ok(ParsedData {
        features,
        labels: Array1::from_vec(labels),
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn two_feature_sample_is_normalized() {
        let data = "1 1:0.5 3:0.5\n";
        let parsed = parse_libsvm(Cursor::new(data), 3).unwrap();
        assert_eq!(parsed.features.m(), 1);
        assert_eq!(parsed.labels[0], 1.0);
        let col = parsed.features.column(0);
        let r = 0.5f64.sqrt();
        assert_eq!(col.len(), 2);
        assert!((col[0].1 - r).abs() < 1e-15 && col[0].0 == 0);
        assert!((col[1].1 - r).abs() < 1e-15 && col[1].0 == 2);
    }

    #[test]
    fn unit_entry_and_plus_sign_label() {
        let parsed = parse_libsvm(Cursor::new("+1 2:1\n"), 4).unwrap();
        let col = parsed.features.column(0);
        assert_eq!(col, &[(1, 1.0)]);
        assert_eq!(parsed.labels[0], 1.0);
    }

    #[test]
    fn zero_label_maps_to_negative() {
        let parsed = parse_libsvm(Cursor::new("0 1:2\n1 2:1\n"), 2).unwrap();
        assert_eq!(parsed.labels.to_vec(), vec![-1.0, 1.0]);
    }

    #[test]
    fn empty_sample_dropped_with_line_number() {
        let data = "1 1:1\n-1\n1 2:1\n";
        let parsed = parse_libsvm(Cursor::new(data), 2).unwrap();
        assert_eq!(parsed.features.m(), 2);
        assert_eq!(parsed.dropped, vec![2]);
        assert_eq!(parsed.labels.to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_libsvm(Cursor::new("1 1:1\n-1 5:1\n"), 4).unwrap_err();
        assert!(matches!(
            err,
            LibsvmError::IndexRange {
                line: 2,
                index: 5,
                n: 4
            }
        ));
        let err = parse_libsvm(Cursor::new("x 1:1\n"), 4).unwrap_err();
        assert!(matches!(err, LibsvmError::Malformed { line: 1, .. }));
        let err = parse_libsvm(Cursor::new("1 3:1 3:2\n"), 4).unwrap_err();
        assert!(matches!(err, LibsvmError::Duplicate { line: 1, index: 3 }));
        let err = parse_libsvm(Cursor::new("1 0:1\n"), 4).unwrap_err();
        assert!(matches!(
            err,
            LibsvmError::IndexRange {
                line: 1,
                index: 0,
                ..
            }
        ));
    }

    #[test]
    fn out_of_order_indices_are_sorted() {
        let parsed = parse_libsvm(Cursor::new("1 3:0.6 1:0.8\n"), 3).unwrap();
        let col = parsed.features.column(0);
        assert_eq!(col.len(), 2);
        assert!((col[0].1 - 0.8).abs() < 1e-15 && col[0].0 == 0);
        assert!((col[1].1 - 0.6).abs() < 1e-15 && col[1].0 == 2);
    }

    #[test]
    fn blank_lines_and_comments_skipped() {
        let data = "\n# header\n1 1:1\n   \n";
        let parsed = parse_libsvm(Cursor::new(data), 1).unwrap();
        assert_eq!(parsed.features.m(), 1);
    }
}
