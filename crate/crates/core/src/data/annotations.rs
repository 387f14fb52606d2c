use super::DataError;

/// Marks a frame without a valid label.
pub const SENTINEL: f64 = -5.0;

/// Kept labels and the original frame index of each kept row.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotations {
    pub labels: Vec<[f64; 2]>,
    pub frame_index_map: Vec<usize>,
    /// Number of data rows in the file, kept or not.
    pub total_rows: usize,
}

/// Parses a `valence,arousal` file. A row is dropped when either value is the
/// sentinel; any other value must be a number in `[-1, 1]`.
pub fn parse_annotations(text: &str) -> Result<Annotations, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.len() != 2 || &header[0] != "valence" || &header[1] != "arousal" {
        return Err(DataError::MalformedRow {
            line: 1,
            detail: format!("expected header valence,arousal, got {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    let mut labels = Vec::new();
    let mut frame_index_map = Vec::new();
    let mut total_rows = 0;
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| DataError::MalformedRow {
            line,
            detail: e.to_string(),
        })?;
        if record.len() != 2 {
            return Err(DataError::MalformedRow {
                line,
                detail: format!("{} fields", record.len()),
            });
        }
        let mut pair = [0.0; 2];
        for (slot, field) in pair.iter_mut().zip(record.iter()) {
            *slot = field.parse::<f64>().map_err(|_| DataError::MalformedRow {
                line,
                detail: format!("not a number: {field:?}"),
            })?;
        }
        total_rows += 1;
        if pair.contains(&SENTINEL) {
            continue;
        }
        if pair.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(DataError::MalformedRow {
                line,
                detail: format!("label {pair:?} outside [-1, 1]"),
            });
        }
        labels.push(pair);
        frame_index_map.push(i);
    }
    if labels.is_empty() {
        return Err(DataError::EmptyTrial);
    }
    Ok(Annotations {
        labels,
        frame_index_map,
        total_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drops_sentinel_rows() {
        let a = parse_annotations("valence,arousal\n0.1,0.2\n-5,-5\n0.3,0.4\n").unwrap();
        assert_eq!(a.labels, vec![[0.1, 0.2], [0.3, 0.4]]);
        assert_eq!(a.frame_index_map, vec![0, 2]);
        assert_eq!(a.total_rows, 3);
    }

    #[test]
    fn either_column_sentinel_excludes() {
        let a = parse_annotations("valence,arousal\n0.1,-5\n-5,0.2\n0.5,0.5\n").unwrap();
        assert_eq!(a.frame_index_map, vec![2]);
    }

    #[test]
    fn identity_map_without_sentinels() {
        let a = parse_annotations("valence,arousal\n0,0\n1,-1\n0.5,0.25\n").unwrap();
        assert_eq!(a.frame_index_map, vec![0, 1, 2]);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            parse_annotations("valence,arousal\n-5,-5\n-5,-5\n"),
            Err(DataError::EmptyTrial)
        ));
        assert!(matches!(parse_annotations("valence,arousal\n"), Err(DataError::EmptyTrial)));
        assert!(matches!(
            parse_annotations("valence,arousal\n0.1,abc\n"),
            Err(DataError::MalformedRow { line: 2, .. })
        ));
        assert!(matches!(
            parse_annotations("valence,arousal\n0.1,0.2\n0.1\n"),
            Err(DataError::MalformedRow { line: 3, .. })
        ));
        assert!(matches!(
            parse_annotations("v,a\n0.1,0.2\n"),
            Err(DataError::MalformedRow { line: 1, .. })
        ));
        assert!(matches!(
            parse_annotations("valence,arousal\n1.5,0.2\n"),
            Err(DataError::MalformedRow { line: 2, .. })
        ));
    }
}
