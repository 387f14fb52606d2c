use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::augment::{Frames, FRAME_SIZE};
use super::{read_feature_file, DataError, Matrix};

/// Pads by repeating the last row, or keeps the first `n` rows.
pub fn fit_length(feat: &Matrix, n: usize) -> Result<Matrix, DataError> {
    if feat.rows == 0 {
        return Err(DataError::EmptyFeature);
    }
    let mut data = Vec::with_capacity(n * feat.cols);
    for i in 0..n {
        data.extend_from_slice(feat.row(i.min(feat.rows - 1)));
    }
    Matrix::new(n, feat.cols, data)
}

/// Row `i` of the result is row `index[i]` of `m`.
pub fn gather_rows(m: &Matrix, index: &[usize]) -> Result<Matrix, DataError> {
    let mut data = Vec::with_capacity(index.len() * m.cols);
    for &i in index {
        if i >= m.rows {
            return Err(DataError::ShapeMismatch(format!("row {i} of {}", m.rows)));
        }
        data.extend_from_slice(m.row(i));
    }
    Matrix::new(index.len(), m.cols, data)
}

/// One recognised word with its time span in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct WordSpan {
    pub word: String,
    pub start_s: f64,
    pub end_s: f64,
    pub feature: Vec<f64>,
}

/// Frame `i` (at `i / fps` seconds) takes the feature of the span with
/// `start_s <= i / fps < end_s`; frames outside every span stay zero.
pub fn populate_word_features(
    spans: &[WordSpan],
    n: usize,
    fps: f64,
    dim: usize,
) -> Result<Matrix, DataError> {
    if !(fps > 0.0) {
        return Err(DataError::InvalidSpan(format!("fps {fps}")));
    }
    for s in spans {
        if s.feature.len() != dim {
            return Err(DataError::ShapeMismatch(format!(
                "word {:?} has {} features, expected {dim}",
                s.word,
                s.feature.len()
            )));
        }
        if !(s.start_s < s.end_s) {
            return Err(DataError::InvalidSpan(format!(
                "{:?}: [{}, {})",
                s.word, s.start_s, s.end_s
            )));
        }
    }
    let mut order: Vec<&WordSpan> = spans.iter().collect();
    order.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    for pair in order.windows(2) {
        if pair[1].start_s < pair[0].end_s {
            return Err(DataError::OverlappingSpans(
                pair[0].start_s,
                pair[0].end_s,
                pair[1].start_s,
                pair[1].end_s,
            ));
        }
    }
    let mut out = Matrix::zeros(n, dim);
    let mut next = 0;
    for i in 0..n {
        let t = i as f64 / fps;
        while next < order.len() && order[next].end_s <= t {
            next += 1;
        }
        if let Some(s) = order.get(next) {
            if s.start_s <= t {
                out.row_mut(i).copy_from_slice(&s.feature);
            }
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct SpanRow {
    word: String,
    start_s: f64,
    end_s: f64,
}

/// Reads a `word,start_s,end_s` CSV and its companion feature matrix, whose
/// row `i` belongs to CSV row `i`.
pub fn read_word_spans(csv_path: &Path, feat_path: &Path) -> Result<(Vec<WordSpan>, usize), DataError> {
    let feats = read_feature_file(feat_path)?;
    let mut reader = csv::Reader::from_path(csv_path)?;
    let mut spans = Vec::new();
    for (i, row) in reader.deserialize::<SpanRow>().enumerate() {
        let row = row.map_err(|e| DataError::MalformedRow {
            line: i + 2,
            detail: e.to_string(),
        })?;
        if i >= feats.rows {
            return Err(DataError::ShapeMismatch(format!(
                "{} word rows but {} feature rows",
                i + 1,
                feats.rows
            )));
        }
        spans.push(WordSpan {
            word: row.word,
            start_s: row.start_s,
            end_s: row.end_s,
            feature: feats.row(i).to_vec(),
        });
    }
    if spans.len() != feats.rows {
        return Err(DataError::ShapeMismatch(format!(
            "{} word rows but {} feature rows",
            spans.len(),
            feats.rows
        )));
    }
    Ok((spans, feats.cols))
}

/// Original frame index encoded in a file stem such as `00042`.
fn frame_index(path: &Path) -> Option<usize> {
    path.file_stem()?.to_str()?.parse().ok()
}

/// Builds the `[n × 3 × 48 × 48]` frame block. Row `i` holds the image of
/// original frame `index_map[i]` when that file exists and zeros otherwise.
pub fn assemble_visual(frames_dir: &Path, n: usize, index_map: &[usize]) -> Result<Frames, DataError> {
    if index_map.len() != n {
        return Err(DataError::ShapeMismatch(format!(
            "{} map entries for {n} rows",
            index_map.len()
        )));
    }
    let mut files = HashMap::new();
    if frames_dir.is_dir() {
        for entry in fs::read_dir(frames_dir).map_err(DataError::io(frames_dir))? {
            let path = entry.map_err(DataError::io(frames_dir))?.path();
            let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if let (true, Some(idx)) = (is_png, frame_index(&path)) {
                files.insert(idx, path);
            }
        }
    }
    let mut frames = Frames::zeros(n, FRAME_SIZE);
    for (row, orig) in index_map.iter().enumerate() {
        if let Some(path) = files.get(orig) {
            frames.set_frame(row, &load_png(path)?);
        }
    }
    Ok(frames)
}

/// Decodes an RGB frame into channel-major bytes.
fn load_png(path: &Path) -> Result<Vec<u8>, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    if (w as usize, h as usize) != (FRAME_SIZE, FRAME_SIZE) {
        return Err(DataError::Image {
            path: path.to_path_buf(),
            detail: format!("{w}x{h}, expected {FRAME_SIZE}x{FRAME_SIZE}"),
        });
    }
    let plane = FRAME_SIZE * FRAME_SIZE;
    let mut out = vec![0u8; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px[c];
        }
    }
    Ok(out)
}
