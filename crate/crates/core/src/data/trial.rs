use std::fs;
use std::path::Path;

use super::{
    assemble_visual, fit_length, gather_rows, parse_annotations, populate_word_features,
    read_feature_file, read_word_spans, DataError, Frames, ManifestRow, Matrix, NormStats,
    Partition,
};

/// One aligned trial. Every modality has `len()` rows.
#[derive(Clone, Debug)]
pub struct Trial {
    pub trial_id: String,
    pub subject_id: String,
    pub partition: Partition,
    pub fps: f64,
    /// `None` for unlabelled trials.
    pub labels: Option<Vec<[f64; 2]>>,
    /// Original frame index of every kept row.
    pub frame_index_map: Vec<usize>,
    pub visual: Frames,
    pub audio: Matrix,
    pub text: Matrix,
}

impl Trial {
    pub fn len(&self) -> usize {
        self.frame_index_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_index_map.is_empty()
    }

    /// `(valence, arousal)` label columns.
    pub fn label_columns(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        self.labels
            .as_ref()
            .map(|l| (l.iter().map(|p| p[0]).collect(), l.iter().map(|p| p[1]).collect()))
    }

    /// Audio and text z-scored with `stats`.
    pub fn normalized(&self, stats: &NormStats) -> Result<Trial, DataError> {
        Ok(Trial {
            audio: stats.audio.apply(&self.audio)?,
            text: stats.text.apply(&self.text)?,
            ..self.clone()
        })
    }
}

/// Frame count of an unlabelled trial: one past the highest frame file index.
fn frame_count(dir: &Path) -> Result<usize, DataError> {
    if !dir.is_dir() {
        return Ok(0);
    }
    let mut count = 0;
    for entry in fs::read_dir(dir).map_err(DataError::io(dir))? {
        let path = entry.map_err(DataError::io(dir))?.path();
        if let Some(idx) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<usize>().ok()) {
            count = count.max(idx + 1);
        }
    }
    Ok(count)
}

/// Loads and aligns one trial. Audio and word features are first fitted to
/// the original frame count, then reduced to the kept rows.
pub fn load_trial(row: &ManifestRow) -> Result<Trial, DataError> {
    let audio_raw = read_feature_file(&row.audio_feat_path)?;
    let (labels, map, total) = if row.is_labelled() {
        let text = fs::read_to_string(&row.annotation_path).map_err(DataError::io(&row.annotation_path))?;
        let ann = parse_annotations(&text)?;
        (Some(ann.labels), ann.frame_index_map, ann.total_rows)
    } else {
        let n = match frame_count(&row.frames_dir)? {
            0 => audio_raw.rows,
            n => n,
        };
        if n == 0 {
            return Err(DataError::EmptyTrial);
        }
        (None, (0..n).collect(), n)
    };
    let audio = gather_rows(&fit_length(&audio_raw, total)?, &map)?;
    let (spans, dim) = read_word_spans(&row.wordspan_csv, &row.wordfeat_path)?;
    let text = gather_rows(&populate_word_features(&spans, total, row.fps, dim)?, &map)?;
    let visual = assemble_visual(&row.frames_dir, map.len(), &map)?;
    Ok(Trial {
        trial_id: row.trial_id.clone(),
        subject_id: row.subject_id.clone(),
        partition: row.partition,
        fps: row.fps,
        labels,
        frame_index_map: map,
        visual,
        audio,
        text,
    })
}

pub fn load_trials(rows: &[ManifestRow]) -> Result<Vec<Trial>, DataError> {
    rows.iter().map(load_trial).collect()
}
