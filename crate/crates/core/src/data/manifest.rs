use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl FromStr for Partition {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Partition::Train),
            "val" | "validation" => Ok(Partition::Validation),
            "test" => Ok(Partition::Test),
            other => Err(DataError::Manifest(format!("unknown partition {other:?}"))),
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Train => "train",
            Partition::Validation => "validation",
            Partition::Test => "test",
        })
    }
}

impl Serialize for Partition {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Partition {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One manifest line. Relative paths are resolved against the manifest's
/// directory by [`read_manifest`]. An empty `annotation_path` marks an
/// unlabelled trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub trial_id: String,
    pub subject_id: String,
    pub partition: Partition,
    pub fps: f64,
    pub frames_dir: PathBuf,
    pub annotation_path: PathBuf,
    pub audio_feat_path: PathBuf,
    pub wordspan_csv: PathBuf,
    pub wordfeat_path: PathBuf,
}

impl ManifestRow {
    fn resolve(mut self, base: &Path) -> Self {
        for p in [
            &mut self.frames_dir,
            &mut self.annotation_path,
            &mut self.audio_feat_path,
            &mut self.wordspan_csv,
            &mut self.wordfeat_path,
        ] {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        }
        self
    }

    pub fn is_labelled(&self) -> bool {
        !self.annotation_path.as_os_str().is_empty()
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>, DataError> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row?;
        if !(row.fps > 0.0) {
            return Err(DataError::Manifest(format!("{}: fps must be positive", row.trial_id)));
        }
        if rows.iter().any(|r: &ManifestRow| r.trial_id == row.trial_id) {
            return Err(DataError::Manifest(format!("duplicate trial_id {}", row.trial_id)));
        }
        rows.push(row.resolve(&base));
    }
    Ok(rows)
}

/// Writes rows verbatim; paths are not relativised.
pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| DataError::Csv(e.into()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let row = ManifestRow {
            trial_id: "t1".into(),
            subject_id: "s1".into(),
            partition: Partition::Validation,
            fps: 30.0,
            frames_dir: "frames/t1".into(),
            annotation_path: "ann/t1.csv".into(),
            audio_feat_path: "/abs/audio.aff".into(),
            wordspan_csv: "w.csv".into(),
            wordfeat_path: "w.aff".into(),
        };
        let path = dir.path().join("m.csv");
        write_manifest(&path, &[row.clone()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "trial_id,subject_id,partition,fps,frames_dir,annotation_path,audio_feat_path,wordspan_csv,wordfeat_path\n"
        ));
        let back = read_manifest(&path).unwrap();
        assert_eq!(back[0].frames_dir, dir.path().join("frames/t1"));
        assert_eq!(back[0].audio_feat_path, PathBuf::from("/abs/audio.aff"));
        assert_eq!(back[0].partition, Partition::Validation);
    }

    #[test]
    fn rejects_unknown_partition() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(
            &path,
            "trial_id,subject_id,partition,fps,frames_dir,annotation_path,audio_feat_path,wordspan_csv,wordfeat_path\n\
             t,s,holdout,30,f,a,b,c,d\n",
        )
        .unwrap();
        assert!(read_manifest(&path).is_err());
    }
}
