use serde::{Deserialize, Serialize};

use super::DataError;

/// Sliding-window resampling parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub window_len: usize,
    pub hop: usize,
    /// Start of the extra training pass; its windows overlap the first pass.
    pub train_offset: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            window_len: 300,
            hop: 200,
            train_offset: 100,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.hop == 0 || self.hop > self.window_len {
            return Err(DataError::ShapeMismatch(format!(
                "hop {} must lie in [1, window_len {}]",
                self.hop, self.window_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowMode {
    Train,
    Eval,
}

/// Frame range `[start, end)`. `end` may run past the trial; those frames
/// are zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    /// Number of real (unpadded) frames for a trial of `n` frames.
    pub fn valid_len(&self, n: usize) -> usize {
        n.min(self.end).saturating_sub(self.start)
    }
}

/// One pass of windows starting at `first`, stepping by `hop` until a window
/// reaches the end of the trial.
fn pass(n: usize, cfg: &WindowConfig, first: usize, out: &mut Vec<Window>) {
    let mut start = first;
    while start < n {
        let end = start + cfg.window_len;
        out.push(Window { start, end });
        if end >= n {
            break;
        }
        start += cfg.hop;
    }
}

/// Windows at `0, hop, 2·hop, …` covering all `n` frames. Training adds a
/// second pass starting at `train_offset`.
pub fn make_windows(n: usize, cfg: &WindowConfig, mode: WindowMode) -> Vec<Window> {
    let mut out = Vec::new();
    pass(n, cfg, 0, &mut out);
    if mode == WindowMode::Train && cfg.train_offset > 0 {
        pass(n, cfg, cfg.train_offset, &mut out);
    }
    out
}
