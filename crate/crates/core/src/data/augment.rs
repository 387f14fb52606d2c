use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::normalize::normalize_visual_pixel;
use super::DataError;
use crate::tensor::Tensor;

/// Side length of stored face frames.
pub const FRAME_SIZE: usize = 48;
/// Side length fed to the visual backbone.
pub const CROP: usize = 40;

/// `n` RGB frames stored channel-major as bytes, `[n × 3 × size × size]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frames {
    n: usize,
    size: usize,
    data: Vec<u8>,
}

impl Frames {
    pub fn zeros(n: usize, size: usize) -> Self {
        Frames {
            n,
            size,
            data: vec![0; n * 3 * size * size],
        }
    }

    pub fn new(n: usize, size: usize, data: Vec<u8>) -> Result<Self, DataError> {
        if data.len() != n * 3 * size * size {
            return Err(DataError::ShapeMismatch(format!(
                "{} bytes for {n} frames of {size}x{size}",
                data.len()
            )));
        }
        Ok(Frames { n, size, data })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn frame_len(&self) -> usize {
        3 * self.size * self.size
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        &self.data[i * self.frame_len()..(i + 1) * self.frame_len()]
    }

    pub fn set_frame(&mut self, i: usize, pixels: &[u8]) {
        let len = self.frame_len();
        self.data[i * len..(i + 1) * len].copy_from_slice(pixels);
    }

    /// Frames `start..end`, with indices past the end returned as zero frames.
    pub fn slice_padded(&self, start: usize, end: usize) -> Frames {
        let len = self.frame_len();
        let mut data = vec![0; (end - start) * len];
        let stop = end.min(self.n);
        if start < stop {
            data[..(stop - start) * len].copy_from_slice(&self.data[start * len..stop * len]);
        }
        Frames {
            n: end - start,
            size: self.size,
            data,
        }
    }

    /// `[n × 3 × size × size]` tensor with pixels mapped into `[-1, 1]`.
    /// Rows from `valid` onward are padding and stay exactly zero.
    pub fn to_tensor(&self, valid: usize) -> Result<Tensor, DataError> {
        let cut = valid.min(self.n) * self.frame_len();
        let mut data: Vec<f64> = self.data[..cut].iter().map(|&p| normalize_visual_pixel(p)).collect();
        data.resize(self.data.len(), 0.0);
        Tensor::new(vec![self.n, 3, self.size, self.size], data)
            .map_err(|e| DataError::ShapeMismatch(e.to_string()))
    }
}

/// Training draws one flip and one crop offset per call (one window);
/// evaluation takes the centre crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augment {
    Train { seed: u64 },
    Eval,
}

pub fn augment_visual(frames: &Frames, mode: Augment) -> Result<Frames, DataError> {
    if frames.size != FRAME_SIZE {
        return Err(DataError::ShapeMismatch(format!(
            "frames are {0}x{0}, expected {FRAME_SIZE}x{FRAME_SIZE}",
            frames.size
        )));
    }
    let margin = FRAME_SIZE - CROP;
    let (top, left, flip) = match mode {
        Augment::Eval => (margin / 2, margin / 2, false),
        Augment::Train { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let flip = rng.gen_bool(0.5);
            (rng.gen_range(0..=margin), rng.gen_range(0..=margin), flip)
        }
    };
    let (src_plane, dst_plane) = (FRAME_SIZE * FRAME_SIZE, CROP * CROP);
    let mut out = Frames::zeros(frames.n, CROP);
    for i in 0..frames.n {
        let src = frames.frame(i);
        let dst = &mut out.data[i * 3 * dst_plane..(i + 1) * 3 * dst_plane];
        for c in 0..3 {
            for y in 0..CROP {
                let row = &src[c * src_plane + (top + y) * FRAME_SIZE + left..][..CROP];
                let to = &mut dst[c * dst_plane + y * CROP..][..CROP];
                to.copy_from_slice(row);
                if flip {
                    to.reverse();
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Frames {
        let data = (0..n * 3 * FRAME_SIZE * FRAME_SIZE).map(|i| (i % 251) as u8).collect();
        Frames::new(n, FRAME_SIZE, data).unwrap()
    }

    #[test]
    fn eval_is_center_crop() {
        let f = ramp(2);
        let out = augment_visual(&f, Augment::Eval).unwrap();
        assert_eq!(out.size(), CROP);
        let plane = FRAME_SIZE * FRAME_SIZE;
        for c in 0..3 {
            for y in 0..CROP {
                for x in 0..CROP {
                    let got = out.frame(1)[c * CROP * CROP + y * CROP + x];
                    let want = f.frame(1)[c * plane + (y + 4) * FRAME_SIZE + x + 4];
                    assert_eq!(got, want);
                }
            }
        }
    }

    #[test]
    fn train_is_seeded() {
        let f = ramp(3);
        let a = augment_visual(&f, Augment::Train { seed: 5 }).unwrap();
        assert_eq!(a, augment_visual(&f, Augment::Train { seed: 5 }).unwrap());
        assert_eq!((a.len(), a.size()), (3, CROP));
        let distinct: std::collections::HashSet<Vec<u8>> = (0..40)
            .map(|s| augment_visual(&f, Augment::Train { seed: s }).unwrap().frame(0).to_vec())
            .collect();
        assert!(distinct.len() > 10);
    }

    #[test]
    fn rejects_wrong_size() {
        let f = Frames::zeros(1, 40);
        assert!(matches!(augment_visual(&f, Augment::Eval), Err(DataError::ShapeMismatch(_))));
    }

    #[test]
    fn padded_slice_and_tensor() {
        let f = ramp(3);
        let s = f.slice_padded(2, 5);
        assert_eq!(s.len(), 3);
        assert_eq!(s.frame(0), f.frame(2));
        assert!(s.frame(1).iter().chain(s.frame(2)).all(|&v| v == 0));
        let t = s.to_tensor(1).unwrap();
        assert_eq!(t.shape(), &[3, 3, 48, 48]);
        assert!(t.data()[3 * 48 * 48..].iter().all(|&v| v == 0.0));
    }
}
