use crate::data::{Dataset, Image};
use crate::error::{Error, Result};
use crate::loss::GtPyramid;
use crate::tensor::Tensor;

/// Consecutive frames of several sequences stacked per time step.
#[derive(Debug, Clone)]
pub struct Batch {
    /// One `[B, 3, H, W]` tensor per frame.
    pub frames: Vec<Tensor>,
    /// One `[B, 2, H, W]` tensor per pair.
    pub flows: Vec<Tensor>,
    /// One `[B, 1, H, W]` tensor per pair.
    pub occlusions: Vec<Tensor>,
}

impl Batch {
    /// Frames `start..start + len` of each listed sequence.
    pub fn gather(ds: &Dataset, items: &[(usize, usize)], len: usize) -> Result<Batch> {
        if len < 2 {
            return Err(Error::Contract(format!("a window needs at least 2 frames, got {len}")));
        }
        for &(seq, start) in items {
            let s = ds
                .sequences
                .get(seq)
                .ok_or_else(|| Error::Contract(format!("sequence {seq} out of range")))?;
            if start + len > s.frames.len() {
                return Err(Error::Contract(format!(
                    "window {start}..{} exceeds the {} frames of sequence {seq}",
                    start + len,
                    s.frames.len()
                )));
            }
        }
        let stack = |kind: usize, t: usize| {
            let ims: Vec<&Image> = items
                .iter()
                .map(|&(s, st)| {
                    let seq = &ds.sequences[s];
                    match kind {
                        0 => &seq.frames[st + t],
                        1 => &seq.flows[st + t],
                        _ => &seq.occlusions[st + t],
                    }
                })
                .collect();
            Image::batch(&ims)
        };
        let frames = (0..len).map(|t| stack(0, t)).collect::<Result<_>>()?;
        let flows = (0..len - 1).map(|t| stack(1, t)).collect::<Result<_>>()?;
        let occlusions = (0..len - 1).map(|t| stack(2, t)).collect::<Result<_>>()?;
        Ok(Batch {
            frames,
            flows,
            occlusions,
        })
    }

    /// Ground-truth pyramids for every pair; occlusion only when requested.
    pub fn pyramids(&self, levels: usize, with_occlusion: bool) -> Result<Vec<GtPyramid>> {
        self.flows
            .iter()
            .zip(&self.occlusions)
            .map(|(f, o)| GtPyramid::build(f, with_occlusion.then_some(o), levels))
            .collect()
    }
}
