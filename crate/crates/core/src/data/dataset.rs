//! Generated datasets, in memory and on disk.
//!
//! On disk a dataset is a directory with `dataset.json` and one
//! sub-directory per sequence holding `frame_TT.png` (16-bit RGB),
//! `flow_TT.flo` and `occ_TT.png` (8-bit, 255 = occluded).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::flo::{read_flo, write_flo};
use super::image::Image;
use super::pngio;
use super::scene::{generate, SceneSpec, SequenceSample};
use super::suite::SuiteSpec;
use crate::error::{Error, Result};
use crate::loss::Supervision;

pub const DATASET_FILE: &str = "dataset.json";
pub const DATASET_VERSION: u32 = 1;

/// What to generate: either one fixed scene (samples differ only in noise)
/// or draws from a random suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSpec {
    pub frames: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scene: Option<SceneSpec>,
    #[serde(default)]
    pub suite: Option<SuiteSpec>,
    /// `last_step` marks only the final pair of each sequence as annotated.
    #[serde(default)]
    pub supervision: Supervision,
}

impl GenerateSpec {
    pub fn suite(suite: SuiteSpec, frames: usize, seed: u64) -> Self {
        GenerateSpec {
            frames,
            seed,
            scene: None,
            suite: Some(suite),
            supervision: Supervision::AllSteps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.scene, &self.suite) {
            (Some(s), None) => s.validate(self.frames),
            (None, Some(s)) => s.validate(self.frames),
            _ => Err(Error::Spec("exactly one of `scene` or `suite` must be given".into())),
        }
    }

    fn scene_for(&self, index: usize) -> SceneSpec {
        match (&self.scene, &self.suite) {
            (Some(s), _) => s.clone(),
            (None, Some(s)) => s.scene(self.seed, index as u64),
            (None, None) => unreachable!("validated"),
        }
    }

    fn noise_seed(&self, index: usize) -> u64 {
        self.seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub dir: String,
    pub noise_seed: u64,
    pub scene: SceneSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub supervision: Supervision,
    pub source: GenerateSpec,
    pub entries: Vec<DatasetEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub sequences: Vec<SequenceSample>,
}

fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Rounds values to what the on-disk formats store, so that a dataset
/// loaded from disk equals the one generated in memory.
fn snap_to_storage(s: &mut SequenceSample) {
    for f in &mut s.frames {
        for v in &mut f.data {
            *v = quantize16(*v) as f64 / 65535.0;
        }
    }
    for f in &mut s.flows {
        for v in &mut f.data {
            *v = *v as f32 as f64;
        }
    }
}

fn frame_name(t: usize) -> String {
    format!("frame_{t:02}.png")
}
fn flow_name(t: usize) -> String {
    format!("flow_{t:02}.flo")
}
fn occ_name(t: usize) -> String {
    format!("occ_{t:02}.png")
}

impl Dataset {
    pub fn generate(spec: &GenerateSpec, count: usize) -> Result<Self> {
        spec.validate()?;
        if count == 0 {
            return Err(Error::Spec("count must be at least 1".into()));
        }
        let mut entries = Vec::with_capacity(count);
        let mut sequences = Vec::with_capacity(count);
        for i in 0..count {
            let scene = spec.scene_for(i);
            let noise_seed = spec.noise_seed(i);
            let mut s = generate(&scene, spec.frames, noise_seed)?;
            snap_to_storage(&mut s);
            entries.push(DatasetEntry {
                dir: format!("seq_{i:05}"),
                noise_seed,
                scene,
            });
            sequences.push(s);
        }
        let first = &sequences[0].frames[0];
        let (width, height) = (first.width, first.height);
        if sequences
            .iter()
            .any(|s| s.frames[0].width != width || s.frames[0].height != height)
        {
            return Err(Error::Spec("all scenes of a dataset must share one canvas size".into()));
        }
        Ok(Dataset {
            manifest: DatasetManifest {
                version: DATASET_VERSION,
                frames: spec.frames,
                width,
                height,
                supervision: spec.supervision,
                source: spec.clone(),
                entries,
            },
            sequences,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.manifest.frames
    }

    /// Writes into `dir`, which must not already hold a manifest.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let manifest_path = dir.join(DATASET_FILE);
        if manifest_path.exists() {
            return Err(Error::Contract(format!(
                "{} already contains a dataset",
                dir.display()
            )));
        }
        let mut written = Vec::new();
        for (entry, seq) in self.manifest.entries.iter().zip(&self.sequences) {
            let sub = dir.join(&entry.dir);
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for (t, f) in seq.frames.iter().enumerate() {
                let p = sub.join(frame_name(t));
                write_frame(f, &p)?;
                written.push(p);
            }
            for (t, (flow, occ)) in seq.flows.iter().zip(&seq.occlusions).enumerate() {
                let p = sub.join(flow_name(t));
                write_flo(flow, &p)?;
                written.push(p);
                let p = sub.join(occ_name(t));
                write_mask(occ, &p)?;
                written.push(p);
            }
        }
        let json = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
        written.push(manifest_path);
        Ok(written)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(DATASET_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(&manifest_path, 0, e.to_string()))?;
        if manifest.version != DATASET_VERSION {
            return Err(Error::Incompatible(format!(
                "dataset version {} (expected {DATASET_VERSION})",
                manifest.version
            )));
        }
        let mut sequences = Vec::with_capacity(manifest.entries.len());
        for entry in &manifest.entries {
            let sub = dir.join(&entry.dir);
            let mut frames = Vec::with_capacity(manifest.frames);
            for t in 0..manifest.frames {
                let f = read_frame(&sub.join(frame_name(t)))?;
                if (f.width, f.height) != (manifest.width, manifest.height) {
                    return Err(Error::format(sub.join(frame_name(t)), 0, "frame size differs from manifest"));
                }
                frames.push(f);
            }
            let mut flows = Vec::new();
            let mut occlusions = Vec::new();
            for t in 0..manifest.frames - 1 {
                flows.push(read_flo(&sub.join(flow_name(t)))?);
                occlusions.push(read_mask(&sub.join(occ_name(t)))?);
            }
            sequences.push(SequenceSample {
                frames,
                flows,
                occlusions,
                spec: entry.scene.clone(),
            });
        }
        Ok(Dataset { manifest, sequences })
    }
}

/// Writes a 3-channel image in `[0, 1]` as a 16-bit PNG.
pub fn write_frame(im: &Image, path: &Path) -> Result<()> {
    if im.channels != 3 {
        return Err(Error::dim("write_frame", "channels", 3, im.channels));
    }
    let (h, w) = (im.height, im.width);
    let mut samples = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                samples.push(quantize16(im.at(c, y, x)));
            }
        }
    }
    pngio::write(path, w, h, 3, true, &samples)
}

/// Reads an RGB or grey PNG of either depth into `[0, 1]`.
pub fn read_frame(path: &Path) -> Result<Image> {
    let raw = pngio::read(path)?;
    let scale = if raw.sixteen_bit { 65535.0 } else { 255.0 };
    let (h, w, n) = (raw.height, raw.width, raw.channels);
    let mut im = Image::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let src = match n {
                    1 | 2 => 0,
                    _ => c,
                };
                im.set(c, y, x, raw.samples[(y * w + x) * n + src] as f64 / scale);
            }
        }
    }
    Ok(im)
}

/// Writes a `1 x H x W` map in `[0, 1]` as an 8-bit grey PNG.
pub fn write_mask(im: &Image, path: &Path) -> Result<()> {
    if im.channels != 1 {
        return Err(Error::dim("write_mask", "channels", 1, im.channels));
    }
    let samples: Vec<u16> = im
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u16)
        .collect();
    pngio::write(path, im.width, im.height, 1, false, &samples)
}

/// Reads a grey mask PNG, thresholding at half intensity.
pub fn read_mask(path: &Path) -> Result<Image> {
    let raw = pngio::read(path)?;
    if raw.channels != 1 {
        return Err(Error::format(path, 0, "expected a single-channel mask"));
    }
    let half = if raw.sixteen_bit { 32768 } else { 128 };
    let data = raw
        .samples
        .iter()
        .map(|&s| f64::from(u8::from(s >= half)))
        .collect();
    Image::from_vec(1, raw.height, raw.width, data)
}
