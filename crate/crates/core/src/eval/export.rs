//! Pseudo-label export from boxes only.
//!
//! ```text
//! <out>/manifest.json
//! <out>/<seq>/masks/00000.png
//! <out>/<seq>/boxes.jsonl      boxes of the exported frames
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Predictor;
use crate::data::io::{frame_file, list_sequences, read_sequence, write_boxes, write_mask_png, BoxRecord, BOXES_FILE, MASKS_DIR};
use crate::error::{invalid, Error, Result};
use crate::pipeline::{parallel_map, VideoSample};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportPolicy {
    /// Annotate every `stride`-th frame.
    pub stride: usize,
    /// At most this many frames per video.
    pub max_frames: usize,
}

impl Default for ExportPolicy {
    fn default() -> Self {
        Self { stride: 5, max_frames: 200 }
    }
}

impl ExportPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.stride < 1 || self.max_frames < 1 {
            return Err(invalid!("export stride and max_frames must be at least 1, got {self:?}"));
        }
        Ok(())
    }
}

/// `{0, k, 2k, …} ∩ [0, min(n, max·k))`.
pub fn selected_frames(n: usize, policy: &ExportPolicy) -> Vec<usize> {
    let end = n.min(policy.max_frames.saturating_mul(policy.stride));
    (0..end).step_by(policy.stride.max(1)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportedSequence {
    pub id: String,
    /// Frames with a mask on disk.
    pub frames: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub policy: ExportPolicy,
    pub sequences: Vec<ExportedSequence>,
}

impl ExportManifest {
    pub fn failures(&self) -> impl Iterator<Item = &ExportedSequence> {
        self.sequences.iter().filter(|s| s.error.is_some())
    }
}

fn export_one(sample: &VideoSample, predictor: &dyn Predictor, policy: &ExportPolicy, out: &Path) -> Result<Vec<usize>> {
    sample.validate()?;
    let frames = selected_frames(sample.len(), policy);
    let masks = predictor.predict(sample, &frames)?;
    let dir = out.join(&sample.id);
    let mask_dir = dir.join(MASKS_DIR);
    fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
    for (&i, m) in frames.iter().zip(&masks) {
        write_mask_png(&mask_dir.join(frame_file(i)), m)?;
    }
    let records: Vec<BoxRecord> = frames.iter().map(|&i| BoxRecord { frame: i, bbox: sample.boxes[i] }).collect();
    write_boxes(&dir.join(BOXES_FILE), &records)?;
    Ok(frames)
}

fn finish(out: &Path, policy: ExportPolicy, mut sequences: Vec<ExportedSequence>) -> Result<ExportManifest> {
    sequences.sort_by(|a, b| a.id.cmp(&b.id));
    let manifest = ExportManifest { policy, sequences };
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn outcome(id: String, r: Result<Vec<usize>>) -> ExportedSequence {
    match r {
        Ok(frames) => ExportedSequence { id, frames, error: None },
        Err(e) => ExportedSequence { id, frames: Vec::new(), error: Some(e.to_string()) },
    }
}

/// Exports in-memory samples. Failures are recorded per sequence in the
/// manifest; only a failure to create `out` or write the manifest aborts.
pub fn export_samples(
    samples: &[VideoSample],
    predictor: &dyn Predictor,
    policy: ExportPolicy,
    out: &Path,
    workers: usize,
) -> Result<ExportManifest> {
    policy.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let sequences = parallel_map(samples.len(), workers, |i| {
        outcome(samples[i].id.clone(), export_one(&samples[i], predictor, &policy, out))
    });
    finish(out, policy, sequences)
}

/// Like [`export_samples`] for every sequence directory under `data_root`;
/// sequences that fail to load are reported the same way.
pub fn export_pseudo_labels(
    data_root: &Path,
    predictor: &dyn Predictor,
    policy: ExportPolicy,
    out: &Path,
    workers: usize,
) -> Result<ExportManifest> {
    policy.validate()?;
    let dirs = list_sequences(data_root)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let sequences = parallel_map(dirs.len(), workers, |i| {
        let id = dirs[i].file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        outcome(id, read_sequence(&dirs[i]).and_then(|s| export_one(&s, predictor, &policy, out)))
    });
    finish(out, policy, sequences)
}
