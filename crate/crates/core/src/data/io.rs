//! On-disk sequence layout:
//!
//! ```text
//! <seq>/frames/00000.png   8-bit RGB
//! <seq>/masks/00000.png    8-bit gray, 0 background / 255 foreground
//! <seq>/boxes.jsonl        {"frame": 0, "box": [x, y, w, h]} per line
//! ```
//!
//! `masks/` is optional.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::pipeline::VideoSample;
use crate::tensor::Tensor;

pub const FRAMES_DIR: &str = "frames";
pub const MASKS_DIR: &str = "masks";
pub const BOXES_FILE: &str = "boxes.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

pub fn frame_file(i: usize) -> String {
    format!("{i:05}.png")
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb_png(path: &Path, frame: &Tensor) -> Result<()> {
    let (h, w, c) = frame.hwc()?;
    if c != 3 {
        return Err(Error::Data(format!("{}: expected 3 channels, got {c}", path.display())));
    }
    let img = RgbImage::from_raw(w as u32, h as u32, frame.data().iter().map(|&v| to_byte(v)).collect())
        .expect("buffer length matches");
    img.save_with_format(path, ImageFormat::Png).map_err(|e| image_err(path, e))
}

/// Writes a `{0, 1}` (or probability) mask as 0/255 after thresholding at
/// 0.5.
pub fn write_mask_png(path: &Path, mask: &Tensor) -> Result<()> {
    let (h, w, c) = mask.hwc()?;
    if c != 1 {
        return Err(Error::Data(format!("{}: expected 1 channel, got {c}", path.display())));
    }
    let bytes = mask.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer length matches");
    img.save_with_format(path, ImageFormat::Png).map_err(|e| image_err(path, e))
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    }
}

pub fn read_rgb_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Tensor::new(&[h as usize, w as usize, 3], img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect())
}

pub fn read_mask_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Tensor::new(
        &[h as usize, w as usize, 1],
        img.into_raw().into_iter().map(|b| if b >= 128 { 1.0 } else { 0.0 }).collect(),
    )
}

pub fn write_boxes(path: &Path, records: &[BoxRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_boxes(path: &Path) -> Result<Vec<BoxRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BoxRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_sequence(dir: &Path, sample: &VideoSample) -> Result<()> {
    sample.validate()?;
    create_dir(&dir.join(FRAMES_DIR))?;
    for (i, f) in sample.frames.iter().enumerate() {
        write_rgb_png(&dir.join(FRAMES_DIR).join(frame_file(i)), f)?;
    }
    if let Some(masks) = &sample.gt_masks {
        create_dir(&dir.join(MASKS_DIR))?;
        for (i, m) in masks.iter().enumerate() {
            write_mask_png(&dir.join(MASKS_DIR).join(frame_file(i)), m)?;
        }
    }
    let records: Vec<BoxRecord> = sample.boxes.iter().enumerate().map(|(frame, &bbox)| BoxRecord { frame, bbox }).collect();
    write_boxes(&dir.join(BOXES_FILE), &records)
}

/// Reads one sequence directory; the id is the directory name.
pub fn read_sequence(dir: &Path) -> Result<VideoSample> {
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let frames_dir = dir.join(FRAMES_DIR);
    let mut names: Vec<PathBuf> = fs::read_dir(&frames_dir)
        .map_err(|e| Error::io(&frames_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    names.sort();
    for (i, p) in names.iter().enumerate() {
        if p.file_name().map(|f| f.to_string_lossy().into_owned()) != Some(frame_file(i)) {
            return Err(Error::Data(format!("{}: frame files must be numbered 00000.png upward", frames_dir.display())));
        }
    }
    let frames: Vec<Tensor> = names.iter().map(|p| read_rgb_png(p)).collect::<Result<_>>()?;

    let records = read_boxes(&dir.join(BOXES_FILE))?;
    let mut boxes: Vec<Option<BoundingBox>> = vec![None; frames.len()];
    for r in records {
        let slot = boxes
            .get_mut(r.frame)
            .ok_or_else(|| Error::Data(format!("sequence `{id}`: box for missing frame {}", r.frame)))?;
        if slot.replace(r.bbox).is_some() {
            return Err(Error::Data(format!("sequence `{id}`: duplicate box for frame {}", r.frame)));
        }
    }
    let boxes = boxes
        .into_iter()
        .enumerate()
        .map(|(i, b)| b.ok_or_else(|| Error::Data(format!("sequence `{id}`: no box for frame {i}"))))
        .collect::<Result<_>>()?;

    let masks_dir = dir.join(MASKS_DIR);
    let gt_masks = if masks_dir.is_dir() {
        Some((0..frames.len()).map(|i| read_mask_png(&masks_dir.join(frame_file(i)))).collect::<Result<_>>()?)
    } else {
        None
    };
    let sample = VideoSample { id, frames, boxes, gt_masks };
    sample.validate()?;
    Ok(sample)
}

/// Sequence directories under `root` (those holding a `boxes.jsonl`), in
/// name order.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(BOXES_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("{}: no sequence directories found", root.display())));
    }
    Ok(dirs)
}

pub fn read_dataset(root: &Path) -> Result<Vec<VideoSample>> {
    list_sequences(root)?.iter().map(|d| read_sequence(d)).collect()
}

pub fn write_dataset(root: &Path, samples: &[VideoSample]) -> Result<()> {
    create_dir(root)?;
    for s in samples {
        write_sequence(&root.join(&s.id), s)?;
    }
    Ok(())
}

/// Appends one JSON line to `path`.
pub fn append_json_line<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    f.write_all(&line).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_dataset, DatasetSpec};

    #[test]
    fn dataset_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec { num_sequences: 2, num_frames: 3, height: 32, width: 48, ..DatasetSpec::default() };
        let data = generate_dataset(&spec).unwrap();
        write_dataset(dir.path(), &data).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), data);
        let text = fs::read_to_string(dir.path().join("seq_00000").join(BOXES_FILE)).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("{\"frame\":0,\"box\":["), "{first}");
    }

    #[test]
    fn missing_boxes_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec { num_sequences: 1, num_frames: 3, height: 32, width: 32, ..DatasetSpec::default() };
        let data = generate_dataset(&spec).unwrap();
        write_dataset(dir.path(), &data).unwrap();
        let seq = dir.path().join("seq_00000");
        let text = fs::read_to_string(seq.join(BOXES_FILE)).unwrap();
        let kept: Vec<&str> = text.lines().take(2).collect();
        fs::write(seq.join(BOXES_FILE), kept.join("\n")).unwrap();
        let err = read_sequence(&seq).unwrap_err().to_string();
        assert!(err.contains("no box for frame 2"), "{err}");
    }

    #[test]
    fn masks_are_optional() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec { num_sequences: 1, num_frames: 2, height: 32, width: 32, ..DatasetSpec::default() };
        let mut data = generate_dataset(&spec).unwrap();
        data[0].gt_masks = None;
        write_dataset(dir.path(), &data).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), data);
    }
}
