//! Scene datasets on disk.
//!
//! A dataset directory holds `manifest.jsonl` (one record per scene) and a
//! `scenes/` directory with, per scene, `NNNNN.png` (the image),
//! `NNNNN_masks.png` (red channel = 1 + index of the visible object, green
//! channel = bitfield of amodal membership, so at most 8 objects), and for
//! resampled scenes `NNNNN.imgf` with the lossless float image.
//!
//! Decoder datasets are one `class_NN.png` per class: the `side x side`
//! images stacked vertically.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GroundTruth, ObjectSpec, Scene};
use crate::detection::ClassLabel;
use crate::error::{Error, Result};
use crate::geom::BoundingBox;
use crate::image::{read_rgb8_png, write_rgb8_png, Image, Rgb};
use crate::mask::Mask;

const MAX_OBJECTS: usize = 8;

#[derive(Debug, Serialize, Deserialize)]
struct SceneRecord {
    id: usize,
    canvas: [usize; 2],
    color: Rgb,
    objects: Vec<ObjectSpec>,
    boxes: Vec<BoundingBox>,
    image: String,
    masks: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raw: Option<String>,
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png(format!("{}: {e}", path.display()))
}

fn encode_masks(gt: &GroundTruth) -> Result<Vec<u8>> {
    let (h, w) = gt.canvas;
    if gt.objects.len() > MAX_OBJECTS {
        return Err(Error::Config(format!(
            "mask encoding holds at most {MAX_OBJECTS} objects, scene has {}",
            gt.objects.len()
        )));
    }
    let mut bytes = vec![0u8; h * w * 3];
    for (i, (vis, amodal)) in gt.visible_masks.iter().zip(&gt.amodal_masks).enumerate() {
        for (x, y) in vis.iter() {
            bytes[(y * w + x) * 3] = i as u8 + 1;
        }
        for (x, y) in amodal.iter() {
            bytes[(y * w + x) * 3 + 1] |= 1 << i;
        }
    }
    Ok(bytes)
}

fn decode_masks(bytes: &[u8], n: usize, (h, w): (usize, usize)) -> (Vec<Mask>, Vec<Mask>) {
    let at = |x: usize, y: usize, c: usize| bytes[(y * w + x) * 3 + c];
    let visible = (0..n)
        .map(|i| Mask::from_fn(h, w, |x, y| at(x, y, 0) as usize == i + 1))
        .collect();
    let amodal = (0..n)
        .map(|i| Mask::from_fn(h, w, |x, y| at(x, y, 1) & (1 << i) != 0))
        .collect();
    (visible, amodal)
}

/// Writes `scenes` under `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, scenes: &[Scene]) -> Result<()> {
    let sub = dir.join("scenes");
    fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let manifest = dir.join("manifest.jsonl");
    let file = File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut out = BufWriter::new(file);
    for s in scenes {
        let stem = format!("{:05}", s.id);
        let (h, w) = s.gt.canvas;
        let image = format!("scenes/{stem}.png");
        let masks = format!("scenes/{stem}_masks.png");
        s.image.write_png(&dir.join(&image))?;
        write_rgb8_png(&dir.join(&masks), w, h, &encode_masks(&s.gt)?)?;
        let raw = if s.gt.resampled {
            let raw = format!("scenes/{stem}.imgf");
            s.image.write_imgf(&dir.join(&raw))?;
            Some(raw)
        } else {
            None
        };
        let rec = SceneRecord {
            id: s.id,
            canvas: [h, w],
            color: s.gt.color,
            objects: s.gt.objects.clone(),
            boxes: s.gt.boxes.clone(),
            image,
            masks,
            raw,
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Json {
            context: manifest.display().to_string(),
            source: e,
        })?;
        writeln!(out, "{line}").map_err(|e| Error::io(&manifest, e))?;
    }
    out.flush().map_err(|e| Error::io(&manifest, e))
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let manifest = dir.join("manifest.jsonl");
    let file = File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut scenes = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line).map_err(|e| Error::Json {
            context: format!("{} line {}", manifest.display(), n + 1),
            source: e,
        })?;
        let canvas = (rec.canvas[0], rec.canvas[1]);
        let image = match &rec.raw {
            Some(raw) => Image::read_imgf(&dir.join(raw))?,
            None => Image::read_png(&dir.join(&rec.image))?,
        };
        let mask_path = dir.join(&rec.masks);
        let (mw, mh, bytes) = read_rgb8_png(&mask_path)?;
        if (mh, mw) != canvas || (image.height(), image.width()) != canvas {
            return Err(png_err(&mask_path, format!("raster size does not match canvas {canvas:?}")));
        }
        let (visible_masks, amodal_masks) = decode_masks(&bytes, rec.objects.len(), canvas);
        scenes.push(Scene {
            id: rec.id,
            image,
            gt: GroundTruth {
                canvas,
                objects: rec.objects,
                color: rec.color,
                amodal_masks,
                visible_masks,
                boxes: rec.boxes,
                resampled: rec.raw.is_some(),
            },
        });
    }
    Ok(scenes)
}

fn decoder_file(dir: &Path, cls: ClassLabel) -> std::path::PathBuf {
    dir.join(format!("class_{cls:02}.png"))
}

/// Writes each class's images as one vertical strip.
pub fn write_decoder_dataset(dir: &Path, data: &BTreeMap<ClassLabel, Vec<Image>>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (&cls, imgs) in data {
        let Some(first) = imgs.first() else { continue };
        let side = first.width();
        let mut bytes = Vec::with_capacity(imgs.len() * side * side * 3);
        for img in imgs {
            if img.width() != side || img.height() != side {
                return Err(Error::ShapeMismatch(format!("class {cls}: decoder images must all be {side}x{side}")));
            }
            bytes.extend(img.as_slice().iter().map(|v| (v * 255.0).round() as u8));
        }
        write_rgb8_png(&decoder_file(dir, cls), side, side * imgs.len(), &bytes)?;
    }
    Ok(())
}

/// Reads every `class_NN.png` strip under `dir`.
pub fn read_decoder_dataset(dir: &Path) -> Result<BTreeMap<ClassLabel, Vec<Image>>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(cls) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("class_")?.strip_suffix(".png"))
            .and_then(|n| n.parse::<ClassLabel>().ok())
        else {
            continue;
        };
        let (side, height, bytes) = read_rgb8_png(&path)?;
        if height % side != 0 {
            return Err(png_err(&path, format!("strip height {height} is not a multiple of {side}")));
        }
        let imgs = bytes
            .chunks_exact(side * side * 3)
            .map(|c| Image::from_raw(side, side, c.iter().map(|&b| b as f64 / 255.0).collect()))
            .collect::<Result<Vec<_>>>()?;
        out.insert(cls, imgs);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::{gen_decoder_dataset, gen_pairs_dataset, perturb_enlarge, SceneConfig};
    use super::*;

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = gen_pairs_dataset(1, 2, &SceneConfig::default()).unwrap();
        write_dataset(dir.path(), &scenes).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), scenes.len());
        for (a, b) in back.iter().zip(&scenes) {
            assert!(a.image == b.image, "scene {} image", b.id);
            assert!(a.gt == b.gt, "scene {} ground truth", b.id);
        }
    }

    #[test]
    fn resampled_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = gen_pairs_dataset(1, 2, &SceneConfig::default()).unwrap();
        let big = perturb_enlarge(&scenes, 180).unwrap();
        write_dataset(dir.path(), &big).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        for (a, b) in back.iter().zip(&big) {
            assert!(a.image == b.image.clone().quantize_f32());
            assert!(a.gt.visible_masks == b.gt.visible_masks);
        }
    }

    #[test]
    fn decoder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = gen_pairs_dataset(4, 2, &SceneConfig::default()).unwrap();
        let data = gen_decoder_dataset(&scenes, 50).unwrap();
        write_decoder_dataset(dir.path(), &data).unwrap();
        assert!(read_decoder_dataset(dir.path()).unwrap() == data);
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Io { .. })));
    }
}
