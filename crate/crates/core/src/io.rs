//! PFM/PGM images and the on-disk frame-stack layout.
//!
//! A stack directory holds `frame_%04d.pfm` plus, for simulated stacks,
//! `scene.pfm`, `gain.pfm`, `offset.pfm` and `transforms.json` describing
//! the ground truth. `meta.json` is free-form apart from `downsample`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::resample::downsample_mask;
use crate::geometry::{valid_mask, TransformKind, TransformParams};
use crate::image::Image;
use crate::sensor::{FrameStack, GroundTruth, NonUniformity};

/// Parses a grayscale PFM. Either byte order is accepted; rows are stored
/// bottom-up.
pub fn decode_pfm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        let t = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        Ok(t)
    };
    let magic = token()?;
    match magic.as_str() {
        "Pf" => {}
        "PF" => return Err("colour PFM is not supported, expected Pf".into()),
        other => return Err(format!("bad magic {other:?}, expected Pf")),
    }
    let width: usize = token()?.parse().map_err(|_| "bad width".to_string())?;
    let height: usize = token()?.parse().map_err(|_| "bad height".to_string())?;
    let scale: f32 = token()?.parse().map_err(|_| "bad scale".to_string())?;
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(format!("bad scale {scale}"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * 4;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format!("expected {need} bytes of raster, found {}", bytes.len().saturating_sub(pos)))?;
    let little = scale < 0.0;
    let mut data = vec![0.0; width * height];
    for (i, chunk) in raster.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (x, file_row) = (i % width, i / width);
        data[(height - 1 - file_row) * width + x] = v as f64;
    }
    Image::from_vec(width, height, data).map_err(|e| e.to_string())
}

/// Little-endian grayscale PFM; values are narrowed to `f32`.
pub fn encode_pfm(image: &Image) -> Vec<u8> {
    let (w, h) = image.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for y in (0..h).rev() {
        for &v in image.row(y) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::format(path, e.to_string()))?;
    decode_pfm(&bytes).map_err(|m| Error::format(path, m))
}

pub fn write_pfm(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    fs::write(path, encode_pfm(image))?;
    Ok(())
}

/// 16-bit binary PGM, min-max normalised to the full range.
pub fn encode_pgm16(image: &Image) -> Vec<u8> {
    let (w, h) = image.dims();
    let (lo, hi) = (image.min(), image.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in image.data() {
        let q = ((v - lo) / span * 65535.0).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn write_pgm16(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    fs::write(path, encode_pgm16(image))?;
    Ok(())
}

/// One entry of `transforms.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub kind: TransformKind,
    pub params: Vec<f64>,
    pub converged: bool,
}

pub fn write_transforms(
    path: impl AsRef<Path>,
    transforms: &[TransformParams],
    converged: &[bool],
) -> Result<()> {
    let records: Vec<TransformRecord> = transforms
        .iter()
        .enumerate()
        .map(|(i, t)| TransformRecord {
            kind: t.kind,
            params: t.params.clone(),
            converged: converged.get(i).copied().unwrap_or(true),
        })
        .collect();
    write_json(path, &records)
}

pub fn read_transforms(path: impl AsRef<Path>) -> Result<Vec<TransformRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let records: Vec<TransformRecord> =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    for r in &records {
        TransformParams::new(r.kind, r.params.clone()).map_err(|e| Error::format(path, e.to_string()))?;
    }
    Ok(records)
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn frame_name(k: usize) -> String {
    format!("frame_{k:04}.pfm")
}

/// Writes a stack directory. `meta` is stored as `meta.json` after the
/// stack's `downsample` factor and frame count are merged in.
pub fn write_stack(dir: impl AsRef<Path>, stack: &FrameStack, meta: serde_json::Value) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (k, f) in stack.frames.iter().enumerate() {
        write_pfm(dir.join(frame_name(k)), f)?;
    }
    if let Some(truth) = &stack.truth {
        write_pfm(dir.join("scene.pfm"), &truth.scene)?;
        write_pfm(dir.join("gain.pfm"), &truth.nonuniformity.gain)?;
        write_pfm(dir.join("offset.pfm"), &truth.nonuniformity.offset)?;
        write_transforms(dir.join("transforms.json"), &truth.transforms, &[])?;
    }
    let mut meta = match meta {
        serde_json::Value::Object(m) => m,
        serde_json::Value::Null => serde_json::Map::new(),
        other => {
            let mut m = serde_json::Map::new();
            m.insert("config".into(), other);
            m
        }
    };
    meta.insert("downsample".into(), stack.downsample.into());
    meta.insert("frames".into(), stack.frames.len().into());
    write_json(dir.join("meta.json"), &serde_json::Value::Object(meta))
}

/// Loads a stack directory. Ground truth is attached when `scene.pfm`,
/// `gain.pfm`, `offset.pfm` and `transforms.json` are all present; masks are
/// then recomputed from the true transforms.
pub fn read_stack(dir: impl AsRef<Path>) -> Result<FrameStack> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::format(dir, "not a stack directory"));
    }
    let mut frames = Vec::new();
    loop {
        let p = dir.join(frame_name(frames.len()));
        if !p.exists() {
            break;
        }
        frames.push(read_pfm(&p)?);
    }
    if frames.is_empty() {
        return Err(Error::format(dir, "no frame_0000.pfm found"));
    }
    let mut stack = FrameStack::from_frames(frames).map_err(|e| Error::format(dir, e.to_string()))?;

    let meta_path = dir.join("meta.json");
    if meta_path.exists() {
        let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(&meta_path)?)
            .map_err(|e| Error::format(&meta_path, e.to_string()))?;
        if let Some(q) = meta.get("downsample").and_then(|v| v.as_u64()) {
            if q == 0 {
                return Err(Error::format(&meta_path, "downsample must be >= 1"));
            }
            stack.downsample = q as usize;
        }
    }

    let names = ["scene.pfm", "gain.pfm", "offset.pfm", "transforms.json"];
    if names.iter().all(|n| dir.join(n).exists()) {
        let scene = read_pfm(dir.join("scene.pfm"))?;
        let gain = read_pfm(dir.join("gain.pfm"))?;
        let offset = read_pfm(dir.join("offset.pfm"))?;
        let transforms: Vec<TransformParams> = read_transforms(dir.join("transforms.json"))?
            .into_iter()
            .map(|r| TransformParams { kind: r.kind, params: r.params })
            .collect();
        let q = stack.downsample;
        let (sw, sh) = stack.dims();
        if gain.dims() != (sw, sh) || offset.dims() != (sw, sh) {
            return Err(Error::format(dir, "gain/offset shape differs from frames"));
        }
        if scene.dims() != (sw * q, sh * q) {
            return Err(Error::format(dir, "scene shape inconsistent with frames and downsample"));
        }
        if transforms.len() != stack.len() {
            return Err(Error::format(dir, "transforms.json length differs from frame count"));
        }
        stack.masks = transforms
            .iter()
            .map(|t| downsample_mask(&valid_mask(sw * q, sh * q, t), sw * q, q))
            .collect();
        stack.truth = Some(GroundTruth {
            scene,
            nonuniformity: NonUniformity { gain, offset },
            transforms,
        });
    }
    Ok(stack)
}
