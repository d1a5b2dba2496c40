//! On-disk dataset layout:
//!
//! ```text
//! <dir>/header.txt     key=value lines describing the generator
//! <dir>/labels.txt     one `clip_id,label` line per clip, train first
//! <dir>/clips/<id>.f32 raw little-endian f32 pixels, [T, Nc, H, W]
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::synthetic::{Dataset, SyntheticSpec, VideoClip};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn header(spec: &SyntheticSpec) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "n_classes={}", spec.n_classes);
    let _ = writeln!(s, "frames={}", spec.frames);
    let _ = writeln!(s, "height={}", spec.height);
    let _ = writeln!(s, "width={}", spec.width);
    let _ = writeln!(s, "sprite_size={}", spec.sprite_size);
    let _ = writeln!(s, "split_frame={}", spec.split_frame);
    let _ = writeln!(s, "speed={}", spec.speed);
    let _ = writeln!(s, "noise={}", spec.noise);
    let _ = writeln!(s, "contrast_min={}", spec.contrast_min);
    let _ = writeln!(s, "contrast_max={}", spec.contrast_max);
    let _ = writeln!(s, "clutter={}", spec.clutter);
    let _ = writeln!(s, "train_size={}", spec.train_size);
    let _ = writeln!(s, "val_size={}", spec.val_size);
    let _ = writeln!(s, "seed={}", spec.seed);
    s
}

fn parse_header(text: &str) -> Result<SyntheticSpec> {
    let mut spec = SyntheticSpec::default();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("header line `{line}` is not key=value")))?;
        let bad = || Error::Config(format!("bad value `{v}` for header key `{k}`"));
        let int = || v.parse::<usize>().map_err(|_| bad());
        match k {
            "n_classes" => spec.n_classes = int()?,
            "frames" => spec.frames = int()?,
            "height" => spec.height = int()?,
            "width" => spec.width = int()?,
            "sprite_size" => spec.sprite_size = int()?,
            "split_frame" => spec.split_frame = int()?,
            "speed" => spec.speed = int()?,
            "noise" => spec.noise = v.parse().map_err(|_| bad())?,
            "contrast_min" => spec.contrast_min = v.parse().map_err(|_| bad())?,
            "contrast_max" => spec.contrast_max = v.parse().map_err(|_| bad())?,
            "clutter" => spec.clutter = int()?,
            "train_size" => spec.train_size = int()?,
            "val_size" => spec.val_size = int()?,
            "seed" => spec.seed = v.parse().map_err(|_| bad())?,
            _ => return Err(Error::Config(format!("unknown header key `{k}`"))),
        }
    }
    Ok(spec)
}

pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let clips_dir = dir.join("clips");
    fs::create_dir_all(&clips_dir).map_err(|e| Error::io(&clips_dir, e))?;
    let path = dir.join("header.txt");
    fs::write(&path, header(&ds.spec)).map_err(|e| Error::io(&path, e))?;
    let mut labels = String::new();
    for c in ds.train.iter().chain(&ds.val) {
        let _ = writeln!(labels, "{},{}", c.clip_id, c.label);
        let bytes: Vec<u8> = c.frames.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = clips_dir.join(format!("{}.f32", c.clip_id));
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("labels.txt");
    fs::write(&path, labels).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    };
    let spec = parse_header(&read("header.txt")?)?;
    spec.validate()?;
    let shape = [spec.frames, 1, spec.height, spec.width];
    let numel: usize = shape.iter().product();
    let mut clips = Vec::new();
    for line in read("labels.txt")?.lines().filter(|l| !l.trim().is_empty()) {
        let parsed = line
            .split_once(',')
            .and_then(|(a, b)| Some((a.trim().parse::<u64>().ok()?, b.trim().parse::<usize>().ok()?)));
        let (clip_id, label) = parsed.ok_or_else(|| Error::Config(format!("bad label line `{line}`")))?;
        if label >= spec.n_classes {
            return Err(Error::Domain(format!("clip {clip_id} has label {label}")));
        }
        let path = dir.join("clips").join(format!("{clip_id}.f32"));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != numel * 4 {
            return Err(Error::Shape(format!(
                "{} holds {} bytes, expected {}",
                path.display(),
                bytes.len(),
                numel * 4
            )));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        clips.push(VideoClip { frames: Tensor::new(&shape, data)?, label, clip_id });
    }
    if clips.len() != spec.train_size + spec.val_size {
        return Err(Error::Config(format!(
            "label index lists {} clips, header promises {}",
            clips.len(),
            spec.train_size + spec.val_size
        )));
    }
    let val = clips.split_off(spec.train_size);
    Ok(Dataset { spec, train: clips, val })
}
