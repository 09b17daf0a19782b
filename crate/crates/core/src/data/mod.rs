//! Clip ingestion: manifests, PPM frames, resizing, temporal sampling,
//! splitting and batching.

pub mod ppm;
pub mod resize;
pub mod synth;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::{map_ordered, Execution};
use crate::tensor::Tensor;

pub use ppm::{decode_frame, decode_ppm, encode_ppm, write_frame};
pub use resize::resize_bilinear;
pub use synth::{write_synth_dataset, SynthConfig};

/// One manifest line: a clip (or single image) and its class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub label: usize,
    /// Sorted frame files.
    pub frames: Vec<PathBuf>,
}

/// A decoded model input with its label: `[T, H, W, 3]` for clips,
/// `[H, W, 3]` for still images.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub label: usize,
}

fn is_ppm(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

/// `.ppm` files directly inside `dir`, sorted by name; a single `.ppm` file
/// path is accepted as a one-frame clip.
pub fn discover_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.is_file() {
        return Ok(if is_ppm(dir) {
            vec![dir.to_path_buf()]
        } else {
            Vec::new()
        });
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_ppm(&path) {
            frames.push(path);
        }
    }
    frames.sort();
    Ok(frames)
}

/// Parses `clip_id,label,frame_dir` lines. Blank lines and `#` comments are
/// skipped; relative frame paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ClipRecord>> {
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse = |message: String| Error::Parse { line: i + 1, message };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [clip_id, label, dir] = fields[..] else {
            return Err(parse(format!(
                "expected clip_id,label,frame_dir, got {} fields",
                fields.len()
            )));
        };
        if clip_id.is_empty() || dir.is_empty() {
            return Err(parse("empty clip id or frame directory".into()));
        }
        let label = label
            .parse()
            .map_err(|_| parse(format!("label {label:?} is not a non-negative integer")))?;
        let frames = discover_frames(&base.join(dir))?;
        if frames.is_empty() {
            return Err(Error::Data(format!("clip {clip_id}: no .ppm frames in {dir}")));
        }
        records.push(ClipRecord {
            clip_id: clip_id.to_string(),
            label,
            frames,
        });
    }
    Ok(records)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ClipRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

pub fn check_labels(records: &[ClipRecord], classes: usize) -> Result<()> {
    match records.iter().find(|r| r.label >= classes) {
        Some(r) => Err(Error::Data(format!(
            "clip {} has label {} but the model has {classes} classes",
            r.clip_id, r.label
        ))),
        None => Ok(()),
    }
}

/// `floor(i * n / k)` for `i in 0..k`.
pub fn uniform_sample(n_frames: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| i * n_frames / k).collect()
}

/// Decodes the uniformly sampled frames of `record`, resized to `size`.
pub fn load_clip(record: &ClipRecord, frames: usize, size: (usize, usize)) -> Result<Sample> {
    let picked = uniform_sample(record.frames.len(), frames)
        .into_iter()
        .map(|i| resize_bilinear(&decode_frame(&record.frames[i])?, size.0, size.1))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sample {
        input: Tensor::stack(&picked)?,
        label: record.label,
    })
}

/// First frame of `record` as a still image, resized to `size`.
pub fn load_image(record: &ClipRecord, size: (usize, usize)) -> Result<Sample> {
    Ok(Sample {
        input: resize_bilinear(&decode_frame(&record.frames[0])?, size.0, size.1)?,
        label: record.label,
    })
}

/// Loads every record with `load`, possibly in parallel; results keep
/// manifest order and the first failure (in that order) is returned.
pub fn load_all<F>(records: &[ClipRecord], exec: Execution, load: F) -> Result<Vec<Sample>>
where
    F: Fn(&ClipRecord) -> Result<Sample> + Sync + Send,
{
    map_ordered(records, exec, |_, r| load(r)).into_iter().collect()
}

/// Seeded shuffle, then the first `floor(train_fraction * n)` items train.
pub fn split_dataset<T: Clone>(items: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    check_split(items.len(), train_fraction)?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (train_fraction * items.len() as f64).floor() as usize;
    let pick = |ix: &[usize]| ix.iter().map(|&i| items[i].clone()).collect();
    Ok((pick(&order[..cut]), pick(&order[cut..])))
}

/// As [`split_dataset`], but each label is split separately so both parts
/// keep the class proportions.
pub fn split_stratified<T: Clone>(
    items: &[T],
    label: impl Fn(&T) -> usize,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    check_split(items.len(), train_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = items.iter().map(&label).max().map_or(0, |m| m + 1);
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for class in 0..classes {
        let mut members: Vec<usize> = (0..items.len()).filter(|&i| label(&items[i]) == class).collect();
        members.shuffle(&mut rng);
        let cut = (train_fraction * members.len() as f64).floor() as usize;
        train.extend_from_slice(&members[..cut]);
        eval.extend_from_slice(&members[cut..]);
    }
    train.shuffle(&mut rng);
    eval.shuffle(&mut rng);
    let pick = |ix: Vec<usize>| ix.into_iter().map(|i| items[i].clone()).collect();
    Ok((pick(train), pick(eval)))
}

fn check_split(n: usize, fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {fraction}"
        )));
    }
    if n < 2 {
        return Err(Error::Data(format!("cannot split {n} records")));
    }
    Ok(())
}

/// Stacked inputs `[B, ...]` with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn samples(&self) -> impl Iterator<Item = Sample> + '_ {
        self.labels.iter().enumerate().map(|(i, &label)| Sample {
            input: self.inputs.index_axis0(i),
            label,
        })
    }
}

/// Groups samples in order; the last batch may be short.
pub fn make_batches(samples: &[Sample], size: usize) -> Result<Vec<Batch>> {
    if size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if let Some(first) = samples.first() {
        if let Some((i, s)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| s.input.shape() != first.input.shape())
        {
            return Err(Error::Data(format!(
                "sample {i} has shape {:?}, expected {:?}",
                s.input.shape(),
                first.input.shape()
            )));
        }
    }
    samples
        .chunks(size)
        .map(|chunk| {
            let inputs: Vec<Tensor> = chunk.iter().map(|s| s.input.clone()).collect();
            Ok(Batch {
                inputs: Tensor::stack(&inputs)?,
                labels: chunk.iter().map(|s| s.label).collect(),
            })
        })
        .collect()
}

pub fn unbatch(batches: &[Batch]) -> Vec<Sample> {
    batches.iter().flat_map(Batch::samples).collect()
}
