use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::synthetic::VideoClip;
use crate::error::{Error, Result};

/// A stacked batch: `data` is `[B·T, Nc, H, W]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub data: Vec<f32>,
    pub labels: Vec<usize>,
    pub clip_ids: Vec<u64>,
}

impl Batch {
    pub fn from_clips<'a>(clips: impl IntoIterator<Item = &'a VideoClip>) -> Result<Self> {
        let mut batch = Batch { data: Vec::new(), labels: Vec::new(), clip_ids: Vec::new() };
        let mut shape: Option<Vec<usize>> = None;
        for c in clips {
            match &shape {
                Some(s) if s.as_slice() != c.frames.shape() => {
                    return Err(Error::Shape(format!(
                        "clip {} has shape {:?}, expected {s:?}",
                        c.clip_id,
                        c.frames.shape()
                    )))
                }
                Some(_) => {}
                None => shape = Some(c.frames.shape().to_vec()),
            }
            batch.data.extend_from_slice(c.frames.data());
            batch.labels.push(c.label);
            batch.clip_ids.push(c.clip_id);
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Index batches over `n` items, shuffled by a seed. The last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Iterates `clips` in batches, optionally in a seeded random order.
pub fn batches<'a>(
    clips: &'a [VideoClip],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    let idx = batch_indices(clips.len(), batch_size, shuffle_seed)?;
    Ok(idx.into_iter().map(move |b| Batch::from_clips(b.iter().map(|&i| &clips[i]))))
}
