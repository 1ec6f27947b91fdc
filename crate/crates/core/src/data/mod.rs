//! Synthetic video segmentation benchmark: generation, splits, windowing and
//! on-disk storage.
//!
//! A dataset stores whole sequences. Models of any temporal order draw
//! sliding windows from the same sequences, so one generated dataset serves
//! every architecture.

pub mod pnm;
pub mod resize;
pub mod scene;

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use resize::{resize_bilinear, resize_nearest};
pub use scene::{generate_sequence, SceneConfig, SceneObject, Sequence, Shape, TextureRefresh};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::data(format!("unknown split {name:?}; expected train, val or test")))
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// `K` consecutive frames, oldest first, with the mask of the last one.
#[derive(Debug, Clone)]
pub struct VideoSample {
    pub frames: Vec<Tensor>,
    pub mask: LabelMask,
    pub sequence: String,
    /// Index of the labelled (last) frame within its sequence.
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceInfo {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub decoys: Vec<SceneObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: SceneConfig,
    pub seed: u64,
    pub splits: SplitIds,
    pub sequences: Vec<SequenceInfo>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitIds {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<String> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    /// Parallel to `manifest.sequences`.
    pub sequences: Vec<Sequence>,
}

/// Stream index reserved for the split permutation, far from sequence indices.
const SPLIT_STREAM: u64 = u64::MAX;

/// Split sizes for `n` sequences: 15% validation and 15% test (rounded
/// down, at least one each), the rest training.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let held = (15 * n / 100).max(1);
    (n - 2 * held, held, held)
}

pub fn sequence_id(index: usize) -> String {
    format!("seq_{index:05}")
}

/// Generates `n_sequences` sequences and assigns them to splits.
/// Sequence `i` is rendered from a sub-seed derived from `(seed, i)`.
pub fn make_dataset(config: &SceneConfig, seed: u64, n_sequences: usize) -> Result<Dataset> {
    config.validate()?;
    if n_sequences < 3 {
        return Err(Error::param(format!("need at least 3 sequences for three splits, got {n_sequences}")));
    }
    let seeds: Vec<u64> = (0..n_sequences).map(|i| Rng::derive(seed, i as u64).next_u64()).collect();
    let sequences = seeds
        .par_iter()
        .map(|&s| generate_sequence(config, s))
        .collect::<Result<Vec<_>>>()?;

    let (n_train, n_val, _) = split_sizes(n_sequences);
    let mut split_of = vec![Split::Test; n_sequences];
    for (rank, idx) in Rng::derive(seed, SPLIT_STREAM).permutation(n_sequences).into_iter().enumerate() {
        split_of[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let mut splits = SplitIds::default();
    let infos = (0..n_sequences)
        .map(|i| {
            splits.get_mut(split_of[i]).push(sequence_id(i));
            SequenceInfo {
                id: sequence_id(i),
                split: split_of[i],
                seed: seeds[i],
                objects: sequences[i].objects.clone(),
                decoys: sequences[i].decoys.clone(),
            }
        })
        .collect();
    Ok(Dataset {
        manifest: Manifest {
            config: config.clone(),
            seed,
            splits,
            sequences: infos,
        },
        sequences,
    })
}

impl Dataset {
    pub fn config(&self) -> &SceneConfig {
        &self.manifest.config
    }

    /// Every window of `order` consecutive frames from the split's
    /// sequences, in sequence then frame order.
    pub fn windows(&self, split: Split, order: usize) -> Result<Vec<VideoSample>> {
        let len = self.config().sequence_length;
        if order == 0 || order > len {
            return Err(Error::param(format!("window of {order} frames does not fit sequences of length {len}")));
        }
        let mut out = Vec::new();
        for (info, seq) in self.manifest.sequences.iter().zip(&self.sequences) {
            if info.split != split {
                continue;
            }
            for last in order - 1..len {
                out.push(VideoSample {
                    frames: seq.frames[last + 1 - order..=last].to_vec(),
                    mask: seq.masks[last].clone(),
                    sequence: info.id.clone(),
                    frame: last,
                });
            }
        }
        Ok(out)
    }

    /// Writes `<root>/<split>/<id>/frame_%05d.ppm`, `mask_%05d.pgm` and
    /// `<root>/manifest.json`.
    pub fn save(&self, root: &Path) -> Result<()> {
        for (info, seq) in self.manifest.sequences.iter().zip(&self.sequences) {
            let dir = root.join(info.split.name()).join(&info.id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (t, (frame, mask)) in seq.frames.iter().zip(&seq.masks).enumerate() {
                pnm::write_image(&dir.join(format!("frame_{t:05}.ppm")), frame)?;
                pnm::write_mask(&dir.join(format!("mask_{t:05}.pgm")), mask)?;
            }
        }
        let path = root.join(MANIFEST);
        let mut json = serde_json::to_string_pretty(&self.manifest)?;
        json.push('\n');
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        manifest.config.validate()?;
        for split in [Split::Train, Split::Val, Split::Test] {
            let listed = manifest.splits.get(split).iter();
            let assigned = manifest.sequences.iter().filter(|i| i.split == split).map(|i| &i.id);
            if !listed.eq(assigned) {
                return Err(Error::data(format!(
                    "{}: the {} split list disagrees with the sequences assigned to it",
                    path.display(),
                    split.name()
                )));
            }
        }
        let (h, w, len) = (manifest.config.height, manifest.config.width, manifest.config.sequence_length);
        let sequences = manifest
            .sequences
            .par_iter()
            .map(|info| {
                let dir = root.join(info.split.name()).join(&info.id);
                let mut frames = Vec::with_capacity(len);
                let mut masks = Vec::with_capacity(len);
                for t in 0..len {
                    let frame = pnm::read_image(&dir.join(format!("frame_{t:05}.ppm")))?;
                    let mask = pnm::read_mask(&dir.join(format!("mask_{t:05}.pgm")))?;
                    if (frame.shape().h, frame.shape().w, mask.h, mask.w) != (h, w, h, w) {
                        return Err(Error::data(format!("{}: frame {t} is not {h}x{w}", dir.display())));
                    }
                    mask.check_labels(manifest.config.num_classes, None)?;
                    frames.push(frame);
                    masks.push(mask);
                }
                Ok(Sequence {
                    frames,
                    masks,
                    objects: info.objects.clone(),
                    decoys: info.decoys.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, sequences })
    }
}

/// Stacks samples into per-slot batches: `frames[k]` is `n × 3 × h × w`
/// holding slot `k` of every sample.
pub fn collate(samples: &[&VideoSample]) -> Result<(Vec<Tensor>, LabelMask)> {
    let first = samples.first().ok_or_else(|| Error::data("cannot collate an empty batch"))?;
    let order = first.frames.len();
    if samples.iter().any(|s| s.frames.len() != order) {
        return Err(Error::shape("samples in a batch have different frame counts"));
    }
    let frames = (0..order)
        .map(|k| Tensor::stack_batch(&samples.iter().map(|s| &s.frames[k]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let mask = LabelMask::stack(&samples.iter().map(|s| &s.mask).collect::<Vec<_>>())?;
    Ok((frames, mask))
}
