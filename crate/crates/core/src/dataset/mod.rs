//! Labeled keyword audio: manifests, splits, and batches.

mod gsc;
mod synth;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioClip, FeatureMap, FeatureStats, Mfcc};
use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

pub use gsc::{hash_split, read_labels, scan_gsc, scan_with_labels, LABELS_FILE, TEST_LIST, VAL_LIST};
pub use synth::{synth_generate, ClassTemplate, SynthSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub path: PathBuf,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<Entry>,
    pub labels: Vec<String>,
    pub split: Split,
}

impl Manifest {
    pub fn new(mut entries: Vec<Entry>, labels: Vec<String>, split: Split) -> Result<Self> {
        if let Some(e) = entries.iter().find(|e| e.label >= labels.len()) {
            return Err(Error::Dataset(format!("{} has label index {} but only {} labels exist", e.path.display(), e.label, labels.len())));
        }
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(Manifest { entries, labels, split })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    /// Keep the first `n` entries of each class (manifest order).
    pub fn take_per_class(&self, n: usize) -> Manifest {
        let mut counts = vec![0usize; self.labels.len()];
        let entries = self
            .entries
            .iter()
            .filter(|e| {
                counts[e.label] += 1;
                counts[e.label] <= n
            })
            .cloned()
            .collect();
        Manifest { entries, labels: self.labels.clone(), split: self.split }
    }

    pub fn load_clips(&self) -> Result<LabeledClips> {
        let clips = self.entries.iter().map(|e| audio::load_wav(&e.path)).collect::<Result<Vec<_>>>()?;
        Ok(LabeledClips {
            clips,
            labels: self.entries.iter().map(|e| e.label).collect(),
            ids: self.entries.iter().map(|e| utterance_id(&e.path)).collect(),
            label_names: self.labels.clone(),
        })
    }
}

/// `<parent dir>/<file name>`, the usual GSC utterance key.
pub fn utterance_id(path: &Path) -> String {
    let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    match path.parent().and_then(|p| p.file_name()) {
        Some(parent) => format!("{}/{file}", parent.to_string_lossy()),
        None => file,
    }
}

/// Audio for a whole split held in memory, in manifest order.
#[derive(Debug, Clone)]
pub struct LabeledClips {
    pub clips: Vec<AudioClip>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
    pub label_names: Vec<String>,
}

impl LabeledClips {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `[N, 1, coefficients, frames]`
    pub features: Tensor<f32>,
    /// Absent for unlabeled deployment streams.
    pub labels: Option<Vec<usize>>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Extracted features for a whole split, kept in memory.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub maps: Vec<FeatureMap>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
    pub label_names: Vec<String>,
}

impl FeatureSet {
    /// MFCCs of every clip, computed in parallel.
    pub fn extract(clips: &LabeledClips, frontend: &Mfcc) -> Result<Self> {
        let maps = clips.clips.par_iter().map(|c| frontend.compute(c)).collect::<Result<Vec<_>>>()?;
        Ok(FeatureSet { maps, labels: clips.labels.clone(), ids: clips.ids.clone(), label_names: clips.label_names.clone() })
    }

    pub fn normalized(&self, stats: &FeatureStats) -> Result<Self> {
        Ok(FeatureSet { maps: self.maps.iter().map(|m| m.normalize(stats)).collect::<Result<_>>()?, ..self.clone() })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        if let Some(&i) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Dataset(format!("sample index {i} out of range for {} samples", self.len())));
        }
        Ok(Batch {
            features: stack_features(&idx.iter().map(|&i| &self.maps[i]).collect::<Vec<_>>())?,
            labels: Some(idx.iter().map(|&i| self.labels[i]).collect()),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
        })
    }
}

/// Stack feature maps into a `[N, 1, rows, cols]` tensor.
pub fn stack_features(maps: &[&FeatureMap]) -> Result<Tensor<f32>> {
    let first = maps.first().ok_or_else(|| Error::Dataset("cannot stack an empty batch".into()))?;
    let shape = first.coeffs.shape().to_vec();
    let mut data = Vec::with_capacity(maps.len() * first.coeffs.numel());
    for m in maps {
        if m.coeffs.shape() != shape {
            return Err(Error::Shape(format!("feature map {:?} does not match batch shape {shape:?}", m.coeffs.shape())));
        }
        data.extend_from_slice(m.coeffs.data());
    }
    Tensor::new(vec![maps.len(), 1, shape[0], shape[1]], data)
}

/// Seeded shuffle of `0..n` cut into consecutive batches; the final partial
/// batch is kept.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be ≥ 1".into()));
    }
    let order = rng::permutation(n, rng::derive_seed(seed, streams::SHUFFLE, n as u64));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stream of shuffled, feature-extracted, normalized batches over a manifest.
pub fn make_batches<'a>(
    manifest: &'a Manifest,
    batch_size: usize,
    seed: u64,
    frontend: &'a Mfcc,
    stats: &'a FeatureStats,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    let batches = batch_indices(manifest.len(), batch_size, seed)?;
    Ok(batches.into_iter().map(move |idx| {
        let mut maps = Vec::with_capacity(idx.len());
        for &i in &idx {
            let entry = &manifest.entries[i];
            let clip = audio::load_wav(&entry.path)?;
            maps.push(frontend.compute(&clip)?.normalize(stats)?);
        }
        Ok(Batch {
            features: stack_features(&maps.iter().collect::<Vec<_>>())?,
            labels: Some(idx.iter().map(|&i| manifest.entries[i].label).collect()),
            ids: idx.iter().map(|&i| utterance_id(&manifest.entries[i].path)).collect(),
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sizes_keep_partial_tail() {
        let b = batch_indices(300, 128, 1).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![128, 128, 44]);
        let singles = batch_indices(300, 1, 1).unwrap();
        assert_eq!(singles.len(), 300);
        assert_eq!(batch_indices(300, 128, 1).unwrap(), b);
        assert_ne!(batch_indices(300, 128, 2).unwrap(), b);
        assert!(batch_indices(10, 0, 1).is_err());
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..300).collect::<Vec<_>>());
    }

    #[test]
    fn manifest_rejects_bad_label() {
        let e = vec![Entry { path: "a/x.wav".into(), label: 2 }];
        assert!(Manifest::new(e, vec!["a".into(), "b".into()], Split::Test).is_err());
    }

    #[test]
    fn utterance_ids() {
        assert_eq!(utterance_id(Path::new("/data/yes/abc_nohash_0.wav")), "yes/abc_nohash_0.wav");
    }
}
