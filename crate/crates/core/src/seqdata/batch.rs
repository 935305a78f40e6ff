use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{read_sequence, DynSequence, Manifest, UtteranceRecord, FEATURE_DIM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropPadPolicy {
    pub max_length: usize,
    #[serde(default)]
    pub pad_value: f32,
}

impl CropPadPolicy {
    pub fn new(max_length: usize) -> Result<Self> {
        let p = Self {
            max_length,
            pad_value: 0.0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_length == 0 {
            return Err(Error::Config("crop/pad length must be at least 1".into()));
        }
        if !self.pad_value.is_finite() {
            return Err(Error::Config("pad value must be finite".into()));
        }
        Ok(())
    }
}

/// Right-pads short sequences and center-crops long ones to exactly
/// `max_length` rows. The crop starts at `floor((T - L) / 2)`.
pub fn pad_or_crop(seq: &DynSequence, policy: &CropPadPolicy) -> (Array2<f32>, Vec<bool>) {
    let frames = seq.frames();
    let t = frames.nrows();
    let l = policy.max_length;
    if t >= l {
        let start = (t - l) / 2;
        (
            frames.slice(s![start..start + l, ..]).to_owned(),
            vec![true; l],
        )
    } else {
        let mut out = Array2::from_elem((l, FEATURE_DIM), policy.pad_value);
        out.slice_mut(s![..t, ..]).assign(&frames);
        let mut mask = vec![false; l];
        mask[..t].iter_mut().for_each(|m| *m = true);
        (out, mask)
    }
}

/// Dense class indices in lexicographic speaker order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    speakers: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl LabelMap {
    pub fn from_speakers<I, S>(speakers: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: std::collections::BTreeSet<String> =
            speakers.into_iter().map(Into::into).collect();
        let speakers: Vec<String> = set.into_iter().collect();
        let index = speakers
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Self { speakers, index }
    }

    pub fn from_manifest(manifest: &Manifest) -> Self {
        Self::from_speakers(manifest.records.iter().map(|r| r.speaker_id.clone()))
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }

    pub fn get(&self, speaker: &str) -> Option<usize> {
        self.index.get(speaker).copied()
    }

    pub fn speaker(&self, label: usize) -> Option<&str> {
        self.speakers.get(label).map(String::as_str)
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn to_map(&self) -> BTreeMap<String, usize> {
        self.index.clone()
    }

    /// SHA-256 over the ordered speaker list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.speakers {
            h.update(s.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_map())
            .map_err(|e| Error::json("label map", e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: BTreeMap<String, usize> =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        let lm = Self::from_speakers(map.keys().cloned());
        if lm.to_map() != map {
            return Err(Error::LabelMap(format!(
                "{}: labels are not the dense lexicographic encoding",
                path.display()
            )));
        }
        Ok(lm)
    }

    /// Errors unless every listed speaker has a label.
    pub fn check_covers<'a>(&self, speakers: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let missing: Vec<&str> = speakers
            .into_iter()
            .filter(|s| self.get(s).is_none())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::LabelMap(format!(
                "{} speaker(s) without a label, e.g. {}",
                missing.len(),
                missing[0]
            )))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, L, 103]`
    pub sequences: Array3<f32>,
    /// `[B, L]`, true on real frames.
    pub mask: Array2<bool>,
    pub labels: Vec<usize>,
    /// Positions of the items in their [`Dataset`].
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.mask
            .rows()
            .into_iter()
            .map(|r| r.iter().filter(|&&m| m).count())
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Item {
    frames: Array2<f32>,
    mask: Vec<bool>,
    label: usize,
}

/// Records loaded into memory and cut to one [`CropPadPolicy`].
#[derive(Debug, Clone)]
pub struct Dataset {
    records: Vec<UtteranceRecord>,
    items: Vec<Item>,
    policy: CropPadPolicy,
}

impl Dataset {
    pub fn from_records(
        manifest: &Manifest,
        records: &[UtteranceRecord],
        labels: &LabelMap,
        policy: &CropPadPolicy,
    ) -> Result<Self> {
        policy.validate()?;
        let mut items = Vec::with_capacity(records.len());
        for r in records {
            let wrap = |e: Error| Error::Record {
                speaker_id: r.speaker_id.clone(),
                utterance_id: r.utterance_id.clone(),
                source: Box::new(e),
            };
            let label = labels
                .get(&r.speaker_id)
                .ok_or_else(|| wrap(Error::LabelMap("speaker missing from label map".into())))?;
            let seq = read_sequence(manifest.resolve(r)).map_err(wrap)?;
            let (frames, mask) = pad_or_crop(&seq, policy);
            items.push(Item {
                frames,
                mask,
                label,
            });
        }
        Ok(Self {
            records: records.to_vec(),
            items,
            policy: *policy,
        })
    }

    /// Builds a dataset from sequences already in memory.
    pub fn from_sequences(
        records: Vec<UtteranceRecord>,
        sequences: &[DynSequence],
        labels: &LabelMap,
        policy: &CropPadPolicy,
    ) -> Result<Self> {
        policy.validate()?;
        assert_eq!(records.len(), sequences.len());
        let mut items = Vec::with_capacity(records.len());
        for (r, seq) in records.iter().zip(sequences) {
            let label = labels.get(&r.speaker_id).ok_or_else(|| Error::Record {
                speaker_id: r.speaker_id.clone(),
                utterance_id: r.utterance_id.clone(),
                source: Box::new(Error::LabelMap("speaker missing from label map".into())),
            })?;
            let (frames, mask) = pad_or_crop(seq, policy);
            items.push(Item {
                frames,
                mask,
                label,
            });
        }
        Ok(Self {
            records,
            items,
            policy: *policy,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn policy(&self) -> &CropPadPolicy {
        &self.policy
    }

    pub fn records(&self) -> &[UtteranceRecord] {
        &self.records
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let l = self.policy.max_length;
        let mut sequences = Array3::<f32>::zeros((indices.len(), l, FEATURE_DIM));
        let mut mask = Array2::from_elem((indices.len(), l), false);
        let mut labels = Vec::with_capacity(indices.len());
        for (b, &i) in indices.iter().enumerate() {
            let item = &self.items[i];
            sequences.slice_mut(s![b, .., ..]).assign(&item.frames);
            for (m, &v) in mask.slice_mut(s![b, ..]).iter_mut().zip(&item.mask) {
                *m = v;
            }
            labels.push(item.label);
        }
        Batch {
            sequences,
            mask,
            labels,
            indices: indices.to_vec(),
        }
    }

    /// One epoch in storage order (`seed = None`) or a seeded shuffle.
    pub fn batches(&self, batch_size: usize, seed: Option<u64>) -> BatchStream<&Dataset> {
        BatchStream::new(self, self.order(seed), batch_size)
    }

    pub fn into_batches(self, batch_size: usize, seed: Option<u64>) -> BatchStream<Dataset> {
        let order = self.order(seed);
        BatchStream::new(self, order, batch_size)
    }

    fn order(&self, seed: Option<u64>) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        order
    }

    /// One epoch where items arrive in same-speaker runs of `per_class`, so
    /// most batches hold several positives per identity. Every item still
    /// appears exactly once.
    pub fn balanced_batches(
        &self,
        batch_size: usize,
        per_class: usize,
        seed: u64,
    ) -> BatchStream<&Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, item) in self.items.iter().enumerate() {
            by_label.entry(item.label).or_default().push(i);
        }
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (_, mut idx) in by_label {
            idx.shuffle(&mut rng);
            groups.extend(idx.chunks(per_class.max(1)).map(<[usize]>::to_vec));
        }
        groups.shuffle(&mut rng);
        let order = groups.into_iter().flatten().collect();
        BatchStream::new(self, order, batch_size)
    }
}

/// Iterator over the batches of one epoch.
#[derive(Debug)]
pub struct BatchStream<D> {
    data: D,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<D: Borrow<Dataset>> BatchStream<D> {
    fn new(data: D, order: Vec<usize>, batch_size: usize) -> Self {
        assert!(batch_size > 0, "batch size must be positive");
        Self {
            data,
            order,
            batch_size,
            pos: 0,
        }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl<D: Borrow<Dataset>> Iterator for BatchStream<D> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let b = self.data.borrow().batch(&self.order[self.pos..end]);
        self.pos = end;
        Some(b)
    }
}

/// Loads every record of `manifest` and yields one shuffled epoch. The label
/// map covers the manifest's speakers in lexicographic order.
pub fn make_batches(
    manifest: &Manifest,
    policy: &CropPadPolicy,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<(LabelMap, BatchStream<Dataset>)> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let labels = LabelMap::from_manifest(manifest);
    let data = Dataset::from_records(manifest, &manifest.records, &labels, policy)?;
    Ok((labels, data.into_batches(batch_size, Some(shuffle_seed))))
}
