//! Batch sampling for pretraining and fine-tuning.
//!
//! Draw protocols (all on a caller-provided [`Stream`], so batches replay
//! exactly):
//!
//! - pretrain pairs: origins without replacement via `sample_indices`, then
//!   per origin two distinct view indices via `pick_distinct` (a view-set
//!   with a single view yields the degenerate original/original pair);
//! - pretrain triplets: per item, anchor origins via `below` with
//!   replacement, redrawing while the origin has fewer than two views; two
//!   distinct views; then one `below` over the anchor's cross-song
//!   candidate pool (after NECL filtering in NECL mode);
//! - labeled pairs: anchors without replacement over chunks whose
//!   (song_id, motif_id) class has >= 2 members, positive via `below` over
//!   the anchor's classmates;
//! - labeled triplets: anchors via `below` with replacement over the same
//!   eligible pool, positive over classmates, negative over the cross-song
//!   pool (labeled or not), NECL-filtered in NECL mode.
//!
//! NECL filtering removes candidates whose active-cell IoU with the anchor
//! raster exceeds 0.5; when that empties the pool it falls back to the
//! unfiltered pool and counts a warning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::augment::ViewSet;
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::score::{rasterize, MotifLabel, PianoRollChunk};

/// Maximum active-cell IoU a NECL negative may share with its anchor.
pub const NECL_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// Plain contrastive: negatives uniform over cross-song candidates.
    Cl,
    /// Negative-excluding contrastive: IoU-filtered negatives.
    Necl,
}

/// Matched anchor/positive chunk lists. `provenance[i]` is the
/// (anchor, positive) id pair, where view ids look like `origin#view`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub anchors: Vec<PianoRollChunk>,
    pub positives: Vec<PianoRollChunk>,
    pub provenance: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub anchors: Vec<PianoRollChunk>,
    pub positives: Vec<PianoRollChunk>,
    pub negatives: Vec<PianoRollChunk>,
    pub provenance: Vec<(String, String, String)>,
    /// Batch items whose NECL filter emptied the pool and fell back.
    pub necl_fallbacks: usize,
}

/// Packed active-cell set of a raster, for fast IoU.
#[derive(Debug, Clone)]
struct RollBits {
    words: Vec<u64>,
    ones: u32,
}

fn roll_bits(chunk: &PianoRollChunk) -> RollBits {
    let raster = rasterize(chunk);
    let n = raster.len();
    let mut words = vec![0u64; n.div_ceil(64)];
    let mut ones = 0;
    for (i, &v) in raster.iter().enumerate() {
        if v > 0.0 {
            words[i / 64] |= 1 << (i % 64);
            ones += 1;
        }
    }
    RollBits { words, ones }
}

fn iou(a: &RollBits, b: &RollBits) -> f64 {
    let inter: u32 = a.words.iter().zip(&b.words).map(|(x, y)| (x & y).count_ones()).sum();
    let union = a.ones + b.ones - inter;
    if union == 0 {
        1.0
    } else {
        f64::from(inter) / f64::from(union)
    }
}

/// Drops candidates whose active-cell IoU with the anchor exceeds
/// [`NECL_IOU_THRESHOLD`]. An empty result falls back to the full
/// candidate list with a warning, so the output is never empty (and is
/// always a subset of the input).
pub fn necl_filter(
    anchor: &PianoRollChunk,
    candidates: &[PianoRollChunk],
) -> Vec<PianoRollChunk> {
    let a = roll_bits(anchor);
    let kept: Vec<PianoRollChunk> = candidates
        .iter()
        .filter(|c| iou(&a, &roll_bits(c)) <= NECL_IOU_THRESHOLD)
        .cloned()
        .collect();
    if kept.is_empty() && !candidates.is_empty() {
        log::warn!(
            "necl filter removed every candidate for {}; falling back to the unfiltered pool",
            anchor.origin_id
        );
        return candidates.to_vec();
    }
    kept
}

fn view_id(origin: &str, view: usize) -> String {
    format!("{origin}#{view}")
}

/// Pretrain pair batch over a view-set corpus; see the module protocol.
pub fn sample_pair_batch(corpus: &[ViewSet], n: usize, stream: &mut Stream) -> Result<PairBatch> {
    if corpus.is_empty() {
        return Err(Error::Sampling("empty view corpus".into()));
    }
    if n == 0 {
        return Err(Error::Sampling("batch size must be >= 1".into()));
    }
    if corpus.len() < n {
        return Err(Error::Sampling(format!(
            "corpus has {} origins, cannot draw a batch of {n} without replacement",
            corpus.len()
        )));
    }
    let mut batch = PairBatch {
        anchors: Vec::with_capacity(n),
        positives: Vec::with_capacity(n),
        provenance: Vec::with_capacity(n),
    };
    for i in stream.sample_indices(corpus.len(), n) {
        let set = &corpus[i];
        let (a, p) = if set.views.len() < 2 { (0, 0) } else { stream.pick_distinct(set.views.len()) };
        batch.anchors.push(set.views[a].clone());
        batch.positives.push(set.views[p].clone());
        batch.provenance.push((view_id(&set.origin_id, a), view_id(&set.origin_id, p)));
    }
    Ok(batch)
}

/// Prepared index over a view-set corpus for triplet sampling.
pub struct ViewSampler<'a> {
    sets: &'a [ViewSet],
    /// Flattened (set index, view index) in corpus order.
    all_views: Vec<(usize, usize)>,
    /// `all_views` slot of each set's first view.
    offsets: Vec<usize>,
    /// For each song, indices into `all_views` outside that song.
    cross_pools: BTreeMap<String, Vec<usize>>,
    bits: Option<Vec<RollBits>>,
    has_pair_origin: bool,
}

impl<'a> ViewSampler<'a> {
    pub fn new(sets: &'a [ViewSet], mode: SampleMode) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::Sampling("empty view corpus".into()));
        }
        let mut all_views = Vec::new();
        let mut offsets = Vec::with_capacity(sets.len());
        for (si, set) in sets.iter().enumerate() {
            offsets.push(all_views.len());
            for vi in 0..set.views.len() {
                all_views.push((si, vi));
            }
        }
        let songs: std::collections::BTreeSet<&str> =
            sets.iter().flat_map(|s| s.views.first().map(|v| v.song_id.as_str())).collect();
        if songs.len() < 2 {
            return Err(Error::Sampling(
                "triplet sampling needs at least two songs for cross-song negatives".into(),
            ));
        }
        let mut cross_pools = BTreeMap::new();
        for song in songs {
            let pool: Vec<usize> = all_views
                .iter()
                .enumerate()
                .filter(|(_, &(si, _))| sets[si].views[0].song_id != song)
                .map(|(i, _)| i)
                .collect();
            cross_pools.insert(song.to_string(), pool);
        }
        let bits = match mode {
            SampleMode::Cl => None,
            SampleMode::Necl => Some(
                all_views.iter().map(|&(si, vi)| roll_bits(&sets[si].views[vi])).collect(),
            ),
        };
        let has_pair_origin = sets.iter().any(|s| s.views.len() >= 2);
        Ok(Self { sets, all_views, offsets, cross_pools, bits, has_pair_origin })
    }

    pub fn sample_triplets(
        &self,
        n: usize,
        mode: SampleMode,
        stream: &mut Stream,
    ) -> Result<TripletBatch> {
        if !self.has_pair_origin {
            return Err(Error::Sampling(
                "no origin has two views; triplet anchors need a distinct positive".into(),
            ));
        }
        if matches!(mode, SampleMode::Necl) && self.bits.is_none() {
            return Err(Error::Sampling("sampler was not prepared for necl mode".into()));
        }
        let mut batch = TripletBatch {
            anchors: Vec::with_capacity(n),
            positives: Vec::with_capacity(n),
            negatives: Vec::with_capacity(n),
            provenance: Vec::with_capacity(n),
            necl_fallbacks: 0,
        };
        for _ in 0..n {
            let si = loop {
                let si = stream.below(self.sets.len());
                if self.sets[si].views.len() >= 2 {
                    break si;
                }
            };
            let set = &self.sets[si];
            let (a, p) = stream.pick_distinct(set.views.len());
            let anchor = &set.views[a];
            let pool = &self.cross_pools[&anchor.song_id];
            if pool.is_empty() {
                return Err(Error::Sampling(format!(
                    "no cross-song negatives available for song {}",
                    anchor.song_id
                )));
            }
            let neg_slot = match (&self.bits, mode) {
                (Some(bits), SampleMode::Necl) => {
                    let abits = &bits[self.offsets[si] + a];
                    let kept: Vec<usize> = pool
                        .iter()
                        .copied()
                        .filter(|&i| iou(abits, &bits[i]) <= NECL_IOU_THRESHOLD)
                        .collect();
                    if kept.is_empty() {
                        batch.necl_fallbacks += 1;
                        pool[stream.below(pool.len())]
                    } else {
                        kept[stream.below(kept.len())]
                    }
                }
                _ => pool[stream.below(pool.len())],
            };
            let (nsi, nvi) = self.all_views[neg_slot];
            let negative = &self.sets[nsi].views[nvi];
            batch.provenance.push((
                view_id(&set.origin_id, a),
                view_id(&set.origin_id, p),
                view_id(&self.sets[nsi].origin_id, nvi),
            ));
            batch.anchors.push(anchor.clone());
            batch.positives.push(set.views[p].clone());
            batch.negatives.push(negative.clone());
        }
        if batch.necl_fallbacks > 0 {
            log::warn!(
                "necl filter fell back to the unfiltered pool for {} of {n} triplets",
                batch.necl_fallbacks
            );
        }
        Ok(batch)
    }
}

/// Prepared index over a labeled dataset for fine-tuning batches.
pub struct LabeledSampler<'a> {
    chunks: &'a [PianoRollChunk],
    /// Chunk indices whose (song, motif) class has >= 2 members.
    eligible: Vec<usize>,
    /// For each eligible chunk, its classmates (same class, other chunks).
    classmates: BTreeMap<usize, Vec<usize>>,
    /// For each song, chunk indices from other songs.
    cross_pools: BTreeMap<String, Vec<usize>>,
    bits: Option<Vec<RollBits>>,
}

impl<'a> LabeledSampler<'a> {
    pub fn new(
        chunks: &'a [PianoRollChunk],
        labels: &[MotifLabel],
        mode: SampleMode,
    ) -> Result<Self> {
        if chunks.is_empty() {
            return Err(Error::Sampling("empty chunk set".into()));
        }
        let index: BTreeMap<(&str, u32), usize> = chunks
            .iter()
            .enumerate()
            .map(|(i, c)| ((c.song_id.as_str(), c.bar_index), i))
            .collect();
        let mut classes: BTreeMap<(&str, u8), Vec<usize>> = BTreeMap::new();
        for l in labels {
            let Some(&i) = index.get(&(l.song_id.as_str(), l.bar_index)) else {
                return Err(Error::Sampling(format!(
                    "label {}:{} has no chunk",
                    l.song_id, l.bar_index
                )));
            };
            classes.entry((l.song_id.as_str(), l.motif_id)).or_default().push(i);
        }
        let mut eligible = Vec::new();
        let mut classmates = BTreeMap::new();
        for members in classes.values() {
            if members.len() < 2 {
                continue;
            }
            for &i in members {
                eligible.push(i);
                classmates
                    .insert(i, members.iter().copied().filter(|&j| j != i).collect::<Vec<_>>());
            }
        }
        eligible.sort_unstable();
        let songs: std::collections::BTreeSet<&str> =
            chunks.iter().map(|c| c.song_id.as_str()).collect();
        let mut cross_pools = BTreeMap::new();
        for song in songs {
            let pool: Vec<usize> = chunks
                .iter()
                .enumerate()
                .filter(|(_, c)| c.song_id != song)
                .map(|(i, _)| i)
                .collect();
            cross_pools.insert(song.to_string(), pool);
        }
        let bits = match mode {
            SampleMode::Cl => None,
            SampleMode::Necl => Some(chunks.iter().map(roll_bits).collect()),
        };
        Ok(Self { chunks, eligible, classmates, cross_pools, bits })
    }

    pub fn n_eligible(&self) -> usize {
        self.eligible.len()
    }

    /// Labeled anchor/positive pairs, anchors without replacement.
    pub fn sample_pairs(&self, n: usize, stream: &mut Stream) -> Result<PairBatch> {
        if self.eligible.len() < n {
            return Err(Error::Sampling(format!(
                "{} eligible labeled chunks, cannot draw a batch of {n} without replacement",
                self.eligible.len()
            )));
        }
        let mut batch = PairBatch {
            anchors: Vec::with_capacity(n),
            positives: Vec::with_capacity(n),
            provenance: Vec::with_capacity(n),
        };
        for slot in stream.sample_indices(self.eligible.len(), n) {
            let i = self.eligible[slot];
            let mates = &self.classmates[&i];
            let j = mates[stream.below(mates.len())];
            batch.anchors.push(self.chunks[i].clone());
            batch.positives.push(self.chunks[j].clone());
            batch
                .provenance
                .push((self.chunks[i].origin_id.clone(), self.chunks[j].origin_id.clone()));
        }
        Ok(batch)
    }

    /// Labeled triplets; anchors with replacement over the eligible pool.
    pub fn sample_triplets(
        &self,
        n: usize,
        mode: SampleMode,
        stream: &mut Stream,
    ) -> Result<TripletBatch> {
        if self.eligible.is_empty() {
            return Err(Error::Sampling(
                "no motif class has two or more labeled occurrences".into(),
            ));
        }
        if matches!(mode, SampleMode::Necl) && self.bits.is_none() {
            return Err(Error::Sampling("sampler was not prepared for necl mode".into()));
        }
        let mut batch = TripletBatch {
            anchors: Vec::with_capacity(n),
            positives: Vec::with_capacity(n),
            negatives: Vec::with_capacity(n),
            provenance: Vec::with_capacity(n),
            necl_fallbacks: 0,
        };
        for _ in 0..n {
            let i = self.eligible[stream.below(self.eligible.len())];
            let anchor = &self.chunks[i];
            let mates = &self.classmates[&i];
            let j = mates[stream.below(mates.len())];
            let pool = &self.cross_pools[&anchor.song_id];
            if pool.is_empty() {
                return Err(Error::Sampling(format!(
                    "no cross-song negatives available for song {}",
                    anchor.song_id
                )));
            }
            let k = match (&self.bits, mode) {
                (Some(bits), SampleMode::Necl) => {
                    let kept: Vec<usize> = pool
                        .iter()
                        .copied()
                        .filter(|&c| iou(&bits[i], &bits[c]) <= NECL_IOU_THRESHOLD)
                        .collect();
                    if kept.is_empty() {
                        batch.necl_fallbacks += 1;
                        pool[stream.below(pool.len())]
                    } else {
                        kept[stream.below(kept.len())]
                    }
                }
                _ => pool[stream.below(pool.len())],
            };
            batch.provenance.push((
                anchor.origin_id.clone(),
                self.chunks[j].origin_id.clone(),
                self.chunks[k].origin_id.clone(),
            ));
            batch.anchors.push(anchor.clone());
            batch.positives.push(self.chunks[j].clone());
            batch.negatives.push(self.chunks[k].clone());
        }
        if batch.necl_fallbacks > 0 {
            log::warn!(
                "necl filter fell back to the unfiltered pool for {} of {n} triplets",
                batch.necl_fallbacks
            );
        }
        Ok(batch)
    }
}
