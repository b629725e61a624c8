//! Score ingestion: beat-timed songs, bar chunking, rasters, motif labels.
//!
//! A [`Song`] is a set of tracks of beat-quantized notes. [`chunk_song`]
//! cuts selected tracks into one-bar [`PianoRollChunk`]s on a grid of `S`
//! steps per bar; [`rasterize`] turns a chunk into the binary 128 x S matrix
//! the encoder consumes. [`match_labels`] projects a label track (one note
//! per motif occurrence, pitch = motif id) onto chunks by coverage.

mod midi;

pub use midi::{parse_midi, ParseOptions, ParsedSong, RoleMapping};

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_PITCHES: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackRole {
    Melody,
    Accompaniment,
    Label,
}

/// One note on the beat timeline. `onset_beats >= 0`, `duration_beats > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoteEvent {
    pub onset_beats: f64,
    pub duration_beats: f64,
    pub pitch: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: String,
    pub role: TrackRole,
    pub notes: Vec<NoteEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Song {
    pub song_id: String,
    pub beats_per_bar: u32,
    pub tracks: Vec<Track>,
}

/// A note inside a chunk, on the step grid. Serialized as
/// `[onset_step, duration_steps, pitch]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(u32, u32, u8)", into = "(u32, u32, u8)")]
pub struct ChunkNote {
    pub onset_step: u32,
    pub duration_steps: u32,
    pub pitch: u8,
}

impl From<(u32, u32, u8)> for ChunkNote {
    fn from(t: (u32, u32, u8)) -> Self {
        Self { onset_step: t.0, duration_steps: t.1, pitch: t.2 }
    }
}

impl From<ChunkNote> for (u32, u32, u8) {
    fn from(n: ChunkNote) -> Self {
        (n.onset_step, n.duration_steps, n.pitch)
    }
}

/// One bar of music on an `S`-step grid. Never empty; every note satisfies
/// `onset_step + duration_steps <= S` and `duration_steps >= 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PianoRollChunk {
    pub song_id: String,
    pub bar_index: u32,
    #[serde(rename = "S")]
    pub steps_per_bar: u32,
    pub notes: Vec<ChunkNote>,
    /// `"{song_id}:{bar_index}"`; stable identity used for augmentation
    /// streams and view-level relevance.
    pub origin_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotifLabel {
    pub song_id: String,
    pub bar_index: u32,
    /// Pitch of the label-track note covering this chunk.
    pub motif_id: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_songs: usize,
    pub n_chunks: usize,
    pub n_labeled_chunks: usize,
    pub n_motif_classes: usize,
    /// Mean over labeled songs of the number of distinct motif ids.
    pub mean_motifs_per_song: f64,
    /// Mean over (song, motif) classes of the number of labeled chunks.
    pub mean_occurrences_per_motif: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub chunks: Vec<PianoRollChunk>,
    pub labels: Vec<MotifLabel>,
    pub summary: DatasetSummary,
}

impl LabeledDataset {
    /// Validates label references and computes the summary.
    pub fn new(chunks: Vec<PianoRollChunk>, labels: Vec<MotifLabel>) -> Result<Self> {
        let chunk_keys: BTreeSet<(&str, u32)> =
            chunks.iter().map(|c| (c.song_id.as_str(), c.bar_index)).collect();
        let mut label_keys = BTreeSet::new();
        for l in &labels {
            if !chunk_keys.contains(&(l.song_id.as_str(), l.bar_index)) {
                return Err(Error::Domain(format!(
                    "label {}:{} does not refer to an existing chunk",
                    l.song_id, l.bar_index
                )));
            }
            if !label_keys.insert((l.song_id.as_str(), l.bar_index)) {
                return Err(Error::Domain(format!(
                    "duplicate label for chunk {}:{}",
                    l.song_id, l.bar_index
                )));
            }
        }
        let summary = compute_summary(&chunks, &labels);
        Ok(Self { chunks, labels, summary })
    }

    pub fn recompute_summary(&self) -> DatasetSummary {
        compute_summary(&self.chunks, &self.labels)
    }
}

pub fn compute_summary(chunks: &[PianoRollChunk], labels: &[MotifLabel]) -> DatasetSummary {
    let songs: BTreeSet<&str> = chunks.iter().map(|c| c.song_id.as_str()).collect();
    let mut motifs_by_song: BTreeMap<&str, BTreeSet<u8>> = BTreeMap::new();
    let mut occ_by_class: BTreeMap<(&str, u8), usize> = BTreeMap::new();
    for l in labels {
        motifs_by_song.entry(l.song_id.as_str()).or_default().insert(l.motif_id);
        *occ_by_class.entry((l.song_id.as_str(), l.motif_id)).or_default() += 1;
    }
    let mean_motifs_per_song = if motifs_by_song.is_empty() {
        0.0
    } else {
        motifs_by_song.values().map(|m| m.len() as f64).sum::<f64>() / motifs_by_song.len() as f64
    };
    let mean_occurrences_per_motif = if occ_by_class.is_empty() {
        0.0
    } else {
        occ_by_class.values().map(|&n| n as f64).sum::<f64>() / occ_by_class.len() as f64
    };
    DatasetSummary {
        n_songs: songs.len(),
        n_chunks: chunks.len(),
        n_labeled_chunks: labels.len(),
        n_motif_classes: occ_by_class.len(),
        mean_motifs_per_song,
        mean_occurrences_per_motif,
    }
}

/// Snaps a beat value onto the global step grid (`S` steps per bar of
/// `beats_per_bar` beats), rounding half away from zero.
fn to_steps(beats: f64, s: u32, beats_per_bar: u32) -> i64 {
    (beats * f64::from(s) / f64::from(beats_per_bar)).round() as i64
}

/// Cuts the notes of `roles`-selected tracks into one-bar chunks.
///
/// Onsets snap to the nearest step; durations round to steps with a minimum
/// of 1 and are truncated at the end of the bar the note starts in. Bars
/// with no notes produce no chunk.
pub fn chunk_song(song: &Song, roles: &[TrackRole], s: u32) -> Result<Vec<PianoRollChunk>> {
    if s == 0 {
        return Err(Error::Config("steps_per_bar must be >= 1".into()));
    }
    if song.beats_per_bar == 0 {
        return Err(Error::Domain(format!("song {}: beats_per_bar is 0", song.song_id)));
    }
    let mut bars: BTreeMap<u32, Vec<ChunkNote>> = BTreeMap::new();
    for track in &song.tracks {
        if !roles.contains(&track.role) {
            continue;
        }
        for note in &track.notes {
            if note.onset_beats < 0.0 || !(note.duration_beats > 0.0) {
                return Err(Error::Domain(format!(
                    "song {}: invalid note timing (onset {}, duration {})",
                    song.song_id, note.onset_beats, note.duration_beats
                )));
            }
            if note.pitch > 127 {
                return Err(Error::Domain(format!(
                    "song {}: pitch {} out of range",
                    song.song_id, note.pitch
                )));
            }
            let gs = to_steps(note.onset_beats, s, song.beats_per_bar).max(0) as u64;
            let bar = (gs / u64::from(s)) as u32;
            let onset = (gs % u64::from(s)) as u32;
            let dur = to_steps(note.duration_beats, s, song.beats_per_bar).max(1) as u32;
            let dur = dur.min(s - onset);
            bars.entry(bar).or_default().push(ChunkNote {
                onset_step: onset,
                duration_steps: dur,
                pitch: note.pitch,
            });
        }
    }
    let mut chunks = Vec::with_capacity(bars.len());
    for (bar_index, mut notes) in bars {
        notes.sort_by_key(|n| (n.onset_step, n.pitch, n.duration_steps));
        chunks.push(PianoRollChunk {
            song_id: song.song_id.clone(),
            bar_index,
            steps_per_bar: s,
            notes,
            origin_id: format!("{}:{}", song.song_id, bar_index),
        });
    }
    Ok(chunks)
}

/// Checks the chunk invariants; used on every deserialized chunk.
pub fn validate_chunk(chunk: &PianoRollChunk) -> Result<()> {
    let s = chunk.steps_per_bar;
    if s == 0 {
        return Err(Error::Domain(format!("chunk {}: S is 0", chunk.origin_id)));
    }
    if chunk.notes.is_empty() {
        return Err(Error::Domain(format!("chunk {}: empty note set", chunk.origin_id)));
    }
    for n in &chunk.notes {
        if n.duration_steps == 0 || n.onset_step + n.duration_steps > s || n.pitch > 127 {
            return Err(Error::Domain(format!(
                "chunk {}: note ({}, {}, {}) violates the S={} grid",
                chunk.origin_id, n.onset_step, n.duration_steps, n.pitch, s
            )));
        }
    }
    Ok(())
}

/// Binary piano roll of shape `(128, S)`: cell `(p, t)` is 1.0 when some
/// note of pitch `p` sounds at step `t`.
pub fn rasterize(chunk: &PianoRollChunk) -> Array2<f64> {
    let s = chunk.steps_per_bar as usize;
    let mut m = Array2::zeros((N_PITCHES, s));
    for n in &chunk.notes {
        for t in n.onset_step..n.onset_step + n.duration_steps {
            m[(n.pitch as usize, t as usize)] = 1.0;
        }
    }
    m
}

/// Interval-based pitch-range normalization: shifts the chunk so its lowest
/// pitch becomes 0. The flattened raster of the result is the IBPR baseline
/// embedding.
pub fn ibpr_normalize(chunk: &PianoRollChunk) -> Result<PianoRollChunk> {
    let min = chunk
        .notes
        .iter()
        .map(|n| n.pitch)
        .min()
        .ok_or_else(|| Error::Domain(format!("chunk {}: empty note set", chunk.origin_id)))?;
    let mut out = chunk.clone();
    for n in &mut out.notes {
        n.pitch -= min;
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct LabelMatch {
    pub labels: Vec<MotifLabel>,
    pub warnings: Vec<String>,
}

/// Assigns motif labels to chunks from a label track.
///
/// A chunk gets the label of the note covering the largest fraction of its
/// bar, provided that coverage strictly exceeds 0.75; coverage ties resolve
/// to the lower pitch. A warning is recorded when notes of two or more
/// distinct pitches each cover more than 0.75 of the same bar.
pub fn match_labels(
    chunks: &[PianoRollChunk],
    label_track: &[NoteEvent],
    beats_per_bar: u32,
) -> LabelMatch {
    let bpb = f64::from(beats_per_bar);
    let mut out = LabelMatch::default();
    for chunk in chunks {
        let lo = f64::from(chunk.bar_index) * bpb;
        let hi = lo + bpb;
        let mut best: Option<(f64, u8)> = None;
        let mut over: BTreeSet<u8> = BTreeSet::new();
        for note in label_track {
            let cov = (note.onset_beats + note.duration_beats).min(hi) - note.onset_beats.max(lo);
            if cov <= 0.0 {
                continue;
            }
            let cov = cov / bpb;
            if cov > 0.75 {
                over.insert(note.pitch);
            }
            best = match best {
                None => Some((cov, note.pitch)),
                Some((bc, bp)) if cov > bc || (cov == bc && note.pitch < bp) => {
                    Some((cov, note.pitch))
                }
                keep => keep,
            };
        }
        if let Some((cov, pitch)) = best {
            if cov > 0.75 {
                out.labels.push(MotifLabel {
                    song_id: chunk.song_id.clone(),
                    bar_index: chunk.bar_index,
                    motif_id: pitch,
                });
            }
        }
        if over.len() >= 2 {
            out.warnings.push(format!(
                "chunk {}: {} label pitches exceed 0.75 coverage",
                chunk.origin_id,
                over.len()
            ));
        }
    }
    out
}

fn read_jsonl<T, F>(path: &Path, mut check: F) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(&T) -> Result<()>,
{
    let file = std::fs::File::open(path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(&line).map_err(|e| {
            Error::Domain(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        check(&item).map_err(|e| Error::Domain(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_chunks_jsonl(path: &Path, chunks: &[PianoRollChunk]) -> Result<()> {
    write_jsonl(path, chunks)
}

pub fn read_chunks_jsonl(path: &Path) -> Result<Vec<PianoRollChunk>> {
    read_jsonl(path, validate_chunk)
}

pub fn write_labels_jsonl(path: &Path, labels: &[MotifLabel]) -> Result<()> {
    write_jsonl(path, labels)
}

pub fn read_labels_jsonl(path: &Path) -> Result<Vec<MotifLabel>> {
    read_jsonl(path, |_| Ok(()))
}
