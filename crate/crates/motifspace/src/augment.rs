//! Motif-preserving chunk transforms and view-set construction.
//!
//! [`make_views`] derives one random stream per (origin, view index) with
//! tag `augment/{origin_id}/{view_index}` and draws, in order:
//!
//! 1. four inclusion flags (`f64() < include_p`) for transpose, dropout,
//!    shift, duration;
//! 2. if none was included, `below(4)` picks one to force;
//! 3. the included transforms run in that fixed order, each consuming draws
//!    as documented on the transform function.
//!
//! Replaying those draws against the same stream reproduces every view
//! exactly, which is how the tests independently verify the transforms.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::score::{validate_chunk, PianoRollChunk};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Inclusive semitone range for transposition.
    pub transpose_range: (i64, i64),
    /// Per-note removal probability.
    pub dropout_p: f64,
    /// Per-note probability of a one-step onset shift.
    pub shift_p: f64,
    /// Uniform range for the last-note duration factor.
    pub duration_factor_range: (f64, f64),
    /// Probability that each transform participates in a view.
    pub include_p: f64,
    /// Augmented views per chunk (the original is kept alongside).
    pub n_views: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            transpose_range: (-12, 12),
            dropout_p: 0.1,
            shift_p: 0.2,
            duration_factor_range: (0.5, 2.0),
            include_p: 0.5,
            n_views: 5,
            seed: 42,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in [0, 1], got {p}")))
            }
        };
        prob("dropout_p", self.dropout_p)?;
        prob("shift_p", self.shift_p)?;
        prob("include_p", self.include_p)?;
        if self.transpose_range.0 > self.transpose_range.1 {
            return Err(Error::Config(format!(
                "transpose_range {:?} is reversed",
                self.transpose_range
            )));
        }
        let (lo, hi) = self.duration_factor_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!(
                "duration_factor_range {:?} must satisfy 0 < lo <= hi",
                self.duration_factor_range
            )));
        }
        Ok(())
    }
}

/// A chunk together with its augmented views. `views[0]` is the original.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSet {
    pub origin_id: String,
    pub views: Vec<PianoRollChunk>,
}

/// Shifts every pitch by `k` semitones; errors if any pitch would leave
/// `[0, 127]`.
pub fn transpose(chunk: &PianoRollChunk, k: i64) -> Result<PianoRollChunk> {
    let mut out = chunk.clone();
    for n in &mut out.notes {
        let p = i64::from(n.pitch) + k;
        if !(0..=127).contains(&p) {
            return Err(Error::Domain(format!(
                "transpose by {k} moves pitch {} outside [0, 127]",
                n.pitch
            )));
        }
        n.pitch = p as u8;
    }
    Ok(out)
}

/// Removes each note with probability `p` (one `f64()` draw per note, in
/// note order; a note is removed when the draw is `< p`). If nothing
/// survives, one `below(n)` draw picks a note to retain.
pub fn note_dropout(chunk: &PianoRollChunk, p: f64, stream: &mut Stream) -> PianoRollChunk {
    let mut out = chunk.clone();
    out.notes = chunk.notes.iter().copied().filter(|_| stream.f64() >= p).collect();
    if out.notes.is_empty() {
        out.notes.push(chunk.notes[stream.below(chunk.notes.len())]);
    }
    out
}

/// Shifts each note's onset by one step with probability `p`. Per note, in
/// order: one `f64()` selection draw; if selected, one `below(2)` draw for
/// the direction (0 is left, 1 is right). Onsets clamp to `[0, S)` and the
/// duration is shortened only when the bar-end clamp requires it.
pub fn shift_notes(chunk: &PianoRollChunk, p: f64, stream: &mut Stream) -> PianoRollChunk {
    let s = chunk.steps_per_bar;
    let mut out = chunk.clone();
    for n in &mut out.notes {
        if stream.f64() < p {
            let delta: i64 = if stream.below(2) == 0 { -1 } else { 1 };
            let onset = (i64::from(n.onset_step) + delta).clamp(0, i64::from(s) - 1) as u32;
            n.onset_step = onset;
            n.duration_steps = n.duration_steps.min(s - onset);
        }
    }
    out
}

/// Rescales the duration of every note sharing the chunk's final onset by
/// one shared factor (a single `f64_in(lo, hi)` draw), rounding half away
/// from zero with a floor of 1 step and the bar-end clamp.
pub fn vary_last_duration(
    chunk: &PianoRollChunk,
    range: (f64, f64),
    stream: &mut Stream,
) -> PianoRollChunk {
    let factor = stream.f64_in(range.0, range.1);
    let last_onset = chunk.notes.iter().map(|n| n.onset_step).max().unwrap_or(0);
    let mut out = chunk.clone();
    for n in &mut out.notes {
        if n.onset_step == last_onset {
            let scaled = (f64::from(n.duration_steps) * factor).round().max(1.0) as u32;
            n.duration_steps = scaled.min(chunk.steps_per_bar - n.onset_step);
        }
    }
    out
}

const TRANSPOSE_ATTEMPTS: usize = 32;

fn draw_transposed(
    chunk: &PianoRollChunk,
    range: (i64, i64),
    stream: &mut Stream,
) -> Result<PianoRollChunk> {
    let min = i64::from(chunk.notes.iter().map(|n| n.pitch).min().unwrap_or(0));
    let max = i64::from(chunk.notes.iter().map(|n| n.pitch).max().unwrap_or(0));
    for _ in 0..TRANSPOSE_ATTEMPTS {
        let k = stream.range_i64(range.0, range.1);
        if min + k >= 0 && max + k <= 127 {
            return transpose(chunk, k);
        }
    }
    Err(Error::Domain(format!(
        "chunk {}: no feasible transposition in {:?} after {TRANSPOSE_ATTEMPTS} draws",
        chunk.origin_id, range
    )))
}

/// Builds the view set for one chunk: the original plus `n_views` augmented
/// copies, each from its own `augment/{origin_id}/{index}` stream.
pub fn make_views(chunk: &PianoRollChunk, cfg: &AugmentConfig) -> Result<ViewSet> {
    cfg.validate()?;
    validate_chunk(chunk)?;
    let mut views = Vec::with_capacity(cfg.n_views + 1);
    views.push(chunk.clone());
    for v in 0..cfg.n_views {
        let mut stream = Stream::new(cfg.seed, &format!("augment/{}/{v}", chunk.origin_id));
        let mut include = [false; 4];
        for slot in &mut include {
            *slot = stream.f64() < cfg.include_p;
        }
        if include.iter().all(|&x| !x) {
            include[stream.below(4)] = true;
        }
        let mut view = chunk.clone();
        if include[0] {
            view = draw_transposed(&view, cfg.transpose_range, &mut stream)?;
        }
        if include[1] {
            view = note_dropout(&view, cfg.dropout_p, &mut stream);
        }
        if include[2] {
            view = shift_notes(&view, cfg.shift_p, &mut stream);
        }
        if include[3] {
            view = vary_last_duration(&view, cfg.duration_factor_range, &mut stream);
        }
        views.push(view);
    }
    Ok(ViewSet { origin_id: chunk.origin_id.clone(), views })
}

pub fn write_viewsets_jsonl(path: &Path, sets: &[ViewSet]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    use std::io::Write;
    for set in sets {
        serde_json::to_writer(&mut w, set)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_viewsets_jsonl(path: &Path) -> Result<Vec<ViewSet>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    let mut out: Vec<ViewSet> = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let set: ViewSet = serde_json::from_str(&line)
            .map_err(|e| Error::Domain(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if set.views.is_empty() {
            return Err(Error::Domain(format!(
                "{}:{}: view set {} has no views",
                path.display(),
                i + 1,
                set.origin_id
            )));
        }
        for view in &set.views {
            validate_chunk(view)
                .map_err(|e| Error::Domain(format!("{}:{}: {e}", path.display(), i + 1)))?;
        }
        out.push(set);
    }
    Ok(out)
}
