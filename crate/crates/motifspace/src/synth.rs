//! Deterministic synthetic corpora for tests and calibration.
//!
//! Two generators: [`synth_origins`] makes independent melodic chunks for
//! pretraining-style experiments (relevance = shared origin after view
//! augmentation), and [`synth_benchmark`] makes labeled multi-song datasets
//! with planted motif occurrences, including motifs shared across songs so
//! that contrastive pretraining sees false negatives.

use serde::{Deserialize, Serialize};

use crate::augment;
use crate::error::Result;
use crate::rng::Stream;
use crate::score::{ChunkNote, LabeledDataset, MotifLabel, PianoRollChunk};

/// Small diatonic interval set keeps generated chunks loosely tonal.
const SCALE: [i64; 8] = [0, 2, 4, 5, 7, 9, 12, 14];

/// One random non-empty chunk: 3-8 notes of 1-4 steps on a scale around a
/// random root.
pub fn synth_chunk(song_id: &str, bar_index: u32, s: u32, stream: &mut Stream) -> PianoRollChunk {
    let root = 36 + stream.below(44) as i64;
    let n_notes = 3 + stream.below(6);
    let mut notes = Vec::with_capacity(n_notes);
    for _ in 0..n_notes {
        let onset = stream.below(s as usize) as u32;
        let max_dur = (s - onset).min(4) as usize;
        let dur = 1 + stream.below(max_dur) as u32;
        let pitch = (root + SCALE[stream.below(SCALE.len())]).clamp(0, 127) as u8;
        notes.push(ChunkNote { onset_step: onset, duration_steps: dur, pitch });
    }
    notes.sort_by_key(|n| (n.onset_step, n.pitch, n.duration_steps));
    notes.dedup();
    PianoRollChunk {
        song_id: song_id.to_string(),
        bar_index,
        steps_per_bar: s,
        notes,
        origin_id: format!("{song_id}:{bar_index}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthOriginsConfig {
    pub n_origins: usize,
    pub bars_per_song: usize,
    pub steps_per_bar: u32,
    pub song_prefix: String,
    pub seed: u64,
}

impl Default for SynthOriginsConfig {
    fn default() -> Self {
        Self {
            n_origins: 500,
            bars_per_song: 25,
            steps_per_bar: 16,
            song_prefix: "syn".into(),
            seed: 42,
        }
    }
}

/// Independent chunks grouped into songs of `bars_per_song` bars.
pub fn synth_origins(cfg: &SynthOriginsConfig) -> Vec<PianoRollChunk> {
    let mut stream = Stream::new(cfg.seed, &format!("synth/origins/{}", cfg.song_prefix));
    (0..cfg.n_origins)
        .map(|i| {
            let song = format!("{}{:03}", cfg.song_prefix, i / cfg.bars_per_song);
            synth_chunk(&song, (i % cfg.bars_per_song) as u32, cfg.steps_per_bar, &mut stream)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub n_songs: usize,
    pub motifs_per_song: usize,
    /// Inclusive range for occurrences of each motif within its song.
    pub occurrences_range: (usize, usize),
    /// Unlabeled distractor bars per song.
    pub distractors_per_song: usize,
    /// Size of the cross-song prototype pool.
    pub shared_pool: usize,
    /// Probability that a song's motif reuses a pooled prototype.
    pub share_p: f64,
    /// Fraction of songs held out for evaluation (rounded up, at least 1).
    pub eval_fraction: f64,
    pub steps_per_bar: u32,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n_songs: 20,
            motifs_per_song: 4,
            occurrences_range: (3, 6),
            distractors_per_song: 8,
            shared_pool: 4,
            share_p: 0.35,
            eval_fraction: 0.25,
            steps_per_bar: 16,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthBenchmark {
    pub dataset: LabeledDataset,
    pub train_songs: Vec<String>,
    pub eval_songs: Vec<String>,
}

impl SynthBenchmark {
    pub fn split(&self) -> (LabeledDataset, LabeledDataset) {
        let pick = |songs: &[String]| {
            let chunks: Vec<PianoRollChunk> = self
                .dataset
                .chunks
                .iter()
                .filter(|c| songs.contains(&c.song_id))
                .cloned()
                .collect();
            let labels: Vec<MotifLabel> = self
                .dataset
                .labels
                .iter()
                .filter(|l| songs.contains(&l.song_id))
                .cloned()
                .collect();
            LabeledDataset::new(chunks, labels).expect("split of a valid dataset is valid")
        };
        (pick(&self.train_songs), pick(&self.eval_songs))
    }
}

/// Perturbs a prototype into one occurrence: feasible small transposition,
/// note dropout, onset jitter, then last-note duration variation.
fn perturb(proto: &PianoRollChunk, stream: &mut Stream) -> PianoRollChunk {
    let mut out = proto.clone();
    let min = out.notes.iter().map(|n| i64::from(n.pitch)).min().unwrap_or(0);
    let max = out.notes.iter().map(|n| i64::from(n.pitch)).max().unwrap_or(0);
    let k = stream.range_i64(-2, 2);
    if min + k >= 0 && max + k <= 127 {
        out = augment::transpose(&out, k).expect("checked feasible");
    }
    out = augment::note_dropout(&out, 0.1, stream);
    out = augment::shift_notes(&out, 0.2, stream);
    augment::vary_last_duration(&out, (0.75, 1.5), stream)
}

/// Labeled multi-song benchmark with planted motifs and a song-level
/// train/eval split (the last `eval_fraction` of songs are held out).
pub fn synth_benchmark(cfg: &BenchmarkConfig) -> Result<SynthBenchmark> {
    let s = cfg.steps_per_bar;
    let mut pool_stream = Stream::new(cfg.seed, "synth/bench/pool");
    let pool: Vec<PianoRollChunk> = (0..cfg.shared_pool)
        .map(|i| synth_chunk("pool", i as u32, s, &mut pool_stream))
        .collect();

    let mut chunks = Vec::new();
    let mut labels = Vec::new();
    let mut song_ids = Vec::new();
    for si in 0..cfg.n_songs {
        let song_id = format!("bench{si:03}");
        song_ids.push(song_id.clone());
        let mut stream = Stream::new(cfg.seed, &format!("synth/bench/song/{si}"));
        // Pick prototypes, then expand each into occurrences.
        let mut bars: Vec<(Option<u8>, PianoRollChunk)> = Vec::new();
        for mi in 0..cfg.motifs_per_song {
            let proto = if !pool.is_empty() && stream.f64() < cfg.share_p {
                pool[stream.below(pool.len())].clone()
            } else {
                synth_chunk(&song_id, 900 + mi as u32, s, &mut stream)
            };
            let (lo, hi) = cfg.occurrences_range;
            let occ = lo + stream.below(hi - lo + 1);
            for _ in 0..occ {
                bars.push((Some(60 + mi as u8), perturb(&proto, &mut stream)));
            }
        }
        for di in 0..cfg.distractors_per_song {
            bars.push((None, synth_chunk(&song_id, 800 + di as u32, s, &mut stream)));
        }
        // Shuffle occurrences and distractors into a bar order.
        let order = stream.sample_indices(bars.len(), bars.len());
        for (bar_index, &src) in order.iter().enumerate() {
            let (motif, proto) = &bars[src];
            let mut chunk = proto.clone();
            chunk.song_id = song_id.clone();
            chunk.bar_index = bar_index as u32;
            chunk.origin_id = format!("{song_id}:{bar_index}");
            chunks.push(chunk);
            if let Some(m) = motif {
                labels.push(MotifLabel {
                    song_id: song_id.clone(),
                    bar_index: bar_index as u32,
                    motif_id: *m,
                });
            }
        }
    }
    let n_eval = ((cfg.n_songs as f64 * cfg.eval_fraction).ceil() as usize).clamp(1, cfg.n_songs);
    let split = cfg.n_songs - n_eval;
    Ok(SynthBenchmark {
        dataset: LabeledDataset::new(chunks, labels)?,
        train_songs: song_ids[..split].to_vec(),
        eval_songs: song_ids[split..].to_vec(),
    })
}
