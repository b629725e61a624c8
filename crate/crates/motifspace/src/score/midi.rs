//! Standard MIDI file ingestion.
//!
//! Ticks become beats via the header division; only metrical (ticks per
//! quarter) timing is supported. Note on/off pairing is FIFO per
//! (channel, key). Tracks are mapped to roles by their name.

use std::collections::{BTreeMap, VecDeque};

use midly::{MetaMessage, MidiMessage, Smf, Timing, TrackEventKind};
use serde::{Deserialize, Serialize};

use super::{NoteEvent, Song, Track, TrackRole};
use crate::error::{Error, Result};

/// Case-insensitive track-name lists deciding each track's role. With an
/// `accompaniment` allowlist, unmatched tracks are skipped (with a warning)
/// instead of defaulting to accompaniment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoleMapping {
    pub melody: Vec<String>,
    pub label: Vec<String>,
    pub accompaniment: Option<Vec<String>>,
}

impl Default for RoleMapping {
    fn default() -> Self {
        Self { melody: vec!["melody".into()], label: vec!["label".into()], accompaniment: None }
    }
}

impl RoleMapping {
    fn role_for(&self, name: &str) -> Option<TrackRole> {
        let name = name.trim().to_lowercase();
        let hit = |list: &[String]| list.iter().any(|x| x.trim().to_lowercase() == name);
        if hit(&self.melody) {
            Some(TrackRole::Melody)
        } else if hit(&self.label) {
            Some(TrackRole::Label)
        } else {
            match &self.accompaniment {
                None => Some(TrackRole::Accompaniment),
                Some(list) if hit(list) => Some(TrackRole::Accompaniment),
                Some(_) => None,
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParseOptions {
    pub song_id: String,
    pub default_beats_per_bar: u32,
    pub roles: RoleMapping,
}

impl ParseOptions {
    pub fn new(song_id: impl Into<String>) -> Self {
        Self { song_id: song_id.into(), default_beats_per_bar: 4, roles: RoleMapping::default() }
    }
}

#[derive(Debug, Clone)]
pub struct ParsedSong {
    pub song: Song,
    pub warnings: Vec<String>,
}

/// Walks the chunk structure to pin a byte offset for a malformed file.
fn locate_structural_fault(bytes: &[u8]) -> Option<(usize, String)> {
    if bytes.len() < 4 || &bytes[0..4] != b"MThd" {
        return Some((0, "missing MThd magic".into()));
    }
    if bytes.len() < 14 {
        return Some((0, "truncated header".into()));
    }
    let hlen = u32::from_be_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    if hlen < 6 {
        return Some((4, format!("header length {hlen} is too small")));
    }
    let declared = u16::from_be_bytes([bytes[10], bytes[11]]) as usize;
    let mut off = 8 + hlen;
    let mut seen = 0usize;
    while off < bytes.len() {
        if off + 8 > bytes.len() {
            return Some((off, "truncated chunk header".into()));
        }
        let len =
            u32::from_be_bytes([bytes[off + 4], bytes[off + 5], bytes[off + 6], bytes[off + 7]])
                as usize;
        if off + 8 + len > bytes.len() {
            return Some((off + 8, format!("chunk length {len} overruns the file")));
        }
        if &bytes[off..off + 4] == b"MTrk" {
            seen += 1;
        }
        off += 8 + len;
    }
    if seen < declared {
        return Some((off, format!("header declares {declared} tracks, found {seen}")));
    }
    None
}

/// Parses a standard MIDI file into a beat-timed [`Song`].
///
/// The time signature comes from the earliest time-signature event (4/4
/// when absent); zero-length and unterminated notes are dropped with
/// warnings rather than failing the file.
pub fn parse_midi(bytes: &[u8], opts: &ParseOptions) -> Result<ParsedSong> {
    if let Some((offset, message)) = locate_structural_fault(bytes) {
        return Err(Error::MidiParse { offset, message });
    }
    let smf = Smf::parse(bytes).map_err(|e| Error::MidiParse {
        offset: 14.min(bytes.len()),
        message: e.to_string(),
    })?;
    let ticks_per_beat = match smf.header.timing {
        Timing::Metrical(t) if t.as_int() > 0 => f64::from(t.as_int()),
        Timing::Metrical(_) => {
            return Err(Error::MidiParse {
                offset: 12,
                message: "zero ticks per beat".into(),
            })
        }
        Timing::Timecode(..) => {
            return Err(Error::MidiParse {
                offset: 12,
                message: "SMPTE timecode division is not supported".into(),
            })
        }
    };

    let mut warnings = Vec::new();

    // Earliest time-signature event across all tracks, ties to the first
    // track. (tick, track index, numerator, denominator power)
    let mut timesig: Option<(u64, usize, u8, u8)> = None;
    for (ti, track) in smf.tracks.iter().enumerate() {
        let mut tick = 0u64;
        for ev in track {
            tick += u64::from(ev.delta.as_int());
            if let TrackEventKind::Meta(MetaMessage::TimeSignature(num, den, _, _)) = ev.kind {
                if timesig.map_or(true, |(t, i, _, _)| (tick, ti) < (t, i)) {
                    timesig = Some((tick, ti, num, den));
                }
                break; // only the first per track can be earliest
            }
        }
    }
    let beats_per_bar = match timesig {
        None => opts.default_beats_per_bar,
        Some((_, _, num, den)) => {
            let beats4 = u32::from(num) * 4;
            let denom = 1u32 << den;
            if num == 0 || beats4 % denom != 0 {
                warnings.push(format!(
                    "time signature {num}/{denom} has no whole number of beats per bar; using {}",
                    opts.default_beats_per_bar
                ));
                opts.default_beats_per_bar
            } else {
                beats4 / denom
            }
        }
    };

    let mut tracks = Vec::new();
    for (ti, track) in smf.tracks.iter().enumerate() {
        let mut tick = 0u64;
        let mut name: Option<String> = None;
        let mut open: BTreeMap<(u8, u8), VecDeque<u64>> = BTreeMap::new();
        let mut notes: Vec<NoteEvent> = Vec::new();
        let mut zero_len = 0usize;
        for ev in track {
            tick += u64::from(ev.delta.as_int());
            match ev.kind {
                TrackEventKind::Meta(MetaMessage::TrackName(raw)) => {
                    if name.is_none() {
                        name = Some(String::from_utf8_lossy(raw).trim().to_string());
                    }
                }
                TrackEventKind::Midi { channel, message } => match message {
                    MidiMessage::NoteOn { key, vel } if vel.as_int() > 0 => {
                        open.entry((channel.as_int(), key.as_int())).or_default().push_back(tick);
                    }
                    MidiMessage::NoteOn { key, .. } | MidiMessage::NoteOff { key, .. } => {
                        let slot = open.entry((channel.as_int(), key.as_int())).or_default();
                        if let Some(on) = slot.pop_front() {
                            if tick > on {
                                notes.push(NoteEvent {
                                    onset_beats: on as f64 / ticks_per_beat,
                                    duration_beats: (tick - on) as f64 / ticks_per_beat,
                                    pitch: key.as_int(),
                                });
                            } else {
                                zero_len += 1;
                            }
                        }
                        // A note-off with no matching note-on is ignored.
                    }
                    _ => {}
                },
                _ => {}
            }
        }
        let track_id = name.clone().unwrap_or_else(|| format!("track{ti}"));
        if zero_len > 0 {
            warnings.push(format!("track {track_id}: {zero_len} zero-length notes dropped"));
        }
        let unterminated: usize = open.values().map(VecDeque::len).sum();
        if unterminated > 0 {
            warnings.push(format!("track {track_id}: {unterminated} unterminated notes dropped"));
        }
        let role = match opts.roles.role_for(&track_id) {
            Some(role) => role,
            None => {
                warnings.push(format!("track {track_id}: no role in mapping, skipped"));
                continue;
            }
        };
        notes.sort_by(|a, b| {
            (a.onset_beats, a.pitch, a.duration_beats)
                .partial_cmp(&(b.onset_beats, b.pitch, b.duration_beats))
                .unwrap()
        });
        tracks.push(Track { track_id, role, notes });
    }

    Ok(ParsedSong {
        song: Song { song_id: opts.song_id.clone(), beats_per_bar, tracks },
        warnings,
    })
}
