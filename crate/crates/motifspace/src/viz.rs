//! Song-structure visualization: DBSCAN over one song's chunk embeddings,
//! a motif x time distance heatmap, and a piano roll with notes colored by
//! cluster.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::PianoRollChunk;

/// Cluster id of points that belong to no cluster.
pub const NOISE: i32 = -1;
pub const DEFAULT_MIN_PTS: usize = 4;

/// 12 distinguishable colors, cycled over cluster ids. Gray is reserved
/// for noise.
pub const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#bcbd22",
    "#17becf", "#aec7e8", "#ffbb78", "#98df8a",
];
pub const NOISE_COLOR: &str = "#808080";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Eps {
    /// Median over all points of the distance to the min_pts-th nearest
    /// neighbor (k-distance heuristic).
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Per-point cluster id in input order; `NOISE` for outliers.
    pub labels: Vec<i32>,
    /// Member means, indexed by cluster id.
    pub centers: Vec<Vec<f64>>,
    /// The eps actually used (resolved from `Auto` when applicable).
    pub eps: f64,
    pub min_pts: usize,
}

impl ClusterAssignment {
    pub fn n_clusters(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn auto_eps(points: &[Vec<f64>], min_pts: usize) -> f64 {
    // Distance to the min_pts-th nearest other point; when a point has
    // fewer than min_pts neighbors the farthest one stands in.
    let mut kdists: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut dists: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| euclidean(p, q))
                .collect();
            dists.sort_by(f64::total_cmp);
            dists[min_pts.min(dists.len()) - 1]
        })
        .collect();
    kdists.sort_by(f64::total_cmp);
    let n = kdists.len();
    if n % 2 == 1 {
        kdists[n / 2]
    } else {
        0.5 * (kdists[n / 2 - 1] + kdists[n / 2])
    }
}

/// Standard DBSCAN with Euclidean distance. Cluster ids are assigned in
/// scan order, so they are canonical for a fixed input order. Returns an
/// empty assignment (all noise) with a logged warning when no cluster
/// forms.
pub fn cluster_motifs(points: &[Vec<f64>], eps: Eps, min_pts: usize) -> Result<ClusterAssignment> {
    if min_pts == 0 {
        return Err(Error::Domain("min_pts must be >= 1".into()));
    }
    if points.len() < min_pts {
        return Err(Error::Domain(format!(
            "need at least min_pts = {min_pts} points, got {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Domain("embedding lengths differ".into()));
    }
    let eps = match eps {
        Eps::Fixed(e) if e > 0.0 && e.is_finite() => e,
        Eps::Fixed(e) => return Err(Error::Domain(format!("eps must be positive, got {e}"))),
        Eps::Auto => auto_eps(points, min_pts),
    };

    let n = points.len();
    // The eps-neighborhood includes the point itself.
    let neighbors = |i: usize| -> Vec<usize> {
        (0..n).filter(|&j| euclidean(&points[i], &points[j]) <= eps).collect()
    };

    let mut labels = vec![NOISE; n];
    let mut visited = vec![false; n];
    let mut next_cluster = 0i32;
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let seed = neighbors(i);
        if seed.len() < min_pts {
            continue; // provisionally noise; may become a border point later
        }
        let cluster = next_cluster;
        next_cluster += 1;
        labels[i] = cluster;
        let mut queue = seed;
        let mut head = 0;
        while head < queue.len() {
            let q = queue[head];
            head += 1;
            if labels[q] == NOISE {
                labels[q] = cluster;
            }
            if visited[q] {
                continue;
            }
            visited[q] = true;
            let qn = neighbors(q);
            if qn.len() >= min_pts {
                queue.extend(qn);
            }
        }
    }

    let mut centers = vec![vec![0.0; dim]; next_cluster as usize];
    let mut counts = vec![0usize; next_cluster as usize];
    for (p, &l) in points.iter().zip(&labels) {
        if l >= 0 {
            counts[l as usize] += 1;
            for (c, x) in centers[l as usize].iter_mut().zip(p) {
                *c += x;
            }
        }
    }
    for (center, count) in centers.iter_mut().zip(&counts) {
        for c in center.iter_mut() {
            *c /= *count as f64;
        }
    }
    if centers.is_empty() {
        log::warn!("dbscan found no clusters (eps {eps}, min_pts {min_pts}); all points are noise");
    }
    Ok(ClusterAssignment { labels, centers, eps, min_pts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureMap {
    /// clusters x chunks Euclidean distances, chunks in bar order.
    pub matrix: Vec<Vec<f64>>,
    /// Hex color per cluster id.
    pub colors: Vec<String>,
}

/// Distance of every chunk embedding to every cluster center, plus the
/// palette assignment.
pub fn structure_map(points: &[Vec<f64>], assignment: &ClusterAssignment) -> Result<StructureMap> {
    if assignment.is_empty() {
        return Err(Error::Domain("empty cluster assignment has no structure map".into()));
    }
    let matrix = assignment
        .centers
        .iter()
        .map(|center| points.iter().map(|p| euclidean(center, p)).collect())
        .collect();
    let colors = (0..assignment.centers.len())
        .map(|i| PALETTE[i % PALETTE.len()].to_string())
        .collect();
    Ok(StructureMap { matrix, colors })
}

/// Everything needed to reconstruct the figures, as `structure.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureSidecar {
    pub song_id: String,
    pub eps: f64,
    pub min_pts: usize,
    /// Per-chunk cluster id in bar order; -1 = noise.
    pub labels: Vec<i32>,
    pub matrix: Vec<Vec<f64>>,
    pub colors: Vec<String>,
    pub row_normalize: bool,
}

fn hex_rgb(hex: &str) -> Rgb<u8> {
    let v = u32::from_str_radix(&hex[1..], 16).expect("palette entries are #rrggbb");
    Rgb([(v >> 16) as u8, (v >> 8) as u8, v as u8])
}

const HEAT_CELL: u32 = 16;
const ROLL_PX: u32 = 6;
/// Dark-blue (distance 0) to near-white (max distance) gradient endpoints.
const HEAT_NEAR: [f64; 3] = [8.0, 48.0, 107.0];
const HEAT_FAR: [f64; 3] = [247.0, 251.0, 255.0];

fn heat_color(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let mut px = [0u8; 3];
    for c in 0..3 {
        px[c] = (HEAT_NEAR[c] + (HEAT_FAR[c] - HEAT_NEAR[c]) * t).round() as u8;
    }
    Rgb(px)
}

fn render_heatmap(map: &StructureMap, row_normalize: bool, path: &Path) -> Result<()> {
    let m = map.matrix.len() as u32;
    let n = map.matrix[0].len() as u32;
    let global_max = map
        .matrix
        .iter()
        .flatten()
        .copied()
        .fold(0.0f64, f64::max);
    let mut img = RgbImage::new(n * HEAT_CELL, m * HEAT_CELL);
    for (row, dists) in map.matrix.iter().enumerate() {
        let scale = if row_normalize {
            dists.iter().copied().fold(0.0f64, f64::max)
        } else {
            global_max
        };
        for (col, &d) in dists.iter().enumerate() {
            let t = if scale > 0.0 { d / scale } else { 0.0 };
            let color = heat_color(t);
            for dy in 0..HEAT_CELL {
                for dx in 0..HEAT_CELL {
                    img.put_pixel(col as u32 * HEAT_CELL + dx, row as u32 * HEAT_CELL + dy, color);
                }
            }
        }
    }
    img.save(path).map_err(|e| Error::Evaluation(format!("{}: {e}", path.display())))
}

fn render_roll(
    chunks: &[PianoRollChunk],
    labels: &[i32],
    colors: &[String],
    path: &Path,
) -> Result<()> {
    let s = chunks[0].steps_per_bar;
    let (mut lo, mut hi) = (u8::MAX, u8::MIN);
    for c in chunks {
        for note in &c.notes {
            lo = lo.min(note.pitch);
            hi = hi.max(note.pitch);
        }
    }
    if lo > hi {
        (lo, hi) = (60, 72); // all-empty song: render an empty staff
    }
    let lo = lo.saturating_sub(2);
    let hi = hi.saturating_add(2).min(127);
    let n_pitches = (hi - lo + 1) as u32;
    let width = chunks.len() as u32 * s * ROLL_PX;
    let mut img = RgbImage::from_pixel(width, n_pitches * ROLL_PX, Rgb([255, 255, 255]));
    // Bar separators first, so notes draw over them.
    for bar in 1..chunks.len() as u32 {
        let x = bar * s * ROLL_PX;
        for y in 0..img.height() {
            img.put_pixel(x - 1, y, Rgb([221, 221, 221]));
        }
    }
    for (ci, chunk) in chunks.iter().enumerate() {
        let color = match labels[ci] {
            NOISE => hex_rgb(NOISE_COLOR),
            l => hex_rgb(&colors[l as usize]),
        };
        let bar_x = ci as u32 * s * ROLL_PX;
        for note in &chunk.notes {
            let x0 = bar_x + note.onset_step * ROLL_PX;
            let x1 = bar_x + (note.onset_step + note.duration_steps).min(s) * ROLL_PX;
            // Pitch axis points up: high notes at the top.
            let y0 = (hi - note.pitch) as u32 * ROLL_PX;
            for x in x0..x1 {
                for y in y0..y0 + ROLL_PX {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    img.save(path).map_err(|e| Error::Evaluation(format!("{}: {e}", path.display())))
}

/// Contact sheet for one view set: the original and each augmented view as
/// small piano rolls in a horizontal strip, one palette color per pane.
pub fn render_contact_sheet(set: &crate::augment::ViewSet, path: &Path) -> Result<()> {
    if set.views.is_empty() {
        return Err(Error::Domain(format!("view set {}: nothing to render", set.origin_id)));
    }
    let s = set.views[0].steps_per_bar;
    let (mut lo, mut hi) = (u8::MAX, u8::MIN);
    for view in &set.views {
        for note in &view.notes {
            lo = lo.min(note.pitch);
            hi = hi.max(note.pitch);
        }
    }
    let lo = lo.saturating_sub(2);
    let hi = hi.saturating_add(2).min(127);
    let n_pitches = (hi - lo + 1) as u32;
    let width = set.views.len() as u32 * s * ROLL_PX;
    let mut img = RgbImage::from_pixel(width, n_pitches * ROLL_PX, Rgb([255, 255, 255]));
    for pane in 1..set.views.len() as u32 {
        let x = pane * s * ROLL_PX;
        for y in 0..img.height() {
            img.put_pixel(x - 1, y, Rgb([221, 221, 221]));
        }
    }
    for (vi, view) in set.views.iter().enumerate() {
        let color = hex_rgb(PALETTE[vi % PALETTE.len()]);
        let pane_x = vi as u32 * s * ROLL_PX;
        for note in &view.notes {
            let x0 = pane_x + note.onset_step * ROLL_PX;
            let x1 = pane_x + (note.onset_step + note.duration_steps).min(s) * ROLL_PX;
            let y0 = (hi - note.pitch) as u32 * ROLL_PX;
            for x in x0..x1 {
                for y in y0..y0 + ROLL_PX {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    img.save(path).map_err(|e| Error::Evaluation(format!("{}: {e}", path.display())))
}

/// Write `heatmap.png`, `colored_roll.png` and `structure.json` under
/// `out_dir`. With an empty assignment only the sidecar is written.
/// `chunks` and `points` are parallel and already in bar order.
pub fn render_outputs(
    chunks: &[PianoRollChunk],
    points: &[Vec<f64>],
    assignment: &ClusterAssignment,
    row_normalize: bool,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if chunks.is_empty() || chunks.len() != points.len() || chunks.len() != assignment.labels.len()
    {
        return Err(Error::Domain(format!(
            "chunks ({}), embeddings ({}) and labels ({}) must align and be non-empty",
            chunks.len(),
            points.len(),
            assignment.labels.len()
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let map = if assignment.is_empty() {
        log::warn!("empty cluster assignment: writing the sidecar only");
        None
    } else {
        Some(structure_map(points, assignment)?)
    };

    if let Some(map) = &map {
        let heat = out_dir.join("heatmap.png");
        render_heatmap(map, row_normalize, &heat)?;
        written.push(heat);
        let roll = out_dir.join("colored_roll.png");
        render_roll(chunks, &assignment.labels, &map.colors, &roll)?;
        written.push(roll);
    }

    let sidecar = StructureSidecar {
        song_id: chunks[0].song_id.clone(),
        eps: assignment.eps,
        min_pts: assignment.min_pts,
        labels: assignment.labels.clone(),
        matrix: map.as_ref().map(|m| m.matrix.clone()).unwrap_or_default(),
        colors: map.as_ref().map(|m| m.colors.clone()).unwrap_or_default(),
        row_normalize,
    };
    let json_path = out_dir.join("structure.json");
    let mut body = serde_json::to_string_pretty(&sidecar)?;
    body.push('\n');
    std::fs::write(&json_path, body)?;
    written.push(json_path);
    Ok(written)
}
