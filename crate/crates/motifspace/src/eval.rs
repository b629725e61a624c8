//! Motif retrieval evaluation: embed a corpus, rank by Euclidean distance,
//! and report mean precision/recall over a K sweep with AUC-PR, for the
//! experiment suites (a)-(d).
//!
//! Relevance keys: view corpora use `origin:<origin_id>` (suite a), labeled
//! corpora use `motif:<song_id>:<motif_id>`. Items without a key stay in the
//! ranking pool as distractors but are never anchors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::ViewSet;
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::score::{ibpr_normalize, rasterize, MotifLabel, PianoRollChunk};
use crate::training::load_checkpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedItem {
    pub uid: String,
    /// Relevance key; `None` marks an unlabeled distractor.
    pub relevance: Option<String>,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedCorpus {
    pub items: Vec<EmbeddedItem>,
}

/// How to turn a chunk into a vector.
pub enum EmbedMode<'a> {
    Model(&'a Model),
    /// Interval-based relative representation: ibpr_normalize, rasterize,
    /// flatten to a 128*S vector.
    Ibpr,
    /// Uniform random vectors; the floor any trained model must beat.
    Random { seed: u64, dim: usize },
}

fn embed_seq<'a, I>(items: I, mode: &EmbedMode) -> Result<EmbeddedCorpus>
where
    I: Iterator<Item = (String, Option<String>, &'a PianoRollChunk)>,
{
    let mut rng = match mode {
        EmbedMode::Random { seed, .. } => Some(Stream::new(*seed, "eval/random")),
        _ => None,
    };
    let mut out = Vec::new();
    for (uid, relevance, chunk) in items {
        let vector = match mode {
            EmbedMode::Model(model) => model.encode_forward(chunk)?.0.to_vec(),
            EmbedMode::Ibpr => rasterize(&ibpr_normalize(chunk)?).iter().copied().collect(),
            EmbedMode::Random { dim, .. } => {
                let rng = rng.as_mut().unwrap();
                (0..*dim).map(|_| rng.f64()).collect()
            }
        };
        out.push(EmbeddedItem { uid, relevance, vector });
    }
    if let Some(first) = out.first() {
        let d = first.vector.len();
        if let Some(bad) = out.iter().find(|i| i.vector.len() != d) {
            return Err(Error::Evaluation(format!(
                "embedding length mismatch: {} has {} values, expected {d}",
                bad.uid,
                bad.vector.len()
            )));
        }
    }
    Ok(EmbeddedCorpus { items: out })
}

/// Embed every view of every set; relevance = shared origin.
pub fn embed_view_corpus(sets: &[ViewSet], mode: &EmbedMode) -> Result<EmbeddedCorpus> {
    embed_seq(
        sets.iter().flat_map(|set| {
            set.views.iter().enumerate().map(move |(k, v)| {
                (format!("{}#{k}", set.origin_id), Some(format!("origin:{}", set.origin_id)), v)
            })
        }),
        mode,
    )
}

/// Embed labeled chunks; relevance = shared (song, motif). Chunks without
/// a label become unlabeled distractors.
pub fn embed_labeled_corpus(
    chunks: &[PianoRollChunk],
    labels: &[MotifLabel],
    mode: &EmbedMode,
) -> Result<EmbeddedCorpus> {
    let mut by_bar: BTreeMap<(&str, u32), u8> = BTreeMap::new();
    for l in labels {
        by_bar.entry((l.song_id.as_str(), l.bar_index)).or_insert(l.motif_id);
    }
    embed_seq(
        chunks.iter().map(|c| {
            let key = by_bar
                .get(&(c.song_id.as_str(), c.bar_index))
                .map(|m| format!("motif:{}:{m}", c.song_id));
            (c.origin_id.clone(), key, c)
        }),
        mode,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub k_values: Vec<usize>,
    pub mean_precision: Vec<f64>,
    pub mean_recall: Vec<f64>,
    pub auc_pr: f64,
    pub n_anchors: usize,
    /// True when every embedding is identical, so ranking is pure tie-break.
    pub degenerate: bool,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Rank every other item per anchor and average precision/recall at each K.
/// `k_values = None` sweeps 1..=max relevant-set size. AUC-PR is the
/// trapezoid area under the (mean recall, mean precision) polyline, extended
/// horizontally from its first point to recall 0.
pub fn retrieval_pr(
    corpus: &EmbeddedCorpus,
    k_values: Option<&[usize]>,
) -> Result<RetrievalReport> {
    let items = &corpus.items;
    if items.len() < 2 {
        return Err(Error::Evaluation(format!(
            "retrieval needs at least 2 items, got {}",
            items.len()
        )));
    }
    let mut class_sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for item in items {
        if let Some(key) = &item.relevance {
            *class_sizes.entry(key).or_insert(0) += 1;
        }
    }
    let relevant_count = |item: &EmbeddedItem| -> usize {
        item.relevance.as_ref().map_or(0, |k| class_sizes[k.as_str()] - 1)
    };
    let anchors: Vec<usize> = (0..items.len()).filter(|&i| relevant_count(&items[i]) > 0).collect();
    if anchors.is_empty() {
        return Err(Error::Evaluation(
            "no item has a relevant partner; nothing to retrieve".into(),
        ));
    }

    let ks: Vec<usize> = match k_values {
        Some(ks) => {
            if ks.is_empty() || ks.contains(&0) {
                return Err(Error::Evaluation("K values must be positive".into()));
            }
            let mut ks = ks.to_vec();
            ks.sort_unstable();
            ks.dedup();
            ks
        }
        None => {
            let max_rel = anchors.iter().map(|&i| relevant_count(&items[i])).max().unwrap();
            (1..=max_rel).collect()
        }
    };

    let mut precision_sums = vec![0.0; ks.len()];
    let mut recall_sums = vec![0.0; ks.len()];
    for &a in &anchors {
        let key = items[a].relevance.as_deref();
        let mut ranked: Vec<(f64, usize)> = (0..items.len())
            .filter(|&j| j != a)
            .map(|j| (euclidean(&items[a].vector, &items[j].vector), j))
            .collect();
        ranked.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let total_relevant = relevant_count(&items[a]);
        let mut hits_at = vec![0usize; ranked.len() + 1];
        for (pos, &(_, j)) in ranked.iter().enumerate() {
            let hit = items[j].relevance.as_deref() == key;
            hits_at[pos + 1] = hits_at[pos] + hit as usize;
        }
        for (ki, &k) in ks.iter().enumerate() {
            let hits = hits_at[k.min(ranked.len())] as f64;
            precision_sums[ki] += hits / k as f64;
            recall_sums[ki] += hits / total_relevant as f64;
        }
    }
    let n = anchors.len() as f64;
    let mean_precision: Vec<f64> = precision_sums.iter().map(|s| s / n).collect();
    let mean_recall: Vec<f64> = recall_sums.iter().map(|s| s / n).collect();

    let mut auc = mean_recall[0] * mean_precision[0];
    for i in 1..ks.len() {
        auc += (mean_recall[i] - mean_recall[i - 1])
            * 0.5
            * (mean_precision[i] + mean_precision[i - 1]);
    }

    let degenerate = items.iter().all(|i| i.vector == items[0].vector);
    Ok(RetrievalReport {
        k_values: ks,
        mean_precision,
        mean_recall,
        auc_pr: auc,
        n_anchors: anchors.len(),
        degenerate,
    })
}

/// Mean over dimensions of the (unbiased) per-dimension std. The collapse
/// diagnostic used by the training contrast checks.
pub fn mean_dim_std(vectors: &[Vec<f64>]) -> f64 {
    let n = vectors.len();
    if n < 2 {
        return 0.0;
    }
    let d = vectors[0].len();
    let mut total = 0.0;
    for j in 0..d {
        let mean = vectors.iter().map(|v| v[j]).sum::<f64>() / n as f64;
        let var =
            vectors.iter().map(|v| (v[j] - mean) * (v[j] - mean)).sum::<f64>() / (n - 1) as f64;
        total += var.sqrt();
    }
    total / d as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    A,
    B,
    C,
    D,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Suite::A),
            "b" => Ok(Suite::B),
            "c" => Ok(Suite::C),
            "d" => Ok(Suite::D),
            other => Err(Error::Config(format!("unknown suite {other:?} (expected a, b, c or d)"))),
        }
    }
}

impl Suite {
    pub fn as_str(self) -> &'static str {
        match self {
            Suite::A => "a",
            Suite::B => "b",
            Suite::C => "c",
            Suite::D => "d",
        }
    }
}

#[derive(Debug, Clone)]
pub enum MethodSource {
    Checkpoint(PathBuf),
    Ibpr,
    Random { seed: u64, dim: usize },
}

#[derive(Debug, Clone)]
pub struct SuiteMethod {
    pub name: String,
    pub source: MethodSource,
}

/// Evaluation data; which field is required depends on the suite.
#[derive(Default)]
pub struct SuiteData<'a> {
    pub views: Option<&'a [ViewSet]>,
    pub labeled: Option<(&'a [PianoRollChunk], &'a [MotifLabel])>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub name: String,
    pub report: RetrievalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub methods: Vec<MethodReport>,
}

/// One retrieval report per method over the suite's corpus. All reports
/// share the K grid because the grid depends only on the relevance
/// structure, which is common across methods.
pub fn run_experiment_suite(
    suite: Suite,
    methods: &[SuiteMethod],
    data: &SuiteData,
) -> Result<SuiteReport> {
    if methods.is_empty() {
        return Err(Error::Config("no evaluation methods given".into()));
    }
    enum Prepared<'a> {
        Views(&'a [ViewSet]),
        Labeled(&'a [PianoRollChunk], &'a [MotifLabel]),
    }
    let prepared = match suite {
        Suite::A => Prepared::Views(data.views.ok_or_else(|| {
            Error::MissingArtifact(
                "suite a needs a view corpus; build one with augment-preview first".into(),
            )
        })?),
        _ => {
            let (chunks, labels) = data.labeled.ok_or_else(|| {
                Error::MissingArtifact(format!(
                    "suite {} needs a labeled dataset; ingest labeled data first",
                    suite.as_str()
                ))
            })?;
            Prepared::Labeled(chunks, labels)
        }
    };

    let mut out = Vec::with_capacity(methods.len());
    for method in methods {
        let loaded;
        let mode = match &method.source {
            MethodSource::Checkpoint(path) => {
                loaded = load_checkpoint(path)?;
                EmbedMode::Model(&loaded.model)
            }
            MethodSource::Ibpr => EmbedMode::Ibpr,
            MethodSource::Random { seed, dim } => EmbedMode::Random { seed: *seed, dim: *dim },
        };
        let corpus = match prepared {
            Prepared::Views(sets) => embed_view_corpus(sets, &mode)?,
            Prepared::Labeled(chunks, labels) => embed_labeled_corpus(chunks, labels, &mode)?,
        };
        let report = retrieval_pr(&corpus, None)?;
        out.push(MethodReport { name: method.name.clone(), report });
    }
    Ok(SuiteReport { suite, methods: out })
}

fn file_slug(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '-' }).collect()
}

/// Write `report.json`, one `curves_<method>.csv` per method, and a
/// combined `pr_curves.svg`. Returns the paths written.
pub fn write_suite_report(dir: &Path, report: &SuiteReport) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let json_path = dir.join("report.json");
    let mut body = serde_json::to_string_pretty(report)?;
    body.push('\n');
    std::fs::write(&json_path, body)?;
    written.push(json_path);

    for method in &report.methods {
        let path = dir.join(format!("curves_{}.csv", file_slug(&method.name)));
        let mut csv = String::from("K,mean_precision,mean_recall\n");
        let r = &method.report;
        for i in 0..r.k_values.len() {
            csv.push_str(&format!(
                "{},{},{}\n",
                r.k_values[i], r.mean_precision[i], r.mean_recall[i]
            ));
        }
        std::fs::write(&path, csv)?;
        written.push(path);
    }

    let svg_path = dir.join("pr_curves.svg");
    plot_pr_curves(&svg_path, report)?;
    written.push(svg_path);
    Ok(written)
}

const PLOT_COLORS: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

pub fn plot_pr_curves(path: &Path, report: &SuiteReport) -> Result<()> {
    let plot_err = |e: String| Error::Evaluation(format!("pr plot: {e}"));
    let root = SVGBackend::new(path, (720, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
    let caption = format!("Retrieval PR by K (suite {})", report.suite.as_str());
    let mut chart = ChartBuilder::on(&root)
        .caption(caption, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(48)
        .build_cartesian_2d(0.0..1.0f64, 0.0..1.05f64)
        .map_err(|e| plot_err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("mean recall")
        .y_desc("mean precision")
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    for (i, method) in report.methods.iter().enumerate() {
        let color = PLOT_COLORS[i % PLOT_COLORS.len()];
        let r = &method.report;
        let points: Vec<(f64, f64)> =
            r.mean_recall.iter().copied().zip(r.mean_precision.iter().copied()).collect();
        chart
            .draw_series(LineSeries::new(points, color.stroke_width(2)))
            .map_err(|e| plot_err(e.to_string()))?
            .label(format!("{} (auc {:.3})", method.name, r.auc_pr))
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2))
            });
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.85))
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    root.present().map_err(|e| plot_err(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::ChunkNote;
    use crate::synth::{synth_chunk, synth_origins, SynthOriginsConfig};

    fn item(uid: &str, key: Option<&str>, v: &[f64]) -> EmbeddedItem {
        EmbeddedItem {
            uid: uid.into(),
            relevance: key.map(str::to_string),
            vector: v.to_vec(),
        }
    }

    #[test]
    fn ibpr_is_transposition_invariant() {
        let chunk = synth_chunk("ib", 0, 8, &mut Stream::new(11, "ib"));
        let mut moved = chunk.clone();
        for n in &mut moved.notes {
            n.pitch += 7;
        }
        let sets = [
            ViewSet { origin_id: "o".into(), views: vec![chunk] },
            ViewSet { origin_id: "t".into(), views: vec![moved] },
        ];
        let corpus = embed_view_corpus(&sets, &EmbedMode::Ibpr).unwrap();
        assert_eq!(corpus.items[0].vector, corpus.items[1].vector);
    }

    #[test]
    fn model_mode_is_deterministic_per_chunk() {
        let model = Model::init(
            crate::encoder::EncoderConfig {
                n_layers: 1,
                model_dim: 8,
                n_heads: 2,
                ffn_dim: 12,
                embed_dim: 4,
                pooling: crate::encoder::Pooling::Mean,
                steps_per_bar: 8,
            },
            crate::encoder::ExpanderConfig { hidden_dims: vec![6], out_dim: 6 },
            3,
        )
        .unwrap();
        let chunk = synth_chunk("mm", 0, 8, &mut Stream::new(4, "mm"));
        let sets = [ViewSet { origin_id: "o".into(), views: vec![chunk.clone(), chunk] }];
        let corpus = embed_view_corpus(&sets, &EmbedMode::Model(&model)).unwrap();
        assert_eq!(corpus.items.len(), 2);
        assert_eq!(corpus.items[0].vector, corpus.items[1].vector);
        assert_eq!(corpus.items[0].uid, "o#0");
    }

    #[test]
    fn labeled_corpus_keys_and_distractors() {
        let mut chunks = synth_origins(&SynthOriginsConfig {
            n_origins: 3,
            bars_per_song: 1,
            steps_per_bar: 8,
            song_prefix: "s".into(),
            seed: 2,
        });
        for (i, c) in chunks.iter_mut().enumerate() {
            c.song_id = "song".into();
            c.bar_index = i as u32;
        }
        let labels = vec![
            MotifLabel { song_id: "song".into(), bar_index: 0, motif_id: 60 },
            MotifLabel { song_id: "song".into(), bar_index: 2, motif_id: 60 },
        ];
        let corpus =
            embed_labeled_corpus(&chunks, &labels, &EmbedMode::Random { seed: 1, dim: 4 }).unwrap();
        assert_eq!(corpus.items[0].relevance.as_deref(), Some("motif:song:60"));
        assert_eq!(corpus.items[1].relevance, None);
        assert_eq!(corpus.items[2].relevance.as_deref(), Some("motif:song:60"));
    }

    #[test]
    fn worked_four_item_example() {
        // A relevant only to B; distances A->B 0.1, A->C 0.2, A->D 0.3.
        let corpus = EmbeddedCorpus {
            items: vec![
                item("a", Some("x"), &[0.0]),
                item("b", Some("x"), &[0.1]),
                item("c", None, &[0.2]),
                item("d", None, &[0.3]),
            ],
        };
        let r = retrieval_pr(&corpus, Some(&[1, 2])).unwrap();
        assert_eq!(r.n_anchors, 2);
        assert_eq!(r.mean_precision, vec![1.0, 0.5]);
        assert_eq!(r.mean_recall, vec![1.0, 1.0]);
    }

    #[test]
    fn mutually_relevant_items_score_perfect_precision() {
        let corpus = EmbeddedCorpus {
            items: (0..5)
                .map(|i| item(&format!("i{i}"), Some("m"), &[i as f64, 0.5 * i as f64]))
                .collect(),
        };
        let r = retrieval_pr(&corpus, None).unwrap();
        assert_eq!(r.k_values, vec![1, 2, 3, 4]);
        for (&p, &rec) in r.mean_precision.iter().zip(&r.mean_recall) {
            assert_eq!(p, 1.0);
            assert!(rec <= 1.0);
        }
        assert_eq!(*r.mean_recall.last().unwrap(), 1.0);
        assert!((r.auc_pr - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_embeddings_flag_degeneracy_and_rank_by_index() {
        let corpus = EmbeddedCorpus {
            items: vec![
                item("a", Some("x"), &[1.0, 1.0]),
                item("b", None, &[1.0, 1.0]),
                item("c", Some("x"), &[1.0, 1.0]),
            ],
        };
        let r = retrieval_pr(&corpus, Some(&[1])).unwrap();
        assert!(r.degenerate);
        // Anchor a ranks b first (lower index), anchor c ranks a first.
        assert_eq!(r.mean_precision, vec![0.5]);
    }

    #[test]
    fn no_anchor_corpus_is_an_error() {
        let corpus = EmbeddedCorpus {
            items: vec![item("a", Some("x"), &[0.0]), item("b", Some("y"), &[1.0])],
        };
        assert!(matches!(retrieval_pr(&corpus, None), Err(Error::Evaluation(_))));
    }

    #[test]
    fn recall_is_monotone_and_counts_are_integral() {
        let mut stream = Stream::new(33, "eval/prop");
        for _ in 0..40 {
            let n = 3 + stream.below(10);
            let keys = ["p", "q", "r"];
            let items: Vec<EmbeddedItem> = (0..n)
                .map(|i| {
                    let key = if stream.f64() < 0.2 {
                        None
                    } else {
                        Some(keys[stream.below(3)])
                    };
                    let v: Vec<f64> = (0..3).map(|_| stream.f64()).collect();
                    item(&format!("i{i}"), key, &v)
                })
                .collect();
            let corpus = EmbeddedCorpus { items };
            let Ok(r) = retrieval_pr(&corpus, None) else { continue };
            for w in r.mean_recall.windows(2) {
                assert!(w[1] >= w[0] - 1e-12);
            }
            assert!(r.auc_pr >= 0.0 && r.auc_pr <= 1.0 + 1e-12);
            for (ki, &k) in r.k_values.iter().enumerate() {
                let count = r.mean_precision[ki] * k as f64 * r.n_anchors as f64;
                assert!((count - count.round()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn report_is_invariant_under_isometry() {
        let items = vec![
            item("a", Some("x"), &[0.0, 0.0]),
            item("b", Some("x"), &[0.4, 0.1]),
            item("c", Some("y"), &[1.0, 0.2]),
            item("d", Some("y"), &[1.1, 0.9]),
            item("e", None, &[0.6, 0.6]),
        ];
        let rotated: Vec<EmbeddedItem> = items
            .iter()
            .map(|i| {
                let (x, y) = (i.vector[0], i.vector[1]);
                EmbeddedItem {
                    uid: i.uid.clone(),
                    relevance: i.relevance.clone(),
                    vector: vec![-y + 3.0, x - 1.5],
                }
            })
            .collect();
        let a = retrieval_pr(&EmbeddedCorpus { items }, None).unwrap();
        let b = retrieval_pr(&EmbeddedCorpus { items: rotated }, None).unwrap();
        assert_eq!(a.k_values, b.k_values);
        for i in 0..a.k_values.len() {
            assert!((a.mean_precision[i] - b.mean_precision[i]).abs() < 1e-12);
            assert!((a.mean_recall[i] - b.mean_recall[i]).abs() < 1e-12);
        }
        assert!((a.auc_pr - b.auc_pr).abs() < 1e-12);
    }

    fn tiny_views() -> Vec<ViewSet> {
        let chunks = synth_origins(&SynthOriginsConfig {
            n_origins: 4,
            bars_per_song: 1,
            steps_per_bar: 8,
            song_prefix: "sv".into(),
            seed: 6,
        });
        let cfg = crate::augment::AugmentConfig { seed: 6, ..Default::default() };
        chunks.iter().map(|c| crate::augment::make_views(c, &cfg).unwrap()).collect()
    }

    #[test]
    fn suite_a_single_method_and_missing_artifacts() {
        let views = tiny_views();
        let methods =
            [SuiteMethod { name: "random".into(), source: MethodSource::Random { seed: 1, dim: 8 } }];
        let report = run_experiment_suite(
            Suite::A,
            &methods,
            &SuiteData { views: Some(&views), labeled: None },
        )
        .unwrap();
        assert_eq!(report.methods.len(), 1);

        let err = run_experiment_suite(Suite::A, &methods, &SuiteData::default()).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
        let err = run_experiment_suite(Suite::D, &methods, &SuiteData::default()).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
        let err = run_experiment_suite(
            Suite::B,
            &[SuiteMethod {
                name: "model".into(),
                source: MethodSource::Checkpoint("/nonexistent/ck.bin".into()),
            }],
            &SuiteData { views: None, labeled: Some((&[], &[])) },
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }

    #[test]
    fn suite_reports_share_the_k_grid_and_serialize() {
        let dir = tempfile::tempdir().unwrap();
        let views = tiny_views();
        let methods = [
            SuiteMethod { name: "random".into(), source: MethodSource::Random { seed: 1, dim: 8 } },
            SuiteMethod { name: "ibpr".into(), source: MethodSource::Ibpr },
        ];
        let report = run_experiment_suite(
            Suite::A,
            &methods,
            &SuiteData { views: Some(&views), labeled: None },
        )
        .unwrap();
        assert_eq!(report.methods[0].report.k_values, report.methods[1].report.k_values);

        let written = write_suite_report(dir.path(), &report).unwrap();
        assert_eq!(written.len(), 4);
        let body = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        let parsed: SuiteReport = serde_json::from_str(&body).unwrap();
        assert_eq!(parsed, report);
        let csv = std::fs::read_to_string(dir.path().join("curves_ibpr.csv")).unwrap();
        assert!(csv.starts_with("K,mean_precision,mean_recall\n"));
        assert!(dir.path().join("pr_curves.svg").exists());
    }

    #[test]
    fn mean_dim_std_matches_hand_computation() {
        let vs = vec![vec![0.0, 1.0], vec![2.0, 1.0], vec![4.0, 1.0]];
        // dim 0: sample var 4 -> std 2; dim 1: std 0. Mean = 1.
        assert!((mean_dim_std(&vs) - 1.0).abs() < 1e-12);
        assert_eq!(mean_dim_std(&vs[..1]), 0.0);
    }

    #[test]
    fn ibpr_empty_chunk_is_rejected() {
        let chunk = PianoRollChunk {
            song_id: "e".into(),
            bar_index: 0,
            steps_per_bar: 8,
            notes: Vec::<ChunkNote>::new(),
            origin_id: "e:0".into(),
        };
        let sets = [ViewSet { origin_id: "e".into(), views: vec![chunk] }];
        assert!(embed_view_corpus(&sets, &EmbedMode::Ibpr).is_err());
    }
}
