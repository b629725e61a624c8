//! Scratch calibration runs; all ignored. Not part of the suite.

use motifspace::augment::{make_views, AugmentConfig, ViewSet};
use motifspace::encoder::{encode, EncoderConfig, ExpanderConfig, Model, Pooling};
use motifspace::eval::{
    embed_labeled_corpus, embed_view_corpus, mean_dim_std, retrieval_pr, EmbedMode, EmbeddedCorpus,
    EmbeddedItem,
};
use motifspace::losses::{TripletConfig, VicregConfig};
use motifspace::score::PianoRollChunk;
use motifspace::synth::{synth_benchmark, synth_origins, BenchmarkConfig, SynthOriginsConfig};
use motifspace::training::{run_training, Method, Stage, TrainConfig, TrainData, TrainJob};

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        n_layers: 1,
        model_dim: 32,
        n_heads: 4,
        ffn_dim: 64,
        embed_dim: 16,
        pooling: Pooling::Mean,
        steps_per_bar: 16,
    }
}

fn tiny_expander() -> ExpanderConfig {
    ExpanderConfig { hidden_dims: vec![32], out_dim: 32 }
}

fn views_fixture(n: usize, aug: &AugmentConfig, seed: u64) -> Vec<ViewSet> {
    let origins = synth_origins(&SynthOriginsConfig { n_origins: n, seed, ..Default::default() });
    origins.iter().map(|c| make_views(c, aug).unwrap()).collect()
}

fn origin_std(model: &Model, sets: &[ViewSet]) -> f64 {
    let vecs: Vec<Vec<f64>> =
        sets.iter().map(|s| encode(&s.views[0], model).unwrap().values).collect();
    mean_dim_std(&vecs)
}

#[test]
#[ignore]
fn calib_collapse() {
    let aug = AugmentConfig { seed: 7, ..Default::default() };
    let sets = views_fixture(50, &aug, 7);
    for lr in [3e-3, 1e-2, 3e-2] {
        for beta in [0.0, 25.0] {
            let t0 = std::time::Instant::now();
            let job = TrainJob {
                data: TrainData::Views(&sets),
                encoder: tiny_encoder(),
                expander: tiny_expander(),
                vicreg: VicregConfig { beta, ..Default::default() },
                triplet: TripletConfig::default(),
                train: TrainConfig {
                    learning_rate: Some(lr),
                    batch_size: 32,
                    max_steps: 500,
                    seed: 11,
                    ..Default::default()
                },
            };
            let out = run_training(&job).unwrap();
            println!(
                "lr={lr:>6} beta={beta:>4}  std={:.5}  ({:.1}s)",
                origin_std(&out.model, &sets),
                t0.elapsed().as_secs_f64()
            );
        }
    }
}

#[test]
#[ignore]
fn calib_baselines() {
    let configs = [
        ("default", AugmentConfig { seed: 3, ..Default::default() }),
        (
            "hard",
            AugmentConfig {
                dropout_p: 0.3,
                shift_p: 0.4,
                seed: 3,
                ..Default::default()
            },
        ),
    ];
    for (name, aug) in &configs {
        let sets = views_fixture(500, aug, 3);
        let t0 = std::time::Instant::now();
        let ibpr = retrieval_pr(&embed_view_corpus(&sets, &EmbedMode::Ibpr).unwrap(), None)
            .unwrap()
            .auc_pr;
        let rand = retrieval_pr(
            &embed_view_corpus(&sets, &EmbedMode::Random { seed: 5, dim: 16 }).unwrap(),
            None,
        )
        .unwrap()
        .auc_pr;
        println!("{name:>8}  ibpr={ibpr:.4}  random={rand:.4}  ({:.1}s)", t0.elapsed().as_secs_f64());
    }
}

fn hard_aug(transpose: i64) -> AugmentConfig {
    AugmentConfig {
        transpose_range: (-transpose, transpose),
        dropout_p: 0.3,
        shift_p: 0.4,
        seed: 3,
        ..Default::default()
    }
}

#[test]
#[ignore]
fn calib_baseline_t1() {
    let sets = views_fixture(500, &hard_aug(1), 3);
    let ibpr = retrieval_pr(&embed_view_corpus(&sets, &EmbedMode::Ibpr).unwrap(), None)
        .unwrap()
        .auc_pr;
    println!("t1 ibpr={ibpr:.4}");
}

/// Ceiling probe: retrieval quality of a handcrafted chunk descriptor.
fn handcrafted(c: &PianoRollChunk) -> Vec<f64> {
    let n = c.notes.len().max(1) as f64;
    let mean_pitch = c.notes.iter().map(|x| x.pitch as f64).sum::<f64>() / n;
    let var_pitch =
        c.notes.iter().map(|x| (x.pitch as f64 - mean_pitch).powi(2)).sum::<f64>() / n;
    let mut pc = vec![0.0; 12];
    for note in &c.notes {
        pc[note.pitch as usize % 12] += 1.0 / n;
    }
    let mut onset = vec![0.0; 4];
    for note in &c.notes {
        onset[(note.onset_step * 4 / c.steps_per_bar).min(3) as usize] += 1.0 / n;
    }
    let mean_dur = c.notes.iter().map(|x| x.duration_steps as f64).sum::<f64>() / n;
    let mut v = vec![mean_pitch / 12.0, var_pitch.sqrt() / 6.0, n / 4.0, mean_dur / 2.0];
    v.extend(pc.iter().map(|x| x * 3.0));
    v.extend(onset.iter().map(|x| x * 3.0));
    v
}

/// Origins laid out on a pattern x register grid: `n_patterns` rhythmic
/// shapes, each planted at `n_roots` roots spaced 3 semitones apart. Pitch
/// normalization aliases every root of a pattern into one class.
fn pattern_origins(n_patterns: usize, n_roots: usize, seed: u64) -> Vec<PianoRollChunk> {
    use motifspace::score::ChunkNote;
    let mut stream = motifspace::rng::Stream::new(seed, "acceptance/patterns");
    let s = 16u32;
    let patterns: Vec<Vec<(u32, u32, u8)>> = (0..n_patterns)
        .map(|_| {
            let n_notes = 4 + stream.below(5);
            let mut onsets = stream.sample_indices(s as usize, n_notes);
            onsets.sort_unstable();
            onsets
                .into_iter()
                .map(|onset| {
                    let onset = onset as u32;
                    let dur = 1 + stream.below(((s - onset).min(3)) as usize) as u32;
                    let interval = stream.below(13) as u8;
                    (onset, dur, interval)
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(n_patterns * n_roots);
    for (b, pat) in patterns.iter().enumerate() {
        for r in 0..n_roots {
            let root = 24 + 3 * r as u8;
            let song_id = format!("pat{b:02}");
            let mut notes: Vec<ChunkNote> = pat
                .iter()
                .map(|&(onset, dur, interval)| ChunkNote {
                    onset_step: onset,
                    duration_steps: dur,
                    pitch: root + interval,
                })
                .collect();
            notes.sort_by_key(|n| (n.onset_step, n.pitch, n.duration_steps));
            notes.dedup();
            out.push(PianoRollChunk {
                song_id: song_id.clone(),
                bar_index: r as u32,
                steps_per_bar: s,
                notes,
                origin_id: format!("{song_id}:{r}"),
            });
        }
    }
    out
}

fn soft_aug() -> AugmentConfig {
    AugmentConfig {
        transpose_range: (-1, 1),
        dropout_p: 0.15,
        shift_p: 0.25,
        seed: 3,
        ..Default::default()
    }
}

#[test]
#[ignore]
fn calib_pattern_fixture() {
    for (aug_name, aug) in [("hard", hard_aug(1)), ("soft", soft_aug())] {
        let origins = pattern_origins(20, 25, 3);
        let sets: Vec<ViewSet> = origins.iter().map(|c| make_views(c, &aug).unwrap()).collect();

        let ibpr = retrieval_pr(&embed_view_corpus(&sets, &EmbedMode::Ibpr).unwrap(), None)
            .unwrap()
            .auc_pr;
        let random = retrieval_pr(
            &embed_view_corpus(&sets, &EmbedMode::Random { dim: 16, seed: 0 }).unwrap(),
            None,
        )
        .unwrap()
        .auc_pr;
        println!("{aug_name}: ibpr={ibpr:.4} random={random:.4}");

        struct Case {
            name: &'static str,
            steps: u64,
            lr: f64,
            hidden: Vec<usize>,
            pooling: Pooling,
        }
        let cases = vec![
            Case { name: "untrained", steps: 0, lr: 1e-3, hidden: vec![], pooling: Pooling::Mean },
            Case { name: "lin64 1e-4", steps: 2000, lr: 1e-4, hidden: vec![], pooling: Pooling::Mean },
            Case { name: "lin64 3e-4", steps: 2000, lr: 3e-4, hidden: vec![], pooling: Pooling::Mean },
            Case { name: "lin64 1e-3", steps: 2000, lr: 1e-3, hidden: vec![], pooling: Pooling::Mean },
            Case { name: "mlp64 3e-4", steps: 2000, lr: 3e-4, hidden: vec![64], pooling: Pooling::Mean },
            Case { name: "max  3e-4", steps: 2000, lr: 3e-4, hidden: vec![], pooling: Pooling::Max },
        ];
        for case in cases {
            let t0 = std::time::Instant::now();
            let job = TrainJob {
                data: TrainData::Views(&sets),
                encoder: EncoderConfig { pooling: case.pooling, ..tiny_encoder() },
                expander: ExpanderConfig { hidden_dims: case.hidden.clone(), out_dim: 64 },
                vicreg: VicregConfig::default(),
                triplet: TripletConfig::default(),
                train: TrainConfig {
                    learning_rate: Some(case.lr),
                    batch_size: 128,
                    max_steps: case.steps,
                    seed: 0,
                    ..Default::default()
                },
            };
            let out = run_training(&job).unwrap();
            let auc = retrieval_pr(
                &embed_view_corpus(&sets, &EmbedMode::Model(&out.model)).unwrap(),
                None,
            )
            .unwrap()
            .auc_pr;
            println!("{aug_name} {}: auc={auc:.4} ({:.0}s)", case.name, t0.elapsed().as_secs_f64());
        }
    }
}

#[test]
#[ignore]
fn calib_ceiling() {
    for transpose in [1, 12] {
        let sets = views_fixture(500, &hard_aug(transpose), 3);
        let items = sets
            .iter()
            .flat_map(|set| {
                set.views.iter().enumerate().map(|(k, view)| EmbeddedItem {
                    uid: format!("{}#{k}", set.origin_id),
                    relevance: Some(format!("origin:{}", set.origin_id)),
                    vector: handcrafted(view),
                })
            })
            .collect();
        let auc = retrieval_pr(&EmbeddedCorpus { items }, None).unwrap().auc_pr;
        println!("t{transpose} handcrafted auc={auc:.4}");
    }
}

#[test]
#[ignore]
fn calib_vicreg_auc() {
    struct Case {
        name: &'static str,
        transpose: i64,
        enc: EncoderConfig,
        hidden: Vec<usize>,
        out_dim: usize,
        lr: f64,
        batch: usize,
    }
    let mid_encoder = EncoderConfig {
        n_layers: 2,
        model_dim: 64,
        n_heads: 4,
        ffn_dim: 128,
        embed_dim: 32,
        pooling: Pooling::Mean,
        steps_per_bar: 16,
    };
    let cases = vec![
        Case { name: "t1 lin64 3e-3", transpose: 1, enc: tiny_encoder(), hidden: vec![], out_dim: 64, lr: 3e-3, batch: 128 },
        Case { name: "t1 lin64 1e-3", transpose: 1, enc: tiny_encoder(), hidden: vec![], out_dim: 64, lr: 1e-3, batch: 128 },
        Case { name: "t1 mlp64 3e-3", transpose: 1, enc: tiny_encoder(), hidden: vec![64], out_dim: 64, lr: 3e-3, batch: 128 },
        Case { name: "t12 lin64 3e-3", transpose: 12, enc: tiny_encoder(), hidden: vec![], out_dim: 64, lr: 3e-3, batch: 128 },
        Case { name: "t1 mid lin128", transpose: 1, enc: mid_encoder.clone(), hidden: vec![], out_dim: 128, lr: 1e-3, batch: 128 },
    ];
    for case in cases {
        let sets = views_fixture(500, &hard_aug(case.transpose), 3);
        let t0 = std::time::Instant::now();
        let job = TrainJob {
            data: TrainData::Views(&sets),
            encoder: case.enc.clone(),
            expander: ExpanderConfig { hidden_dims: case.hidden.clone(), out_dim: case.out_dim },
            vicreg: VicregConfig::default(),
            triplet: TripletConfig::default(),
            train: TrainConfig {
                learning_rate: Some(case.lr),
                batch_size: case.batch,
                max_steps: 2000,
                seed: 0,
                ..Default::default()
            },
        };
        let out = run_training(&job).unwrap();
        let m = out.history.last().unwrap();
        let auc =
            retrieval_pr(&embed_view_corpus(&sets, &EmbedMode::Model(&out.model)).unwrap(), None)
                .unwrap()
                .auc_pr;
        println!(
            "{:>14}: auc={auc:.4} inv={:.3} var={:.3} cov={:.3} ({:.0}s)",
            case.name,
            m.loss_inv,
            m.loss_var,
            m.loss_cov,
            t0.elapsed().as_secs_f64()
        );
    }
}

fn bench_views(chunks: &[PianoRollChunk], aug: &AugmentConfig) -> Vec<ViewSet> {
    chunks.iter().map(|c| make_views(c, aug).unwrap()).collect()
}

struct PipeCase {
    name: &'static str,
    bench: BenchmarkConfig,
    /// Re-generate the benchmark per training seed (bench seed += seed).
    bench_per_seed: bool,
    aug: AugmentConfig,
    pre_lr: f64,
    pre_batch: usize,
    pre_steps: u64,
    out_dim: usize,
    ft_steps: u64,
}

fn dense_bench() -> BenchmarkConfig {
    BenchmarkConfig {
        motifs_per_song: 3,
        occurrences_range: (6, 10),
        distractors_per_song: 4,
        shared_pool: 3,
        share_p: 0.6,
        seed: 13,
        ..Default::default()
    }
}

fn matched_aug() -> AugmentConfig {
    AugmentConfig {
        transpose_range: (-2, 2),
        dropout_p: 0.1,
        shift_p: 0.2,
        duration_factor_range: (0.75, 1.5),
        seed: 13,
        ..Default::default()
    }
}

fn run_pipe_case(case: &PipeCase) {
    let bench = synth_benchmark(&case.bench).unwrap();
    let (train, eval) = bench.split();
    let views = bench_views(&train.chunks, &case.aug);

    let ibpr = retrieval_pr(
        &embed_labeled_corpus(&eval.chunks, &eval.labels, &EmbedMode::Ibpr).unwrap(),
        None,
    )
    .unwrap()
    .auc_pr;
    let random = retrieval_pr(
        &embed_labeled_corpus(&eval.chunks, &eval.labels, &EmbedMode::Random { dim: 16, seed: 0 })
            .unwrap(),
        None,
    )
    .unwrap()
    .auc_pr;
    println!(
        "[{}] train={}c/{}l eval={}c/{}l ibpr={ibpr:.4} random={random:.4}",
        case.name,
        train.chunks.len(),
        train.labels.len(),
        eval.chunks.len(),
        eval.labels.len()
    );

    let expander = ExpanderConfig { hidden_dims: vec![], out_dim: case.out_dim };
    let auc = |model: &Model| {
        retrieval_pr(
            &embed_labeled_corpus(&eval.chunks, &eval.labels, &EmbedMode::Model(model)).unwrap(),
            None,
        )
        .unwrap()
        .auc_pr
    };

    let mut sums = [0.0f64; 3];
    for seed in [0u64, 1, 2] {
        let t0 = std::time::Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = |name: &str| dir.path().join(name);
        let pretrain = |method: Method, out: &std::path::Path| {
            let job = TrainJob {
                data: TrainData::Views(&views),
                encoder: tiny_encoder(),
                expander: expander.clone(),
                vicreg: VicregConfig::default(),
                triplet: TripletConfig::default(),
                train: TrainConfig {
                    method,
                    learning_rate: Some(case.pre_lr),
                    batch_size: case.pre_batch,
                    max_steps: case.pre_steps,
                    seed,
                    checkpoint_out: Some(out.to_path_buf()),
                    ..Default::default()
                },
            };
            run_training(&job).unwrap()
        };
        pretrain(Method::Vicreg, &ckpt("vic.ckpt"));
        pretrain(Method::Cl, &ckpt("cl.ckpt"));

        let finetune = |path: &std::path::Path, method: Method| {
            let job = TrainJob {
                data: TrainData::Labeled { chunks: &train.chunks, labels: &train.labels },
                encoder: tiny_encoder(),
                expander: expander.clone(),
                vicreg: VicregConfig::default(),
                triplet: TripletConfig::default(),
                train: TrainConfig {
                    stage: Stage::Finetune,
                    method,
                    learning_rate: Some(1e-3),
                    batch_size: 32,
                    max_steps: case.ft_steps,
                    seed: seed + 100,
                    checkpoint_in: Some(path.to_path_buf()),
                    ..Default::default()
                },
            };
            run_training(&job).unwrap()
        };
        let vc = auc(&finetune(&ckpt("vic.ckpt"), Method::Cl).model);
        let cc = auc(&finetune(&ckpt("cl.ckpt"), Method::Cl).model);
        let vv = auc(&finetune(&ckpt("vic.ckpt"), Method::Vicreg).model);
        sums[0] += vc;
        sums[1] += cc;
        sums[2] += vv;
        println!(
            "[{}] seed={seed}  vc={vc:.4}  cc={cc:.4}  vv={vv:.4}  ({:.0}s)",
            case.name,
            t0.elapsed().as_secs_f64()
        );
    }
    let [vc, cc, vv] = sums.map(|s| s / 3.0);
    println!(
        "[{}] means vc={vc:.4} cc={cc:.4} vv={vv:.4}  window={:+.4}",
        case.name,
        vc - (cc.max(vv) - 0.01)
    );
}

#[test]
#[ignore]
fn calib_pipelines() {
    let cases = vec![
        PipeCase {
            name: "d-pre300-ft1k",
            bench: dense_bench(),
            aug: AugmentConfig { seed: 13, ..Default::default() },
            pre_lr: 1e-3,
            pre_batch: 32,
            pre_steps: 300,
            out_dim: 32,
            ft_steps: 1000,
        },
        PipeCase {
            name: "d-ft2k",
            bench: dense_bench(),
            aug: AugmentConfig { seed: 13, ..Default::default() },
            pre_lr: 1e-3,
            pre_batch: 32,
            pre_steps: 600,
            out_dim: 32,
            ft_steps: 2000,
        },
        PipeCase {
            name: "d-pre300-ft2k",
            bench: dense_bench(),
            aug: AugmentConfig { seed: 13, ..Default::default() },
            pre_lr: 1e-3,
            pre_batch: 32,
            pre_steps: 300,
            out_dim: 32,
            ft_steps: 2000,
        },
    ];
    for case in &cases {
        run_pipe_case(case);
    }
}
