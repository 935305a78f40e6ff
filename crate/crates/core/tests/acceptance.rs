//! Acceptance run: prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Criteria 4 to 8 train real models on
//! synthetic corpora and take several minutes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use facedyn_autograd::check::{check_gradients, GradCheckOptions, GradCheckReport};
use facedyn_autograd::{Float, Graph, Var};
use facedyn_core::encoders::{Arch, Encoder, EncoderConfig, ForwardCtx, ParamStore};
use facedyn_core::evalkit::dnr::median;
use facedyn_core::evalkit::{
    accuracy, compute_dnr, dnr_recall_analysis, enrollment_analysis, evaluate, length_analysis,
    macro_f1, DEFAULT_BOOTSTRAP_ITERS, DNR_EPSILON,
};
use facedyn_core::objectives::{
    cosine_logits, cross_entropy, focal_loss, smoothed_ce, supcon_loss, FocalConfig, MemoryQueue,
    SupConConfig,
};
use facedyn_core::seqdata::{
    decode_sequence, encode_sequence, CropPadPolicy, DynSequence, LabelMap, ShapeStatsRow,
    DEFAULT_FPS, FEATURE_DIM,
};
use facedyn_core::synthgen::{generate_corpus, inject_leakage, SynthConfig};
use facedyn_core::trainer::{
    random_encoder_checkpoint, train_joint_focal, train_stage1, train_stage2, Stage, TrainConfig,
};
use ndarray::{s, Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const EPOCHS: usize = 20;
const STAGE2_EPOCHS: usize = 100;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- oracles

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn to_array(rows: &[Vec<f64>]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), rows[0].len()), |(i, j)| rows[i][j])
}

/// Per-anchor double loop over the batch plus queue, averaged over anchors
/// that have a positive.
fn supcon_oracle(z: &[Vec<f64>], labels: &[usize], queue: &[(Vec<f64>, usize)], tau: f64) -> f64 {
    let mut pool: Vec<(&[f64], usize)> = z
        .iter()
        .map(Vec::as_slice)
        .zip(labels.iter().copied())
        .collect();
    pool.extend(queue.iter().map(|(v, y)| (v.as_slice(), *y)));
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (mut total, mut anchors) = (0.0, 0);
    for i in 0..z.len() {
        let mut denom = 0.0;
        for (a, item) in pool.iter().enumerate() {
            if a != i {
                denom += (dot(&z[i], item.0) / tau).exp();
            }
        }
        let (mut sum, mut count) = (0.0, 0);
        for (p, item) in pool.iter().enumerate() {
            if p != i && item.1 == labels[i] {
                sum += ((dot(&z[i], item.0) / tau).exp() / denom).ln();
                count += 1;
            }
        }
        if count > 0 {
            total += -sum / count as f64;
            anchors += 1;
        }
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

fn brute_force_metrics(y_true: &[usize], y_pred: &[usize], c: usize) -> (f64, f64) {
    let mut cm = vec![vec![0usize; c]; c];
    for i in 0..y_true.len() {
        cm[y_true[i]][y_pred[i]] += 1;
    }
    let trace: usize = (0..c).map(|k| cm[k][k]).sum();
    let mut f1s = Vec::new();
    for k in 0..c {
        let row: usize = cm[k].iter().sum();
        if row == 0 {
            continue;
        }
        let col: usize = (0..c).map(|r| cm[r][k]).sum();
        let tp = cm[k][k] as f64;
        let p = if col > 0 { tp / col as f64 } else { 0.0 };
        let r = tp / row as f64;
        f1s.push(if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        });
    }
    (
        trace as f64 / y_true.len() as f64,
        f1s.iter().sum::<f64>() / f1s.len() as f64,
    )
}

fn random(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
}

fn logits_var<'g>(g: &'g Graph<f64>, rows: &[&[f64]]) -> Var<'g, f64> {
    let a = Array2::from_shape_fn((rows.len(), rows[0].len()), |(i, j)| rows[i][j]);
    g.constant(a.into_dyn())
}

// ---------------------------------------------------------------- 1 to 3, 9, 10

fn loss_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_supcon = 0.0f64;
    let trials = 200;
    for trial in 0..trials {
        let b = rng.random_range(2..12);
        let d = rng.random_range(2..9);
        let tau = [0.07, 0.1, 0.5, 1.0][trial % 4];
        let z = unit_rows(&mut rng, b, d);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..4)).collect();
        let mut queue = MemoryQueue::new(32);
        let mut queued = Vec::new();
        if trial % 2 == 1 {
            let m = rng.random_range(1..20);
            let q = unit_rows(&mut rng, m, d);
            let ql: Vec<usize> = (0..m).map(|_| rng.random_range(0..4)).collect();
            queue.push(&to_array(&q), &ql);
            queued = q.into_iter().zip(ql).collect();
        }
        let g = Graph::<f64>::new();
        let cfg = SupConConfig {
            temperature: tau,
            queue_capacity: 32,
        };
        let got = supcon_loss(
            g.constant(to_array(&z).into_dyn()),
            &labels,
            &mut queue,
            &cfg,
        )
        .unwrap()
        .loss
        .item();
        worst_supcon = worst_supcon.max((got - supcon_oracle(&z, &labels, &queued, tau)).abs());
    }

    let mut worst_focal = 0.0f64;
    for seed in 0..50 {
        let g = Graph::<f64>::new();
        let x = g.constant(random(&[7, 5], seed).mapv(|v| 4.0 * v));
        let labels: Vec<usize> = (0..7).map(|i| (i * 3 + seed as usize) % 5).collect();
        let no_focus = FocalConfig {
            gamma: 0.0,
            class_weights: None,
        };
        let fl = focal_loss(x, &labels, &no_focus).unwrap().item();
        let ce = cross_entropy(x, &labels).unwrap().item();
        worst_focal = worst_focal.max((fl - ce).abs());
    }

    let g = Graph::<f64>::new();
    let uniform = smoothed_ce(logits_var(&g, &[&[0.0, 0.0]]), &[1], 0.1)
        .unwrap()
        .item();
    let peaked = smoothed_ce(logits_var(&g, &[&[1.0, 0.0]]), &[0], 0.1)
        .unwrap()
        .item();
    let p0 = 1f64.exp() / (1f64.exp() + 1.0);
    let expected = -(0.95 * p0.ln() + 0.05 * (1.0 - p0).ln());
    let ce_gap = (uniform - 2f64.ln()).abs().max((peaked - expected).abs());
    verdict(
        worst_supcon <= 1e-6 && worst_focal <= 1e-8 && ce_gap <= 1e-6,
        format!(
            "supcon worst gap {worst_supcon:.1e} over {trials} batches; focal(0)-CE {worst_focal:.1e}; smoothed CE {uniform:.6}, {peaked:.6}"
        ),
    )
}

fn small_encoder(arch: Arch) -> EncoderConfig {
    EncoderConfig {
        arch,
        embed_dim: 6,
        num_blocks: 2,
        num_heads: 2,
        hidden_dim: 8,
        conv_kernel: 3,
        ff_mult: 2,
        max_relative_position: 4,
        kernel_sizes: if arch == Arch::MsTcn {
            Some(vec![3, 5])
        } else {
            None
        },
        dropout: 0.0,
    }
}

fn lengths_mask(lengths: &[usize], l: usize) -> Array2<bool> {
    Array2::from_shape_fn((lengths.len(), l), |(b, t)| t < lengths[b])
}

fn gradient_checks() -> Verdict {
    let opts = GradCheckOptions::default();
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut ok = true;
    let mut record = |name: String, r: GradCheckReport| {
        ok &= r.checked > 0 && r.max_rel_error <= 1e-4;
        worst.push((name, r.max_rel_error));
    };

    for arch in Arch::ALL {
        let enc = Encoder::new(&small_encoder(arch)).unwrap();
        let store = enc.init_params(9);
        let mut inputs: Vec<ArrayD<f64>> = store.values().to_vec();
        inputs.push(random(&[2, 7, FEATURE_DIM], 10));
        let mask = lengths_mask(&[7, 4], 7);
        let probe = random(&[2, 6], 11);
        let sampled = GradCheckOptions {
            fraction: 0.05,
            seed: 3,
            ..GradCheckOptions::default()
        };
        let r = check_gradients(
            &inputs,
            |g, vars| {
                let n = vars.len() - 1;
                let p = store.bind_vars(vars[..n].to_vec());
                let out = enc.forward(&p, vars[n], &mask, &mut ForwardCtx::eval());
                (out * g.constant(probe.clone())).sum_all()
            },
            &sampled,
        );
        record(arch.name().to_string(), r);
    }

    let labels = [0, 1, 0, 2, 1, 0];
    let queued = to_array(&unit_rows(&mut ChaCha8Rng::seed_from_u64(9), 5, 4));
    for with_queue in [false, true] {
        let q = queued.clone();
        let r = check_gradients(
            &[random(&[6, 4], 1)],
            move |_, v| {
                let mut queue = MemoryQueue::new(16);
                if with_queue {
                    queue.push(&q, &[0, 1, 2, 2, 1]);
                }
                let cfg = SupConConfig {
                    temperature: 0.2,
                    queue_capacity: 16,
                };
                supcon_loss(v[0].l2_normalize(1e-12), &labels, &mut queue, &cfg)
                    .unwrap()
                    .loss
            },
            &opts,
        );
        record(
            format!("supcon{}", if with_queue { "+queue" } else { "" }),
            r,
        );
    }
    let logits = random(&[6, 3], 2).mapv(|v| 3.0 * v);
    record(
        "focal".into(),
        check_gradients(
            &[logits.clone()],
            |_, v| focal_loss(v[0], &labels, &FocalConfig::default()).unwrap(),
            &opts,
        ),
    );
    record(
        "smoothed_ce".into(),
        check_gradients(
            &[logits],
            |_, v| smoothed_ce(v[0], &labels, 0.1).unwrap(),
            &opts,
        ),
    );
    record(
        "cosine_head".into(),
        check_gradients(
            &[random(&[6, 4], 3), random(&[3, 4], 4)],
            |_, v| smoothed_ce(cosine_logits(v[0], v[1], 16.0).unwrap(), &labels, 0.1).unwrap(),
            &opts,
        ),
    );
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let names: Vec<&str> = worst.iter().map(|w| w.0.as_str()).collect();
    verdict(
        ok,
        format!("max rel error {max:.1e} over {}", names.join(", ")),
    )
}

fn stats_row(speaker: &str, session: &str, mean: Vec<f64>, std: Vec<f64>) -> ShapeStatsRow {
    ShapeStatsRow {
        speaker_id: speaker.into(),
        session_id: session.into(),
        mean,
        std,
        seed: None,
        config_hash: None,
    }
}

fn dnr_exactness() -> Verdict {
    let zero = compute_dnr(
        &[
            stats_row("a", "s1", vec![1.0, 2.0], vec![0.5, 0.5]),
            stats_row("a", "s2", vec![1.0, 2.0], vec![0.1, 0.2]),
        ],
        DNR_EPSILON,
    )
    .unwrap()
    .entries[0]
        .dnr;
    // samples {1, 3} and {4, 6}: means 2 and 5, population std 1
    let hand = compute_dnr(
        &[
            stats_row("p", "s1", vec![2.0], vec![1.0]),
            stats_row("p", "s2", vec![5.0], vec![1.0]),
        ],
        DNR_EPSILON,
    )
    .unwrap()
    .entries[0]
        .dnr;
    let med = median(&mut [4.0, 1.0, 2.0]);
    let three = compute_dnr(
        &[
            stats_row("r", "a", vec![0.0], vec![1.0]),
            stats_row("r", "b", vec![1.0], vec![1.0]),
            stats_row("r", "c", vec![2.5], vec![1.0]),
        ],
        0.0,
    )
    .unwrap()
    .entries[0]
        .drift;
    verdict(
        zero == 0.0 && (hand - 2.999997).abs() <= 1e-5 && med == 2.0 && three == 1.5,
        format!("zero drift {zero}; two-session {hand:.6}; median of {{1, 2, 4}} = {med}; collinear sessions drift {three}"),
    )
}

fn metric_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let c = rng.random_range(1..7);
        let n = rng.random_range(1..30);
        let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let p: Vec<usize> = (0..n)
            .map(|i| {
                if rng.random_bool(0.5) {
                    t[i]
                } else {
                    rng.random_range(0..c)
                }
            })
            .collect();
        let (acc, f1) = brute_force_metrics(&t, &p, c);
        if accuracy(&t, &p).unwrap() != acc || (macro_f1(&t, &p).unwrap() - f1).abs() > 1e-12 {
            mismatches += 1;
        }
    }
    let hand = macro_f1(&[0, 0, 1, 1, 2, 2], &[0, 0, 0, 1, 2, 2]).unwrap();
    verdict(
        mismatches == 0 && (hand - 0.8222).abs() <= 1e-4,
        format!("{mismatches} mismatches in 1000 sets; 3-class macro-F1 {hand:.4}"),
    )
}

fn padding_gap<T: Float>(arch: Arch) -> f64 {
    let enc = Encoder::new(&small_encoder(arch)).unwrap();
    let params: ParamStore<T> = enc.init_params(5).cast::<T>();
    let valid = 9;
    let base = random(&[1, valid, FEATURE_DIM], 6);
    let embed = |l: usize, seed: u64| {
        let mut x = random(&[2, l, FEATURE_DIM], seed);
        x.slice_mut(s![0, ..valid, ..])
            .assign(&base.slice(s![0, .., ..]));
        let g = Graph::<T>::new();
        let p = params.bind_frozen(&g);
        let out = enc.forward(
            &p,
            g.constant(x.mapv(T::cst)),
            &lengths_mask(&[valid, l], l),
            &mut ForwardCtx::eval(),
        );
        let v = out.value().clone();
        v
    };
    let (e1, e2) = (embed(valid + 3, 7), embed(valid + 11, 8));
    e1.slice(s![0, ..])
        .iter()
        .zip(e2.slice(s![0, ..]))
        .map(|(a, b)| (<T as Float>::to_f64(*a) - <T as Float>::to_f64(*b)).abs())
        .fold(0.0, f64::max)
}

fn format_and_determinism(root: &Path) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut round_trip_failures = 0;
    for _ in 0..1000 {
        let t = rng.random_range(1..40);
        let frames =
            Array2::from_shape_simple_fn((t, FEATURE_DIM), || rng.random_range(-3.0f32..3.0));
        // the frame rate lives in the manifest, not in the file
        let seq = DynSequence::new(frames, DEFAULT_FPS).unwrap();
        let bytes = encode_sequence(&seq);
        match decode_sequence(&bytes) {
            Ok(back) if back == seq && encode_sequence(&back) == bytes => {}
            _ => round_trip_failures += 1,
        }
    }

    let cfg = SynthConfig {
        num_speakers: 4,
        utterances_per_speaker: 20,
        frames_per_utterance: [24, 48],
        seed: 3,
        ..SynthConfig::default()
    };
    let m = generate_corpus(&cfg, root.join("data")).unwrap().manifest;
    let enc = EncoderConfig {
        embed_dim: 16,
        num_blocks: 1,
        num_heads: 2,
        hidden_dim: 8,
        ff_mult: 2,
        conv_kernel: 3,
        max_relative_position: 8,
        ..EncoderConfig::default()
    };
    let tc = TrainConfig {
        batch_size: 16,
        epochs: 2,
        policy: CropPadPolicy::new(32).unwrap(),
        ..TrainConfig::for_stage(Stage::JointFocal)
    };
    let a = train_joint_focal(&m, &enc, &tc, root.join("a")).unwrap();
    let b = train_joint_focal(&m, &enc, &tc, root.join("b")).unwrap();
    let same_logs = fs::read(&a.metrics).unwrap() == fs::read(&b.metrics).unwrap()
        && fs::read(&a.checkpoint).unwrap() == fs::read(&b.checkpoint).unwrap();

    let gaps: Vec<(Arch, f64, f64)> = Arch::ALL
        .into_iter()
        .map(|arch| (arch, padding_gap::<f32>(arch), padding_gap::<f64>(arch)))
        .collect();
    let mask_ok = gaps.iter().all(|g| g.1 <= 1e-6 && g.2 <= 1e-10);
    let worst32 = gaps.iter().map(|g| g.1).fold(0.0, f64::max);
    verdict(
        round_trip_failures == 0 && same_logs && mask_ok,
        format!(
            "{round_trip_failures} round-trip failures in 1000; identical-seed logs equal: {same_logs}; worst padding gap f32 {worst32:.1e} over {} architectures",
            gaps.len()
        ),
    )
}

// ---------------------------------------------------------------- 4 to 8

/// Small Conformer of the desk-scale runs.
fn desk_encoder() -> EncoderConfig {
    EncoderConfig {
        arch: Arch::Conformer,
        embed_dim: 128,
        num_blocks: 2,
        num_heads: 4,
        hidden_dim: 32,
        ff_mult: 2,
        conv_kernel: 7,
        ..EncoderConfig::default()
    }
}

fn desk_train(stage: Stage, seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        epochs,
        seed,
        policy: CropPadPolicy::new(64).unwrap(),
        ..TrainConfig::for_stage(stage)
    }
}

fn eval_policy() -> CropPadPolicy {
    CropPadPolicy::new(300).unwrap()
}

fn med(values: &[f64]) -> f64 {
    median(&mut values.to_vec())
}

fn fmt_all(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:.3}"))
        .collect::<Vec<_>>()
        .join("/")
}

struct IdentRun {
    joint: f64,
    two_stage: f64,
    random_stage2: f64,
    lengths: Vec<(usize, f64)>,
}

fn identification_run(root: &Path, seed: u64) -> IdentRun {
    let cfg = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    let m = generate_corpus(&cfg, root.join("data")).unwrap().manifest;
    let joint = train_joint_focal(
        &m,
        &desk_encoder(),
        &desk_train(Stage::JointFocal, seed, EPOCHS),
        root.join("joint"),
    )
    .unwrap()
    .load_checkpoint()
    .unwrap();
    let joint_acc = evaluate(&m, &joint, &eval_policy()).unwrap().accuracy;
    let lengths = length_analysis(&m, &joint, &[75, 150, 300])
        .unwrap()
        .into_iter()
        .map(|r| (r.length, r.accuracy))
        .collect();

    let s1 = train_stage1(
        &m,
        &desk_encoder(),
        &desk_train(Stage::Stage1Supcon, seed, EPOCHS),
        root.join("s1"),
    )
    .unwrap()
    .load_checkpoint()
    .unwrap();
    let s2_cfg = desk_train(Stage::Stage2Classifier, seed, STAGE2_EPOCHS);
    let two = train_stage2(&m, &s1, &s2_cfg, root.join("s2"))
        .unwrap()
        .load_checkpoint()
        .unwrap();
    let rnd =
        random_encoder_checkpoint(&desk_encoder(), &LabelMap::from_manifest(&m), seed).unwrap();
    let rnd2 = train_stage2(&m, &rnd, &s2_cfg, root.join("s2_random"))
        .unwrap()
        .load_checkpoint()
        .unwrap();
    IdentRun {
        joint: joint_acc,
        two_stage: evaluate(&m, &two, &eval_policy()).unwrap().accuracy,
        random_stage2: evaluate(&m, &rnd2, &eval_policy()).unwrap().accuracy,
        lengths,
    }
}

fn dnr_run(root: &Path, seed: u64) -> f64 {
    let cfg = SynthConfig {
        seed,
        num_speakers: 40,
        sessions_per_speaker: 2,
        ga_fraction: 0.0,
        ..SynthConfig::default()
    };
    generate_corpus(&cfg, root.join("data")).unwrap();
    let corpus = inject_leakage(root.join("data"), &[0.0, 0.25, 0.5, 1.0]).unwrap();
    let m = &corpus.manifest;
    let ck = train_joint_focal(
        m,
        &desk_encoder(),
        &desk_train(Stage::JointFocal, seed, EPOCHS),
        root.join("joint"),
    )
    .unwrap()
    .load_checkpoint()
    .unwrap();
    let report = evaluate(m, &ck, &eval_policy()).unwrap();
    let dnr = compute_dnr(&corpus.shape_stats, DNR_EPSILON).unwrap();
    dnr_recall_analysis(
        &dnr,
        &report.per_speaker_recall,
        4,
        DEFAULT_BOOTSTRAP_ITERS,
        seed,
    )
    .unwrap()
    .spearman
}

fn enrollment_run(root: &Path, seed: u64) -> BTreeMap<usize, f64> {
    let cfg = SynthConfig {
        seed,
        train_utterances: Some(vec![5, 50]),
        ..SynthConfig::default()
    };
    let m = generate_corpus(&cfg, root.join("data")).unwrap().manifest;
    let ck = train_joint_focal(
        &m,
        &desk_encoder(),
        &desk_train(Stage::JointFocal, seed, EPOCHS),
        root.join("joint"),
    )
    .unwrap()
    .load_checkpoint()
    .unwrap();
    enrollment_analysis(&m, &ck, &eval_policy())
        .unwrap()
        .into_iter()
        .map(|r| (r.train_utterances, r.mean_accuracy))
        .collect()
}

// ---------------------------------------------------------------- driver

fn report(id: u32, name: &str, v: &Verdict, t0: Instant) -> bool {
    println!(
        "[{}] {id:>2} {name}: {} ({:.0}s)",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        t0.elapsed().as_secs_f64()
    );
    v.pass
}

fn main() -> ExitCode {
    // `cargo test -- --list` and similar probes expect no work
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut all = true;

    let t = Instant::now();
    all &= report(1, "loss oracle equivalence", &loss_oracles(), t);
    let t = Instant::now();
    all &= report(2, "gradient checks", &gradient_checks(), t);
    let t = Instant::now();
    all &= report(3, "DNR exactness", &dnr_exactness(), t);

    let t = Instant::now();
    let runs: Vec<IdentRun> = SEEDS
        .iter()
        .map(|&s| identification_run(&root.join(format!("ident_{s}")), s))
        .collect();
    let joint: Vec<f64> = runs.iter().map(|r| r.joint).collect();
    let two: Vec<f64> = runs.iter().map(|r| r.two_stage).collect();
    let rnd: Vec<f64> = runs.iter().map(|r| r.random_stage2).collect();
    all &= report(
        4,
        "synthetic identification",
        &verdict(
            joint[0] >= 0.90,
            format!(
                "joint focal test accuracy {:.3} (seeds {}; chance 0.05)",
                joint[0],
                fmt_all(&joint)
            ),
        ),
        t,
    );
    let (mj, mt, mr) = (med(&joint), med(&two), med(&rnd));
    all &= report(
        5,
        "two-stage benefit",
        &verdict(
            mt >= mj - 0.01 && mr < mt && mr < mj,
            format!(
                "median accuracy two-stage {mt:.3} ({}), joint {mj:.3} ({}), random encoder + stage 2 {mr:.3} ({})",
                fmt_all(&two),
                fmt_all(&joint),
                fmt_all(&rnd)
            ),
        ),
        t,
    );
    let table: Vec<String> = runs[0]
        .lengths
        .iter()
        .map(|(l, a)| format!("L={l}: {a:.3}"))
        .collect();
    let acc_at = |l: usize| runs[0].lengths.iter().find(|r| r.0 == l).unwrap().1;
    all &= report(
        7,
        "length trend",
        &verdict(acc_at(300) >= acc_at(75), table.join(", ")),
        t,
    );

    let t = Instant::now();
    let rhos: Vec<f64> = SEEDS
        .iter()
        .map(|&s| dnr_run(&root.join(format!("dnr_{s}")), s))
        .collect();
    all &= report(
        6,
        "DNR-recall correlation",
        &verdict(
            med(&rhos) <= -0.3,
            format!(
                "median Spearman {:.3} (seeds {})",
                med(&rhos),
                fmt_all(&rhos)
            ),
        ),
        t,
    );

    let t = Instant::now();
    let enroll: Vec<BTreeMap<usize, f64>> = SEEDS
        .iter()
        .map(|&s| enrollment_run(&root.join(format!("enroll_{s}")), s))
        .collect();
    let few: Vec<f64> = enroll.iter().map(|e| e[&5]).collect();
    let many: Vec<f64> = enroll.iter().map(|e| e[&50]).collect();
    all &= report(
        8,
        "enrollment trend",
        &verdict(
            med(&many) >= med(&few),
            format!(
                "median per-person accuracy with 50 utterances {:.3} ({}), with 5 {:.3} ({})",
                med(&many),
                fmt_all(&many),
                med(&few),
                fmt_all(&few)
            ),
        ),
        t,
    );

    let t = Instant::now();
    all &= report(9, "metric oracle", &metric_oracle(), t);
    let t = Instant::now();
    all &= report(
        10,
        "format and determinism",
        &format_and_determinism(&root.join("determinism")),
        t,
    );

    if all {
        println!("all acceptance criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("some acceptance criteria FAIL");
        ExitCode::FAILURE
    }
}
