use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::ArgMatches;
use facedyn_core::encoders::Arch;
use facedyn_core::evalkit::{
    compute_dnr, dnr_recall_analysis, enrollment_table, evaluate, length_analysis, plot,
    DnrRecallTable, DnrReport, EnrollmentRow, LengthRow, MetricsReport,
};
use facedyn_core::hashing::short_hash;
use facedyn_core::seqdata::{
    read_manifest, read_shape_stats, validate_manifest, CropPadPolicy, Manifest,
};
use facedyn_core::synthgen::{generate_corpus, inject_leakage};
use facedyn_core::trainer::{
    train_joint_focal, train_stage1, train_stage2, Checkpoint, RunArtifacts, Stage,
};
use facedyn_core::{Error, Result};
use log::{info, warn};

use crate::config::RunConfigFile;
use crate::{
    given, AnalysisArgs, AnalysisKind, AnalyzeArgs, Command, Common, DnrArgs, EvalArgs, Failure,
    ReportArgs, StageArg, SynthArgs, TrainArgs, ValidateArgs,
};

type Outcome = std::result::Result<(), Failure>;

pub fn run(cmd: Command, m: &ArgMatches) -> Outcome {
    match cmd {
        Command::Synth(a) => synth(a, m),
        Command::Validate(a) => validate(a),
        Command::Train(a) => train(a, m),
        Command::Eval(a) => eval(a, m),
        Command::Dnr(a) => dnr(a, m),
        Command::Analyze(a) => analyze(a, m),
        Command::Report(a) => report(a, m),
    }
}

fn need(path: &Path, flag: &str) -> Outcome {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "--{flag}: {} does not exist",
            path.display()
        )))
    }
}

fn load_config(path: Option<&PathBuf>) -> std::result::Result<RunConfigFile, Failure> {
    if let Some(p) = path {
        need(p, "config")?;
    }
    Ok(RunConfigFile::load(path.map(PathBuf::as_path))?)
}

fn resolve_common(common: &Common, m: &ArgMatches) -> std::result::Result<RunConfigFile, Failure> {
    let mut cfg = load_config(common.config.as_ref())?;
    if given(m, "seed") {
        cfg.set_seed(common.seed);
    }
    Ok(cfg)
}

/// Copies each flag the user typed over the matching config field.
macro_rules! overlay {
    ($m:expr, $( $id:literal => $dst:expr, $src:expr; )*) => {
        $( if given($m, $id) { $dst = $src; } )*
    };
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::json("output", e))?;
    println!("{text}");
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn synth(a: SynthArgs, m: &ArgMatches) -> Outcome {
    let mut cfg = resolve_common(&a.common, m)?;
    let s = &mut cfg.synth;
    overlay! { m,
        "speakers" => s.num_speakers, a.speakers;
        "utterances" => s.utterances_per_speaker, a.utterances;
        "sessions" => s.sessions_per_speaker, a.sessions;
        "min_frames" => s.frames_per_utterance[0], a.min_frames;
        "max_frames" => s.frames_per_utterance[1], a.max_frames;
        "signature_dim" => s.signature_dim, a.signature_dim;
        "noise_std" => s.noise_std, a.noise_std;
        "drift_scale" => s.shape_drift_scale, a.drift_scale;
        "drift_spread" => s.drift_spread, a.drift_spread;
        "leakage" => s.leakage_strength, a.leakage;
        "ga_fraction" => s.ga_fraction, a.ga_fraction;
        "val_fraction" => s.val_fraction, a.val_fraction;
        "test_fraction" => s.test_fraction, a.test_fraction;
        "fps" => s.fps, a.fps;
        "train_utterances" => s.train_utterances, a.train_utterances.clone();
    }
    let mut corpus = generate_corpus(&cfg.synth, &a.out)?;
    if let Some(strata) = &a.leakage_strata {
        corpus = inject_leakage(&a.out, strata)?;
    }
    cfg.echo(&a.out)?;
    println!(
        "wrote {} utterances of {} speakers to {}",
        corpus.manifest.records.len(),
        corpus.manifest.speakers().len(),
        corpus.manifest_path().display()
    );
    Ok(())
}

fn validate(a: ValidateArgs) -> Outcome {
    need(&a.manifest, "manifest")?;
    let manifest = read_manifest(&a.manifest)?;
    let root = (!a.no_files).then_some(manifest.root.as_path());
    let report = validate_manifest(&manifest.records, root);
    print_json(&report)?;
    if report.is_valid() {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "manifest has {} violations",
            report.violations.len()
        ))
        .into())
    }
}

fn train(a: TrainArgs, m: &ArgMatches) -> Outcome {
    match (a.stage, &a.from_checkpoint) {
        (StageArg::Classifier, None) => {
            return Err(Failure::Usage(
                "--stage classifier requires --from-checkpoint".into(),
            ));
        }
        (StageArg::Classifier, Some(p)) => need(p, "from-checkpoint")?,
        (_, Some(_)) => {
            return Err(Failure::Usage(
                "--from-checkpoint only applies to --stage classifier".into(),
            ));
        }
        (_, None) => {}
    }
    need(&a.manifest, "manifest")?;
    let mut cfg = resolve_common(&a.common, m)?;
    let stage = match a.stage {
        StageArg::Supcon => Stage::Stage1Supcon,
        StageArg::Classifier => Stage::Stage2Classifier,
        StageArg::Joint => Stage::JointFocal,
    };
    cfg.train.stage = stage;

    let e = &mut cfg.encoder;
    let arch: Arch = a.arch.parse()?;
    overlay! { m,
        "arch" => e.arch, arch;
        "embed_dim" => e.embed_dim, a.embed_dim;
        "blocks" => e.num_blocks, a.blocks;
        "heads" => e.num_heads, a.heads;
        "hidden_dim" => e.hidden_dim, a.hidden_dim;
        "ff_mult" => e.ff_mult, a.ff_mult;
        "conv_kernel" => e.conv_kernel, a.conv_kernel;
        "kernel_sizes" => e.kernel_sizes, a.kernel_sizes.clone();
        "dropout" => e.dropout, a.dropout;
    }
    let t = &mut cfg.train;
    overlay! { m,
        "epochs" => t.epochs, a.epochs;
        "batch_size" => t.batch_size, a.batch_size;
        "lr" => t.lr, a.lr;
        "weight_decay" => t.weight_decay, a.weight_decay;
        "max_length" => t.policy.max_length, a.max_length;
        "patience" => t.patience, a.patience;
        "balanced" => t.balanced_sampling, a.balanced;
        "per_class" => t.per_class, a.per_class;
        "temperature" => t.supcon.temperature, a.temperature;
        "queue_size" => t.supcon.queue_capacity, a.queue_size;
        "gamma" => t.focal.gamma, a.gamma;
        "label_smoothing" => t.label_smoothing, a.label_smoothing;
        "cosine_scale" => t.cosine_scale, a.cosine_scale;
    }
    cfg.train.validate()?;
    let manifest = read_manifest(&a.manifest)?;

    let run: RunArtifacts = match stage {
        Stage::Stage2Classifier => {
            let ck = Checkpoint::load(a.from_checkpoint.as_ref().expect("checked above"))?;
            const ENCODER_FLAGS: [&str; 9] = [
                "arch",
                "embed_dim",
                "blocks",
                "heads",
                "hidden_dim",
                "ff_mult",
                "conv_kernel",
                "kernel_sizes",
                "dropout",
            ];
            if ENCODER_FLAGS.iter().any(|id| given(m, id)) {
                warn!("encoder flags are ignored: stage 2 reuses the checkpoint's encoder");
            }
            cfg.encoder = ck.encoder_config.clone();
            cfg.echo(&a.out)?;
            train_stage2(&manifest, &ck, &cfg.train, &a.out)?
        }
        Stage::Stage1Supcon => {
            cfg.echo(&a.out)?;
            train_stage1(&manifest, &cfg.encoder, &cfg.train, &a.out)?
        }
        Stage::JointFocal => {
            cfg.echo(&a.out)?;
            train_joint_focal(&manifest, &cfg.encoder, &cfg.train, &a.out)?
        }
    };
    info!(
        "{} epochs logged to {}",
        run.history.len(),
        run.metrics.display()
    );
    print_json(&serde_json::json!({
        "stage": stage.name(),
        "epochs_run": run.history.len(),
        "best_epoch": run.best_epoch,
        "best_score": run.best_score,
        "checkpoint": run.checkpoint,
    }))?;
    Ok(())
}

fn eval(a: EvalArgs, m: &ArgMatches) -> Outcome {
    need(&a.manifest, "manifest")?;
    need(&a.checkpoint, "checkpoint")?;
    let mut cfg = load_config(a.config.as_ref())?;
    overlay! { m, "max_length" => cfg.eval.max_length, a.max_length; }
    let manifest = read_manifest(&a.manifest)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let report = evaluate(&manifest, &ck, &CropPadPolicy::new(cfg.eval.max_length)?)?;
    print_json(&report)?;
    Ok(())
}

fn dnr(a: DnrArgs, m: &ArgMatches) -> Outcome {
    need(&a.shape_stats, "shape-stats")?;
    let mut cfg = load_config(a.config.as_ref())?;
    overlay! { m, "epsilon" => cfg.eval.epsilon, a.epsilon; }
    let report = compute_dnr(&read_shape_stats(&a.shape_stats)?, cfg.eval.epsilon)?;
    if a.json {
        print_json(&report)?;
    } else {
        print!("{}", dnr_tsv(&report));
    }
    Ok(())
}

struct Analysis {
    cfg: RunConfigFile,
    manifest: Manifest,
    ck: Checkpoint,
}

fn prepare(a: &AnalysisArgs, m: &ArgMatches) -> std::result::Result<Analysis, Failure> {
    need(&a.manifest, "manifest")?;
    need(&a.checkpoint, "checkpoint")?;
    if let Some(p) = &a.shape_stats {
        need(p, "shape-stats")?;
    }
    let mut cfg = resolve_common(&a.common, m)?;
    let e = &mut cfg.eval;
    overlay! { m,
        "max_length" => e.max_length, a.max_length;
        "lengths" => e.lengths, a.lengths.clone();
        "bins" => e.dnr_bins, a.bins;
        "bootstrap_iters" => e.bootstrap_iters, a.bootstrap_iters;
        "epsilon" => e.epsilon, a.epsilon;
    }
    Ok(Analysis {
        manifest: read_manifest(&a.manifest)?,
        ck: Checkpoint::load(&a.checkpoint)?,
        cfg,
    })
}

impl Analysis {
    fn policy(&self) -> Result<CropPadPolicy> {
        CropPadPolicy::new(self.cfg.eval.max_length)
    }

    fn metrics(&self) -> Result<MetricsReport> {
        evaluate(&self.manifest, &self.ck, &self.policy()?)
    }

    fn dnr_recall(
        &self,
        stats: &Path,
        report: &MetricsReport,
    ) -> Result<(DnrReport, DnrRecallTable)> {
        let e = &self.cfg.eval;
        let dnr = compute_dnr(&read_shape_stats(stats)?, e.epsilon)?;
        let table = dnr_recall_analysis(
            &dnr,
            &report.per_speaker_recall,
            e.dnr_bins,
            e.bootstrap_iters,
            e.seed,
        )?;
        Ok((dnr, table))
    }

    fn lengths(&self) -> Result<Vec<LengthRow>> {
        length_analysis(&self.manifest, &self.ck, &self.cfg.eval.lengths)
    }
}

fn analyze(a: AnalyzeArgs, m: &ArgMatches) -> Outcome {
    if a.kind == AnalysisKind::DnrRecall && a.analysis.shape_stats.is_none() {
        return Err(Failure::Usage(
            "--kind dnr-recall requires --shape-stats".into(),
        ));
    }
    let an = prepare(&a.analysis, m)?;
    match a.kind {
        AnalysisKind::DnrRecall => {
            let stats = a.analysis.shape_stats.as_ref().expect("checked above");
            let (_, table) = an.dnr_recall(stats, &an.metrics()?)?;
            if a.json {
                print_json(&table)?;
            } else {
                print!("{}", dnr_recall_tsv(&table));
            }
        }
        AnalysisKind::Length => {
            let rows = an.lengths()?;
            if a.json {
                print_json(&rows)?;
            } else {
                print!("{}", length_tsv(&rows));
            }
        }
        AnalysisKind::Enrollment => {
            let rows = enrollment_table(&an.manifest, &an.metrics()?);
            if a.json {
                print_json(&rows)?;
            } else {
                print!("{}", enrollment_tsv(&rows));
            }
        }
    }
    Ok(())
}

fn report(a: ReportArgs, m: &ArgMatches) -> Outcome {
    let an = prepare(&a.analysis, m)?;
    let hash = short_hash(&serde_json::json!({
        "eval": an.cfg.eval,
        "encoder": an.ck.encoder_hash(),
        "labels": an.ck.label_map.hash(),
        "stage": an.ck.stage,
    }));
    let out = &a.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let name = |stem: &str, ext: &str| out.join(format!("{stem}_{hash}.{ext}"));
    let json = |v: serde_json::Result<String>| v.map_err(|e| Error::json("report", e));

    write_file(&name("run_config", "toml"), &an.cfg.to_toml())?;
    let metrics = an.metrics()?;
    write_file(
        &name("metrics", "json"),
        &json(serde_json::to_string_pretty(&metrics))?,
    )?;
    write_file(&name("metrics", "tsv"), &metrics_tsv(&metrics))?;

    let lengths = an.lengths()?;
    write_file(
        &name("length", "json"),
        &json(serde_json::to_string_pretty(&lengths))?,
    )?;
    write_file(&name("length", "tsv"), &length_tsv(&lengths))?;
    write_file(&name("length", "svg"), &plot::length_svg(&lengths))?;

    let enroll = enrollment_table(&an.manifest, &metrics);
    write_file(
        &name("enrollment", "json"),
        &json(serde_json::to_string_pretty(&enroll))?,
    )?;
    write_file(&name("enrollment", "tsv"), &enrollment_tsv(&enroll))?;
    write_file(&name("enrollment", "svg"), &plot::enrollment_svg(&enroll))?;

    if let Some(stats) = &a.analysis.shape_stats {
        let (dnr, table) = an.dnr_recall(stats, &metrics)?;
        write_file(&name("dnr", "tsv"), &dnr_tsv(&dnr))?;
        write_file(
            &name("dnr_recall", "json"),
            &json(serde_json::to_string_pretty(&table))?,
        )?;
        write_file(&name("dnr_recall", "tsv"), &dnr_recall_tsv(&table))?;
        write_file(&name("dnr_recall", "svg"), &plot::dnr_recall_svg(&table))?;
    } else {
        info!("no --shape-stats given; skipping the DNR tables");
    }
    println!("{}", out.display());
    Ok(())
}

fn dnr_tsv(r: &DnrReport) -> String {
    let mut s = String::from("speaker_id\tsessions\tdrift\tnoise\tdnr\n");
    for e in &r.entries {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}",
            e.speaker_id, e.sessions, e.drift, e.noise, e.dnr
        );
    }
    if !r.excluded.is_empty() {
        let _ = writeln!(s, "# excluded (single session): {}", r.excluded.join(", "));
    }
    s
}

fn dnr_recall_tsv(t: &DnrRecallTable) -> String {
    let mut s = String::from("dnr_low\tdnr_high\tpersons\tmean_recall\tci_low\tci_high\n");
    for b in &t.bins {
        let _ = writeln!(
            s,
            "{:.4}\t{:.4}\t{}\t{:.4}\t{:.4}\t{:.4}",
            b.dnr_low, b.dnr_high, b.persons, b.mean_recall, b.ci_low, b.ci_high
        );
    }
    let _ = writeln!(
        s,
        "# spearman {:.4} over {} bootstrap resamples",
        t.spearman, t.bootstrap_iters
    );
    for n in &t.notes {
        let _ = writeln!(s, "# {n}");
    }
    s
}

fn group_names<'a>(
    groups: impl Iterator<Item = &'a BTreeMap<String, facedyn_core::evalkit::GroupMetrics>>,
) -> Vec<String> {
    let mut names: Vec<String> = groups.flat_map(|g| g.keys().cloned()).collect();
    names.sort();
    names.dedup();
    names
}

fn length_tsv(rows: &[LengthRow]) -> String {
    let names = group_names(rows.iter().map(|r| &r.groups));
    let mut s = String::from("length\taccuracy\tmacro_f1");
    for g in &names {
        let _ = write!(s, "\t{g}_accuracy\t{g}_macro_f1");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{}\t{:.4}\t{:.4}", r.length, r.accuracy, r.macro_f1);
        for g in &names {
            match r.groups.get(g) {
                Some(m) => {
                    let _ = write!(s, "\t{:.4}\t{:.4}", m.accuracy, m.macro_f1);
                }
                None => s.push_str("\t-\t-"),
            }
        }
        s.push('\n');
    }
    s
}

fn enrollment_tsv(rows: &[EnrollmentRow]) -> String {
    let mut s = String::from("train_utterances\tpersons\tmean_accuracy\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.4}",
            r.train_utterances, r.persons, r.mean_accuracy
        );
    }
    s
}

fn metrics_tsv(r: &MetricsReport) -> String {
    let mut s = String::from("subset\tsamples\tspeakers\taccuracy\tmacro_f1\n");
    let _ = writeln!(
        s,
        "overall\t{}\t{}\t{:.4}\t{:.4}",
        r.num_samples, r.num_speakers, r.accuracy, r.macro_f1
    );
    for (g, m) in &r.groups {
        let _ = writeln!(
            s,
            "{g}\t{}\t{}\t{:.4}\t{:.4}",
            m.num_samples, m.num_speakers, m.accuracy, m.macro_f1
        );
    }
    s
}
