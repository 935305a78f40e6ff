//! Stage-1 contrastive training, stage-2 classifier fitting on a frozen
//! encoder, and single-stage focal training.

mod checkpoint;
mod optim;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use facedyn_autograd::Graph;
use log::{info, warn};
use ndarray::{Array2, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{param_hash, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{AdamW, AdamWConfig};

use crate::encoders::{Bound, Encoder, EncoderConfig, ForwardCtx, ParamStore};
use crate::error::{Error, Result};
use crate::evalkit::metrics::{accuracy, macro_f1};
use crate::objectives::{
    argmax_rows, cosine_logits, focal_loss, smoothed_ce, supcon_loss, ClassifierHead, FocalConfig,
    MemoryQueue, SupConConfig, DEFAULT_COSINE_SCALE, DEFAULT_LABEL_SMOOTHING,
};
use crate::seqdata::{validate_manifest, Batch, CropPadPolicy, Dataset, LabelMap, Manifest, Split};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.fckp";
pub const LABEL_MAP_FILE: &str = "label_map.json";
pub const DIVERGENCE_FILE: &str = "divergence_dump.json";

const HEAD_PARAM: &str = "weight";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1Supcon,
    Stage2Classifier,
    JointFocal,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage1Supcon => "stage1_supcon",
            Stage::Stage2Classifier => "stage2_classifier",
            Stage::JointFocal => "joint_focal",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supcon" | "stage1_supcon" => Ok(Stage::Stage1Supcon),
            "classifier" | "stage2_classifier" => Ok(Stage::Stage2Classifier),
            "joint" | "joint_focal" => Ok(Stage::JointFocal),
            _ => Err(Error::Argument(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub policy: CropPadPolicy,
    /// Epochs without a better validation score before stopping.
    pub patience: usize,
    /// Speaker-grouped batches; `None` means on for stage 1 and off otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub balanced_sampling: Option<bool>,
    /// Utterances per speaker run under balanced sampling.
    pub per_class: usize,
    pub supcon: SupConConfig,
    pub focal: FocalConfig,
    pub label_smoothing: f64,
    pub cosine_scale: f64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Stage1Supcon,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs: 50,
            seed: 0,
            policy: CropPadPolicy {
                max_length: 300,
                pad_value: 0.0,
            },
            patience: 10,
            balanced_sampling: None,
            per_class: 4,
            supcon: SupConConfig::default(),
            focal: FocalConfig::default(),
            label_smoothing: DEFAULT_LABEL_SMOOTHING,
            cosine_scale: DEFAULT_COSINE_SCALE,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        Self {
            stage,
            ..Self::default()
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn balanced(&self) -> bool {
        self.balanced_sampling
            .unwrap_or(self.stage == Stage::Stage1Supcon)
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer().validate()?;
        self.policy.validate()?;
        self.supcon.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if self.epochs == 0 {
            return bad("at least one epoch is required");
        }
        if self.per_class == 0 {
            return bad("per_class must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        if !(self.cosine_scale.is_finite() && self.cosine_scale > 0.0) {
            return bad("cosine_scale must be positive");
        }
        if !(self.focal.gamma.is_finite() && self.focal.gamma >= 0.0) {
            return bad("focal gamma must be nonnegative");
        }
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub steps: usize,
    pub val_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_macro_f1: Option<f64>,
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub config: PathBuf,
    pub label_map: PathBuf,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    /// Validation loss for stage 1, validation macro-F1 otherwise.
    pub best_score: f64,
}

impl RunArtifacts {
    pub fn load_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::load(&self.checkpoint)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream seed for `(purpose, index)` under the run seed.
fn derive_seed(seed: u64, purpose: u64, index: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(purpose)) ^ index)
}

const SEED_INIT: u64 = 1;
const SEED_ORDER: u64 = 2;
const SEED_DROPOUT: u64 = 3;
const SEED_HEAD: u64 = 4;

struct RunDir {
    dir: PathBuf,
    metrics: fs::File,
}

impl RunDir {
    fn create(dir: &Path, echo: &serde_json::Value, labels: &LabelMap) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = dir.join(CONFIG_FILE);
        let text = serde_json::to_string_pretty(echo).map_err(|e| Error::json("config echo", e))?;
        fs::write(&cfg, text + "\n").map_err(|e| Error::io(&cfg, e))?;
        labels.save(dir.join(LABEL_MAP_FILE))?;
        let _ = fs::remove_file(dir.join(DIVERGENCE_FILE));
        let mpath = dir.join(METRICS_FILE);
        let metrics = fs::File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
        })
    }

    fn log(&mut self, row: &EpochMetrics) -> Result<()> {
        let mut line = serde_json::to_vec(row).map_err(|e| Error::json("metrics row", e))?;
        line.push(b'\n');
        let p = self.dir.join(METRICS_FILE);
        self.metrics.write_all(&line).map_err(|e| Error::io(p, e))
    }

    fn artifacts(self, history: Vec<EpochMetrics>, best: (usize, f64)) -> RunArtifacts {
        RunArtifacts {
            checkpoint: self.dir.join(CHECKPOINT_FILE),
            metrics: self.dir.join(METRICS_FILE),
            config: self.dir.join(CONFIG_FILE),
            label_map: self.dir.join(LABEL_MAP_FILE),
            dir: self.dir,
            history,
            best_epoch: best.0,
            best_score: best.1,
        }
    }

    /// Numeric-guard failures inside training count as divergence.
    fn guard<T>(&self, r: Result<T>, dump: impl FnOnce() -> serde_json::Value) -> Result<T> {
        match r {
            Err(Error::NumericGuard(m)) => {
                let mut d = dump();
                d["reason"] = serde_json::Value::from(m);
                Err(self.divergence(d))
            }
            other => other,
        }
    }

    fn divergence(&self, dump: serde_json::Value) -> Error {
        let p = self.dir.join(DIVERGENCE_FILE);
        let text = serde_json::to_string_pretty(&dump).unwrap_or_default();
        if let Err(e) = fs::write(&p, text) {
            warn!("could not write {}: {e}", p.display());
        }
        Error::Divergence(format!(
            "non-finite loss or gradient, state dumped to {}",
            p.display()
        ))
    }
}

/// Best-score bookkeeping with patience.
struct Selector {
    higher_is_better: bool,
    patience: usize,
    best: Option<(usize, f64)>,
    since: usize,
}

impl Selector {
    fn new(higher_is_better: bool, patience: usize) -> Self {
        Self {
            higher_is_better,
            patience,
            best: None,
            since: 0,
        }
    }

    fn update(&mut self, epoch: usize, score: f64) -> bool {
        let better = match self.best {
            None => true,
            Some((_, b)) => {
                if self.higher_is_better {
                    score > b
                } else {
                    score < b
                }
            }
        };
        if better {
            self.best = Some((epoch, score));
            self.since = 0;
        } else {
            self.since += 1;
        }
        better
    }

    fn exhausted(&self) -> bool {
        self.since >= self.patience
    }
}

struct Splits {
    train: Dataset,
    val: Dataset,
}

fn load_splits(manifest: &Manifest, labels: &LabelMap, policy: &CropPadPolicy) -> Result<Splits> {
    let report = validate_manifest(&manifest.records, Some(&manifest.root));
    if let Some(v) = report.violations.first() {
        return Err(Error::Data(format!(
            "manifest has {} violation(s); first: {}",
            report.violations.len(),
            v.message
        )));
    }
    let pick = |s: Split| -> Vec<_> { manifest.split(s).into_iter().cloned().collect() };
    let (train, val) = (pick(Split::Train), pick(Split::Val));
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(
            "training needs nonempty train and val splits".into(),
        ));
    }
    Ok(Splits {
        train: Dataset::from_records(manifest, &train, labels, policy)?,
        val: Dataset::from_records(manifest, &val, labels, policy)?,
    })
}

fn epoch_batches<'a>(
    data: &'a Dataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Box<dyn Iterator<Item = Batch> + 'a> {
    let seed = derive_seed(cfg.seed, SEED_ORDER, epoch as u64);
    if cfg.balanced() {
        Box::new(data.balanced_batches(cfg.batch_size, cfg.per_class, seed))
    } else {
        Box::new(data.batches(cfg.batch_size, Some(seed)))
    }
}

fn collect_grads(
    grads: &mut facedyn_autograd::Gradients<f32>,
    bound: &Bound<'_, f32>,
) -> Vec<Option<ArrayD<f32>>> {
    bound.vars().iter().map(|&v| grads.take(v)).collect()
}

fn nonfinite_params(names: &[String], grads: &[Option<ArrayD<f32>>]) -> Vec<String> {
    names
        .iter()
        .zip(grads)
        .filter(|(_, g)| g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
        .map(|(n, _)| n.clone())
        .collect()
}

fn head_store(head: &ClassifierHead) -> ParamStore<f32> {
    let mut p = ParamStore::new();
    p.insert(HEAD_PARAM, head.weight.clone().into_dyn());
    p
}

fn head_from_store(p: &ParamStore<f32>, cfg: &TrainConfig) -> ClassifierHead {
    ClassifierHead {
        weight: p
            .get(HEAD_PARAM)
            .unwrap()
            .clone()
            .into_dimensionality()
            .unwrap(),
        scale: cfg.cosine_scale,
        label_smoothing: cfg.label_smoothing,
    }
}

fn config_echo(
    cfg: &TrainConfig,
    encoder: &EncoderConfig,
    manifest: &Manifest,
    labels: &LabelMap,
    splits: &Splits,
) -> serde_json::Value {
    serde_json::json!({
        "stage": cfg.stage,
        "train": cfg,
        "encoder": encoder,
        "optimizer": cfg.optimizer(),
        "balanced_sampling": cfg.balanced(),
        "manifest_root": manifest.root,
        "num_train": splits.train.len(),
        "num_val": splits.val.len(),
        "num_classes": labels.len(),
        "label_map_hash": labels.hash(),
    })
}

/// SupCon loss of a whole embedding matrix with an empty queue.
fn supcon_eval(emb: &Array2<f32>, labels: &[usize], cfg: &SupConConfig) -> Result<f64> {
    let g = Graph::<f64>::new();
    let z = crate::objectives::l2_normalize_rows(emb).mapv(f64::from);
    let v = g.constant(z.into_dyn());
    Ok(supcon_loss(v, labels, &mut MemoryQueue::new(0), cfg)?
        .loss
        .item())
}

/// Stage 1: encoder trained under SupCon with the memory queue; the kept
/// checkpoint minimises validation SupCon loss.
pub fn train_stage1(
    manifest: &Manifest,
    encoder_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    out_dir: impl AsRef<Path>,
) -> Result<RunArtifacts> {
    let cfg = TrainConfig {
        stage: Stage::Stage1Supcon,
        ..cfg.clone()
    };
    cfg.validate()?;
    let encoder = Encoder::new(encoder_cfg)?;
    let labels = LabelMap::from_manifest(manifest);
    let splits = load_splits(manifest, &labels, &cfg.policy)?;
    let mut run = RunDir::create(
        out_dir.as_ref(),
        &config_echo(&cfg, encoder_cfg, manifest, &labels, &splits),
        &labels,
    )?;

    let mut params: ParamStore<f32> = encoder
        .init_params(derive_seed(cfg.seed, SEED_INIT, 0))
        .cast();
    let mut opt = AdamW::new(cfg.optimizer(), &params)?;
    let mut queue = MemoryQueue::new(cfg.supcon.queue_capacity);
    let val_labels = splits.val.labels();
    let mut sel = Selector::new(false, cfg.patience);
    let mut history = Vec::new();

    for epoch in 1..=cfg.epochs {
        let mut ctx = ForwardCtx::train(
            encoder_cfg.dropout,
            derive_seed(cfg.seed, SEED_DROPOUT, epoch as u64),
        );
        let (mut total, mut steps, mut anchors, mut batches) = (0.0, 0, 0usize, 0usize);
        for (step, batch) in epoch_batches(&splits.train, &cfg, epoch).enumerate() {
            let g = Graph::<f32>::new();
            let bound = params.bind(&g);
            let x = g.constant(batch.sequences.clone().into_dyn());
            let emb = encoder
                .forward(&bound, x, &batch.mask, &mut ctx)
                .l2_normalize(1e-12);
            let out = run.guard(supcon_loss(emb, &batch.labels, &mut queue, &cfg.supcon), || {
                serde_json::json!({"stage": cfg.stage, "epoch": epoch, "step": step, "batch_indices": batch.indices})
            })?;
            batches += 1;
            anchors += out.valid_anchors;
            if out.valid_anchors == 0 {
                continue;
            }
            let loss = f64::from(out.loss.item());
            let mut grads = g.backward(out.loss);
            let grads = collect_grads(&mut grads, &bound);
            let bad = nonfinite_params(params.names(), &grads);
            if !loss.is_finite() || !bad.is_empty() {
                return Err(run.divergence(serde_json::json!({
                    "stage": cfg.stage, "epoch": epoch, "step": step, "loss": loss.to_string(),
                    "batch_indices": batch.indices, "nonfinite_gradients": bad,
                    "encoder_hash": param_hash(&params),
                })));
            }
            opt.step(&mut params, &grads);
            total += loss;
            steps += 1;
        }
        if epoch == 1 && batches > 0 && (anchors as f64) < 2.0 * batches as f64 {
            warn!(
                "batches average fewer than two anchors with positives; consider balanced sampling"
            );
        }
        let val_emb =
            checkpoint::embed_dataset(&encoder, &params, &splits.val, cfg.eval_batch_size)?;
        let val_loss = run.guard(supcon_eval(&val_emb, &val_labels, &cfg.supcon), || {
            serde_json::json!({"stage": cfg.stage, "epoch": epoch, "encoder_hash": param_hash(&params)})
        })?;
        if !val_loss.is_finite() {
            return Err(run.divergence(serde_json::json!({
                "stage": cfg.stage, "epoch": epoch, "val_loss": val_loss.to_string(),
                "encoder_hash": param_hash(&params),
            })));
        }
        let best = sel.update(epoch, val_loss);
        let row = EpochMetrics {
            epoch,
            train_loss: if steps > 0 { total / steps as f64 } else { 0.0 },
            steps,
            val_loss,
            val_accuracy: None,
            val_macro_f1: None,
            best,
        };
        info!(
            "{} epoch {epoch}: train {:.4} val {:.4}",
            cfg.stage, row.train_loss, val_loss
        );
        run.log(&row)?;
        history.push(row);
        if best {
            Checkpoint {
                stage: cfg.stage,
                epoch,
                encoder_config: encoder_cfg.clone(),
                train_config: cfg.clone(),
                encoder: params.clone(),
                head: None,
                label_map: labels.clone(),
            }
            .save(run.dir.join(CHECKPOINT_FILE))?;
        }
        if sel.exhausted() {
            info!("early stop after epoch {epoch}");
            break;
        }
    }
    let best = sel.best.expect("at least one epoch ran");
    Ok(run.artifacts(history, best))
}

/// Encoder with freshly initialised weights and no head, usable as a
/// stage-2 starting point for control runs.
pub fn random_encoder_checkpoint(
    encoder_cfg: &EncoderConfig,
    labels: &LabelMap,
    seed: u64,
) -> Result<Checkpoint> {
    let encoder = Encoder::new(encoder_cfg)?;
    Ok(Checkpoint {
        stage: Stage::Stage1Supcon,
        epoch: 0,
        encoder_config: encoder_cfg.clone(),
        train_config: TrainConfig {
            seed,
            ..TrainConfig::default()
        },
        encoder: encoder.init_params(derive_seed(seed, SEED_INIT, 0)).cast(),
        head: None,
        label_map: labels.clone(),
    })
}

fn head_metrics(
    head: &ClassifierHead,
    emb: &Array2<f32>,
    labels: &[usize],
    loss: impl Fn(&Array2<f32>) -> Result<f64>,
) -> Result<(f64, f64, f64)> {
    let logits = head.logits(emb)?;
    let pred = argmax_rows(&logits);
    Ok((
        loss(&logits)?,
        accuracy(labels, &pred)?,
        macro_f1(labels, &pred)?,
    ))
}

fn smoothed_ce_value(logits: &Array2<f32>, labels: &[usize], alpha: f64) -> Result<f64> {
    let g = Graph::<f64>::new();
    Ok(smoothed_ce(g.constant(logits.mapv(f64::from).into_dyn()), labels, alpha)?.item())
}

fn focal_value(logits: &Array2<f32>, labels: &[usize], cfg: &FocalConfig) -> Result<f64> {
    let g = Graph::<f64>::new();
    Ok(focal_loss(g.constant(logits.mapv(f64::from).into_dyn()), labels, cfg)?.item())
}

/// Stage 2: cosine classifier on embeddings of a frozen encoder, trained
/// under label-smoothed cross-entropy and selected on validation macro-F1.
pub fn train_stage2(
    manifest: &Manifest,
    stage1: &Checkpoint,
    cfg: &TrainConfig,
    out_dir: impl AsRef<Path>,
) -> Result<RunArtifacts> {
    let cfg = TrainConfig {
        stage: Stage::Stage2Classifier,
        ..cfg.clone()
    };
    cfg.validate()?;
    let labels = stage1.label_map.clone();
    labels.check_covers(manifest.speakers())?;
    let encoder = stage1.build_encoder()?;
    let frozen_hash = stage1.encoder_hash();
    let splits = load_splits(manifest, &labels, &cfg.policy)?;
    let mut echo = config_echo(&cfg, &stage1.encoder_config, manifest, &labels, &splits);
    echo["encoder_hash"] = serde_json::Value::from(frozen_hash.clone());
    echo["label_smoothing"] = serde_json::Value::from(cfg.label_smoothing);
    let mut run = RunDir::create(out_dir.as_ref(), &echo, &labels)?;

    let train_emb = stage1.embed(&splits.train, cfg.eval_batch_size)?;
    let val_emb = stage1.embed(&splits.val, cfg.eval_batch_size)?;
    let (train_labels, val_labels) = (splits.train.labels(), splits.val.labels());

    let head0 = ClassifierHead::new(
        labels.len(),
        encoder.config().embed_dim,
        derive_seed(cfg.seed, SEED_HEAD, 0),
    );
    let mut hp = head_store(&head0);
    let mut opt = AdamW::new(cfg.optimizer(), &hp)?;
    let mut sel = Selector::new(true, cfg.patience);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_emb.nrows()).collect();

    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            SEED_ORDER,
            epoch as u64,
        )));
        let (mut total, mut steps) = (0.0, 0);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let z = train_emb.select(Axis(0), idx);
            let y: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
            let g = Graph::<f32>::new();
            let bound = hp.bind(&g);
            let loss_var = run.guard(
                cosine_logits(
                    g.constant(z.into_dyn()),
                    bound.get(HEAD_PARAM),
                    cfg.cosine_scale,
                )
                .and_then(|l| smoothed_ce(l, &y, cfg.label_smoothing)),
                || serde_json::json!({"stage": cfg.stage, "epoch": epoch, "step": step}),
            )?;
            let loss = f64::from(loss_var.item());
            let mut grads = g.backward(loss_var);
            let grads = collect_grads(&mut grads, &bound);
            let bad = nonfinite_params(hp.names(), &grads);
            if !loss.is_finite() || !bad.is_empty() {
                return Err(run.divergence(serde_json::json!({
                    "stage": cfg.stage, "epoch": epoch, "step": step, "loss": loss.to_string(),
                    "nonfinite_gradients": bad, "head_hash": param_hash(&hp),
                })));
            }
            opt.step(&mut hp, &grads);
            total += loss;
            steps += 1;
        }
        let head = head_from_store(&hp, &cfg);
        let (val_loss, acc, f1) = run.guard(
            head_metrics(&head, &val_emb, &val_labels, |l| {
                smoothed_ce_value(l, &val_labels, cfg.label_smoothing)
            }),
            || serde_json::json!({"stage": cfg.stage, "epoch": epoch}),
        )?;
        let best = sel.update(epoch, f1);
        let row = EpochMetrics {
            epoch,
            train_loss: total / steps.max(1) as f64,
            steps,
            val_loss,
            val_accuracy: Some(acc),
            val_macro_f1: Some(f1),
            best,
        };
        info!(
            "{} epoch {epoch}: train {:.4} val acc {acc:.4} f1 {f1:.4}",
            cfg.stage, row.train_loss
        );
        run.log(&row)?;
        history.push(row);
        if best {
            Checkpoint {
                stage: cfg.stage,
                epoch,
                encoder_config: stage1.encoder_config.clone(),
                train_config: cfg.clone(),
                encoder: stage1.encoder.clone(),
                head: Some(head),
                label_map: labels.clone(),
            }
            .save(run.dir.join(CHECKPOINT_FILE))?;
        }
        if sel.exhausted() {
            break;
        }
    }
    if param_hash(&stage1.encoder) != frozen_hash {
        return Err(Error::Contract(
            "encoder parameters changed during stage 2".into(),
        ));
    }
    let best = sel.best.expect("at least one epoch ran");
    Ok(run.artifacts(history, best))
}

/// Encoder and cosine head trained end to end under focal loss.
pub fn train_joint_focal(
    manifest: &Manifest,
    encoder_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    out_dir: impl AsRef<Path>,
) -> Result<RunArtifacts> {
    let cfg = TrainConfig {
        stage: Stage::JointFocal,
        ..cfg.clone()
    };
    cfg.validate()?;
    let encoder = Encoder::new(encoder_cfg)?;
    let labels = LabelMap::from_manifest(manifest);
    if let Some(w) = &cfg.focal.class_weights {
        if w.len() != labels.len() {
            return Err(Error::Config(format!(
                "{} focal class weights for {} classes",
                w.len(),
                labels.len()
            )));
        }
    }
    let splits = load_splits(manifest, &labels, &cfg.policy)?;
    let mut run = RunDir::create(
        out_dir.as_ref(),
        &config_echo(&cfg, encoder_cfg, manifest, &labels, &splits),
        &labels,
    )?;

    let mut params: ParamStore<f32> = encoder
        .init_params(derive_seed(cfg.seed, SEED_INIT, 0))
        .cast();
    let mut hp = head_store(&ClassifierHead::new(
        labels.len(),
        encoder_cfg.embed_dim,
        derive_seed(cfg.seed, SEED_HEAD, 0),
    ));
    let mut opt = AdamW::new(cfg.optimizer(), &params)?;
    let mut head_opt = AdamW::new(cfg.optimizer(), &hp)?;
    let val_labels = splits.val.labels();
    let mut sel = Selector::new(true, cfg.patience);
    let mut history = Vec::new();

    for epoch in 1..=cfg.epochs {
        let mut ctx = ForwardCtx::train(
            encoder_cfg.dropout,
            derive_seed(cfg.seed, SEED_DROPOUT, epoch as u64),
        );
        let (mut total, mut steps) = (0.0, 0);
        for (step, batch) in epoch_batches(&splits.train, &cfg, epoch).enumerate() {
            let g = Graph::<f32>::new();
            let bound = params.bind(&g);
            let hb = hp.bind(&g);
            let x = g.constant(batch.sequences.clone().into_dyn());
            let emb = encoder.forward(&bound, x, &batch.mask, &mut ctx);
            let loss_var = run.guard(
                cosine_logits(emb, hb.get(HEAD_PARAM), cfg.cosine_scale)
                    .and_then(|l| focal_loss(l, &batch.labels, &cfg.focal)),
                || {
                    serde_json::json!({"stage": cfg.stage, "epoch": epoch, "step": step,
                        "batch_indices": batch.indices, "encoder_hash": param_hash(&params)})
                },
            )?;
            let loss = f64::from(loss_var.item());
            let mut grads = g.backward(loss_var);
            let eg = collect_grads(&mut grads, &bound);
            let hg = collect_grads(&mut grads, &hb);
            let mut bad = nonfinite_params(params.names(), &eg);
            bad.extend(
                nonfinite_params(hp.names(), &hg)
                    .into_iter()
                    .map(|n| format!("head.{n}")),
            );
            if !loss.is_finite() || !bad.is_empty() {
                return Err(run.divergence(serde_json::json!({
                    "stage": cfg.stage, "epoch": epoch, "step": step, "loss": loss.to_string(),
                    "batch_indices": batch.indices, "nonfinite_gradients": bad,
                    "encoder_hash": param_hash(&params),
                })));
            }
            opt.step(&mut params, &eg);
            head_opt.step(&mut hp, &hg);
            total += loss;
            steps += 1;
        }
        let head = head_from_store(&hp, &cfg);
        let val_emb =
            checkpoint::embed_dataset(&encoder, &params, &splits.val, cfg.eval_batch_size)?;
        let (val_loss, acc, f1) = run.guard(
            head_metrics(&head, &val_emb, &val_labels, |l| focal_value(l, &val_labels, &cfg.focal)),
            || serde_json::json!({"stage": cfg.stage, "epoch": epoch, "encoder_hash": param_hash(&params)}),
        )?;
        let best = sel.update(epoch, f1);
        let row = EpochMetrics {
            epoch,
            train_loss: total / steps.max(1) as f64,
            steps,
            val_loss,
            val_accuracy: Some(acc),
            val_macro_f1: Some(f1),
            best,
        };
        info!(
            "{} epoch {epoch}: train {:.4} val acc {acc:.4} f1 {f1:.4}",
            cfg.stage, row.train_loss
        );
        run.log(&row)?;
        history.push(row);
        if best {
            Checkpoint {
                stage: cfg.stage,
                epoch,
                encoder_config: encoder_cfg.clone(),
                train_config: cfg.clone(),
                encoder: params.clone(),
                head: Some(head),
                label_map: labels.clone(),
            }
            .save(run.dir.join(CHECKPOINT_FILE))?;
        }
        if sel.exhausted() {
            break;
        }
    }
    let best = sel.best.expect("at least one epoch ran");
    Ok(run.artifacts(history, best))
}
