//! Closed-set evaluation, drift-to-noise analysis and the length and
//! enrollment sweeps.

pub mod dnr;
pub mod metrics;
pub mod plot;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use dnr::{
    average_ranks, bootstrap_mean_ci, compute_dnr, dnr_recall_analysis, spearman, DnrBin, DnrEntry,
    DnrRecallTable, DnrReport, DEFAULT_BOOTSTRAP_ITERS, DNR_EPSILON,
};
pub use metrics::{
    accuracy, confusion_matrix, macro_f1, metrics_report, per_class_f1, per_class_recall,
    Confusion, GroupMetrics, MetricsReport,
};

use crate::error::{Error, Result};
use crate::seqdata::{CropPadPolicy, Dataset, Manifest, Split, UtteranceRecord};
use crate::trainer::Checkpoint;

const EVAL_BATCH: usize = 256;

fn test_records(manifest: &Manifest, ck: &Checkpoint) -> Result<Vec<UtteranceRecord>> {
    let records: Vec<UtteranceRecord> = manifest.split(Split::Test).into_iter().cloned().collect();
    if records.is_empty() {
        return Err(Error::Data("manifest has no test records".into()));
    }
    if let Some(r) = records
        .iter()
        .find(|r| ck.label_map.get(&r.speaker_id).is_none())
    {
        return Err(Error::LabelMap(format!(
            "test speaker {} was not seen in training",
            r.speaker_id
        )));
    }
    Ok(records)
}

/// Accuracy and macro-F1 of the checkpoint's classifier on the test split,
/// overall and per group.
pub fn evaluate(
    manifest: &Manifest,
    ck: &Checkpoint,
    policy: &CropPadPolicy,
) -> Result<MetricsReport> {
    let records = test_records(manifest, ck)?;
    evaluate_records(manifest, ck, &records, policy)
}

fn evaluate_records(
    manifest: &Manifest,
    ck: &Checkpoint,
    records: &[UtteranceRecord],
    policy: &CropPadPolicy,
) -> Result<MetricsReport> {
    let data = Dataset::from_records(manifest, records, &ck.label_map, policy)?;
    let pred = ck.predict(&data, EVAL_BATCH)?;
    metrics_report(
        &data.labels(),
        &pred,
        &ck.label_map,
        &manifest.speaker_groups(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthRow {
    pub length: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub groups: BTreeMap<String, GroupMetrics>,
}

/// Re-evaluates the test split under each crop/pad length.
pub fn length_analysis(
    manifest: &Manifest,
    ck: &Checkpoint,
    lengths: &[usize],
) -> Result<Vec<LengthRow>> {
    let records = test_records(manifest, ck)?;
    lengths
        .iter()
        .map(|&l| {
            let r = evaluate_records(manifest, ck, &records, &CropPadPolicy::new(l)?)?;
            Ok(LengthRow {
                length: l,
                accuracy: r.accuracy,
                macro_f1: r.macro_f1,
                groups: r.groups,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrollmentRow {
    pub train_utterances: usize,
    pub persons: usize,
    /// Mean over persons of their test recall.
    pub mean_accuracy: f64,
    pub speakers: Vec<String>,
}

/// Groups test identities by their number of training utterances.
pub fn enrollment_analysis(
    manifest: &Manifest,
    ck: &Checkpoint,
    policy: &CropPadPolicy,
) -> Result<Vec<EnrollmentRow>> {
    let report = evaluate(manifest, ck, policy)?;
    Ok(enrollment_table(manifest, &report))
}

/// Enrollment grouping of an existing report.
pub fn enrollment_table(manifest: &Manifest, report: &MetricsReport) -> Vec<EnrollmentRow> {
    let mut train_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in manifest.split(Split::Train) {
        *train_counts.entry(&r.speaker_id).or_default() += 1;
    }
    let mut groups: BTreeMap<usize, Vec<(&str, f64)>> = BTreeMap::new();
    for (speaker, &recall) in &report.per_speaker_recall {
        let n = train_counts.get(speaker.as_str()).copied().unwrap_or(0);
        groups.entry(n).or_default().push((speaker, recall));
    }
    groups
        .into_iter()
        .map(|(n, people)| EnrollmentRow {
            train_utterances: n,
            persons: people.len(),
            mean_accuracy: people.iter().map(|p| p.1).sum::<f64>() / people.len() as f64,
            speakers: people.iter().map(|p| p.0.to_string()).collect(),
        })
        .collect()
}
