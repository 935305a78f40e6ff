use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqdata::{Group, LabelMap};

/// Rows are true classes, columns predictions.
pub fn confusion_matrix(
    y_true: &[usize],
    y_pred: &[usize],
    num_classes: usize,
) -> Result<Array2<usize>> {
    check_pairs(y_true, y_pred)?;
    let mut m = Array2::zeros((num_classes, num_classes));
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::Data(format!(
                "label {} outside {num_classes} classes",
                t.max(p)
            )));
        }
        m[[t, p]] += 1;
    }
    Ok(m)
}

fn check_pairs(y_true: &[usize], y_pred: &[usize]) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Data(format!(
            "{} targets but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    Ok(())
}

/// Fraction of exact matches; zero on empty input.
pub fn accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    check_pairs(y_true, y_pred)?;
    if y_true.is_empty() {
        return Ok(0.0);
    }
    let hits = y_true.iter().zip(y_pred).filter(|(t, p)| t == p).count();
    Ok(hits as f64 / y_true.len() as f64)
}

/// Per-class F1 for every class that occurs in `y_true`.
pub fn per_class_f1(y_true: &[usize], y_pred: &[usize]) -> Result<BTreeMap<usize, f64>> {
    check_pairs(y_true, y_pred)?;
    let classes: BTreeSet<usize> = y_true.iter().copied().collect();
    let mut tp: BTreeMap<usize, usize> = BTreeMap::new();
    let mut fp: BTreeMap<usize, usize> = BTreeMap::new();
    let mut fn_: BTreeMap<usize, usize> = BTreeMap::new();
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t == p {
            *tp.entry(t).or_default() += 1;
        } else {
            *fp.entry(p).or_default() += 1;
            *fn_.entry(t).or_default() += 1;
        }
    }
    Ok(classes
        .into_iter()
        .map(|c| {
            let tp = tp.get(&c).copied().unwrap_or(0) as f64;
            let denom = 2.0 * tp
                + fp.get(&c).copied().unwrap_or(0) as f64
                + fn_.get(&c).copied().unwrap_or(0) as f64;
            (c, if denom > 0.0 { 2.0 * tp / denom } else { 0.0 })
        })
        .collect())
}

/// Unweighted mean of per-class F1 over the classes present in `y_true`.
pub fn macro_f1(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let f1 = per_class_f1(y_true, y_pred)?;
    if f1.is_empty() {
        return Ok(0.0);
    }
    Ok(f1.values().sum::<f64>() / f1.len() as f64)
}

/// Recall of each class present in `y_true`.
pub fn per_class_recall(y_true: &[usize], y_pred: &[usize]) -> Result<BTreeMap<usize, f64>> {
    check_pairs(y_true, y_pred)?;
    let mut seen: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&t, &p) in y_true.iter().zip(y_pred) {
        let e = seen.entry(t).or_default();
        e.1 += 1;
        if t == p {
            e.0 += 1;
        }
    }
    Ok(seen
        .into_iter()
        .map(|(c, (hit, n))| (c, hit as f64 / n as f64))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub num_samples: usize,
    pub num_speakers: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_speaker: String,
    pub predicted_speaker: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_samples: usize,
    pub num_speakers: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Keyed by "GA" / "GB"; groups without test samples are absent.
    pub groups: BTreeMap<String, GroupMetrics>,
    pub per_speaker_recall: BTreeMap<String, f64>,
    /// Most frequent off-diagonal cells, largest first.
    pub top_confusions: Vec<Confusion>,
}

const TOP_CONFUSIONS: usize = 10;

/// Overall and per-group metrics. `groups` maps speaker ids to their partition;
/// speakers missing from it count only towards the overall numbers.
pub fn metrics_report(
    y_true: &[usize],
    y_pred: &[usize],
    labels: &LabelMap,
    groups: &BTreeMap<String, Group>,
) -> Result<MetricsReport> {
    let cm = confusion_matrix(y_true, y_pred, labels.len())?;
    let name = |c: usize| labels.speaker(c).unwrap_or("?").to_string();

    let mut by_group: BTreeMap<Group, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if let Some(&g) = groups.get(&name(t)) {
            if g != Group::None {
                let e = by_group.entry(g).or_default();
                e.0.push(t);
                e.1.push(p);
            }
        }
    }
    let mut group_metrics = BTreeMap::new();
    for (g, (t, p)) in by_group {
        group_metrics.insert(
            g.to_string(),
            GroupMetrics {
                num_samples: t.len(),
                num_speakers: t.iter().collect::<BTreeSet<_>>().len(),
                accuracy: accuracy(&t, &p)?,
                macro_f1: macro_f1(&t, &p)?,
            },
        );
    }

    let mut off: Vec<(usize, usize, usize)> = cm
        .indexed_iter()
        .filter(|((t, p), &n)| t != p && n > 0)
        .map(|((t, p), &n)| (t, p, n))
        .collect();
    off.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

    Ok(MetricsReport {
        num_samples: y_true.len(),
        num_speakers: y_true.iter().collect::<BTreeSet<_>>().len(),
        accuracy: accuracy(y_true, y_pred)?,
        macro_f1: macro_f1(y_true, y_pred)?,
        groups: group_metrics,
        per_speaker_recall: per_class_recall(y_true, y_pred)?
            .into_iter()
            .map(|(c, r)| (name(c), r))
            .collect(),
        top_confusions: off
            .into_iter()
            .take(TOP_CONFUSIONS)
            .map(|(t, p, count)| Confusion {
                true_speaker: name(t),
                predicted_speaker: name(p),
                count,
            })
            .collect(),
    })
}
