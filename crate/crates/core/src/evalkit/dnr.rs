use std::collections::BTreeMap;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqdata::ShapeStatsRow;

pub const DNR_EPSILON: f64 = 1e-6;
pub const DEFAULT_BOOTSTRAP_ITERS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnrEntry {
    pub speaker_id: String,
    pub dnr: f64,
    pub sessions: usize,
    /// Median pairwise distance between session means.
    pub drift: f64,
    /// Mean norm of the session standard deviations.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnrReport {
    pub epsilon: f64,
    /// Sorted by speaker id.
    pub entries: Vec<DnrEntry>,
    /// Speakers seen in only one session.
    pub excluded: Vec<String>,
}

impl DnrReport {
    pub fn get(&self, speaker: &str) -> Option<&DnrEntry> {
        self.entries.iter().find(|e| e.speaker_id == speaker)
    }
}

fn l2(a: impl Iterator<Item = f64>) -> f64 {
    a.map(|v| v * v).sum::<f64>().sqrt()
}

/// Median, averaging the two middle values of an even count.
pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Drift-to-noise ratio per speaker: the median distance between session
/// shape means over the mean session spread plus `epsilon`.
pub fn compute_dnr(rows: &[ShapeStatsRow], epsilon: f64) -> Result<DnrReport> {
    let dim = rows.first().map_or(0, |r| r.mean.len());
    let mut by_speaker: BTreeMap<&str, BTreeMap<&str, &ShapeStatsRow>> = BTreeMap::new();
    for r in rows {
        if r.mean.len() != dim || r.std.len() != dim {
            return Err(Error::Data(format!(
                "shape stats for {}/{} have {} mean and {} std entries, expected {dim}",
                r.speaker_id,
                r.session_id,
                r.mean.len(),
                r.std.len()
            )));
        }
        if r.std.iter().any(|&s| !(s >= 0.0)) || r.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Data(format!(
                "shape stats for {}/{} contain negative or non-finite values",
                r.speaker_id, r.session_id
            )));
        }
        if by_speaker
            .entry(&r.speaker_id)
            .or_default()
            .insert(&r.session_id, r)
            .is_some()
        {
            return Err(Error::Data(format!(
                "duplicate shape stats for {}/{}",
                r.speaker_id, r.session_id
            )));
        }
    }
    let mut entries = Vec::new();
    let mut excluded = Vec::new();
    for (speaker, sessions) in by_speaker {
        if sessions.len() < 2 {
            excluded.push(speaker.to_string());
            continue;
        }
        let s: Vec<&ShapeStatsRow> = sessions.into_values().collect();
        let mut dists = Vec::new();
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                dists.push(l2(s[i].mean.iter().zip(&s[j].mean).map(|(a, b)| a - b)));
            }
        }
        let drift = median(&mut dists);
        let noise = s.iter().map(|r| l2(r.std.iter().copied())).sum::<f64>() / s.len() as f64;
        entries.push(DnrEntry {
            speaker_id: speaker.to_string(),
            dnr: drift / (noise + epsilon),
            sessions: s.len(),
            drift,
            noise,
        });
    }
    Ok(DnrReport {
        epsilon,
        entries,
        excluded,
    })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of the rank vectors; zero when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    if x.len() < 2 {
        return 0.0;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Linear interpolation between order statistics of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// 95% percentile bootstrap interval of the mean.
pub fn bootstrap_mean_ci(values: &[f64], iters: usize, rng: &mut impl Rng) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mut means: Vec<f64> = (0..iters.max(1))
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    (percentile(&means, 0.025), percentile(&means, 0.975))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnrBin {
    pub dnr_low: f64,
    pub dnr_high: f64,
    pub persons: usize,
    pub mean_recall: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub speakers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnrRecallTable {
    pub bins: Vec<DnrBin>,
    pub spearman: f64,
    pub bootstrap_iters: usize,
    pub notes: Vec<String>,
}

/// Equal-count DNR bins with per-bin mean recall and bootstrap intervals.
/// Bins left with fewer than two persons are merged into a neighbour.
pub fn dnr_recall_analysis(
    dnr: &DnrReport,
    recall: &BTreeMap<String, f64>,
    num_bins: usize,
    bootstrap_iters: usize,
    seed: u64,
) -> Result<DnrRecallTable> {
    if num_bins == 0 {
        return Err(Error::Config("at least one DNR bin is required".into()));
    }
    let mut people: Vec<(f64, &str, f64)> = Vec::with_capacity(dnr.entries.len());
    for e in &dnr.entries {
        let r = recall
            .get(&e.speaker_id)
            .ok_or_else(|| Error::Data(format!("no recall for speaker {}", e.speaker_id)))?;
        people.push((e.dnr, &e.speaker_id, *r));
    }
    people.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));

    let n = people.len();
    let k = num_bins.min(n.max(1));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut start = 0;
    for b in 0..k {
        let size = n / k + usize::from(b < n % k);
        groups.push((start..start + size).collect());
        start += size;
    }
    let mut notes = Vec::new();
    while groups.len() > 1 {
        let Some(i) = groups.iter().position(|g| g.len() < 2) else {
            break;
        };
        let small = groups.remove(i);
        let target = if i > 0 { i - 1 } else { 0 };
        notes.push(format!(
            "bin {i} had {} person(s) and was merged into its {} neighbour",
            small.len(),
            if i > 0 { "lower" } else { "upper" }
        ));
        groups[target].extend(small);
        groups[target].sort_unstable();
    }
    if n > 0 && n < 2 {
        notes.push("fewer than two persons in total".into());
        warn!("DNR analysis over a single person");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bins = groups
        .into_iter()
        .filter(|g| !g.is_empty())
        .map(|g| {
            let recalls: Vec<f64> = g.iter().map(|&i| people[i].2).collect();
            let mean = recalls.iter().sum::<f64>() / recalls.len() as f64;
            let (lo, hi) = bootstrap_mean_ci(&recalls, bootstrap_iters, &mut rng);
            DnrBin {
                dnr_low: people[g[0]].0,
                dnr_high: people[*g.last().unwrap()].0,
                persons: g.len(),
                mean_recall: mean,
                ci_low: lo,
                ci_high: hi,
                speakers: g.iter().map(|&i| people[i].1.to_string()).collect(),
            }
        })
        .collect();
    let xs: Vec<f64> = people.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = people.iter().map(|p| p.2).collect();
    Ok(DnrRecallTable {
        bins,
        spearman: spearman(&xs, &ys),
        bootstrap_iters,
        notes,
    })
}
