use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Evaluation partition: GA draws every split from one session, GB spans sessions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "GA")]
    Ga,
    #[serde(rename = "GB")]
    Gb,
    #[serde(rename = "none")]
    None,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Ga => "GA",
            Group::Gb => "GB",
            Group::None => "none",
        })
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub session_id: String,
    pub split: Split,
    pub group: Group,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub num_frames: usize,
    pub fps: f64,
}

/// Records plus the directory their relative paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<UtteranceRecord>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<UtteranceRecord>) -> Self {
        Self {
            root: root.into(),
            records,
        }
    }

    pub fn resolve(&self, record: &UtteranceRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.root.join(&record.path)
        }
    }

    pub fn split(&self, split: Split) -> Vec<&UtteranceRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn speakers(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.speaker_id.as_str()).collect()
    }

    /// Group label per speaker (first record wins; validation flags conflicts).
    pub fn speaker_groups(&self) -> BTreeMap<String, Group> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            out.entry(r.speaker_id.clone()).or_insert(r.group);
        }
        out
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{}:{}", path.display(), n + 1), e))?;
        records.push(rec);
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Manifest { root, records })
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[UtteranceRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::json("manifest row", e))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    DuplicateId,
    GaMultipleSessions,
    GbSingleSession,
    MixedGroup,
    MissingFile,
    BadRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub speaker_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub utterance_id: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSummary {
    pub group: Group,
    pub sessions: Vec<String>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SpeakerSummary {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub num_records: usize,
    pub num_speakers: usize,
    pub num_ga: usize,
    pub num_gb: usize,
    pub speakers: BTreeMap<String, SpeakerSummary>,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}

/// Checks group/session consistency, id uniqueness and (when `root` is given)
/// file presence. Content problems land in the report, never in `Err`.
pub fn validate_manifest(records: &[UtteranceRecord], root: Option<&Path>) -> ValidationReport {
    let mut violations = Vec::new();
    let mut seen = HashSet::new();
    let mut per_speaker: BTreeMap<String, (BTreeSet<Group>, BTreeSet<String>, [usize; 3])> =
        BTreeMap::new();

    for r in records {
        if !seen.insert((r.speaker_id.as_str(), r.utterance_id.as_str())) {
            violations.push(Violation {
                kind: ViolationKind::DuplicateId,
                speaker_id: r.speaker_id.clone(),
                utterance_id: Some(r.utterance_id.clone()),
                message: format!("utterance {} listed more than once", r.utterance_id),
            });
        }
        if r.num_frames == 0 || !(r.fps.is_finite() && r.fps > 0.0) {
            violations.push(Violation {
                kind: ViolationKind::BadRecord,
                speaker_id: r.speaker_id.clone(),
                utterance_id: Some(r.utterance_id.clone()),
                message: format!("num_frames={} fps={}", r.num_frames, r.fps),
            });
        }
        if let Some(root) = root {
            let p = if r.path.is_absolute() {
                r.path.clone()
            } else {
                root.join(&r.path)
            };
            if !p.is_file() {
                violations.push(Violation {
                    kind: ViolationKind::MissingFile,
                    speaker_id: r.speaker_id.clone(),
                    utterance_id: Some(r.utterance_id.clone()),
                    message: format!("{} not found", p.display()),
                });
            }
        }
        let e = per_speaker.entry(r.speaker_id.clone()).or_default();
        e.0.insert(r.group);
        e.1.insert(r.session_id.clone());
        e.2[match r.split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }] += 1;
    }

    let mut speakers = BTreeMap::new();
    for (spk, (groups, sessions, counts)) in per_speaker {
        let group = *groups.iter().next().unwrap();
        if groups.len() > 1 {
            violations.push(Violation {
                kind: ViolationKind::MixedGroup,
                speaker_id: spk.clone(),
                utterance_id: None,
                message: format!("records disagree on group: {groups:?}"),
            });
        }
        match group {
            Group::Ga if sessions.len() > 1 => violations.push(Violation {
                kind: ViolationKind::GaMultipleSessions,
                speaker_id: spk.clone(),
                utterance_id: None,
                message: format!("GA speaker spans {} sessions", sessions.len()),
            }),
            Group::Gb if sessions.len() < 2 => violations.push(Violation {
                kind: ViolationKind::GbSingleSession,
                speaker_id: spk.clone(),
                utterance_id: None,
                message: "GB speaker needs at least 2 sessions".into(),
            }),
            _ => {}
        }
        speakers.insert(
            spk,
            SpeakerSummary {
                group,
                sessions: sessions.into_iter().collect(),
                train: counts[0],
                val: counts[1],
                test: counts[2],
            },
        );
    }

    ValidationReport {
        num_records: records.len(),
        num_speakers: speakers.len(),
        num_ga: speakers.values().filter(|s| s.group == Group::Ga).count(),
        num_gb: speakers.values().filter(|s| s.group == Group::Gb).count(),
        speakers,
        violations,
    }
}
