//! Best-ever pseudo-label store.
//!
//! For every unlabeled sample the bank keeps the highest-scoring teacher
//! prediction seen so far. A new teacher prediction replaces the stored label
//! only when it outscores both the student's prediction and the stored label;
//! a sample without an entry counts as scoring −∞.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::imaging::{load_image, Image, ImagingError};
use crate::iqa::{IqaError, QualityScorer};

/// Labels are stored on a 16-bit grid so they survive the PNG round trip bit for bit.
pub const LABEL_LEVELS: u32 = 65535;
const INDEX_FILE: &str = "index.tsv";
const INDEX_HEADER: [&str; 5] = ["sample_id", "score", "step", "scorer_name", "image_filename"];

#[derive(Debug, thiserror::Error)]
pub enum BankError {
    #[error("scorer failed: {0}")]
    ScorerFailure(#[from] IqaError),
    #[error("i/o failure on {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("corrupt bank index: {0}")]
    CorruptIndex(String),
    #[error("invalid sample id {0:?}")]
    InvalidId(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

pub type Result<T> = std::result::Result<T, BankError>;

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub sample_id: String,
    pub label: Image,
    pub score: f64,
    pub updated_at_step: u64,
    pub scorer_name: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateReason {
    BeatsBoth,
    LosesToStudent,
    LosesToBank,
    Ties,
}

impl UpdateReason {
    pub fn as_str(self) -> &'static str {
        match self {
            UpdateReason::BeatsBoth => "beats_both",
            UpdateReason::LosesToStudent => "loses_to_student",
            UpdateReason::LosesToBank => "loses_to_bank",
            UpdateReason::Ties => "ties",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateDecision {
    pub admitted: bool,
    pub reason: UpdateReason,
    pub z_t: f64,
    pub z_s: f64,
    /// Score of the stored label, `−∞` when the sample has no entry.
    pub z_b: f64,
}

/// Admission rule on precomputed scores.
pub fn decide(z_t: f64, z_s: f64, z_b: f64) -> UpdateDecision {
    let reason = if z_t > z_s && z_t > z_b {
        UpdateReason::BeatsBoth
    } else if z_t < z_s {
        UpdateReason::LosesToStudent
    } else if z_t < z_b {
        UpdateReason::LosesToBank
    } else {
        UpdateReason::Ties
    };
    UpdateDecision { admitted: reason == UpdateReason::BeatsBoth, reason, z_t, z_s, z_b }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReliableBank {
    entries: BTreeMap<String, BankEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankSummary {
    pub entries: usize,
    pub mean_score: f64,
    pub min_score: f64,
    pub max_score: f64,
    pub last_step: u64,
}

impl ReliableBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<(&Image, f64)> {
        self.entries.get(sample_id).map(|e| (&e.label, e.score))
    }

    pub fn entry(&self, sample_id: &str) -> Option<&BankEntry> {
        self.entries.get(sample_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &BankEntry> {
        self.entries.values()
    }

    /// Scores both predictions (and the stored label when its cached score
    /// came from a different scorer) and replaces the entry when the teacher
    /// beats both. The teacher output is first snapped to the storage grid, so
    /// `z_t` is exactly the score of the label that would be stored. On a
    /// scorer failure the bank is left untouched.
    pub fn update(
        &mut self,
        sample_id: &str,
        teacher_out: &Image,
        student_out: &Image,
        scorer: &dyn QualityScorer,
        step: u64,
    ) -> Result<UpdateDecision> {
        let label = teacher_out.quantized(LABEL_LEVELS);
        let z_t = scorer.score(&label)?;
        let z_s = scorer.score(student_out)?;
        let z_b = match self.entries.get(sample_id) {
            Some(e) if e.scorer_name == scorer.name() => e.score,
            Some(e) => scorer.score(&e.label)?,
            None => f64::NEG_INFINITY,
        };
        if let Some(e) = self.entries.get_mut(sample_id) {
            if e.scorer_name != scorer.name() {
                e.score = z_b;
                e.scorer_name = scorer.name().to_string();
            }
        }
        let decision = decide(z_t, z_s, z_b);
        if decision.admitted {
            self.insert(BankEntry {
                sample_id: sample_id.to_string(),
                label,
                score: z_t,
                updated_at_step: step,
                scorer_name: scorer.name().to_string(),
            })?;
        }
        Ok(decision)
    }

    /// Applies the admission rule to externally computed scores.
    pub fn update_scored(
        &mut self,
        sample_id: &str,
        label: &Image,
        z_t: f64,
        z_s: f64,
        scorer_name: &str,
        step: u64,
    ) -> Result<UpdateDecision> {
        let z_b = self.entries.get(sample_id).map_or(f64::NEG_INFINITY, |e| e.score);
        let decision = decide(z_t, z_s, z_b);
        if decision.admitted {
            self.insert(BankEntry {
                sample_id: sample_id.to_string(),
                label: label.quantized(LABEL_LEVELS),
                score: z_t,
                updated_at_step: step,
                scorer_name: scorer_name.to_string(),
            })?;
        }
        Ok(decision)
    }

    fn insert(&mut self, entry: BankEntry) -> Result<()> {
        if entry.sample_id.is_empty() || entry.sample_id.contains(['\t', '\n', '\r']) {
            return Err(BankError::InvalidId(entry.sample_id));
        }
        self.entries.insert(entry.sample_id.clone(), entry);
        Ok(())
    }

    pub fn summary(&self) -> Option<BankSummary> {
        if self.entries.is_empty() {
            return None;
        }
        let scores: Vec<f64> = self.entries.values().map(|e| e.score).collect();
        Some(BankSummary {
            entries: scores.len(),
            mean_score: scores.iter().sum::<f64>() / scores.len() as f64,
            min_score: scores.iter().cloned().fold(f64::INFINITY, f64::min),
            max_score: scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            last_step: self.entries.values().map(|e| e.updated_at_step).max().unwrap_or(0),
        })
    }

    /// Writes `index.tsv` plus one 16-bit PNG per entry into `dir`, replacing
    /// whatever a previous persist left there.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        let io = |p: &Path, e: std::io::Error| BankError::Io { path: p.display().to_string(), reason: e.to_string() };
        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
        let staging = tempfile::Builder::new().prefix(".bank-").tempdir_in(parent).map_err(|e| io(parent, e))?;

        let index_path = staging.path().join(INDEX_FILE);
        let mut w = csv::WriterBuilder::new()
            .delimiter(b'\t')
            .quote_style(csv::QuoteStyle::Never)
            .from_path(&index_path)
            .map_err(|e| BankError::Io { path: index_path.display().to_string(), reason: e.to_string() })?;
        let csv_io = |e: csv::Error| BankError::Io { path: INDEX_FILE.into(), reason: e.to_string() };
        w.write_record(INDEX_HEADER).map_err(csv_io)?;
        for e in self.entries.values() {
            let file = image_filename(&e.sample_id);
            e.label.save_png16(&staging.path().join(&file))?;
            w.write_record([
                e.sample_id.as_str(),
                &e.score.to_string(),
                &e.updated_at_step.to_string(),
                &e.scorer_name,
                &file,
            ])
            .map_err(csv_io)?;
        }
        w.flush().map_err(|e| io(&index_path, e))?;
        drop(w);

        let old: Option<PathBuf> = if dir.exists() {
            let tomb = parent.join(format!(".bank-old-{}", std::process::id()));
            if tomb.exists() {
                fs::remove_dir_all(&tomb).map_err(|e| io(&tomb, e))?;
            }
            fs::rename(dir, &tomb).map_err(|e| io(dir, e))?;
            Some(tomb)
        } else {
            None
        };
        let staged = staging.keep();
        fs::rename(&staged, dir).map_err(|e| io(dir, e))?;
        if let Some(tomb) = old {
            fs::remove_dir_all(&tomb).map_err(|e| io(&tomb, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        if !index_path.is_file() {
            return Err(BankError::Io { path: index_path.display().to_string(), reason: "index not found".into() });
        }
        let mut r = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .quoting(false)
            .from_path(&index_path)
            .map_err(|e| BankError::CorruptIndex(e.to_string()))?;
        let header = r.headers().map_err(|e| BankError::CorruptIndex(e.to_string()))?;
        if header.iter().collect::<Vec<_>>() != INDEX_HEADER {
            return Err(BankError::CorruptIndex(format!("unexpected header {header:?}")));
        }
        let mut bank = Self::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| BankError::CorruptIndex(e.to_string()))?;
            let id = rec[0].to_string();
            let bad = |what: &str| BankError::CorruptIndex(format!("{id}: bad {what}"));
            let score: f64 = rec[1].parse().map_err(|_| bad("score"))?;
            let step: u64 = rec[2].parse().map_err(|_| bad("step"))?;
            let file = dir.join(&rec[4]);
            if !file.is_file() {
                return Err(BankError::CorruptIndex(format!("image for sample {id} is missing ({})", rec[4].to_string())));
            }
            let label = load_image(&file).map_err(|e| BankError::CorruptIndex(format!("{id}: {e}")))?;
            if bank.entries.contains_key(&id) {
                return Err(BankError::CorruptIndex(format!("duplicate sample {id}")));
            }
            bank.insert(BankEntry { sample_id: id, label, score, updated_at_step: step, scorer_name: rec[3].to_string() })?;
        }
        Ok(bank)
    }
}

fn image_filename(sample_id: &str) -> String {
    format!("{}.png", &hex::encode(Sha256::digest(sample_id.as_bytes()))[..20])
}
