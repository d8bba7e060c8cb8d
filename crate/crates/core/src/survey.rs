//! Realism survey: session construction, response validation and storage,
//! and the accuracy / confusion / explanation-term report.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const SYNTHETIC_PER_SESSION: usize = 20;
pub const REAL_PER_SESSION: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Synthetic,
}

impl Label {
    fn index(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Synthetic => 1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Label::Real),
            "synthetic" => Ok(Label::Synthetic),
            other => Err(Error::Input(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionEntry {
    pub image_id: String,
    pub truth: Label,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurveySession {
    pub session_id: String,
    pub seed: u64,
    pub entries: Vec<SessionEntry>,
}

/// What a participant's browser receives: ids in display order, nothing else.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientSession {
    pub session_id: String,
    pub images: Vec<String>,
}

impl SurveySession {
    pub fn client_view(&self) -> ClientSession {
        ClientSession {
            session_id: self.session_id.clone(),
            images: self.entries.iter().map(|e| e.image_id.clone()).collect(),
        }
    }

    pub fn truth(&self) -> BTreeMap<String, Label> {
        self.entries.iter().map(|e| (e.image_id.clone(), e.truth)).collect()
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.entries.iter().any(|e| e.image_id == image_id)
    }
}

/// Draws 20 synthetic and 10 real ids without replacement and shuffles them.
pub fn create_session(synthetic_pool: &[String], real_pool: &[String], seed: u64) -> Result<SurveySession> {
    if synthetic_pool.len() < SYNTHETIC_PER_SESSION || real_pool.len() < REAL_PER_SESSION {
        return Err(Error::Size(format!(
            "need at least {SYNTHETIC_PER_SESSION} synthetic and {REAL_PER_SESSION} real images, got {} and {}",
            synthetic_pool.len(),
            real_pool.len()
        )));
    }
    let mut r = rng::rng(seed);
    let mut entries: Vec<SessionEntry> = rng::sample_indices(&mut r, synthetic_pool.len(), SYNTHETIC_PER_SESSION)
        .into_iter()
        .map(|i| SessionEntry { image_id: synthetic_pool[i].clone(), truth: Label::Synthetic })
        .chain(
            rng::sample_indices(&mut r, real_pool.len(), REAL_PER_SESSION)
                .into_iter()
                .map(|i| SessionEntry { image_id: real_pool[i].clone(), truth: Label::Real }),
        )
        .collect();
    entries.shuffle(&mut r);
    Ok(SurveySession { session_id: format!("session-{seed}"), seed, entries })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyResponse {
    pub participant_id: String,
    pub image_id: String,
    pub guess: Label,
    pub confidence: i64,
    #[serde(default)]
    pub explanation: Option<String>,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

fn field(field: &str, message: &str) -> FieldError {
    FieldError { field: field.into(), message: message.into() }
}

impl SurveyResponse {
    /// Checks the response against the session; all problems are reported.
    pub fn validate(&self, session: &SurveySession) -> std::result::Result<(), Vec<FieldError>> {
        let mut errs = Vec::new();
        if self.participant_id.trim().is_empty() {
            errs.push(field("participant_id", "must not be empty"));
        }
        if !session.contains(&self.image_id) {
            errs.push(field("image_id", "not part of this session"));
        }
        if !(1..=5).contains(&self.confidence) {
            errs.push(field("confidence", "must be an integer from 1 to 5"));
        }
        let explained = self.explanation.as_deref().is_some_and(|e| !e.trim().is_empty());
        if self.guess == Label::Synthetic && !explained {
            errs.push(field("explanation", "required when the guess is synthetic"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

/// Append-only response file, one CSV record per line:
/// `participant,image_id,guess,confidence,"explanation",timestamp`.
#[derive(Debug, Clone)]
pub struct ResponseLog {
    path: PathBuf,
}

impl ResponseLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        ResponseLog { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, response: &SurveyResponse) -> Result<()> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .quote_style(csv::QuoteStyle::NonNumeric)
            .from_writer(Vec::new());
        let explanation = response.explanation.clone().unwrap_or_default().replace(['\n', '\r'], " ");
        w.write_record([
            response.participant_id.as_str(),
            response.image_id.as_str(),
            &response.guess.to_string(),
            &response.confidence.to_string(),
            &explanation,
            &response.timestamp.to_string(),
        ])
        .map_err(|e| Error::format(&self.path, e.to_string()))?;
        let bytes = w.into_inner().map_err(|e| Error::format(&self.path, e.to_string()))?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&self.path, e))
    }

    /// Every record in file order; a missing file reads as empty.
    pub fn read_all(&self) -> Result<Vec<SurveyResponse>> {
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        let bad = |m: String| Error::format(&self.path, m);
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(&self.path)
            .map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            if rec.len() != 6 {
                return Err(bad(format!("record {} has {} fields", line + 1, rec.len())));
            }
            let explanation = rec[4].to_string();
            out.push(SurveyResponse {
                participant_id: rec[0].to_string(),
                image_id: rec[1].to_string(),
                guess: rec[2].parse().map_err(|_| bad(format!("record {}: bad guess", line + 1)))?,
                confidence: rec[3].parse().map_err(|_| bad(format!("record {}: bad confidence", line + 1)))?,
                explanation: (!explanation.is_empty()).then_some(explanation),
                timestamp: rec[5].parse().map_err(|_| bad(format!("record {}: bad timestamp", line + 1)))?,
            });
        }
        Ok(out)
    }
}

/// One response per (participant, image): the latest timestamp wins, and
/// equal timestamps resolve by content so input order never matters.
pub fn latest_responses(responses: &[SurveyResponse]) -> Vec<SurveyResponse> {
    let mut best: BTreeMap<(String, String), &SurveyResponse> = BTreeMap::new();
    let rank = |r: &SurveyResponse| (r.timestamp, r.guess, r.confidence, r.explanation.clone());
    for r in responses {
        let key = (r.participant_id.clone(), r.image_id.clone());
        match best.get(&key) {
            Some(cur) if rank(cur) >= rank(r) => {}
            _ => {
                best.insert(key, r);
            }
        }
    }
    best.into_values().cloned().collect()
}

const STOPWORDS: &[&str] = &[
    "a", "about", "all", "also", "an", "and", "any", "are", "as", "at", "be", "because", "been", "but", "by", "can",
    "could", "did", "do", "does", "for", "from", "had", "has", "have", "i", "if", "in", "into", "is", "it", "its",
    "just", "like", "looks", "look", "me", "more", "my", "no", "not", "of", "on", "or", "so", "some", "than", "that",
    "the", "their", "them", "there", "these", "they", "this", "those", "to", "too", "very", "was", "were", "which",
    "with", "would",
];

/// Lowercased, punctuation-stripped, whitespace-split tokens minus stopwords.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .filter(|t| !STOPWORDS.contains(t))
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageAccuracy {
    pub truth: Label,
    pub responses: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurveyReport {
    pub responses: usize,
    pub overall_accuracy: f64,
    /// `None` when no response concerned a real image.
    pub accuracy_real: Option<f64>,
    pub accuracy_synthetic: Option<f64>,
    pub per_image: BTreeMap<String, ImageAccuracy>,
    /// Rows are the truth (real, synthetic), columns the guess; each row
    /// with responses sums to 1, rows without responses are zero.
    pub confusion: [[f64; 2]; 2],
    pub confusion_counts: [[usize; 2]; 2],
    /// Descending count, ties alphabetical.
    pub term_frequency: Vec<(String, usize)>,
}

/// Aggregates the latest response per (participant, image).
pub fn report(responses: &[SurveyResponse], truth: &BTreeMap<String, Label>) -> Result<SurveyReport> {
    let latest = latest_responses(responses);
    if latest.is_empty() {
        return Err(Error::Input("no survey responses to report".into()));
    }
    let mut counts = [[0usize; 2]; 2];
    let mut per_image: BTreeMap<String, ImageAccuracy> = BTreeMap::new();
    let mut terms: HashMap<String, usize> = HashMap::new();
    for r in &latest {
        let t = *truth
            .get(&r.image_id)
            .ok_or_else(|| Error::Input(format!("response for unknown image {:?}", r.image_id)))?;
        counts[t.index()][r.guess.index()] += 1;
        let entry = per_image
            .entry(r.image_id.clone())
            .or_insert(ImageAccuracy { truth: t, responses: 0, correct: 0, accuracy: 0.0 });
        entry.responses += 1;
        entry.correct += usize::from(r.guess == t);
        if let Some(text) = &r.explanation {
            for tok in tokenize(text) {
                *terms.entry(tok).or_default() += 1;
            }
        }
    }
    for e in per_image.values_mut() {
        e.accuracy = e.correct as f64 / e.responses as f64;
    }
    let row_total = |i: usize| counts[i][0] + counts[i][1];
    let class_acc = |i: usize| (row_total(i) > 0).then(|| counts[i][i] as f64 / row_total(i) as f64);
    let mut confusion = [[0.0; 2]; 2];
    for i in 0..2 {
        if row_total(i) > 0 {
            for j in 0..2 {
                confusion[i][j] = counts[i][j] as f64 / row_total(i) as f64;
            }
        }
    }
    let mut term_frequency: Vec<(String, usize)> = terms.into_iter().collect();
    term_frequency.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(SurveyReport {
        responses: latest.len(),
        overall_accuracy: (counts[0][0] + counts[1][1]) as f64 / latest.len() as f64,
        accuracy_real: class_acc(0),
        accuracy_synthetic: class_acc(1),
        per_image,
        confusion,
        confusion_counts: counts,
        term_frequency,
    })
}

/// `image_id,truth,responses,correct,accuracy` rows, sorted by id.
pub fn per_image_csv(report: &SurveyReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image_id", "truth", "responses", "correct", "accuracy"]).expect("in-memory write");
    for (id, a) in &report.per_image {
        w.write_record([
            id.clone(),
            a.truth.to_string(),
            a.responses.to_string(),
            a.correct.to_string(),
            format!("{:.6}", a.accuracy),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}
