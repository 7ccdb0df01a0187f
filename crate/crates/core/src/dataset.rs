//! Benchmark questions in a single canonical line-delimited format, and
//! deterministic sampling of evaluation subsets.
//!
//! Each line of a dataset file is one JSON object:
//!
//! ```text
//! {"id":"csqa-1","dataset":"csqa","question":"...","choices":[{"letter":"A","text":"ignore"}],"gold":"A"}
//! ```
//!
//! `choices` is present exactly for multiple-choice datasets and `subject`
//! exactly for MMLU. GSM8K gold answers may carry thousands separators or a
//! currency sign; they are stored canonically.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grading::{Answer, Decimal};

/// Evaluation size for GSM8K, CSQA and DQA.
pub const UNIFORM_SAMPLE: usize = 200;
/// Questions drawn from each MMLU subject.
pub const MMLU_PER_SUBJECT: usize = 4;
pub const MMLU_SUBJECTS: usize = 57;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: field `{field}`: {message}")]
    Schema {
        line: usize,
        field: &'static str,
        message: String,
    },
    #[error("line {line}: duplicate question id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("need {needed} questions, source has {available}")]
    Insufficient { needed: usize, available: usize },
    #[error("subjects with fewer than {needed} questions: {subjects:?}")]
    ShortSubjects {
        needed: usize,
        subjects: Vec<String>,
    },
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Gsm8k,
    Csqa,
    Mmlu,
    Dqa,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 4] = [
        DatasetKind::Csqa,
        DatasetKind::Mmlu,
        DatasetKind::Gsm8k,
        DatasetKind::Dqa,
    ];

    pub fn is_multiple_choice(self) -> bool {
        !matches!(self, DatasetKind::Gsm8k)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Gsm8k => "gsm8k",
            DatasetKind::Csqa => "csqa",
            DatasetKind::Mmlu => "mmlu",
            DatasetKind::Dqa => "dqa",
        }
    }

    /// Column heading used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            DatasetKind::Gsm8k => "GSM8K",
            DatasetKind::Csqa => "CSQA",
            DatasetKind::Mmlu => "MMLU",
            DatasetKind::Dqa => "DQA",
        }
    }

    /// Sampling quota used for this dataset in a full evaluation.
    pub fn default_quota(self) -> Quota {
        match self {
            DatasetKind::Mmlu => Quota::PerSubject(MMLU_PER_SUBJECT),
            _ => Quota::Uniform(UNIFORM_SAMPLE),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gsm8k" => Ok(DatasetKind::Gsm8k),
            "csqa" => Ok(DatasetKind::Csqa),
            "mmlu" => Ok(DatasetKind::Mmlu),
            "dqa" => Ok(DatasetKind::Dqa),
            _ => Err(DatasetError::UnknownDataset(s.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub letter: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub id: String,
    pub dataset: DatasetKind,
    pub question: String,
    pub choices: Option<Vec<Choice>>,
    pub gold: Answer,
    pub subject: Option<String>,
}

impl Question {
    /// Question text as sent to a model; choices are appended inline as
    /// `A) first, B) second.`
    pub fn prompt_text(&self) -> String {
        match &self.choices {
            Some(choices) if !choices.is_empty() => {
                let listed: Vec<String> = choices
                    .iter()
                    .map(|c| format!("{}) {}", c.letter, c.text))
                    .collect();
                format!("{} {}.", self.question, listed.join(", "))
            }
            _ => self.question.clone(),
        }
    }
}

// Wire shape; field order is the canonical order.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuestionLine {
    id: String,
    dataset: String,
    question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    choices: Option<Vec<Choice>>,
    gold: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subject: Option<String>,
}

fn validate(
    line: usize,
    raw: QuestionLine,
    expected: DatasetKind,
) -> Result<Question, DatasetError> {
    let schema = |field: &'static str, message: String| DatasetError::Schema {
        line,
        field,
        message,
    };
    let dataset: DatasetKind = raw
        .dataset
        .parse()
        .map_err(|_| schema("dataset", format!("unknown dataset {:?}", raw.dataset)))?;
    if dataset != expected {
        return Err(schema(
            "dataset",
            format!("expected {expected}, found {dataset}"),
        ));
    }
    if raw.id.trim().is_empty() {
        return Err(schema("id", "empty id".into()));
    }
    if raw.question.trim().is_empty() {
        return Err(schema("question", "empty question".into()));
    }
    let gold = if dataset.is_multiple_choice() {
        let choices = raw
            .choices
            .as_ref()
            .filter(|c| !c.is_empty())
            .ok_or_else(|| schema("choices", "multiple-choice record without choices".into()))?;
        let mut seen = HashSet::new();
        for c in choices {
            let mut chars = c.letter.chars();
            match (chars.next(), chars.next()) {
                (Some(ch), None) if ch.is_ascii_uppercase() => {}
                _ => {
                    return Err(schema(
                        "choices",
                        format!("letter {:?} is not a single uppercase letter", c.letter),
                    ))
                }
            }
            if !seen.insert(c.letter.as_str()) {
                return Err(schema("choices", format!("repeated letter {:?}", c.letter)));
            }
        }
        let g = raw.gold.trim().to_ascii_uppercase();
        if !seen.contains(g.as_str()) {
            return Err(schema(
                "gold",
                format!("{:?} is not one of the listed letters", raw.gold),
            ));
        }
        Answer::choice(g.chars().next().unwrap()).unwrap()
    } else {
        if raw.choices.is_some() {
            return Err(schema(
                "choices",
                "numeric dataset must not list choices".into(),
            ));
        }
        Answer::Number(Decimal::parse_loose(&raw.gold).map_err(|e| schema("gold", e.to_string()))?)
    };
    match (dataset, &raw.subject) {
        (DatasetKind::Mmlu, None) => {
            return Err(schema("subject", "MMLU record without subject".into()))
        }
        (DatasetKind::Mmlu, Some(s)) if s.trim().is_empty() => {
            return Err(schema("subject", "empty subject".into()))
        }
        (DatasetKind::Mmlu, Some(_)) | (_, None) => {}
        (_, Some(_)) => {
            return Err(schema(
                "subject",
                format!("{dataset} records carry no subject"),
            ))
        }
    }
    Ok(Question {
        id: raw.id,
        dataset,
        question: raw.question,
        choices: raw.choices,
        gold,
        subject: raw.subject,
    })
}

/// Parses canonical records from a reader. Blank lines are skipped.
pub fn read_questions<R: Read>(
    reader: R,
    kind: DatasetKind,
) -> Result<Vec<Question>, DatasetError> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| DatasetError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: QuestionLine = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let q = validate(line_no, raw, kind)?;
        if !ids.insert(q.id.clone()) {
            return Err(DatasetError::DuplicateId {
                line: line_no,
                id: q.id,
            });
        }
        out.push(q);
    }
    Ok(out)
}

pub fn load(path: impl AsRef<Path>, kind: DatasetKind) -> Result<Vec<Question>, DatasetError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_questions(file, kind)
}

/// Canonical serialization of one question, without the trailing newline.
pub fn to_line(q: &Question) -> String {
    let raw = QuestionLine {
        id: q.id.clone(),
        dataset: q.dataset.as_str().to_owned(),
        question: q.question.clone(),
        choices: q.choices.clone(),
        gold: q.gold.token().unwrap_or_default(),
        subject: q.subject.clone(),
    };
    serde_json::to_string(&raw).expect("question serializes")
}

pub fn write_questions<W: Write>(mut writer: W, questions: &[Question]) -> std::io::Result<()> {
    for q in questions {
        writeln!(writer, "{}", to_line(q))?;
    }
    writer.flush()
}

/// How many questions to draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quota {
    All,
    Uniform(usize),
    PerSubject(usize),
}

/// Draws the standard evaluation subset for `kind`.
pub fn sample(
    questions: &[Question],
    kind: DatasetKind,
    seed: u64,
) -> Result<Vec<Question>, DatasetError> {
    sample_with(questions, kind.default_quota(), seed)
}

/// Seeded shuffle then prefix-take, without replacement. The selection is
/// returned in source order.
pub fn sample_with(
    questions: &[Question],
    quota: Quota,
    seed: u64,
) -> Result<Vec<Question>, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = match quota {
        Quota::All => (0..questions.len()).collect(),
        Quota::Uniform(k) => {
            if questions.len() < k {
                return Err(DatasetError::Insufficient {
                    needed: k,
                    available: questions.len(),
                });
            }
            let mut idx: Vec<usize> = (0..questions.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(k);
            idx
        }
        Quota::PerSubject(k) => {
            let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, q) in questions.iter().enumerate() {
                by_subject
                    .entry(q.subject.as_deref().unwrap_or(""))
                    .or_default()
                    .push(i);
            }
            let short: Vec<String> = by_subject
                .iter()
                .filter(|(_, v)| v.len() < k)
                .map(|(s, _)| s.to_string())
                .collect();
            if !short.is_empty() {
                return Err(DatasetError::ShortSubjects {
                    needed: k,
                    subjects: short,
                });
            }
            let mut all = Vec::with_capacity(by_subject.len() * k);
            for (_, mut idx) in by_subject {
                idx.shuffle(&mut rng);
                all.extend_from_slice(&idx[..k]);
            }
            all
        }
    };
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| questions[i].clone()).collect())
}
