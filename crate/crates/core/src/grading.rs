//! Answer extraction, grading and per-cell summaries.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::backend::UsageSource;
use crate::dataset::DatasetKind;
use crate::epi::{EpiError, TechniqueSummary};
use crate::technique::{marginalize, Aggregation};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GradeError {
    #[error("cannot summarize an empty record set")]
    Empty,
    #[error("records mix cells: expected {expected}, found {found}")]
    Heterogeneous { expected: String, found: String },
    #[error("not a decimal number: {0:?}")]
    BadDecimal(String),
    #[error(transparent)]
    Epi(#[from] EpiError),
}

/// Exact decimal in canonical text form: no leading zeros in the integer
/// part, no trailing zeros in the fraction, no `-0`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Decimal(String);

impl Decimal {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Parses a plain or thousands-separated decimal, ignoring a leading
    /// currency sign, e.g. `"$1,000.50"` -> `1000.5`.
    pub fn parse_loose(raw: &str) -> Result<Self, GradeError> {
        let cleaned: String = raw
            .trim()
            .trim_end_matches(['.', ',', ';', ':', '!', '?'])
            .chars()
            .filter(|&ch| ch != ',' && ch != '$' && !ch.is_whitespace())
            .collect();
        cleaned.parse()
    }
}

impl FromStr for Decimal {
    type Err = GradeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GradeError::BadDecimal(s.to_owned());
        let (negative, body) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s.strip_prefix('+').unwrap_or(s)),
        };
        let (int, frac) = body.split_once('.').unwrap_or((body, ""));
        if int.is_empty() && frac.is_empty() {
            return Err(bad());
        }
        if !int.bytes().chain(frac.bytes()).all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let int = int.trim_start_matches('0');
        let frac = frac.trim_end_matches('0');
        let mut out = String::new();
        if negative && !(int.is_empty() && frac.is_empty()) {
            out.push('-');
        }
        out.push_str(if int.is_empty() { "0" } else { int });
        if !frac.is_empty() {
            out.push('.');
            out.push_str(frac);
        }
        Ok(Decimal(out))
    }
}

impl fmt::Display for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A normalized answer token.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Answer {
    /// Uppercase choice letter.
    Choice(char),
    Number(Decimal),
    /// Nothing parseable was declared.
    NoAnswer,
}

impl Answer {
    pub fn choice(letter: char) -> Option<Self> {
        letter
            .is_ascii_alphabetic()
            .then(|| Answer::Choice(letter.to_ascii_uppercase()))
    }

    pub fn is_no_answer(&self) -> bool {
        matches!(self, Answer::NoAnswer)
    }

    /// Serialized token, `None` for no-answer.
    pub fn token(&self) -> Option<String> {
        match self {
            Answer::Choice(c) => Some(c.to_string()),
            Answer::Number(d) => Some(d.to_string()),
            Answer::NoAnswer => None,
        }
    }

    /// Inverse of [`Answer::token`].
    pub fn from_token(token: Option<&str>) -> Result<Self, GradeError> {
        match token {
            None => Ok(Answer::NoAnswer),
            Some(t) => {
                let mut chars = t.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) if c.is_ascii_alphabetic() => {
                        Ok(Answer::Choice(c.to_ascii_uppercase()))
                    }
                    _ => t.parse().map(Answer::Number),
                }
            }
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.token() {
            Some(t) => f.write_str(&t),
            None => f.write_str("<no-answer>"),
        }
    }
}

impl Serialize for Answer {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.token().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Answer {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let token = Option::<String>::deserialize(deserializer)?;
        Answer::from_token(token.as_deref()).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParenStyle {
    /// `(A)`
    Single,
    /// `((A))`
    Double,
}

/// How a dataset's responses are parsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnswerFormat {
    MultipleChoice(ParenStyle),
    Numeric,
}

impl AnswerFormat {
    pub fn for_dataset(kind: DatasetKind) -> Self {
        match kind {
            DatasetKind::Gsm8k => AnswerFormat::Numeric,
            DatasetKind::Mmlu => AnswerFormat::MultipleChoice(ParenStyle::Double),
            DatasetKind::Csqa | DatasetKind::Dqa => {
                AnswerFormat::MultipleChoice(ParenStyle::Single)
            }
        }
    }

    pub fn extract(self, text: &str) -> Answer {
        match self {
            AnswerFormat::MultipleChoice(style) => extract_mc(text, style),
            AnswerFormat::Numeric => extract_numeric(text),
        }
    }
}

fn declared_single() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)final\s+answer\s*(?:=|:|is)?\s*\(?\(\s*([a-z])\s*\)\)?").unwrap()
    })
}

fn declared_double() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)final\s+answer\s*(?:=|:|is)?\s*\(\(\s*([a-z])\s*\)\)").unwrap()
    })
}

fn bare_letter() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(\s*([A-Za-z])\s*\)").unwrap())
}

fn number() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?|\.\d+").unwrap())
}

fn last_letter(re: &Regex, text: &str) -> Option<Answer> {
    re.captures_iter(text)
        .last()
        .and_then(|c| c[1].chars().next())
        .and_then(Answer::choice)
}

/// Pulls the declared choice letter out of a response.
///
/// The last `Final Answer = (X)` declaration in the required parenthesis
/// style wins. Without one, the last bare `(X)` anywhere in the text is used.
pub fn extract_mc(text: &str, style: ParenStyle) -> Answer {
    let declared = match style {
        ParenStyle::Single => declared_single(),
        ParenStyle::Double => declared_double(),
    };
    last_letter(declared, text)
        .or_else(|| last_letter(bare_letter(), text))
        .unwrap_or(Answer::NoAnswer)
}

/// The last number in the response as an exact decimal.
pub fn extract_numeric(text: &str) -> Answer {
    let Some(m) = number().find_iter(text).last() else {
        return Answer::NoAnswer;
    };
    let before = text[..m.start()].trim_end_matches('$');
    let negative = before.ends_with('-')
        && !before[..before.len() - 1]
            .chars()
            .next_back()
            .is_some_and(|c| c.is_ascii_alphanumeric());
    let digits: String = m.as_str().chars().filter(|&c| c != ',').collect();
    let signed = if negative {
        format!("-{digits}")
    } else {
        digits
    };
    signed
        .parse()
        .map(Answer::Number)
        .unwrap_or(Answer::NoAnswer)
}

/// One backend completion inside an [`EvalRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub usage_source: UsageSource,
    pub extracted: Answer,
}

impl SampleRecord {
    pub fn total_tokens(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }
}

/// One graded question for one (technique, dataset, model) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    pub technique: String,
    pub model: String,
    pub dataset: DatasetKind,
    pub samples: Vec<SampleRecord>,
    pub extracted: Answer,
    pub gold: Answer,
    pub correct: bool,
    pub total_tokens: u64,
}

/// Identity of a grid cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub technique: String,
    pub dataset: DatasetKind,
    pub model: String,
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.technique, self.dataset, self.model)
    }
}

impl EvalRecord {
    /// Extracts each sample's answer, aggregates them and grades against `gold`.
    #[allow(clippy::too_many_arguments)]
    pub fn grade(
        question_id: impl Into<String>,
        technique: impl Into<String>,
        model: impl Into<String>,
        dataset: DatasetKind,
        aggregation: Aggregation,
        responses: Vec<(String, u64, u64, UsageSource)>,
        gold: Answer,
    ) -> Self {
        let format = AnswerFormat::for_dataset(dataset);
        let samples: Vec<SampleRecord> = responses
            .into_iter()
            .map(
                |(text, input_tokens, output_tokens, usage_source)| SampleRecord {
                    extracted: format.extract(&text),
                    text,
                    input_tokens,
                    output_tokens,
                    usage_source,
                },
            )
            .collect();
        let mut record = Self {
            question_id: question_id.into(),
            technique: technique.into(),
            model: model.into(),
            dataset,
            samples,
            extracted: Answer::NoAnswer,
            gold,
            correct: false,
            total_tokens: 0,
        };
        record.regrade(aggregation);
        record
    }

    /// Recomputes extraction, aggregate answer, correctness and token total
    /// from the raw sample texts.
    pub fn regrade(&mut self, aggregation: Aggregation) {
        let format = AnswerFormat::for_dataset(self.dataset);
        for s in &mut self.samples {
            s.extracted = format.extract(&s.text);
        }
        let answers: Vec<Answer> = self.samples.iter().map(|s| s.extracted.clone()).collect();
        self.extracted = match aggregation {
            Aggregation::Single => answers.first().cloned().unwrap_or(Answer::NoAnswer),
            Aggregation::MajorityVote => marginalize(&answers),
        };
        // no-answer is never correct, even against a malformed gold
        self.correct = !self.extracted.is_no_answer() && self.extracted == self.gold;
        self.total_tokens = self.samples.iter().map(SampleRecord::total_tokens).sum();
    }

    pub fn cell(&self) -> CellKey {
        CellKey {
            technique: self.technique.clone(),
            dataset: self.dataset,
            model: self.model.clone(),
        }
    }
}

/// Provenance of the token counts within one cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UsageMix {
    Reported,
    Counted,
    Mixed,
}

impl UsageMix {
    pub fn as_str(self) -> &'static str {
        match self {
            UsageMix::Reported => "reported",
            UsageMix::Counted => "counted",
            UsageMix::Mixed => "mixed",
        }
    }
}

/// `A = correct / n`, `T = mean total tokens per record`.
pub fn summarize(records: &[EvalRecord]) -> Result<TechniqueSummary<f64>, GradeError> {
    let first = records.first().ok_or(GradeError::Empty)?;
    let key = first.cell();
    let mut correct = 0usize;
    let mut tokens = 0u64;
    for r in records {
        let k = r.cell();
        if k != key {
            return Err(GradeError::Heterogeneous {
                expected: key.to_string(),
                found: k.to_string(),
            });
        }
        correct += usize::from(r.correct);
        tokens += r.total_tokens;
    }
    let n = records.len();
    Ok(TechniqueSummary::new(
        correct as f64 / n as f64,
        tokens as f64 / n as f64,
        n,
    )?)
}

/// Summary of one cell together with its key and token provenance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub key: CellKey,
    pub summary: TechniqueSummary<f64>,
    pub usage: UsageMix,
}

pub fn summarize_cell(records: &[EvalRecord]) -> Result<CellSummary, GradeError> {
    let summary = summarize(records)?;
    let sources = records
        .iter()
        .flat_map(|r| r.samples.iter().map(|s| s.usage_source));
    let (mut reported, mut counted) = (false, false);
    for s in sources {
        match s {
            UsageSource::Reported => reported = true,
            UsageSource::Counted => counted = true,
        }
    }
    let usage = match (reported, counted) {
        (_, false) => UsageMix::Reported,
        (false, true) => UsageMix::Counted,
        (true, true) => UsageMix::Mixed,
    };
    Ok(CellSummary {
        key: records[0].cell(),
        summary,
        usage,
    })
}

/// Groups records by cell and summarizes each, in key order.
pub fn summarize_all(records: &[EvalRecord]) -> Result<Vec<CellSummary>, GradeError> {
    let mut cells: std::collections::BTreeMap<CellKey, Vec<EvalRecord>> = Default::default();
    for r in records {
        cells.entry(r.cell()).or_default().push(r.clone());
    }
    cells.values().map(|rs| summarize_cell(rs)).collect()
}
