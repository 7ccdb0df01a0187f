//! Zero-shot prompting techniques: templates, answer-format suffixes and
//! multi-sample aggregation.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetKind;
use crate::grading::Answer;

/// Placeholder substituted with the question text.
pub const PLACEHOLDER: &str = "<question>";

pub const STANDARD: &str = "standard";
pub const COT: &str = "cot";
pub const SELF_CONSISTENCY: &str = "self_consistency";
pub const TOT: &str = "tot";
pub const THOT: &str = "thot";
pub const S2A: &str = "s2a";

/// Built-in technique ids in report order.
pub const BUILTIN_IDS: [&str; 6] = [COT, SELF_CONSISTENCY, TOT, THOT, STANDARD, S2A];

const SELF_CONSISTENCY_SAMPLES: usize = 3;
const SELF_CONSISTENCY_TEMPERATURE: f64 = 0.7;

const COT_TEMPLATE: &str = "<question>. Let's think step-by-step.";

const TOT_TEMPLATE: &str = "Imagine three different experts are answering this question.
All experts will write down 1 step of their thinking,
then share it with the group.
Then all experts will go on to the next step, etc.
If any expert realizes they're wrong at any point, then they leave.
The question is <question>.";

const S2A_TEMPLATE: &str = "Given the following text by a user, extract the part that is unbiased and not their opinion,
so that using that text alone would be good context for providing an unbiased answer to
the question portion of the text.
Please include the actual question or query that the user is asking. Separate this
into two categories labeled with \u{201c}Unbiased text context (includes all content except user\u{2019}s
bias):\u{201d} and \u{201c}Question/Query (does not include user bias/preference):After such, use this new unbiased text to answer the proposed question\u{201d}. Text by User: {question}')\u{201d}.
Text by User: <question>";

const THOT_TEMPLATE: &str = "Walk me through this context in manageable parts step by step, summarizing and analyzing as we go.
<question>";

const MC_SUFFIX_SINGLE: &str = "End your answer in this exact format: Final Answer = (LETTER) ex. Final Answer (B). \
The letter you are selecting for your final answer must be surrounded by 2 parentheses, ex. (A). Only do this once.";

const MC_SUFFIX_DOUBLE: &str = "End your answer in this exact format: Final Answer = ((LETTER)) ex. Final Answer ((B)). \
The letter you are selecting for your final answer must be surrounded by 2 parentheses on each side, ex. ((A)). Only do this once.";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TechniqueError {
    #[error("template for {id:?} has {found} `<question>` placeholders, expected exactly 1")]
    Placeholder { id: String, found: usize },
    #[error("technique {id:?}: {message}")]
    Invalid { id: String, message: String },
    #[error("empty question")]
    EmptyQuestion,
    #[error("template file line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown technique {0:?}")]
    Unknown(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Single,
    MajorityVote,
}

/// Answer-format instruction appended to a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuffixPolicy {
    None,
    McSingleParen,
    McDoubleParen,
}

impl SuffixPolicy {
    pub fn for_dataset(kind: DatasetKind) -> Self {
        match kind {
            DatasetKind::Gsm8k => SuffixPolicy::None,
            DatasetKind::Mmlu => SuffixPolicy::McDoubleParen,
            DatasetKind::Csqa | DatasetKind::Dqa => SuffixPolicy::McSingleParen,
        }
    }

    pub fn text(self) -> Option<&'static str> {
        match self {
            SuffixPolicy::None => None,
            SuffixPolicy::McSingleParen => Some(MC_SUFFIX_SINGLE),
            SuffixPolicy::McDoubleParen => Some(MC_SUFFIX_DOUBLE),
        }
    }
}

/// A prompting technique.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TechniqueSpec {
    id: String,
    template: String,
    samples_per_query: usize,
    aggregation: Aggregation,
    temperature: f64,
    /// Whether the dataset's answer-format suffix is appended.
    answer_suffix: bool,
}

impl TechniqueSpec {
    pub fn new(
        id: impl Into<String>,
        template: impl Into<String>,
        samples_per_query: usize,
        temperature: f64,
        answer_suffix: bool,
    ) -> Result<Self, TechniqueError> {
        let id = id.into();
        let template = template.into();
        let invalid = |message: &str| TechniqueError::Invalid {
            id: id.clone(),
            message: message.to_owned(),
        };
        if id.is_empty()
            || !id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(invalid("id must be nonempty ASCII [A-Za-z0-9_-]"));
        }
        let found = template.matches(PLACEHOLDER).count();
        if found != 1 {
            return Err(TechniqueError::Placeholder { id, found });
        }
        if samples_per_query == 0 {
            return Err(invalid("samples_per_query must be positive"));
        }
        if BUILTIN_IDS.contains(&id.as_str()) {
            let expected = if id == SELF_CONSISTENCY {
                SELF_CONSISTENCY_SAMPLES
            } else {
                1
            };
            if samples_per_query != expected {
                return Err(invalid(&format!(
                    "built-in technique takes {expected} sample(s)"
                )));
            }
        }
        if !(temperature.is_finite() && temperature >= 0.0) {
            return Err(invalid("temperature must be finite and nonnegative"));
        }
        let aggregation = if samples_per_query > 1 {
            Aggregation::MajorityVote
        } else {
            Aggregation::Single
        };
        Ok(Self {
            id,
            template,
            samples_per_query,
            aggregation,
            temperature,
            answer_suffix,
        })
    }

    pub fn builtin(id: &str) -> Option<Self> {
        let (template, samples, temperature) = match id {
            STANDARD => (PLACEHOLDER, 1, 0.0),
            COT => (COT_TEMPLATE, 1, 0.0),
            SELF_CONSISTENCY => (
                COT_TEMPLATE,
                SELF_CONSISTENCY_SAMPLES,
                SELF_CONSISTENCY_TEMPERATURE,
            ),
            TOT => (TOT_TEMPLATE, 1, 0.0),
            THOT => (THOT_TEMPLATE, 1, 0.0),
            S2A => (S2A_TEMPLATE, 1, 0.0),
            _ => return None,
        };
        Some(
            Self::new(id, template, samples, temperature, true)
                .expect("built-in templates are valid"),
        )
    }

    pub fn all_builtin() -> Vec<Self> {
        BUILTIN_IDS
            .iter()
            .map(|id| Self::builtin(id).unwrap())
            .collect()
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn samples_per_query(&self) -> usize {
        self.samples_per_query
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn answer_suffix(&self) -> bool {
        self.answer_suffix
    }

    pub fn suffix_policy(&self, kind: DatasetKind) -> SuffixPolicy {
        if self.answer_suffix {
            SuffixPolicy::for_dataset(kind)
        } else {
            SuffixPolicy::None
        }
    }
}

/// A fully rendered prompt for one sample of one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RenderedPrompt {
    pub technique: String,
    pub question_id: String,
    pub text: String,
    pub sample_index: usize,
}

/// Renders `samples_per_query` prompts for one question. Multi-sample
/// techniques send the identical prompt for each sample.
pub fn render(
    spec: &TechniqueSpec,
    question_id: &str,
    question: &str,
    kind: DatasetKind,
) -> Result<Vec<RenderedPrompt>, TechniqueError> {
    if question.trim().is_empty() {
        return Err(TechniqueError::EmptyQuestion);
    }
    let found = spec.template.matches(PLACEHOLDER).count();
    if found != 1 {
        return Err(TechniqueError::Placeholder {
            id: spec.id.clone(),
            found,
        });
    }
    let mut text = spec.template.replacen(PLACEHOLDER, question, 1);
    if let Some(suffix) = spec.suffix_policy(kind).text() {
        text.push('\n');
        text.push_str(suffix);
    }
    Ok((0..spec.samples_per_query)
        .map(|sample_index| RenderedPrompt {
            technique: spec.id.clone(),
            question_id: question_id.to_owned(),
            text: text.clone(),
            sample_index,
        })
        .collect())
}

/// The modal answer. Ties go to the answer sampled first; no-answer votes
/// like any other token. An empty list yields no-answer.
pub fn marginalize(answers: &[Answer]) -> Answer {
    let mut counts: HashMap<&Answer, usize> = HashMap::new();
    for a in answers {
        *counts.entry(a).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    answers
        .iter()
        .find(|a| counts[a] == best)
        .cloned()
        .unwrap_or(Answer::NoAnswer)
}

/// Parses a technique template file.
///
/// Each technique starts with a header line
/// `[technique <id> samples=N temperature=T suffix=on|off]` (all keys
/// optional) and its template is every following line up to the next header,
/// with trailing blank lines dropped. Lines before the first header that are
/// blank or start with `#` are ignored.
pub fn parse_templates(text: &str) -> Result<Vec<TechniqueSpec>, TechniqueError> {
    struct Pending {
        line: usize,
        id: String,
        samples: usize,
        temperature: f64,
        suffix: bool,
        body: Vec<String>,
    }

    fn finish(p: Pending) -> Result<TechniqueSpec, TechniqueError> {
        let mut body = p.body;
        while body.last().is_some_and(|l| l.trim().is_empty()) {
            body.pop();
        }
        TechniqueSpec::new(p.id, body.join("\n"), p.samples, p.temperature, p.suffix).map_err(|e| {
            TechniqueError::Syntax {
                line: p.line,
                message: e.to_string(),
            }
        })
    }

    let mut specs = Vec::new();
    let mut current: Option<Pending> = None;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let syntax = |message: String| TechniqueError::Syntax {
            line: line_no,
            message,
        };
        if let Some(header) = line
            .trim_end()
            .strip_prefix("[technique")
            .and_then(|h| h.strip_suffix(']'))
        {
            if let Some(p) = current.take() {
                specs.push(finish(p)?);
            }
            let mut words = header.split_whitespace();
            let id = words
                .next()
                .ok_or_else(|| syntax("missing technique id".into()))?;
            let mut pending = Pending {
                line: line_no,
                id: id.to_owned(),
                samples: 1,
                temperature: 0.0,
                suffix: true,
                body: Vec::new(),
            };
            for kv in words {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| syntax(format!("expected key=value, got {kv:?}")))?;
                match k {
                    "samples" => {
                        pending.samples = v
                            .parse()
                            .map_err(|_| syntax(format!("bad samples {v:?}")))?
                    }
                    "temperature" => {
                        pending.temperature = v
                            .parse()
                            .map_err(|_| syntax(format!("bad temperature {v:?}")))?
                    }
                    "suffix" => {
                        pending.suffix = match v {
                            "on" => true,
                            "off" => false,
                            _ => return Err(syntax(format!("suffix must be on|off, got {v:?}"))),
                        }
                    }
                    _ => return Err(syntax(format!("unknown key {k:?}"))),
                }
            }
            current = Some(pending);
        } else if let Some(p) = current.as_mut() {
            p.body.push(line.to_owned());
        } else if !(line.trim().is_empty() || line.starts_with('#')) {
            return Err(syntax(
                "text before the first [technique ...] header".into(),
            ));
        }
    }
    if let Some(p) = current {
        specs.push(finish(p)?);
    }
    Ok(specs)
}

pub fn load_templates(path: impl AsRef<Path>) -> Result<Vec<TechniqueSpec>, TechniqueError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| TechniqueError::Io(format!("{}: {e}", path.display())))?;
    parse_templates(&text)
}

/// Serializes specs in the template file format.
pub fn format_templates(specs: &[TechniqueSpec]) -> String {
    let mut out = String::new();
    for s in specs {
        let _ = writeln!(
            out,
            "[technique {} samples={} temperature={} suffix={}]",
            s.id,
            s.samples_per_query,
            s.temperature,
            if s.answer_suffix { "on" } else { "off" }
        );
        out.push_str(&s.template);
        out.push_str("\n\n");
    }
    out
}
