//! Strict parser and canonical renderer for two-part judge outputs:
//! a `<think>` reasoning block followed by an `<answer>` block.
//!
//! Tag names and answer literals are matched exactly. Dimension names are
//! matched case-insensitively with internal whitespace folded. When an
//! output has several defects, the one with the smallest byte offset is
//! reported; envelope (tag) defects win ties.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::schema::{
    label_from_totals, DimScores, MosVector, PreferenceLabel, SchemaError, TaskKind,
};

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

const SUMMARY_HEADER: &str = "[Comparison summary]";
const ASPECT_HEADER: &str = "[Aspect descriptions]";
const NARRATIVE_HEADER: &str = "[Natural language description]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FormatErrorKind {
    MissingThink,
    MissingAnswer,
    ExtraContent,
    BadDimensionLine,
    ScoreOutOfRange,
    TotalMismatch,
    BadAnswerString,
    MissingAspectKey,
    NonIntegerAspect,
    DuplicateBlock,
}

/// Why an output was rejected, with the byte offset of the defect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatError {
    pub kind: FormatErrorKind,
    pub location: usize,
    pub detail: String,
}

impl FormatError {
    fn new(kind: FormatErrorKind, location: usize, detail: impl Into<String>) -> Self {
        FormatError {
            kind,
            location,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at byte {}: {}", self.kind, self.location, self.detail)
    }
}

impl std::error::Error for FormatError {}

/// Scores, explanations and stated total for one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateBlock {
    pub scores: DimScores,
    pub explanations: Vec<String>,
    pub total: f64,
}

impl CandidateBlock {
    /// Block whose stated total is the sum of `scores`.
    pub fn new(scores: DimScores, explanations: Vec<String>) -> Self {
        let total = scores.sum();
        CandidateBlock {
            scores,
            explanations,
            total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedJudgment {
    pub task: TaskKind,
    pub think_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_a: Option<CandidateBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_b: Option<CandidateBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison_summary: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_pref: Option<PreferenceLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_mos: Option<MosVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aspect_descriptions: Option<String>,
}

impl ParsedJudgment {
    /// Builds a pairwise judgment with a canonical reasoning block.
    pub fn pairwise(
        task: TaskKind,
        candidate_a: CandidateBlock,
        candidate_b: CandidateBlock,
        comparison_summary: Option<String>,
        answer: PreferenceLabel,
    ) -> Result<Self, SchemaError> {
        if !task.is_pairwise() {
            return Err(SchemaError::Invalid(format!("{task} is not a pairwise task")));
        }
        let think_text = render_pairwise_think(task, &candidate_a, &candidate_b, comparison_summary.as_deref());
        let j = ParsedJudgment {
            task,
            think_text,
            candidate_a: Some(candidate_a),
            candidate_b: Some(candidate_b),
            comparison_summary,
            answer_pref: Some(answer),
            answer_mos: None,
            aspect_descriptions: None,
        };
        j.validate()?;
        Ok(j)
    }

    /// Builds a quality-assessment judgment from free reasoning text and scores.
    pub fn quality(think_text: impl Into<String>, answer: MosVector) -> Result<Self, SchemaError> {
        let think_text = think_text.into().trim().to_string();
        let aspect_descriptions = extract_aspect_descriptions(&think_text);
        let j = ParsedJudgment {
            task: TaskKind::T2QualityAssessment,
            think_text,
            candidate_a: None,
            candidate_b: None,
            comparison_summary: None,
            answer_pref: None,
            answer_mos: Some(answer),
            aspect_descriptions,
        };
        j.validate()?;
        Ok(j)
    }

    /// True when both candidates carry the same total. The label rule still
    /// resolves the pair, but the templates forbid ties.
    pub fn tie_warning(&self) -> bool {
        match (&self.candidate_a, &self.candidate_b) {
            (Some(a), Some(b)) => a.total == b.total,
            _ => false,
        }
    }

    /// Label implied by the candidate totals, independent of the stated answer.
    pub fn label_from_totals(&self) -> Option<PreferenceLabel> {
        let (a, b) = (self.candidate_a.as_ref()?, self.candidate_b.as_ref()?);
        label_from_totals(a.total, b.total).ok()
    }

    pub fn answer(&self) -> Option<Answer> {
        self.answer_pref
            .map(Answer::Preference)
            .or(self.answer_mos.map(Answer::Mos))
    }

    /// Checks the structural invariants of a judgment.
    pub fn validate(&self) -> Result<(), SchemaError> {
        let invalid = |msg: String| Err(SchemaError::Invalid(msg));
        for tag in [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE] {
            if self.think_text.contains(tag) {
                return invalid(format!("reasoning text contains the tag {tag}"));
            }
        }
        if self.task.is_pairwise() {
            let schema = self.task.schema();
            if self.answer_pref.is_none() || self.answer_mos.is_some() {
                return invalid("pairwise judgment needs a preference answer and no MOS answer".into());
            }
            for (name, block) in [("A", &self.candidate_a), ("B", &self.candidate_b)] {
                let Some(block) = block else {
                    return invalid(format!("missing candidate {name} block"));
                };
                schema.validate(&block.scores)?;
                if block.explanations.len() != schema.count() {
                    return invalid(format!(
                        "candidate {name}: {} explanations for {} dimensions",
                        block.explanations.len(),
                        schema.count()
                    ));
                }
                if block.explanations.iter().any(|e| e.contains('\n') || e.trim() != e) {
                    return invalid(format!(
                        "candidate {name}: explanations must be single trimmed lines"
                    ));
                }
                if !totals_agree(block.total, block.scores.sum()) {
                    return invalid(format!(
                        "candidate {name}: total {} differs from score sum {}",
                        block.total,
                        block.scores.sum()
                    ));
                }
            }
        } else {
            if self.answer_mos.is_none()
                || self.answer_pref.is_some()
                || self.candidate_a.is_some()
                || self.candidate_b.is_some()
            {
                return invalid("quality judgment needs a MOS answer and no candidate blocks".into());
            }
        }
        Ok(())
    }
}

/// The decision carried by an `<answer>` block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Answer {
    Preference(PreferenceLabel),
    Mos(MosVector),
}

/// Rendered template text plus the tie flag of the judgment it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub text: String,
    pub tie_warning: bool,
}

/// Parses and validates one raw model output for `task`.
pub fn parse_judgment(raw: &str, task: TaskKind) -> Result<ParsedJudgment, FormatError> {
    let env = locate_envelope(raw);
    let mut errors: Vec<FormatError> = env.error.iter().cloned().collect();

    let think = env.think.clone().map(|r| {
        if task.is_pairwise() {
            parse_pairwise_think(raw, r, task).map(ThinkContent::Pairwise)
        } else {
            Ok(ThinkContent::Quality)
        }
    });
    if let Some(Err(e)) = &think {
        errors.push(e.clone());
    }
    let answer = env.answer.clone().map(|r| parse_answer_body(raw, r, task));
    if let Some(Err(e)) = &answer {
        errors.push(e.clone());
    }
    if let Some(first) = errors.into_iter().min_by_key(|e| e.location) {
        return Err(first);
    }

    // Without an error the envelope located both blocks and both parsed.
    let think_range = env.think.expect("think block located");
    let think_text = raw[think_range].trim().to_string();
    let answer = answer.expect("answer block located").expect("answer parsed");
    match think.expect("think parsed").expect("think content ok") {
        ThinkContent::Pairwise(p) => {
            let Answer::Preference(label) = answer else {
                unreachable!("pairwise task yields a preference answer")
            };
            Ok(ParsedJudgment {
                task,
                think_text,
                candidate_a: Some(p.a),
                candidate_b: Some(p.b),
                comparison_summary: p.summary,
                answer_pref: Some(label),
                answer_mos: None,
                aspect_descriptions: None,
            })
        }
        ThinkContent::Quality => {
            let Answer::Mos(mos) = answer else {
                unreachable!("quality task yields a MOS answer")
            };
            let aspect_descriptions = extract_aspect_descriptions(&think_text);
            Ok(ParsedJudgment {
                task,
                think_text,
                candidate_a: None,
                candidate_b: None,
                comparison_summary: None,
                answer_pref: None,
                answer_mos: Some(mos),
                aspect_descriptions,
            })
        }
    }
}

/// Reads only the tag envelope and the answer block.
///
/// Agrees with [`parse_judgment`] whenever that succeeds, and reports the same
/// error kind whenever the envelope or answer block holds the first defect.
pub fn extract_answer(raw: &str, task: TaskKind) -> Result<Answer, FormatError> {
    let env = locate_envelope(raw);
    let mut errors: Vec<FormatError> = env.error.into_iter().collect();
    let answer = env.answer.map(|r| parse_answer_body(raw, r, task));
    if let Some(Err(e)) = &answer {
        errors.push(e.clone());
    }
    if let Some(first) = errors.into_iter().min_by_key(|e| e.location) {
        return Err(first);
    }
    Ok(answer.expect("answer located").expect("answer parsed"))
}

/// Emits the canonical template text for `j`.
///
/// The result is re-parsed and compared with `j`, so a successful render
/// always round-trips.
pub fn render_judgment(j: &ParsedJudgment) -> Result<Rendered, SchemaError> {
    j.validate()?;
    let answer = match (j.answer_pref, j.answer_mos) {
        (Some(label), None) => label.answer_literal().to_string(),
        (None, Some(mos)) => mos.answer_string(),
        _ => unreachable!("validate enforces exactly one answer"),
    };
    let text = format!("{THINK_OPEN}\n{}\n{THINK_CLOSE}\n{ANSWER_OPEN}{answer}{ANSWER_CLOSE}", j.think_text);
    match parse_judgment(&text, j.task) {
        Ok(back) if back == *j => Ok(Rendered {
            text,
            tie_warning: j.tie_warning(),
        }),
        Ok(_) => Err(SchemaError::Invalid(
            "reasoning text disagrees with the structured fields".into(),
        )),
        Err(e) => Err(SchemaError::Invalid(format!("rendered text does not parse: {e}"))),
    }
}

/// Canonical `<think>` body for a pairwise judgment.
pub fn render_pairwise_think(
    task: TaskKind,
    a: &CandidateBlock,
    b: &CandidateBlock,
    summary: Option<&str>,
) -> String {
    let mut out = String::new();
    for (side, block) in [('A', a), ('B', b)] {
        render_block(&mut out, task, side, block);
    }
    if let Some(s) = summary {
        out.push_str(SUMMARY_HEADER);
        out.push('\n');
        out.push_str(s);
    }
    out.trim().to_string()
}

fn render_block(out: &mut String, task: TaskKind, side: char, block: &CandidateBlock) {
    let dims = task.schema().dimensions;
    let max = fmt_num(task.schema().score_max);
    let dialogue = task == TaskKind::T4DialoguePreference;
    if dialogue {
        out.push_str(&format!("[Speech {side} evaluation]\n"));
    } else {
        out.push_str(&format!("[Speech {side}]\n"));
    }
    for (i, name) in dims.iter().enumerate() {
        let score = block.scores.values().get(i).copied().unwrap_or(f64::NAN);
        let expl = block.explanations.get(i).map(String::as_str).unwrap_or("");
        let prefix = if dialogue { "-".to_string() } else { format!("{})", i + 1) };
        let expl_part = if expl.is_empty() {
            "explanation:".to_string()
        } else {
            format!("explanation: {expl}")
        };
        out.push_str(&format!("{prefix} {name}: score={}/{max}; {expl_part}\n", fmt_num(score)));
    }
    let terms: Vec<String> = block.scores.values().iter().map(|v| fmt_num(*v)).collect();
    let label = if dialogue {
        format!("- Total score for Speech {side}")
    } else {
        format!("Total_{side}")
    };
    out.push_str(&format!("{label} = {} = {}\n", terms.join("+"), fmt_num(block.total)));
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

fn totals_agree(stated: f64, recomputed: f64) -> bool {
    (stated - recomputed).abs() <= 1e-9 * (1.0 + recomputed.abs())
}

// ---------------------------------------------------------------------------
// Envelope

#[derive(Debug, Default)]
struct Envelope {
    think: Option<Range<usize>>,
    answer: Option<Range<usize>>,
    error: Option<FormatError>,
}

fn skip_ws(raw: &str, from: usize) -> usize {
    raw[from..]
        .find(|c: char| !c.is_whitespace())
        .map_or(raw.len(), |i| from + i)
}

fn locate_envelope(raw: &str) -> Envelope {
    use FormatErrorKind::*;
    let mut env = Envelope::default();

    let start = skip_ws(raw, 0);
    if !raw[start..].starts_with(THINK_OPEN) {
        env.error = Some(if raw.contains(THINK_OPEN) {
            FormatError::new(ExtraContent, start, "content before <think>")
        } else {
            FormatError::new(MissingThink, start, "no <think> tag")
        });
        return env;
    }
    let body_start = start + THINK_OPEN.len();
    let Some(rel) = raw[body_start..].find(THINK_CLOSE) else {
        env.error = Some(FormatError::new(MissingThink, raw.len(), "no </think> tag"));
        return env;
    };
    let body_end = body_start + rel;
    env.think = Some(body_start..body_end);
    if let Some(q) = raw[body_start..body_end].find(THINK_OPEN) {
        env.error = Some(FormatError::new(DuplicateBlock, body_start + q, "nested <think> tag"));
        return env;
    }

    let after_think = body_end + THINK_CLOSE.len();
    let j = skip_ws(raw, after_think);
    let rest = &raw[j..];
    if !rest.starts_with(ANSWER_OPEN) {
        env.error = Some(if rest.starts_with(THINK_OPEN) || rest.starts_with(THINK_CLOSE) {
            FormatError::new(DuplicateBlock, j, "second think block")
        } else if rest.contains(ANSWER_OPEN) {
            FormatError::new(ExtraContent, j, "content between </think> and <answer>")
        } else {
            FormatError::new(MissingAnswer, j, "no <answer> tag after </think>")
        });
        return env;
    }
    let ans_start = j + ANSWER_OPEN.len();
    let Some(rel) = raw[ans_start..].find(ANSWER_CLOSE) else {
        env.error = Some(FormatError::new(MissingAnswer, j, "no </answer> tag"));
        return env;
    };
    let ans_end = ans_start + rel;
    env.answer = Some(ans_start..ans_end);
    if let Some(q) = raw[ans_start..ans_end].find(ANSWER_OPEN) {
        env.error = Some(FormatError::new(DuplicateBlock, ans_start + q, "nested <answer> tag"));
        return env;
    }

    let k = skip_ws(raw, ans_end + ANSWER_CLOSE.len());
    if k < raw.len() {
        let rest = &raw[k..];
        env.error = Some(if rest.starts_with(ANSWER_OPEN) || rest.starts_with(THINK_OPEN) {
            FormatError::new(DuplicateBlock, k, "extra block after </answer>")
        } else {
            FormatError::new(ExtraContent, k, "content after </answer>")
        });
    }
    env
}

// ---------------------------------------------------------------------------
// Answer block

fn parse_answer_body(raw: &str, range: Range<usize>, task: TaskKind) -> Result<Answer, FormatError> {
    let body = &raw[range.clone()];
    if task.is_pairwise() {
        for label in [PreferenceLabel::SpeechA, PreferenceLabel::SpeechB] {
            if body == label.answer_literal() {
                return Ok(Answer::Preference(label));
            }
        }
        Err(FormatError::new(
            FormatErrorKind::BadAnswerString,
            range.start,
            format!("answer must be exactly \"Speech A is better\" or \"Speech B is better\", got {body:?}"),
        ))
    } else {
        parse_mos_answer(body, range.start).map(Answer::Mos)
    }
}

fn parse_mos_answer(body: &str, base: usize) -> Result<MosVector, FormatError> {
    use FormatErrorKind::*;

    // (offset, text) of every `;`-terminated segment, plus the unterminated tail.
    let mut segments: Vec<(usize, &str)> = Vec::new();
    let mut pos = 0;
    for piece in body.split(';') {
        segments.push((base + pos, piece));
        pos += piece.len() + 1;
    }
    let (tail_off, tail) = segments.pop().expect("split yields at least one piece");
    let mut terminated: Vec<(usize, &str)> = segments
        .into_iter()
        .filter(|(_, s)| !s.trim().is_empty())
        .collect();
    let unterminated = !tail.trim().is_empty();
    if unterminated {
        terminated.push((tail_off, tail));
    }

    let key_of = |s: &str| s.split_once('=').map(|(k, _)| k.trim().to_string());
    let mut values = [0u8; 7];
    for (i, expected) in MosVector::KEYS.iter().enumerate() {
        let Some(&(off, seg)) = terminated.get(i) else {
            let off = base + body.len();
            return Err(FormatError::new(MissingAspectKey, off, format!("missing `{expected}`")));
        };
        let Some((key, value)) = seg.split_once('=') else {
            return Err(FormatError::new(BadDimensionLine, off, format!("segment {seg:?} is not key=value")));
        };
        let key = key.trim();
        if value.contains('=') {
            return Err(FormatError::new(BadDimensionLine, off, format!("segment {seg:?} is missing a `;` separator")));
        }
        if key != *expected {
            let present = terminated.iter().any(|(_, s)| key_of(s).as_deref() == Some(*expected));
            return Err(if present {
                FormatError::new(BadDimensionLine, off, format!("expected `{expected}`, found `{key}` (keys out of order)"))
            } else {
                FormatError::new(MissingAspectKey, off, format!("missing `{expected}` (found `{key}`)"))
            });
        }
        values[i] = parse_aspect_value(value.trim(), expected, off)?;
    }
    if let Some(&(off, seg)) = terminated.get(MosVector::KEYS.len()) {
        return Err(FormatError::new(BadDimensionLine, off, format!("unexpected segment {seg:?}")));
    }
    if unterminated {
        return Err(FormatError::new(BadDimensionLine, tail_off, "missing `;` after the last aspect"));
    }
    Ok(MosVector::from_array(values).expect("aspect values range-checked"))
}

fn parse_aspect_value(v: &str, key: &str, off: usize) -> Result<u8, FormatError> {
    use FormatErrorKind::*;
    match parse_decimal(v) {
        Some(x) if !v.contains('.') => {
            if (MosVector::MIN as f64..=MosVector::MAX as f64).contains(&x) {
                Ok(x as u8)
            } else {
                Err(FormatError::new(ScoreOutOfRange, off, format!("`{key}`={v} outside [1,5]")))
            }
        }
        _ => Err(FormatError::new(NonIntegerAspect, off, format!("`{key}`={v:?} is not an integer"))),
    }
}

/// `[+-]?digits(.digits)?`, nothing else (no exponents, no inf/nan).
fn parse_decimal(s: &str) -> Option<f64> {
    let unsigned = s.strip_prefix(['+', '-']).unwrap_or(s);
    let (int, frac) = match unsigned.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (unsigned, None),
    };
    let digits = |p: &str| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit());
    if !digits(int) || frac.is_some_and(|f| !digits(f)) {
        return None;
    }
    s.parse().ok()
}

// ---------------------------------------------------------------------------
// Reasoning block

enum ThinkContent {
    Pairwise(PairwiseThink),
    Quality,
}

struct PairwiseThink {
    a: CandidateBlock,
    b: CandidateBlock,
    summary: Option<String>,
}

/// Lowercase with runs of whitespace collapsed to one space.
fn fold(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

struct Lines<'a> {
    raw: &'a str,
    end: usize,
    pos: usize,
}

impl<'a> Lines<'a> {
    fn new(raw: &'a str, range: Range<usize>) -> Self {
        Lines {
            raw,
            end: range.end,
            pos: range.start,
        }
    }

    /// Next line that is not blank, as (offset of line start, line text).
    fn next_nonblank(&mut self) -> Option<(usize, &'a str)> {
        while self.pos < self.end {
            let start = self.pos;
            let line_end = self.raw[start..self.end].find('\n').map_or(self.end, |i| start + i);
            self.pos = line_end + 1;
            let line = self.raw[start..line_end].trim_end_matches('\r');
            if !line.trim().is_empty() {
                return Some((start, line));
            }
        }
        None
    }
}

fn is_header(line: &str, side: char) -> bool {
    let f = fold(line);
    let s = side.to_ascii_lowercase();
    f == format!("[speech {s}]") || f == format!("[speech {s} evaluation]")
}

/// Strips a `- ` bullet or an `N)` / `N.` enumerator.
fn strip_item_prefix(line: &str) -> &str {
    let t = line.trim();
    if let Some(rest) = t.strip_prefix('-') {
        return rest.trim_start();
    }
    let digits = t.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        if let Some(rest) = t[digits..].strip_prefix([')', '.']) {
            return rest.trim_start();
        }
    }
    t
}

fn total_label_rest<'a>(line: &'a str, side: char) -> Option<&'a str> {
    let item = strip_item_prefix(line);
    let lower = item.to_ascii_lowercase();
    let s = side.to_ascii_lowercase();
    for label in [format!("total_{s}"), format!("total score for speech {s}")] {
        if lower.starts_with(&label) {
            let rest = &item[label.len()..];
            if rest.trim_start().starts_with('=') {
                return Some(rest);
            }
        }
    }
    None
}

fn looks_like_total(line: &str) -> bool {
    let item = strip_item_prefix(line).to_ascii_lowercase();
    item.starts_with("total") && !item.contains("score=")
}

fn parse_pairwise_think(raw: &str, range: Range<usize>, task: TaskKind) -> Result<PairwiseThink, FormatError> {
    use FormatErrorKind::*;
    let mut lines = Lines::new(raw, range.clone());

    let mut blocks = Vec::with_capacity(2);
    for side in ['A', 'B'] {
        match lines.next_nonblank() {
            Some((_, line)) if is_header(line, side) => {}
            Some((off, line)) => {
                return Err(FormatError::new(BadDimensionLine, off, format!("expected [Speech {side}] header, found {line:?}")))
            }
            None => {
                return Err(FormatError::new(BadDimensionLine, range.end, format!("missing [Speech {side}] block")))
            }
        }
        blocks.push(parse_candidate_block(&mut lines, task, side, range.end)?);
    }

    let summary = match lines.next_nonblank() {
        None => None,
        Some((off, line)) if fold(line) == fold(SUMMARY_HEADER) => {
            let after = raw[off..range.end].find('\n').map_or(range.end, |i| off + i + 1);
            Some(raw[after..range.end].trim().to_string())
        }
        Some((off, line)) => {
            return Err(FormatError::new(BadDimensionLine, off, format!("unexpected line after Speech B block: {line:?}")))
        }
    };
    let b = blocks.pop().expect("two blocks");
    let a = blocks.pop().expect("two blocks");
    Ok(PairwiseThink { a, b, summary })
}

fn parse_candidate_block(lines: &mut Lines<'_>, task: TaskKind, side: char, end: usize) -> Result<CandidateBlock, FormatError> {
    use FormatErrorKind::*;
    let schema = task.schema();
    let mut scores = Vec::with_capacity(schema.count());
    let mut explanations = Vec::with_capacity(schema.count());

    for (i, name) in schema.dimensions.iter().enumerate() {
        let Some((off, line)) = lines.next_nonblank() else {
            return Err(FormatError::new(BadDimensionLine, end, format!("Speech {side}: missing dimension {name:?}")));
        };
        let (score, expl) = parse_dimension_line(line, off, task, i)?;
        scores.push(score);
        explanations.push(expl);
    }

    let Some((off, line)) = lines.next_nonblank() else {
        return Err(FormatError::new(BadDimensionLine, end, format!("Speech {side}: missing total line")));
    };
    let Some(rest) = total_label_rest(line, side) else {
        return Err(FormatError::new(BadDimensionLine, off, format!("Speech {side}: expected total line, found {line:?}")));
    };
    let recomputed: f64 = scores.iter().sum();
    let parts: Vec<&str> = rest.split('=').map(str::trim).collect();
    // parts[0] is the empty text before the first `=`.
    let (expr, stated) = match parts.as_slice() {
        [_, stated] => (None, *stated),
        [_, expr, stated] => (Some(*expr), *stated),
        _ => return Err(FormatError::new(BadDimensionLine, off, format!("malformed total line {line:?}"))),
    };
    let Some(stated_total) = parse_decimal(stated) else {
        return Err(FormatError::new(BadDimensionLine, off, format!("total {stated:?} is not a number")));
    };
    if let Some(expr) = expr {
        let mut terms = Vec::new();
        for t in expr.split('+') {
            match parse_decimal(t.trim()) {
                Some(v) => terms.push(v),
                None => return Err(FormatError::new(BadDimensionLine, off, format!("term {t:?} in total is not a number"))),
            }
        }
        if terms != scores {
            return Err(FormatError::new(TotalMismatch, off, format!("Speech {side}: summed terms {terms:?} differ from dimension scores {scores:?}")));
        }
    }
    if !totals_agree(stated_total, recomputed) {
        return Err(FormatError::new(TotalMismatch, off, format!("Speech {side}: stated total {stated_total} but scores sum to {recomputed}")));
    }
    Ok(CandidateBlock {
        scores: DimScores::new(scores),
        explanations,
        total: stated_total,
    })
}

/// `<prefix> <Name>: score=<v>/<max>; explanation: <text>`
fn parse_dimension_line(line: &str, off: usize, task: TaskKind, index: usize) -> Result<(f64, String), FormatError> {
    use FormatErrorKind::*;
    let schema = task.schema();
    let expected = schema.dimensions[index];
    let bad = |detail: String| Err(FormatError::new(BadDimensionLine, off, detail));

    if looks_like_total(line) {
        return bad(format!("expected dimension {expected:?}, found total line"));
    }
    let item = strip_item_prefix(line);
    let Some((name, rest)) = item.split_once(':') else {
        return bad(format!("expected `{expected}: score=...`, found {line:?}"));
    };
    if fold(name) != fold(expected) {
        return bad(format!("expected dimension {expected:?}, found {:?}", name.trim()));
    }
    let Some(rest) = rest.trim_start().strip_prefix("score=") else {
        return bad(format!("{expected}: missing `score=`"));
    };
    let Some((fraction, tail)) = rest.split_once(';') else {
        return bad(format!("{expected}: missing `;` after the score"));
    };
    let Some((value, denom)) = fraction.split_once('/') else {
        return bad(format!("{expected}: score must be written as value/{}", fmt_num(schema.score_max)));
    };
    if parse_decimal(denom.trim()) != Some(schema.score_max) {
        return bad(format!("{expected}: score denominator must be {}", fmt_num(schema.score_max)));
    }
    let Some(score) = parse_decimal(value.trim()) else {
        return bad(format!("{expected}: score {:?} is not a number", value.trim()));
    };
    if !(schema.score_min..=schema.score_max).contains(&score) {
        return Err(FormatError::new(
            ScoreOutOfRange,
            off,
            format!("{expected}: score {score} outside [{}, {}]", schema.score_min, schema.score_max),
        ));
    }
    let Some(expl) = tail.trim_start().strip_prefix("explanation:") else {
        return bad(format!("{expected}: missing `explanation:`"));
    };
    Ok((score, expl.trim().to_string()))
}

fn extract_aspect_descriptions(think: &str) -> Option<String> {
    let mut start = None;
    let mut end = think.len();
    let mut offset = 0;
    for line in think.split_inclusive('\n') {
        let f = fold(line);
        if start.is_none() && f == fold(ASPECT_HEADER) {
            start = Some(offset + line.len());
        } else if start.is_some() && f == fold(NARRATIVE_HEADER) {
            end = offset;
            break;
        }
        offset += line.len();
    }
    start.map(|s| think[s.min(end)..end].trim().to_string())
}
