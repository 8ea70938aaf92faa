//! Preference-pair construction and cleaning.
//!
//! Pairs are formed per text group, oriented by a per-pair seed, filtered for
//! cyclic contradictions and human-vote disagreement, and split into
//! disjoint SFT / RL / bench partitions by text group.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::schema::{label_with_tie_flag, CandidateSet, DimScores, PreferenceLabel, SchemaError, TaskKind};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("text group `{text_id}` has {count} candidate(s); at least 2 are needed")]
    TooFewCandidates { text_id: String, count: usize },
    #[error("pair {cand_a}/{cand_b} in `{text_id}` has no auto_label")]
    MissingLabel { text_id: String, cand_a: String, cand_b: String },
    #[error("expected exactly 3 votes, found {0}")]
    VoteCount(usize),
    #[error("invalid split ratios: {0}")]
    BadRatios(String),
    #[error("no records to split")]
    EmptyInput,
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Sft,
    Rl,
    Bench,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Sft, Split::Rl, Split::Bench];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnnotatorVote {
    A,
    B,
    #[serde(rename = "invalid")]
    Invalid,
}

impl AnnotatorVote {
    fn flipped(self) -> Self {
        match self {
            AnnotatorVote::A => AnnotatorVote::B,
            AnnotatorVote::B => AnnotatorVote::A,
            AnnotatorVote::Invalid => AnnotatorVote::Invalid,
        }
    }
}

/// One JSON Lines record. Fields this crate does not know about are kept in
/// `extra` and written back unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub text_id: String,
    pub cand_a: String,
    pub cand_b: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auto_label: Option<PreferenceLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims_a: Option<DimScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims_b: Option<DimScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub votes: Option<Vec<AnnotatorVote>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default)]
    pub order_seed: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub tie_warning: bool,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl PairRecord {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.cand_a == self.cand_b {
            return Err(DataError::InvalidRecord(format!(
                "`{}` is paired with itself in `{}`",
                self.cand_a, self.text_id
            )));
        }
        for dims in [&self.dims_a, &self.dims_b].into_iter().flatten() {
            if let Some(&v) = dims.values().iter().find(|v| !v.is_finite()) {
                return Err(SchemaError::NonFinite(v).into());
            }
        }
        if let (Some(a), Some(b)) = (&self.dims_a, &self.dims_b) {
            if a.len() != b.len() {
                return Err(DataError::InvalidRecord(format!(
                    "dims_a has {} values but dims_b has {}",
                    a.len(),
                    b.len()
                )));
            }
        }
        Ok(())
    }

    fn label(&self) -> Result<PreferenceLabel, DataError> {
        self.auto_label.ok_or_else(|| DataError::MissingLabel {
            text_id: self.text_id.clone(),
            cand_a: self.cand_a.clone(),
            cand_b: self.cand_b.clone(),
        })
    }

    /// (winner, loser) under the auto label.
    pub fn edge(&self) -> Result<(&str, &str), DataError> {
        Ok(match self.label()? {
            PreferenceLabel::SpeechA => (&self.cand_a, &self.cand_b),
            PreferenceLabel::SpeechB => (&self.cand_b, &self.cand_a),
        })
    }
}

fn pair_seed(seed: u64, text_id: &str, first: &str, second: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for part in [text_id, first, second] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Every unordered pair of candidates in one text group, each emitted once.
///
/// Presentation order is decided by the low bit of `order_seed`, which is
/// derived from `seed`, the text id and both candidate ids. When both
/// candidates carry dimension scores, `auto_label` follows the total-score
/// label rule (ties go to B and set `tie_warning`).
pub fn form_pairs(cands: &CandidateSet, task: TaskKind, seed: u64) -> Result<Vec<PairRecord>, DataError> {
    cands.validate()?;
    let n = cands.candidates.len();
    if n < 2 {
        return Err(DataError::TooFewCandidates { text_id: cands.text_id.clone(), count: n });
    }
    let schema = task.schema();
    for c in &cands.candidates {
        if let Some(d) = &c.dims {
            schema.validate(d)?;
        }
    }
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let order_seed = pair_seed(seed, &cands.text_id, &cands.candidates[i].id, &cands.candidates[j].id);
            let (a, b) = if order_seed & 1 == 1 {
                (&cands.candidates[j], &cands.candidates[i])
            } else {
                (&cands.candidates[i], &cands.candidates[j])
            };
            let (auto_label, tie_warning) = match (&a.dims, &b.dims) {
                (Some(da), Some(db)) => {
                    let (label, tie) = label_with_tie_flag(da.sum(), db.sum())?;
                    (Some(label), tie)
                }
                _ => (None, false),
            };
            out.push(PairRecord {
                text_id: cands.text_id.clone(),
                cand_a: a.id.clone(),
                cand_b: b.id.clone(),
                auto_label,
                dims_a: a.dims.clone(),
                dims_b: b.dims.clone(),
                votes: None,
                split: None,
                order_seed,
                tie_warning,
                extra: Map::new(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    Invalidity,
    NoMajority,
    AutoMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteDecision {
    Keep,
    Discard(DiscardReason),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRemovals {
    pub invalidity: usize,
    pub no_majority: usize,
    pub auto_mismatch: usize,
}

impl VoteRemovals {
    pub fn total(&self) -> usize {
        self.invalidity + self.no_majority + self.auto_mismatch
    }

    fn count(&mut self, reason: DiscardReason) {
        match reason {
            DiscardReason::Invalidity => self.invalidity += 1,
            DiscardReason::NoMajority => self.no_majority += 1,
            DiscardReason::AutoMismatch => self.auto_mismatch += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupDetail {
    pub text_id: String,
    pub input: usize,
    pub kept: usize,
    pub removed: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub kept: usize,
    pub removed_cycles: usize,
    pub removed_votes: VoteRemovals,
    pub per_group_detail: Vec<GroupDetail>,
}

impl FilterReport {
    pub fn removed(&self) -> usize {
        self.removed_cycles + self.removed_votes.total()
    }
}

fn group_indices(records: &[PairRecord]) -> BTreeMap<&str, Vec<usize>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.text_id.as_str()).or_default().push(i);
    }
    groups
}

/// Per-record flag: does the record's preference edge lie on a directed cycle
/// of its text group's preference graph?
pub fn cyclic_edges(records: &[PairRecord]) -> Result<Vec<bool>, DataError> {
    let mut flags = vec![false; records.len()];
    for indices in group_indices(records).values() {
        let mut graph: DiGraph<(), ()> = DiGraph::new();
        let mut nodes: HashMap<&str, NodeIndex> = HashMap::new();
        let mut edges = Vec::with_capacity(indices.len());
        for &i in indices {
            records[i].validate()?;
            let (w, l) = records[i].edge()?;
            let wn = *nodes.entry(w).or_insert_with(|| graph.add_node(()));
            let ln = *nodes.entry(l).or_insert_with(|| graph.add_node(()));
            graph.add_edge(wn, ln, ());
            edges.push((i, wn, ln));
        }
        let mut component = vec![0usize; graph.node_count()];
        for (c, scc) in tarjan_scc(&graph).into_iter().enumerate() {
            for n in scc {
                component[n.index()] = c;
            }
        }
        for (i, wn, ln) in edges {
            flags[i] = component[wn.index()] == component[ln.index()];
        }
    }
    Ok(flags)
}

/// Removes every pair whose winner and loser share a strongly connected
/// component of their text group's preference graph.
pub fn filter_cycles(records: Vec<PairRecord>) -> Result<(Vec<PairRecord>, Vec<PairRecord>, FilterReport), DataError> {
    let flags = cyclic_edges(&records)?;
    let mut report = FilterReport { input: records.len(), ..FilterReport::default() };
    for (text_id, indices) in group_indices(&records) {
        let removed = indices.iter().filter(|&&i| flags[i]).count();
        report.per_group_detail.push(GroupDetail {
            text_id: text_id.to_string(),
            input: indices.len(),
            kept: indices.len() - removed,
            removed,
        });
    }
    let (mut kept, mut removed) = (Vec::new(), Vec::new());
    for (r, cyclic) in records.into_iter().zip(flags) {
        if cyclic {
            removed.push(r);
        } else {
            kept.push(r);
        }
    }
    report.kept = kept.len();
    report.removed_cycles = removed.len();
    Ok((kept, removed, report))
}

/// Three-annotator verification. Criteria are checked in the order
/// validity, majority, agreement with the auto label.
pub fn vote_filter(record: &PairRecord) -> Result<VoteDecision, DataError> {
    let votes = record.votes.as_deref().unwrap_or(&[]);
    if votes.len() != 3 {
        return Err(DataError::VoteCount(votes.len()));
    }
    let auto = record.label()?;
    let count = |v: AnnotatorVote| votes.iter().filter(|&&x| x == v).count();
    if 3 - count(AnnotatorVote::Invalid) < 2 {
        return Ok(VoteDecision::Discard(DiscardReason::Invalidity));
    }
    let majority = if count(AnnotatorVote::A) >= 2 {
        PreferenceLabel::SpeechA
    } else if count(AnnotatorVote::B) >= 2 {
        PreferenceLabel::SpeechB
    } else {
        return Ok(VoteDecision::Discard(DiscardReason::NoMajority));
    };
    Ok(if majority == auto {
        VoteDecision::Keep
    } else {
        VoteDecision::Discard(DiscardReason::AutoMismatch)
    })
}

/// Applies [`vote_filter`] to every record.
pub fn vote_filter_all(records: Vec<PairRecord>) -> Result<(Vec<PairRecord>, Vec<(PairRecord, DiscardReason)>, FilterReport), DataError> {
    let mut report = FilterReport { input: records.len(), ..FilterReport::default() };
    let mut per_group: BTreeMap<String, GroupDetail> = BTreeMap::new();
    let (mut kept, mut removed) = (Vec::new(), Vec::new());
    for r in records {
        let decision = vote_filter(&r)?;
        let detail = per_group.entry(r.text_id.clone()).or_insert_with(|| GroupDetail {
            text_id: r.text_id.clone(),
            input: 0,
            kept: 0,
            removed: 0,
        });
        detail.input += 1;
        match decision {
            VoteDecision::Keep => {
                detail.kept += 1;
                kept.push(r);
            }
            VoteDecision::Discard(reason) => {
                detail.removed += 1;
                report.removed_votes.count(reason);
                removed.push((r, reason));
            }
        }
    }
    report.kept = kept.len();
    report.per_group_detail = per_group.into_values().collect();
    Ok((kept, removed, report))
}

/// Votes collected for one pair, oriented as `cand_a` / `cand_b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteSheet {
    pub text_id: String,
    pub cand_a: String,
    pub cand_b: String,
    pub votes: Vec<AnnotatorVote>,
}

/// Copies votes onto matching records, flipping A/B when the sheet lists the
/// pair in the opposite order. Returns how many records received votes.
pub fn attach_votes(records: &mut [PairRecord], sheets: &[VoteSheet]) -> usize {
    let mut by_pair: HashMap<(&str, &str, &str), &VoteSheet> = HashMap::new();
    for s in sheets {
        by_pair.insert((&s.text_id, &s.cand_a, &s.cand_b), s);
    }
    let mut attached = 0;
    for r in records.iter_mut() {
        if let Some(s) = by_pair.get(&(r.text_id.as_str(), r.cand_a.as_str(), r.cand_b.as_str())) {
            r.votes = Some(s.votes.clone());
            attached += 1;
        } else if let Some(s) = by_pair.get(&(r.text_id.as_str(), r.cand_b.as_str(), r.cand_a.as_str())) {
            r.votes = Some(s.votes.iter().map(|v| v.flipped()).collect());
            attached += 1;
        }
    }
    attached
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub sft: f64,
    pub rl: f64,
    pub bench: f64,
}

impl SplitRatios {
    pub fn new(sft: f64, rl: f64, bench: f64) -> Result<Self, DataError> {
        let r = SplitRatios { sft, rl, bench };
        let all = r.as_array();
        if all.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(DataError::BadRatios(format!("{sft},{rl},{bench}: each ratio must be finite and non-negative")));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::BadRatios(format!("{sft},{rl},{bench} sum to {sum}, not 1")));
        }
        Ok(r)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.sft, self.rl, self.bench]
    }
}

impl std::str::FromStr for SplitRatios {
    type Err = DataError;

    /// `"0.7,0.2,0.1"`
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(DataError::BadRatios(format!("`{s}`: expected three comma-separated numbers")));
        }
        let mut v = [0.0; 3];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p.parse().map_err(|_| DataError::BadRatios(format!("`{p}` is not a number")))?;
        }
        SplitRatios::new(v[0], v[1], v[2])
    }
}

/// Group counts by largest remainder; leftover groups go to the largest
/// fractional parts, earlier splits first on ties.
fn split_counts(n: usize, ratios: &SplitRatios) -> [usize; 3] {
    let exact = ratios.as_array().map(|r| r * n as f64);
    let mut counts = exact.map(|x| x.floor() as usize);
    let mut left = n.saturating_sub(counts.iter().sum());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| {
        let fi = exact[i] - exact[i].floor();
        let fj = exact[j] - exact[j].floor();
        fj.total_cmp(&fi).then(i.cmp(&j))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios.as_array()[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

/// Assigns every text group to one split. Groups are sorted, shuffled with a
/// seeded ChaCha8 stream and cut at the largest-remainder counts.
pub fn split_dataset(records: &[PairRecord], ratios: &SplitRatios, seed: u64) -> Result<BTreeMap<String, Split>, DataError> {
    if records.is_empty() {
        return Err(DataError::EmptyInput);
    }
    let mut groups: Vec<&str> = group_indices(records).into_keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    let counts = split_counts(groups.len(), ratios);
    let mut assignment = BTreeMap::new();
    let mut it = groups.into_iter();
    for (split, count) in Split::ALL.into_iter().zip(counts) {
        for g in it.by_ref().take(count) {
            assignment.insert(g.to_string(), split);
        }
    }
    Ok(assignment)
}

/// Writes each record's split from `assignment`.
pub fn apply_split(records: &mut [PairRecord], assignment: &BTreeMap<String, Split>) {
    for r in records {
        r.split = assignment.get(&r.text_id).copied();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReadMode {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReadOutcome<R> {
    pub records: Vec<R>,
    /// (1-based line number, message) for every skipped line in lenient mode.
    pub skipped: Vec<(usize, String)>,
}

/// Reads JSON Lines. Blank lines are ignored.
pub fn read_jsonl<R, T>(reader: R, mode: ReadMode, check: impl Fn(&T) -> Result<(), DataError>) -> Result<ReadOutcome<T>, DataError>
where
    R: BufRead,
    T: serde::de::DeserializeOwned,
{
    let mut out = ReadOutcome { records: Vec::new(), skipped: Vec::new() };
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<T>(&line)
            .map_err(|e| e.to_string())
            .and_then(|r| check(&r).map(|_| r).map_err(|e| e.to_string()));
        match (parsed, mode) {
            (Ok(r), _) => out.records.push(r),
            (Err(message), ReadMode::Strict) => return Err(DataError::Malformed { line: line_no, message }),
            (Err(message), ReadMode::Lenient) => out.skipped.push((line_no, message)),
        }
    }
    Ok(out)
}

pub fn read_records(path: impl AsRef<Path>, mode: ReadMode) -> Result<ReadOutcome<PairRecord>, DataError> {
    let file = File::open(path)?;
    read_jsonl(BufReader::new(file), mode, PairRecord::validate)
}

pub fn write_jsonl<W: Write, T: Serialize>(mut writer: W, records: &[T]) -> Result<(), DataError> {
    for r in records {
        serde_json::to_writer(&mut writer, r).map_err(io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_records(records: &[PairRecord], path: impl AsRef<Path>) -> Result<(), DataError> {
    write_jsonl(BufWriter::new(File::create(path)?), records)
}
