//! Threaded-conversation corpus construction.
//!
//! Raw comment records arrive as JSON lines in arbitrary order. This module
//! rebuilds the reply trees, turns every root-to-node path into a
//! (context, response) sample, assigns multi-party role ids, and applies the
//! configurable cleaning filters. All outputs are pure functions of record
//! content: any permutation of the input stream produces the same trees and
//! the same sample list.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {source}")]
    Malformed {
        line: usize,
        source: serde_json::Error,
    },
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// One raw comment. `parent_id` is absent for thread roots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommentNode {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    pub user_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<i64>,
}

impl CommentNode {
    /// Ordering key used everywhere structure must be deterministic:
    /// timestamp first, comment id as tie-break.
    fn order_key(&self) -> (Option<i64>, &str) {
        (self.ts, &self.id)
    }
}

/// A reconstructed thread: the root comment plus, for every comment id, its
/// ordered list of direct replies.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageTree {
    pub root: CommentNode,
    pub children: BTreeMap<String, Vec<CommentNode>>,
}

impl MessageTree {
    pub fn node_count(&self) -> usize {
        1 + self.children.values().map(Vec::len).sum::<usize>()
    }

    pub fn depth(&self) -> usize {
        fn walk(tree: &MessageTree, id: &str) -> usize {
            match tree.children.get(id) {
                Some(kids) => 1 + kids.iter().map(|k| walk(tree, &k.id)).max().unwrap_or(0),
                None => 0,
            }
        }
        walk(self, &self.root.id)
    }
}

/// A single turn of conversation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub text: String,
    pub user: String,
}

/// One training pair: the turns leading up to a reply, and the reply itself.
/// `roles` holds one role id per context turn plus one for the response;
/// the response author is always role 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueSample {
    pub context: Vec<Turn>,
    pub response: Turn,
    pub roles: Vec<u32>,
}

/// Counters for everything dropped or rewritten during ingestion.
#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub records: u64,
    pub duplicates: u64,
    pub empty_text: u64,
    pub orphans: u64,
    pub cycles_cut: u64,
    pub trees: u64,
    pub samples_extracted: u64,
    pub rejected_min_len: u64,
    pub rejected_max_len: u64,
    pub rejected_blocklist: u64,
    pub rejected_non_text: u64,
    pub samples_kept: u64,
}

/// Result of tree assembly.
#[derive(Debug)]
pub struct TreeBuild {
    pub trees: Vec<MessageTree>,
    pub stats: CorpusStats,
}

/// Rebuild message trees from an unordered record stream.
///
/// Duplicate ids keep the record with the smaller content key and count the
/// rest. Records whose parent never shows up, and their entire subtrees, are
/// dropped and counted as orphans. A parent cycle is broken by cutting the
/// edge out of its smallest member, which then roots its own tree.
pub fn build_trees(records: impl IntoIterator<Item = CommentNode>) -> TreeBuild {
    let mut stats = CorpusStats::default();
    let mut nodes: BTreeMap<String, CommentNode> = BTreeMap::new();

    for record in records {
        stats.records += 1;
        if record.text.trim().is_empty() {
            stats.empty_text += 1;
            continue;
        }
        match nodes.get(&record.id) {
            None => {
                nodes.insert(record.id.clone(), record);
            }
            Some(existing) => {
                stats.duplicates += 1;
                let existing_key =
                    (existing.ts, &existing.user_id, &existing.text, &existing.parent_id);
                let record_key = (record.ts, &record.user_id, &record.text, &record.parent_id);
                if record_key < existing_key {
                    nodes.insert(record.id.clone(), record);
                }
            }
        }
    }

    let cut = cut_cycle_edges(&nodes, &mut stats);

    // Roots: natural roots plus cycle members whose parent edge was cut.
    let mut roots: Vec<&CommentNode> = nodes
        .values()
        .filter(|n| n.parent_id.is_none() || cut.contains(&n.id))
        .collect();
    roots.sort_by(|a, b| a.order_key().cmp(&b.order_key()));

    let mut children_of: BTreeMap<&str, Vec<&CommentNode>> = BTreeMap::new();
    for node in nodes.values() {
        if cut.contains(&node.id) {
            continue;
        }
        if let Some(parent) = &node.parent_id {
            if nodes.contains_key(parent) {
                children_of.entry(parent.as_str()).or_default().push(node);
            }
        }
    }
    for kids in children_of.values_mut() {
        kids.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
    }

    let mut trees = Vec::with_capacity(roots.len());
    let mut reachable = 0usize;
    for root in roots {
        let mut children = BTreeMap::new();
        let mut stack = vec![root];
        let mut count = 0usize;
        while let Some(node) = stack.pop() {
            count += 1;
            if let Some(kids) = children_of.get(node.id.as_str()) {
                children.insert(node.id.clone(), kids.iter().map(|k| (*k).clone()).collect());
                stack.extend(kids.iter());
            }
        }
        reachable += count;
        trees.push(MessageTree {
            root: root.clone(),
            children,
        });
    }

    stats.orphans = (nodes.len() - reachable) as u64;
    stats.trees = trees.len() as u64;
    TreeBuild { trees, stats }
}

/// Find parent-chain cycles and pick, per cycle, the edge to drop: the one
/// leaving the member with the smallest (timestamp, id) key. The choice
/// depends only on record content, never on arrival order.
fn cut_cycle_edges(
    nodes: &BTreeMap<String, CommentNode>,
    stats: &mut CorpusStats,
) -> std::collections::HashSet<String> {
    #[derive(Clone, Copy, PartialEq)]
    enum State {
        Unseen,
        InPath,
        Done,
    }
    let mut state: HashMap<&str, State> = nodes.keys().map(|k| (k.as_str(), State::Unseen)).collect();
    let mut cut = std::collections::HashSet::new();

    for start in nodes.keys() {
        if state[start.as_str()] != State::Unseen {
            continue;
        }
        let mut path: Vec<&str> = Vec::new();
        let mut cur = start.as_str();
        loop {
            match state[cur] {
                State::Done => break,
                State::InPath => {
                    // Closed a loop: everything from `cur` back through the
                    // path tail is the cycle.
                    let loop_start = path.iter().position(|&p| p == cur).unwrap();
                    let member = path[loop_start..]
                        .iter()
                        .min_by_key(|id| nodes[**id].order_key())
                        .copied()
                        .unwrap();
                    cut.insert(member.to_string());
                    stats.cycles_cut += 1;
                    break;
                }
                State::Unseen => {
                    state.insert(cur, State::InPath);
                    path.push(cur);
                    match nodes[cur].parent_id.as_deref() {
                        Some(parent) if nodes.contains_key(parent) && !cut.contains(parent) => {
                            cur = parent;
                        }
                        _ => break,
                    }
                }
            }
        }
        for id in path {
            state.insert(id, State::Done);
        }
    }
    cut
}

/// Emit one sample per non-root node: context is the path from the root to
/// the node's parent, response is the node. Samples come out in preorder and
/// already carry role ids (see [`assign_roles`]).
pub fn extract_samples(tree: &MessageTree, role_cap: u32) -> Vec<DialogueSample> {
    let mut samples = Vec::new();
    let mut path: Vec<Turn> = Vec::new();
    walk(tree, &tree.root, &mut path, &mut samples, role_cap);
    samples
}

fn walk(
    tree: &MessageTree,
    node: &CommentNode,
    path: &mut Vec<Turn>,
    out: &mut Vec<DialogueSample>,
    role_cap: u32,
) {
    if !path.is_empty() {
        let sample = DialogueSample {
            context: path.clone(),
            response: Turn {
                text: node.text.clone(),
                user: node.user_id.clone(),
            },
            roles: Vec::new(),
        };
        out.push(assign_roles(sample, role_cap));
    }
    path.push(Turn {
        text: node.text.clone(),
        user: node.user_id.clone(),
    });
    if let Some(kids) = tree.children.get(&node.id) {
        for kid in kids {
            walk(tree, kid, path, out, role_cap);
        }
    }
    path.pop();
}

/// Fill in `roles`. The response author and every context turn it wrote get
/// role 0; the remaining users are numbered 1, 2, ... by first appearance
/// scanning the context from the earliest turn. Ids at or above `role_cap`
/// collapse into the `role_cap` overflow bucket.
pub fn assign_roles(mut sample: DialogueSample, role_cap: u32) -> DialogueSample {
    let mut order: Vec<&str> = Vec::new();
    let mut roles = Vec::with_capacity(sample.context.len() + 1);
    for turn in &sample.context {
        if turn.user == sample.response.user {
            roles.push(0);
            continue;
        }
        let raw = match order.iter().position(|u| *u == turn.user) {
            Some(i) => i as u32 + 1,
            None => {
                order.push(turn.user.as_str());
                order.len() as u32
            }
        };
        roles.push(raw.min(role_cap));
    }
    roles.push(0);
    sample.roles = roles;
    sample
}

/// Filters applied to extracted samples. Every filter can be switched off.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleaningConfig {
    /// Reject samples whose response has fewer whitespace tokens than this.
    pub min_response_tokens: Option<usize>,
    /// Reject samples where any turn exceeds this many whitespace tokens.
    pub max_turn_tokens: Option<usize>,
    /// Remove whitespace tokens that look like URLs before other checks.
    pub strip_urls: bool,
    /// Reject samples where any turn contains one of these tokens
    /// (case-insensitive whole-token match).
    pub blocklist: Vec<String>,
    /// Reject samples where any turn's share of symbol characters (neither
    /// alphanumeric nor whitespace) exceeds this ratio.
    pub max_non_text_ratio: Option<f64>,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        Self {
            min_response_tokens: Some(2),
            max_turn_tokens: Some(128),
            strip_urls: true,
            blocklist: Vec::new(),
            max_non_text_ratio: Some(0.5),
        }
    }
}

/// Why a sample was rejected; used to tally per-rule counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    MinLen,
    MaxLen,
    Blocklist,
    NonText,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::MinLen => "min_len",
            RejectReason::MaxLen => "max_len",
            RejectReason::Blocklist => "blocklist",
            RejectReason::NonText => "non_text",
        }
    }
}

fn looks_like_url(token: &str) -> bool {
    let t = token.to_ascii_lowercase();
    t.starts_with("http://") || t.starts_with("https://") || t.starts_with("www.")
}

fn strip_urls(text: &str) -> String {
    if !text.split(' ').any(looks_like_url) {
        return text.to_string();
    }
    text.split(' ')
        .filter(|t| !looks_like_url(t))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Apply the cleaning rules. Passing samples come back (URL-stripped when
/// enabled); rejected ones report which rule fired first, in the fixed order
/// min_len, max_len, blocklist, non_text.
pub fn clean(
    mut sample: DialogueSample,
    rules: &CleaningConfig,
) -> Result<DialogueSample, RejectReason> {
    if rules.strip_urls {
        for turn in &mut sample.context {
            turn.text = strip_urls(&turn.text);
        }
        sample.response.text = strip_urls(&sample.response.text);
    }

    let token_count = |text: &str| text.split_whitespace().count();

    if let Some(min) = rules.min_response_tokens {
        if token_count(&sample.response.text) < min {
            return Err(RejectReason::MinLen);
        }
    }
    if let Some(max) = rules.max_turn_tokens {
        let over = sample
            .context
            .iter()
            .chain(std::iter::once(&sample.response))
            .any(|t| token_count(&t.text) > max);
        if over {
            return Err(RejectReason::MaxLen);
        }
    }
    if !rules.blocklist.is_empty() {
        let blocked = |text: &str| {
            text.split_whitespace()
                .any(|tok| rules.blocklist.iter().any(|b| tok.eq_ignore_ascii_case(b)))
        };
        let hit = sample
            .context
            .iter()
            .chain(std::iter::once(&sample.response))
            .any(|t| blocked(&t.text));
        if hit {
            return Err(RejectReason::Blocklist);
        }
    }
    if let Some(ratio) = rules.max_non_text_ratio {
        let too_symbolic = |text: &str| {
            let total = text.chars().count();
            if total == 0 {
                return false;
            }
            let symbols = text
                .chars()
                .filter(|c| !c.is_alphanumeric() && !c.is_whitespace())
                .count();
            symbols as f64 / total as f64 > ratio
        };
        let hit = sample
            .context
            .iter()
            .chain(std::iter::once(&sample.response))
            .any(|t| too_symbolic(&t.text));
        if hit {
            return Err(RejectReason::NonText);
        }
    }
    Ok(sample)
}

/// Full pipeline output: cleaned samples plus every counter.
#[derive(Debug)]
pub struct CorpusBuild {
    pub samples: Vec<DialogueSample>,
    pub stats: CorpusStats,
}

/// records -> trees -> samples -> cleaned samples, with stats folded through.
pub fn build_corpus(
    records: impl IntoIterator<Item = CommentNode>,
    rules: &CleaningConfig,
    role_cap: u32,
) -> CorpusBuild {
    let TreeBuild { trees, mut stats } = build_trees(records);
    let mut samples = Vec::new();
    for tree in &trees {
        for sample in extract_samples(tree, role_cap) {
            stats.samples_extracted += 1;
            match clean(sample, rules) {
                Ok(kept) => {
                    stats.samples_kept += 1;
                    samples.push(kept);
                }
                Err(RejectReason::MinLen) => stats.rejected_min_len += 1,
                Err(RejectReason::MaxLen) => stats.rejected_max_len += 1,
                Err(RejectReason::Blocklist) => stats.rejected_blocklist += 1,
                Err(RejectReason::NonText) => stats.rejected_non_text += 1,
            }
        }
    }
    CorpusBuild { samples, stats }
}

/// Parse comment records from JSON lines (keys: id, parent_id, user_id,
/// text, ts). Blank lines are skipped.
pub fn read_comment_records<R: BufRead>(reader: R) -> Result<Vec<CommentNode>, CorpusError> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let node = serde_json::from_str(&line)
            .map_err(|source| CorpusError::Malformed { line: i + 1, source })?;
        records.push(node);
    }
    Ok(records)
}

pub fn read_comment_file(path: &Path) -> Result<Vec<CommentNode>, CorpusError> {
    let file = std::fs::File::open(path)?;
    read_comment_records(std::io::BufReader::new(file))
}

/// Write samples as JSON lines (keys: context, response, roles).
pub fn write_samples<W: Write>(
    mut writer: W,
    samples: &[DialogueSample],
) -> Result<(), CorpusError> {
    for sample in samples {
        serde_json::to_writer(&mut writer, sample)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_samples<R: BufRead>(reader: R) -> Result<Vec<DialogueSample>, CorpusError> {
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = serde_json::from_str(&line)
            .map_err(|source| CorpusError::Malformed { line: i + 1, source })?;
        samples.push(sample);
    }
    Ok(samples)
}

pub fn read_sample_file(path: &Path) -> Result<Vec<DialogueSample>, CorpusError> {
    let file = std::fs::File::open(path)?;
    read_samples(std::io::BufReader::new(file))
}
