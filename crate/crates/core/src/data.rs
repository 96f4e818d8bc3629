//! Ingestion of raw multi-behavior interaction logs.
//!
//! The pipeline is `parse_log → deduplicate → build_dataset`, optionally
//! followed by [`mask_cold_start`]. A [`Dataset`] can be persisted as a
//! versioned text bundle with [`write_bundle`] / [`read_bundle`].

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BUNDLE_MAGIC: &str = "MBHGCN-DATA-v1";

/// One raw `(user, item, behavior, timestamp)` tuple.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user: String,
    pub item: String,
    pub behavior: String,
    pub timestamp: u64,
}

impl InteractionRecord {
    pub fn new(user: &str, item: &str, behavior: &str, timestamp: u64) -> Self {
        InteractionRecord {
            user: user.to_owned(),
            item: item.to_owned(),
            behavior: behavior.to_owned(),
            timestamp,
        }
    }
}

/// Field separator of a raw log.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Delimiter {
    #[default]
    Tab,
    /// Any run of ASCII whitespace.
    Whitespace,
    Char(char),
}

impl Delimiter {
    fn split<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match *self {
            Delimiter::Tab => line.split('\t').collect(),
            Delimiter::Whitespace => line.split_ascii_whitespace().collect(),
            Delimiter::Char(c) => line.split(c).collect(),
        }
    }
}

impl std::str::FromStr for Delimiter {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "tab" | "\\t" | "\t" => Ok(Delimiter::Tab),
            "whitespace" | "ws" | "space" | " " => Ok(Delimiter::Whitespace),
            other => {
                let mut chars = other.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) => Ok(Delimiter::Char(c)),
                    _ => Err(format!("unsupported delimiter `{other}`")),
                }
            }
        }
    }
}

/// Reads a raw interaction log. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_log(
    path: &Path,
    behavior_vocab: &[String],
    delimiter: Delimiter,
) -> Result<Vec<InteractionRecord>> {
    let reader = BufReader::new(File::open(path)?);
    parse_lines(reader, behavior_vocab, delimiter)
}

pub fn parse_lines<R: BufRead>(
    reader: R,
    behavior_vocab: &[String],
    delimiter: Delimiter,
) -> Result<Vec<InteractionRecord>> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let fields = delimiter.split(line);
        if fields.len() != 4 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::MalformedLine { line: line_no });
        }
        let behavior = fields[2];
        if !behavior_vocab.iter().any(|b| b == behavior) {
            return Err(Error::UnknownBehavior {
                label: behavior.to_owned(),
                line: line_no,
            });
        }
        let timestamp = fields[3]
            .trim()
            .parse::<u64>()
            .map_err(|_| Error::MalformedLine { line: line_no })?;
        records.push(InteractionRecord::new(
            fields[0], fields[1], behavior, timestamp,
        ));
    }
    Ok(records)
}

/// Keeps, for each `(user, item, behavior)` triple, the earliest record.
/// Equal timestamps resolve to the first occurrence; survivors keep their
/// relative input order.
pub fn deduplicate(records: &[InteractionRecord]) -> Vec<InteractionRecord> {
    let mut best: HashMap<(&str, &str, &str), usize> = HashMap::new();
    for (pos, r) in records.iter().enumerate() {
        let key = (r.user.as_str(), r.item.as_str(), r.behavior.as_str());
        match best.get_mut(&key) {
            Some(kept) if records[*kept].timestamp > r.timestamp => *kept = pos,
            Some(_) => {}
            None => {
                best.insert(key, pos);
            }
        }
    }
    let mut keep: Vec<usize> = best.into_values().collect();
    keep.sort_unstable();
    keep.into_iter().map(|pos| records[pos].clone()).collect()
}

/// ID-mapped multi-behavior training data with leave-one-out holdouts.
///
/// `behaviors` lists labels with the target behavior last. `edges[k]` holds
/// the *training* interactions of behavior `k`; for the target behavior the
/// validation and test items are excluded. `item_counts[i][k]` is the number
/// of distinct users interacting with item `i` in `edges[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub behaviors: Vec<String>,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    pub edges: Vec<Vec<(usize, usize)>>,
    pub item_counts: Vec<Vec<u32>>,
    pub valid: Vec<Option<usize>>,
    pub test: Vec<Option<usize>>,
}

impl Dataset {
    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn num_behaviors(&self) -> usize {
        self.behaviors.len()
    }

    /// Index of the target behavior (always the last one).
    pub fn target(&self) -> usize {
        self.behaviors.len() - 1
    }

    /// Users holding a test item, ascending.
    pub fn test_users(&self) -> Vec<usize> {
        holdout_users(&self.test)
    }

    pub fn valid_users(&self) -> Vec<usize> {
        holdout_users(&self.valid)
    }

    /// Sorted training items of every user in behavior `k`.
    pub fn user_items(&self, k: usize) -> Vec<Vec<usize>> {
        let mut lists = vec![Vec::new(); self.num_users()];
        for &(u, i) in &self.edges[k] {
            lists[u].push(i);
        }
        for list in &mut lists {
            list.sort_unstable();
        }
        lists
    }

    /// `counts[u][k]`: training interactions of user `u` in behavior `k`.
    pub fn user_counts(&self) -> Vec<Vec<u32>> {
        let mut counts = vec![vec![0u32; self.num_behaviors()]; self.num_users()];
        for (k, edges) in self.edges.iter().enumerate() {
            for &(u, _) in edges {
                counts[u][k] += 1;
            }
        }
        counts
    }

    pub fn recompute_item_counts(&mut self) {
        self.item_counts = count_items(self.num_items(), &self.edges);
    }

    /// Table-style statistics: users, items and per-behavior training edges.
    pub fn stats(&self) -> Vec<(String, usize)> {
        let mut out = vec![
            ("users".to_owned(), self.num_users()),
            ("items".to_owned(), self.num_items()),
        ];
        for (label, edges) in self.behaviors.iter().zip(&self.edges) {
            out.push((label.clone(), edges.len()));
        }
        out.push(("valid".to_owned(), self.valid_users().len()));
        out.push(("test".to_owned(), self.test_users().len()));
        out
    }
}

fn holdout_users(holdout: &[Option<usize>]) -> Vec<usize> {
    holdout
        .iter()
        .enumerate()
        .filter_map(|(u, h)| h.map(|_| u))
        .collect()
}

fn count_items(num_items: usize, edges: &[Vec<(usize, usize)>]) -> Vec<Vec<u32>> {
    let mut counts = vec![vec![0u32; edges.len()]; num_items];
    for (k, list) in edges.iter().enumerate() {
        for &(_, i) in list {
            counts[i][k] += 1;
        }
    }
    counts
}

/// Maps raw IDs to dense indices (first appearance order) and splits the
/// target behavior chronologically: last interaction → test, second-to-last
/// → validation (only with ≥ 3 interactions), the rest → training.
/// Records are deduplicated first.
pub fn build_dataset(records: &[InteractionRecord], behavior_order: &[String]) -> Result<Dataset> {
    let records = deduplicate(records);
    let target_label = behavior_order
        .last()
        .ok_or_else(|| Error::config("behaviors", "at least one behavior is required"))?;
    let target = behavior_order.len() - 1;
    let behavior_index: HashMap<&str, usize> = behavior_order
        .iter()
        .enumerate()
        .map(|(k, b)| (b.as_str(), k))
        .collect();

    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut user_map: HashMap<&str, usize> = HashMap::new();
    let mut item_map: HashMap<&str, usize> = HashMap::new();
    // (user, item, behavior, timestamp, input position)
    let mut mapped = Vec::with_capacity(records.len());
    for (pos, r) in records.iter().enumerate() {
        let k = *behavior_index
            .get(r.behavior.as_str())
            .ok_or_else(|| Error::UnknownBehavior {
                label: r.behavior.clone(),
                line: pos + 1,
            })?;
        let u = *user_map.entry(r.user.as_str()).or_insert_with(|| {
            user_ids.push(r.user.clone());
            user_ids.len() - 1
        });
        let i = *item_map.entry(r.item.as_str()).or_insert_with(|| {
            item_ids.push(r.item.clone());
            item_ids.len() - 1
        });
        mapped.push((u, i, k, r.timestamp, pos));
    }

    if !mapped.iter().any(|&(_, _, k, _, _)| k == target) {
        return Err(Error::EmptyTargetBehavior(target_label.clone()));
    }

    let num_users = user_ids.len();
    let mut per_user_target: Vec<Vec<(u64, usize, usize)>> = vec![Vec::new(); num_users];
    for &(u, i, k, t, pos) in &mapped {
        if k == target {
            per_user_target[u].push((t, pos, i));
        }
    }
    let mut valid = vec![None; num_users];
    let mut test = vec![None; num_users];
    let mut held_out: HashSet<usize> = HashSet::new();
    for (u, list) in per_user_target.iter_mut().enumerate() {
        list.sort_unstable();
        if list.len() >= 2 {
            let (_, pos, item) = list[list.len() - 1];
            test[u] = Some(item);
            held_out.insert(pos);
        }
        if list.len() >= 3 {
            let (_, pos, item) = list[list.len() - 2];
            valid[u] = Some(item);
            held_out.insert(pos);
        }
    }

    let mut edges = vec![Vec::new(); behavior_order.len()];
    for &(u, i, k, _, pos) in &mapped {
        if k == target && held_out.contains(&pos) {
            continue;
        }
        edges[k].push((u, i));
    }
    let item_counts = count_items(item_ids.len(), &edges);

    Ok(Dataset {
        behaviors: behavior_order.to_vec(),
        user_ids,
        item_ids,
        edges,
        item_counts,
        valid,
        test,
    })
}

/// Simulates hard cold-start users.
///
/// Picks `n_cold` users holding a test item (seeded), removes all of their
/// target-behavior training edges, and removes from every auxiliary behavior
/// the pairs `(u, i)` where `i` is any target-behavior item of `u` (training,
/// validation or test). Returns the masked dataset and the selected users in
/// ascending order.
pub fn mask_cold_start(
    dataset: &Dataset,
    n_cold: usize,
    seed: u64,
) -> Result<(Dataset, Vec<usize>)> {
    let candidates = dataset.test_users();
    if n_cold > candidates.len() {
        return Err(Error::NotEnoughTestUsers {
            requested: n_cold,
            available: candidates.len(),
        });
    }
    if n_cold == 0 {
        return Ok((dataset.clone(), Vec::new()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = candidates;
    let (chosen, _) = pool.partial_shuffle(&mut rng, n_cold);
    let mut cold: Vec<usize> = chosen.to_vec();
    cold.sort_unstable();

    let target = dataset.target();
    let mut is_cold = vec![false; dataset.num_users()];
    for &u in &cold {
        is_cold[u] = true;
    }
    let mut target_pairs: HashSet<(usize, usize)> = HashSet::new();
    for &(u, i) in &dataset.edges[target] {
        if is_cold[u] {
            target_pairs.insert((u, i));
        }
    }
    for &u in &cold {
        for item in [dataset.valid[u], dataset.test[u]].into_iter().flatten() {
            target_pairs.insert((u, item));
        }
    }

    let mut masked = dataset.clone();
    for (k, edges) in masked.edges.iter_mut().enumerate() {
        if k == target {
            edges.retain(|&(u, _)| !is_cold[u]);
        } else {
            edges.retain(|pair| !target_pairs.contains(pair));
        }
    }
    masked.recompute_item_counts();
    Ok((masked, cold))
}

/// Serializes a dataset as the tab-separated `MBHGCN-DATA-v1` bundle.
///
/// ```text
/// MBHGCN-DATA-v1
/// behaviors <b_1> ... <b_K>
/// users <M>
/// items <N>
/// u <raw id>            (M lines, index order)
/// i <raw id>            (N lines, index order)
/// e <k> <user> <item>   (training edges, per behavior in order)
/// v <user> <item>       (validation holdouts)
/// t <user> <item>       (test holdouts)
/// n <item> <k> <count>  (non-zero item counts)
/// end
/// ```
pub fn write_bundle<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    writeln!(out, "{BUNDLE_MAGIC}")?;
    writeln!(out, "behaviors\t{}", dataset.behaviors.join("\t"))?;
    writeln!(out, "users\t{}", dataset.num_users())?;
    writeln!(out, "items\t{}", dataset.num_items())?;
    for id in &dataset.user_ids {
        writeln!(out, "u\t{id}")?;
    }
    for id in &dataset.item_ids {
        writeln!(out, "i\t{id}")?;
    }
    for (k, edges) in dataset.edges.iter().enumerate() {
        for &(u, i) in edges {
            writeln!(out, "e\t{k}\t{u}\t{i}")?;
        }
    }
    for (u, v) in dataset.valid.iter().enumerate() {
        if let Some(i) = v {
            writeln!(out, "v\t{u}\t{i}")?;
        }
    }
    for (u, t) in dataset.test.iter().enumerate() {
        if let Some(i) = t {
            writeln!(out, "t\t{u}\t{i}")?;
        }
    }
    for (i, row) in dataset.item_counts.iter().enumerate() {
        for (k, &c) in row.iter().enumerate() {
            if c > 0 {
                writeln!(out, "n\t{i}\t{k}\t{c}")?;
            }
        }
    }
    writeln!(out, "end")?;
    out.flush()?;
    Ok(())
}

pub fn save_bundle(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = std::io::BufWriter::new(File::create(path)?);
    write_bundle(dataset, file)
}

pub fn load_bundle(path: &Path) -> Result<Dataset> {
    read_bundle(BufReader::new(File::open(path)?))
}

/// Parses a bundle written by [`write_bundle`]. Stored item counts must
/// agree with a recount of the edges.
pub fn read_bundle<R: BufRead>(reader: R) -> Result<Dataset> {
    const KIND: &str = "dataset bundle";
    let mut lines = reader.lines().enumerate();
    let mut next = |expect: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((n, line)) => Ok((n + 1, line?)),
            None => Err(Error::format(
                KIND,
                0,
                format!("unexpected end of file, expected {expect}"),
            )),
        }
    };

    let (n, magic) = next("magic header")?;
    if magic.trim_end() != BUNDLE_MAGIC {
        return Err(Error::format(KIND, n, format!("expected `{BUNDLE_MAGIC}`")));
    }
    let (n, line) = next("behaviors")?;
    let behaviors: Vec<String> = match line.strip_prefix("behaviors\t") {
        Some(rest) => rest.split('\t').map(str::to_owned).collect(),
        None => return Err(Error::format(KIND, n, "expected `behaviors`")),
    };
    let parse_header = |line: &str, key: &str, n: usize| -> Result<usize> {
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix('\t'))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(KIND, n, format!("expected `{key} <count>`")))
    };
    let (n, line) = next("users")?;
    let num_users = parse_header(&line, "users", n)?;
    let (n, line) = next("items")?;
    let num_items = parse_header(&line, "items", n)?;
    let num_behaviors = behaviors.len();

    let mut user_ids = Vec::with_capacity(num_users);
    let mut item_ids = Vec::with_capacity(num_items);
    let mut edges = vec![Vec::new(); num_behaviors];
    let mut valid = vec![None; num_users];
    let mut test = vec![None; num_users];
    let mut stored_counts = vec![vec![0u32; num_behaviors]; num_items];
    let mut finished = false;

    for (idx, line) in lines {
        let n = idx + 1;
        let line = line?;
        if line == "end" {
            finished = true;
            break;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |reason: &str| Error::format(KIND, n, reason.to_owned());
        let index = |s: &str, bound: usize, what: &str| -> Result<usize> {
            match s.parse::<usize>() {
                Ok(v) if v < bound => Ok(v),
                _ => Err(Error::format(
                    KIND,
                    n,
                    format!("{what} index `{s}` out of range"),
                )),
            }
        };
        match fields.as_slice() {
            ["u", id] => user_ids.push((*id).to_owned()),
            ["i", id] => item_ids.push((*id).to_owned()),
            ["e", k, u, i] => {
                let k = index(k, num_behaviors, "behavior")?;
                edges[k].push((index(u, num_users, "user")?, index(i, num_items, "item")?));
            }
            ["v", u, i] => valid[index(u, num_users, "user")?] = Some(index(i, num_items, "item")?),
            ["t", u, i] => test[index(u, num_users, "user")?] = Some(index(i, num_items, "item")?),
            ["n", i, k, c] => {
                let i = index(i, num_items, "item")?;
                let k = index(k, num_behaviors, "behavior")?;
                stored_counts[i][k] = c.parse().map_err(|_| bad("bad count"))?;
            }
            _ => return Err(bad("unrecognized record")),
        }
    }
    if !finished {
        return Err(Error::format(KIND, 0, "missing `end` trailer"));
    }
    if user_ids.len() != num_users || item_ids.len() != num_items {
        return Err(Error::format(
            KIND,
            0,
            "ID table length disagrees with header",
        ));
    }
    let item_counts = count_items(num_items, &edges);
    if item_counts != stored_counts {
        return Err(Error::format(
            KIND,
            0,
            "stored item counts disagree with edges",
        ));
    }
    Ok(Dataset {
        behaviors,
        user_ids,
        item_ids,
        edges,
        item_counts,
        valid,
        test,
    })
}

/// Writes the raw-ID ↔ index mapping as `kind<TAB>index<TAB>raw` lines.
pub fn write_id_map<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    for (idx, id) in dataset.user_ids.iter().enumerate() {
        writeln!(out, "user\t{idx}\t{id}")?;
    }
    for (idx, id) in dataset.item_ids.iter().enumerate() {
        writeln!(out, "item\t{idx}\t{id}")?;
    }
    out.flush()?;
    Ok(())
}
