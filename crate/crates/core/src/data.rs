//! Interaction logs, padded sequences, the leave-one-out split and negative
//! sampling.
//!
//! Input files are UTF-8 text with one `user<TAB>item<TAB>unix_seconds` row
//! per line. A first line whose first field is not a number is a header.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use sha2::{Digest, Sha256};

use crate::block::AttentionContext;
use crate::embedding::PAD;
use crate::seed::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub item: usize,
    pub ts: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserHistory {
    pub user: u64,
    pub events: Vec<Event>,
}

impl UserHistory {
    pub fn items(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.item).collect()
    }

    pub fn times(&self) -> Vec<i64> {
        self.events.iter().map(|e| e.ts).collect()
    }
}

/// Chronological per-user histories over dense item ids `1..num_items`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionStore {
    /// Item count including PAD.
    pub num_items: usize,
    /// Raw id of each dense id; entry 0 (PAD) is 0.
    pub raw_items: Vec<u64>,
    pub users: Vec<UserHistory>,
}

impl InteractionStore {
    pub fn interactions(&self) -> usize {
        self.users.iter().map(|u| u.events.len()).sum()
    }

    /// Writes the store back out as TSV with dense ids.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("user_id\titem_id\ttimestamp\n");
        for u in &self.users {
            for e in &u.events {
                out.push_str(&format!("{}\t{}\t{}\n", u.user, e.item, e.ts));
            }
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestOptions {
    pub min_user_len: usize,
    pub min_item_count: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            min_user_len: 3,
            min_item_count: 1,
        }
    }
}

fn parse_field<V: std::str::FromStr>(field: Option<&str>, line: usize, what: &str) -> Result<V> {
    let field = field.ok_or_else(|| Error::Parse {
        line,
        message: format!("missing {what} field"),
    })?;
    field.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {what} `{}`", field.trim()),
    })
}

/// Parses TSV text into a filtered, densely re-indexed store.
pub fn parse_tsv(text: &str, opts: IngestOptions) -> Result<InteractionStore> {
    let mut raw: BTreeMap<u64, Vec<(u64, i64)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        if line_no == 1 {
            let first = line.split('\t').next().unwrap_or("").trim();
            if first.parse::<u64>().is_err() {
                continue;
            }
        }
        let user: u64 = parse_field(fields.next(), line_no, "user id")?;
        let item: u64 = parse_field(fields.next(), line_no, "item id")?;
        let ts: i64 = parse_field(fields.next(), line_no, "timestamp")?;
        if fields.next().is_some() {
            return Err(Error::Parse {
                line: line_no,
                message: "expected exactly three tab-separated fields".into(),
            });
        }
        raw.entry(user).or_default().push((item, ts));
    }
    if raw.is_empty() {
        return Err(Error::Data("no interactions in input".into()));
    }

    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for events in raw.values() {
        for &(item, _) in events {
            *counts.entry(item).or_default() += 1;
        }
    }
    let mut kept: Vec<(u64, Vec<(u64, i64)>)> = raw
        .into_iter()
        .map(|(u, evs)| {
            let evs: Vec<_> = evs
                .into_iter()
                .filter(|(item, _)| counts[item] >= opts.min_item_count)
                .collect();
            (u, evs)
        })
        .filter(|(_, evs)| evs.len() >= opts.min_user_len)
        .collect();
    if kept.is_empty() {
        return Err(Error::Data(format!(
            "no user has at least {} interactions after filtering",
            opts.min_user_len
        )));
    }

    let mut raw_items: Vec<u64> = kept
        .iter()
        .flat_map(|(_, evs)| evs.iter().map(|&(i, _)| i))
        .collect();
    raw_items.sort_unstable();
    raw_items.dedup();
    let dense: BTreeMap<u64, usize> = raw_items.iter().enumerate().map(|(i, &r)| (r, i + 1)).collect();

    let users = kept
        .iter_mut()
        .map(|(user, evs)| {
            evs.sort_by_key(|&(_, ts)| ts);
            UserHistory {
                user: *user,
                events: evs
                    .iter()
                    .map(|&(item, ts)| Event {
                        item: dense[&item],
                        ts,
                    })
                    .collect(),
            }
        })
        .collect();
    let mut all = vec![0];
    all.extend(raw_items);
    Ok(InteractionStore {
        num_items: all.len(),
        raw_items: all,
        users,
    })
}

pub fn ingest(path: &Path, opts: IngestOptions) -> Result<InteractionStore> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&text, opts)
}

const CACHE_MAGIC: &[u8; 4] = b"FXDS";
const CACHE_VERSION: u32 = 1;

/// Cache file name for a given input and option set.
pub fn cache_key(bytes: &[u8], opts: IngestOptions) -> String {
    let mut h = Sha256::new();
    h.update(CACHE_VERSION.to_le_bytes());
    h.update((opts.min_user_len as u64).to_le_bytes());
    h.update((opts.min_item_count as u64).to_le_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_store(store: &InteractionStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.raw_items.len() as u64).to_le_bytes());
    for &r in &store.raw_items {
        out.extend_from_slice(&r.to_le_bytes());
    }
    out.extend_from_slice(&(store.users.len() as u64).to_le_bytes());
    for u in &store.users {
        out.extend_from_slice(&u.user.to_le_bytes());
        out.extend_from_slice(&(u.events.len() as u64).to_le_bytes());
        for e in &u.events {
            out.extend_from_slice(&(e.item as u64).to_le_bytes());
            out.extend_from_slice(&e.ts.to_le_bytes());
        }
    }
    out
}

pub fn decode_store(bytes: &[u8]) -> Result<InteractionStore> {
    let bad = || Error::Data("truncated or corrupt store cache".into());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(bad)?;
        pos += n;
        Ok(s)
    };
    if take(4)? != CACHE_MAGIC {
        return Err(Error::Data("not a store cache".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(Error::Data(format!("store cache version {version} unsupported")));
    }
    let mut u64_at = || -> Result<u64> { Ok(u64::from_le_bytes(take(8)?.try_into().unwrap())) };
    let n_items = u64_at()? as usize;
    let raw_items = (0..n_items).map(|_| u64_at()).collect::<Result<Vec<_>>>()?;
    let n_users = u64_at()? as usize;
    let mut users = Vec::with_capacity(n_users);
    for _ in 0..n_users {
        let user = u64_at()?;
        let len = u64_at()? as usize;
        let events = (0..len)
            .map(|_| {
                Ok(Event {
                    item: u64_at()? as usize,
                    ts: u64_at()? as i64,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        users.push(UserHistory { user, events });
    }
    Ok(InteractionStore {
        num_items: raw_items.len(),
        raw_items,
        users,
    })
}

/// Ingests through a content-addressed binary cache in `cache_dir`.
pub fn ingest_cached(path: &Path, opts: IngestOptions, cache_dir: &Path) -> Result<InteractionStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: PathBuf = cache_dir.join(format!("{}.fxds", cache_key(&bytes, opts)));
    if let Ok(cached) = fs::read(&file) {
        if let Ok(store) = decode_store(&cached) {
            return Ok(store);
        }
    }
    let text = String::from_utf8(bytes).map_err(|_| Error::Data(format!("{} is not UTF-8", path.display())))?;
    let store = parse_tsv(&text, opts)?;
    fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    fs::write(&file, encode_store(&store)).map_err(|e| Error::io(&file, e))?;
    Ok(store)
}

/// A fixed-length, left-padded item/timestamp window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Padded {
    pub items: Vec<usize>,
    pub times: Vec<i64>,
}

impl Padded {
    /// Keeps the most recent `n` events and left-pads with PAD. Padded
    /// timestamps copy the first real timestamp.
    pub fn new(items: &[usize], times: &[i64], n: usize) -> Self {
        let start = items.len().saturating_sub(n);
        let (items, times) = (&items[start..], &times[start..]);
        let pad = n - items.len();
        let fill = times.first().copied().unwrap_or(0);
        let mut out_items = vec![PAD; pad];
        out_items.extend_from_slice(items);
        let mut out_times = vec![fill; pad];
        out_times.extend_from_slice(times);
        Self {
            items: out_items,
            times: out_times,
        }
    }

    pub fn unpad(&self) -> &[usize] {
        let first = self.items.iter().position(|&i| i != PAD).unwrap_or(self.items.len());
        &self.items[first..]
    }
}

pub fn build_sequences(store: &InteractionStore, n: usize) -> Result<Vec<Padded>> {
    if n < 2 {
        return Err(Error::config(format!("max_len must be at least 2, got {n}")));
    }
    Ok(store
        .users
        .iter()
        .map(|u| Padded::new(&u.items(), &u.times(), n))
        .collect())
}

/// One held-out prediction: the full history before `target`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalCase {
    pub user: u64,
    pub items: Vec<usize>,
    pub times: Vec<i64>,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainSequence {
    pub user: u64,
    pub items: Vec<usize>,
    pub times: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub num_items: usize,
    pub train: Vec<TrainSequence>,
    pub valid: Vec<EvalCase>,
    pub test: Vec<EvalCase>,
}

/// Last item tests, second-to-last validates, the rest trains.
pub fn split_leave_one_out(store: &InteractionStore) -> Result<Split> {
    let mut split = Split {
        num_items: store.num_items,
        train: Vec::with_capacity(store.users.len()),
        valid: Vec::with_capacity(store.users.len()),
        test: Vec::with_capacity(store.users.len()),
    };
    for u in &store.users {
        let m = u.events.len();
        if m < 3 {
            return Err(Error::Data(format!(
                "user {} has {m} interactions, leave-one-out needs 3",
                u.user
            )));
        }
        let (items, times) = (u.items(), u.times());
        split.train.push(TrainSequence {
            user: u.user,
            items: items[..m - 2].to_vec(),
            times: times[..m - 2].to_vec(),
        });
        split.valid.push(EvalCase {
            user: u.user,
            items: items[..m - 2].to_vec(),
            times: times[..m - 2].to_vec(),
            target: items[m - 2],
        });
        split.test.push(EvalCase {
            user: u.user,
            items: items[..m - 1].to_vec(),
            times: times[..m - 1].to_vec(),
            target: items[m - 1],
        });
    }
    Ok(split)
}

/// Model input: `[batch × len]` ids, timestamps, validity and next-item
/// targets (PAD where there is none).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceBatch {
    pub batch: usize,
    pub len: usize,
    pub items: Vec<usize>,
    pub times: Vec<i64>,
    pub valid: Vec<bool>,
    pub targets: Vec<usize>,
}

impl SequenceBatch {
    /// Autoregressive windows: each position predicts the following item.
    pub fn for_training(seqs: &[&TrainSequence], n: usize) -> Self {
        let mut b = Self::empty(seqs.len(), n);
        for s in seqs {
            let m = s.items.len();
            let start = m.saturating_sub(n + 1);
            let (items, times) = (&s.items[start..], &s.times[start..]);
            let k = items.len().saturating_sub(1);
            let input = Padded::new(&items[..k], &times[..k], n);
            let mut targets = vec![PAD; n - k];
            targets.extend_from_slice(&items[1..]);
            b.push(input, targets);
        }
        b
    }

    /// Evaluation inputs; no targets.
    pub fn for_eval(cases: &[&EvalCase], n: usize) -> Self {
        let mut b = Self::empty(cases.len(), n);
        for c in cases {
            b.push(Padded::new(&c.items, &c.times, n), vec![PAD; n]);
        }
        b
    }

    fn empty(batch: usize, len: usize) -> Self {
        Self {
            batch,
            len,
            items: Vec::with_capacity(batch * len),
            times: Vec::with_capacity(batch * len),
            valid: Vec::with_capacity(batch * len),
            targets: Vec::with_capacity(batch * len),
        }
    }

    fn push(&mut self, p: Padded, targets: Vec<usize>) {
        self.valid.extend(p.items.iter().map(|&i| i != PAD));
        self.items.extend(p.items);
        self.times.extend(p.times);
        self.targets.extend(targets);
    }

    pub fn context(&self) -> AttentionContext {
        AttentionContext {
            batch: self.batch,
            len: self.len,
            timestamps: self.times.clone(),
            valid: self.valid.clone(),
        }
    }

    /// Flat indices of positions with a next-item target.
    pub fn target_positions(&self) -> Vec<usize> {
        (0..self.targets.len()).filter(|&i| self.targets[i] != PAD).collect()
    }
}

/// `n_neg` distinct real items, none equal to `positive`, uniform over the
/// remaining `num_items − 2`.
pub fn sample_negatives(rng: &mut Rng, n_neg: usize, positive: usize, num_items: usize) -> Result<Vec<usize>> {
    if n_neg == 0 {
        return Err(Error::config("need at least one negative"));
    }
    let pool = num_items.saturating_sub(2);
    if n_neg > pool {
        return Err(Error::config(format!(
            "{n_neg} negatives requested but only {pool} candidates exist"
        )));
    }
    // slot i covers real items 1.. with the positive skipped
    Ok(index::sample(rng, pool, n_neg)
        .into_iter()
        .map(|i| if i + 1 >= positive { i + 2 } else { i + 1 })
        .collect())
}
