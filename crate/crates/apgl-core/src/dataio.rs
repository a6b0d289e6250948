//! Interaction-log ingestion: parsing, iterative 5-core filtering, dense
//! indexing, chronological sequences, and leave-one-out splits.
//!
//! Splits per user over the kept sequence s (length S): train view =
//! s[0..S-2], validation target = s[S-2], test target = s[S-1]. Item id
//! 0 is reserved for padding; the mask token used by augmentation gets
//! id num_items + 1. Sequences keep only the most recent max_len + 2
//! interactions so the train view never exceeds the model length.

use std::collections::BTreeSet;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::Rng;

use crate::container::Container;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InteractionLog {
    pub records: Vec<RawRecord>,
    pub malformed: usize,
    /// (1-based line number, content) of the first bad line, for messages.
    pub first_malformed: Option<(usize, String)>,
}

#[derive(Debug, Clone, Copy)]
pub struct ParseOptions {
    pub delimiter: char,
    /// With strict set, any malformed line fails the parse.
    pub strict: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            delimiter: '\t',
            strict: false,
        }
    }
}

pub fn parse_log(path: &Path, opts: ParseOptions) -> Result<InteractionLog> {
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    parse_reader(BufReader::new(file), opts)
}

pub fn parse_reader(reader: impl Read, opts: ParseOptions) -> Result<InteractionLog> {
    let mut log = InteractionLog::default();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| CoreError::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(opts.delimiter);
        let (user, item, ts) = (parts.next(), parts.next(), parts.next());
        let parsed = match (user, item, ts) {
            (Some(u), Some(i), Some(t)) if !u.is_empty() && !i.is_empty() => {
                t.trim().parse::<i64>().ok().map(|ts| RawRecord {
                    user: u.to_string(),
                    item: i.to_string(),
                    timestamp: ts,
                })
            }
            _ => None,
        };
        match parsed {
            Some(rec) => log.records.push(rec),
            None => {
                log.malformed += 1;
                if log.first_malformed.is_none() {
                    log.first_malformed = Some((lineno + 1, line));
                }
            }
        }
    }
    if opts.strict && log.malformed > 0 {
        let (line, content) = log.first_malformed.unwrap();
        return Err(CoreError::MalformedInput {
            count: log.malformed,
            first_line: format!("line {line}: {content:?}"),
        });
    }
    Ok(log)
}

/// Iteratively drop users and items with fewer than `min_count`
/// interactions until the remaining log is a fixpoint.
pub fn five_core_filter(log: &InteractionLog, min_count: usize) -> Result<InteractionLog> {
    assert!(min_count >= 1, "min_count must be >= 1, got {min_count}");
    let mut records: Vec<RawRecord> = log.records.clone();
    loop {
        let mut user_count: HashMap<&str, usize> = HashMap::new();
        let mut item_count: HashMap<&str, usize> = HashMap::new();
        for r in &records {
            *user_count.entry(r.user.as_str()).or_insert(0) += 1;
            *item_count.entry(r.item.as_str()).or_insert(0) += 1;
        }
        let before = records.len();
        let kept: Vec<RawRecord> = records
            .iter()
            .filter(|r| {
                user_count[r.user.as_str()] >= min_count && item_count[r.item.as_str()] >= min_count
            })
            .cloned()
            .collect();
        if kept.len() == before {
            if kept.is_empty() {
                return Err(CoreError::EmptyAfterFilter {
                    min_count,
                    detail: format!("started from {} records", log.records.len()),
                });
            }
            return Ok(InteractionLog {
                records: kept,
                malformed: log.malformed,
                first_malformed: log.first_malformed.clone(),
            });
        }
        records = kept;
    }
}

/// Indexed dataset with per-user chronological sequences and split views.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    num_users: usize,
    num_items: usize,
    /// raw ids by dense id (index 0 unused so ids start at 1)
    user_raw: Vec<String>,
    item_raw: Vec<String>,
    /// sequences[u] for dense user u (index 0 empty), each of length >= 3
    sequences: Vec<Vec<u32>>,
    max_len: usize,
}

pub const PADDING_ID: u32 = 0;

pub fn build_dataset(log: &InteractionLog, max_len: usize) -> Result<Dataset> {
    assert!(max_len >= 1, "max_len must be >= 1");
    let mut user_ids: HashMap<&str, u32> = HashMap::new();
    let mut item_ids: HashMap<&str, u32> = HashMap::new();
    let mut user_raw = vec![String::new()];
    let mut item_raw = vec![String::new()];
    // (user dense, timestamp, input order, item dense)
    let mut rows: Vec<(u32, i64, usize, u32)> = Vec::with_capacity(log.records.len());
    for (order, r) in log.records.iter().enumerate() {
        let next_u = user_ids.len() as u32 + 1;
        let u = *user_ids.entry(r.user.as_str()).or_insert_with(|| {
            user_raw.push(r.user.clone());
            next_u
        });
        let next_i = item_ids.len() as u32 + 1;
        let i = *item_ids.entry(r.item.as_str()).or_insert_with(|| {
            item_raw.push(r.item.clone());
            next_i
        });
        rows.push((u, r.timestamp, order, i));
    }
    let num_users = user_ids.len();
    let num_items = item_ids.len();
    let mut sequences: Vec<Vec<u32>> = vec![Vec::new(); num_users + 1];
    // group by user preserving input order, then stable-sort by timestamp
    let mut per_user: Vec<Vec<(i64, usize, u32)>> = vec![Vec::new(); num_users + 1];
    for (u, ts, order, i) in rows {
        per_user[u as usize].push((ts, order, i));
    }
    for (u, mut recs) in per_user.into_iter().enumerate().skip(1) {
        recs.sort_by_key(|&(ts, order, _)| (ts, order));
        let mut seq: Vec<u32> = recs.into_iter().map(|(_, _, i)| i).collect();
        let keep = max_len + 2;
        if seq.len() > keep {
            seq.drain(0..seq.len() - keep);
        }
        if seq.len() < 3 {
            return Err(CoreError::EmptySequence(format!(
                "user {} has only {} interactions; need >= 3 for splits",
                user_raw[u],
                seq.len()
            )));
        }
        sequences[u] = seq;
    }
    Ok(Dataset {
        num_users,
        num_items,
        user_raw,
        item_raw,
        sequences,
        max_len,
    })
}

impl Dataset {
    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Mask token used by sequence augmentation; never a real item.
    pub fn mask_token(&self) -> u32 {
        self.num_items as u32 + 1
    }

    /// Rows needed in the item-embedding table: padding + items + mask.
    pub fn vocab_size(&self) -> usize {
        self.num_items + 2
    }

    /// Node count of the co-occurrence graph: padding + items.
    pub fn num_nodes(&self) -> usize {
        self.num_items + 1
    }

    pub fn users(&self) -> impl Iterator<Item = u32> {
        1..=self.num_users as u32
    }

    fn seq(&self, user: u32) -> Result<&[u32]> {
        self.sequences
            .get(user as usize)
            .filter(|s| !s.is_empty())
            .map(|s| s.as_slice())
            .ok_or(CoreError::UnknownUser(user))
    }

    pub fn full_sequence(&self, user: u32) -> &[u32] {
        self.seq(user).expect("unknown user")
    }

    /// Training view: everything except the last two interactions.
    pub fn train_view(&self, user: u32) -> &[u32] {
        let s = self.full_sequence(user);
        &s[..s.len() - 2]
    }

    pub fn valid_target(&self, user: u32) -> u32 {
        let s = self.full_sequence(user);
        s[s.len() - 2]
    }

    pub fn test_target(&self, user: u32) -> u32 {
        let s = self.full_sequence(user);
        s[s.len() - 1]
    }

    /// Input view for validation ranking: the train view.
    pub fn valid_input(&self, user: u32) -> Vec<u32> {
        self.truncate_to_model(self.train_view(user))
    }

    /// Input view for test ranking: train view plus the validation item.
    pub fn test_input(&self, user: u32) -> Vec<u32> {
        let s = self.full_sequence(user);
        self.truncate_to_model(&s[..s.len() - 1])
    }

    fn truncate_to_model(&self, view: &[u32]) -> Vec<u32> {
        if view.len() > self.max_len {
            view[view.len() - self.max_len..].to_vec()
        } else {
            view.to_vec()
        }
    }

    /// Left-pad a view with the padding id to exactly max_len entries.
    pub fn pad(&self, view: &[u32]) -> Vec<u32> {
        assert!(
            view.len() <= self.max_len,
            "view of length {} exceeds model length {}",
            view.len(),
            self.max_len
        );
        let mut out = vec![PADDING_ID; self.max_len - view.len()];
        out.extend_from_slice(view);
        out
    }

    pub fn raw_user(&self, user: u32) -> &str {
        &self.user_raw[user as usize]
    }

    pub fn raw_item(&self, item: u32) -> &str {
        &self.item_raw[item as usize]
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.put_u64_scalar("meta/num_users", self.num_users as u64);
        c.put_u64_scalar("meta/num_items", self.num_items as u64);
        c.put_u64_scalar("meta/max_len", self.max_len as u64);
        let mut offsets: Vec<u64> = Vec::with_capacity(self.num_users + 1);
        let mut items: Vec<u32> = Vec::new();
        offsets.push(0);
        for u in 1..=self.num_users {
            items.extend_from_slice(&self.sequences[u]);
            offsets.push(items.len() as u64);
        }
        c.put_u64s("seq/offsets", &[offsets.len()], offsets);
        c.put_u32s("seq/items", &[items.len()], items);
        let (ub, uo) = pack_strings(&self.user_raw[1..]);
        c.put_u32s("users/raw_bytes", &[ub.len()], ub);
        c.put_u64s("users/raw_offsets", &[uo.len()], uo);
        let (ib, io) = pack_strings(&self.item_raw[1..]);
        c.put_u32s("items/raw_bytes", &[ib.len()], ib);
        c.put_u64s("items/raw_offsets", &[io.len()], io);
        c
    }

    pub fn from_container(c: &Container) -> Result<Dataset> {
        let num_users = c.u64_scalar("meta/num_users")? as usize;
        let num_items = c.u64_scalar("meta/num_items")? as usize;
        let max_len = c.u64_scalar("meta/max_len")? as usize;
        let offsets = c.u64s("seq/offsets")?;
        let items = c.u32s("seq/items")?;
        if offsets.len() != num_users + 1 {
            return Err(CoreError::Container(format!(
                "seq/offsets has {} entries, expected {}",
                offsets.len(),
                num_users + 1
            )));
        }
        let mut sequences = vec![Vec::new(); num_users + 1];
        for u in 1..=num_users {
            let (lo, hi) = (offsets[u - 1] as usize, offsets[u] as usize);
            if hi < lo || hi > items.len() {
                return Err(CoreError::Container(format!(
                    "seq/offsets entry {u} out of range"
                )));
            }
            sequences[u] = items[lo..hi].to_vec();
        }
        let user_raw = unpack_strings(c.u32s("users/raw_bytes")?, c.u64s("users/raw_offsets")?)?;
        let item_raw = unpack_strings(c.u32s("items/raw_bytes")?, c.u64s("items/raw_offsets")?)?;
        Ok(Dataset {
            num_users,
            num_items,
            user_raw,
            item_raw,
            sequences,
            max_len,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write_to(path)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::from_container(&Container::read_from(path)?)
    }
}

fn pack_strings(strings: &[String]) -> (Vec<u32>, Vec<u64>) {
    let mut bytes = Vec::new();
    let mut offsets = Vec::with_capacity(strings.len() + 1);
    offsets.push(0u64);
    for s in strings {
        bytes.extend(s.as_bytes().iter().map(|&b| b as u32));
        offsets.push(bytes.len() as u64);
    }
    (bytes, offsets)
}

fn unpack_strings(bytes: &[u32], offsets: &[u64]) -> Result<Vec<String>> {
    let mut out = vec![String::new()];
    for w in offsets.windows(2) {
        let (lo, hi) = (w[0] as usize, w[1] as usize);
        if hi < lo || hi > bytes.len() {
            return Err(CoreError::Container("string table offsets out of range".into()));
        }
        let raw: Vec<u8> = bytes[lo..hi].iter().map(|&b| b as u8).collect();
        out.push(
            String::from_utf8(raw)
                .map_err(|_| CoreError::Container("string table is not UTF-8".into()))?,
        );
    }
    Ok(out)
}

/// Uniform draw from {1..num_items} \ set(sequence), rejection-sampled.
pub fn sample_negative(rng: &mut impl Rng, sequence: &[u32], num_items: usize) -> Result<u32> {
    let seen: BTreeSet<u32> = sequence.iter().copied().filter(|&i| i != PADDING_ID).collect();
    if seen.len() >= num_items {
        return Err(CoreError::NegativeSamplingExhausted { num_items });
    }
    loop {
        let candidate = rng.gen_range(1..=num_items as u32);
        if !seen.contains(&candidate) {
            return Ok(candidate);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Stream};
    use std::io::Cursor;

    fn log_from(text: &str) -> InteractionLog {
        parse_reader(Cursor::new(text.as_bytes()), ParseOptions::default()).unwrap()
    }

    #[test]
    fn parses_well_formed_lines() {
        let log = log_from("u1\ti1\t100\nu2\ti2\t50\n");
        assert_eq!(log.records.len(), 2);
        assert_eq!(
            log.records[0],
            RawRecord {
                user: "u1".into(),
                item: "i1".into(),
                timestamp: 100
            }
        );
        assert_eq!(log.malformed, 0);
    }

    #[test]
    fn empty_input_gives_empty_log() {
        let log = log_from("");
        assert!(log.records.is_empty());
        assert_eq!(log.malformed, 0);
    }

    #[test]
    fn malformed_lines_counted_not_fatal_by_default() {
        let log = log_from("u1\ti1\t100\nonly-two\tfields\nu2\ti2\tnot-a-number\n\nu3\ti3\t7\n");
        assert_eq!(log.records.len(), 2);
        assert_eq!(log.malformed, 2);
        assert_eq!(log.first_malformed.as_ref().unwrap().0, 2);
    }

    #[test]
    fn strict_mode_rejects_malformed() {
        let opts = ParseOptions {
            strict: true,
            ..ParseOptions::default()
        };
        let err = parse_reader(Cursor::new(b"a\tb\n".as_slice()), opts).unwrap_err();
        assert!(matches!(err, CoreError::MalformedInput { count: 1, .. }));
    }

    #[test]
    fn custom_delimiter() {
        let opts = ParseOptions {
            delimiter: ',',
            strict: true,
        };
        let log = parse_reader(Cursor::new(b"u,i,5\n".as_slice()), opts).unwrap();
        assert_eq!(log.records[0].timestamp, 5);
    }

    #[test]
    fn extra_fields_are_ignored() {
        let log = log_from("u1\ti1\t100\trating=5\textra\n");
        assert_eq!(log.records.len(), 1);
        assert_eq!(log.records[0].timestamp, 100);
    }

    fn synthetic_log(entries: &[(&str, &str)]) -> InteractionLog {
        InteractionLog {
            records: entries
                .iter()
                .enumerate()
                .map(|(t, &(u, i))| RawRecord {
                    user: u.into(),
                    item: i.into(),
                    timestamp: t as i64,
                })
                .collect(),
            malformed: 0,
            first_malformed: None,
        }
    }

    #[test]
    fn already_dense_log_is_fixpoint() {
        // 5 users x 5 items, every user rates every item.
        let mut entries = Vec::new();
        let users = ["a", "b", "c", "d", "e"];
        let items = ["p", "q", "r", "s", "t"];
        for &u in &users {
            for &i in &items {
                entries.push((u, i));
            }
        }
        let log = synthetic_log(&entries);
        let filtered = five_core_filter(&log, 5).unwrap();
        assert_eq!(filtered.records, log.records);
    }

    #[test]
    fn cascade_removal_propagates() {
        // Core block: users a..e each interact with items p..t (all >= 5).
        // User "x" has 5 interactions but each on a singleton item, so
        // removing those items removes x in the next round.
        let mut entries = Vec::new();
        for &u in &["a", "b", "c", "d", "e"] {
            for &i in &["p", "q", "r", "s", "t"] {
                entries.push((u, i));
            }
        }
        for i in ["z1", "z2", "z3", "z4", "z5"] {
            entries.push(("x", i));
        }
        let log = synthetic_log(&entries);
        let filtered = five_core_filter(&log, 5).unwrap();
        assert_eq!(filtered.records.len(), 25);
        assert!(filtered.records.iter().all(|r| r.user != "x"));
        // post-condition: min count over users and items >= 5
        let mut uc: HashMap<&str, usize> = HashMap::new();
        let mut ic: HashMap<&str, usize> = HashMap::new();
        for r in &filtered.records {
            *uc.entry(r.user.as_str()).or_insert(0) += 1;
            *ic.entry(r.item.as_str()).or_insert(0) += 1;
        }
        assert!(uc.values().all(|&c| c >= 5));
        assert!(ic.values().all(|&c| c >= 5));
    }

    #[test]
    fn min_count_one_is_identity() {
        let log = synthetic_log(&[("a", "x"), ("b", "y")]);
        let filtered = five_core_filter(&log, 1).unwrap();
        assert_eq!(filtered.records, log.records);
    }

    #[test]
    fn empty_result_is_an_error() {
        let log = synthetic_log(&[("a", "x"), ("a", "y"), ("b", "x")]);
        let err = five_core_filter(&log, 5).unwrap_err();
        assert!(matches!(err, CoreError::EmptyAfterFilter { min_count: 5, .. }));
    }

    fn seq_log(user_seqs: &[(&str, &[&str])]) -> InteractionLog {
        let mut records = Vec::new();
        for &(u, items) in user_seqs {
            for (t, &i) in items.iter().enumerate() {
                records.push(RawRecord {
                    user: u.into(),
                    item: i.into(),
                    timestamp: t as i64,
                });
            }
        }
        InteractionLog {
            records,
            malformed: 0,
            first_malformed: None,
        }
    }

    #[test]
    fn dense_ids_follow_first_appearance() {
        let log = seq_log(&[("u2", &["b", "a", "c"]), ("u1", &["a", "d", "b"])]);
        let ds = build_dataset(&log, 10).unwrap();
        assert_eq!(ds.num_users(), 2);
        assert_eq!(ds.num_items(), 4);
        assert_eq!(ds.raw_user(1), "u2");
        assert_eq!(ds.raw_user(2), "u1");
        assert_eq!(ds.raw_item(1), "b");
        assert_eq!(ds.raw_item(2), "a");
        assert_eq!(ds.full_sequence(1), &[1, 2, 3]);
        assert_eq!(ds.full_sequence(2), &[2, 4, 1]);
    }

    #[test]
    fn splits_are_leave_one_out() {
        let log = seq_log(&[("u", &["a", "b", "c", "d", "e"])]);
        let ds = build_dataset(&log, 10).unwrap();
        assert_eq!(ds.train_view(1), &[1, 2, 3]);
        assert_eq!(ds.valid_target(1), 4);
        assert_eq!(ds.test_target(1), 5);
        assert_eq!(ds.valid_input(1), vec![1, 2, 3]);
        assert_eq!(ds.test_input(1), vec![1, 2, 3, 4]);
    }

    #[test]
    fn long_sequences_keep_most_recent_window() {
        // 60 interactions, model length 50: keep the last 52, so the
        // train view is interactions 9..58 (0-based) of the original.
        let items: Vec<String> = (0..60).map(|i| format!("i{i}")).collect();
        let refs: Vec<&str> = items.iter().map(|s| s.as_str()).collect();
        let log = seq_log(&[("u", &refs)]);
        let ds = build_dataset(&log, 50).unwrap();
        let s = ds.full_sequence(1);
        assert_eq!(s.len(), 52);
        assert_eq!(ds.raw_item(s[0]), "i8");
        assert_eq!(ds.train_view(1).len(), 50);
        assert_eq!(ds.raw_item(ds.test_target(1)), "i59");
        assert_eq!(ds.raw_item(ds.valid_target(1)), "i58");
    }

    #[test]
    fn equal_timestamps_preserve_input_order() {
        let log = InteractionLog {
            records: vec![
                RawRecord { user: "u".into(), item: "first".into(), timestamp: 7 },
                RawRecord { user: "u".into(), item: "second".into(), timestamp: 7 },
                RawRecord { user: "u".into(), item: "third".into(), timestamp: 7 },
            ],
            malformed: 0,
            first_malformed: None,
        };
        let ds = build_dataset(&log, 10).unwrap();
        let s = ds.full_sequence(1);
        assert_eq!(ds.raw_item(s[0]), "first");
        assert_eq!(ds.raw_item(s[1]), "second");
        assert_eq!(ds.raw_item(s[2]), "third");
    }

    #[test]
    fn timestamps_sort_chronologically() {
        let log = InteractionLog {
            records: vec![
                RawRecord { user: "u".into(), item: "late".into(), timestamp: 100 },
                RawRecord { user: "u".into(), item: "early".into(), timestamp: 1 },
                RawRecord { user: "u".into(), item: "mid".into(), timestamp: 50 },
            ],
            malformed: 0,
            first_malformed: None,
        };
        let ds = build_dataset(&log, 10).unwrap();
        let names: Vec<&str> = ds.full_sequence(1).iter().map(|&i| ds.raw_item(i)).collect();
        assert_eq!(names, vec!["early", "mid", "late"]);
    }

    #[test]
    fn too_short_sequence_is_rejected() {
        let log = seq_log(&[("u", &["a", "b"])]);
        assert!(matches!(
            build_dataset(&log, 10),
            Err(CoreError::EmptySequence(_))
        ));
    }

    #[test]
    fn padding_is_left_aligned() {
        let log = seq_log(&[("u", &["a", "b", "c", "d", "e"])]);
        let ds = build_dataset(&log, 6).unwrap();
        assert_eq!(ds.pad(&[1, 2, 3]), vec![0, 0, 0, 1, 2, 3]);
    }

    #[test]
    fn serialization_round_trips_and_is_deterministic() {
        let log = seq_log(&[
            ("u1", &["a", "b", "c", "d"]),
            ("u2", &["b", "c", "a", "e", "f"]),
        ]);
        let ds = build_dataset(&log, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("d1"), dir.path().join("d2"));
        ds.save(&p1).unwrap();
        build_dataset(&log, 8).unwrap().save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let back = Dataset::load(&p1).unwrap();
        assert_eq!(ds, back);
        assert_eq!(back.raw_item(5), "e");
        assert_eq!(back.train_view(2), ds.train_view(2));
    }

    #[test]
    fn forced_negative_is_the_only_candidate() {
        let mut rng = derive(1, Stream::Negatives, 0);
        for _ in 0..20 {
            let neg = sample_negative(&mut rng, &[1, 2], 3).unwrap();
            assert_eq!(neg, 3);
        }
    }

    #[test]
    fn negative_sampling_is_seeded() {
        let mut r1 = derive(42, Stream::Negatives, 7);
        let mut r2 = derive(42, Stream::Negatives, 7);
        let seq = [3u32, 9, 14];
        for _ in 0..50 {
            assert_eq!(
                sample_negative(&mut r1, &seq, 100).unwrap(),
                sample_negative(&mut r2, &seq, 100).unwrap()
            );
        }
    }

    #[test]
    fn exhausted_candidates_error() {
        let mut rng = derive(1, Stream::Negatives, 0);
        let err = sample_negative(&mut rng, &[1, 2, 3], 3).unwrap_err();
        assert!(matches!(err, CoreError::NegativeSamplingExhausted { num_items: 3 }));
    }

    #[test]
    fn negative_sampling_is_uniform_over_complement() {
        // chi-square over the 90 allowed items; threshold is the 99.9th
        // percentile for 89 degrees of freedom (~135.98). Frozen seed.
        let seq: Vec<u32> = (1..=10).collect();
        let mut rng = derive(2024, Stream::Negatives, 0);
        let draws = 90_000usize;
        let mut counts = vec![0usize; 101];
        for _ in 0..draws {
            let n = sample_negative(&mut rng, &seq, 100).unwrap();
            assert!(n >= 11);
            counts[n as usize] += 1;
        }
        let expected = draws as f64 / 90.0;
        let chi2: f64 = (11..=100)
            .map(|i| {
                let diff = counts[i] as f64 - expected;
                diff * diff / expected
            })
            .sum();
        assert!(chi2 < 135.98, "chi-square statistic {chi2} too large");
    }

    #[test]
    fn vocab_and_mask_layout() {
        let log = seq_log(&[("u", &["a", "b", "c"])]);
        let ds = build_dataset(&log, 4).unwrap();
        assert_eq!(ds.num_items(), 3);
        assert_eq!(ds.mask_token(), 4);
        assert_eq!(ds.vocab_size(), 5);
        assert_eq!(ds.num_nodes(), 4);
    }
}
