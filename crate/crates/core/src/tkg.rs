//! Temporal knowledge graph storage: vocabularies, quadruples, snapshots and
//! temporal splits.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type EntityId = u32;
pub type RelationId = u32;
pub type TimestampId = u32;

pub const DATE_FORMAT: &str = "%Y-%m-%d";

/// One fact `(s, r, o, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Quadruple {
    pub s: EntityId,
    pub r: RelationId,
    pub o: EntityId,
    pub t: TimestampId,
}

impl Quadruple {
    pub fn new(s: EntityId, r: RelationId, o: EntityId, t: TimestampId) -> Self {
        Self { s, r, o, t }
    }

    /// Storage order: timestamp first, then `(s, r, o)`.
    pub fn time_key(&self) -> (TimestampId, EntityId, RelationId, EntityId) {
        (self.t, self.s, self.r, self.o)
    }

    pub fn triple(&self) -> (EntityId, RelationId, EntityId) {
        (self.s, self.r, self.o)
    }
}

/// Entity, relation and timestamp vocabularies with dense ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocab {
    pub entity_names: Vec<String>,
    pub relation_names: Vec<String>,
    pub timestamp_labels: Vec<NaiveDate>,
    entity_index: HashMap<String, EntityId>,
    relation_index: HashMap<String, RelationId>,
}

impl Vocab {
    pub fn new(
        entity_names: Vec<String>,
        relation_names: Vec<String>,
        timestamp_labels: Vec<NaiveDate>,
    ) -> Result<Self> {
        let entity_index = index_names(&entity_names, "entity")?;
        let relation_index = index_names(&relation_names, "relation")?;
        if timestamp_labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::format(
                "timestamp labels must be strictly increasing",
            ));
        }
        Ok(Self {
            entity_names,
            relation_names,
            timestamp_labels,
            entity_index,
            relation_index,
        })
    }

    /// Vocabulary with every day from `start` to `end` inclusive as timestamps.
    pub fn with_date_range(start: NaiveDate, end: NaiveDate) -> Self {
        Self {
            timestamp_labels: start.iter_days().take_while(|d| *d <= end).collect(),
            ..Default::default()
        }
    }

    pub fn num_entities(&self) -> usize {
        self.entity_names.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_names.len()
    }

    pub fn num_timestamps(&self) -> usize {
        self.timestamp_labels.len()
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entity_index.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relation_index.get(name).copied()
    }

    pub fn timestamp_id(&self, date: NaiveDate) -> Option<TimestampId> {
        self.timestamp_labels
            .binary_search(&date)
            .ok()
            .map(|i| i as TimestampId)
    }

    pub fn entity(&self, id: EntityId) -> &str {
        &self.entity_names[id as usize]
    }

    pub fn relation(&self, id: RelationId) -> &str {
        &self.relation_names[id as usize]
    }

    pub fn date_label(&self, t: TimestampId) -> String {
        self.timestamp_labels[t as usize]
            .format(DATE_FORMAT)
            .to_string()
    }

    fn intern_entity(&mut self, name: &str) -> EntityId {
        if let Some(id) = self.entity_index.get(name) {
            return *id;
        }
        let id = self.entity_names.len() as EntityId;
        self.entity_names.push(name.to_string());
        self.entity_index.insert(name.to_string(), id);
        id
    }

    fn intern_relation(&mut self, name: &str) -> RelationId {
        if let Some(id) = self.relation_index.get(name) {
            return *id;
        }
        let id = self.relation_names.len() as RelationId;
        self.relation_names.push(name.to_string());
        self.relation_index.insert(name.to_string(), id);
        id
    }
}

fn index_names(names: &[String], kind: &str) -> Result<HashMap<String, u32>> {
    let mut map = HashMap::with_capacity(names.len());
    for (i, n) in names.iter().enumerate() {
        if map.insert(n.clone(), i as u32).is_some() {
            return Err(Error::format(format!("duplicate {kind} name {n:?}")));
        }
    }
    Ok(map)
}

/// An immutable multiset of quadruples sorted by `(t, s, r, o)` with an
/// offset table giving each snapshot's range.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalKG {
    quads: Vec<Quadruple>,
    offsets: Vec<usize>,
    num_entities: usize,
    num_relations: usize,
}

impl TemporalKG {
    pub fn new(
        mut quads: Vec<Quadruple>,
        num_entities: usize,
        num_relations: usize,
        num_timestamps: usize,
    ) -> Result<Self> {
        for q in &quads {
            bound("entity", q.s as usize, num_entities)?;
            bound("entity", q.o as usize, num_entities)?;
            bound("relation", q.r as usize, num_relations)?;
            bound("timestamp", q.t as usize, num_timestamps)?;
        }
        quads.sort_by_key(Quadruple::time_key);
        let mut offsets = vec![0usize; num_timestamps + 1];
        for q in &quads {
            offsets[q.t as usize + 1] += 1;
        }
        for i in 1..offsets.len() {
            offsets[i] += offsets[i - 1];
        }
        Ok(Self {
            quads,
            offsets,
            num_entities,
            num_relations,
        })
    }

    pub fn empty(num_entities: usize, num_relations: usize, num_timestamps: usize) -> Self {
        Self {
            quads: Vec::new(),
            offsets: vec![0; num_timestamps + 1],
            num_entities,
            num_relations,
        }
    }

    pub fn quads(&self) -> &[Quadruple] {
        &self.quads
    }

    pub fn len(&self) -> usize {
        self.quads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quads.is_empty()
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn num_timestamps(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Facts with timestamp exactly `t`; empty if `t` is out of range.
    pub fn snapshot(&self, t: TimestampId) -> &[Quadruple] {
        let t = t as usize;
        if t + 1 >= self.offsets.len() {
            return &[];
        }
        &self.quads[self.offsets[t]..self.offsets[t + 1]]
    }

    /// Latest timestamp carrying at least one fact.
    pub fn max_fact_timestamp(&self) -> Option<TimestampId> {
        self.quads.last().map(|q| q.t)
    }

    pub fn min_fact_timestamp(&self) -> Option<TimestampId> {
        self.quads.first().map(|q| q.t)
    }

    /// Facts with `from <= t < to`, keeping the same vocabulary sizes.
    pub fn time_range(&self, from: TimestampId, to: TimestampId) -> TemporalKG {
        let n = self.num_timestamps();
        let lo = self.offsets[(from as usize).min(n)];
        let hi = self.offsets[(to as usize).min(n)].max(lo);
        let quads = self.quads[lo..hi].to_vec();
        let mut offsets = vec![0usize; n + 1];
        for q in &quads {
            offsets[q.t as usize + 1] += 1;
        }
        for i in 1..offsets.len() {
            offsets[i] += offsets[i - 1];
        }
        TemporalKG {
            quads,
            offsets,
            num_entities: self.num_entities,
            num_relations: self.num_relations,
        }
    }

    /// Facts strictly before `t`.
    pub fn before(&self, t: TimestampId) -> TemporalKG {
        self.time_range(0, t)
    }

    pub fn filter(&self, mut keep: impl FnMut(&Quadruple) -> bool) -> TemporalKG {
        let quads = self.quads.iter().copied().filter(|q| keep(q)).collect();
        TemporalKG::new(
            quads,
            self.num_entities,
            self.num_relations,
            self.num_timestamps(),
        )
        .expect("subset of a valid KG is valid")
    }

    pub fn contains(&self, q: &Quadruple) -> bool {
        self.snapshot(q.t)
            .binary_search_by_key(&q.time_key(), Quadruple::time_key)
            .is_ok()
    }

    /// `{(e', r) | (e', r, e, t) in snapshot(t)}`, sorted.
    pub fn incoming_neighbors(&self, e: EntityId, t: TimestampId) -> Vec<(EntityId, RelationId)> {
        let mut out: Vec<(EntityId, RelationId)> = self
            .snapshot(t)
            .iter()
            .filter(|q| q.o == e)
            .map(|q| (q.s, q.r))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Merge several KGs over the same vocabulary.
    pub fn union(parts: &[&TemporalKG]) -> Result<TemporalKG> {
        let first = parts.first().ok_or(Error::Empty("no KGs to merge"))?;
        let quads = parts.iter().flat_map(|k| k.quads.iter().copied()).collect();
        TemporalKG::new(
            quads,
            first.num_entities,
            first.num_relations,
            first.num_timestamps(),
        )
    }
}

fn bound(kind: &'static str, id: usize, size: usize) -> Result<()> {
    if id >= size {
        return Err(Error::IdOutOfRange {
            kind,
            id,
            bound: size,
        });
    }
    Ok(())
}

/// `train = [t0, t1)`, `valid = [t1, t2)`, `test = [t2, t3]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBoundaries {
    pub t0: TimestampId,
    pub t1: TimestampId,
    pub t2: TimestampId,
    pub t3: TimestampId,
}

impl SplitBoundaries {
    pub fn new(t0: TimestampId, t1: TimestampId, t2: TimestampId, t3: TimestampId) -> Result<Self> {
        let b = Self { t0, t1, t2, t3 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t0 < self.t1 && self.t1 < self.t2 && self.t2 <= self.t3) {
            return Err(Error::InvalidBoundaries(format!(
                "need t0 < t1 < t2 <= t3, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn from_dates(vocab: &Vocab, dates: [NaiveDate; 4]) -> Result<Self> {
        let mut ids = [0; 4];
        for (i, d) in dates.iter().enumerate() {
            ids[i] = vocab
                .timestamp_id(*d)
                .ok_or_else(|| Error::InvalidBoundaries(format!("date {d} not in vocabulary")))?;
        }
        Self::new(ids[0], ids[1], ids[2], ids[3])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Valid, SplitName::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SplitName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::config("split", format!("unknown split `{s}`")))
    }
}

pub struct Splits {
    pub train: TemporalKG,
    pub valid: TemporalKG,
    pub test: TemporalKG,
}

impl Splits {
    pub fn get(&self, name: SplitName) -> &TemporalKG {
        match name {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }
}

/// Partition a KG by timestamp; every fact must lie in `[t0, t3]`.
pub fn split(kg: &TemporalKG, b: SplitBoundaries) -> Result<Splits> {
    b.validate()?;
    let offenders: Vec<Quadruple> = kg
        .quads()
        .iter()
        .filter(|q| q.t < b.t0 || q.t > b.t3)
        .copied()
        .collect();
    if !offenders.is_empty() {
        return Err(Error::OutsideSplit { offenders });
    }
    Ok(Splits {
        train: kg.time_range(b.t0, b.t1),
        valid: kg.time_range(b.t1, b.t2),
        test: kg.time_range(b.t2, b.t3 + 1),
    })
}

/// Build a vocabulary and KG from tab-separated `source, relation, target,
/// YYYY-MM-DD` rows. Entity and relation ids follow first-seen order. With a
/// declared date range every day in the range becomes a timestamp;
/// otherwise the range spans the earliest to latest date in the input.
pub fn ingest_events<R: BufRead>(
    reader: R,
    date_range: Option<(NaiveDate, NaiveDate)>,
) -> Result<(Vocab, TemporalKG)> {
    let mut vocab = Vocab::default();
    let mut rows: Vec<(EntityId, RelationId, EntityId, NaiveDate)> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let row = i + 1;
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::MalformedRow {
                row,
                reason: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        if let Some(pos) = fields.iter().position(|f| f.trim().is_empty()) {
            return Err(Error::MalformedRow {
                row,
                reason: format!("field {} is empty", pos + 1),
            });
        }
        let date = NaiveDate::parse_from_str(fields[3].trim(), DATE_FORMAT).map_err(|e| {
            Error::MalformedRow {
                row,
                reason: format!("bad date {:?}: {e}", fields[3]),
            }
        })?;
        if let Some((start, end)) = date_range {
            if date < start || date > end {
                return Err(Error::DateOutOfRange {
                    row,
                    date: fields[3].to_string(),
                    start: start.to_string(),
                    end: end.to_string(),
                });
            }
        }
        let s = vocab.intern_entity(fields[0]);
        let r = vocab.intern_relation(fields[1]);
        let o = vocab.intern_entity(fields[2]);
        rows.push((s, r, o, date));
    }
    let range = match date_range {
        Some(r) => Some(r),
        None => {
            let min = rows.iter().map(|r| r.3).min();
            let max = rows.iter().map(|r| r.3).max();
            min.zip(max)
        }
    };
    if let Some((start, end)) = range {
        vocab.timestamp_labels = start.iter_days().take_while(|d| *d <= end).collect();
    }
    let quads = rows
        .into_iter()
        .map(|(s, r, o, d)| Quadruple::new(s, r, o, (d - range.unwrap().0).num_days() as u32))
        .collect();
    let kg = TemporalKG::new(
        quads,
        vocab.num_entities(),
        vocab.num_relations(),
        vocab.num_timestamps(),
    )?;
    Ok((vocab, kg))
}

pub const QUADS_FILE: &str = "quads.tsv";
pub const ENTITIES_FILE: &str = "entities.tsv";
pub const RELATIONS_FILE: &str = "relations.tsv";
pub const TIMESTAMPS_FILE: &str = "timestamps.tsv";

/// Write `entities.tsv`, `relations.tsv`, `timestamps.tsv` to `dir`.
pub fn write_vocab(dir: &Path, vocab: &Vocab) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_lines(
        &dir.join(ENTITIES_FILE),
        vocab.entity_names.iter().map(String::as_str),
    )?;
    write_lines(
        &dir.join(RELATIONS_FILE),
        vocab.relation_names.iter().map(String::as_str),
    )?;
    let dates: Vec<String> = vocab
        .timestamp_labels
        .iter()
        .map(|d| d.format(DATE_FORMAT).to_string())
        .collect();
    write_lines(&dir.join(TIMESTAMPS_FILE), dates.iter().map(String::as_str))
}

fn write_lines<'a>(path: &Path, labels: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (i, l) in labels.enumerate() {
        writeln!(w, "{i}\t{l}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_vocab(dir: &Path) -> Result<Vocab> {
    let entities = read_labels(&dir.join(ENTITIES_FILE))?;
    let relations = read_labels(&dir.join(RELATIONS_FILE))?;
    let dates = read_labels(&dir.join(TIMESTAMPS_FILE))?
        .into_iter()
        .map(|s| {
            NaiveDate::parse_from_str(&s, DATE_FORMAT)
                .map_err(|e| Error::format(format!("bad timestamp label {s:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Vocab::new(entities, relations, dates)
}

fn read_labels(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| missing_or_io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let (id, label) = line.split_once('\t').ok_or_else(|| {
            Error::format(format!(
                "{}:{}: expected id<TAB>label",
                path.display(),
                i + 1
            ))
        })?;
        if id.parse::<usize>().ok() != Some(i) {
            return Err(Error::format(format!(
                "{}:{}: ids must be dense and ordered",
                path.display(),
                i + 1
            )));
        }
        out.push(label.to_string());
    }
    Ok(out)
}

pub fn write_quads(path: &Path, kg: &TemporalKG) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for q in kg.quads() {
        writeln!(w, "{}\t{}\t{}\t{}", q.s, q.r, q.o, q.t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_quads(path: &Path, vocab: &Vocab) -> Result<TemporalKG> {
    let text = fs::read_to_string(path).map_err(|e| missing_or_io(path, e))?;
    let mut quads = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<u32> = line
            .split('\t')
            .map(|x| x.parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::MalformedRow {
                row: i + 1,
                reason: e.to_string(),
            })?;
        if parts.len() != 4 {
            return Err(Error::MalformedRow {
                row: i + 1,
                reason: "expected s<TAB>r<TAB>o<TAB>t".into(),
            });
        }
        quads.push(Quadruple::new(parts[0], parts[1], parts[2], parts[3]));
    }
    TemporalKG::new(
        quads,
        vocab.num_entities(),
        vocab.num_relations(),
        vocab.num_timestamps(),
    )
}

/// Write a complete KG directory (`quads.tsv` plus the vocabulary files).
pub fn write_kg_dir(dir: &Path, vocab: &Vocab, kg: &TemporalKG) -> Result<()> {
    write_vocab(dir, vocab)?;
    write_quads(&dir.join(QUADS_FILE), kg)
}

pub fn read_kg_dir(dir: &Path) -> Result<(Vocab, TemporalKG)> {
    let vocab = read_vocab(dir)?;
    let kg = read_quads(&dir.join(QUADS_FILE), &vocab)?;
    Ok((vocab, kg))
}

fn missing_or_io(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::format(format!("{} not found", path.display()))
    } else {
        Error::Io(e)
    }
}
