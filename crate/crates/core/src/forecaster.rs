//! Time-aware entity representations inferred only from past snapshots.
//!
//! The representation of an entity is its base row plus a memory vector. The
//! memory starts at zero and is updated once per snapshot in the window
//! `t-w .. t-1`: an entity receiving messages at a step mixes its previous
//! memory with a candidate built from the mean message through a learned gate.
//! Once an entity has memory, steps without messages still apply the gate
//! with a zero message, so old evidence can fade. Entities never messaged in
//! the window keep their base row.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::binio;
use crate::complex::{split_to_complex, ComplexVec};
use crate::error::{Error, Result};
use crate::tkg::{EntityId, Quadruple, RelationId, TemporalKG, TimestampId};
use crate::training::{run_epochs, TrainConfig, Trained};

pub const DEFAULT_WINDOW: usize = 4;

#[derive(Debug, Clone, Copy)]
struct Ids {
    entities: ParamId,
    relations: ParamId,
    reldir: ParamId,
    msg: ParamId,
    gate_mem: ParamId,
    gate_msg: ParamId,
    gate_b: ParamId,
    cand_mem: ParamId,
    cand_msg: ParamId,
    cand_b: ParamId,
}

impl Ids {
    fn lookup(p: &ParamStore) -> Result<Self> {
        Ok(Self {
            entities: p.require("entities")?,
            relations: p.require("relations")?,
            reldir: p.require("reldir")?,
            msg: p.require("msg")?,
            gate_mem: p.require("gate_mem")?,
            gate_msg: p.require("gate_msg")?,
            gate_b: p.require("gate_b")?,
            cand_mem: p.require("cand_mem")?,
            cand_msg: p.require("cand_msg")?,
            cand_b: p.require("cand_b")?,
        })
    }
}

/// Base tables plus the gated aggregator weights. Message, gate and
/// candidate transforms are elementwise, so the aggregator has `O(d)`
/// weights shared by all entities.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastParams {
    pub window: usize,
    pub params: ParamStore,
}

const FCAST_MAGIC: &[u8; 8] = b"TKGFCAST";

impl ForecastParams {
    pub fn init(
        num_entities: usize,
        num_relations: usize,
        window: usize,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if window == 0 {
            return Err(Error::config("window", "must be at least 1"));
        }
        let mut rng = cfg.rng(21);
        let w = 2 * cfg.dim;
        let mut p = ParamStore::new();
        p.add_uniform("entities", num_entities, w, cfg.init_scale, &mut rng);
        p.add_uniform("relations", num_relations, w, cfg.init_scale, &mut rng);
        // forward directions first, then inverse directions
        p.add_uniform("reldir", 2 * num_relations, w, 1.0, &mut rng);
        let mut ones = vec![1.0; w];
        ones[cfg.dim..].iter_mut().for_each(|x| *x = 0.0);
        p.add("msg", 1, w, ones);
        p.add_uniform("gate_mem", 1, w, 0.1, &mut rng);
        p.add_uniform("gate_msg", 1, w, 0.1, &mut rng);
        p.add_zeros("gate_b", 1, w);
        p.add_uniform("cand_mem", 1, w, 0.1, &mut rng);
        p.add("cand_msg", 1, w, vec![1.0; w]);
        p.add_zeros("cand_b", 1, w);
        Ok(Self { window, params: p })
    }

    fn ids(&self) -> Result<Ids> {
        Ids::lookup(&self.params)
    }

    pub fn dim(&self) -> usize {
        self.params
            .id("entities")
            .map_or(0, |id| self.params.get(id).cols / 2)
    }

    pub fn num_entities(&self) -> usize {
        self.params
            .id("entities")
            .map_or(0, |id| self.params.get(id).rows)
    }

    pub fn num_relations(&self) -> usize {
        self.params
            .id("relations")
            .map_or(0, |id| self.params.get(id).rows)
    }

    fn table(&self, id: ParamId) -> Result<Vec<ComplexVec>> {
        let t = self.params.get(id);
        (0..t.rows).map(|r| split_to_complex(t.row(r))).collect()
    }

    pub fn base_entities(&self) -> Result<Vec<ComplexVec>> {
        self.table(self.ids()?.entities)
    }

    pub fn relations(&self) -> Result<Vec<ComplexVec>> {
        self.table(self.ids()?.relations)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_magic(w, FCAST_MAGIC, 1)?;
        binio::write_u32(w, self.window as u32)?;
        self.params.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_magic(r, FCAST_MAGIC, 1)?;
        let window = binio::read_u32(r)? as usize;
        let params = ParamStore::read_from(r)?;
        let fp = Self { window, params };
        fp.ids()?;
        Ok(fp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(fs::File::open(path)?))
    }
}

/// Entity representations at `t` on the tape, plus the set of entities that
/// received at least one message in the window.
fn unroll(
    tape: &mut Tape<'_>,
    ids: &Ids,
    window: usize,
    kg: &TemporalKG,
    t: TimestampId,
) -> (Vec<Var>, BTreeSet<EntityId>) {
    let ne = tape.params().get(ids.entities).rows;
    let nr = tape.params().get(ids.relations).rows;
    let width = tape.params().get(ids.entities).cols;
    let mut reps: Vec<Var> = (0..ne).map(|e| tape.param_row(ids.entities, e)).collect();
    let base = reps.clone();
    // memory added on top of the base row; absent until the first message
    let mut memory: Vec<Option<Var>> = vec![None; ne];
    let from = (t as usize).saturating_sub(window) as TimestampId;
    for step in from..t {
        let mut inbox: BTreeMap<EntityId, Vec<(EntityId, usize)>> = BTreeMap::new();
        for q in kg.snapshot(step) {
            inbox.entry(q.o).or_default().push((q.s, q.r as usize));
            inbox.entry(q.s).or_default().push((q.o, nr + q.r as usize));
        }
        let mut next = memory.clone();
        let zero = tape.constant(vec![0.0; width]);
        let touched: BTreeSet<EntityId> = inbox
            .keys()
            .copied()
            .chain((0..ne as EntityId).filter(|e| memory[*e as usize].is_some()))
            .collect();
        for e in &touched {
            let m = match inbox.get(e) {
                Some(msgs) => {
                    let parts: Vec<Var> = msgs
                        .iter()
                        .map(|(src, dir)| {
                            let rd = tape.param_row(ids.reldir, *dir);
                            tape.cmul(reps[*src as usize], rd)
                        })
                        .collect();
                    let mean = tape.mean(&parts);
                    let msg = tape.param(ids.msg);
                    tape.cmul(mean, msg)
                }
                None => zero,
            };
            let prev = memory[*e as usize].unwrap_or(zero);
            let z = gate(tape, [ids.gate_mem, ids.gate_msg, ids.gate_b], prev, m);
            let z = tape.sigmoid(z);
            let c = gate(tape, [ids.cand_mem, ids.cand_msg, ids.cand_b], prev, m);
            let c = tape.tanh(c);
            let diff = tape.sub(prev, c);
            let carry = tape.mul(z, diff);
            next[*e as usize] = Some(tape.add(c, carry));
        }
        memory = next;
        for e in &touched {
            let i = *e as usize;
            reps[i] = tape.add(base[i], memory[i].expect("just updated"));
        }
    }
    let active = (0..ne as EntityId)
        .filter(|e| memory[*e as usize].is_some())
        .collect();
    (reps, active)
}

/// `u * mem + v * msg + b`, elementwise.
fn gate(tape: &mut Tape<'_>, [u, v, b]: [ParamId; 3], mem: Var, msg: Var) -> Var {
    let (u, v, b) = (tape.param(u), tape.param(v), tape.param(b));
    let um = tape.mul(u, mem);
    let vm = tape.mul(v, msg);
    tape.sum(&[um, vm, b])
}

/// Representations of every entity at `t` from the facts in `kg_visible`.
/// Fails if any visible fact has timestamp `>= t`.
pub fn infer_reps(
    kg_visible: &TemporalKG,
    params: &ForecastParams,
    t: TimestampId,
) -> Result<Vec<ComplexVec>> {
    Ok(infer_inner(kg_visible, params, t)?.0)
}

fn infer_inner(
    kg_visible: &TemporalKG,
    params: &ForecastParams,
    t: TimestampId,
) -> Result<(Vec<ComplexVec>, BTreeSet<EntityId>)> {
    if let Some(max_t) = kg_visible.max_fact_timestamp() {
        if max_t >= t {
            return Err(Error::Leakage {
                fact_t: max_t,
                query_t: t,
            });
        }
    }
    let ids = params.ids()?;
    let mut tape = Tape::new(&params.params);
    let (state, active) = unroll(&mut tape, &ids, params.window, kg_visible, t);
    let reps = state
        .iter()
        .map(|v| split_to_complex(tape.value(*v)))
        .collect::<Result<_>>()?;
    Ok((reps, active))
}

/// Entity representations per timestamp with a base-table fallback, and the
/// time-invariant relation table.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeAwareReps {
    pub dim: usize,
    pub base: Vec<ComplexVec>,
    pub relations: Vec<ComplexVec>,
    /// Only entities active in the window of `t` are stored.
    pub entries: BTreeMap<(EntityId, TimestampId), ComplexVec>,
    /// Per covered timestamp, the latest fact timestamp that fed its window.
    pub latest_source: Vec<Option<TimestampId>>,
}

const REPS_MAGIC: &[u8; 8] = b"TKGREPS1";
const NO_SOURCE: u32 = u32::MAX;

impl TimeAwareReps {
    pub fn num_timestamps(&self) -> usize {
        self.latest_source.len()
    }

    pub fn num_entities(&self) -> usize {
        self.base.len()
    }

    /// Representation of `e` at `t`; the flag is set when `t` is not covered
    /// and the base embedding is returned instead.
    pub fn entity(&self, e: EntityId, t: TimestampId) -> Result<(&ComplexVec, bool)> {
        let base = self.base.get(e as usize).ok_or(Error::IdOutOfRange {
            kind: "entity",
            id: e as usize,
            bound: self.base.len(),
        })?;
        if t as usize >= self.num_timestamps() {
            return Ok((base, true));
        }
        Ok((self.entries.get(&(e, t)).unwrap_or(base), false))
    }

    pub fn relation(&self, r: RelationId) -> Result<&ComplexVec> {
        self.relations.get(r as usize).ok_or(Error::IdOutOfRange {
            kind: "relation",
            id: r as usize,
            bound: self.relations.len(),
        })
    }

    /// Fails unless every fact feeding timestamp `t` precedes `t`.
    pub fn check_no_leakage(&self, t: TimestampId) -> Result<()> {
        match self.latest_source.get(t as usize).copied().flatten() {
            Some(src) if src >= t => Err(Error::Leakage {
                fact_t: src,
                query_t: t,
            }),
            _ => Ok(()),
        }
    }

    /// Header, per-timestamp source bounds, sparse `(entity, t) -> f64[2d]`
    /// records, then the base and relation tables.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_magic(w, REPS_MAGIC, 1)?;
        for n in [
            self.dim,
            self.base.len(),
            self.relations.len(),
            self.num_timestamps(),
            self.entries.len(),
        ] {
            binio::write_u32(w, n as u32)?;
        }
        for s in &self.latest_source {
            binio::write_u32(w, s.unwrap_or(NO_SOURCE))?;
        }
        for ((e, t), v) in &self.entries {
            binio::write_u32(w, *e)?;
            binio::write_u32(w, *t)?;
            binio::write_f64s(w, &v.flatten())?;
        }
        for v in self.base.iter().chain(&self.relations) {
            binio::write_f64s(w, &v.flatten())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_magic(r, REPS_MAGIC, 1)?;
        let mut n = [0usize; 5];
        for x in n.iter_mut() {
            *x = binio::read_u32(r)? as usize;
        }
        let [dim, ne, nr, nt, nentries] = n;
        let latest_source = (0..nt)
            .map(|_| binio::read_u32(r).map(|s| (s != NO_SOURCE).then_some(s)))
            .collect::<Result<_>>()?;
        let mut entries = BTreeMap::new();
        for _ in 0..nentries {
            let e = binio::read_u32(r)?;
            let t = binio::read_u32(r)?;
            entries.insert((e, t), split_to_complex(&binio::read_f64s(r, 2 * dim)?)?);
        }
        let mut vecs = |count: usize| -> Result<Vec<ComplexVec>> {
            (0..count)
                .map(|_| split_to_complex(&binio::read_f64s(r, 2 * dim)?))
                .collect()
        };
        let base = vecs(ne)?;
        let relations = vecs(nr)?;
        Ok(Self {
            dim,
            base,
            relations,
            entries,
            latest_source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(fs::File::open(path)?))
    }
}

/// Representations at every timestamp of `kg`, each computed from the window
/// of facts strictly before it.
pub fn precompute_all(kg: &TemporalKG, params: &ForecastParams) -> Result<TimeAwareReps> {
    let mut entries = BTreeMap::new();
    let mut latest_source = Vec::with_capacity(kg.num_timestamps());
    for t in 0..kg.num_timestamps() as TimestampId {
        let from = (t as usize).saturating_sub(params.window) as TimestampId;
        let visible = kg.time_range(from, t);
        let (reps, active) = infer_inner(&visible, params, t)?;
        for e in active {
            entries.insert((e, t), reps[e as usize].clone());
        }
        latest_source.push(visible.max_fact_timestamp());
    }
    Ok(TimeAwareReps {
        dim: params.dim(),
        base: params.base_entities()?,
        relations: params.relations()?,
        entries,
        latest_source,
    })
}

/// Train base tables and aggregator so that, at every timestamp `t` of
/// `train_kg`, ComplEx scores over reps inferred from facts before `t`
/// rank the true objects first. One sample is one timestamp.
pub fn train_forecaster(
    train_kg: &TemporalKG,
    window: usize,
    cfg: &TrainConfig,
) -> Result<Trained<ForecastParams>> {
    let mut fp = ForecastParams::init(
        train_kg.num_entities(),
        train_kg.num_relations(),
        window,
        cfg,
    )?;
    let (lo, hi) = match (train_kg.min_fact_timestamp(), train_kg.max_fact_timestamp()) {
        (Some(lo), Some(hi)) => (lo, hi),
        _ => return Err(Error::Empty("cannot train the forecaster on an empty KG")),
    };
    if ((hi - lo) as usize) < window {
        return Err(Error::config(
            "window",
            format!(
                "training span has {} timestamps, need at least {}",
                hi - lo + 1,
                window + 1
            ),
        ));
    }
    if cfg.epochs == 0 {
        return Ok(Trained {
            model: fp,
            loss_curve: Vec::new(),
        });
    }
    let ids = fp.ids()?;
    let ne = train_kg.num_entities();
    let samples: Vec<TimestampId> = (lo..=hi)
        .filter(|t| !train_kg.snapshot(*t).is_empty())
        .collect();
    let curve = run_epochs(&mut fp.params, &samples, cfg, None, 22, |tape, batch| {
        let mut losses = Vec::with_capacity(batch.len());
        for &t in batch {
            let (state, _) = unroll(tape, &ids, window, train_kg, t);
            let per_fact: Vec<Var> = train_kg
                .snapshot(t)
                .iter()
                .map(|q| object_loss(tape, &ids, &state, q, ne, cfg.reg))
                .collect();
            losses.push(tape.mean(&per_fact));
        }
        Ok(tape.sum(&losses))
    })?;
    Ok(Trained {
        model: fp,
        loss_curve: curve,
    })
}

fn object_loss(
    tape: &mut Tape<'_>,
    ids: &Ids,
    state: &[Var],
    q: &Quadruple,
    ne: usize,
    reg: f64,
) -> Var {
    let hr = tape.param_row(ids.relations, q.r as usize);
    let scores: Vec<Var> = (0..ne)
        .map(|e| tape.re_dot3_conj(state[q.s as usize], hr, state[e]))
        .collect();
    let logits = tape.stack(&scores);
    let ce = tape.cross_entropy(logits, q.o as usize);
    if reg == 0.0 {
        return ce;
    }
    let mut terms = vec![ce];
    for v in [state[q.s as usize], hr, state[q.o as usize]] {
        let n3 = tape.n3(v);
        terms.push(tape.scale(n3, reg));
    }
    tape.sum(&terms)
}

/// ComplEx object scores `Re(<h_(s,t), h_r, conj(h_(e,t))>)` for all `e`.
pub fn forecast_scores(
    reps: &TimeAwareReps,
    s: EntityId,
    r: RelationId,
    t: TimestampId,
) -> Result<Vec<f64>> {
    let (hs, _) = reps.entity(s, t)?;
    let hr = reps.relation(r)?;
    (0..reps.num_entities() as EntityId)
        .map(|e| {
            let (he, _) = reps.entity(e, t)?;
            crate::complex::re_dot3(hs, hr, &crate::complex::conjugate(he))
        })
        .collect()
}
