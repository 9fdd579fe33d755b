//! Static ComplEx and temporal TComplEx embeddings.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::binio;
use crate::complex::{conjugate, re_dot3, re_dot4, split_to_complex, ComplexVec};
use crate::error::{Error, Result};
use crate::eval::rank_of;
use crate::tkg::{EntityId, Quadruple, RelationId, TemporalKG, TimestampId};
use crate::training::{run_epochs, TrainConfig, Trained};

/// Entity, relation and (for temporal models) timestamp embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub entities: Vec<ComplexVec>,
    pub relations: Vec<ComplexVec>,
    pub timestamps: Option<Vec<ComplexVec>>,
}

const EMB_MAGIC: &[u8; 8] = b"TKGEMBED";

impl EmbeddingTable {
    pub fn is_temporal(&self) -> bool {
        self.timestamps.is_some()
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    fn entity(&self, e: EntityId) -> Result<&ComplexVec> {
        self.entities.get(e as usize).ok_or(Error::IdOutOfRange {
            kind: "entity",
            id: e as usize,
            bound: self.entities.len(),
        })
    }

    fn relation(&self, r: RelationId) -> Result<&ComplexVec> {
        self.relations.get(r as usize).ok_or(Error::IdOutOfRange {
            kind: "relation",
            id: r as usize,
            bound: self.relations.len(),
        })
    }

    fn timestamp(&self, t: TimestampId) -> Result<&ComplexVec> {
        let ts = self
            .timestamps
            .as_ref()
            .ok_or(Error::MissingTimestampTable)?;
        ts.get(t as usize).ok_or(Error::IdOutOfRange {
            kind: "timestamp",
            id: t as usize,
            bound: ts.len(),
        })
    }

    fn from_params(params: &ParamStore, ids: &TableIds) -> Result<Self> {
        let rows = |id: ParamId| -> Result<Vec<ComplexVec>> {
            let t = params.get(id);
            (0..t.rows).map(|r| split_to_complex(t.row(r))).collect()
        };
        Ok(Self {
            dim: params.get(ids.entities).cols / 2,
            entities: rows(ids.entities)?,
            relations: rows(ids.relations)?,
            timestamps: ids.timestamps.map(rows).transpose()?,
        })
    }

    /// Header (magic, version, d, counts) followed by little-endian `f64`
    /// rows (`re` then `im`) for entities, relations and timestamps.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_magic(w, EMB_MAGIC, 1)?;
        binio::write_u32(w, self.dim as u32)?;
        binio::write_u32(w, self.entities.len() as u32)?;
        binio::write_u32(w, self.relations.len() as u32)?;
        let nts = self.timestamps.as_ref().map_or(0, Vec::len);
        binio::write_u32(w, nts as u32)?;
        binio::write_u32(w, self.is_temporal() as u32)?;
        let all = self
            .entities
            .iter()
            .chain(&self.relations)
            .chain(self.timestamps.iter().flatten());
        for v in all {
            binio::write_f64s(w, &v.re)?;
            binio::write_f64s(w, &v.im)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_magic(r, EMB_MAGIC, 1)?;
        let dim = binio::read_u32(r)? as usize;
        let ne = binio::read_u32(r)? as usize;
        let nr = binio::read_u32(r)? as usize;
        let nt = binio::read_u32(r)? as usize;
        let temporal = binio::read_u32(r)? != 0;
        let mut read_rows = |n: usize| -> Result<Vec<ComplexVec>> {
            (0..n)
                .map(|_| {
                    let re = binio::read_f64s(r, dim)?;
                    let im = binio::read_f64s(r, dim)?;
                    Ok(ComplexVec { re, im })
                })
                .collect()
        };
        let entities = read_rows(ne)?;
        let relations = read_rows(nr)?;
        let timestamps = if temporal { Some(read_rows(nt)?) } else { None };
        Ok(Self {
            dim,
            entities,
            relations,
            timestamps,
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

/// `Re(<h_s, h_r, conj(h_o)>)`.
pub fn complex_score(tbl: &EmbeddingTable, s: EntityId, r: RelationId, o: EntityId) -> Result<f64> {
    re_dot3(tbl.entity(s)?, tbl.relation(r)?, &conjugate(tbl.entity(o)?))
}

/// `Re(<h_s, h_r, conj(h_o), h_t>)`.
pub fn tcomplex_score(
    tbl: &EmbeddingTable,
    s: EntityId,
    r: RelationId,
    o: EntityId,
    t: TimestampId,
) -> Result<f64> {
    let ht = tbl.timestamp(t)?;
    re_dot4(
        tbl.entity(s)?,
        tbl.relation(r)?,
        &conjugate(tbl.entity(o)?),
        ht,
    )
}

/// Scores of every candidate object for `(s, r, ?, t)`; `t` is used only by
/// temporal tables.
pub fn score_objects(
    tbl: &EmbeddingTable,
    s: EntityId,
    r: RelationId,
    t: TimestampId,
) -> Result<Vec<f64>> {
    (0..tbl.num_entities() as EntityId)
        .map(|o| {
            if tbl.is_temporal() {
                tcomplex_score(tbl, s, r, o, t)
            } else {
                complex_score(tbl, s, r, o)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub enum RankFilter<'a> {
    Raw,
    /// Drop other true objects of `(s, r, ·, t)` found in this KG.
    TimeFiltered(&'a TemporalKG),
}

/// 1-based rank of `query.o` among all entities for `(s, r, ?, t)`. Ties
/// are broken by lower entity id first.
pub fn rank_query(
    tbl: &EmbeddingTable,
    query: &Quadruple,
    filter: RankFilter<'_>,
) -> Result<usize> {
    let scores = score_objects(tbl, query.s, query.r, query.t)?;
    let excluded: Vec<EntityId> = match filter {
        RankFilter::Raw => Vec::new(),
        RankFilter::TimeFiltered(kg) => kg
            .snapshot(query.t)
            .iter()
            .filter(|q| q.s == query.s && q.r == query.r && q.o != query.o)
            .map(|q| q.o)
            .collect(),
    };
    rank_of(&scores, query.o as usize, &excluded)
}

struct TableIds {
    entities: ParamId,
    relations: ParamId,
    timestamps: Option<ParamId>,
}

fn init_params(
    ne: usize,
    nr: usize,
    nt: Option<usize>,
    cfg: &TrainConfig,
) -> (ParamStore, TableIds) {
    let mut rng = cfg.rng(11);
    let mut p = ParamStore::new();
    let w = 2 * cfg.dim;
    let entities = p.add_uniform("entities", ne, w, cfg.init_scale, &mut rng);
    let relations = p.add_uniform("relations", nr, w, cfg.init_scale, &mut rng);
    let timestamps = nt.map(|nt| {
        // start from the multiplicative identity so the model begins as ComplEx
        let data: Vec<f64> = (0..nt)
            .flat_map(|_| {
                let mut row: Vec<f64> = (0..w)
                    .map(|_| rng.random_range(-cfg.init_scale..cfg.init_scale))
                    .collect();
                row[..cfg.dim].iter_mut().for_each(|x| *x += 1.0);
                row
            })
            .collect();
        p.add("timestamps", nt, w, data)
    });
    (
        p,
        TableIds {
            entities,
            relations,
            timestamps,
        },
    )
}

fn candidate_loss(
    tape: &mut Tape<'_>,
    score: &mut dyn FnMut(&mut Tape<'_>, EntityId) -> Var,
    answer: EntityId,
    num_entities: usize,
    negatives: &[EntityId],
) -> Var {
    if negatives.is_empty() {
        let scores: Vec<Var> = (0..num_entities as EntityId)
            .map(|e| score(tape, e))
            .collect();
        let logits = tape.stack(&scores);
        tape.cross_entropy(logits, answer as usize)
    } else {
        let mut scores = vec![score(tape, answer)];
        scores.extend(negatives.iter().map(|e| score(tape, *e)));
        let logits = tape.stack(&scores);
        tape.cross_entropy(logits, 0)
    }
}

fn train_table(
    kg: &TemporalKG,
    cfg: &TrainConfig,
    temporal: bool,
) -> Result<Trained<EmbeddingTable>> {
    cfg.validate()?;
    if kg.is_empty() {
        return Err(Error::Empty("cannot train embeddings on an empty KG"));
    }
    let ne = kg.num_entities();
    let nt = temporal.then(|| kg.num_timestamps());
    let (mut params, ids) = init_params(ne, kg.num_relations(), nt, cfg);
    if cfg.epochs == 0 {
        let model = EmbeddingTable::from_params(&params, &ids)?;
        return Ok(Trained {
            model,
            loss_curve: Vec::new(),
        });
    }
    // one sample per quadruple; duplicates stay duplicated
    let samples: Vec<Quadruple> = kg.quads().to_vec();
    let mut neg_rng = cfg.rng(12);
    let curve = run_epochs(&mut params, &samples, cfg, None, 13, |tape, batch| {
        let ent: Vec<Var> = (0..ne).map(|e| tape.param_row(ids.entities, e)).collect();
        let mut losses = Vec::with_capacity(2 * batch.len());
        for q in batch {
            let hr = tape.param_row(ids.relations, q.r as usize);
            let ht = ids.timestamps.map(|tid| tape.param_row(tid, q.t as usize));
            let score = |tape: &mut Tape<'_>, s: EntityId, o: EntityId| match ht {
                Some(ht) => tape.re_dot4_conj(ent[s as usize], hr, ent[o as usize], ht),
                None => tape.re_dot3_conj(ent[s as usize], hr, ent[o as usize]),
            };
            let negs = sample_negatives(&mut neg_rng, ne, cfg.negatives);
            losses.push(candidate_loss(
                tape,
                &mut |tp, o| score(tp, q.s, o),
                q.o,
                ne,
                &negs,
            ));
            let negs = sample_negatives(&mut neg_rng, ne, cfg.negatives);
            losses.push(candidate_loss(
                tape,
                &mut |tp, s| score(tp, s, q.o),
                q.s,
                ne,
                &negs,
            ));
            if cfg.reg > 0.0 {
                for v in [ent[q.s as usize], hr, ent[q.o as usize]] {
                    let n3 = tape.n3(v);
                    losses.push(tape.scale(n3, cfg.reg));
                }
            }
        }
        Ok(tape.sum(&losses))
    })?;
    Ok(Trained {
        model: EmbeddingTable::from_params(&params, &ids)?,
        loss_curve: curve,
    })
}

fn sample_negatives(rng: &mut rand_chacha::ChaCha8Rng, n: usize, k: usize) -> Vec<EntityId> {
    (0..k).map(|_| rng.random_range(0..n as EntityId)).collect()
}

/// ComplEx on the triples obtained by dropping timestamps, keeping every
/// repeated triple.
pub fn train_static(kg: &TemporalKG, cfg: &TrainConfig) -> Result<Trained<EmbeddingTable>> {
    train_table(kg, cfg, false)
}

/// TComplEx with one embedding per timestamp.
pub fn train_temporal(kg: &TemporalKG, cfg: &TrainConfig) -> Result<Trained<EmbeddingTable>> {
    train_table(kg, cfg, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableKind {
    Static,
    Temporal,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            dim: 8,
            epochs,
            batch_size: 16,
            lr: 0.05,
            seed: 3,
            ..Default::default()
        }
    }

    fn cv(re: f64, im: f64) -> ComplexVec {
        ComplexVec::new(vec![re], vec![im]).unwrap()
    }

    fn hand_table() -> EmbeddingTable {
        EmbeddingTable {
            dim: 1,
            entities: vec![cv(1.0, 1.0), cv(0.0, 2.0), cv(-1.0, 0.5)],
            relations: vec![cv(2.0, 0.0), cv(0.0, 0.0)],
            timestamps: Some(vec![cv(1.0, 0.0), cv(0.0, 1.0)]),
        }
    }

    #[test]
    fn hand_scores() {
        let t = hand_table();
        // (1+i) * 2 * conj(2i) = (1+i) * 2 * (-2i) = 4 - 4i
        assert_eq!(complex_score(&t, 0, 0, 1).unwrap(), 4.0);
        assert_eq!(complex_score(&t, 0, 1, 2).unwrap(), 0.0);
        // times i: (4 - 4i) * i = 4 + 4i
        assert_eq!(tcomplex_score(&t, 0, 0, 1, 1).unwrap(), 4.0);
        assert_eq!(
            tcomplex_score(&t, 0, 0, 1, 0).unwrap(),
            complex_score(&t, 0, 0, 1).unwrap()
        );
        let mut st = t.clone();
        st.timestamps = None;
        assert!(matches!(
            tcomplex_score(&st, 0, 0, 1, 0),
            Err(Error::MissingTimestampTable)
        ));
        assert!(complex_score(&t, 9, 0, 1).is_err());
    }

    #[test]
    fn batch_scores_match_loop() {
        let t = hand_table();
        let all = score_objects(&t, 0, 0, 1).unwrap();
        for o in 0..3 {
            assert_eq!(all[o as usize], tcomplex_score(&t, 0, 0, o, 1).unwrap());
        }
    }

    #[test]
    fn global_phase_keeps_argmax() {
        let t = {
            let mut t = hand_table();
            t.timestamps = None;
            t
        };
        let (c, s) = (0.7f64.cos(), 0.7f64.sin());
        let mut rotated = t.clone();
        for e in rotated.entities.iter_mut() {
            let (re, im) = (e.re[0], e.im[0]);
            e.re[0] = re * c - im * s;
            e.im[0] = re * s + im * c;
        }
        let argmax = |scores: Vec<f64>| {
            scores
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |b, (i, v)| if *v > b.1 { (i, *v) } else { b },
                )
                .0
        };
        for s in 0..3 {
            assert_eq!(
                argmax(score_objects(&t, s, 0, 0).unwrap()),
                argmax(score_objects(&rotated, s, 0, 0).unwrap())
            );
        }
    }

    #[test]
    fn rank_ties_and_filter() {
        let t = EmbeddingTable {
            dim: 1,
            entities: vec![cv(0.0, 0.0); 4],
            relations: vec![cv(1.0, 0.0)],
            timestamps: None,
        };
        for o in 0..4u32 {
            let q = Quadruple::new(0, 0, o, 0);
            assert_eq!(rank_query(&t, &q, RankFilter::Raw).unwrap(), o as usize + 1);
        }
        let kg = TemporalKG::new(
            vec![Quadruple::new(0, 0, 0, 0), Quadruple::new(0, 0, 3, 0)],
            4,
            1,
            1,
        )
        .unwrap();
        let q = Quadruple::new(0, 0, 3, 0);
        assert_eq!(
            rank_query(&t, &q, RankFilter::TimeFiltered(&kg)).unwrap(),
            3
        );
    }

    #[test]
    fn checkpoint_roundtrip() {
        let t = hand_table();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(EmbeddingTable::read_from(&mut buf.as_slice()).unwrap(), t);
    }

    /// 20 entities, relation 0 maps e -> (e + 1) mod 20.
    fn cycle_kg() -> TemporalKG {
        let quads = (0..20u32)
            .flat_map(|e| (0..3).map(move |t| Quadruple::new(e, 0, (e + 1) % 20, t)))
            .collect();
        TemporalKG::new(quads, 20, 1, 3).unwrap()
    }

    #[test]
    fn static_memorises_pattern() {
        let kg = cycle_kg();
        let trained = train_static(&kg, &cfg(60)).unwrap();
        let hits = (0..20u32)
            .filter(|e| {
                let q = Quadruple::new(*e, 0, (e + 1) % 20, 0);
                rank_query(&trained.model, &q, RankFilter::TimeFiltered(&kg)).unwrap() == 1
            })
            .count();
        assert!(hits as f64 / 20.0 >= 0.9, "hits {hits}/20");
        let c = &trained.loss_curve;
        assert!(c.last().unwrap() < &c[0]);
    }

    #[test]
    fn single_fact_one_epoch() {
        let kg = TemporalKG::new(vec![Quadruple::new(0, 0, 1, 0)], 3, 1, 1).unwrap();
        let trained = train_static(&kg, &cfg(1)).unwrap();
        assert_eq!(trained.loss_curve.len(), 2);
        assert!(trained.loss_curve[1].is_finite());
        // loss after the update is lower than before it
        let again = train_static(
            &kg,
            &TrainConfig {
                epochs: 2,
                ..cfg(1)
            },
        )
        .unwrap();
        assert!(again.loss_curve[2] < again.loss_curve[0]);
    }

    #[test]
    fn deterministic_and_zero_epochs() {
        let kg = cycle_kg();
        let a = train_static(&kg, &cfg(3)).unwrap();
        let b = train_static(&kg, &cfg(3)).unwrap();
        assert_eq!(a.model, b.model);
        let z = train_temporal(&kg, &cfg(0)).unwrap();
        let (p, ids) = init_params(20, 1, Some(3), &cfg(0));
        assert_eq!(z.model, EmbeddingTable::from_params(&p, &ids).unwrap());
        let ta = train_temporal(&kg, &cfg(2)).unwrap();
        let tb = train_temporal(&kg, &cfg(2)).unwrap();
        assert_eq!(ta.model, tb.model);
    }

    /// Relation 0 points e -> e+1 for t < 5 and e -> e+2 afterwards.
    #[test]
    fn temporal_separates_regimes() {
        let n = 12u32;
        let quads: Vec<Quadruple> = (0..10u32)
            .flat_map(|t| {
                (0..n).map(move |e| {
                    let step = if t < 5 { 1 } else { 2 };
                    Quadruple::new(e, 0, (e + step) % n, t)
                })
            })
            .collect();
        let kg = TemporalKG::new(quads.clone(), n as usize, 1, 10).unwrap();
        let c = TrainConfig {
            epochs: 80,
            ..cfg(0)
        };
        let acc = |tbl: &EmbeddingTable| {
            let hits = quads
                .iter()
                .filter(|q| rank_query(tbl, q, RankFilter::Raw).unwrap() == 1)
                .count();
            hits as f64 / quads.len() as f64
        };
        let temporal = train_temporal(&kg, &c).unwrap();
        let stat = train_static(&kg, &c).unwrap();
        let (ta, sa) = (acc(&temporal.model), acc(&stat.model));
        assert!(ta >= 0.9, "temporal accuracy {ta}");
        assert!(sa <= 0.7, "static accuracy {sa}");
    }

    #[test]
    fn multiset_sample_count() {
        let kg = TemporalKG::new(vec![Quadruple::new(0, 0, 1, 0); 5], 2, 1, 1).unwrap();
        // every duplicate is a sample: initial loss is an average over 5 samples of 2 terms
        let t = train_static(&kg, &cfg(1)).unwrap();
        assert!((t.loss_curve[0] - 2.0 * 2f64.ln()).abs() < 1e-2);
    }
}
