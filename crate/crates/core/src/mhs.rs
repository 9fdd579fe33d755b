//! Multi-hop score propagation over the snapshot at the question timestamp.
//!
//! This reads facts at `t_q` itself, so it is a non-forecasting diagnostic
//! and callers must opt in explicitly.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::binio;
use crate::complex::{conjugate, re_dot4, ComplexVec};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::forecaster::TimeAwareReps;
use crate::questions::{Answer, Question};
use crate::tkg::{EntityId, Quadruple, RelationId, TemporalKG, TimestampId};
use crate::training::{run_epochs, TrainConfig, Trained};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsiKind {
    Neural,
    Product,
}

impl std::str::FromStr for PsiKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neural" => Ok(PsiKind::Neural),
            "product" => Ok(PsiKind::Product),
            _ => Err(Error::config(
                "psi",
                format!("unknown psi `{s}`, expected neural or product"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MhsConfig {
    pub hops: usize,
    pub gamma: f64,
    pub psi: PsiKind,
}

impl Default for MhsConfig {
    fn default() -> Self {
        Self {
            hops: 2,
            gamma: 0.5,
            psi: PsiKind::Product,
        }
    }
}

impl MhsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hops == 0 {
            return Err(Error::config("hops", "must be at least 1"));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("gamma", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Edge of the snapshot with inverse relations added: `(s, r, o)` yields
/// `s -> o` with `r` and `o -> s` with `r^-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Edge {
    pub src: EntityId,
    pub rel: RelationId,
    pub inverse: bool,
    pub dst: EntityId,
}

pub fn augmented_edges(snapshot: &[Quadruple]) -> Vec<Edge> {
    let set: BTreeSet<Edge> = snapshot
        .iter()
        .flat_map(|q| {
            [
                Edge {
                    src: q.s,
                    rel: q.r,
                    inverse: false,
                    dst: q.o,
                },
                Edge {
                    src: q.o,
                    rel: q.r,
                    inverse: true,
                    dst: q.s,
                },
            ]
        })
        .collect();
    set.into_iter().collect()
}

/// Entities first reached at each hop, each with its in-edges from entities
/// reached at earlier hops. Layer 0 is `s_q` alone.
fn layers(edges: &[Edge], s_q: EntityId, hops: usize) -> Vec<Vec<(EntityId, Vec<Edge>)>> {
    let mut visited: BTreeSet<EntityId> = [s_q].into();
    let mut out = vec![vec![(s_q, Vec::new())]];
    for _ in 0..hops {
        let mut reached: BTreeMap<EntityId, Vec<Edge>> = BTreeMap::new();
        for e in edges {
            if visited.contains(&e.src) && !visited.contains(&e.dst) {
                reached.entry(e.dst).or_default().push(*e);
            }
        }
        if reached.is_empty() {
            break;
        }
        visited.extend(reached.keys());
        out.push(reached.into_iter().collect());
    }
    out
}

/// Scores per entity (0 for unvisited), the hop at which each entity was
/// reached, and the argmax over visited entities other than `s_q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MhsResult {
    pub scores: Vec<f64>,
    pub hop: Vec<Option<usize>>,
    /// `None` when nothing besides `s_q` was reached.
    pub answer: Option<EntityId>,
}

impl MhsResult {
    pub fn candidates(&self, s_q: EntityId) -> Vec<EntityId> {
        (0..self.scores.len() as EntityId)
            .filter(|e| *e != s_q && self.hop[*e as usize].is_some())
            .collect()
    }

    /// 1-based rank of `e` among the candidates (ties to the lower id), or
    /// `None` when `e` was not reached.
    pub fn rank(&self, s_q: EntityId, e: EntityId) -> Option<usize> {
        let cands = self.candidates(s_q);
        if !cands.contains(&e) {
            return None;
        }
        let se = self.scores[e as usize];
        Some(
            1 + cands
                .iter()
                .filter(|c| {
                    let sc = self.scores[**c as usize];
                    sc > se || (sc == se && **c < e)
                })
                .count(),
        )
    }
}

/// Breadth-first propagation from `s_q`: hop 0 scores `s_q` with 1, and each
/// later hop gives every newly reached entity the mean of
/// `gamma * score(src) + psi(edge)` over its in-edges from earlier hops.
pub fn propagate(
    snapshot: &[Quadruple],
    num_entities: usize,
    s_q: EntityId,
    cfg: &MhsConfig,
    mut psi: impl FnMut(&Edge) -> Result<f64>,
) -> Result<MhsResult> {
    cfg.validate()?;
    if s_q as usize >= num_entities {
        return Err(Error::IdOutOfRange {
            kind: "entity",
            id: s_q as usize,
            bound: num_entities,
        });
    }
    let mut scores = vec![0.0; num_entities];
    let mut hop = vec![None; num_entities];
    let edges = augmented_edges(snapshot);
    for (h, layer) in layers(&edges, s_q, cfg.hops).iter().enumerate() {
        for (e, ins) in layer {
            let i = *e as usize;
            if i >= num_entities {
                return Err(Error::IdOutOfRange {
                    kind: "entity",
                    id: i,
                    bound: num_entities,
                });
            }
            scores[i] = if h == 0 {
                1.0
            } else {
                let mut sum = 0.0;
                for edge in ins {
                    sum += cfg.gamma * scores[edge.src as usize] + psi(edge)?;
                }
                sum / ins.len() as f64
            };
            if !scores[i].is_finite() {
                return Err(Error::Divergence {
                    epoch: 0,
                    step: h,
                    loss: scores[i],
                });
            }
            hop[i] = Some(h);
        }
    }
    let mut result = MhsResult {
        scores,
        hop,
        answer: None,
    };
    result.answer = result
        .candidates(s_q)
        .into_iter()
        .fold(None, |best: Option<EntityId>, e| match best {
            Some(b) if result.scores[b as usize] >= result.scores[e as usize] => Some(b),
            _ => Some(e),
        });
    Ok(result)
}

fn relation_operand(h_r: &ComplexVec, inverse: bool) -> ComplexVec {
    if inverse {
        conjugate(h_r)
    } else {
        h_r.clone()
    }
}

/// `Re(<h_(src,t), h_r, conj(h_(dst,t)), h_q>)`; inverse edges use
/// `conj(h_r)`. Missing representations fall back to the base table.
pub fn psi_product(
    edge: &Edge,
    t: TimestampId,
    reps: &TimeAwareReps,
    h_q: &ComplexVec,
) -> Result<f64> {
    let (src, _) = reps.entity(edge.src, t)?;
    let (dst, _) = reps.entity(edge.dst, t)?;
    let h_r = relation_operand(reps.relation(edge.rel)?, edge.inverse);
    re_dot4(src, &h_r, &conjugate(dst), h_q)
}

#[derive(Debug, Clone, Copy)]
struct PsiIds {
    f1_w: ParamId,
    f1_b: ParamId,
    f2_w: ParamId,
    f2_b: ParamId,
}

/// `f2(tanh(f1(h_src || h_r || h_dst || h_t || h_q)))` with
/// `f1: R^10d -> R^2d` and `f2: R^2d -> R`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralPsi {
    pub dim: usize,
    pub params: ParamStore,
}

const PSI_MAGIC: &[u8; 8] = b"TKGMHSNP";

impl NeuralPsi {
    pub fn init(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamStore::new();
        params.add_glorot("psi.f1_w", 2 * dim, 10 * dim, rng);
        params.add_zeros("psi.f1_b", 1, 2 * dim);
        params.add_glorot("psi.f2_w", 1, 2 * dim, rng);
        params.add_zeros("psi.f2_b", 1, 1);
        Self { dim, params }
    }

    fn ids(params: &ParamStore) -> Result<PsiIds> {
        Ok(PsiIds {
            f1_w: params.require("psi.f1_w")?,
            f1_b: params.require("psi.f1_b")?,
            f2_w: params.require("psi.f2_w")?,
            f2_b: params.require("psi.f2_b")?,
        })
    }

    fn features(
        &self,
        edge: &Edge,
        t: TimestampId,
        tables: &EmbeddingTable,
        h_q: &ComplexVec,
    ) -> Result<Vec<f64>> {
        for got in [tables.dim, h_q.dim()] {
            if got != self.dim {
                return Err(Error::DimMismatch {
                    expected: self.dim,
                    got,
                });
            }
        }
        let ts = tables
            .timestamps
            .as_ref()
            .ok_or(Error::MissingTimestampTable)?;
        let ent = |e: EntityId| {
            tables.entities.get(e as usize).ok_or(Error::IdOutOfRange {
                kind: "entity",
                id: e as usize,
                bound: tables.entities.len(),
            })
        };
        let h_r = tables
            .relations
            .get(edge.rel as usize)
            .ok_or(Error::IdOutOfRange {
                kind: "relation",
                id: edge.rel as usize,
                bound: tables.relations.len(),
            })?;
        let h_t = ts.get(t as usize).ok_or(Error::IdOutOfRange {
            kind: "timestamp",
            id: t as usize,
            bound: ts.len(),
        })?;
        Ok([
            ent(edge.src)?.flatten(),
            relation_operand(h_r, edge.inverse).flatten(),
            ent(edge.dst)?.flatten(),
            h_t.flatten(),
            h_q.flatten(),
        ]
        .concat())
    }

    fn on_tape(tape: &mut Tape<'_>, ids: PsiIds, features: Vec<f64>) -> Var {
        let x = tape.constant(features);
        let h = tape.affine(ids.f1_w, ids.f1_b, x);
        let h = tape.tanh(h);
        tape.affine(ids.f2_w, ids.f2_b, h)
    }

    pub fn eval(
        &self,
        edge: &Edge,
        t: TimestampId,
        tables: &EmbeddingTable,
        h_q: &ComplexVec,
    ) -> Result<f64> {
        let x = self.features(edge, t, tables, h_q)?;
        let ids = Self::ids(&self.params)?;
        let mut tape = Tape::new(&self.params);
        let v = Self::on_tape(&mut tape, ids, x);
        Ok(tape.scalar(v))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_magic(w, PSI_MAGIC, 1)?;
        binio::write_u64(w, self.dim as u64)?;
        self.params.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_magic(r, PSI_MAGIC, 1)?;
        let dim = binio::read_u64(r)? as usize;
        let params = ParamStore::read_from(r)?;
        Self::ids(&params)?;
        Ok(Self { dim, params })
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

/// One EPQ prepared for neural-psi training.
struct MhsSample {
    s_q: EntityId,
    t_q: TimestampId,
    answer: EntityId,
    h_q: ComplexVec,
}

/// Train the neural psi with cross-entropy over the reached candidates of
/// each EPQ. Questions whose answer is not reached within `hops` are
/// skipped; their count is returned alongside the model.
pub fn train_neural_psi(
    questions: &[Question],
    kg: &TemporalKG,
    tables: &EmbeddingTable,
    mut encode: impl FnMut(&Question) -> Result<ComplexVec>,
    mhs: &MhsConfig,
    cfg: &TrainConfig,
) -> Result<(Trained<NeuralPsi>, usize)> {
    mhs.validate()?;
    let mut rng = cfg.rng(61);
    let mut model = NeuralPsi::init(tables.dim, &mut rng);
    let mut samples = Vec::new();
    let mut skipped = 0;
    for q in questions.iter().filter(|q| q.qtype.is_epq()) {
        let Answer::Entity(answer) = q.answer else {
            return Err(q.invalid("EPQ without an entity answer"));
        };
        let s_q = q.subject()?;
        let reached = layers(&augmented_edges(kg.snapshot(q.t_q)), s_q, mhs.hops)
            .iter()
            .skip(1)
            .any(|l| l.iter().any(|(e, _)| *e == answer));
        if !reached {
            skipped += 1;
            continue;
        }
        samples.push(MhsSample {
            s_q,
            t_q: q.t_q,
            answer,
            h_q: encode(q)?,
        });
    }
    if cfg.epochs == 0 || samples.is_empty() {
        return Ok((
            Trained {
                model,
                loss_curve: Vec::new(),
            },
            skipped,
        ));
    }
    let idx: Vec<usize> = (0..samples.len()).collect();
    let ids = NeuralPsi::ids(&model.params)?;
    let probe = model.clone();
    let curve = run_epochs(&mut model.params, &idx, cfg, None, 62, |tape, batch| {
        let mut losses = Vec::with_capacity(batch.len());
        for i in batch {
            let s = &samples[*i];
            let edges = augmented_edges(kg.snapshot(s.t_q));
            let mut score: BTreeMap<EntityId, Var> = BTreeMap::new();
            let mut order = Vec::new();
            for (h, layer) in layers(&edges, s.s_q, mhs.hops).iter().enumerate() {
                for (e, ins) in layer {
                    let v = if h == 0 {
                        tape.constant(vec![1.0])
                    } else {
                        let mut terms = Vec::with_capacity(ins.len());
                        for edge in ins {
                            let prev = tape.scale(score[&edge.src], mhs.gamma);
                            let psi = NeuralPsi::on_tape(
                                tape,
                                ids,
                                probe.features(edge, s.t_q, tables, &s.h_q)?,
                            );
                            terms.push(tape.add(prev, psi));
                        }
                        order.push(*e);
                        tape.mean(&terms)
                    };
                    score.insert(*e, v);
                }
            }
            order.sort_unstable();
            let target = order.iter().position(|e| *e == s.answer).expect("reached");
            let logits: Vec<Var> = order.iter().map(|e| score[e]).collect();
            let logits = tape.concat(&logits);
            losses.push(tape.cross_entropy(logits, target));
        }
        Ok(tape.sum(&losses))
    })?;
    Ok((
        Trained {
            model,
            loss_curve: curve,
        },
        skipped,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complex::expand4_re;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};

    fn quad(s: u32, r: u32, o: u32) -> Quadruple {
        Quadruple::new(s, r, o, 0)
    }

    fn cfg(gamma: f64) -> MhsConfig {
        MhsConfig {
            hops: 2,
            gamma,
            psi: PsiKind::Product,
        }
    }

    #[test]
    fn star_graph() {
        // 0 -> 1,2,3 ; 1 -> 4 ; 2 -> 5
        let g = [
            quad(0, 0, 1),
            quad(0, 0, 2),
            quad(0, 0, 3),
            quad(1, 0, 4),
            quad(2, 0, 5),
        ];
        let r = propagate(&g, 7, 0, &cfg(0.5), |_| Ok(0.0)).unwrap();
        assert_eq!(r.scores, [1.0, 0.5, 0.5, 0.5, 0.25, 0.25, 0.0]);
        assert_eq!(r.hop[6], None);
        assert_eq!(r.answer, Some(1));
    }

    #[test]
    fn chain_with_constant_psi() {
        let (g, c) = (0.3, 0.9);
        let r = propagate(&[quad(0, 0, 1), quad(1, 0, 2)], 3, 0, &cfg(g), |_| Ok(c)).unwrap();
        assert_eq!(r.scores[1], g + c);
        assert_eq!(r.scores[2], g * (g + c) + c);
        assert_eq!(r.answer, Some(2));
    }

    #[test]
    fn hop_limit_and_first_visit() {
        let g = [quad(0, 0, 1), quad(1, 0, 2), quad(2, 0, 3), quad(0, 0, 2)];
        let one = MhsConfig {
            hops: 1,
            ..cfg(1.0)
        };
        let r = propagate(&g, 4, 0, &one, |_| Ok(0.0)).unwrap();
        assert_eq!(r.hop, [Some(0), Some(1), Some(1), None]);
        assert_eq!(r.scores[3], 0.0);
        // 2 is reached at hop 1 from 0 only; the later path through 1 is ignored
        let r = propagate(&g, 4, 0, &cfg(0.5), |e| {
            Ok(if e.src == 1 { 10.0 } else { 0.0 })
        })
        .unwrap();
        assert_eq!(r.scores[2], 0.5);
    }

    #[test]
    fn inverse_edges_reach_subjects() {
        // only 1 -> 0 exists; 1 is reached from 0 through the inverse edge
        let mut seen = Vec::new();
        let r = propagate(&[quad(1, 4, 0)], 2, 0, &cfg(0.5), |e| {
            seen.push(*e);
            Ok(0.0)
        })
        .unwrap();
        assert_eq!(r.answer, Some(1));
        assert_eq!(
            seen,
            [Edge {
                src: 0,
                rel: 4,
                inverse: true,
                dst: 1
            }]
        );
    }

    #[test]
    fn empty_and_isolated_have_no_answer() {
        let r = propagate(&[], 3, 1, &cfg(0.5), |_| Ok(0.0)).unwrap();
        assert_eq!(r.answer, None);
        assert_eq!(r.scores, [0.0, 1.0, 0.0]);
        let r = propagate(&[quad(0, 0, 2)], 3, 1, &cfg(0.5), |_| Ok(0.0)).unwrap();
        assert_eq!(r.answer, None);
        assert!(propagate(&[], 3, 5, &cfg(0.5), |_| Ok(0.0)).is_err());
        assert!(propagate(&[], 3, 0, &cfg(0.0), |_| Ok(0.0)).is_err());
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let g = [quad(0, 0, 4), quad(0, 0, 2), quad(0, 0, 3)];
        let r = propagate(&g, 5, 0, &cfg(0.5), |_| Ok(0.0)).unwrap();
        assert_eq!(r.answer, Some(2));
        assert_eq!(r.rank(0, 4), Some(3));
        assert_eq!(r.rank(0, 1), None);
    }

    #[test]
    fn gamma_one_zero_psi_gives_ones() {
        let g = [quad(0, 0, 1), quad(1, 1, 2), quad(3, 2, 1), quad(2, 0, 4)];
        let r = propagate(&g, 6, 0, &cfg(1.0), |_| Ok(0.0)).unwrap();
        for e in 0..6 {
            let want = if r.hop[e].is_some() { 1.0 } else { 0.0 };
            assert_eq!(r.scores[e], want);
        }
    }

    fn rand_cv(rng: &mut ChaCha8Rng, d: usize) -> ComplexVec {
        ComplexVec::new(
            (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn reps(n: usize, d: usize, rng: &mut ChaCha8Rng) -> TimeAwareReps {
        TimeAwareReps {
            dim: d,
            base: (0..n).map(|_| rand_cv(rng, d)).collect(),
            relations: (0..3).map(|_| rand_cv(rng, d)).collect(),
            entries: BTreeMap::new(),
            latest_source: vec![None],
        }
    }

    #[test]
    fn psi_product_matches_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = reps(3, 4, &mut rng);
        let hq = rand_cv(&mut rng, 4);
        let fwd = Edge {
            src: 0,
            rel: 1,
            inverse: false,
            dst: 2,
        };
        let got = psi_product(&fwd, 0, &r, &hq).unwrap();
        let want = expand4_re(&r.base[0], &r.relations[1], &conjugate(&r.base[2]), &hq).unwrap();
        assert!((got - want).abs() < 1e-9);
        let inv = Edge {
            inverse: true,
            ..fwd
        };
        let got = psi_product(&inv, 0, &r, &hq).unwrap();
        let want = re_dot4(
            &r.base[0],
            &conjugate(&r.relations[1]),
            &conjugate(&r.base[2]),
            &hq,
        )
        .unwrap();
        assert!((got - want).abs() < 1e-12);
        let mut zero = r.clone();
        zero.relations[1] = ComplexVec::zeros(4);
        assert_eq!(psi_product(&fwd, 0, &zero, &hq).unwrap(), 0.0);
    }

    #[test]
    fn two_hop_toy_with_product_psi() {
        // s_q = 0; 1 reached through (1, r2, 0) inverted; 2 and 3 directly;
        // 4 reached from both 1 and 2; 5 from 3 through an inverse edge.
        let g = [
            quad(1, 2, 0),
            quad(0, 0, 2),
            quad(0, 1, 3),
            quad(1, 0, 4),
            quad(2, 1, 4),
            quad(5, 2, 3),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = reps(6, 3, &mut rng);
        let hq = rand_cv(&mut rng, 3);
        let psi = |src: usize, rel: usize, inv: bool, dst: usize| {
            let h_r = if inv {
                conjugate(&r.relations[rel])
            } else {
                r.relations[rel].clone()
            };
            expand4_re(&r.base[src], &h_r, &conjugate(&r.base[dst]), &hq).unwrap()
        };
        let g5 = 0.5;
        let s1 = g5 + psi(0, 2, true, 1);
        let s2 = g5 + psi(0, 0, false, 2);
        let s3 = g5 + psi(0, 1, false, 3);
        let s4 = ((g5 * s1 + psi(1, 0, false, 4)) + (g5 * s2 + psi(2, 1, false, 4))) / 2.0;
        let s5 = g5 * s3 + psi(3, 2, true, 5);
        let got = propagate(&g, 6, 0, &cfg(g5), |e| psi_product(e, 0, &r, &hq)).unwrap();
        for (e, want) in [(1, s1), (2, s2), (3, s3), (4, s4), (5, s5)] {
            assert!((got.scores[e] - want).abs() < 1e-9, "entity {e}");
        }
        assert_eq!(
            got.hop,
            [Some(0), Some(1), Some(1), Some(1), Some(2), Some(2)]
        );
        let best = (1..6).fold(1, |b, e| if got.scores[e] > got.scores[b] { e } else { b });
        assert_eq!(got.answer, Some(best as u32));
    }

    fn tables(n: usize, d: usize, rng: &mut ChaCha8Rng) -> EmbeddingTable {
        EmbeddingTable {
            dim: d,
            entities: (0..n).map(|_| rand_cv(rng, d)).collect(),
            relations: (0..2).map(|_| rand_cv(rng, d)).collect(),
            timestamps: Some((0..2).map(|_| rand_cv(rng, d)).collect()),
        }
    }

    #[test]
    fn neural_psi_zero_output_and_hand_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tb = tables(3, 1, &mut rng);
        let hq = rand_cv(&mut rng, 1);
        let e = Edge {
            src: 0,
            rel: 1,
            inverse: false,
            dst: 2,
        };
        let mut psi = NeuralPsi::init(1, &mut rng);
        let ids = NeuralPsi::ids(&psi.params).unwrap();
        psi.params
            .get_mut(ids.f2_w)
            .data
            .iter_mut()
            .for_each(|x| *x = 0.0);
        assert_eq!(psi.eval(&e, 1, &tb, &hq).unwrap(), 0.0);
        // f1 picks Re(h_src) and Im(h_q); f2 sums them
        let f1 = psi.params.get_mut(ids.f1_w);
        f1.data.iter_mut().for_each(|x| *x = 0.0);
        f1.data[0] = 1.0;
        f1.data[10 + 9] = 1.0;
        psi.params
            .get_mut(ids.f2_w)
            .data
            .copy_from_slice(&[1.0, 1.0]);
        psi.params.get_mut(ids.f2_b).data[0] = 0.25;
        let want = tb.entities[0].re[0].tanh() + hq.im[0].tanh() + 0.25;
        assert!((psi.eval(&e, 1, &tb, &hq).unwrap() - want).abs() < 1e-12);
        // inverse edges conjugate the relation slot
        let f1 = psi.params.get_mut(ids.f1_w);
        f1.data.iter_mut().for_each(|x| *x = 0.0);
        f1.data[3] = 1.0;
        psi.params.get_mut(ids.f2_b).data[0] = 0.0;
        psi.params
            .get_mut(ids.f2_w)
            .data
            .copy_from_slice(&[1.0, 0.0]);
        let inv = Edge { inverse: true, ..e };
        let want = (-tb.relations[1].im[0]).tanh();
        assert!((psi.eval(&inv, 1, &tb, &hq).unwrap() - want).abs() < 1e-12);
        assert!(matches!(
            psi.eval(&e, 1, &tb, &rand_cv(&mut rng, 2)),
            Err(Error::DimMismatch { .. })
        ));
        let mut buf = Vec::new();
        psi.write_to(&mut buf).unwrap();
        assert_eq!(NeuralPsi::read_from(&mut buf.as_slice()).unwrap(), psi);
    }

    #[test]
    fn neural_psi_training_reduces_loss() {
        use crate::questions::{QType, Question};
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tb = tables(6, 2, &mut rng);
        // the answer is always the object of relation 1 from s_q
        let facts: Vec<Quadruple> = (0..2u32)
            .flat_map(|t| {
                let a = 1 + t;
                [
                    Quadruple::new(0, 1, a, t),
                    Quadruple::new(0, 0, 3, t),
                    Quadruple::new(0, 0, 4, t),
                    Quadruple::new(a, 0, 5, t),
                ]
            })
            .collect();
        let kg = TemporalKG::new(facts, 6, 2, 2).unwrap();
        let qs: Vec<Question> = (0..2u32)
            .map(|t| Question {
                id: format!("q{t}"),
                qtype: QType::Epq1,
                text: String::new(),
                entities: vec![0],
                t_q: t,
                answer: Answer::Entity(1 + t),
                choices: None,
                provenance: Vec::new(),
                perturbed: None,
                shuffle_perm: None,
                tags: Vec::new(),
            })
            .collect();
        let tc = TrainConfig {
            dim: 2,
            epochs: 60,
            batch_size: 2,
            lr: 0.05,
            seed: 1,
            ..Default::default()
        };
        let hq = rand_cv(&mut rng, 2);
        let (trained, skipped) =
            train_neural_psi(&qs, &kg, &tb, |_| Ok(hq.clone()), &cfg(0.5), &tc).unwrap();
        assert_eq!(skipped, 0);
        let c = &trained.loss_curve;
        assert!(c[c.len() - 1] < 0.5 * c[0], "{c:?}");
        for q in &qs {
            let r = propagate(kg.snapshot(q.t_q), 6, 0, &cfg(0.5), |e| {
                trained.model.eval(e, q.t_q, &tb, &hq)
            })
            .unwrap();
            assert_eq!(Some(q.answer), r.answer.map(Answer::Entity));
        }
    }

    proptest! {
        #[test]
        fn edge_order_does_not_matter(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g: Vec<Quadruple> = (0..12).map(|_| quad(rng.random_range(0..8), rng.random_range(0..3), rng.random_range(0..8))).collect();
            let psi = |e: &Edge| Ok((e.src * 3 + e.rel * 5 + e.dst) as f64 * 0.1 - if e.inverse { 0.3 } else { 0.0 });
            let a = propagate(&g, 8, 0, &cfg(0.5), psi).unwrap();
            g.reverse();
            let b = propagate(&g, 8, 0, &cfg(0.5), psi).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
