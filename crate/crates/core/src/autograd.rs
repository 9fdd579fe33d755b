//! A small reverse-mode tape over dense `f64` vectors.
//!
//! Parameters live in a [`ParamStore`]; a [`Tape`] records the forward
//! computation for one minibatch and [`Tape::backward`] returns dense
//! gradients for every parameter tensor. Complex vectors are carried in the
//! split layout `re ‖ im`, and the multilinear scoring ops call the kernels in
//! [`crate::complex`].

use std::io::{Read, Write};

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::binio;
use crate::complex::{expand3_parts, expand4_parts};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

const PARAMS_MAGIC: &[u8; 8] = b"TKGPARAM";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>) -> ParamId {
        assert_eq!(data.len(), rows * cols, "tensor {name} has wrong size");
        assert!(self.id(name).is_none(), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.tensors.push(Tensor { rows, cols, data });
        ParamId(self.tensors.len() - 1)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, rows, cols, vec![0.0; rows * cols])
    }

    /// Uniform Glorot initialisation.
    pub fn add_glorot(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        self.add_uniform(name, rows, cols, bound, rng)
    }

    pub fn add_uniform(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.add(name, rows, cols, data)
    }

    /// Identity plus small uniform noise (rectangular identity if not square).
    pub fn add_near_identity(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        noise: f64,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let mut data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.random_range(-noise..=noise))
            .collect();
        for i in 0..rows.min(cols) {
            data[i * cols + i] += 1.0;
        }
        self.add(name, rows, cols, data)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::format(format!("checkpoint lacks parameter {name:?}")))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_magic(w, PARAMS_MAGIC, 1)?;
        binio::write_u32(w, self.tensors.len() as u32)?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            binio::write_str(w, name)?;
            binio::write_u32(w, t.rows as u32)?;
            binio::write_u32(w, t.cols as u32)?;
            binio::write_f64s(w, &t.data)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_magic(r, PARAMS_MAGIC, 1)?;
        let n = binio::read_u32(r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let name = binio::read_str(r)?;
            let rows = binio::read_u32(r)? as usize;
            let cols = binio::read_u32(r)? as usize;
            let data = binio::read_f64s(r, rows * cols)?;
            store.add(&name, rows, cols, data);
        }
        Ok(store)
    }
}

/// Dense gradients, one buffer per parameter tensor.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros(params: &ParamStore) -> Self {
        Self {
            grads: params
                .tensors
                .iter()
                .map(|t| vec![0.0; t.data.len()])
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.grads.iter_mut().flatten().for_each(|g| *g *= s);
    }

    /// Zero the gradients of every parameter not in `keep`.
    pub fn retain(&mut self, keep: &[ParamId]) {
        for (i, g) in self.grads.iter_mut().enumerate() {
            if !keep.contains(&ParamId(i)) {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(ParamId),
    ParamRow(ParamId, usize),
    MatVec(ParamId, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Mean(Vec<Var>),
    Sum(Vec<Var>),
    CMul(Var, Var),
    Conj(Var),
    Dot(Var, Var),
    Stack(Vec<Var>),
    Softmax(Var),
    WeightedSum(Var, Vec<Var>),
    ReDot3Conj(Var, Var, Var),
    ReDot4Conj(Var, Var, Var, Var),
    CrossEntropy(Var, usize),
    N3(Var),
}

struct Node {
    op: Op,
    value: Vec<f64>,
    needs_grad: bool,
}

/// Records one forward pass.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn halves(v: &[f64]) -> (&[f64], &[f64]) {
    v.split_at(v.len() / 2)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Var {
        let needs_grad = match &op {
            Op::Const => false,
            Op::Param(_) | Op::ParamRow(..) | Op::MatVec(..) => true,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::CMul(a, b) | Op::Dot(a, b) => {
                self.ng(*a) || self.ng(*b)
            }
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Slice(a, _)
            | Op::Conj(a)
            | Op::Softmax(a)
            | Op::CrossEntropy(a, _)
            | Op::N3(a) => self.ng(*a),
            Op::Concat(vs) | Op::Mean(vs) | Op::Sum(vs) | Op::Stack(vs) => {
                vs.iter().any(|v| self.ng(*v))
            }
            Op::WeightedSum(w, vs) => self.ng(*w) || vs.iter().any(|v| self.ng(*v)),
            Op::ReDot3Conj(a, b, c) => self.ng(*a) || self.ng(*b) || self.ng(*c),
            Op::ReDot4Conj(a, b, c, x) => self.ng(*a) || self.ng(*b) || self.ng(*c) || self.ng(*x),
        };
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Const, value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id).data.clone();
        self.push(Op::Param(id), value)
    }

    pub fn param_row(&mut self, id: ParamId, row: usize) -> Var {
        let value = self.params.get(id).row(row).to_vec();
        self.push(Op::ParamRow(id, row), value)
    }

    /// `W x` for a parameter matrix `W`.
    pub fn matvec(&mut self, w: ParamId, x: Var) -> Var {
        let t = self.params.get(w);
        let xv = self.value(x);
        assert_eq!(
            t.cols,
            xv.len(),
            "matvec shape mismatch for {}",
            self.params.name(w)
        );
        let out = (0..t.rows)
            .map(|r| t.row(r).iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        self.push(Op::MatVec(w, x), out)
    }

    /// `W x + b`.
    pub fn affine(&mut self, w: ParamId, b: ParamId, x: Var) -> Var {
        let wx = self.matvec(w, x);
        let bias = self.param(b);
        self.add(wx, bias)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "elementwise shape mismatch");
        av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * s).collect();
        self.push(Op::Scale(a, s), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| sigmoid(*x)).collect();
        self.push(Op::Sigmoid(a), v)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let v = parts
            .iter()
            .flat_map(|p| self.value(*p).iter().copied())
            .collect();
        self.push(Op::Concat(parts.to_vec()), v)
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a)[start..start + len].to_vec();
        self.push(Op::Slice(a, start), v)
    }

    pub fn mean(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "mean of nothing");
        let n = self.value(parts[0]).len();
        let mut v = vec![0.0; n];
        for p in parts {
            for (acc, x) in v.iter_mut().zip(self.value(*p)) {
                *acc += x;
            }
        }
        let k = parts.len() as f64;
        v.iter_mut().for_each(|x| *x /= k);
        self.push(Op::Mean(parts.to_vec()), v)
    }

    pub fn sum(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "sum of nothing");
        let n = self.value(parts[0]).len();
        let mut v = vec![0.0; n];
        for p in parts {
            for (acc, x) in v.iter_mut().zip(self.value(*p)) {
                *acc += x;
            }
        }
        self.push(Op::Sum(parts.to_vec()), v)
    }

    /// Elementwise complex product in split layout.
    pub fn cmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ai) = halves(self.value(a));
        let (br, bi) = halves(self.value(b));
        assert_eq!(ar.len(), br.len());
        let re: Vec<f64> = (0..ar.len())
            .map(|k| ar[k] * br[k] - ai[k] * bi[k])
            .collect();
        let im: Vec<f64> = (0..ar.len())
            .map(|k| ar[k] * bi[k] + ai[k] * br[k])
            .collect();
        self.push(Op::CMul(a, b), [re, im].concat())
    }

    pub fn conj(&mut self, a: Var) -> Var {
        let (re, im) = halves(self.value(a));
        let v = re.iter().copied().chain(im.iter().map(|x| -x)).collect();
        self.push(Op::Conj(a), v)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let s = self.zip_with(a, b, |x, y| x * y).iter().sum();
        self.push(Op::Dot(a, b), vec![s])
    }

    /// Collect scalar nodes into one vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Var {
        let v = scalars.iter().map(|s| self.scalar(*s)).collect();
        self.push(Op::Stack(scalars.to_vec()), v)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax(self.value(a));
        self.push(Op::Softmax(a), v)
    }

    /// `Σ_i w_i v_i`.
    pub fn weighted_sum(&mut self, weights: Var, parts: &[Var]) -> Var {
        let w = self.value(weights).to_vec();
        assert_eq!(w.len(), parts.len());
        let n = self.value(parts[0]).len();
        let mut v = vec![0.0; n];
        for (wi, p) in w.iter().zip(parts) {
            for (acc, x) in v.iter_mut().zip(self.value(*p)) {
                *acc += wi * x;
            }
        }
        self.push(Op::WeightedSum(weights, parts.to_vec()), v)
    }

    /// `Re(<a, b, conj(h)>)` through the four-term expansion.
    pub fn re_dot3_conj(&mut self, a: Var, b: Var, h: Var) -> Var {
        let (ar, ai) = halves(self.value(a));
        let (br, bi) = halves(self.value(b));
        let (hr, hi) = halves(self.value(h));
        let conj_im: Vec<f64> = hi.iter().map(|x| -x).collect();
        let s = expand3_parts(ar, ai, br, bi, hr, &conj_im);
        self.push(Op::ReDot3Conj(a, b, h), vec![s])
    }

    /// `Re(<a, b, conj(h), x>)` through the eight-term expansion.
    pub fn re_dot4_conj(&mut self, a: Var, b: Var, h: Var, x: Var) -> Var {
        let (ar, ai) = halves(self.value(a));
        let (br, bi) = halves(self.value(b));
        let (hr, hi) = halves(self.value(h));
        let (xr, xi) = halves(self.value(x));
        let conj_im: Vec<f64> = hi.iter().map(|x| -x).collect();
        let s = expand4_parts(ar, ai, br, bi, hr, &conj_im, xr, xi);
        self.push(Op::ReDot4Conj(a, b, h, x), vec![s])
    }

    /// `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let l = self.value(logits);
        assert!(target < l.len(), "target {target} out of {}", l.len());
        let loss = log_sum_exp(l) - l[target];
        self.push(Op::CrossEntropy(logits, target), vec![loss])
    }

    /// `Σ_k |z_k|^3` for a complex vector in split layout.
    pub fn n3(&mut self, a: Var) -> Var {
        let (re, im) = halves(self.value(a));
        let s = re
            .iter()
            .zip(im)
            .map(|(r, i)| (r * r + i * i).powf(1.5))
            .sum();
        self.push(Op::N3(a), vec![s])
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut pgrads = Gradients::zeros(self.params);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let acc = |v: Var, delta: &[f64], grads: &mut Vec<Option<Vec<f64>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; delta.len()]);
                for (s, d) in slot.iter_mut().zip(delta) {
                    *s += d;
                }
            };
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    for (s, d) in pgrads.grads[id.0].iter_mut().zip(&g) {
                        *s += d;
                    }
                }
                Op::ParamRow(id, row) => {
                    let cols = self.params.get(*id).cols;
                    let dst = &mut pgrads.grads[id.0][row * cols..(row + 1) * cols];
                    for (s, d) in dst.iter_mut().zip(&g) {
                        *s += d;
                    }
                }
                Op::MatVec(id, x) => {
                    let t = self.params.get(*id);
                    let xv = self.value(*x);
                    let dw = &mut pgrads.grads[id.0];
                    for r in 0..t.rows {
                        if g[r] == 0.0 {
                            continue;
                        }
                        for c in 0..t.cols {
                            dw[r * t.cols + c] += g[r] * xv[c];
                        }
                    }
                    if self.ng(*x) {
                        let mut dx = vec![0.0; t.cols];
                        for (row, gr) in t.data.chunks(t.cols).zip(&g) {
                            for (dxc, w) in dx.iter_mut().zip(row) {
                                *dxc += w * gr;
                            }
                        }
                        acc(*x, &dx, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, &g, &mut grads);
                    acc(*b, &g, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*a, &g, &mut grads);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    acc(*b, &neg, &mut grads);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = g.iter().zip(self.value(*b)).map(|(g, y)| g * y).collect();
                    let db: Vec<f64> = g.iter().zip(self.value(*a)).map(|(g, x)| g * x).collect();
                    acc(*a, &da, &mut grads);
                    acc(*b, &db, &mut grads);
                }
                Op::Scale(a, s) => {
                    let da: Vec<f64> = g.iter().map(|x| x * s).collect();
                    acc(*a, &da, &mut grads);
                }
                Op::Tanh(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&node.value)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    acc(*a, &da, &mut grads);
                }
                Op::Sigmoid(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&node.value)
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    acc(*a, &da, &mut grads);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        acc(*p, &g[off..off + n], &mut grads);
                        off += n;
                    }
                }
                Op::Slice(a, start) => {
                    let mut da = vec![0.0; self.value(*a).len()];
                    da[*start..*start + g.len()].copy_from_slice(&g);
                    acc(*a, &da, &mut grads);
                }
                Op::Mean(parts) => {
                    let k = parts.len() as f64;
                    let d: Vec<f64> = g.iter().map(|x| x / k).collect();
                    for p in parts {
                        acc(*p, &d, &mut grads);
                    }
                }
                Op::Sum(parts) => {
                    for p in parts {
                        acc(*p, &g, &mut grads);
                    }
                }
                Op::CMul(a, b) => {
                    let (ar, ai) = halves(self.value(*a));
                    let (br, bi) = halves(self.value(*b));
                    let (gr, gi) = halves(&g);
                    let d = ar.len();
                    let mut da = vec![0.0; 2 * d];
                    let mut db = vec![0.0; 2 * d];
                    for k in 0..d {
                        da[k] = gr[k] * br[k] + gi[k] * bi[k];
                        da[d + k] = -gr[k] * bi[k] + gi[k] * br[k];
                        db[k] = gr[k] * ar[k] + gi[k] * ai[k];
                        db[d + k] = -gr[k] * ai[k] + gi[k] * ar[k];
                    }
                    acc(*a, &da, &mut grads);
                    acc(*b, &db, &mut grads);
                }
                Op::Conj(a) => {
                    let d = g.len() / 2;
                    let da: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, x)| if i < d { *x } else { -x })
                        .collect();
                    acc(*a, &da, &mut grads);
                }
                Op::Dot(a, b) => {
                    let da: Vec<f64> = self.value(*b).iter().map(|y| g[0] * y).collect();
                    let db: Vec<f64> = self.value(*a).iter().map(|x| g[0] * x).collect();
                    acc(*a, &da, &mut grads);
                    acc(*b, &db, &mut grads);
                }
                Op::Stack(parts) => {
                    for (p, gi) in parts.iter().zip(&g) {
                        acc(*p, &[*gi], &mut grads);
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let gy: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                    let da: Vec<f64> = g.iter().zip(y).map(|(g, y)| y * (g - gy)).collect();
                    acc(*a, &da, &mut grads);
                }
                Op::WeightedSum(w, parts) => {
                    let wv = self.value(*w);
                    let dw: Vec<f64> = parts
                        .iter()
                        .map(|p| self.value(*p).iter().zip(&g).map(|(x, g)| x * g).sum())
                        .collect();
                    for (wi, p) in wv.iter().zip(parts) {
                        let dp: Vec<f64> = g.iter().map(|x| x * wi).collect();
                        acc(*p, &dp, &mut grads);
                    }
                    acc(*w, &dw, &mut grads);
                }
                Op::ReDot3Conj(a, b, h) => {
                    let (da, db, dh) =
                        re_dot3_conj_grads(self.value(*a), self.value(*b), self.value(*h), g[0]);
                    acc(*a, &da, &mut grads);
                    acc(*b, &db, &mut grads);
                    acc(*h, &dh, &mut grads);
                }
                Op::ReDot4Conj(a, b, h, x) => {
                    let (da, db, dh, dx) = re_dot4_conj_grads(
                        self.value(*a),
                        self.value(*b),
                        self.value(*h),
                        self.value(*x),
                        g[0],
                    );
                    acc(*a, &da, &mut grads);
                    acc(*b, &db, &mut grads);
                    acc(*h, &dh, &mut grads);
                    acc(*x, &dx, &mut grads);
                }
                Op::CrossEntropy(logits, target) => {
                    let mut d = softmax(self.value(*logits));
                    d[*target] -= 1.0;
                    d.iter_mut().for_each(|x| *x *= g[0]);
                    acc(*logits, &d, &mut grads);
                }
                Op::N3(a) => {
                    let (re, im) = halves(self.value(*a));
                    let d = re.len();
                    let mut da = vec![0.0; 2 * d];
                    for k in 0..d {
                        let m = (re[k] * re[k] + im[k] * im[k]).sqrt();
                        da[k] = g[0] * 3.0 * m * re[k];
                        da[d + k] = g[0] * 3.0 * m * im[k];
                    }
                    acc(*a, &da, &mut grads);
                }
            }
        }
        pgrads
    }
}

#[derive(Clone, Copy)]
struct C(f64, f64);

impl C {
    fn mul(self, o: C) -> C {
        C(self.0 * o.0 - self.1 * o.1, self.0 * o.1 + self.1 * o.0)
    }
    fn conj(self) -> C {
        C(self.0, -self.1)
    }
}

fn at(v: &[f64], k: usize) -> C {
    let d = v.len() / 2;
    C(v[k], v[d + k])
}

/// For `f = Re Σ a_k P_k`: `∂f/∂Re a = Re P`, `∂f/∂Im a = -Im P`.
fn write_grad(out: &mut [f64], k: usize, p: C, g: f64) {
    let d = out.len() / 2;
    out[k] = g * p.0;
    out[d + k] = -g * p.1;
}

fn re_dot3_conj_grads(a: &[f64], b: &[f64], h: &[f64], g: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = a.len();
    let d = n / 2;
    let (mut da, mut db, mut dh) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for k in 0..d {
        let (ak, bk, hk) = (at(a, k), at(b, k), at(h, k).conj());
        write_grad(&mut da, k, bk.mul(hk), g);
        write_grad(&mut db, k, ak.mul(hk), g);
        // Re(Q conj h) = Qr hr + Qi hi
        let q = ak.mul(bk);
        dh[k] = g * q.0;
        dh[d + k] = g * q.1;
    }
    (da, db, dh)
}

#[allow(clippy::type_complexity)]
fn re_dot4_conj_grads(
    a: &[f64],
    b: &[f64],
    h: &[f64],
    x: &[f64],
    g: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = a.len();
    let d = n / 2;
    let (mut da, mut db, mut dh, mut dx) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for k in 0..d {
        let (ak, bk, hk, xk) = (at(a, k), at(b, k), at(h, k).conj(), at(x, k));
        write_grad(&mut da, k, bk.mul(hk).mul(xk), g);
        write_grad(&mut db, k, ak.mul(hk).mul(xk), g);
        write_grad(&mut dx, k, ak.mul(bk).mul(hk), g);
        let q = ak.mul(bk).mul(xk);
        dh[k] = g * q.0;
        dh[d + k] = g * q.1;
    }
    (da, db, dh, dx)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Adam with optional global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors
            .iter()
            .map(|t| vec![0.0; t.data.len()])
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(10.0),
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let scale = match self.clip_norm {
            Some(c) => {
                let n = grads.norm();
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (i, t) in params.tensors.iter_mut().enumerate() {
            let g = &grads.grads[i];
            if g.iter().all(|x| *x == 0.0) && self.m[i].iter().all(|x| *x == 0.0) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..t.data.len() {
                let gj = g[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                t.data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Central finite-difference gradient of `loss` with respect to parameter
/// `id`, evaluated entry by entry.
pub fn numeric_gradient(
    params: &mut ParamStore,
    id: ParamId,
    eps: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> Vec<f64> {
    let n = params.get(id).data.len();
    let mut out = vec![0.0; n];
    for (j, o) in out.iter_mut().enumerate() {
        let orig = params.get(id).data[j];
        params.get_mut(id).data[j] = orig + eps;
        let up = loss(params);
        params.get_mut(id).data[j] = orig - eps;
        let down = loss(params);
        params.get_mut(id).data[j] = orig;
        *o = (up - down) / (2.0 * eps);
    }
    out
}

/// Largest relative error between two gradient vectors, with the
/// denominator floored at `floor` so near-zero entries compare absolutely.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
