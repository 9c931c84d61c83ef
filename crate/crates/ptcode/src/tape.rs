//! Recording tape for reverse-mode differentiation.
//!
//! Every forward pass appends vector-valued nodes to a [`Tape`]; each node
//! remembers the primitive that produced it, so one backward sweep in
//! reverse creation order accumulates exact gradients for every trainable
//! tensor of the [`ParameterStore`] the tape was opened against.
//!
//! The primitive set is exactly what the encoders and losses need:
//! embedding lookup, (fused) matrix-vector affine maps, element-wise
//! arithmetic, tanh / sigmoid / softplus / ln, max- and mean-pooling,
//! concatenation, dot product, softmax, coordinate selection, and dropout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParameterStore};

/// Handle to one value node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    /// Leaf with no inputs (external value or constant).
    Leaf,
    Embed {
        table: ParamId,
        row: usize,
    },
    /// `W x + b`; `b` may be absent.
    Affine {
        w: ParamId,
        x: NodeId,
        b: Option<ParamId>,
    },
    /// `W1 x1 + W2 x2 + b` (one GRU gate pre-activation).
    Affine2 {
        w1: ParamId,
        x1: NodeId,
        w2: ParamId,
        x2: NodeId,
        b: ParamId,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddMany(Vec<NodeId>),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Ln(NodeId),
    ClampMin(NodeId, f64),
    Concat(Vec<NodeId>),
    MaxPool {
        xs: Vec<NodeId>,
        argmax: Vec<usize>,
    },
    MeanPool(Vec<NodeId>),
    Dot(NodeId, NodeId),
    Softmax(NodeId),
    Pick {
        x: NodeId,
        index: usize,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

pub struct Tape<'p> {
    store: &'p ParameterStore,
    nodes: Vec<Node>,
    pool_ties: usize,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large |x|.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParameterStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            pool_ties: 0,
        }
    }

    pub fn store(&self) -> &ParameterStore {
        self.store
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn dim(&self, id: NodeId) -> usize {
        self.nodes[id.0].value.len()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.dim(id), 1);
        self.nodes[id.0].value[0]
    }

    /// Number of coordinates that hit an exact max-pool tie so far. The
    /// pooled value is unaffected (earliest timestep wins) but the point is
    /// a subgradient, so gradient checks want to know.
    pub fn pool_tie_count(&self) -> usize {
        self.pool_ties
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Vec<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn zeros(&mut self, dim: usize) -> NodeId {
        self.leaf(vec![0.0; dim])
    }

    /// Row lookup into an embedding-style parameter matrix.
    pub fn embed(&mut self, table: ParamId, row: usize) -> NodeId {
        let value = self.store.value(table).row(row).to_vec();
        self.push(value, Op::Embed { table, row })
    }

    /// `W x` or `W x + b`.
    pub fn affine(&mut self, w: ParamId, x: NodeId, b: Option<ParamId>) -> NodeId {
        let wm = self.store.value(w);
        assert_eq!(wm.cols(), self.dim(x), "affine input dim");
        let mut out = vec![0.0; wm.rows()];
        wm.matvec(self.value(x), &mut out);
        if let Some(b) = b {
            let bv = self.store.value(b);
            assert_eq!(bv.len(), out.len(), "affine bias dim");
            for (o, bi) in out.iter_mut().zip(bv.as_slice()) {
                *o += bi;
            }
        }
        self.push(out, Op::Affine { w, x, b })
    }

    /// `W1 x1 + W2 x2 + b`.
    pub fn affine2(&mut self, w1: ParamId, x1: NodeId, w2: ParamId, x2: NodeId, b: ParamId) -> NodeId {
        let m1 = self.store.value(w1);
        let m2 = self.store.value(w2);
        assert_eq!(m1.cols(), self.dim(x1), "affine2 first input dim");
        assert_eq!(m2.cols(), self.dim(x2), "affine2 second input dim");
        assert_eq!(m1.rows(), m2.rows(), "affine2 output dims");
        let mut out = vec![0.0; m1.rows()];
        m1.matvec(self.value(x1), &mut out);
        let mut tmp = vec![0.0; m2.rows()];
        m2.matvec(self.value(x2), &mut tmp);
        let bv = self.store.value(b);
        assert_eq!(bv.len(), out.len(), "affine2 bias dim");
        for ((o, t), bi) in out.iter_mut().zip(&tmp).zip(bv.as_slice()) {
            *o += t + bi;
        }
        self.push(out, Op::Affine2 { w1, x1, w2, x2, b })
    }

    fn zip2(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> NodeId {
        assert_eq!(self.dim(a), self.dim(b), "element-wise dims");
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        self.push(value, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip2(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip2(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip2(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).iter().map(|x| -x).collect();
        self.push(value, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).iter().map(|x| c * x).collect();
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_many(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let dim = self.dim(xs[0]);
        let mut value = vec![0.0; dim];
        for &x in xs {
            assert_eq!(self.dim(x), dim, "add_many dims");
            for (v, s) in value.iter_mut().zip(self.value(x)) {
                *v += s;
            }
        }
        self.push(value, Op::AddMany(xs.to_vec()))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).iter().map(|x| sigmoid(*x)).collect();
        self.push(value, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).iter().map(|x| softplus(*x)).collect();
        self.push(value, Op::Softplus(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).iter().map(|x| x.ln()).collect();
        self.push(value, Op::Ln(a))
    }

    pub fn clamp_min(&mut self, a: NodeId, min: f64) -> NodeId {
        let value = self.value(a).iter().map(|x| x.max(min)).collect();
        self.push(value, Op::ClampMin(a, min))
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        let mut value = Vec::new();
        for &x in xs {
            value.extend_from_slice(self.value(x));
        }
        self.push(value, Op::Concat(xs.to_vec()))
    }

    /// Element-wise max over timesteps; ties go to the earliest timestep.
    pub fn max_pool(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let dim = self.dim(xs[0]);
        let mut value = self.value(xs[0]).to_vec();
        let mut argmax = vec![0usize; dim];
        for (t, &x) in xs.iter().enumerate().skip(1) {
            assert_eq!(self.dim(x), dim, "max_pool dims");
            for (j, v) in self.value(x).iter().enumerate() {
                if *v > value[j] {
                    value[j] = *v;
                    argmax[j] = t;
                } else if *v == value[j] {
                    self.pool_ties += 1;
                }
            }
        }
        self.push(value, Op::MaxPool { xs: xs.to_vec(), argmax })
    }

    /// Element-wise mean over timesteps.
    pub fn mean_pool(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let dim = self.dim(xs[0]);
        let mut value = vec![0.0; dim];
        for &x in xs {
            assert_eq!(self.dim(x), dim, "mean_pool dims");
            for (v, s) in value.iter_mut().zip(self.value(x)) {
                *v += s;
            }
        }
        let inv = 1.0 / xs.len() as f64;
        for v in value.iter_mut() {
            *v *= inv;
        }
        self.push(value, Op::MeanPool(xs.to_vec()))
    }

    /// Inner product as a length-1 node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.dim(a), self.dim(b), "dot dims");
        let s: f64 = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        self.push(vec![s], Op::Dot(a, b))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let xs = self.value(a);
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let value = exps.into_iter().map(|e| e / sum).collect();
        self.push(value, Op::Softmax(a))
    }

    /// Select one coordinate as a length-1 node.
    pub fn pick(&mut self, x: NodeId, index: usize) -> NodeId {
        assert!(index < self.dim(x), "pick index in range");
        let value = vec![self.value(x)[index]];
        self.push(value, Op::Pick { x, index })
    }

    /// Inverted dropout: zero each coordinate with probability `rate`,
    /// scale survivors by `1/(1-rate)`.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut impl Rng) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout rate in [0,1)");
        if rate == 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.dim(x))
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let value = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.push(value, Op::Dropout { x, mask })
    }

    /// Reverse sweep from a scalar loss node. Gradients accumulate over all
    /// uses of each trainable tensor; non-trainable tensors get none.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.dim(loss) != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got dimension {}",
                self.dim(loss)
            )));
        }
        let mut grads = Gradients::new(self.store);
        let mut adjoint: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoint[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let dy = match adjoint[i].take() {
                Some(d) => d,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Embed { table, row } => {
                    if self.store.get(*table).trainable {
                        grads.accum(self.store, *table).row_mut(*row)
                            .iter_mut()
                            .zip(&dy)
                            .for_each(|(g, d)| *g += d);
                    }
                }
                Op::Affine { w, x, b } => {
                    let wm = self.store.value(*w);
                    wm.matvec_t_add(&dy, bump(&mut adjoint, x.0, wm.cols()));
                    if self.store.get(*w).trainable {
                        grads.accum(self.store, *w).add_outer(&dy, &self.nodes[x.0].value);
                    }
                    if let Some(b) = b {
                        if self.store.get(*b).trainable {
                            grads.accum(self.store, *b).add_slice(&dy);
                        }
                    }
                }
                Op::Affine2 { w1, x1, w2, x2, b } => {
                    let m1 = self.store.value(*w1);
                    m1.matvec_t_add(&dy, bump(&mut adjoint, x1.0, m1.cols()));
                    let m2 = self.store.value(*w2);
                    m2.matvec_t_add(&dy, bump(&mut adjoint, x2.0, m2.cols()));
                    if self.store.get(*w1).trainable {
                        grads.accum(self.store, *w1).add_outer(&dy, &self.nodes[x1.0].value);
                    }
                    if self.store.get(*w2).trainable {
                        grads.accum(self.store, *w2).add_outer(&dy, &self.nodes[x2.0].value);
                    }
                    if self.store.get(*b).trainable {
                        grads.accum(self.store, *b).add_slice(&dy);
                    }
                }
                Op::Add(a, b) => {
                    add_into(bump(&mut adjoint, a.0, dy.len()), &dy, 1.0);
                    add_into(bump(&mut adjoint, b.0, dy.len()), &dy, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(bump(&mut adjoint, a.0, dy.len()), &dy, 1.0);
                    add_into(bump(&mut adjoint, b.0, dy.len()), &dy, -1.0);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let da = bump(&mut adjoint, a.0, dy.len());
                    for ((g, d), v) in da.iter_mut().zip(&dy).zip(bv) {
                        *g += d * v;
                    }
                    let db = bump(&mut adjoint, b.0, dy.len());
                    for ((g, d), v) in db.iter_mut().zip(&dy).zip(av) {
                        *g += d * v;
                    }
                }
                Op::Neg(a) => add_into(bump(&mut adjoint, a.0, dy.len()), &dy, -1.0),
                Op::Scale(a, c) => add_into(bump(&mut adjoint, a.0, dy.len()), &dy, *c),
                Op::AddMany(xs) => {
                    for &x in xs {
                        add_into(bump(&mut adjoint, x.0, dy.len()), &dy, 1.0);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let da = bump(&mut adjoint, a.0, dy.len());
                    for ((g, d), v) in da.iter_mut().zip(&dy).zip(y) {
                        *g += d * (1.0 - v * v);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let da = bump(&mut adjoint, a.0, dy.len());
                    for ((g, d), v) in da.iter_mut().zip(&dy).zip(y) {
                        *g += d * v * (1.0 - v);
                    }
                }
                Op::Softplus(a) => {
                    let xv = &self.nodes[a.0].value;
                    let da = bump(&mut adjoint, a.0, dy.len());
                    for ((g, d), v) in da.iter_mut().zip(&dy).zip(xv) {
                        *g += d * sigmoid(*v);
                    }
                }
                Op::Ln(a) => {
                    let xv = &self.nodes[a.0].value;
                    let da = bump(&mut adjoint, a.0, dy.len());
                    for ((g, d), v) in da.iter_mut().zip(&dy).zip(xv) {
                        *g += d / v;
                    }
                }
                Op::ClampMin(a, min) => {
                    let xv = &self.nodes[a.0].value;
                    let da = bump(&mut adjoint, a.0, dy.len());
                    for ((g, d), v) in da.iter_mut().zip(&dy).zip(xv) {
                        if *v > *min {
                            *g += d;
                        }
                    }
                }
                Op::Concat(xs) => {
                    let mut offset = 0;
                    for &x in xs {
                        let d = self.nodes[x.0].value.len();
                        let dx = bump(&mut adjoint, x.0, d);
                        for (g, v) in dx.iter_mut().zip(&dy[offset..offset + d]) {
                            *g += v;
                        }
                        offset += d;
                    }
                }
                Op::MaxPool { xs, argmax } => {
                    for (j, (&t, d)) in argmax.iter().zip(&dy).enumerate() {
                        bump(&mut adjoint, xs[t].0, dy.len())[j] += d;
                    }
                }
                Op::MeanPool(xs) => {
                    let inv = 1.0 / xs.len() as f64;
                    for &x in xs {
                        add_into(bump(&mut adjoint, x.0, dy.len()), &dy, inv);
                    }
                }
                Op::Dot(a, b) => {
                    let d = dy[0];
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    add_into(bump(&mut adjoint, a.0, av.len()), bv, d);
                    add_into(bump(&mut adjoint, b.0, bv.len()), av, d);
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let inner: f64 = p.iter().zip(&dy).map(|(pi, di)| pi * di).sum();
                    let da = bump(&mut adjoint, a.0, dy.len());
                    for ((g, d), pi) in da.iter_mut().zip(&dy).zip(p) {
                        *g += pi * (d - inner);
                    }
                }
                Op::Pick { x, index } => {
                    bump(&mut adjoint, x.0, self.nodes[x.0].value.len())[*index] += dy[0];
                }
                Op::Dropout { x, mask } => {
                    let dx = bump(&mut adjoint, x.0, dy.len());
                    for ((g, d), m) in dx.iter_mut().zip(&dy).zip(mask) {
                        *g += d * m;
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn bump<'a>(adjoint: &'a mut [Option<Vec<f64>>], idx: usize, dim: usize) -> &'a mut Vec<f64> {
    adjoint[idx].get_or_insert_with(|| vec![0.0; dim])
}

fn add_into(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * factor;
    }
}
