//! Dense row-major matrices and the named parameter store that holds every
//! trainable tensor of a model.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};

/// Row-major `rows x cols` matrix of f64. Vectors are `1 x n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    /// Entries drawn i.i.d. uniform from `[-bound, bound]`.
    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Matrix { rows, cols, data }
    }

    /// Glorot-style uniform init: `+-sqrt(6 / (fan_in + fan_out))` where
    /// fan_in is the column count and fan_out the row count.
    pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Self::uniform(rows, cols, bound, rng)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `out = self * x` (matrix-vector product).
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            let row = self.row(i);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            *o = acc;
        }
    }

    /// `out += self^T * y` (transposed matrix-vector product, accumulating).
    pub fn matvec_t_add(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            let row = self.row(i);
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * yi;
            }
        }
    }

    /// `self += y * x^T` (outer-product accumulation).
    pub fn add_outer(&mut self, y: &[f64], x: &[f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            let row = self.row_mut(i);
            for (r, &xj) in row.iter_mut().zip(x) {
                *r += yi * xj;
            }
        }
    }

    pub fn add_slice(&mut self, other: &[f64]) {
        debug_assert_eq!(other.len(), self.data.len());
        for (a, b) in self.data.iter_mut().zip(other) {
            *a += b;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }
}

/// Handle to one tensor inside a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamTensor {
    pub name: String,
    pub value: Matrix,
    pub trainable: bool,
}

/// All tensors of a model, addressed by stable ids and unique names.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    tensors: Vec<ParamTensor>,
    by_name: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.by_name.insert(name.clone(), id);
        self.tensors.push(ParamTensor {
            name,
            value,
            trainable,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.by_name(name)
            .ok_or_else(|| Error::Data(format!("missing parameter tensor `{name}`")))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }
}

/// Per-tensor gradient accumulators aligned with a [`ParameterStore`].
/// Non-trainable tensors never get a slot.
#[derive(Clone, Debug)]
pub struct Gradients {
    slots: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn new(store: &ParameterStore) -> Self {
        Gradients {
            slots: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.slots[id.0].as_ref()
    }

    pub(crate) fn accum(&mut self, store: &ParameterStore, id: ParamId) -> &mut Matrix {
        let t = store.get(id);
        self.slots[id.0].get_or_insert_with(|| Matrix::zeros(t.value.rows(), t.value.cols()))
    }

    /// Global L2 norm over all accumulated gradients.
    pub fn global_norm(&self) -> f64 {
        let mut sq = 0.0;
        for slot in self.slots.iter().flatten() {
            for v in slot.as_slice() {
                sq += v * v;
            }
        }
        sq.sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for slot in self.slots.iter_mut().flatten() {
            for v in slot.as_mut_slice() {
                *v *= factor;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|m| (ParamId(i), m)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_transpose() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = [1.0, 0.0, -1.0];
        let mut y = [0.0; 2];
        a.matvec(&x, &mut y);
        assert_eq!(y, [-2.0, -2.0]);

        let mut xt = [0.0; 3];
        a.matvec_t_add(&[1.0, 1.0], &mut xt);
        assert_eq!(xt, [5.0, 7.0, 9.0]);
    }

    #[test]
    fn outer_accumulates() {
        let mut a = Matrix::zeros(2, 2);
        a.add_outer(&[1.0, 2.0], &[3.0, 4.0]);
        a.add_outer(&[1.0, 0.0], &[1.0, 1.0]);
        assert_eq!(a.as_slice(), &[4.0, 5.0, 6.0, 8.0]);
    }

    #[test]
    fn store_assigns_stable_ids() {
        let mut s = ParameterStore::new();
        let a = s.add("a", Matrix::zeros(1, 1), true);
        let b = s.add("b", Matrix::zeros(2, 2), false);
        assert_eq!(s.by_name("a"), Some(a));
        assert_eq!(s.by_name("b"), Some(b));
        assert!(s.by_name("c").is_none());
        assert!(s.require("c").is_err());
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn store_rejects_duplicate_names() {
        let mut s = ParameterStore::new();
        s.add("a", Matrix::zeros(1, 1), true);
        s.add("a", Matrix::zeros(1, 1), true);
    }
}
