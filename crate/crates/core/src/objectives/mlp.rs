//! Fully connected ReLU network with softmax cross-entropy, on a flat parameter vector.

use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;

use super::idx::Dataset;
use super::ClientObjective;
use crate::error::{check_dim, Error, Result};
use crate::linalg::ParamVector;
use crate::rng::RngStream;

/// Rows per forward/backward block when sweeping many samples.
const CHUNK: usize = 1024;

/// Layer widths `[input, hidden..., classes]`.
///
/// Parameter layout, layer by layer: the `out × in` weight matrix in
/// row-major order followed by the `out` biases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    widths: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct LayerSlots {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    bias: usize,
}

impl Mlp {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(
                "hidden",
                format!("need at least input and output widths, all positive: {widths:?}"),
            ));
        }
        Ok(Self { widths })
    }

    /// 784 → 256 → 128 → 10.
    pub fn mnist_default() -> Self {
        Self {
            widths: vec![784, 256, 128, 10],
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn layers(&self) -> Vec<LayerSlots> {
        let mut off = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let slots = LayerSlots {
                    fan_in: w[0],
                    fan_out: w[1],
                    weights: off,
                    bias: off + w[0] * w[1],
                };
                off += w[0] * w[1] + w[1];
                slots
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Parameter count of each layer (weights plus biases), in layout order.
    pub fn layer_param_counts(&self) -> Vec<usize> {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).collect()
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init(&self, rng: &mut RngStream) -> ParamVector {
        let mut x = vec![0.0; self.param_count()];
        for l in self.layers() {
            let bound = 1.0 / (l.fan_in as f64).sqrt();
            for w in &mut x[l.weights..l.bias] {
                *w = rng.random_range(-bound..=bound);
            }
        }
        x
    }

    fn weights<'a>(&self, x: &'a [f64], l: &LayerSlots) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((l.fan_out, l.fan_in), &x[l.weights..l.bias]).unwrap()
    }

    fn bias<'a>(&self, x: &'a [f64], l: &LayerSlots) -> ArrayView1<'a, f64> {
        ArrayView1::from(&x[l.bias..l.bias + l.fan_out])
    }

    /// Pre-activations of every layer for the rows of `input`.
    fn forward(&self, x: &[f64], input: Array2<f64>) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let layers = self.layers();
        let mut acts = vec![input];
        let mut pre = Vec::with_capacity(layers.len());
        for (j, l) in layers.iter().enumerate() {
            let w = self.weights(x, l);
            let mut z = acts[j].dot(&w.t());
            z += &self.bias(x, l);
            if j + 1 < layers.len() {
                acts.push(z.mapv(|v| v.max(0.0)));
            }
            pre.push(z);
        }
        (acts, pre)
    }

    fn input(&self, data: &Dataset, rows: &[usize]) -> Array2<f64> {
        let mut m = Array2::zeros((rows.len(), self.input_width()));
        for (mut row, &i) in m.axis_iter_mut(Axis(0)).zip(rows) {
            data.image_into(i, row.as_slice_mut().unwrap());
        }
        m
    }

    fn check(&self, x: &[f64], data: &Dataset, rows: &[usize]) -> Result<()> {
        check_dim(self.param_count(), x.len())?;
        check_dim(self.input_width(), data.width())?;
        if rows.is_empty() {
            return Err(Error::invalid("batch", "must be nonempty"));
        }
        Ok(())
    }

    /// Summed cross-entropy over `rows` and, when `grad` is given, the
    /// summed gradient added into it.
    fn accumulate(
        &self,
        x: &[f64],
        data: &Dataset,
        rows: &[usize],
        grad: Option<&mut [f64]>,
    ) -> f64 {
        let (acts, pre) = self.forward(x, self.input(data, rows));
        let logits = pre.last().unwrap();
        let mut loss = 0.0;
        let mut delta = Array2::zeros(logits.raw_dim());
        for (r, (z, mut dz)) in logits
            .axis_iter(Axis(0))
            .zip(delta.axis_iter_mut(Axis(0)))
            .enumerate()
        {
            let y = data.label(rows[r]);
            let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let sum: f64 = z.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            loss += lse - z[y];
            for (k, d) in dz.iter_mut().enumerate() {
                *d = (z[k] - lse).exp();
            }
            dz[y] -= 1.0;
        }
        let Some(grad) = grad else {
            return loss;
        };
        let layers = self.layers();
        for j in (0..layers.len()).rev() {
            let l = &layers[j];
            let (gw, gb) = grad[l.weights..l.bias + l.fan_out].split_at_mut(l.fan_in * l.fan_out);
            let mut gw = ArrayViewMut2::from_shape((l.fan_out, l.fan_in), gw).unwrap();
            general_mat_mul(1.0, &delta.t(), &acts[j], 1.0, &mut gw);
            let mut gb = ArrayViewMut1::from(gb);
            gb += &delta.sum_axis(Axis(0));
            if j > 0 {
                let mut back = delta.dot(&self.weights(x, l));
                back.zip_mut_with(&pre[j - 1], |d, &z| {
                    if z <= 0.0 {
                        *d = 0.0
                    }
                });
                delta = back;
            }
        }
        loss
    }

    /// Mean cross-entropy over `rows` and its exact gradient.
    pub fn loss_and_gradient(
        &self,
        x: &[f64],
        data: &Dataset,
        rows: &[usize],
    ) -> Result<(f64, ParamVector)> {
        self.check(x, data, rows)?;
        let mut grad = vec![0.0; x.len()];
        let mut loss = 0.0;
        for chunk in rows.chunks(CHUNK) {
            loss += self.accumulate(x, data, chunk, Some(&mut grad));
        }
        let inv = 1.0 / rows.len() as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        Ok((loss * inv, grad))
    }

    pub fn loss(&self, x: &[f64], data: &Dataset, rows: &[usize]) -> Result<f64> {
        self.check(x, data, rows)?;
        let total: f64 = rows
            .chunks(CHUNK)
            .map(|c| self.accumulate(x, data, c, None))
            .sum();
        Ok(total / rows.len() as f64)
    }

    /// Predicted class per row; ties go to the lowest class index.
    pub fn predict(&self, x: &[f64], data: &Dataset, rows: &[usize]) -> Result<Vec<usize>> {
        self.check(x, data, rows)?;
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(CHUNK) {
            let (_, pre) = self.forward(x, self.input(data, chunk));
            for z in pre.last().unwrap().axis_iter(Axis(0)) {
                let mut best = 0;
                for k in 1..z.len() {
                    if z[k] > z[best] {
                        best = k;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }

    /// Fraction of `data` classified correctly.
    pub fn accuracy(&self, x: &[f64], data: &Dataset) -> Result<f64> {
        let rows: Vec<usize> = (0..data.len()).collect();
        let pred = self.predict(x, data, &rows)?;
        let hits = pred
            .iter()
            .zip(&rows)
            .filter(|(p, &i)| **p == data.label(i))
            .count();
        Ok(hits as f64 / rows.len() as f64)
    }
}

/// A client holding a subset of a shared dataset.
#[derive(Debug, Clone)]
pub struct MlpClient {
    mlp: Arc<Mlp>,
    data: Arc<Dataset>,
    indices: Vec<usize>,
}

impl MlpClient {
    pub fn new(mlp: Arc<Mlp>, data: Arc<Dataset>, indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("indices", "client holds no samples"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= data.len()) {
            return Err(Error::invalid("indices", format!("sample {bad} out of range")));
        }
        check_dim(mlp.input_width(), data.width())?;
        Ok(Self { mlp, data, indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    /// Loss and gradient on the given positions into the local index list.
    pub fn batch_loss_and_gradient(&self, x: &[f64], batch: &[usize]) -> Result<(f64, ParamVector)> {
        let rows: Vec<usize> = batch.iter().map(|&b| self.indices[b]).collect();
        self.mlp.loss_and_gradient(x, &self.data, &rows)
    }
}

impl ClientObjective for MlpClient {
    fn dim(&self) -> usize {
        self.mlp.param_count()
    }

    fn loss(&self, x: &[f64]) -> Result<f64> {
        self.mlp.loss(x, &self.data, &self.indices)
    }

    fn full_gradient(&self, x: &[f64]) -> Result<ParamVector> {
        Ok(self.mlp.loss_and_gradient(x, &self.data, &self.indices)?.1)
    }

    /// Mini-batch drawn with replacement from the local samples.
    fn stochastic_gradient(
        &self,
        x: &[f64],
        batch_size: usize,
        rng: &mut RngStream,
    ) -> Result<ParamVector> {
        if batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        let n = self.indices.len();
        let batch: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..n)).collect();
        Ok(self.batch_loss_and_gradient(x, &batch)?.1)
    }

    fn sample_count(&self) -> Option<usize> {
        Some(self.indices.len())
    }

    fn subset_loss_and_gradient(&self, x: &[f64], local: &[usize]) -> Result<(f64, ParamVector)> {
        self.batch_loss_and_gradient(x, local)
    }
}
