//! Shared per-point MLP with max pooling, and its backward pass.
//!
//! A [`PointNet`] maps every input row through the same stack of
//! rectified dense layers, max-pools the last point feature over rows, and
//! feeds a head. In pooled mode the head sees the global feature once and
//! emits one output vector. In segmentation mode the head runs per row on
//! `[point feature, global feature]` and emits one logit per row.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// He-uniform weights, zero bias.
    pub fn random(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        let mut d = Self::zeros(inputs, outputs);
        for w in &mut d.weight {
            *w = rng.random_range(-bound..bound);
        }
        d
    }

    fn forward(&self, input: &[f64], rows: usize, relu: bool) -> Vec<f64> {
        let mut out = vec![0.0; rows * self.outputs];
        for r in 0..rows {
            let x = &input[r * self.inputs..(r + 1) * self.inputs];
            for o in 0..self.outputs {
                let w = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                let mut acc = self.bias[o];
                for (a, b) in w.iter().zip(x) {
                    acc += a * b;
                }
                out[r * self.outputs + o] = if relu { acc.max(0.0) } else { acc };
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad`; returns `∂L/∂input`.
    fn backward(&self, input: &[f64], rows: usize, d_out: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut d_in = vec![0.0; rows * self.inputs];
        for r in 0..rows {
            let x = &input[r * self.inputs..(r + 1) * self.inputs];
            let dx = &mut d_in[r * self.inputs..(r + 1) * self.inputs];
            for o in 0..self.outputs {
                let g = d_out[r * self.outputs + o];
                if g == 0.0 {
                    continue;
                }
                grad.bias[o] += g;
                let w = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                let gw = &mut grad.weight[o * self.inputs..(o + 1) * self.inputs];
                for k in 0..self.inputs {
                    gw[k] += g * x[k];
                    dx[k] += g * w[k];
                }
            }
        }
        d_in
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointNet {
    pub point: Vec<Dense>,
    pub head: Vec<Dense>,
    pub segmentation: bool,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    rows: usize,
    /// `point_acts[0]` is the input; `point_acts[l + 1]` the output of layer `l`.
    point_acts: Vec<Vec<f64>>,
    argmax: Vec<usize>,
    head_rows: usize,
    /// `head_acts[0]` is the head input; the last entry is the raw output.
    head_acts: Vec<Vec<f64>>,
}

impl Trace {
    /// Head output: `head_rows × out` row-major.
    pub fn output(&self) -> &[f64] {
        self.head_acts.last().expect("head has layers")
    }

    pub fn global_feature(&self) -> Vec<f64> {
        let last = self.point_acts.last().expect("input present");
        let w = last.len() / self.rows;
        self.argmax
            .iter()
            .enumerate()
            .map(|(j, &r)| last[r * w + j])
            .collect()
    }
}

impl PointNet {
    /// `input → point_widths…` per row, then `head_widths… → outputs`.
    pub fn random(
        input: usize,
        point_widths: &[usize],
        head_widths: &[usize],
        outputs: usize,
        segmentation: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self::build(
            input,
            point_widths,
            head_widths,
            outputs,
            segmentation,
            |i, o| Dense::random(i, o, rng),
        )
    }

    pub fn zeros(
        input: usize,
        point_widths: &[usize],
        head_widths: &[usize],
        outputs: usize,
        segmentation: bool,
    ) -> Self {
        Self::build(
            input,
            point_widths,
            head_widths,
            outputs,
            segmentation,
            Dense::zeros,
        )
    }

    fn build(
        input: usize,
        point_widths: &[usize],
        head_widths: &[usize],
        outputs: usize,
        segmentation: bool,
        mut make: impl FnMut(usize, usize) -> Dense,
    ) -> Self {
        assert!(
            !point_widths.is_empty(),
            "point MLP needs at least one layer"
        );
        let mut point = Vec::new();
        let mut prev = input;
        for &w in point_widths {
            point.push(make(prev, w));
            prev = w;
        }
        let mut prev = if segmentation { 2 * prev } else { prev };
        let mut head = Vec::new();
        for &w in head_widths.iter().chain(std::iter::once(&outputs)) {
            head.push(make(prev, w));
            prev = w;
        }
        Self {
            point,
            head,
            segmentation,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |d: &Dense| Dense::zeros(d.inputs, d.outputs);
        Self {
            point: self.point.iter().map(z).collect(),
            head: self.head.iter().map(z).collect(),
            segmentation: self.segmentation,
        }
    }

    pub fn input_width(&self) -> usize {
        self.point[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.head.last().expect("head has layers").outputs
    }

    pub fn layers(&self) -> impl Iterator<Item = (String, &Dense)> {
        let p = self
            .point
            .iter()
            .enumerate()
            .map(|(i, d)| (format!("point.{i}"), d));
        let h = self
            .head
            .iter()
            .enumerate()
            .map(|(i, d)| (format!("head.{i}"), d));
        p.chain(h)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.point.iter_mut().chain(self.head.iter_mut())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers()
            .map(|(_, d)| d.weight.len() + d.bias.len())
            .sum()
    }

    /// `input` is `rows × input_width` row-major, `rows ≥ 1`.
    pub fn forward(&self, input: &[f64], rows: usize) -> Trace {
        assert!(rows >= 1, "empty point set");
        assert_eq!(input.len(), rows * self.input_width());
        let mut point_acts = vec![input.to_vec()];
        for layer in &self.point {
            let next = layer.forward(point_acts.last().unwrap(), rows, true);
            point_acts.push(next);
        }
        let feat = point_acts.last().unwrap();
        let width = self.point.last().unwrap().outputs;
        // Earliest row wins ties so the gradient route is deterministic.
        let mut argmax = vec![0usize; width];
        for r in 1..rows {
            for j in 0..width {
                if feat[r * width + j] > feat[argmax[j] * width + j] {
                    argmax[j] = r;
                }
            }
        }
        let global: Vec<f64> = (0..width).map(|j| feat[argmax[j] * width + j]).collect();

        let (head_in, head_rows) = if self.segmentation {
            let mut h = Vec::with_capacity(rows * 2 * width);
            for r in 0..rows {
                h.extend_from_slice(&feat[r * width..(r + 1) * width]);
                h.extend_from_slice(&global);
            }
            (h, rows)
        } else {
            (global, 1)
        };
        let mut head_acts = vec![head_in];
        let n = self.head.len();
        for (i, layer) in self.head.iter().enumerate() {
            let next = layer.forward(head_acts.last().unwrap(), head_rows, i + 1 < n);
            head_acts.push(next);
        }
        Trace {
            rows,
            point_acts,
            argmax,
            head_rows,
            head_acts,
        }
    }

    /// Backpropagates `d_output` (same shape as [`Trace::output`]) and adds
    /// the parameter gradients into `grad`.
    pub fn backward(&self, trace: &Trace, d_output: &[f64], grad: &mut PointNet) {
        let n = self.head.len();
        let mut d = d_output.to_vec();
        for i in (0..n).rev() {
            if i + 1 < n {
                for (g, a) in d.iter_mut().zip(&trace.head_acts[i + 1]) {
                    if *a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            d = self.head[i].backward(&trace.head_acts[i], trace.head_rows, &d, &mut grad.head[i]);
        }

        let rows = trace.rows;
        let width = self.point.last().unwrap().outputs;
        let mut d_feat = vec![0.0; rows * width];
        let mut d_global = vec![0.0; width];
        if self.segmentation {
            for r in 0..rows {
                let src = &d[r * 2 * width..(r + 1) * 2 * width];
                for j in 0..width {
                    d_feat[r * width + j] += src[j];
                    d_global[j] += src[width + j];
                }
            }
        } else {
            d_global.copy_from_slice(&d);
        }
        for j in 0..width {
            d_feat[trace.argmax[j] * width + j] += d_global[j];
        }

        let mut d = d_feat;
        for l in (0..self.point.len()).rev() {
            for (g, a) in d.iter_mut().zip(&trace.point_acts[l + 1]) {
                if *a <= 0.0 {
                    *g = 0.0;
                }
            }
            d = self.point[l].backward(&trace.point_acts[l], rows, &d, &mut grad.point[l]);
        }
    }

    /// `self += scale · other`, layer by layer.
    pub fn add_scaled(&mut self, other: &PointNet, scale: f64) {
        for (a, b) in self.layers_mut().zip(other.layers().map(|(_, d)| d)) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }
}

/// Adam state for one [`PointNet`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: PointNet,
    v: PointNet,
}

impl Adam {
    pub fn new(net: &PointNet, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: net.zeros_like(),
            v: net.zeros_like(),
        }
    }

    pub fn step(&mut self, net: &mut PointNet, grad: &PointNet) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let lr = self.learning_rate;
        let eps = self.epsilon;
        let layers = net
            .layers_mut()
            .zip(grad.layers().map(|(_, d)| d))
            .zip(self.m.layers_mut())
            .zip(self.v.layers_mut());
        for (((p, g), m), v) in layers {
            let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
                for i in 0..p.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            };
            update(&mut p.weight, &g.weight, &mut m.weight, &mut v.weight);
            update(&mut p.bias, &g.bias, &mut m.bias, &mut v.bias);
        }
    }
}
