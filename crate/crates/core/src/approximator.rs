//! Curve fitting of `d_t^±(s)` and `k_t^±(s)` over continuous factor states.
//!
//! Two methods are available: a small feed-forward network trained by
//! full-batch Adam, and inverse-distance weighting over the `k` nearest grid
//! points, which reproduces the targets exactly at the grid points. Inputs
//! are standardized with the training mean and standard deviation.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MmvError, Result};
use crate::seed;

/// Output clamp for targets that must lie in `(0, 1]`.
pub const D_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FeedforwardNet,
    InverseDistance,
}

/// How outputs are produced and bounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// FIO values: logistic output layer, evaluations clamped to `[1e-6, 1]`.
    Fio,
    /// Allocation vectors: identity output layer, unbounded.
    Allocation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// `None` picks inverse-distance weighting for one-dimensional states
    /// and the network otherwise.
    pub method: Option<Method>,
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub validation_split: f64,
    pub seed: u64,
    /// Neighbours used by inverse-distance weighting.
    pub neighbors: usize,
    /// Distance exponent of inverse-distance weighting.
    pub power: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            method: None,
            widths: vec![8, 16, 8],
            epochs: 5000,
            learning_rate: 0.01,
            validation_split: 0.2,
            seed: 0,
            neighbors: 8,
            power: 2.0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(MmvError::Fit("layer widths must be positive".into()));
        }
        if !(self.validation_split > 0.0 && self.validation_split <= 0.5) {
            return Err(MmvError::Fit("validation split must lie in (0, 0.5]".into()));
        }
        if !(self.learning_rate > 0.0) || self.neighbors == 0 || !(self.power > 0.0) {
            return Err(MmvError::Fit(
                "learning rate, neighbour count and power must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn method_for(&self, input_dim: usize) -> Method {
        self.method.unwrap_or(if input_dim == 1 {
            Method::InverseDistance
        } else {
            Method::FeedforwardNet
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layer {
    #[serde(with = "crate::linalg::serde_rows")]
    weights: DMatrix<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Params {
    Net {
        layers: Vec<Layer>,
    },
    InverseDistance {
        /// Standardized inputs.
        points: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
        neighbors: usize,
        power: f64,
    },
}

/// A fitted map `R^{N_s} → R^m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedFunction {
    pub method: Method,
    pub target: TargetKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub train_error: f64,
    pub validation_error: f64,
    input_mean: Vec<f64>,
    input_scale: Vec<f64>,
    /// Per-dimension range of the training inputs, for extrapolation flags.
    input_min: Vec<f64>,
    input_max: Vec<f64>,
    params: Params,
}

/// An evaluation together with a flag telling whether the input left the
/// bounding box of the training points.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub value: Vec<f64>,
    pub extrapolated: bool,
}

fn standardize(points: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = points.len() as f64;
    let dim = points[0].len();
    let mut mean = vec![0.0; dim];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; dim];
    for p in points {
        for ((s, v), m) in scale.iter_mut().zip(p).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    for s in scale.iter_mut() {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    (mean, scale)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mse(pred: &DMatrix<f64>, target: &DMatrix<f64>) -> f64 {
    (pred - target).iter().map(|e| e * e).sum::<f64>() / pred.len().max(1) as f64
}

struct Net<'a> {
    layers: &'a [Layer],
    target: TargetKind,
}

impl Net<'_> {
    /// Forward pass on a batch (one row per input). Returns the
    /// pre-activations and activations of every layer.
    fn forward(&self, x: &DMatrix<f64>) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let mut zs = Vec::with_capacity(self.layers.len());
        let mut acts = vec![x.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = acts.last().unwrap() * layer.weights.transpose();
            for mut row in z.row_iter_mut() {
                for (v, b) in row.iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let last = i + 1 == self.layers.len();
            let a = if !last {
                z.map(|v| v.max(0.0))
            } else {
                match self.target {
                    TargetKind::Fio => z.map(sigmoid),
                    TargetKind::Allocation => z.clone(),
                }
            };
            zs.push(z);
            acts.push(a);
        }
        (zs, acts)
    }

    /// Gradient of the mean squared error with respect to every layer.
    fn gradient(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> (f64, Vec<(DMatrix<f64>, Vec<f64>)>) {
        let (zs, acts) = self.forward(x);
        let out = acts.last().unwrap();
        let count = out.len() as f64;
        let loss = mse(out, y);
        let mut delta = (out - y) * (2.0 / count);
        if self.target == TargetKind::Fio {
            delta.zip_apply(out, |d, a| *d *= a * (1.0 - a));
        }
        let mut grads = vec![(DMatrix::zeros(0, 0), Vec::new()); self.layers.len()];
        for i in (0..self.layers.len()).rev() {
            let gw = delta.transpose() * &acts[i];
            let gb: Vec<f64> = (0..delta.ncols()).map(|j| delta.column(j).sum()).collect();
            if i > 0 {
                let mut next = &delta * &self.layers[i].weights;
                next.zip_apply(&zs[i - 1], |d, z| {
                    if z <= 0.0 {
                        *d = 0.0
                    }
                });
                delta = next;
            }
            grads[i] = (gw, gb);
        }
        (loss, grads)
    }
}

struct Adam {
    m: Vec<(DMatrix<f64>, Vec<f64>)>,
    v: Vec<(DMatrix<f64>, Vec<f64>)>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(layers: &[Layer], lr: f64) -> Self {
        let zeros: Vec<_> = layers
            .iter()
            .map(|l| (l.weights.map(|_| 0.0), vec![0.0; l.bias.len()]))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr,
        }
    }

    fn step(&mut self, layers: &mut [Layer], grads: &[(DMatrix<f64>, Vec<f64>)]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let lr = self.lr;
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        };
        for (i, layer) in layers.iter_mut().enumerate() {
            let (gw, gb) = &grads[i];
            let (mw, mb) = &mut self.m[i];
            let (vw, vb) = &mut self.v[i];
            for j in 0..gw.len() {
                update(&mut layer.weights[j], gw[j], &mut mw[j], &mut vw[j]);
            }
            for j in 0..gb.len() {
                update(&mut layer.bias[j], gb[j], &mut mb[j], &mut vb[j]);
            }
        }
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
}

fn idw(points: &[Vec<f64>], targets: &[Vec<f64>], neighbors: usize, power: f64, x: &[f64]) -> Vec<f64> {
    let mut dist: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (p.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), i))
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    if dist[0].0 == 0.0 {
        return targets[dist[0].1].clone();
    }
    let m = targets[0].len();
    let mut out = vec![0.0; m];
    let mut total = 0.0;
    for &(d2, i) in dist.iter().take(neighbors) {
        let w = d2.sqrt().powf(-power);
        total += w;
        for (o, t) in out.iter_mut().zip(&targets[i]) {
            *o += w * t;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    out
}

/// Fits `targets` (one vector per point) as a function of `points`.
pub fn fit(
    points: &[Vec<f64>],
    targets: &[Vec<f64>],
    target: TargetKind,
    config: &FitConfig,
) -> Result<FittedFunction> {
    config.validate()?;
    if points.len() < 2 || points.len() != targets.len() {
        return Err(MmvError::Fit(
            "fitting needs at least two points with one target each".into(),
        ));
    }
    let input_dim = points[0].len();
    let output_dim = targets[0].len();
    if input_dim == 0
        || output_dim == 0
        || points.iter().any(|p| p.len() != input_dim || p.iter().any(|v| !v.is_finite()))
        || targets.iter().any(|t| t.len() != output_dim || t.iter().any(|v| !v.is_finite()))
    {
        return Err(MmvError::Fit("inconsistent or non-finite fitting data".into()));
    }
    let (input_mean, input_scale) = standardize(points);
    let scaled: Vec<Vec<f64>> = points
        .iter()
        .map(|p| {
            p.iter()
                .zip(&input_mean)
                .zip(&input_scale)
                .map(|((v, m), s)| (v - m) / s)
                .collect()
        })
        .collect();
    let input_min = (0..input_dim)
        .map(|j| points.iter().map(|p| p[j]).fold(f64::INFINITY, f64::min))
        .collect();
    let input_max = (0..input_dim)
        .map(|j| points.iter().map(|p| p[j]).fold(f64::NEG_INFINITY, f64::max))
        .collect();

    // Seeded train/validation split.
    let n = points.len();
    let n_val = ((n as f64 * config.validation_split).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::child_seed(config.seed, &[seed::tag::PANEL, n as u64])));
    let (val_idx, train_idx) = order.split_at(n_val);
    let pick = |idx: &[usize], v: &[Vec<f64>]| idx.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
    let (x_train, y_train) = (pick(train_idx, &scaled), pick(train_idx, targets));
    let (x_val, y_val) = (pick(val_idx, &scaled), pick(val_idx, targets));

    let method = config.method_for(input_dim);
    let (params, train_error, validation_error) = match method {
        Method::InverseDistance => {
            let eval_set = |xs: &[Vec<f64>], ys: &[Vec<f64>]| {
                let pred: Vec<Vec<f64>> = xs
                    .iter()
                    .map(|x| idw(&x_train, &y_train, config.neighbors, config.power, x))
                    .collect();
                mse(&to_matrix(&pred), &to_matrix(ys))
            };
            let val = eval_set(&x_val, &y_val);
            let params = Params::InverseDistance {
                points: scaled,
                targets: targets.to_vec(),
                neighbors: config.neighbors,
                power: config.power,
            };
            (params, 0.0, val)
        }
        Method::FeedforwardNet => {
            let mut rng = seed::rng(config.seed);
            let mut dims = vec![input_dim];
            dims.extend(config.widths.iter().cloned());
            dims.push(output_dim);
            let mut layers: Vec<Layer> = dims
                .windows(2)
                .map(|w| {
                    let std = (2.0 / w[0] as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    Layer {
                        weights: DMatrix::from_fn(w[1], w[0], |_, _| normal.sample(&mut rng)),
                        bias: vec![0.0; w[1]],
                    }
                })
                .collect();
            // Start the output layer at the mean target so training begins
            // from the constant fit.
            let ym = to_matrix(&y_train);
            let last = layers.last_mut().unwrap();
            last.weights *= 0.1;
            for j in 0..output_dim {
                let mean = ym.column(j).mean();
                last.bias[j] = match target {
                    TargetKind::Fio => {
                        let p = mean.clamp(1e-6, 1.0 - 1e-6);
                        (p / (1.0 - p)).ln()
                    }
                    TargetKind::Allocation => mean,
                };
            }
            let xm = to_matrix(&x_train);
            let mut adam = Adam::new(&layers, config.learning_rate);
            for _ in 0..config.epochs {
                let net = Net {
                    layers: &layers,
                    target,
                };
                let (loss, grads) = net.gradient(&xm, &ym);
                if !loss.is_finite() {
                    return Err(MmvError::Fit(
                        "training diverged (non-finite loss); lower the learning rate".into(),
                    ));
                }
                adam.step(&mut layers, &grads);
            }
            let net = Net {
                layers: &layers,
                target,
            };
            let train = mse(net.forward(&xm).1.last().unwrap(), &ym);
            if !train.is_finite() {
                return Err(MmvError::Fit(
                    "training diverged (non-finite loss); lower the learning rate".into(),
                ));
            }
            let val = mse(
                net.forward(&to_matrix(&x_val)).1.last().unwrap(),
                &to_matrix(&y_val),
            );
            (Params::Net { layers }, train, val)
        }
    };
    Ok(FittedFunction {
        method,
        target,
        input_dim,
        output_dim,
        train_error,
        validation_error,
        input_mean,
        input_scale,
        input_min,
        input_max,
        params,
    })
}

impl FittedFunction {
    /// Evaluates the function; FIO targets are clamped to `[1e-6, 1]`.
    pub fn evaluate(&self, s: &[f64]) -> Result<Evaluation> {
        if s.len() != self.input_dim {
            return Err(MmvError::Domain(format!(
                "state has dimension {}, fitted function expects {}",
                s.len(),
                self.input_dim
            )));
        }
        let extrapolated = s
            .iter()
            .zip(self.input_min.iter().zip(&self.input_max))
            .any(|(v, (lo, hi))| v < lo || v > hi);
        let x: Vec<f64> = s
            .iter()
            .zip(&self.input_mean)
            .zip(&self.input_scale)
            .map(|((v, m), sc)| (v - m) / sc)
            .collect();
        let mut value = match &self.params {
            Params::InverseDistance {
                points,
                targets,
                neighbors,
                power,
            } => idw(points, targets, *neighbors, *power, &x),
            Params::Net { layers } => {
                let net = Net {
                    layers,
                    target: self.target,
                };
                let xm = DMatrix::from_row_slice(1, x.len(), &x);
                net.forward(&xm).1.last().unwrap().iter().cloned().collect()
            }
        };
        if self.target == TargetKind::Fio {
            value.iter_mut().for_each(|v| *v = v.clamp(D_FLOOR, 1.0));
        }
        Ok(Evaluation {
            value,
            extrapolated,
        })
    }

    pub fn evaluate_vector(&self, s: &DVector<f64>) -> Result<Evaluation> {
        self.evaluate(s.as_slice())
    }
}
