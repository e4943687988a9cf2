//! A small fully-connected classifier with per-domain batch normalization.
//!
//! Hidden layers are `affine -> BN -> ReLU`, followed by a final affine map
//! to class logits. In [`BnMode::Dual`] every BN layer keeps two branches
//! (statistics and affine parameters), one for real and one for synthetic
//! inputs, while all affine weights are shared. [`BnMode::Vanilla`] keeps a
//! single branch used by both domains.
//!
//! Training minimizes `CE(real) + lambda * CE(synthetic)` over paired
//! domain-homogeneous sub-batches with SGD and momentum.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{compose_batches, BatchPlan, DatasetError, Domain, LabeledSet};
use crate::hash::SeedBuilder;
use crate::matrix::Matrix;

pub const DEFAULT_LAMBDA: f64 = 0.6;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_GRAD_CHECK_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("batch of {0} rows is too small for batch statistics (need at least 2)")]
    BatchTooSmall(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("features and labels disagree: {features} rows, {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("batch domain is {found:?}, expected {expected:?}")]
    WrongDomain { expected: Domain, found: Domain },
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("empty training set")]
    EmptyData,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Vanilla,
    Dual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Eval,
}

/// Statistics and affine parameters of one BN branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnBranch {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnBranch {
    fn new(width: usize) -> Self {
        BnBranch {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnLayer {
    pub width: usize,
    pub momentum: f64,
    pub eps: f64,
    pub mode: BnMode,
    /// One branch in vanilla mode; `[real, synthetic]` in dual mode.
    pub branches: Vec<BnBranch>,
}

/// Intermediate values kept for the backward pass of one BN layer.
#[derive(Debug, Clone)]
pub struct BnCache {
    branch: usize,
    phase: Phase,
    xhat: Matrix,
    inv_std: Vec<f64>,
}

struct BatchStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl BnLayer {
    pub fn new(width: usize, mode: BnMode, momentum: f64, eps: f64) -> Self {
        let n = match mode {
            BnMode::Vanilla => 1,
            BnMode::Dual => 2,
        };
        BnLayer {
            width,
            momentum,
            eps,
            mode,
            branches: vec![BnBranch::new(width); n],
        }
    }

    pub fn branch_index(&self, domain: Domain) -> usize {
        match (self.mode, domain) {
            (BnMode::Vanilla, _) | (BnMode::Dual, Domain::Real) => 0,
            (BnMode::Dual, Domain::Synthetic) => 1,
        }
    }

    pub fn branch(&self, domain: Domain) -> &BnBranch {
        &self.branches[self.branch_index(domain)]
    }

    /// Normalizes `x` and, in the train phase, folds the batch statistics
    /// into the running statistics of `domain`'s branch only.
    pub fn forward(&mut self, x: &Matrix, domain: Domain, phase: Phase) -> Result<(Matrix, BnCache), TrainError> {
        let (y, cache, stats) = self.normalize(x, domain, phase)?;
        if let Some(stats) = stats {
            self.absorb(cache.branch, &stats);
        }
        Ok((y, cache))
    }

    fn normalize(
        &self,
        x: &Matrix,
        domain: Domain,
        phase: Phase,
    ) -> Result<(Matrix, BnCache, Option<BatchStats>), TrainError> {
        if x.cols() != self.width {
            return Err(TrainError::DimMismatch {
                expected: self.width,
                found: x.cols(),
            });
        }
        let n = x.rows();
        let b = self.branch_index(domain);
        let branch = &self.branches[b];
        let (mean, var, stats) = match phase {
            Phase::Train => {
                if n < 2 {
                    return Err(TrainError::BatchTooSmall(n));
                }
                let mut mean = vec![0.0; self.width];
                for r in 0..n {
                    for (m, v) in mean.iter_mut().zip(x.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; self.width];
                for r in 0..n {
                    for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                (mean.clone(), var.clone(), Some(BatchStats { mean, var }))
            }
            Phase::Eval => (branch.running_mean.clone(), branch.running_var.clone(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + self.eps)).collect();
        let mut xhat = Matrix::zeros(n, self.width);
        let mut y = Matrix::zeros(n, self.width);
        for r in 0..n {
            for c in 0..self.width {
                let h = (x[(r, c)] - mean[c]) * inv_std[c];
                xhat[(r, c)] = h;
                y[(r, c)] = branch.gamma[c] * h + branch.beta[c];
            }
        }
        Ok((
            y,
            BnCache {
                branch: b,
                phase,
                xhat,
                inv_std,
            },
            stats,
        ))
    }

    fn absorb(&mut self, branch: usize, stats: &BatchStats) {
        let m = self.momentum;
        let br = &mut self.branches[branch];
        for c in 0..self.width {
            br.running_mean[c] = (1.0 - m) * br.running_mean[c] + m * stats.mean[c];
            br.running_var[c] = (1.0 - m) * br.running_var[c] + m * stats.var[c];
        }
    }

    /// Returns `dx` and accumulates `dgamma`, `dbeta` into `grad`'s branch.
    fn backward(&self, dy: &Matrix, cache: &BnCache, grad: &mut BnLayer) -> Matrix {
        let n = dy.rows();
        let gamma = &self.branches[cache.branch].gamma;
        let gb = &mut grad.branches[cache.branch];
        let mut dx = Matrix::zeros(n, self.width);
        for c in 0..self.width {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for r in 0..n {
                sum_dy += dy[(r, c)];
                sum_dy_xhat += dy[(r, c)] * cache.xhat[(r, c)];
            }
            gb.beta[c] += sum_dy;
            gb.gamma[c] += sum_dy_xhat;
            let k = gamma[c] * cache.inv_std[c];
            match cache.phase {
                Phase::Train => {
                    let nf = n as f64;
                    for r in 0..n {
                        dx[(r, c)] = k / nf * (nf * dy[(r, c)] - sum_dy - cache.xhat[(r, c)] * sum_dy_xhat);
                    }
                }
                Phase::Eval => {
                    for r in 0..n {
                        dx[(r, c)] = k * dy[(r, c)];
                    }
                }
            }
        }
        dx
    }
}

/// `y = x W + b`, with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weights: Matrix,
    /// Absent on layers feeding a BN layer, whose beta already supplies the shift.
    pub bias: Option<Vec<f64>>,
}

impl Affine {
    fn init(fan_in: usize, fan_out: usize, with_bias: bool, rng: &mut impl Rng) -> Self {
        let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Affine {
            weights: Matrix::from_vec(fan_in, fan_out, data),
            bias: with_bias.then(|| vec![0.0; fan_out]),
        }
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.weights);
        if let Some(b) = &self.bias {
            for r in 0..y.rows() {
                for (v, bb) in y.row_mut(r).iter_mut().zip(b) {
                    *v += bb;
                }
            }
        }
        y
    }

    /// Accumulates weight/bias gradients and returns `dx`.
    fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Affine) -> Matrix {
        let dw = x.t_matmul(dy);
        for (g, d) in grad.weights.as_mut_slice().iter_mut().zip(dw.as_slice()) {
            *g += d;
        }
        if let Some(gb) = grad.bias.as_mut() {
            for r in 0..dy.rows() {
                for (g, d) in gb.iter_mut().zip(dy.row(r)) {
                    *g += d;
                }
            }
        }
        dy.matmul_t(&self.weights)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub affine: Affine,
    pub bn: BnLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub bn_mode: BnMode,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub seed: u64,
}

impl NetworkConfig {
    pub fn new(input_dim: usize, hidden: &[usize], classes: usize, bn_mode: BnMode, seed: u64) -> Self {
        NetworkConfig {
            input_dim,
            hidden: hidden.to_vec(),
            classes,
            bn_mode,
            bn_momentum: DEFAULT_BN_MOMENTUM,
            bn_eps: DEFAULT_BN_EPS,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub input_dim: usize,
    pub classes: usize,
    pub hidden: Vec<HiddenLayer>,
    pub output: Affine,
}

/// Values saved by [`Network::forward`] for [`Network::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    bn: Vec<BnCache>,
    activations: Vec<Matrix>,
    final_input: Matrix,
}

impl Network {
    /// Affine weights are Glorot-uniform from the config seed, biases 0,
    /// BN gamma 1, beta 0, running mean 0, running variance 1.
    pub fn new(cfg: &NetworkConfig) -> Result<Self, TrainError> {
        if cfg.input_dim == 0 || cfg.classes == 0 || cfg.hidden.contains(&0) {
            return Err(TrainError::InvalidConfig("layer widths must be positive"));
        }
        if !(cfg.bn_momentum > 0.0 && cfg.bn_momentum <= 1.0) || cfg.bn_eps < 0.0 {
            return Err(TrainError::InvalidConfig(
                "bn momentum must be in (0, 1] and eps non-negative",
            ));
        }
        let mut rng = SeedBuilder::new("network-init").u64(cfg.seed).rng();
        let mut fan_in = cfg.input_dim;
        let mut hidden = Vec::with_capacity(cfg.hidden.len());
        for &w in &cfg.hidden {
            hidden.push(HiddenLayer {
                affine: Affine::init(fan_in, w, false, &mut rng),
                bn: BnLayer::new(w, cfg.bn_mode, cfg.bn_momentum, cfg.bn_eps),
            });
            fan_in = w;
        }
        let output = Affine::init(fan_in, cfg.classes, true, &mut rng);
        Ok(Network {
            input_dim: cfg.input_dim,
            classes: cfg.classes,
            hidden,
            output,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden.last().map_or(self.input_dim, |h| h.bn.width)
    }

    pub fn bn_mode(&self) -> Option<BnMode> {
        self.hidden.first().map(|h| h.bn.mode)
    }

    fn zeros_like(&self) -> Network {
        let mut g = self.clone();
        g.visit_params_mut(|p| p.iter_mut().for_each(|v| *v = 0.0));
        g
    }

    /// Visits learned parameters in a fixed order: per hidden layer the
    /// weights, then each BN branch's gamma and beta; then output weights
    /// and bias.
    pub fn visit_params(&self, mut f: impl FnMut(&[f64])) {
        for h in &self.hidden {
            f(h.affine.weights.as_slice());
            if let Some(b) = &h.affine.bias {
                f(b);
            }
            for br in &h.bn.branches {
                f(&br.gamma);
                f(&br.beta);
            }
        }
        f(self.output.weights.as_slice());
        if let Some(b) = &self.output.bias {
            f(b);
        }
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for h in &mut self.hidden {
            f(h.affine.weights.as_mut_slice());
            if let Some(b) = h.affine.bias.as_mut() {
                f(b);
            }
            for br in &mut h.bn.branches {
                f(&mut br.gamma);
                f(&mut br.beta);
            }
        }
        f(self.output.weights.as_mut_slice());
        if let Some(b) = self.output.bias.as_mut() {
            f(b);
        }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(|p| out.extend_from_slice(p));
        out
    }

    pub fn set_params(&mut self, values: &[f64]) {
        let mut i = 0;
        self.visit_params_mut(|p| {
            p.copy_from_slice(&values[i..i + p.len()]);
            i += p.len();
        });
        assert_eq!(i, values.len(), "parameter count");
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(|p| n += p.len());
        n
    }

    /// Weights and biases of every affine layer: the parameters shared by
    /// both domains.
    pub fn shared_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for a in self.hidden.iter().map(|h| &h.affine).chain([&self.output]) {
            out.extend_from_slice(a.weights.as_slice());
            if let Some(b) = &a.bias {
                out.extend_from_slice(b);
            }
        }
        out
    }

    fn check_input(&self, x: &Matrix) -> Result<(), TrainError> {
        if x.cols() != self.input_dim {
            return Err(TrainError::DimMismatch {
                expected: self.input_dim,
                found: x.cols(),
            });
        }
        Ok(())
    }

    /// Forward pass without touching running statistics. Returns the batch
    /// statistics each BN layer would absorb in the train phase.
    fn forward_pure(
        &self,
        x: &Matrix,
        domain: Domain,
        phase: Phase,
    ) -> Result<(Matrix, ForwardCache, Vec<Option<BatchStats>>), TrainError> {
        self.check_input(x)?;
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.hidden.len()),
            bn: Vec::with_capacity(self.hidden.len()),
            activations: Vec::with_capacity(self.hidden.len()),
            final_input: Matrix::zeros(0, 0),
        };
        let mut stats = Vec::with_capacity(self.hidden.len());
        let mut h = x.clone();
        for layer in &self.hidden {
            let z = layer.affine.forward(&h);
            let (y, bn_cache, s) = layer.bn.normalize(&z, domain, phase)?;
            let a = y.map(|v| v.max(0.0));
            cache.inputs.push(h);
            cache.bn.push(bn_cache);
            cache.activations.push(a.clone());
            stats.push(s);
            h = a;
        }
        let logits = self.output.forward(&h);
        cache.final_input = h;
        Ok((logits, cache, stats))
    }

    /// Forward pass; in the train phase each BN layer updates the running
    /// statistics of `domain`'s branch.
    pub fn forward(&mut self, x: &Matrix, domain: Domain, phase: Phase) -> Result<(Matrix, ForwardCache), TrainError> {
        let (logits, cache, stats) = self.forward_pure(x, domain, phase)?;
        for ((layer, s), c) in self.hidden.iter_mut().zip(stats).zip(&cache.bn) {
            if let Some(s) = s {
                layer.bn.absorb(c.branch, &s);
            }
        }
        Ok((logits, cache))
    }

    /// Eval-phase logits.
    pub fn logits(&self, x: &Matrix, domain: Domain) -> Result<Matrix, TrainError> {
        Ok(self.forward_pure(x, domain, Phase::Eval)?.0)
    }

    /// Eval-phase gradient of the loss wrt every parameter, given `dlogits`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Matrix) -> Vec<f64> {
        let mut grad = self.zeros_like();
        let mut d = self.output.backward(&cache.final_input, dlogits, &mut grad.output);
        for (l, layer) in self.hidden.iter().enumerate().rev() {
            let a = &cache.activations[l];
            for (dv, &av) in d.as_mut_slice().iter_mut().zip(a.as_slice()) {
                if av <= 0.0 {
                    *dv = 0.0;
                }
            }
            let dz = layer.bn.backward(&d, &cache.bn[l], &mut grad.hidden[l].bn);
            d = layer.affine.backward(&cache.inputs[l], &dz, &mut grad.hidden[l].affine);
        }
        grad.params()
    }

    pub fn predict(&self, x: &Matrix, domain: Domain) -> Result<Vec<usize>, TrainError> {
        let logits = self.logits(x, domain)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    /// Row-wise softmax of eval-phase logits.
    pub fn predict_proba(&self, x: &Matrix, domain: Domain) -> Result<Matrix, TrainError> {
        let logits = self.logits(x, domain)?;
        let mut p = logits.clone();
        for r in 0..p.rows() {
            softmax_in_place(p.row_mut(r));
        }
        Ok(p)
    }

    pub fn accuracy(&self, data: &LabeledSet, domain: Domain) -> Result<f64, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyData);
        }
        let pred = self.predict(&data.features, domain)?;
        let hits = pred.iter().zip(&data.labels).filter(|(p, t)| p == t).count();
        Ok(hits as f64 / data.len() as f64)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Mean softmax cross-entropy and its gradient wrt the logits,
/// `(softmax - onehot) / N`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix), TrainError> {
    if logits.rows() != labels.len() {
        return Err(TrainError::LengthMismatch {
            features: logits.rows(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let (n, c) = (logits.rows(), logits.cols());
    let mut grad = Matrix::zeros(n, c);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(TrainError::LabelOutOfRange { label: y, classes: c });
        }
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|v| libm::exp(v - max)).sum();
        let log_z = max + libm::log(sum);
        loss += log_z - row[y];
        for (j, g) in grad.row_mut(r).iter_mut().enumerate() {
            let p = libm::exp(row[j] - log_z);
            *g = (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// A domain-homogeneous mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub domain: Domain,
}

impl Batch {
    pub fn new(features: Matrix, labels: Vec<usize>, domain: Domain) -> Result<Self, TrainError> {
        if features.rows() != labels.len() {
            return Err(TrainError::LengthMismatch {
                features: features.rows(),
                labels: labels.len(),
            });
        }
        Ok(Batch {
            features,
            labels,
            domain,
        })
    }

    pub fn from_set(set: &LabeledSet, idx: &[usize], domain: Domain) -> Self {
        let s = set.select(idx);
        Batch {
            features: s.features,
            labels: s.labels,
            domain,
        }
    }
}

/// SGD with classical momentum: `v <- mu v - lr g; p <- p + v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, net: &mut Network, grad: &[f64]) {
        if self.velocity.len() != grad.len() {
            self.velocity = vec![0.0; grad.len()];
        }
        let mut params = net.params();
        for ((p, v), g) in params.iter_mut().zip(self.velocity.iter_mut()).zip(grad) {
            *v = self.momentum * *v - self.learning_rate * g;
            *p += *v;
        }
        net.set_params(&params);
    }
}

fn expect_domain(batch: &Batch, expected: Domain) -> Result<(), TrainError> {
    if batch.domain != expected {
        return Err(TrainError::WrongDomain {
            expected,
            found: batch.domain,
        });
    }
    Ok(())
}

/// Loss and gradient of `CE(real) + lambda * CE(synthetic)` with the
/// train-phase BN statistics; `update_stats` controls whether running
/// statistics absorb the batches.
fn combined_loss_grad(
    net: &mut Network,
    real: &Batch,
    synthetic: Option<&Batch>,
    lambda: f64,
    update_stats: bool,
) -> Result<(f64, Vec<f64>), TrainError> {
    expect_domain(real, Domain::Real)?;
    let run = |net: &mut Network, b: &Batch| -> Result<(Matrix, ForwardCache), TrainError> {
        if update_stats {
            net.forward(&b.features, b.domain, Phase::Train)
        } else {
            let (l, c, _) = net.forward_pure(&b.features, b.domain, Phase::Train)?;
            Ok((l, c))
        }
    };
    let (logits, cache) = run(net, real)?;
    let (mut loss, dlogits) = cross_entropy(&logits, &real.labels)?;
    let mut grad = net.backward(&cache, &dlogits);
    if let Some(syn) = synthetic {
        expect_domain(syn, Domain::Synthetic)?;
        let (logits, cache) = run(net, syn)?;
        let (syn_loss, dlogits) = cross_entropy(&logits, &syn.labels)?;
        loss += lambda * syn_loss;
        // At lambda = 0 the synthetic pass only refreshes its BN statistics.
        if lambda != 0.0 {
            let g = net.backward(&cache, &dlogits);
            for (a, b) in grad.iter_mut().zip(g) {
                *a += lambda * b;
            }
        }
    }
    Ok((loss, grad))
}

/// Loss of the combined objective at the current parameters, leaving the
/// network untouched.
pub fn combined_loss(net: &Network, real: &Batch, synthetic: Option<&Batch>, lambda: f64) -> Result<f64, TrainError> {
    let loss_of = |b: &Batch| -> Result<f64, TrainError> {
        let (l, _, _) = net.forward_pure(&b.features, b.domain, Phase::Train)?;
        Ok(cross_entropy(&l, &b.labels)?.0)
    };
    let mut loss = loss_of(real)?;
    if let Some(s) = synthetic {
        loss += lambda * loss_of(s)?;
    }
    Ok(loss)
}

/// Analytic gradient of the combined objective, without updating running
/// statistics.
pub fn combined_gradient(
    net: &Network,
    real: &Batch,
    synthetic: Option<&Batch>,
    lambda: f64,
) -> Result<Vec<f64>, TrainError> {
    let mut probe = net.clone();
    Ok(combined_loss_grad(&mut probe, real, synthetic, lambda, false)?.1)
}

/// One optimizer step on a paired (real, synthetic) sub-batch. Returns the
/// combined loss evaluated before the update.
pub fn combined_step(
    net: &mut Network,
    opt: &mut Sgd,
    real: &Batch,
    synthetic: Option<&Batch>,
    lambda: f64,
) -> Result<f64, TrainError> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(TrainError::InvalidConfig("lambda must be non-negative"));
    }
    let (loss, grad) = combined_loss_grad(net, real, synthetic, lambda, true)?;
    opt.step(net, &grad);
    Ok(loss)
}

/// Maximum relative error between the analytic gradient and central finite
/// differences `(L(p + eps) - L(p - eps)) / 2 eps`, over every parameter.
/// Relative error is `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn grad_check(
    net: &Network,
    real: &Batch,
    synthetic: Option<&Batch>,
    lambda: f64,
    epsilon: f64,
) -> Result<f64, TrainError> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(TrainError::InvalidConfig("epsilon must be positive"));
    }
    let analytic = combined_gradient(net, real, synthetic, lambda)?;
    let base = net.params();
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut p = base.clone();
        p[i] = base[i] + epsilon;
        probe.set_params(&p);
        let plus = combined_loss(&probe, real, synthetic, lambda)?;
        p[i] = base[i] - epsilon;
        probe.set_params(&p);
        let minus = combined_loss(&probe, real, synthetic, lambda)?;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub sgd_momentum: f64,
    /// Weight of the synthetic cross-entropy term.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of each batch drawn from synthetic data.
    pub sampling_weight: f64,
    pub eval_bn_domain: Domain,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            sgd_momentum: 0.9,
            lambda: DEFAULT_LAMBDA,
            epochs: 10,
            batch_size: 64,
            sampling_weight: crate::dataset::DEFAULT_SAMPLING_WEIGHT,
            eval_bn_domain: Domain::Real,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn batch_plan(&self) -> Result<BatchPlan, TrainError> {
        Ok(BatchPlan::new(self.batch_size, self.sampling_weight, self.seed)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub eval_acc: f64,
}

fn check_set(set: &LabeledSet, net: &Network) -> Result<(), TrainError> {
    if set.features.rows() != set.labels.len() {
        return Err(TrainError::LengthMismatch {
            features: set.features.rows(),
            labels: set.labels.len(),
        });
    }
    if set.features.cols() != net.input_dim {
        return Err(TrainError::DimMismatch {
            expected: net.input_dim,
            found: set.features.cols(),
        });
    }
    if let Some(&label) = set.labels.iter().find(|&&l| l >= net.classes) {
        return Err(TrainError::LabelOutOfRange {
            label,
            classes: net.classes,
        });
    }
    Ok(())
}

/// Trains `net` on paired real/synthetic sub-batches drawn by
/// [`compose_batches`].
///
/// With an empty synthetic set every step is real-only, using the same real
/// sub-batch size (and hence the same real batch sequence) as the paired
/// schedule. Each epoch records the mean step loss and the accuracy on
/// `eval` (or on `real` when `eval` is `None`) using the
/// `eval_bn_domain` branch.
pub fn train(
    net: &mut Network,
    real: &LabeledSet,
    synthetic: &LabeledSet,
    config: &TrainConfig,
    eval: Option<&LabeledSet>,
) -> Result<Vec<EpochRecord>, TrainError> {
    if real.is_empty() {
        return Err(TrainError::EmptyData);
    }
    check_set(real, net)?;
    if !synthetic.is_empty() {
        check_set(synthetic, net)?;
    }
    let plan = config.batch_plan()?;
    let plan = if synthetic.is_empty() {
        BatchPlan {
            batch_size: plan.n_real(),
            sampling_weight: 0.0,
            ..plan
        }
    } else {
        plan
    };
    if plan.n_real() == 0 {
        return Err(TrainError::InvalidConfig("each batch needs at least one real sample"));
    }
    let real_idx: Vec<usize> = (0..real.len()).collect();
    let syn_idx: Vec<usize> = (0..synthetic.len()).collect();
    let stream = compose_batches(&real_idx, &syn_idx, &plan, config.epochs)?;
    let per_epoch = stream.batches_per_epoch();
    let mut opt = Sgd::new(config.learning_rate, config.sgd_momentum);
    let mut history = Vec::with_capacity(config.epochs);
    let mut loss_sum = 0.0;
    for batch in stream {
        let r: Vec<usize> = batch.real.iter().map(|&&i| i).collect();
        let rb = Batch::from_set(real, &r, Domain::Real);
        let sb = (!batch.synthetic.is_empty()).then(|| {
            let s: Vec<usize> = batch.synthetic.iter().map(|&&i| i).collect();
            Batch::from_set(synthetic, &s, Domain::Synthetic)
        });
        loss_sum += combined_step(net, &mut opt, &rb, sb.as_ref(), config.lambda)?;
        if batch.index + 1 == per_epoch {
            let eval_acc = net.accuracy(eval.unwrap_or(real), config.eval_bn_domain)?;
            history.push(EpochRecord {
                epoch: batch.epoch,
                loss: loss_sum / per_epoch as f64,
                eval_acc,
            });
            loss_sum = 0.0;
        }
    }
    Ok(history)
}

/// Penultimate activations (the last hidden ReLU output) in the eval phase,
/// using `bn_domain`'s BN branch. A network without hidden layers returns
/// its inputs.
pub fn extract_features(net: &Network, inputs: &Matrix, bn_domain: Domain) -> Result<Matrix, TrainError> {
    Ok(net.forward_pure(inputs, bn_domain, Phase::Eval)?.1.final_input)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            epochs: 200,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub model: Network,
    pub train_accuracy: f64,
}

impl LinearProbe {
    pub fn accuracy(&self, features: &Matrix, labels: &[usize]) -> Result<f64, TrainError> {
        let set = LabeledSet {
            features: features.clone(),
            labels: labels.to_vec(),
        };
        self.model.accuracy(&set, Domain::Real)
    }
}

/// Fits a single affine layer on frozen features with cross-entropy and
/// the same SGD machinery as [`train`].
pub fn linear_probe(
    features: &Matrix,
    labels: &[usize],
    classes: usize,
    config: &ProbeConfig,
) -> Result<LinearProbe, TrainError> {
    if !features.is_finite() {
        return Err(TrainError::InvalidConfig("features must be finite"));
    }
    let data = LabeledSet {
        features: features.clone(),
        labels: labels.to_vec(),
    };
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut model = Network::new(&NetworkConfig::new(
        features.cols(),
        &[],
        classes,
        BnMode::Vanilla,
        config.seed,
    ))?;
    check_set(&data, &model)?;
    let tc = TrainConfig {
        learning_rate: config.learning_rate,
        sgd_momentum: config.momentum,
        lambda: 0.0,
        epochs: config.epochs,
        batch_size: config.batch_size.min(data.len()),
        sampling_weight: 0.0,
        eval_bn_domain: Domain::Real,
        seed: config.seed,
    };
    let empty = LabeledSet {
        features: Matrix::zeros(0, features.cols()),
        labels: Vec::new(),
    };
    train(&mut model, &data, &empty, &tc, None)?;
    let train_accuracy = model.accuracy(&data, Domain::Real)?;
    Ok(LinearProbe { model, train_accuracy })
}

/// A model checkpoint: network parameters plus the configs that made it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub network_config: NetworkConfig,
    pub train_config: TrainConfig,
    pub network: Network,
    #[serde(default)]
    pub note: String,
}
