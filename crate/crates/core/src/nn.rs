//! Small dense networks trained with Adam, written against f64 ndarray
//! matrices. Hidden layers use ELU; the output layer is affine, and whatever
//! link functions a head needs are applied by its loss, not here.
//!
//! Training is plain mini-batch SGD machinery: shuffle per epoch, consecutive
//! batches, the final short batch kept, no early stopping. A non-finite batch
//! loss aborts the run with its epoch and batch index.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distributions::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

/// Fully connected network; `sizes` lists layer widths from input to output.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNetwork {
    sizes: Vec<usize>,
    /// Per layer, shape (fan_in, fan_out).
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    init_seed: u64,
}

/// Parameter-shaped gradient bundle.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    /// Flattened in the same order as [`DenseNetwork::params_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }
}

fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp_m1()
    }
}

/// ELU slope recovered from the activation value: exp(z) = elu(z) + 1 on the
/// negative branch.
fn elu_prime_from_activation(a: f64) -> f64 {
    if a > 0.0 {
        1.0
    } else {
        a + 1.0
    }
}

impl DenseNetwork {
    /// Uniform fan-in initialization: weights from U(-sqrt(6/fan_in),
    /// +sqrt(6/fan_in)), biases zero, filled layer by layer in row-major
    /// order from the init stream of `seed`.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::invalid("network needs input and output sizes"));
        }
        if sizes.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        let mut rng = rng_for(seed, Stream::MemberInit, 0);
        let mut weights = Vec::with_capacity(sizes.len() - 1);
        let mut biases = Vec::with_capacity(sizes.len() - 1);
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(&mut rng));
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(DenseNetwork {
            sizes: sizes.to_vec(),
            weights,
            biases,
            init_seed: seed,
        })
    }

    /// Standard experiment architecture: two ELU hidden layers of equal width.
    pub fn with_two_hidden(n_in: usize, hidden: usize, n_out: usize, seed: u64) -> Result<Self> {
        DenseNetwork::new(&[n_in, hidden, hidden, n_out], seed)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn n_params(&self) -> usize {
        self.sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// All parameters, layer by layer: weights row-major, then biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    /// Inverse of [`DenseNetwork::params_flat`].
    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                params.len()
            )));
        }
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for v in w.iter_mut() {
                *v = params[offset];
                offset += 1;
            }
            for v in b.iter_mut() {
                *v = params[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    /// Raw (pre-link) outputs for a batch of rows.
    pub fn forward_batch(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut a = x.to_owned();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(self.biases.iter()).enumerate() {
            let mut z = a.dot(w);
            z += b;
            if l < last {
                z.mapv_inplace(elu);
            }
            a = z;
        }
        a
    }

    /// Raw outputs for a single input row.
    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_inputs() {
            return Err(Error::invalid(format!(
                "expected {} inputs, got {}",
                self.n_inputs(),
                x.len()
            )));
        }
        let xm = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("shape checked");
        let raw = self.forward_batch(&xm.view());
        Ok(raw.row(0).to_vec())
    }

    /// Forward pass retaining hidden activations; `activations[0]` is the
    /// input batch, the last entry is the final hidden activation.
    fn forward_cached(&self, x: &ArrayView2<f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
        let last = self.weights.len() - 1;
        let mut activations = Vec::with_capacity(self.weights.len());
        activations.push(x.to_owned());
        let mut a = x.to_owned();
        for l in 0..last {
            let mut z = a.dot(&self.weights[l]);
            z += &self.biases[l];
            z.mapv_inplace(elu);
            activations.push(z.clone());
            a = z;
        }
        let mut raw = a.dot(&self.weights[last]);
        raw += &self.biases[last];
        (activations, raw)
    }

    /// Backpropagates `d loss / d raw` through the cached activations.
    fn backward(&self, activations: &[Array2<f64>], d_raw: Array2<f64>) -> Gradients {
        let n_layers = self.weights.len();
        let mut dw = vec![Array2::zeros((0, 0)); n_layers];
        let mut db = vec![Array1::zeros(0); n_layers];
        let mut dz = d_raw;
        for l in (0..n_layers).rev() {
            dw[l] = activations[l].t().dot(&dz);
            db[l] = dz.sum_axis(Axis(0));
            if l > 0 {
                let mut da = dz.dot(&self.weights[l].t());
                da.zip_mut_with(&activations[l], |g, &a| *g *= elu_prime_from_activation(a));
                dz = da;
            }
        }
        Gradients {
            weights: dw,
            biases: db,
        }
    }
}

/// Mean batch loss and its gradient with respect to every parameter, for a
/// head loss operating on raw outputs. This is the exact quantity finite
/// differences must reproduce.
pub fn loss_and_gradient<L>(
    net: &DenseNetwork,
    loss: &L,
    x: &ArrayView2<f64>,
    y: &ArrayView2<f64>,
) -> Result<(f64, Gradients)>
where
    L: Fn(&Array2<f64>, &ArrayView2<f64>) -> Result<(f64, Array2<f64>)>,
{
    let (activations, raw) = net.forward_cached(x);
    let (value, d_raw) = loss(&raw, y)?;
    Ok((value, net.backward(&activations, d_raw)))
}

/// Optimizer settings; defaults match the experiment setup.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Seeds the per-epoch shuffle stream.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 128,
            epochs: 1000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epoch count must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        Ok(())
    }
}

/// Per-epoch mean losses; validation entries absent when no validation set
/// was supplied.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

impl TrainHistory {
    pub fn final_val_loss(&self) -> Option<f64> {
        self.val_loss.last().copied()
    }
}

struct Adam {
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
    t: u64,
}

impl Adam {
    fn new(net: &DenseNetwork) -> Self {
        Adam {
            m_w: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            v_w: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            m_b: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            v_b: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            t: 0,
        }
    }

    fn step(&mut self, net: &mut DenseNetwork, grads: &Gradients, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        };
        for l in 0..net.weights.len() {
            for (((p, &g), m), v) in net.weights[l]
                .iter_mut()
                .zip(grads.weights[l].iter())
                .zip(self.m_w[l].iter_mut())
                .zip(self.v_w[l].iter_mut())
            {
                update(p, g, m, v);
            }
            for (((p, &g), m), v) in net.biases[l]
                .iter_mut()
                .zip(grads.biases[l].iter())
                .zip(self.m_b[l].iter_mut())
                .zip(self.v_b[l].iter_mut())
            {
                update(p, g, m, v);
            }
        }
    }
}

/// Trains `net` in place; returns per-epoch mean train and validation losses.
///
/// The loss closure maps (raw batch outputs, labels) to the mean batch loss
/// and its gradient with respect to the raw outputs.
pub fn train<L>(
    net: &mut DenseNetwork,
    loss: &L,
    x_train: &ArrayView2<f64>,
    y_train: &ArrayView2<f64>,
    validation: Option<(&ArrayView2<f64>, &ArrayView2<f64>)>,
    cfg: &TrainConfig,
) -> Result<TrainHistory>
where
    L: Fn(&Array2<f64>, &ArrayView2<f64>) -> Result<(f64, Array2<f64>)>,
{
    cfg.validate()?;
    let n = x_train.nrows();
    if n == 0 {
        return Err(Error::invalid("training set is empty"));
    }
    if y_train.nrows() != n {
        return Err(Error::invalid("input and label row counts differ"));
    }
    if x_train.ncols() != net.n_inputs() {
        return Err(Error::invalid(format!(
            "network expects {} inputs, data has {}",
            net.n_inputs(),
            x_train.ncols()
        )));
    }
    if let Some((xv, yv)) = validation {
        if xv.nrows() != yv.nrows() || xv.ncols() != net.n_inputs() {
            return Err(Error::invalid("validation set shape mismatch"));
        }
    }

    let mut adam = Adam::new(net);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = rng_for(cfg.seed, Stream::BatchShuffle, epoch as u64);
        for i in (1..n).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        let mut epoch_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xb = x_train.select(Axis(0), chunk);
            let yb = y_train.select(Axis(0), chunk);
            let (activations, raw) = net.forward_cached(&xb.view());
            let (value, d_raw) = loss(&raw, &yb.view())?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            epoch_sum += value * chunk.len() as f64;
            let grads = net.backward(&activations, d_raw);
            adam.step(net, &grads, cfg);
        }
        history.train_loss.push(epoch_sum / n as f64);
        if let Some((xv, yv)) = validation {
            let raw = net.forward_batch(xv);
            let (value, _) = loss(&raw, yv)?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: usize::MAX,
                });
            }
            history.val_loss.push(value);
        }
    }
    Ok(history)
}
