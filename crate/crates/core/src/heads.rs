//! Output heads mapping raw network outputs to distributions over the three
//! tissue parameters, in normalized [0, 1] space, plus their training losses
//! with analytic gradients.
//!
//! Raw layout per head (all offsets within one output row):
//!
//! * point: `[a_d, a_f, a_dstar]`, estimate = sigmoid(a).
//! * gaussian: per parameter p, `raw[2p]` is the mean logit and `raw[2p+1]`
//!   the stddev preimage; width 6.
//! * mixture of K components: per parameter p a block of 3K values starting
//!   at `3K*p`: K weight logits, K mean logits, K stddev preimages; width 9K.
//!
//! Links: mean = sigmoid(logit); stddev = softplus(preimage) + SIGMA_FLOOR;
//! weights = softmax(logits). Each parameter gets its own independent 1-D
//! mixture, including its own weights.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::ivim::{IvimParams, PriorRanges, N_PARAMS};

/// Additive lower bound on every mixture stddev.
pub const SIGMA_FLOOR: f64 = 1e-4;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable ln(1 + exp(x)).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Point,
    Gaussian,
    Mdn,
}

impl HeadKind {
    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Point => "point",
            HeadKind::Gaussian => "gaussian",
            HeadKind::Mdn => "mdn",
        }
    }
}

/// A head choice: the kind plus the component count K (always 1 except for
/// the mixture head).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub k: usize,
}

impl HeadSpec {
    pub fn point() -> Self {
        HeadSpec { kind: HeadKind::Point, k: 1 }
    }

    pub fn gaussian() -> Self {
        HeadSpec { kind: HeadKind::Gaussian, k: 1 }
    }

    pub fn mdn(k: usize) -> Self {
        HeadSpec { kind: HeadKind::Mdn, k }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("component count must be at least 1"));
        }
        if self.kind != HeadKind::Mdn && self.k != 1 {
            return Err(Error::invalid(format!(
                "{} head carries exactly one component, got k={}",
                self.kind.name(),
                self.k
            )));
        }
        Ok(())
    }

    /// Raw output width the network must produce for this head.
    pub fn output_width(&self) -> usize {
        match self.kind {
            HeadKind::Point => N_PARAMS,
            HeadKind::Gaussian => 2 * N_PARAMS,
            HeadKind::Mdn => 3 * self.k * N_PARAMS,
        }
    }

    /// True for heads that emit a predictive distribution.
    pub fn is_probabilistic(&self) -> bool {
        self.kind != HeadKind::Point
    }
}

/// One-dimensional Gaussian mixture; weights sum to one, stddevs are floored.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture1d {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stddevs: Vec<f64>,
}

impl Mixture1d {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn mean(&self) -> f64 {
        self.weights
            .iter()
            .zip(self.means.iter())
            .map(|(w, m)| w * m)
            .sum()
    }

    /// Total variance: sum of w*(sigma^2 + (mu - mean)^2); non-negative by
    /// construction.
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.weights
            .iter()
            .zip(self.means.iter())
            .zip(self.stddevs.iter())
            .map(|((w, m), s)| w * (s * s + (m - mean) * (m - mean)))
            .sum()
    }

    /// Natural log of the mixture density at `y`.
    pub fn log_density(&self, y: f64) -> f64 {
        let mut max = f64::NEG_INFINITY;
        let logs: Vec<f64> = self
            .weights
            .iter()
            .zip(self.means.iter())
            .zip(self.stddevs.iter())
            .map(|((w, m), s)| {
                let z = (y - m) / s;
                let l = w.ln() - s.ln() - 0.5 * z * z - LN_SQRT_2PI;
                if l > max {
                    max = l;
                }
                l
            })
            .collect();
        max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
    }

    /// Draws one value: component by cumulative weight, then its Gaussian.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut idx = self.k() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                idx = i;
                break;
            }
        }
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        self.means[idx] + self.stddevs[idx] * z
    }

    /// Index of the heaviest component; ties resolve to the lowest index.
    pub fn argmax_weight(&self) -> usize {
        let mut best = 0;
        for i in 1..self.k() {
            if self.weights[i] > self.weights[best] {
                best = i;
            }
        }
        best
    }
}

/// Independent mixtures for the three parameters, in unit space.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePrediction {
    pub params: [Mixture1d; N_PARAMS],
}

impl MixturePrediction {
    pub fn k(&self) -> usize {
        self.params[0].k()
    }
}

/// Decoded head output.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    Point([f64; N_PARAMS]),
    Mixture(MixturePrediction),
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn check_width(spec: &HeadSpec, len: usize) -> Result<()> {
    spec.validate()?;
    if len != spec.output_width() {
        return Err(Error::invalid(format!(
            "{} head with k={} expects {} raw outputs, got {len}",
            spec.kind.name(),
            spec.k,
            spec.output_width()
        )));
    }
    Ok(())
}

fn decode_param_mixture(spec: &HeadSpec, raw: &[f64], p: usize) -> Mixture1d {
    match spec.kind {
        HeadKind::Gaussian => Mixture1d {
            weights: vec![1.0],
            means: vec![sigmoid(raw[2 * p])],
            stddevs: vec![softplus(raw[2 * p + 1]) + SIGMA_FLOOR],
        },
        HeadKind::Mdn => {
            let k = spec.k;
            let block = &raw[3 * k * p..3 * k * (p + 1)];
            Mixture1d {
                weights: softmax(&block[..k]),
                means: block[k..2 * k].iter().map(|&m| sigmoid(m)).collect(),
                stddevs: block[2 * k..3 * k]
                    .iter()
                    .map(|&c| softplus(c) + SIGMA_FLOOR)
                    .collect(),
            }
        }
        HeadKind::Point => unreachable!("point head has no mixture"),
    }
}

/// Decodes one raw output row.
pub fn decode_head(spec: &HeadSpec, raw: &[f64]) -> Result<Decoded> {
    check_width(spec, raw.len())?;
    match spec.kind {
        HeadKind::Point => Ok(Decoded::Point([
            sigmoid(raw[0]),
            sigmoid(raw[1]),
            sigmoid(raw[2]),
        ])),
        _ => Ok(Decoded::Mixture(decode_mixture(spec, raw)?)),
    }
}

/// Decodes a probabilistic head's raw row into its three mixtures.
pub fn decode_mixture(spec: &HeadSpec, raw: &[f64]) -> Result<MixturePrediction> {
    check_width(spec, raw.len())?;
    if spec.kind == HeadKind::Point {
        return Err(Error::invalid("point head emits no distribution"));
    }
    Ok(MixturePrediction {
        params: [
            decode_param_mixture(spec, raw, 0),
            decode_param_mixture(spec, raw, 1),
            decode_param_mixture(spec, raw, 2),
        ],
    })
}

/// Squared Euclidean distance between a point estimate and a unit-space label.
pub fn loss_mse(pred: &[f64; N_PARAMS], label: &[f64; N_PARAMS]) -> f64 {
    pred.iter()
        .zip(label.iter())
        .map(|(p, y)| (p - y) * (p - y))
        .sum()
}

/// Negative log-likelihood of a unit-space label under the three mixtures.
pub fn loss_nll_mixture(pred: &MixturePrediction, label: &[f64; N_PARAMS]) -> f64 {
    pred.params
        .iter()
        .zip(label.iter())
        .map(|(mix, &y)| -mix.log_density(y))
        .sum()
}

/// Highest-weight component means, denormalized to physical units. Ties go to
/// the lowest component index.
pub fn map_point_estimate(pred: &MixturePrediction, ranges: &PriorRanges) -> IvimParams {
    let unit = [
        pred.params[0].means[pred.params[0].argmax_weight()],
        pred.params[1].means[pred.params[1].argmax_weight()],
        pred.params[2].means[pred.params[2].argmax_weight()],
    ];
    ranges.denormalize(unit)
}

/// Draws `n` unit-space triples; parameters are sampled independently, in
/// canonical order within each draw.
pub fn sample_prediction<R: Rng + ?Sized>(
    pred: &MixturePrediction,
    n: usize,
    rng: &mut R,
) -> Vec<[f64; N_PARAMS]> {
    (0..n)
        .map(|_| {
            [
                pred.params[0].sample(rng),
                pred.params[1].sample(rng),
                pred.params[2].sample(rng),
            ]
        })
        .collect()
}

/// Scratch for one parameter's mixture terms within one sample.
struct MixScratch {
    weights: Vec<f64>,
    means: Vec<f64>,
    sigmoids: Vec<f64>,
    stddevs: Vec<f64>,
    logs: Vec<f64>,
}

impl MixScratch {
    fn new(k: usize) -> Self {
        MixScratch {
            weights: vec![0.0; k],
            means: vec![0.0; k],
            sigmoids: vec![0.0; k],
            stddevs: vec![0.0; k],
            logs: vec![0.0; k],
        }
    }
}

impl HeadSpec {
    /// Mean batch loss and its gradient with respect to the raw outputs.
    ///
    /// This is the training objective: mean over rows of (for the point head)
    /// the squared error summed over parameters, or (for probabilistic heads)
    /// the negative log-likelihood summed over parameters.
    pub fn loss_and_grad(
        &self,
        raw: &Array2<f64>,
        labels: &ArrayView2<f64>,
    ) -> Result<(f64, Array2<f64>)> {
        check_width(self, raw.ncols())?;
        if labels.ncols() != N_PARAMS || labels.nrows() != raw.nrows() {
            return Err(Error::invalid(format!(
                "labels must be {} x {}, got {} x {}",
                raw.nrows(),
                N_PARAMS,
                labels.nrows(),
                labels.ncols()
            )));
        }
        if raw.nrows() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let n = raw.nrows();
        let inv_n = 1.0 / n as f64;
        let mut grad = Array2::zeros(raw.raw_dim());
        let mut total = 0.0;
        match self.kind {
            HeadKind::Point => {
                for i in 0..n {
                    for p in 0..N_PARAMS {
                        let s = sigmoid(raw[(i, p)]);
                        let diff = s - labels[(i, p)];
                        total += diff * diff;
                        grad[(i, p)] = 2.0 * diff * s * (1.0 - s) * inv_n;
                    }
                }
            }
            HeadKind::Gaussian => {
                for i in 0..n {
                    for p in 0..N_PARAMS {
                        let m_logit = raw[(i, 2 * p)];
                        let c = raw[(i, 2 * p + 1)];
                        let mu = sigmoid(m_logit);
                        let sig = softplus(c) + SIGMA_FLOOR;
                        let y = labels[(i, p)];
                        let z = (y - mu) / sig;
                        total += sig.ln() + 0.5 * z * z + LN_SQRT_2PI;
                        // d nll / d mu = -(y - mu) / sigma^2, chained with
                        // sigmoid'; d nll / d sigma = (1 - z^2) / sigma,
                        // chained with softplus' = sigmoid(c).
                        grad[(i, 2 * p)] = -(y - mu) / (sig * sig) * mu * (1.0 - mu) * inv_n;
                        grad[(i, 2 * p + 1)] = (1.0 - z * z) / sig * sigmoid(c) * inv_n;
                    }
                }
            }
            HeadKind::Mdn => {
                let k = self.k;
                let mut scratch = MixScratch::new(k);
                for i in 0..n {
                    let row = raw.row(i);
                    let row = row.as_slice().expect("raw batch is contiguous");
                    for p in 0..N_PARAMS {
                        let block = &row[3 * k * p..3 * k * (p + 1)];
                        let y = labels[(i, p)];
                        total += mdn_param_terms(block, k, y, &mut scratch);
                        // Responsibilities are exp(log term - lse).
                        let base = 3 * k * p;
                        for j in 0..k {
                            let r = scratch.logs[j];
                            let w = scratch.weights[j];
                            let mu = scratch.means[j];
                            let sig = scratch.stddevs[j];
                            let z = (y - mu) / sig;
                            grad[(i, base + j)] = (w - r) * inv_n;
                            grad[(i, base + k + j)] =
                                -r * (y - mu) / (sig * sig) * mu * (1.0 - mu) * inv_n;
                            grad[(i, base + 2 * k + j)] =
                                r * (1.0 - z * z) / sig * scratch.sigmoids[j] * inv_n;
                        }
                    }
                }
            }
        }
        Ok((total * inv_n, grad))
    }

    /// Mean batch loss only.
    pub fn loss_batch(&self, raw: &Array2<f64>, labels: &ArrayView2<f64>) -> Result<f64> {
        Ok(self.loss_and_grad(raw, labels)?.0)
    }
}

/// Computes one parameter's NLL for one sample and fills `scratch` with the
/// decoded terms; on return `scratch.logs` holds the responsibilities.
#[allow(clippy::needless_range_loop)]
fn mdn_param_terms(block: &[f64], k: usize, y: f64, scratch: &mut MixScratch) -> f64 {
    let max_logit = block[..k].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut wsum = 0.0;
    for j in 0..k {
        let e = (block[j] - max_logit).exp();
        scratch.weights[j] = e;
        wsum += e;
    }
    let mut max_log = f64::NEG_INFINITY;
    for j in 0..k {
        scratch.weights[j] /= wsum;
        scratch.means[j] = sigmoid(block[k + j]);
        scratch.sigmoids[j] = sigmoid(block[2 * k + j]);
        scratch.stddevs[j] = softplus(block[2 * k + j]) + SIGMA_FLOOR;
        let z = (y - scratch.means[j]) / scratch.stddevs[j];
        let l = scratch.weights[j].ln() - scratch.stddevs[j].ln() - 0.5 * z * z - LN_SQRT_2PI;
        scratch.logs[j] = l;
        if l > max_log {
            max_log = l;
        }
    }
    let mut dsum = 0.0;
    for j in 0..k {
        scratch.logs[j] = (scratch.logs[j] - max_log).exp();
        dsum += scratch.logs[j];
    }
    // Normalize into responsibilities.
    for j in 0..k {
        scratch.logs[j] /= dsum;
    }
    -(max_log + dsum.ln())
}
