//! Distribution primitives used by the objectives.
//!
//! Tape-bound builders (KL terms, reparameterized samples, Gumbel-Softmax)
//! take and return [`Node`]s so gradients flow; sampling helpers draw from
//! caller-provided seeded streams and return plain tensors. Nothing here
//! draws randomness internally: noise is always injected, which is what makes
//! training traces reproducible and the losses checkable by finite
//! differences at fixed noise.


use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Node, Tape};
use crate::tensor::Tensor;

/// Diagonal Gaussian over a batch: `mean` and `log_var` are both `[B, J]`
/// nodes on the same tape.
#[derive(Copy, Clone)]
pub struct GaussianNodes {
    pub mean: Node,
    pub log_var: Node,
}

/// Gaussian-mixture latent prior: component k is N(means[k], sigma^2 I), with
/// mixture weights pi. One component per class.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GmmPrior {
    pi: Vec<f64>,
    means: Tensor,
    sigma: f64,
}

impl GmmPrior {
    pub fn new(pi: Vec<f64>, means: Tensor, sigma: f64) -> Result<Self> {
        if means.rank() != 2 || means.rows() != pi.len() {
            return Err(Error::Shape {
                op: "GmmPrior::new",
                detail: format!("{} weights vs means shape {:?}", pi.len(), means.shape()),
            });
        }
        if pi.is_empty() {
            return Err(Error::Invalid("GmmPrior: no components".into()));
        }
        if pi.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::Invalid("GmmPrior: weights must be strictly positive".into()));
        }
        let s: f64 = pi.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!("GmmPrior: weights sum to {}, not 1", s)));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Invalid(format!("GmmPrior: sigma {} must be positive", sigma)));
        }
        Ok(GmmPrior { pi, means, sigma })
    }

    /// Standard layout: component k sits at `mu_scale * e_k`, the scaled
    /// k-th one-hot vertex, which keeps class components well separated.
    /// Requires `latent_dim >= class_count` so each class owns an axis.
    pub fn vertex(
        class_count: usize,
        latent_dim: usize,
        mu_scale: f64,
        sigma: f64,
        pi: Option<Vec<f64>>,
    ) -> Result<Self> {
        if latent_dim < class_count {
            return Err(Error::Invalid(format!(
                "latent dim {} is smaller than class count {}",
                latent_dim, class_count
            )));
        }
        let mut data = vec![0.0; class_count * latent_dim];
        for k in 0..class_count {
            data[k * latent_dim + k] = mu_scale;
        }
        let means = Tensor::new(vec![class_count, latent_dim], data)?;
        let pi = pi.unwrap_or_else(|| vec![1.0 / class_count as f64; class_count]);
        GmmPrior::new(pi, means, sigma)
    }

    pub fn class_count(&self) -> usize {
        self.pi.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.means.cols()
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    /// `[K, J]` component means.
    pub fn means(&self) -> &Tensor {
        &self.means
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// One-hot rows: `[labels.len(), k]`.
pub fn onehot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Invalid(format!("label {} out of range for {} classes", y, k)));
        }
        data[i * k + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), k], data)
}

/// `z = mean + exp(log_var / 2) * eps`, elementwise. `eps` must match the
/// `[B, J]` shape of the distribution.
pub fn reparam_sample(tape: &mut Tape, q: &GaussianNodes, eps: &Tensor) -> Result<Node> {
    if tape.shape(q.mean) != eps.shape() {
        return Err(Error::Shape {
            op: "reparam_sample",
            detail: format!("eps shape {:?} vs mean {:?}", eps.shape(), tape.shape(q.mean)),
        });
    }
    let half_lv = tape.scale(q.log_var, 0.5)?;
    let sigma = tape.exp(half_lv)?;
    let eps_node = tape.leaf(eps)?;
    let noise = tape.mul(sigma, eps_node)?;
    tape.add(q.mean, noise)
}

/// Sum over the batch of `KL(q_b || N(comp_means_b, sigma^2 I))` in closed
/// form:
///
///   1/2 * sum_j [ log sigma^2 - log_var_j + exp(log_var_j)/sigma^2
///                 + (mean_j - comp_j)^2 / sigma^2 - 1 ]
///
/// `comp_means` is a `[B, J]` node carrying each row's prior component mean,
/// so gradients flow into it (straight-through component selection relies on
/// that). Callers divide by B for a batch mean.
pub fn kl_gaussian_sum(
    tape: &mut Tape,
    q: &GaussianNodes,
    comp_means: Node,
    sigma: f64,
) -> Result<Node> {
    if !(sigma > 0.0) {
        return Err(Error::Invalid(format!("kl_gaussian_sum: sigma {} must be positive", sigma)));
    }
    let shape = tape.shape(q.mean).to_vec();
    if tape.shape(q.log_var) != shape.as_slice() || tape.shape(comp_means) != shape.as_slice() {
        return Err(Error::Shape {
            op: "kl_gaussian_sum",
            detail: format!(
                "mean {:?}, log_var {:?}, components {:?}",
                shape,
                tape.shape(q.log_var),
                tape.shape(comp_means)
            ),
        });
    }
    let n = shape.iter().product::<usize>() as f64;
    let inv_var = 1.0 / (sigma * sigma);

    let e = tape.exp(q.log_var)?;
    let se = tape.sum(e)?;
    let t1 = tape.scale(se, inv_var)?;

    let d = tape.sub(q.mean, comp_means)?;
    let sq = tape.square(d)?;
    let ssq = tape.sum(sq)?;
    let t2 = tape.scale(ssq, inv_var)?;

    let slv = tape.sum(q.log_var)?;
    let t3 = tape.scale(slv, -1.0)?;

    let s = tape.add(t1, t2)?;
    let s = tape.add(s, t3)?;
    let s = tape.add_scalar(s, n * ((sigma * sigma).ln() - 1.0))?;
    tape.scale(s, 0.5)
}

/// Sum over the batch of `KL(softmax(logits)_b || p)` where `p` is a fixed
/// categorical distribution. Errors if any `p_k` is nonpositive: softmax
/// masses are strictly positive, so a zero-mass component makes the KL
/// infinite.
pub fn kl_categorical_sum(tape: &mut Tape, logits: Node, p: &[f64]) -> Result<Node> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[1] != p.len() {
        return Err(Error::Shape {
            op: "kl_categorical_sum",
            detail: format!("logits {:?} vs {} reference masses", shape, p.len()),
        });
    }
    if let Some(i) = p.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::Invalid(format!(
            "kl_categorical_sum: reference mass {} for class {} (softmax posteriors put mass everywhere)",
            p[i], i
        )));
    }
    let log_p: Vec<f64> = p.iter().map(|v| v.ln()).collect();
    let q = tape.softmax_rows(logits)?;
    let lq = tape.log_softmax_rows(logits)?;
    let lp = tape.leaf(&Tensor::new(vec![p.len()], log_p)?)?;
    let diff = tape.sub(lq, lp)?;
    let prod = tape.mul(q, diff)?;
    tape.sum(prod)
}

/// Standard normal draws shaped `[rows, cols]`.
pub fn sample_standard_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("normal draws are finite")
}

/// Standard Gumbel draws `g = -log(-log(u))`, `u` uniform on (0, 1).
pub fn sample_gumbel(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| {
            let u: f64 = Open01.sample(rng);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("gumbel draws are finite")
}

/// Relaxed categorical sample: `softmax((logits + g) / tau)` per row.
/// As tau -> 0 rows approach one-hot; tau is strictly positive.
pub fn gumbel_softmax(tape: &mut Tape, logits: Node, g: &Tensor, tau: f64) -> Result<Node> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Invalid(format!("gumbel_softmax: tau {} must be positive", tau)));
    }
    if tape.shape(logits) != g.shape() {
        return Err(Error::Shape {
            op: "gumbel_softmax",
            detail: format!("logits {:?} vs noise {:?}", tape.shape(logits), g.shape()),
        });
    }
    let gn = tape.leaf(g)?;
    let shifted = tape.add(logits, gn)?;
    let scaled = tape.scale(shifted, 1.0 / tau)?;
    tape.softmax_rows(scaled)
}

/// Straight-through discretization of a relaxed sample: one-hot forward,
/// identity backward.
pub fn straight_through(tape: &mut Tape, relaxed: Node) -> Result<Node> {
    tape.straight_through_onehot(relaxed)
}

/// Decoder output head. Bernoulli carries pre-sigmoid logits (the mean is
/// `sigmoid(logits)`); the stable softplus form below never takes `log` of a
/// saturated probability. Gaussian carries mean and log variance.
#[derive(Copy, Clone)]
pub enum DecoderHead {
    BernoulliLogits(Node),
    Gaussian { mean: Node, log_var: Node },
}

/// Batch mean of `log p(x | head)`, summed over feature dims. Bernoulli
/// targets must lie in [0, 1].
pub fn log_likelihood_mean(tape: &mut Tape, head: &DecoderHead, x: &Tensor) -> Result<Node> {
    if x.rank() != 2 || x.rows() == 0 {
        return Err(Error::Shape {
            op: "log_likelihood_mean",
            detail: format!("x must be a nonempty [B, D] batch, got {:?}", x.shape()),
        });
    }
    let b = x.rows() as f64;
    match *head {
        DecoderHead::BernoulliLogits(l) => {
            if tape.shape(l) != x.shape() {
                return Err(Error::Shape {
                    op: "log_likelihood_mean",
                    detail: format!("logits {:?} vs x {:?}", tape.shape(l), x.shape()),
                });
            }
            if let Some(i) = x.data().iter().position(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Invalid(format!(
                    "bernoulli target element {} is {}, not in [0, 1]",
                    i,
                    x.data()[i]
                )));
            }
            // log p = x log sigmoid(l) + (1-x) log sigmoid(-l)
            //       = -[x softplus(-l) + (1-x) softplus(l)]
            let xn = tape.leaf(x)?;
            let ones: Vec<f64> = x.data().iter().map(|&v| 1.0 - v).collect();
            let xc = tape.leaf(&Tensor::new(x.shape().to_vec(), ones)?)?;
            let nl = tape.scale(l, -1.0)?;
            let sp_n = tape.softplus(nl)?;
            let sp_p = tape.softplus(l)?;
            let a = tape.mul(xn, sp_n)?;
            let c = tape.mul(xc, sp_p)?;
            let s = tape.add(a, c)?;
            let total = tape.sum(s)?;
            tape.scale(total, -1.0 / b)
        }
        DecoderHead::Gaussian { mean, log_var } => {
            if tape.shape(mean) != x.shape() || tape.shape(log_var) != x.shape() {
                return Err(Error::Shape {
                    op: "log_likelihood_mean",
                    detail: format!(
                        "mean {:?}, log_var {:?} vs x {:?}",
                        tape.shape(mean),
                        tape.shape(log_var),
                        x.shape()
                    ),
                });
            }
            // log p = -1/2 sum_j [ log 2pi + lv_j + (x_j - mu_j)^2 / exp(lv_j) ]
            let xn = tape.leaf(x)?;
            let d = tape.sub(xn, mean)?;
            let sq = tape.square(d)?;
            let var = tape.exp(log_var)?;
            let q = tape.div(sq, var)?;
            let inner = tape.add(q, log_var)?;
            let s = tape.sum(inner)?;
            let d_dims = x.len() as f64;
            let s = tape.add_scalar(s, d_dims * (2.0 * std::f64::consts::PI).ln())?;
            tape.scale(s, -0.5 / b)
        }
    }
}
