//! Objective construction.
//!
//! Per domain, the objective is
//!
//! ```text
//! J_d = (1 - gamma) * L_sup + gamma * L_unsup + rho * L_class
//! ```
//!
//! and across a source/target pair
//!
//! ```text
//! J = eta * J_source + (1 - eta) * J_target.
//! ```
//!
//! Zero-coefficient terms are not merely multiplied by zero — they are never
//! built: at `gamma = 0` no unsupervised graph (and no unsupervised noise) is
//! created, at `eta = 1` the target side is absent, and unit coefficients
//! skip the scaling op entirely. That makes the collapsed objectives
//! *bitwise* equal to their standalone counterparts, which the verification
//! suite checks.
//!
//! The supervised ELBO and the classification term share one encoder pass
//! and one reparameterized sample, so the classifier trains on exactly the
//! latent code the decoder saw.

use crate::distributions::{
    gumbel_softmax, kl_categorical_sum, kl_gaussian_sum, log_likelihood_mean, onehot,
    reparam_sample, straight_through,
};
use crate::error::{Error, Result};
use crate::model::{DvtModel, ModelNodes};
use crate::tape::{Node, Tape};
use crate::tensor::Tensor;

/// Objective weights. Defaults follow the reference experiments.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Hyper {
    /// Mix between supervised and unsupervised ELBOs, in [0, 1].
    pub gamma: f64,
    /// Classification weight, >= 0.
    pub rho: f64,
    /// Source weight in the source/target mix, in [0, 1].
    pub eta: f64,
    /// Relaxation temperature for categorical sampling, > 0.
    pub tau: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper { gamma: 0.1, rho: 1e4, eta: 0.5, tau: 0.5 }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be in [0, 1], got {}", self.gamma)));
        }
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::Config(format!("rho must be >= 0, got {}", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.eta) || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta must be in [0, 1], got {}", self.eta)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Multiply by a coefficient, skipping the op when the coefficient is
/// exactly 1 so unit-weight objectives stay bitwise identical to the
/// unweighted term.
pub fn scale_if(tape: &mut Tape, node: Node, c: f64) -> Result<Node> {
    if c == 1.0 {
        Ok(node)
    } else {
        tape.scale(node, c)
    }
}

/// Labeled batch plus its reparameterization noise (shape [B, J]).
pub struct SupInput<'a> {
    pub x: &'a Tensor,
    pub y: &'a [usize],
    pub eps: &'a Tensor,
}

/// How the unsupervised objective turns the relaxed class sample into the
/// selector that picks a prior component.
#[derive(Clone, Copy)]
pub enum StSelector<'a> {
    /// Straight-through discretization: forward one-hot, backward identity.
    /// The only mode training uses.
    Sample,
    /// `selector = relaxed + correction` with a constant correction tensor.
    /// With `correction = onehot0 - relaxed0` captured at a base point this
    /// is the smooth function whose exact gradient the straight-through
    /// backward computes, which makes the objective finite-difference
    /// checkable. Verification plumbing only.
    Shifted(&'a Tensor),
    /// `selector = constant` (no gradient through the selector). Used to
    /// check that substituting the realized one-hot leaves the forward value
    /// bitwise unchanged. Verification plumbing only.
    Fixed(&'a Tensor),
}

/// Unlabeled batch plus its noise draws: `eps` [B, J] for the latent sample,
/// `gumbel` [B, K] for the relaxed class sample.
pub struct UnsupInput<'a> {
    pub x: &'a Tensor,
    pub eps: &'a Tensor,
    pub gumbel: &'a Tensor,
    pub st: StSelector<'a>,
}

impl<'a> UnsupInput<'a> {
    pub fn new(x: &'a Tensor, eps: &'a Tensor, gumbel: &'a Tensor) -> Self {
        UnsupInput { x, eps, gumbel, st: StSelector::Sample }
    }
}

pub struct DomainInput<'a> {
    pub di: usize,
    pub sup: Option<SupInput<'a>>,
    pub unsup: Option<UnsupInput<'a>>,
}

/// The scalar nodes making up one domain's objective. `total` is the
/// weighted sum; the parts are unweighted and present only when built.
pub struct DomainTerms {
    pub supervised: Option<Node>,
    pub unsupervised: Option<Node>,
    pub classification: Option<Node>,
    /// Relaxed class sample inside the unsupervised term, when built with
    /// [`StSelector::Sample`] or [`StSelector::Shifted`].
    pub unsup_relaxed: Option<Node>,
    /// The component selector the unsupervised term consumed.
    pub unsup_selector: Option<Node>,
    pub total: Node,
}

/// Pieces of the unsupervised term exposed for verification.
pub struct UnsupTerms {
    pub loss: Node,
    /// The relaxed (pre-discretization) class sample; absent for
    /// [`StSelector::Fixed`].
    pub relaxed: Option<Node>,
    pub selector: Node,
}

fn batch_dims(op: &'static str, x: &Tensor, eps: &Tensor, latent: usize) -> Result<usize> {
    if x.rank() != 2 || x.rows() == 0 {
        return Err(Error::Shape { op, detail: format!("batch must be [B>0, D], got {:?}", x.shape()) });
    }
    let b = x.rows();
    if eps.shape() != [b, latent] {
        return Err(Error::Shape {
            op,
            detail: format!("noise must be [{}, {}], got {:?}", b, latent, eps.shape()),
        });
    }
    Ok(b)
}

/// Supervised ELBO (negated, batch mean): reconstruction plus the divergence
/// from q(z|x) to the prior component of the known label. Returns the loss
/// and the sampled latent for reuse by the classification term.
pub fn supervised_elbo(
    tape: &mut Tape,
    model: &DvtModel,
    nodes: &ModelNodes,
    di: usize,
    x: &Tensor,
    y: &[usize],
    eps: &Tensor,
) -> Result<(Node, Node)> {
    let (q, z) = encode_sample(tape, model, nodes, di, x, y.len(), eps, "supervised_elbo")?;
    if y.len() != x.rows() {
        return Err(Error::Shape {
            op: "supervised_elbo",
            detail: format!("{} labels for {} rows", y.len(), x.rows()),
        });
    }
    let b = x.rows();
    let head = model.decode_on(tape, nodes, di, z)?;
    let ll = log_likelihood_mean(tape, &head, x)?;
    let neg_recon = tape.scale(ll, -1.0)?;

    let oh = onehot(y, model.arch.class_count)?;
    let oh = tape.leaf(&oh)?;
    let means = tape.leaf(model.prior.means())?;
    let comp = tape.matmul(oh, means)?;
    let kl = kl_gaussian_sum(tape, &q, comp, model.prior.sigma())?;
    let kl_mean = scale_if(tape, kl, 1.0 / b as f64)?;

    let loss = tape.add(neg_recon, kl_mean)?;
    Ok((loss, z))
}

/// Unsupervised ELBO (negated, batch mean): reconstruction, the divergence
/// of the inferred class posterior from the mixture weights, and the
/// divergence of q(z|x) from the component selected by a straight-through
/// relaxed sample of that posterior.
pub fn unsupervised_elbo(
    tape: &mut Tape,
    model: &DvtModel,
    nodes: &ModelNodes,
    di: usize,
    input: &UnsupInput<'_>,
    tau: f64,
) -> Result<UnsupTerms> {
    let b = batch_dims("unsupervised_elbo", input.x, input.eps, model.arch.latent_dim)?;
    let k = model.arch.class_count;
    if input.gumbel.shape() != [b, k] {
        return Err(Error::Shape {
            op: "unsupervised_elbo",
            detail: format!(
                "gumbel noise must be [{}, {}], got {:?}",
                b,
                k,
                input.gumbel.shape()
            ),
        });
    }
    let q = model.encode_on(tape, nodes, di, input.x)?;
    let z = reparam_sample(tape, &q, input.eps)?;
    let head = model.decode_on(tape, nodes, di, z)?;
    let ll = log_likelihood_mean(tape, &head, input.x)?;
    let neg_recon = tape.scale(ll, -1.0)?;

    let logits_y = model.classify_on(tape, nodes, di, z)?;
    let kl_y = kl_categorical_sum(tape, logits_y, model.prior.pi())?;
    let kl_y_mean = scale_if(tape, kl_y, 1.0 / b as f64)?;

    let (relaxed, selector) = match input.st {
        StSelector::Sample => {
            let relaxed = gumbel_softmax(tape, logits_y, input.gumbel, tau)?;
            (Some(relaxed), straight_through(tape, relaxed)?)
        }
        StSelector::Shifted(correction) => {
            if correction.shape() != [b, k] {
                return Err(Error::Shape {
                    op: "unsupervised_elbo",
                    detail: format!(
                        "selector correction must be [{}, {}], got {:?}",
                        b,
                        k,
                        correction.shape()
                    ),
                });
            }
            let relaxed = gumbel_softmax(tape, logits_y, input.gumbel, tau)?;
            let c = tape.leaf(correction)?;
            (Some(relaxed), tape.add(relaxed, c)?)
        }
        StSelector::Fixed(selector) => {
            if selector.shape() != [b, k] {
                return Err(Error::Shape {
                    op: "unsupervised_elbo",
                    detail: format!(
                        "fixed selector must be [{}, {}], got {:?}",
                        b,
                        k,
                        selector.shape()
                    ),
                });
            }
            (None, tape.leaf(selector)?)
        }
    };
    let means = tape.leaf(model.prior.means())?;
    let comp = tape.matmul(selector, means)?;
    let kl_z = kl_gaussian_sum(tape, &q, comp, model.prior.sigma())?;
    let kl_z_mean = scale_if(tape, kl_z, 1.0 / b as f64)?;

    let partial = tape.add(neg_recon, kl_y_mean)?;
    let loss = tape.add(partial, kl_z_mean)?;
    Ok(UnsupTerms { loss, relaxed, selector })
}

/// Cross-entropy of the latent classifier at a sampled latent batch:
/// `-mean_i log softmax(classify(z))[y_i]`.
pub fn classification_loss(
    tape: &mut Tape,
    model: &DvtModel,
    nodes: &ModelNodes,
    di: usize,
    z: Node,
    y: &[usize],
) -> Result<Node> {
    let b = tape.shape(z)[0];
    if y.len() != b || b == 0 {
        return Err(Error::Shape {
            op: "classification_loss",
            detail: format!("{} labels for latent batch of {}", y.len(), b),
        });
    }
    let logits = model.classify_on(tape, nodes, di, z)?;
    let lsm = tape.log_softmax_rows(logits)?;
    let oh = onehot(y, model.arch.class_count)?;
    let oh = tape.leaf(&oh)?;
    let picked = tape.mul(lsm, oh)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / b as f64)
}

fn encode_sample(
    tape: &mut Tape,
    model: &DvtModel,
    nodes: &ModelNodes,
    di: usize,
    x: &Tensor,
    labels: usize,
    eps: &Tensor,
    op: &'static str,
) -> Result<(crate::distributions::GaussianNodes, Node)> {
    let _ = labels;
    batch_dims(op, x, eps, model.arch.latent_dim)?;
    let q = model.encode_on(tape, nodes, di, x)?;
    let z = reparam_sample(tape, &q, eps)?;
    Ok((q, z))
}

/// One domain's weighted objective. Terms with zero weight (or without data)
/// are never constructed; unit weights skip the scale op.
pub fn loss_domain(
    tape: &mut Tape,
    model: &DvtModel,
    nodes: &ModelNodes,
    input: &DomainInput<'_>,
    hyper: &Hyper,
) -> Result<DomainTerms> {
    hyper.validate()?;
    let mut supervised = None;
    let mut unsupervised = None;
    let mut classification = None;
    let mut unsup_relaxed = None;
    let mut unsup_selector = None;
    let mut weighted: Vec<Node> = Vec::new();

    if let Some(sup) = &input.sup {
        // The ELBO and the classifier share one encoding and one sample.
        let mut z_shared: Option<Node> = None;
        if hyper.gamma < 1.0 {
            let (l_sup, z) = supervised_elbo(tape, model, nodes, input.di, sup.x, sup.y, sup.eps)?;
            supervised = Some(l_sup);
            weighted.push(scale_if(tape, l_sup, 1.0 - hyper.gamma)?);
            z_shared = Some(z);
        }
        if hyper.rho > 0.0 {
            let z = match z_shared {
                Some(z) => z,
                None => {
                    let (_, z) = encode_sample(
                        tape,
                        model,
                        nodes,
                        input.di,
                        sup.x,
                        sup.y.len(),
                        sup.eps,
                        "classification_loss",
                    )?;
                    z
                }
            };
            let l_cls = classification_loss(tape, model, nodes, input.di, z, sup.y)?;
            classification = Some(l_cls);
            weighted.push(scale_if(tape, l_cls, hyper.rho)?);
        }
    }
    if hyper.gamma > 0.0 {
        if let Some(unsup) = &input.unsup {
            let terms = unsupervised_elbo(tape, model, nodes, input.di, unsup, hyper.tau)?;
            unsupervised = Some(terms.loss);
            unsup_relaxed = terms.relaxed;
            unsup_selector = Some(terms.selector);
            // Insert after the supervised term, before classification, so the
            // accumulation order matches the objective as written.
            let pos = usize::from(supervised.is_some());
            weighted.insert(pos, scale_if(tape, terms.loss, hyper.gamma)?);
        }
    }

    let mut parts = weighted.into_iter();
    let mut total = parts
        .next()
        .ok_or_else(|| Error::Invalid("objective has no terms for this domain".into()))?;
    for p in parts {
        total = tape.add(total, p)?;
    }
    Ok(DomainTerms {
        supervised,
        unsupervised,
        classification,
        unsup_relaxed,
        unsup_selector,
        total,
    })
}

/// Source/target mix. A side with zero weight must be passed as None — the
/// caller skips building (and sampling for) that side entirely.
pub fn loss_dvt(
    tape: &mut Tape,
    source: Option<Node>,
    target: Option<Node>,
    eta: f64,
) -> Result<Node> {
    if !(0.0..=1.0).contains(&eta) || !eta.is_finite() {
        return Err(Error::Config(format!("eta must be in [0, 1], got {}", eta)));
    }
    match (source, target) {
        (Some(s), Some(t)) => {
            if eta == 1.0 || eta == 0.0 {
                return Err(Error::Invalid(
                    "a zero-weight side must not be built; pass None".into(),
                ));
            }
            let ws = scale_if(tape, s, eta)?;
            let wt = scale_if(tape, t, 1.0 - eta)?;
            tape.add(ws, wt)
        }
        (Some(s), None) => {
            if eta != 1.0 {
                return Err(Error::Invalid("missing target side requires eta = 1".into()));
            }
            Ok(s)
        }
        (None, Some(t)) => {
            if eta != 0.0 {
                return Err(Error::Invalid("missing source side requires eta = 0".into()));
            }
            Ok(t)
        }
        (None, None) => Err(Error::Invalid("objective needs at least one side".into())),
    }
}
