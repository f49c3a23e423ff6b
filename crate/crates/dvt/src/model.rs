//! Model: shared encoder trunk, per-domain heads, mixture prior.
//!
//! The encoder runs shared layers first, then domain-specific layers ending
//! in a linear head that emits mean and log-variance of q(z|x) side by side
//! (width 2J, split in half). When domains disagree on input width, each gets
//! a domain-owned linear adapter up front mapping into the first shared
//! width; the trunk itself is identical tensors for every domain either way.
//! Decoders mirror the encoder widths but are entirely domain-owned, ending
//! in a likelihood head (logits for Bernoulli, mean and log-variance for
//! Gaussian). The latent classifier is one linear layer J -> K, per domain by
//! default or shared via config.
//!
//! Parameter enumeration order is part of the determinism contract: the
//! optimizer state, gradient vectors, and freeze masks all index into the
//! order produced by [`DvtModel::visit_params`].

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distributions::{DecoderHead, GaussianNodes, GmmPrior};
use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Node, Tape};
use crate::tensor::{softmax_rows, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    Bernoulli,
    Gaussian,
}

impl fmt::Display for Likelihood {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Likelihood::Bernoulli => write!(f, "bernoulli"),
            Likelihood::Gaussian => write!(f, "gaussian"),
        }
    }
}

impl std::str::FromStr for Likelihood {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bernoulli" => Ok(Likelihood::Bernoulli),
            "gaussian" => Ok(Likelihood::Gaussian),
            other => Err(Error::Config(format!(
                "unknown likelihood '{}', expected bernoulli or gaussian",
                other
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Layer {
    pub w: Tensor,
    pub b: Tensor,
}

impl Layer {
    fn new(inp: usize, out: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        use rand::Rng;
        let a = (6.0 / (inp + out) as f64).sqrt();
        let w: Vec<f64> = (0..inp * out).map(|_| rng.gen_range(-a..a)).collect();
        Layer {
            w: Tensor::new(vec![inp, out], w).expect("init draws are finite"),
            b: Tensor::zeros(vec![out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: String,
    pub input_dim: usize,
    pub likelihood: Likelihood,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArchConfig {
    pub class_count: usize,
    /// Latent width J; must be >= class_count so each class component owns an
    /// axis of the prior.
    pub latent_dim: usize,
    pub shared_hidden: Vec<usize>,
    pub domain_hidden: Vec<usize>,
    /// One classifier shared across domains instead of one per domain.
    pub shared_classifier: bool,
    /// Prior component mean magnitude along its one-hot axis.
    pub mu_scale: f64,
    /// Isotropic prior component deviation, shared across components.
    pub prior_sigma: f64,
    pub domains: Vec<DomainSpec>,
}

impl ArchConfig {
    /// Defaults sized for the small synthetic experiments; larger runs
    /// override the widths in config.
    pub fn defaults(class_count: usize, domains: Vec<DomainSpec>) -> Self {
        ArchConfig {
            class_count,
            latent_dim: class_count.max(8),
            shared_hidden: vec![16, 16],
            domain_hidden: vec![16],
            shared_classifier: false,
            mu_scale: 10.0,
            prior_sigma: 0.1,
            domains,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DomainNet {
    pub spec: DomainSpec,
    /// Present only when domain input widths differ model-wide.
    pub input_adapter: Option<Layer>,
    pub encoder: Vec<Layer>,
    pub enc_head: Layer,
    /// None when the model uses a shared classifier.
    pub classifier: Option<Layer>,
    pub decoder: Vec<Layer>,
    pub dec_head: Layer,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DvtModel {
    pub arch: ArchConfig,
    pub prior: GmmPrior,
    pub shared: Vec<Layer>,
    pub shared_classifier: Option<Layer>,
    pub domains: Vec<DomainNet>,
}

/// Deterministic initialization: weights uniform in (-a, a) with
/// a = sqrt(6 / (fan_in + fan_out)), biases zero, drawn from the seed's init
/// stream in canonical parameter order.
pub fn build_model(arch: &ArchConfig, seed: u64) -> Result<DvtModel> {
    if arch.class_count < 2 {
        return Err(Error::Config("class_count must be at least 2".into()));
    }
    if arch.domains.is_empty() {
        return Err(Error::Config("at least one domain is required".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for d in &arch.domains {
        if d.input_dim == 0 {
            return Err(Error::Config(format!("domain '{}' has input_dim 0", d.id)));
        }
        if !seen.insert(d.id.as_str()) {
            return Err(Error::Config(format!("duplicate domain id '{}'", d.id)));
        }
    }
    let prior = GmmPrior::vertex(
        arch.class_count,
        arch.latent_dim,
        arch.mu_scale,
        arch.prior_sigma,
        None,
    )?;

    let d0 = arch.domains[0].input_dim;
    let heterogeneous = arch.domains.iter().any(|d| d.input_dim != d0);
    if heterogeneous && arch.shared_hidden.is_empty() {
        return Err(Error::Config(
            "domains with different input dims need a nonempty shared trunk".into(),
        ));
    }

    let mut rng = rng::stream(seed, rng::salt::INIT);

    // Shared trunk widths: homogeneous inputs feed the trunk directly;
    // heterogeneous inputs go through per-domain adapters into shared_hidden[0].
    let trunk_chain: Vec<usize> = if heterogeneous {
        arch.shared_hidden.clone()
    } else {
        std::iter::once(d0).chain(arch.shared_hidden.iter().copied()).collect()
    };
    let shared: Vec<Layer> = trunk_chain
        .windows(2)
        .map(|w| Layer::new(w[0], w[1], &mut rng))
        .collect();
    let trunk_out = *trunk_chain.last().expect("trunk chain nonempty");

    let shared_classifier = if arch.shared_classifier {
        Some(Layer::new(arch.latent_dim, arch.class_count, &mut rng))
    } else {
        None
    };

    let mut domains = Vec::with_capacity(arch.domains.len());
    for spec in &arch.domains {
        let input_adapter = if heterogeneous {
            Some(Layer::new(spec.input_dim, arch.shared_hidden[0], &mut rng))
        } else {
            None
        };
        let enc_chain: Vec<usize> = std::iter::once(trunk_out)
            .chain(arch.domain_hidden.iter().copied())
            .collect();
        let encoder: Vec<Layer> =
            enc_chain.windows(2).map(|w| Layer::new(w[0], w[1], &mut rng)).collect();
        let enc_head = Layer::new(*enc_chain.last().unwrap(), 2 * arch.latent_dim, &mut rng);
        let classifier = if arch.shared_classifier {
            None
        } else {
            Some(Layer::new(arch.latent_dim, arch.class_count, &mut rng))
        };
        let dec_chain: Vec<usize> = std::iter::once(arch.latent_dim)
            .chain(arch.domain_hidden.iter().rev().copied())
            .chain(arch.shared_hidden.iter().rev().copied())
            .collect();
        let decoder: Vec<Layer> =
            dec_chain.windows(2).map(|w| Layer::new(w[0], w[1], &mut rng)).collect();
        let head_out = match spec.likelihood {
            Likelihood::Bernoulli => spec.input_dim,
            Likelihood::Gaussian => 2 * spec.input_dim,
        };
        let dec_head = Layer::new(*dec_chain.last().unwrap(), head_out, &mut rng);
        domains.push(DomainNet {
            spec: spec.clone(),
            input_adapter,
            encoder,
            enc_head,
            classifier,
            decoder,
            dec_head,
        });
    }

    let model = DvtModel { arch: arch.clone(), prior, shared, shared_classifier, domains };
    model.validate()?;
    Ok(model)
}

/// Mirror of the model's parameter layout on a tape.
pub struct LayerNodes {
    pub w: Node,
    pub b: Node,
}

pub struct DomainNodes {
    pub input_adapter: Option<LayerNodes>,
    pub encoder: Vec<LayerNodes>,
    pub enc_head: LayerNodes,
    pub classifier: Option<LayerNodes>,
    pub decoder: Vec<LayerNodes>,
    pub dec_head: LayerNodes,
}

pub struct ModelNodes {
    /// Every parameter leaf in canonical order; aligns with
    /// [`DvtModel::visit_params`].
    pub flat: Vec<Node>,
    pub shared: Vec<LayerNodes>,
    pub shared_classifier: Option<LayerNodes>,
    pub domains: Vec<DomainNodes>,
}

impl DvtModel {
    pub fn validate(&self) -> Result<()> {
        if self.prior.class_count() != self.arch.class_count
            || self.prior.latent_dim() != self.arch.latent_dim
        {
            return Err(Error::Invalid("model: prior dims disagree with architecture".into()));
        }
        if self.domains.len() != self.arch.domains.len() {
            return Err(Error::Invalid("model: domain list disagrees with architecture".into()));
        }
        for d in &self.domains {
            let chain_in = match &d.input_adapter {
                Some(a) => {
                    if a.in_dim() != d.spec.input_dim {
                        return Err(Error::Invalid(format!(
                            "model: adapter input {} != domain '{}' input {}",
                            a.in_dim(),
                            d.spec.id,
                            d.spec.input_dim
                        )));
                    }
                    a.out_dim()
                }
                None => d.spec.input_dim,
            };
            let mut w = chain_in;
            for l in self.shared.iter().chain(&d.encoder) {
                if l.in_dim() != w {
                    return Err(Error::Invalid(format!(
                        "model: encoder width {} != expected {} in domain '{}'",
                        l.in_dim(),
                        w,
                        d.spec.id
                    )));
                }
                w = l.out_dim();
            }
            if d.enc_head.in_dim() != w || d.enc_head.out_dim() != 2 * self.arch.latent_dim {
                return Err(Error::Invalid(format!(
                    "model: encoder head of domain '{}' must map {} -> {}",
                    d.spec.id,
                    w,
                    2 * self.arch.latent_dim
                )));
            }
            let mut w = self.arch.latent_dim;
            for l in &d.decoder {
                if l.in_dim() != w {
                    return Err(Error::Invalid(format!(
                        "model: decoder width {} != expected {} in domain '{}'",
                        l.in_dim(),
                        w,
                        d.spec.id
                    )));
                }
                w = l.out_dim();
            }
            let head_out = match d.spec.likelihood {
                Likelihood::Bernoulli => d.spec.input_dim,
                Likelihood::Gaussian => 2 * d.spec.input_dim,
            };
            if d.dec_head.in_dim() != w || d.dec_head.out_dim() != head_out {
                return Err(Error::Invalid(format!(
                    "model: decoder head of domain '{}' must map {} -> {}",
                    d.spec.id, w, head_out
                )));
            }
            match (&d.classifier, &self.shared_classifier) {
                (Some(c), None) | (None, Some(c)) => {
                    if c.in_dim() != self.arch.latent_dim || c.out_dim() != self.arch.class_count {
                        return Err(Error::Invalid("model: classifier dims wrong".into()));
                    }
                }
                _ => {
                    return Err(Error::Invalid(
                        "model: exactly one of per-domain or shared classifier must exist".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    pub fn domain_index(&self, id: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d.spec.id == id)
            .ok_or_else(|| {
                let known: Vec<&str> = self.domains.iter().map(|d| d.spec.id.as_str()).collect();
                Error::Invalid(format!("unknown domain '{}', model has {:?}", id, known))
            })
    }

    /// Copy one domain's trained stack onto another domain's slot, layer by
    /// layer, skipping any layer whose shape differs (input adapters and
    /// likelihood heads of domains with different input widths keep their
    /// own values). This seeds a freeze-and-transfer run: the receiving
    /// domain starts from everything the donor's training learned instead
    /// of from random initialization.
    pub fn warm_start(&mut self, from: &str, to: &str) -> Result<()> {
        let fi = self.domain_index(from)?;
        let ti = self.domain_index(to)?;
        if fi == ti {
            return Err(Error::Invalid(format!("warm_start: '{}' onto itself", from)));
        }
        let donor = self.domains[fi].clone();
        let recv = &mut self.domains[ti];
        let copy = |src: &Layer, dst: &mut Layer| {
            if src.w.shape() == dst.w.shape() && src.b.shape() == dst.b.shape() {
                *dst = src.clone();
            }
        };
        if let (Some(a), Some(b)) = (&donor.input_adapter, recv.input_adapter.as_mut()) {
            copy(a, b);
        }
        for (s, d) in donor.encoder.iter().zip(recv.encoder.iter_mut()) {
            copy(s, d);
        }
        copy(&donor.enc_head, &mut recv.enc_head);
        if let (Some(c), Some(d)) = (&donor.classifier, recv.classifier.as_mut()) {
            copy(c, d);
        }
        for (s, d) in donor.decoder.iter().zip(recv.decoder.iter_mut()) {
            copy(s, d);
        }
        copy(&donor.dec_head, &mut recv.dec_head);
        Ok(())
    }

    // ── Parameter enumeration ───────────────────────────────────────────

    fn visit_layers<'a>(&'a self, mut f: impl FnMut(&'a Layer, bool)) {
        for l in &self.shared {
            f(l, true);
        }
        if let Some(c) = &self.shared_classifier {
            f(c, true);
        }
        for d in &self.domains {
            if let Some(a) = &d.input_adapter {
                f(a, false);
            }
            for l in &d.encoder {
                f(l, false);
            }
            f(&d.enc_head, false);
            if let Some(c) = &d.classifier {
                f(c, false);
            }
            for l in &d.decoder {
                f(l, false);
            }
            f(&d.dec_head, false);
        }
    }

    /// Canonical order: shared trunk, shared classifier, then per domain:
    /// adapter, encoder, encoder head, classifier, decoder, decoder head;
    /// weights before biases within each layer.
    pub fn visit_params(&self, mut f: impl FnMut(&Tensor)) {
        self.visit_layers(|l, _| {
            f(&l.w);
            f(&l.b);
        });
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&mut Tensor)) {
        // Mirror of visit_layers; kept in sync by the layout test below.
        for l in &mut self.shared {
            f(&mut l.w);
            f(&mut l.b);
        }
        if let Some(c) = &mut self.shared_classifier {
            f(&mut c.w);
            f(&mut c.b);
        }
        for d in &mut self.domains {
            if let Some(a) = &mut d.input_adapter {
                f(&mut a.w);
                f(&mut a.b);
            }
            for l in &mut d.encoder {
                f(&mut l.w);
                f(&mut l.b);
            }
            f(&mut d.enc_head.w);
            f(&mut d.enc_head.b);
            if let Some(c) = &mut d.classifier {
                f(&mut c.w);
                f(&mut c.b);
            }
            for l in &mut d.decoder {
                f(&mut l.w);
                f(&mut l.b);
            }
            f(&mut d.dec_head.w);
            f(&mut d.dec_head.b);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_| n += 1);
        n
    }

    /// True at positions whose parameter is shared across domains.
    pub fn shared_mask(&self) -> Vec<bool> {
        let mut mask = Vec::new();
        self.visit_layers(|_, shared| {
            mask.push(shared);
            mask.push(shared);
        });
        mask
    }

    pub fn param_vector(&self) -> Vec<f64> {
        let mut v = Vec::new();
        self.visit_params(|t| v.extend_from_slice(t.data()));
        v
    }

    pub fn set_param_vector(&mut self, v: &[f64]) -> Result<()> {
        let total: usize = {
            let mut n = 0;
            self.visit_params(|t| n += t.len());
            n
        };
        if v.len() != total {
            return Err(Error::Shape {
                op: "set_param_vector",
                detail: format!("{} values for {} parameters", v.len(), total),
            });
        }
        let mut off = 0;
        self.visit_params_mut(|t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&v[off..off + n]);
            off += n;
        });
        Ok(())
    }

    // ── Tape forward ────────────────────────────────────────────────────

    /// Register every parameter as a tape leaf, preserving canonical order in
    /// `flat`.
    pub fn register(&self, tape: &mut Tape) -> Result<ModelNodes> {
        let mut flat = Vec::with_capacity(self.param_count());
        let layer = |tape: &mut Tape, l: &Layer, flat: &mut Vec<Node>| -> Result<LayerNodes> {
            let w = tape.leaf(&l.w)?;
            let b = tape.leaf(&l.b)?;
            flat.push(w);
            flat.push(b);
            Ok(LayerNodes { w, b })
        };
        let mut shared = Vec::with_capacity(self.shared.len());
        for l in &self.shared {
            shared.push(layer(tape, l, &mut flat)?);
        }
        let shared_classifier = match &self.shared_classifier {
            Some(c) => Some(layer(tape, c, &mut flat)?),
            None => None,
        };
        let mut domains = Vec::with_capacity(self.domains.len());
        for d in &self.domains {
            let input_adapter = match &d.input_adapter {
                Some(a) => Some(layer(tape, a, &mut flat)?),
                None => None,
            };
            let mut encoder = Vec::with_capacity(d.encoder.len());
            for l in &d.encoder {
                encoder.push(layer(tape, l, &mut flat)?);
            }
            let enc_head = layer(tape, &d.enc_head, &mut flat)?;
            let classifier = match &d.classifier {
                Some(c) => Some(layer(tape, c, &mut flat)?),
                None => None,
            };
            let mut decoder = Vec::with_capacity(d.decoder.len());
            for l in &d.decoder {
                decoder.push(layer(tape, l, &mut flat)?);
            }
            let dec_head = layer(tape, &d.dec_head, &mut flat)?;
            domains.push(DomainNodes {
                input_adapter,
                encoder,
                enc_head,
                classifier,
                decoder,
                dec_head,
            });
        }
        Ok(ModelNodes { flat, shared, shared_classifier, domains })
    }

    fn linear(tape: &mut Tape, x: Node, l: &LayerNodes) -> Result<Node> {
        let h = tape.matmul(x, l.w)?;
        tape.add(h, l.b)
    }

    fn linear_relu(tape: &mut Tape, x: Node, l: &LayerNodes) -> Result<Node> {
        let h = Self::linear(tape, x, l)?;
        tape.relu(h)
    }

    /// q(z|x) for one domain's batch: shared trunk first (behind the adapter
    /// when present), then domain layers, then the 2J head split into mean
    /// and log-variance.
    pub fn encode_on(
        &self,
        tape: &mut Tape,
        nodes: &ModelNodes,
        di: usize,
        x: &Tensor,
    ) -> Result<GaussianNodes> {
        let d = &self.domains[di];
        if x.rank() != 2 || x.cols() != d.spec.input_dim {
            return Err(Error::Shape {
                op: "encode",
                detail: format!(
                    "domain '{}' expects [B, {}], got {:?}",
                    d.spec.id,
                    d.spec.input_dim,
                    x.shape()
                ),
            });
        }
        let mut h = tape.leaf(x)?;
        if let Some(a) = &nodes.domains[di].input_adapter {
            h = Self::linear_relu(tape, h, a)?;
        }
        for l in &nodes.shared {
            h = Self::linear_relu(tape, h, l)?;
        }
        for l in &nodes.domains[di].encoder {
            h = Self::linear_relu(tape, h, l)?;
        }
        let head = Self::linear(tape, h, &nodes.domains[di].enc_head)?;
        let j = self.arch.latent_dim;
        let mean = tape.narrow_cols(head, 0, j)?;
        let log_var = tape.narrow_cols(head, j, j)?;
        Ok(GaussianNodes { mean, log_var })
    }

    /// Class logits from a latent batch.
    pub fn classify_on(
        &self,
        tape: &mut Tape,
        nodes: &ModelNodes,
        di: usize,
        z: Node,
    ) -> Result<Node> {
        let c = nodes.domains[di]
            .classifier
            .as_ref()
            .or(nodes.shared_classifier.as_ref())
            .expect("validate() guarantees a classifier");
        Self::linear(tape, z, c)
    }

    /// Likelihood head from a latent batch.
    pub fn decode_on(
        &self,
        tape: &mut Tape,
        nodes: &ModelNodes,
        di: usize,
        z: Node,
    ) -> Result<DecoderHead> {
        let d = &self.domains[di];
        let mut h = z;
        for l in &nodes.domains[di].decoder {
            h = Self::linear_relu(tape, h, l)?;
        }
        let head = Self::linear(tape, h, &nodes.domains[di].dec_head)?;
        Ok(match d.spec.likelihood {
            Likelihood::Bernoulli => DecoderHead::BernoulliLogits(head),
            Likelihood::Gaussian => {
                let dd = d.spec.input_dim;
                let mean = tape.narrow_cols(head, 0, dd)?;
                let log_var = tape.narrow_cols(head, dd, dd)?;
                DecoderHead::Gaussian { mean, log_var }
            }
        })
    }

    // ── Evaluation conveniences (throwaway tape, no sampling) ───────────

    /// Posterior mean and log-variance for a batch.
    pub fn encode_mean(&self, domain: &str, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let di = self.domain_index(domain)?;
        let mut tape = Tape::new();
        let nodes = self.register(&mut tape)?;
        let q = self.encode_on(&mut tape, &nodes, di, x)?;
        Ok((tape.tensor(q.mean), tape.tensor(q.log_var)))
    }

    /// Class probabilities from the posterior mean.
    pub fn predict_probs(&self, domain: &str, x: &Tensor) -> Result<Tensor> {
        let di = self.domain_index(domain)?;
        let mut tape = Tape::new();
        let nodes = self.register(&mut tape)?;
        let q = self.encode_on(&mut tape, &nodes, di, x)?;
        let logits = self.classify_on(&mut tape, &nodes, di, q.mean)?;
        Ok(softmax_rows(&tape.tensor(logits)))
    }

    /// Class probabilities straight from a latent batch.
    pub fn classify_probs(&self, domain: &str, z: &Tensor) -> Result<Tensor> {
        let di = self.domain_index(domain)?;
        if z.rank() != 2 || z.cols() != self.arch.latent_dim {
            return Err(Error::Shape {
                op: "classify_probs",
                detail: format!("expected [B, {}], got {:?}", self.arch.latent_dim, z.shape()),
            });
        }
        let mut tape = Tape::new();
        let nodes = self.register(&mut tape)?;
        let zn = tape.leaf(z)?;
        let logits = self.classify_on(&mut tape, &nodes, di, zn)?;
        Ok(softmax_rows(&tape.tensor(logits)))
    }

    /// Decoder mean for a latent batch: sigmoid of the logits for Bernoulli,
    /// the mean head for Gaussian.
    pub fn decode_mean(&self, domain: &str, z: &Tensor) -> Result<Tensor> {
        let di = self.domain_index(domain)?;
        if z.rank() != 2 || z.cols() != self.arch.latent_dim {
            return Err(Error::Shape {
                op: "decode_mean",
                detail: format!("expected [B, {}], got {:?}", self.arch.latent_dim, z.shape()),
            });
        }
        let mut tape = Tape::new();
        let nodes = self.register(&mut tape)?;
        let zn = tape.leaf(z)?;
        match self.decode_on(&mut tape, &nodes, di, zn)? {
            DecoderHead::BernoulliLogits(l) => {
                let p = tape.sigmoid(l)?;
                Ok(tape.tensor(p))
            }
            DecoderHead::Gaussian { mean, .. } => Ok(tape.tensor(mean)),
        }
    }
}

// ── Checkpoints ─────────────────────────────────────────────────────────

pub const CHECKPOINT_FORMAT: &str = "dvt-checkpoint-v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub regime: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    meta: CheckpointMeta,
    model: DvtModel,
}

/// Serialize model + metadata to JSON, written atomically (temp file in the
/// same directory, then rename). f64 round-trips exactly through the JSON
/// encoding, so save/load is bit-exact.
pub fn save_checkpoint(model: &DvtModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        meta: meta.clone(),
        model: model.clone(),
    };
    let bytes = serde_json::to_vec(&file)?;
    crate::ioutil::write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(DvtModel, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::Data(format!(
            "{}: format '{}', expected '{}'",
            path.display(),
            file.format,
            CHECKPOINT_FORMAT
        )));
    }
    file.model.validate()?;
    Ok((file.model, file.meta))
}
