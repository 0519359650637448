//! Full pipelines behind the [`Segmenter`] trait, selected by method name.
//!
//! `dgquant`: encode, split, decorrelate, quantize both halves against the
//! grouped codebooks, decorrelate again, decode without skips, plus the
//! prototype and code-assignment losses on the category half.
//! `baseline`: the same encoder with a 1x1 pixel classifier and cross-entropy.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, Backward, Graph, Var};
use crate::batch::{ImageBatch, LabelBatch};
use crate::config::ModelConfig;
use crate::decorrelation::ProjectionParams;
use crate::encoder::{check_input, Encoder, EncoderRegistry};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ParamStore};
use crate::prototypes::{domain_loss_var, PrototypeSet};
use crate::quantizer::{
    assignment_weights, code_loss_var, gumbel_softmax_var, mahalanobis_logits_var, mean_max_prob,
    predict_labels, quantize_hard, quantize_soft_var, AssignmentProbs, GroupedCodebook,
};
use crate::reconstruction::{recon_loss_var, Decoder};
use crate::splitter::split_var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Gumbel noise on, soft quantization.
    Train,
    /// Noise off, hard argmax quantization.
    Eval,
}

/// Named scalar losses and their weighted total. The baseline puts its
/// cross-entropy in `total` and leaves the rest at zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub mse: f64,
    pub corrcoef_pre: f64,
    pub corrcoef_post: f64,
    pub domain: f64,
    pub code: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("mse", self.mse),
            ("corrcoef_pre", self.corrcoef_pre),
            ("corrcoef_post", self.corrcoef_post),
            ("domain", self.domain),
            ("code", self.code),
            ("total", self.total),
        ]
    }

    /// Error naming the first non-finite term.
    pub fn check_finite(&self) -> Result<()> {
        match self.terms().into_iter().find(|(_, v)| !v.is_finite()) {
            Some((term, _)) => Err(Error::NonFinite { term: term.into() }),
            None => Ok(()),
        }
    }

    pub fn accumulate(&mut self, other: &LossBundle) {
        self.mse += other.mse;
        self.corrcoef_pre += other.corrcoef_pre;
        self.corrcoef_post += other.corrcoef_post;
        self.domain += other.domain;
        self.code += other.code;
        self.total += other.total;
    }

    pub fn scaled(&self, c: f64) -> LossBundle {
        LossBundle {
            mse: self.mse * c,
            corrcoef_pre: self.corrcoef_pre * c,
            corrcoef_post: self.corrcoef_post * c,
            domain: self.domain * c,
            code: self.code * c,
            total: self.total * c,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub losses: LossBundle,
    pub predicted: LabelBatch,
    /// Current `sigma_gamma^2`, quantizing methods only.
    pub var_gamma: Option<f64>,
    pub tau: Option<f64>,
    /// Mean over pixels of the largest category assignment probability.
    pub mean_max_prob: Option<f64>,
}

pub trait Segmenter: Send + Sync {
    fn method(&self) -> &'static str;

    fn config(&self) -> &ModelConfig;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    /// Record the whole loss on `g`; returns the total and the readouts.
    fn build(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: &ImageBatch,
        labels: &LabelBatch,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, ForwardOutput)>;

    /// Labels only, evaluation mode.
    fn infer(&self, g: &mut Graph, p: &Bound, x: &ImageBatch) -> Result<LabelBatch>;
}

pub type MethodBuilder = fn(&ModelConfig, &EncoderRegistry) -> Result<Box<dyn Segmenter>>;

pub struct MethodRegistry {
    builders: BTreeMap<&'static str, MethodBuilder>,
    encoders: EncoderRegistry,
}

impl Default for MethodRegistry {
    fn default() -> Self {
        let mut r = Self {
            builders: BTreeMap::new(),
            encoders: EncoderRegistry::default(),
        };
        r.register("dgquant", |cfg, enc| Ok(Box::new(DgQuant::new(cfg, enc)?)));
        r.register("baseline", |cfg, enc| {
            Ok(Box::new(Baseline::new(cfg, enc)?))
        });
        r
    }
}

impl MethodRegistry {
    pub fn register(&mut self, name: &'static str, builder: MethodBuilder) {
        self.builders.insert(name, builder);
    }

    pub fn encoders_mut(&mut self) -> &mut EncoderRegistry {
        &mut self.encoders
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.builders.keys().copied().collect()
    }

    /// Validate `cfg` and build its method with freshly seeded parameters.
    pub fn build(&self, cfg: &ModelConfig) -> Result<Box<dyn Segmenter>> {
        let cfg = cfg.clone().validate()?;
        let builder = self
            .builders
            .get(cfg.method.as_str())
            .ok_or_else(|| Error::Unknown {
                kind: "method",
                name: cfg.method.clone(),
                available: self.names().join(", "),
            })?;
        builder(&cfg, &self.encoders)
    }
}

/// Forward pass without gradients.
pub fn forward(
    model: &dyn Segmenter,
    x: &ImageBatch,
    labels: &LabelBatch,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardOutput> {
    labels.check_matches(x)?;
    let mut g = Graph::new();
    let p = model.params().bind_frozen(&mut g);
    let (_, out) = model.build(&mut g, &p, x, labels, mode, rng)?;
    out.losses.check_finite()?;
    Ok(out)
}

/// Training-mode forward and backward; gradients follow parameter order.
pub fn forward_backward(
    model: &dyn Segmenter,
    x: &ImageBatch,
    labels: &LabelBatch,
    rng: &mut ChaCha8Rng,
) -> Result<(ForwardOutput, Vec<Tensor>)> {
    labels.check_matches(x)?;
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let (total, out) = model.build(&mut g, &p, x, labels, Mode::Train, rng)?;
    out.losses.check_finite()?;
    let mut grads = g.backward(total);
    Ok((out, p.gradients(&mut grads, model.params())))
}

pub fn predict(model: &dyn Segmenter, x: &ImageBatch) -> Result<LabelBatch> {
    let mut g = Graph::new();
    let p = model.params().bind_frozen(&mut g);
    model.infer(&mut g, &p, x)
}

fn init_rng(cfg: &ModelConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed)
}

pub struct DgQuant {
    cfg: ModelConfig,
    store: ParamStore,
    encoder: Box<dyn Encoder>,
    projection: ProjectionParams,
    prototypes: PrototypeSet,
    codebook: GroupedCodebook,
    decoder: Decoder,
}

/// Intermediate values shared by training and inference.
struct Quantized {
    rows1: Var,
    rows2: Var,
    logits1: Var,
    logits2: Var,
}

impl DgQuant {
    pub fn new(cfg: &ModelConfig, encoders: &EncoderRegistry) -> Result<Self> {
        let mut rng = init_rng(cfg);
        let mut store = ParamStore::new();
        let encoder = encoders.build(cfg, &mut store, &mut rng)?;
        if encoder.out_channels() != cfg.channels {
            return Err(Error::Config(format!(
                "encoder emits {} channels, config asks for {}",
                encoder.out_channels(),
                cfg.channels
            )));
        }
        let half = cfg.half_channels();
        let projection = ProjectionParams::new(&mut store, half, half, half, &mut rng);
        let prototypes = PrototypeSet::new(&mut store, cfg.categories, half, &mut rng);
        let codebook = GroupedCodebook::new(
            &mut store,
            cfg.codes,
            cfg.categories,
            half,
            half,
            cfg.init_var_gamma,
            cfg.init_tau,
            &mut rng,
        )?;
        let decoder = Decoder::new(&mut store, cfg.channels, cfg.decoder_width, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            projection,
            prototypes,
            codebook,
            decoder,
        })
    }

    pub fn codebook(&self) -> &GroupedCodebook {
        &self.codebook
    }

    fn encode_and_score(&self, g: &mut Graph, p: &Bound, x: &ImageBatch) -> Result<Quantized> {
        check_input(self.encoder.as_ref(), x)?;
        let xv = g.constant(x.tensor().clone());
        let z = self.encoder.encode(g, p, xv)?;
        let (z1, z2) = split_var(g, z)?;
        let rows1 = g.to_rows(z1)?;
        let rows2 = g.to_rows(z2)?;
        let (ea, eb, lv, _) = self.codebook.vars(p);
        let logits1 = mahalanobis_logits_var(g, rows1, ea, lv)?;
        let logits2 = mahalanobis_logits_var(g, rows2, eb, lv)?;
        Ok(Quantized {
            rows1,
            rows2,
            logits1,
            logits2,
        })
    }

    fn labels_from_logits(&self, logits: &Tensor, x: &ImageBatch) -> Result<LabelBatch> {
        let e = self.store.get(self.codebook.e_alpha);
        let (_, idx) = quantize_hard(logits, e)?;
        predict_labels(&idx, self.cfg.codes, self.cfg.categories, x.dims())
    }
}

impl Segmenter for DgQuant {
    fn method(&self) -> &'static str {
        "dgquant"
    }

    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn build(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: &ImageBatch,
        labels: &LabelBatch,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, ForwardOutput)> {
        let cfg = &self.cfg;
        let (b, h, w) = x.dims();
        let q = self.encode_and_score(g, p, x)?;
        let corr_pre = self
            .projection
            .corrcoef_loss(g, p, q.rows1, q.rows2, cfg.eps_var)?;
        let (ea, eb, _, lt) = self.codebook.vars(p);
        let noise = match mode {
            Mode::Train => Some(&mut *rng),
            Mode::Eval => None,
        };
        let p1 = gumbel_softmax_var(g, q.logits1, lt, noise)?;
        let noise = match mode {
            Mode::Train => Some(&mut *rng),
            Mode::Eval => None,
        };
        let p2 = gumbel_softmax_var(g, q.logits2, lt, noise)?;
        let (q1, q2) = match mode {
            Mode::Train => (quantize_soft_var(g, p1, ea)?, quantize_soft_var(g, p2, eb)?),
            Mode::Eval => {
                let (h1, _) = quantize_hard(g.value(q.logits1), g.value(ea))?;
                let (h2, _) = quantize_hard(g.value(q.logits2), g.value(eb))?;
                (g.constant(h1), g.constant(h2))
            }
        };
        let corr_post = self.projection.corrcoef_loss(g, p, q1, q2, cfg.eps_var)?;
        let q1 = g.from_rows(q1, b, h, w)?;
        let q2 = g.from_rows(q2, b, h, w)?;
        let zq = g.concat_channels(&[q1, q2])?;
        let xr = self.decoder.decode(g, p, zq)?;
        let xv = g.constant(x.tensor().clone());
        let mse = recon_loss_var(g, xv, xr, cfg.eps_log)?;
        let t = self.prototypes.var(p);
        let domain = domain_loss_var(g, q.rows1, labels.as_slice(), t)?;
        let probs = AssignmentProbs::new(g.value(p1).clone())?;
        let weights = assignment_weights(&probs, cfg.categories)?;
        let code = code_loss_var(
            g,
            p1,
            labels.as_slice(),
            &weights,
            cfg.categories,
            cfg.eps_log,
        )?;
        let total = g.weighted_sum(&[
            (mse, cfg.lambda_mse),
            (corr_pre, cfg.lambda_corr_pre),
            (corr_post, cfg.lambda_corr_post),
            (domain, cfg.lambda_domain),
            (code, cfg.lambda_code),
        ])?;
        let losses = LossBundle {
            mse: g.value(mse).item(),
            corrcoef_pre: g.value(corr_pre).item(),
            corrcoef_post: g.value(corr_post).item(),
            domain: g.value(domain).item(),
            code: g.value(code).item(),
            total: g.value(total).item(),
        };
        let predicted = self.labels_from_logits(g.value(q.logits1), x)?;
        Ok((
            total,
            ForwardOutput {
                losses,
                predicted,
                var_gamma: Some(g.value(p.var(self.codebook.log_var_gamma)).item().exp()),
                tau: Some(g.value(lt).item().exp()),
                mean_max_prob: Some(mean_max_prob(g.value(p1))?),
            },
        ))
    }

    fn infer(&self, g: &mut Graph, p: &Bound, x: &ImageBatch) -> Result<LabelBatch> {
        let q = self.encode_and_score(g, p, x)?;
        self.labels_from_logits(g.value(q.logits1), x)
    }
}

/// Encoder plus a 1x1 classifier trained with pixel cross-entropy.
pub struct Baseline {
    cfg: ModelConfig,
    store: ParamStore,
    encoder: Box<dyn Encoder>,
    classifier: Conv2d,
}

impl Baseline {
    pub fn new(cfg: &ModelConfig, encoders: &EncoderRegistry) -> Result<Self> {
        let mut rng = init_rng(cfg);
        let mut store = ParamStore::new();
        let encoder = encoders.build(cfg, &mut store, &mut rng)?;
        let classifier = Conv2d::new(
            &mut store,
            "classifier",
            encoder.out_channels(),
            cfg.categories,
            1,
            &mut rng,
        );
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            classifier,
        })
    }

    fn class_logits(&self, g: &mut Graph, p: &Bound, x: &ImageBatch) -> Result<Var> {
        check_input(self.encoder.as_ref(), x)?;
        let xv = g.constant(x.tensor().clone());
        let z = self.encoder.encode(g, p, xv)?;
        let z = g.relu(z);
        let logits = self.classifier.forward(g, p, z)?;
        g.to_rows(logits)
    }

    fn argmax_labels(&self, logits: &Tensor, x: &ImageBatch) -> Result<LabelBatch> {
        let k = self.cfg.categories;
        let labels = logits
            .data()
            .chunks(k)
            .map(|r| {
                let mut best = 0;
                for j in 1..k {
                    if r[j] > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect();
        let (b, h, w) = x.dims();
        LabelBatch::new(b, h, w, labels, k)
    }
}

impl Segmenter for Baseline {
    fn method(&self) -> &'static str {
        "baseline"
    }

    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn build(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: &ImageBatch,
        labels: &LabelBatch,
        _mode: Mode,
        _rng: &mut ChaCha8Rng,
    ) -> Result<(Var, ForwardOutput)> {
        let logits = self.class_logits(g, p, x)?;
        let loss = cross_entropy_var(g, logits, labels.as_slice())?;
        let predicted = self.argmax_labels(g.value(logits), x)?;
        Ok((
            loss,
            ForwardOutput {
                losses: LossBundle {
                    total: g.value(loss).item(),
                    ..Default::default()
                },
                predicted,
                var_gamma: None,
                tau: None,
                mean_max_prob: None,
            },
        ))
    }

    fn infer(&self, g: &mut Graph, p: &Bound, x: &ImageBatch) -> Result<LabelBatch> {
        let logits = self.class_logits(g, p, x)?;
        self.argmax_labels(g.value(logits), x)
    }
}

/// Mean softmax cross-entropy of rows `[M, K]` against labels.
pub fn cross_entropy_var(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (m, k) = g.value(logits).dims2()?;
    if labels.len() != m {
        return Err(Error::Shape(format!(
            "{} labels for {m} rows",
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {l} >= {k} classes")));
    }
    let mut probs = g.value(logits).clone();
    let mut loss = 0.0;
    for (row, &l) in probs.data_mut().chunks_mut(k).zip(labels) {
        softmax_in_place(row);
        loss -= row[l].max(f64::MIN_POSITIVE).ln();
    }
    Ok(g.record(
        Tensor::scalar(loss / m as f64),
        &[logits],
        CrossEntropyRule {
            probs,
            labels: labels.to_vec(),
        },
    ))
}

struct CrossEntropyRule {
    probs: Tensor,
    labels: Vec<usize>,
}

impl Backward for CrossEntropyRule {
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let k = self.probs.shape()[1];
        let scale = grad.item() / self.labels.len() as f64;
        let mut d = self.probs.clone();
        for (row, &l) in d.data_mut().chunks_mut(k).zip(&self.labels) {
            row[l] -= 1.0;
            row.iter_mut().for_each(|v| *v *= scale);
        }
        vec![Some(d)]
    }
}
