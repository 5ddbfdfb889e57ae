//! Wasserstein minimax training of the embedding extractor.
//!
//! Each outer iteration draws one minibatch per domain, embeds both domains
//! in one forward pass, takes `critic_steps` ascent steps on the critic
//! objective `L_wd - gamma * L_grad` with the embeddings held fixed, then one
//! descent step on `L_c + delta * L_wd` for the extractor and the heads.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{critic_input_gradient, sgd_step, Direction, GraphError, NodeId};
use crate::cluster::{pseudo_label, ClusterError};
use crate::network::{
    class_normalizer, tdnn_name, DomainBit, ForwardMode, Head, NetGraph, NetworkError, NetworkParams,
};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} data is empty")]
    Empty(&'static str),
    #[error("mode {0} needs target labels; none given and pseudo-labelling is off")]
    MissingLabels(Mode),
    #[error("{domain} has {labels} labels for {utterances} utterances")]
    LabelCount {
        domain: &'static str,
        labels: usize,
        utterances: usize,
    },
    #[error("{domain} utterance {index} has {frames} frames, fewer than the minimum segment {min}")]
    ShortUtterance {
        domain: &'static str,
        index: usize,
        frames: usize,
        min: usize,
    },
    #[error("source batch has {source_rows} rows but target batch has {target_rows}")]
    BatchMismatch { source_rows: usize, target_rows: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("train log: {0}")]
    Log(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, TrainError>;

/// Which losses and labels an adaptation run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "sup")]
    Sup,
    #[serde(rename = "adv")]
    Adv,
    #[serde(rename = "adv+sup")]
    AdvSup,
    #[serde(rename = "adv+lan+sup")]
    AdvLanSup,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Sup, Mode::Adv, Mode::AdvSup, Mode::AdvLanSup];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Sup => "sup",
            Mode::Adv => "adv",
            Mode::AdvSup => "adv+sup",
            Mode::AdvLanSup => "adv+lan+sup",
        }
    }

    pub fn uses_target_labels(self) -> bool {
        self != Mode::Adv
    }

    pub fn uses_adversarial(self) -> bool {
        self != Mode::Sup
    }

    pub fn uses_domain_bit(self) -> bool {
        self == Mode::AdvLanSup
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

/// Which extractor layers are adapted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    #[serde(rename = "all")]
    All,
    /// Only the first affine layer after pooling (the embedding layer).
    #[serde(rename = "post-pool")]
    PostPool,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::All => "all",
            Scope::PostPool => "post-pool",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(Scope::All),
            "post-pool" => Ok(Scope::PostPool),
            _ => Err(format!("unknown scope {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Gradient-penalty weight.
    pub gamma: f64,
    /// Weight of the Wasserstein term in the extractor loss.
    pub delta: f64,
    pub critic_rate: f64,
    pub main_rate: f64,
    pub critic_steps: usize,
    pub mode: Mode,
    pub scope: Scope,
    pub source_batch: usize,
    pub target_batch: usize,
    pub segment_min: usize,
    pub segment_max: usize,
    pub epochs: usize,
    pub minibatches_per_epoch: usize,
    pub warmup_epochs: usize,
    pub halve_every: usize,
    pub source_weight: f64,
    pub target_weight: f64,
    /// Apply the halving schedule to the critic rate as well.
    pub decay_critic_rate: bool,
    /// Cluster the target data for labels when none are given.
    pub pseudo_label_threshold: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 10.0,
            delta: 0.1,
            critic_rate: 0.001,
            main_rate: 1.0,
            critic_steps: 10,
            mode: Mode::AdvSup,
            scope: Scope::All,
            source_batch: 150,
            target_batch: 150,
            segment_min: 200,
            segment_max: 400,
            epochs: 85,
            minibatches_per_epoch: 400,
            warmup_epochs: 3,
            halve_every: 5,
            source_weight: 0.8,
            target_weight: 0.2,
            decay_critic_rate: true,
            pseudo_label_threshold: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(TrainError::Config(m.to_string()));
        for (name, v) in [("gamma", self.gamma), ("delta", self.delta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TrainError::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        let positive = [
            ("critic_rate", self.critic_rate),
            ("main_rate", self.main_rate),
            ("source_weight", self.source_weight),
            ("target_weight", self.target_weight),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(TrainError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.critic_steps == 0
            || self.source_batch == 0
            || self.target_batch == 0
            || self.minibatches_per_epoch == 0
            || self.halve_every == 0
        {
            return err("step counts and batch sizes must be positive");
        }
        if self.segment_min == 0 || self.segment_min > self.segment_max {
            return err("segment range must satisfy 0 < segment_min <= segment_max");
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return err("warmup_epochs must be smaller than epochs");
        }
        if self.source_batch != self.target_batch {
            return err("source and target batch sizes must match for interpolate pairing");
        }
        if let Some(t) = self.pseudo_label_threshold {
            if t.is_nan() {
                return err("pseudo_label_threshold is NaN");
            }
        }
        Ok(())
    }
}

/// Learning-rate scale for `epoch`: `0.5^floor(epoch / halve_every)`.
/// Returns `(critic_rate, main_rate)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> (f64, f64) {
    let scale = 0.5f64.powi((epoch / cfg.halve_every.max(1)) as i32);
    let critic = if cfg.decay_critic_rate {
        cfg.critic_rate * scale
    } else {
        cfg.critic_rate
    };
    (critic, cfg.main_rate * scale)
}

/// Utterances of one domain with optional speaker labels (dense indices).
#[derive(Clone, Debug, Default)]
pub struct DomainSet {
    pub utterances: Vec<Tensor>,
    pub labels: Option<Vec<usize>>,
}

impl DomainSet {
    pub fn classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    fn check(&self, domain: &'static str, min_frames: usize) -> Result<()> {
        if self.utterances.is_empty() {
            return Err(TrainError::Empty(domain));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.utterances.len() {
                return Err(TrainError::LabelCount {
                    domain,
                    labels: l.len(),
                    utterances: self.utterances.len(),
                });
            }
        }
        for (index, u) in self.utterances.iter().enumerate() {
            if u.rows() < min_frames {
                return Err(TrainError::ShortUtterance {
                    domain,
                    index,
                    frames: u.rows(),
                    min: min_frames,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub source: DomainSet,
    pub target: DomainSet,
}

/// Cropped segments for one outer iteration. Source items carry
/// [`DomainBit::Source`], target items [`DomainBit::Target`].
#[derive(Clone, Debug)]
pub struct Minibatch {
    pub source: Vec<Tensor>,
    pub source_labels: Vec<usize>,
    pub target: Vec<Tensor>,
    pub target_labels: Option<Vec<usize>>,
}

impl Minibatch {
    pub fn bits(&self) -> Vec<DomainBit> {
        let mut b = vec![DomainBit::Source; self.source.len()];
        b.resize(self.source.len() + self.target.len(), DomainBit::Target);
        b
    }

    pub fn segment_lengths(&self) -> Vec<usize> {
        self.source.iter().chain(&self.target).map(Tensor::rows).collect()
    }
}

fn crop(utt: &Tensor, len: usize, rng: &mut impl Rng) -> Tensor {
    let len = len.min(utt.rows());
    let start = rng.random_range(0..=utt.rows() - len);
    utt.slice_rows(start, start + len)
}

/// Draws a minibatch: one segment length for the whole batch, utterances
/// sampled with replacement and cropped at random offsets. Target segments
/// are drawn only when `target_count > 0`; target labels are attached only
/// when `target_labels` is given.
pub fn sample_minibatch(
    source: &DomainSet,
    source_count: usize,
    target: &DomainSet,
    target_count: usize,
    target_labels: Option<&[usize]>,
    segment: (usize, usize),
    rng: &mut impl Rng,
) -> Result<Minibatch> {
    let source_labels_all = source.labels.as_deref().ok_or(TrainError::LabelCount {
        domain: "source",
        labels: 0,
        utterances: source.utterances.len(),
    })?;
    let len = rng.random_range(segment.0..=segment.1);
    let mut mb = Minibatch {
        source: Vec::with_capacity(source_count),
        source_labels: Vec::with_capacity(source_count),
        target: Vec::with_capacity(target_count),
        target_labels: target_labels.map(|_| Vec::with_capacity(target_count)),
    };
    for _ in 0..source_count {
        let i = rng.random_range(0..source.utterances.len());
        mb.source.push(crop(&source.utterances[i], len, rng));
        mb.source_labels.push(source_labels_all[i]);
    }
    for _ in 0..target_count {
        let i = rng.random_range(0..target.utterances.len());
        mb.target.push(crop(&target.utterances[i], len, rng));
        if let (Some(out), Some(all)) = (mb.target_labels.as_mut(), target_labels) {
            out.push(all[i]);
        }
    }
    Ok(mb)
}

/// Random points on segments between shuffled source/target pairs:
/// `eps * hs + (1 - eps) * ht` with `eps ~ U(0, 1)` per pair.
pub fn sample_interpolates(hs: &Tensor, ht: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    if hs.rows() != ht.rows() || hs.cols() != ht.cols() {
        return Err(TrainError::BatchMismatch {
            source_rows: hs.rows(),
            target_rows: ht.rows(),
        });
    }
    let n = hs.rows();
    let mut ps: Vec<usize> = (0..n).collect();
    let mut pt: Vec<usize> = (0..n).collect();
    ps.shuffle(rng);
    pt.shuffle(rng);
    let eps: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    Ok(interpolate_pairs(hs, ht, &ps, &pt, &eps))
}

/// Row `k` is `eps[k] * hs[ps[k]] + (1 - eps[k]) * ht[pt[k]]`.
pub fn interpolate_pairs(hs: &Tensor, ht: &Tensor, ps: &[usize], pt: &[usize], eps: &[f64]) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..eps.len())
        .map(|k| {
            let e = eps[k];
            hs.row_slice(ps[k])
                .iter()
                .zip(ht.row_slice(pt[k]))
                .map(|(a, b)| e * a + (1.0 - e) * b)
                .collect()
        })
        .collect();
    Tensor::from_rows(&rows)
}

/// `mean f(hs) - mean f(ht)` as a graph node.
pub fn wasserstein_node(ng: &mut NetGraph, params: &NetworkParams, hs: NodeId, ht: NodeId) -> NodeId {
    let fs = ng.critic(params, hs);
    let ft = ng.critic(params, ht);
    let ms = ng.graph.mean(fs);
    let mt = ng.graph.mean(ft);
    ng.graph.sub(ms, mt)
}

/// `mean over rows of (|grad_h f(h)| - 1)^2` as a graph node.
pub fn gradient_penalty_node(ng: &mut NetGraph, params: &NetworkParams, hhat: NodeId, rows: usize) -> Result<NodeId> {
    let layers = ng.critic_layers(params);
    let grad = critic_input_gradient(&mut ng.graph, hhat, rows, &layers, params.config.leaky_slope)?;
    let norm = ng.graph.l2_norm(grad);
    let one = ng.graph.constant(Tensor::filled(rows, 1, 1.0));
    let dev = ng.graph.sub(norm, one);
    let sq = ng.graph.square(dev);
    Ok(ng.graph.mean(sq))
}

fn check_batch(params: &NetworkParams, h: &Tensor, what: &'static str) -> Result<()> {
    if h.rows() == 0 {
        return Err(TrainError::Empty(what));
    }
    if h.cols() != params.config.embedding_dim {
        return Err(NetworkError::EmbeddingDim {
            expected: params.config.embedding_dim,
            got: h.cols(),
        }
        .into());
    }
    Ok(())
}

/// Critic estimate of the Wasserstein distance between two embedding batches.
pub fn wasserstein_loss(params: &NetworkParams, hs: &Tensor, ht: &Tensor) -> Result<f64> {
    check_batch(params, hs, "source batch")?;
    check_batch(params, ht, "target batch")?;
    let mut ng = NetGraph::new();
    let a = ng.graph.constant(hs.clone());
    let b = ng.graph.constant(ht.clone());
    let root = wasserstein_node(&mut ng, params, a, b);
    Ok(ng.graph.evaluate(root, &params.bindings())?.item())
}

/// Gradient penalty of the critic over the points `hhat`.
pub fn gradient_penalty(params: &NetworkParams, hhat: &Tensor) -> Result<f64> {
    check_batch(params, hhat, "penalty batch")?;
    let mut ng = NetGraph::new();
    let h = ng.graph.constant(hhat.clone());
    let root = gradient_penalty_node(&mut ng, params, h, hhat.rows())?;
    Ok(ng.graph.evaluate(root, &params.bindings())?.item())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticStats {
    pub l_wd: f64,
    pub l_grad: f64,
    /// `l_wd - gamma * l_grad`.
    pub objective: f64,
}

struct CriticGraph {
    ng: NetGraph,
    root: NodeId,
    l_wd: NodeId,
    l_grad: NodeId,
}

fn critic_graph(
    params: &NetworkParams,
    hs: &Tensor,
    ht: &Tensor,
    interpolates: &Tensor,
    gamma: f64,
) -> Result<CriticGraph> {
    check_batch(params, hs, "source batch")?;
    check_batch(params, ht, "target batch")?;
    let mut ng = NetGraph::new();
    let s = ng.graph.constant(hs.clone());
    let t = ng.graph.constant(ht.clone());
    let hhat = Tensor::vstack(&[hs, ht, interpolates]);
    let rows = hhat.rows();
    let hh = ng.graph.constant(hhat);
    let l_wd = wasserstein_node(&mut ng, params, s, t);
    let l_grad = gradient_penalty_node(&mut ng, params, hh, rows)?;
    let pen = ng.graph.scale(l_grad, gamma);
    let root = ng.graph.sub(l_wd, pen);
    Ok(CriticGraph { ng, root, l_wd, l_grad })
}

impl CriticGraph {
    fn evaluate(&mut self, params: &NetworkParams) -> Result<CriticStats> {
        let b = params.bindings();
        let objective = self.ng.graph.evaluate(self.root, &b)?.item();
        Ok(CriticStats {
            objective,
            l_wd: self.ng.graph.value(self.l_wd).expect("evaluated").item(),
            l_grad: self.ng.graph.value(self.l_grad).expect("evaluated").item(),
        })
    }
}

/// Critic objective over `hs`, `ht` and the penalty points
/// `hs ∪ ht ∪ interpolates`.
pub fn critic_objective(
    params: &NetworkParams,
    hs: &Tensor,
    ht: &Tensor,
    interpolates: &Tensor,
    gamma: f64,
) -> Result<CriticStats> {
    critic_graph(params, hs, ht, interpolates, gamma)?.evaluate(params)
}

/// One gradient-ascent step on the critic parameters. Extractor and head
/// parameters are not touched. Returns the objective before the step.
pub fn critic_step(
    params: &mut NetworkParams,
    hs: &Tensor,
    ht: &Tensor,
    interpolates: &Tensor,
    gamma: f64,
    rate: f64,
) -> Result<CriticStats> {
    let (stats, grads) = critic_gradients(params, hs, ht, interpolates, gamma)?;
    sgd_step(&mut params.critic, &grads, rate, Direction::Ascend)?;
    Ok(stats)
}

/// Critic objective and its gradients with respect to the critic parameters.
pub fn critic_gradients(
    params: &NetworkParams,
    hs: &Tensor,
    ht: &Tensor,
    interpolates: &Tensor,
    gamma: f64,
) -> Result<(CriticStats, BTreeMap<String, Tensor>)> {
    let mut cg = critic_graph(params, hs, ht, interpolates, gamma)?;
    let stats = cg.evaluate(params)?;
    let grads = cg.ng.graph.backward(cg.root, &params.critic)?;
    Ok((stats, grads))
}

/// What one main step computes and updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepPlan {
    /// Target segments take part in the forward pass.
    pub target_rows: bool,
    /// Target classification loss is part of the objective.
    pub target_loss: bool,
    /// `delta * L_wd` is part of the objective.
    pub adversarial: bool,
    /// Extractor inputs are conditioned on the domain bit.
    pub domain_bits: bool,
    /// Source loss weight.
    pub source_weight: f64,
    pub target_weight: f64,
    pub delta: f64,
    /// Batch-norm layers that use running statistics.
    pub frozen_bn: HashSet<String>,
}

impl StepPlan {
    /// Plan for an adaptation epoch. Warm-up epochs drop the target loss
    /// and the adversarial term.
    pub fn adaptation(cfg: &TrainConfig, epoch: usize, config_layers: usize) -> Self {
        let warm = epoch < cfg.warmup_epochs;
        let frozen_bn = match cfg.scope {
            Scope::All => HashSet::new(),
            Scope::PostPool => (0..config_layers).map(|i| format!("{}.bn", tdnn_name(i))).collect(),
        };
        Self {
            target_rows: true,
            target_loss: cfg.mode.uses_target_labels() && !warm,
            adversarial: cfg.mode.uses_adversarial() && !warm,
            domain_bits: cfg.mode.uses_domain_bit(),
            source_weight: cfg.source_weight,
            target_weight: cfg.target_weight,
            delta: cfg.delta,
            frozen_bn,
        }
    }

    /// Source-only classification training.
    pub fn source_only() -> Self {
        Self {
            source_weight: 1.0,
            ..Self::default()
        }
    }
}

/// Marks which parameters a main step may update.
pub fn set_trainable(params: &mut NetworkParams, scope: Scope, plan: &StepPlan) {
    let domain = plan.domain_bits;
    params.extractor.set_trainable_where(|name| {
        if name.ends_with(".domain") && !domain {
            return false;
        }
        match scope {
            Scope::All => true,
            Scope::PostPool => name.starts_with("embed.") && !name.starts_with("embed.bn."),
        }
    });
    let target_prefix = format!("{}.", Head::Target.prefix());
    let target = plan.target_loss;
    params
        .heads
        .set_trainable_where(|name| !name.starts_with(&target_prefix) || target);
    params.critic.set_trainable_where(|_| true);
}

fn clear_trainable(params: &mut NetworkParams) {
    params.extractor.set_trainable_where(|_| true);
    params.heads.set_trainable_where(|_| true);
    params.critic.set_trainable_where(|_| true);
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MainStats {
    /// `L_c + delta * L_wd` when adversarial, else `L_c`.
    pub objective: f64,
    /// Normalized source cross-entropy (before weighting).
    pub source_loss: f64,
    pub target_loss: Option<f64>,
    /// Critic estimate on this batch; present when target rows were embedded.
    pub l_wd: Option<f64>,
}

pub struct MainGradients {
    pub extractor: BTreeMap<String, Tensor>,
    pub heads: BTreeMap<String, Tensor>,
}

/// The forward pass of one main step, kept so the critic can be trained on
/// the same embeddings before the losses are added to the graph.
pub struct MainPass {
    ng: NetGraph,
    h: NodeId,
    ns: usize,
    nt: usize,
    hs: Tensor,
    ht: Tensor,
}

impl MainPass {
    pub fn forward(params: &NetworkParams, batch: &Minibatch, plan: &StepPlan) -> Result<Self> {
        if batch.source.is_empty() {
            return Err(TrainError::Empty("source batch"));
        }
        let ns = batch.source.len();
        let nt = if plan.target_rows { batch.target.len() } else { 0 };
        if plan.target_rows && nt == 0 {
            return Err(TrainError::Empty("target batch"));
        }
        let segs: Vec<&Tensor> = batch.source.iter().chain(&batch.target[..nt]).collect();
        let lengths: Vec<usize> = segs.iter().map(|t| t.rows()).collect();
        let bits: Vec<f64> = batch.bits()[..ns + nt].iter().map(|b| b.value()).collect();
        let mut ng = NetGraph::new();
        let x = ng.graph.constant(Tensor::vstack(&segs));
        let mode = ForwardMode {
            train: true,
            frozen_bn: plan.frozen_bn.clone(),
        };
        let h = ng.embedding(params, x, &lengths, plan.domain_bits.then_some(&bits[..]), &mode);
        let hv = ng.graph.evaluate(h, &params.bindings())?;
        let hs = hv.slice_rows(0, ns);
        let ht = hv.slice_rows(ns, ns + nt);
        Ok(Self { ng, h, ns, nt, hs, ht })
    }

    pub fn source_embeddings(&self) -> &Tensor {
        &self.hs
    }

    pub fn target_embeddings(&self) -> &Tensor {
        &self.ht
    }

    fn losses(
        &mut self,
        params: &NetworkParams,
        batch: &Minibatch,
        plan: &StepPlan,
    ) -> Result<(NodeId, NodeId, Option<NodeId>, Option<NodeId>)> {
        let mode = ForwardMode {
            train: true,
            frozen_bn: plan.frozen_bn.clone(),
        };
        let (ns, nt) = (self.ns, self.nt);
        let ng = &mut self.ng;
        let x = ng.trunk(params, self.h, &mode);

        let xs = ng.graph.rows(x, 0, ns);
        let lps = ng.head_log_probs(params, xs, Head::Source)?;
        let source_classes = params.head_classes(Head::Source).expect("source head");
        check_labels(&batch.source_labels, source_classes)?;
        let ls = ng
            .graph
            .cross_entropy(lps, batch.source_labels.clone(), class_normalizer(source_classes));
        let mut root = ng.graph.scale(ls, plan.source_weight);

        let mut lt = None;
        if plan.target_loss {
            let labels = batch
                .target_labels
                .clone()
                .ok_or(TrainError::Config("target loss without target labels".into()))?;
            let classes = params
                .head_classes(Head::Target)
                .ok_or(NetworkError::HeadNotConfigured(Head::Target))?;
            check_labels(&labels, classes)?;
            let xt = ng.graph.rows(x, ns, ns + nt);
            let lpt = ng.head_log_probs(params, xt, Head::Target)?;
            let node = ng.graph.cross_entropy(lpt, labels, class_normalizer(classes));
            let weighted = ng.graph.scale(node, plan.target_weight);
            root = ng.graph.add(root, weighted);
            lt = Some(node);
        }

        let mut wd = None;
        if nt > 0 {
            let hs = ng.graph.rows(self.h, 0, ns);
            let ht = ng.graph.rows(self.h, ns, ns + nt);
            let node = wasserstein_node(ng, params, hs, ht);
            if plan.adversarial {
                let weighted = ng.graph.scale(node, plan.delta);
                root = ng.graph.add(root, weighted);
            }
            wd = Some(node);
        }
        Ok((root, ls, lt, wd))
    }

    fn evaluate(&mut self, params: &NetworkParams, batch: &Minibatch, plan: &StepPlan) -> Result<(NodeId, MainStats)> {
        let (root, ls, lt, wd) = self.losses(params, batch, plan)?;
        let b = params.bindings();
        let g = &mut self.ng.graph;
        let objective = g.evaluate_missing(root, &b)?.item();
        let mut scalar = |id: Option<NodeId>| -> Result<Option<f64>> {
            match id {
                Some(id) => Ok(Some(g.evaluate_missing(id, &b)?.item())),
                None => Ok(None),
            }
        };
        let stats = MainStats {
            objective,
            source_loss: scalar(Some(ls))?.expect("source loss"),
            target_loss: scalar(lt)?,
            l_wd: scalar(wd)?,
        };
        Ok((root, stats))
    }

    /// Evaluates the objective without updating anything.
    pub fn objective(mut self, params: &NetworkParams, batch: &Minibatch, plan: &StepPlan) -> Result<MainStats> {
        Ok(self.evaluate(params, batch, plan)?.1)
    }

    /// One descent step on the trainable extractor and head parameters, then
    /// a running-statistics update for training-mode batch-norm layers.
    /// Returns the objective before the step.
    pub fn step(
        mut self,
        params: &mut NetworkParams,
        batch: &Minibatch,
        plan: &StepPlan,
        rate: f64,
    ) -> Result<MainStats> {
        let (stats, grads) = self.compute_gradients(params, batch, plan)?;
        sgd_step(&mut params.heads, &grads.heads, rate, Direction::Descend)?;
        sgd_step(&mut params.extractor, &grads.extractor, rate, Direction::Descend)?;
        self.ng.update_running_stats(params);
        Ok(stats)
    }

    /// Objective and its gradients for the trainable extractor and head
    /// parameters.
    pub fn gradients(
        mut self,
        params: &NetworkParams,
        batch: &Minibatch,
        plan: &StepPlan,
    ) -> Result<(MainStats, MainGradients)> {
        self.compute_gradients(params, batch, plan)
    }

    fn compute_gradients(
        &mut self,
        params: &NetworkParams,
        batch: &Minibatch,
        plan: &StepPlan,
    ) -> Result<(MainStats, MainGradients)> {
        let (root, stats) = self.evaluate(params, batch, plan)?;
        let grads = self.ng.graph.gradients(root)?;
        Ok((
            stats,
            MainGradients {
                extractor: grads.for_params(&params.extractor),
                heads: grads.for_params(&params.heads),
            },
        ))
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(GraphError::LabelOutOfRange { label: l, classes }.into());
    }
    Ok(())
}

/// Builds the forward pass and takes one main step.
pub fn main_step(params: &mut NetworkParams, batch: &Minibatch, plan: &StepPlan, rate: f64) -> Result<MainStats> {
    MainPass::forward(params, batch, plan)?.step(params, batch, plan, rate)
}

/// Main objective on a batch, without updating.
pub fn main_objective(params: &NetworkParams, batch: &Minibatch, plan: &StepPlan) -> Result<MainStats> {
    MainPass::forward(params, batch, plan)?.objective(params, batch, plan)
}

/// Per-epoch training summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub warmup: bool,
    /// Mean critic estimate of the Wasserstein distance at the main steps.
    pub l_wd: Option<f64>,
    /// Mean gradient penalty over critic steps.
    pub l_grad: Option<f64>,
    pub source_loss: f64,
    pub target_loss: Option<f64>,
    pub critic_rate: f64,
    pub main_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.epochs {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let epochs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { epochs })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(fs::File::open(path)?);
        let mut text = String::new();
        for line in f.lines() {
            text.push_str(&line?);
            text.push('\n');
        }
        Self::from_jsonl(&text)
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

/// Target labels used by `cfg.mode`: the given ones, or pseudo-labels from
/// clustering the current embeddings when a threshold is configured.
pub fn resolve_target_labels(
    params: &NetworkParams,
    target: &DomainSet,
    cfg: &TrainConfig,
) -> Result<Option<Vec<usize>>> {
    if !cfg.mode.uses_target_labels() {
        return Ok(None);
    }
    if let Some(l) = &target.labels {
        return Ok(Some(l.clone()));
    }
    let Some(threshold) = cfg.pseudo_label_threshold else {
        return Err(TrainError::MissingLabels(cfg.mode));
    };
    let refs: Vec<&Tensor> = target.utterances.iter().collect();
    let bits = vec![DomainBit::Target; refs.len()];
    let h = params.embed_all(&refs, &bits, cfg.mode.uses_domain_bit())?;
    Ok(Some(pseudo_label(&h, threshold)?))
}

/// Adversarial adaptation. `on_epoch` runs after every epoch with the
/// record and the current parameters (checkpointing, progress).
pub fn train_with<F>(
    data: &TrainData,
    mut params: NetworkParams,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<(NetworkParams, TrainLog)>
where
    F: FnMut(&EpochRecord, &NetworkParams) -> Result<()>,
{
    cfg.validate()?;
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok((params, log));
    }
    data.source.check("source", cfg.segment_min)?;
    data.target.check("target", cfg.segment_min)?;
    if data.source.labels.is_none() {
        return Err(TrainError::Config("source data needs labels".into()));
    }
    let target_labels = resolve_target_labels(&params, &data.target, cfg)?;
    if let Some(labels) = &target_labels {
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        if params.head_classes(Head::Target) != Some(classes) {
            params.set_target_head(classes, cfg.seed ^ 0x7461_7267);
        }
    }
    params.config.use_domain_label = cfg.mode.uses_domain_bit();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layers = params.config.tdnn_widths.len();
    for epoch in 0..cfg.epochs {
        let plan = StepPlan::adaptation(cfg, epoch, layers);
        set_trainable(&mut params, cfg.scope, &plan);
        let (r1, r2) = lr_schedule(epoch, cfg);
        let (mut wd, mut gp, mut ls, mut lt) = (Mean::default(), Mean::default(), Mean::default(), Mean::default());
        for _ in 0..cfg.minibatches_per_epoch {
            let batch = sample_minibatch(
                &data.source,
                cfg.source_batch,
                &data.target,
                cfg.target_batch,
                target_labels.as_deref(),
                (cfg.segment_min, cfg.segment_max),
                &mut rng,
            )?;
            let pass = MainPass::forward(&params, &batch, &plan)?;
            for _ in 0..cfg.critic_steps {
                let interp = sample_interpolates(pass.source_embeddings(), pass.target_embeddings(), &mut rng)?;
                let cs = critic_step(
                    &mut params,
                    pass.source_embeddings(),
                    pass.target_embeddings(),
                    &interp,
                    cfg.gamma,
                    r1,
                )?;
                gp.add(cs.l_grad);
            }
            let ms = pass.step(&mut params, &batch, &plan, r2)?;
            ls.add(ms.source_loss);
            if let Some(v) = ms.target_loss {
                lt.add(v);
            }
            if let Some(v) = ms.l_wd {
                wd.add(v);
            }
        }
        let record = EpochRecord {
            epoch,
            warmup: epoch < cfg.warmup_epochs,
            l_wd: wd.get(),
            l_grad: gp.get(),
            source_loss: ls.get().unwrap_or(0.0),
            target_loss: lt.get(),
            critic_rate: r1,
            main_rate: r2,
        };
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        log::info!(
            "epoch {epoch}: l_wd {} l_grad {} source {:.4} target {}",
            opt(record.l_wd),
            opt(record.l_grad),
            record.source_loss,
            opt(record.target_loss)
        );
        on_epoch(&record, &params)?;
        log.epochs.push(record);
    }
    clear_trainable(&mut params);
    Ok((params, log))
}

pub fn train(data: &TrainData, params: NetworkParams, cfg: &TrainConfig) -> Result<(NetworkParams, TrainLog)> {
    train_with(data, params, cfg, |_, _| Ok(()))
}

/// Source-only classification training, used for the baseline model.
/// Uses the batch, segment, epoch and rate settings of `cfg`; no critic,
/// no target data, no warm-up.
pub fn pretrain(source: &DomainSet, mut params: NetworkParams, cfg: &TrainConfig) -> Result<(NetworkParams, TrainLog)> {
    cfg.validate()?;
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok((params, log));
    }
    source.check("source", cfg.segment_min)?;
    let plan = StepPlan::source_only();
    set_trainable(&mut params, Scope::All, &plan);
    let empty = DomainSet::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 0..cfg.epochs {
        let (_, r2) = lr_schedule(epoch, cfg);
        let mut ls = Mean::default();
        for _ in 0..cfg.minibatches_per_epoch {
            let batch = sample_minibatch(
                source,
                cfg.source_batch,
                &empty,
                0,
                None,
                (cfg.segment_min, cfg.segment_max),
                &mut rng,
            )?;
            ls.add(main_step(&mut params, &batch, &plan, r2)?.source_loss);
        }
        let record = EpochRecord {
            epoch,
            warmup: false,
            l_wd: None,
            l_grad: None,
            source_loss: ls.get().unwrap_or(0.0),
            target_loss: None,
            critic_rate: 0.0,
            main_rate: r2,
        };
        log::info!("pretrain epoch {epoch}: source {:.4}", record.source_loss);
        log.epochs.push(record);
    }
    clear_trainable(&mut params);
    Ok((params, log))
}
