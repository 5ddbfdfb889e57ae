//! x-vector extractor, per-domain speaker heads and the domain critic.
//!
//! Layout of the extractor: TDNN layers (splice, affine, relu, batch-norm),
//! statistics pooling, then the embedding affine layer. The embedding is the
//! pre-activation output of that layer. Classification continues with relu,
//! batch-norm, the remaining post-pool layers and one affine head per domain.
//!
//! When domain conditioning is enabled a binary domain bit is appended to the
//! input of every extractor affine layer up to and including the embedding.
//! The bit's weight row is stored separately as `<layer>.domain`.

mod checkpoint;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{leaky_mlp, AffineNodes, BatchNormMode, Bindings, Graph, GraphError, NodeId, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("frame dimension mismatch: expected {expected}, got {got}")]
    FrameDim { expected: usize, got: usize },
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    EmbeddingDim { expected: usize, got: usize },
    #[error("sequence of {len} frames is shorter than the context span {span}")]
    SequenceTooShort { len: usize, span: usize },
    #[error("{0:?} head is not configured")]
    HeadNotConfigured(Head),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty input")]
    Empty,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Source,
    Target,
}

impl Head {
    pub fn prefix(self) -> &'static str {
        match self {
            Head::Source => "head.source",
            Head::Target => "head.target",
        }
    }
}

/// Binary domain indicator; 0 is the source domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DomainBit {
    Source,
    Target,
}

impl DomainBit {
    pub fn value(self) -> f64 {
        match self {
            DomainBit::Source => 0.0,
            DomainBit::Target => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub frame_dim: usize,
    pub tdnn_widths: Vec<usize>,
    pub tdnn_contexts: Vec<Vec<i32>>,
    pub embedding_dim: usize,
    /// Widths of the post-pooling affine layers; the first is the embedding.
    pub post_pool_widths: Vec<usize>,
    pub source_classes: usize,
    #[serde(default)]
    pub target_classes: usize,
    #[serde(default)]
    pub use_domain_label: bool,
    pub critic_widths: Vec<usize>,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
}

fn default_slope() -> f64 {
    0.2
}

fn default_momentum() -> f64 {
    0.95
}

fn standard_contexts() -> Vec<Vec<i32>> {
    vec![vec![-2, -1, 0, 1, 2], vec![-2, 0, 2], vec![-3, 0, 3], vec![0], vec![0]]
}

impl NetworkConfig {
    /// Desk-scale network used for synthetic experiments.
    pub fn desk(source_classes: usize, target_classes: usize) -> Self {
        Self {
            frame_dim: 20,
            tdnn_widths: vec![64, 64, 64, 64, 128],
            tdnn_contexts: standard_contexts(),
            embedding_dim: 64,
            post_pool_widths: vec![64, 64],
            source_classes,
            target_classes,
            use_domain_label: false,
            critic_widths: vec![64, 64],
            leaky_slope: default_slope(),
            bn_momentum: default_momentum(),
        }
    }

    /// The full-size x-vector layout (512-dim embedding, 1500-wide pooling input).
    pub fn paper_scale(frame_dim: usize, source_classes: usize, target_classes: usize) -> Self {
        Self {
            frame_dim,
            tdnn_widths: vec![512, 512, 512, 512, 1500],
            tdnn_contexts: standard_contexts(),
            embedding_dim: 512,
            post_pool_widths: vec![512, 512],
            source_classes,
            target_classes,
            use_domain_label: false,
            critic_widths: vec![512, 512],
            leaky_slope: default_slope(),
            bn_momentum: default_momentum(),
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: &str| Err(NetworkError::InvalidConfig(m.to_string()));
        if self.frame_dim == 0 {
            return bad("frame_dim must be positive");
        }
        if self.tdnn_widths.is_empty() || self.tdnn_widths.contains(&0) {
            return bad("tdnn widths must be non-empty and positive");
        }
        if self.tdnn_contexts.len() != self.tdnn_widths.len() {
            return bad("one context offset list per tdnn layer is required");
        }
        for ctx in &self.tdnn_contexts {
            if ctx.is_empty() {
                return bad("empty context offset list");
            }
            if ctx.iter().any(|o| !ctx.contains(&-o)) {
                return bad("context offsets must be symmetric around 0");
            }
        }
        if self.post_pool_widths.first() != Some(&self.embedding_dim) {
            return bad("first post-pool width must equal the embedding dimension");
        }
        if self.post_pool_widths.contains(&0) || self.embedding_dim == 0 {
            return bad("post-pool widths must be positive");
        }
        if self.source_classes == 0 {
            return bad("source head needs at least one class");
        }
        if self.critic_widths.contains(&0) {
            return bad("critic widths must be positive");
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return bad("bn momentum must be in [0, 1)");
        }
        Ok(())
    }

    /// Minimum number of frames an utterance needs for every splice layer.
    pub fn min_frames(&self) -> usize {
        self.tdnn_contexts
            .iter()
            .flatten()
            .map(|o| o.unsigned_abs() as usize)
            .max()
            .unwrap_or(0)
            + 1
    }

    fn tdnn_input_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.tdnn_widths.len());
        let mut prev = self.frame_dim;
        for (w, ctx) in self.tdnn_widths.iter().zip(&self.tdnn_contexts) {
            dims.push(prev * ctx.len());
            prev = *w;
        }
        dims
    }

    fn classifier_input_dim(&self) -> usize {
        *self.post_pool_widths.last().expect("validated")
    }
}

/// Extractor (θ_g), speaker heads (θ_c) and critic (θ_w) parameters plus
/// batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    pub extractor: ParamSet,
    pub heads: ParamSet,
    pub critic: ParamSet,
    /// Running (mean, variance) per batch-norm layer, keyed by layer name.
    pub running: BTreeMap<String, RunningStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn new(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }

    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor::matrix(fan_in, fan_out, data)
}

pub fn tdnn_name(i: usize) -> String {
    format!("tdnn{}", i + 1)
}

pub fn post_name(j: usize) -> String {
    if j == 0 {
        "embed".to_string()
    } else {
        format!("post{}", j + 1)
    }
}

pub fn critic_name(k: usize) -> String {
    format!("critic{}", k + 1)
}

fn insert_affine(set: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, out: usize) {
    set.insert(format!("{name}.weight"), glorot(rng, fan_in, out));
    set.insert(format!("{name}.bias"), Tensor::zeros(1, out));
}

fn insert_bn(set: &mut ParamSet, name: &str, width: usize) {
    set.insert(format!("{name}.bn.gamma"), Tensor::filled(1, width, 1.0));
    set.insert(format!("{name}.bn.beta"), Tensor::zeros(1, width));
}

/// Deterministic initialization: Glorot-uniform weights, zero biases,
/// unit batch-norm scales and zero domain-bit rows. The critic's output
/// layer starts at zero.
pub fn init_network(config: &NetworkConfig, seed: u64) -> Result<NetworkParams, NetworkError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extractor = ParamSet::new();
    let mut running = BTreeMap::new();
    for (i, (&fan_in, &w)) in config.tdnn_input_dims().iter().zip(&config.tdnn_widths).enumerate() {
        let name = tdnn_name(i);
        insert_affine(&mut extractor, &mut rng, &name, fan_in, w);
        extractor.insert(format!("{name}.domain"), Tensor::zeros(1, w));
        insert_bn(&mut extractor, &name, w);
        running.insert(format!("{name}.bn"), RunningStats::new(w));
    }
    let mut prev = 2 * config.tdnn_widths.last().expect("validated");
    for (j, &w) in config.post_pool_widths.iter().enumerate() {
        let name = post_name(j);
        insert_affine(&mut extractor, &mut rng, &name, prev, w);
        if j == 0 {
            extractor.insert("embed.domain", Tensor::zeros(1, w));
        }
        insert_bn(&mut extractor, &name, w);
        running.insert(format!("{name}.bn"), RunningStats::new(w));
        prev = w;
    }
    let mut heads = ParamSet::new();
    insert_affine(&mut heads, &mut rng, Head::Source.prefix(), prev, config.source_classes);
    if config.target_classes > 0 {
        insert_affine(&mut heads, &mut rng, Head::Target.prefix(), prev, config.target_classes);
    }
    let mut critic = ParamSet::new();
    let mut fan_in = config.embedding_dim;
    for (k, &w) in config.critic_widths.iter().enumerate() {
        insert_affine(&mut critic, &mut rng, &critic_name(k), fan_in, w);
        fan_in = w;
    }
    // Zero output layer: the critic starts as f = 0, where the gradient
    // penalty has no gradient, so early ascent steps follow the Wasserstein
    // term alone and fix the sign of the critic from the data.
    let out = critic_name(config.critic_widths.len());
    critic.insert(format!("{out}.weight"), Tensor::zeros(fan_in, 1));
    critic.insert(format!("{out}.bias"), Tensor::zeros(1, 1));
    Ok(NetworkParams {
        config: config.clone(),
        extractor,
        heads,
        critic,
        running,
    })
}

/// Per-graph options for building the forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardMode {
    /// Use batch statistics in batch-norm layers (training).
    pub train: bool,
    /// Batch-norm layers that use running statistics even when training.
    pub frozen_bn: HashSet<String>,
}

impl ForwardMode {
    pub fn inference() -> Self {
        Self::default()
    }

    pub fn training() -> Self {
        Self {
            train: true,
            frozen_bn: HashSet::new(),
        }
    }
}

/// A graph plus one input node per parameter name, created on first use.
pub struct NetGraph {
    pub graph: Graph,
    params: HashMap<String, NodeId>,
    /// Training-mode batch-norm nodes, by layer name.
    pub bn_nodes: Vec<(String, NodeId)>,
}

impl Default for NetGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl NetGraph {
    pub fn new() -> Self {
        Self {
            graph: Graph::new(),
            params: HashMap::new(),
            bn_nodes: Vec::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(id) = self.params.get(name) {
            return *id;
        }
        let id = self.graph.input(name);
        self.params.insert(name.to_string(), id);
        id
    }

    fn affine(&mut self, x: NodeId, layer: &str) -> NodeId {
        let w = self.param(&format!("{layer}.weight"));
        let b = self.param(&format!("{layer}.bias"));
        self.graph.affine(x, w, b)
    }

    fn batch_norm(&mut self, x: NodeId, layer: &str, params: &NetworkParams, mode: &ForwardMode) -> NodeId {
        let key = format!("{layer}.bn");
        let gamma = self.param(&format!("{key}.gamma"));
        let beta = self.param(&format!("{key}.beta"));
        let bn_mode = if mode.train && !mode.frozen_bn.contains(&key) {
            BatchNormMode::Train
        } else {
            let rs = &params.running[&key];
            BatchNormMode::Inference {
                mean: rs.mean.clone(),
                var: rs.var.clone(),
            }
        };
        let train = matches!(bn_mode, BatchNormMode::Train);
        let node = self.graph.batch_norm(x, gamma, beta, bn_mode);
        if train {
            self.bn_nodes.push((key, node));
        }
        node
    }

    /// Copies the batch statistics of training-mode batch-norm nodes into the
    /// running averages. Call after evaluating the graph.
    pub fn update_running_stats(&self, params: &mut NetworkParams) {
        let momentum = params.config.bn_momentum;
        for (key, node) in &self.bn_nodes {
            if let Some((m, v)) = self.graph.batch_stats(*node) {
                if let Some(rs) = params.running.get_mut(key) {
                    rs.update(m, v, momentum);
                }
            }
        }
    }

    /// Embedding `B x d` for stacked frames (`sum(lengths) x m`).
    ///
    /// `bits` holds one domain bit per sequence and is only used when
    /// `Some`; passing `None` builds the unconditioned network.
    pub fn embedding(
        &mut self,
        params: &NetworkParams,
        frames: NodeId,
        lengths: &[usize],
        bits: Option<&[f64]>,
        mode: &ForwardMode,
    ) -> NodeId {
        let cfg = &params.config;
        let frame_bits = bits.map(|b| {
            let col: Vec<f64> = b
                .iter()
                .zip(lengths)
                .flat_map(|(&v, &len)| std::iter::repeat_n(v, len))
                .collect();
            self.graph.constant(Tensor::column(col))
        });
        let mut x = frames;
        for (i, ctx) in cfg.tdnn_contexts.iter().enumerate() {
            let name = tdnn_name(i);
            let spliced = if ctx == &[0] {
                x
            } else {
                self.graph.splice(x, lengths.to_vec(), ctx.clone())
            };
            let mut z = self.affine(spliced, &name);
            if let Some(fb) = frame_bits {
                let d = self.param(&format!("{name}.domain"));
                let shift = self.graph.matmul(fb, d);
                z = self.graph.add(z, shift);
            }
            let a = self.graph.relu(z);
            x = self.batch_norm(a, &name, params, mode);
        }
        let pooled = self.graph.stats_pool(x, lengths.to_vec());
        let mut h = self.affine(pooled, "embed");
        if let Some(b) = bits {
            let col = self.graph.constant(Tensor::column(b.to_vec()));
            let d = self.param("embed.domain");
            let shift = self.graph.matmul(col, d);
            h = self.graph.add(h, shift);
        }
        h
    }

    /// Log-posteriors over the head's classes for embeddings `h`.
    pub fn classify(
        &mut self,
        params: &NetworkParams,
        h: NodeId,
        head: Head,
        mode: &ForwardMode,
    ) -> Result<NodeId, NetworkError> {
        let x = self.trunk(params, h, mode);
        self.head_log_probs(params, x, head)
    }

    /// The layers shared by both heads: relu and batch-norm on the
    /// embedding, then the remaining post-pool layers.
    pub fn trunk(&mut self, params: &NetworkParams, h: NodeId, mode: &ForwardMode) -> NodeId {
        let a = self.graph.relu(h);
        let mut x = self.batch_norm(a, "embed", params, mode);
        for j in 1..params.config.post_pool_widths.len() {
            let name = post_name(j);
            let z = self.affine(x, &name);
            let a = self.graph.relu(z);
            x = self.batch_norm(a, &name, params, mode);
        }
        x
    }

    /// Output affine layer and log-softmax of one head on trunk output `x`.
    pub fn head_log_probs(&mut self, params: &NetworkParams, x: NodeId, head: Head) -> Result<NodeId, NetworkError> {
        if !params.heads.contains(&format!("{}.weight", head.prefix())) {
            return Err(NetworkError::HeadNotConfigured(head));
        }
        let logits = self.affine(x, head.prefix());
        Ok(self.graph.log_softmax(logits))
    }

    pub fn critic_layers(&mut self, params: &NetworkParams) -> Vec<AffineNodes> {
        (0..=params.config.critic_widths.len())
            .map(|k| {
                let name = critic_name(k);
                AffineNodes {
                    weight: self.param(&format!("{name}.weight")),
                    bias: self.param(&format!("{name}.bias")),
                }
            })
            .collect()
    }

    /// Critic values `n x 1` for embeddings `h`.
    pub fn critic(&mut self, params: &NetworkParams, h: NodeId) -> NodeId {
        let layers = self.critic_layers(params);
        leaky_mlp(&mut self.graph, h, &layers, params.config.leaky_slope)
    }
}

impl NetworkParams {
    /// Binds extractor, head and critic parameters.
    pub fn bindings(&self) -> Bindings<'_> {
        let mut b = Bindings::new();
        b.bind_params(&self.extractor)
            .bind_params(&self.heads)
            .bind_params(&self.critic);
        b
    }

    pub fn scalar_count(&self) -> usize {
        self.extractor.scalar_count() + self.heads.scalar_count() + self.critic.scalar_count()
    }

    pub fn head_classes(&self, head: Head) -> Option<usize> {
        self.heads
            .get(&format!("{}.weight", head.prefix()))
            .map(|p| p.value.cols())
    }

    /// Creates (or re-creates with a new class count) the target head.
    pub fn set_target_head(&mut self, classes: usize, seed: u64) {
        let prefix = Head::Target.prefix();
        self.heads.remove(&format!("{prefix}.weight"));
        self.heads.remove(&format!("{prefix}.bias"));
        self.config.target_classes = classes;
        if classes > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fan_in = self.config.classifier_input_dim();
            insert_affine(&mut self.heads, &mut rng, prefix, fan_in, classes);
        }
    }

    fn check_frames(&self, frames: &Tensor) -> Result<(), NetworkError> {
        let cfg = &self.config;
        if frames.cols() != cfg.frame_dim {
            return Err(NetworkError::FrameDim {
                expected: cfg.frame_dim,
                got: frames.cols(),
            });
        }
        if frames.rows() < cfg.min_frames() {
            return Err(NetworkError::SequenceTooShort {
                len: frames.rows(),
                span: cfg.min_frames() - 1,
            });
        }
        Ok(())
    }

    /// Inference-mode embeddings (one row per utterance).
    pub fn embed_batch(
        &self,
        utterances: &[&Tensor],
        bits: &[DomainBit],
        use_bit: bool,
    ) -> Result<Tensor, NetworkError> {
        if utterances.is_empty() {
            return Err(NetworkError::Empty);
        }
        for u in utterances {
            self.check_frames(u)?;
        }
        let lengths: Vec<usize> = utterances.iter().map(|u| u.rows()).collect();
        let stacked = Tensor::vstack(utterances);
        let bit_values: Vec<f64> = bits.iter().map(|b| b.value()).collect();
        let mut ng = NetGraph::new();
        let x = ng.graph.constant(stacked);
        let h = ng.embedding(
            self,
            x,
            &lengths,
            use_bit.then_some(bit_values.as_slice()),
            &ForwardMode::inference(),
        );
        let b = self.bindings();
        Ok(ng.graph.evaluate(h, &b)?.clone())
    }

    /// Inference-mode embeddings for many utterances, evaluated in chunks.
    pub fn embed_all(
        &self,
        utterances: &[&Tensor],
        bits: &[DomainBit],
        use_bit: bool,
    ) -> Result<Vec<Vec<f64>>, NetworkError> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(utterances.len());
        for (u, b) in utterances.chunks(CHUNK).zip(bits.chunks(CHUNK)) {
            let h = self.embed_batch(u, b, use_bit)?;
            for r in 0..h.rows() {
                out.push(h.row_slice(r).to_vec());
            }
        }
        Ok(out)
    }

    fn check_embeddings(&self, h: &Tensor) -> Result<(), NetworkError> {
        if h.cols() != self.config.embedding_dim {
            return Err(NetworkError::EmbeddingDim {
                expected: self.config.embedding_dim,
                got: h.cols(),
            });
        }
        Ok(())
    }

    /// Inference-mode log-posteriors for embeddings `h` (`n x d`).
    pub fn classify_batch(&self, h: &Tensor, head: Head) -> Result<Tensor, NetworkError> {
        self.check_embeddings(h)?;
        let mut ng = NetGraph::new();
        let hn = ng.graph.constant(h.clone());
        let lp = ng.classify(self, hn, head, &ForwardMode::inference())?;
        let b = self.bindings();
        Ok(ng.graph.evaluate(lp, &b)?.clone())
    }

    /// Critic values (`n x 1`) for embeddings `h`.
    pub fn critic_batch(&self, h: &Tensor) -> Result<Tensor, NetworkError> {
        self.check_embeddings(h)?;
        let mut ng = NetGraph::new();
        let hn = ng.graph.constant(h.clone());
        let out = ng.critic(self, hn);
        let b = self.bindings();
        Ok(ng.graph.evaluate(out, &b)?.clone())
    }
}

/// Splices `T x m` frames with the given offsets, clamping at the edges.
pub fn splice_context(frames: &Tensor, offsets: &[i32]) -> Result<Tensor, NetworkError> {
    let span = offsets.iter().map(|o| o.unsigned_abs() as usize).max().unwrap_or(0);
    if frames.rows() <= span {
        return Err(NetworkError::SequenceTooShort {
            len: frames.rows(),
            span,
        });
    }
    Ok(crate::autodiff::splice_rows(frames, &[frames.rows()], offsets))
}

/// Per-feature mean and (floored) standard deviation over frames, `1 x 2F`.
pub fn stats_pool(frames: &Tensor) -> Result<Tensor, NetworkError> {
    if frames.rows() == 0 {
        return Err(NetworkError::Empty);
    }
    let mut g = Graph::new();
    let x = g.constant(frames.clone());
    let p = g.stats_pool(x, vec![frames.rows()]);
    Ok(g.evaluate(p, &Bindings::new())?.clone())
}

/// Embedding of a single utterance (`1 x d`), inference mode.
pub fn extract_embedding(
    params: &NetworkParams,
    frames: &Tensor,
    bit: DomainBit,
    use_bit: bool,
) -> Result<Tensor, NetworkError> {
    params.embed_batch(&[frames], &[bit], use_bit)
}

/// `-logp[label] / normalizer`, with `normalizer = ln(classes)` for the
/// loss-balancing used in training.
pub fn cross_entropy_loss(logp: &[f64], label: usize, normalizer: f64) -> Result<f64, NetworkError> {
    if label >= logp.len() {
        return Err(NetworkError::LabelOutOfRange {
            label,
            classes: logp.len(),
        });
    }
    Ok(-logp[label] / normalizer)
}

/// Normalizer that makes the loss of a uniform prediction equal to one.
pub fn class_normalizer(classes: usize) -> f64 {
    if classes > 1 {
        (classes as f64).ln()
    } else {
        1.0
    }
}
