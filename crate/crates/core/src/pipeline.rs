//! Staged experiment pipeline: corpus generation, baseline training,
//! adaptation, embedding extraction, backend training and adaptation,
//! scoring, evaluation and reporting. Every stage reads and writes files
//! under one run directory and records digests in `run_manifest.json`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{plda_adapt, read_bundle, train_backend, write_bundle, AdaptParams, BackendBundle, BackendError};
use crate::evaluation::{compute_eer, compute_min_dcf, score_trials, EvalError, Report, ScoreSet, Trial, TrialList};
use crate::io::write_atomic;
use crate::network::{init_network, DomainBit, NetworkConfig, NetworkError, NetworkParams};
use crate::network::{read_checkpoint, write_checkpoint};
use crate::synthcorpus::{
    generate_corpus, read_archive, write_archive, Corpus, CorpusError, CorpusSpec, FeatureRecord, Manifest, Partition,
};
use crate::tensor::Tensor;
use crate::trainer::{pretrain, train, Mode, Scope, TrainConfig, TrainData, TrainError, TrainLog};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing input {0} (run the producing stage first)")]
    Missing(PathBuf),
    #[error("config: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out_dir: PathBuf,
    /// Evaluation trial list; defaults to all pairs of evaluation utterances
    /// written by the synth stage.
    pub trials: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            out_dir: PathBuf::from("run"),
            trials: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub lda_dim: usize,
    pub length_norm: bool,
    pub plda_iterations: usize,
    pub xi: f64,
    pub eta: f64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            lda_dim: 32,
            length_norm: true,
            plda_iterations: 10,
            xi: AdaptParams::DEFAULT.xi,
            eta: AdaptParams::DEFAULT.eta,
        }
    }
}

impl BackendConfig {
    pub fn adapt_params(&self) -> AdaptParams {
        AdaptParams {
            xi: self.xi,
            eta: self.eta,
        }
    }
}

/// The baseline model or one adaptation variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum System {
    Baseline,
    Adapted { mode: Mode, scope: Scope },
}

impl System {
    pub fn adapted(mode: Mode, scope: Scope) -> Self {
        System::Adapted { mode, scope }
    }

    /// File-name stem: `baseline`, `adv+sup`, `adv+sup.post-pool`.
    pub fn name(self) -> String {
        match self {
            System::Baseline => "baseline".into(),
            System::Adapted {
                mode,
                scope: Scope::All,
            } => mode.name().into(),
            System::Adapted { mode, scope } => format!("{}.{}", mode.name(), scope.name()),
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for System {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self> {
        if s == "baseline" {
            return Ok(System::Baseline);
        }
        let (mode, scope) = s.split_once('.').unwrap_or((s, "all"));
        let bad = |e: String| PipelineError::Config(format!("system {s:?}: {e}"));
        Ok(System::Adapted {
            mode: mode.parse().map_err(bad)?,
            scope: scope.parse().map_err(bad)?,
        })
    }
}

impl Serialize for System {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for System {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub paths: Paths,
    pub corpus: CorpusSpec,
    /// Class counts are taken from the data at training time.
    pub network: NetworkConfig,
    pub pretrain: TrainConfig,
    /// Mode and scope are set per system.
    pub adapt: TrainConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    /// Target priors of the two minDCF operating points.
    #[serde(default = "default_priors")]
    pub priors: [f64; 2],
    /// Adapted systems trained by `run`; the baseline is always included.
    pub systems: Vec<System>,
    /// Seeds corpus generation, initialization and every training run.
    pub seed: u64,
}

fn default_priors() -> [f64; 2] {
    [0.01, 0.005]
}

impl ExperimentConfig {
    /// Desk-scale reference experiment on the reference synthetic corpus.
    pub fn reference(seed: u64) -> Self {
        let corpus = CorpusSpec::reference(seed);
        let pretrain = TrainConfig {
            source_batch: 32,
            target_batch: 32,
            segment_min: 30,
            segment_max: 40,
            epochs: 8,
            minibatches_per_epoch: 50,
            main_rate: 0.5,
            halve_every: 4,
            warmup_epochs: 0,
            seed,
            ..TrainConfig::default()
        };
        let adapt = TrainConfig {
            critic_rate: 0.01,
            critic_steps: 5,
            main_rate: 0.25,
            warmup_epochs: 2,
            ..pretrain.clone()
        };
        ExperimentConfig {
            paths: Paths::default(),
            network: NetworkConfig::desk(corpus.source_speakers, corpus.target_speakers),
            corpus,
            pretrain,
            adapt,
            backend: BackendConfig::default(),
            priors: default_priors(),
            systems: vec![
                System::adapted(Mode::Sup, Scope::All),
                System::adapted(Mode::Adv, Scope::All),
                System::adapted(Mode::AdvSup, Scope::All),
                System::adapted(Mode::AdvLanSup, Scope::All),
                System::adapted(Mode::AdvSup, Scope::PostPool),
            ],
            seed,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => PipelineError::Missing(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Copies the global seed into the corpus and training configs.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.corpus.seed = seed;
        self.pretrain.seed = seed;
        self.adapt.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.corpus.validate()?;
        self.network.validate()?;
        self.pretrain.validate()?;
        self.adapt.validate()?;
        self.backend.adapt_params().validate()?;
        if self.network.frame_dim != self.corpus.frame_dim {
            return bad(format!(
                "network frame_dim {} differs from corpus frame_dim {}",
                self.network.frame_dim, self.corpus.frame_dim
            ));
        }
        for cfg in [&self.pretrain, &self.adapt] {
            if cfg.segment_min < self.network.min_frames() || cfg.segment_max > self.corpus.min_frames {
                return bad(format!(
                    "segments {}..={} must lie within {}..={} (network context, shortest utterance)",
                    cfg.segment_min,
                    cfg.segment_max,
                    self.network.min_frames(),
                    self.corpus.min_frames
                ));
            }
        }
        if self.backend.lda_dim == 0 || self.backend.lda_dim > self.network.embedding_dim {
            return bad(format!(
                "lda_dim must be in 1..={}, got {}",
                self.network.embedding_dim, self.backend.lda_dim
            ));
        }
        if self.priors.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return bad(format!("priors must lie in (0, 1), got {:?}", self.priors));
        }
        if self.systems.contains(&System::Baseline) {
            return bad("systems lists adapted variants only; the baseline is implicit".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub system: String,
    pub plda_adapted: bool,
    #[serde(flatten)]
    pub report: Report,
}

pub fn evaluate_with_priors(scores: &[f64], keys: &[bool], priors: [f64; 2]) -> Result<Report> {
    let eer_pct = compute_eer(scores, keys)?;
    let min_dcf_001 = compute_min_dcf(scores, keys, priors[0])?;
    let min_dcf_0005 = compute_min_dcf(scores, keys, priors[1])?;
    Ok(Report {
        eer_pct,
        min_dcf_001,
        min_dcf_0005,
        dcf_avg: 0.5 * (min_dcf_001 + min_dcf_0005),
    })
}

/// Every unordered pair of distinct utterances, keyed by speaker identity.
pub fn all_pairs_trials(manifest: &Manifest) -> TrialList {
    let r = &manifest.records;
    let mut trials = Vec::new();
    for i in 0..r.len() {
        for j in i + 1..r.len() {
            trials.push(Trial {
                enroll: r[i].utt_id.clone(),
                test: r[j].utt_id.clone(),
                target: r[i].speaker_id == r[j].speaker_id,
            });
        }
    }
    TrialList { trials }
}

/// Embeddings rounded to f32, the precision of embedding archives.
pub fn extract_embeddings(params: &NetworkParams, records: &[FeatureRecord], bit: DomainBit) -> Result<Vec<Vec<f64>>> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let refs: Vec<&Tensor> = records.iter().map(|r| &r.frames).collect();
    let bits = vec![bit; refs.len()];
    let mut emb = params.embed_all(&refs, &bits, params.config.use_domain_label)?;
    for v in emb.iter_mut().flatten() {
        *v = *v as f32 as f64;
    }
    Ok(emb)
}

/// LDA + PLDA trained on labelled source embeddings, with the transform
/// recentered at the mean of the (unlabelled) target embeddings.
pub fn build_backend(
    cfg: &BackendConfig,
    source: &[Vec<f64>],
    source_labels: &[usize],
    target: &[Vec<f64>],
) -> Result<BackendBundle> {
    let mut bundle = train_backend(source, source_labels, cfg.lda_dim, cfg.length_norm, cfg.plda_iterations)?;
    bundle.transform = bundle.transform.recentered(target)?;
    Ok(bundle)
}

/// Unsupervised PLDA adaptation on the transformed target embeddings.
pub fn adapt_backend(bundle: &BackendBundle, target: &[Vec<f64>], p: AdaptParams) -> Result<BackendBundle> {
    let projected = crate::backend::apply_transform_all(&bundle.transform, target)?;
    Ok(BackendBundle {
        transform: bundle.transform.clone(),
        plda: plda_adapt(&bundle.plda, &projected, p)?,
    })
}

/// Baseline extractor trained on the labelled source partition.
pub fn train_baseline(config: &ExperimentConfig, source: &Partition) -> Result<(NetworkParams, TrainLog)> {
    let mut net = config.network.clone();
    net.source_classes = source.manifest.speaker_count();
    net.target_classes = 0;
    let params = init_network(&net, config.seed)?;
    Ok(pretrain(&source.domain_set(true), params, &config.pretrain)?)
}

/// Adapts a baseline extractor. Target labels are used only when the mode
/// needs them and no pseudo-labelling threshold is set.
pub fn adapt_model(
    config: &ExperimentConfig,
    base: NetworkParams,
    mode: Mode,
    scope: Scope,
    source: &Partition,
    target: &Partition,
) -> Result<(NetworkParams, TrainLog)> {
    let cfg = TrainConfig {
        mode,
        scope,
        ..config.adapt.clone()
    };
    let labelled = mode.uses_target_labels() && cfg.pseudo_label_threshold.is_none();
    let data = TrainData {
        source: source.domain_set(true),
        target: target.domain_set(labelled),
    };
    Ok(train(&data, base, &cfg)?)
}

/// Embeds every partition, trains the backend and evaluates all pairs of
/// evaluation utterances. Returns the plain and the PLDA-adapted reports.
pub fn evaluate_model(config: &ExperimentConfig, params: &NetworkParams, corpus: &Corpus) -> Result<[Report; 2]> {
    let source = extract_embeddings(params, &corpus.source.records, DomainBit::Source)?;
    let target = extract_embeddings(params, &corpus.target.records, DomainBit::Target)?;
    let eval = extract_embeddings(params, &corpus.eval.records, DomainBit::Target)?;
    let labels = corpus.source.manifest.speaker_labels();
    let plain = build_backend(&config.backend, &source, &labels, &target)?;
    let adapted = adapt_backend(&plain, &target, config.backend.adapt_params())?;
    let trials = all_pairs_trials(&corpus.eval.manifest);
    let embeddings: HashMap<String, Vec<f64>> = corpus.eval.records.iter().map(|r| r.id.clone()).zip(eval).collect();
    let mut out = Vec::new();
    for bundle in [&plain, &adapted] {
        let scores = score_trials(bundle, &embeddings, &trials)?;
        out.push(evaluate_scores(&scores, &trials, config.priors)?);
    }
    Ok([out[0], out[1]])
}

const PARTITIONS: [&str; 3] = ["source", "target", "eval"];

fn bit_for(partition: &str) -> DomainBit {
    if partition == "source" {
        DomainBit::Source
    } else {
        DomainBit::Target
    }
}

/// Stage runner bound to one run directory.
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

struct Stage<'a> {
    pipeline: &'a Pipeline,
    name: String,
    started: Instant,
    record: StageRecord,
}

impl Stage<'_> {
    /// Digest of an input, checked against what the producing stage recorded.
    fn input(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(PipelineError::Missing(path.to_path_buf()));
        }
        let key = self.pipeline.relative(path);
        let digest = sha256_file(path)?;
        if let Some(manifest) = self.pipeline.load_manifest()? {
            let recorded = manifest.stages.values().find_map(|s| s.outputs.get(&key));
            if let Some(expected) = recorded {
                if *expected != digest {
                    log::warn!("{key}: digest differs from the one recorded when it was produced");
                }
            }
        }
        self.record.inputs.insert(key, digest);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        let key = self.pipeline.relative(path);
        self.record.outputs.insert(key, sha256_file(path)?);
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.record.seconds = self.started.elapsed().as_secs_f64();
        let mut manifest = self.pipeline.load_manifest()?.unwrap_or_else(|| RunManifest {
            tool_version: TOOL_VERSION.into(),
            config: self.pipeline.config.clone(),
            stages: BTreeMap::new(),
        });
        manifest.tool_version = TOOL_VERSION.into();
        manifest.config = self.pipeline.config.clone();
        log::info!("stage {} done in {:.1}s", self.name, self.record.seconds);
        manifest.stages.insert(self.name, self.record);
        let text = serde_json::to_string_pretty(&manifest)?;
        write_atomic(&self.pipeline.out.join(RUN_MANIFEST), text.as_bytes())?;
        Ok(())
    }
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let out = config.paths.out_dir.clone();
        Ok(Pipeline { config, out })
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.out)
            .unwrap_or(path)
            .to_string_lossy()
            .into_owned()
    }

    fn stage(&self, name: impl Into<String>) -> Stage<'_> {
        Stage {
            pipeline: self,
            name: name.into(),
            started: Instant::now(),
            record: StageRecord {
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                seconds: 0.0,
            },
        }
    }

    pub fn load_manifest(&self) -> Result<Option<RunManifest>> {
        let path = self.out.join(RUN_MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
    }

    fn dir(&self, sub: &str) -> Result<PathBuf> {
        let d = self.out.join(sub);
        fs::create_dir_all(&d)?;
        Ok(d)
    }

    pub fn archive_path(&self, partition: &str) -> PathBuf {
        self.out.join("corpus").join(format!("{partition}.xvf"))
    }

    pub fn manifest_path(&self, partition: &str) -> PathBuf {
        self.out.join("corpus").join(format!("{partition}.tsv"))
    }

    pub fn trials_path(&self) -> PathBuf {
        self.config
            .paths
            .trials
            .clone()
            .unwrap_or_else(|| self.out.join("trials").join("eval.trials"))
    }

    pub fn model_path(&self, system: System) -> PathBuf {
        self.out.join("models").join(format!("{system}.advd"))
    }

    pub fn train_log_path(&self, system: System) -> PathBuf {
        self.out.join("logs").join(format!("{system}.jsonl"))
    }

    pub fn embedding_path(&self, system: System, partition: &str) -> PathBuf {
        self.out
            .join("embeddings")
            .join(system.name())
            .join(format!("{partition}.xvf"))
    }

    pub fn bundle_path(&self, system: System, adapted: bool) -> PathBuf {
        let suffix = if adapted { ".plda-adapted" } else { "" };
        self.out.join("backends").join(format!("{system}{suffix}.advb"))
    }

    pub fn scores_path(&self, system: System, adapted: bool) -> PathBuf {
        let suffix = if adapted { ".plda-adapted" } else { "" };
        self.out.join("scores").join(format!("{system}{suffix}.scores"))
    }

    pub fn report_path(&self, system: System, adapted: bool) -> PathBuf {
        let suffix = if adapted { ".plda-adapted" } else { "" };
        self.out.join("reports").join(format!("{system}{suffix}.json"))
    }

    fn load_partition(&self, stage: &mut Stage<'_>, partition: &str) -> Result<Partition> {
        let (a, m) = (self.archive_path(partition), self.manifest_path(partition));
        stage.input(&a)?;
        stage.input(&m)?;
        let records = read_archive(&a)?;
        let manifest = Manifest::read(&m)?;
        manifest.check_archive(&records)?;
        Ok(Partition { records, manifest })
    }

    /// Generates the corpus partitions and the all-pairs evaluation trials.
    pub fn synth(&self) -> Result<()> {
        let mut stage = self.stage("synth");
        self.dir("corpus")?;
        let corpus = generate_corpus(&self.config.corpus)?;
        for (name, part) in PARTITIONS.iter().zip([&corpus.source, &corpus.target, &corpus.eval]) {
            write_archive(&self.archive_path(name), &part.records)?;
            part.manifest.write(&self.manifest_path(name))?;
            stage.output(&self.archive_path(name))?;
            stage.output(&self.manifest_path(name))?;
        }
        self.dir("trials")?;
        let trials = self.out.join("trials").join("eval.trials");
        write_atomic(&trials, all_pairs_trials(&corpus.eval.manifest).format().as_bytes())?;
        stage.output(&trials)?;
        stage.finish()
    }

    pub fn train_base(&self) -> Result<()> {
        let mut stage = self.stage("train-base");
        let source = self.load_partition(&mut stage, "source")?;
        let (params, log) = train_baseline(&self.config, &source)?;
        self.dir("models")?;
        self.dir("logs")?;
        let (model, log_path) = (self.model_path(System::Baseline), self.train_log_path(System::Baseline));
        write_checkpoint(&model, &params)?;
        log.write(&log_path)?;
        stage.output(&model)?;
        stage.output(&log_path)?;
        stage.finish()
    }

    pub fn adapt(&self, mode: Mode, scope: Scope) -> Result<()> {
        let system = System::adapted(mode, scope);
        let mut stage = self.stage(format!("adapt:{system}"));
        let base = self.model_path(System::Baseline);
        stage.input(&base)?;
        let params = read_checkpoint(&base)?;
        let source = self.load_partition(&mut stage, "source")?;
        let target = self.load_partition(&mut stage, "target")?;
        let (params, log) = adapt_model(&self.config, params, mode, scope, &source, &target)?;
        self.dir("models")?;
        self.dir("logs")?;
        let (model, log_path) = (self.model_path(system), self.train_log_path(system));
        write_checkpoint(&model, &params)?;
        log.write(&log_path)?;
        stage.output(&model)?;
        stage.output(&log_path)?;
        stage.finish()
    }

    pub fn extract(&self, system: System) -> Result<()> {
        let mut stage = self.stage(format!("extract:{system}"));
        let model = self.model_path(system);
        stage.input(&model)?;
        let params = read_checkpoint(&model)?;
        fs::create_dir_all(self.out.join("embeddings").join(system.name()))?;
        for name in PARTITIONS {
            let part = self.load_partition(&mut stage, name)?;
            let emb = extract_embeddings(&params, &part.records, bit_for(name))?;
            let records: Vec<FeatureRecord> = part
                .records
                .iter()
                .zip(emb)
                .map(|(r, e)| FeatureRecord {
                    id: r.id.clone(),
                    frames: Tensor::row(e),
                })
                .collect();
            let path = self.embedding_path(system, name);
            write_archive(&path, &records)?;
            stage.output(&path)?;
        }
        stage.finish()
    }

    fn load_embeddings(&self, stage: &mut Stage<'_>, system: System, partition: &str) -> Result<Vec<FeatureRecord>> {
        let path = self.embedding_path(system, partition);
        stage.input(&path)?;
        Ok(read_archive(&path)?)
    }

    fn vectors(records: &[FeatureRecord]) -> Vec<Vec<f64>> {
        records.iter().map(|r| r.frames.data().to_vec()).collect()
    }

    pub fn backend(&self, system: System) -> Result<()> {
        let mut stage = self.stage(format!("backend:{system}"));
        let source = self.load_embeddings(&mut stage, system, "source")?;
        let target = self.load_embeddings(&mut stage, system, "target")?;
        let manifest_path = self.manifest_path("source");
        stage.input(&manifest_path)?;
        let manifest = Manifest::read(&manifest_path)?;
        let index: HashMap<&str, usize> = manifest
            .records
            .iter()
            .map(|r| r.utt_id.as_str())
            .zip(manifest.speaker_labels())
            .collect();
        let labels = source
            .iter()
            .map(|r| {
                index
                    .get(r.id.as_str())
                    .copied()
                    .ok_or_else(|| PipelineError::Config(format!("{} missing from source manifest", r.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let bundle = build_backend(
            &self.config.backend,
            &Self::vectors(&source),
            &labels,
            &Self::vectors(&target),
        )?;
        self.dir("backends")?;
        let path = self.bundle_path(system, false);
        write_bundle(&path, &bundle)?;
        stage.output(&path)?;
        stage.finish()
    }

    pub fn backend_adapt(&self, system: System, p: AdaptParams) -> Result<()> {
        let mut stage = self.stage(format!("backend-adapt:{system}"));
        let base = self.bundle_path(system, false);
        stage.input(&base)?;
        let bundle = read_bundle(&base)?;
        let target = self.load_embeddings(&mut stage, system, "target")?;
        let adapted = adapt_backend(&bundle, &Self::vectors(&target), p)?;
        let path = self.bundle_path(system, true);
        write_bundle(&path, &adapted)?;
        stage.output(&path)?;
        stage.finish()
    }

    fn read_trials(&self, stage: &mut Stage<'_>) -> Result<TrialList> {
        let path = self.trials_path();
        stage.input(&path)?;
        Ok(TrialList::read(&path)?)
    }

    /// Scores the trials with the plain bundle and, when present, the
    /// PLDA-adapted bundle.
    pub fn score(&self, system: System) -> Result<()> {
        let mut stage = self.stage(format!("score:{system}"));
        let trials = self.read_trials(&mut stage)?;
        let eval = self.load_embeddings(&mut stage, system, "eval")?;
        let embeddings: HashMap<String, Vec<f64>> = eval.into_iter().map(|r| (r.id, r.frames.into_data())).collect();
        self.dir("scores")?;
        for adapted in [false, true] {
            let bundle_path = self.bundle_path(system, adapted);
            if adapted && !bundle_path.exists() {
                continue;
            }
            stage.input(&bundle_path)?;
            let scores = score_trials(&read_bundle(&bundle_path)?, &embeddings, &trials)?;
            let path = self.scores_path(system, adapted);
            write_atomic(&path, scores.format().as_bytes())?;
            stage.output(&path)?;
        }
        stage.finish()
    }

    pub fn eval(&self, system: System) -> Result<()> {
        let mut stage = self.stage(format!("eval:{system}"));
        let trials = self.read_trials(&mut stage)?;
        self.dir("reports")?;
        for adapted in [false, true] {
            let scores_path = self.scores_path(system, adapted);
            if adapted && !scores_path.exists() {
                continue;
            }
            stage.input(&scores_path)?;
            let report = evaluate_scores(&ScoreSet::read(&scores_path)?, &trials, self.config.priors)?;
            let path = self.report_path(system, adapted);
            write_atomic(&path, report_json(&report).as_bytes())?;
            stage.output(&path)?;
        }
        stage.finish()
    }

    /// Collects every per-system report into `report.json` and `report.md`.
    pub fn report(&self) -> Result<Vec<ReportRow>> {
        let mut stage = self.stage("report");
        let mut rows = Vec::new();
        let systems = std::iter::once(System::Baseline).chain(self.config.systems.iter().copied());
        for system in systems {
            for adapted in [false, true] {
                let path = self.report_path(system, adapted);
                if !path.exists() {
                    continue;
                }
                stage.input(&path)?;
                let report: Report = serde_json::from_str(&fs::read_to_string(&path)?)?;
                rows.push(ReportRow {
                    system: system.name(),
                    plda_adapted: adapted,
                    report,
                });
            }
        }
        if rows.is_empty() {
            return Err(PipelineError::Missing(self.report_path(System::Baseline, false)));
        }
        let json = self.out.join("report.json");
        let md = self.out.join("report.md");
        write_atomic(&json, (serde_json::to_string_pretty(&rows)? + "\n").as_bytes())?;
        write_atomic(&md, format_table(&rows).as_bytes())?;
        stage.output(&json)?;
        stage.output(&md)?;
        stage.finish()?;
        Ok(rows)
    }

    /// Every downstream stage for one system, from extraction to evaluation.
    pub fn evaluate_system(&self, system: System) -> Result<()> {
        self.extract(system)?;
        self.backend(system)?;
        self.backend_adapt(system, self.config.backend.adapt_params())?;
        self.score(system)?;
        self.eval(system)
    }

    pub fn run(&self) -> Result<Vec<ReportRow>> {
        self.synth()?;
        self.train_base()?;
        self.evaluate_system(System::Baseline)?;
        for &system in &self.config.systems {
            if let System::Adapted { mode, scope } = system {
                self.adapt(mode, scope)?;
                self.evaluate_system(system)?;
            }
        }
        self.report()
    }
}

pub fn evaluate_scores(scores: &ScoreSet, trials: &TrialList, priors: [f64; 2]) -> Result<Report> {
    let (s, k) = scores.align(trials)?;
    evaluate_with_priors(&s, &k, priors)
}

pub fn report_json(report: &Report) -> String {
    serde_json::to_string_pretty(report).expect("report serializes") + "\n"
}

pub fn format_table(rows: &[ReportRow]) -> String {
    let mut out = String::from(
        "| system | PLDA adapted | EER (%) | minDCF (first prior) | minDCF (second prior) | avg minDCF |\n",
    );
    out.push_str("|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {:.2} | {:.3} | {:.3} | {:.3} |",
            r.system,
            if r.plda_adapted { "yes" } else { "no" },
            r.report.eer_pct,
            r.report.min_dcf_001,
            r.report.min_dcf_0005,
            r.report.dcf_avg
        );
    }
    out
}
