//! Synthetic multi-domain utterance features.
//!
//! Each utterance is a speaker mean plus a per-utterance channel offset plus
//! per-frame noise. Target-domain frames are additionally passed through an
//! affine map `x -> A x + b` and carry their own noise scale.

mod archive;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use archive::{
    decode_archive, encode_archive, read_archive, write_archive, Domain, FeatureRecord, Manifest, ManifestRecord,
    ARCHIVE_MAGIC, ARCHIVE_VERSION, MANIFEST_HEADER,
};

use crate::tensor::Tensor;
use crate::trainer::DomainSet;

pub const MAX_CONDITION: f64 = 100.0;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus spec: {0}")]
    Spec(String),
    #[error("truncated archive at byte offset {offset} while reading {what}")]
    Truncated { offset: usize, what: String },
    #[error("corrupt archive header: {0}")]
    Header(String),
    #[error("duplicate utterance id {0:?}")]
    DuplicateId(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("archive and manifest disagree: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How the target-domain affine map is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShiftSpec {
    Identity,
    /// `A = U diag(g) Vᵀ` with random orthogonal `U`, `V` and gains spread
    /// geometrically over `[min_gain, max_gain]`; `b` is a random direction
    /// of length `offset_norm`.
    Random {
        seed: u64,
        min_gain: f64,
        max_gain: f64,
        offset_norm: f64,
    },
    Explicit {
        matrix: Vec<Vec<f64>>,
        offset: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineShift {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl AffineShift {
    pub fn identity(m: usize) -> Self {
        AffineShift {
            matrix: DMatrix::identity(m, m),
            offset: DVector::zeros(m),
        }
    }

    pub fn condition_number(&self) -> f64 {
        let sv = self.matrix.clone().singular_values();
        let max = sv.max();
        let min = sv.min();
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x + &self.offset
    }
}

fn random_orthogonal(rng: &mut impl Rng, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal))
        .qr()
        .q()
}

impl ShiftSpec {
    pub fn resolve(&self, m: usize) -> Result<AffineShift, CorpusError> {
        let shift = match self {
            ShiftSpec::Identity => AffineShift::identity(m),
            ShiftSpec::Random {
                seed,
                min_gain,
                max_gain,
                offset_norm,
            } => {
                if !(*min_gain > 0.0 && max_gain >= min_gain) {
                    return Err(CorpusError::Spec(format!(
                        "gains must satisfy 0 < min_gain <= max_gain, got {min_gain} and {max_gain}"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let u = random_orthogonal(&mut rng, m);
                let v = random_orthogonal(&mut rng, m);
                let ratio = max_gain / min_gain;
                let gains = DVector::from_fn(m, |i, _| {
                    let t = if m > 1 { i as f64 / (m - 1) as f64 } else { 0.0 };
                    min_gain * ratio.powf(t)
                });
                let dir = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
                let offset = if *offset_norm == 0.0 {
                    DVector::zeros(m)
                } else {
                    dir.normalize() * *offset_norm
                };
                AffineShift {
                    matrix: u * DMatrix::from_diagonal(&gains) * v.transpose(),
                    offset,
                }
            }
            ShiftSpec::Explicit { matrix, offset } => {
                if matrix.len() != m || matrix.iter().any(|r| r.len() != m) || offset.len() != m {
                    return Err(CorpusError::Spec(format!(
                        "explicit shift must be {m}×{m} with a length-{m} offset"
                    )));
                }
                AffineShift {
                    matrix: DMatrix::from_fn(m, m, |i, j| matrix[i][j]),
                    offset: DVector::from_column_slice(offset),
                }
            }
        };
        let cond = shift.condition_number();
        if cond.is_nan() || cond > MAX_CONDITION {
            return Err(CorpusError::Spec(format!(
                "shift matrix condition number {cond} exceeds {MAX_CONDITION}"
            )));
        }
        Ok(shift)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecondLanguage {
    pub language: String,
    pub shift: ShiftSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub frame_dim: usize,
    pub source_speakers: usize,
    pub source_utts_per_speaker: usize,
    pub target_speakers: usize,
    pub target_utts_per_speaker: usize,
    /// Held-out target-domain speakers used only for evaluation trials.
    pub eval_speakers: usize,
    pub eval_utts_per_speaker: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub speaker_scale: f64,
    pub channel_scale: f64,
    pub noise_scale: f64,
    pub shift: ShiftSpec,
    /// Per-frame noise scale in the target domain, replacing `noise_scale`.
    pub target_noise_scale: f64,
    pub source_language: String,
    pub target_language: String,
    /// Marks every second target speaker with another language and shift.
    #[serde(default)]
    pub second_language: Option<SecondLanguage>,
    /// Perturbed copies per training utterance; evaluation data is not augmented.
    #[serde(default)]
    pub augment_copies: usize,
    #[serde(default)]
    pub augment_scale: f64,
    pub seed: u64,
}

impl CorpusSpec {
    /// The reference desk-scale corpus: 200 source speakers × 20 utterances,
    /// 50 target speakers × 10 utterances and 40 held-out evaluation speakers.
    pub fn reference(seed: u64) -> Self {
        CorpusSpec {
            frame_dim: 20,
            source_speakers: 200,
            source_utts_per_speaker: 20,
            target_speakers: 50,
            target_utts_per_speaker: 10,
            eval_speakers: 40,
            eval_utts_per_speaker: 8,
            min_frames: 40,
            max_frames: 80,
            speaker_scale: 1.0,
            channel_scale: 0.5,
            noise_scale: 1.5,
            shift: ShiftSpec::Random {
                seed: seed ^ 0x5348_4946,
                min_gain: 0.5,
                max_gain: 2.0,
                offset_norm: 3.0,
            },
            target_noise_scale: 2.0,
            source_language: "src".into(),
            target_language: "tgt".into(),
            second_language: None,
            augment_copies: 0,
            augment_scale: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Spec(m));
        if self.frame_dim == 0 {
            return bad("frame_dim must be positive".into());
        }
        for (name, v) in [
            ("source_speakers", self.source_speakers),
            ("source_utts_per_speaker", self.source_utts_per_speaker),
            ("target_speakers", self.target_speakers),
            ("target_utts_per_speaker", self.target_utts_per_speaker),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if (self.eval_speakers == 0) != (self.eval_utts_per_speaker == 0) {
            return bad("eval_speakers and eval_utts_per_speaker must both be zero or both positive".into());
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad(format!(
                "frame range must satisfy 0 < min <= max, got {}..={}",
                self.min_frames, self.max_frames
            ));
        }
        for (name, v) in [
            ("speaker_scale", self.speaker_scale),
            ("channel_scale", self.channel_scale),
            ("noise_scale", self.noise_scale),
            ("target_noise_scale", self.target_noise_scale),
            ("augment_scale", self.augment_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        for lang in [&self.source_language, &self.target_language] {
            if lang.is_empty() || lang.contains(char::is_whitespace) {
                return bad(format!("language tag {lang:?} must be non-empty without whitespace"));
            }
        }
        self.shift.resolve(self.frame_dim)?;
        if let Some(second) = &self.second_language {
            second.shift.resolve(self.frame_dim)?;
        }
        Ok(())
    }
}

/// One generated partition: its records and matching manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub records: Vec<FeatureRecord>,
    pub manifest: Manifest,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Utterances with dense speaker labels when `labelled`.
    pub fn domain_set(&self, labelled: bool) -> DomainSet {
        DomainSet {
            utterances: self.records.iter().map(|r| r.frames.clone()).collect(),
            labels: labelled.then(|| self.manifest.speaker_labels()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub source: Partition,
    pub target: Partition,
    pub eval: Partition,
}

#[derive(Clone, Copy)]
enum Part {
    Source = 0,
    Target = 1,
    Eval = 2,
}

#[derive(Clone, Copy)]
enum Draw {
    Speaker = 0,
    Utterance = 1,
    Augment = 2,
}

/// An independent RNG stream per (partition, draw kind, index).
fn stream(seed: u64, part: Part, draw: Draw, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((part as u64) << 56) | ((draw as u64) << 48) | index);
    rng
}

fn gaussian(rng: &mut impl Rng, m: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(m, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn to_f32_grid(v: f64) -> f64 {
    v as f32 as f64
}

struct PartitionPlan<'a> {
    part: Part,
    prefix: &'a str,
    domain: Domain,
    speakers: usize,
    utts: usize,
    augment: bool,
}

fn generate_partition(
    spec: &CorpusSpec,
    plan: PartitionPlan<'_>,
    shifts: &[(String, Option<AffineShift>)],
) -> Partition {
    let m = spec.frame_dim;
    let noise = match plan.domain {
        Domain::Source => spec.noise_scale,
        Domain::Target => spec.target_noise_scale,
    };
    let copies = if plan.augment { spec.augment_copies } else { 0 };
    let mut records = Vec::new();
    let mut manifest = Manifest::default();
    for s in 0..plan.speakers {
        let speaker_id = format!("{}{:04}", plan.prefix, s);
        let (language, shift) = &shifts[s % shifts.len()];
        let mean = gaussian(
            &mut stream(spec.seed, plan.part, Draw::Speaker, s as u64),
            m,
            spec.speaker_scale,
        );
        for u in 0..plan.utts {
            let index = (s * plan.utts + u) as u64;
            let mut rng = stream(spec.seed, plan.part, Draw::Utterance, index);
            let frames = rng.random_range(spec.min_frames..=spec.max_frames);
            let center = &mean + gaussian(&mut rng, m, spec.channel_scale);
            let mut data = Vec::with_capacity(frames * m);
            for _ in 0..frames {
                let x = &center + gaussian(&mut rng, m, noise);
                let x = match shift {
                    Some(a) => a.apply(&x),
                    None => x,
                };
                data.extend(x.iter().map(|&v| to_f32_grid(v)));
            }
            let utt_id = format!("{speaker_id}-{u:03}");
            let base = Tensor::matrix(frames, m, data);
            let mut copies_of: Vec<(String, Tensor)> = Vec::with_capacity(copies);
            for k in 0..copies {
                let mut rng = stream(spec.seed, plan.part, Draw::Augment, index * copies as u64 + k as u64);
                let mut aug = base.clone();
                for v in aug.data_mut() {
                    *v = to_f32_grid(*v + spec.augment_scale * rng.sample::<f64, _>(StandardNormal));
                }
                copies_of.push((format!("{utt_id}-aug{}", k + 1), aug));
            }
            for (id, frames_t) in std::iter::once((utt_id, base)).chain(copies_of) {
                manifest.records.push(ManifestRecord {
                    utt_id: id.clone(),
                    speaker_id: speaker_id.clone(),
                    domain: plan.domain,
                    language: language.clone(),
                    frames,
                });
                records.push(FeatureRecord { id, frames: frames_t });
            }
        }
    }
    Partition { records, manifest }
}

/// Generates source, target and evaluation partitions. Deterministic in
/// `spec.seed`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus, CorpusError> {
    spec.validate()?;
    let m = spec.frame_dim;
    let source_shift = vec![(spec.source_language.clone(), None)];
    let mut target_shifts = vec![(spec.target_language.clone(), Some(spec.shift.resolve(m)?))];
    if let Some(second) = &spec.second_language {
        target_shifts.push((second.language.clone(), Some(second.shift.resolve(m)?)));
    }
    let source = generate_partition(
        spec,
        PartitionPlan {
            part: Part::Source,
            prefix: "src",
            domain: Domain::Source,
            speakers: spec.source_speakers,
            utts: spec.source_utts_per_speaker,
            augment: true,
        },
        &source_shift,
    );
    let target = generate_partition(
        spec,
        PartitionPlan {
            part: Part::Target,
            prefix: "tgt",
            domain: Domain::Target,
            speakers: spec.target_speakers,
            utts: spec.target_utts_per_speaker,
            augment: true,
        },
        &target_shifts,
    );
    let eval = generate_partition(
        spec,
        PartitionPlan {
            part: Part::Eval,
            prefix: "evl",
            domain: Domain::Target,
            speakers: spec.eval_speakers,
            utts: spec.eval_utts_per_speaker,
            augment: false,
        },
        &target_shifts,
    );
    Ok(Corpus { source, target, eval })
}
