//! Verification backend: centering, LDA, length normalization, two-covariance
//! Gaussian PLDA and unsupervised PLDA covariance adaptation.

mod bundle;

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bundle::{decode_bundle, encode_bundle, read_bundle, write_bundle, BUNDLE_MAGIC, BUNDLE_VERSION};

/// Floor applied to covariance eigenvalues before inversion.
pub const EIGEN_FLOOR: f64 = 1e-8;
/// Shrinkage toward the diagonal when adaptation data is scarcer than dimensions.
pub const ADAPT_SHRINKAGE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("need at least {needed} classes, got {got}")]
    TooFewClasses { needed: usize, got: usize },
    #[error("class {class} has {count} vectors, need at least 2")]
    SmallClass { class: usize, count: usize },
    #[error("LDA dimension {r} exceeds rank bound {bound}")]
    RankBound { r: usize, bound: usize },
    #[error("vector has zero norm after projection; cannot length-normalize")]
    ZeroNorm,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("{vectors} vectors but {labels} labels")]
    LabelCount { vectors: usize, labels: usize },
    #[error("degenerate model: {0}")]
    Degenerate(String),
    #[error("invalid adaptation parameters: {0}")]
    Params(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("malformed backend bundle: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Centering, projection and optional length normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendTransform {
    pub mean: DVector<f64>,
    /// r × d projection.
    pub lda: DMatrix<f64>,
    pub length_norm: bool,
}

impl BackendTransform {
    pub fn identity(d: usize, length_norm: bool) -> Self {
        BackendTransform {
            mean: DVector::zeros(d),
            lda: DMatrix::identity(d, d),
            length_norm,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.lda.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.lda.nrows()
    }

    /// Same projection, recentered at the mean of `vectors`.
    pub fn recentered(&self, vectors: &[Vec<f64>]) -> Result<Self, BackendError> {
        let mean = mean_vector(vectors, self.input_dim())?;
        Ok(BackendTransform { mean, ..self.clone() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PldaModel {
    pub mean: DVector<f64>,
    pub between: DMatrix<f64>,
    pub within: DMatrix<f64>,
}

impl PldaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn total(&self) -> DMatrix<f64> {
        &self.between + &self.within
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptParams {
    pub xi: f64,
    pub eta: f64,
}

impl AdaptParams {
    pub const DEFAULT: AdaptParams = AdaptParams { xi: 0.25, eta: 0.75 };

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.xi >= 0.0 && self.eta >= 0.0) || !self.xi.is_finite() || !self.eta.is_finite() {
            return Err(BackendError::Params(format!(
                "xi and eta must be finite and non-negative, got {} and {}",
                self.xi, self.eta
            )));
        }
        Ok(())
    }
}

impl Default for AdaptParams {
    fn default() -> Self {
        Self::DEFAULT
    }
}

fn check_dim(got: usize, expected: usize) -> Result<(), BackendError> {
    if got != expected {
        return Err(BackendError::Dimension { expected, got });
    }
    Ok(())
}

fn mean_vector(vectors: &[Vec<f64>], d: usize) -> Result<DVector<f64>, BackendError> {
    if vectors.is_empty() {
        return Err(BackendError::Empty("no vectors"));
    }
    let mut m = DVector::zeros(d);
    for v in vectors {
        check_dim(v.len(), d)?;
        m += DVector::from_column_slice(v);
    }
    Ok(m / vectors.len() as f64)
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetrizes `m` and raises its eigenvalues to at least `floor`.
pub fn floor_eigenvalues(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return symmetrize(m);
    }
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let u = &eig.eigenvectors;
    symmetrize(&(u * DMatrix::from_diagonal(&vals) * u.transpose()))
}

fn inverse_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>, BackendError> {
    m.clone()
        .cholesky()
        .map(|c| symmetrize(&c.inverse()))
        .ok_or_else(|| BackendError::Degenerate("matrix is not positive definite".into()))
}

fn log_det_spd(m: &DMatrix<f64>) -> Result<f64, BackendError> {
    let c = m
        .clone()
        .cholesky()
        .ok_or_else(|| BackendError::Degenerate("matrix is not positive definite".into()))?;
    Ok(2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// `√r · v / ‖v‖`.
pub fn length_normalize(v: &DVector<f64>) -> Result<DVector<f64>, BackendError> {
    let norm = v.norm();
    if norm == 0.0 {
        return Err(BackendError::ZeroNorm);
    }
    Ok(v * ((v.len() as f64).sqrt() / norm))
}

pub fn apply_transform(t: &BackendTransform, x: &[f64]) -> Result<Vec<f64>, BackendError> {
    check_dim(x.len(), t.input_dim())?;
    let y = &t.lda * (DVector::from_column_slice(x) - &t.mean);
    let y = if t.length_norm { length_normalize(&y)? } else { y };
    Ok(y.as_slice().to_vec())
}

pub fn apply_transform_all(t: &BackendTransform, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, BackendError> {
    xs.iter().map(|x| apply_transform(t, x)).collect()
}

/// Groups vector indices by label after validating shapes.
fn group_by_label(
    vectors: &[Vec<f64>],
    labels: &[usize],
) -> Result<(usize, BTreeMap<usize, Vec<usize>>), BackendError> {
    if vectors.len() != labels.len() {
        return Err(BackendError::LabelCount {
            vectors: vectors.len(),
            labels: labels.len(),
        });
    }
    let d = vectors.first().ok_or(BackendError::Empty("no vectors"))?.len();
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, (v, &l)) in vectors.iter().zip(labels).enumerate() {
        check_dim(v.len(), d)?;
        groups.entry(l).or_default().push(i);
    }
    Ok((d, groups))
}

/// Between- and within-class scatter, both normalized by the vector count.
pub fn class_scatter(vectors: &[Vec<f64>], labels: &[usize]) -> Result<(DMatrix<f64>, DMatrix<f64>), BackendError> {
    let (d, groups) = group_by_label(vectors, labels)?;
    let n = vectors.len() as f64;
    let global = mean_vector(vectors, d)?;
    let mut sb = DMatrix::zeros(d, d);
    let mut sw = DMatrix::zeros(d, d);
    for idx in groups.values() {
        let mut m = DVector::zeros(d);
        for &i in idx {
            m += DVector::from_column_slice(&vectors[i]);
        }
        m /= idx.len() as f64;
        let dm = &m - &global;
        sb.ger(idx.len() as f64, &dm, &dm, 1.0);
        for &i in idx {
            let dx = DVector::from_column_slice(&vectors[i]) - &m;
            sw.ger(1.0, &dx, &dx, 1.0);
        }
    }
    Ok((sb / n, sw / n))
}

/// Rows are the top-`r` generalized eigenvectors of (between, within + εI),
/// scaled so that `row_i · within · row_jᵀ = δ_ij`.
pub fn estimate_lda(vectors: &[Vec<f64>], labels: &[usize], r: usize) -> Result<DMatrix<f64>, BackendError> {
    let (d, groups) = group_by_label(vectors, labels)?;
    if groups.len() < 2 {
        return Err(BackendError::TooFewClasses {
            needed: 2,
            got: groups.len(),
        });
    }
    for (&class, idx) in &groups {
        if idx.len() < 2 {
            return Err(BackendError::SmallClass {
                class,
                count: idx.len(),
            });
        }
    }
    let bound = d.min(groups.len() - 1);
    if r == 0 || r > bound {
        return Err(BackendError::RankBound { r, bound });
    }
    let (sb, sw) = class_scatter(vectors, labels)?;
    let scale = sw.trace() / d as f64;
    let eps = 1e-12 * if scale > 0.0 { scale } else { 1.0 };
    let reg = symmetrize(&sw) + DMatrix::identity(d, d) * eps;
    let chol = reg
        .cholesky()
        .ok_or_else(|| BackendError::Degenerate("within-class scatter is not positive definite".into()))?;
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or_else(|| BackendError::Degenerate("singular Cholesky factor".into()))?;
    let m = symmetrize(&(&l_inv * sb * l_inv.transpose()));
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut w = DMatrix::zeros(r, d);
    for (k, &j) in order.iter().take(r).enumerate() {
        let row = eig.eigenvectors.column(j).transpose() * &l_inv;
        // Deterministic sign: largest-magnitude entry positive.
        let pivot = row
            .iter()
            .copied()
            .fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        w.row_mut(k).copy_from(&(row * sign));
    }
    Ok(w)
}

/// Estimates a transform on labelled training vectors, centered at their mean.
pub fn estimate_transform(
    vectors: &[Vec<f64>],
    labels: &[usize],
    r: usize,
    length_norm: bool,
) -> Result<BackendTransform, BackendError> {
    let lda = estimate_lda(vectors, labels, r)?;
    let mean = mean_vector(vectors, lda.ncols())?;
    Ok(BackendTransform { mean, lda, length_norm })
}

struct ClassStats {
    count: usize,
    mean: DVector<f64>,
}

/// Per-class sufficient statistics and the pooled within-class scatter sum.
fn plda_stats(vectors: &[Vec<f64>], labels: &[usize]) -> Result<(usize, Vec<ClassStats>, DMatrix<f64>), BackendError> {
    let (d, groups) = group_by_label(vectors, labels)?;
    if groups.len() < 2 {
        return Err(BackendError::TooFewClasses {
            needed: 2,
            got: groups.len(),
        });
    }
    let mut classes = Vec::with_capacity(groups.len());
    let mut scatter = DMatrix::zeros(d, d);
    for idx in groups.values() {
        let mut m = DVector::zeros(d);
        for &i in idx {
            m += DVector::from_column_slice(&vectors[i]);
        }
        m /= idx.len() as f64;
        for &i in idx {
            let dx = DVector::from_column_slice(&vectors[i]) - &m;
            scatter.ger(1.0, &dx, &dx, 1.0);
        }
        classes.push(ClassStats {
            count: idx.len(),
            mean: m,
        });
    }
    if classes.iter().all(|c| c.count < 2) {
        return Err(BackendError::Degenerate(
            "every class has a single vector; within-class covariance is unidentifiable".into(),
        ));
    }
    Ok((d, classes, scatter))
}

/// Log-likelihood of labelled data under the two-covariance model.
fn plda_log_likelihood(model: &PldaModel, classes: &[ClassStats], scatter: &DMatrix<f64>) -> Result<f64, BackendError> {
    let d = model.dim() as f64;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let w_inv = inverse_spd(&model.within)?;
    let ld_w = log_det_spd(&model.within)?;
    let n_total: usize = classes.iter().map(|c| c.count).sum();
    let mut ll = -0.5 * w_inv.component_mul(scatter).sum();
    ll -= 0.5 * (n_total - classes.len()) as f64 * (d * ln2pi + ld_w);
    let mut cache: BTreeMap<usize, (DMatrix<f64>, f64)> = BTreeMap::new();
    for c in classes {
        let (inv, ld) = match cache.entry(c.count) {
            Entry::Occupied(e) => &*e.into_mut(),
            Entry::Vacant(e) => {
                let cov = &model.between + &model.within / c.count as f64;
                &*e.insert((inverse_spd(&cov)?, log_det_spd(&cov)?))
            }
        };
        let dm = &c.mean - &model.mean;
        ll -= 0.5 * (d * ln2pi + ld + dm.dot(&(inv * &dm)));
        ll -= 0.5 * d * (c.count as f64).ln();
    }
    Ok(ll)
}

/// Fits a two-covariance PLDA model by EM. Returns the model and the data
/// log-likelihood before the first and after every iteration.
pub fn plda_train_em(
    vectors: &[Vec<f64>],
    labels: &[usize],
    iterations: usize,
) -> Result<(PldaModel, Vec<f64>), BackendError> {
    let (d, classes, scatter) = plda_stats(vectors, labels)?;
    let k = classes.len() as f64;
    let n_total = vectors.len() as f64;

    let mut mean = DVector::zeros(d);
    for c in &classes {
        mean += &c.mean;
    }
    mean /= k;
    let mut between = DMatrix::zeros(d, d);
    for c in &classes {
        let dm = &c.mean - &mean;
        between.ger(1.0 / k, &dm, &dm, 1.0);
    }
    let within_dof = vectors.len() - classes.len();
    let mut model = PldaModel {
        mean,
        between: floor_eigenvalues(&between, EIGEN_FLOOR),
        within: floor_eigenvalues(&(&scatter / within_dof as f64), EIGEN_FLOOR),
    };
    let mut history = vec![plda_log_likelihood(&model, &classes, &scatter)?];

    for _ in 0..iterations {
        let b_inv = inverse_spd(&model.between)?;
        let w_inv = inverse_spd(&model.within)?;
        let b_inv_mu = &b_inv * &model.mean;
        let mut cache: BTreeMap<usize, DMatrix<f64>> = BTreeMap::new();
        let mut posts = Vec::with_capacity(classes.len());
        for c in &classes {
            let cov = match cache.entry(c.count) {
                Entry::Occupied(e) => &*e.into_mut(),
                Entry::Vacant(e) => &*e.insert(inverse_spd(&(&b_inv + &w_inv * c.count as f64))?),
            };
            let y = cov * (&b_inv_mu + &w_inv * &c.mean * c.count as f64);
            posts.push(y);
        }

        let mut mean = DVector::zeros(d);
        for y in &posts {
            mean += y;
        }
        mean /= k;
        let mut between = DMatrix::zeros(d, d);
        let mut within = scatter.clone();
        for (c, y) in classes.iter().zip(&posts) {
            let cov = &cache[&c.count];
            let dy = y - &mean;
            between += cov;
            between.ger(1.0, &dy, &dy, 1.0);
            let dx = &c.mean - y;
            within += cov * c.count as f64;
            within.ger(c.count as f64, &dx, &dx, 1.0);
        }
        model = PldaModel {
            mean,
            between: floor_eigenvalues(&(between / k), EIGEN_FLOOR),
            within: floor_eigenvalues(&(within / n_total), EIGEN_FLOOR),
        };
        history.push(plda_log_likelihood(&model, &classes, &scatter)?);
    }
    Ok((model, history))
}

/// Precomputed closed-form PLDA verification scorer.
#[derive(Debug, Clone)]
pub struct PldaScorer {
    mean: DVector<f64>,
    /// Quadratic term applied to each side.
    q: DMatrix<f64>,
    /// Cross term between enrollment and test.
    cross: DMatrix<f64>,
    offset: f64,
}

impl PldaScorer {
    pub fn new(model: &PldaModel) -> Result<Self, BackendError> {
        let b = floor_eigenvalues(&model.between, 0.0);
        let w = floor_eigenvalues(&model.within, EIGEN_FLOOR);
        let t = &b + &w;
        let t_inv = inverse_spd(&t)?;
        // Same-class joint covariance [[T, B], [B, T]] has inverse [[P, R], [R, P]].
        let schur = floor_eigenvalues(&(&t - &b * &t_inv * &b), EIGEN_FLOOR);
        let p = inverse_spd(&schur)?;
        let r = symmetrize(&(-(&t_inv * &b * &p)));
        let offset = 0.5 * (log_det_spd(&t)? - log_det_spd(&schur)?);
        Ok(PldaScorer {
            mean: model.mean.clone(),
            q: symmetrize(&(t_inv - p)),
            cross: -r,
            offset,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn score(&self, enroll: &[f64], test: &[f64]) -> Result<f64, BackendError> {
        check_dim(enroll.len(), self.dim())?;
        check_dim(test.len(), self.dim())?;
        let e = DVector::from_column_slice(enroll) - &self.mean;
        let t = DVector::from_column_slice(test) - &self.mean;
        Ok(0.5 * e.dot(&(&self.q * &e)) + 0.5 * t.dot(&(&self.q * &t)) + e.dot(&(&self.cross * &t)) + self.offset)
    }
}

/// log p(e, t | same class) − log p(e, t | different classes).
pub fn plda_score(model: &PldaModel, enroll: &[f64], test: &[f64]) -> Result<f64, BackendError> {
    PldaScorer::new(model)?.score(enroll, test)
}

/// Sample covariance about the sample mean, shrunk toward its diagonal when
/// there are fewer vectors than dimensions.
pub fn adaptation_covariance(vectors: &[Vec<f64>], d: usize) -> Result<DMatrix<f64>, BackendError> {
    if vectors.len() < 2 {
        return Err(BackendError::Empty("adaptation needs at least 2 vectors"));
    }
    let mean = mean_vector(vectors, d)?;
    let mut cov = DMatrix::zeros(d, d);
    for v in vectors {
        let dx = DVector::from_column_slice(v) - &mean;
        cov.ger(1.0, &dx, &dx, 1.0);
    }
    cov /= vectors.len() as f64;
    if vectors.len() < d {
        let diag = DMatrix::from_diagonal(&cov.diagonal());
        cov = cov * (1.0 - ADAPT_SHRINKAGE) + diag * ADAPT_SHRINKAGE;
    }
    Ok(symmetrize(&cov))
}

/// Distributes the adaptation data's excess variance over the model's
/// between-class (share ξ) and within-class (share η) covariances.
pub fn plda_adapt(model: &PldaModel, vectors: &[Vec<f64>], p: AdaptParams) -> Result<PldaModel, BackendError> {
    p.validate()?;
    let d = model.dim();
    let cov = adaptation_covariance(vectors, d)?;
    plda_adapt_covariance(model, &cov, p)
}

/// Adaptation given the observed covariance directly.
pub fn plda_adapt_covariance(model: &PldaModel, cov: &DMatrix<f64>, p: AdaptParams) -> Result<PldaModel, BackendError> {
    p.validate()?;
    let d = model.dim();
    check_dim(cov.nrows(), d)?;
    check_dim(cov.ncols(), d)?;
    let total = floor_eigenvalues(&model.total(), EIGEN_FLOOR);
    let chol = total
        .cholesky()
        .ok_or_else(|| BackendError::Degenerate("total covariance is not positive definite".into()))?;
    let l = chol.l();
    let l_inv = l
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or_else(|| BackendError::Degenerate("singular Cholesky factor".into()))?;
    let whitened = symmetrize(&(&l_inv * cov * l_inv.transpose()));
    let eig = whitened.symmetric_eigen();
    let excess = eig.eigenvalues.map(|v| (v - 1.0).max(0.0));
    let u = &eig.eigenvectors;
    let lift = |share: f64| -> DMatrix<f64> {
        let inner = u * DMatrix::from_diagonal(&(&excess * share)) * u.transpose();
        symmetrize(&(&l * inner * l.transpose()))
    };
    Ok(PldaModel {
        mean: model.mean.clone(),
        between: &model.between + lift(p.xi),
        within: &model.within + lift(p.eta),
    })
}

/// Transform plus PLDA model, as stored in a backend bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendBundle {
    pub transform: BackendTransform,
    pub plda: PldaModel,
}

impl BackendBundle {
    pub fn scorer(&self) -> Result<PldaScorer, BackendError> {
        PldaScorer::new(&self.plda)
    }
}

/// Trains LDA and PLDA on labelled vectors. The returned transform is
/// centered at the training mean; recenter it for evaluation data.
pub fn train_backend(
    vectors: &[Vec<f64>],
    labels: &[usize],
    lda_dim: usize,
    length_norm: bool,
    iterations: usize,
) -> Result<BackendBundle, BackendError> {
    let transform = estimate_transform(vectors, labels, lda_dim, length_norm)?;
    let projected = apply_transform_all(&transform, vectors)?;
    let (plda, _) = plda_train_em(&projected, labels, iterations)?;
    Ok(BackendBundle { transform, plda })
}
