#![allow(dead_code)]

use advda_core::autodiff::{Bindings, Graph, NodeId};
use advda_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in [-2, 2] kept away from zero so that kinks (relu at 0)
/// are not straddled by the finite-difference step.
pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| loop {
            let v: f64 = rng.random_range(-2.0..2.0);
            if v.abs() > 1e-2 {
                break v;
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data)
}

pub fn positive_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(0.5..2.0)).collect();
    Tensor::matrix(rows, cols, data)
}

/// Relative error between two tensors, `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.zip_map(b, |x, y| x - y).frobenius_norm();
    diff / a.frobenius_norm().max(b.frobenius_norm()).max(1e-6)
}

pub struct GradCheck {
    pub worst: f64,
    pub per_input: Vec<f64>,
}

/// Compares analytic gradients with central finite differences.
///
/// `build` receives the graph and one input node per tensor in `inputs` and
/// returns a node of any shape; the checked scalar is the weighted sum of
/// that node's entries with fixed random weights.
pub fn check_gradients<F>(inputs: &[Tensor], seed: u64, build: F) -> GradCheck
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("x{i}")).collect();
    let mut g = Graph::new();
    let ids: Vec<NodeId> = names.iter().map(|n| g.input(n.clone())).collect();
    let out = build(&mut g, &ids);

    let mut b = Bindings::new();
    for (n, t) in names.iter().zip(inputs) {
        b.bind(n.clone(), t);
    }
    let shape = g.evaluate(out, &b).expect("forward").dims();
    let mut r = rng(seed);
    let weights = random_tensor(&mut r, shape.0, shape.1);
    let wnode = g.constant(weights);
    let prod = g.mul(out, wnode);
    let root = g.sum(prod);
    g.evaluate(root, &b).expect("forward");
    let grads = g.gradients(root).expect("backward");

    let eval_at = |perturbed: &[Tensor]| -> f64 {
        let mut gg = g.clone();
        let mut bb = Bindings::new();
        for (n, t) in names.iter().zip(perturbed) {
            bb.bind(n.clone(), t);
        }
        gg.evaluate(root, &bb).expect("forward").item()
    };

    let mut per_input = Vec::new();
    for (k, t) in inputs.iter().enumerate() {
        let mut numeric = Tensor::zeros(t.rows(), t.cols());
        for e in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= FD_STEP;
            numeric.data_mut()[e] = (eval_at(&plus) - eval_at(&minus)) / (2.0 * FD_STEP);
        }
        let analytic = grads
            .input(&names[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()));
        per_input.push(rel_err(&analytic, &numeric));
    }
    let worst = per_input.iter().cloned().fold(0.0, f64::max);
    GradCheck { worst, per_input }
}

pub mod fixtures {
    use super::{random_tensor, rng};
    use std::collections::BTreeMap;

    use advda_core::autodiff::ParamSet;
    use advda_core::network::{init_network, NetworkConfig, NetworkParams};
    use advda_core::trainer::{sample_minibatch, DomainSet, Minibatch, StepPlan, TrainConfig, TrainData};
    use advda_core::Tensor;
    use rand::Rng;

    pub fn tiny_config(source_classes: usize, target_classes: usize) -> NetworkConfig {
        NetworkConfig {
            frame_dim: 3,
            tdnn_widths: vec![5, 4],
            tdnn_contexts: vec![vec![-1, 0, 1], vec![0]],
            embedding_dim: 4,
            post_pool_widths: vec![4, 5],
            source_classes,
            target_classes,
            use_domain_label: false,
            critic_widths: vec![6, 5],
            leaky_slope: 0.2,
            bn_momentum: 0.95,
        }
    }

    pub fn tiny_network(seed: u64) -> NetworkParams {
        init_network(&tiny_config(4, 3), seed).unwrap()
    }

    /// Utterances whose frames are a per-class offset plus noise; target
    /// frames are additionally shifted.
    pub fn domain(seed: u64, classes: usize, per_class: usize, shift: f64, labelled: bool) -> DomainSet {
        let mut r = rng(seed);
        let mut utterances = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            let centre: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
            for _ in 0..per_class {
                let len = r.random_range(12..20);
                let noise = random_tensor(&mut r, len, 3).scaled(0.3);
                let frames = Tensor::matrix(
                    len,
                    3,
                    (0..len * 3).map(|i| centre[i % 3] + noise.data()[i] + shift).collect(),
                );
                utterances.push(frames);
                labels.push(c);
            }
        }
        DomainSet {
            utterances,
            labels: labelled.then_some(labels),
        }
    }

    pub fn toy_data(seed: u64, target_labelled: bool) -> TrainData {
        TrainData {
            source: domain(seed, 4, 6, 0.0, true),
            target: domain(seed + 1, 3, 5, 1.5, target_labelled),
        }
    }

    pub fn toy_train_config() -> TrainConfig {
        TrainConfig {
            critic_steps: 2,
            critic_rate: 0.01,
            main_rate: 0.1,
            source_batch: 6,
            target_batch: 6,
            segment_min: 8,
            segment_max: 12,
            epochs: 5,
            minibatches_per_epoch: 3,
            warmup_epochs: 2,
            halve_every: 2,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    /// Randomizes every parameter and running statistic so no layer is trivial.
    pub fn randomize(p: &mut NetworkParams, seed: u64) {
        let mut r = rng(seed);
        for set in [&mut p.extractor, &mut p.heads, &mut p.critic] {
            let names: Vec<String> = set.names().map(str::to_string).collect();
            for n in names {
                let t = set.value_mut(&n).unwrap();
                let fresh = random_tensor(&mut r, t.rows(), t.cols()).scaled(0.5);
                *t = fresh;
            }
        }
        for rs in p.running.values_mut() {
            for m in rs.mean.iter_mut() {
                *m = r.random_range(-0.5..0.5);
            }
            for v in rs.var.iter_mut() {
                *v = r.random_range(0.5..2.0);
            }
        }
    }

    pub fn randomize_critic(p: &mut NetworkParams, seed: u64) {
        let mut r = rng(seed);
        let names: Vec<String> = p.critic.names().map(str::to_string).collect();
        for n in names {
            let t = p.critic.value_mut(&n).unwrap();
            *t = random_tensor(&mut r, t.rows(), t.cols()).scaled(0.6);
        }
    }

    pub fn zero_critic(p: &mut NetworkParams) {
        let names: Vec<String> = p.critic.names().map(str::to_string).collect();
        for n in names {
            let t = p.critic.value_mut(&n).unwrap();
            *t = Tensor::zeros(t.rows(), t.cols());
        }
    }

    pub fn linear_critic(w: &[f64]) -> NetworkParams {
        let mut cfg = tiny_config(4, 0);
        cfg.critic_widths = vec![];
        let mut p = init_network(&cfg, 1).unwrap();
        *p.critic.value_mut("critic1.weight").unwrap() = Tensor::column(w.to_vec());
        *p.critic.value_mut("critic1.bias").unwrap() = Tensor::scalar(0.3);
        p
    }

    pub fn fd_check(
        set: &ParamSet,
        analytic: &BTreeMap<String, Tensor>,
        coords: usize,
        seed: u64,
        objective: impl Fn(&str, usize, f64) -> f64,
    ) -> f64 {
        let mut r = rng(seed);
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for (name, g) in analytic {
            let len = set.value(name).len();
            for _ in 0..coords.min(len) {
                let e = r.random_range(0..len);
                let plus = objective(name, e, 1e-5);
                let minus = objective(name, e, -1e-5);
                num.push((plus - minus) / 2e-5);
                ana.push(g.data()[e]);
            }
        }
        let diff = num.iter().zip(&ana).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale = num.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
        diff / scale
    }

    pub fn fixed_batch(seed: u64, labelled: bool) -> Minibatch {
        let data = toy_data(seed, labelled);
        let labels = data.target.labels.clone();
        sample_minibatch(
            &data.source,
            6,
            &data.target,
            6,
            labels.as_deref(),
            (8, 12),
            &mut rng(seed + 50),
        )
        .unwrap()
    }

    pub fn full_plan(cfg: &TrainConfig) -> StepPlan {
        StepPlan::adaptation(cfg, cfg.warmup_epochs, 2)
    }
}

pub mod plda {
    use advda_core::backend::PldaModel;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;
    use rand_distr::StandardNormal;

    use super::rng;

    pub fn normal_vector(rng: &mut impl Rng, d: usize) -> DVector<f64> {
        DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
    }

    /// Random rotation of the given spectrum.
    pub fn random_spd(rng: &mut impl Rng, eigenvalues: &[f64]) -> DMatrix<f64> {
        let d = eigenvalues.len();
        let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = a.qr().q();
        let m = &q * DMatrix::from_diagonal(&DVector::from_column_slice(eigenvalues)) * q.transpose();
        (&m + m.transpose()) * 0.5
    }

    pub fn random_model(rng: &mut impl Rng, between: &[f64], within: &[f64]) -> PldaModel {
        let d = between.len();
        PldaModel {
            mean: normal_vector(rng, d),
            between: random_spd(rng, between),
            within: random_spd(rng, within),
        }
    }

    /// `classes × per_class` vectors drawn from the model, labelled by class.
    pub fn sample(
        rng: &mut impl Rng,
        model: &PldaModel,
        classes: usize,
        per_class: usize,
    ) -> (Vec<Vec<f64>>, Vec<usize>) {
        let d = model.dim();
        let lb = model.between.clone().cholesky().expect("between SPD").l();
        let lw = model.within.clone().cholesky().expect("within SPD").l();
        let mut vectors = Vec::with_capacity(classes * per_class);
        let mut labels = Vec::with_capacity(classes * per_class);
        for k in 0..classes {
            let y = &model.mean + &lb * normal_vector(rng, d);
            for _ in 0..per_class {
                let x = &y + &lw * normal_vector(rng, d);
                vectors.push(x.as_slice().to_vec());
                labels.push(k);
            }
        }
        (vectors, labels)
    }

    pub fn rel_frobenius(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
        (estimate - truth).norm() / truth.norm()
    }

    pub fn decaying(n: usize, top: f64) -> Vec<f64> {
        (0..n).map(|k| top * 0.5f64.powi(k as i32)).collect()
    }

    pub fn spread(n: usize) -> Vec<f64> {
        (0..n).map(|k| 0.5 + 0.15 * k as f64).collect()
    }

    /// log ∫ Π_i N(x_i; y, W) N(y; μ, B) dy over a 2-D grid in the coordinates
    /// that whiten the posterior of y, accumulated with log-sum-exp.
    pub fn log_marginal_quadrature(model: &PldaModel, xs: &[DVector<f64>]) -> f64 {
        let ln_gauss = |x: &DVector<f64>, m: &DVector<f64>, c: &DMatrix<f64>| -> f64 {
            let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)];
            let d = x - m;
            let q = (c[(1, 1)] * d[0] * d[0] - 2.0 * c[(0, 1)] * d[0] * d[1] + c[(0, 0)] * d[1] * d[1]) / det;
            -(2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln() - 0.5 * q
        };
        let inv = |c: &DMatrix<f64>| c.clone().try_inverse().unwrap();
        let mut precision = inv(&model.between);
        let mut lin = inv(&model.between) * &model.mean;
        for x in xs {
            precision += inv(&model.within);
            lin += inv(&model.within) * x;
        }
        let post_cov = inv(&precision);
        let post_mean = &post_cov * lin;
        let l = post_cov.clone().cholesky().unwrap().l();
        let jac = (l[(0, 0)] * l[(1, 1)]).ln();
        let (half, steps) = (9.0, 240);
        let h = 2.0 * half / steps as f64;
        let mut terms = Vec::with_capacity((steps + 1) * (steps + 1));
        for a in 0..=steps {
            for b in 0..=steps {
                let z = DVector::from_vec(vec![-half + a as f64 * h, -half + b as f64 * h]);
                let y = &post_mean + &l * z;
                let mut v = ln_gauss(&y, &model.mean, &model.between);
                for x in xs {
                    v += ln_gauss(x, &y, &model.within);
                }
                terms.push(v);
            }
        }
        let peak = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = terms.iter().map(|v| (v - peak).exp()).sum();
        peak + sum.ln() + 2.0 * h.ln() + jac
    }

    /// Directions g with gᵀ Σ_t g = 1 that diagonalize the whitened observed
    /// covariance, found with the symmetric inverse square root of Σ_t.
    pub fn generalized_directions(total: &DMatrix<f64>, observed: &DMatrix<f64>) -> Vec<(DVector<f64>, f64)> {
        let eig = total.clone().symmetric_eigen();
        let inv_sqrt = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()))
            * eig.eigenvectors.transpose();
        let white = &inv_sqrt * observed * &inv_sqrt;
        let e2 = ((&white + white.transpose()) * 0.5).symmetric_eigen();
        (0..total.nrows())
            .map(|i| (&inv_sqrt * e2.eigenvectors.column(i), e2.eigenvalues[i]))
            .collect()
    }

    pub fn adaptation_setup(seed: u64) -> (PldaModel, Vec<Vec<f64>>) {
        let mut r = rng(seed);
        let model = random_model(&mut r, &decaying(5, 3.0), &spread(5));
        let shifted = PldaModel {
            between: random_spd(&mut r, &[6.0, 1.0, 0.5, 0.3, 0.1]),
            within: random_spd(&mut r, &[2.0, 1.5, 1.0, 0.7, 0.4]),
            ..model.clone()
        };
        let (data, _) = sample(&mut r, &shifted, 200, 3);
        (model, data)
    }
}

pub mod metrics {
    use super::rng;
    use rand::Rng;

    /// Every threshold that changes a decision, counted trial by trial: accept
    /// when score ≥ θ, for θ in the score set plus +∞.
    pub fn brute_force_points(scores: &[f64], keys: &[bool]) -> Vec<(f64, f64)> {
        let nt = keys.iter().filter(|&&k| k).count() as f64;
        let nn = keys.iter().filter(|&&k| !k).count() as f64;
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.push(f64::INFINITY);
        let mut points: Vec<(f64, f64)> = thresholds
            .iter()
            .map(|&th| {
                let mut miss = 0usize;
                let mut fa = 0usize;
                for (s, k) in scores.iter().zip(keys) {
                    let accept = *s >= th;
                    if *k && !accept {
                        miss += 1;
                    }
                    if !*k && accept {
                        fa += 1;
                    }
                }
                (miss as f64 / nt, fa as f64 / nn)
            })
            .collect();
        points.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
        points.dedup();
        points
    }

    /// Intersection of the piecewise-linear ROC with the diagonal.
    pub fn brute_force_eer(scores: &[f64], keys: &[bool]) -> f64 {
        let pts = brute_force_points(scores, keys);
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (da, db) = (a.0 - a.1, b.0 - b.1);
            if da == 0.0 {
                return 100.0 * a.0;
            }
            if da < 0.0 && db >= 0.0 {
                let t = -da / (db - da);
                return 100.0 * (a.0 + t * (b.0 - a.0));
            }
        }
        100.0 * pts.last().unwrap().0
    }

    pub fn brute_force_dcf(scores: &[f64], keys: &[bool], p: f64) -> f64 {
        brute_force_points(scores, keys)
            .iter()
            .map(|&(m, f)| p * m + (1.0 - p) * f)
            .fold(f64::INFINITY, f64::min)
            / p
    }

    pub fn random_trials(seed: u64, n: usize, rounding: f64) -> (Vec<f64>, Vec<bool>) {
        let mut r = rng(seed);
        let keys: Vec<bool> = (0..n).map(|i| i % 5 == 0 || r.random_bool(0.1)).collect();
        let scores = keys
            .iter()
            .map(|&k| {
                let s: f64 = r.random_range(-3.0..3.0) + if k { 1.5 } else { 0.0 };
                (s / rounding).round() * rounding
            })
            .collect();
        (scores, keys)
    }
}
