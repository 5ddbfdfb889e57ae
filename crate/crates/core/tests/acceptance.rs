//! Acceptance checks, one PASS/FAIL line per criterion. Exits nonzero when
//! any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use advda_core::autodiff::BatchNormMode;
use advda_core::backend::{adaptation_covariance, plda_adapt, plda_score, plda_train_em, AdaptParams, PldaScorer};
use advda_core::evaluation::{compute_eer, compute_min_dcf};
use advda_core::network::{extract_embedding, init_network, DomainBit, Head};
use advda_core::pipeline::{adapt_model, evaluate_model, train_baseline, ExperimentConfig, Pipeline, System};
use advda_core::synthcorpus::generate_corpus;
use advda_core::trainer::{
    critic_gradients, critic_objective, critic_step, gradient_penalty, lr_schedule, main_objective, main_step,
    sample_interpolates, sample_minibatch, set_trainable, train, train_with, wasserstein_loss, MainPass, Mode, Scope,
    TrainConfig,
};
use advda_core::Tensor;
use common::fixtures::{
    fd_check, fixed_batch, full_plan, linear_critic, randomize, randomize_critic, tiny_config, tiny_network, toy_data,
    toy_train_config, zero_critic,
};
use common::metrics::{brute_force_dcf, brute_force_eer, random_trials};
use common::plda::{
    adaptation_setup, decaying, generalized_directions, log_marginal_quadrature, normal_vector, random_model,
    rel_frobenius, sample, spread,
};
use common::{check_gradients, positive_tensor, random_tensor, rng};
use rand::Rng;
use rand_distr::StandardNormal;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn c1_gradients() -> Check {
    let mut worst: f64 = 0.0;
    let mut r = rng(1);
    let mut op = |name: &str,
                  inputs: Vec<Tensor>,
                  build: &dyn Fn(
        &mut advda_core::autodiff::Graph,
        &[advda_core::autodiff::NodeId],
    ) -> advda_core::autodiff::NodeId|
     -> Result<(), String> {
        let res = check_gradients(&inputs, 99, build);
        worst = worst.max(res.worst);
        ensure(res.worst <= 1e-5, || {
            format!("{name}: relative error {:?}", res.per_input)
        })
    };
    let (x, w, b) = (
        random_tensor(&mut r, 4, 3),
        random_tensor(&mut r, 3, 5),
        random_tensor(&mut r, 1, 5),
    );
    op("affine", vec![x.clone(), w.clone(), b], &|g, i| {
        g.affine(i[0], i[1], i[2])
    })?;
    op("matmul", vec![x, w], &|g, i| g.matmul(i[0], i[1]))?;
    let (a, c) = (random_tensor(&mut r, 3, 4), random_tensor(&mut r, 3, 4));
    op("transpose", vec![a.clone()], &|g, i| g.transpose(i[0]))?;
    op("concat", vec![a.clone(), random_tensor(&mut r, 3, 2)], &|g, i| {
        g.concat(vec![i[0], i[1]])
    })?;
    op("rows", vec![a.clone()], &|g, i| g.rows(i[0], 1, 3))?;
    op("broadcast-rows", vec![random_tensor(&mut r, 1, 4)], &|g, i| {
        g.broadcast_rows(i[0], 5)
    })?;
    op("relu", vec![a.clone()], &|g, i| g.relu(i[0]))?;
    op("leaky-relu", vec![a.clone()], &|g, i| g.leaky_relu(i[0], 0.2))?;
    op("log-softmax", vec![a.clone()], &|g, i| g.log_softmax(i[0]))?;
    op("mean", vec![a.clone()], &|g, i| g.mean(i[0]))?;
    op("sum", vec![a.clone()], &|g, i| g.sum(i[0]))?;
    op("square", vec![a.clone()], &|g, i| g.square(i[0]))?;
    op("sqrt", vec![positive_tensor(&mut r, 3, 4)], &|g, i| g.sqrt(i[0]))?;
    op("l2-norm", vec![a.clone()], &|g, i| g.l2_norm(i[0]))?;
    op("scale", vec![a.clone()], &|g, i| g.scale(i[0], -1.7))?;
    op("add", vec![a.clone(), c.clone()], &|g, i| g.add(i[0], i[1]))?;
    op("sub", vec![a.clone(), c.clone()], &|g, i| g.sub(i[0], i[1]))?;
    op("mul", vec![a, c], &|g, i| g.mul(i[0], i[1]))?;
    op("cross-entropy", vec![random_tensor(&mut r, 4, 6)], &|g, i| {
        let lp = g.log_softmax(i[0]);
        g.cross_entropy(lp, vec![0, 5, 2, 2], 6f64.ln())
    })?;
    let bn = vec![
        random_tensor(&mut r, 8, 3),
        random_tensor(&mut r, 1, 3),
        random_tensor(&mut r, 1, 3),
    ];
    op("batch-norm train", bn.clone(), &|g, i| {
        g.batch_norm(i[0], i[1], i[2], BatchNormMode::Train)
    })?;
    op("batch-norm inference", bn, &|g, i| {
        let mode = BatchNormMode::Inference {
            mean: vec![0.1, -0.3, 0.5],
            var: vec![1.5, 0.7, 2.0],
        };
        g.batch_norm(i[0], i[1], i[2], mode)
    })?;
    let frames = random_tensor(&mut r, 9, 3);
    op("stats-pool", vec![frames.clone()], &|g, i| {
        g.stats_pool(i[0], vec![4, 5])
    })?;
    op("splice", vec![frames], &|g, i| {
        g.splice(i[0], vec![4, 5], vec![-2, 0, 1])
    })?;

    // composed losses: L_c (+ delta L_wd) through extractor and heads
    let mut p = tiny_network(20);
    randomize_critic(&mut p, 21);
    p.config.use_domain_label = true;
    let batch = fixed_batch(22, true);
    let mut composed: f64 = 0.0;
    for mode in [Mode::Sup, Mode::AdvSup, Mode::AdvLanSup] {
        let cfg = TrainConfig {
            mode,
            delta: 0.7,
            ..toy_train_config()
        };
        let plan = full_plan(&cfg);
        set_trainable(&mut p, cfg.scope, &plan);
        let (_, grads) = MainPass::forward(&p, &batch, &plan)
            .and_then(|f| f.gradients(&p, &batch, &plan))
            .map_err(|e| e.to_string())?;
        let objective = |heads: bool, name: &str, e: usize, h: f64| {
            let mut q = p.clone();
            let set = if heads { &mut q.heads } else { &mut q.extractor };
            set.value_mut(name).unwrap().data_mut()[e] += h;
            main_objective(&q, &batch, &plan).unwrap().objective
        };
        let ex = fd_check(&p.extractor, &grads.extractor, 6, 23, |n, e, h| {
            objective(false, n, e, h)
        });
        let hd = fd_check(&p.heads, &grads.heads, 6, 24, |n, e, h| objective(true, n, e, h));
        ensure(ex <= 1e-5 && hd <= 1e-5, || {
            format!("{mode}: extractor {ex:.2e}, heads {hd:.2e}")
        })?;
        composed = composed.max(ex).max(hd);
    }
    // L_wd alone (gamma 0) and with the gradient penalty, critic parameters
    let mut p = tiny_network(25);
    randomize_critic(&mut p, 26);
    let mut r = rng(27);
    let (hs, ht) = (random_tensor(&mut r, 5, 4), random_tensor(&mut r, 5, 4));
    let interp = sample_interpolates(&hs, &ht, &mut r).map_err(|e| e.to_string())?;
    let mut penalty: f64 = 0.0;
    for (gamma, tol) in [(0.0, 1e-5), (10.0, 1e-4)] {
        let (_, grads) = critic_gradients(&p, &hs, &ht, &interp, gamma).map_err(|e| e.to_string())?;
        let err = fd_check(&p.critic, &grads, 100, 28, |name, e, h| {
            let mut q = p.clone();
            q.critic.value_mut(name).unwrap().data_mut()[e] += h;
            critic_objective(&q, &hs, &ht, &interp, gamma).unwrap().objective
        });
        ensure(err <= tol, || format!("critic gamma {gamma}: {err:.2e}"))?;
        if gamma == 0.0 {
            composed = composed.max(err);
        } else {
            penalty = err;
        }
    }
    Ok(format!(
        "worst op {worst:.1e}, L_c/L_wd {composed:.1e}, L_grad {penalty:.1e}"
    ))
}

fn c2_penalty() -> Check {
    let unit = linear_critic(&[0.6, 0.0, -0.8, 0.0]);
    let h = random_tensor(&mut rng(10), 50, 4);
    let g1 = gradient_penalty(&unit, &h).map_err(|e| e.to_string())?;
    ensure(g1.abs() <= 4.0 * f64::EPSILON, || {
        format!("unit-norm critic penalty {g1:e}")
    })?;
    let mut zero = tiny_network(2);
    zero_critic(&mut zero);
    let g0 = gradient_penalty(&zero, &h).map_err(|e| e.to_string())?;
    ensure(g0 == 1.0, || format!("zero critic penalty {g0}"))?;
    Ok(format!("||w||=1: {g1:e}, ||w||=0: {g0}"))
}

fn c3_wasserstein() -> Check {
    let mut cfg = tiny_config(2, 0);
    cfg.embedding_dim = 1;
    cfg.post_pool_widths = vec![1, 4];
    cfg.critic_widths = vec![32];
    let mut p = init_network(&cfg, 3).map_err(|e| e.to_string())?;
    let mut r = rng(30);
    let n = 2000;
    let hs = Tensor::matrix(n, 1, (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect());
    let ht = Tensor::matrix(n, 1, (0..n).map(|_| 3.0 + r.sample::<f64, _>(StandardNormal)).collect());
    for _ in 0..2000 {
        let interp = sample_interpolates(&hs, &ht, &mut r).map_err(|e| e.to_string())?;
        critic_step(&mut p, &hs, &ht, &interp, 10.0, 0.01).map_err(|e| e.to_string())?;
    }
    let est = wasserstein_loss(&p, &hs, &ht).map_err(|e| e.to_string())?.abs();
    ensure((est - 3.0).abs() <= 0.45, || format!("estimate {est:.3}, true 3.0"))?;
    Ok(format!("estimate {est:.3} (true 3.0)"))
}

struct SeedResult {
    baseline: f64,
    adv_sup: f64,
    adv: f64,
    wd_warmup: f64,
    wd_final: f64,
}

fn c4_seed(seed: u64) -> Result<SeedResult, String> {
    let cfg = ExperimentConfig::reference(seed);
    let corpus = generate_corpus(&cfg.corpus).map_err(|e| e.to_string())?;
    let (base, _) = train_baseline(&cfg, &corpus.source).map_err(|e| e.to_string())?;
    let eer = |p| {
        evaluate_model(&cfg, p, &corpus)
            .map(|r| r[0].eer_pct)
            .map_err(|e| e.to_string())
    };
    let baseline = eer(&base)?;
    let adapt = |mode| {
        adapt_model(&cfg, base.clone(), mode, Scope::All, &corpus.source, &corpus.target).map_err(|e| e.to_string())
    };
    let (adapted, log) = adapt(Mode::AdvSup)?;
    let wd = |i: usize| log.epochs[i].l_wd.ok_or("missing L_wd".to_string());
    let wd_warmup = wd(cfg.adapt.warmup_epochs - 1)?;
    let wd_final = wd(log.epochs.len() - 1)?;
    let adv_sup = eer(&adapted)?;
    let (adv_model, _) = adapt(Mode::Adv)?;
    let adv = eer(&adv_model)?;
    Ok(SeedResult {
        baseline,
        adv_sup,
        adv,
        wd_warmup,
        wd_final,
    })
}

fn c4_direction() -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in [1, 2, 3] {
        let s = c4_seed(seed)?;
        let pass = s.adv_sup < s.baseline && s.wd_final < 0.2 * s.wd_warmup;
        ok &= pass;
        lines.push(format!(
            "seed {seed}: baseline {:.2} adv+sup {:.2} adv {:.2} L_wd {:.3}->{:.3}",
            s.baseline, s.adv_sup, s.adv, s.wd_warmup, s.wd_final
        ));
    }
    let detail = lines.join("; ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c5_plda() -> Check {
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let b: Vec<f64> = (0..2).map(|_| r.random_range(0.2..4.0)).collect();
        let w: Vec<f64> = (0..2).map(|_| r.random_range(0.2..2.0)).collect();
        let model = random_model(&mut r, &b, &w);
        let e = &model.mean + normal_vector(&mut r, 2) * 1.5;
        let t = &model.mean + normal_vector(&mut r, 2) * 1.5;
        let oracle = log_marginal_quadrature(&model, &[e.clone(), t.clone()])
            - log_marginal_quadrature(&model, std::slice::from_ref(&e))
            - log_marginal_quadrature(&model, std::slice::from_ref(&t));
        let got = plda_score(&model, e.as_slice(), t.as_slice()).map_err(|e| e.to_string())?;
        worst = worst.max((got - oracle).abs());
    }
    ensure(worst <= 1e-6, || format!("quadrature deviation {worst:e}"))?;

    let mut r = rng(0);
    let truth = random_model(&mut r, &decaying(10, 10.0), &spread(10));
    let (train, labels) = sample(&mut r, &truth, 500, 10);
    let (model, _) = plda_train_em(&train, &labels, 20).map_err(|e| e.to_string())?;
    let eb = rel_frobenius(&model.between, &truth.between);
    let ew = rel_frobenius(&model.within, &truth.within);
    let (eval, eval_labels) = sample(&mut r, &truth, 100, 4);
    let true_scorer = PldaScorer::new(&truth).map_err(|e| e.to_string())?;
    let em_scorer = PldaScorer::new(&model).map_err(|e| e.to_string())?;
    let (mut s_true, mut s_em, mut keys) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..eval.len() {
        for j in i + 1..eval.len() {
            s_true.push(true_scorer.score(&eval[i], &eval[j]).unwrap());
            s_em.push(em_scorer.score(&eval[i], &eval[j]).unwrap());
            keys.push(eval_labels[i] == eval_labels[j]);
        }
    }
    let eer_true = compute_eer(&s_true, &keys).map_err(|e| e.to_string())?;
    let eer_em = compute_eer(&s_em, &keys).map_err(|e| e.to_string())?;
    let detail = format!(
        "quadrature {worst:.1e}, Frobenius between {eb:.3} within {ew:.3}, EER true {eer_true:.2} EM {eer_em:.2}"
    );
    ensure(eb <= 0.1 && ew <= 0.1 && (eer_true - eer_em).abs() <= 1.0, || {
        detail.clone()
    })?;
    Ok(detail)
}

fn c6_adaptation() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let (model, data) = adaptation_setup(200 + seed);
        let observed = adaptation_covariance(&data, 5).map_err(|e| e.to_string())?;
        for (xi, eta) in [(0.25, 0.75), (1.0, 0.0), (0.0, 1.0), (0.6, 0.4)] {
            let adapted = plda_adapt(&model, &data, AdaptParams { xi, eta }).map_err(|e| e.to_string())?;
            for (g, v) in generalized_directions(&model.total(), &observed) {
                let after = g.dot(&(adapted.total() * &g));
                let want = v.max(1.0);
                worst = worst.max((after - want).abs());
            }
        }
        let same = plda_adapt(&model, &data, AdaptParams { xi: 0.0, eta: 0.0 }).map_err(|e| e.to_string())?;
        ensure(same == model, || format!("seed {seed}: zero shares changed the model"))?;
    }
    ensure(worst <= 1e-8, || format!("excess-direction deviation {worst:e}"))?;
    let preset = AdaptParams::default();
    ensure(preset.xi == 0.25 && preset.eta == 0.75, || format!("preset {preset:?}"))?;
    Ok(format!(
        "worst deviation {worst:.1e}, identity exact, preset xi 0.25 eta 0.75"
    ))
}

fn c7_metrics() -> Check {
    for (seed, rounding) in [(1, 1e-9), (2, 0.25), (3, 1.0), (4, 1e-9)] {
        let (scores, keys) = random_trials(seed, 1000, rounding);
        let eer = compute_eer(&scores, &keys).map_err(|e| e.to_string())?;
        let oracle = brute_force_eer(&scores, &keys);
        ensure((eer - oracle).abs() < 1e-9, || {
            format!("seed {seed}: EER {eer} vs {oracle}")
        })?;
        let warped: Vec<f64> = scores.iter().map(|s| (0.7 * s).exp() * 3.0 - 1.0).collect();
        ensure(compute_eer(&warped, &keys).unwrap() == eer, || {
            format!("seed {seed}: EER changed under warp")
        })?;
        for p in [0.01, 0.005] {
            let dcf = compute_min_dcf(&scores, &keys, p).map_err(|e| e.to_string())?;
            let oracle = brute_force_dcf(&scores, &keys, p);
            ensure(dcf == oracle, || format!("seed {seed} p {p}: minDCF {dcf} vs {oracle}"))?;
            ensure(compute_min_dcf(&warped, &keys, p).unwrap() == dcf, || {
                format!("seed {seed} p {p}: minDCF changed under warp")
            })?;
        }
    }
    Ok("4 score sets of 1000 trials match, warp invariant".into())
}

fn c8_uniform_loss() -> Check {
    let mut p = tiny_network(80);
    randomize_critic(&mut p, 81);
    for set in [
        "head.source.weight",
        "head.source.bias",
        "head.target.weight",
        "head.target.bias",
    ] {
        let t = p.heads.value_mut(set).ok_or(format!("missing {set}"))?;
        *t = Tensor::zeros(t.rows(), t.cols());
    }
    let cfg = toy_train_config();
    let stats = main_objective(&p, &fixed_batch(82, true), &full_plan(&cfg)).map_err(|e| e.to_string())?;
    let target = stats.target_loss.ok_or("no target loss")?;
    ensure(
        (stats.source_loss - 1.0).abs() <= 1e-6 && (target - 1.0).abs() <= 1e-6,
        || format!("source {} target {target}", stats.source_loss),
    )?;
    Ok(format!("source {:.9} target {target:.9}", stats.source_loss))
}

fn c9_contracts() -> Check {
    // post-pool scope
    let mut p = tiny_network(45);
    randomize_critic(&mut p, 46);
    let cfg = TrainConfig {
        scope: Scope::PostPool,
        ..toy_train_config()
    };
    let plan = full_plan(&cfg);
    set_trainable(&mut p, cfg.scope, &plan);
    let snapshot = p.clone();
    let data = toy_data(47, true);
    let labels = data.target.labels.clone();
    let mut r = rng(48);
    for _ in 0..100 {
        let batch = sample_minibatch(&data.source, 6, &data.target, 6, labels.as_deref(), (8, 12), &mut r)
            .map_err(|e| e.to_string())?;
        main_step(&mut p, &batch, &plan, 0.05).map_err(|e| e.to_string())?;
    }
    for (name, param) in snapshot.extractor.iter() {
        let trained = name == "embed.weight" || name == "embed.bias";
        let changed = p.extractor.value(name) != &param.value;
        ensure(changed == trained, || format!("post-pool: {name} changed={changed}"))?;
    }
    for (layer, stats) in snapshot.running.iter().filter(|(k, _)| k.starts_with("tdnn")) {
        ensure(&p.running[layer] == stats, || {
            format!("post-pool: {layer} running statistics changed")
        })?;
    }
    ensure(p.critic == snapshot.critic, || "post-pool: critic changed".into())?;

    // warm-up
    let data = toy_data(64, true);
    let cfg = toy_train_config();
    let run = |critic_seed: u64| -> Result<Vec<u64>, String> {
        let mut p = tiny_network(65);
        randomize_critic(&mut p, critic_seed);
        let init_target = p.heads.value("head.target.weight").clone();
        let mut snapshots = Vec::new();
        let mut head_moved = false;
        train_with(&data, p, &cfg, |rec, params| {
            if rec.warmup {
                head_moved |= params.heads.value("head.target.weight") != &init_target;
                snapshots.push(params.extractor.bit_hash());
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
        ensure(!head_moved, || "warm-up updated the target head".into())?;
        Ok(snapshots)
    };
    let (a, b) = (run(1)?, run(2)?);
    ensure(a.len() == cfg.warmup_epochs && a == b, || {
        "warm-up extractor trajectory depends on the critic".into()
    })?;

    // domain bit
    let mut cfg = tiny_config(4, 3);
    cfg.use_domain_label = true;
    let mut p = init_network(&cfg, 14).map_err(|e| e.to_string())?;
    randomize(&mut p, 15);
    let names: Vec<String> = p
        .extractor
        .names()
        .filter(|n| n.ends_with(".domain"))
        .map(str::to_string)
        .collect();
    ensure(!names.is_empty(), || "no domain-bit parameters".into())?;
    for n in &names {
        let t = p.extractor.value_mut(n).unwrap();
        *t = Tensor::zeros(t.rows(), t.cols());
    }
    let frames = random_tensor(&mut rng(16), 11, 3);
    let h0 = extract_embedding(&p, &frames, DomainBit::Source, true).map_err(|e| e.to_string())?;
    let h1 = extract_embedding(&p, &frames, DomainBit::Target, true).map_err(|e| e.to_string())?;
    ensure(h0 == h1, || "embedding depends on the domain bit".into())?;
    for head in [Head::Source, Head::Target] {
        ensure(
            p.classify_batch(&h0, head).unwrap() == p.classify_batch(&h1, head).unwrap(),
            || "head output depends on the domain bit".into(),
        )?;
    }
    Ok(format!(
        "post-pool 100 steps frozen, {} warm-up epochs critic-independent, {} domain-bit blocks",
        a.len(),
        names.len()
    ))
}

fn c10_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let mut cfg = ExperimentConfig::reference(1);
        cfg.pretrain.epochs = 2;
        cfg.pretrain.minibatches_per_epoch = 10;
        cfg.adapt.epochs = 3;
        cfg.adapt.minibatches_per_epoch = 10;
        cfg.adapt.warmup_epochs = 1;
        cfg.systems = vec![System::adapted(Mode::AdvSup, Scope::All)];
        cfg.paths.out_dir = dir.path().join(run);
        Pipeline::new(cfg).and_then(|p| p.run()).map_err(|e| e.to_string())?;
        reports.push(std::fs::read(dir.path().join(run).join("report.json")).map_err(|e| e.to_string())?);
    }
    ensure(reports[0] == reports[1], || {
        "reports differ between identical runs".into()
    })?;

    let defaults = TrainConfig::default();
    for e in 0..defaults.epochs {
        let want = 0.5f64.powi((e / 5) as i32);
        let (_, main) = lr_schedule(e, &defaults);
        ensure(main == want, || format!("epoch {e}: rate {main}, expected {want}"))?;
    }
    let cfg = TrainConfig {
        main_rate: defaults.main_rate,
        halve_every: defaults.halve_every,
        epochs: 12,
        minibatches_per_epoch: 1,
        ..toy_train_config()
    };
    let (_, log) = train(&toy_data(90, true), tiny_network(91), &cfg).map_err(|e| e.to_string())?;
    let logged: Vec<f64> = log.epochs.iter().map(|r| r.main_rate).collect();
    let want: Vec<f64> = (0..12).map(|e| 0.5f64.powi(e / 5)).collect();
    ensure(logged == want, || format!("logged rates {logged:?}"))?;
    Ok(format!(
        "identical {}-byte reports; logged rates {logged:?}",
        reports[0].len()
    ))
}

fn main() -> ExitCode {
    #[cfg(target_env = "gnu")]
    // SAFETY: called before any other thread exists.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
    let criteria: [(&str, fn() -> Check); 10] = [
        ("gradient correctness", c1_gradients),
        ("gradient-penalty exactness", c2_penalty),
        ("Wasserstein estimate", c3_wasserstein),
        ("directional adaptation", c4_direction),
        ("PLDA oracles", c5_plda),
        ("PLDA adaptation algebra", c6_adaptation),
        ("metric oracles", c7_metrics),
        ("loss normalization", c8_uniform_loss),
        ("mode/scope contracts", c9_contracts),
        ("determinism and schedule", c10_determinism),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
