//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! each and exits non-zero if any failed. Built with `harness = false` so the
//! criteria run single-threaded and their timings are not skewed.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dgquant_core::autodiff::{check_gradients, Graph, Var};
use dgquant_core::batch::LabelBatch;
use dgquant_core::checkpoint::load_checkpoint;
use dgquant_core::config::ModelConfig;
use dgquant_core::data::{
    default_specs, generate_synthetic, make_lodo_splits, DatasetSplit, DomainDataset, SampleRef,
};
use dgquant_core::decorrelation::pearson_loss_var;
use dgquant_core::metrics::iou_per_class;
use dgquant_core::model::MethodRegistry;
use dgquant_core::prototypes::domain_loss_var;
use dgquant_core::quantizer::{
    assignment_weights, code_loss, code_loss_var, gumbel_softmax_assign, gumbel_softmax_var,
    mahalanobis_logits, mahalanobis_logits_var, predict_labels, quantize_soft, quantize_soft_var,
    random_probs, AssignmentProbs, CodeIndices,
};
use dgquant_core::reconstruction::recon_loss_var;
use dgquant_core::tensor::Tensor;
use dgquant_core::training::{evaluate, predict_refs, train, StepRecord, TrainOptions};
use dgquant_core::Result;

/// Gradient checks: relative error with a unit floor, central differences.
const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-6;
/// Oracle agreement, absolute.
const ORACLE_TOL: f64 = 1e-10;
const ROW_SUM_TOL: f64 = 1e-6;
const ONE_HOT_TOL: f64 = 1e-6;
/// Absolute gap between empirical argmax frequency and softmax probability.
const GUMBEL_FREQ_TOL: f64 = 0.01;
const GUMBEL_DRAWS: usize = 100_000;
/// Allowed mIoU shortfall of the full method against the baseline, points.
const MIOU_MARGIN: f64 = 0.5;

/// Toy protocol for the directional check.
const E2E_DOMAINS: usize = 3;
const E2E_IMAGES: usize = 40;
const E2E_SIZE: usize = 64;
const E2E_SEEDS: [u64; 3] = [0, 1, 2];
const E2E_FOLDS: usize = 5;
const E2E_DATA_SEED: u64 = 0;
const E2E_BUDGET_S: f64 = 30.0 * 60.0;

fn e2e_config() -> ModelConfig {
    ModelConfig {
        channels: 16,
        codes: 32,
        encoder_width: 8,
        decoder_width: 4,
        image_size: E2E_SIZE,
        epochs: 25,
        // the reconstruction sum spans batch x 3 x 64 x 64 elements
        lambda_mse: 1.0 / (2.0 * 3.0 * 64.0 * 64.0),
        folds: E2E_FOLDS,
        ..ModelConfig::default()
    }
}

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn run(name: &'static str, budget_s: f64, f: impl FnOnce() -> Result<(bool, String)>) -> Verdict {
    let t0 = Instant::now();
    let (pass, detail) = match f() {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    let secs = t0.elapsed().as_secs_f64();
    let in_time = secs < budget_s;
    let v = Verdict {
        name,
        pass: pass && in_time,
        detail: format!("{detail}; {secs:.1}s (limit {budget_s:.0}s)"),
    };
    println!("{} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
    v
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn labels(m: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..m).map(|_| rng.gen_range(0..k)).collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Scalar readout `sum(x * r)` for a fixed random `r`.
fn readout(g: &mut Graph, x: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let r = uniform(g.value(x).shape(), -1.0, 1.0, &mut rng);
    let r = g.constant(r);
    let prod = g.mul(x, r)?;
    g.sum(prod)
}

fn gradient_suite() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (m, n, c, k) = (4, 6, 3, 2);
    let mut worst = Vec::new();

    // correlation penalty behind linear projections of both views
    let inputs = [
        uniform(&[m, c], -1.0, 1.0, &mut rng),
        uniform(&[m, c], -1.0, 1.0, &mut rng),
        uniform(&[c, 2], -1.0, 1.0, &mut rng),
        uniform(&[c, 2], -1.0, 1.0, &mut rng),
    ];
    let zero_bias = Tensor::zeros(&[2]);
    worst.push((
        "corrcoef",
        check_gradients(&inputs, GRAD_STEP, |g, v| {
            let b = g.constant(zero_bias.clone());
            let pa = g.linear(v[0], v[2], b)?;
            let pb = g.linear(v[1], v[3], b)?;
            pearson_loss_var(g, pa, pb, 1e-8)
        })?,
    ));

    let lab = labels(m, k, &mut rng);
    let inputs = [
        uniform(&[m, c], -1.0, 1.0, &mut rng),
        uniform(&[k, c], -1.0, 1.0, &mut rng),
    ];
    worst.push((
        "domain",
        check_gradients(&inputs, GRAD_STEP, |g, v| domain_loss_var(g, v[0], &lab, v[1]))?,
    ));

    // code loss through logits and the noise-free assignment, w held fixed
    let z = uniform(&[m, c], -1.0, 1.0, &mut rng);
    let codes = uniform(&[n, c], -1.0, 1.0, &mut rng);
    let log_var = Tensor::scalar(0.3);
    let log_tau = Tensor::scalar(-0.2);
    let p0 = gumbel_softmax_assign(
        &mahalanobis_logits(&z, &codes, 0.3f64.exp())?,
        (-0.2f64).exp(),
        None,
    )?;
    let w = assignment_weights(&p0, k)?;
    let inputs = [z.clone(), codes.clone(), log_var.clone(), log_tau.clone()];
    worst.push((
        "code",
        check_gradients(&inputs, GRAD_STEP, |g, v| {
            let logits = mahalanobis_logits_var(g, v[0], v[1], v[2])?;
            let p = gumbel_softmax_var(g, logits, v[3], None)?;
            code_loss_var(g, p, &lab, &w, k, 1e-6)
        })?,
    ));

    let inputs = [
        uniform(&[m, c], 0.0, 1.0, &mut rng),
        uniform(&[m, c], 0.0, 1.0, &mut rng),
    ];
    worst.push((
        "mse",
        check_gradients(&inputs, GRAD_STEP, |g, v| recon_loss_var(g, v[0], v[1], 1e-2))?,
    ));

    // soft quantization with a frozen Gumbel draw added to the logits
    let noise = dgquant_core::quantizer::sample_gumbel(&[m, n], &mut rng);
    worst.push((
        "quantize_soft",
        check_gradients(&inputs_soft(&z, &codes), GRAD_STEP, |g, v| {
            let logits = mahalanobis_logits_var(g, v[0], v[1], v[2])?;
            let nv = g.constant(noise.clone());
            let noisy = g.add(logits, nv)?;
            let p = gumbel_softmax_var(g, noisy, v[3], None)?;
            let q = quantize_soft_var(g, p, v[1])?;
            readout(g, q, 5)
        })?,
    ));

    let pass = worst.iter().all(|(_, e)| *e < GRAD_TOL);
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((pass, format!("worst rel err {detail} (tol {GRAD_TOL:.0e})")))
}

fn inputs_soft(z: &Tensor, codes: &Tensor) -> [Tensor; 4] {
    [z.clone(), codes.clone(), Tensor::scalar(-0.1), Tensor::scalar(0.2)]
}

fn oracle_suite() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut dev = [0.0f64; 4];
    for _ in 0..50 {
        let m = rng.gen_range(1..10);
        let c = rng.gen_range(1..6);
        let k = rng.gen_range(2..4);
        let n = k * rng.gen_range(1..4);
        let z = uniform(&[m, c], -2.0, 2.0, &mut rng);
        let codes = uniform(&[n, c], -2.0, 2.0, &mut rng);
        let sigma_sq = rng.gen_range(0.5..2.0);

        let got = mahalanobis_logits(&z, &codes, sigma_sq)?;
        for s in 0..m {
            for j in 0..n {
                let mut d = 0.0;
                for ch in 0..c {
                    let diff = codes.data()[j * c + ch] - z.data()[s * c + ch];
                    d += diff * diff;
                }
                dev[0] = dev[0].max((got.data()[s * n + j] + d / (2.0 * sigma_sq)).abs());
            }
        }

        let p = random_probs(m, n, &mut rng);
        let q = quantize_soft(&p, &codes)?;
        for s in 0..m {
            for ch in 0..c {
                let mut v = 0.0;
                for j in 0..n {
                    v += p.tensor().data()[s * n + j] * codes.data()[j * c + ch];
                }
                dev[1] = dev[1].max((q.data()[s * c + ch] - v).abs());
            }
        }

        let lab = labels(m, k, &mut rng);
        let w: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
        let eps = 1e-3;
        let got = code_loss(&p, &lab, &w, k, eps)?;
        let per = n / k;
        let mut acc = 0.0;
        for s in 0..m {
            let mut mass = 0.0;
            for g in 0..k {
                for j in 0..per {
                    if g == lab[s] {
                        mass += p.tensor().data()[s * n + g * per + j];
                    }
                }
            }
            acc += w[s] * (1.0 - mass).powi(2);
        }
        dev[2] = dev[2].max((got - (acc / m as f64 + eps).ln()).abs());

        let (h, wd) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let pred = labels(h * wd, k, &mut rng);
        let gt = labels(h * wd, k, &mut rng);
        let got = iou_per_class(
            &LabelBatch::new(1, h, wd, pred.clone(), k)?,
            &LabelBatch::new(1, h, wd, gt.clone(), k)?,
            k,
        )?;
        for (class, &v) in got.iter().enumerate() {
            let inter = pred.iter().zip(&gt).filter(|(p, g)| **p == class && **g == class).count();
            let union = pred.iter().zip(&gt).filter(|(p, g)| **p == class || **g == class).count();
            let want = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            dev[3] = dev[3].max((v - want).abs());
        }
    }
    let pass = dev.iter().all(|d| *d < ORACLE_TOL);
    Ok((
        pass,
        format!(
            "50 instances, max abs dev logits {:.1e}, quantize_soft {:.1e}, code_loss {:.1e}, iou {:.1e} (tol {ORACLE_TOL:.0e})",
            dev[0], dev[1], dev[2], dev[3]
        ),
    ))
}

fn stochastic_suite() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut row_dev: f64 = 0.0;
    for _ in 0..50 {
        let m = rng.gen_range(1..20);
        let n = rng.gen_range(2..12);
        let logits = uniform(&[m, n], -5.0, 5.0, &mut rng);
        let tau = rng.gen_range(0.05..5.0);
        let noisy = rng.gen_bool(0.5);
        let p = gumbel_softmax_assign(&logits, tau, noisy.then_some(&mut rng))?;
        for row in p.tensor().data().chunks(n) {
            row_dev = row_dev.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }

    // top logit leads by at least 0.05, so logits / 1e-4 separate by 500
    let mut hot_dev: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.gen_range(2..8);
        let mut logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..0.0)).collect();
        let top = rng.gen_range(0..n);
        let second = logits
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != top)
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        logits[top] = second + rng.gen_range(0.05..1.0);
        let p = gumbel_softmax_assign(&Tensor::new(&[1, n], logits)?, 1e-4, None)?;
        for (j, v) in p.tensor().data().iter().enumerate() {
            let want = if j == top { 1.0 } else { 0.0 };
            hot_dev = hot_dev.max((v - want).abs());
        }
    }

    let base = [0.3, -0.4, 1.1, 0.0];
    let logits = Tensor::from_fn(&[GUMBEL_DRAWS, 4], |i| base[i % 4]);
    let p = gumbel_softmax_assign(&logits, 0.7, Some(&mut rng))?;
    let mut counts = [0usize; 4];
    for row in p.tensor().data().chunks(4) {
        let j = (0..4).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        counts[j] += 1;
    }
    let want = softmax(&base);
    let freq_dev = counts
        .iter()
        .zip(&want)
        .map(|(&c, w)| (c as f64 / GUMBEL_DRAWS as f64 - w).abs())
        .fold(0.0, f64::max);

    let pass = row_dev <= ROW_SUM_TOL && hot_dev <= ONE_HOT_TOL && freq_dev <= GUMBEL_FREQ_TOL;
    Ok((
        pass,
        format!(
            "row sum dev {row_dev:.1e} (tol {ROW_SUM_TOL:.0e}), low-temperature one-hot dev {hot_dev:.1e} (tol {ONE_HOT_TOL:.0e}), argmax frequency dev {freq_dev:.4} over {GUMBEL_DRAWS} draws (tol {GUMBEL_FREQ_TOL})"
        ),
    ))
}

fn label_decoding_suite() -> Result<(bool, String)> {
    let mut checked = 0;
    let mut mismatches = 0;
    let mut rejected = Vec::new();
    let mut bad_rejections = 0;
    for n in [8usize, 12, 512] {
        for k in [2usize, 3, 4] {
            let idx = CodeIndices((0..n).collect());
            let got = predict_labels(&idx, n, k, (1, 1, n));
            if n % k != 0 {
                // grouping needs N divisible by K; such pairs must be refused
                match got {
                    Err(_) => rejected.push(format!("{n}/{k}")),
                    Ok(_) => bad_rejections += 1,
                }
                continue;
            }
            let got = got?;
            for (i, &l) in got.as_slice().iter().enumerate() {
                checked += 1;
                if l != i * k / n {
                    mismatches += 1;
                }
            }
            if predict_labels(&CodeIndices(vec![n]), n, k, (1, 1, 1)).is_ok() {
                bad_rejections += 1;
            }
        }
    }
    Ok((
        mismatches == 0 && bad_rejections == 0,
        format!(
            "{checked} indices checked, {mismatches} mismatches; non-divisible pairs refused: {}; out-of-range or bad acceptances {bad_rejections}",
            rejected.join(" ")
        ),
    ))
}

fn probs(rows: &[[f64; 4]]) -> Result<AssignmentProbs> {
    AssignmentProbs::new(Tensor::new(&[rows.len(), 4], rows.concat())?)
}

fn weight_suite() -> Result<(bool, String)> {
    let mut fails = Vec::new();
    // group maxima 0.4 vs 0.2 and 0.6 vs 0.2
    let w = assignment_weights(&probs(&[[0.4, 0.2, 0.2, 0.2], [0.6, 0.1, 0.2, 0.1]])?, 2)?;
    if (w[0] - 0.5).abs() > 1e-15 || w[1] != 1.0 {
        fails.push(format!("dif 0.2/0.4 gave {w:?}"));
    }
    let w = assignment_weights(&probs(&[[0.3, 0.2, 0.3, 0.2], [0.7, 0.1, 0.1, 0.1]])?, 2)?;
    if w[0] != 0.0 || w[1] != 1.0 {
        fails.push(format!("equal maxima gave {w:?}"));
    }
    let w = assignment_weights(&probs(&[[1.0, 0.0, 0.0, 0.0], [0.5, 0.0, 0.5, 0.0]])?, 2)?;
    if w != [1.0, 0.0] {
        fails.push(format!("one-hot pixel gave {w:?}"));
    }
    let w = assignment_weights(&probs(&[[0.25; 4], [0.4, 0.1, 0.4, 0.1]])?, 2)?;
    if w != [1.0, 1.0] {
        fails.push(format!("all-tie fallback gave {w:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..200 {
        let k = rng.gen_range(2..5);
        let n = k * rng.gen_range(1..5);
        let p = random_probs(rng.gen_range(1..30), n, &mut rng);
        let w = assignment_weights(&p, k)?;
        let max = w.iter().copied().fold(0.0, f64::max);
        if w.iter().any(|v| !(0.0..=1.0).contains(v)) || max != 1.0 {
            fails.push(format!("random weights out of range or unnormalized: {w:?}"));
            break;
        }
    }
    Ok((
        fails.is_empty(),
        if fails.is_empty() {
            "worked examples exact, equal maxima give 0, all-tie gives 1, 200 random batches in [0,1] with max 1".into()
        } else {
            fails.join("; ")
        },
    ))
}

struct E2eRun {
    held: usize,
    method: &'static str,
    miou: f64,
    log: Vec<StepRecord>,
}

fn held_out_refs(domains: &[DomainDataset], held: usize) -> Vec<SampleRef> {
    (0..domains[held].len())
        .map(|index| SampleRef { domain: held, index })
        .collect()
}

fn e2e_runs() -> Result<(Vec<E2eRun>, f64)> {
    let t0 = Instant::now();
    let domains = generate_synthetic(
        &default_specs(E2E_DOMAINS)?,
        E2E_IMAGES,
        E2E_SIZE,
        E2E_DATA_SEED,
    )?;
    let registry = MethodRegistry::default();
    let mut runs = Vec::new();
    for held in 0..E2E_DOMAINS {
        for &seed in &E2E_SEEDS {
            let split = make_lodo_splits(&domains, E2E_FOLDS, None, seed)?.swap_remove(held * E2E_FOLDS);
            split.check_disjoint(&domains)?;
            for method in ["baseline", "dgquant"] {
                let cfg = ModelConfig {
                    method: method.into(),
                    seed,
                    ..e2e_config()
                };
                let out = train(&cfg, &registry, &domains, &split, &TrainOptions::default())?;
                // the held-out domain is unseen in training, so all of it is scored
                let ev = evaluate(out.state.model.as_ref(), &domains, &held_out_refs(&domains, held), 4)?;
                runs.push(E2eRun {
                    held,
                    method,
                    miou: ev.miou,
                    log: out.log,
                });
            }
        }
    }
    Ok((runs, t0.elapsed().as_secs_f64()))
}

fn mean_miou(runs: &[E2eRun], held: usize, method: &str) -> f64 {
    let v: Vec<f64> = runs
        .iter()
        .filter(|r| r.held == held && r.method == method)
        .map(|r| r.miou)
        .collect();
    100.0 * v.iter().sum::<f64>() / v.len() as f64
}

fn e2e_verdict(runs: &[E2eRun], secs: f64) -> (bool, String) {
    let finite = runs.iter().all(|r| {
        r.log
            .iter()
            .all(|s| s.losses.terms().iter().all(|(_, v)| v.is_finite()))
    });
    let mut not_worse = true;
    let mut better = false;
    let mut parts = Vec::new();
    for held in 0..E2E_DOMAINS {
        let (b, f) = (mean_miou(runs, held, "baseline"), mean_miou(runs, held, "dgquant"));
        not_worse &= f >= b - MIOU_MARGIN;
        better |= f > b;
        parts.push(format!("domain{held} full {f:.2} vs baseline {b:.2}"));
    }
    (
        finite && not_worse && better && secs < E2E_BUDGET_S,
        format!(
            "losses finite {finite}; mean held-out mIoU over {} seeds: {}; full within {MIOU_MARGIN} points everywhere {not_worse}, strictly better somewhere {better}; total {secs:.0}s (limit {E2E_BUDGET_S:.0}s)",
            E2E_SEEDS.len(),
            parts.join(", ")
        ),
    )
}

fn dynamics_verdict(runs: &[E2eRun]) -> (bool, String) {
    let init_var = e2e_config().init_var_gamma;
    let full: Vec<&E2eRun> = runs.iter().filter(|r| r.method == "dgquant").collect();
    let mut var_ok = 0;
    let mut mmp_ok = 0;
    let mut mse_ok = 0;
    let mut trace = Vec::new();
    for r in &full {
        let (first, last) = (&r.log[0], r.log.last().expect("nonempty log"));
        let vg = last.var_gamma.unwrap_or(f64::NAN);
        let (m0, m1) = (
            first.mean_max_prob.unwrap_or(f64::NAN),
            last.mean_max_prob.unwrap_or(f64::NAN),
        );
        var_ok += usize::from(vg < init_var);
        mmp_ok += usize::from(m1 > m0);
        mse_ok += usize::from(last.losses.mse < first.losses.mse);
        trace.push(format!("{vg:.3}/{m0:.3}->{m1:.3}"));
    }
    let n = full.len();
    (
        var_ok == n && mmp_ok == n && mse_ok == n,
        format!(
            "over {n} full-method runs: variance below its initial {init_var} in {var_ok}, mean max assignment probability rising in {mmp_ok}, reconstruction loss falling in {mse_ok}; final variance/max-prob first->last per run [{}]",
            trace.join(" ")
        ),
    )
}

fn protocol_suite() -> Result<(bool, String)> {
    let domains = generate_synthetic(&default_specs(3)?, 23, 16, 4)?;
    let splits = make_lodo_splits(&domains, 5, None, 9)?;
    let mut leaks = 0;
    for s in &splits {
        if s.check_disjoint(&domains).is_err() {
            leaks += 1;
        }
        leaks += scan_leaks(s, &domains);
    }
    let capped = |seed| make_lodo_splits(&domains, 5, Some(10), seed);
    let (a, b, c) = (capped(9)?, capped(9)?, capped(10)?);
    let cap_ok = a
        .iter()
        .all(|s| s.train.len() + s.validation.len() == 20 && s.test.len() == 2);
    let repro = a == b && a != c;
    Ok((
        splits.len() == 15 && leaks == 0 && cap_ok && repro,
        format!(
            "{} splits, {leaks} leaks in an exhaustive pairwise scan; cap 10 honoured {cap_ok}, same seed identical and new seed different {repro}",
            splits.len()
        ),
    ))
}

/// Pairwise comparison of every sample in train, validation and test.
fn scan_leaks(s: &DatasetSplit, domains: &[DomainDataset]) -> usize {
    let held = domains.iter().position(|d| d.name == s.holdout).expect("held-out domain");
    let parts = [&s.train, &s.validation, &s.test];
    let mut leaks = 0;
    for (i, a) in parts.iter().enumerate() {
        for b in &parts[i + 1..] {
            for x in a.iter() {
                leaks += b.iter().filter(|y| *y == x).count();
            }
        }
    }
    leaks += s.train.iter().chain(&s.validation).filter(|r| r.domain == held).count();
    leaks += s.test.iter().filter(|r| r.domain != held).count();
    leaks
}

fn determinism_suite() -> Result<(bool, String)> {
    let dir = tempfile::tempdir().expect("temp dir");
    let domains = generate_synthetic(&default_specs(3)?, 6, 16, 2)?;
    let split = make_lodo_splits(&domains, 2, None, 5)?.swap_remove(0);
    let cfg = ModelConfig {
        channels: 8,
        codes: 8,
        encoder_depth: 2,
        encoder_width: 4,
        decoder_width: 4,
        image_size: 16,
        epochs: 3,
        folds: 2,
        seed: 5,
        ..ModelConfig::default()
    };
    let registry = MethodRegistry::default();
    let run = |name: &str| -> Result<_> {
        let opts = TrainOptions {
            checkpoint: Some(dir.path().join(format!("{name}.dgq"))),
            log: Some(dir.path().join(format!("{name}.ndjson"))),
            augment: None,
        };
        let out = train(&cfg, &registry, &domains, &split, &opts)?;
        let log = opts.log.unwrap();
        let bytes = std::fs::read(&log).map_err(|source| dgquant_core::Error::Io { path: log, source })?;
        Ok((out, bytes))
    };
    let (first, log_a) = run("a")?;
    let (_, log_b) = run("b")?;
    let logs_equal = log_a == log_b && !log_a.is_empty();
    let (loaded, _) = load_checkpoint(&dir.path().join("a.dgq"), &registry)?;
    let refs: Vec<SampleRef> = split.test.clone();
    let before = predict_refs(first.state.model.as_ref(), &domains, &refs, 2)?;
    let after = predict_refs(loaded.as_ref(), &domains, &refs, 2)?;
    let preds_equal = before == after;
    Ok((
        logs_equal && preds_equal,
        format!(
            "two seed-fixed runs give byte-identical logs {logs_equal} ({} bytes); reloaded checkpoint predicts identically {preds_equal} on {} images",
            log_a.len(),
            refs.len()
        ),
    ))
}

fn main() -> ExitCode {
    let mut verdicts = vec![
        run("gradient suite", 10.0, gradient_suite),
        run("quantizer oracle suite", 30.0, oracle_suite),
        run("stochastic assignment suite", 60.0, stochastic_suite),
        run("label decoding suite", 5.0, label_decoding_suite),
        run("weight suite", 5.0, weight_suite),
        run("protocol checks", 60.0, protocol_suite),
        run("determinism", 120.0, determinism_suite),
    ];
    match e2e_runs() {
        Ok((runs, secs)) => {
            for r in &runs {
                println!("  {} held-out domain{} mIoU {:.2}", r.method, r.held, 100.0 * r.miou);
            }
            let (pass, detail) = e2e_verdict(&runs, secs);
            verdicts.push(run("end-to-end directional check", f64::INFINITY, || Ok((pass, detail))));
            let (pass, detail) = dynamics_verdict(&runs);
            verdicts.push(run("training dynamics", f64::INFINITY, || Ok((pass, detail))));
        }
        Err(e) => {
            for name in ["end-to-end directional check", "training dynamics"] {
                let msg = format!("toy runs failed: {e}");
                verdicts.push(run(name, f64::INFINITY, || Ok((false, msg))));
            }
        }
    }
    let failed: Vec<&str> = verdicts.iter().filter(|v| !v.pass).map(|v| v.name).collect();
    println!(
        "{} of {} criteria passed{}",
        verdicts.len() - failed.len(),
        verdicts.len(),
        if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
