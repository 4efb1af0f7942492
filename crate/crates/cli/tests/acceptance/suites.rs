//! Closed-form and statistical property suites: sMMD estimator, simulator,
//! λ schedule, integrated gradients, and classification metrics.

use std::time::Instant;

use counterfact_core::balancing::{mmd2_u, rbf_kernel, smmd_loss, Grouping, KernelConfig, SmmdConfig};
use counterfact_core::dataio::truncate_record;
use counterfact_core::evalkit::{auroc, classification_metrics, ece, mann_whitney_auc, ECE_BINS_DEFAULT};
use counterfact_core::inference::{
    default_plans, integrated_gradients, integrated_gradients_fn, prepare_history, AttributionReport, IgConfig,
    COMPLETENESS_REL_TOL, IG_STEPS_VERIFY,
};
use counterfact_core::numkit::{RngStream, Tensor};
use counterfact_core::training::{focal_loss, lambda_schedule, weighted_bce};
use counterfact_core::tumorsim::{
    confounding_correlation, counterfactual_oracle, simulate_cohort, NoisePolicy, SimCohortConfig,
};

use crate::sweep::{pass_word, Sweep, GAMMAS, SEEDS};
use crate::Verdict;

fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(&[rows, cols], data).expect("tensor")
}

fn normal_rows(n: usize, d: usize, shift: f64, s: &mut RngStream) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| s.standard_normal() + shift).collect()).collect()
}

/// Unbiased MMD² written directly from its definition.
fn mmd2_reference(a: &[Vec<f64>], b: &[Vec<f64>], sigma: f64) -> f64 {
    let within = |g: &[Vec<f64>]| {
        let n = g.len() as f64;
        let mut sum = 0.0;
        for (p, x) in g.iter().enumerate() {
            for (q, y) in g.iter().enumerate() {
                if p != q {
                    sum += rbf_kernel(x, y, sigma);
                }
            }
        }
        sum / (n * (n - 1.0))
    };
    let cross: f64 = a.iter().flat_map(|x| b.iter().map(move |y| rbf_kernel(x, y, sigma))).sum();
    within(a) + within(b) - 2.0 * cross / (a.len() * b.len()) as f64
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    (mean, sd / n.sqrt())
}

pub fn smmd_suite() -> Verdict {
    let started = Instant::now();
    let mut notes = Vec::new();

    // two points at 0 against two at 2, σ = √2
    let zero = t2(2, 1, vec![0.0, 0.0]);
    let two = t2(2, 1, vec![2.0, 2.0]);
    let v = mmd2_u(&zero, &two, 2f64.sqrt()).expect("mmd");
    let closed = 2.0 - 2.0 * (-1f64).exp();
    let closed_ok = (v - closed).abs() < 1e-12;
    notes.push(format!("closed form |Δ| {:.1e} {}", (v - closed).abs(), pass_word(closed_ok)));

    let mut zero_ok = true;
    for n in [2usize, 3, 10, 64] {
        let c = t2(n, 3, [0.7, -1.1, 2.5].repeat(n));
        zero_ok &= mmd2_u(&c, &c, 0.9).expect("mmd") == 0.0;
    }
    notes.push(format!("identical constant sets exactly 0 {}", pass_word(zero_ok)));

    // null hypothesis: expectation zero
    let mut s = RngStream::new(31, 1);
    let reps = 10_000;
    let null: Vec<f64> = (0..reps)
        .map(|_| {
            let a = t2(8, 2, normal_rows(8, 2, 0.0, &mut s).concat());
            let b = t2(8, 2, normal_rows(8, 2, 0.0, &mut s).concat());
            mmd2_u(&a, &b, 1.0).expect("mmd")
        })
        .collect();
    let (m0, se0) = mean_se(&null);
    let null_ok = m0.abs() < 3.0 * se0;
    notes.push(format!("null mean {m0:.2e} (3 s.e. {:.2e}) {}", 3.0 * se0, pass_word(null_ok)));

    // random subsets of a fixed batch average to the full-batch statistic
    let a = normal_rows(24, 2, 0.0, &mut s);
    let b = normal_rows(30, 2, 0.7, &mut s);
    let full = mmd2_reference(&a, &b, 1.0);
    let repr = t2(54, 2, [a.concat(), b.concat()].concat());
    let treat = t2(54, 1, [vec![0.0; 24], vec![1.0; 30]].concat());
    let cfg = SmmdConfig {
        subset_size: 8,
        grouping: Grouping::Joint,
    };
    let kernel = KernelConfig::fixed(1.0);
    let mut draws = RngStream::new(32, 2);
    let sub: Vec<f64> = (0..reps)
        .map(|_| smmd_loss(&repr, &treat, &cfg, &kernel, &mut draws).expect("smmd").loss)
        .collect();
    let (m1, se1) = mean_se(&sub);
    let sub_ok = (m1 - full).abs() < 3.0 * se1;
    notes.push(format!(
        "subset mean {m1:.4} vs full batch {full:.4} (3 s.e. {:.1e}) {}",
        3.0 * se1,
        pass_word(sub_ok)
    ));

    // groups smaller than the subset size are skipped
    let small = SmmdConfig {
        subset_size: 5,
        grouping: Grouping::Joint,
    };
    let r = t2(8, 2, normal_rows(8, 2, 0.0, &mut s).concat());
    let tr = t2(8, 1, [vec![0.0; 4], vec![1.0; 4]].concat());
    let out = smmd_loss(&r, &tr, &small, &KernelConfig::default(), &mut s).expect("smmd");
    let skip_ok = out.loss == 0.0 && out.pairs_used == 0 && out.grad.data().iter().all(|g| *g == 0.0);
    notes.push(format!("skip path loss {} {}", out.loss, pass_word(skip_ok)));

    let secs = started.elapsed().as_secs_f64();
    let ok = closed_ok && zero_ok && null_ok && sub_ok && skip_ok && secs < 60.0;
    Verdict::new(ok, format!("{}; runtime {secs:.1}s", notes.join("; ")))
}

pub fn simulator_suite() -> Verdict {
    let started = Instant::now();
    let mut notes = Vec::new();

    let cohort = simulate_cohort(&SimCohortConfig::new(400, 30, 0.0, 3)).expect("simulate");
    let draws: Vec<f64> = cohort
        .dataset
        .records
        .iter()
        .flat_map(|r| r.a[..(r.len - 1) * 2].to_vec())
        .collect();
    let rate = draws.iter().sum::<f64>() / draws.len() as f64;
    let rate_ok = draws.len() >= 10_000 && (rate - 0.5).abs() <= 0.02;
    notes.push(format!("γ=0 treatment rate {rate:.4} over {} draws {}", draws.len(), pass_word(rate_ok)));

    let corr: Vec<f64> = [0.0, 2.0, 5.0, 7.0]
        .iter()
        .map(|&g| {
            let cfg = SimCohortConfig::new(2000, 30, g, 17);
            confounding_correlation(&simulate_cohort(&cfg).expect("simulate").dataset, cfg.window)
        })
        .collect();
    let corr_ok = corr.windows(2).all(|w| w[1] >= w[0]) && corr[2] - corr[0] >= 0.3;
    notes.push(format!(
        "corr over γ 0/2/5/7 = {:.3}/{:.3}/{:.3}/{:.3} {}",
        corr[0],
        corr[1],
        corr[2],
        corr[3],
        pass_word(corr_ok)
    ));

    let cfg = SimCohortConfig::new(100, 30, 4.0, 9);
    let cohort = simulate_cohort(&cfg).expect("simulate");
    let mut worst: f64 = 0.0;
    for (r, truth) in cohort.dataset.records.iter().zip(&cohort.truth) {
        for start in [0, r.len / 2, r.len - 2] {
            let plan: Vec<Vec<f64>> = (start..r.len - 1).map(|t| r.a_row(t, 2).to_vec()).collect();
            let traj = counterfactual_oracle(r, Some(truth), start, &plan, &cfg, NoisePolicy::Common).expect("oracle");
            for (k, v) in traj.iter().enumerate() {
                let y = r.y[start + 1 + k];
                worst = worst.max((v - y).abs() / y.abs());
            }
        }
    }
    let oracle_ok = worst <= 1e-12;
    notes.push(format!("oracle factual replay worst rel error {worst:.1e} {}", pass_word(oracle_ok)));

    let secs = started.elapsed().as_secs_f64();
    Verdict::new(
        rate_ok && corr_ok && oracle_ok && secs < 120.0,
        format!("{}; runtime {secs:.1}s", notes.join("; ")),
    )
}

pub fn lambda_suite() -> Verdict {
    let start_ok = [1usize, 10, 50, 100, 1000].iter().all(|&e| lambda_schedule(0, e) == 0.0);
    let end: Vec<f64> = [1usize, 10, 50, 100, 1000].iter().map(|&e| lambda_schedule(e, e)).collect();
    let end_ok = end.iter().all(|v| (v - 0.999909).abs() <= 1e-6);
    let grid: Vec<f64> = (0..1000).map(|e| lambda_schedule(e, 999)).collect();
    let mono_ok = grid.windows(2).all(|w| w[1] >= w[0]);
    Verdict::new(
        start_ok && end_ok && mono_ok,
        format!(
            "λ(0,E)=0 {}; λ(E,E)={:.6} {}; monotone over 1000 points {}",
            pass_word(start_ok),
            end[2],
            pass_word(end_ok),
            pass_word(mono_ok)
        ),
    )
}

fn rel_gap(rep: &AttributionReport) -> f64 {
    rep.completeness_gap
        .iter()
        .zip(&rep.output_delta)
        .map(|(g, d)| g.abs() / (d.abs() + 1e-12))
        .fold(0.0, f64::max)
}

/// Test patients per checkpoint in the completeness survey.
const IG_PATIENTS: usize = 10;
/// History steps conditioned on in the completeness survey.
const IG_ORIGIN: usize = 20;

pub fn ig_suite(sweep: Option<&Sweep>) -> Verdict {
    let mut s = RngStream::new(5, 5);
    let mut affine_err: f64 = 0.0;
    for _ in 0..50 {
        let n = 1 + s.below(40);
        let w: Vec<f64> = (0..n).map(|_| s.standard_normal()).collect();
        let x: Vec<f64> = (0..n).map(|_| 3.0 * s.standard_normal()).collect();
        let base: Vec<f64> = (0..n).map(|_| s.standard_normal()).collect();
        for m in [8, 64, 256] {
            let phi = integrated_gradients_fn(&x, &base, m, |_| Ok(vec![w.clone()])).expect("ig");
            for i in 0..n {
                affine_err = affine_err.max((phi[0][i] - w[i] * (x[i] - base[i])).abs());
            }
        }
    }
    let affine_ok = affine_err <= 1e-10;

    let Some(sweep) = sweep else {
        return Verdict::new(false, format!("affine max error {affine_err:.1e}; trained models unavailable"));
    };
    let gamma = GAMMAS[GAMMAS.len() - 1];
    let (mut total, mut passed) = (0usize, 0usize);
    let mut worst: f64 = 0.0;
    for run in sweep.runs.iter().filter(|r| r.gamma == gamma && r.seed == SEEDS[0]) {
        let c = sweep.confounded.iter().find(|c| c.seed == run.seed).expect("cohort");
        let ck = &run.ckpt;
        for r in c.test_raw.records.iter().take(IG_PATIENTS) {
            let h = prepare_history(ck, &truncate_record(r, IG_ORIGIN, &ck.schema)).expect("history");
            for p in default_plans(&ck.schema, 6) {
                let cfg = IgConfig {
                    steps: IG_STEPS_VERIFY,
                    target_channel: 0,
                };
                let rep = integrated_gradients(ck, &h, &p, &cfg).expect("ig");
                total += 1;
                passed += rep.completeness_ok(COMPLETENESS_REL_TOL) as usize;
                worst = worst.max(rel_gap(&rep));
            }
        }
    }
    let complete_ok = passed == total;
    Verdict::new(
        affine_ok && complete_ok,
        format!(
            "affine max error {affine_err:.1e} {}; completeness at m={IG_STEPS_VERIFY}: {passed}/{total} attributions within 1e-3 relative, worst relative gap {worst:.3} {}",
            pass_word(affine_ok),
            pass_word(complete_ok)
        ),
    )
}

pub fn metrics_suite() -> Verdict {
    let mut s = RngStream::new(77, 3);
    let mut auc_err: f64 = 0.0;
    for i in 0..100 {
        let n = 2 + s.below(300);
        let mut labels: Vec<f64> = (0..n).map(|_| if s.bernoulli(0.4) { 1.0 } else { 0.0 }).collect();
        labels[0] = 1.0;
        labels[1] = 0.0;
        // every other instance uses coarse scores so that ties occur
        let scores: Vec<f64> = (0..n)
            .map(|_| if i % 2 == 0 { s.uniform() } else { (s.uniform() * 5.0).floor() / 5.0 })
            .collect();
        let a = auroc(&scores, &labels).expect("auroc");
        let u = mann_whitney_auc(&scores, &labels).expect("mann-whitney");
        auc_err = auc_err.max((a - u).abs());
    }
    let auc_ok = auc_err < 1e-12;

    let probs: Vec<f64> = (0..10_000).map(|_| s.uniform()).collect();
    let labels: Vec<f64> = probs.iter().map(|&p| if s.bernoulli(p) { 1.0 } else { 0.0 }).collect();
    let e = ece(&probs, &labels, ECE_BINS_DEFAULT).expect("ece");
    let ece_ok = e < 0.02;

    let mut focal_err: f64 = 0.0;
    for _ in 0..100 {
        let n = 1 + s.below(50);
        let logits: Vec<f64> = (0..n).map(|_| 8.0 * s.standard_normal()).collect();
        let labels: Vec<f64> = (0..n).map(|_| if s.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
        let f = focal_loss(&logits, &labels, 1.0, 0.0).expect("focal");
        let b = weighted_bce(&logits, &labels, 1.0, 1.0).expect("bce");
        focal_err = focal_err.max((f - b).abs());
    }
    let focal_ok = focal_err <= 1e-12;

    // no predicted positives, then no actual positives
    let no_pred = classification_metrics(&[0.0, 0.0, 0.0, 0.0], &[1.0, 0.0, 1.0, 0.0]).expect("metrics");
    let no_true = classification_metrics(&[0.0, 1.0, 0.0], &[0.0, 0.0, 0.0]).expect("metrics");
    let conv_ok = no_pred.precision == 0.0
        && no_pred.f1 == 0.0
        && no_pred.degenerate
        && no_true.recall == 0.0
        && no_true.f1 == 0.0
        && no_true.degenerate
        && (no_true.accuracy - 2.0 / 3.0).abs() < 1e-15;

    Verdict::new(
        auc_ok && ece_ok && focal_ok && conv_ok,
        format!(
            "AUROC vs Mann-Whitney max |Δ| {auc_err:.1e} over 100 instances {}; calibrated ECE {e:.4} {}; focal(γ=0,α=1) vs BCE max |Δ| {focal_err:.1e} {}; 0/0 conventions {}",
            pass_word(auc_ok),
            pass_word(ece_ok),
            pass_word(focal_ok),
            pass_word(conv_ok)
        ),
    )
}
