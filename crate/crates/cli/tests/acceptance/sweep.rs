//! Directional γ-sweep on simulated cohorts: training, counterfactual RMSE,
//! and the frozen-encoder probe on the confounded cohorts.

use std::time::Instant;

use counterfact_core::dataio::{impute_dataset, split_patients, zscore_apply, zscore_fit, Dataset};
use counterfact_core::evalkit::{evaluate, reconstruction_probe, EvalConfig, OracleData, ProbeConfig, ProbeReport};
use counterfact_core::numkit::{streams, RngStream};
use counterfact_core::seqmodel::ModelCheckpoint;
use counterfact_core::training::{train, BalancingMode, TrainConfig};
use counterfact_core::tumorsim::{simulate_cohort, SimCohortConfig, SimTruth};

use crate::Verdict;

pub const N_PATIENTS: usize = 1000;
pub const HORIZON: usize = 30;
pub const GAMMAS: [f64; 2] = [0.0, 4.0];
pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const MODES: [BalancingMode; 4] = [BalancingMode::None, BalancingMode::Smmd, BalancingMode::Grl, BalancingMode::Cdc];
pub const EPOCHS: usize = 80;
pub const LEARNING_RATE: f64 = 3e-3;
/// Horizon index of τ = 4.
const TAU4: usize = 3;

pub fn train_config(mode: BalancingMode, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(mode, seed);
    cfg.epochs = EPOCHS;
    cfg.learning_rate = LEARNING_RATE;
    cfg
}

/// One simulated cohort, split and normalized.
pub struct Cohort {
    pub gamma: f64,
    pub seed: u64,
    pub sim: SimCohortConfig,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub test_raw: Dataset,
    pub test_truth: Vec<SimTruth>,
}

impl Cohort {
    pub fn build(n: usize, horizon: usize, gamma: f64, seed: u64) -> Cohort {
        let sim = SimCohortConfig::new(n, horizon, gamma, seed);
        let cohort = simulate_cohort(&sim).expect("simulate");
        let raw = impute_dataset(&cohort.dataset).expect("impute");
        let mut split = RngStream::new(seed, streams::SPLIT);
        let (tr, va, te) = split_patients(&raw, [0.7, 0.15, 0.15], &mut split).expect("split");
        let stats = zscore_fit(&tr).expect("zscore fit");
        let test_truth = te
            .records
            .iter()
            .map(|r| cohort.truth.iter().find(|t| t.patient_id == r.patient_id).expect("truth").clone())
            .collect();
        Cohort {
            gamma,
            seed,
            sim,
            train: zscore_apply(&tr, &stats).expect("normalize"),
            val: zscore_apply(&va, &stats).expect("normalize"),
            test: zscore_apply(&te, &stats).expect("normalize"),
            test_raw: te,
            test_truth,
        }
    }
}

pub struct Run {
    pub mode: BalancingMode,
    pub gamma: f64,
    pub seed: u64,
    pub ckpt: ModelCheckpoint,
    /// Counterfactual RMSE per horizon, pooled over the default plans.
    pub cf: Vec<f64>,
    pub seconds: f64,
}

pub struct Sweep {
    pub runs: Vec<Run>,
    /// Cohorts at the largest γ, one per seed, kept for the probe.
    pub confounded: Vec<Cohort>,
    pub seconds: f64,
}

impl Sweep {
    pub fn run(&self, mode: BalancingMode, gamma: f64, seed: u64) -> &Run {
        self.runs
            .iter()
            .find(|r| r.mode == mode && r.gamma == gamma && r.seed == seed)
            .expect("sweep run")
    }

    /// Mean over seeds and horizons of the pooled counterfactual RMSE.
    pub fn mean_cf(&self, mode: BalancingMode, gamma: f64) -> f64 {
        let v: Vec<f64> = SEEDS
            .iter()
            .map(|&s| {
                let cf = &self.run(mode, gamma, s).cf;
                cf.iter().sum::<f64>() / cf.len() as f64
            })
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn train_and_score(c: &Cohort, mode: BalancingMode, seed: u64) -> Run {
    let started = Instant::now();
    let (ckpt, _) = train(&c.train, &c.val, &train_config(mode, seed)).expect("train");
    let oracle = OracleData {
        raw: &c.test_raw,
        truth: &c.test_truth,
        sim: &c.sim,
    };
    let report = evaluate(&ckpt, &c.test, Some(oracle), &EvalConfig::default(), seed).expect("evaluate");
    Run {
        mode,
        gamma: c.gamma,
        seed,
        ckpt,
        cf: report.counterfactual.expect("oracle block").pooled,
        seconds: started.elapsed().as_secs_f64(),
    }
}

pub fn run_sweep() -> Sweep {
    let started = Instant::now();
    let mut runs = Vec::new();
    let mut confounded = Vec::new();
    for &gamma in &GAMMAS {
        for &seed in &SEEDS {
            let c = Cohort::build(N_PATIENTS, HORIZON, gamma, seed);
            for mode in MODES {
                let r = train_and_score(&c, mode, seed);
                eprintln!(
                    "  sweep γ={gamma} seed={seed} {:<5} cf τ1..6 = {} ({:.1}s)",
                    mode.label(),
                    fmt_vec(&r.cf),
                    r.seconds
                );
                runs.push(r);
            }
            if gamma == GAMMAS[GAMMAS.len() - 1] {
                confounded.push(c);
            }
        }
    }
    Sweep {
        runs,
        confounded,
        seconds: started.elapsed().as_secs_f64(),
    }
}

pub fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

pub fn directional(sweep: &Sweep) -> Verdict {
    let (g0, g4) = (GAMMAS[0], GAMMAS[1]);
    let mut notes = Vec::new();
    // (a) confounding hurts every mode
    let mut a_ok = true;
    for mode in MODES {
        let (lo, hi) = (sweep.mean_cf(mode, g0), sweep.mean_cf(mode, g4));
        a_ok &= hi > lo;
        notes.push(format!("{}: γ0 {lo:.4} γ4 {hi:.4}", mode.label()));
    }
    // (b) parity without confounding
    let (smmd0, none0) = (sweep.mean_cf(BalancingMode::Smmd, g0), sweep.mean_cf(BalancingMode::None, g0));
    let b_ok = smmd0 <= 1.05 * none0;
    // (c) sMMD vs gradient reversal at τ = 4 under confounding
    let wins = SEEDS
        .iter()
        .filter(|&&s| sweep.run(BalancingMode::Smmd, g4, s).cf[TAU4] <= sweep.run(BalancingMode::Grl, g4, s).cf[TAU4])
        .count();
    let c_ok = wins >= 4;
    let per_seed: Vec<String> = SEEDS
        .iter()
        .map(|&s| {
            format!(
                "{:.4}/{:.4}",
                sweep.run(BalancingMode::Smmd, g4, s).cf[TAU4],
                sweep.run(BalancingMode::Grl, g4, s).cf[TAU4]
            )
        })
        .collect();
    let runtime_ok = sweep.seconds < 30.0 * 60.0;
    Verdict::new(
        a_ok && b_ok && c_ok && runtime_ok,
        format!(
            "(a) {} [{}]; (b) {} smmd {smmd0:.4} <= 1.05 x none {none0:.4}; (c) {} smmd<=grl at τ=4 in {wins}/5 seeds [smmd/grl {}]; runtime {:.0}s",
            pass_word(a_ok),
            notes.join(", "),
            pass_word(b_ok),
            pass_word(c_ok),
            per_seed.join(" "),
            sweep.seconds
        ),
    )
}

pub fn probe_suite(sweep: &Sweep) -> Verdict {
    let gamma = GAMMAS[GAMMAS.len() - 1];
    let mut wins = 0;
    let mut finals = Vec::new();
    let mut antisymmetric = true;
    let started = Instant::now();
    for c in &sweep.confounded {
        let cfg = ProbeConfig {
            seed: c.seed,
            ..ProbeConfig::default()
        };
        let probe = |mode| {
            reconstruction_probe(&sweep.run(mode, gamma, c.seed).ckpt, &c.train, &c.val, &cfg).expect("probe")
        };
        let smmd = probe(BalancingMode::Smmd);
        let grl = probe(BalancingMode::Grl);
        let (s_last, g_last) = (*smmd.val_loss.last().unwrap(), *grl.val_loss.last().unwrap());
        if s_last <= g_last {
            wins += 1;
        }
        finals.push(format!("{s_last:.4}/{g_last:.4}"));
        let fwd = ProbeReport::new(grl.clone(), smmd.clone()).expect("report");
        let back = ProbeReport::new(smmd, grl).expect("report");
        antisymmetric &= fwd
            .delta_r2
            .iter()
            .zip(&back.delta_r2)
            .all(|(x, y)| x.map(|v| -v) == *y);
    }
    let ok = wins >= 4 && antisymmetric;
    Verdict::new(
        ok,
        format!(
            "final val MSE smmd<=grl in {wins}/5 seeds [smmd/grl {}]; ΔR² antisymmetry {}; probe time {:.0}s",
            finals.join(" "),
            pass_word(antisymmetric),
            started.elapsed().as_secs_f64()
        ),
    )
}

pub fn pass_word(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAILED"
    }
}
