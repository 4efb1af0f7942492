use super::*;
use crate::dataio::{split_patients, zscore_apply, zscore_fit};
use crate::numkit::{finite_diff_check, streams, RngStream};
use crate::seqmodel::{Model, ModelConfig, ModelSizes};
use crate::training::{train, BalancingMode, TrainConfig};
use crate::tumorsim::{simulate_cohort, SimCohort};
use proptest::prelude::*;

fn tiny_sizes() -> ModelSizes {
    ModelSizes {
        channels: 6,
        kernel_size: 2,
        dilations: vec![1, 2],
        repr_dim: 5,
        head_hidden: 8,
        disc_hidden: 6,
    }
}

struct Fixture {
    sim: SimCohort,
    cfg: SimCohortConfig,
    train: Dataset,
    val: Dataset,
    val_raw: Dataset,
}

fn fixture(n: usize, horizon: usize, gamma: f64, seed: u64) -> Fixture {
    let cfg = SimCohortConfig::new(n, horizon, gamma, seed);
    let sim = simulate_cohort(&cfg).unwrap();
    let mut s = RngStream::new(seed, streams::SPLIT);
    let (tr, va, _) = split_patients(&sim.dataset, [0.7, 0.15, 0.15], &mut s).unwrap();
    let stats = zscore_fit(&tr).unwrap();
    Fixture {
        train: zscore_apply(&tr, &stats).unwrap(),
        val: zscore_apply(&va, &stats).unwrap(),
        val_raw: va,
        sim,
        cfg,
    }
}

fn random_checkpoint(f: &Fixture, seed: u64) -> ModelCheckpoint {
    let schema = f.train.schema.clone();
    let model = Model::new(ModelConfig::for_schema(&schema, &tiny_sizes(), None), seed).unwrap();
    let stats = f.train.normalization.clone().unwrap();
    let baseline = vec![0.0; schema.input_width()];
    ModelCheckpoint::new(model, schema, stats, baseline, "test".into()).unwrap()
}

#[test]
fn rmse_examples() {
    assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    assert!((rmse(&[3.0, 4.0, 5.0], &[1.0, 2.0, 3.0]).unwrap() - 2.0).abs() < 1e-15);
    assert!((rmse(&[1.0, 2.0], &[0.0, 0.0]).unwrap() - 2.5f64.sqrt()).abs() < 1e-15);
    assert!(rmse(&[], &[]).is_err());
    assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
}

proptest! {
    #[test]
    fn rmse_is_permutation_invariant(v in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..40), seed in 0u64..1000) {
        let (p, t): (Vec<f64>, Vec<f64>) = v.iter().cloned().unzip();
        let mut idx: Vec<usize> = (0..p.len()).collect();
        RngStream::new(seed, 1).shuffle(&mut idx);
        let pp: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
        let tp: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
        prop_assert!((rmse(&p, &t).unwrap() - rmse(&pp, &tp).unwrap()).abs() < 1e-12);
        prop_assert_eq!(rmse(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn auroc_equals_mann_whitney(seed in 0u64..10_000, n in 2usize..200) {
        let mut s = RngStream::new(seed, 3);
        let mut labels: Vec<f64> = (0..n).map(|_| if s.bernoulli(0.4) { 1.0 } else { 0.0 }).collect();
        labels[0] = 1.0;
        labels[1] = 0.0;
        // coarse scores so ties occur
        let scores: Vec<f64> = (0..n).map(|_| (s.uniform() * 10.0).floor() / 10.0).collect();
        let a = auroc(&scores, &labels).unwrap();
        let b = mann_whitney_auc(&scores, &labels).unwrap();
        prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
    }
}

fn labels_from(tp: usize, fn_: usize, fp: usize, tn: usize) -> (Vec<f64>, Vec<f64>) {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for (n, p, t) in [(tp, 1.0, 1.0), (fn_, 0.0, 1.0), (fp, 1.0, 0.0), (tn, 0.0, 0.0)] {
        pred.extend(std::iter::repeat(p).take(n));
        truth.extend(std::iter::repeat(t).take(n));
    }
    (pred, truth)
}

#[test]
fn confusion_example() {
    let (p, t) = labels_from(52, 15, 38, 100);
    let m = classification_metrics(&p, &t).unwrap();
    assert_eq!(
        m.confusion,
        Confusion {
            tp: 52,
            fp: 38,
            tn: 100,
            fn_: 15
        }
    );
    assert!((m.recall - 52.0 / 67.0).abs() < 1e-15);
    assert!((m.precision - 52.0 / 90.0).abs() < 1e-15);
    assert!((m.accuracy - 152.0 / 205.0).abs() < 1e-15);
    let f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
    assert!((m.f1 - f1).abs() < 1e-15);
    assert!(!m.degenerate);
}

#[test]
fn classification_conventions() {
    let (p, t) = labels_from(5, 0, 0, 7);
    let m = classification_metrics(&p, &t).unwrap();
    assert_eq!([m.accuracy, m.precision, m.recall, m.f1], [1.0; 4]);
    // no predicted positives
    let (p, t) = labels_from(0, 4, 0, 6);
    let m = classification_metrics(&p, &t).unwrap();
    assert_eq!(m.precision, 0.0);
    assert_eq!(m.f1, 0.0);
    assert!(m.degenerate);
    assert!(classification_metrics(&[2.0], &[1.0]).is_err());
}

#[test]
fn auroc_examples() {
    let labels = [0.0, 0.0, 1.0, 1.0];
    assert!((auroc(&[0.1, 0.4, 0.35, 0.8], &labels).unwrap() - 0.75).abs() < 1e-15);
    assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0);
    assert_eq!(auroc(&[0.5; 4], &labels).unwrap(), 0.5);
    assert!(auroc(&[0.1, 0.2], &[1.0, 1.0]).is_err());
}

#[test]
fn ece_examples() {
    assert_eq!(ece(&[1.0; 5], &[1.0; 5], 10).unwrap(), 0.0);
    let labels: Vec<f64> = (0..10).map(|i| if i < 7 { 1.0 } else { 0.0 }).collect();
    assert!(ece(&[0.7; 10], &labels, 10).unwrap() < 1e-12);
    let labels: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
    assert!((ece(&[0.9; 10], &labels, 10).unwrap() - 0.4).abs() < 1e-12);
    assert!(ece(&[], &[], 10).is_err());
    assert!(ece(&[1.2], &[1.0], 10).is_err());
}

#[test]
fn ece_of_calibrated_generator_is_small() {
    let mut s = RngStream::new(9, 4);
    let n = 10_000;
    let probs: Vec<f64> = (0..n).map(|_| s.uniform()).collect();
    let labels: Vec<f64> = probs.iter().map(|&p| if s.bernoulli(p) { 1.0 } else { 0.0 }).collect();
    let e = ece(&probs, &labels, ECE_BINS_DEFAULT).unwrap();
    assert!(e < 0.02, "ECE {e}");
}

#[test]
fn paired_t_test_and_summary() {
    let a = [1.0, 2.0, 3.0, 4.0];
    let b = [0.5, 1.4, 2.6, 3.3];
    let r = paired_t_test(&a, &b).unwrap();
    assert!((r.mean_diff - 0.55).abs() < 1e-12);
    assert_eq!(r.df, 3);
    assert!(r.p_value > 0.0 && r.p_value < 0.01);
    assert_eq!(paired_t_test(&a, &a).unwrap().p_value, 1.0);
    let sm = summarize_seeds("m", &[vec![1.0, 2.0], vec![3.0, 2.0]]).unwrap();
    assert_eq!(sm.mean, [2.0, 2.0]);
    assert!((sm.sd[0] - 2f64.sqrt()).abs() < 1e-15);
    assert_eq!(sm.sd[1], 0.0);
    let mut buf = Vec::new();
    write_summary_csv(&[sm], &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("model,tau_1,tau_2\n"));
    assert!(text.contains("2.0000 ± 1.4142"));
}

#[test]
fn masked_mse_gradient() {
    let mut s = RngStream::new(1, 2);
    let target: Vec<f64> = (0..12).map(|_| s.standard_normal()).collect();
    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
    let pred: Vec<f64> = (0..12).map(|_| s.standard_normal()).collect();
    let rep = finite_diff_check(|p: &[f64]| masked_mse_with_grad(p, &target, &mask).unwrap(), &pred, 1e-6).unwrap();
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    let (_, g) = masked_mse_with_grad(&pred, &target, &mask).unwrap();
    assert!(g.iter().zip(&mask).all(|(g, m)| *m || *g == 0.0));
    assert!(masked_mse_with_grad(&pred, &target, &[false; 12]).is_err());
}

#[test]
fn delta_r2_examples_and_antisymmetry() {
    let run = |r2: Vec<Option<f64>>| ProbeRun {
        variables: vec!["a".into(), "b".into(), "c".into()],
        train_loss: vec![],
        val_loss: vec![],
        r2,
        encoder_hash: String::new(),
    };
    let u = run(vec![Some(0.9), Some(0.5), None]);
    let b = run(vec![Some(0.86), Some(0.7), Some(0.1)]);
    let d = delta_r2(&u, &b).unwrap();
    assert!((d[0].unwrap() - 0.04).abs() < 1e-12);
    assert!(d[1].unwrap() < 0.0);
    assert_eq!(d[2], None);
    let back = delta_r2(&b, &u).unwrap();
    for (x, y) in d.iter().zip(&back) {
        assert_eq!(x.map(|v| -v), *y);
    }
    assert!(delta_r2(&u, &u).unwrap().iter().flatten().all(|&v| v == 0.0));
    let report = ProbeReport::new(u.clone(), b).unwrap();
    assert_eq!(report.excluded, ["c"]);
    let mut other = u.clone();
    other.variables[0] = "z".into();
    assert!(delta_r2(&u, &other).is_err());
}

proptest! {
    #[test]
    fn delta_r2_is_antisymmetric(a in prop::collection::vec(-1.0f64..1.0, 1..8), seed in 0u64..100) {
        let mut s = RngStream::new(seed, 9);
        let b: Vec<f64> = a.iter().map(|_| s.uniform() * 2.0 - 1.0).collect();
        let mk = |r: &[f64]| ProbeRun {
            variables: (0..r.len()).map(|i| i.to_string()).collect(),
            train_loss: vec![],
            val_loss: vec![],
            r2: r.iter().map(|v| Some(*v)).collect(),
            encoder_hash: String::new(),
        };
        let (ra, rb) = (mk(&a), mk(&b));
        let ab = delta_r2(&ra, &rb).unwrap();
        let ba = delta_r2(&rb, &ra).unwrap();
        for (x, y) in ab.iter().zip(&ba) {
            prop_assert_eq!(x.unwrap(), -y.unwrap());
        }
    }
}

#[test]
fn probe_leaves_encoder_untouched_and_records_curves() {
    let f = fixture(30, 10, 1.0, 3);
    let ck = random_checkpoint(&f, 4);
    let before = ck.model.clone();
    let cfg = ProbeConfig {
        epochs: 7,
        batch_size: 8,
        ..ProbeConfig::default()
    };
    let run = reconstruction_probe(&ck, &f.train, &f.val, &cfg).unwrap();
    assert_eq!(run.train_loss.len(), 7);
    assert_eq!(run.val_loss.len(), 7);
    assert_eq!(run.encoder_hash, encoder_hash(&before));
    assert_eq!(ck.model, before);
    assert_eq!(run.variables, probe_variables(&ck.schema));
    assert_eq!(run.r2.len(), run.variables.len());
    let again = reconstruction_probe(&ck, &f.train, &f.val, &cfg).unwrap();
    assert_eq!(run, again);
}

#[test]
fn probe_reconstructs_through_an_identity_encoder() {
    // encoder that passes its input row through unchanged: zero convolutions,
    // identity residual projection and identity read-out
    let f = fixture(40, 10, 0.0, 5);
    let mut ck = random_checkpoint(&f, 6);
    let w = ck.schema.input_width();
    let sizes = ModelSizes {
        channels: w,
        kernel_size: 2,
        dilations: vec![1],
        repr_dim: w,
        head_hidden: 4,
        disc_hidden: 4,
    };
    let mut model = Model::new(ModelConfig::for_schema(&ck.schema, &sizes, None), 1).unwrap();
    let enc = &mut model.encoder;
    for l in &mut enc.layers {
        l.weight.data_mut().fill(0.0);
        l.bias.data_mut().fill(0.0);
    }
    let eye = |v: &mut [f64], n: usize| {
        v.fill(0.0);
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
    };
    eye(enc.output.weight.data_mut(), w);
    enc.output.bias.data_mut().fill(0.0);
    ck.model = model;
    let x = build_inputs(&f.val.records[0], &ck.schema).unwrap();
    assert_eq!(ck.model.encoder.encode(&x).unwrap(), x);
    let cfg = ProbeConfig {
        epochs: 150,
        learning_rate: 1e-2,
        batch_size: 8,
        ..ProbeConfig::default()
    };
    let run = reconstruction_probe(&ck, &f.train, &f.val, &cfg).unwrap();
    for (name, r2) in run.variables.iter().zip(&run.r2) {
        if let Some(r2) = r2 {
            assert!(*r2 > 0.99, "{name}: R² {r2}");
        }
    }
    assert!(run.r2.iter().flatten().count() >= 3);
}

#[test]
fn one_step_horizon_reproduces_training_selection() {
    let f = fixture(40, 12, 1.0, 7);
    let mut c = TrainConfig::new(BalancingMode::Smmd, 2);
    c.epochs = 4;
    c.batch_size = 8;
    c.model = tiny_sizes();
    c.smmd.subset_size = 4;
    let (ck, report) = train(&f.train, &f.val, &c).unwrap();
    let (h, _) = horizon_rmse(&ck, &f.val, 1, 1).unwrap();
    assert!((h[0] - report.best_val_rmse).abs() < 1e-9, "{} vs {}", h[0], report.best_val_rmse);
}

#[test]
fn evaluation_report_shape_and_determinism() {
    let f = fixture(30, 12, 2.0, 8);
    let ck = random_checkpoint(&f, 9);
    let cfg = EvalConfig::default();
    let run = || {
        let oracle = OracleData {
            raw: &f.val_raw,
            truth: &f.sim.truth,
            sim: &f.cfg,
        };
        evaluate(&ck, &f.val, Some(oracle), &cfg, 11).unwrap()
    };
    let r = run();
    assert_eq!(r.horizon_rmse.len(), 6);
    let cf = r.counterfactual.as_ref().unwrap();
    assert_eq!(cf.plans, ["None", "Chemo", "Radio", "Both"]);
    assert!(cf.per_plan.iter().all(|p| p.len() == 6));
    assert_eq!(cf.windows, r.windows);
    assert_eq!(r.windows, f.val.records.len() * (12 - 6));
    assert_eq!(r, run());
    let mut buf = Vec::new();
    write_horizon_csv(&[("smmd".into(), r.horizon_rmse.clone())], &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "model,tau_1,tau_2,tau_3,tau_4,tau_5,tau_6");
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn oracle_windows_align_with_forecast_origins() {
    // common-noise oracle under the factual plan reproduces the stored outcomes
    let f = fixture(10, 8, 0.0, 12);
    let r = &f.val_raw.records[0];
    let t = f.sim.truth.iter().find(|t| t.patient_id == r.patient_id).unwrap();
    let plan: Vec<Vec<f64>> = (2..5).map(|k| r.a_row(k, 2).to_vec()).collect();
    let y = counterfactual_oracle(r, Some(t), 2, &plan, &f.cfg, NoisePolicy::Common).unwrap();
    for (k, v) in y.iter().enumerate() {
        assert!((v - r.y[3 + k]).abs() <= 1e-12 * r.y[3 + k].abs());
    }
}

#[test]
fn representation_export_layout() {
    let f = fixture(12, 9, 1.0, 13);
    let ck = random_checkpoint(&f, 14);
    let mut buf = Vec::new();
    let rows = export_representations(&ck, &f.val, &mut buf).unwrap();
    let n_steps: usize = f.val.records.iter().map(|r| r.len).sum();
    assert_eq!(rows, n_steps);
    let text = String::from_utf8(buf.clone()).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 2 + ck.model.repr_dim() + ck.schema.d_a() + ck.schema.d_v());
    assert_eq!(&header[..3], ["patient_id", "t", "B_1"]);
    assert_eq!(text.lines().count(), n_steps + 1);
    let mut again = Vec::new();
    export_representations(&ck, &f.val, &mut again).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn evaluation_rejects_mismatched_inputs() {
    let f = fixture(12, 9, 1.0, 15);
    let ck = random_checkpoint(&f, 16);
    assert!(horizon_rmse(&ck, &f.val_raw, 1, 1).is_err());
    assert!(horizon_rmse(&ck, &f.val, 20, 1).is_err());
    let bad = EvalConfig {
        tau_max: 0,
        ..EvalConfig::default()
    };
    assert!(bad.validate().is_err());
    let toml_like: std::result::Result<EvalConfig, _> = serde_json::from_str(r#"{"tau_max": 3, "bogus": 1}"#);
    assert!(toml_like.is_err());
}
