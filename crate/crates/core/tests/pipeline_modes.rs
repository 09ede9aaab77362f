use fairnet::data::Split;
use fairnet::detector::{evaluate_rates, lof_scores, pseudo_label, Gate};
use fairnet::pipeline::{
    evaluate_artifacts, representations, run_ablation, run_experiment, run_variants, sweep,
    Artifacts, Mode, Pipeline, PipelineConfig, SweepAxis, Variant,
};

fn small(mode: Mode) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.data.synthetic.n = 2000;
    cfg.model.epochs = 40;
    cfg.detector.training.epochs = 20;
    cfg.adapter.epochs = 20;
    cfg.pipeline.mode = mode;
    cfg.pipeline.monte_carlo_samples = 5000;
    cfg
}

#[test]
fn lof_pseudo_labels_flag_planted_outliers() {
    let cfg = small(Mode::Unlabeled);
    let mut p = Pipeline::new(cfg.clone()).unwrap();
    p.run_stage1().unwrap();
    let train = p.data().indices(Split::Train);
    let mut reps =
        representations(p.model().unwrap(), p.data(), &train, cfg.detector.layer).unwrap();
    let n = reps.len();
    let width = reps[0].len();
    // Tanh features live in [-1, 1]; these sit far outside and far from each other.
    for j in 0..10 {
        let mut v = vec![0.0; width];
        v[j % width] = 4.0 + 3.0 * j as f64;
        reps.push(v);
    }
    let lof = lof_scores(&reps, cfg.detector.lof_k).unwrap();
    let q = cfg.pipeline.contamination;
    let flagged = pseudo_label(&lof, q).unwrap();
    assert_eq!(
        flagged.iter().filter(|f| **f).count(),
        (q * reps.len() as f64).ceil() as usize
    );
    assert!(flagged[n..].iter().all(|&f| f));

    let truth: Vec<bool> = (0..reps.len()).map(|i| i >= n).collect();
    let scores: Vec<f64> = flagged.iter().map(|&f| f64::from(u8::from(f))).collect();
    assert_eq!(evaluate_rates(&scores, &truth, 0.5).unwrap().tpr, 1.0);
}

#[test]
fn unlabeled_mode_runs_end_to_end() {
    let cfg = small(Mode::Unlabeled);
    let (report, art) = run_experiment(&cfg).unwrap();
    assert!(matches!(art.gate, Gate::Trained(_)));
    assert_eq!(report.counts.train_labeled, 0);
    assert_eq!(report.mode, Mode::Unlabeled);
    assert!(!report.losses.detector.is_empty());
    let e = &report.evaluation;
    assert_eq!(e.changed_untriggered, 0);
    assert!(e.theory.monte_carlo.is_some() || e.theory.bridge.inputs.validate().is_err());
}

#[test]
fn full_mode_switch_gate_is_exact() {
    let cfg = small(Mode::Full);
    let (report, art) = run_experiment(&cfg).unwrap();
    assert!(matches!(art.gate, Gate::Switch { .. }));
    let r = &report.evaluation.detector_rates;
    assert_eq!((r.tpr, r.fpr, r.ratio), (1.0, 0.0, None));
    assert_eq!(
        report.overhead.params_added,
        art.units[0].adapter.param_count()
    );
}

#[test]
fn shared_variant_runs_match_separate_ablations() {
    let cfg = small(Mode::Partial);
    let shared = run_variants(&cfg, &Variant::ALL).unwrap();
    for (v, r) in Variant::ALL.iter().zip(&shared) {
        assert_eq!(&run_ablation(&cfg, *v).unwrap(), r, "{v:?}");
    }
    // Variants that train the adapter the same way share it.
    assert_eq!(shared[0].losses.adapter, shared[1].losses.adapter);
    assert_eq!(shared[2].losses.adapter, shared[3].losses.adapter);
    assert_ne!(shared[0].losses.adapter, shared[2].losses.adapter);
    assert_eq!(shared[1].evaluation.triggered, shared[1].counts.test);
}

#[test]
fn stored_bundle_reproduces_the_evaluation() {
    let cfg = small(Mode::Partial);
    let (report, art) = run_experiment(&cfg).unwrap();
    let restored = Artifacts::from_json(&art.to_json().unwrap()).unwrap();
    assert_eq!(restored, art);
    assert_eq!(
        evaluate_artifacts(&cfg, &restored).unwrap(),
        report.evaluation
    );

    let mut wider = cfg.clone();
    wider.data.synthetic.d = 12;
    assert!(evaluate_artifacts(&wider, &restored).is_err());
}

#[test]
fn label_fraction_sweep_labels_more_samples() {
    let cfg = small(Mode::Partial);
    let s = sweep(&cfg, SweepAxis::LabelFraction, &[0.05, 0.5, 1.0], 2).unwrap();
    assert_eq!(s.rows.len(), 3);
    let labelled: Vec<f64> = s.rows.iter().map(|r| r.value).collect();
    assert_eq!(labelled, [0.05, 0.5, 1.0]);
    // The stage-1 model is shared, so ERM metrics agree across rows.
    assert!(s.evaluations.windows(2).all(|w| w[0].base == w[1].base));
}
