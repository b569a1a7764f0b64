use cfka_demo::{drift_sweep, Lab};

#[test]
fn lab_trains_and_reports_scatter() {
    let lab = Lab::build(3, 30, "linear", 6000).unwrap();
    let last = lab.curve.last().unwrap();
    assert_eq!(last.step, 6000);
    assert!(last.a > 0.9, "train hFTA {}", last.a);
    let s = lab.scatter().unwrap();
    assert!(s.points.len() > 10);
    assert!(s.pearson.abs() <= 1.0 && s.spearman.abs() <= 1.0);
    assert!(s.points.iter().all(|p| p.di.is_finite() && p.attention.is_finite()));
    assert!(!lab.held_out().is_empty());
    assert!(lab.vocab_size() > 100);
}

#[test]
fn forgetting_methods_differ_as_expected() {
    let lab = Lab::build(4, 30, "linear", 6000).unwrap();
    let naive = lab.forgetting("naive", 0.0, 2000).unwrap();
    let replay = lab.forgetting("replay", 0.5, 2000).unwrap();
    let start = naive.curve[0].a;
    let naive_end = naive.curve.last().unwrap();
    let replay_end = replay.curve.last().unwrap();
    assert!(naive_end.a < start, "naive should forget: {start} -> {}", naive_end.a);
    assert!(naive_end.b > naive.curve[0].b, "new people should be learned");
    assert!(replay_end.a > naive_end.a, "replay keeps more: {} vs {}", replay_end.a, naive_end.a);
    assert_eq!(replay.method, "stored_replay");

    assert!(lab.forgetting("bogus", 1.0, 10).is_err());
    assert!(lab.forgetting("replay", 0.0, 10).is_err());
}

#[test]
fn drift_shrinks_with_learning_rate() {
    let pts = drift_sweep(1, &[4e-3, 2e-3], 3000).unwrap();
    assert_eq!(pts[1].steps, 6000);
    assert!(pts[0].max_drift > 0.0);
    let ratio = pts[0].max_drift / pts[1].max_drift;
    assert!((1.5..2.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn unknown_variant_rejected() {
    assert!(Lab::build(1, 10, "quadratic", 10).is_err());
}
