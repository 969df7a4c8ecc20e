use proto_adapt_demo::{compare_distances, Demo};

#[test]
fn sliced_cost_never_exceeds_exact() {
    for (seed, dim) in [(1, 1), (2, 2), (3, 5)] {
        let [exact, sliced] = compare_distances(seed, 40, dim, 2.0, 200).unwrap();
        assert!(sliced <= exact + 1e-12, "dim {dim}: {sliced} > {exact}");
        assert!(sliced > 0.0);
    }
    assert!(compare_distances(0, 65, 2, 1.0, 10).is_err());
    assert!(compare_distances(0, 10, 0, 1.0, 10).is_err());
}

#[test]
fn larger_shift_costs_more() {
    let near = compare_distances(4, 32, 3, 0.5, 100).unwrap();
    let far = compare_distances(4, 32, 3, 3.0, 100).unwrap();
    assert!(far[0] > near[0] && far[1] > near[1]);
}

#[test]
fn demo_session_round_trip() {
    let mut demo = Demo::build(1, 50.0).unwrap();
    let loose = demo.pseudo(0.0, 300).unwrap();
    assert_eq!(loose.len(), 900);
    assert_eq!(demo.kept_fraction(), 1.0);
    demo.pseudo(0.95, 300).unwrap();
    assert!(demo.kept_fraction() < 1.0);

    let before = demo.target_accuracy(false).unwrap();
    let trace = demo.run_adaptation(150, 0.5, 0.9).unwrap();
    assert_eq!(trace.len(), 150);
    let after = demo.target_accuracy(true).unwrap();
    assert!(after > before, "accuracy {before} -> {after}");
    assert_eq!(demo.target_embeddings(true).unwrap().len(), 1800);
    assert_eq!(demo.source_embeddings().unwrap().len(), 1800);
}
