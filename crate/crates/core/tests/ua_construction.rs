use ldit::ua::{
    apply_stack, build_context_mapper, build_pipeline, build_quantizer, enumerate_context, random_targets, verify, GridSpec,
    PiecewiseLinear, UaConfig,
};
use ldit::{rng, DenseMatrix};
use proptest::prelude::*;

/// Every grid with at most 4096 on-grid points that the hypotheses allow,
/// up to a size that keeps the extended enumeration quick.
const GRIDS: &[(usize, usize, f64)] = &[
    (1, 2, 0.5),
    (2, 2, 0.5),
    (3, 2, 0.5),
    (1, 3, 0.5),
    (2, 3, 0.5),
    (1, 4, 0.5),
    (1, 6, 0.5),
    (1, 2, 0.25),
    (2, 2, 0.25),
    (1, 3, 0.25),
    (1, 4, 0.25),
    (1, 2, 0.125),
];

fn floor_to_grid(x: f64, delta: f64) -> f64 {
    (x / delta).floor() * delta
}

#[test]
fn smallest_grid_constants() {
    let g = GridSpec::new(1, 2, 0.5).unwrap();
    assert_eq!(g.u, vec![1.0]);
    assert_eq!(g.j_const, 2.0 + 3.0 * 2.0 * 4.0);
    assert_eq!(g.cited_bounds(), (128.0, 528.0));
    assert_eq!(g.on_grid_count(), 4);
    let g = GridSpec::new(3, 2, 0.25).unwrap();
    assert_eq!(g.u, vec![1.0, 4.0, 16.0]);
    assert!(GridSpec::new(1, 2, 0.3).is_err());
    assert!(GridSpec::new(1, 2, 1.0).is_err());
}

#[test]
fn quantizer_examples() {
    let g = GridSpec::new(1, 2, 0.5).unwrap();
    let q = build_quantizer(&g);
    assert_eq!(q.len(), 3);
    let x = DenseMatrix::new(1, 2, vec![0.3, 1.5]).unwrap();
    assert_eq!(apply_stack(&q, &x, &g.u).as_slice(), &[0.0, -g.j_const]);
    let z = DenseMatrix::zeros(1, 2);
    assert_eq!(apply_stack(&q, &z, &g.u), z);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantizer_floors_and_is_idempotent(grid_ix in 0usize..GRIDS.len(), seed in 0u64..10_000) {
        let (d, l, delta) = GRIDS[grid_ix];
        let g = GridSpec::new(d, l, delta).unwrap();
        let q = build_quantizer(&g);
        prop_assert_eq!(q.len(), d + (d as f64 / delta) as usize);
        let mut s = rng::stream(seed, 0);
        let x = DenseMatrix::from_fn(d, l, |_, _| rand::Rng::random::<f64>(&mut s));
        let once = apply_stack(&q, &x, &g.u);
        for (o, xi) in once.as_slice().iter().zip(x.as_slice()) {
            prop_assert_eq!(*o, floor_to_grid(*xi, delta));
        }
        prop_assert_eq!(apply_stack(&q, &once, &g.u), once);
    }

    #[test]
    fn quantizer_sends_outside_entries_to_minus_j(v in prop_oneof![-5.0f64..-1e-9, 1.0f64..5.0]) {
        let g = GridSpec::new(1, 2, 0.25).unwrap();
        let x = DenseMatrix::new(1, 2, vec![v, 0.5]).unwrap();
        let out = apply_stack(&build_quantizer(&g), &x, &g.u);
        prop_assert_eq!(out.as_slice(), &[-g.j_const, 0.5]);
    }

    #[test]
    fn ramp_expansion_is_exact_outside_ramps(x in -3.0f64..3.0, eps in 1e-4f64..1e-2) {
        let f = PiecewiseLinear::zeta2(0.5);
        let r = f.relu_form(eps).unwrap();
        let near = f.knots.iter().any(|k| (x - k.at).abs() <= eps);
        if !near {
            prop_assert!((r.eval(x) - f.eval(x)).abs() <= 1e-12);
        }
    }
}

#[test]
fn certified_window_properties_hold_exhaustively() {
    for &(d, l, delta) in GRIDS {
        let mut g = GridSpec::new(d, l, delta).unwrap();
        assert!(g.exhaustive());
        let mapper = build_context_mapper(&g).unwrap();
        let table = enumerate_context(&mut g, &mapper, 0, 0).unwrap();
        assert!(table.complete);
        assert_eq!(table.on_grid().count() as u128, g.on_grid_count());
        assert_eq!(table.entries.len() as u128, g.extended_count());
        let checks = table.check(mapper.t_l_certified, mapper.t_r);
        assert!(checks.all_hold(), "grid ({d}, {l}, {delta}): {checks:?}");
        assert_eq!(mapper.layers.len(), l * g.levels().pow(d as u32) + 1);
    }
}

#[test]
fn cited_lower_bound_excludes_on_grid_values_of_the_smallest_grid() {
    // The cited t_l = 128 lies above every on-grid contextual value here;
    // distinctness and the off-grid property are unaffected.
    let mut g = GridSpec::new(1, 2, 0.5).unwrap();
    let mapper = build_context_mapper(&g).unwrap();
    assert_eq!((mapper.t_l, mapper.t_r), (128.0, 528.0));
    let table = enumerate_context(&mut g, &mapper, 0, 0).unwrap();
    assert_eq!(table.on_grid_range(), (82.0, 148.5));
    let c = table.check(mapper.t_l, mapper.t_r);
    assert!(!c.on_grid_inside);
    assert!(c.within_distinct && c.across_distinct && c.off_grid_outside);
}

#[test]
fn memorizer_is_exact_with_random_and_identity_targets() {
    for &(d, l, delta) in &GRIDS[..8] {
        let mut g = GridSpec::new(d, l, delta).unwrap();
        let mapper = build_context_mapper(&g).unwrap();
        let table = enumerate_context(&mut g, &mapper, 0, 0).unwrap();
        let on: Vec<DenseMatrix> = table.on_grid().map(|e| e.input.clone()).collect();
        let targets = random_targets(&g, on.len(), 3);
        let p = build_pipeline(g.clone(), &table, mapper.clone(), &targets).unwrap();
        for (x, a) in on.iter().zip(&targets) {
            assert_eq!(&p.forward(x).unwrap(), a);
        }
        let zero = DenseMatrix::zeros(d, l);
        for e in table.off_grid() {
            assert_eq!(p.forward(&e.input).unwrap(), zero);
        }
        let id = build_pipeline(g.clone(), &table, mapper, &on).unwrap();
        for x in &on {
            assert_eq!(&id.forward(x).unwrap(), x);
        }
        // exact piecewise-constant approximation: zero L² error on cube interiors
        assert_eq!(p.l2_error(&targets, 1, |x| p.forward(x)).unwrap(), 0.0);
    }
}

#[test]
fn memorizer_rejects_mismatched_targets() {
    let mut g = GridSpec::new(1, 2, 0.5).unwrap();
    let mapper = build_context_mapper(&g).unwrap();
    let table = enumerate_context(&mut g, &mapper, 0, 0).unwrap();
    assert!(build_pipeline(g.clone(), &table, mapper, &random_targets(&g, 3, 1)).is_err());
}

#[test]
fn softened_l2_error_vanishes_as_lambda_grows() {
    for &(d, l, delta) in &[(1, 2, 0.5), (2, 2, 0.5), (1, 3, 0.5)] {
        let mut g = GridSpec::new(d, l, delta).unwrap();
        let mapper = build_context_mapper(&g).unwrap();
        let table = enumerate_context(&mut g, &mapper, 0, 0).unwrap();
        let n = table.on_grid().count();
        let targets = random_targets(&g, n, 7);
        let p = build_pipeline(g.clone(), &table, mapper, &targets).unwrap();
        let mut errs = Vec::new();
        for lambda in [1e2, 1e3, 1e4] {
            let soft = p.soften(lambda, 1.0 / lambda).unwrap();
            errs.push(p.l2_error(&targets, 2, |x| soft.forward(x, &p.context.pos_enc, &g.u)).unwrap());
        }
        // steep ramps leave a rounding floor far below the coarse-λ error
        assert!(errs.windows(2).all(|w| w[1] <= w[0].max(1e-6)), "({d}, {l}, {delta}): {errs:?}");
        assert!(errs[2] <= 1e-6, "({d}, {l}, {delta}): {errs:?}");
    }
}

#[test]
fn smallest_grid_report() {
    let r = verify(&UaConfig::new(1, 2, 0.5)).unwrap();
    assert!(r.exhaustive && r.certified.all_hold() && !r.cited.on_grid_inside);
    assert_eq!((r.quantizer.mismatches, r.quantizer.samples, r.quantizer.layer_count), (0, 1000, 3));
    assert!(r.quantizer.idempotent);
    assert!(r.memorizer.exact && r.memorizer.identity_exact);
    assert_eq!(r.soften.len(), 3);
    assert!(r.soften.iter().all(|s| s.within_bound));
    assert!(r.soften_monotone);
    assert_eq!(r.modified_l2, 0.0);
    // round-trips through the JSON report format
    let text = serde_json::to_string(&r).unwrap();
    let back: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(back["t_r"], 528.0);
}

#[test]
fn mapper_hypotheses_are_enforced() {
    assert!(build_context_mapper(&GridSpec::new(1, 1, 0.5).unwrap()).is_err());
}
