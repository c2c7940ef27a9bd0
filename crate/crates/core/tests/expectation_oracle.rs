use mjls_pob::expectation::{
    brute_force_linear, brute_force_quadratic, expected_product_linear, expected_product_quadratic, FactorSequence,
    HistoryFactor,
};
use mjls_pob::linalg::frobenius_rel_err;
use mjls_pob::model::{MarkovChain, MAX_PATHS};
use mjls_pob::random::{random_chain, random_factor_sequence, random_factor_sequence_with_dims, rng, uniform_matrix};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

fn two_mode_chain() -> MarkovChain {
    MarkovChain::new(
        DVector::from_vec(vec![0.1, 0.9]),
        DMatrix::from_row_slice(2, 2, &[0.2, 0.3, 0.8, 0.7]),
    )
    .unwrap()
}

#[test]
fn scalar_two_step_hand_value() {
    // paths: 0.1·0.2·5·2 + 0.1·0.8·7·2 + 0.9·0.3·5·3 + 0.9·0.7·7·3 = 18.6
    let seq = FactorSequence::new(
        vec![vec![scalar(2.0), scalar(3.0)], vec![scalar(5.0), scalar(7.0)]],
        None,
        2,
    )
    .unwrap();
    let v = expected_product_linear(&two_mode_chain(), &seq).unwrap();
    assert!((v[(0, 0)] - 18.6).abs() < 1e-12);
}

#[test]
fn history_factor_hand_value() {
    // f_1 depends on (θ0, θ1): table [1, 2, 3, 4]; f_0 = 1
    let seq = FactorSequence::new(
        vec![vec![scalar(1.0), scalar(1.0)], Vec::new()],
        Some(HistoryFactor {
            tau: 1,
            memory: 1,
            table: vec![scalar(1.0), scalar(2.0), scalar(3.0), scalar(4.0)],
        }),
        2,
    )
    .unwrap();
    let v = expected_product_linear(&two_mode_chain(), &seq).unwrap();
    let expect = 0.1 * 0.2 * 1.0 + 0.1 * 0.8 * 2.0 + 0.9 * 0.3 * 3.0 + 0.9 * 0.7 * 4.0;
    assert!((v[(0, 0)] - expect).abs() < 1e-12);
}

#[test]
fn linear_recursion_matches_enumeration() {
    let mut r = rng(11);
    for case in 0..120 {
        let m = r.gen_range(1..=3);
        let n = r.gen_range(1..=6);
        let chain = random_chain(&mut r, m);
        let hist = if case % 3 == 0 {
            None
        } else {
            let tau = r.gen_range(0..n);
            Some((tau, r.gen_range(0..n)))
        };
        let seq = random_factor_sequence(&mut r, m, n, 3, hist);
        let fast = expected_product_linear(&chain, &seq).unwrap();
        let slow = brute_force_linear(&chain, &seq, MAX_PATHS).unwrap();
        assert!(frobenius_rel_err(&fast, &slow) <= 1e-10, "case {case}: {fast} vs {slow}");
    }
}

#[test]
fn quadratic_recursion_matches_enumeration() {
    let mut r = rng(12);
    for case in 0..120 {
        let m = r.gen_range(1..=3);
        let n = r.gen_range(1..=6);
        let chain = random_chain(&mut r, m);
        let hist = (case % 4 != 0).then(|| (r.gen_range(0..n), r.gen_range(0..n)));
        let left = random_factor_sequence(&mut r, m, n, 3, hist);
        let right_hist = if case % 2 == 0 { hist } else { None };
        let right = random_factor_sequence(&mut r, m, n, 3, right_hist);
        let s = uniform_matrix(&mut r, left.output_dim(), right.output_dim(), 1.0);
        let fast = expected_product_quadratic(&chain, &left, &s, &right).unwrap();
        let slow = brute_force_quadratic(&chain, &left, &s, &right, MAX_PATHS).unwrap();
        assert!(frobenius_rel_err(&fast, &slow) <= 1e-10, "case {case}");
    }
}

#[test]
fn deterministic_chain_reduces_to_plain_product() {
    // a chain that always stays in mode 1 gives the product along that path
    let chain = MarkovChain::new(
        DVector::from_vec(vec![0.0, 1.0]),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
    )
    .unwrap();
    let mut r = rng(5);
    let seq = random_factor_sequence(&mut r, 2, 4, 3, Some((2, 1)));
    let v = expected_product_linear(&chain, &seq).unwrap();
    assert!(frobenius_rel_err(&v, &seq.product_on(&[1, 1, 1, 1])) < 1e-14);
}

#[test]
fn mismatched_links_rejected() {
    let bad = FactorSequence::new(
        vec![
            vec![DMatrix::zeros(2, 1), DMatrix::zeros(2, 1)],
            vec![DMatrix::zeros(1, 3), DMatrix::zeros(1, 3)],
        ],
        None,
        2,
    );
    assert!(bad.is_err());
}

#[test]
fn mode_count_mismatch_rejected() {
    let mut r = rng(3);
    let seq = random_factor_sequence(&mut r, 3, 3, 2, None);
    assert!(expected_product_linear(&two_mode_chain(), &seq).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn identity_factors_give_identity(seed in 0u64..1000, n in 1usize..6, d in 1usize..4) {
        let mut r = rng(seed);
        let chain = random_chain(&mut r, 3);
        let per_mode = (0..n).map(|_| vec![DMatrix::identity(d, d); 3]).collect();
        let seq = FactorSequence::new(per_mode, None, 3).unwrap();
        let v = expected_product_linear(&chain, &seq).unwrap();
        prop_assert!((v - DMatrix::identity(d, d)).amax() < 1e-13);
    }

    #[test]
    fn linear_in_the_designated_factor(seed in 0u64..1000, n in 2usize..5) {
        let mut r = rng(seed);
        let chain = random_chain(&mut r, 2);
        let dims: Vec<usize> = (0..=n).map(|_| r.gen_range(1..=3)).collect();
        let tau = r.gen_range(0..n);
        let a = random_factor_sequence_with_dims(&mut r, 2, &dims, Some((tau, 1)));
        let mut b_table = a.history().unwrap().table.clone();
        for t in b_table.iter_mut() {
            *t = &*t * 2.0;
        }
        let per_mode: Vec<Vec<DMatrix<f64>>> = (0..n)
            .map(|t| if t == tau { Vec::new() } else { (0..2).map(|k| a.factor_on(t, &vec![k; n]).clone()).collect() })
            .collect();
        let b = FactorSequence::new(per_mode, Some(HistoryFactor { tau, memory: 1, table: b_table }), 2).unwrap();
        let va = expected_product_linear(&chain, &a).unwrap();
        let vb = expected_product_linear(&chain, &b).unwrap();
        prop_assert!((vb - va * 2.0).amax() < 1e-12);
    }
}
