use mjls_pob::io::{parse_model, parse_policy, parse_specs, ModelFile, PolicyFile, SpecFile};
use mjls_pob::model::{Basis, Dims, PolicyLayout};
use mjls_pob::portfolio::{build_portfolio_model, portfolio_specs, PortfolioParams};
use mjls_pob::random::{random_model, random_policy, rng, ModelShape};
use mjls_pob::Error;
use nalgebra::{DMatrix, DVector};

#[test]
fn model_round_trip() {
    let mut r = rng(1);
    for known in [false, true] {
        let dims = Dims {
            horizon: 3,
            nx: 2,
            nu: 1,
            nd: 2,
            ne: 1,
            ny: 1,
            modes: 2,
        };
        let model = random_model(
            &mut r,
            ModelShape {
                dims,
                known_x0: known,
                with_sigma0: true,
            },
        );
        let text = serde_json::to_string(&ModelFile::from_model(&model)).unwrap();
        assert_eq!(parse_model(&text, "m").unwrap(), model);
    }
}

#[test]
fn time_invariant_matrices_repeat() {
    let text = r#"{"horizon": 3, "nx": 1, "nu": 1, "nd": 1, "ny": 1, "modes": 2,
        "pi": [0.5, 0.5], "P": [[0.9, 0.2], [0.1, 0.8]],
        "matrices": [{"A": [[1]], "B": [[1]], "C": [[1]]}, {"A": [[2]], "B": [[1]], "C": [[1]]}]}"#;
    let model = parse_model(text, "m").unwrap();
    for t in 0..3 {
        assert_eq!(model.mats(t, 1).a[(0, 0)], 2.0);
        assert_eq!(model.mats(t, 0).bd[(0, 0)], 0.0);
    }
    assert_eq!(model.chain().transition(1, 0), 0.1);
}

#[test]
fn row_stochastic_matrix_rejected() {
    let text = r#"{"horizon": 1, "nx": 1, "nu": 1, "nd": 1, "ny": 1, "modes": 2,
        "pi": [0.5, 0.5], "P": [[0.9, 0.1], [0.2, 0.8]],
        "matrices": [{"A": [[1]], "B": [[1]], "C": [[1]]}, {"A": [[2]], "B": [[1]], "C": [[1]]}]}"#;
    assert!(parse_model(text, "m").is_err());
}

#[test]
fn wrong_matrix_shape_is_a_dimension_error() {
    let text = r#"{"horizon": 1, "nx": 2, "nu": 1, "nd": 1, "ny": 1, "modes": 1,
        "pi": [1], "P": [[1]],
        "matrices": [{"A": [[1, 0]], "B": [[1], [0]], "C": [[1, 0]]}]}"#;
    assert!(matches!(parse_model(text, "m"), Err(Error::Dimension { .. })));
}

#[test]
fn unknown_field_is_a_parse_error() {
    let text = r#"{"horizon": 1, "nx": 1, "nu": 1, "nd": 1, "ny": 1, "modes": 1, "colour": 3,
        "pi": [1], "P": [[1]], "matrices": [{"A": [[1]], "B": [[1]], "C": [[1]]}]}"#;
    assert!(matches!(parse_model(text, "m"), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn specs_round_trip() {
    let params = PortfolioParams::default();
    let (_, ellitope) = build_portfolio_model(&params).unwrap();
    let specs = portfolio_specs(&params, ellitope).unwrap();
    let text = serde_json::to_string(&SpecFile::from_specs(&specs)).unwrap();
    assert_eq!(parse_specs(&text, "s").unwrap(), specs);
}

#[test]
fn policy_round_trip() {
    let mut r = rng(2);
    let layout = PolicyLayout::new(3, 1, 2, 2, 1).unwrap();
    let p = random_policy(&mut r, layout, Basis::Outputs, 1.0);
    let file = PolicyFile::from_policy(&p);
    let text = serde_json::to_string(&file).unwrap();
    assert_eq!(parse_policy(&text, "p").unwrap(), p);

    // the readable table alone reproduces the same policy
    let mut table_only = file.clone();
    table_only.chi = None;
    let text = serde_json::to_string(&table_only).unwrap();
    assert_eq!(parse_policy(&text, "p").unwrap(), p);
}

#[test]
fn sparse_policy_table() {
    let text = r#"{"basis": "purified", "horizon": 2, "memory": 1, "modes": 2, "nu": 1, "ny": 1,
        "table": [{"t": 1, "hist": [2, 1], "h": [3.0], "H": [[[0.5]], [[-1.0]]]}]}"#;
    let p = parse_policy(text, "p").unwrap();
    let key = p.layout().key_of(&[1, 0], 1);
    assert_eq!(p.offset(1, key), DVector::from_element(1, 3.0));
    assert_eq!(p.gain(1, 1, key), DMatrix::from_element(1, 1, -1.0));
    assert_eq!(p.as_vec().iter().filter(|v| **v != 0.0).count(), 3);

    let bad = text.replace("[2, 1]", "[3, 1]");
    assert!(parse_policy(&bad, "p").is_err());
}
