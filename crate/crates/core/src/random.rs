//! Seeded random instance generators shared by the oracle suites and tests.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::expectation::{FactorSequence, HistoryFactor};
use crate::model::{checked_pow, window_len, Basis, Dims, Ellitope, MarkovChain, MjlsModel, ModeMatrices, Policy, PolicyLayout};

pub type InstanceRng = ChaCha20Rng;

pub fn rng(seed: u64) -> InstanceRng {
    rand::SeedableRng::seed_from_u64(seed)
}

pub fn uniform_matrix(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.gen_range(-1.0..=1.0))
}

fn probability_vector(rng: &mut impl Rng, m: usize) -> DVector<f64> {
    let v = DVector::from_fn(m, |_, _| rng.gen_range(0.05..1.0));
    let s = v.sum();
    v / s
}

pub fn random_chain(rng: &mut impl Rng, m: usize) -> MarkovChain {
    let pi = probability_vector(rng, m);
    let mut p = DMatrix::zeros(m, m);
    for c in 0..m {
        p.set_column(c, &probability_vector(rng, m));
    }
    MarkovChain::new(pi, p).expect("generated chain is valid")
}

/// Factors with entries U[-1, 1] and chain dimensions in 1..=max_dim.
/// With `history = Some((tau, T))` the factor at τ is window dependent.
pub fn random_factor_sequence(
    rng: &mut impl Rng,
    modes: usize,
    horizon: usize,
    max_dim: usize,
    history: Option<(usize, usize)>,
) -> FactorSequence {
    let dims: Vec<usize> = (0..=horizon).map(|_| rng.gen_range(1..=max_dim)).collect();
    random_factor_sequence_with_dims(rng, modes, &dims, history)
}

pub fn random_factor_sequence_with_dims(
    rng: &mut impl Rng,
    modes: usize,
    dims: &[usize],
    history: Option<(usize, usize)>,
) -> FactorSequence {
    let horizon = dims.len() - 1;
    let mut per_mode = Vec::with_capacity(horizon);
    let mut hist = None;
    for t in 0..horizon {
        if let Some((tau, mem)) = history.filter(|&(tau, _)| tau == t) {
            let keys = checked_pow(modes, window_len(tau, mem)).unwrap();
            hist = Some(HistoryFactor {
                tau,
                memory: mem,
                table: (0..keys).map(|_| uniform_matrix(rng, dims[t + 1], dims[t], 1.0)).collect(),
            });
            per_mode.push(Vec::new());
        } else {
            per_mode.push((0..modes).map(|_| uniform_matrix(rng, dims[t + 1], dims[t], 1.0)).collect());
        }
    }
    FactorSequence::new(per_mode, hist, modes).expect("generated sequence is consistent")
}

#[derive(Debug, Clone, Copy)]
pub struct ModelShape {
    pub dims: Dims,
    pub known_x0: bool,
    pub with_sigma0: bool,
}

pub fn random_model(rng: &mut impl Rng, shape: ModelShape) -> MjlsModel {
    let d = shape.dims;
    let chain = random_chain(rng, d.modes);
    let mats = (0..d.horizon)
        .map(|_| {
            (0..d.modes)
                .map(|_| ModeMatrices {
                    a: uniform_matrix(rng, d.nx, d.nx, 0.8),
                    b: uniform_matrix(rng, d.nx, d.nu, 1.0),
                    bd: uniform_matrix(rng, d.nx, d.nd, 1.0),
                    bs: uniform_matrix(rng, d.nx, d.ne, 0.5),
                    c: uniform_matrix(rng, d.ny, d.nx, 1.0),
                    dd: uniform_matrix(rng, d.ny, d.nd, 0.5),
                    ds: uniform_matrix(rng, d.ny, d.ne, 0.5),
                })
                .collect()
        })
        .collect();
    let sigma0 = if shape.with_sigma0 {
        let l = uniform_matrix(rng, d.nx, d.nx, 0.5);
        &l * l.transpose()
    } else {
        DMatrix::zeros(d.nx, d.nx)
    };
    let x0 = shape
        .known_x0
        .then(|| DVector::from_fn(d.nx, |_, _| rng.gen_range(-1.0..=1.0)));
    MjlsModel::new(d, chain, sigma0, mats, x0).expect("generated model is consistent")
}

/// `s` random PSD quadratics whose sum is positive definite.
pub fn random_ellitope(rng: &mut impl Rng, n: usize, s: usize) -> Ellitope {
    let mut qs = Vec::with_capacity(s);
    for i in 0..s {
        let l = uniform_matrix(rng, n, n, 1.0);
        let mut q = &l * l.transpose();
        if i == 0 {
            q += DMatrix::identity(n, n) * 0.5;
        }
        qs.push(q);
    }
    Ellitope::new(qs).expect("generated ellitope is valid")
}

pub fn random_policy(rng: &mut impl Rng, layout: PolicyLayout, basis: Basis, scale: f64) -> Policy {
    let chi = DVector::from_fn(layout.dim(), |_, _| scale * rng.gen_range(-1.0..=1.0));
    Policy::from_vec(layout, basis, chi).expect("sizes agree")
}

/// Random symmetric PSD matrix of rank at most `rank`.
pub fn random_psd(rng: &mut impl Rng, n: usize, rank: usize) -> DMatrix<f64> {
    let l = uniform_matrix(rng, n, rank, 1.0);
    &l * l.transpose()
}
