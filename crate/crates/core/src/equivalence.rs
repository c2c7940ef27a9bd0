//! Conversion between purified-output (POB) and output-based (OB) affine policies
//! with full switching memory (T = N−1).
//!
//! Along a mode prefix θ_0..θ_t the auxiliary state x̂_t is affine in the target
//! signals, and the source signals follow from y_j = v_j + C_j x̂_j. Substituting
//! into the source policy yields the target policy for that prefix. Prefixes are
//! walked depth-first so shared prefixes are computed once.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{Basis, Dims, MarkovChain, MjlsModel, ModeMatrices, Policy, PolicyLayout};
use crate::simulator::{rollout, Scenario};

/// Affine expression `c + Σ_i M_i r_i` in the target signals r_0..r_{k-1}, with the
/// blocks concatenated column-wise in `m`.
#[derive(Debug, Clone)]
struct Affine {
    c: DVector<f64>,
    m: DMatrix<f64>,
}

struct Walk<'a> {
    model: &'a MjlsModel,
    src: &'a Policy,
    dst: Policy,
    /// +1 when the source signals are outputs (y = r + Cx̂), −1 when purified (v = r − Cx̂).
    sign: f64,
}

impl Walk<'_> {
    fn descend(&mut self, prefix: &mut Vec<usize>, signals: &mut Vec<Affine>, xhat: &Affine) {
        let t = prefix.len();
        let d = *self.model.dims();
        if t == d.horizon {
            return;
        }
        for k in 0..d.modes {
            let mm = self.model.mats(t, k);
            prefix.push(k);
            // source signal s_t = r_t + sign · C x̂_t
            let width = (t + 1) * d.ny;
            let mut m = DMatrix::zeros(d.ny, width);
            m.view_mut((0, 0), (d.ny, t * d.ny)).copy_from(&(&mm.c * &xhat.m * self.sign));
            m.view_mut((0, t * d.ny), (d.ny, d.ny)).fill_with_identity();
            signals.push(Affine {
                c: &mm.c * &xhat.c * self.sign,
                m,
            });

            let l = self.src.layout();
            let key = l.key_of(prefix, t);
            let mut u = Affine {
                c: self.src.offset(t, key),
                m: DMatrix::zeros(d.nu, width),
            };
            for (j, s) in signals.iter().enumerate() {
                let g = self.src.gain(t, j, key);
                u.c += &g * &s.c;
                let cols = s.m.ncols();
                let mut view = u.m.view_mut((0, 0), (d.nu, cols));
                view += &g * &s.m;
            }
            self.dst.set_offset(t, key, &u.c);
            for j in 0..=t {
                let blk = u.m.view((0, j * d.ny), (d.nu, d.ny)).into_owned();
                self.dst.set_gain(t, j, key, &blk);
            }

            // x̂_{t+1} = A x̂_t + B u_t
            let mut next = Affine {
                c: &mm.a * &xhat.c + &mm.b * &u.c,
                m: &mm.b * &u.m,
            };
            {
                let mut view = next.m.view_mut((0, 0), (d.nx, t * d.ny));
                view += &mm.a * &xhat.m;
            }
            self.descend(prefix, signals, &next);
            signals.pop();
            prefix.pop();
        }
    }
}

fn convert(model: &MjlsModel, policy: &Policy, from: Basis, to: Basis) -> Result<Policy> {
    let d = model.dims();
    let l = policy.layout();
    if policy.basis() != from {
        return Err(Error::Invalid(format!("expected a {from:?} policy, got {:?}", policy.basis())));
    }
    if l.horizon != d.horizon || l.modes != d.modes || l.nu != d.nu || l.ny != d.ny {
        return Err(Error::Invalid("policy does not match the model".into()));
    }
    if l.memory + 1 != d.horizon {
        return Err(Error::Invalid(format!(
            "memory mismatch: conversion needs T = N-1 = {}, policy has T = {}",
            d.horizon - 1,
            l.memory
        )));
    }
    let mut walk = Walk {
        model,
        src: policy,
        dst: Policy::zeros(l.clone(), to),
        sign: if from == Basis::Outputs { 1.0 } else { -1.0 },
    };
    let x0 = Affine {
        c: DVector::zeros(d.nx),
        m: DMatrix::zeros(d.nx, 0),
    };
    walk.descend(&mut Vec::with_capacity(d.horizon), &mut Vec::new(), &x0);
    Ok(walk.dst)
}

/// POB policy producing the same controls as the OB policy on every scenario.
pub fn ob_to_pob(model: &MjlsModel, ob: &Policy) -> Result<Policy> {
    convert(model, ob, Basis::Outputs, Basis::Purified)
}

/// OB policy producing the same controls as the POB policy on every scenario.
pub fn pob_to_ob(model: &MjlsModel, pob: &Policy) -> Result<Policy> {
    convert(model, pob, Basis::Purified, Basis::Outputs)
}

/// Largest control gap between two policies on one scenario, relative to 1 + ‖u‖.
pub fn control_gap(model: &MjlsModel, a: &Policy, b: &Policy, scenario: &Scenario) -> Result<f64> {
    let ra = rollout(model, a, scenario)?;
    let rb = rollout(model, b, scenario)?;
    Ok(ra
        .u
        .iter()
        .zip(&rb.u)
        .map(|(x, y)| (x - y).amax() / (1.0 + x.amax()))
        .fold(0.0, f64::max))
}

/// Two scenarios with identical outputs, current modes and memory-0 windows on which
/// a memory-0 POB policy issues different controls, so no memory-0 OB policy can
/// reproduce it.
#[derive(Debug, Clone)]
pub struct MemoryCounterexample {
    pub model: MjlsModel,
    pub pob: Policy,
    pub first: Scenario,
    pub second: Scenario,
}

impl MemoryCounterexample {
    /// (largest output difference, control difference at the last step).
    pub fn gaps(&self) -> Result<(f64, f64)> {
        let a = rollout(&self.model, &self.pob, &self.first)?;
        let b = rollout(&self.model, &self.pob, &self.second)?;
        let outputs = a.y.iter().zip(&b.y).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max);
        let n = a.u.len() - 1;
        Ok((outputs, (&a.u[n] - &b.u[n]).amax()))
    }
}

/// Scalar three-step instance with mode-dependent drift a(θ) ∈ {1, 2}.
///
/// The POB policy applies u_0 = 1 and u_2 = v_2. The auxiliary output at t = 2 is
/// a(θ_1), so v_2 depends on θ_1 while the memory-0 window only sees θ_2. The two
/// scenarios differ in θ_1 and in d_2, chosen to keep y_0, y_1, y_2 equal.
pub fn memory_counterexample() -> MemoryCounterexample {
    let dims = Dims {
        horizon: 3,
        nx: 1,
        nu: 1,
        nd: 1,
        ne: 0,
        ny: 1,
        modes: 2,
    };
    let drift = [1.0, 2.0];
    let mats = (0..3)
        .map(|_| {
            drift
                .iter()
                .map(|&a| {
                    let mut mm = ModeMatrices::zeros(&dims);
                    mm.a[(0, 0)] = a;
                    mm.b[(0, 0)] = 1.0;
                    mm.bd[(0, 0)] = 1.0;
                    mm.c[(0, 0)] = 1.0;
                    mm.dd[(0, 0)] = 1.0;
                    mm
                })
                .collect()
        })
        .collect();
    let chain = MarkovChain::new(
        DVector::from_vec(vec![0.5, 0.5]),
        DMatrix::from_element(2, 2, 0.5),
    )
    .expect("uniform chain");
    let model = MjlsModel::new(dims, chain, DMatrix::zeros(1, 1), mats, Some(DVector::zeros(1)))
        .expect("consistent counterexample model");
    let layout = PolicyLayout::new(3, 0, 2, 1, 1).expect("valid layout");
    let mut pob = Policy::zeros(layout, Basis::Purified);
    for key in 0..2 {
        pob.set_offset(0, key, &DVector::from_element(1, 1.0));
        pob.set_gain(2, 2, key, &DMatrix::from_element(1, 1, 1.0));
    }
    // x_1 = 1, x_2 = a(θ_1); d_2 = c − a(θ_1) keeps y_2 = c
    let target = 5.0;
    let scenario = |theta1: usize| Scenario {
        path: vec![0, theta1, 0],
        zeta: DVector::from_vec(vec![0.0, 0.0, target - drift[theta1]]),
        eps: DVector::zeros(1),
    };
    MemoryCounterexample {
        model,
        pob,
        first: scenario(0),
        second: scenario(1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counterexample_separates_controls() {
        let ce = memory_counterexample();
        let (outputs, control) = ce.gaps().unwrap();
        assert_eq!(outputs, 0.0);
        assert!((control - 1.0).abs() < 1e-12);
    }
}
