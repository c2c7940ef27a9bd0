//! Brute-force reference maximizer for quadratics over an ellitope.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg::{pd_inv_sqrt, symmetrize};
use crate::model::Ellitope;

/// Multi-start projected ascent for max { ζᵀAζ + 2⟨b, ζ⟩ : max_i ζᵀQ_iζ ≤ 1 }.
///
/// Iterates live in coordinates whitened by (Σ Q_i)^{-1/2}; infeasible steps are
/// pulled back radially. With one quadratic this is the exact Euclidean projection
/// onto the unit ball. Returns the best value and maximizer found; both are a lower
/// bound on the true maximum.
pub fn max_quadratic_over_ellitope(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    ellitope: &Ellitope,
    starts: usize,
    iters: usize,
    rng: &mut impl Rng,
) -> (f64, DVector<f64>) {
    let n = ellitope.dim();
    let w = pd_inv_sqrt(&ellitope.q_sum()).expect("ellitope sum is positive definite");
    let aw = symmetrize(&(&w * symmetrize(a) * &w));
    let bw = &w * b;
    let qs: Vec<DMatrix<f64>> = ellitope.qs().iter().map(|q| &w * q * &w).collect();
    let level = |xi: &DVector<f64>| qs.iter().map(|q| xi.dot(&(q * xi))).fold(0.0, f64::max);
    let retract = |xi: DVector<f64>| {
        let l = level(&xi);
        if l > 1.0 {
            xi / l.sqrt()
        } else {
            xi
        }
    };
    let f = |xi: &DVector<f64>| xi.dot(&(&aw * xi)) + 2.0 * bw.dot(xi);
    let lip = 2.0 * aw.norm() + 1e-12;

    let mut best = (0.0, DVector::zeros(n));
    for k in 0..starts.max(1) {
        let mut xi = if k == 0 {
            // a deterministic start along the linear term
            if bw.norm() > 0.0 {
                retract(&bw / bw.norm())
            } else {
                DVector::zeros(n)
            }
        } else {
            let g = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let u: f64 = rng.gen();
            retract(g.normalize() * u.powf(1.0 / n as f64) * 1.5)
        };
        let mut fx = f(&xi);
        let mut step = 1.0 / lip;
        for _ in 0..iters {
            let grad = (&aw * &xi + &bw) * 2.0;
            let cand = retract(&xi + &grad * step);
            let fc = f(&cand);
            if fc >= fx {
                let moved = (&cand - &xi).norm();
                xi = cand;
                fx = fc;
                step = (step * 1.5).min(1e3 / lip);
                if moved < 1e-13 {
                    break;
                }
            } else {
                step *= 0.5;
                if step < 1e-16 / lip {
                    break;
                }
            }
        }
        if fx > best.0 {
            best = (fx, xi);
        }
    }
    let zeta = &w * best.1;
    (best.0, zeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::rng;

    #[test]
    fn unit_ball_eigen_maximum() {
        let e = Ellitope::new(vec![DMatrix::identity(3, 3)]).unwrap();
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0, -2.0]));
        let (v, z) = max_quadratic_over_ellitope(&a, &DVector::zeros(3), &e, 16, 500, &mut rng(1));
        assert!((v - 3.0).abs() < 1e-9);
        assert!(e.level(&z) <= 1.0 + 1e-12);
    }

    #[test]
    fn concave_interior_maximum() {
        // -(x-0.2)² + 0.04 attains 0.04 at x = 0.2
        let e = Ellitope::new(vec![DMatrix::identity(1, 1)]).unwrap();
        let a = DMatrix::from_element(1, 1, -1.0);
        let b = DVector::from_element(1, 0.2);
        let (v, _) = max_quadratic_over_ellitope(&a, &b, &e, 8, 500, &mut rng(2));
        assert!((v - 0.04).abs() < 1e-10);
    }
}
