//! Mode-history-dependent affine policy tables and their flat parameter layout.
//!
//! Flat order of χ: time t ascending, then history key (lexicographic), then
//! the offset h_t (n_u entries), then gains H_0^t, ..., H_t^t, each row-major.

use nalgebra::{DMatrix, DVector};

use super::{checked_pow, history_window, window_index, window_len};
use crate::error::{dim_err, Error, Result};

/// Which signal the gains multiply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Basis {
    /// Purified outputs v_t = y_t - ŷ_t.
    Purified,
    /// Raw outputs y_t.
    Outputs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Offset { a: usize },
    Gain { j: usize, a: usize, b: usize },
}

/// One scalar decision variable: which table entry it fills.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub t: usize,
    pub key: usize,
    pub kind: SlotKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyLayout {
    pub horizon: usize,
    pub memory: usize,
    pub modes: usize,
    pub nu: usize,
    pub ny: usize,
    time_offsets: Vec<usize>,
    dim: usize,
}

impl PolicyLayout {
    pub fn new(horizon: usize, memory: usize, modes: usize, nu: usize, ny: usize) -> Result<Self> {
        if horizon == 0 || modes == 0 {
            return Err(Error::Invalid("horizon and mode count must be positive".into()));
        }
        if memory >= horizon {
            return Err(Error::Invalid(format!(
                "memory {memory} must be at most N-1 = {}",
                horizon - 1
            )));
        }
        let dim = dim_of_policy(horizon, memory, modes, nu, ny)?;
        let mut time_offsets = Vec::with_capacity(horizon + 1);
        let mut acc = 0usize;
        for t in 0..horizon {
            time_offsets.push(acc);
            acc += checked_pow(modes, window_len(t, memory)).unwrap() * nu * ((t + 1) * ny + 1);
        }
        time_offsets.push(acc);
        Ok(PolicyLayout {
            horizon,
            memory,
            modes,
            nu,
            ny,
            time_offsets,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of history keys at time t.
    pub fn keys_at(&self, t: usize) -> usize {
        checked_pow(self.modes, window_len(t, self.memory)).unwrap()
    }

    fn group_size(&self, t: usize) -> usize {
        self.nu * ((t + 1) * self.ny + 1)
    }

    pub fn group_offset(&self, t: usize, key: usize) -> usize {
        self.time_offsets[t] + key * self.group_size(t)
    }

    pub fn offset_index(&self, t: usize, key: usize, a: usize) -> usize {
        self.group_offset(t, key) + a
    }

    pub fn gain_index(&self, t: usize, key: usize, j: usize, a: usize, b: usize) -> usize {
        self.group_offset(t, key) + self.nu + j * self.nu * self.ny + a * self.ny + b
    }

    /// Key index of the window θ_{[t,T]} on `path`.
    pub fn key_of(&self, path: &[usize], t: usize) -> usize {
        window_index(history_window(path, t, self.memory), self.modes)
    }

    /// Slots in flat order.
    pub fn slots(&self) -> Vec<Slot> {
        let mut out = Vec::with_capacity(self.dim);
        for t in 0..self.horizon {
            for key in 0..self.keys_at(t) {
                for a in 0..self.nu {
                    out.push(Slot {
                        t,
                        key,
                        kind: SlotKind::Offset { a },
                    });
                }
                for j in 0..=t {
                    for a in 0..self.nu {
                        for b in 0..self.ny {
                            out.push(Slot {
                                t,
                                key,
                                kind: SlotKind::Gain { j, a, b },
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Closed-form parameter count of a memory-T policy table.
pub fn dim_of_policy(horizon: usize, memory: usize, modes: usize, nu: usize, ny: usize) -> Result<usize> {
    let overflow = || Error::TooLarge {
        what: "policy dimension".into(),
        needed: u128::MAX,
        limit: usize::MAX as u128,
    };
    let mut total: usize = 0;
    for t in 0..horizon {
        let keys = checked_pow(modes, window_len(t, memory)).ok_or_else(overflow)?;
        let per = (t + 1)
            .checked_mul(ny)
            .and_then(|v| v.checked_add(1))
            .and_then(|v| v.checked_mul(nu))
            .and_then(|v| v.checked_mul(keys))
            .ok_or_else(overflow)?;
        total = total.checked_add(per).ok_or_else(overflow)?;
    }
    Ok(total)
}

/// Affine policy u_t = h_t[key] + Σ_{j≤t} H_j^t[key] s_j with s = v (purified) or y (outputs).
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    layout: PolicyLayout,
    basis: Basis,
    chi: DVector<f64>,
}

impl Policy {
    pub fn zeros(layout: PolicyLayout, basis: Basis) -> Self {
        let chi = DVector::zeros(layout.dim());
        Policy { layout, basis, chi }
    }

    pub fn from_vec(layout: PolicyLayout, basis: Basis, chi: DVector<f64>) -> Result<Self> {
        if chi.len() != layout.dim() {
            return Err(dim_err("policy parameter vector", layout.dim(), chi.len()));
        }
        Ok(Policy { layout, basis, chi })
    }

    pub fn layout(&self) -> &PolicyLayout {
        &self.layout
    }
    pub fn basis(&self) -> Basis {
        self.basis
    }
    pub fn memory(&self) -> usize {
        self.layout.memory
    }
    pub fn as_vec(&self) -> &DVector<f64> {
        &self.chi
    }
    pub fn as_vec_mut(&mut self) -> &mut DVector<f64> {
        &mut self.chi
    }

    pub fn offset(&self, t: usize, key: usize) -> DVector<f64> {
        let o = self.layout.group_offset(t, key);
        DVector::from_column_slice(&self.chi.as_slice()[o..o + self.layout.nu])
    }

    pub fn set_offset(&mut self, t: usize, key: usize, h: &DVector<f64>) {
        let o = self.layout.group_offset(t, key);
        self.chi.as_mut_slice()[o..o + self.layout.nu].copy_from_slice(h.as_slice());
    }

    pub fn gain(&self, t: usize, j: usize, key: usize) -> DMatrix<f64> {
        let (nu, ny) = (self.layout.nu, self.layout.ny);
        let o = self.layout.gain_index(t, key, j, 0, 0);
        DMatrix::from_row_slice(nu, ny, &self.chi.as_slice()[o..o + nu * ny])
    }

    pub fn set_gain(&mut self, t: usize, j: usize, key: usize, g: &DMatrix<f64>) {
        let (nu, ny) = (self.layout.nu, self.layout.ny);
        for a in 0..nu {
            for b in 0..ny {
                let idx = self.layout.gain_index(t, key, j, a, b);
                self.chi[idx] = g[(a, b)];
            }
        }
    }

    /// u_t given the signals s_0..s_t observed so far along `path`.
    pub fn control(&self, t: usize, path: &[usize], signals: &[DVector<f64>]) -> DVector<f64> {
        let key = self.layout.key_of(path, t);
        let mut u = self.offset(t, key);
        for (j, s) in signals.iter().enumerate().take(t + 1) {
            u += self.gain(t, j, key) * s;
        }
        u
    }

    /// (h̲, H̲) along `path`: stacked offsets and the block-lower-triangular gain matrix.
    pub fn stacked(&self, path: &[usize]) -> (DVector<f64>, DMatrix<f64>) {
        let l = &self.layout;
        let n = l.horizon;
        let mut h = DVector::zeros(n * l.nu);
        let mut big = DMatrix::zeros(n * l.nu, n * l.ny);
        for t in 0..n {
            let key = l.key_of(path, t);
            h.rows_mut(t * l.nu, l.nu).copy_from(&self.offset(t, key));
            for j in 0..=t {
                big.view_mut((t * l.nu, j * l.ny), (l.nu, l.ny))
                    .copy_from(&self.gain(t, j, key));
            }
        }
        (h, big)
    }
}
