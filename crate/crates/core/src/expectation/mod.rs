//! Expectations of ordered matrix products over Markov mode paths.
//!
//! A [`FactorSequence`] holds f_0..f_{N-1} with f_t of size n_{t+1} × n_t; the
//! product is f_{N-1} ··· f_0. Every factor depends on the current mode except
//! at most one designated index τ, where the factor may depend on the whole
//! window θ_{[τ,T]}. Expectations are computed by backward recursions whose
//! cost is O(N m) products plus O(m^{T+1}) for the window.

mod assembly;

pub use assembly::{
    assemble_m, assemble_m_enumerated, assemble_v, assemble_v_enumerated, full_gram, AffineMapM, AssemblyOptions,
    Channel, QuadraticFormV, SpecQuadratic,
};

use nalgebra::DMatrix;

use crate::error::{dim_err, Error, Result};
use crate::model::{
    checked_pow, enumerate_paths, history_window, path_probability, window_index, window_len, MarkovChain,
};

/// Window-dependent factor at time `tau`, indexed by the lexicographic key of θ_{[τ,T]}.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryFactor {
    pub tau: usize,
    pub memory: usize,
    pub table: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorSequence {
    per_mode: Vec<Vec<DMatrix<f64>>>,
    history: Option<HistoryFactor>,
    modes: usize,
}

impl FactorSequence {
    /// `per_mode[t][k]` is f_t[k]. At the designated index the per-mode entry is ignored and may be empty.
    pub fn new(per_mode: Vec<Vec<DMatrix<f64>>>, history: Option<HistoryFactor>, modes: usize) -> Result<Self> {
        let n = per_mode.len();
        if n == 0 {
            return Err(Error::Invalid("factor sequence must be non-empty".into()));
        }
        if let Some(h) = &history {
            if h.tau >= n {
                return Err(Error::Invalid(format!("designated index {} beyond horizon {n}", h.tau)));
            }
            let keys = checked_pow(modes, window_len(h.tau, h.memory)).unwrap_or(usize::MAX);
            if h.table.len() != keys {
                return Err(dim_err("history factor table", keys, h.table.len()));
            }
        }
        let mut shapes = Vec::with_capacity(n);
        for (t, fs) in per_mode.iter().enumerate() {
            let group: Vec<&DMatrix<f64>> = match &history {
                Some(h) if h.tau == t => h.table.iter().collect(),
                _ => {
                    if fs.len() != modes {
                        return Err(dim_err(&format!("factors at t={t}"), modes, fs.len()));
                    }
                    fs.iter().collect()
                }
            };
            let shape = group[0].shape();
            if group.iter().any(|f| f.shape() != shape) {
                return Err(Error::Invalid(format!("factors at t={t} differ in shape")));
            }
            shapes.push(shape);
        }
        for t in 1..n {
            if shapes[t].1 != shapes[t - 1].0 {
                return Err(dim_err(
                    &format!("chain link between t={} and t={t}", t - 1),
                    shapes[t - 1].0,
                    shapes[t].1,
                ));
            }
        }
        Ok(FactorSequence {
            per_mode,
            history,
            modes,
        })
    }

    pub fn len(&self) -> usize {
        self.per_mode.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_mode.is_empty()
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn history(&self) -> Option<&HistoryFactor> {
        self.history.as_ref()
    }

    pub fn output_dim(&self) -> usize {
        self.factor_on(self.len() - 1, &self.any_path()).nrows()
    }

    fn any_path(&self) -> Vec<usize> {
        vec![0; self.len()]
    }

    fn mode_factor(&self, t: usize, k: usize) -> &DMatrix<f64> {
        &self.per_mode[t][k]
    }

    /// f_t evaluated along a full path.
    pub fn factor_on(&self, t: usize, path: &[usize]) -> &DMatrix<f64> {
        match &self.history {
            Some(h) if h.tau == t => &h.table[window_index(history_window(path, t, h.memory), self.modes)],
            _ => &self.per_mode[t][path[t]],
        }
    }

    /// f_{N-1} ··· f_0 along a path.
    pub fn product_on(&self, path: &[usize]) -> DMatrix<f64> {
        let mut acc = self.factor_on(0, path).clone();
        for t in 1..self.len() {
            acc = self.factor_on(t, path) * acc;
        }
        acc
    }
}

/// Per-mode recursion state; `None` marks modes excluded by a mask.
pub(crate) type ModeState = Vec<Option<DMatrix<f64>>>;

fn allowed(mask: Option<&[Option<usize>]>, t: usize, k: usize) -> bool {
    match mask {
        Some(ms) => ms[t].is_none_or(|only| only == k),
        None => true,
    }
}

/// Mix per-mode terms w_t[j] into g_{t-1}[i] = Σ_j P[j,i] w_t[j].
fn mix_back(chain: &MarkovChain, w: &ModeState, mask: Option<&[Option<usize>]>, t_prev: usize) -> ModeState {
    let m = chain.modes();
    (0..m)
        .map(|i| {
            if !allowed(mask, t_prev, i) {
                return None;
            }
            let mut acc: Option<DMatrix<f64>> = None;
            for (j, wj) in w.iter().enumerate() {
                let Some(wj) = wj else { continue };
                let p = chain.transition(j, i);
                if p == 0.0 {
                    continue;
                }
                match &mut acc {
                    Some(a) => *a += wj * p,
                    None => acc = Some(wj * p),
                }
            }
            acc.or_else(|| w.iter().flatten().next().map(|x| DMatrix::zeros(x.nrows(), x.ncols())))
        })
        .collect()
}

fn close(chain: &MarkovChain, w: &ModeState) -> Option<DMatrix<f64>> {
    let mut acc: Option<DMatrix<f64>> = None;
    for (i, wi) in w.iter().enumerate() {
        let Some(wi) = wi else { continue };
        let p = chain.pi()[i];
        match &mut acc {
            Some(a) => *a += wi * p,
            None => acc = Some(wi * p),
        }
    }
    acc
}

/// Linear recursion from conditional state `g` at time `start` down to time 0.
/// `g[i]` = E[(terminal) f_{N-1} ··· f_{start+1} | θ_start = i] (restricted to the mask).
pub(crate) fn finish_linear<'a, F>(
    chain: &MarkovChain,
    mut g: ModeState,
    start: usize,
    f: F,
    mask: Option<&[Option<usize>]>,
    fault: Option<usize>,
) -> Option<DMatrix<f64>>
where
    F: Fn(usize, usize) -> &'a DMatrix<f64>,
{
    let mut t = start;
    loop {
        let w: ModeState = g
            .iter()
            .enumerate()
            .map(|(k, gk)| {
                gk.as_ref().filter(|_| allowed(mask, t, k)).map(|gk| {
                    let v = gk * f(t, k);
                    if fault == Some(t) {
                        -v
                    } else {
                        v
                    }
                })
            })
            .collect();
        if t == 0 {
            return close(chain, &w);
        }
        g = mix_back(chain, &w, mask, t - 1);
        t -= 1;
    }
}

/// g_stop[i] = E[terminal f_{N-1} ··· f_{stop+1} | θ_stop = i] for a chain of length `n`.
pub(crate) fn suffix_linear<'a, F>(
    chain: &MarkovChain,
    terminal: &DMatrix<f64>,
    n: usize,
    stop: usize,
    f: F,
    mask: Option<&[Option<usize>]>,
) -> ModeState
where
    F: Fn(usize, usize) -> &'a DMatrix<f64>,
{
    let m = chain.modes();
    let mut g: ModeState = (0..m)
        .map(|k| allowed(mask, n - 1, k).then(|| terminal.clone()))
        .collect();
    let mut t = n - 1;
    while t > stop {
        let w: ModeState = g
            .iter()
            .enumerate()
            .map(|(k, gk)| gk.as_ref().map(|gk| gk * f(t, k)))
            .collect();
        g = mix_back(chain, &w, mask, t - 1);
        t -= 1;
    }
    g
}

/// Quadratic recursion from `g` at time `start` down to 0, with w_t[j] = q_t[j]ᵀ g_t[j] f_t[j].
pub(crate) fn finish_quadratic<'a, 'b, Q, F>(
    chain: &MarkovChain,
    mut g: ModeState,
    start: usize,
    q: Q,
    f: F,
    mask: Option<&[Option<usize>]>,
    fault: Option<usize>,
) -> Option<DMatrix<f64>>
where
    Q: Fn(usize, usize) -> &'a DMatrix<f64>,
    F: Fn(usize, usize) -> &'b DMatrix<f64>,
{
    let mut t = start;
    loop {
        let w: ModeState = g
            .iter()
            .enumerate()
            .map(|(k, gk)| {
                gk.as_ref().filter(|_| allowed(mask, t, k)).map(|gk| {
                    let v = q(t, k).tr_mul(&(gk * f(t, k)));
                    if fault == Some(t) {
                        -v
                    } else {
                        v
                    }
                })
            })
            .collect();
        if t == 0 {
            return close(chain, &w);
        }
        g = mix_back(chain, &w, mask, t - 1);
        t -= 1;
    }
}

pub(crate) fn suffix_quadratic<'a, 'b, Q, F>(
    chain: &MarkovChain,
    s: &DMatrix<f64>,
    n: usize,
    stop: usize,
    q: Q,
    f: F,
    mask: Option<&[Option<usize>]>,
) -> ModeState
where
    Q: Fn(usize, usize) -> &'a DMatrix<f64>,
    F: Fn(usize, usize) -> &'b DMatrix<f64>,
{
    let m = chain.modes();
    let mut g: ModeState = (0..m).map(|k| allowed(mask, n - 1, k).then(|| s.clone())).collect();
    let mut t = n - 1;
    while t > stop {
        let w: ModeState = g
            .iter()
            .enumerate()
            .map(|(k, gk)| gk.as_ref().map(|gk| q(t, k).tr_mul(&(gk * f(t, k)))))
            .collect();
        g = mix_back(chain, &w, mask, t - 1);
        t -= 1;
    }
    g
}

fn check_modes(chain: &MarkovChain, seq: &FactorSequence) -> Result<()> {
    if seq.modes != chain.modes() {
        return Err(dim_err("factor sequence modes", chain.modes(), seq.modes));
    }
    for (t, fs) in seq.per_mode.iter().enumerate() {
        let designated = seq.history.as_ref().is_some_and(|h| h.tau == t);
        if !designated && fs.len() != chain.modes() {
            return Err(dim_err(&format!("factors at t={t}"), chain.modes(), fs.len()));
        }
    }
    if let Some(h) = &seq.history {
        let keys = checked_pow(chain.modes(), window_len(h.tau, h.memory)).unwrap_or(usize::MAX);
        if keys != h.table.len() {
            return Err(dim_err("history table vs chain modes", keys, h.table.len()));
        }
    }
    Ok(())
}

/// Walk all windows (θ_{w0}, ..., θ_τ), accumulating transition weights inside the window,
/// and hand each complete window to `leaf(window, weight)`.
fn for_each_window(chain: &MarkovChain, len: usize, mut leaf: impl FnMut(&[usize], f64)) {
    fn rec(chain: &MarkovChain, len: usize, w: &mut Vec<usize>, weight: f64, leaf: &mut dyn FnMut(&[usize], f64)) {
        if w.len() == len {
            leaf(w, weight);
            return;
        }
        for k in 0..chain.modes() {
            let step = match w.last() {
                Some(&prev) => chain.transition(k, prev),
                None => 1.0,
            };
            if step == 0.0 {
                continue;
            }
            w.push(k);
            rec(chain, len, w, weight * step, leaf);
            w.pop();
        }
    }
    let mut w = Vec::with_capacity(len);
    rec(chain, len, &mut w, 1.0, &mut leaf);
}

/// Distribute per-window contributions C(h) into g_{w0-1}[i] = Σ_h P[h_0, i] C(h),
/// or close with π when the window starts at time 0.
fn collapse_window(
    chain: &MarkovChain,
    w0: usize,
    contributions: Vec<(usize, DMatrix<f64>)>,
) -> std::result::Result<ModeState, DMatrix<f64>> {
    let m = chain.modes();
    if w0 == 0 {
        let mut acc: Option<DMatrix<f64>> = None;
        for (h0, c) in contributions {
            let v = c * chain.pi()[h0];
            match &mut acc {
                Some(a) => *a += v,
                None => acc = Some(v),
            }
        }
        return Err(acc.expect("at least one window has positive weight"));
    }
    let shape = contributions[0].1.shape();
    let mut g: Vec<DMatrix<f64>> = (0..m).map(|_| DMatrix::zeros(shape.0, shape.1)).collect();
    for (h0, c) in contributions {
        for (i, gi) in g.iter_mut().enumerate() {
            let p = chain.transition(h0, i);
            if p != 0.0 {
                *gi += &c * p;
            }
        }
    }
    Ok(g.into_iter().map(Some).collect())
}

/// E[f_{N-1} ··· f_0] over mode paths of `chain`.
pub fn expected_product_linear(chain: &MarkovChain, seq: &FactorSequence) -> Result<DMatrix<f64>> {
    expected_product_linear_impl(chain, seq, None)
}

pub(crate) fn expected_product_linear_impl(
    chain: &MarkovChain,
    seq: &FactorSequence,
    fault: Option<usize>,
) -> Result<DMatrix<f64>> {
    check_modes(chain, seq)?;
    let n = seq.len();
    let out = seq.output_dim();
    let eye = DMatrix::identity(out, out);
    let per_mode = |t: usize, k: usize| seq.mode_factor(t, k);
    let Some(h) = &seq.history else {
        let g = suffix_linear(chain, &eye, n, n - 1, per_mode, None);
        return Ok(finish_linear(chain, g, n - 1, per_mode, None, fault).expect("non-empty chain"));
    };
    let tau = h.tau;
    let len = window_len(tau, h.memory);
    let w0 = tau + 1 - len;
    let g_tau = suffix_linear(chain, &eye, n, tau, per_mode, None);
    let m = chain.modes();
    let mut contributions = Vec::new();
    for_each_window(chain, len, |w, weight| {
        // product of window factors below τ, earliest first
        let mut acc: Option<DMatrix<f64>> = None;
        for (offset, &k) in w[..len - 1].iter().enumerate() {
            let f = seq.mode_factor(w0 + offset, k);
            acc = Some(match acc {
                Some(a) => f * a,
                None => f.clone(),
            });
        }
        let ft = &h.table[window_index(w, m)];
        let head = g_tau[w[len - 1]].as_ref().unwrap() * ft;
        let mut c = match acc {
            Some(a) => head * a,
            None => head,
        };
        if fault == Some(tau) {
            c = -c;
        }
        contributions.push((w[0], c * weight));
    });
    match collapse_window(chain, w0, contributions) {
        Err(done) => Ok(done),
        Ok(g) => Ok(finish_linear(chain, g, w0 - 1, per_mode, None, fault).expect("non-empty chain")),
    }
}

/// E[(q_{N-1} ··· q_0)ᵀ S (f_{N-1} ··· f_0)] over mode paths.
pub fn expected_product_quadratic(
    chain: &MarkovChain,
    left: &FactorSequence,
    s: &DMatrix<f64>,
    right: &FactorSequence,
) -> Result<DMatrix<f64>> {
    expected_product_quadratic_impl(chain, left, s, right, None)
}

pub(crate) fn expected_product_quadratic_impl(
    chain: &MarkovChain,
    left: &FactorSequence,
    s: &DMatrix<f64>,
    right: &FactorSequence,
    fault: Option<usize>,
) -> Result<DMatrix<f64>> {
    check_modes(chain, left)?;
    check_modes(chain, right)?;
    let n = left.len();
    if right.len() != n {
        return Err(dim_err("quadratic chain lengths", n, right.len()));
    }
    if s.nrows() != left.output_dim() || s.ncols() != right.output_dim() {
        return Err(dim_err(
            "middle matrix S",
            format!("{}x{}", left.output_dim(), right.output_dim()),
            format!("{}x{}", s.nrows(), s.ncols()),
        ));
    }
    let tau_spec = match (&left.history, &right.history) {
        (Some(a), Some(b)) => {
            if a.tau != b.tau || a.memory != b.memory {
                return Err(Error::Invalid("left and right designated factors must share τ and T".into()));
            }
            Some((a.tau, a.memory))
        }
        (Some(a), None) => Some((a.tau, a.memory)),
        (None, Some(b)) => Some((b.tau, b.memory)),
        (None, None) => None,
    };
    let ql = |t: usize, k: usize| left.mode_factor(t, k);
    let fr = |t: usize, k: usize| right.mode_factor(t, k);
    let Some((tau, memory)) = tau_spec else {
        let g = suffix_quadratic(chain, s, n, n - 1, ql, fr, None);
        return Ok(finish_quadratic(chain, g, n - 1, ql, fr, None, fault).expect("non-empty chain"));
    };
    let len = window_len(tau, memory);
    let w0 = tau + 1 - len;
    let g_tau = suffix_quadratic(chain, s, n, tau, ql, fr, None);
    let m = chain.modes();
    let pick = |seq: &'_ FactorSequence, w: &[usize]| -> DMatrix<f64> {
        match &seq.history {
            Some(h) => h.table[window_index(w, m)].clone(),
            None => seq.mode_factor(tau, w[w.len() - 1]).clone(),
        }
    };
    let mut contributions = Vec::new();
    for_each_window(chain, len, |w, weight| {
        let mut lq: Option<DMatrix<f64>> = None;
        let mut rf: Option<DMatrix<f64>> = None;
        for (offset, &k) in w[..len - 1].iter().enumerate() {
            let (a, b) = (left.mode_factor(w0 + offset, k), right.mode_factor(w0 + offset, k));
            lq = Some(match lq {
                Some(x) => a * x,
                None => a.clone(),
            });
            rf = Some(match rf {
                Some(x) => b * x,
                None => b.clone(),
            });
        }
        let lt = pick(left, w);
        let rt = pick(right, w);
        let mid = lt.tr_mul(&(g_tau[w[len - 1]].as_ref().unwrap() * rt));
        let mut c = match (lq, rf) {
            (Some(a), Some(b)) => a.tr_mul(&(mid * b)),
            _ => mid,
        };
        if fault == Some(tau) {
            c = -c;
        }
        contributions.push((w[0], c * weight));
    });
    match collapse_window(chain, w0, contributions) {
        Err(done) => Ok(done),
        Ok(g) => Ok(finish_quadratic(chain, g, w0 - 1, ql, fr, None, fault).expect("non-empty chain")),
    }
}

/// Path-enumeration reference for [`expected_product_linear`].
pub fn brute_force_linear(chain: &MarkovChain, seq: &FactorSequence, limit: usize) -> Result<DMatrix<f64>> {
    let paths = enumerate_paths(chain.modes(), seq.len(), limit)?;
    let mut acc: Option<DMatrix<f64>> = None;
    for p in &paths {
        let v = seq.product_on(p) * path_probability(chain, p);
        match &mut acc {
            Some(a) => *a += v,
            None => acc = Some(v),
        }
    }
    Ok(acc.unwrap())
}

/// Path-enumeration reference for [`expected_product_quadratic`].
pub fn brute_force_quadratic(
    chain: &MarkovChain,
    left: &FactorSequence,
    s: &DMatrix<f64>,
    right: &FactorSequence,
    limit: usize,
) -> Result<DMatrix<f64>> {
    let paths = enumerate_paths(chain.modes(), left.len(), limit)?;
    let mut acc: Option<DMatrix<f64>> = None;
    for p in &paths {
        let v = left.product_on(p).tr_mul(&(s * right.product_on(p))) * path_probability(chain, p);
        match &mut acc {
            Some(a) => *a += v,
            None => acc = Some(v),
        }
    }
    Ok(acc.unwrap())
}
