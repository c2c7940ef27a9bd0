//! Assembly of the mean map M(χ) and the second-moment form V(χ) over mode paths.
//!
//! Every quantity is an expectation of an ordered product of per-time, per-mode
//! factors ("chains") acting on the columns of ζ_e = (1, ζ) (or of ε). A policy
//! slot k contributes only on paths whose window at its time matches its key;
//! that indicator is a product of single-time mode indicators, so each slot
//! expectation is the backward recursion of the engine restricted by a mode
//! mask. Products of two slots combine both masks. Recursion suffixes beyond
//! the latest slot time do not depend on the slot and are computed once.
//!
//! Chain state layouts:
//! - output phase: `[X_t; I]` with X_t the free response of the purified-output
//!   system to the channel columns (n_x + n_c rows);
//! - trajectory phase: `[w; x]`, the stacked trajectory written so far plus the
//!   current state (n_w + n_x rows);
//! - open loop: `[w; X_t; I]` (n_w + n_x + n_c rows).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{finish_linear, finish_quadratic, suffix_linear, suffix_quadratic, ModeState};
use crate::error::{check_shape, dim_err, Result};
use crate::linalg::{gram_factor, psd_sqrt};
use crate::model::{
    enumerate_paths, path_probability, trajectory_affine_maps, window_from_index, window_len, Basis, MjlsModel,
    Policy, PolicyLayout, SlotKind,
};

/// Which column space a chain acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    /// ζ_e = (1, ζ); column 0 is the constant.
    Zeta,
    /// ε = (s_0, e_0, ..., e_{N-1}).
    Eps,
}

#[derive(Debug, Clone)]
pub struct AssemblyOptions {
    pub include_noise_trace: bool,
    /// Relative eigenvalue cutoff for the Gram factor.
    pub gram_rel_tol: f64,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        AssemblyOptions {
            include_noise_trace: true,
            gram_rel_tol: 1e-12,
        }
    }
}

/// M(χ) = M0 + Σ_k χ_k M_k.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMapM {
    pub m0: DMatrix<f64>,
    pub mk: Vec<DMatrix<f64>>,
}

impl AffineMapM {
    pub fn eval(&self, chi: &DVector<f64>) -> DMatrix<f64> {
        let mut m = self.m0.clone();
        for (k, mk) in self.mk.iter().enumerate() {
            if chi[k] != 0.0 {
                m += mk * chi[k];
            }
        }
        m
    }
}

/// A quadratic specification's weight matrix on w, used to assemble V.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecQuadratic {
    pub a: DMatrix<f64>,
}

/// V(χ) = V0 + Σ_k χ_k L_k + Z(χ)ᵀ Z(χ).
///
/// The quadratic part is stored as the Gram matrix 𝕋 over the active flat
/// indices (k, c) ↦ k·n_c + c, together with a factor `R` with 𝕋 ≈ RᵀR. Then
/// Z(χ) = R·Y(χ), where Y(χ) places χ_k at (index of (k, c), c).
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticFormV {
    pub n_c: usize,
    pub v0: DMatrix<f64>,
    pub lk: Vec<DMatrix<f64>>,
    pub active: Vec<usize>,
    pub gram: DMatrix<f64>,
    pub factor: DMatrix<f64>,
}

impl QuadraticFormV {
    fn y_of(&self, chi: &DVector<f64>) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(self.active.len(), self.n_c);
        for (row, &idx) in self.active.iter().enumerate() {
            y[(row, idx % self.n_c)] = chi[idx / self.n_c];
        }
        y
    }

    /// Affine part V0 + Σ χ_k L_k.
    pub fn affine_part(&self, chi: &DVector<f64>) -> DMatrix<f64> {
        let mut v = self.v0.clone();
        for (k, l) in self.lk.iter().enumerate() {
            if chi[k] != 0.0 {
                v += l * chi[k];
            }
        }
        v
    }

    /// Exact evaluation using the Gram matrix.
    pub fn eval(&self, chi: &DVector<f64>) -> DMatrix<f64> {
        let y = self.y_of(chi);
        self.affine_part(chi) + y.tr_mul(&(&self.gram * &y))
    }

    /// Z(χ) = R·Y(χ) (rank × n_c).
    pub fn z_of(&self, chi: &DVector<f64>) -> DMatrix<f64> {
        &self.factor * self.y_of(chi)
    }

    /// Evaluation through the factor, as seen by the SDP.
    pub fn eval_factored(&self, chi: &DVector<f64>) -> DMatrix<f64> {
        let z = self.z_of(chi);
        self.affine_part(chi) + z.tr_mul(&z)
    }

    pub fn rank(&self) -> usize {
        self.factor.nrows()
    }
}

/// Channel-independent trajectory-phase factors.
struct Trajectory {
    n: usize,
    n_w: usize,
    /// prop[t][k] for t ≥ 1 (index 0 unused).
    prop: Vec<Vec<DMatrix<f64>>>,
    /// inj[t][k][a]: dw × 1.
    inj: Vec<Vec<Vec<DMatrix<f64>>>>,
    sel: DMatrix<f64>,
}

impl Trajectory {
    fn new(model: &MjlsModel) -> Self {
        let d = model.dims();
        let (n, nx, nu) = (d.horizon, d.nx, d.nu);
        let n_w = d.n_w();
        let dw = n_w + nx;
        let m = d.modes;
        let mut prop = vec![Vec::new()];
        for t in 1..n {
            prop.push(
                (0..m)
                    .map(|k| {
                        let a = &model.mats(t, k).a;
                        let mut f = DMatrix::identity(dw, dw);
                        f.view_mut((n_w, n_w), (nx, nx)).copy_from(a);
                        f.view_mut((t * nx, n_w), (nx, nx)).copy_from(a);
                        f
                    })
                    .collect(),
            );
        }
        let inj = (0..n)
            .map(|t| {
                (0..m)
                    .map(|k| {
                        let b = &model.mats(t, k).b;
                        (0..nu)
                            .map(|a| {
                                let mut f = DMatrix::zeros(dw, 1);
                                f[(n * nx + t * nu + a, 0)] = 1.0;
                                for r in 0..nx {
                                    f[(t * nx + r, 0)] = b[(r, a)];
                                    f[(n_w + r, 0)] = b[(r, a)];
                                }
                                f
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let mut sel = DMatrix::zeros(n_w, dw);
        sel.view_mut((0, 0), (n_w, n_w)).fill_with_identity();
        Trajectory {
            n,
            n_w,
            prop,
            inj,
            sel,
        }
    }
}

/// Slot chain prefix up to and including the slot time.
struct SlotChain {
    /// pre[τ][k] for τ = 0..=t.
    pre: Vec<Vec<DMatrix<f64>>>,
}

/// Channel-specific factors and all slot chains for one column space.
struct ChannelChains {
    n_c: usize,
    /// Open-loop chain g[t][k].
    open: Vec<Vec<DMatrix<f64>>>,
    open_sel: DMatrix<f64>,
    /// Slot chain per signature (t, kind); `None` when the slot cannot act on this channel.
    sigs: Vec<Option<SlotChain>>,
}

impl ChannelChains {
    /// `cols` right-multiplies every column-space input (used to fold Σ_ε^{1/2} in).
    fn new(model: &MjlsModel, traj: &Trajectory, layout: &PolicyLayout, channel: Channel, cols: Option<&DMatrix<f64>>) -> Self {
        let d = model.dims();
        let (n, nx, ny, m) = (d.horizon, d.nx, d.ny, d.modes);
        let (base_c, x0, dist_off, per_t) = match channel {
            Channel::Zeta => {
                let z_cols = if model.x0_known().is_some() { 0 } else { nx };
                let nc = 1 + z_cols + n * d.nd;
                let mut x0 = DMatrix::zeros(nx, nc);
                if let Some(z) = model.x0_known() {
                    x0.set_column(0, z);
                } else {
                    x0.view_mut((0, 1), (nx, nx)).fill_with_identity();
                }
                (nc, x0, 1 + z_cols, d.nd)
            }
            Channel::Eps => {
                let nc = d.n_eps();
                let mut x0 = DMatrix::zeros(nx, nc);
                x0.view_mut((0, 0), (nx, nx)).fill_with_identity();
                (nc, x0, nx, d.ne)
            }
        };
        let post = |mat: DMatrix<f64>| match cols {
            Some(c) => mat * c,
            None => mat,
        };
        let n_c = cols.map_or(base_c, |c| c.ncols());
        let x0 = post(x0);
        // disturbance entry matrices per (t, k): n_x × n_c and n_y × n_c
        let dist = |t: usize, k: usize| {
            let mm = model.mats(t, k);
            let (bm, dm) = match channel {
                Channel::Zeta => (&mm.bd, &mm.dd),
                Channel::Eps => (&mm.bs, &mm.ds),
            };
            let mut be = DMatrix::zeros(nx, base_c);
            let mut de = DMatrix::zeros(ny, base_c);
            be.view_mut((0, dist_off + t * per_t), (nx, per_t)).copy_from(bm);
            de.view_mut((0, dist_off + t * per_t), (ny, per_t)).copy_from(dm);
            (post(be), post(de))
        };
        let da = nx + n_c;
        let mut aug: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(n);
        let mut rowmat: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(n);
        let n_w = traj.n_w;
        let dg = n_w + nx + n_c;
        let mut open: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(n);
        for t in 0..n {
            let mut aug_t = Vec::with_capacity(m);
            let mut row_t = Vec::with_capacity(m);
            let mut open_t = Vec::with_capacity(m);
            for k in 0..m {
                let mm = model.mats(t, k);
                let (be, de) = dist(t, k);
                if t == 0 {
                    let x1 = &mm.a * &x0 + &be;
                    let mut f = DMatrix::zeros(da, n_c);
                    f.view_mut((0, 0), (nx, n_c)).copy_from(&x1);
                    f.view_mut((nx, 0), (n_c, n_c)).fill_with_identity();
                    aug_t.push(f);
                    row_t.push(&mm.c * &x0 + &de);
                    let mut g = DMatrix::zeros(dg, n_c);
                    g.view_mut((0, 0), (nx, n_c)).copy_from(&x1);
                    g.view_mut((n_w, 0), (nx, n_c)).copy_from(&x1);
                    g.view_mut((n_w + nx, 0), (n_c, n_c)).fill_with_identity();
                    open_t.push(g);
                } else {
                    let mut f = DMatrix::identity(da, da);
                    f.view_mut((0, 0), (nx, nx)).copy_from(&mm.a);
                    f.view_mut((0, nx), (nx, n_c)).copy_from(&be);
                    aug_t.push(f);
                    let mut r = DMatrix::zeros(ny, da);
                    r.view_mut((0, 0), (ny, nx)).copy_from(&mm.c);
                    r.view_mut((0, nx), (ny, n_c)).copy_from(&de);
                    row_t.push(r);
                    let mut g = DMatrix::identity(dg, dg);
                    g.view_mut((n_w, n_w), (nx, nx)).copy_from(&mm.a);
                    g.view_mut((n_w, n_w + nx), (nx, n_c)).copy_from(&be);
                    g.view_mut((t * nx, n_w), (nx, nx)).copy_from(&mm.a);
                    g.view_mut((t * nx, n_w + nx), (nx, n_c)).copy_from(&be);
                    open_t.push(g);
                }
            }
            aug.push(aug_t);
            rowmat.push(row_t);
            open.push(open_t);
        }
        let mut open_sel = DMatrix::zeros(n_w, dg);
        open_sel.view_mut((0, 0), (n_w, n_w)).fill_with_identity();

        let one = DMatrix::from_element(1, 1, 1.0);
        let mut e0 = DMatrix::zeros(1, n_c);
        let has_const = channel == Channel::Zeta && cols.is_none();
        if has_const {
            e0[(0, 0)] = 1.0;
        }
        let mut sigs = Vec::new();
        for sig in signatures(layout) {
            let (t, kind) = sig;
            let chain = match kind {
                SlotKind::Offset { a } => {
                    if !has_const {
                        None
                    } else {
                        let pre = (0..=t)
                            .map(|tau| {
                                (0..m)
                                    .map(|k| {
                                        if tau == 0 && t == 0 {
                                            &traj.inj[0][k][a] * &e0
                                        } else if tau == 0 {
                                            e0.clone()
                                        } else if tau < t {
                                            one.clone()
                                        } else {
                                            traj.inj[t][k][a].clone()
                                        }
                                    })
                                    .collect()
                            })
                            .collect();
                        Some(SlotChain { pre })
                    }
                }
                SlotKind::Gain { j, a, b } => {
                    let pre = (0..=t)
                        .map(|tau| {
                            (0..m)
                                .map(|k| {
                                    if tau < j {
                                        aug[tau][k].clone()
                                    } else if tau == j {
                                        let r = rowmat[j][k].rows(b, 1).into_owned();
                                        if j == t {
                                            &traj.inj[t][k][a] * r
                                        } else {
                                            r
                                        }
                                    } else if tau < t {
                                        one.clone()
                                    } else {
                                        traj.inj[t][k][a].clone()
                                    }
                                })
                                .collect()
                        })
                        .collect();
                    Some(SlotChain { pre })
                }
            };
            sigs.push(chain);
        }
        ChannelChains {
            n_c,
            open,
            open_sel,
            sigs,
        }
    }
}

/// Distinct (t, kind) pairs in the order they first appear in the slot list.
fn signatures(layout: &PolicyLayout) -> Vec<(usize, SlotKind)> {
    let mut out = Vec::new();
    for t in 0..layout.horizon {
        for a in 0..layout.nu {
            out.push((t, SlotKind::Offset { a }));
        }
        for j in 0..=t {
            for a in 0..layout.nu {
                for b in 0..layout.ny {
                    out.push((t, SlotKind::Gain { j, a, b }));
                }
            }
        }
    }
    out
}

/// Per-slot data: signature index and mode mask.
struct SlotInfo {
    t: usize,
    sig: usize,
    mask: Vec<Option<usize>>,
}

fn slot_infos(layout: &PolicyLayout) -> Vec<SlotInfo> {
    let per_time: Vec<usize> = (0..layout.horizon)
        .map(|t| layout.nu * ((t + 1) * layout.ny + 1))
        .collect();
    let mut sig_base = Vec::with_capacity(layout.horizon);
    let mut acc = 0;
    for t in 0..layout.horizon {
        sig_base.push(acc);
        acc += per_time[t];
    }
    let mut out = Vec::with_capacity(layout.dim());
    for t in 0..layout.horizon {
        let len = window_len(t, layout.memory);
        let start = t + 1 - len;
        for key in 0..layout.keys_at(t) {
            let w = window_from_index(key, len, layout.modes);
            let mut mask = vec![None; layout.horizon];
            for (i, &k) in w.iter().enumerate() {
                mask[start + i] = Some(k);
            }
            for local in 0..per_time[t] {
                out.push(SlotInfo {
                    t,
                    sig: sig_base[t] + local,
                    mask: mask.clone(),
                });
            }
        }
    }
    out
}

fn merge_masks(a: &[Option<usize>], b: &[Option<usize>]) -> Option<Vec<Option<usize>>> {
    a.iter()
        .zip(b)
        .map(|(x, y)| match (x, y) {
            (Some(p), Some(q)) if p != q => Err(()),
            (Some(p), _) => Ok(Some(*p)),
            (None, q) => Ok(*q),
        })
        .collect::<std::result::Result<Vec<_>, ()>>()
        .ok()
}

struct Engine<'a> {
    model: &'a MjlsModel,
    traj: Trajectory,
    slots: Vec<SlotInfo>,
}

impl<'a> Engine<'a> {
    fn new(model: &'a MjlsModel, layout: &PolicyLayout) -> Result<Self> {
        let d = model.dims();
        if layout.horizon != d.horizon || layout.modes != d.modes || layout.nu != d.nu || layout.ny != d.ny {
            return Err(dim_err(
                "policy layout vs model",
                format!("N={} m={} nu={} ny={}", d.horizon, d.modes, d.nu, d.ny),
                format!("N={} m={} nu={} ny={}", layout.horizon, layout.modes, layout.nu, layout.ny),
            ));
        }
        Ok(Engine {
            model,
            traj: Trajectory::new(model),
            slots: slot_infos(layout),
        })
    }

    fn slot_factor<'s>(&'s self, ch: &'s ChannelChains, slot: usize, tau: usize, k: usize) -> &'s DMatrix<f64> {
        let info = &self.slots[slot];
        let sc = ch.sigs[info.sig].as_ref().expect("slot active on channel");
        if tau <= info.t {
            &sc.pre[tau][k]
        } else {
            &self.traj.prop[tau][k]
        }
    }

    fn slot_live(&self, ch: &ChannelChains, slot: usize) -> bool {
        ch.sigs[self.slots[slot].sig].is_some()
    }

    fn open_factor<'s>(&'s self, ch: &'s ChannelChains, tau: usize, k: usize) -> &'s DMatrix<f64> {
        &ch.open[tau][k]
    }

    fn chain(&self) -> &crate::model::MarkovChain {
        self.model.chain()
    }

    /// E[sel · slot chain] for every slot.
    fn slot_means(&self, ch: &ChannelChains) -> Vec<DMatrix<f64>> {
        let n = self.traj.n;
        let suffixes: Vec<ModeState> = (0..n)
            .map(|t| suffix_linear(self.chain(), &self.traj.sel, n, t, |tau, k| &self.traj.prop[tau][k], None))
            .collect();
        (0..self.slots.len())
            .into_par_iter()
            .map(|s| {
                if !self.slot_live(ch, s) {
                    return DMatrix::zeros(self.traj.n_w, ch.n_c);
                }
                let info = &self.slots[s];
                finish_linear(
                    self.chain(),
                    suffixes[info.t].clone(),
                    info.t,
                    |tau, k| self.slot_factor(ch, s, tau, k),
                    Some(&info.mask),
                    None,
                )
                .unwrap_or_else(|| DMatrix::zeros(self.traj.n_w, ch.n_c))
            })
            .collect()
    }

    fn open_mean(&self, ch: &ChannelChains) -> DMatrix<f64> {
        let n = self.traj.n;
        let f = |tau: usize, k: usize| self.open_factor(ch, tau, k);
        let g = suffix_linear(self.chain(), &ch.open_sel, n, 0, f, None);
        finish_linear(self.chain(), g, 0, f, None, None).expect("non-empty chain")
    }
}

/// Assemble M(χ) for the given channel.
pub fn assemble_m(model: &MjlsModel, layout: &PolicyLayout, channel: Channel) -> Result<AffineMapM> {
    let eng = Engine::new(model, layout)?;
    let ch = ChannelChains::new(model, &eng.traj, layout, channel, None);
    Ok(AffineMapM {
        m0: eng.open_mean(&ch),
        mk: eng.slot_means(&ch),
    })
}

/// Quadratic pieces of one channel: E[GᵀAG], E[∂F_kᵀAG], E[∂F_kᵀA∂F_l].
struct QuadPieces<'e, 'a> {
    eng: &'e Engine<'a>,
    ch: ChannelChains,
    s_gg: DMatrix<f64>,
    suffix_ww: Vec<ModeState>,
    suffix_wg: Vec<ModeState>,
}

impl<'e, 'a> QuadPieces<'e, 'a> {
    fn new(eng: &'e Engine<'a>, ch: ChannelChains, a: &DMatrix<f64>) -> Self {
        let traj = &eng.traj;
        let n = traj.n;
        let s_ww = traj.sel.tr_mul(&(a * &traj.sel));
        let s_wg = traj.sel.tr_mul(&(a * &ch.open_sel));
        let s_gg = ch.open_sel.tr_mul(&(a * &ch.open_sel));
        let prop = |tau: usize, k: usize| &traj.prop[tau][k];
        let suffix_ww = (0..n)
            .map(|t| suffix_quadratic(eng.chain(), &s_ww, n, t, prop, prop, None))
            .collect();
        let suffix_wg = (0..n)
            .map(|t| suffix_quadratic(eng.chain(), &s_wg, n, t, prop, |tau, k| &ch.open[tau][k], None))
            .collect();
        QuadPieces {
            eng,
            ch,
            s_gg,
            suffix_ww,
            suffix_wg,
        }
    }

    fn n_c(&self) -> usize {
        self.ch.n_c
    }

    fn open_open(&self) -> DMatrix<f64> {
        let n = self.eng.traj.n;
        let f = |tau: usize, k: usize| &self.ch.open[tau][k];
        let g = suffix_quadratic(self.eng.chain(), &self.s_gg, n, 0, f, f, None);
        finish_quadratic(self.eng.chain(), g, 0, f, f, None, None).expect("non-empty chain")
    }

    /// E[∂F_kᵀ A G].
    fn slot_open(&self, s: usize) -> Option<DMatrix<f64>> {
        if !self.eng.slot_live(&self.ch, s) {
            return None;
        }
        let info = &self.eng.slots[s];
        finish_quadratic(
            self.eng.chain(),
            self.suffix_wg[info.t].clone(),
            info.t,
            |tau, k| self.eng.slot_factor(&self.ch, s, tau, k),
            |tau, k| &self.ch.open[tau][k],
            Some(&info.mask),
            None,
        )
    }

    /// E[∂F_kᵀ A ∂F_l].
    fn slot_slot(&self, k: usize, l: usize) -> Option<DMatrix<f64>> {
        if !self.eng.slot_live(&self.ch, k) || !self.eng.slot_live(&self.ch, l) {
            return None;
        }
        let (ik, il) = (&self.eng.slots[k], &self.eng.slots[l]);
        let mask = merge_masks(&ik.mask, &il.mask)?;
        let ts = ik.t.max(il.t);
        finish_quadratic(
            self.eng.chain(),
            self.suffix_ww[ts].clone(),
            ts,
            |tau, q| self.eng.slot_factor(&self.ch, k, tau, q),
            |tau, q| self.eng.slot_factor(&self.ch, l, tau, q),
            Some(&mask),
            None,
        )
    }
}

/// Assemble V(χ) for E[⟨A w, w⟩] including (optionally) the Gaussian trace term.
pub fn assemble_v(
    model: &MjlsModel,
    layout: &PolicyLayout,
    spec: &SpecQuadratic,
    opts: &AssemblyOptions,
) -> Result<QuadraticFormV> {
    let d = model.dims();
    check_shape("spec matrix A", &spec.a, d.n_w(), d.n_w())?;
    let a = crate::linalg::symmetrize(&spec.a);
    let eng = Engine::new(model, layout)?;
    let zeta = QuadPieces::new(&eng, ChannelChains::new(model, &eng.traj, layout, Channel::Zeta, None), &a);
    let noise = if opts.include_noise_trace && model.has_noise() {
        let root = psd_sqrt(&model.sigma_eps());
        let keep = nonzero_columns(&root);
        (!keep.is_empty()).then(|| {
            let cols = root.select_columns(keep.iter());
            QuadPieces::new(&eng, ChannelChains::new(model, &eng.traj, layout, Channel::Eps, Some(&cols)), &a)
        })
    } else {
        None
    };
    let n_c = zeta.n_c();
    let k_count = eng.slots.len();

    let mut v0 = zeta.open_open();
    if let Some(nz) = &noise {
        v0[(0, 0)] += nz.open_open().trace();
    }
    let lk: Vec<DMatrix<f64>> = (0..k_count)
        .into_par_iter()
        .map(|s| {
            let mut l = match zeta.slot_open(s) {
                Some(x) => &x + x.transpose(),
                None => DMatrix::zeros(n_c, n_c),
            };
            if let Some(nz) = &noise {
                if let Some(x) = nz.slot_open(s) {
                    l[(0, 0)] += 2.0 * x.trace();
                }
            }
            l
        })
        .collect();

    let pair = |k: usize, l: usize| -> Option<DMatrix<f64>> {
        let mut b = zeta.slot_slot(k, l);
        if let Some(nz) = &noise {
            if let Some(x) = nz.slot_slot(k, l) {
                let tr = x.trace();
                let blk = b.get_or_insert_with(|| DMatrix::zeros(n_c, n_c));
                blk[(0, 0)] += tr;
            }
        }
        b
    };

    // diagonal pass decides which (k, c) indices are structurally active
    let diag: Vec<Option<DMatrix<f64>>> = (0..k_count).into_par_iter().map(|k| pair(k, k)).collect();
    let max_diag = diag
        .iter()
        .flatten()
        .flat_map(|b| (0..n_c).map(move |c| b[(c, c)]))
        .fold(0.0, f64::max);
    let cut = 1e-14 * max_diag.max(1.0);
    let mut active = Vec::new();
    let mut active_slots = Vec::new();
    for (k, b) in diag.iter().enumerate() {
        let Some(b) = b else { continue };
        let before = active.len();
        for c in 0..n_c {
            if b[(c, c)] > cut {
                active.push(k * n_c + c);
            }
        }
        if active.len() > before {
            active_slots.push(k);
        }
    }
    let pos: std::collections::HashMap<usize, usize> = active.iter().enumerate().map(|(i, &x)| (x, i)).collect();
    let rows: Vec<Vec<(usize, DMatrix<f64>)>> = active_slots
        .par_iter()
        .enumerate()
        .map(|(i, &k)| {
            active_slots[i..]
                .iter()
                .filter_map(|&l| {
                    if l == k {
                        diag[k].clone().map(|b| (l, b))
                    } else {
                        pair(k, l).map(|b| (l, b))
                    }
                })
                .collect()
        })
        .collect();
    let na = active.len();
    let mut gram = DMatrix::zeros(na, na);
    for (i, row) in rows.into_iter().enumerate() {
        let k = active_slots[i];
        for (l, blk) in row {
            for c in 0..n_c {
                let Some(&p) = pos.get(&(k * n_c + c)) else { continue };
                for c2 in 0..n_c {
                    let Some(&q) = pos.get(&(l * n_c + c2)) else { continue };
                    gram[(p, q)] = blk[(c, c2)];
                    gram[(q, p)] = blk[(c, c2)];
                }
            }
        }
    }
    let factor = gram_factor(&gram, opts.gram_rel_tol);
    Ok(QuadraticFormV {
        n_c,
        v0: crate::linalg::symmetrize(&v0),
        lk: lk.into_iter().map(|l| crate::linalg::symmetrize(&l)).collect(),
        active,
        gram,
        factor,
    })
}

fn nonzero_columns(m: &DMatrix<f64>) -> Vec<usize> {
    let scale = m.amax().max(1e-300);
    (0..m.ncols())
        .filter(|&c| m.column(c).amax() > 1e-14 * scale)
        .collect()
}

/// Reference assembly by explicit path enumeration through the stacked trajectory maps.
/// Exponential in N; intended for cross-validation on small instances.
pub fn assemble_v_enumerated(
    model: &MjlsModel,
    layout: &PolicyLayout,
    spec: &SpecQuadratic,
    include_noise_trace: bool,
    limit: usize,
) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>, DMatrix<f64>)> {
    let d = model.dims();
    let a = crate::linalg::symmetrize(&spec.a);
    let paths = enumerate_paths(d.modes, d.horizon, limit)?;
    let k_count = layout.dim();
    let n_c = 1 + model.n_zeta();
    let sig = model.sigma_eps();
    let mut v0 = DMatrix::zeros(n_c, n_c);
    let mut lk = vec![DMatrix::zeros(n_c, n_c); k_count];
    let mut gram = DMatrix::zeros(k_count * n_c, k_count * n_c);
    for p in &paths {
        let prob = path_probability(model.chain(), p);
        if prob == 0.0 {
            continue;
        }
        let zero = Policy::zeros(layout.clone(), Basis::Purified);
        let base = trajectory_affine_maps(model, &zero, p)?;
        let g = base.extended();
        let gs = base.eps_map.clone();
        let mut dk = Vec::with_capacity(k_count);
        let mut dsk = Vec::with_capacity(k_count);
        for k in 0..k_count {
            let mut unit = zero.clone();
            unit.as_vec_mut()[k] = 1.0;
            let maps = trajectory_affine_maps(model, &unit, p)?;
            dk.push(maps.extended() - &g);
            dsk.push(&maps.eps_map - &gs);
        }
        v0 += g.tr_mul(&(&a * &g)) * prob;
        if include_noise_trace {
            v0[(0, 0)] += (gs.tr_mul(&(&a * &gs)) * &sig).trace() * prob;
        }
        for k in 0..k_count {
            let x = dk[k].tr_mul(&(&a * &g));
            lk[k] += (&x + x.transpose()) * prob;
            if include_noise_trace {
                lk[k][(0, 0)] += 2.0 * (dsk[k].tr_mul(&(&a * &gs)) * &sig).trace() * prob;
            }
            for l in 0..k_count {
                let blk = dk[k].tr_mul(&(&a * &dk[l])) * prob;
                let mut view = gram.view_mut((k * n_c, l * n_c), (n_c, n_c));
                view += blk;
                if include_noise_trace {
                    gram[(k * n_c, l * n_c)] += (dsk[k].tr_mul(&(&a * &dsk[l])) * &sig).trace() * prob;
                }
            }
        }
    }
    Ok((v0, lk, gram))
}

/// Reference mean map by enumeration.
pub fn assemble_m_enumerated(model: &MjlsModel, layout: &PolicyLayout, limit: usize) -> Result<AffineMapM> {
    let d = model.dims();
    let paths = enumerate_paths(d.modes, d.horizon, limit)?;
    let zero = Policy::zeros(layout.clone(), Basis::Purified);
    let n_c = 1 + model.n_zeta();
    let mut m0 = DMatrix::zeros(d.n_w(), n_c);
    let mut mk = vec![DMatrix::zeros(d.n_w(), n_c); layout.dim()];
    for p in &paths {
        let prob = path_probability(model.chain(), p);
        let g = trajectory_affine_maps(model, &zero, p)?.extended();
        m0 += &g * prob;
        for (k, mkk) in mk.iter_mut().enumerate() {
            let mut unit = zero.clone();
            unit.as_vec_mut()[k] = 1.0;
            *mkk += (trajectory_affine_maps(model, &unit, p)?.extended() - &g) * prob;
        }
    }
    Ok(AffineMapM { m0, mk })
}

/// Expand a [`QuadraticFormV`] Gram over active indices to the full (K·n_c)² matrix.
pub fn full_gram(v: &QuadraticFormV, k_count: usize) -> DMatrix<f64> {
    let n = k_count * v.n_c;
    let mut g = DMatrix::zeros(n, n);
    for (i, &p) in v.active.iter().enumerate() {
        for (j, &q) in v.active.iter().enumerate() {
            g[(p, q)] = v.gram[(i, j)];
        }
    }
    g
}
