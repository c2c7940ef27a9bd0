//! JSON file formats for models, specifications, policies and reports.
//!
//! Matrices are arrays of rows. Modes in policy histories are 1-based.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::model::{window_from_index, Basis, Dims, Ellitope, MarkovChain, MjlsModel, ModeMatrices, Policy, PolicyLayout};
use crate::synthesis::{AvgQuadSpec, CovSpec, MeanQuadSpec, Objective, SpecSet, SynthesisOutcome};

pub type Rows = Vec<Vec<f64>>;

pub fn matrix_from_rows(what: &str, rows: &Rows, r: usize, c: usize) -> Result<DMatrix<f64>> {
    if rows.len() != r {
        return Err(dim_err(&format!("{what} rows"), r, rows.len()));
    }
    for row in rows {
        if row.len() != c {
            return Err(dim_err(&format!("{what} columns"), c, row.len()));
        }
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Square matrix whose size is read from the data.
fn square_from_rows(what: &str, rows: &Rows) -> Result<DMatrix<f64>> {
    matrix_from_rows(what, rows, rows.len(), rows.len())
}

pub fn rows_of(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}

fn vector(what: &str, v: &[f64], n: usize) -> Result<DVector<f64>> {
    if v.len() != n {
        return Err(dim_err(what, n, v.len()));
    }
    Ok(DVector::from_column_slice(v))
}

fn parse<T: for<'de> Deserialize<'de>>(text: &str, source: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        source_name: source.to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    std::fs::write(path, text + "\n")
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

// ---------------------------------------------------------------- model

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeMatricesFile {
    #[serde(rename = "A")]
    pub a: Rows,
    #[serde(rename = "B")]
    pub b: Rows,
    #[serde(rename = "Bd", default, skip_serializing_if = "Option::is_none")]
    pub bd: Option<Rows>,
    #[serde(rename = "Bs", default, skip_serializing_if = "Option::is_none")]
    pub bs: Option<Rows>,
    #[serde(rename = "C")]
    pub c: Rows,
    #[serde(rename = "Dd", default, skip_serializing_if = "Option::is_none")]
    pub dd: Option<Rows>,
    #[serde(rename = "Ds", default, skip_serializing_if = "Option::is_none")]
    pub ds: Option<Rows>,
}

/// Per time and mode, or per mode for time-invariant models.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatricesFile {
    TimeVarying(Vec<Vec<ModeMatricesFile>>),
    TimeInvariant(Vec<ModeMatricesFile>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub horizon: usize,
    pub nx: usize,
    pub nu: usize,
    pub nd: usize,
    #[serde(default)]
    pub ne: usize,
    pub ny: usize,
    pub modes: usize,
    pub pi: Vec<f64>,
    /// Column-stochastic: P[next][current].
    #[serde(rename = "P")]
    pub p: Rows,
    #[serde(rename = "Sigma0", default, skip_serializing_if = "Option::is_none")]
    pub sigma0: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0_known: Option<Vec<f64>>,
    pub matrices: MatricesFile,
}

fn optional(what: &str, m: &Option<Rows>, r: usize, c: usize) -> Result<DMatrix<f64>> {
    match m {
        Some(rows) if !(rows.is_empty() && r == 0) => matrix_from_rows(what, rows, r, c),
        _ => Ok(DMatrix::zeros(r, c)),
    }
}

impl ModeMatricesFile {
    fn to_matrices(&self, d: &Dims, t: usize, k: usize) -> Result<ModeMatrices> {
        let w = |name: &str| format!("{name}[t={t}, mode={}]", k + 1);
        Ok(ModeMatrices {
            a: matrix_from_rows(&w("A"), &self.a, d.nx, d.nx)?,
            b: matrix_from_rows(&w("B"), &self.b, d.nx, d.nu)?,
            bd: optional(&w("Bd"), &self.bd, d.nx, d.nd)?,
            bs: optional(&w("Bs"), &self.bs, d.nx, d.ne)?,
            c: matrix_from_rows(&w("C"), &self.c, d.ny, d.nx)?,
            dd: optional(&w("Dd"), &self.dd, d.ny, d.nd)?,
            ds: optional(&w("Ds"), &self.ds, d.ny, d.ne)?,
        })
    }

    fn from_matrices(m: &ModeMatrices) -> Self {
        ModeMatricesFile {
            a: rows_of(&m.a),
            b: rows_of(&m.b),
            bd: Some(rows_of(&m.bd)),
            bs: Some(rows_of(&m.bs)),
            c: rows_of(&m.c),
            dd: Some(rows_of(&m.dd)),
            ds: Some(rows_of(&m.ds)),
        }
    }
}

impl ModelFile {
    pub fn to_model(&self) -> Result<MjlsModel> {
        let d = Dims {
            horizon: self.horizon,
            nx: self.nx,
            nu: self.nu,
            nd: self.nd,
            ne: self.ne,
            ny: self.ny,
            modes: self.modes,
        };
        let chain = MarkovChain::new(
            vector("pi", &self.pi, self.modes)?,
            matrix_from_rows("P", &self.p, self.modes, self.modes)?,
        )?;
        let sigma0 = optional("Sigma0", &self.sigma0, d.nx, d.nx)?;
        let mats = match &self.matrices {
            MatricesFile::TimeVarying(per_t) => {
                if per_t.len() != d.horizon {
                    return Err(dim_err("matrices per time", d.horizon, per_t.len()));
                }
                per_t
                    .iter()
                    .enumerate()
                    .map(|(t, row)| {
                        if row.len() != d.modes {
                            return Err(dim_err(&format!("matrices at t={t}"), d.modes, row.len()));
                        }
                        row.iter().enumerate().map(|(k, m)| m.to_matrices(&d, t, k)).collect()
                    })
                    .collect::<Result<Vec<Vec<_>>>>()?
            }
            MatricesFile::TimeInvariant(per_mode) => {
                if per_mode.len() != d.modes {
                    return Err(dim_err("matrices per mode", d.modes, per_mode.len()));
                }
                let row: Vec<ModeMatrices> = per_mode
                    .iter()
                    .enumerate()
                    .map(|(k, m)| m.to_matrices(&d, 0, k))
                    .collect::<Result<_>>()?;
                vec![row; d.horizon]
            }
        };
        let x0 = match &self.x0_known {
            Some(v) => Some(vector("x0_known", v, d.nx)?),
            None => None,
        };
        MjlsModel::new(d, chain, sigma0, mats, x0)
    }

    pub fn from_model(model: &MjlsModel) -> Self {
        let d = model.dims();
        ModelFile {
            horizon: d.horizon,
            nx: d.nx,
            nu: d.nu,
            nd: d.nd,
            ne: d.ne,
            ny: d.ny,
            modes: d.modes,
            pi: model.chain().pi().iter().cloned().collect(),
            p: rows_of(model.chain().p()),
            sigma0: Some(rows_of(model.sigma0())),
            x0_known: model.x0_known().map(|v| v.iter().cloned().collect()),
            matrices: MatricesFile::TimeVarying(
                model
                    .all_mats()
                    .iter()
                    .map(|row| row.iter().map(ModeMatricesFile::from_matrices).collect())
                    .collect(),
            ),
        }
    }
}

pub fn parse_model(text: &str, source: &str) -> Result<MjlsModel> {
    parse::<ModelFile>(text, source)?.to_model()
}

pub fn load_model(path: &Path) -> Result<MjlsModel> {
    parse_model(&read(path)?, &path.display().to_string())
}

pub fn save_model(path: &Path, model: &MjlsModel) -> Result<()> {
    write_json(path, &ModelFile::from_model(model))
}

// ---------------------------------------------------------------- specs

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadSpecFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(rename = "A")]
    pub a: Rows,
    pub beta: Vec<f64>,
    /// `null` makes the level a decision variable.
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovSpecFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(rename = "Q")]
    pub q: Rows,
    #[serde(rename = "Sigma_tilde")]
    pub sigma_tilde: Rows,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllitopeFile {
    #[serde(rename = "Qs")]
    pub qs: Vec<Rows>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveFile {
    #[serde(default)]
    pub gamma_weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chi_weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecFile {
    #[serde(default)]
    pub avg_quad: Vec<QuadSpecFile>,
    #[serde(default)]
    pub mean_quad: Vec<QuadSpecFile>,
    #[serde(default)]
    pub cov_bound: Vec<CovSpecFile>,
    pub ellitope: EllitopeFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<ObjectiveFile>,
}

impl SpecFile {
    /// Shapes are checked against the model during synthesis.
    pub fn to_specs(&self) -> Result<SpecSet> {
        let quad = |prefix: &str, i: usize, s: &QuadSpecFile| -> Result<(String, DMatrix<f64>, DVector<f64>)> {
            let label = s.label.clone().unwrap_or_else(|| format!("{prefix}{i}"));
            let a = square_from_rows(&label, &s.a)?;
            let beta = vector(&format!("{label} beta"), &s.beta, a.nrows())?;
            Ok((label, a, beta))
        };
        let avg_quad = self
            .avg_quad
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let (label, a, beta) = quad("avg_quad", i, s)?;
                Ok(AvgQuadSpec {
                    label,
                    a,
                    beta,
                    gamma: s.gamma,
                })
            })
            .collect::<Result<_>>()?;
        let mean_quad = self
            .mean_quad
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let (label, a, beta) = quad("mean_quad", i, s)?;
                Ok(MeanQuadSpec {
                    label,
                    a,
                    beta,
                    gamma: s.gamma,
                })
            })
            .collect::<Result<_>>()?;
        let cov = self
            .cov_bound
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let label = s.label.clone().unwrap_or_else(|| format!("cov_bound{i}"));
                let rows = s.q.len();
                let cols = s.q.first().map_or(0, |r| r.len());
                Ok(CovSpec {
                    q: matrix_from_rows(&format!("{label} Q"), &s.q, rows, cols)?,
                    sigma_tilde: matrix_from_rows(&format!("{label} Sigma_tilde"), &s.sigma_tilde, rows, rows)?,
                    label,
                })
            })
            .collect::<Result<_>>()?;
        let qs = self
            .ellitope
            .qs
            .iter()
            .enumerate()
            .map(|(i, q)| square_from_rows(&format!("ellitope Q{i}"), q))
            .collect::<Result<Vec<_>>>()?;
        let objective = self.objective.as_ref().map(|o| Objective {
            gamma_weights: o.gamma_weights.clone(),
            chi_weights: o.chi_weights.as_ref().map(|w| DVector::from_column_slice(w)),
        });
        Ok(SpecSet {
            avg_quad,
            mean_quad,
            cov,
            ellitope: Ellitope::new(qs)?,
            objective,
        })
    }

    pub fn from_specs(s: &SpecSet) -> Self {
        let quad = |label: &str, a: &DMatrix<f64>, beta: &DVector<f64>, gamma: Option<f64>| QuadSpecFile {
            label: Some(label.to_string()),
            a: rows_of(a),
            beta: beta.iter().cloned().collect(),
            gamma,
        };
        SpecFile {
            avg_quad: s.avg_quad.iter().map(|q| quad(&q.label, &q.a, &q.beta, q.gamma)).collect(),
            mean_quad: s.mean_quad.iter().map(|q| quad(&q.label, &q.a, &q.beta, q.gamma)).collect(),
            cov_bound: s
                .cov
                .iter()
                .map(|c| CovSpecFile {
                    label: Some(c.label.clone()),
                    q: rows_of(&c.q),
                    sigma_tilde: rows_of(&c.sigma_tilde),
                })
                .collect(),
            ellitope: EllitopeFile {
                qs: s.ellitope.qs().iter().map(rows_of).collect(),
            },
            objective: s.objective.as_ref().map(|o| ObjectiveFile {
                gamma_weights: o.gamma_weights.clone(),
                chi_weights: o.chi_weights.as_ref().map(|w| w.iter().cloned().collect()),
            }),
        }
    }
}

pub fn parse_specs(text: &str, source: &str) -> Result<SpecSet> {
    parse::<SpecFile>(text, source)?.to_specs()
}

pub fn load_specs(path: &Path) -> Result<SpecSet> {
    parse_specs(&read(path)?, &path.display().to_string())
}

pub fn save_specs(path: &Path, specs: &SpecSet) -> Result<()> {
    write_json(path, &SpecFile::from_specs(specs))
}

// ---------------------------------------------------------------- policy

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisTag {
    Purified,
    Outputs,
}

/// One (t, history) group of a policy table; `hist` lists 1-based modes, oldest first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyEntryFile {
    pub t: usize,
    pub hist: Vec<usize>,
    #[serde(default)]
    pub h: Vec<f64>,
    #[serde(rename = "H", default)]
    pub gains: Vec<Rows>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyFile {
    pub basis: BasisTag,
    pub horizon: usize,
    pub memory: usize,
    pub modes: usize,
    pub nu: usize,
    pub ny: usize,
    /// Flat parameter vector. When present it takes precedence over `table`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chi: Option<Vec<f64>>,
    /// Groups missing from the table are zero.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub table: Vec<PolicyEntryFile>,
}

impl PolicyFile {
    pub fn to_policy(&self) -> Result<Policy> {
        let layout = PolicyLayout::new(self.horizon, self.memory, self.modes, self.nu, self.ny)?;
        let basis = match self.basis {
            BasisTag::Purified => Basis::Purified,
            BasisTag::Outputs => Basis::Outputs,
        };
        if let Some(chi) = &self.chi {
            return Policy::from_vec(layout, basis, DVector::from_column_slice(chi));
        }
        let mut policy = Policy::zeros(layout.clone(), basis);
        for e in &self.table {
            if e.t >= layout.horizon {
                return Err(dim_err("policy table time index", format!("< {}", layout.horizon), e.t));
            }
            let len = crate::model::window_len(e.t, layout.memory);
            if e.hist.len() != len || e.hist.iter().any(|&k| k == 0 || k > layout.modes) {
                return Err(Error::Invalid(format!(
                    "policy table entry at t = {}: hist must list {len} modes in 1..={}",
                    e.t, layout.modes
                )));
            }
            let window: Vec<usize> = e.hist.iter().map(|k| k - 1).collect();
            let key = crate::model::window_index(&window, layout.modes);
            if !e.h.is_empty() {
                if e.h.len() != layout.nu {
                    return Err(dim_err("policy offset h", layout.nu, e.h.len()));
                }
                policy.set_offset(e.t, key, &DVector::from_column_slice(&e.h));
            }
            if e.gains.len() > e.t + 1 {
                return Err(dim_err("policy gain count", format!("<= {}", e.t + 1), e.gains.len()));
            }
            for (j, g) in e.gains.iter().enumerate() {
                let g = matrix_from_rows("policy gain H", g, layout.nu, layout.ny)?;
                policy.set_gain(e.t, j, key, &g);
            }
        }
        Ok(policy)
    }

    pub fn from_policy(p: &Policy) -> Self {
        let l = p.layout();
        let mut table = Vec::new();
        for t in 0..l.horizon {
            let len = crate::model::window_len(t, l.memory);
            for key in 0..l.keys_at(t) {
                table.push(PolicyEntryFile {
                    t,
                    hist: window_from_index(key, len, l.modes).iter().map(|k| k + 1).collect(),
                    h: p.offset(t, key).iter().cloned().collect(),
                    gains: (0..=t).map(|j| rows_of(&p.gain(t, j, key))).collect(),
                });
            }
        }
        PolicyFile {
            basis: match p.basis() {
                Basis::Purified => BasisTag::Purified,
                Basis::Outputs => BasisTag::Outputs,
            },
            horizon: l.horizon,
            memory: l.memory,
            modes: l.modes,
            nu: l.nu,
            ny: l.ny,
            chi: Some(p.as_vec().iter().cloned().collect()),
            table,
        }
    }
}

pub fn parse_policy(text: &str, source: &str) -> Result<Policy> {
    parse::<PolicyFile>(text, source)?.to_policy()
}

pub fn load_policy(path: &Path) -> Result<Policy> {
    parse_policy(&read(path)?, &path.display().to_string())
}

pub fn save_policy(path: &Path, policy: &Policy) -> Result<()> {
    write_json(path, &PolicyFile::from_policy(policy))
}

// ---------------------------------------------------------------- reports

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticalReport {
    pub label: String,
    pub gamma: f64,
    pub psi: f64,
    pub gamma_minus: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverReport {
    pub status: String,
    pub iters: u32,
    pub objective: f64,
    pub dual_objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub max_psd_violation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChecksReport {
    pub factor_error: f64,
    pub gram_ranks: Vec<usize>,
    pub num_vars: usize,
    pub num_policy_params: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub status: String,
    pub gamma_minus: Vec<CriticalReport>,
    /// Level used or optimized per quadratic specification.
    pub gammas: Vec<(String, f64)>,
    pub chi_source: String,
    pub chi: Vec<f64>,
    pub solver: SolverReport,
    pub checks: ChecksReport,
}

fn snake<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

impl SynthesisReport {
    pub fn new(out: &SynthesisOutcome) -> Self {
        SynthesisReport {
            status: snake(&out.status),
            gamma_minus: out
                .critical
                .iter()
                .map(|c| CriticalReport {
                    label: c.label.clone(),
                    gamma: c.gamma,
                    psi: c.psi,
                    gamma_minus: c.gamma_minus,
                })
                .collect(),
            gammas: out.gammas.clone(),
            chi_source: snake(&out.chi_source),
            chi: out.chi.iter().cloned().collect(),
            solver: SolverReport {
                status: out.solver.raw_status.clone(),
                iters: out.solver.iterations,
                objective: out.solver.objective,
                dual_objective: out.solver.dual_objective,
                primal_residual: out.solver.primal_residual,
                dual_residual: out.solver.dual_residual,
                max_psd_violation: out.solver.max_psd_violation,
            },
            checks: ChecksReport {
                factor_error: out.factor_error,
                gram_ranks: out.gram_ranks.clone(),
                num_vars: out.num_vars,
                num_policy_params: out.chi.len(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_error_carries_position() {
        let err = parse_model("{\n  \"horizon\": 2,\n  \"nx\": ]\n}", "m.json").unwrap_err();
        match err {
            Error::Parse { line, column, .. } => {
                assert_eq!(line, 3);
                assert!(column > 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
