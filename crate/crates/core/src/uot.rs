//! Covariance fitting regularised by unbalanced optimal transport toward the
//! camera prior.
//!
//! With the row marginal tied to the power map (`P 1 = b`) and a quadratic
//! penalty on the column marginal, the fused problem is a nonnegative
//! quadratic program in the plan `P` alone:
//!
//! ```text
//! F(P) = |G diag(P 1) G^H - S|_F^2 + lambda <C, P> + mu/2 |a - P^T 1|^2
//! ```
//!
//! Its partial derivative along `(m, n)` is
//! `2 d_m + lambda C[m][n] - mu (a_n - c_n)` with `c = P^T 1`, and the
//! curvature along that coordinate is `2 |g_m|^4 + mu`, so every coordinate
//! has a closed-form clamped Newton step. The solver starts from `P = 0` and
//! repeatedly applies the single step with the largest decrease.

use std::time::Instant;

use crate::camera::{CostMatrix, DetectionPrior};
use crate::cmf::{
    argmax_scan, clamped_newton_step, cmf_objective, relative_drift, CmfWorkspace, PowerMap, DEFAULT_DENSE_GRAM_CAP,
    DEFAULT_REFRESH_EVERY, DEFAULT_REL_TOL,
};
use crate::error::{Error, Result};
use crate::scene::TransferMatrix;
use crate::signalsim::CovarianceMatrix;
use crate::trace::{SolveTrace, TraceRecord};

pub const DEFAULT_LAMBDA: f64 = 2e2;
pub const DEFAULT_MU: f64 = 5e-4;

/// Sparse nonnegative plan with cached marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    rows: usize,
    cols: usize,
    /// `(m, n, value)` sorted by `(m, n)`, all values > 0.
    entries: Vec<(usize, usize, f64)>,
    row_sums: Vec<f64>,
    col_sums: Vec<f64>,
}

impl TransportPlan {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, entries: Vec::new(), row_sums: vec![0.0; rows], col_sums: vec![0.0; cols] }
    }

    pub fn from_entries(rows: usize, cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        entries.retain(|e| e.2 != 0.0);
        if let Some(e) = entries.iter().find(|e| e.0 >= rows || e.1 >= cols || !(e.2 > 0.0) || !e.2.is_finite()) {
            return Err(Error::InvalidInput(format!("invalid plan entry {e:?}")));
        }
        entries.sort_by_key(|e| (e.0, e.1));
        if entries.windows(2).any(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return Err(Error::InvalidInput("duplicate plan entry".into()));
        }
        let mut row_sums = vec![0.0; rows];
        let mut col_sums = vec![0.0; cols];
        for &(m, n, v) in &entries {
            row_sums[m] += v;
            col_sums[n] += v;
        }
        Ok(Self { rows, cols, entries, row_sums, col_sums })
    }

    /// Plan from a dense row-major buffer.
    pub fn from_dense(rows: usize, cols: usize, dense: &[f64]) -> Result<Self> {
        let entries =
            dense.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(k, &v)| (k / cols, k % cols, v)).collect();
        Self::from_entries(rows, cols, entries)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    /// `P 1_N`, the power map.
    pub fn row_sums(&self) -> &[f64] {
        &self.row_sums
    }

    /// `P^T 1_M`, the mass attributed to each detection.
    pub fn col_sums(&self) -> &[f64] {
        &self.col_sums
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for &(m, n, v) in &self.entries {
            out[m * self.cols + n] = v;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    /// Weight of the transport term.
    pub lambda: f64,
    /// Weight of the column-marginal penalty (`lambda * beta`).
    pub mu: f64,
    /// Coordinate updates allowed.
    pub max_iters: usize,
    /// Absolute improvement threshold; `None` means `1e-10 |S|_F^2`.
    pub tol: Option<f64>,
    pub refresh_every: usize,
    pub dense_gram_cap: usize,
    pub trace: bool,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            mu: DEFAULT_MU,
            max_iters: 100_000,
            tol: None,
            refresh_every: DEFAULT_REFRESH_EVERY,
            dense_gram_cap: DEFAULT_DENSE_GRAM_CAP,
            trace: false,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "lambda and mu must be finite and nonnegative, got {} and {}",
                self.lambda, self.mu
            )));
        }
        if let Some(t) = self.tol {
            if !(t >= 0.0) {
                return Err(Error::InvalidInput(format!("tolerance must be nonnegative, got {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveParts {
    pub total: f64,
    pub fit: f64,
    pub transport: f64,
    pub mass: f64,
}

fn mass_term(weights: &[f64], col_sums: &[f64], mu: f64) -> f64 {
    0.5 * mu * weights.iter().zip(col_sums).map(|(a, c)| (a - c) * (a - c)).sum::<f64>()
}

fn check_dims(g: &TransferMatrix, sigma: &CovarianceMatrix, cost: &CostMatrix, weights: &[f64]) -> Result<()> {
    if sigma.dim() != g.sensors() {
        return Err(Error::DimensionMismatch("covariance and transfer matrix disagree".into()));
    }
    if cost.rows() != g.points() || cost.cols() != weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "cost matrix is {}x{}, expected {}x{}",
            cost.rows(),
            cost.cols(),
            g.points(),
            weights.len()
        )));
    }
    Ok(())
}

pub fn fused_objective(
    g: &TransferMatrix,
    sigma: &CovarianceMatrix,
    cost: &CostMatrix,
    weights: &[f64],
    plan: &TransportPlan,
    lambda: f64,
    mu: f64,
) -> Result<ObjectiveParts> {
    check_dims(g, sigma, cost, weights)?;
    if plan.rows() != g.points() || plan.cols() != weights.len() {
        return Err(Error::DimensionMismatch("plan shape disagrees with the cost matrix".into()));
    }
    let fit = cmf_objective(g, plan.row_sums(), sigma)?;
    let transport = lambda * plan.entries().iter().map(|&(m, n, v)| cost.get(m, n) * v).sum::<f64>();
    let mass = mass_term(weights, plan.col_sums(), mu);
    Ok(ObjectiveParts { total: fit + transport + mass, fit, transport, mass })
}

/// Mutable solver state: the fit workspace plus a dense copy of the plan.
#[derive(Debug, Clone)]
pub struct UotWorkspace<'a> {
    cmf: CmfWorkspace<'a>,
    cost: &'a CostMatrix,
    weights: Vec<f64>,
    lambda: f64,
    mu: f64,
    plan: Vec<f64>,
    col_sums: Vec<f64>,
    transport: f64,
}

impl<'a> UotWorkspace<'a> {
    pub fn new(
        g: &'a TransferMatrix,
        sigma: &'a CovarianceMatrix,
        cost: &'a CostMatrix,
        weights: &[f64],
        lambda: f64,
        mu: f64,
        dense_gram_cap: usize,
    ) -> Result<Self> {
        if weights.is_empty() || cost.cols() == 0 {
            return Err(Error::EmptyPrior);
        }
        check_dims(g, sigma, cost, weights)?;
        let cmf = CmfWorkspace::new(g, sigma, dense_gram_cap)?;
        let (m, n) = (cost.rows(), cost.cols());
        Ok(Self {
            cmf,
            cost,
            weights: weights.to_vec(),
            lambda,
            mu,
            plan: vec![0.0; m * n],
            col_sums: vec![0.0; n],
            transport: 0.0,
        })
    }

    /// Loads an arbitrary plan (used to probe the objective away from zero).
    pub fn set_plan(&mut self, plan: &TransportPlan) -> Result<()> {
        if plan.rows() != self.cost.rows() || plan.cols() != self.cost.cols() {
            return Err(Error::DimensionMismatch("plan shape disagrees with the cost matrix".into()));
        }
        self.plan = plan.to_dense();
        self.col_sums = plan.col_sums().to_vec();
        self.transport = self.lambda * plan.entries().iter().map(|&(m, n, v)| self.cost.get(m, n) * v).sum::<f64>();
        self.cmf.set_powers(plan.row_sums())
    }

    pub fn rows(&self) -> usize {
        self.cost.rows()
    }

    pub fn cols(&self) -> usize {
        self.cost.cols()
    }

    pub fn entry(&self, m: usize, n: usize) -> f64 {
        self.plan[m * self.cols() + n]
    }

    pub fn fit_workspace(&self) -> &CmfWorkspace<'a> {
        &self.cmf
    }

    pub fn col_sums(&self) -> &[f64] {
        &self.col_sums
    }

    pub fn parts(&self) -> ObjectiveParts {
        let fit = self.cmf.fit();
        let mass = mass_term(&self.weights, &self.col_sums, self.mu);
        ObjectiveParts { total: fit + self.transport + mass, fit, transport: self.transport, mass }
    }

    pub fn curvature(&self, m: usize) -> f64 {
        2.0 * self.cmf.transfer().norm_quad()[m] + self.mu
    }

    pub fn plan(&self) -> Result<TransportPlan> {
        TransportPlan::from_dense(self.rows(), self.cols(), &self.plan)
    }

    fn apply(&mut self, m: usize, n: usize, delta: f64) {
        let k = m * self.cols() + n;
        let next = self.plan[k] + delta;
        self.plan[k] = if next > 0.0 { next } else { 0.0 };
        self.col_sums[n] += delta;
        self.transport += self.lambda * self.cost.get(m, n) * delta;
        self.cmf.apply(m, delta);
    }
}

/// `dF/dP[m][n]` at the workspace's current plan.
pub fn coordinate_gradient(m: usize, n: usize, ws: &UotWorkspace<'_>) -> f64 {
    2.0 * ws.cmf.coupling()[m] + ws.lambda * ws.cost.get(m, n) - ws.mu * (ws.weights[n] - ws.col_sums[n])
}

/// Optimal feasible move along `(m, n)` and the decrease it yields.
pub fn coordinate_step(m: usize, n: usize, ws: &UotWorkspace<'_>) -> (f64, f64) {
    let h = ws.curvature(m);
    if !(h > 0.0) {
        return (0.0, 0.0);
    }
    clamped_newton_step(ws.entry(m, n), coordinate_gradient(m, n, ws), h)
}

#[derive(Debug, Clone)]
pub struct UotResult {
    pub plan: TransportPlan,
    /// Row sums of the plan.
    pub power: PowerMap,
    /// Objective recomputed from the returned plan.
    pub objective: ObjectiveParts,
    pub iterations: usize,
    pub converged: bool,
    /// Largest relative mismatch between incremental and recomputed state
    /// (`d`, `b`, `c`, objective) seen at the periodic checks.
    pub max_drift: f64,
    pub trace: Option<SolveTrace>,
    pub seconds: f64,
}

/// Greedy maximal-improvement coordinate descent on the fused objective.
pub fn solve_cmf_uot(
    g: &TransferMatrix,
    sigma: &CovarianceMatrix,
    cost: &CostMatrix,
    prior: &DetectionPrior,
    params: &FusionParams,
) -> Result<UotResult> {
    solve_cmf_uot_weighted(g, sigma, cost, prior.weights(), params)
}

/// As [`solve_cmf_uot`] with explicit column weights `a`.
pub fn solve_cmf_uot_weighted(
    g: &TransferMatrix,
    sigma: &CovarianceMatrix,
    cost: &CostMatrix,
    weights: &[f64],
    params: &FusionParams,
) -> Result<UotResult> {
    params.validate()?;
    let start = Instant::now();
    let mut ws = UotWorkspace::new(g, sigma, cost, weights, params.lambda, params.mu, params.dense_gram_cap)?;
    let tol = params.tol.unwrap_or(DEFAULT_REL_TOL * sigma.frobenius_sq());
    let (rows, cols) = (ws.rows(), ws.cols());
    let quad = g.norm_quad();

    let mut objective = ws.parts().total;
    let mut trace = params.trace.then(SolveTrace::default);
    let push = |trace: &mut Option<SolveTrace>, ws: &UotWorkspace<'_>, iteration, m, n, delta, objective| {
        if let Some(t) = trace {
            let p = ws.parts();
            t.records.push(TraceRecord {
                iteration,
                m,
                n,
                delta,
                objective,
                fit: p.fit,
                transport: p.transport,
                mass: p.mass,
            });
        }
    };
    push(&mut trace, &ws, 0, 0, 0, 0.0, objective);

    let mut iterations = 0;
    let mut converged = false;
    let mut max_drift = 0.0f64;
    let mut shift = vec![0.0; cols];
    while iterations < params.max_iters {
        for n in 0..cols {
            shift[n] = -params.mu * (ws.weights[n] - ws.col_sums[n]);
        }
        let d = ws.cmf.coupling();
        let best = argmax_scan(rows, cols, |m| {
            let h = 2.0 * quad[m] + params.mu;
            if !(h > 0.0) {
                return None;
            }
            let base = 2.0 * d[m];
            let row = cost.row(m);
            let plan_row = &ws.plan[m * cols..(m + 1) * cols];
            let mut best: Option<(f64, usize)> = None;
            for n in 0..cols {
                let grad = base + params.lambda * row[n] + shift[n];
                let (_, gain) = clamped_newton_step(plan_row[n], grad, h);
                if best.is_none_or(|(b, _)| gain > b) {
                    best = Some((gain, m * cols + n));
                }
            }
            best
        });
        let Some((gain, flat)) = best.filter(|(gain, _)| *gain > tol) else {
            converged = true;
            break;
        };
        let (m, n) = (flat / cols, flat % cols);
        let (delta, _) = coordinate_step(m, n, &ws);
        ws.apply(m, n, delta);
        objective -= gain;
        iterations += 1;
        push(&mut trace, &ws, iterations, m, n, delta, objective);

        if params.refresh_every > 0 && iterations % params.refresh_every == 0 {
            max_drift = max_drift.max(check_and_resync(&mut ws, objective)?);
        }
    }

    let plan = ws.plan()?;
    let objective = fused_objective(g, sigma, cost, weights, &plan, params.lambda, params.mu)?;
    Ok(UotResult {
        power: PowerMap::new(plan.row_sums().to_vec())?,
        plan,
        objective,
        iterations,
        converged,
        max_drift,
        trace,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Compares incremental state against a recomputation from the plan and
/// resynchronises `d`. Returns the worst relative mismatch.
fn check_and_resync(ws: &mut UotWorkspace<'_>, objective: f64) -> Result<f64> {
    let plan = ws.plan()?;
    let b_drift = relative_drift(ws.cmf.powers(), plan.row_sums(), &[]);
    let c_drift = relative_drift(&ws.col_sums, plan.col_sums(), &ws.weights);
    let fresh = ws.cmf.recompute();
    let transport = ws.lambda * plan.entries().iter().map(|&(m, n, v)| ws.cost.get(m, n) * v).sum::<f64>();
    let total = fresh.fit + transport + mass_term(&ws.weights, plan.col_sums(), ws.mu);
    let obj_drift =
        (objective - total).abs() / total.abs().max(ws.cmf.covariance().frobenius_sq()).max(f64::MIN_POSITIVE);
    let d_drift = ws.cmf.resync();
    ws.col_sums.copy_from_slice(plan.col_sums());
    Ok(b_drift.max(c_drift).max(obj_drift).max(d_drift))
}

/// Exact balanced transport cost `min <C, P>` subject to `P 1 = b`,
/// `P^T 1 = a`, for small problems (at most 10 atoms per side). `cost` is
/// `len(b) x len(a)`.
pub fn balanced_ot_cost(a: &[f64], b: &[f64], cost: &CostMatrix) -> Result<f64> {
    use minilp::{ComparisonOp, OptimizationDirection, Problem};

    if a.is_empty() || b.is_empty() || a.len() > 10 || b.len() > 10 {
        return Err(Error::InvalidInput("balanced OT supports 1..=10 atoms per side".into()));
    }
    if cost.rows() != b.len() || cost.cols() != a.len() {
        return Err(Error::DimensionMismatch("cost matrix must be len(b) x len(a)".into()));
    }
    if a.iter().chain(b).any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidInput("marginals must be nonnegative".into()));
    }
    let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    if (sa - sb).abs() > 1e-9 * sa.max(sb).max(1.0) {
        return Err(Error::MassMismatch(sa, sb));
    }

    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<Vec<minilp::Variable>> = (0..b.len())
        .map(|m| (0..a.len()).map(|n| lp.add_var(cost.get(m, n), (0.0, f64::INFINITY))).collect())
        .collect();
    for (m, &bm) in b.iter().enumerate() {
        let row: Vec<(minilp::Variable, f64)> = vars[m].iter().map(|&v| (v, 1.0)).collect();
        lp.add_constraint(row.as_slice(), ComparisonOp::Eq, bm);
    }
    // One column constraint is implied by the others and total mass.
    for (n, &an) in a.iter().enumerate().take(a.len() - 1) {
        let col: Vec<(minilp::Variable, f64)> = vars.iter().map(|r| (r[n], 1.0)).collect();
        lp.add_constraint(col.as_slice(), ComparisonOp::Eq, an);
    }
    let sol = lp.solve().map_err(|e| Error::LinearProgram(e.to_string()))?;
    Ok(sol.objective())
}
