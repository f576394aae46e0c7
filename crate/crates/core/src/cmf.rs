//! Covariance matrix fitting: `min_{b >= 0} |G diag(b) G^H - S|_F^2`.
//!
//! Expanding the norm gives a quadratic in `b` with Hessian `2K`, where
//! `K[k][m] = |g_k^H g_m|^2`, and linear term `-2 s` with
//! `s_m = g_m^H S g_m`. The workspace keeps the residual coupling
//! `d = K b - s` (equivalently `d_m = g_m^H (R(b) - S) g_m`) up to date after
//! each coordinate update, either from a dense `K` cache or from Gram columns
//! computed on demand. On-demand columns are kept in a bounded cache since
//! descent keeps revisiting a small support.

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nnls::nnls;
use crate::scene::TransferMatrix;
use crate::signalsim::{accumulate_outer, CovarianceMatrix};
use crate::trace::{SolveTrace, TraceRecord};

/// Work per scan above which coordinate scans and Gram columns go parallel.
const PAR_WORK: usize = 1 << 15;

pub const DEFAULT_DENSE_GRAM_CAP: usize = 2048;
pub const DEFAULT_NNLS_CAP: usize = 5000;
/// Memory budget for cached on-demand Gram columns.
pub const GRAM_COLUMN_CACHE_BYTES: usize = 256 << 20;
pub const DEFAULT_REFRESH_EVERY: usize = 1000;

/// Relative stopping threshold on the best single-coordinate improvement.
pub const DEFAULT_REL_TOL: f64 = 1e-10;

/// Nonnegative power per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerMap {
    pub values: Vec<f64>,
}

impl PowerMap {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput(format!("power map entry {v} is not a nonnegative number")));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// `(index, value)` for strictly positive entries, in index order.
    pub fn nonzero(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values.iter().copied().enumerate().filter(|&(_, v)| v > 0.0)
    }

    /// Indices whose power exceeds `rel * max`.
    pub fn support(&self, rel: f64) -> Vec<usize> {
        let cut = rel * self.max();
        self.nonzero().filter(|&(_, v)| v > cut).map(|(m, _)| m).collect()
    }
}

/// `Re(v^H A v)` for every column of `g`.
pub(crate) fn quadratic_forms(g: &TransferMatrix, a: &DMatrix<Complex64>) -> Vec<f64> {
    let n = g.sensors();
    let form = |m: usize| {
        let v = g.column(m);
        let mut acc = 0.0;
        for j in 0..n {
            let mut av = Complex64::new(0.0, 0.0);
            for i in 0..n {
                av += v[i].conj() * a[(i, j)];
            }
            acc += (av * v[j]).re;
        }
        acc
    };
    if g.points() * n * n >= PAR_WORK {
        (0..g.points()).into_par_iter().map(form).collect()
    } else {
        (0..g.points()).map(form).collect()
    }
}

fn gram_column_into(g: &TransferMatrix, m: usize, out: &mut [f64]) {
    let gm = g.column(m);
    let entry = |k: usize| {
        let gk = g.column(k);
        let mut z = Complex64::new(0.0, 0.0);
        for (a, b) in gk.iter().zip(gm) {
            z += a.conj() * b;
        }
        z.norm_sqr()
    };
    if g.points() * g.sensors() >= PAR_WORK {
        out.par_iter_mut().enumerate().for_each(|(k, o)| *o = entry(k));
    } else {
        out.iter_mut().enumerate().for_each(|(k, o)| *o = entry(k));
    }
}

/// Best `(improvement, index)` over `0..len`; ties go to the lowest index,
/// so the result does not depend on how the scan is split across threads.
pub(crate) fn argmax_scan<F>(len: usize, work_per_item: usize, f: F) -> Option<(f64, usize)>
where
    F: Fn(usize) -> Option<(f64, usize)> + Sync,
{
    fn better(a: Option<(f64, usize)>, b: Option<(f64, usize)>) -> Option<(f64, usize)> {
        match (a, b) {
            (None, x) | (x, None) => x,
            (Some(x), Some(y)) => {
                if y.0 > x.0 || (y.0 == x.0 && y.1 < x.1) {
                    Some(y)
                } else {
                    Some(x)
                }
            }
        }
    }
    if len * work_per_item >= PAR_WORK {
        (0..len).into_par_iter().map(&f).reduce(|| None, better)
    } else {
        (0..len).map(f).fold(None, better)
    }
}

#[derive(Debug, Clone)]
enum Gram {
    Dense(Vec<f64>),
    OnDemand { cache: HashMap<usize, Vec<f64>>, max_columns: usize },
}

/// Fresh recomputation of the incrementally maintained quantities.
#[derive(Debug, Clone)]
pub struct Recomputed {
    pub d: Vec<f64>,
    pub fit: f64,
}

/// Incremental state for coordinate updates of the fit term.
#[derive(Debug, Clone)]
pub struct CmfWorkspace<'a> {
    g: &'a TransferMatrix,
    sigma: &'a CovarianceMatrix,
    b: Vec<f64>,
    s: Vec<f64>,
    d: Vec<f64>,
    gram: Gram,
    scratch: Vec<f64>,
    fit: f64,
}

impl<'a> CmfWorkspace<'a> {
    /// Workspace at `b = 0`. A dense Gram cache is built when the grid has at
    /// most `dense_gram_cap` points.
    pub fn new(g: &'a TransferMatrix, sigma: &'a CovarianceMatrix, dense_gram_cap: usize) -> Result<Self> {
        if sigma.dim() != g.sensors() {
            return Err(Error::DimensionMismatch(format!(
                "covariance is {0}x{0} but the array has {1} sensors",
                sigma.dim(),
                g.sensors()
            )));
        }
        let m = g.points();
        let s = quadratic_forms(g, &sigma.sigma);
        let gram = if m <= dense_gram_cap {
            let mut k = vec![0.0; m * m];
            k.par_chunks_mut(m).enumerate().for_each(|(col, out)| {
                let gm = g.column(col);
                for (kk, o) in out.iter_mut().enumerate() {
                    let mut z = Complex64::new(0.0, 0.0);
                    for (a, b) in g.column(kk).iter().zip(gm) {
                        z += a.conj() * b;
                    }
                    *o = z.norm_sqr();
                }
            });
            Gram::Dense(k)
        } else {
            Gram::OnDemand { cache: HashMap::new(), max_columns: GRAM_COLUMN_CACHE_BYTES / (8 * m) }
        };
        let d = s.iter().map(|v| -v).collect();
        Ok(Self { g, sigma, b: vec![0.0; m], s, d, gram, scratch: vec![0.0; m], fit: sigma.frobenius_sq() })
    }

    /// Replaces the current powers and recomputes `d` and the fit from scratch.
    pub fn set_powers(&mut self, b: &[f64]) -> Result<()> {
        if b.len() != self.b.len() {
            return Err(Error::DimensionMismatch(format!(
                "power vector has {} entries, grid {}",
                b.len(),
                self.b.len()
            )));
        }
        self.b.copy_from_slice(b);
        let fresh = self.recompute();
        self.d = fresh.d;
        self.fit = fresh.fit;
        Ok(())
    }

    pub fn transfer(&self) -> &TransferMatrix {
        self.g
    }

    pub fn covariance(&self) -> &CovarianceMatrix {
        self.sigma
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    pub fn powers(&self) -> &[f64] {
        &self.b
    }

    /// `d_m = g_m^H (R(b) - S) g_m`.
    pub fn coupling(&self) -> &[f64] {
        &self.d
    }

    /// `s_m = g_m^H S g_m`.
    pub fn data_forms(&self) -> &[f64] {
        &self.s
    }

    /// Incrementally tracked fit term.
    pub fn fit(&self) -> f64 {
        self.fit
    }

    pub fn has_dense_gram(&self) -> bool {
        matches!(self.gram, Gram::Dense(_))
    }

    /// Column `m` of `K`, i.e. `|g_k^H g_m|^2` for every `k`.
    pub fn gram_column(&mut self, m: usize) -> &[f64] {
        let n = self.b.len();
        match &mut self.gram {
            Gram::Dense(k) => &k[m * n..(m + 1) * n],
            Gram::OnDemand { cache, max_columns } => {
                if !cache.contains_key(&m) {
                    if cache.len() >= *max_columns {
                        gram_column_into(self.g, m, &mut self.scratch);
                        return &self.scratch;
                    }
                    let mut col = vec![0.0; n];
                    gram_column_into(self.g, m, &mut col);
                    cache.insert(m, col);
                }
                &cache[&m]
            }
        }
    }

    /// `b_m += delta`, keeping `d` and the fit consistent.
    pub fn apply(&mut self, m: usize, delta: f64) {
        let curvature = self.g.norm_quad()[m];
        self.fit += 2.0 * self.d[m] * delta + curvature * delta * delta;
        self.b[m] += delta;
        let n = self.b.len();
        let mut d = std::mem::take(&mut self.d);
        let col = self.gram_column(m);
        if n >= PAR_WORK {
            d.par_iter_mut().zip(col.par_iter()).for_each(|(dk, &kk)| *dk += delta * kk);
        } else {
            d.iter_mut().zip(col).for_each(|(dk, &kk)| *dk += delta * kk);
        }
        self.d = d;
    }

    /// `d` and the fit recomputed from `b` without using incremental state.
    pub fn recompute(&self) -> Recomputed {
        let n = self.g.sensors();
        let mut resid = -self.sigma.sigma.clone();
        for (m, &bm) in self.b.iter().enumerate() {
            if bm != 0.0 {
                accumulate_outer(&mut resid, self.g.column(m), bm);
            }
        }
        debug_assert_eq!(resid.nrows(), n);
        Recomputed { d: quadratic_forms(self.g, &resid), fit: resid.norm_squared() }
    }

    /// Replaces `d` with a fresh recomputation and returns the relative
    /// drift `|d_inc - d_fresh|_inf / max(|s|_inf, |d_fresh|_inf)`.
    pub fn resync(&mut self) -> f64 {
        let fresh = self.recompute();
        let drift = relative_drift(&self.d, &fresh.d, &self.s);
        self.d = fresh.d;
        drift
    }
}

pub(crate) fn relative_drift(inc: &[f64], fresh: &[f64], reference: &[f64]) -> f64 {
    let scale = fresh.iter().chain(reference).fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    inc.iter().zip(fresh).fold(0.0f64, |a, (x, y)| a.max((x - y).abs())) / scale
}

/// `|G diag(b) G^H - S|_F^2`.
pub fn cmf_objective(g: &TransferMatrix, b: &[f64], sigma: &CovarianceMatrix) -> Result<f64> {
    if b.len() != g.points() || sigma.dim() != g.sensors() {
        return Err(Error::DimensionMismatch("objective arguments disagree in size".into()));
    }
    let mut resid = -sigma.sigma.clone();
    for (m, &bm) in b.iter().enumerate() {
        if bm != 0.0 {
            accumulate_outer(&mut resid, g.column(m), bm);
        }
    }
    Ok(resid.norm_squared())
}

/// Gradient `2 d` of the fit term at the workspace's current powers.
pub fn cmf_gradient(ws: &CmfWorkspace<'_>) -> Vec<f64> {
    ws.coupling().iter().map(|d| 2.0 * d).collect()
}

// ---------------------------------------------------------------------------
// Dense Lawson–Hanson reference
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NnlsParams {
    /// Relative KKT tolerance.
    pub tol: f64,
    /// Largest grid accepted by the dense solver.
    pub cap: usize,
}

impl Default for NnlsParams {
    fn default() -> Self {
        Self { tol: 1e-10, cap: DEFAULT_NNLS_CAP }
    }
}

#[derive(Debug, Clone)]
pub struct NnlsResult {
    pub power: PowerMap,
    pub objective: f64,
    pub kkt: f64,
    pub iterations: usize,
    pub seconds: f64,
}

/// Norm-preserving real coordinates of a Hermitian matrix: diagonal entries,
/// then `sqrt(2) Re` and `sqrt(2) Im` of the strict upper triangle.
fn hermitian_coordinates(h: &DMatrix<Complex64>, out: &mut [f64]) {
    let n = h.nrows();
    let mut r = 0;
    for i in 0..n {
        out[r] = h[(i, i)].re;
        r += 1;
    }
    let s2 = std::f64::consts::SQRT_2;
    for j in 0..n {
        for i in 0..j {
            out[r] = s2 * h[(i, j)].re;
            out[r + 1] = s2 * h[(i, j)].im;
            r += 2;
        }
    }
}

/// Real design matrix whose column `m` holds the coordinates of `g_m g_m^H`,
/// and the data vector for `S`.
pub fn real_stacked_system(g: &TransferMatrix, sigma: &CovarianceMatrix) -> (DMatrix<f64>, DVector<f64>) {
    let n = g.sensors();
    let rows = n * n;
    let mut a = DMatrix::<f64>::zeros(rows, g.points());
    a.as_mut_slice().par_chunks_mut(rows).enumerate().for_each(|(m, col)| {
        let v = g.column(m);
        let mut r = 0;
        for &vi in v {
            col[r] = vi.norm_sqr();
            r += 1;
        }
        let s2 = std::f64::consts::SQRT_2;
        for j in 0..n {
            for i in 0..j {
                let z = v[i] * v[j].conj();
                col[r] = s2 * z.re;
                col[r + 1] = s2 * z.im;
                r += 2;
            }
        }
    });
    let mut y = DVector::<f64>::zeros(rows);
    hermitian_coordinates(&sigma.sigma, y.as_mut_slice());
    (a, y)
}

pub fn cmf_solve_nnls(g: &TransferMatrix, sigma: &CovarianceMatrix, params: &NnlsParams) -> Result<NnlsResult> {
    if g.points() > params.cap {
        return Err(Error::NnlsCapExceeded { size: g.points(), cap: params.cap });
    }
    if sigma.dim() != g.sensors() {
        return Err(Error::DimensionMismatch("covariance and transfer matrix disagree".into()));
    }
    let start = Instant::now();
    let (a, y) = real_stacked_system(g, sigma);
    let sol = nnls(&a, &y, params.tol, 3 * g.points().max(1))?;
    let b: Vec<f64> = sol.x.iter().map(|v| v.max(0.0)).collect();
    let objective = cmf_objective(g, &b, sigma)?;
    Ok(NnlsResult {
        power: PowerMap::new(b)?,
        objective,
        kkt: sol.kkt,
        iterations: sol.iterations,
        seconds: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Greedy coordinate descent
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdParams {
    pub max_iters: usize,
    /// Absolute improvement threshold; `None` means `1e-10 |S|_F^2`.
    pub tol: Option<f64>,
    /// Resynchronise `d` from scratch every this many updates (0 = never).
    pub refresh_every: usize,
    pub trace: bool,
}

impl Default for CdParams {
    fn default() -> Self {
        Self { max_iters: 100_000, tol: None, refresh_every: DEFAULT_REFRESH_EVERY, trace: false }
    }
}

impl CdParams {
    pub(crate) fn tolerance(&self, sigma: &CovarianceMatrix) -> f64 {
        self.tol.unwrap_or(DEFAULT_REL_TOL * sigma.frobenius_sq())
    }
}

#[derive(Debug, Clone)]
pub struct CdResult {
    pub power: PowerMap,
    /// Fit recomputed from the returned powers.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest relative drift seen at the periodic resyncs.
    pub max_drift: f64,
    pub trace: Option<SolveTrace>,
    pub seconds: f64,
}

/// Closed-form coordinate move for a quadratic with gradient `grad` and
/// curvature `h`, keeping the variable (currently `value`) nonnegative.
/// Returns the step and the decrease it achieves.
#[inline]
pub fn clamped_newton_step(value: f64, grad: f64, h: f64) -> (f64, f64) {
    let delta = (-grad / h).max(-value);
    let gain = -(grad * delta + 0.5 * h * delta * delta);
    (delta, gain)
}

/// Greedy maximal-improvement coordinate descent on the fit term, starting
/// from the workspace's current powers.
pub fn cmf_solve_cd(ws: &mut CmfWorkspace<'_>, params: &CdParams) -> Result<CdResult> {
    let start = Instant::now();
    let tol = params.tolerance(ws.covariance());
    let quad = ws.transfer().norm_quad().to_vec();
    let mut objective = ws.fit();
    let mut trace = params.trace.then(SolveTrace::default);
    let record = |trace: &mut Option<SolveTrace>, iteration, m, delta, objective| {
        if let Some(t) = trace {
            t.records.push(TraceRecord {
                iteration,
                m,
                n: 0,
                delta,
                objective,
                fit: objective,
                transport: 0.0,
                mass: 0.0,
            });
        }
    };
    record(&mut trace, 0, 0, 0.0, objective);

    let mut iterations = 0;
    let mut converged = false;
    let mut max_drift = 0.0f64;
    while iterations < params.max_iters {
        let (b, d) = (ws.powers(), ws.coupling());
        let best = argmax_scan(ws.len(), 1, |m| {
            let h = 2.0 * quad[m];
            if !(h > 0.0) {
                return None;
            }
            let (_, gain) = clamped_newton_step(b[m], 2.0 * d[m], h);
            Some((gain, m))
        });
        let Some((gain, m)) = best.filter(|(gain, _)| *gain > tol) else {
            converged = true;
            break;
        };
        let (delta, _) = clamped_newton_step(b[m], 2.0 * d[m], 2.0 * quad[m]);
        ws.apply(m, delta);
        objective -= gain;
        iterations += 1;
        record(&mut trace, iterations, m, delta, objective);
        if params.refresh_every > 0 && iterations % params.refresh_every == 0 {
            max_drift = max_drift.max(ws.resync());
        }
    }

    let b = ws.powers().to_vec();
    let objective = cmf_objective(ws.transfer(), &b, ws.covariance())?;
    Ok(CdResult {
        power: PowerMap::new(b.iter().map(|v| v.max(0.0)).collect())?,
        objective,
        iterations,
        converged,
        max_drift,
        trace,
        seconds: start.elapsed().as_secs_f64(),
    })
}
