//! Turning power maps into source estimates and scoring them.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{angular_cost, build_prior};
use crate::cmf::{cmf_solve_cd, cmf_solve_nnls, CdParams, CmfWorkspace, NnlsParams, PowerMap};
use crate::error::{Error, Result};
use crate::scene::{Grid, Point3, Scene, TransferMatrix};
use crate::signalsim::{add_noise_for_snr, empirical_covariance, synthesize_snapshots, CovarianceMatrix};
use crate::trace::SolveTrace;
use crate::uot::{solve_cmf_uot, FusionParams};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimateSet {
    pub positions: Vec<Point3>,
    pub powers: Vec<f64>,
}

impl EstimateSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Greedy peak picking: take the strongest remaining grid point, merge every
/// remaining point within `merge_radius` of it into one cluster, report the
/// power-weighted centroid and total power, and repeat up to `k` times.
pub fn extract_peaks(b: &PowerMap, grid: &Grid, k: usize, merge_radius: f64) -> Result<EstimateSet> {
    if k == 0 {
        return Err(Error::InvalidInput("expected source count must be at least 1".into()));
    }
    if b.len() != grid.len() {
        return Err(Error::DimensionMismatch(format!("power map has {} entries, grid {}", b.len(), grid.len())));
    }
    if !(merge_radius >= grid.step()) {
        return Err(Error::InvalidInput(format!("merge radius {merge_radius} is below the grid step {}", grid.step())));
    }
    let mut candidates: Vec<(usize, f64, Point3)> = b.nonzero().map(|(m, v)| (m, v, grid.point(m))).collect();
    candidates.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    let mut taken = vec![false; candidates.len()];
    let mut out = EstimateSet::default();
    let r2 = merge_radius * merge_radius;
    for _ in 0..k {
        let Some(head) = taken.iter().position(|t| !t) else { break };
        let center = candidates[head].2;
        let mut power = 0.0;
        let mut weighted = Point3::zeros();
        for (c, t) in candidates.iter().zip(taken.iter_mut()) {
            if !*t && (c.2 - center).norm_squared() <= r2 {
                *t = true;
                power += c.1;
                weighted += c.2 * c.1;
            }
        }
        out.positions.push(weighted / power);
        out.powers.push(power);
    }
    Ok(out)
}

/// Minimum-cost perfect assignment on a square matrix (rows to columns).
/// Returns `assignment[row] = col`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // Shortest augmenting path with potentials; index 0 is a sentinel.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Squared error per true source, in truth order.
    pub squared_errors: Vec<f64>,
    /// Matched estimate per true source, `None` when it was missed.
    pub assignment: Vec<Option<usize>>,
    pub mse: f64,
}

/// Optimal one-to-one matching of estimates to true positions by squared
/// distance. True sources left without an estimate cost `miss_penalty`.
pub fn match_mse(est: &[Point3], truth: &[Point3], miss_penalty: f64) -> MatchResult {
    let n = est.len().max(truth.len());
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| match (truth.get(i), est.get(j)) {
                    (Some(t), Some(e)) => (t - e).norm_squared(),
                    (Some(_), None) => miss_penalty,
                    (None, _) => 0.0,
                })
                .collect()
        })
        .collect();
    let assign = hungarian(&cost);
    let mut squared_errors = Vec::with_capacity(truth.len());
    let mut assignment = Vec::with_capacity(truth.len());
    for (i, &j) in assign.iter().enumerate().take(truth.len()) {
        squared_errors.push(cost[i][j]);
        assignment.push((j < est.len()).then_some(j));
    }
    let mse = if truth.is_empty() { 0.0 } else { squared_errors.iter().sum::<f64>() / truth.len() as f64 };
    MatchResult { squared_errors, assignment, mse }
}

// ---------------------------------------------------------------------------
// Methods and Monte-Carlo sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    CmfNnls,
    CmfCd,
    CmfUot,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::CmfNnls, Method::CmfCd, Method::CmfUot];

    pub fn name(self) -> &'static str {
        match self {
            Method::CmfNnls => "cmf-nnls",
            Method::CmfCd => "cmf-cd",
            Method::CmfUot => "cmf-uot",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown method '{s}' (expected cmf-nnls, cmf-cd or cmf-uot)")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Solver and scoring knobs shared by every run of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    pub cd: CdParams,
    pub fusion: FusionParams,
    pub nnls: NnlsParams,
    pub dense_gram_cap: usize,
    /// Defaults to three grid steps.
    pub merge_radius: Option<f64>,
    /// Defaults to the squared grid diagonal.
    pub miss_penalty: Option<f64>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            cd: CdParams::default(),
            fusion: FusionParams::default(),
            nnls: NnlsParams::default(),
            dense_gram_cap: crate::cmf::DEFAULT_DENSE_GRAM_CAP,
            merge_radius: None,
            miss_penalty: None,
        }
    }
}

impl SolverSettings {
    pub fn merge_radius(&self, grid: &Grid) -> f64 {
        self.merge_radius.unwrap_or(3.0 * grid.step())
    }

    pub fn miss_penalty(&self, grid: &Grid) -> f64 {
        self.miss_penalty.unwrap_or(grid.diagonal().powi(2))
    }
}

#[derive(Debug, Clone)]
pub struct MethodOutput {
    pub power: PowerMap,
    pub objective: f64,
    pub iterations: usize,
    pub seconds: f64,
    pub trace: Option<SolveTrace>,
}

/// Runs one method on one covariance. `seed` only feeds simulated camera
/// jitter.
pub fn solve_method(
    method: Method,
    scene: &Scene,
    g: &TransferMatrix,
    sigma: &CovarianceMatrix,
    settings: &SolverSettings,
    seed: u64,
) -> Result<MethodOutput> {
    let start = Instant::now();
    match method {
        Method::CmfNnls => {
            let r = cmf_solve_nnls(g, sigma, &settings.nnls)?;
            Ok(MethodOutput {
                power: r.power,
                objective: r.objective,
                iterations: r.iterations,
                seconds: start.elapsed().as_secs_f64(),
                trace: None,
            })
        }
        Method::CmfCd => {
            let mut ws = CmfWorkspace::new(g, sigma, settings.dense_gram_cap)?;
            let r = cmf_solve_cd(&mut ws, &settings.cd)?;
            Ok(MethodOutput {
                power: r.power,
                objective: r.objective,
                iterations: r.iterations,
                seconds: start.elapsed().as_secs_f64(),
                trace: r.trace,
            })
        }
        Method::CmfUot => {
            let prior = build_prior(scene, seed)?;
            let cost = angular_cost(&scene.grid, &prior, &scene.camera.position)?;
            let params = FusionParams { dense_gram_cap: settings.dense_gram_cap, ..settings.fusion };
            let r = solve_cmf_uot(g, sigma, &cost, &prior, &params)?;
            Ok(MethodOutput {
                power: r.power,
                objective: r.objective.total,
                iterations: r.iterations,
                seconds: start.elapsed().as_secs_f64(),
                trace: r.trace,
            })
        }
    }
}

/// Empirical covariance of one synthetic realisation of the scene.
pub fn simulate_covariance(scene: &Scene, snr_db: f64, seed: u64) -> Result<CovarianceMatrix> {
    let steering = scene.source_steering()?;
    let block = synthesize_snapshots(&steering, scene.sources.powers(), scene.snapshots, seed)?;
    let noisy = add_noise_for_snr(&block, snr_db, seed)?;
    Ok(empirical_covariance(&noisy))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    SnrDb,
    Distance,
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            SweepVariable::SnrDb => "snr_db",
            SweepVariable::Distance => "distance",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
    /// SNR used by distance sweeps; `null` or absent means noiseless.
    #[serde(default)]
    pub snr_db: Option<f64>,
}

/// One (method, sweep value, seed) record.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub method: Method,
    pub variable: SweepVariable,
    pub value: f64,
    pub seed: u64,
    pub sources: usize,
    pub estimates: usize,
    pub squared_errors: Vec<f64>,
    pub mse: f64,
    pub iterations: usize,
    pub objective: f64,
    pub seconds: f64,
    /// Set when the solve failed; the error fields are then NaN.
    pub error: Option<String>,
}

fn score(
    method: Method,
    scene: &Scene,
    variable: SweepVariable,
    value: f64,
    seed: u64,
    out: Result<MethodOutput>,
    settings: &SolverSettings,
) -> SweepResult {
    let truth = scene.sources.positions();
    let mut rec = SweepResult {
        method,
        variable,
        value,
        seed,
        sources: truth.len(),
        estimates: 0,
        squared_errors: Vec::new(),
        mse: f64::NAN,
        iterations: 0,
        objective: f64::NAN,
        seconds: 0.0,
        error: None,
    };
    let scored = out.and_then(|o| {
        let peaks = extract_peaks(&o.power, &scene.grid, truth.len(), settings.merge_radius(&scene.grid))?;
        Ok((o, peaks))
    });
    match scored {
        Ok((o, peaks)) => {
            let m = match_mse(&peaks.positions, truth, settings.miss_penalty(&scene.grid));
            rec.estimates = peaks.len();
            rec.squared_errors = m.squared_errors;
            rec.mse = m.mse;
            rec.iterations = o.iterations;
            rec.objective = o.objective;
            rec.seconds = o.seconds;
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec
}

/// Sweeps `spec` over `runs` seeds (`base_seed + r`) and every method.
/// Results are ordered by sweep value, then seed, then method as given, and
/// are bit-identical for a fixed base seed.
pub fn run_monte_carlo(
    scene: &Scene,
    methods: &[Method],
    spec: &SweepSpec,
    runs: usize,
    base_seed: u64,
    settings: &SolverSettings,
) -> Result<Vec<SweepResult>> {
    if runs == 0 {
        return Err(Error::InvalidInput("runs must be at least 1".into()));
    }
    if spec.values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("sweep values must not be NaN".into()));
    }
    let points: Vec<(f64, Scene, f64, TransferMatrix)> = spec
        .values
        .iter()
        .map(|&value| {
            let (variant, snr) = match spec.variable {
                SweepVariable::SnrDb => (scene.clone(), value),
                SweepVariable::Distance => (scene.at_distance(value)?, spec.snr_db.unwrap_or(f64::INFINITY)),
            };
            let g = variant.transfer_matrix()?;
            Ok((value, variant, snr, g))
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, u64)> =
        (0..points.len()).flat_map(|p| (0..runs as u64).map(move |r| (p, base_seed.wrapping_add(r)))).collect();
    let per_job: Vec<Vec<SweepResult>> = jobs
        .par_iter()
        .map(|&(p, seed)| {
            let (value, variant, snr, g) = &points[p];
            let sigma = simulate_covariance(variant, *snr, seed);
            methods
                .iter()
                .map(|&method| {
                    let out = match &sigma {
                        Ok(sigma) => solve_method(method, variant, g, sigma, settings, seed),
                        Err(e) => Err(Error::InvalidInput(e.to_string())),
                    };
                    score(method, variant, spec.variable, *value, seed, out, settings)
                })
                .collect()
        })
        .collect();
    Ok(per_job.into_iter().flatten().collect())
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

pub const RESULTS_HEADER: &str =
    "method,variable,value,seed,sources,estimates,mse,iterations,objective,status,squared_errors";
pub const AGGREGATE_HEADER: &str = "method,variable,value,runs,failed,mse_mean,mse_std";
pub const TIMINGS_HEADER: &str = "method,variable,value,seed,seconds";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes `# key=value` metadata lines, the header, and one deterministic row
/// per result. Wall times are excluded (see [`write_timings_csv`]).
pub fn write_results_csv<W: Write>(mut out: W, meta: &[(String, String)], results: &[SweepResult]) -> Result<()> {
    for (k, v) in meta {
        writeln!(out, "# {k}={v}")?;
    }
    writeln!(out, "{RESULTS_HEADER}")?;
    for r in results {
        let errs: Vec<String> = r.squared_errors.iter().map(|e| e.to_string()).collect();
        let status = match &r.error {
            None => "ok".to_string(),
            Some(e) => csv_field(&format!("error: {e}")),
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.variable.name(),
            r.value,
            r.seed,
            r.sources,
            r.estimates,
            r.mse,
            r.iterations,
            r.objective,
            status,
            errs.join(";")
        )?;
    }
    Ok(())
}

pub fn write_timings_csv<W: Write>(mut out: W, results: &[SweepResult]) -> Result<()> {
    writeln!(out, "{TIMINGS_HEADER}")?;
    for r in results {
        writeln!(out, "{},{},{},{},{}", r.method, r.variable.name(), r.value, r.seed, r.seconds)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub method: Method,
    pub variable: SweepVariable,
    pub value: f64,
    pub runs: usize,
    pub failed: usize,
    pub mse_mean: f64,
    pub mse_std: f64,
}

/// Mean and sample standard deviation of the MSE per (method, value), over
/// successful runs. Rows follow the first-appearance order of the input.
pub fn aggregate(results: &[SweepResult]) -> Vec<AggregateRow> {
    let mut order: Vec<(Method, u64)> = Vec::new();
    let mut groups: BTreeMap<(Method, u64), Vec<&SweepResult>> = BTreeMap::new();
    for r in results {
        let key = (r.method, r.value.to_bits());
        if !groups.contains_key(&key) {
            order.push(key);
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let rows = &groups[&key];
            let ok: Vec<f64> = rows.iter().filter(|r| r.error.is_none()).map(|r| r.mse).collect();
            let n = ok.len();
            let mean = if n > 0 { ok.iter().sum::<f64>() / n as f64 } else { f64::NAN };
            let std = if n > 1 {
                (ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else if n == 1 {
                0.0
            } else {
                f64::NAN
            };
            AggregateRow {
                method: key.0,
                variable: rows[0].variable,
                value: rows[0].value,
                runs: rows.len(),
                failed: rows.len() - n,
                mse_mean: mean,
                mse_std: std,
            }
        })
        .collect()
}

pub fn write_aggregate_csv<W: Write>(mut out: W, meta: &[(String, String)], rows: &[AggregateRow]) -> Result<()> {
    for (k, v) in meta {
        writeln!(out, "# {k}={v}")?;
    }
    writeln!(out, "{AGGREGATE_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.method,
            r.variable.name(),
            r.value,
            r.runs,
            r.failed,
            r.mse_mean,
            r.mse_std
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid() -> Grid {
        Grid::new(Point3::zeros(), [2.0, 2.0, 1.0], 0.1).unwrap()
    }

    #[test]
    fn single_spike() {
        let g = grid();
        let mut b = vec![0.0; g.len()];
        let m = g.flat([4, 7, 3]);
        b[m] = 2.5;
        let est = extract_peaks(&PowerMap::new(b).unwrap(), &g, 3, 0.3).unwrap();
        assert_eq!(est.len(), 1);
        assert_eq!(est.positions[0], g.point(m));
        assert_eq!(est.powers[0], 2.5);
    }

    #[test]
    fn two_separated_spikes() {
        let g = grid();
        let mut b = vec![0.0; g.len()];
        let (m1, m2) = (g.flat([2, 2, 2]), g.flat([15, 16, 8]));
        b[m1] = 1.0;
        b[m2] = 1.0;
        let est = extract_peaks(&PowerMap::new(b).unwrap(), &g, 2, 0.3).unwrap();
        assert_eq!(est.len(), 2);
        assert!(est.positions.contains(&g.point(m1)));
        assert!(est.positions.contains(&g.point(m2)));
    }

    #[test]
    fn blurred_spike_centroid() {
        let g = grid();
        let center = [10usize, 10, 5];
        let mut b = vec![0.0; g.len()];
        // Asymmetric blur: the analytic centroid is shifted by 0.1 * w / W.
        let weights = [(0i64, 4.0), (1, 2.0), (-1, 1.0)];
        for &(dx, w) in &weights {
            for &(dy, wy) in &weights {
                let idx = [(center[0] as i64 + dx) as usize, (center[1] as i64 + dy) as usize, center[2]];
                b[g.flat(idx)] = w * wy;
            }
        }
        let est = extract_peaks(&PowerMap::new(b).unwrap(), &g, 1, 0.3).unwrap();
        let total: f64 = 7.0;
        let shift = 0.1 * (2.0 - 1.0) / total;
        let expect = g.point(g.flat(center)) + Point3::new(shift, shift, 0.0);
        assert!((est.positions[0] - expect).norm() < 1e-12);
        assert!((est.positions[0] - g.point(g.flat(center))).norm() < 0.5 * g.step());
        assert_relative_eq!(est.powers[0], 49.0, max_relative = 1e-12);
    }

    #[test]
    fn empty_map_gives_no_estimates() {
        let g = grid();
        let est = extract_peaks(&PowerMap::new(vec![0.0; g.len()]).unwrap(), &g, 2, 0.3).unwrap();
        assert!(est.is_empty());
        assert!(extract_peaks(&PowerMap::new(vec![0.0; g.len()]).unwrap(), &g, 2, 0.05).is_err());
    }

    #[test]
    fn mse_basics() {
        let t = [Point3::new(1.0, 2.0, 3.0)];
        assert_eq!(match_mse(&t, &t, 10.0).mse, 0.0);
        let e = [Point3::new(1.1, 2.0, 3.0)];
        assert_relative_eq!(match_mse(&e, &t, 10.0).mse, 0.01, max_relative = 1e-12);
        let r = match_mse(&[], &t, 10.0);
        assert_eq!(r.mse, 10.0);
        assert_eq!(r.assignment, vec![None]);
    }

    #[test]
    fn permuted_estimates_are_unscrambled() {
        let truth = [Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 2.0, 0.0)];
        let est = [truth[2] + Point3::new(0.05, 0.0, 0.0), truth[0], truth[1] + Point3::new(0.0, 0.1, 0.0)];
        let r = match_mse(&est, &truth, 100.0);
        assert_eq!(r.assignment, vec![Some(1), Some(2), Some(0)]);
        // exhaustive 3! oracle
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let best = perms
            .iter()
            .map(|p| (0..3).map(|i| (truth[i] - est[p[i]]).norm_squared()).sum::<f64>() / 3.0)
            .fold(f64::INFINITY, f64::min);
        assert_relative_eq!(r.mse, best, max_relative = 1e-12);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(Method::parse("music").is_err());
    }

    #[test]
    fn aggregate_statistics() {
        let mk = |method, value, mse| SweepResult {
            method,
            variable: SweepVariable::SnrDb,
            value,
            seed: 0,
            sources: 1,
            estimates: 1,
            squared_errors: vec![mse],
            mse,
            iterations: 1,
            objective: 0.0,
            seconds: 0.0,
            error: None,
        };
        let rows = aggregate(&[mk(Method::CmfCd, 0.0, 1.0), mk(Method::CmfCd, 0.0, 3.0), mk(Method::CmfUot, 0.0, 2.0)]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].mse_mean, 2.0);
        assert_relative_eq!(rows[0].mse_std, 2f64.sqrt(), max_relative = 1e-12);
        assert_eq!(rows[1].mse_std, 0.0);
    }
}
