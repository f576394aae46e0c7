//! Snapshot synthesis, noise injection at a target SNR, and covariance
//! estimation.
//!
//! Every stochastic routine takes an explicit seed and draws from a ChaCha8
//! stream reserved for it, so a (seed, inputs) pair always yields the same
//! bits on every platform.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scene::TransferMatrix;

const SIGNAL_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Circular complex Gaussian draw with `E|z|^2 = variance`.
pub(crate) fn complex_gaussian<R: Rng>(rng: &mut R, variance: f64) -> Complex64 {
    let scale = (0.5 * variance).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(scale * re, scale * im)
}

/// Sensor amplitudes, one column per snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotBlock {
    pub x: DMatrix<Complex64>,
    pub seed: u64,
    /// Per-entry variance of the injected noise (0 when noiseless).
    pub noise_variance: f64,
}

impl SnapshotBlock {
    pub fn sensors(&self) -> usize {
        self.x.nrows()
    }

    pub fn snapshots(&self) -> usize {
        self.x.ncols()
    }

    /// Mean per-entry power `|x|^2`.
    pub fn mean_power(&self) -> f64 {
        self.x.iter().map(|z| z.norm_sqr()).sum::<f64>() / self.x.len() as f64
    }
}

/// Empirical or modelled spatial covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    pub sigma: DMatrix<Complex64>,
    pub snapshots: usize,
}

impl CovarianceMatrix {
    pub fn new(sigma: DMatrix<Complex64>, snapshots: usize) -> Result<Self> {
        if sigma.nrows() != sigma.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "covariance must be square, got {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        Ok(Self { sigma, snapshots })
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.sigma.norm_squared()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.sigma[(i, i)].re).sum()
    }

    /// Largest `|S - S^H|` entry.
    pub fn hermitian_defect(&self) -> f64 {
        let n = self.dim();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((self.sigma[(i, j)] - self.sigma[(j, i)].conj()).norm());
            }
        }
        worst
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.sigma.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Text dump: a comment header, then one row per line as
    /// `re im re im ...`.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# cmfuot covariance")?;
        writeln!(out, "# sensors {} snapshots {}", self.dim(), self.snapshots)?;
        for i in 0..self.dim() {
            let row: Vec<String> = (0..self.dim())
                .map(|j| {
                    let z = self.sigma[(i, j)];
                    format!("{} {}", z.re, z.im)
                })
                .collect();
            writeln!(out, "{}", row.join(" "))?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(input: R) -> Result<Self> {
        let mut snapshots = 0usize;
        let mut rows: Vec<Vec<Complex64>> = Vec::new();
        for line in input.lines() {
            let line = line?;
            let line = line.trim();
            if let Some(meta) = line.strip_prefix('#') {
                let words: Vec<&str> = meta.split_whitespace().collect();
                if let Some(pos) = words.iter().position(|w| *w == "snapshots") {
                    snapshots = words
                        .get(pos + 1)
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| Error::Parse("bad snapshots header".into()))?;
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let vals = line
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| Error::Parse(format!("{v}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() % 2 != 0 {
                return Err(Error::Parse("odd number of values in covariance row".into()));
            }
            rows.push(vals.chunks(2).map(|c| Complex64::new(c[0], c[1])).collect());
        }
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Parse("covariance file is not a square matrix".into()));
        }
        let sigma = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
        Self::new(sigma, snapshots)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_text(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_text(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Draws `snapshots` observations of uncorrelated sources with the given
/// steering vectors (columns of `steering`) and powers. Noiseless.
pub fn synthesize_snapshots(
    steering: &DMatrix<Complex64>,
    powers: &[f64],
    snapshots: usize,
    seed: u64,
) -> Result<SnapshotBlock> {
    if snapshots == 0 {
        return Err(Error::InvalidInput("snapshot count must be at least 1".into()));
    }
    if steering.ncols() != powers.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} steering vectors but {} powers",
            steering.ncols(),
            powers.len()
        )));
    }
    let mut rng = stream_rng(seed, SIGNAL_STREAM);
    let mut x = DMatrix::<Complex64>::zeros(steering.nrows(), snapshots);
    for l in 0..snapshots {
        for (k, &p) in powers.iter().enumerate() {
            let s = complex_gaussian(&mut rng, p);
            for i in 0..steering.nrows() {
                x[(i, l)] += steering[(i, k)] * s;
            }
        }
    }
    Ok(SnapshotBlock { x, seed, noise_variance: 0.0 })
}

/// Adds white circular Gaussian noise so that the mean per-entry signal
/// power over noise variance equals `snr_db`. `f64::INFINITY` leaves the
/// block untouched.
pub fn add_noise_for_snr(block: &SnapshotBlock, snr_db: f64, seed: u64) -> Result<SnapshotBlock> {
    if snr_db == f64::INFINITY {
        return Ok(block.clone());
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::InvalidInput(format!("SNR must be finite or +inf, got {snr_db}")));
    }
    let signal = block.mean_power();
    if signal == 0.0 {
        return Err(Error::UndefinedSnrReference);
    }
    let variance = signal * 10f64.powf(-snr_db / 10.0);
    let mut rng = stream_rng(seed, NOISE_STREAM);
    let mut x = block.x.clone();
    for z in x.iter_mut() {
        *z += complex_gaussian(&mut rng, variance);
    }
    Ok(SnapshotBlock { x, seed: block.seed, noise_variance: block.noise_variance + variance })
}

pub fn empirical_covariance(block: &SnapshotBlock) -> CovarianceMatrix {
    let l = block.snapshots() as f64;
    let raw = &block.x * block.x.adjoint() / Complex64::new(l, 0.0);
    let sigma = (&raw + raw.adjoint()) * Complex64::new(0.5, 0.0);
    CovarianceMatrix { sigma, snapshots: block.snapshots() }
}

/// `G diag(b) G^H + sigma2 I`.
pub fn model_covariance(g: &TransferMatrix, b: &[f64], sigma2: f64) -> Result<CovarianceMatrix> {
    if b.len() != g.points() {
        return Err(Error::DimensionMismatch(format!(
            "power vector has {} entries, transfer matrix {} columns",
            b.len(),
            g.points()
        )));
    }
    if let Some(v) = b.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidInput(format!("powers must be nonnegative, got {v}")));
    }
    if !(sigma2 >= 0.0) {
        return Err(Error::InvalidInput(format!("noise variance must be nonnegative, got {sigma2}")));
    }
    let n = g.sensors();
    let mut r = DMatrix::<Complex64>::zeros(n, n);
    for (m, &bm) in b.iter().enumerate() {
        if bm == 0.0 {
            continue;
        }
        accumulate_outer(&mut r, g.column(m), bm);
    }
    for i in 0..n {
        r[(i, i)] += sigma2;
    }
    Ok(CovarianceMatrix { sigma: r, snapshots: 0 })
}

/// `r += w * v v^H`, filling both triangles from the upper one so the result
/// stays exactly Hermitian.
pub(crate) fn accumulate_outer(r: &mut DMatrix<Complex64>, v: &[Complex64], w: f64) {
    let n = v.len();
    for j in 0..n {
        let vj = v[j].conj() * w;
        for i in 0..j {
            let t = v[i] * vj;
            r[(i, j)] += t;
            r[(j, i)] += t.conj();
        }
        r[(j, j)] += v[j].norm_sqr() * w;
    }
}
