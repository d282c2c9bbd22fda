//! Trajectory data from the white-noise model `dX = S dt + sigma dW`.
//!
//! The primary sampler draws the basis coefficients `x_i(l) ~ N(0, B_l)`
//! directly, with `B_l = K^(l) + sigma^2 I`. The path sampler simulates
//! discretized trajectories and integrates the basis against them; it exists
//! to cross-check the coefficient sampler.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::{cosine, project_kernel, KernelSpec, SymKernelMatrix};
use crate::error::{check_level, Error, Result};
use crate::scalar::Real;

/// Relative eigenvalue floor when forming `B_l^(1/2)`.
pub const SQRT_CLIP_REL: f64 = 1e-12;

/// Kernel plus noise level.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Real"))]
pub struct ModelSpec<T> {
    pub kernel: KernelSpec<T>,
    sigma: T,
}

impl<T: Real> ModelSpec<T> {
    pub fn new(kernel: KernelSpec<T>, sigma: T) -> Result<Self> {
        if !(sigma > T::zero()) || !sigma.is_finite() {
            return Err(Error::Domain(format!(
                "noise level sigma must be positive, got {sigma}"
            )));
        }
        Ok(ModelSpec { kernel, sigma })
    }

    pub fn sigma(&self) -> T {
        self.sigma
    }

    pub fn sigma2(&self) -> T {
        self.sigma * self.sigma
    }

    /// `lambda_max + sigma^2`, the spectral norm bound of `B_l`.
    pub fn lambda_plus_sigma2(&self) -> T {
        self.kernel.lambda_max() + self.sigma2()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("model spec serializes");
        hex::encode(Sha256::digest(&json))
    }
}

impl<'de, T: Real> Deserialize<'de> for ModelSpec<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(bound = "T: Real")]
        struct Doc<T> {
            kernel: KernelSpec<T>,
            sigma: T,
        }
        let doc = Doc::<T>::deserialize(d)?;
        ModelSpec::new(doc.kernel, doc.sigma).map_err(serde::de::Error::custom)
    }
}

/// `B_l = K^(l) + sigma^2 I`, the covariance of `x_i(l)`.
pub fn covariance_at_level<T: Real>(model: &ModelSpec<T>, l: usize) -> Result<SymKernelMatrix<T>> {
    Ok(project_kernel(&model.kernel, l)?.shifted(model.sigma2()))
}

/// Counter-based seeding: a master seed plus a ChaCha stream id.
///
/// The same `(master_seed, stream)` always reproduces the same draws, and
/// distinct streams are independent keystreams of the same cipher key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngPolicy {
    pub master_seed: u64,
    pub stream: u64,
}

impl RngPolicy {
    pub fn new(master_seed: u64) -> Self {
        RngPolicy {
            master_seed,
            stream: 0,
        }
    }

    pub fn with_stream(master_seed: u64, stream: u64) -> Self {
        RngPolicy {
            master_seed,
            stream,
        }
    }

    /// Substream for replication `index` of this policy.
    pub fn replication(&self, index: u64) -> Self {
        RngPolicy {
            master_seed: self.master_seed,
            stream: splitmix64(self.stream ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d))),
        }
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream);
        rng
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Reproducibility metadata carried by a [`SampleSet`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub stream: u64,
    pub model_hash: String,
}

/// `n x l` matrix of basis coefficients, row `i` holding `x_i(l)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet<T> {
    n: usize,
    level: usize,
    coeffs: Vec<T>,
    pub seed_record: Option<SeedRecord>,
}

impl<T: Real> SampleSet<T> {
    pub fn from_row_major(n: usize, level: usize, coeffs: Vec<T>) -> Result<Self> {
        if coeffs.len() != n * level {
            return Err(Error::Domain(format!(
                "{} coefficients do not form a {n} x {level} sample",
                coeffs.len()
            )));
        }
        Ok(SampleSet {
            n,
            level,
            coeffs,
            seed_record: None,
        })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let level = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != level) {
            return Err(Error::Domain("sample rows must have equal length".into()));
        }
        Self::from_row_major(rows.len(), level, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.coeffs[i * self.level..(i + 1) * self.level]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        (0..self.n).map(move |i| self.row(i))
    }

    pub fn as_row_major(&self) -> &[T] {
        &self.coeffs
    }

    /// First `level` coefficients of each row.
    pub fn truncated(&self, level: usize) -> Result<Self> {
        check_level("sample level", level, self.level)?;
        if level == self.level {
            return Ok(self.clone());
        }
        let coeffs = self
            .rows()
            .flat_map(|r| r[..level].iter().copied())
            .collect();
        Ok(SampleSet {
            n: self.n,
            level,
            coeffs,
            seed_record: self.seed_record.clone(),
        })
    }

    /// Rows `range`, copied verbatim.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> Self {
        assert!(range.end <= self.n, "row range beyond sample");
        SampleSet {
            n: range.len(),
            level: self.level,
            coeffs: self.coeffs[range.start * self.level..range.end * self.level].to_vec(),
            seed_record: self.seed_record.clone(),
        }
    }

    /// `(rows 0..ceil(n/2), rows ceil(n/2)..n)`.
    pub fn split_halves(&self) -> (Self, Self) {
        let first = self.n.div_ceil(2);
        (self.slice_rows(0..first), self.slice_rows(first..self.n))
    }

    /// CSV with a header `x1,...,xl` and 17 significant digits per value.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        let header: Vec<String> = (1..=self.level).map(|k| format!("x{k}")).collect();
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        for row in self.rows() {
            let cells: Vec<String> = row.iter().map(|v| fmt_f64(v.as_f64())).collect();
            writeln!(w, "{}", cells.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse {
            path: path.into(),
            message: e.to_string(),
        })?;
        let level = reader
            .headers()
            .map_err(|e| Error::Parse {
                path: path.into(),
                message: e.to_string(),
            })?
            .len();
        let mut coeffs = Vec::new();
        let mut n = 0;
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse {
                path: path.into(),
                message: e.to_string(),
            })?;
            for field in rec.iter() {
                let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                    path: path.into(),
                    message: format!("row {}: `{field}` is not a number", i + 1),
                })?;
                coeffs.push(T::from_f64(v).ok_or_else(|| Error::Parse {
                    path: path.into(),
                    message: format!("row {}: `{field}` out of range", i + 1),
                })?);
            }
            n += 1;
        }
        Self::from_row_major(n, level, coeffs)
    }

    /// JSON sidecar `{seed, stream, model_hash, n, l}`.
    pub fn sidecar(&self) -> SampleSidecar {
        let rec = self.seed_record.clone();
        SampleSidecar {
            seed: rec.as_ref().map(|r| r.seed),
            stream: rec.as_ref().map(|r| r.stream),
            model_hash: rec.map(|r| r.model_hash),
            n: self.n,
            l: self.level,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub seed: Option<u64>,
    pub stream: Option<u64>,
    pub model_hash: Option<String>,
    pub n: usize,
    pub l: usize,
}

/// Scientific notation with 17 significant digits; parses back bit-exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Reusable `x = B_l^(1/2) z` sampler for one `(model, l)` pair.
#[derive(Clone, Debug)]
pub struct CoeffSampler<T> {
    level: usize,
    root: SymKernelMatrix<T>,
    seed_hash: String,
}

impl<T: Real> CoeffSampler<T> {
    pub fn new(model: &ModelSpec<T>, l: usize) -> Result<Self> {
        let b = covariance_at_level(model, l)?;
        let root = b.psd_sqrt(T::c(SQRT_CLIP_REL))?;
        Ok(CoeffSampler {
            level: l,
            root,
            seed_hash: model.hash(),
        })
    }

    pub fn root(&self) -> &SymKernelMatrix<T> {
        &self.root
    }

    pub fn sample(&self, n: usize, rng: &RngPolicy) -> SampleSet<T> {
        let l = self.level;
        let mut gen = rng.rng();
        let root = self.root.as_row_major();
        let mut coeffs = vec![T::zero(); n * l];
        let mut z = vec![T::zero(); l];
        for row in coeffs.chunks_mut(l.max(1)).take(n) {
            z.iter_mut()
                .for_each(|zi| *zi = T::standard_normal(&mut gen));
            for (j, out) in row.iter_mut().enumerate() {
                let r = &root[j * l..(j + 1) * l];
                *out = r.iter().zip(&z).map(|(&a, &b)| a * b).sum();
            }
        }
        SampleSet {
            n,
            level: l,
            coeffs,
            seed_record: Some(SeedRecord {
                seed: rng.master_seed,
                stream: rng.stream,
                model_hash: self.seed_hash.clone(),
            }),
        }
    }
}

/// `n` i.i.d. rows `x_i(l) = B_l^(1/2) Z_i`.
pub fn sample_coeffs<T: Real>(
    model: &ModelSpec<T>,
    n: usize,
    l: usize,
    rng: &RngPolicy,
) -> Result<SampleSet<T>> {
    if n == 0 {
        return Err(Error::Domain("sample size must be at least 1".into()));
    }
    Ok(CoeffSampler::new(model, l)?.sample(n, rng))
}

/// Minimum grid size for the path sampler.
pub const MIN_GRID_SIZE: usize = 256;

/// Simulates `n` discretized trajectories on a uniform grid of `grid_size`
/// cells and returns `sum_j e_k(t_j) dX_j` for `k = 1..l`.
///
/// Signal: `S = sum_m sqrt(lambda_m) xi_m phi_m`. Increments use the
/// left-endpoint Euler scheme `dX_j = S(t_j) dt + sigma dW_j`, and the basis
/// is evaluated at left endpoints, matching the Ito sum.
pub fn sample_paths_and_integrate<T: Real>(
    model: &ModelSpec<T>,
    n: usize,
    l: usize,
    grid_size: usize,
    rng: &RngPolicy,
) -> Result<SampleSet<T>> {
    check_level("level", l, model.kernel.l_max())?;
    if grid_size < MIN_GRID_SIZE {
        return Err(Error::bounds(
            "grid_size",
            grid_size,
            MIN_GRID_SIZE,
            usize::MAX,
        ));
    }
    if n == 0 {
        return Err(Error::Domain("sample size must be at least 1".into()));
    }
    let kernel = &model.kernel;
    let r = kernel.rank();
    let dt = T::one() / T::from_usize_lossy(grid_size);
    let noise_scale = model.sigma() * dt.sqrt();
    let nodes: Vec<T> = (0..grid_size)
        .map(|j| T::from_usize_lossy(j) * dt)
        .collect();
    let basis: Vec<Vec<T>> = (1..=l)
        .map(|k| nodes.iter().map(|&t| cosine(k, t)).collect())
        .collect();
    let phi: Vec<Vec<T>> = (0..r)
        .map(|m| nodes.iter().map(|&t| kernel.eigenfunction(m, t)).collect())
        .collect();
    let amp: Vec<T> = kernel.eigenvalues().iter().map(|v| v.sqrt()).collect();

    let mut gen = rng.rng();
    let mut coeffs = Vec::with_capacity(n * l);
    let mut dx = vec![T::zero(); grid_size];
    let mut xi = vec![T::zero(); r];
    for _ in 0..n {
        xi.iter_mut()
            .for_each(|x| *x = T::standard_normal(&mut gen));
        for (j, d) in dx.iter_mut().enumerate() {
            let signal: T = (0..r).map(|m| amp[m] * xi[m] * phi[m][j]).sum();
            *d = signal * dt + noise_scale * T::standard_normal(&mut gen);
        }
        for ek in &basis {
            coeffs.push(ek.iter().zip(&dx).map(|(&e, &d)| e * d).sum());
        }
    }
    let mut out = SampleSet::from_row_major(n, l, coeffs)?;
    out.seed_record = Some(SeedRecord {
        seed: rng.master_seed,
        stream: rng.stream,
        model_hash: model.hash(),
    });
    Ok(out)
}

/// Coefficients `int e_k dX`, `k = 1..horizon`, of one trajectory drawn from
/// the spectral representation; `horizon` may exceed the kernel's `l_max`
/// (the signal has no coefficients there).
pub fn sample_trajectory_coeffs<T: Real, R: rand::Rng + ?Sized>(
    model: &ModelSpec<T>,
    horizon: usize,
    rng: &mut R,
) -> Vec<T> {
    let kernel = &model.kernel;
    let mut x: Vec<T> = (0..horizon)
        .map(|_| model.sigma() * T::standard_normal(rng))
        .collect();
    for (lam, row) in kernel.eigenvalues().iter().zip(kernel.eigvec_coeffs()) {
        let a = lam.sqrt() * T::standard_normal(rng);
        for (xk, &c) in x.iter_mut().zip(row) {
            *xk += a * c;
        }
    }
    x
}
