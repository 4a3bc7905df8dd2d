//! Patch harvesting and the energy basis.
//!
//! Every `s_p × s_p` window of a harvested perturbation is flattened to a
//! `c·s_p²` vector `p`, and a streaming accumulator maintains the raw
//! second-moment matrix `K = Σ p pᵀ` (no mean subtraction) together with
//! the window count. Eigendecomposition of `K` then yields the orthonormal
//! eigenpatches `u_i` and their energies `σ_i`; sampling an eigenpatch with
//! probability `σ_i / Σσ` is the transfer prior the black-box attack runs
//! on. The accumulator is mergeable, so disjoint harvests can be summed
//! exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::linalg::{sym_eig, LinalgError, Matrix};
use crate::util::{
    expect_eof, expect_magic, malformed, read_f64_vec_le, read_u32_le, write_f64_le, write_u32_le,
    ParseError,
};
use crate::whitebox::Perturbation;

pub const BASIS_MAGIC: &[u8; 8] = b"EABASIS1";

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("accumulator holds no patches")]
    EmptyAccumulator,
    #[error("all energies are zero; the basis cannot be sampled")]
    DegenerateBasis,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("basis format error in {path}: {msg}")]
    Format { path: String, msg: String },
}

impl BasisError {
    fn from_parse(e: ParseError, path: &Path) -> Self {
        let path = path.display().to_string();
        match e {
            ParseError::Io(source) => BasisError::Io { path, source },
            ParseError::Malformed(msg) => BasisError::Format { path, msg },
        }
    }
}

/// Streaming second-moment accumulator over flattened perturbation patches.
#[derive(Debug, Clone)]
pub struct CovAccumulator {
    channels: usize,
    patch_side: usize,
    second_moment: Matrix,
    count: u64,
}

impl CovAccumulator {
    pub fn new(channels: usize, patch_side: usize) -> Self {
        let dim = channels * patch_side * patch_side;
        CovAccumulator {
            channels,
            patch_side,
            second_moment: Matrix::zeros(dim, dim),
            count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.channels * self.patch_side * self.patch_side
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn patch_side(&self) -> usize {
        self.patch_side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// The accumulated `Σ p pᵀ` matrix.
    pub fn second_moment(&self) -> &Matrix {
        &self.second_moment
    }

    /// Slide an `s_p × s_p` window over the perturbation with the given
    /// stride and add every flattened patch's outer product. Returns the
    /// number of windows added.
    pub fn accumulate(&mut self, delta: &Perturbation, stride: usize) -> Result<usize, BasisError> {
        if stride == 0 {
            return Err(BasisError::InvalidInput("stride must be >= 1".to_string()));
        }
        if delta.channels != self.channels {
            return Err(BasisError::InvalidInput(format!(
                "perturbation has {} channels, accumulator expects {}",
                delta.channels, self.channels
            )));
        }
        let s = self.patch_side;
        if delta.height < s || delta.width < s {
            return Err(BasisError::InvalidInput(format!(
                "image {}x{} is smaller than the {s}x{s} patch",
                delta.height, delta.width
            )));
        }
        let dim = self.dim();
        let mut patch = vec![0.0; dim];
        let mut added = 0;
        let mut y = 0;
        while y + s <= delta.height {
            let mut x = 0;
            while x + s <= delta.width {
                flatten_window(delta, y, x, s, &mut patch);
                add_outer(&mut self.second_moment, &patch);
                self.count += 1;
                added += 1;
                x += stride;
            }
            y += stride;
        }
        let _ = dim;
        Ok(added)
    }

    /// Add a single already-flattened patch vector.
    pub fn accumulate_vector(&mut self, patch: &[f64]) -> Result<(), BasisError> {
        if patch.len() != self.dim() {
            return Err(BasisError::InvalidInput(format!(
                "patch length {} does not match dimension {}",
                patch.len(),
                self.dim()
            )));
        }
        add_outer(&mut self.second_moment, patch);
        self.count += 1;
        Ok(())
    }

    /// Exact merge of an accumulator over a disjoint patch set.
    pub fn merge(&mut self, other: &CovAccumulator) -> Result<(), BasisError> {
        if other.channels != self.channels || other.patch_side != self.patch_side {
            return Err(BasisError::InvalidInput(
                "accumulator shapes do not match".to_string(),
            ));
        }
        for (a, b) in self
            .second_moment
            .data_mut()
            .iter_mut()
            .zip(other.second_moment.data())
        {
            *a += b;
        }
        self.count += other.count;
        Ok(())
    }

    /// Eigendecompose the (symmetrized) second moment into an energy basis.
    /// Round-off can leave tiny negative eigenvalues on a PSD matrix; they
    /// are clamped to zero.
    pub fn extract_basis(&self, source: &str) -> Result<EnergyBasis, BasisError> {
        if self.count == 0 {
            return Err(BasisError::EmptyAccumulator);
        }
        let eig = sym_eig(&self.second_moment)?;
        let energies: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
        Ok(EnergyBasis {
            channels: self.channels,
            patch_side: self.patch_side,
            energies,
            vectors: eig.eigenvectors,
            source: source.to_string(),
        })
    }
}

fn flatten_window(delta: &Perturbation, y0: usize, x0: usize, s: usize, out: &mut [f64]) {
    let (h, w) = (delta.height, delta.width);
    let mut i = 0;
    for ch in 0..delta.channels {
        let base = ch * h * w;
        for dy in 0..s {
            let row = base + (y0 + dy) * w + x0;
            out[i..i + s].copy_from_slice(&delta.delta[row..row + s]);
            i += s;
        }
    }
}

fn add_outer(k: &mut Matrix, p: &[f64]) {
    let dim = p.len();
    let data = k.data_mut();
    for i in 0..dim {
        let pi = p[i];
        if pi == 0.0 {
            continue;
        }
        let row = i * dim;
        for j in 0..dim {
            data[row + j] += pi * p[j];
        }
    }
}

/// Orthonormal eigenpatches with their energies, sorted by energy
/// descending. `vectors` holds the eigenpatches as columns; each one
/// reshapes to a `c × s_p × s_p` image patch.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyBasis {
    pub channels: usize,
    pub patch_side: usize,
    pub energies: Vec<f64>,
    pub vectors: Matrix,
    pub source: String,
}

impl EnergyBasis {
    pub fn dim(&self) -> usize {
        self.channels * self.patch_side * self.patch_side
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    pub fn total_energy(&self) -> f64 {
        self.energies.iter().sum()
    }

    /// The `i`-th eigenpatch as an owned vector.
    pub fn vector(&self, i: usize) -> Vec<f64> {
        self.vectors.column(i)
    }

    /// Draw an eigenpatch index with probability `σ_i / Σσ`.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize, BasisError> {
        let total = self.total_energy();
        if total <= 0.0 || !total.is_finite() {
            return Err(BasisError::DegenerateBasis);
        }
        let u = rng.random::<f64>() * total;
        let mut cum = 0.0;
        for (i, &e) in self.energies.iter().enumerate() {
            cum += e;
            if u < cum {
                return Ok(i);
            }
        }
        // Rounding may leave u == total; return the last positive-energy entry.
        let last = self
            .energies
            .iter()
            .rposition(|&e| e > 0.0)
            .expect("total energy > 0 implies a positive entry");
        Ok(last)
    }

    /// Draw an eigenpatch with probability proportional to its energy.
    pub fn sample_patch<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>, BasisError> {
        Ok(self.vector(self.sample_index(rng)?))
    }

    pub fn save(&self, path: &Path) -> Result<(), BasisError> {
        let file = File::create(path).map_err(|source| BasisError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|source| BasisError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(BASIS_MAGIC)?;
        write_u32_le(w, self.channels as u32)?;
        write_u32_le(w, self.patch_side as u32)?;
        let n = self.len();
        write_u32_le(w, n as u32)?;
        for &e in &self.energies {
            write_f64_le(w, e)?;
        }
        // Eigenvector matrix in column-major order.
        for col in 0..n {
            for row in 0..n {
                write_f64_le(w, self.vectors.get(row, col))?;
            }
        }
        let tag = self.source.as_bytes();
        write_u32_le(w, tag.len() as u32)?;
        w.write_all(tag)?;
        w.flush()
    }

    pub fn load(path: &Path) -> Result<EnergyBasis, BasisError> {
        let file = File::open(path).map_err(|source| BasisError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut r = BufReader::new(file);
        EnergyBasis::read_from(&mut r).map_err(|e| BasisError::from_parse(e, path))
    }

    fn read_from<R: Read>(r: &mut R) -> Result<EnergyBasis, ParseError> {
        expect_magic(r, BASIS_MAGIC)?;
        let channels = read_u32_le(r)? as usize;
        let patch_side = read_u32_le(r)? as usize;
        let n = read_u32_le(r)? as usize;
        if channels == 0 || patch_side == 0 {
            return Err(malformed("zero channel count or patch side"));
        }
        if n != channels * patch_side * patch_side {
            return Err(malformed(format!(
                "basis size {n} does not equal c*s_p^2 = {}",
                channels * patch_side * patch_side
            )));
        }
        if n > crate::linalg::MAX_SYM_EIG_DIM {
            return Err(malformed(format!("basis size {n} is implausibly large")));
        }
        let energies = read_f64_vec_le(r, n)?;
        if energies.iter().any(|e| !e.is_finite() || *e < 0.0) {
            return Err(malformed("energies must be finite and non-negative"));
        }
        for pair in energies.windows(2) {
            if pair[0] < pair[1] {
                return Err(malformed("energies are not sorted descending"));
            }
        }
        let col_major = read_f64_vec_le(r, n * n)?;
        if col_major.iter().any(|v| !v.is_finite()) {
            return Err(malformed("eigenvectors must be finite"));
        }
        let mut vectors = Matrix::zeros(n, n);
        for col in 0..n {
            for row in 0..n {
                vectors.set(row, col, col_major[col * n + row]);
            }
        }
        let tag_len = read_u32_le(r)? as usize;
        if tag_len > 4096 {
            return Err(malformed("source tag is implausibly long"));
        }
        let mut tag = vec![0u8; tag_len];
        r.read_exact(&mut tag)?;
        let source = String::from_utf8(tag).map_err(|_| malformed("source tag is not UTF-8"))?;
        expect_eof(r)?;
        Ok(EnergyBasis {
            channels,
            patch_side,
            energies,
            vectors,
            source,
        })
    }
}
