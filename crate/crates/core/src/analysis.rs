//! Transferability analytics and benchmark metrics: top-energy patch
//! selection, pairwise cosine-similarity grids between bases, ASR/query
//! summaries, and PGM/CSV exports of the similarity heatmaps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::attack::AttackRecord;
use crate::basis::EnergyBasis;
use crate::linalg::{cosine_similarity, Matrix};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> AnalysisError {
    AnalysisError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Vectors with energy below this fraction of the top energy count as
/// numerically rank-deficient and are replaced by zero padding.
const EFFECTIVE_ENERGY_RATIO: f64 = 1e-12;

/// The first ⌈n/3⌉ eigenpatches by descending energy. If the basis has
/// fewer effective vectors than that (mathematically or numerically low
/// rank), the list is padded with zero vectors to the target count.
pub fn top_third(basis: &EnergyBasis) -> Vec<Vec<f64>> {
    let n = basis.len();
    let want = n.div_ceil(3);
    let top = basis.energies.first().copied().unwrap_or(0.0);
    let mut out = Vec::with_capacity(want);
    for i in 0..want {
        let effective = top > 0.0 && basis.energies[i] > EFFECTIVE_ENERGY_RATIO * top;
        if effective {
            out.push(basis.vector(i));
        } else {
            out.push(vec![0.0; basis.dim()]);
        }
    }
    out
}

/// Pairwise |cosine| block between two equally sized patch lists; entry
/// `(i, j)` compares `a[i]` with `b[j]`. Zero vectors yield 0. Set
/// `signed` to keep the raw cosine instead of its absolute value.
pub fn pairwise_similarity_with(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    signed: bool,
) -> Result<Matrix, AnalysisError> {
    if a.len() != b.len() {
        return Err(AnalysisError::Shape(format!(
            "patch lists have different counts: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dim = a.first().or_else(|| b.first()).map(Vec::len).unwrap_or(0);
    if a.iter().chain(b).any(|v| v.len() != dim) {
        return Err(AnalysisError::Shape(
            "patch vectors have inconsistent lengths (bases must share c*s_p^2)".to_string(),
        ));
    }
    let mut m = Matrix::zeros(a.len(), b.len());
    for (i, va) in a.iter().enumerate() {
        for (j, vb) in b.iter().enumerate() {
            let cos = cosine_similarity(va, vb).map_err(|e| AnalysisError::Shape(e.to_string()))?;
            m.set(i, j, if signed { cos } else { cos.abs() });
        }
    }
    Ok(m)
}

/// Absolute pairwise cosine block (the default reported form; eigenvector
/// signs are arbitrary, so only |cos| is meaningful between bases).
pub fn pairwise_similarity(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Matrix, AnalysisError> {
    pairwise_similarity_with(a, b, false)
}

/// A labeled similarity grid over the concatenated patch lists of several
/// bases. Labels are `tag#rank`, one per row/column.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub labels: Vec<String>,
    pub matrix: Matrix,
}

/// Build the full pairwise grid over the top-third patches of the given
/// tagged bases.
pub fn similarity_grid(
    tagged: &[(String, Vec<Vec<f64>>)],
    signed: bool,
) -> Result<SimilarityMatrix, AnalysisError> {
    if tagged.is_empty() {
        return Err(AnalysisError::InvalidInput("no bases given".to_string()));
    }
    let mut labels = Vec::new();
    let mut patches: Vec<&Vec<f64>> = Vec::new();
    for (tag, list) in tagged {
        for (rank, v) in list.iter().enumerate() {
            labels.push(format!("{tag}#{rank}"));
            patches.push(v);
        }
    }
    let dim = patches.first().map(|v| v.len()).unwrap_or(0);
    if patches.iter().any(|v| v.len() != dim) {
        return Err(AnalysisError::Shape(
            "bases disagree on patch dimension c*s_p^2".to_string(),
        ));
    }
    let n = patches.len();
    let mut matrix = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let cos = cosine_similarity(patches[i], patches[j])
                .map_err(|e| AnalysisError::Shape(e.to_string()))?;
            matrix.set(i, j, if signed { cos } else { cos.abs() });
        }
    }
    Ok(SimilarityMatrix { labels, matrix })
}

/// Mean |cos| of `pairs` random unit-vector pairs in the given dimension:
/// the Monte-Carlo baseline a transferring basis must beat. Concentrates
/// near √(2/(π·dim)).
pub fn random_direction_baseline<R: Rng + ?Sized>(dim: usize, pairs: usize, rng: &mut R) -> f64 {
    assert!(dim >= 1 && pairs >= 1);
    let mut total = 0.0;
    for _ in 0..pairs {
        let a = random_unit(dim, rng);
        let b = random_unit(dim, rng);
        total += cosine_similarity(&a, &b).expect("equal lengths").abs();
    }
    total / pairs as f64
}

fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    // Box-Muller pairs give an isotropic Gaussian; normalize to the sphere.
    loop {
        let mut v = Vec::with_capacity(dim);
        while v.len() < dim {
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random::<f64>();
            let r = (-2.0 * u1.ln()).sqrt();
            v.push(r * (2.0 * std::f64::consts::PI * u2).cos());
            if v.len() < dim {
                v.push(r * (2.0 * std::f64::consts::PI * u2).sin());
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            v.iter_mut().for_each(|x| *x /= norm);
            return v;
        }
    }
}

/// Benchmark statistics over one batch of attack records. Query statistics
/// cover successful attacks only (the standard convention; switchable via
/// [`summarize_with`]) and are absent when nothing succeeded.
#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkSummary {
    /// Attack success rate in percent.
    pub asr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_queries: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_queries: Option<f64>,
    pub n_images: usize,
    pub n_success: usize,
}

/// Summarize with the default successful-only query statistics.
pub fn summarize(records: &[AttackRecord]) -> Result<BenchmarkSummary, AnalysisError> {
    summarize_with(records, false)
}

/// Summarize records. With `include_failures`, failed attacks contribute
/// their full consumed budget to the query statistics.
pub fn summarize_with(
    records: &[AttackRecord],
    include_failures: bool,
) -> Result<BenchmarkSummary, AnalysisError> {
    if records.is_empty() {
        return Err(AnalysisError::InvalidInput(
            "no records to summarize".to_string(),
        ));
    }
    let n_images = records.len();
    let n_success = records.iter().filter(|r| r.success).count();
    let mut queries: Vec<u64> = records
        .iter()
        .filter(|r| include_failures || r.success)
        .map(|r| r.queries)
        .collect();
    queries.sort_unstable();
    let (avg, med) = if queries.is_empty() {
        (None, None)
    } else {
        let avg = queries.iter().sum::<u64>() as f64 / queries.len() as f64;
        // Lower-middle median for even counts: deterministic and integral.
        let med = queries[(queries.len() - 1) / 2] as f64;
        (Some(avg), Some(med))
    };
    Ok(BenchmarkSummary {
        asr: 100.0 * n_success as f64 / n_images as f64,
        avg_queries: avg,
        median_queries: med,
        n_images,
        n_success,
    })
}

/// Write the grid as an 8-bit binary PGM (P5, maxval 255), quantizing each
/// entry as `round(255·v)` after clamping to `[0, 1]`.
pub fn export_heatmap_pgm(m: &SimilarityMatrix, path: &Path) -> Result<(), AnalysisError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let (rows, cols) = (m.matrix.rows(), m.matrix.cols());
    write!(w, "P5\n{cols} {rows}\n255\n").map_err(|e| io_err(path, e))?;
    let bytes: Vec<u8> = m
        .matrix
        .data()
        .iter()
        .map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
        .collect();
    w.write_all(&bytes).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

/// Write the grid as CSV: a header row of labels (leading empty cell),
/// then one labeled row per matrix row.
pub fn export_csv(m: &SimilarityMatrix, path: &Path) -> Result<(), AnalysisError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header = vec![String::new()];
    header.extend(m.labels.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for r in 0..m.matrix.rows() {
        let mut row = vec![m.labels[r].clone()];
        for c in 0..m.matrix.cols() {
            row.push(format!("{}", m.matrix.get(r, c)));
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> AnalysisError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => io_err(path, source),
        other => AnalysisError::InvalidInput(format!("csv write failed: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn basis_with_energies(energies: Vec<f64>, dim: usize) -> EnergyBasis {
        EnergyBasis {
            channels: dim,
            patch_side: 1,
            energies,
            vectors: Matrix::identity(dim),
            source: "t".to_string(),
        }
    }

    fn record(success: bool, queries: u64) -> AttackRecord {
        AttackRecord {
            image_id: 0,
            success,
            queries,
            final_margin: if success { 0.5 } else { -0.5 },
            loss_history: vec![],
        }
    }

    #[test]
    fn top_third_counts_and_padding() {
        // n = 25 -> 9 patches.
        let energies: Vec<f64> = (0..25).map(|i| (25 - i) as f64).collect();
        let b = basis_with_energies(energies, 25);
        let top = top_third(&b);
        assert_eq!(top.len(), 9);
        for (rank, v) in top.iter().enumerate() {
            // Identity basis: rank r selects coordinate r.
            assert_eq!(v[rank], 1.0);
        }
        // Rank-1 basis: u1 then zero padding.
        let mut energies = vec![0.0; 25];
        energies[0] = 3.0;
        let b = basis_with_energies(energies, 25);
        let top = top_third(&b);
        assert_eq!(top.len(), 9);
        assert_eq!(top[0][0], 1.0);
        for v in &top[1..] {
            assert!(v.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn pairwise_identity_block() {
        let patches: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                let mut v = vec![0.0; 6];
                v[i] = 1.0;
                v
            })
            .collect();
        let m = pairwise_similarity(&patches, &patches).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn pairwise_rejects_mismatch() {
        let a = vec![vec![1.0, 0.0]];
        let b = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(pairwise_similarity(&a, &b).is_err());
        let c = vec![vec![1.0, 0.0, 0.0]];
        let d = vec![vec![1.0, 0.0]];
        assert!(pairwise_similarity(&c, &d).is_err());
    }

    #[test]
    fn sign_flip_invariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let a: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..8).map(|_| rng.random::<f64>() - 0.5).collect())
            .collect();
        let b: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..8).map(|_| rng.random::<f64>() - 0.5).collect())
            .collect();
        let m1 = pairwise_similarity(&a, &b).unwrap();
        let flipped: Vec<Vec<f64>> = b
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let s = if i % 2 == 0 { -1.0 } else { 1.0 };
                v.iter().map(|x| s * x).collect()
            })
            .collect();
        let m2 = pairwise_similarity(&a, &flipped).unwrap();
        assert_eq!(m1.data(), m2.data());
    }

    #[test]
    fn random_pairs_concentrate_near_theory() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let d = 75;
        let mc = random_direction_baseline(d, 10_000, &mut rng);
        let theory = (2.0 / (std::f64::consts::PI * d as f64)).sqrt();
        assert!(
            (mc - theory).abs() < 0.15 * theory,
            "mc {mc} vs theory {theory}"
        );
    }

    #[test]
    fn summarize_cases() {
        // All succeed at one query.
        let recs: Vec<AttackRecord> = (0..5).map(|_| record(true, 1)).collect();
        let s = summarize(&recs).unwrap();
        assert_eq!(s.asr, 100.0);
        assert_eq!(s.avg_queries, Some(1.0));
        assert_eq!(s.median_queries, Some(1.0));

        // (1, 3, fail, 5): ASR 75, avg 3, med 3.
        let recs = vec![
            record(true, 1),
            record(true, 3),
            record(false, 100),
            record(true, 5),
        ];
        let s = summarize(&recs).unwrap();
        assert_eq!(s.asr, 75.0);
        assert_eq!(s.avg_queries, Some(3.0));
        assert_eq!(s.median_queries, Some(3.0));
        assert_eq!(s.n_success, 3);

        // Nothing succeeded: stats absent.
        let recs = vec![record(false, 100), record(false, 100)];
        let s = summarize(&recs).unwrap();
        assert_eq!(s.asr, 0.0);
        assert!(s.avg_queries.is_none() && s.median_queries.is_none());
        let json = serde_json::to_string(&s).unwrap();
        assert!(
            !json.contains("avg_queries"),
            "absent fields are omitted: {json}"
        );

        // Lower-middle median on even counts.
        let recs = vec![record(true, 2), record(true, 8)];
        assert_eq!(summarize(&recs).unwrap().median_queries, Some(2.0));

        // Include-failures convention counts the burned budget.
        let recs = vec![record(true, 1), record(false, 100)];
        assert_eq!(summarize_with(&recs, true).unwrap().avg_queries, Some(50.5));

        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn summarize_is_permutation_invariant() {
        let mut recs = vec![
            record(true, 7),
            record(false, 9),
            record(true, 2),
            record(true, 4),
        ];
        let a = summarize(&recs).unwrap();
        recs.reverse();
        let b = summarize(&recs).unwrap();
        assert_eq!(a.asr, b.asr);
        assert_eq!(a.avg_queries, b.avg_queries);
        assert_eq!(a.median_queries, b.median_queries);
    }

    fn parse_pgm(bytes: &[u8]) -> (usize, usize, Vec<u8>) {
        let header_end = bytes
            .windows(1)
            .enumerate()
            .scan(0, |newlines, (i, w)| {
                if w[0] == b'\n' {
                    *newlines += 1;
                }
                Some((*newlines, i))
            })
            .find(|(n, _)| *n == 3)
            .map(|(_, i)| i + 1)
            .unwrap();
        let header = std::str::from_utf8(&bytes[..header_end]).unwrap();
        let mut lines = header.lines();
        assert_eq!(lines.next().unwrap(), "P5");
        let dims: Vec<usize> = lines
            .next()
            .unwrap()
            .split_whitespace()
            .map(|t| t.parse().unwrap())
            .collect();
        assert_eq!(lines.next().unwrap(), "255");
        (dims[1], dims[0], bytes[header_end..].to_vec())
    }

    #[test]
    fn pgm_roundtrip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let labels = vec!["a".to_string(), "b".to_string()];
        let matrix = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 0.25]]);
        let sim = SimilarityMatrix { labels, matrix };
        let path = dir.path().join("heat.pgm");
        export_heatmap_pgm(&sim, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let (rows, cols, pixels) = parse_pgm(&bytes);
        assert_eq!((rows, cols), (2, 2));
        // 0.5 quantizes to 128 (round half up), 0.25 to 64.
        assert_eq!(pixels, vec![255, 128, 0, 64]);
    }

    #[test]
    fn csv_quotes_awkward_labels() {
        let dir = tempfile::tempdir().unwrap();
        let labels = vec!["plain".to_string(), "with,comma".to_string()];
        let matrix = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let sim = SimilarityMatrix { labels, matrix };
        let path = dir.path().join("grid.csv");
        export_csv(&sim, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), ",plain,\"with,comma\"");
        assert_eq!(lines.next().unwrap(), "plain,1,0");
    }

    #[test]
    fn grid_concatenates_blocks() {
        let e: Vec<f64> = vec![2.0, 1.0];
        let a = basis_with_energies(e.clone(), 2);
        let ta = top_third(&a);
        assert_eq!(ta.len(), 1);
        let tagged = vec![("x".to_string(), ta.clone()), ("y".to_string(), ta)];
        let grid = similarity_grid(&tagged, false).unwrap();
        assert_eq!(grid.labels, vec!["x#0", "y#0"]);
        assert_eq!(grid.matrix.rows(), 2);
        assert_eq!(grid.matrix.get(0, 1), 1.0);
    }
}
