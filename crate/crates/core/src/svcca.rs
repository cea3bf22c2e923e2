//! SVCCA: SVD pruning followed by canonical correlation analysis, used to
//! compare bias embeddings across training epochs.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const DUMP_MAGIC: &[u8] = b"LECBDUMP\n";

fn to_dmatrix(t: &Tensor) -> Result<DMatrix<f64>> {
    if t.shape().len() != 2 || t.rows() == 0 || t.cols() == 0 {
        return Err(Error::invalid(format!("expected a non-empty matrix, got {:?}", t.shape())));
    }
    Ok(DMatrix::from_row_slice(t.rows(), t.cols(), t.data()))
}

fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    let mut data = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        data.extend(m.row(r).iter());
    }
    Tensor::from_raw(vec![m.nrows(), m.ncols()], data)
}

/// Subtracts each column's mean.
pub fn center(t: &Tensor) -> Result<Tensor> {
    let mut m = to_dmatrix(t)?;
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    Ok(from_dmatrix(&m))
}

#[derive(Debug, Clone)]
pub struct Pruned {
    pub data: Tensor,
    pub singular_values: Vec<f64>,
    pub kept: usize,
}

/// Projects centered `m` onto the fewest leading right-singular directions
/// that capture at least `variance_keep` of its variance.
pub fn svd_prune(m: &Tensor, variance_keep: f64) -> Result<Pruned> {
    if !(variance_keep > 0.0 && variance_keep <= 1.0) {
        return Err(Error::invalid(format!("variance_keep {variance_keep} outside (0, 1]")));
    }
    let x = to_dmatrix(&center(m)?)?;
    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::invalid("SVD did not converge"))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let total: f64 = sv.iter().map(|s| s * s).sum();
    let top = sv.first().copied().unwrap_or(0.0);
    if total <= 0.0 || top <= f64::EPSILON * x.norm() {
        return Err(Error::invalid("matrix has zero variance"));
    }
    let noise = top * 1e-10;
    let target = variance_keep * total * (1.0 - 1e-12);
    let mut kept = 0;
    let mut acc = 0.0;
    for s in &sv {
        if acc >= target || *s <= noise {
            break;
        }
        acc += s * s;
        kept += 1;
    }
    let basis = DMatrix::from_fn(x.ncols(), kept, |r, c| v_t[(order[c], r)]);
    Ok(Pruned {
        data: from_dmatrix(&(x * basis)),
        singular_values: sv,
        kept,
    })
}

/// Covariance regularization policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum Regularization {
    /// Add `1e-8 · trace / dim` only when a covariance is numerically singular.
    #[default]
    Auto,
    /// Always add `factor · trace / dim`.
    Always(f64),
    /// Never regularize; singular covariances are an error.
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CcaResult {
    /// Canonical correlations, non-increasing.
    pub rho: Vec<f64>,
    pub mean: f64,
    pub dims: (usize, usize),
}

fn covariance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.transpose() * b / (a.nrows() as f64 - 1.0)
}

fn inv_sqrt(cov: DMatrix<f64>, reg: Regularization, side: &str) -> Result<DMatrix<f64>> {
    let dim = cov.nrows();
    let trace = cov.trace();
    let eps = match reg {
        Regularization::Always(f) => f * trace / dim as f64,
        _ => 0.0,
    };
    let mut eig = SymmetricEigen::new(&cov + DMatrix::identity(dim, dim) * eps);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= max * 1e-12 || max <= 0.0 {
        match reg {
            Regularization::Never | Regularization::Always(_) if min <= 0.0 || max <= 0.0 => {
                return Err(Error::SingularCovariance(format!(
                    "{side} covariance is singular (min eigenvalue {min:.3e}); \
                     enable regularization epsilon"
                )));
            }
            Regularization::Never => {
                return Err(Error::SingularCovariance(format!(
                    "{side} covariance is ill-conditioned ({min:.3e} / {max:.3e}); \
                     enable regularization epsilon"
                )));
            }
            Regularization::Auto => {
                if trace <= 0.0 {
                    return Err(Error::SingularCovariance(format!("{side} covariance is zero")));
                }
                let e = 1e-8 * trace / dim as f64;
                eig = SymmetricEigen::new(cov + DMatrix::identity(dim, dim) * e);
            }
            Regularization::Always(_) => {}
        }
    }
    let d = eig.eigenvalues.map(|l| 1.0 / l.max(f64::MIN_POSITIVE).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

/// Canonical correlations between the columns of `a` and `b` (same rows).
pub fn cca(a: &Tensor, b: &Tensor) -> Result<CcaResult> {
    cca_with(a, b, Regularization::default())
}

pub fn cca_with(a: &Tensor, b: &Tensor, reg: Regularization) -> Result<CcaResult> {
    if a.rows() != b.rows() {
        return Err(Error::Shape {
            op: "cca",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.rows() < 2 {
        return Err(Error::invalid("cca needs at least two samples"));
    }
    if a.rows() <= a.cols().max(b.cols()) {
        log::warn!(
            "cca with {} samples for {}/{} dims is poorly determined",
            a.rows(),
            a.cols(),
            b.cols()
        );
    }
    let x = to_dmatrix(&center(a)?)?;
    let y = to_dmatrix(&center(b)?)?;
    let wa = inv_sqrt(covariance(&x, &x), reg, "first")?;
    let wb = inv_sqrt(covariance(&y, &y), reg, "second")?;
    let t = &wa * covariance(&x, &y) * &wb;
    let mut rho: Vec<f64> = t.singular_values().iter().copied().collect();
    rho.sort_by(|p, q| q.total_cmp(p));
    rho.truncate(a.cols().min(b.cols()));
    let mean = rho.iter().sum::<f64>() / rho.len() as f64;
    Ok(CcaResult {
        rho,
        mean,
        dims: (a.cols(), b.cols()),
    })
}

/// SVD-prunes both sides, then runs CCA.
pub fn svcca(a: &Tensor, b: &Tensor, variance_keep: f64) -> Result<CcaResult> {
    let pa = svd_prune(a, variance_keep)?;
    let pb = svd_prune(b, variance_keep)?;
    cca(&pa.data, &pb.data)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpTag {
    pub model: String,
    pub sampler: String,
    pub epoch: usize,
}

/// Bias embeddings collected over a fixed probe set.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump {
    pub tag: DumpTag,
    pub probe_hash: String,
    pub matrix: Tensor,
}

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    tag: DumpTag,
    rows: usize,
    cols: usize,
    probe_hash: String,
}

impl EmbeddingDump {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = DumpHeader {
            tag: self.tag.clone(),
            rows: self.matrix.rows(),
            cols: self.matrix.cols(),
            probe_hash: self.probe_hash.clone(),
        };
        let mut out = DUMP_MAGIC.to_vec();
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        for v in self.matrix.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_reader<R: Read>(reader: R, origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: origin.to_path_buf(),
            reason,
        };
        let mut r = BufReader::new(reader);
        let mut magic = vec![0u8; DUMP_MAGIC.len()];
        r.read_exact(&mut magic).map_err(|e| Error::io(origin, e))?;
        if magic != DUMP_MAGIC {
            return Err(bad("not an embedding dump".into()));
        }
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| Error::io(origin, e))?;
        let h: DumpHeader = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let mut raw = Vec::new();
        r.read_to_end(&mut raw).map_err(|e| Error::io(origin, e))?;
        if raw.len() != h.rows * h.cols * 8 {
            return Err(bad(format!(
                "expected {} values, found {} bytes",
                h.rows * h.cols,
                raw.len()
            )));
        }
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(EmbeddingDump {
            tag: h.tag,
            probe_hash: h.probe_hash,
            matrix: Tensor::matrix(h.rows, h.cols, data).map_err(|e| bad(e.to_string()))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(f, path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub from: DumpTag,
    pub to: DumpTag,
    pub rho: f64,
}

/// Mean SVCCA correlation between each pair of consecutive dumps.
pub fn epoch_correlation_curve(dumps: &[EmbeddingDump], variance_keep: f64) -> Result<Vec<CurvePoint>> {
    if dumps.len() < 2 {
        return Err(Error::invalid("need at least two dumps"));
    }
    for w in dumps.windows(2) {
        if w[0].probe_hash != w[1].probe_hash || w[0].matrix.rows() != w[1].matrix.rows() {
            return Err(Error::ProbeMismatch(format!(
                "epoch {} and epoch {} were collected on different probe sets",
                w[0].tag.epoch, w[1].tag.epoch
            )));
        }
    }
    dumps
        .windows(2)
        .map(|w| {
            Ok(CurvePoint {
                from: w[0].tag.clone(),
                to: w[1].tag.clone(),
                rho: svcca(&w[0].matrix, &w[1].matrix, variance_keep)?.mean,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    /// Random orthogonal matrix from the QR factor of a Gaussian matrix.
    fn orthogonal(n: usize, seed: u64) -> Tensor {
        let g = to_dmatrix(&gaussian(n, n, seed)).unwrap();
        from_dmatrix(&g.qr().q())
    }

    #[test]
    fn self_correlation_is_one() {
        let a = gaussian(300, 6, 1);
        let r = cca(&a, &a).unwrap();
        assert!(r.rho.iter().all(|p| (p - 1.0).abs() < 1e-8), "{:?}", r.rho);
    }

    #[test]
    fn invariant_under_rotation() {
        let a = gaussian(400, 5, 2);
        let b = gaussian(400, 5, 3);
        let mixed = Tensor::matrix(400, 5, a.data().iter().zip(b.data()).map(|(x, y)| x + 0.5 * y).collect()).unwrap();
        let r = orthogonal(5, 4);
        let base = cca(&a, &mixed).unwrap();
        let rotated = cca(&a.matmul(&r).unwrap(), &mixed).unwrap();
        for (p, q) in base.rho.iter().zip(&rotated.rho) {
            assert!((p - q).abs() < 1e-6);
        }
        let ar = a.matmul(&r).unwrap();
        assert!(cca(&a, &ar).unwrap().rho.iter().all(|p| (p - 1.0).abs() < 1e-6));
    }

    #[test]
    fn independent_data_has_low_correlation() {
        let r = cca(&gaussian(1000, 8, 5), &gaussian(1000, 8, 6)).unwrap();
        assert!(r.mean < 0.2);
        assert!(r.rho.windows(2).all(|w| w[0] >= w[1]));
        assert!(r.rho.iter().all(|p| (-1e-8..=1.0 + 1e-8).contains(p)));
    }

    #[test]
    fn rank_one_keeps_one_direction() {
        let u = gaussian(50, 1, 7);
        let v = gaussian(1, 6, 8);
        let p = svd_prune(&u.matmul(&v).unwrap(), 0.99).unwrap();
        assert_eq!(p.kept, 1);
        assert_eq!(p.data.cols(), 1);
    }

    #[test]
    fn two_dominant_directions() {
        let u = to_dmatrix(&gaussian(200, 16, 9)).unwrap().qr().q();
        let v = to_dmatrix(&orthogonal(16, 10)).unwrap();
        let mut s = vec![0.1; 16];
        s[0] = 10.0;
        s[1] = 10.0;
        let m = u * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(s)) * v.transpose();
        let p = svd_prune(&from_dmatrix(&m), 0.99).unwrap();
        assert_eq!(p.kept, 2);
    }

    #[test]
    fn full_keep_is_lossless() {
        let a = gaussian(60, 4, 11);
        let b = gaussian(60, 4, 12);
        let p = svd_prune(&a, 1.0).unwrap();
        assert_eq!(p.kept, 4);
        let direct = cca(&a, &b).unwrap();
        let pruned = cca(&p.data, &b).unwrap();
        for (x, y) in direct.rho.iter().zip(&pruned.rho) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn degenerate_inputs() {
        let zero = Tensor::zeros(&[10, 3]);
        assert!(svd_prune(&zero, 0.9).is_err());
        assert!(svd_prune(&gaussian(10, 3, 1), 0.0).is_err());
        let a = gaussian(20, 3, 13);
        let mut dup = Vec::new();
        for r in 0..20 {
            dup.extend_from_slice(&[a.get(r, 0), a.get(r, 0), a.get(r, 1)]);
        }
        let dup = Tensor::matrix(20, 3, dup).unwrap();
        assert!(matches!(
            cca_with(&dup, &a, Regularization::Never),
            Err(Error::SingularCovariance(_))
        ));
        assert!(cca(&dup, &a).is_ok());
        assert!(cca_with(&dup, &a, Regularization::Always(1e-6)).is_ok());
    }

    #[test]
    fn dump_round_trip_and_curve() {
        let tag = |epoch| DumpTag {
            model: "lecb_v2".into(),
            sampler: "smb".into(),
            epoch,
        };
        let m = gaussian(40, 4, 14);
        let dumps: Vec<EmbeddingDump> = (0..3)
            .map(|e| EmbeddingDump {
                tag: tag(e),
                probe_hash: "p".into(),
                matrix: m.clone(),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e0.dump");
        dumps[0].save(&path).unwrap();
        assert_eq!(EmbeddingDump::load(&path).unwrap(), dumps[0]);
        let curve = epoch_correlation_curve(&dumps, 0.99).unwrap();
        assert_eq!(curve.len(), 2);
        assert!(curve.iter().all(|p| (p.rho - 1.0).abs() < 1e-8));
        let mut other = dumps.clone();
        other[1].probe_hash = "q".into();
        assert!(matches!(
            epoch_correlation_curve(&other, 0.99),
            Err(Error::ProbeMismatch(_))
        ));
        std::fs::write(&path, b"LECBDUMP\n{}\n").unwrap();
        assert!(EmbeddingDump::load(&path).is_err());
    }

    #[test]
    fn reseeded_random_embeddings_stay_low() {
        let dumps: Vec<EmbeddingDump> = (0..4)
            .map(|e| EmbeddingDump {
                tag: DumpTag {
                    model: "r".into(),
                    sampler: "r".into(),
                    epoch: e,
                },
                probe_hash: "p".into(),
                matrix: gaussian(500, 6, 100 + e as u64),
            })
            .collect();
        let curve = epoch_correlation_curve(&dumps, 0.99).unwrap();
        assert!(curve.iter().all(|p| p.rho < 0.3));
    }
}
