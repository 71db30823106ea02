//! Partition-function isotropy measures.
//!
//! For a unit probe v, Z(v) = sum_i exp(v . w_i) over the rows of W. The
//! probe set is the 2d signed eigenvectors of W^T W. I1 is the min/max ratio
//! of Z over the probes; I2 is the dispersion of Z normalized by its mean.
//! All arithmetic stays in the log domain: both measures are invariant to
//! multiplying every Z(v) by a common positive constant, so the max-shift
//! rescaling is exact, not an approximation.

use crate::error::{Error, Result};
use crate::numkit::{dot, gram_eigvectors, norm, EmbeddingMatrix};
use crate::par;

/// Unit probe vectors, stored as +v/-v pairs.
#[derive(Clone, Debug)]
pub struct ProbeSet {
    probes: Vec<Vec<f64>>,
}

impl ProbeSet {
    pub fn new(probes: Vec<Vec<f64>>) -> Result<Self> {
        if probes.is_empty() || probes.len() % 2 != 0 {
            return Err(Error::InvalidArg(
                "probe set must hold a nonempty set of +/- pairs".into(),
            ));
        }
        for v in &probes {
            let n = norm(v);
            if (n - 1.0).abs() > 1e-12 {
                return Err(Error::NonUnitProbe { norm: n });
            }
        }
        Ok(ProbeSet { probes })
    }

    pub fn probes(&self) -> &[Vec<f64>] {
        &self.probes
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }
}

/// Isotropy measures of one embedding matrix.
#[derive(Clone, Debug)]
pub struct IsotropyReport {
    /// min Z / max Z over the probe set; in [0, 1], 1 = perfectly isotropic.
    pub i1: f64,
    /// Normalized dispersion of Z over the probe set; >= 0, 0 = constant Z.
    pub i2: f64,
    /// log Z(v) per probe, in probe order.
    pub log_z: Vec<f64>,
    /// Mean of Z after the internal exp(log Z - max log Z) rescaling.
    pub mean_z_scaled: f64,
}

/// log Z(v) = log sum_i exp(v . w_i), computed with a max shift so rows of
/// any realistic norm cannot overflow.
pub fn log_partition(w: &EmbeddingMatrix, v: &[f64]) -> Result<f64> {
    let n = norm(v);
    if (n - 1.0).abs() > 1e-9 {
        return Err(Error::NonUnitProbe { norm: n });
    }
    if v.len() != w.dim() {
        return Err(Error::InvalidArg(format!(
            "probe dimension {} does not match embedding dimension {}",
            v.len(),
            w.dim()
        )));
    }
    Ok(log_sum_exp_rows(w, v))
}

fn log_sum_exp_rows(w: &EmbeddingMatrix, v: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    let mut dots = Vec::with_capacity(w.rows());
    for i in 0..w.rows() {
        let d = dot(w.row(i), v);
        if d > max {
            max = d;
        }
        dots.push(d);
    }
    let sum: f64 = dots.iter().map(|d| (d - max).exp()).sum();
    max + sum.ln()
}

/// I1, I2 and the per-probe partition values for W, using the signed
/// eigenvectors of W^T W as probes.
pub fn isotropy_report(w: &EmbeddingMatrix) -> Result<IsotropyReport> {
    let probes = gram_eigvectors(w)?;
    isotropy_report_with_probes(w, &probes)
}

pub fn isotropy_report_with_probes(
    w: &EmbeddingMatrix,
    probes: &ProbeSet,
) -> Result<IsotropyReport> {
    let log_z: Vec<f64> = par::map_slice(probes.probes(), |v| log_sum_exp_rows(w, v));
    let max = log_z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let min = log_z.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let i1 = (min - max).exp();

    // I2 on the rescaled values z = exp(log Z - max): exact, see module docs.
    let scaled: Vec<f64> = log_z.iter().map(|&l| (l - max).exp()).collect();
    let mean = scaled.iter().sum::<f64>() / scaled.len() as f64;
    let ss: f64 = scaled.iter().map(|z| (z - mean) * (z - mean)).sum();
    let i2 = (ss / (scaled.len() as f64 * mean * mean)).sqrt();

    Ok(IsotropyReport {
        i1,
        i2,
        log_z,
        mean_z_scaled: mean,
    })
}

pub fn isotropy_i1(w: &EmbeddingMatrix) -> Result<f64> {
    Ok(isotropy_report(w)?.i1)
}

pub fn isotropy_i2(w: &EmbeddingMatrix) -> Result<f64> {
    Ok(isotropy_report(w)?.i2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Mat;

    fn two_row_matrix() -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap()
    }

    #[test]
    fn log_partition_zero_matrix() {
        let w = EmbeddingMatrix::new(Mat::zeros(5, 3)).unwrap();
        let v = vec![1.0, 0.0, 0.0];
        let lz = log_partition(&w, &v).unwrap();
        assert!((lz - 5.0f64.ln()).abs() <= 1e-14);
    }

    #[test]
    fn log_partition_two_terms() {
        let w = two_row_matrix();
        let lz = log_partition(&w, &[1.0, 0.0]).unwrap();
        let direct = (2.0f64.exp() + 1.0).ln();
        assert!((lz - direct).abs() <= 1e-13, "{lz} vs {direct}");
    }

    #[test]
    fn log_partition_huge_row_stays_finite() {
        let w = EmbeddingMatrix::from_rows(&[vec![1000.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let lz = log_partition(&w, &[1.0, 0.0]).unwrap();
        assert!(lz.is_finite());
        assert!((lz - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn log_partition_rejects_non_unit_probe() {
        let w = two_row_matrix();
        assert!(matches!(
            log_partition(&w, &[1.0, 1.0]),
            Err(Error::NonUnitProbe { .. })
        ));
    }

    #[test]
    fn zero_matrix_is_perfectly_isotropic() {
        let w = EmbeddingMatrix::new(Mat::zeros(4, 3)).unwrap();
        let rep = isotropy_report(&w).unwrap();
        assert_eq!(rep.i1, 1.0);
        assert_eq!(rep.i2, 0.0);
        assert_eq!(rep.log_z.len(), 6);
    }

    #[test]
    fn worked_two_row_instance() {
        // Probes are the four signed axis vectors; Z values are
        // {e^2+1, e^-2+1, 1+e, 1+e^-1}, so I1 = (e^-2+1)/(e^2+1) = e^-2.
        let w = two_row_matrix();
        let rep = isotropy_report(&w).unwrap();
        let zs = [
            2.0f64.exp() + 1.0,
            (-2.0f64).exp() + 1.0,
            1.0 + 1.0f64.exp(),
            1.0 + (-1.0f64).exp(),
        ];
        let i1 = ((-2.0f64).exp() + 1.0) / (2.0f64.exp() + 1.0);
        assert!((rep.i1 - i1).abs() <= 1e-12);
        assert!((rep.i1 - (-2.0f64).exp()).abs() <= 1e-12);
        let mean = zs.iter().sum::<f64>() / 4.0;
        let ss: f64 = zs.iter().map(|z| (z - mean) * (z - mean)).sum();
        let i2 = (ss / (4.0 * mean * mean)).sqrt();
        assert!((rep.i2 - i2).abs() <= 1e-12);
        assert!((rep.i2 - 0.798).abs() < 1e-3);
    }

    #[test]
    fn i1_equals_one_iff_log_z_constant() {
        let w = two_row_matrix();
        let rep = isotropy_report(&w).unwrap();
        let spread = rep
            .log_z
            .iter()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v))
            - rep.log_z.iter().fold(f64::INFINITY, |m, &v| m.min(v));
        assert!(rep.i1 < 1.0 && spread > 1e-12);

        let z = EmbeddingMatrix::new(Mat::zeros(3, 2)).unwrap();
        let rep = isotropy_report(&z).unwrap();
        let all_equal = rep.log_z.windows(2).all(|w| (w[0] - w[1]).abs() <= 1e-12);
        assert!(rep.i1 == 1.0 && all_equal);
    }

    #[test]
    fn appending_aligned_row_decreases_i1() {
        let base = two_row_matrix();
        let grown =
            EmbeddingMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0], vec![6.0, 0.0]]).unwrap();
        let i1_base = isotropy_i1(&base).unwrap();
        let i1_grown = isotropy_i1(&grown).unwrap();
        assert!(i1_grown < i1_base, "{i1_grown} !< {i1_base}");
    }
}
