//! Training losses on embedding batches, with analytic gradients.
//!
//! Batches are `(n, d)` row-major matrices, one embedding per row. All
//! formulas are exact batch means so gradients compose with the encoder
//! backward pass without extra scaling.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TripletConfig {
    pub margin: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self { margin: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VicregConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Stabilizer inside the variance square root. Zero is accepted for
    /// pure loss evaluation; training configs should keep it positive.
    pub eps: f64,
}

impl Default for VicregConfig {
    fn default() -> Self {
        Self { alpha: 25.0, beta: 25.0, gamma: 1.0, eps: 1e-4 }
    }
}

impl VicregConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("vicreg weights must be nonnegative".into()));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("vicreg eps must be finite and >= 0, got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VicregParts {
    pub total: f64,
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
}

fn check_pair(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.nrows() == 0 {
        return Err(Error::Domain(format!("{what}: empty batch")));
    }
    if a.dim() != b.dim() {
        return Err(Error::Domain(format!(
            "{what}: batch shapes {:?} and {:?} differ",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Mean squared Euclidean distance between matched rows:
/// `(1/n) sum_i ||z_i - z'_i||^2`.
pub fn invariance_loss(z: &Array2<f64>, zp: &Array2<f64>) -> Result<f64> {
    check_pair(z, zp, "invariance_loss")?;
    let d = z - zp;
    Ok(d.mapv(|x| x * x).sum() / z.nrows() as f64)
}

fn invariance_grads(z: &Array2<f64>, zp: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let g = (z - zp) * (2.0 / z.nrows() as f64);
    let gp = -&g;
    (g, gp)
}

/// Hinge on the per-dimension standard deviation:
/// `(1/d) sum_j max(0, 1 - sqrt(var_j + eps))` with unbiased `var_j`.
pub fn variance_loss(z: &Array2<f64>, eps: f64) -> Result<f64> {
    if z.nrows() < 2 {
        return Err(Error::Domain(format!(
            "variance_loss: needs at least 2 rows, got {}",
            z.nrows()
        )));
    }
    let n = z.nrows() as f64;
    let mean = z.mean_axis(Axis(0)).unwrap();
    let centered = z - &mean;
    let var = centered.mapv(|x| x * x).sum_axis(Axis(0)) / (n - 1.0);
    let hinge = var.mapv(|v| (1.0 - (v + eps).sqrt()).max(0.0));
    Ok(hinge.mean().unwrap())
}

fn variance_grad(z: &Array2<f64>, eps: f64) -> Array2<f64> {
    let (n, d) = z.dim();
    let nf = n as f64;
    let mean = z.mean_axis(Axis(0)).unwrap();
    let centered = z - &mean;
    let var = centered.mapv(|x| x * x).sum_axis(Axis(0)) / (nf - 1.0);
    // d hinge / d var_j = -1 / (2 sqrt(var_j + eps)) where the hinge is
    // active; d var_j / d z_ij = 2 (z_ij - mean_j) / (n - 1).
    let dvar = var.mapv(|v| {
        let s = (v + eps).sqrt();
        if s < 1.0 && s > 0.0 {
            -1.0 / (2.0 * s * d as f64)
        } else {
            0.0
        }
    });
    centered * &(dvar * (2.0 / (nf - 1.0)))
}

/// Mean squared off-diagonal of the unbiased covariance matrix:
/// `(1/d) sum_{i != j} Cov(z)_{ij}^2`.
pub fn covariance_loss(z: &Array2<f64>) -> Result<f64> {
    if z.nrows() < 2 {
        return Err(Error::Domain(format!(
            "covariance_loss: needs at least 2 rows, got {}",
            z.nrows()
        )));
    }
    let n = z.nrows() as f64;
    let mean = z.mean_axis(Axis(0)).unwrap();
    let centered = z - &mean;
    let cov = centered.t().dot(&centered) / (n - 1.0);
    let d = z.ncols();
    let mut total = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                total += cov[(i, j)] * cov[(i, j)];
            }
        }
    }
    Ok(total / d as f64)
}

fn covariance_grad(z: &Array2<f64>) -> Array2<f64> {
    let (n, d) = z.dim();
    let nf = n as f64;
    let mean = z.mean_axis(Axis(0)).unwrap();
    let centered = z - &mean;
    let mut g = centered.t().dot(&centered) / (nf - 1.0) * (2.0 / d as f64);
    for i in 0..d {
        g[(i, i)] = 0.0;
    }
    // dL/dX = 2 Xc G / (n-1); the centering has zero column sums here, so
    // its backward pass is the identity.
    centered.dot(&g) * (2.0 / (nf - 1.0))
}

/// Weighted VICReg objective over a batch pair. The variance term is the
/// average of `variance_loss` on each batch; invariance pairs rows.
pub fn vicreg_total(z: &Array2<f64>, zp: &Array2<f64>, cfg: &VicregConfig) -> Result<VicregParts> {
    cfg.validate()?;
    check_pair(z, zp, "vicreg_total")?;
    let invariance = invariance_loss(z, zp)?;
    let variance = 0.5 * (variance_loss(z, cfg.eps)? + variance_loss(zp, cfg.eps)?);
    let covariance = 0.5 * (covariance_loss(z)? + covariance_loss(zp)?);
    Ok(VicregParts {
        total: cfg.alpha * invariance + cfg.beta * variance + cfg.gamma * covariance,
        invariance,
        variance,
        covariance,
    })
}

/// Loss parts plus gradients of the weighted total with respect to both
/// batches.
pub fn vicreg_grad(
    z: &Array2<f64>,
    zp: &Array2<f64>,
    cfg: &VicregConfig,
) -> Result<(VicregParts, Array2<f64>, Array2<f64>)> {
    let parts = vicreg_total(z, zp, cfg)?;
    let (inv_z, inv_zp) = invariance_grads(z, zp);
    let gz = inv_z * cfg.alpha
        + variance_grad(z, cfg.eps) * (0.5 * cfg.beta)
        + covariance_grad(z) * (0.5 * cfg.gamma);
    let gzp = inv_zp * cfg.alpha
        + variance_grad(zp, cfg.eps) * (0.5 * cfg.beta)
        + covariance_grad(zp) * (0.5 * cfg.gamma);
    Ok((parts, gz, gzp))
}

/// Batch-mean triplet margin loss with Euclidean distances:
/// `(1/n) sum_i max(||z_i - p_i|| - ||z_i - n_i|| + margin, 0)`.
pub fn triplet_loss(
    z: &Array2<f64>,
    zp: &Array2<f64>,
    zn: &Array2<f64>,
    cfg: &TripletConfig,
) -> Result<f64> {
    check_pair(z, zp, "triplet_loss")?;
    check_pair(z, zn, "triplet_loss")?;
    let n = z.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let dp = row_dist(z, zp, i);
        let dn = row_dist(z, zn, i);
        total += (dp - dn + cfg.margin).max(0.0);
    }
    Ok(total / n as f64)
}

fn row_dist(a: &Array2<f64>, b: &Array2<f64>, i: usize) -> f64 {
    a.row(i)
        .iter()
        .zip(b.row(i).iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

const DIST_FLOOR: f64 = 1e-12;

/// Triplet loss plus gradients for anchors, positives and negatives.
pub fn triplet_grad(
    z: &Array2<f64>,
    zp: &Array2<f64>,
    zn: &Array2<f64>,
    cfg: &TripletConfig,
) -> Result<(f64, Array2<f64>, Array2<f64>, Array2<f64>)> {
    check_pair(z, zp, "triplet_grad")?;
    check_pair(z, zn, "triplet_grad")?;
    let (n, d) = z.dim();
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    let mut gz = Array2::zeros((n, d));
    let mut gzp = Array2::zeros((n, d));
    let mut gzn = Array2::zeros((n, d));
    for i in 0..n {
        let dp = row_dist(z, zp, i);
        let dn = row_dist(z, zn, i);
        let loss = dp - dn + cfg.margin;
        if loss <= 0.0 {
            continue;
        }
        total += loss;
        let idp = 1.0 / dp.max(DIST_FLOOR);
        let idn = 1.0 / dn.max(DIST_FLOOR);
        for j in 0..d {
            let up = (z[(i, j)] - zp[(i, j)]) * idp;
            let un = (z[(i, j)] - zn[(i, j)]) * idn;
            gz[(i, j)] = (up - un) * scale;
            gzp[(i, j)] = -up * scale;
            gzn[(i, j)] = un * scale;
        }
    }
    Ok((total * scale, gz, gzp, gzn))
}
