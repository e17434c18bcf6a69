//! Target point sets and the PCA plane that seeds the unfolding.
//!
//! A normalized image position `u in [0,1]^2` is lifted to 3D by
//! `x = t_mean + A * diag(Lu, Lv) * (u - (0.5, 0.5))`, where the columns of `A`
//! are the two leading principal directions of the targets and `(Lu, Lv)` are
//! the plane extents (margin factor times target extent along each axis).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UnfoldError};
use crate::volume::WorldPoint;

/// Ratio below which the second principal variance counts as zero.
const COLLINEAR_RATIO: f64 = 1e-9;

/// Unordered target points in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    points: Vec<WorldPoint>,
}

impl TargetSet {
    pub fn new(points: Vec<WorldPoint>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(UnfoldError::InvalidArgument(format!(
                "target {i} has non-finite coordinates"
            )));
        }
        Ok(TargetSet { points })
    }

    pub fn points(&self) -> &[WorldPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> WorldPoint {
        let sum = self
            .points
            .iter()
            .fold(WorldPoint::zeros(), |acc, p| acc + p);
        sum / self.points.len() as f64
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| UnfoldError::io(path, e))?;
        Self::parse_csv(&text, path)
    }

    pub(crate) fn parse_csv(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| UnfoldError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim() == "x_mm,y_mm,z_mm" => {}
            Some((_, header)) => {
                return Err(parse_err(
                    1,
                    format!("expected header `x_mm,y_mm,z_mm`, found `{}`", header.trim()),
                ))
            }
            None => return Err(parse_err(1, "empty file".into())),
        }
        let mut points = Vec::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(parse_err(
                    line_no,
                    format!("expected 3 fields, found {}", fields.len()),
                ));
            }
            let mut xyz = [0.0; 3];
            for (slot, field) in xyz.iter_mut().zip(&fields) {
                *slot = field
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(line_no, format!("invalid number `{field}`")))?;
            }
            points.push(WorldPoint::new(xyz[0], xyz[1], xyz[2]));
        }
        TargetSet::new(points)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("x_mm,y_mm,z_mm\n");
        for p in &self.points {
            // {:?} on f64 is shortest round-trip
            let _ = writeln!(out, "{:?},{:?},{:?}", p.x, p.y, p.z);
        }
        fs::write(path, out).map_err(|e| UnfoldError::io(path, e))
    }
}

/// Linear 2D->3D map built from the targets' principal directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneFrame {
    /// Columns are the principal directions, sorted by decreasing variance.
    /// The first two form `A`; the third is their cross product.
    pub axes: Matrix3<f64>,
    /// Diagonal of `H` in the principal basis, mm. Only the first two
    /// entries enter the lift.
    pub scale: Vector3<f64>,
    pub t_mean: WorldPoint,
    /// Normalization constant for network inputs, mm.
    pub c: f64,
    pub margin_factor: f64,
    /// Set when the targets are (numerically) collinear and the second
    /// direction had to be chosen by rule.
    pub collinear: bool,
}

impl PlaneFrame {
    /// The `A` matrix (3x2).
    pub fn a(&self) -> nalgebra::Matrix3x2<f64> {
        self.axes.fixed_columns::<2>(0).into_owned()
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.axes.column(2).into_owned()
    }

    /// Full rotation from principal coordinates to world.
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.axes
    }

    pub fn lift(&self, u: Vector2<f64>) -> WorldPoint {
        let du = self.scale.x * (u.x - 0.5);
        let dv = self.scale.y * (u.y - 0.5);
        self.t_mean + self.axes.column(0) * du + self.axes.column(1) * dv
    }

    /// Physical width and height of the unit square under the lift, mm.
    pub fn plane_scale(&self) -> Vector2<f64> {
        let a = self.a();
        Vector2::new(
            (a.column(0) * self.scale.x).norm(),
            (a.column(1) * self.scale.y).norm(),
        )
    }

    /// Orthogonal projection of a world point back to normalized plane coordinates.
    pub fn project(&self, x: &WorldPoint) -> Vector2<f64> {
        let d = x - self.t_mean;
        Vector2::new(
            d.dot(&self.axes.column(0)) / self.scale.x + 0.5,
            d.dot(&self.axes.column(1)) / self.scale.y + 0.5,
        )
    }

    pub fn with_c(mut self, c: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(UnfoldError::InvalidArgument(format!(
                "normalization constant must be positive, got {c}"
            )));
        }
        self.c = c;
        Ok(self)
    }
}

/// Fits the PCA plane frame with the default normalization constant
/// `c = max(Lu, Lv) / 2`.
pub fn fit_plane_frame(targets: &TargetSet, margin_factor: f64) -> Result<PlaneFrame> {
    if targets.len() < 3 {
        return Err(UnfoldError::DegenerateTarget(format!(
            "need at least 3 targets, got {}",
            targets.len()
        )));
    }
    if !(margin_factor > 0.0) || !margin_factor.is_finite() {
        return Err(UnfoldError::InvalidArgument(format!(
            "margin factor must be positive, got {margin_factor}"
        )));
    }
    let mean = targets.centroid();
    let mut cov = Matrix3::zeros();
    for p in targets.points() {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= targets.len() as f64;

    let spread = targets
        .points()
        .iter()
        .map(|p| (p - mean).norm())
        .fold(0.0, f64::max);
    if spread == 0.0 {
        return Err(UnfoldError::DegenerateTarget(
            "all target points are identical".into(),
        ));
    }

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let first = canonical_sign(eig.eigenvectors.column(order[0]).normalize());
    let lambda1 = eig.eigenvalues[order[0]];
    let lambda2 = eig.eigenvalues[order[1]];

    let collinear = lambda2 < COLLINEAR_RATIO * lambda1;
    let second = if collinear {
        let rejected = (0..3)
            .map(|a| {
                let e = Vector3::ith(a, 1.0);
                e - first * first.dot(&e)
            })
            .find(|r| r.norm() > 1e-3)
            .expect("some canonical axis is not parallel to a unit vector");
        canonical_sign(rejected.normalize())
    } else {
        let v = eig.eigenvectors.column(order[1]).into_owned();
        // re-orthogonalize against the first axis for exactness
        canonical_sign((v - first * first.dot(&v)).normalize())
    };
    let third = first.cross(&second).normalize();
    let axes = Matrix3::from_columns(&[first, second, third]);

    let extent = |axis: &Vector3<f64>| {
        let (lo, hi) = targets
            .points()
            .iter()
            .map(|p| (p - mean).dot(axis))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
                (lo.min(t), hi.max(t))
            });
        hi - lo
    };
    let lu = margin_factor * extent(&first);
    let mut lv = margin_factor * extent(&second);
    if collinear || lv <= 0.0 {
        lv = lu;
    }
    let lw = (margin_factor * extent(&third)).max(1e-3 * lv);
    if collinear {
        log::warn!("targets are collinear; second plane axis chosen by rule");
    }

    Ok(PlaneFrame {
        axes,
        scale: Vector3::new(lu, lv, lw),
        t_mean: mean,
        c: lu.max(lv) / 2.0,
        margin_factor,
        collinear,
    })
}

/// Flips `v` so its largest-magnitude component is positive.
fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    let mut idx = 0;
    for a in 1..3 {
        if v[a].abs() > v[idx].abs() {
            idx = a;
        }
    }
    if v[idx] < 0.0 {
        -v
    } else {
        v
    }
}
