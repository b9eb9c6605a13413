//! End-point error, accuracy and outlier metrics in 3D and projected 2D.

use serde::{Deserialize, Serialize};

use pcflow_autograd::Tensor;

use crate::error::{Error, Result};
use crate::geom::PointSet;

pub const STRICT_ABS: f64 = 0.05;
pub const STRICT_REL: f64 = 0.05;
pub const RELAXED_ABS: f64 = 0.1;
pub const RELAXED_REL: f64 = 0.1;
pub const OUTLIER_ABS: f64 = 0.3;
pub const OUTLIER_REL: f64 = 0.3;
pub const ACC2D_PIXELS: f64 = 3.0;
pub const ACC2D_REL: f64 = 0.05;
/// Guards relative errors of points with zero GT motion.
pub const REL_EPS: f64 = 1e-8;

/// Pinhole camera parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Reads `fx, fy, cx, cy` from a row-major 3×3 camera matrix.
    pub fn from_matrix(k: &[[f64; 3]; 3]) -> Self {
        Self {
            fx: k[0][0],
            fy: k[1][1],
            cx: k[0][2],
            cy: k[1][2],
        }
    }

    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }
}

/// `(fx·x/z + cx, fy·y/z + cy)`, or `None` when the depth is not positive.
pub fn project_pinhole(p: [f64; 3], k: &Intrinsics) -> Option<[f64; 2]> {
    if p[2].is_nan() || p[2] <= 0.0 {
        return None;
    }
    Some([k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub epe3d: f64,
    pub as3d: f64,
    pub ar3d: f64,
    pub out3d: f64,
    pub epe2d: Option<f64>,
    pub acc2d: Option<f64>,
    /// Points evaluated in 3D.
    pub count: usize,
    /// Points evaluated in 2D.
    pub count2d: usize,
}

impl MetricReport {
    /// One `name value` pair per line.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "epe3d {:.6}\nas3d {:.6}\nar3d {:.6}\nout3d {:.6}\n",
            self.epe3d, self.as3d, self.ar3d, self.out3d
        );
        if let (Some(e), Some(a)) = (self.epe2d, self.acc2d) {
            s.push_str(&format!("epe2d {e:.6}\nacc2d {a:.6}\n"));
        }
        s.push_str(&format!("count {}\n", self.count));
        s
    }
}

/// Running sums from which pooled reports are formed.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricSums {
    pub epe3d: f64,
    pub strict: usize,
    pub relaxed: usize,
    pub outliers: usize,
    pub count: usize,
    pub epe2d: f64,
    pub acc2d: usize,
    pub count2d: usize,
    pub has_2d: bool,
}

impl MetricSums {
    pub fn merge(&mut self, other: &MetricSums) {
        self.epe3d += other.epe3d;
        self.strict += other.strict;
        self.relaxed += other.relaxed;
        self.outliers += other.outliers;
        self.count += other.count;
        self.epe2d += other.epe2d;
        self.acc2d += other.acc2d;
        self.count2d += other.count2d;
        self.has_2d |= other.has_2d;
    }

    pub fn report(&self) -> MetricReport {
        let frac = |a: usize, n: usize| if n == 0 { 0.0 } else { a as f64 / n as f64 };
        let mean = |a: f64, n: usize| if n == 0 { 0.0 } else { a / n as f64 };
        MetricReport {
            epe3d: mean(self.epe3d, self.count),
            as3d: frac(self.strict, self.count),
            ar3d: frac(self.relaxed, self.count),
            out3d: frac(self.outliers, self.count),
            epe2d: self.has_2d.then(|| mean(self.epe2d, self.count2d)),
            acc2d: self.has_2d.then(|| frac(self.acc2d, self.count2d)),
            count: self.count,
            count2d: self.count2d,
        }
    }
}

fn norm3(a: &[f64]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn check_inputs(pred: &Tensor, gt: &Tensor, mask: Option<&[bool]>) -> Result<()> {
    if pred.shape() != gt.shape() || pred.cols() != 3 {
        return Err(Error::shape(
            "metrics",
            format!("{:?}", gt.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    if let Some(m) = mask {
        if m.len() != pred.rows() {
            return Err(Error::shape("metrics mask", pred.rows(), m.len()));
        }
    }
    Ok(())
}

/// 3D sums; masked-out points are skipped.
pub fn metric_sums(pred: &Tensor, gt: &Tensor, mask: Option<&[bool]>) -> Result<MetricSums> {
    check_inputs(pred, gt, mask)?;
    let mut s = MetricSums::default();
    for i in 0..pred.rows() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let (p, g) = (pred.row(i), gt.row(i));
        let err = norm3(&[p[0] - g[0], p[1] - g[1], p[2] - g[2]]);
        let rel = err / (norm3(g) + REL_EPS);
        s.epe3d += err;
        s.strict += usize::from(err < STRICT_ABS || rel < STRICT_REL);
        s.relaxed += usize::from(err < RELAXED_ABS || rel < RELAXED_REL);
        s.outliers += usize::from(err > OUTLIER_ABS || rel > OUTLIER_REL);
        s.count += 1;
    }
    Ok(s)
}

/// 3D and projected 2D sums. Points whose source, GT-warped or predicted
/// position lies at non-positive depth are left out of the 2D terms.
pub fn metric_sums_2d(
    pred: &Tensor,
    gt: &Tensor,
    mask: Option<&[bool]>,
    source: &PointSet,
    intrinsics: Option<&Intrinsics>,
) -> Result<MetricSums> {
    let k = intrinsics.ok_or_else(|| Error::invalid("2D metrics need camera intrinsics"))?;
    let mut s = metric_sums(pred, gt, mask)?;
    if source.len() != pred.rows() {
        return Err(Error::shape("metrics source points", pred.rows(), source.len()));
    }
    s.has_2d = true;
    for i in 0..pred.rows() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let x = source.get(i);
        let (p, g) = (pred.row(i), gt.row(i));
        let wp = [x[0] + p[0], x[1] + p[1], x[2] + p[2]];
        let wg = [x[0] + g[0], x[1] + g[1], x[2] + g[2]];
        let (Some(u0), Some(up), Some(ug)) = (project_pinhole(x, k), project_pinhole(wp, k), project_pinhole(wg, k)) else {
            continue;
        };
        let err = ((up[0] - ug[0]).powi(2) + (up[1] - ug[1]).powi(2)).sqrt();
        let motion = ((ug[0] - u0[0]).powi(2) + (ug[1] - u0[1]).powi(2)).sqrt();
        s.epe2d += err;
        s.acc2d += usize::from(err < ACC2D_PIXELS || err / (motion + REL_EPS) < ACC2D_REL);
        s.count2d += 1;
    }
    Ok(s)
}

pub fn compute_metrics(pred: &Tensor, gt: &Tensor, mask: Option<&[bool]>) -> Result<MetricReport> {
    Ok(metric_sums(pred, gt, mask)?.report())
}

pub fn compute_metrics_2d(
    pred: &Tensor,
    gt: &Tensor,
    mask: Option<&[bool]>,
    source: &PointSet,
    intrinsics: Option<&Intrinsics>,
) -> Result<MetricReport> {
    Ok(metric_sums_2d(pred, gt, mask, source, intrinsics)?.report())
}

/// Unweighted mean of per-scene reports.
pub fn mean_over_scenes(reports: &[MetricReport]) -> MetricReport {
    let n = reports.len().max(1) as f64;
    let avg = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let all_2d = !reports.is_empty() && reports.iter().all(|r| r.epe2d.is_some());
    MetricReport {
        epe3d: avg(&|r| r.epe3d),
        as3d: avg(&|r| r.as3d),
        ar3d: avg(&|r| r.ar3d),
        out3d: avg(&|r| r.out3d),
        epe2d: all_2d.then(|| avg(&|r| r.epe2d.unwrap())),
        acc2d: all_2d.then(|| avg(&|r| r.acc2d.unwrap())),
        count: reports.iter().map(|r| r.count).sum(),
        count2d: reports.iter().map(|r| r.count2d).sum(),
    }
}
