//! 3D pose metrics: root-aligned MPJPE, Procrustes-aligned MPJPE and PCK.
//!
//! Distances are in body units (1 unit = 1 m), so the customary 150 mm PCK
//! threshold is `0.15`.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};

use crate::body::Joints3D;
use crate::error::{Error, Result};

pub const DEFAULT_PCK_THRESHOLD: f64 = 0.15;

/// Similarity transform mapping `pred` onto `truth`: `truth ≈ scale·R·pred + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vector3<f64>,
    pub aligned: Joints3D,
}

impl Alignment {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.rotation * Vector3::from(p) * self.scale + self.translation;
        [v.x, v.y, v.z]
    }
}

fn check_counts(pred: &Joints3D, truth: &Joints3D) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "prediction has {} joints, ground truth {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("no joints to compare"));
    }
    Ok(())
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Per-joint distances after subtracting each set's root joint.
fn root_aligned_distances(pred: &Joints3D, truth: &Joints3D) -> Vec<f64> {
    let (p0, t0) = (pred.0[0], truth.0[0]);
    pred.0
        .iter()
        .zip(&truth.0)
        .map(|(p, t)| {
            dist(
                [p[0] - p0[0], p[1] - p0[1], p[2] - p0[2]],
                [t[0] - t0[0], t[1] - t0[1], t[2] - t0[2]],
            )
        })
        .collect()
}

/// Mean per-joint position error after root alignment.
pub fn mpjpe(pred: &Joints3D, truth: &Joints3D) -> Result<f64> {
    check_counts(pred, truth)?;
    let d = root_aligned_distances(pred, truth);
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Least-squares similarity alignment (Umeyama), reflections excluded.
///
/// If all predicted points coincide the rotation is the identity, the scale
/// is 1 and only the centroids are matched.
pub fn procrustes_align(pred: &Joints3D, truth: &Joints3D) -> Result<Alignment> {
    check_counts(pred, truth)?;
    let n = pred.len() as f64;
    let ps: Vec<Vector3<f64>> = pred.0.iter().map(|p| Vector3::from(*p)).collect();
    let ts: Vec<Vector3<f64>> = truth.0.iter().map(|p| Vector3::from(*p)).collect();
    let mu_p = ps.iter().sum::<Vector3<f64>>() / n;
    let mu_t = ts.iter().sum::<Vector3<f64>>() / n;
    let var_p = ps.iter().map(|p| (p - mu_p).norm_squared()).sum::<f64>() / n;

    let (rotation, scale) = if var_p <= f64::EPSILON * mu_p.norm_squared().max(1.0) * 1e-6 {
        (Matrix3::identity(), 1.0)
    } else {
        let mut cov = Matrix3::zeros();
        for (p, t) in ps.iter().zip(&ts) {
            cov += (t - mu_t) * (p - mu_p).transpose();
        }
        cov /= n;
        let svd = cov.svd(true, true);
        let (u, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested V^T"));
        let mut fix = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            fix[(2, 2)] = -1.0;
        }
        let r = u * fix * v_t;
        let trace: f64 = (0..3).map(|i| svd.singular_values[i] * fix[(i, i)]).sum();
        (r, trace / var_p)
    };
    let translation = mu_t - rotation * mu_p * scale;
    let aligned = Joints3D(
        ps.iter()
            .map(|p| {
                let q = rotation * p * scale + translation;
                [q.x, q.y, q.z]
            })
            .collect(),
    );
    Ok(Alignment {
        rotation,
        scale,
        translation,
        aligned,
    })
}

/// Mean per-joint error after Procrustes alignment of `pred` to `truth`.
pub fn pa_mpjpe(pred: &Joints3D, truth: &Joints3D) -> Result<f64> {
    let a = procrustes_align(pred, truth)?;
    Ok(a.aligned.0.iter().zip(&truth.0).map(|(p, t)| dist(*p, *t)).sum::<f64>() / pred.len() as f64)
}

/// Fraction of root-aligned joints strictly closer than `threshold`. The root
/// itself is excluded since alignment places it exactly (a single-joint
/// skeleton counts its root).
pub fn pck(pred: &Joints3D, truth: &Joints3D, threshold: f64) -> Result<f64> {
    check_counts(pred, truth)?;
    let d = root_aligned_distances(pred, truth);
    let scored = if d.len() > 1 { &d[1..] } else { &d[..] };
    Ok(scored.iter().filter(|v| **v < threshold).count() as f64 / scored.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameMetrics {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub pck: f64,
}

impl FrameMetrics {
    pub fn evaluate(pred: &Joints3D, truth: &Joints3D, pck_threshold: f64) -> Result<Self> {
        Ok(Self {
            mpjpe: mpjpe(pred, truth)?,
            pa_mpjpe: pa_mpjpe(pred, truth)?,
            pck: pck(pred, truth, pck_threshold)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub frames: Vec<FrameMetrics>,
    pub pck_threshold: f64,
}

impl MetricsReport {
    pub fn new(frames: Vec<FrameMetrics>, pck_threshold: f64) -> Self {
        Self { frames, pck_threshold }
    }

    fn mean(&self, f: impl Fn(&FrameMetrics) -> f64) -> f64 {
        if self.frames.is_empty() {
            return f64::NAN;
        }
        self.frames.iter().map(f).sum::<f64>() / self.frames.len() as f64
    }

    pub fn mean_mpjpe(&self) -> f64 {
        self.mean(|m| m.mpjpe)
    }

    pub fn mean_pa_mpjpe(&self) -> f64 {
        self.mean(|m| m.pa_mpjpe)
    }

    pub fn mean_pck(&self) -> f64 {
        self.mean(|m| m.pck)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,mpjpe,pa_mpjpe,pck\n");
        for (i, m) in self.frames.iter().enumerate() {
            let _ = writeln!(out, "{i},{},{},{}", m.mpjpe, m.pa_mpjpe, m.pck);
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "frames    MPJPE     PA-MPJPE  PCK@{:.2}\n{:<9} {:<9.5} {:<9.5} {:.4}\n",
            self.pck_threshold,
            self.frames.len(),
            self.mean_mpjpe(),
            self.mean_pa_mpjpe(),
            self.mean_pck()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    fn cloud() -> Joints3D {
        Joints3D(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.2, -0.1],
            [0.3, 1.5, 0.4],
            [-0.2, 0.1, 0.9],
        ])
    }

    fn transform(j: &Joints3D, r: &Matrix3<f64>, s: f64, t: Vector3<f64>) -> Joints3D {
        Joints3D(
            j.0.iter()
                .map(|p| {
                    let q = r * Vector3::from(*p) * s + t;
                    [q.x, q.y, q.z]
                })
                .collect(),
        )
    }

    #[test]
    fn mpjpe_examples() {
        let t = cloud();
        assert_eq!(mpjpe(&t, &t).unwrap(), 0.0);
        let shifted = transform(&t, &Matrix3::identity(), 1.0, Vector3::new(3.0, -1.0, 2.0));
        assert!(mpjpe(&shifted, &t).unwrap() < 1e-12);
        let a = Joints3D(vec![[0.0; 3], [1.0, 0.0, 0.0]]);
        let b = Joints3D(vec![[0.0; 3], [1.2, 0.0, 0.0]]);
        assert!((mpjpe(&a, &b).unwrap() - 0.1).abs() < 1e-12);
        assert!(mpjpe(&a, &cloud()).is_err());
    }

    #[test]
    fn procrustes_recovers_known_transform() {
        let pred = cloud();
        let r = *Rotation3::from_euler_angles(0.3, -1.1, 2.0).matrix();
        let (s, t) = (1.7, Vector3::new(0.5, -2.0, 0.25));
        let truth = transform(&pred, &r, s, t);
        let a = procrustes_align(&pred, &truth).unwrap();
        assert!((a.rotation - r).abs().max() < 1e-8);
        assert!((a.scale - s).abs() < 1e-8);
        assert!((a.translation - t).abs().max() < 1e-8);
        assert!(pa_mpjpe(&pred, &truth).unwrap() < 1e-8);
        let id = procrustes_align(&pred, &pred).unwrap();
        assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!((id.scale - 1.0).abs() < 1e-12 && id.translation.norm() < 1e-12);
    }

    #[test]
    fn reflections_are_excluded() {
        let pred = cloud();
        let mirror = Joints3D(pred.0.iter().map(|p| [-p[0], p[1], p[2]]).collect());
        let a = procrustes_align(&pred, &mirror).unwrap();
        assert!((a.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coincident_points_fall_back_to_identity() {
        let pred = Joints3D(vec![[1.0, 2.0, 3.0]; 4]);
        let a = procrustes_align(&pred, &cloud()).unwrap();
        assert_eq!(a.rotation, Matrix3::identity());
        assert_eq!(a.scale, 1.0);
    }

    #[test]
    fn pa_mpjpe_ignores_scale() {
        let truth = cloud();
        let pred = Joints3D(
            truth
                .0
                .iter()
                .map(|p| [p[0] + 0.1, p[1] * 0.9, p[2] - p[0] * 0.2])
                .collect(),
        );
        let base = pa_mpjpe(&pred, &truth).unwrap();
        let doubled = Joints3D(pred.0.iter().map(|p| [2.0 * p[0], 2.0 * p[1], 2.0 * p[2]]).collect());
        assert!((pa_mpjpe(&doubled, &truth).unwrap() - base).abs() < 1e-9);
    }

    /// Least squares minimizes squared error, not the mean distance: a single
    /// displaced joint is smeared over all joints by the alignment.
    #[test]
    fn pa_mpjpe_can_exceed_mpjpe_for_a_single_outlier() {
        let truth = Joints3D(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [1.0, 1.0, 1.0],
        ]);
        let mut pred = truth.clone();
        pred.0[4] = [1.0, 1.0, 2.0];
        assert!(pa_mpjpe(&pred, &truth).unwrap() > mpjpe(&pred, &truth).unwrap());
    }

    #[test]
    fn pck_examples() {
        let t = cloud();
        assert_eq!(pck(&t, &t, 0.15).unwrap(), 1.0);
        let moved = Joints3D(
            t.0.iter()
                .enumerate()
                .map(|(i, p)| if i == 0 { *p } else { [p[0] + 0.2, p[1], p[2]] })
                .collect(),
        );
        assert_eq!(pck(&moved, &t, 0.15).unwrap(), 0.0);
        let mut five = t.clone();
        five.0.push([0.5, 0.5, 0.5]);
        let mut mixed = five.clone();
        mixed.0[2][1] += 0.3;
        assert_eq!(pck(&mixed, &five, 0.15).unwrap(), 0.75);
        let mut edge = five.clone();
        edge.0[1][0] += 0.25;
        edge.0[3][2] -= 0.05;
        assert_eq!(pck(&edge, &five, 0.15).unwrap(), 0.75);
    }

    #[test]
    fn report_formats() {
        let r = MetricsReport::new(
            vec![
                FrameMetrics {
                    mpjpe: 0.1,
                    pa_mpjpe: 0.05,
                    pck: 1.0,
                },
                FrameMetrics {
                    mpjpe: 0.3,
                    pa_mpjpe: 0.15,
                    pck: 0.5,
                },
            ],
            0.15,
        );
        assert!((r.mean_mpjpe() - 0.2).abs() < 1e-15);
        assert!(r.to_csv().starts_with("frame,mpjpe,pa_mpjpe,pck\n0,0.1,0.05,1\n"));
        assert!(r.summary().contains("PCK@0.15"));
    }
}
