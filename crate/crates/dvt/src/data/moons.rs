//! The two-moons problem and its target-domain shift.
//!
//! Geometry: the classic pair of interleaved half-circles — class 0 on
//! (cos t, sin t), class 1 on (1 − cos t, ½ − sin t) for t ∈ [0, π], points
//! evenly spaced, Gaussian noise added in those canonical units — mapped by
//! a fixed affine transform into [0,1]² so that the rotation about [.5,.5]
//! and the log₁₀(x)+1 shift stay inside the log's domain: every noiseless
//! point lies within 0.406 of the center, so a 30° rotation keeps both
//! coordinates positive with ~7 canonical noise standard deviations of
//! margin at the default noise level.

use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Canonical-to-unit-square map: x ∈ [−1, 2] → [0.1, 0.9], y ∈ [−0.5, 1] →
/// [0.3, 0.7].
pub(crate) const MOON_SCALE: f64 = 0.8 / 3.0;
pub(crate) const MOON_OFF_X: f64 = 0.1;
pub(crate) const MOON_OFF_Y: f64 = 0.3;

const SHIFT_CENTER: f64 = 0.5;
const SHIFT_ANGLE: f64 = std::f64::consts::PI / 6.0; // 30° counter-clockwise

fn map_point(cx: f64, cy: f64) -> (f64, f64) {
    ((cx + 1.0) * MOON_SCALE + MOON_OFF_X, (cy + 0.5) * MOON_SCALE + MOON_OFF_Y)
}

/// Two interleaved half-moons with exact per-class counts, scaled into
/// [0,1]². `noise_sd` is in canonical units (half-circle radius 1). All rows
/// carry labels and are supervised; splitting hides some later.
pub fn generate_moons(
    n_class0: usize,
    n_class1: usize,
    noise_sd: f64,
    seed: u64,
    domain_id: &str,
) -> Result<Dataset> {
    if n_class0 == 0 || n_class1 == 0 {
        return Err(Error::Config("moons: both class counts must be >= 1".into()));
    }
    if !(noise_sd >= 0.0) || !noise_sd.is_finite() {
        return Err(Error::Config(format!("moons: noise_sd must be >= 0, got {}", noise_sd)));
    }
    let mut rng = rng::stream(seed, rng::salt::DATA);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let noise = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
        if noise_sd == 0.0 {
            0.0
        } else {
            noise_sd * normal.sample(rng)
        }
    };
    let arc = |i: usize, n: usize| -> f64 {
        if n == 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (n - 1) as f64
        }
    };
    let n = n_class0 + n_class1;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n_class0 {
        let t = arc(i, n_class0);
        let (px, py) = map_point(t.cos() + noise(&mut rng), t.sin() + noise(&mut rng));
        data.push(px);
        data.push(py);
        labels.push(Some(0));
    }
    for i in 0..n_class1 {
        let t = arc(i, n_class1);
        let (px, py) =
            map_point(1.0 - t.cos() + noise(&mut rng), 0.5 - t.sin() + noise(&mut rng));
        data.push(px);
        data.push(py);
        labels.push(Some(1));
    }
    Ok(Dataset {
        domain_id: domain_id.to_string(),
        x: Tensor::new(vec![n, 2], data)?,
        labels,
        sup_mask: vec![true; n],
        class_count: 2,
    })
}

/// The target-domain shift: rotate 30° counter-clockwise about [.5, .5],
/// then apply log₁₀(·)+1 elementwise. Errors on any point whose rotated
/// coordinate is not strictly positive, naming the row.
pub fn shift_target(points: &Tensor) -> Result<Tensor> {
    if points.rank() != 2 || points.cols() != 2 {
        return Err(Error::Shape {
            op: "shift_target",
            detail: format!("expected [N, 2], got {:?}", points.shape()),
        });
    }
    let (sin, cos) = SHIFT_ANGLE.sin_cos();
    let mut out = Vec::with_capacity(points.len());
    for i in 0..points.rows() {
        let p = points.row(i);
        let (dx, dy) = (p[0] - SHIFT_CENTER, p[1] - SHIFT_CENTER);
        let rx = SHIFT_CENTER + cos * dx - sin * dy;
        let ry = SHIFT_CENTER + sin * dx + cos * dy;
        if rx <= 0.0 || ry <= 0.0 {
            return Err(Error::Data(format!(
                "shift_target: row {} = ({}, {}) rotates to ({}, {}); \
                 log10 needs strictly positive coordinates",
                i, p[0], p[1], rx, ry
            )));
        }
        out.push(rx.log10() + 1.0);
        out.push(ry.log10() + 1.0);
    }
    Tensor::new(vec![points.rows(), 2], out)
}

/// Inverse of [`shift_target`]: 10^(x−1) elementwise, then rotate 30°
/// clockwise about [.5, .5].
pub fn shift_target_inverse(points: &Tensor) -> Result<Tensor> {
    if points.rank() != 2 || points.cols() != 2 {
        return Err(Error::Shape {
            op: "shift_target_inverse",
            detail: format!("expected [N, 2], got {:?}", points.shape()),
        });
    }
    let (sin, cos) = (-SHIFT_ANGLE).sin_cos();
    let mut out = Vec::with_capacity(points.len());
    for i in 0..points.rows() {
        let p = points.row(i);
        let (ex, ey) = (10f64.powf(p[0] - 1.0), 10f64.powf(p[1] - 1.0));
        let (dx, dy) = (ex - SHIFT_CENTER, ey - SHIFT_CENTER);
        out.push(SHIFT_CENTER + cos * dx - sin * dy);
        out.push(SHIFT_CENTER + sin * dx + cos * dy);
    }
    Tensor::new(vec![points.rows(), 2], out)
}
