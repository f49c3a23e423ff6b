//! Synthetic handwritten-digit stand-in: stroke skeletons for 0–9 rendered
//! at 28×28 with per-image affine jitter, stroke-width jitter, and pixel
//! noise. Produces MNIST-shaped data for the digits experiments without
//! shipping a corpus.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const DIGIT_SIDE: usize = 28;
const GLYPH_PX: f64 = 22.0; // unit glyph box in pixels, centered
const PIXEL_NOISE_SD: f64 = 0.06;

type Seg = [(f64, f64); 2];

fn poly(points: &[(f64, f64)]) -> Vec<Seg> {
    points.windows(2).map(|w| [w[0], w[1]]).collect()
}

fn ring(cx: f64, cy: f64, rx: f64, ry: f64) -> Vec<Seg> {
    let n = 10;
    let pts: Vec<(f64, f64)> = (0..=n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect();
    poly(&pts)
}

/// Stroke skeleton in unit glyph coordinates (x right, y down).
fn skeleton(digit: usize) -> Vec<Seg> {
    match digit {
        0 => ring(0.5, 0.5, 0.27, 0.36),
        1 => poly(&[(0.35, 0.3), (0.52, 0.15), (0.52, 0.85)]),
        2 => poly(&[
            (0.28, 0.32),
            (0.38, 0.17),
            (0.62, 0.15),
            (0.72, 0.3),
            (0.66, 0.45),
            (0.3, 0.78),
            (0.28, 0.85),
            (0.74, 0.85),
        ]),
        3 => poly(&[
            (0.28, 0.2),
            (0.6, 0.15),
            (0.7, 0.3),
            (0.5, 0.45),
            (0.7, 0.62),
            (0.62, 0.82),
            (0.3, 0.84),
        ]),
        4 => {
            let mut s = poly(&[(0.62, 0.15), (0.3, 0.6), (0.75, 0.6)]);
            s.push([(0.62, 0.15), (0.62, 0.85)]);
            s
        }
        5 => poly(&[
            (0.7, 0.15),
            (0.32, 0.15),
            (0.3, 0.45),
            (0.6, 0.42),
            (0.72, 0.58),
            (0.66, 0.78),
            (0.32, 0.84),
        ]),
        6 => {
            let mut s = poly(&[(0.66, 0.14), (0.44, 0.28), (0.32, 0.5), (0.3, 0.68)]);
            s.extend(ring(0.5, 0.67, 0.19, 0.19));
            s
        }
        7 => poly(&[(0.26, 0.16), (0.74, 0.16), (0.48, 0.85)]),
        8 => {
            let mut s = ring(0.5, 0.31, 0.16, 0.16);
            s.extend(ring(0.5, 0.69, 0.19, 0.19));
            s
        }
        9 => {
            let mut s = ring(0.52, 0.34, 0.18, 0.18);
            s.extend(poly(&[(0.7, 0.36), (0.66, 0.6), (0.56, 0.86)]));
            s
        }
        _ => unreachable!("digits are 0..=9"),
    }
}

fn dist_to_segment(px: f64, py: f64, seg: &Seg) -> f64 {
    let (ax, ay) = seg[0];
    let (bx, by) = seg[1];
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

#[allow(clippy::too_many_arguments)]
fn render(
    digit: usize,
    rot: f64,
    scale: f64,
    tx: f64,
    ty: f64,
    stroke_sigma: f64,
    noise: &mut impl FnMut() -> f64,
) -> Vec<f64> {
    let (sin, cos) = rot.sin_cos();
    let half = DIGIT_SIDE as f64 / 2.0;
    let segs: Vec<Seg> = skeleton(digit)
        .iter()
        .map(|seg| {
            seg.map(|(gx, gy)| {
                let (ux, uy) = ((gx - 0.5) * GLYPH_PX * scale, (gy - 0.5) * GLYPH_PX * scale);
                (half + tx + cos * ux - sin * uy, half + ty + sin * ux + cos * uy)
            })
        })
        .collect();
    let mut img = Vec::with_capacity(DIGIT_SIDE * DIGIT_SIDE);
    for r in 0..DIGIT_SIDE {
        for c in 0..DIGIT_SIDE {
            let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
            let mut v: f64 = 0.0;
            for seg in &segs {
                let d = dist_to_segment(px, py, seg);
                v = v.max((-d * d / (2.0 * stroke_sigma * stroke_sigma)).exp());
            }
            img.push((v + noise()).clamp(0.0, 1.0));
        }
    }
    img
}

/// `n` glyph images with balanced classes (counts differ by at most one),
/// shuffled row order, pixels in [0, 1], all labeled. Deterministic by seed.
pub fn generate_digits(n: usize, seed: u64, domain_id: &str) -> Result<Dataset> {
    use rand::seq::SliceRandom;
    if n == 0 {
        return Err(Error::Config("generate_digits: n must be >= 1".into()));
    }
    let mut r = rng::stream(seed, rng::salt::DATA);
    let normal = Normal::new(0.0, PIXEL_NOISE_SD).expect("noise sd");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);

    let mut data = vec![0.0; n * DIGIT_SIDE * DIGIT_SIDE];
    let mut labels = vec![None; n];
    for (i, &row) in order.iter().enumerate() {
        let digit = i % 10;
        let rot = r.gen_range(-0.25..0.25);
        let scale = r.gen_range(0.8..1.12);
        let tx = r.gen_range(-2.0..2.0);
        let ty = r.gen_range(-2.0..2.0);
        let sigma = r.gen_range(0.8..1.1);
        let img = render(digit, rot, scale, tx, ty, sigma, &mut || normal.sample(&mut r));
        let off = row * DIGIT_SIDE * DIGIT_SIDE;
        data[off..off + img.len()].copy_from_slice(&img);
        labels[row] = Some(digit);
    }
    let ds = Dataset {
        domain_id: domain_id.to_string(),
        x: Tensor::new(vec![n, DIGIT_SIDE * DIGIT_SIDE], data)?,
        labels,
        sup_mask: vec![true; n],
        class_count: 10,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_range_balance_determinism() {
        let ds = generate_digits(40, 5, "digits").unwrap();
        assert_eq!(ds.x.shape(), &[40, 784]);
        assert!(ds.x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for d in 0..10 {
            assert_eq!(ds.labels.iter().filter(|l| **l == Some(d)).count(), 4);
        }
        let ds2 = generate_digits(40, 5, "digits").unwrap();
        assert_eq!(ds.x, ds2.x);
        assert_eq!(ds.labels, ds2.labels);
        assert_ne!(generate_digits(40, 6, "digits").unwrap().x, ds.x);
    }

    #[test]
    fn classes_are_visually_distinct() {
        // Mean image per class; distances between class means must dwarf
        // within-class spread for the generator to be learnable.
        let ds = generate_digits(200, 9, "digits").unwrap();
        let mut means = vec![vec![0.0; 784]; 10];
        let mut counts = vec![0usize; 10];
        for i in 0..ds.len() {
            let d = ds.labels[i].unwrap();
            counts[d] += 1;
            for (m, v) in means[d].iter_mut().zip(ds.x.row(i)) {
                *m += v;
            }
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            for v in m.iter_mut() {
                *v /= c as f64;
            }
        }
        for a in 0..10 {
            for b in (a + 1)..10 {
                let d2: f64 =
                    means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum();
                assert!(d2.sqrt() > 1.5, "classes {} and {} too similar: {}", a, b, d2.sqrt());
            }
        }
    }

    #[test]
    fn odd_n_keeps_counts_within_one() {
        let ds = generate_digits(25, 1, "digits").unwrap();
        let mut counts = vec![0usize; 10];
        for l in ds.labels.iter().flatten() {
            counts[*l] += 1;
        }
        assert_eq!(counts.iter().sum::<usize>(), 25);
        assert!(counts.iter().all(|&c| c == 2 || c == 3));
    }
}
