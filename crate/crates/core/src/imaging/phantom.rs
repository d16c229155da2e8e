//! Ellipse phantoms: the modified Shepp-Logan head and seeded random
//! ellipse superpositions.

use rand::Rng;

use crate::rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhantomKind {
    SheppLogan,
    RandomEllipses,
}

impl std::str::FromStr for PhantomKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "shepp-logan" => Ok(PhantomKind::SheppLogan),
            "random-ellipses" => Ok(PhantomKind::RandomEllipses),
            _ => Err(format!("unknown phantom kind {s:?} (shepp-logan | random-ellipses)")),
        }
    }
}

/// One ellipse on the `[-1, 1]^2` canvas (y pointing up).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub intensity: f64,
    pub a: f64,
    pub b: f64,
    pub x0: f64,
    pub y0: f64,
    /// Rotation in degrees.
    pub phi: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.phi.to_radians().sin_cos();
        let (dx, dy) = (x - self.x0, y - self.y0);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Modified (higher-contrast) Shepp-Logan table.
pub const SHEPP_LOGAN: [Ellipse; 10] = {
    const fn e(intensity: f64, a: f64, b: f64, x0: f64, y0: f64, phi: f64) -> Ellipse {
        Ellipse {
            intensity,
            a,
            b,
            x0,
            y0,
            phi,
        }
    }
    [
        e(1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
        e(-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
        e(-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
        e(-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
        e(0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
        e(0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
        e(0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
        e(0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
        e(0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
        e(0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
    ]
};

/// Sum of ellipse intensities at a canvas point.
pub fn ellipse_sum(ellipses: &[Ellipse], x: f64, y: f64) -> f64 {
    ellipses.iter().filter(|e| e.contains(x, y)).map(|e| e.intensity).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom<T> {
    /// `[h, w]`, values in `[0, 1]`.
    pub image: Tensor<T>,
    pub kind: PhantomKind,
    pub seed: u64,
}

/// Sub-samples per pixel axis used when rasterising.
pub const SUPERSAMPLE: usize = 4;

/// Canvas coordinate of pixel `(row, col)` centre; rows run top to bottom.
pub fn pixel_center(row: usize, col: usize, h: usize, w: usize) -> (f64, f64) {
    let x = (2.0 * col as f64 + 1.0) / w as f64 - 1.0;
    let y = 1.0 - (2.0 * row as f64 + 1.0) / h as f64;
    (x, y)
}

/// Rasterises with `SUPERSAMPLE^2` area samples per pixel and clips to `[0, 1]`.
pub fn rasterize<T: Scalar>(ellipses: &[Ellipse], h: usize, w: usize) -> Tensor<T> {
    let ss = SUPERSAMPLE;
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for sy in 0..ss {
                for sx in 0..ss {
                    let x = (2.0 * (c as f64 + (sx as f64 + 0.5) / ss as f64)) / w as f64 - 1.0;
                    let y = 1.0 - (2.0 * (r as f64 + (sy as f64 + 0.5) / ss as f64)) / h as f64;
                    acc += ellipse_sum(ellipses, x, y);
                }
            }
            out.push(T::of((acc / (ss * ss) as f64).clamp(0.0, 1.0)));
        }
    }
    Tensor::new(&[h, w], out).expect("h*w samples")
}

/// Seeded random phantom: a body ellipse plus 3 to 7 inner structures.
pub fn random_ellipses(seed: u64) -> Vec<Ellipse> {
    let mut r = rng::keyed(seed, &[rng::domain::DATA, 0x5048]);
    let mut out = vec![Ellipse {
        intensity: r.random_range(0.3..0.6),
        a: r.random_range(0.6..0.85),
        b: r.random_range(0.6..0.85),
        x0: r.random_range(-0.05..0.05),
        y0: r.random_range(-0.05..0.05),
        phi: r.random_range(-30.0..30.0),
    }];
    let n = r.random_range(3..=7);
    for _ in 0..n {
        let sign = if r.random_bool(0.7) { 1.0 } else { -1.0 };
        out.push(Ellipse {
            intensity: sign * r.random_range(0.1..0.4),
            a: r.random_range(0.05..0.35),
            b: r.random_range(0.05..0.35),
            x0: r.random_range(-0.45..0.45),
            y0: r.random_range(-0.45..0.45),
            phi: r.random_range(0.0..180.0),
        });
    }
    out
}

pub fn make_phantom<T: Scalar>(kind: PhantomKind, h: usize, w: usize, seed: u64) -> Phantom<T> {
    let ellipses = match kind {
        PhantomKind::SheppLogan => SHEPP_LOGAN.to_vec(),
        PhantomKind::RandomEllipses => random_ellipses(seed),
    };
    Phantom {
        image: rasterize(&ellipses, h, w),
        kind,
        seed,
    }
}
