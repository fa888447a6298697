//! Procedural corpus of clean 32x32 shape images.
//!
//! Every image is a pure function of (master seed, index), so train/test
//! splits are just disjoint index ranges and any image can be regenerated
//! without storing the corpus. Shapes are rendered at 4x resolution and
//! box-averaged down, which gives the soft edges a small autoencoder can
//! actually fit.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::rng::derive_rng;

/// Side length of every corpus image.
pub const IMAGE_SIZE: usize = 32;
/// Supersampling factor for rendering.
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy)]
enum Shape {
    Circle,
    Rectangle,
    Triangle,
}

struct Scene {
    // Background gradient endpoints, RGB in [0,1].
    bg_a: [f64; 3],
    bg_b: [f64; 3],
    // 0 = horizontal gradient, 1 = vertical.
    bg_axis: usize,
    shape: Shape,
    fill: [f64; 3],
    // Center and half-extent in unit coordinates [0,1].
    cx: f64,
    cy: f64,
    half: f64,
    rotation: f64,
}

fn soft_color(rng: &mut impl Rng) -> [f64; 3] {
    [
        rng.gen_range(0.1..0.9),
        rng.gen_range(0.1..0.9),
        rng.gen_range(0.1..0.9),
    ]
}

fn scene(master_seed: u64, index: u64) -> Scene {
    let mut rng = derive_rng(master_seed, "corpus/scene", index);
    let bg_a = soft_color(&mut rng);
    let bg_b = soft_color(&mut rng);
    let bg_axis = rng.gen_range(0..2usize);
    let shape = match rng.gen_range(0..3u8) {
        0 => Shape::Circle,
        1 => Shape::Rectangle,
        _ => Shape::Triangle,
    };
    let fill = soft_color(&mut rng);
    Scene {
        bg_a,
        bg_b,
        bg_axis,
        shape,
        fill,
        cx: rng.gen_range(0.3..0.7),
        cy: rng.gen_range(0.3..0.7),
        half: rng.gen_range(0.12..0.3),
        rotation: rng.gen_range(0.0..std::f64::consts::TAU),
    }
}

impl Scene {
    fn inside(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= self.half * self.half,
            Shape::Rectangle => {
                let (sin, cos) = self.rotation.sin_cos();
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                u.abs() <= self.half && v.abs() <= self.half * 0.75
            }
            Shape::Triangle => {
                let mut verts = [[0.0f64; 2]; 3];
                for (k, vert) in verts.iter_mut().enumerate() {
                    let angle = self.rotation + k as f64 * std::f64::consts::TAU / 3.0;
                    vert[0] = self.cx + self.half * angle.cos();
                    vert[1] = self.cy + self.half * angle.sin();
                }
                let sign = |a: [f64; 2], b: [f64; 2]| {
                    (x - b[0]) * (a[1] - b[1]) - (a[0] - b[0]) * (y - b[1])
                };
                let d0 = sign(verts[0], verts[1]);
                let d1 = sign(verts[1], verts[2]);
                let d2 = sign(verts[2], verts[0]);
                let has_neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                let has_pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }

    fn color_at(&self, x: f64, y: f64) -> [f64; 3] {
        if self.inside(x, y) {
            return self.fill;
        }
        let t = if self.bg_axis == 0 { x } else { y };
        [
            self.bg_a[0] + t * (self.bg_b[0] - self.bg_a[0]),
            self.bg_a[1] + t * (self.bg_b[1] - self.bg_a[1]),
            self.bg_a[2] + t * (self.bg_b[2] - self.bg_a[2]),
        ]
    }
}

/// Renders corpus image `index` as a `[3,32,32]` tensor in [-1,1].
pub fn clean_image(master_seed: u64, index: u64) -> ArrayD<f64> {
    let sc = scene(master_seed, index);
    let n = IMAGE_SIZE;
    let ss = SUPERSAMPLE;
    let mut img = ArrayD::zeros(IxDyn(&[3, n, n]));
    let inv = 1.0 / (n * ss) as f64;
    let weight = 1.0 / (ss * ss) as f64;
    for i in 0..n {
        for j in 0..n {
            let mut acc = [0.0f64; 3];
            for si in 0..ss {
                for sj in 0..ss {
                    let y = ((i * ss + si) as f64 + 0.5) * inv;
                    let x = ((j * ss + sj) as f64 + 0.5) * inv;
                    let c = sc.color_at(x, y);
                    acc[0] += c[0];
                    acc[1] += c[1];
                    acc[2] += c[2];
                }
            }
            for c in 0..3 {
                img[[c, i, j]] = (acc[c] * weight) * 2.0 - 1.0;
            }
        }
    }
    img
}

/// Renders images `start..start+count`.
pub fn build_corpus(master_seed: u64, start: u64, count: usize) -> Vec<ArrayD<f64>> {
    (0..count as u64)
        .map(|k| clean_image(master_seed, start + k))
        .collect()
}
