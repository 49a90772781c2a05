//! Image rendering for the four synthetic modalities.
//!
//! Each modality hides its class at a different spatial scale:
//!
//! | modality | structure | class encodes |
//! |---|---|---|
//! | 0 xray | one image-wide intensity ramp | ramp direction |
//! | 1 us | speckled cells on a 4×4 grid | which cells are speckled |
//! | 2 mri | one small bright blob | quadrant |
//! | 3 ct | two medium discs inside a body outline | pair orientation |
//!
//! Every modality also has its own background level and colour tint.
//! Pixel noise is Gaussian with standard deviation `σ`, clamped to `[0, 1]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const MODALITY_NAMES: [&str; 4] = ["xray", "us", "mri", "ct"];

const TINT: [[f64; 3]; 4] = [[1.0, 1.0, 1.0], [1.0, 0.85, 0.7], [0.75, 0.8, 1.0], [0.9, 1.0, 0.85]];

/// Renders one `3×h×w` image in row-major channel-first order.
pub(crate) fn render(modality: usize, class: usize, h: usize, w: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let plane = match modality {
        0 => xray(class, h, w, rng),
        1 => ultrasound(class, h, w, rng),
        2 => mri(class, h, w, rng),
        _ => ct(class, h, w, rng),
    };
    let tint = TINT[modality];
    let mut out = Vec::with_capacity(3 * h * w);
    let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("sigma validated"));
    for t in tint {
        for &p in &plane {
            let n = noise.as_ref().map_or(0.0, |d| d.sample(rng));
            out.push((p * t + n).clamp(0.0, 1.0));
        }
    }
    out
}

fn xray(class: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let amp = rng.gen_range(0.45..0.65);
    let base = rng.gen_range(0.15..0.25);
    let mut p = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let v = (y as f64 + 0.5) / h as f64;
            let ramp = match class {
                0 => u,
                1 => 1.0 - u,
                2 => v,
                _ => 1.0 - v,
            };
            p.push(base + amp * ramp);
        }
    }
    p
}

fn ultrasound(class: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let active = |cx: usize, cy: usize| match class {
        0 => (cx + cy).is_multiple_of(2),
        1 => (cx + cy) % 2 == 1,
        2 => cx == 1 || cx == 2,
        _ => cy == 1 || cy == 2,
    };
    let (ch, cw) = (h / 4, w / 4);
    // speckle grain of 2×2 pixels
    let (gh, gw) = (h.div_ceil(2), w.div_ceil(2));
    let grain: Vec<f64> = (0..gh * gw).map(|_| rng.gen::<f64>()).collect();
    let mut p = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let s = grain[(y / 2) * gw + x / 2];
            p.push(if active(x / cw, y / ch) { 0.35 + 0.45 * s } else { 0.1 + 0.1 * s });
        }
    }
    p
}

fn disc(p: &mut [f64], w: usize, cy: f64, cx: f64, r: f64, value: f64) {
    let h = p.len() / w;
    for y in 0..h {
        for x in 0..w {
            let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
            // one-pixel soft edge
            let a = (r + 0.5 - d).clamp(0.0, 1.0);
            if a > 0.0 {
                p[y * w + x] = p[y * w + x] * (1.0 - a) + value * a;
            }
        }
    }
}

fn mri(class: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut p = vec![0.05; h * w];
    let (qy, qx) = (class / 2, class % 2);
    let jy = rng.gen_range(-1.0..1.0) * h as f64 / 16.0;
    let jx = rng.gen_range(-1.0..1.0) * w as f64 / 16.0;
    let cy = (qy as f64 * 2.0 + 1.0) * h as f64 / 4.0 + jy;
    let cx = (qx as f64 * 2.0 + 1.0) * w as f64 / 4.0 + jx;
    let r = h.min(w) as f64 / 16.0 * rng.gen_range(0.9..1.2);
    disc(&mut p, w, cy, cx, r, 0.95);
    p
}

fn ct(class: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut p = vec![0.08; h * w];
    let (hf, wf) = (h as f64, w as f64);
    disc(&mut p, w, hf / 2.0, wf / 2.0, 0.45 * hf.min(wf), 0.3);
    let off = 0.22;
    let (dy, dx) = match class {
        0 => (0.0, off),
        1 => (off, 0.0),
        2 => (off * 0.75, off * 0.75),
        _ => (off * 0.75, -off * 0.75),
    };
    let r = hf.min(wf) / 8.0;
    for sign in [-1.0, 1.0] {
        let jy = rng.gen_range(-1.0..1.0) * hf / 32.0;
        let jx = rng.gen_range(-1.0..1.0) * wf / 32.0;
        disc(&mut p, w, hf / 2.0 + sign * dy * hf + jy, wf / 2.0 + sign * dx * wf + jx, r, 0.8);
    }
    p
}
