//! Procedural toy faces for desk-scale experiments.
//!
//! Each identity fixes skin, hair, eye and lip colours plus facial
//! proportions; each image of that identity varies lighting slightly.
//! Features carry dark ink outlines so the difference-of-Gaussians sketch
//! picks them up. Eyes, nose and mouth sit inside the default component
//! rectangles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s2i_tensor::Tensor;

use super::sketch::{synthesize_sketch, SketchParams};
use super::ImagePair;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct FaceIdentity {
    pub id: String,
    background: [f64; 3],
    skin: [f64; 3],
    hair: [f64; 3],
    iris: [f64; 3],
    lips: [f64; 3],
    face_rx: f64,
    face_ry: f64,
    hair_drop: f64,
    eye_rx: f64,
    eye_ry: f64,
    nose_len: f64,
    mouth_rx: f64,
    mouth_ry: f64,
}

fn color(rng: &mut impl Rng, lo: [f64; 3], hi: [f64; 3]) -> [f64; 3] {
    [
        rng.random_range(lo[0]..hi[0]),
        rng.random_range(lo[1]..hi[1]),
        rng.random_range(lo[2]..hi[2]),
    ]
}

impl FaceIdentity {
    pub fn random(id: impl Into<String>, rng: &mut impl Rng) -> Self {
        Self {
            id: id.into(),
            background: color(rng, [0.55, 0.55, 0.6], [0.95, 0.95, 0.98]),
            skin: color(rng, [0.55, 0.38, 0.28], [0.95, 0.78, 0.68]),
            hair: color(rng, [0.02, 0.02, 0.02], [0.55, 0.4, 0.3]),
            iris: color(rng, [0.05, 0.1, 0.05], [0.45, 0.5, 0.6]),
            lips: color(rng, [0.55, 0.15, 0.15], [0.85, 0.4, 0.4]),
            face_rx: rng.random_range(0.30..0.37),
            face_ry: rng.random_range(0.38..0.44),
            hair_drop: rng.random_range(0.18..0.30),
            eye_rx: rng.random_range(0.07..0.10),
            eye_ry: rng.random_range(0.035..0.06),
            nose_len: rng.random_range(0.10..0.15),
            mouth_rx: rng.random_range(0.10..0.17),
            mouth_ry: rng.random_range(0.03..0.05),
        }
    }
}

struct Canvas {
    size: usize,
    rgb: Vec<[f64; 3]>,
}

impl Canvas {
    /// Paints an axis-aligned ellipse (centre and radii as canvas fractions)
    /// with a one-pixel soft edge.
    fn ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, col: [f64; 3], alpha: f64) {
        let s = self.size as f64;
        let (cx, cy, rx, ry) = (cx * s, cy * s, rx * s, ry * s);
        for y in 0..self.size {
            for x in 0..self.size {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                let r = (dx * dx + dy * dy).sqrt();
                let dist_px = (r - 1.0) * rx.min(ry);
                let a = alpha * (0.5 - dist_px).clamp(0.0, 1.0);
                if a > 0.0 {
                    let p = &mut self.rgb[y * self.size + x];
                    for c in 0..3 {
                        p[c] = p[c] * (1.0 - a) + col[c] * a;
                    }
                }
            }
        }
    }

    /// Paints the outline of an ellipse, `width` pixels thick.
    fn ring(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, width: f64, col: [f64; 3]) {
        let s = self.size as f64;
        let (cx, cy, rx, ry) = (cx * s, cy * s, rx * s, ry * s);
        for y in 0..self.size {
            for x in 0..self.size {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dist_px = ((dx * dx + dy * dy).sqrt() - 1.0) * rx.min(ry);
                let a = (width / 2.0 + 0.5 - dist_px.abs()).clamp(0.0, 1.0);
                if a > 0.0 {
                    let p = &mut self.rgb[y * self.size + x];
                    for c in 0..3 {
                        p[c] = p[c] * (1.0 - a) + col[c] * a;
                    }
                }
            }
        }
    }

    fn into_tensor(self, gain: f64) -> Tensor {
        let plane = self.size * self.size;
        let mut d = vec![0.0; 3 * plane];
        for (i, p) in self.rgb.iter().enumerate() {
            for c in 0..3 {
                d[c * plane + i] = (p[c] * gain).clamp(0.0, 1.0);
            }
        }
        Tensor::from_vec(&[3, self.size, self.size], d)
    }
}

fn darker(c: [f64; 3], f: f64) -> [f64; 3] {
    [c[0] * f, c[1] * f, c[2] * f]
}

/// Renders one `[3, size, size]` photo of `face`; `variant` jitters lighting.
pub fn render_face(face: &FaceIdentity, variant: u64, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(variant);
    let gain = if variant == 0 { 1.0 } else { rng.random_range(0.9..1.1) };
    let mut c = Canvas {
        size,
        rgb: vec![face.background; size * size],
    };
    let ink = [0.04, 0.03, 0.03];
    // hair mass behind the head, then the face
    c.ellipse(0.5, 0.42, face.face_rx + 0.06, face.face_ry + 0.05, face.hair, 1.0);
    c.ring(0.5, 0.42, face.face_rx + 0.06, face.face_ry + 0.05, 3.0, ink);
    c.ellipse(0.5, 0.55, face.face_rx, face.face_ry, face.skin, 1.0);
    c.ring(0.5, 0.55, face.face_rx, face.face_ry, 3.0, ink);
    // fringe
    c.ellipse(0.5, 0.12, face.face_rx + 0.02, face.hair_drop, face.hair, 1.0);
    c.ring(0.5, 0.12, face.face_rx + 0.02, face.hair_drop, 2.5, ink);
    for &ex in &[0.32, 0.68] {
        c.ellipse(ex, 0.32, face.eye_rx * 1.1, 0.02, ink, 1.0);
        c.ellipse(ex, 0.39, face.eye_rx, face.eye_ry, [0.97, 0.97, 0.97], 1.0);
        c.ring(ex, 0.39, face.eye_rx, face.eye_ry, 2.0, ink);
        c.ellipse(ex, 0.39, face.eye_ry * 0.9, face.eye_ry * 0.9, face.iris, 1.0);
        c.ellipse(ex, 0.39, face.eye_ry * 0.45, face.eye_ry * 0.45, ink, 1.0);
    }
    c.ellipse(0.5, 0.52 + face.nose_len / 2.0, 0.018, face.nose_len / 2.0, darker(face.skin, 0.8), 0.9);
    for &nx in &[0.47, 0.53] {
        c.ellipse(nx, 0.52 + face.nose_len, 0.02, 0.014, ink, 1.0);
    }
    c.ellipse(0.5, 0.74, face.mouth_rx, face.mouth_ry, face.lips, 1.0);
    c.ring(0.5, 0.74, face.mouth_rx, face.mouth_ry, 2.0, darker(face.lips, 0.2));
    c.ellipse(0.5, 0.74, face.mouth_rx * 0.9, 0.014, ink, 1.0);
    c.into_tensor(gain)
}

/// `identities × per_identity` sketch/photo pairs, sketches drawn with
/// `params`.
pub fn synthetic_pairs(
    identities: usize,
    per_identity: usize,
    size: usize,
    seed: u64,
    params: &SketchParams,
) -> Result<Vec<ImagePair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let faces: Vec<FaceIdentity> = (0..identities)
        .map(|i| FaceIdentity::random(format!("face{i:04}"), &mut rng))
        .collect();
    let mut out = Vec::with_capacity(identities * per_identity);
    for face in &faces {
        for v in 0..per_identity {
            let photo = render_face(face, v as u64, size);
            let sketch = synthesize_sketch(&photo, params)?;
            out.push(ImagePair::new(sketch, photo, &face.id)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn faces_are_deterministic_and_distinct() {
        let a = synthetic_pairs(2, 1, 64, 5, &SketchParams::default()).unwrap();
        let b = synthetic_pairs(2, 1, 64, 5, &SketchParams::default()).unwrap();
        assert_eq!(a[0].photo, b[0].photo);
        assert_ne!(a[0].photo, a[1].photo);
        assert_ne!(a[0].identity_id, a[1].identity_id);
        // sketches carry some lines
        let min = a[0].sketch.data().iter().cloned().fold(1.0, f64::min);
        let dark = a[0].sketch.data().iter().filter(|&&v| v < 0.9).count();
        assert!(min < 0.5);
        assert!(dark > 64 * 64 / 50, "only {dark} line pixels");
    }
}
