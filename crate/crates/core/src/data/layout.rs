//! Component regions on the image canvas and sketch decomposition.

use serde::{Deserialize, Serialize};

use s2i_tensor::{Tensor, Var};

use crate::error::{Error, Result};

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn from_array(a: [usize; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [usize; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }

    pub fn overlaps(&self, other: &Rect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    /// Coordinates divided by `stride` (floored on both edges, so rectangles
    /// that only touch stay disjoint).
    pub fn downscale(&self, stride: usize) -> Rect {
        Rect::new(
            self.x0 / stride,
            self.y0 / stride,
            self.x1 / stride,
            self.y1 / stride,
        )
    }
}

pub const FACIAL_COMPONENTS: [&str; 4] = ["left_eye", "right_eye", "nose", "mouth"];
pub const REMAINDER: &str = "remainder";

/// The four facial regions on an `H × W` canvas.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentLayout {
    pub left_eye: Rect,
    pub right_eye: Rect,
    pub nose: Rect,
    pub mouth: Rect,
    pub canvas: (usize, usize),
}

fn frac_rect(h: usize, w: usize, fx0: f64, fy0: f64, fx1: f64, fy1: f64) -> Rect {
    let sx = |f: f64| (f * w as f64).round() as usize;
    let sy = |f: f64| (f * h as f64).round() as usize;
    Rect::new(sx(fx0), sy(fy0), sx(fx1), sy(fy1))
}

impl ComponentLayout {
    /// Canonical frontal-face proportions, scaled to the canvas.
    pub fn default_for(h: usize, w: usize) -> Self {
        let left_eye = frac_rect(h, w, 0.18, 0.30, 0.46, 0.48);
        let right_eye = Rect::new(w - left_eye.x1, left_eye.y0, w - left_eye.x0, left_eye.y1);
        Self {
            left_eye,
            right_eye,
            nose: frac_rect(h, w, 0.38, 0.48, 0.62, 0.66),
            mouth: frac_rect(h, w, 0.30, 0.66, 0.70, 0.82),
            canvas: (h, w),
        }
    }

    pub fn rects(&self) -> [(&'static str, Rect); 4] {
        [
            ("left_eye", self.left_eye),
            ("right_eye", self.right_eye),
            ("nose", self.nose),
            ("mouth", self.mouth),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        self.to_regions().validate()
    }

    pub fn to_regions(&self) -> RegionLayout {
        RegionLayout {
            canvas: self.canvas,
            regions: self
                .rects()
                .iter()
                .map(|(n, r)| NamedRect {
                    name: n.to_string(),
                    rect: *r,
                })
                .collect(),
            allow_overlap: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedRect {
    pub name: String,
    pub rect: Rect,
}

/// Any set of named regions plus the implied remainder. Facial layouts
/// require a partition; saliency-derived layouts may overlap, in which case
/// later regions own the shared cells.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionLayout {
    pub canvas: (usize, usize),
    pub regions: Vec<NamedRect>,
    #[serde(default)]
    pub allow_overlap: bool,
}

impl RegionLayout {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.canvas;
        if h == 0 || w == 0 {
            return Err(Error::Layout(format!("empty canvas {h}x{w}")));
        }
        for NamedRect { name, rect } in &self.regions {
            if name == REMAINDER {
                return Err(Error::Layout("region name 'remainder' is reserved".into()));
            }
            if rect.area() == 0 {
                return Err(Error::Layout(format!("{name} has non-positive area: {rect:?}")));
            }
            if rect.x1 > w || rect.y1 > h {
                return Err(Error::Layout(format!(
                    "{name} {rect:?} lies outside the {h}x{w} canvas"
                )));
            }
        }
        for (i, a) in self.regions.iter().enumerate() {
            for b in &self.regions[i + 1..] {
                if a.name == b.name {
                    return Err(Error::Layout(format!("duplicate region {}", a.name)));
                }
                if !self.allow_overlap && a.rect.overlaps(&b.rect) {
                    return Err(Error::Layout(format!(
                        "{} {:?} overlaps {} {:?}",
                        a.name, a.rect, b.name, b.rect
                    )));
                }
            }
        }
        Ok(())
    }

    /// Component names in model order: regions, then the remainder.
    pub fn component_names(&self) -> Vec<String> {
        self.regions
            .iter()
            .map(|r| r.name.clone())
            .chain(std::iter::once(REMAINDER.to_string()))
            .collect()
    }

    pub fn num_components(&self) -> usize {
        self.regions.len() + 1
    }

    /// `[H, W]` mask: 1 outside every region, 0 inside.
    pub fn remainder_mask(&self) -> Tensor {
        let (h, w) = self.canvas;
        let mut m = Tensor::ones(&[h, w]);
        for r in &self.regions {
            for y in r.rect.y0..r.rect.y1 {
                for x in r.rect.x0..r.rect.x1 {
                    m.data_mut()[y * w + x] = 0.0;
                }
            }
        }
        m
    }

    /// Per-region `[H, W]` ownership masks under last-writer-wins, so every
    /// cell is owned by at most one region.
    pub fn ownership_masks(&self) -> Vec<Tensor> {
        let (h, w) = self.canvas;
        let mut owner = vec![usize::MAX; h * w];
        for (i, r) in self.regions.iter().enumerate() {
            for y in r.rect.y0..r.rect.y1 {
                for x in r.rect.x0..r.rect.x1 {
                    owner[y * w + x] = i;
                }
            }
        }
        (0..self.regions.len())
            .map(|i| {
                Tensor::from_vec(
                    &[h, w],
                    owner.iter().map(|&o| if o == i { 1.0 } else { 0.0 }).collect(),
                )
            })
            .collect()
    }

    pub fn has_overlap(&self) -> bool {
        self.regions.iter().enumerate().any(|(i, a)| {
            self.regions[i + 1..]
                .iter()
                .any(|b| a.rect.overlaps(&b.rect))
        })
    }

    /// The layout at `1/stride` resolution.
    pub fn downscale(&self, stride: usize) -> Result<RegionLayout> {
        let out = RegionLayout {
            canvas: (self.canvas.0 / stride, self.canvas.1 / stride),
            regions: self
                .regions
                .iter()
                .map(|r| NamedRect {
                    name: r.name.clone(),
                    rect: r.rect.downscale(stride),
                })
                .collect(),
            allow_overlap: self.allow_overlap,
        };
        out.validate()
            .map_err(|e| Error::Layout(format!("layout collapses at stride {stride}: {e}")))?;
        Ok(out)
    }

    /// Input shape `(h, w)` of every component, remainder last.
    pub fn component_shapes(&self) -> Vec<(usize, usize)> {
        self.regions
            .iter()
            .map(|r| (r.rect.height(), r.rect.width()))
            .chain(std::iter::once(self.canvas))
            .collect()
    }
}

/// Named component images cut from one sketch, remainder last.
#[derive(Clone, Debug)]
pub struct ComponentSet {
    pub parts: Vec<(String, Tensor)>,
}

impl ComponentSet {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.parts.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Cuts a `[C, H, W]` sketch into its regions plus the masked remainder.
pub fn extract_components(sketch: &Tensor, layout: &RegionLayout) -> Result<ComponentSet> {
    if sketch.rank() != 3 {
        return Err(Error::Shape(format!(
            "sketch must be [C,H,W], got {:?}",
            sketch.shape()
        )));
    }
    let (h, w) = (sketch.dim(1), sketch.dim(2));
    if (h, w) != layout.canvas {
        return Err(Error::Layout(format!(
            "layout canvas {:?} does not match sketch {h}x{w}",
            layout.canvas
        )));
    }
    layout.validate()?;
    let x = Var::constant(sketch.clone());
    let mut parts: Vec<(String, Tensor)> = layout
        .regions
        .iter()
        .map(|r| {
            let crop = x.crop2d(r.rect.y0, r.rect.y1, r.rect.x0, r.rect.x1);
            (r.name.clone(), crop.value().clone())
        })
        .collect();
    let mask = layout.remainder_mask().reshape(&[1, h, w]);
    let remainder = x.mul(&Var::constant(mask)).value().clone();
    parts.push((REMAINDER.to_string(), remainder));
    Ok(ComponentSet { parts })
}

/// Inverse of [`extract_components`] for partition layouts: pastes the
/// crops onto the remainder.
pub fn reassemble(components: &ComponentSet, layout: &RegionLayout) -> Result<Tensor> {
    let mut canvas = components
        .get(REMAINDER)
        .ok_or_else(|| Error::Validation("component set has no remainder".into()))?
        .clone();
    let (c, _, w) = (canvas.dim(0), canvas.dim(1), canvas.dim(2));
    let h = canvas.dim(1);
    for r in &layout.regions {
        let crop = components
            .get(&r.name)
            .ok_or_else(|| Error::Validation(format!("missing component {}", r.name)))?;
        for ch in 0..c {
            for y in 0..r.rect.height() {
                for x in 0..r.rect.width() {
                    let v = crop.get(&[ch, y, x]);
                    let off = (ch * h + r.rect.y0 + y) * w + r.rect.x0 + x;
                    canvas.data_mut()[off] += v;
                }
            }
        }
    }
    Ok(canvas)
}

/// Differentiable component cut of a `[N, C, H, W]` batch.
pub fn split_batch(x: &Var, layout: &RegionLayout) -> Vec<Var> {
    let (h, w) = layout.canvas;
    let mut out: Vec<Var> = layout
        .regions
        .iter()
        .map(|r| x.crop2d(r.rect.y0, r.rect.y1, r.rect.x0, r.rect.x1))
        .collect();
    let mask = layout.remainder_mask().reshape(&[1, 1, h, w]);
    out.push(x.mul(&Var::constant(mask)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::from_vec(
            &[1, h, w],
            (0..h * w).map(|i| (i % 97) as f64 / 97.0).collect(),
        )
    }

    #[test]
    fn default_layout_is_a_valid_partition() {
        for &(h, w) in &[(64, 64), (128, 128), (32, 48), (256, 256)] {
            let l = ComponentLayout::default_for(h, w);
            l.validate().unwrap();
            assert_eq!(l.right_eye.width(), l.left_eye.width());
        }
    }

    #[test]
    fn crop_shape_follows_rectangle() {
        let mut l = ComponentLayout::default_for(64, 64);
        l.left_eye = Rect::new(8, 16, 32, 32);
        l.right_eye = Rect::new(36, 16, 56, 30);
        l.nose = Rect::new(24, 33, 40, 42);
        let c = extract_components(&ramp(64, 64), &l.to_regions()).unwrap();
        assert_eq!(c.get("left_eye").unwrap().shape(), &[1, 16, 24]);
    }

    #[test]
    fn remainder_masks_regions_only() {
        let l = ComponentLayout::default_for(64, 64);
        let s = ramp(64, 64).map(|v| v + 0.01);
        let c = extract_components(&s, &l.to_regions()).unwrap();
        let rem = c.get(REMAINDER).unwrap();
        let n = l.nose;
        let (cy, cx) = ((n.y0 + n.y1) / 2, (n.x0 + n.x1) / 2);
        assert_eq!(rem.get(&[0, cy, cx]), 0.0);
        assert_eq!(rem.get(&[0, 2, 3]), s.get(&[0, 2, 3]));
    }

    #[test]
    fn rejects_out_of_bounds_and_overlap() {
        let mut l = ComponentLayout::default_for(64, 64);
        l.mouth = Rect::new(40, 50, 70, 60);
        assert!(matches!(l.validate(), Err(Error::Layout(_))));
        let mut l = ComponentLayout::default_for(64, 64);
        l.nose = l.left_eye;
        assert!(l.validate().unwrap_err().to_string().contains("overlaps"));
        let mut l = ComponentLayout::default_for(64, 64);
        l.nose = Rect::new(5, 5, 5, 9);
        assert!(l.validate().is_err());
    }

    #[test]
    fn overlap_ownership_is_last_writer() {
        let l = RegionLayout {
            canvas: (4, 4),
            regions: vec![
                NamedRect {
                    name: "a".into(),
                    rect: Rect::new(0, 0, 3, 3),
                },
                NamedRect {
                    name: "b".into(),
                    rect: Rect::new(2, 2, 4, 4),
                },
            ],
            allow_overlap: true,
        };
        l.validate().unwrap();
        let m = l.ownership_masks();
        assert_eq!(m[0].get(&[2, 2]), 0.0);
        assert_eq!(m[1].get(&[2, 2]), 1.0);
        let total: f64 = m.iter().map(Tensor::sum).sum::<f64>() + l.remainder_mask().sum();
        assert_eq!(total, 16.0);
    }
}
