//! Region discovery for non-facial sketches: saliency, quantile banding,
//! DBSCAN over salient pixels, and conversion of clusters into a region
//! layout.

use std::collections::VecDeque;

use log::warn;
use serde::{Deserialize, Serialize};

use s2i_tensor::{par, Tensor};

use crate::config::SaliencyConfig;
use crate::data::layout::{NamedRect, Rect, RegionLayout};
use crate::data::sketch::gaussian_blur;
use crate::error::{Error, Result};

/// Anything that scores pixels of a `[1, H, W]` sketch in `[0, 1]`.
pub trait SaliencyProvider: Sync {
    /// `[H, W]` saliency map.
    fn saliency(&self, sketch: &Tensor) -> Result<Tensor>;
}

/// Smoothed gradient magnitude, normalized by its maximum.
#[derive(Clone, Copy, Debug)]
pub struct GradientSaliency {
    pub sigma: f64,
}

impl Default for GradientSaliency {
    fn default() -> Self {
        Self { sigma: 1.0 }
    }
}

impl SaliencyProvider for GradientSaliency {
    fn saliency(&self, sketch: &Tensor) -> Result<Tensor> {
        compute_saliency(sketch, self.sigma)
    }
}

/// Central-difference gradient magnitude with edge replication.
pub fn gradient_magnitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| plane[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y, x + 1) - at(y, x - 1)) / 2.0;
            let gy = (at(y + 1, x) - at(y - 1, x)) / 2.0;
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Default saliency of a `[1, H, W]` sketch.
pub fn compute_saliency(sketch: &Tensor, sigma: f64) -> Result<Tensor> {
    let s = sketch.shape();
    if s.len() != 3 || s[0] != 1 || s[1] == 0 || s[2] == 0 {
        return Err(Error::Shape(format!("saliency expects a [1,H,W] sketch, got {s:?}")));
    }
    if !sketch.is_finite() {
        return Err(Error::Validation("sketch contains non-finite values".into()));
    }
    let (h, w) = (s[1], s[2]);
    let g = gradient_magnitude(sketch.data(), h, w);
    let mut m = if sigma > 0.0 { gaussian_blur(&g, h, w, sigma) } else { g };
    let max = m.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        m.iter_mut().for_each(|v| *v = (*v / max).clamp(0.0, 1.0));
    } else {
        m.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(Tensor::from_vec(&[h, w], m))
}

/// Linear-interpolated quantile of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Band index per pixel: the number of quantile thresholds the value
/// strictly exceeds.
pub fn multilevel_threshold(map: &Tensor, levels: &[f64]) -> Result<Vec<u8>> {
    if levels.is_empty() || levels.iter().any(|&q| !(q > 0.0 && q < 1.0)) || levels.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::Validation(format!("quantile levels must be strictly increasing in (0,1), got {levels:?}")));
    }
    if levels.len() > u8::MAX as usize {
        return Err(Error::Validation("too many quantile levels".into()));
    }
    if map.numel() == 0 {
        return Ok(Vec::new());
    }
    let thresholds: Vec<f64> = levels.iter().map(|&q| quantile(map.data(), q)).collect();
    Ok(map
        .data()
        .iter()
        .map(|&v| thresholds.iter().filter(|&&t| v > t).count() as u8)
        .collect())
}

/// DBSCAN output over an input point list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    /// Cluster id per input point, `-1` for noise.
    pub labels: Vec<i32>,
    pub points: Vec<(usize, usize)>,
    pub num_clusters: usize,
}

/// Inclusive pixel bounds `(x0, y0, x1, y1)`.
pub type PixelBox = (usize, usize, usize, usize);

impl ClusterResult {
    /// Points in cluster `c`.
    pub fn members(&self, c: usize) -> Vec<(usize, usize)> {
        self.points
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == c as i32)
            .map(|(p, _)| *p)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.num_clusters];
        for &l in &self.labels {
            if l >= 0 {
                s[l as usize] += 1;
            }
        }
        s
    }

    /// Tight inclusive bounding box of each cluster.
    pub fn boxes(&self) -> Vec<PixelBox> {
        let mut b = vec![(usize::MAX, usize::MAX, 0, 0); self.num_clusters];
        for (&(x, y), &l) in self.points.iter().zip(&self.labels) {
            if l >= 0 {
                let e = &mut b[l as usize];
                *e = (e.0.min(x), e.1.min(y), e.2.max(x), e.3.max(y));
            }
        }
        b
    }
}

/// Indices within `eps` of each point, the point itself included.
pub fn neighborhoods(points: &[(usize, usize)], eps: f64) -> Vec<Vec<usize>> {
    let e2 = eps * eps;
    par::map_range(points.len(), |i| {
        let (xi, yi) = (points[i].0 as f64, points[i].1 as f64);
        points
            .iter()
            .enumerate()
            .filter(|(_, &(x, y))| {
                let (dx, dy) = (x as f64 - xi, y as f64 - yi);
                dx * dx + dy * dy <= e2
            })
            .map(|(j, _)| j)
            .collect()
    })
}

/// Density-based clustering of `(x, y)` pixel coordinates. Border points
/// join the first cluster that reaches them, in input order.
pub fn dbscan_cluster(points: &[(usize, usize)], eps: f64, min_pts: usize) -> Result<ClusterResult> {
    if !(eps > 0.0) || min_pts == 0 {
        return Err(Error::Validation(format!("dbscan needs eps > 0 and min_pts >= 1, got {eps} and {min_pts}")));
    }
    let nbrs = neighborhoods(points, eps);
    let core: Vec<bool> = nbrs.iter().map(|n| n.len() >= min_pts).collect();
    const UNSEEN: i32 = -2;
    let mut labels = vec![UNSEEN; points.len()];
    let mut cluster = 0i32;
    for i in 0..points.len() {
        if labels[i] != UNSEEN {
            continue;
        }
        if !core[i] {
            labels[i] = -1;
            continue;
        }
        labels[i] = cluster;
        let mut queue: VecDeque<usize> = nbrs[i].iter().copied().collect();
        while let Some(j) = queue.pop_front() {
            if labels[j] == -1 {
                labels[j] = cluster;
            }
            if labels[j] != UNSEEN {
                continue;
            }
            labels[j] = cluster;
            if core[j] {
                queue.extend(nbrs[j].iter().copied());
            }
        }
        cluster += 1;
    }
    Ok(ClusterResult {
        labels,
        points: points.to_vec(),
        num_clusters: cluster as usize,
    })
}

/// Inclusive box grown by `round(margin · extent)` per axis, clipped to the
/// canvas.
pub fn pad_box(b: PixelBox, margin: f64, canvas: (usize, usize)) -> PixelBox {
    let (h, w) = canvas;
    let mx = (margin * (b.2 - b.0) as f64).round() as usize;
    let my = (margin * (b.3 - b.1) as f64).round() as usize;
    (
        b.0.saturating_sub(mx),
        b.1.saturating_sub(my),
        (b.2 + mx).min(w - 1),
        (b.3 + my).min(h - 1),
    )
}

/// Largest clusters as padded regions `part0, part1, …` (by descending
/// size). Without clusters the whole canvas is one region.
pub fn clusters_to_layout(result: &ClusterResult, max_components: usize, canvas: (usize, usize), margin: f64) -> Result<RegionLayout> {
    let (h, w) = canvas;
    if h == 0 || w == 0 {
        return Err(Error::Layout("empty canvas".into()));
    }
    if let Some(&(x, y)) = result.points.iter().find(|&&(x, y)| x >= w || y >= h) {
        return Err(Error::Layout(format!("cluster point ({x},{y}) lies outside the {h}x{w} canvas")));
    }
    let regions = if result.num_clusters == 0 || max_components == 0 {
        vec![NamedRect {
            name: "part0".into(),
            rect: Rect::new(0, 0, w, h),
        }]
    } else {
        let sizes = result.sizes();
        let boxes = result.boxes();
        let mut order: Vec<usize> = (0..result.num_clusters).collect();
        order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
        order
            .into_iter()
            .take(max_components)
            .enumerate()
            .map(|(i, c)| {
                let (x0, y0, x1, y1) = pad_box(boxes[c], margin, canvas);
                NamedRect {
                    name: format!("part{i}"),
                    rect: Rect::new(x0, y0, x1 + 1, y1 + 1),
                }
            })
            .collect()
    };
    let layout = RegionLayout {
        canvas,
        regions,
        allow_overlap: true,
    };
    if layout.has_overlap() {
        warn!("salient regions overlap; later regions take the shared pixels");
    }
    layout.validate()?;
    Ok(layout)
}

/// Coordinates of pixels whose band is at least `min_band`.
pub fn salient_points(bands: &[u8], w: usize, min_band: usize) -> Vec<(usize, usize)> {
    bands
        .iter()
        .enumerate()
        .filter(|(_, &b)| b as usize >= min_band)
        .map(|(i, _)| (i % w, i / w))
        .collect()
}

/// Saliency → bands → clusters → layout for one map.
pub fn layout_from_saliency(map: &Tensor, cfg: &SaliencyConfig) -> Result<RegionLayout> {
    let (h, w) = (map.dim(0), map.dim(1));
    let bands = multilevel_threshold(map, &cfg.quantiles)?;
    let points = salient_points(&bands, w, cfg.min_band);
    let clusters = dbscan_cluster(&points, cfg.eps, cfg.min_pts)?;
    clusters_to_layout(&clusters, cfg.max_components, (h, w), cfg.margin)
}

/// Per-sketch layouts plus one shared layout from the mean saliency map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NonFacialLayouts {
    pub per_image: Vec<RegionLayout>,
    pub shared: RegionLayout,
}

pub fn adapt_nonfacial(sketches: &[Tensor], provider: &dyn SaliencyProvider, cfg: &SaliencyConfig) -> Result<NonFacialLayouts> {
    let first = sketches
        .first()
        .ok_or_else(|| Error::Validation("no sketches to adapt".into()))?;
    if sketches.iter().any(|s| s.shape() != first.shape()) {
        return Err(Error::Shape("sketches must share one size".into()));
    }
    let maps: Vec<Result<Tensor>> = par::map_range(sketches.len(), |i| provider.saliency(&sketches[i]));
    let maps: Vec<Tensor> = maps.into_iter().collect::<Result<_>>()?;
    let per_image: Vec<Result<RegionLayout>> = par::map_range(maps.len(), |i| layout_from_saliency(&maps[i], cfg));
    let per_image = per_image.into_iter().collect::<Result<Vec<_>>>()?;
    let mut mean = Tensor::zeros(maps[0].shape());
    for m in &maps {
        mean.add_assign(m);
    }
    let mean = mean.map(|v| v / maps.len() as f64);
    let shared = layout_from_saliency(&mean, cfg)?;
    Ok(NonFacialLayouts { per_image, shared })
}
