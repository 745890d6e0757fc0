use std::f64::consts::{LN_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::gemm;

const BOX_PADDING: f64 = 0.05;
const JS_SMOOTHING: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Bandwidth {
    /// Per-axis `σ · n^(−1/6)`.
    Scott,
    Fixed { x: f64, y: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl BoundingBox {
    /// Smallest box around all points, widened by 5% of its extent per side.
    pub fn padded(groups: &[&[[f64; 2]]]) -> Result<Self> {
        let mut b = BoundingBox {
            x_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_min: f64::INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        for p in groups.iter().flat_map(|g| g.iter()) {
            b.x_min = b.x_min.min(p[0]);
            b.x_max = b.x_max.max(p[0]);
            b.y_min = b.y_min.min(p[1]);
            b.y_max = b.y_max.max(p[1]);
        }
        if !(b.x_min.is_finite() && b.y_min.is_finite() && b.x_max.is_finite() && b.y_max.is_finite()) {
            return Err(Error::invalid("bounding box needs finite points"));
        }
        let (px, py) = (BOX_PADDING * (b.x_max - b.x_min), BOX_PADDING * (b.y_max - b.y_min));
        if px == 0.0 || py == 0.0 {
            return Err(Error::invalid("points span no area"));
        }
        b.x_min -= px;
        b.x_max += px;
        b.y_min -= py;
        b.y_max += py;
        Ok(b)
    }
}

/// Density on a `resolution × resolution` grid of cell centers; row `r`
/// holds cells with y-center `y_min + (r + ½)·dy`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub bbox: BoundingBox,
    pub resolution: usize,
    pub bandwidth: [f64; 2],
    pub density: Vec<f64>,
    /// Raw kernel average integrated over the grid; `density = raw / normalizer`.
    pub normalizer: f64,
}

impl DensityGrid {
    pub fn cell_size(&self) -> (f64, f64) {
        cell_size(&self.bbox, self.resolution)
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let (dx, dy) = self.cell_size();
        (
            self.bbox.x_min + (col as f64 + 0.5) * dx,
            self.bbox.y_min + (row as f64 + 0.5) * dy,
        )
    }

    /// Probability mass per cell (density × cell area).
    pub fn masses(&self) -> Vec<f64> {
        let (dx, dy) = self.cell_size();
        self.density.iter().map(|v| v * dx * dy).collect()
    }
}

fn cell_size(b: &BoundingBox, res: usize) -> (f64, f64) {
    ((b.x_max - b.x_min) / res as f64, (b.y_max - b.y_min) / res as f64)
}

fn std_dev(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    (v.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

pub fn bandwidth(coords: &[[f64; 2]], rule: Bandwidth) -> Result<[f64; 2]> {
    if coords.len() < 2 {
        return Err(Error::invalid("density estimation needs at least 2 points"));
    }
    let h = match rule {
        Bandwidth::Scott => {
            let factor = (coords.len() as f64).powf(-1.0 / 6.0);
            [
                std_dev(coords.iter().map(|p| p[0])) * factor,
                std_dev(coords.iter().map(|p| p[1])) * factor,
            ]
        }
        Bandwidth::Fixed { x, y } => [x, y],
    };
    if !(h[0] > 0.0 && h[1] > 0.0) {
        return Err(Error::invalid("zero bandwidth: points are coincident along an axis"));
    }
    Ok(h)
}

/// Gaussian product-kernel density of `coords` on `bbox`, normalized so
/// that the cell masses sum to one.
pub fn kde_grid(coords: &[[f64; 2]], bbox: &BoundingBox, resolution: usize, rule: Bandwidth) -> Result<DensityGrid> {
    if resolution == 0 {
        return Err(Error::invalid("grid resolution must be positive"));
    }
    let h = bandwidth(coords, rule)?;
    let n = coords.len();
    let (dx, dy) = cell_size(bbox, resolution);
    let kernel = |center: f64, v: f64, h: f64| {
        let u = (center - v) / h;
        (-0.5 * u * u).exp() / (h * (2.0 * PI).sqrt())
    };
    // K_y (res × n) · K_xᵀ (n × res) / n is the separable kernel sum.
    let mut ky = vec![0.0; resolution * n];
    let mut kx = vec![0.0; resolution * n];
    for r in 0..resolution {
        let cy = bbox.y_min + (r as f64 + 0.5) * dy;
        let cx = bbox.x_min + (r as f64 + 0.5) * dx;
        for (i, p) in coords.iter().enumerate() {
            ky[r * n + i] = kernel(cy, p[1], h[1]);
            kx[r * n + i] = kernel(cx, p[0], h[0]);
        }
    }
    let mut raw = vec![0.0; resolution * resolution];
    gemm(resolution, n, resolution, &ky, false, &kx, true, 0.0, &mut raw);
    raw.iter_mut().for_each(|v| *v /= n as f64);
    let normalizer: f64 = raw.iter().sum::<f64>() * dx * dy;
    if !(normalizer > 0.0) {
        return Err(Error::invalid("density vanishes on the grid"));
    }
    Ok(DensityGrid {
        bbox: *bbox,
        resolution,
        bandwidth: h,
        density: raw.iter().map(|v| v / normalizer).collect(),
        normalizer,
    })
}

/// Densities of two groups on their shared padded bounding box.
pub fn kde_pair(a: &[[f64; 2]], b: &[[f64; 2]], resolution: usize, rule: Bandwidth) -> Result<(DensityGrid, DensityGrid)> {
    let bbox = BoundingBox::padded(&[a, b])?;
    Ok((kde_grid(a, &bbox, resolution, rule)?, kde_grid(b, &bbox, resolution, rule)?))
}

/// Jensen–Shannon divergence (nats, in `[0, ln 2]`) between cell masses
/// after adding 1e-12 to every cell and renormalizing.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::shape(format!("distributions of {} and {} cells", p.len(), q.len())));
    }
    let smooth = |v: &[f64]| {
        let total: f64 = v.iter().map(|x| x + JS_SMOOTHING).sum();
        v.iter().map(|x| (x + JS_SMOOTHING) / total).collect::<Vec<f64>>()
    };
    let (p, q) = (smooth(p), smooth(q));
    let mut js = 0.0;
    for (a, b) in p.iter().zip(&q) {
        let m = 0.5 * (a + b);
        js += 0.5 * a * (a / m).ln() + 0.5 * b * (b / m).ln();
    }
    Ok(js.clamp(0.0, LN_2))
}

/// JS divergence between two grids over the same box.
pub fn divergence(a: &DensityGrid, b: &DensityGrid) -> Result<f64> {
    if a.resolution != b.resolution || a.bbox != b.bbox {
        return Err(Error::shape("density grids differ in resolution or bounding box"));
    }
    js_divergence(&a.masses(), &b.masses())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cluster(n: usize, cx: f64, cy: f64, spread: f64) -> Vec<[f64; 2]> {
        (0..n)
            .map(|i| {
                let t = i as f64 * 2.399;
                let r = spread * ((i + 1) as f64 / n as f64).sqrt();
                [cx + r * t.cos(), cy + r * t.sin()]
            })
            .collect()
    }

    #[test]
    fn normalized_and_peaked_at_cluster() {
        let mut pts = cluster(200, 2.0, -1.0, 0.3);
        pts.extend(cluster(5, -6.0, 5.0, 0.5));
        let bbox = BoundingBox::padded(&[&pts]).unwrap();
        let g = kde_grid(&pts, &bbox, 200, Bandwidth::Scott).unwrap();
        assert!((g.masses().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let best = (0..g.density.len()).max_by(|&a, &b| g.density[a].total_cmp(&g.density[b])).unwrap();
        let (x, y) = g.cell_center(best / 200, best % 200);
        let (dx, dy) = g.cell_size();
        assert!((x - 2.0).abs() < 0.3 + dx && (y + 1.0).abs() < 0.3 + dy, "peak at ({x}, {y})");
    }

    #[test]
    fn coincident_points_rejected() {
        let pts = vec![[1.0, 1.0]; 10];
        assert!(bandwidth(&pts, Bandwidth::Scott).is_err());
        assert!(bandwidth(&pts[..1], Bandwidth::Fixed { x: 1.0, y: 1.0 }).is_err());
    }

    #[test]
    fn js_endpoints_and_closed_form() {
        assert_eq!(js_divergence(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]).unwrap(), 0.0);
        let disjoint = js_divergence(&[0.5, 0.5, 0.0, 0.0], &[0.0, 0.0, 0.25, 0.75]).unwrap();
        assert!((disjoint - LN_2).abs() < 1e-6);
        let (p, q) = ([0.5, 0.5], [0.9, 0.1]);
        let m = [0.7, 0.3];
        let kl = |a: &[f64; 2], b: &[f64; 2]| a[0] * (a[0] / b[0]).ln() + a[1] * (a[1] / b[1]).ln();
        let expected = 0.5 * kl(&p, &m) + 0.5 * kl(&q, &m);
        assert!((js_divergence(&p, &q).unwrap() - expected).abs() < 1e-10);
        assert!(js_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }
}
