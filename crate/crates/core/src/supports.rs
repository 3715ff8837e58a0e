//! Observation supports: points, axis-aligned boxes, and 2-D polytopes.
//!
//! A support is the region over which an observation averages the latent
//! process. Boxes carry exact closed-form kernel integrals; polytopes are
//! handled by a deterministic midpoint-grid quadrature whose weights are the
//! exact areas of cell/polygon intersections, so weight sums reproduce the
//! polygon measure to machine precision at any resolution.

use crate::error::{Error, Result};

/// Default grid resolution (cells per dimension) for polytope quadrature.
pub const DEFAULT_QUAD_RESOLUTION: usize = 32;

/// Axis-aligned box with strictly positive extent in every dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSupport {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxSupport {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::InvalidSupport(format!(
                "box bounds must be non-empty and equal length (got {} and {})",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidSupport(format!(
                    "box bound in dimension {i} is not finite"
                )));
            }
            if lo >= hi {
                return Err(Error::InvalidSupport(format!(
                    "box is empty or inverted in dimension {i}: lower {lo} >= upper {hi} \
                     (use a point support for zero-width observations)"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn volume(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| hi - lo)
            .product()
    }
}

/// Simple (non-self-intersecting) polygon in the plane with nonzero area.
///
/// Vertices are normalized to counter-clockwise order on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon2D {
    vertices: Vec<[f64; 2]>,
}

impl Polygon2D {
    pub fn new(vertices: Vec<[f64; 2]>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::InvalidSupport(format!(
                "polygon needs at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        for (i, v) in vertices.iter().enumerate() {
            if !v[0].is_finite() || !v[1].is_finite() {
                return Err(Error::InvalidSupport(format!(
                    "polygon vertex {i} is not finite"
                )));
            }
        }
        let n = vertices.len();
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            if a == b {
                return Err(Error::InvalidSupport(format!(
                    "polygon has zero-length edge at vertex {i}"
                )));
            }
        }
        // Reversal spikes: consecutive edges that fold back on themselves.
        for i in 0..n {
            let p = vertices[i];
            let q = vertices[(i + 1) % n];
            let r = vertices[(i + 2) % n];
            let e1 = [q[0] - p[0], q[1] - p[1]];
            let e2 = [r[0] - q[0], r[1] - q[1]];
            let cross = e1[0] * e2[1] - e1[1] * e2[0];
            let dot = e1[0] * e2[0] + e1[1] * e2[1];
            if cross == 0.0 && dot < 0.0 {
                return Err(Error::InvalidSupport(format!(
                    "polygon folds back on itself at vertex {}",
                    (i + 1) % n
                )));
            }
        }
        // Non-adjacent edges must not touch.
        for i in 0..n {
            for j in (i + 1)..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    continue;
                }
                let (a1, a2) = (vertices[i], vertices[(i + 1) % n]);
                let (b1, b2) = (vertices[j], vertices[(j + 1) % n]);
                if segments_intersect(a1, a2, b1, b2) {
                    return Err(Error::InvalidSupport(format!(
                        "polygon self-intersects between edges {i} and {j}"
                    )));
                }
            }
        }
        let signed = shoelace_signed(&vertices);
        if signed == 0.0 {
            return Err(Error::InvalidSupport(
                "polygon has zero area".to_string(),
            ));
        }
        if !signed.is_finite() {
            return Err(Error::InvalidSupport(
                "polygon area overflows".to_string(),
            ));
        }
        let mut vertices = vertices;
        if signed < 0.0 {
            vertices.reverse();
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    /// Shoelace area (positive).
    pub fn area(&self) -> f64 {
        shoelace_signed(&self.vertices)
    }

    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &self.vertices {
            for d in 0..2 {
                lo[d] = lo[d].min(v[d]);
                hi[d] = hi[d].max(v[d]);
            }
        }
        (lo, hi)
    }

    /// Area centroid.
    pub fn centroid(&self) -> [f64; 2] {
        let a = shoelace_signed(&self.vertices);
        let n = self.vertices.len();
        let mut cx = 0.0;
        let mut cy = 0.0;
        for i in 0..n {
            let p = self.vertices[i];
            let q = self.vertices[(i + 1) % n];
            let w = p[0] * q[1] - q[0] * p[1];
            cx += (p[0] + q[0]) * w;
            cy += (p[1] + q[1]) * w;
        }
        [cx / (6.0 * a), cy / (6.0 * a)]
    }
}

/// Region over which a task observation averages the latent function.
#[derive(Debug, Clone, PartialEq)]
pub enum Support {
    Point(Vec<f64>),
    Box(BoxSupport),
    Polytope2D(Polygon2D),
}

impl Support {
    pub fn point(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidSupport("point has no coordinates".into()));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidSupport("point coordinate not finite".into()));
        }
        Ok(Support::Point(coords))
    }

    pub fn axis_box(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        Ok(Support::Box(BoxSupport::new(lower, upper)?))
    }

    /// 1-D interval `[a, b]`.
    pub fn interval(a: f64, b: f64) -> Result<Self> {
        Self::axis_box(vec![a], vec![b])
    }

    pub fn polygon(vertices: Vec<[f64; 2]>) -> Result<Self> {
        Ok(Support::Polytope2D(Polygon2D::new(vertices)?))
    }

    pub fn dim(&self) -> usize {
        match self {
            Support::Point(c) => c.len(),
            Support::Box(b) => b.lower.len(),
            Support::Polytope2D(_) => 2,
        }
    }

    /// Geometric center: the point itself, the box midpoint, or the polygon
    /// area centroid. Used for inducing-input initialization.
    pub fn centroid(&self) -> Vec<f64> {
        match self {
            Support::Point(c) => c.clone(),
            Support::Box(b) => b
                .lower
                .iter()
                .zip(&b.upper)
                .map(|(lo, hi)| 0.5 * (lo + hi))
                .collect(),
            Support::Polytope2D(p) => p.centroid().to_vec(),
        }
    }

    /// The same support shifted by a constant offset.
    pub fn translate(&self, offset: &[f64]) -> Result<Support> {
        if offset.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: offset.len(),
            });
        }
        match self {
            Support::Point(c) => {
                Support::point(c.iter().zip(offset).map(|(x, o)| x + o).collect())
            }
            Support::Box(b) => Support::axis_box(
                b.lower.iter().zip(offset).map(|(x, o)| x + o).collect(),
                b.upper.iter().zip(offset).map(|(x, o)| x + o).collect(),
            ),
            Support::Polytope2D(p) => Support::polygon(
                p.vertices
                    .iter()
                    .map(|v| [v[0] + offset[0], v[1] + offset[1]])
                    .collect(),
            ),
        }
    }
}

/// Lebesgue measure of a non-point support.
pub fn measure(s: &Support) -> Result<f64> {
    match s {
        Support::Point(_) => Err(Error::PointHasNoMeasure),
        Support::Box(b) => Ok(b.volume()),
        Support::Polytope2D(p) => Ok(p.area()),
    }
}

/// Nodes and positive weights for integrating over a support.
///
/// Weights sum to the support measure: exactly (up to roundoff) for boxes
/// and polytopes alike, because polytope cell weights are exact clipped
/// areas rather than full-cell indicator weights.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Midpoint-grid rule with `resolution` cells per dimension over the
/// bounding box. For polytopes, each cell's node is its midpoint and its
/// weight is the exact area of the cell/polygon intersection; cells that
/// miss the polygon are dropped.
pub fn quadrature(s: &Support, resolution: usize) -> Result<QuadratureRule> {
    if resolution == 0 {
        return Err(Error::InvalidParameter(
            "quadrature resolution must be positive".into(),
        ));
    }
    match s {
        Support::Point(_) => Err(Error::PointHasNoMeasure),
        Support::Box(b) => {
            let p = b.lower.len();
            let steps: Vec<f64> = b
                .lower
                .iter()
                .zip(&b.upper)
                .map(|(lo, hi)| (hi - lo) / resolution as f64)
                .collect();
            let cell_volume: f64 = steps.iter().product();
            let total = resolution.pow(p as u32);
            let mut nodes = Vec::with_capacity(total);
            for flat in 0..total {
                let mut idx = flat;
                let mut node = Vec::with_capacity(p);
                for d in 0..p {
                    let k = idx % resolution;
                    idx /= resolution;
                    node.push(b.lower[d] + (k as f64 + 0.5) * steps[d]);
                }
                nodes.push(node);
            }
            let weights = vec![cell_volume; total];
            Ok(QuadratureRule { nodes, weights })
        }
        Support::Polytope2D(poly) => {
            let (lo, hi) = poly.bounding_box();
            let sx = (hi[0] - lo[0]) / resolution as f64;
            let sy = (hi[1] - lo[1]) / resolution as f64;
            let mut nodes = Vec::new();
            let mut weights = Vec::new();
            for i in 0..resolution {
                let x0 = lo[0] + i as f64 * sx;
                let x1 = x0 + sx;
                for j in 0..resolution {
                    let y0 = lo[1] + j as f64 * sy;
                    let y1 = y0 + sy;
                    let w = clipped_area(poly.vertices(), [x0, y0], [x1, y1]);
                    if w > 0.0 {
                        nodes.push(vec![x0 + 0.5 * sx, y0 + 0.5 * sy]);
                        weights.push(w);
                    }
                }
            }
            Ok(QuadratureRule { nodes, weights })
        }
    }
}

fn shoelace_signed(vertices: &[[f64; 2]]) -> f64 {
    let n = vertices.len();
    let mut acc = 0.0;
    for i in 0..n {
        let p = vertices[i];
        let q = vertices[(i + 1) % n];
        acc += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * acc
}

/// Area of `polygon ∩ [lo, hi]` via Sutherland–Hodgman clipping.
///
/// Clipping a simple polygon against a convex window can emit degenerate
/// bridge edges, but those cancel in the shoelace sum, so the area is exact.
fn clipped_area(vertices: &[[f64; 2]], lo: [f64; 2], hi: [f64; 2]) -> f64 {
    let mut poly: Vec<[f64; 2]> = vertices.to_vec();
    for (axis, bound, keep_ge) in [
        (0, lo[0], true),
        (0, hi[0], false),
        (1, lo[1], true),
        (1, hi[1], false),
    ] {
        poly = clip_half_plane(&poly, axis, bound, keep_ge);
        if poly.len() < 3 {
            return 0.0;
        }
    }
    shoelace_signed(&poly).abs()
}

fn clip_half_plane(poly: &[[f64; 2]], axis: usize, bound: f64, keep_ge: bool) -> Vec<[f64; 2]> {
    let inside = |p: &[f64; 2]| {
        if keep_ge {
            p[axis] >= bound
        } else {
            p[axis] <= bound
        }
    };
    let mut out = Vec::with_capacity(poly.len() + 4);
    let n = poly.len();
    for i in 0..n {
        let cur = poly[i];
        let next = poly[(i + 1) % n];
        let cur_in = inside(&cur);
        let next_in = inside(&next);
        if cur_in {
            out.push(cur);
        }
        if cur_in != next_in {
            let t = (bound - cur[axis]) / (next[axis] - cur[axis]);
            let mut crossing = [
                cur[0] + t * (next[0] - cur[0]),
                cur[1] + t * (next[1] - cur[1]),
            ];
            crossing[axis] = bound;
            out.push(crossing);
        }
    }
    out
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

/// Inclusive segment intersection (touching counts).
fn segments_intersect(a1: [f64; 2], a2: [f64; 2], b1: [f64; 2], b2: [f64; 2]) -> bool {
    let d1 = orient(b1, b2, a1);
    let d2 = orient(b1, b2, a2);
    let d3 = orient(a1, a2, b1);
    let d4 = orient(a1, a2, b2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(b1, b2, a1))
        || (d2 == 0.0 && on_segment(b1, b2, a2))
        || (d3 == 0.0 && on_segment(a1, a2, b1))
        || (d4 == 0.0 && on_segment(a1, a2, b2))
}
