//! Rotated 3D boxes on a metric BEV grid: indexing, IoU and GIoU.
//!
//! Boxes are upright: yaw rotates the footprint in the ground plane, the
//! vertical extent is an axis-aligned interval. BEV overlap is computed by
//! convex polygon clipping, so IoU/GIoU are exact up to rounding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("non-positive box size l={l} w={w} d={d}")]
    BadSize { l: f64, w: f64, d: f64 },
    #[error("score {0} outside [0, 1]")]
    BadScore(f64),
    #[error("box field is not finite")]
    NonFinite,
    #[error("grid extent {extent} along {axis} is not an integer multiple of cell {cell}")]
    BadGrid { axis: char, extent: f64, cell: f64 },
}

/// Wraps an angle to [-pi, pi).
pub fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::PI;
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

/// Upright box: center, size, yaw. `l` runs along the heading, `w` across it,
/// `d` is the vertical extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub d: f64,
    pub theta: f64,
    pub cls: u32,
    pub score: f64,
}

impl Box3D {
    /// Validates sizes and score, wraps yaw to [-pi, pi).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        x: f64,
        y: f64,
        z: f64,
        l: f64,
        w: f64,
        d: f64,
        theta: f64,
        cls: u32,
        score: f64,
    ) -> Result<Self, GeometryError> {
        for v in [x, y, z, l, w, d, theta, score] {
            if !v.is_finite() {
                return Err(GeometryError::NonFinite);
            }
        }
        if l <= 0.0 || w <= 0.0 || d <= 0.0 {
            return Err(GeometryError::BadSize { l, w, d });
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(GeometryError::BadScore(score));
        }
        Ok(Self { x, y, z, l, w, d, theta: wrap_angle(theta), cls, score })
    }

    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.d
    }

    /// Footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.theta.sin_cos();
        let (hl, hw) = (0.5 * self.l, 0.5 * self.w);
        let rot = |dx: f64, dy: f64| [self.x + c * dx - s * dy, self.y + s * dx + c * dy];
        [rot(hl, hw), rot(-hl, hw), rot(-hl, -hw), rot(hl, -hw)]
    }

    pub fn z_interval(&self) -> (f64, f64) {
        (self.z - 0.5 * self.d, self.z + 0.5 * self.d)
    }

    fn check_valid(&self) -> Result<(), GeometryError> {
        for v in [self.x, self.y, self.z, self.l, self.w, self.d, self.theta] {
            if !v.is_finite() {
                return Err(GeometryError::NonFinite);
            }
        }
        if self.l <= 0.0 || self.w <= 0.0 || self.d <= 0.0 {
            return Err(GeometryError::BadSize { l: self.l, w: self.w, d: self.d });
        }
        Ok(())
    }
}

/// Metric extent and resolution of a BEV grid. `width` cells cover the x
/// extent, `height` cells cover the y extent; both divisions are exact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub cell_x: f64,
    pub cell_y: f64,
    pub width: usize,
    pub height: usize,
}

fn exact_cells(extent: f64, cell: f64, axis: char) -> Result<usize, GeometryError> {
    // NaN must fail too, hence the explicit check rather than `<= 0.0` alone.
    if extent.is_nan() || cell.is_nan() || extent <= 0.0 || cell <= 0.0 {
        return Err(GeometryError::BadGrid { axis, extent, cell });
    }
    let n = extent / cell;
    let rounded = n.round();
    if rounded < 1.0 || (n - rounded).abs() > 1e-9 * rounded {
        return Err(GeometryError::BadGrid { axis, extent, cell });
    }
    Ok(rounded as usize)
}

impl BevGridSpec {
    pub fn new(
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
        cell_x: f64,
        cell_y: f64,
    ) -> Result<Self, GeometryError> {
        let width = exact_cells(x_max - x_min, cell_x, 'x')?;
        let height = exact_cells(y_max - y_min, cell_y, 'y')?;
        Ok(Self { x_min, x_max, y_min, y_max, cell_x, cell_y, width, height })
    }

    /// Same extent at `factor` times the resolution.
    pub fn refined(&self, factor: usize) -> Self {
        assert!(factor >= 1);
        Self {
            cell_x: self.cell_x / factor as f64,
            cell_y: self.cell_y / factor as f64,
            width: self.width * factor,
            height: self.height * factor,
            ..*self
        }
    }

    /// Continuous cell coordinates of a metric point; x maps to the width
    /// axis, y to the height axis.
    pub fn fractional(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x_min) / self.cell_x, (y - self.y_min) / self.cell_y)
    }

    pub fn index_of(&self, x: f64, y: f64) -> BevIndex {
        let (fx, fy) = self.fractional(x, y);
        let (ix, iy) = (fx.floor() as i64, fy.floor() as i64);
        let in_range =
            ix >= 0 && iy >= 0 && (ix as usize) < self.width && (iy as usize) < self.height;
        BevIndex { ix, iy, fx, fy, in_range }
    }

    /// Metric center of a cell.
    pub fn cell_center(&self, ix: i64, iy: i64) -> (f64, f64) {
        (
            self.x_min + (ix as f64 + 0.5) * self.cell_x,
            self.y_min + (iy as f64 + 0.5) * self.cell_y,
        )
    }
}

/// Grid location of a box center. Out-of-range centers keep their true
/// coordinates and are flagged, never clamped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevIndex {
    pub ix: i64,
    pub iy: i64,
    pub fx: f64,
    pub fy: f64,
    pub in_range: bool,
}

pub fn box_to_bev_index(b: &Box3D, grid: &BevGridSpec) -> BevIndex {
    grid.index_of(b.x, b.y)
}

/// Shoelace area of a simple polygon.
fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % poly.len()];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc.abs()
}

/// Sutherland-Hodgman clip of a convex subject polygon against a convex
/// counter-clockwise clip polygon.
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]; 4]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for e in 0..4 {
        if output.is_empty() {
            break;
        }
        let a = clip[e];
        let b = clip[(e + 1) % 4];
        let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
        let side = |p: [f64; 2]| ex * (p[1] - a[1]) - ey * (p[0] - a[0]);
        let input = std::mem::take(&mut output);
        for i in 0..input.len() {
            let cur = input[i];
            let prev = input[(i + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(edge_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(edge_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

/// Intersection of segment pq with the infinite line through ab.
fn edge_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
    let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
    let denom = ex * dy - ey * dx;
    // Callers only pass segments that straddle the line, so denom != 0.
    let t = (ex * (a[1] - p[1]) - ey * (a[0] - p[0])) / denom;
    [p[0] + t * dx, p[1] + t * dy]
}

/// Footprint intersection area of two boxes.
fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let clipped = clip_polygon(&a.bev_corners(), &b.bev_corners());
    polygon_area(&clipped)
}

/// Orders a pair canonically so that symmetric metrics take the exact same
/// code path for (a, b) and (b, a).
fn canonical_pair<'a>(a: &'a Box3D, b: &'a Box3D) -> (&'a Box3D, &'a Box3D) {
    let key = |v: &Box3D| {
        [v.x, v.y, v.z, v.l, v.w, v.d, v.theta].map(f64::to_bits)
    };
    if key(a) <= key(b) {
        (a, b)
    } else {
        (b, a)
    }
}

struct Overlap {
    intersection: f64,
    union: f64,
    enclosing: f64,
}

fn overlap(a: &Box3D, b: &Box3D) -> Result<Overlap, GeometryError> {
    a.check_valid()?;
    b.check_valid()?;
    let (a, b) = canonical_pair(a, b);
    let (alo, ahi) = a.z_interval();
    let (blo, bhi) = b.z_interval();
    let dz = (ahi.min(bhi) - alo.max(blo)).max(0.0);
    let inter = bev_intersection_area(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    let ca = a.bev_corners();
    let cb = b.bev_corners();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in ca.iter().chain(cb.iter()) {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let z0 = alo.min(blo);
    let z1 = ahi.max(bhi);
    let enclosing = (x1 - x0) * (y1 - y0) * (z1 - z0);
    Ok(Overlap { intersection: inter, union, enclosing })
}

/// Footprint IoU, ignoring the vertical extents.
pub fn iou_bev(a: &Box3D, b: &Box3D) -> Result<f64, GeometryError> {
    a.check_valid()?;
    b.check_valid()?;
    let (a, b) = canonical_pair(a, b);
    let inter = bev_intersection_area(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Volumetric IoU of two upright boxes.
pub fn iou3d(a: &Box3D, b: &Box3D) -> Result<f64, GeometryError> {
    let o = overlap(a, b)?;
    Ok((o.intersection / o.union).clamp(0.0, 1.0))
}

/// Volumetric generalized IoU in (-1, 1]. The enclosing volume is the
/// axis-aligned bounding volume of both footprints and vertical extents.
pub fn giou3d(a: &Box3D, b: &Box3D) -> Result<f64, GeometryError> {
    let o = overlap(a, b)?;
    let iou = (o.intersection / o.union).clamp(0.0, 1.0);
    Ok((iou - (o.enclosing - o.union) / o.enclosing).min(1.0))
}
