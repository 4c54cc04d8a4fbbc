//! Point clouds, axis-aligned boxes and the geometry used to prepare scenes
//! for the spatial encoder.

mod fps;
pub mod io;

pub use fps::{farthest_point_sample, farthest_point_sample_seeded};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    colors: Option<Vec<Point3>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, colors: Option<Vec<Point3>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::arg("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::arg(format!("point {i} has a non-finite coordinate")));
        }
        if let Some(c) = &colors {
            if c.len() != points.len() {
                return Err(Error::arg(format!(
                    "{} colors for {} points",
                    c.len(),
                    points.len()
                )));
            }
            if let Some(i) = c.iter().position(|rgb| rgb.iter().any(|v| !(0.0..=1.0).contains(v))) {
                return Err(Error::arg(format!("color {i} outside [0, 1]")));
            }
        }
        Ok(Self { points, colors })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn colors(&self) -> Option<&[Point3]> {
        self.colors.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sub-cloud in the order given by `idx`.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let points = idx.iter().map(|&i| self.points[i]).collect();
        let colors = self.colors.as_ref().map(|c| idx.iter().map(|&i| c[i]).collect());
        Self::new(points, colors)
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub cloud: PointCloud,
    pub centroid: Point3,
    pub scale: f64,
    /// Every point coincided with the centroid; `scale` was forced to 1.
    pub degenerate: bool,
}

/// Centers the cloud on its centroid and divides by the largest absolute
/// coordinate, so the result lies in `[-1, 1]³`.
pub fn normalize(pc: &PointCloud) -> Normalized {
    let centroid = pc.centroid();
    let centered: Vec<Point3> = pc
        .points
        .iter()
        .map(|p| [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]])
        .collect();
    let max_abs = centered
        .iter()
        .flat_map(|p| p.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let degenerate = max_abs == 0.0;
    let scale = if degenerate { 1.0 } else { max_abs };
    let points = centered.into_iter().map(|p| p.map(|v| v / scale)).collect();
    Normalized {
        cloud: PointCloud {
            points,
            colors: pc.colors.clone(),
        },
        centroid,
        scale,
        degenerate,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisAlignedBox {
    pub center: Point3,
    pub half_extent: Point3,
    pub category: u32,
    pub color: u32,
}

impl AxisAlignedBox {
    pub fn new(center: Point3, half_extent: Point3, category: u32, color: u32) -> Result<Self> {
        if half_extent.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
            return Err(Error::arg(format!("half extents must be positive, got {half_extent:?}")));
        }
        Ok(Self {
            center,
            half_extent,
            category,
            color,
        })
    }

    pub fn contains(&self, p: Point3) -> bool {
        (0..3).all(|k| (p[k] - self.center[k]).abs() <= self.half_extent[k])
    }

    pub fn overlaps(&self, other: &Self, margin: f64) -> bool {
        (0..3).all(|k| (self.center[k] - other.center[k]).abs() < self.half_extent[k] + other.half_extent[k] + margin)
    }

    /// Applies the same transform [`normalize`] applied to the points.
    pub fn normalized(&self, centroid: Point3, scale: f64) -> Self {
        Self {
            center: [0, 1, 2].map(|k| (self.center[k] - centroid[k]) / scale),
            half_extent: self.half_extent.map(|h| h / scale),
            ..self.clone()
        }
    }
}

pub fn squared_distance(a: Point3, b: Point3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}
