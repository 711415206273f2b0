//! Oriented-box algebra.
//!
//! Coordinates follow the LiDAR convention: origin at the sensor, X forward,
//! Z up, and Y = Z × X. A box's canonical frame is centered on the box with
//! X along its heading and Z up.

mod iou;
mod nms;

pub use iou::{bev_iou, iou, iou_3d, polygon_area, IouMode};
pub use nms::{nms, nms_indices};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point3 = [f64; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("contract error: {0}")]
    Contract(String),
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

/// An oriented 3-D box: center, full extents, heading, class and score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub center: Point3,
    pub size: Point3,
    pub yaw: f64,
    pub cls: usize,
    #[serde(default = "one")]
    pub confidence: f64,
}

fn one() -> f64 {
    1.0
}

/// The eight corners of a box, indexed by the sign pattern of
/// `(±dx/2, ±dy/2, ±dz/2)` read as a 3-bit number (bit 2 = x, bit 1 = y,
/// bit 0 = z; a set bit is `+`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxVertices(pub [Point3; 8]);

impl BoxVertices {
    pub fn get(&self, k: usize) -> Point3 {
        self.0[k]
    }
}

impl Roi {
    pub fn new(center: Point3, size: Point3, yaw: f64, cls: usize) -> Result<Self, GeometryError> {
        let roi = Roi { center, size, yaw: wrap_angle(yaw), cls, confidence: 1.0 };
        roi.validate()?;
        Ok(roi)
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = confidence;
        self
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.size.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(GeometryError::InvalidBox(format!("sizes must be positive, got {:?}", self.size)));
        }
        if self.center.iter().any(|c| !c.is_finite()) || !self.yaw.is_finite() {
            return Err(GeometryError::InvalidBox("non-finite center or yaw".into()));
        }
        if !(-PI < self.yaw && self.yaw <= PI) {
            return Err(GeometryError::InvalidBox(format!("yaw {} outside (-π, π]", self.yaw)));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// LiDAR point into this box's canonical frame.
    pub fn to_canonical(&self, p: Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    /// Canonical point back into the LiDAR frame.
    pub fn from_canonical(&self, q: Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        [c * q[0] - s * q[1] + self.center[0], s * q[0] + c * q[1] + self.center[1], q[2] + self.center[2]]
    }

    /// Boundary-inclusive membership in the box grown by `enlargement`
    /// (added to each full extent).
    pub fn contains(&self, p: Point3, enlargement: Point3) -> bool {
        contains_canonical(self.to_canonical(p), self.size, enlargement)
    }

    pub fn vertices(&self) -> BoxVertices {
        let mut v = [[0.0; 3]; 8];
        for (k, vk) in v.iter_mut().enumerate() {
            for axis in 0..3 {
                let bit = (k >> (2 - axis)) & 1;
                let half = self.size[axis] / 2.0;
                vk[axis] = if bit == 1 { half } else { -half };
            }
        }
        BoxVertices(v)
    }

    pub fn vertices_lidar(&self) -> BoxVertices {
        let mut v = self.vertices();
        for p in v.0.iter_mut() {
            *p = self.from_canonical(*p);
        }
        v
    }

    /// BEV footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (hx, hy) = (self.size[0] / 2.0, self.size[1] / 2.0);
        let local = [[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]];
        local.map(|[x, y]| {
            let p = self.from_canonical([x, y, 0.0]);
            [p[0], p[1]]
        })
    }
}

pub fn contains_canonical(q: Point3, size: Point3, enlargement: Point3) -> bool {
    (0..3).all(|i| q[i].abs() <= (size[i] + enlargement[i]) / 2.0)
}

/// Global yaw rotation about the LiDAR Z axis followed by a translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidMotion {
    pub yaw: f64,
    pub translation: Point3,
}

impl RigidMotion {
    pub fn apply(&self, p: Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        [c * p[0] - s * p[1] + self.translation[0], s * p[0] + c * p[1] + self.translation[1], p[2] + self.translation[2]]
    }

    pub fn apply_roi(&self, roi: &Roi) -> Roi {
        Roi { center: self.apply(roi.center), yaw: wrap_angle(roi.yaw + self.yaw), ..*roi }
    }
}
