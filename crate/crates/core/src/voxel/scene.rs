//! Scene files: `{"points": [[x,y,z],...], "boxes": [{"center":[..],
//! "size":[..], "yaw":t, "cls":k},...]}` in meters and radians.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Point3, Roi};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene io: {0}")]
    Io(#[from] std::io::Error),
    #[error("scene json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("scene box {index}: {source}")]
    Box { index: usize, source: GeometryError },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub center: Point3,
    pub size: Point3,
    pub yaw: f64,
    pub cls: usize,
}

impl SceneBox {
    pub fn to_roi(&self) -> Result<Roi, GeometryError> {
        Roi::new(self.center, self.size, self.yaw, self.cls)
    }
}

impl From<&Roi> for SceneBox {
    fn from(r: &Roi) -> Self {
        SceneBox { center: r.center, size: r.size, yaw: r.yaw, cls: r.cls }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Scene {
    pub points: Vec<Point3>,
    pub boxes: Vec<SceneBox>,
}

impl Scene {
    pub fn gt_rois(&self) -> Result<Vec<Roi>, SceneError> {
        self.boxes.iter().enumerate().map(|(index, b)| b.to_roi().map_err(|source| SceneError::Box { index, source })).collect()
    }

    pub fn from_json(s: &str) -> Result<Self, SceneError> {
        let scene: Scene = serde_json::from_str(s)?;
        scene.gt_rois()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> Result<String, SceneError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), SceneError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}
