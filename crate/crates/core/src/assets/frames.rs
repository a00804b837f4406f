//! Per-frame expression, pose and camera parameters (JSON).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Camera, ExpressionCoeffs, PoseParams, RigidTransform};

pub const FRAMES_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
    /// `[R | t]` row-major, mapping world points into camera space.
    pub world_to_camera: [f64; 12],
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            near: c.near,
            far: c.far,
            world_to_camera: c.world_to_camera.to_rows(),
        }
    }
}

impl CameraRecord {
    pub fn to_camera(&self) -> Camera {
        Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            near: self.near,
            far: self.far,
            world_to_camera: RigidTransform::from_rows(&self.world_to_camera),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub index: u32,
    /// One coefficient per blendshape.
    pub expression: Vec<f64>,
    /// One `[R | t]` row-major transform per joint.
    pub joints: Vec<[f64; 12]>,
    pub camera: CameraRecord,
}

impl FrameRecord {
    pub fn psi(&self) -> ExpressionCoeffs {
        ExpressionCoeffs(self.expression.clone())
    }

    pub fn pose(&self) -> PoseParams {
        PoseParams {
            joints: self.joints.iter().map(RigidTransform::from_rows).collect(),
        }
    }

    pub fn camera(&self) -> Camera {
        self.camera.to_camera()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameParamsFile {
    pub version: u32,
    pub expressions: usize,
    pub joints: usize,
    pub frames: Vec<FrameRecord>,
}

impl FrameParamsFile {
    pub fn new(expressions: usize, joints: usize, frames: Vec<FrameRecord>) -> Self {
        Self {
            version: FRAMES_VERSION,
            expressions,
            joints,
            frames,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != FRAMES_VERSION {
            return Err(Error::UnsupportedVersion {
                found: self.version,
                supported: FRAMES_VERSION,
            });
        }
        if self.joints == 0 {
            return Err(Error::InvalidSequence(
                "a sequence needs at least one joint".into(),
            ));
        }
        let mut prev: Option<u32> = None;
        for f in &self.frames {
            if let Some(p) = prev {
                if f.index <= p {
                    return Err(Error::InvalidSequence(format!(
                        "frame indices must increase strictly: {} follows {p}",
                        f.index
                    )));
                }
            }
            prev = Some(f.index);
            if f.expression.len() != self.expressions {
                return Err(Error::InvalidSequence(format!(
                    "frame {}: {} expression coefficients, header declares {}",
                    f.index,
                    f.expression.len(),
                    self.expressions
                )));
            }
            if f.joints.len() != self.joints {
                return Err(Error::InvalidSequence(format!(
                    "frame {}: {} joint transforms, header declares {}",
                    f.index,
                    f.joints.len(),
                    self.joints
                )));
            }
            if !f
                .expression
                .iter()
                .chain(f.joints.iter().flatten())
                .all(|v| v.is_finite())
            {
                return Err(Error::InvalidSequence(format!(
                    "frame {}: non-finite parameter",
                    f.index
                )));
            }
            f.pose()
                .validate()
                .map_err(|e| Error::InvalidSequence(format!("frame {}: {e}", f.index)))?;
            f.camera()
                .validate()
                .map_err(|e| Error::InvalidSequence(format!("frame {}: {e}", f.index)))?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("frame records serialize")
    }
}
