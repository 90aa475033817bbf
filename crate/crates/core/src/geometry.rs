//! Axis-aligned pixel boxes and camera metadata.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, `(x1, y1)` top-left and `(x2, y2)`
/// bottom-right. Always has strictly positive width and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Box2D {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl Box2D {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || !(x1 < x2) || !(y1 < y2) {
            return Err(Error::input(format!(
                "degenerate box [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from center, aspect ratio (w / h) and height.
    pub fn from_xyah(cx: f64, cy: f64, aspect: f64, height: f64) -> Result<Self> {
        let w = aspect * height;
        Self::new(
            cx - w / 2.0,
            cy - height / 2.0,
            cx + w / 2.0,
            cy + height / 2.0,
        )
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// `(cx, cy, w / h, h)`, the Kalman measurement parameterization.
    pub fn to_xyah(&self) -> [f64; 4] {
        let (cx, cy) = self.center();
        [cx, cy, self.width() / self.height(), self.height()]
    }

    /// Clips to `[0, width] x [0, height]`. Returns `None` if nothing is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<Self> {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
        .ok()
    }

    /// Corners mapped to the unit square, clipped to `[0, 1]`.
    pub fn normalized(&self, width: f64, height: f64) -> [f64; 4] {
        [
            (self.x1 / width).clamp(0.0, 1.0),
            (self.y1 / height).clamp(0.0, 1.0),
            (self.x2 / width).clamp(0.0, 1.0),
            (self.y2 / height).clamp(0.0, 1.0),
        ]
    }
}

impl TryFrom<[f64; 4]> for Box2D {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Box2D::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Box2D> for [f64; 4] {
    fn from(b: Box2D) -> Self {
        b.corners()
    }
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &Box2D, b: &Box2D) -> f64 {
    iou_corners(&a.corners(), &b.corners())
}

/// IoU on raw corner arrays; degenerate inputs yield 0.
pub fn iou_corners(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = a[2].min(b[2]) - a[0].max(b[0]);
    let ih = a[3].min(b[3]) - a[1].max(b[1]);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraMeta {
    pub id: u32,
    pub width: u32,
    pub height: u32,
    pub fps: f64,
}

impl CameraMeta {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::input(format!(
                "camera {} has zero-sized image",
                self.id
            )));
        }
        if !(self.fps > 0.0) {
            return Err(Error::input(format!("camera {} has fps <= 0", self.id)));
        }
        Ok(())
    }
}

/// Camera metadata keyed by camera id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSet {
    pub cameras: Vec<CameraMeta>,
}

impl CameraSet {
    pub fn new(mut cameras: Vec<CameraMeta>) -> Result<Self> {
        cameras.sort_by_key(|c| c.id);
        for c in &cameras {
            c.validate()?;
        }
        if cameras.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::input("duplicate camera id"));
        }
        Ok(Self { cameras })
    }

    pub fn get(&self, id: u32) -> Option<&CameraMeta> {
        self.cameras
            .binary_search_by_key(&id, |c| c.id)
            .ok()
            .map(|i| &self.cameras[i])
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Size of an id-indexed table covering every camera.
    pub fn table_size(&self) -> usize {
        self.cameras.last().map(|c| c.id as usize + 1).unwrap_or(0)
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.cameras.iter().map(|c| c.id)
    }
}
