//! Pinhole projection of agent boxes and image-space occlusion.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{Box2D, CameraMeta};

use super::world::{CameraConfig, Trajectory, WorldConfig};

/// Occlusion above this fraction marks a hard case.
pub const HARD_OCCLUSION: f64 = 0.67;

#[derive(Debug, Clone, PartialEq)]
pub struct PinholeCamera {
    pub id: u32,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub principal: [f64; 2],
    pub center: Vector3<f64>,
    /// World-to-camera rotation; camera x right, y down, z forward.
    pub rotation: Matrix3<f64>,
}

impl PinholeCamera {
    pub fn new(c: &CameraConfig) -> Self {
        let center = Vector3::from(c.position);
        let forward = (Vector3::from(c.look_at) - center).normalize();
        let mut right = forward.cross(&Vector3::z());
        if right.norm() < 1e-9 {
            right = Vector3::x();
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        Self {
            id: c.id,
            width: c.width,
            height: c.height,
            focal: c.focal,
            principal: c
                .principal
                .unwrap_or([c.width as f64 / 2.0, c.height as f64 / 2.0]),
            center,
            rotation: Matrix3::from_rows(&[
                right.transpose(),
                down.transpose(),
                forward.transpose(),
            ]),
        }
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (p - self.center)
    }

    /// Pixel position and depth, or `None` behind the image plane.
    pub fn project(&self, p: &Vector3<f64>) -> Option<([f64; 2], f64)> {
        let q = self.to_camera(p);
        if q.z <= 1e-6 {
            return None;
        }
        Some((
            [
                self.focal * q.x / q.z + self.principal[0],
                self.focal * q.y / q.z + self.principal[1],
            ],
            q.z,
        ))
    }

    /// Bounding box of the projected points, unclipped; `None` when any
    /// point lies behind the camera.
    pub fn project_hull(&self, pts: &[Vector3<f64>]) -> Option<[f64; 4]> {
        let mut b = [
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        ];
        for p in pts {
            let ([u, v], _) = self.project(p)?;
            b = [b[0].min(u), b[1].min(v), b[2].max(u), b[3].max(v)];
        }
        Some(b)
    }

    pub fn clip(&self, b: [f64; 4]) -> Option<[f64; 4]> {
        let c = [
            b[0].max(0.0),
            b[1].max(0.0),
            b[2].min(self.width as f64),
            b[3].min(self.height as f64),
        ];
        (c[0] < c[2] && c[1] < c[3]).then_some(c)
    }

    pub fn meta(&self, fps: f64) -> CameraMeta {
        CameraMeta {
            id: self.id,
            width: self.width,
            height: self.height,
            fps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Keypoints {
    pub left_eye: [f64; 2],
    pub right_eye: [f64; 2],
    pub chin: [f64; 2],
}

impl Keypoints {
    pub fn face_center(&self) -> [f64; 2] {
        [
            (self.left_eye[0] + self.right_eye[0] + self.chin[0]) / 3.0,
            (self.left_eye[1] + self.right_eye[1] + self.chin[1]) / 3.0,
        ]
    }

    pub fn eye_center(&self) -> [f64; 2] {
        [
            (self.left_eye[0] + self.right_eye[0]) / 2.0,
            (self.left_eye[1] + self.right_eye[1]) / 2.0,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthRecord {
    pub video: String,
    pub frame: u32,
    pub camera: u32,
    pub identity: u32,
    /// Projected box clipped to the image.
    pub bbox: Box2D,
    pub occlusion: f64,
    pub hard: bool,
    pub visible: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<Keypoints>,
}

/// Area of the union of axis-aligned rectangles, by coordinate compression.
pub fn union_area(rects: &[[f64; 4]]) -> f64 {
    let rects: Vec<&[f64; 4]> = rects
        .iter()
        .filter(|r| r[0] < r[2] && r[1] < r[3])
        .collect();
    let mut xs: Vec<f64> = rects.iter().flat_map(|r| [r[0], r[2]]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let mut area = 0.0;
    for w in xs.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mut spans: Vec<(f64, f64)> = rects
            .iter()
            .filter(|r| r[0] <= a && r[2] >= b)
            .map(|r| (r[1], r[3]))
            .collect();
        spans.sort_by(|p, q| p.0.total_cmp(&q.0));
        let mut covered = 0.0;
        let mut cur: Option<(f64, f64)> = None;
        for (lo, hi) in spans {
            cur = match cur {
                Some((cl, ch)) if lo <= ch => Some((cl, ch.max(hi))),
                Some((cl, ch)) => {
                    covered += ch - cl;
                    Some((lo, hi))
                }
                None => Some((lo, hi)),
            };
        }
        if let Some((cl, ch)) = cur {
            covered += ch - cl;
        }
        area += covered * (b - a);
    }
    area
}

fn intersect(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [
        a[0].max(b[0]),
        a[1].max(b[1]),
        a[2].min(b[2]),
        a[3].min(b[3]),
    ]
}

/// Fraction of `target` covered by the union of `occluders`.
pub fn occlusion_fraction(target: &[f64; 4], occluders: &[[f64; 4]]) -> f64 {
    let area = (target[2] - target[0]) * (target[3] - target[1]);
    if !(area > 0.0) {
        return 0.0;
    }
    let clipped: Vec<[f64; 4]> = occluders.iter().map(|o| intersect(target, o)).collect();
    (union_area(&clipped) / area).clamp(0.0, 1.0)
}

struct Placed {
    identity: u32,
    bbox: [f64; 4],
    head: Option<[f64; 4]>,
    depth: f64,
    keypoints: Option<Keypoints>,
}

fn box_corners(pos: [f64; 2], size: [f64; 3], z0: f64, z1: f64) -> Vec<Vector3<f64>> {
    let (hx, hy) = (size[0] / 2.0, size[1] / 2.0);
    let mut pts = Vec::with_capacity(8);
    for z in [z0, z1] {
        for (dx, dy) in [(-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy)] {
            pts.push(Vector3::new(pos[0] + dx, pos[1] + dy, z));
        }
    }
    pts
}

fn place(cam: &PinholeCamera, tr: &Trajectory, t: f64, size: [f64; 3]) -> Option<Placed> {
    let pos = tr.position(t);
    let raw = cam.project_hull(&box_corners(pos, size, 0.0, size[2]))?;
    let bbox = cam.clip(raw)?;
    let (_, depth) = cam.project(&Vector3::new(pos[0], pos[1], size[2] / 2.0))?;
    let head_z = size[2] * 0.82;
    let head = cam
        .project_hull(&box_corners(pos, size, head_z, size[2]))
        .and_then(|h| cam.clip(h));

    let dir = tr.heading(t);
    let side = [-dir[1], dir[0]];
    let reach = size[0].min(size[1]) * 0.4;
    let at = |fwd: f64, lat: f64, z: f64| {
        Vector3::new(
            pos[0] + fwd * dir[0] + lat * side[0],
            pos[1] + fwd * dir[1] + lat * side[1],
            z,
        )
    };
    let eye_z = size[2] * 0.93;
    let to_cam = cam.center - at(0.0, 0.0, eye_z);
    let facing = to_cam.x * dir[0] + to_cam.y * dir[1] > 0.0;
    let inside = |p: [f64; 2]| {
        p[0] >= 0.0 && p[1] >= 0.0 && p[0] < cam.width as f64 && p[1] < cam.height as f64
    };
    let keypoints = if facing {
        let l = cam.project(&at(reach, 0.035, eye_z)).map(|x| x.0);
        let r = cam.project(&at(reach, -0.035, eye_z)).map(|x| x.0);
        let c = cam
            .project(&at(reach * 0.9, 0.0, size[2] * 0.86))
            .map(|x| x.0);
        match (l, r, c) {
            (Some(l), Some(r), Some(c)) if inside(l) && inside(r) && inside(c) => Some(Keypoints {
                left_eye: l,
                right_eye: r,
                chin: c,
            }),
            _ => None,
        }
    } else {
        None
    };
    Some(Placed {
        identity: tr.identity,
        bbox,
        head,
        depth,
        keypoints,
    })
}

/// Ground truth for every agent in front of each camera at one frame.
pub fn render_frame(
    cams: &[PinholeCamera],
    trajectories: &[Trajectory],
    cfg: &WorldConfig,
    frame: u32,
) -> Result<Vec<GroundTruthRecord>> {
    let t = frame as f64 / cfg.fps;
    let mut out = Vec::new();
    for cam in cams {
        let placed: Vec<Placed> = trajectories
            .iter()
            .filter_map(|tr| place(cam, tr, t, cfg.agent_size))
            .collect();
        for p in &placed {
            let nearer: Vec<[f64; 4]> = placed
                .iter()
                .filter(|o| o.identity != p.identity && o.depth < p.depth)
                .map(|o| o.bbox)
                .collect();
            let occlusion = occlusion_fraction(&p.bbox, &nearer);
            let area = (p.bbox[2] - p.bbox[0]) * (p.bbox[3] - p.bbox[1]);
            let visible = area >= cfg.min_visible_area;
            let head_clear = p
                .head
                .is_some_and(|h| occlusion_fraction(&h, &nearer) == 0.0);
            out.push(GroundTruthRecord {
                video: cfg.video.clone(),
                frame,
                camera: cam.id,
                identity: p.identity,
                bbox: Box2D::new(p.bbox[0], p.bbox[1], p.bbox[2], p.bbox[3])?,
                occlusion,
                hard: visible && occlusion > HARD_OCCLUSION,
                visible,
                keypoints: if visible && head_clear {
                    p.keypoints
                } else {
                    None
                },
            });
        }
    }
    Ok(out)
}

/// Ground truth for all frames, ordered by (frame, camera, identity).
pub fn project_to_views(
    trajectories: &[Trajectory],
    cfg: &WorldConfig,
) -> Result<Vec<GroundTruthRecord>> {
    cfg.validate()?;
    let mut cams: Vec<PinholeCamera> = cfg.cameras.iter().map(PinholeCamera::new).collect();
    cams.sort_by_key(|c| c.id);
    let mut out = Vec::new();
    for frame in 0..cfg.frames {
        out.extend(render_frame(&cams, trajectories, cfg, frame)?);
    }
    Ok(out)
}
