//! Body keypoints, part grouping and the per-region part sets used by the
//! pose-alignment graph.
//!
//! Keypoints arrive as COCO-17 detections in pixel units and are normalized
//! by the image size on ingest. The neck is not a COCO joint; it is
//! synthesized as the midpoint of the shoulders with the smaller of the two
//! shoulder confidences.

use std::cmp::Ordering;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Regions per frame: the 1 + 2 + 4 vertical pyramid bands.
pub const NUM_REGIONS: usize = 7;

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Joint {
    Nose,
    LeftEye,
    RightEye,
    LeftEar,
    RightEar,
    LeftShoulder,
    RightShoulder,
    LeftElbow,
    RightElbow,
    LeftWrist,
    RightWrist,
    LeftHip,
    RightHip,
    LeftKnee,
    RightKnee,
    LeftAnkle,
    RightAnkle,
    /// Derived from the shoulders.
    Neck,
}

impl Joint {
    /// COCO keypoint order.
    pub const COCO: [Joint; 17] = [
        Joint::Nose,
        Joint::LeftEye,
        Joint::RightEye,
        Joint::LeftEar,
        Joint::RightEar,
        Joint::LeftShoulder,
        Joint::RightShoulder,
        Joint::LeftElbow,
        Joint::RightElbow,
        Joint::LeftWrist,
        Joint::RightWrist,
        Joint::LeftHip,
        Joint::RightHip,
        Joint::LeftKnee,
        Joint::RightKnee,
        Joint::LeftAnkle,
        Joint::RightAnkle,
    ];

    pub fn part(self) -> Part {
        use Joint::*;
        match self {
            Nose | Neck | LeftEye | RightEye | LeftEar | RightEar => Part::Head,
            LeftShoulder | RightShoulder | LeftElbow | RightElbow | LeftWrist | RightWrist => {
                Part::Trunk
            }
            LeftHip | RightHip | LeftKnee | RightKnee | LeftAnkle | RightAnkle => Part::Leg,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Part {
    Head,
    Trunk,
    Leg,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Head, Part::Trunk, Part::Leg];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    pub fn name(self) -> &'static str {
        match self {
            Part::Head => "head",
            Part::Trunk => "trunk",
            Part::Leg => "leg",
        }
    }
}

/// Subset of {head, trunk, leg}.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct PartSet(u8);

impl PartSet {
    pub const EMPTY: PartSet = PartSet(0);

    pub fn of(parts: &[Part]) -> Self {
        let mut s = Self::EMPTY;
        for &p in parts {
            s.insert(p);
        }
        s
    }

    pub fn insert(&mut self, p: Part) {
        self.0 |= p.bit();
    }

    pub fn remove(&mut self, p: Part) {
        self.0 &= !p.bit();
    }

    pub fn contains(self, p: Part) -> bool {
        self.0 & p.bit() != 0
    }

    pub fn intersects(self, other: PartSet) -> bool {
        self.0 & other.0 != 0
    }

    pub fn union(self, other: PartSet) -> PartSet {
        PartSet(self.0 | other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Part> {
        Part::ALL.into_iter().filter(move |&p| self.contains(p))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub joint: Joint,
    /// Normalized image coordinates in [0, 1].
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Keypoint {
    pub fn new(joint: Joint, x: f64, y: f64, confidence: f64) -> Self {
        Self {
            joint,
            x: x.clamp(0.0, 1.0),
            y: y.clamp(0.0, 1.0),
            confidence: confidence.clamp(0.0, 1.0),
        }
    }
}

/// Normalized `(x, y, w, h)` box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersonPose {
    pub keypoints: Vec<Keypoint>,
    pub bbox: BBox,
    pub mean_confidence: f64,
}

impl PersonPose {
    pub fn new(keypoints: Vec<Keypoint>, bbox: BBox) -> Self {
        let mean_confidence = if keypoints.is_empty() {
            0.0
        } else {
            keypoints.iter().map(|k| k.confidence).sum::<f64>() / keypoints.len() as f64
        };
        Self {
            keypoints,
            bbox,
            mean_confidence,
        }
    }

    pub fn keypoint(&self, joint: Joint) -> Option<&Keypoint> {
        self.keypoints.iter().find(|k| k.joint == joint)
    }
}

/// Ranks candidates by bbox area (larger first), then by distance of the bbox
/// center to the image center (closer first), then by mean keypoint
/// confidence (higher first). Remaining ties keep the earlier candidate.
pub fn select_person(candidates: &[PersonPose]) -> Option<&PersonPose> {
    let center_dist = |p: &PersonPose| {
        let (cx, cy) = p.bbox.center();
        (cx - 0.5).hypot(cy - 0.5)
    };
    let better = |a: &PersonPose, b: &PersonPose| -> Ordering {
        b.bbox
            .area()
            .total_cmp(&a.bbox.area())
            .then(center_dist(a).total_cmp(&center_dist(b)))
            .then(b.mean_confidence.total_cmp(&a.mean_confidence))
    };
    candidates
        .iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| better(a, b).then(ia.cmp(ib)))
        .map(|(_, p)| p)
}

/// Keypoints kept per body part.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PartGroups {
    pub head: Vec<Keypoint>,
    pub trunk: Vec<Keypoint>,
    pub leg: Vec<Keypoint>,
}

impl PartGroups {
    pub fn get(&self, part: Part) -> &[Keypoint] {
        match part {
            Part::Head => &self.head,
            Part::Trunk => &self.trunk,
            Part::Leg => &self.leg,
        }
    }

    fn get_mut(&mut self, part: Part) -> &mut Vec<Keypoint> {
        match part {
            Part::Head => &mut self.head,
            Part::Trunk => &mut self.trunk,
            Part::Leg => &mut self.leg,
        }
    }
}

fn synthesize_neck(pose: &PersonPose) -> Option<Keypoint> {
    let l = pose.keypoint(Joint::LeftShoulder)?;
    let r = pose.keypoint(Joint::RightShoulder)?;
    Some(Keypoint::new(
        Joint::Neck,
        (l.x + r.x) / 2.0,
        (l.y + r.y) / 2.0,
        l.confidence.min(r.confidence),
    ))
}

/// Splits a pose into head, trunk and leg groups, dropping keypoints whose
/// confidence is below `conf_threshold`.
pub fn group_parts(pose: &PersonPose, conf_threshold: f64) -> PartGroups {
    let mut groups = PartGroups::default();
    let has_neck = pose.keypoint(Joint::Neck).is_some();
    let neck = if has_neck { None } else { synthesize_neck(pose) };
    for kp in pose.keypoints.iter().chain(neck.as_ref()) {
        if kp.confidence >= conf_threshold {
            groups.get_mut(kp.joint.part()).push(*kp);
        }
    }
    groups
}

/// Vertical bands of the 1/2/4 pyramid in normalized `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionGeometry {
    bands: [(f64, f64); NUM_REGIONS],
}

impl Default for RegionGeometry {
    fn default() -> Self {
        Self::pyramid()
    }
}

impl RegionGeometry {
    /// Region 0 is the whole frame, regions 1-2 the halves, 3-6 the quarters.
    pub fn pyramid() -> Self {
        Self {
            bands: [
                (0.0, 1.0),
                (0.0, 0.5),
                (0.5, 1.0),
                (0.0, 0.25),
                (0.25, 0.5),
                (0.5, 0.75),
                (0.75, 1.0),
            ],
        }
    }

    pub fn band(&self, region: usize) -> (f64, f64) {
        self.bands[region]
    }

    /// Bands are half-open `[lo, hi)`; a band ending at 1 also holds `y = 1`.
    pub fn contains(&self, region: usize, y: f64) -> bool {
        let (lo, hi) = self.bands[region];
        y >= lo && (y < hi || (hi >= 1.0 && y <= 1.0))
    }
}

/// `S_i` for each of the seven regions of one frame.
pub fn region_part_sets(groups: &PartGroups, geometry: &RegionGeometry) -> [PartSet; NUM_REGIONS] {
    let mut sets = [PartSet::EMPTY; NUM_REGIONS];
    for part in Part::ALL {
        for kp in groups.get(part) {
            for (region, set) in sets.iter_mut().enumerate() {
                if geometry.contains(region, kp.y) {
                    set.insert(part);
                }
            }
        }
    }
    sets
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPerson {
    keypoints: Vec<f64>,
    bbox: [f64; 4],
    image_size: [f64; 2],
}

fn normalize_person(raw: &RawPerson) -> std::result::Result<PersonPose, String> {
    let [w, h] = raw.image_size;
    if !(w > 0.0 && h > 0.0) {
        return Err(format!("image_size must be positive, got {:?}", raw.image_size));
    }
    if raw.keypoints.len() != 3 * Joint::COCO.len() {
        return Err(format!(
            "expected {} keypoint values, got {}",
            3 * Joint::COCO.len(),
            raw.keypoints.len()
        ));
    }
    if raw.keypoints.iter().chain(&raw.bbox).any(|v| !v.is_finite()) {
        return Err("non-finite keypoint or bbox value".into());
    }
    let keypoints = Joint::COCO
        .iter()
        .zip(raw.keypoints.chunks_exact(3))
        .map(|(&j, c)| Keypoint::new(j, c[0] / w, c[1] / h, c[2]))
        .collect();
    let [bx, by, bw, bh] = raw.bbox;
    let bbox = BBox {
        x: bx / w,
        y: by / h,
        w: bw / w,
        h: bh / h,
    };
    Ok(PersonPose::new(keypoints, bbox))
}

/// Parses a tracklet keypoint document: an array of frames, each an array
/// of detected persons.
pub fn parse_keypoints(json: &str, path: &Path) -> Result<Vec<Vec<PersonPose>>> {
    let raw: Vec<Vec<RawPerson>> =
        serde_json::from_str(json).map_err(|e| Error::format(path, e.to_string()))?;
    raw.iter()
        .enumerate()
        .map(|(f, frame)| {
            frame
                .iter()
                .map(|p| normalize_person(p).map_err(|m| Error::format(path, format!("frame {f}: {m}"))))
                .collect()
        })
        .collect()
}

pub fn load_keypoints(path: &Path) -> Result<Vec<Vec<PersonPose>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_keypoints(&text, path)
}

/// Region part sets for every frame. Frames without a detected person get
/// seven empty sets.
pub fn frame_part_sets(
    frames: &[Vec<PersonPose>],
    conf_threshold: f64,
    geometry: &RegionGeometry,
) -> Vec<[PartSet; NUM_REGIONS]> {
    frames
        .iter()
        .map(|candidates| match select_person(candidates) {
            Some(pose) => region_part_sets(&group_parts(pose, conf_threshold), geometry),
            None => [PartSet::EMPTY; NUM_REGIONS],
        })
        .collect()
}

/// Serializes poses back to the pixel-unit JSON layout.
pub fn keypoints_to_json(frames: &[Vec<PersonPose>], image_size: (f64, f64)) -> String {
    let (w, h) = image_size;
    let frames: Vec<serde_json::Value> = frames
        .iter()
        .map(|persons| {
            serde_json::Value::Array(
                persons
                    .iter()
                    .map(|p| {
                        let mut flat = Vec::with_capacity(51);
                        for j in Joint::COCO {
                            let (x, y, c) = p
                                .keypoint(j)
                                .map_or((0.0, 0.0, 0.0), |k| (k.x * w, k.y * h, k.confidence));
                            flat.extend([x, y, c]);
                        }
                        serde_json::json!({
                            "keypoints": flat,
                            "bbox": [p.bbox.x * w, p.bbox.y * h, p.bbox.w * w, p.bbox.h * h],
                            "image_size": [w, h],
                        })
                    })
                    .collect(),
            )
        })
        .collect();
    serde_json::Value::Array(frames).to_string()
}
