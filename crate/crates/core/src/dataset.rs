//! Loaded tracklets: features plus per-frame region part sets.

use std::path::Path;

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::features::FeatureFile;
use crate::pose::{frame_part_sets, load_keypoints, PartSet, RegionGeometry, NUM_REGIONS};
use crate::sampling::{Manifest, Split, TrackletRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct Tracklet {
    pub record: TrackletRecord,
    pub features: FeatureFile,
    pub part_sets: Vec<[PartSet; NUM_REGIONS]>,
}

impl Tracklet {
    pub fn new(record: TrackletRecord, features: FeatureFile, part_sets: Vec<[PartSet; NUM_REGIONS]>) -> Result<Self> {
        let path = record.feature_path.clone();
        if features.regions != NUM_REGIONS {
            return Err(Error::format(
                &path,
                format!("expected {NUM_REGIONS} regions per frame, got {}", features.regions),
            ));
        }
        if features.frames != record.frame_count {
            return Err(Error::format(
                &path,
                format!("manifest says {} frames, feature file has {}", record.frame_count, features.frames),
            ));
        }
        if part_sets.len() != features.frames {
            return Err(Error::format(
                &record.keypoint_path,
                format!("{} keypoint frames for {} feature frames", part_sets.len(), features.frames),
            ));
        }
        Ok(Self {
            record,
            features,
            part_sets,
        })
    }

    pub fn frames(&self) -> usize {
        self.features.frames
    }

    pub fn nodes(&self, frames: &[usize]) -> Tensor {
        self.features.nodes(frames)
    }

    /// Part sets for the node rows of `frames`, frame-major.
    pub fn node_part_sets(&self, frames: &[usize]) -> Vec<PartSet> {
        frames.iter().flat_map(|&t| self.part_sets[t]).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub tracklets: Vec<Tracklet>,
}

impl Dataset {
    pub fn load(manifest: &Manifest, conf_threshold: f64) -> Result<Self> {
        let geometry = RegionGeometry::pyramid();
        let tracklets = manifest
            .records
            .iter()
            .map(|r| {
                let fpath = manifest.resolve(&r.feature_path);
                let kpath = manifest.resolve(&r.keypoint_path);
                let features = FeatureFile::load(&fpath)?;
                let poses = load_keypoints(&kpath)?;
                let sets = frame_part_sets(&poses, conf_threshold, &geometry);
                let mut rec = r.clone();
                rec.feature_path = fpath;
                rec.keypoint_path = kpath;
                Tracklet::new(rec, features, sets)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tracklets })
    }

    pub fn load_path(path: &Path, conf_threshold: f64) -> Result<Self> {
        Self::load(&Manifest::load(path)?, conf_threshold)
    }

    pub fn with_split(&self, pred: impl Fn(Split) -> bool) -> Vec<&Tracklet> {
        self.tracklets.iter().filter(|t| pred(t.record.split)).collect()
    }
}
