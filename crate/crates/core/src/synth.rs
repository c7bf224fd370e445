//! Synthetic identity-structured tracklets with occlusion.
//!
//! Every identity owns a latent vector per body part. A region's feature is
//! the mean of the part vectors it covers plus noise. An occluded frame
//! swaps one part for a distractor vector shared by all identities and drops
//! that part's keypoints.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Tracklet};
use crate::error::{Error, Result};
use crate::features::FeatureFile;
use crate::pose::{frame_part_sets, keypoints_to_json, parse_keypoints, BBox, Joint, Keypoint, Part, PersonPose, RegionGeometry, NUM_REGIONS};
use crate::sampling::{Manifest, Split, TrackletRecord};

pub const IMAGE_SIZE: (f64, f64) = (64.0, 128.0);

/// Parts whose appearance a region's feature mixes, by canonical layout.
pub const REGION_PARTS: [&[Part]; NUM_REGIONS] = [
    &[Part::Head, Part::Trunk, Part::Leg],
    &[Part::Head, Part::Trunk],
    &[Part::Leg],
    &[Part::Head],
    &[Part::Trunk],
    &[Part::Leg],
    &[Part::Leg],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OcclusionPart {
    Random,
    Head,
    Trunk,
    Leg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub identities: usize,
    pub tracklets_per_identity: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub dim: usize,
    /// Rank of the subspace holding identity variation.
    pub latent_dim: usize,
    /// Scale of identity-specific part vectors.
    pub signal: f64,
    /// Scale of the part means shared by all identities.
    pub common: f64,
    /// Per-tracklet appearance drift, fixed across its frames.
    pub tracklet_sigma: f64,
    pub noise_sigma: f64,
    pub distractor_scale: f64,
    pub occlusion_prob: f64,
    pub occlusion_part: OcclusionPart,
    /// Keypoint height jitter in normalized units.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            identities: 32,
            tracklets_per_identity: 4,
            frames_min: 12,
            frames_max: 24,
            dim: 32,
            latent_dim: 8,
            signal: 1.0,
            common: 1.0,
            tracklet_sigma: 0.3,
            noise_sigma: 1.0,
            distractor_scale: 1.5,
            occlusion_prob: 0.3,
            occlusion_part: OcclusionPart::Random,
            jitter: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::Config(format!("occlusion_prob must lie in [0, 1], got {}", self.occlusion_prob)));
        }
        if self.dim < 4 {
            return Err(Error::Config(format!("dim must be at least 4, got {}", self.dim)));
        }
        if self.latent_dim == 0 || self.latent_dim > self.dim {
            return Err(Error::Config("latent_dim must lie in 1..=dim".into()));
        }
        if self.identities < 2 || self.tracklets_per_identity == 0 {
            return Err(Error::Config("need at least 2 identities and 1 tracklet each".into()));
        }
        if self.frames_min == 0 || self.frames_max < self.frames_min {
            return Err(Error::Config("frame range must satisfy 1 <= frames_min <= frames_max".into()));
        }
        for (name, v) in [
            ("signal", self.signal),
            ("common", self.common),
            ("tracklet_sigma", self.tracklet_sigma),
            ("noise_sigma", self.noise_sigma),
            ("distractor_scale", self.distractor_scale),
            ("jitter", self.jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// A generated dataset held in memory. Keypoints are kept as JSON text so
/// that in-memory and on-disk loading share one parser.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub records: Vec<TrackletRecord>,
    pub features: Vec<FeatureFile>,
    pub keypoints: Vec<String>,
}

fn gaussian(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

/// Canonical normalized height of each COCO joint.
fn joint_height(j: Joint) -> f64 {
    use Joint::*;
    match j {
        Nose => 0.1,
        LeftEye | RightEye => 0.08,
        LeftEar | RightEar => 0.09,
        LeftShoulder | RightShoulder => 0.3,
        LeftElbow | RightElbow => 0.38,
        LeftWrist | RightWrist => 0.46,
        LeftHip | RightHip => 0.56,
        LeftKnee | RightKnee => 0.72,
        LeftAnkle | RightAnkle => 0.92,
        Neck => 0.25,
    }
}

fn joint_x(j: Joint) -> f64 {
    use Joint::*;
    match j {
        LeftEye | LeftEar | LeftShoulder | LeftElbow | LeftWrist | LeftHip | LeftKnee | LeftAnkle => 0.4,
        RightEye | RightEar | RightShoulder | RightElbow | RightWrist | RightHip | RightKnee | RightAnkle => 0.6,
        Nose | Neck => 0.5,
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;
    // orthonormal-ish basis of the identity subspace via Gram-Schmidt
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cfg.latent_dim);
    while basis.len() < cfg.latent_dim {
        let mut v = gaussian(&mut rng, d, 1.0);
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let embed = |coeffs: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; d];
        for (c, b) in coeffs.iter().zip(&basis) {
            for (o, x) in out.iter_mut().zip(b) {
                *o += c * x;
            }
        }
        out
    };
    let unit = (d as f64).sqrt();
    let part_means: Vec<Vec<f64>> = (0..3).map(|_| gaussian(&mut rng, d, cfg.common / unit)).collect();
    let distractor = gaussian(&mut rng, d, cfg.distractor_scale / unit);
    let latent_scale = cfg.signal / (cfg.latent_dim as f64).sqrt();

    let train_ids = cfg.identities / 2;
    let mut records = Vec::new();
    let mut features = Vec::new();
    let mut keypoints = Vec::new();
    for id in 0..cfg.identities {
        let parts: Vec<Vec<f64>> = (0..3)
            .map(|p| {
                let v = embed(&gaussian(&mut rng, cfg.latent_dim, latent_scale));
                v.iter().zip(&part_means[p]).map(|(a, b)| a + b).collect()
            })
            .collect();
        for t in 0..cfg.tracklets_per_identity {
            let frames = rng.random_range(cfg.frames_min..=cfg.frames_max);
            let drift: Vec<Vec<f64>> = (0..3)
                .map(|p| {
                    let g = gaussian(&mut rng, d, cfg.tracklet_sigma / unit);
                    parts[p].iter().zip(g).map(|(a, b)| a + b).collect()
                })
                .collect();
            let mut data = Vec::with_capacity(frames * NUM_REGIONS * d);
            let mut poses = Vec::with_capacity(frames);
            for _ in 0..frames {
                let occluded = if rng.random_bool(cfg.occlusion_prob) {
                    Some(match cfg.occlusion_part {
                        OcclusionPart::Random => Part::ALL[rng.random_range(0..3)],
                        OcclusionPart::Head => Part::Head,
                        OcclusionPart::Trunk => Part::Trunk,
                        OcclusionPart::Leg => Part::Leg,
                    })
                } else {
                    None
                };
                for region_parts in REGION_PARTS {
                    let noise = gaussian(&mut rng, d, cfg.noise_sigma / unit);
                    let w = 1.0 / region_parts.len() as f64;
                    let mut v = noise;
                    for &p in region_parts {
                        let src = if occluded == Some(p) { &distractor } else { &drift[p as usize] };
                        for (o, x) in v.iter_mut().zip(src) {
                            *o += w * x;
                        }
                    }
                    data.extend(v);
                }
                let kps = Joint::COCO
                    .iter()
                    .map(|&j| {
                        let (zy, zx): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
                        let y = joint_height(j) + cfg.jitter * zy;
                        let x = joint_x(j) + 0.4 * cfg.jitter * zx;
                        let conf = if occluded == Some(j.part()) { 0.05 } else { 0.9 };
                        // quarter-pixel grid keeps the JSON text short and exact
                        let q = |v: f64, s: f64| ((v * s * 4.0).round() / 4.0) / s;
                        Keypoint::new(j, q(x, IMAGE_SIZE.0), q(y, IMAGE_SIZE.1), conf)
                    })
                    .collect();
                poses.push(vec![PersonPose::new(
                    kps,
                    BBox {
                        x: 0.0,
                        y: 0.0,
                        w: 1.0,
                        h: 1.0,
                    },
                )]);
            }
            let name = format!("id{id:03}_t{t}");
            records.push(TrackletRecord {
                tracklet_id: name.clone(),
                identity: id as i64,
                camera: (t % 2) as u32,
                split: if id < train_ids { Split::Train } else { Split::Test },
                frame_count: frames,
                feature_path: PathBuf::from(format!("features/{name}.agrf")),
                keypoint_path: PathBuf::from(format!("keypoints/{name}.json")),
            });
            features.push(FeatureFile::new(frames, NUM_REGIONS, d, data)?);
            keypoints.push(keypoints_to_json(&poses, IMAGE_SIZE));
        }
    }
    Ok(SynthData {
        records,
        features,
        keypoints,
    })
}

impl SynthData {
    pub fn manifest(&self, root: &Path) -> Manifest {
        Manifest {
            root: root.to_path_buf(),
            records: self.records.clone(),
        }
    }

    /// Writes `manifest.csv`, `features/` and `keypoints/` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        for sub in ["features", "keypoints"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        for ((r, f), k) in self.records.iter().zip(&self.features).zip(&self.keypoints) {
            f.save(&dir.join(&r.feature_path))?;
            let kp = dir.join(&r.keypoint_path);
            std::fs::write(&kp, k).map_err(|e| Error::io(&kp, e))?;
        }
        let path = dir.join("manifest.csv");
        let text = self.manifest(dir).to_csv()?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// The dataset as it would load from disk, without touching the filesystem.
    pub fn to_dataset(&self, conf_threshold: f64) -> Result<Dataset> {
        let geometry = RegionGeometry::pyramid();
        let tracklets = self
            .records
            .iter()
            .zip(&self.features)
            .zip(&self.keypoints)
            .map(|((r, f), k)| {
                let poses = parse_keypoints(k, &r.keypoint_path)?;
                Tracklet::new(r.clone(), f.clone(), frame_part_sets(&poses, conf_threshold, &geometry))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { tracklets })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjacency::build_pose_adjacency;
    use crate::evalkit::{rank, Entry};
    use crate::pose::DEFAULT_CONF_THRESHOLD;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            identities: 6,
            tracklets_per_identity: 2,
            frames_min: 4,
            frames_max: 6,
            dim: 8,
            latent_dim: 4,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_identities_repeat_exactly() {
        let cfg = SynthConfig {
            occlusion_prob: 0.0,
            noise_sigma: 0.0,
            tracklet_sigma: 0.0,
            ..small(1)
        };
        let data = generate(&cfg).unwrap();
        for id in 0..cfg.identities {
            let mine: Vec<&FeatureFile> = data
                .records
                .iter()
                .zip(&data.features)
                .filter(|(r, _)| r.identity == id as i64)
                .map(|(_, f)| f)
                .collect();
            let first = mine[0].frame(0);
            for f in &mine {
                for t in 0..f.frames {
                    assert_eq!(f.frame(t), first);
                }
            }
        }
    }

    #[test]
    fn noiseless_nearest_neighbour_is_perfect() {
        let cfg = SynthConfig {
            occlusion_prob: 0.0,
            noise_sigma: 0.0,
            tracklet_sigma: 0.0,
            identities: 20,
            ..small(2)
        };
        let data = generate(&cfg).unwrap();
        let entries: Vec<Entry> = data
            .records
            .iter()
            .zip(&data.features)
            .map(|(r, f)| {
                let mut mean = vec![0.0; f.dim];
                for t in 0..f.frames {
                    for (m, v) in mean.iter_mut().zip(f.frame(t)) {
                        *m += v;
                    }
                }
                Entry {
                    vector: mean,
                    identity: r.identity,
                    camera: r.camera,
                }
            })
            .collect();
        assert_eq!(rank(&entries, &entries).unwrap().rank(1), 1.0);
    }

    #[test]
    fn full_head_occlusion_removes_head_keypoints() {
        let cfg = SynthConfig {
            occlusion_prob: 1.0,
            occlusion_part: OcclusionPart::Head,
            jitter: 0.0,
            ..small(3)
        };
        let data = generate(&cfg).unwrap();
        let ds = data.to_dataset(DEFAULT_CONF_THRESHOLD).unwrap();
        for (t, json) in ds.tracklets.iter().zip(&data.keypoints) {
            for frame in parse_keypoints(json, Path::new("k")).unwrap() {
                for kp in &frame[0].keypoints {
                    if kp.joint.part() == Part::Head {
                        assert!(kp.confidence < DEFAULT_CONF_THRESHOLD);
                    }
                }
            }
            // the derived neck still sits between the shoulders, but the
            // head-only top quarter has no parts left
            for frame in &t.part_sets {
                assert!(frame[3].is_empty());
            }
            let ap = build_pose_adjacency(&t.node_part_sets(&[0]));
            assert!(ap.matrix().row(3).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn output_is_deterministic_and_matches_disk() {
        let a = generate(&small(4)).unwrap();
        let b = generate(&small(4)).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let path = a.write(dir.path()).unwrap();
        let from_disk = Dataset::load_path(&path, DEFAULT_CONF_THRESHOLD).unwrap();
        let in_memory = a.to_dataset(DEFAULT_CONF_THRESHOLD).unwrap();
        for (x, y) in from_disk.tracklets.iter().zip(&in_memory.tracklets) {
            assert_eq!(x.features, y.features);
            assert_eq!(x.part_sets, y.part_sets);
        }
        let dir2 = tempfile::tempdir().unwrap();
        b.write(dir2.path()).unwrap();
        for r in &a.records {
            for p in [&r.feature_path, &r.keypoint_path] {
                assert_eq!(std::fs::read(dir.path().join(p)).unwrap(), std::fs::read(dir2.path().join(p)).unwrap());
            }
        }
        assert_eq!(
            std::fs::read(dir.path().join("manifest.csv")).unwrap(),
            std::fs::read(dir2.path().join("manifest.csv")).unwrap()
        );
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate(&SynthConfig { occlusion_prob: 1.5, ..small(0) }).is_err());
        assert!(generate(&SynthConfig { dim: 3, latent_dim: 2, ..small(0) }).is_err());
    }
}
