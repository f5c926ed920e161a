//! Image retrieval against the posed database: exact descriptor search
//! plus an adaptive second stage that renders perturbed poses when the
//! coarse candidates verify poorly.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::{detect_keypoints, global_descriptor, GlobalDescriptor, Keypoints};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::image::Image;
use crate::matcher::{sparse_verify, VerifyConfig};
use crate::splat::{render, RenderChannels, SceneMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PerturbStrategy {
    /// Uniform rotation angle and translation radius inside the bounds.
    #[default]
    UniformBall,
    /// Zero-mean normal with sigma at half the bounds, hard-clipped.
    Gaussian,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalConfig {
    /// Coarse candidates from the descriptor index.
    pub k1: usize,
    /// Perturbed poses sampled in the second stage.
    pub k2: usize,
    /// Perturbed poses kept for verification.
    pub k3: usize,
    /// Rotation perturbation bound, degrees.
    pub angle_deg: f64,
    /// Translation perturbation bound, meters.
    pub radius_m: f64,
    /// Early-exit inlier goal.
    pub inlier_goal: usize,
    /// Verify every n-th coarse candidate (1 = all).
    pub verify_stride: usize,
    /// Keypoint budget per image during verification.
    pub max_keypoints: usize,
    pub perturbation: PerturbStrategy,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k1: 10,
            k2: 150,
            k3: 5,
            angle_deg: 5.0,
            radius_m: 0.5,
            inlier_goal: 150,
            verify_stride: 1,
            max_keypoints: 512,
            perturbation: PerturbStrategy::default(),
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k1 == 0 || self.k2 == 0 || self.k3 == 0 {
            return Err(Error::InvalidConfig("retrieval k's must be positive".into()));
        }
        if self.k3 > self.k2 {
            return Err(Error::InvalidConfig("k3 must not exceed k2".into()));
        }
        if self.verify_stride == 0 {
            return Err(Error::InvalidConfig("verify stride must be >= 1".into()));
        }
        if !(self.angle_deg >= 0.0 && self.radius_m >= 0.0) {
            return Err(Error::InvalidConfig("perturbation bounds negative".into()));
        }
        Ok(())
    }
}

/// Exact nearest-neighbor index over unit global descriptors.
#[derive(Debug, Clone)]
pub struct DescriptorIndex {
    dim: usize,
    descriptors: Vec<Vec<f64>>,
}

impl DescriptorIndex {
    pub fn build(scene: &SceneMap) -> Result<Self> {
        if scene.database.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        let dim = scene.database[0].descriptor.len();
        Ok(DescriptorIndex {
            dim,
            descriptors: scene
                .database
                .iter()
                .map(|e| e.descriptor.clone())
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    /// Top-k entries by cosine similarity, descending; ties keep the
    /// lower index first.
    pub fn top_k(&self, query: &GlobalDescriptor, k: usize) -> Result<Vec<(usize, f64)>> {
        if query.0.len() != self.dim {
            return Err(Error::DimMismatch(format!(
                "query descriptor dim {} != index dim {}",
                query.0.len(),
                self.dim
            )));
        }
        let mut scored: Vec<(usize, f64)> = self
            .descriptors
            .iter()
            .enumerate()
            .map(|(i, d)| (i, d.iter().zip(&query.0).map(|(a, b)| a * b).sum()))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }
}

/// Coarse stage: top-k1 database entries for a query descriptor.
pub fn coarse_retrieve(
    index: &DescriptorIndex,
    query: &GlobalDescriptor,
    k1: usize,
) -> Result<Vec<(usize, f64)>> {
    index.top_k(query, k1)
}

fn random_unit_axis(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
        );
        let n = v.norm();
        if n > 1e-6 && n <= 1.0 {
            return v / n;
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Random pose within `angle_deg` rotation and `radius_m` translation
/// of the input.
pub fn perturb_pose(
    pose: &Pose,
    angle_deg: f64,
    radius_m: f64,
    strategy: PerturbStrategy,
    rng: &mut ChaCha8Rng,
) -> Pose {
    let (angle, radius) = match strategy {
        PerturbStrategy::UniformBall => (
            rng.gen::<f64>() * angle_deg.to_radians(),
            rng.gen::<f64>() * radius_m,
        ),
        PerturbStrategy::Gaussian => (
            (gaussian(rng).abs() * angle_deg.to_radians() / 2.0).min(angle_deg.to_radians()),
            (gaussian(rng).abs() * radius_m / 2.0).min(radius_m),
        ),
    };
    let rot_axis = random_unit_axis(rng);
    let t_axis = random_unit_axis(rng);
    let dq = nalgebra::UnitQuaternion::from_scaled_axis(rot_axis * angle);
    Pose::from_parts(pose.rotation * dq, pose.translation + t_axis * radius)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    CoarseCandidates {
        entries: Vec<usize>,
        similarities: Vec<f64>,
    },
    Verified {
        entry: Option<usize>,
        inliers: usize,
    },
    EarlyExit {
        entry: usize,
        inliers: usize,
    },
    FineStage {
        sampled: usize,
        kept: usize,
    },
    Selected {
        inliers: usize,
        from_fine_stage: bool,
    },
}

/// Outcome of adaptive retrieval: the prior pose handed to the
/// localizer plus the verification evidence behind it.
#[derive(Debug, Clone)]
pub struct RetrievalResult {
    pub pose: Pose,
    /// Database entry the pose came from, if not a perturbed sample.
    pub entry: Option<usize>,
    pub inliers: usize,
    pub used_fine_stage: bool,
    pub trace: Vec<TraceEvent>,
}

impl RetrievalResult {
    /// One JSON object per trace event.
    pub fn trace_jsonl(&self) -> String {
        self.trace
            .iter()
            .map(|e| serde_json::to_string(e).expect("trace serializes"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn rendered_keypoints(
    scene: &SceneMap,
    k: &CameraIntrinsics,
    pose: &Pose,
    max_n: usize,
) -> Keypoints {
    let view = render(scene, k, pose, RenderChannels::color_only());
    detect_keypoints(&view.color_image(), max_n)
}

/// Adaptive retrieval. Coarse descriptor candidates are verified by
/// sparse matching against renders at their poses; when the best count
/// reaches `inlier_goal` the search stops. Otherwise `k2` perturbed
/// poses around the best candidate are rendered, ranked by descriptor
/// similarity, the top `k3` verified, and the overall best pose wins.
pub fn adaptive_retrieve(
    query: &Image,
    scene: &SceneMap,
    k: &CameraIntrinsics,
    cfg: &RetrievalConfig,
    vcfg: &VerifyConfig,
    seed: u64,
) -> Result<RetrievalResult> {
    cfg.validate()?;
    let index = DescriptorIndex::build(scene)?;
    let gq = global_descriptor(query)?;
    let candidates = coarse_retrieve(&index, &gq, cfg.k1)?;
    let mut trace = vec![TraceEvent::CoarseCandidates {
        entries: candidates.iter().map(|c| c.0).collect(),
        similarities: candidates.iter().map(|c| c.1).collect(),
    }];

    let query_kp = detect_keypoints(query, cfg.max_keypoints);
    let mut best_entry = candidates[0].0;
    let mut best_inliers = 0usize;
    for (pos, &(entry, _)) in candidates.iter().enumerate() {
        if pos % cfg.verify_stride != 0 {
            continue;
        }
        let e = &scene.database[entry];
        let kp = rendered_keypoints(scene, &e.intrinsics, &e.pose, cfg.max_keypoints);
        let n = sparse_verify(&query_kp, &kp, vcfg);
        trace.push(TraceEvent::Verified {
            entry: Some(entry),
            inliers: n,
        });
        if n > best_inliers {
            best_inliers = n;
            best_entry = entry;
        }
        if best_inliers >= cfg.inlier_goal {
            trace.push(TraceEvent::EarlyExit {
                entry: best_entry,
                inliers: best_inliers,
            });
            return Ok(RetrievalResult {
                pose: scene.database[best_entry].pose,
                entry: Some(best_entry),
                inliers: best_inliers,
                used_fine_stage: false,
                trace,
            });
        }
    }

    // Second stage: perturb around the best coarse candidate.
    let anchor = scene.database[best_entry].pose;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poses: Vec<Pose> = (0..cfg.k2)
        .map(|_| perturb_pose(&anchor, cfg.angle_deg, cfg.radius_m, cfg.perturbation, &mut rng))
        .collect();
    let mut scored: Vec<(usize, f64)> = poses
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let view = render(scene, k, p, RenderChannels::color_only());
            let d = global_descriptor(&view.color_image()).expect("render is non-empty");
            (i, gq.cosine(&d))
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(cfg.k3);
    trace.push(TraceEvent::FineStage {
        sampled: cfg.k2,
        kept: scored.len(),
    });

    let mut best_pose = anchor;
    let mut best_is_fine = false;
    for &(i, _) in &scored {
        let kp = rendered_keypoints(scene, k, &poses[i], cfg.max_keypoints);
        let n = sparse_verify(&query_kp, &kp, vcfg);
        trace.push(TraceEvent::Verified {
            entry: None,
            inliers: n,
        });
        if n > best_inliers {
            best_inliers = n;
            best_pose = poses[i];
            best_is_fine = true;
        }
    }
    trace.push(TraceEvent::Selected {
        inliers: best_inliers,
        from_fine_stage: best_is_fine,
    });
    Ok(RetrievalResult {
        pose: best_pose,
        entry: if best_is_fine { None } else { Some(best_entry) },
        inliers: best_inliers,
        used_fine_stage: true,
        trace,
    })
}
