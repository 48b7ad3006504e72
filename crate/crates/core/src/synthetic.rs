//! Seeded generator of ground-truth crossing scenarios with ego-motion
//! image distortion.
//!
//! World model: a pedestrian stands at lateral offset X meters from the ego
//! lane center at depth Z, projected through a fixed pinhole camera.
//! Crossing pedestrians walk laterally toward the lane while the gap closes
//! (box area grows); never-crossing pedestrians hold world position. On top
//! of the projection, a pan/drift displacement driven by the sampled ego
//! speed profile shifts both classes identically in image space, directed
//! along the reference-line slope of the pedestrian's side, so raw image
//! position is ambiguous while the line-disparity features stay clean.
//!
//! Labels are decidable from the emitted world-frame trajectory alone: a
//! track crosses iff its lateral offset ever enters the lane half-width.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AnnotationRecord, CrossingLabel};
use crate::features::augment_keypoints;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario params: {0}")]
    BadParams(String),
    #[error("track {track}: pedestrian leaves the frame at frame {frame} (x = {x:.1} px)")]
    InfeasibleGeometry { track: usize, frame: usize, x: f64 },
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Half of the ego lane, meters; crossing the boundary defines the event.
pub const LANE_HALF_WIDTH_M: f64 = 1.75;

const CAMERA_HEIGHT_M: f64 = 1.4;
const PERSON_HEIGHT_M: f64 = 1.7;
const PERSON_WIDTH_M: f64 = 0.5;
/// Vertical offset of the box center below the horizon, meters.
const CENTER_DROP_M: f64 = CAMERA_HEIGHT_M - PERSON_HEIGHT_M / 2.0;
/// ChaCha stream offset so track streams never collide with trainer streams.
const TRACK_STREAM_BASE: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioParams {
    pub image_width: f64,
    pub image_height: f64,
    /// Tracks generated per class (crossing and never-crossing).
    pub tracks_per_class: usize,
    /// Inclusive track length range, frames.
    pub frames_range: (usize, usize),
    /// World lateral walking speed of crossing pedestrians, m/s.
    pub lateral_speed_range: (f64, f64),
    /// Spawn depth range, meters.
    pub depth_range: (f64, f64),
    /// Ego closing speed toward crossing pedestrians, m/s.
    pub approach_speed_range: (f64, f64),
    /// Ego speed profile start, km/h.
    pub ego_speed_range: (f64, f64),
    /// Peak image-space pan displacement emulating ego rotation, pixels.
    pub pan_amplitude: f64,
    /// Gaussian pixel noise on boxes and keypoints.
    pub noise_sigma: f64,
    pub fps: f64,
    pub seed: u64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            image_width: 1920.0,
            image_height: 1080.0,
            tracks_per_class: 400,
            frames_range: (60, 120),
            lateral_speed_range: (0.8, 1.5),
            depth_range: (12.0, 35.0),
            approach_speed_range: (2.0, 8.0),
            ego_speed_range: (15.0, 45.0),
            pan_amplitude: 120.0,
            noise_sigma: 0.5,
            fps: 30.0,
            seed: 42,
        }
    }
}

impl ScenarioParams {
    fn validate(&self) -> Result<()> {
        let ranges = [
            ("frames_range", self.frames_range.0 as f64, self.frames_range.1 as f64),
            ("lateral_speed_range", self.lateral_speed_range.0, self.lateral_speed_range.1),
            ("depth_range", self.depth_range.0, self.depth_range.1),
            ("approach_speed_range", self.approach_speed_range.0, self.approach_speed_range.1),
            ("ego_speed_range", self.ego_speed_range.0, self.ego_speed_range.1),
        ];
        for (name, lo, hi) in ranges {
            if lo > hi || lo < 0.0 {
                return Err(SynthError::BadParams(format!(
                    "{name} ({lo}, {hi}) must be a non-empty non-negative range"
                )));
            }
        }
        if self.tracks_per_class == 0 {
            return Err(SynthError::BadParams("tracks_per_class must be positive".into()));
        }
        if self.frames_range.0 < 2 {
            return Err(SynthError::BadParams("tracks need at least 2 frames".into()));
        }
        if self.depth_range.0 <= 5.0 {
            return Err(SynthError::BadParams("spawn depth must exceed 5 m".into()));
        }
        if self.fps <= 0.0 || self.image_width <= 0.0 || self.image_height <= 0.0 {
            return Err(SynthError::BadParams("fps and image size must be positive".into()));
        }
        Ok(())
    }

    fn focal_px(&self) -> f64 {
        // horizontal field of view fixed relative to image width
        self.image_width * 100.0 / 192.0
    }

    fn horizon_y(&self) -> f64 {
        self.image_height * 0.37
    }

    /// Nominal apex height of the reference lines: the un-panned image y of
    /// a box center at the far end of the depth range.
    fn nominal_y_min(&self) -> f64 {
        self.horizon_y() + self.focal_px() * CENTER_DROP_M / self.depth_range.1
    }
}

/// One generated track: the annotation record plus the world-frame truth the
/// record's image-frame data was rendered from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTrack {
    pub record: AnnotationRecord,
    /// Lateral world offset from the lane center per frame, meters (signed).
    pub world_lateral: Vec<f64>,
    /// Depth per frame, meters.
    pub depth: Vec<f64>,
    /// Injected pan displacement per frame, image pixels (x, y).
    pub pan: Vec<[f64; 2]>,
    pub walking: bool,
}

/// Label a world trajectory: it crosses iff the lateral offset ever enters
/// the lane half-width.
pub fn label_from_world(world_lateral: &[f64]) -> CrossingLabel {
    if world_lateral.iter().any(|&x| x.abs() <= LANE_HALF_WIDTH_M) {
        CrossingLabel::Cross
    } else {
        CrossingLabel::NotCross
    }
}

/// Generate the full scenario suite in the annotation schema.
pub fn generate(params: &ScenarioParams) -> Result<Vec<AnnotationRecord>> {
    Ok(generate_detailed(params)?
        .into_iter()
        .map(|t| t.record)
        .collect())
}

/// Generate with the world-frame ground truth attached.
pub fn generate_detailed(params: &ScenarioParams) -> Result<Vec<SyntheticTrack>> {
    params.validate()?;
    let total = params.tracks_per_class * 2;
    let mut out = Vec::with_capacity(total);
    for idx in 0..total {
        let crossing = idx % 2 == 0;
        out.push(generate_track(params, idx, crossing)?);
    }
    Ok(out)
}

fn sample(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn generate_track(params: &ScenarioParams, idx: usize, crossing: bool) -> Result<SyntheticTrack> {
    let mut rng = crate::training::seed_stream(params.seed, TRACK_STREAM_BASE + idx as u64);
    let fps = params.fps;
    let focal = params.focal_px();
    let cx = params.image_width / 2.0;
    let cy = params.horizon_y();

    // fixed draw order; every branch draws the same way for replayability
    let side: f64 = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let frames = rng.random_range(params.frames_range.0..=params.frames_range.1);
    let depth0 = sample(&mut rng, params.depth_range);
    let ego_speed0 = sample(&mut rng, params.ego_speed_range);
    let ego_accel = rng.random_range(-1.0..1.0); // m/s^2
    let pan_amp = params.pan_amplitude * rng.random_range(0.4..1.0);
    let pan_period_s = rng.random_range(1.5..4.0);
    let pan_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let gait_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let cadence_hz = rng.random_range(1.4..2.0);
    let parallel_walker: bool = rng.random();

    let (walking, lateral_speed, event_frame, approach_speed, offset) = if crossing {
        let v = sample(&mut rng, params.lateral_speed_range);
        let event = ((frames as f64) * rng.random_range(0.55..0.85)) as usize;
        let mut va = sample(&mut rng, params.approach_speed_range);
        // keep the closing ego above 4 m depth so box area grows all track
        va = va.min((depth0 - 4.0) * fps / frames as f64);
        (true, v, Some(event), va, 0.0)
    } else {
        let off = rng.random_range(1.0..5.5);
        (parallel_walker, 0.0, None, 0.0, off)
    };

    // pan drift directed along the side's reference line so the disparity
    // features cancel it; magnitude modulated by the ego speed profile
    let y_min = params.nominal_y_min();
    let dir = (
        side * -(params.image_width / 2.0),
        y_min - params.image_height,
    );
    let norm = (dir.0 * dir.0 + dir.1 * dir.1).sqrt();
    let pan_dir = (dir.0 / norm, dir.1 / norm);
    let speed_cap = params.ego_speed_range.1.max(1.0);

    let mut world_lateral = Vec::with_capacity(frames);
    let mut depth = Vec::with_capacity(frames);
    let mut pan = Vec::with_capacity(frames);
    let mut speeds = Vec::with_capacity(frames);
    let mut boxes = Vec::with_capacity(frames);
    let mut keypoints17 = Vec::with_capacity(frames);

    for t in 0..frames {
        let secs = t as f64 / fps;
        let speed_kmh = (ego_speed0 + 3.6 * ego_accel * secs).max(0.0);
        speeds.push(speed_kmh);

        let x_world = if crossing {
            let event = event_frame.expect("crossing track") as f64;
            side * (LANE_HALF_WIDTH_M + lateral_speed * (event - t as f64) / fps)
        } else {
            side * (LANE_HALF_WIDTH_M + offset)
        };
        let z = (depth0 - approach_speed * secs).max(3.0);
        world_lateral.push(x_world);
        depth.push(z);

        let pan_mag =
            pan_amp * (std::f64::consts::TAU * secs / pan_period_s + pan_phase).sin()
                * (speed_kmh / speed_cap);
        let pan_xy = [pan_mag * pan_dir.0, pan_mag * pan_dir.1];
        pan.push(pan_xy);

        let clean_x = cx + focal * x_world / z + pan_xy[0];
        let clean_y = cy + focal * CENTER_DROP_M / z + pan_xy[1];
        let w = focal * PERSON_WIDTH_M / z;
        let h = focal * PERSON_HEIGHT_M / z;
        if clean_x < w / 2.0 || clean_x > params.image_width - w / 2.0 {
            return Err(SynthError::InfeasibleGeometry {
                track: idx,
                frame: t,
                x: clean_x,
            });
        }

        let mut noise = |scale: f64| -> f64 {
            let n: f64 = StandardNormal.sample(&mut rng);
            n * scale
        };
        let bx = clean_x + noise(params.noise_sigma);
        let by = clean_y + noise(params.noise_sigma);
        let bw = (w + noise(params.noise_sigma)).max(2.0);
        let bh = (h + noise(params.noise_sigma)).max(2.0);
        boxes.push([bx, by, bw, bh]);

        let phase = std::f64::consts::TAU * cadence_hz * secs + gait_phase;
        let joints = pose17(
            bx - bw / 2.0,
            by - bh / 2.0,
            bw,
            bh,
            walking.then_some(phase),
            params.noise_sigma,
            &mut rng,
        );
        keypoints17.push(joints);
    }

    let keypoints = augment_keypoints(&keypoints17).expect("17-joint template");
    let class_tag = if crossing { "cross" } else { "keep" };
    let record = AnnotationRecord {
        pedestrian_id: format!("synth_{class_tag}_{:04}", idx),
        video_id: format!("synth_video_{:02}", idx % 12),
        set_id: format!("set{:02}", 1 + idx % 6),
        frames: (0..frames as u32).collect(),
        boxes,
        keypoints: Some(keypoints),
        ego_speed: Some(speeds),
        ego_state: None,
        label: if crossing {
            CrossingLabel::Cross
        } else {
            CrossingLabel::NotCross
        },
        event_frame: event_frame.map(|e| e as u32),
        image_size: [params.image_width as u32, params.image_height as u32],
        fps,
    };
    Ok(SyntheticTrack {
        record,
        world_lateral,
        depth,
        pan,
        walking,
    })
}

/// Box-relative standing pose in (u, v) box fractions; the gait phase swings
/// limbs when present.
const POSE_TEMPLATE: [(f64, f64); 17] = [
    (0.50, 0.08), // nose
    (0.45, 0.06), // left eye
    (0.55, 0.06), // right eye
    (0.42, 0.08), // left ear
    (0.58, 0.08), // right ear
    (0.35, 0.22), // left shoulder
    (0.65, 0.22), // right shoulder
    (0.30, 0.38), // left elbow
    (0.70, 0.38), // right elbow
    (0.28, 0.52), // left wrist
    (0.72, 0.52), // right wrist
    (0.40, 0.52), // left hip
    (0.60, 0.52), // right hip
    (0.40, 0.72), // left knee
    (0.60, 0.72), // right knee
    (0.40, 0.95), // left ankle
    (0.60, 0.95), // right ankle
];

fn pose17(
    top_left_x: f64,
    top_left_y: f64,
    w: f64,
    h: f64,
    gait: Option<f64>,
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<[f64; 3]> {
    let swing = gait.map_or(0.0, f64::sin);
    let counter = gait.map_or(0.0, |p| (p + std::f64::consts::PI).sin());
    let mut joints = Vec::with_capacity(17);
    for (j, &(u0, v0)) in POSE_TEMPLATE.iter().enumerate() {
        let (mut u, v) = (u0, v0);
        match j {
            15 => u += 0.10 * swing,   // left ankle
            16 => u += 0.10 * counter, // right ankle
            13 => u += 0.05 * swing,   // left knee
            14 => u += 0.05 * counter, // right knee
            9 => u += 0.06 * counter,  // left wrist swings against left leg
            10 => u += 0.06 * swing,   // right wrist
            7 => u += 0.03 * counter,  // left elbow
            8 => u += 0.03 * swing,    // right elbow
            _ => {}
        }
        let nx: f64 = StandardNormal.sample(rng);
        let ny: f64 = StandardNormal.sample(rng);
        let nc: f64 = StandardNormal.sample(rng);
        let conf = (1.0 - 0.1 * nc.abs() * noise_sigma).clamp(0.5, 1.0);
        joints.push([
            top_left_x + u * w + nx * noise_sigma,
            top_left_y + v * h + ny * noise_sigma,
            conf,
        ]);
    }
    joints
}
