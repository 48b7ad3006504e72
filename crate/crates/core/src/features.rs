//! Raw input features derived from tracked bounding boxes, skeleton
//! keypoints, and ego-vehicle motion.
//!
//! The position features decouple true pedestrian lateral motion from
//! ego-induced image drift: instead of raw centers, each frame contributes
//! the change in its disparity to a fixed reference line. Because only
//! frame-to-frame differences are emitted, the line's intercept cancels
//! algebraically and the features depend on the line slope alone; the code
//! computes them directly from the slope so the cancellation is exact in
//! floating point as well.
//!
//! All functions here are pure and safe to call from any number of threads.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("empty track")]
    EmptyTrack,
    #[error("track length {boxes} does not match {what} length {got}")]
    LengthMismatch {
        what: &'static str,
        boxes: usize,
        got: usize,
    },
    #[error("non-positive box area {area} at frame {frame}")]
    BadArea { frame: usize, area: f64 },
    #[error("degenerate reference line: {reason}")]
    DegenerateLine { reason: String },
    #[error("expected {expected} joints, got {got}")]
    JointCount { expected: usize, got: usize },
    #[error("skeleton edge ({a}, {b}) out of range for {nodes} nodes")]
    EdgeOutOfRange { a: usize, b: usize, nodes: usize },
    #[error("invalid skeleton edge list line {line}: {content:?}")]
    BadEdgeLine { line: usize, content: String },
    #[error("fps must be positive, got {0}")]
    BadFps(f64),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

/// Number of skeleton joints the model consumes.
pub const JOINT_COUNT: usize = 20;
/// Joints delivered by COCO-style pose estimators before augmentation.
pub const COCO17_JOINT_COUNT: usize = 17;

/// Per-frame pedestrian bounding boxes: center coordinates plus size, in
/// image pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBoxTrack {
    /// (center x, center y) per frame.
    pub centers: Vec<(f64, f64)>,
    /// (width, height) per frame; both strictly positive.
    pub sizes: Vec<(f64, f64)>,
}

impl BoundingBoxTrack {
    pub fn new(centers: Vec<(f64, f64)>, sizes: Vec<(f64, f64)>) -> Result<Self> {
        if centers.is_empty() {
            return Err(FeatureError::EmptyTrack);
        }
        if centers.len() != sizes.len() {
            return Err(FeatureError::LengthMismatch {
                what: "sizes",
                boxes: centers.len(),
                got: sizes.len(),
            });
        }
        Ok(BoundingBoxTrack { centers, sizes })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn area(&self, frame: usize) -> f64 {
        let (w, h) = self.sizes[frame];
        w * h
    }

    /// Top-left corner of the box at a frame.
    pub fn top_left(&self, frame: usize) -> (f64, f64) {
        let (x, y) = self.centers[frame];
        let (w, h) = self.sizes[frame];
        (x - w / 2.0, y - h / 2.0)
    }
}

/// The two fixed image-space reference lines bounding the crossing region:
/// one from the bottom-left corner A=(0,H) up to B=(W/2, y_min), the other
/// from B down to the bottom-right corner C=(W,H).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLineConfig {
    pub image_width: f64,
    pub image_height: f64,
    /// Minimum box-center y over the training samples; the apex of the two
    /// lines.
    pub y_min: f64,
    /// dy/dx slope of the left line A-B (negative: y decreases rightward).
    pub left_slope: f64,
    /// dy/dx slope of the right line B-C (positive).
    pub right_slope: f64,
}

impl ReferenceLineConfig {
    /// Build the standard two-line geometry from the image size and the
    /// training-set minimum center y.
    pub fn from_image(image_width: f64, image_height: f64, y_min: f64) -> Result<Self> {
        if image_width <= 0.0 {
            return Err(FeatureError::DegenerateLine {
                reason: format!("image width {image_width} must be positive"),
            });
        }
        if y_min >= image_height {
            return Err(FeatureError::DegenerateLine {
                reason: format!("y_min {y_min} must lie above the bottom edge {image_height}"),
            });
        }
        let half = image_width / 2.0;
        Ok(ReferenceLineConfig {
            image_width,
            image_height,
            y_min,
            left_slope: (y_min - image_height) / half,
            right_slope: (image_height - y_min) / half,
        })
    }

    /// Explicit slopes, used by tests and by slope-robustness sweeps.
    pub fn from_slopes(
        image_width: f64,
        image_height: f64,
        left_slope: f64,
        right_slope: f64,
    ) -> Result<Self> {
        for (name, s) in [("left", left_slope), ("right", right_slope)] {
            if s == 0.0 || !s.is_finite() {
                return Err(FeatureError::DegenerateLine {
                    reason: format!("{name} slope {s} is horizontal or vertical"),
                });
            }
        }
        Ok(ReferenceLineConfig {
            image_width,
            image_height,
            y_min: 0.0,
            left_slope,
            right_slope,
        })
    }

    /// Slope of the line a pedestrian is measured against. The window's
    /// first-frame center picks the side once, so features stay continuous
    /// within a window.
    pub fn active_slope(&self, first_center_x: f64) -> f64 {
        if first_center_x < self.image_width / 2.0 {
            self.left_slope
        } else {
            self.right_slope
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, s) in [("left", self.left_slope), ("right", self.right_slope)] {
            if s == 0.0 || !s.is_finite() {
                return Err(FeatureError::DegenerateLine {
                    reason: format!("{name} slope {s} is horizontal or vertical"),
                });
            }
        }
        Ok(())
    }
}

/// Per-frame position-decoupled features: frame-differenced disparities to
/// the active reference line plus the scaled box-area ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdmFeatures {
    /// Rows of (d_dx, d_dy, area_ratio); row 0 is all zeros.
    pub rows: Vec<[f64; 3]>,
    pub alpha: f64,
}

/// Default area-ratio scaling factor.
pub const DEFAULT_ALPHA: f64 = 100.0;

/// Full positional feature block for one window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionFeatures {
    /// Displacement from frame 0, per frame.
    pub displacement: Vec<[f64; 2]>,
    /// Frame-to-frame velocity; row 0 is zero.
    pub velocity: Vec<[f64; 2]>,
    pub pdm: PdmFeatures,
}

/// Box-relative skeleton keypoints: per frame, `JOINT_COUNT` joints of
/// (x, y, confidence).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonTrack {
    pub frames: Vec<Vec<[f64; 3]>>,
}

/// Ego-vehicle motion over a window: either a speed sequence in km/h or a
/// categorical motion-state sequence, plus the constant window acceleration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoMotionTrack {
    pub speeds: Option<Vec<f64>>,
    pub state_ids: Option<Vec<usize>>,
    /// One global value replicated per frame.
    pub accel: Vec<f64>,
    pub fps: f64,
}

/// Displacement relative to the first frame: row t = (x_t - x_0, y_t - y_0).
pub fn compute_displacement(track: &BoundingBoxTrack) -> Result<Vec<[f64; 2]>> {
    if track.is_empty() {
        return Err(FeatureError::EmptyTrack);
    }
    let (x0, y0) = track.centers[0];
    Ok(track
        .centers
        .iter()
        .map(|&(x, y)| [x - x0, y - y0])
        .collect())
}

/// Frame-to-frame velocity: row t = (x_t - x_{t-1}, y_t - y_{t-1}); row 0 is
/// zero.
pub fn compute_velocity(track: &BoundingBoxTrack) -> Result<Vec<[f64; 2]>> {
    if track.is_empty() {
        return Err(FeatureError::EmptyTrack);
    }
    let mut out = vec![[0.0, 0.0]; track.len()];
    for t in 1..track.len() {
        let (x, y) = track.centers[t];
        let (px, py) = track.centers[t - 1];
        out[t] = [x - px, y - py];
    }
    Ok(out)
}

/// Position-decoupled features against the active reference line.
///
/// The per-frame disparity to a line of slope m is dx_t = x_t - x_line(y_t)
/// and dy_t = y_t - y_line(x_t); the emitted rows are the frame differences
/// (dx_t - dx_{t-1}, dy_t - dy_{t-1}), which reduce to
///   (x_t - x_{t-1}) - (y_t - y_{t-1}) / m   and
///   (y_t - y_{t-1}) - m (x_t - x_{t-1}).
/// The intercept never enters, so parallel translates of the line produce
/// bit-identical output. The third column is the scaled area ratio
/// (A_t / A_{t-1} - 1) * alpha.
pub fn compute_pdm(
    track: &BoundingBoxTrack,
    lines: &ReferenceLineConfig,
    alpha: f64,
) -> Result<PdmFeatures> {
    if track.is_empty() {
        return Err(FeatureError::EmptyTrack);
    }
    lines.validate()?;
    for t in 0..track.len() {
        let area = track.area(t);
        if area <= 0.0 {
            return Err(FeatureError::BadArea { frame: t, area });
        }
    }
    let slope = lines.active_slope(track.centers[0].0);
    let mut rows = vec![[0.0; 3]; track.len()];
    for t in 1..track.len() {
        let (x, y) = track.centers[t];
        let (px, py) = track.centers[t - 1];
        let dx = x - px;
        let dy = y - py;
        let ratio = (track.area(t) / track.area(t - 1) - 1.0) * alpha;
        rows[t] = [dx - dy / slope, dy - slope * dx, ratio];
    }
    Ok(PdmFeatures { rows, alpha })
}

/// All positional features for one window.
pub fn compute_position_features(
    track: &BoundingBoxTrack,
    lines: &ReferenceLineConfig,
    alpha: f64,
) -> Result<PositionFeatures> {
    Ok(PositionFeatures {
        displacement: compute_displacement(track)?,
        velocity: compute_velocity(track)?,
        pdm: compute_pdm(track, lines, alpha)?,
    })
}

/// Global window acceleration in m/s^2 from a km/h speed sequence, replicated
/// per frame: (s_last - s_first) * fps / (3.6 * T).
pub fn compute_ego_acceleration(speeds_kmh: &[f64], fps: f64) -> Result<Vec<f64>> {
    if speeds_kmh.is_empty() {
        return Err(FeatureError::EmptyTrack);
    }
    if fps <= 0.0 {
        return Err(FeatureError::BadFps(fps));
    }
    let t = speeds_kmh.len() as f64;
    let acc = (speeds_kmh[speeds_kmh.len() - 1] - speeds_kmh[0]) * fps / (3.6 * t);
    Ok(vec![acc; speeds_kmh.len()])
}

/// Rebase image-frame keypoints onto the box's top-left corner; confidence
/// passes through unchanged.
pub fn normalize_keypoints(
    raw: &[Vec<[f64; 3]>],
    track: &BoundingBoxTrack,
) -> Result<SkeletonTrack> {
    if raw.len() != track.len() {
        return Err(FeatureError::LengthMismatch {
            what: "keypoints",
            boxes: track.len(),
            got: raw.len(),
        });
    }
    let mut frames = Vec::with_capacity(raw.len());
    for (t, joints) in raw.iter().enumerate() {
        if joints.len() != JOINT_COUNT {
            return Err(FeatureError::JointCount {
                expected: JOINT_COUNT,
                got: joints.len(),
            });
        }
        let (tlx, tly) = track.top_left(t);
        frames.push(
            joints
                .iter()
                .map(|&[x, y, s]| [x - tlx, y - tly, s])
                .collect(),
        );
    }
    Ok(SkeletonTrack { frames })
}

// COCO-17 joint indices used by the augmentation.
const LEFT_SHOULDER: usize = 5;
const RIGHT_SHOULDER: usize = 6;
const LEFT_HIP: usize = 11;
const RIGHT_HIP: usize = 12;
/// Indices of the three synthetic joints appended after the COCO-17 set.
pub const NECK: usize = 17;
pub const HIP_CENTER: usize = 18;
pub const BODY_CENTER: usize = 19;

fn midpoint(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        (a[0] + b[0]) / 2.0,
        (a[1] + b[1]) / 2.0,
        (a[2] + b[2]) / 2.0,
    ]
}

/// Extend COCO-17 keypoints with neck, hip-center, and body-center joints,
/// each the average of its two parents (confidence included).
pub fn augment_keypoints(coco17: &[Vec<[f64; 3]>]) -> Result<Vec<Vec<[f64; 3]>>> {
    let mut out = Vec::with_capacity(coco17.len());
    for joints in coco17 {
        if joints.len() != COCO17_JOINT_COUNT {
            return Err(FeatureError::JointCount {
                expected: COCO17_JOINT_COUNT,
                got: joints.len(),
            });
        }
        let mut frame = joints.clone();
        let neck = midpoint(joints[LEFT_SHOULDER], joints[RIGHT_SHOULDER]);
        let hip_center = midpoint(joints[LEFT_HIP], joints[RIGHT_HIP]);
        let body_center = midpoint(neck, hip_center);
        frame.push(neck);
        frame.push(hip_center);
        frame.push(body_center);
        out.push(frame);
    }
    Ok(out)
}

/// Joint connectivity of the 20-node skeleton graph with its normalized
/// adjacency cached.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonGraph {
    pub nodes: usize,
    /// Symmetric 0/1 adjacency with self-loops.
    pub adjacency: Vec<f64>,
    /// Node degrees (row sums of the adjacency).
    pub degrees: Vec<f64>,
    /// D^(-1/2) A D^(-1/2), row-major `nodes x nodes`.
    pub normalized: Vec<f64>,
}

impl SkeletonGraph {
    pub fn adjacency_at(&self, i: usize, j: usize) -> f64 {
        self.adjacency[i * self.nodes + j]
    }

    pub fn normalized_at(&self, i: usize, j: usize) -> f64 {
        self.normalized[i * self.nodes + j]
    }
}

/// Symmetrize an edge list, add self-loops, and degree-normalize.
pub fn build_normalized_adjacency(edges: &[(usize, usize)], nodes: usize) -> Result<SkeletonGraph> {
    let mut adjacency = vec![0.0; nodes * nodes];
    for i in 0..nodes {
        adjacency[i * nodes + i] = 1.0;
    }
    for &(a, b) in edges {
        if a >= nodes || b >= nodes {
            return Err(FeatureError::EdgeOutOfRange { a, b, nodes });
        }
        adjacency[a * nodes + b] = 1.0;
        adjacency[b * nodes + a] = 1.0;
    }
    let degrees: Vec<f64> = (0..nodes)
        .map(|i| adjacency[i * nodes..(i + 1) * nodes].iter().sum())
        .collect();
    let inv_sqrt: Vec<f64> = degrees.iter().map(|&d| 1.0 / d.sqrt()).collect();
    let mut normalized = vec![0.0; nodes * nodes];
    for i in 0..nodes {
        for j in 0..nodes {
            normalized[i * nodes + j] = adjacency[i * nodes + j] * inv_sqrt[i] * inv_sqrt[j];
        }
    }
    Ok(SkeletonGraph {
        nodes,
        adjacency,
        degrees,
        normalized,
    })
}

/// Default edge list shipped with the crate: COCO-17 limb connectivity plus
/// the wiring of the three synthetic joints. One `i j` pair per line,
/// 0-indexed; `#` starts a comment.
pub const DEFAULT_EDGE_LIST: &str = include_str!("../assets/skeleton_edges.txt");

/// Human-readable joint-order manifest for the 20-joint scheme.
pub const JOINT_MANIFEST: &str = include_str!("../assets/joint_order.txt");

/// Parse a skeleton edge-list file (the format of [`DEFAULT_EDGE_LIST`]).
pub fn parse_edge_list(text: &str) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |s: Option<&str>| -> Option<usize> { s.and_then(|v| v.parse().ok()) };
        match (parse(it.next()), parse(it.next()), it.next()) {
            (Some(a), Some(b), None) => edges.push((a, b)),
            _ => {
                return Err(FeatureError::BadEdgeLine {
                    line: idx + 1,
                    content: raw.to_string(),
                })
            }
        }
    }
    Ok(edges)
}

/// The default 20-node skeleton graph.
pub fn default_skeleton_graph() -> SkeletonGraph {
    let edges = parse_edge_list(DEFAULT_EDGE_LIST).expect("bundled edge list is valid");
    build_normalized_adjacency(&edges, JOINT_COUNT).expect("bundled edge list is in range")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(centers: &[(f64, f64)]) -> BoundingBoxTrack {
        BoundingBoxTrack::new(centers.to_vec(), vec![(10.0, 20.0); centers.len()]).unwrap()
    }

    #[test]
    fn displacement_basics() {
        let t = track(&[(0.0, 0.0), (3.0, 4.0)]);
        let d = compute_displacement(&t).unwrap();
        assert_eq!(d, vec![[0.0, 0.0], [3.0, 4.0]]);

        let constant = track(&[(5.0, 5.0); 4]);
        assert!(compute_displacement(&constant)
            .unwrap()
            .iter()
            .all(|r| *r == [0.0, 0.0]));
    }

    #[test]
    fn velocity_basics_and_telescoping() {
        let t = track(&[(0.0, 0.0), (3.0, 4.0), (3.0, 5.0)]);
        let v = compute_velocity(&t).unwrap();
        assert_eq!(v, vec![[0.0, 0.0], [3.0, 4.0], [0.0, 1.0]]);

        let d = compute_displacement(&t).unwrap();
        let sum: [f64; 2] = v.iter().fold([0.0, 0.0], |a, r| [a[0] + r[0], a[1] + r[1]]);
        assert_eq!(sum, *d.last().unwrap());

        let constant = track(&[(2.0, 2.0); 3]);
        assert!(compute_velocity(&constant)
            .unwrap()
            .iter()
            .all(|r| *r == [0.0, 0.0]));
    }

    #[test]
    fn pdm_hand_case_on_unit_slope() {
        // line y = x (slope 1); centers (10,4) -> (13,6); constant area
        let lines = ReferenceLineConfig::from_slopes(100.0, 100.0, 1.0, 1.0).unwrap();
        let t = track(&[(10.0, 4.0), (13.0, 6.0)]);
        let p = compute_pdm(&t, &lines, DEFAULT_ALPHA).unwrap();
        assert_eq!(p.rows[0], [0.0, 0.0, 0.0]);
        assert_eq!(p.rows[1][0], 1.0);
        assert_eq!(p.rows[1][1], -1.0);
        assert_eq!(p.rows[1][2], 0.0);
    }

    #[test]
    fn area_ratio_cases() {
        let lines = ReferenceLineConfig::from_image(1920.0, 1080.0, 400.0).unwrap();
        let mut t = track(&[(10.0, 500.0), (11.0, 500.0)]);
        t.sizes = vec![(10.0, 10.0), (10.0, 10.0)];
        assert_eq!(compute_pdm(&t, &lines, 100.0).unwrap().rows[1][2], 0.0);

        // A_t = 1.02 * A_{t-1} -> ratio 2.0
        t.sizes = vec![(10.0, 10.0), (10.2, 10.0)];
        let r = compute_pdm(&t, &lines, 100.0).unwrap().rows[1][2];
        assert!((r - 2.0).abs() < 1e-9, "{r}");
    }

    #[test]
    fn zero_area_errors_with_frame_index() {
        let lines = ReferenceLineConfig::from_image(1920.0, 1080.0, 400.0).unwrap();
        let mut t = track(&[(10.0, 500.0), (11.0, 500.0)]);
        t.sizes[1] = (0.0, 5.0);
        match compute_pdm(&t, &lines, 100.0) {
            Err(FeatureError::BadArea { frame: 1, .. }) => {}
            other => panic!("expected BadArea at frame 1, got {other:?}"),
        }
    }

    #[test]
    fn degenerate_lines_rejected() {
        assert!(ReferenceLineConfig::from_image(0.0, 1080.0, 400.0).is_err());
        assert!(ReferenceLineConfig::from_image(1920.0, 1080.0, 1080.0).is_err());
        assert!(ReferenceLineConfig::from_slopes(10.0, 10.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn line_side_selection_uses_first_frame() {
        let lines = ReferenceLineConfig::from_image(1920.0, 1080.0, 400.0).unwrap();
        assert_eq!(lines.active_slope(100.0), lines.left_slope);
        assert_eq!(lines.active_slope(1800.0), lines.right_slope);
        assert!(lines.left_slope < 0.0 && lines.right_slope > 0.0);
    }

    #[test]
    fn ego_acceleration_cases() {
        assert!(compute_ego_acceleration(&[30.0; 16], 30.0)
            .unwrap()
            .iter()
            .all(|&a| a == 0.0));

        // 0 -> 36 km/h over 16 frames at 30 fps
        let mut speeds = vec![0.0; 16];
        speeds[15] = 36.0;
        let acc = compute_ego_acceleration(&speeds, 30.0).unwrap();
        assert_eq!(acc.len(), 16);
        assert!((acc[0] - 18.75).abs() < 1e-12, "{}", acc[0]);

        let mut neg = vec![36.0; 16];
        neg[15] = 0.0;
        let acc_neg = compute_ego_acceleration(&neg, 30.0).unwrap();
        assert_eq!(acc_neg[0], -acc[0]);
    }

    #[test]
    fn keypoint_normalization_cases() {
        // box center (50,50), size 20x40 -> top-left (40,30)
        let t = BoundingBoxTrack::new(vec![(50.0, 50.0)], vec![(20.0, 40.0)]).unwrap();
        let raw = vec![vec![[50.0, 50.0, 1.0]; JOINT_COUNT]];
        let s = normalize_keypoints(&raw, &t).unwrap();
        assert_eq!(s.frames[0][0], [10.0, 20.0, 1.0]);

        // keypoint exactly at the top-left corner maps to the origin
        let raw = vec![vec![[40.0, 30.0, 0.5]; JOINT_COUNT]];
        let s = normalize_keypoints(&raw, &t).unwrap();
        assert_eq!(s.frames[0][0], [0.0, 0.0, 0.5]);

        // translating box and keypoints together leaves the output unchanged
        let t2 = BoundingBoxTrack::new(vec![(57.0, 41.0)], vec![(20.0, 40.0)]).unwrap();
        let raw2 = vec![vec![[57.0, 41.0, 1.0]; JOINT_COUNT]];
        let s1 = normalize_keypoints(&vec![vec![[50.0, 50.0, 1.0]; JOINT_COUNT]], &t).unwrap();
        let s2 = normalize_keypoints(&raw2, &t2).unwrap();
        assert_eq!(s1.frames, s2.frames);
    }

    #[test]
    fn augmentation_appends_three_mean_joints() {
        let mut joints = vec![[0.0, 0.0, 1.0]; COCO17_JOINT_COUNT];
        joints[LEFT_SHOULDER] = [2.0, 2.0, 1.0];
        joints[RIGHT_SHOULDER] = [4.0, 2.0, 0.5];
        let out = augment_keypoints(&[joints]).unwrap();
        assert_eq!(out[0].len(), JOINT_COUNT);
        assert_eq!(out[0][NECK], [3.0, 2.0, 0.75]);

        // identical parents -> synthetic joint equals them
        let same = vec![[7.0, 8.0, 0.9]; COCO17_JOINT_COUNT];
        let out = augment_keypoints(&[same]).unwrap();
        assert_eq!(out[0][NECK], [7.0, 8.0, 0.9]);
        assert_eq!(out[0][HIP_CENTER], [7.0, 8.0, 0.9]);
        assert_eq!(out[0][BODY_CENTER], [7.0, 8.0, 0.9]);

        assert!(augment_keypoints(&[vec![[0.0; 3]; 16]]).is_err());
    }

    #[test]
    fn adjacency_single_node() {
        let g = build_normalized_adjacency(&[], 1).unwrap();
        assert_eq!(g.normalized, vec![1.0]);
    }

    #[test]
    fn adjacency_two_nodes_hand_case() {
        let g = build_normalized_adjacency(&[(0, 1)], 2).unwrap();
        assert_eq!(g.adjacency, vec![1.0, 1.0, 1.0, 1.0]);
        assert_eq!(g.degrees, vec![2.0, 2.0]);
        for v in &g.normalized {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn adjacency_rejects_out_of_range() {
        assert!(matches!(
            build_normalized_adjacency(&[(0, 5)], 3),
            Err(FeatureError::EdgeOutOfRange { .. })
        ));
    }

    #[test]
    fn default_graph_is_symmetric_connected_and_contractive() {
        let g = default_skeleton_graph();
        assert_eq!(g.nodes, JOINT_COUNT);
        for i in 0..g.nodes {
            assert_eq!(g.adjacency_at(i, i), 1.0);
            for j in 0..g.nodes {
                assert_eq!(g.normalized_at(i, j), g.normalized_at(j, i));
            }
        }
        // connectivity: depth-first search reaches every joint
        let mut seen = vec![false; g.nodes];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..g.nodes {
                if g.adjacency_at(i, j) > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        assert!(seen.iter().all(|&s| s), "skeleton graph is disconnected");

        // spectral radius of the normalized adjacency is at most 1
        assert!(spectral_radius(&g.normalized, g.nodes) <= 1.0 + 1e-9);
    }

    pub(crate) fn spectral_radius(m: &[f64], n: usize) -> f64 {
        let mut v = vec![1.0 / (n as f64).sqrt(); n];
        let mut lambda = 0.0;
        for _ in 0..200 {
            let mut next = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    next[i] += m[i * n + j] * v[j];
                }
            }
            lambda = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if lambda == 0.0 {
                return 0.0;
            }
            for x in &mut next {
                *x /= lambda;
            }
            v = next;
        }
        lambda
    }

    #[test]
    fn joint_manifest_lists_twenty_joints() {
        let named_lines = JOINT_MANIFEST
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .count();
        assert_eq!(named_lines, JOINT_COUNT);
    }
}
