//! Annotation ingestion, sliding-window sampling with time-to-event
//! filtering, and split generation.
//!
//! Annotation files are line-delimited JSON: a header line carrying the
//! schema name and version, then one track record per line. The format is
//! documented in the repository README and kept diffable on purpose.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{augment_keypoints, BoundingBoxTrack, COCO17_JOINT_COUNT, JOINT_COUNT};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("missing schema header line")]
    MissingHeader,
    #[error("unsupported schema {name:?} version {version}")]
    BadSchema { name: String, version: u32 },
    #[error("track {id} line {line}: {reason}")]
    Invalid {
        id: String,
        line: usize,
        reason: String,
    },
    #[error("window length {t} exceeds track length {len}")]
    WindowTooLong { t: usize, len: usize },
    #[error("invalid split: {0}")]
    BadSplit(String),
    #[error("unknown ego state {symbol:?}; vocabulary {vocabulary:?}")]
    UnknownState {
        symbol: String,
        vocabulary: Vec<String>,
    },
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub const SCHEMA_NAME: &str = "pcip-annotations";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossingLabel {
    NotCross,
    Cross,
}

impl CrossingLabel {
    pub fn as_class(self) -> usize {
        match self {
            CrossingLabel::NotCross => 0,
            CrossingLabel::Cross => 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SchemaHeader {
    schema: String,
    version: u32,
}

/// One pedestrian track with everything the pipeline consumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub pedestrian_id: String,
    pub video_id: String,
    pub set_id: String,
    /// Source frame numbers, strictly increasing.
    pub frames: Vec<u32>,
    /// Per-frame (center x, center y, width, height).
    pub boxes: Vec<[f64; 4]>,
    /// Per-frame keypoints in image coordinates, 17 or 20 joints of
    /// (x, y, confidence); 17-joint input is augmented to 20 on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<Vec<Vec<[f64; 3]>>>,
    /// Ego speed in km/h per frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ego_speed: Option<Vec<f64>>,
    /// Categorical ego motion state per frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ego_state: Option<Vec<String>>,
    pub label: CrossingLabel,
    /// Frame number at which the crossing starts; required for crossing
    /// tracks, absent otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_frame: Option<u32>,
    /// (width, height) of the source image in pixels.
    pub image_size: [u32; 2],
    pub fps: f64,
}

impl AnnotationRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn bounding_boxes(&self) -> crate::features::Result<BoundingBoxTrack> {
        BoundingBoxTrack::new(
            self.boxes.iter().map(|b| (b[0], b[1])).collect(),
            self.boxes.iter().map(|b| (b[2], b[3])).collect(),
        )
    }

    fn validate(&self, line: usize) -> Result<()> {
        let fail = |reason: String| {
            Err(DataError::Invalid {
                id: self.pedestrian_id.clone(),
                line,
                reason,
            })
        };
        if self.frames.is_empty() {
            return fail("empty track".into());
        }
        if !self.frames.windows(2).all(|w| w[0] < w[1]) {
            return fail("frames not strictly increasing".into());
        }
        if self.boxes.len() != self.frames.len() {
            return fail(format!(
                "{} boxes for {} frames",
                self.boxes.len(),
                self.frames.len()
            ));
        }
        if let Some(bad) = self.boxes.iter().position(|b| b[2] <= 0.0 || b[3] <= 0.0) {
            return fail(format!("non-positive box size at index {bad}"));
        }
        if self.label == CrossingLabel::Cross && self.event_frame.is_none() {
            return fail("crossing track without an event frame".into());
        }
        if let Some(kp) = &self.keypoints {
            if kp.len() != self.frames.len() {
                return fail(format!(
                    "{} keypoint frames for {} frames",
                    kp.len(),
                    self.frames.len()
                ));
            }
            for (i, joints) in kp.iter().enumerate() {
                if joints.len() != JOINT_COUNT && joints.len() != COCO17_JOINT_COUNT {
                    return fail(format!(
                        "frame {i} has {} joints; expected {COCO17_JOINT_COUNT} or {JOINT_COUNT}",
                        joints.len()
                    ));
                }
            }
        }
        if let Some(sp) = &self.ego_speed {
            if sp.len() != self.frames.len() {
                return fail(format!("{} speeds for {} frames", sp.len(), self.frames.len()));
            }
        }
        if let Some(st) = &self.ego_state {
            if st.len() != self.frames.len() {
                return fail(format!(
                    "{} ego states for {} frames",
                    st.len(),
                    self.frames.len()
                ));
            }
        }
        if self.ego_speed.is_none() && self.ego_state.is_none() {
            return fail("record carries neither ego speeds nor ego states".into());
        }
        if self.fps <= 0.0 {
            return fail(format!("non-positive fps {}", self.fps));
        }
        Ok(())
    }
}

/// Parse and validate an annotation file; 17-joint keypoints are augmented to
/// the 20-joint scheme here so downstream code sees one layout.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines.next().ok_or(DataError::MissingHeader)??;
    let header: SchemaHeader = serde_json::from_str(&header_line)
        .map_err(|source| DataError::Parse { line: 1, source })?;
    if header.schema != SCHEMA_NAME || header.version != SCHEMA_VERSION {
        return Err(DataError::BadSchema {
            name: header.schema,
            version: header.version,
        });
    }
    let mut records = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let mut record: AnnotationRecord = serde_json::from_str(&text)
            .map_err(|source| DataError::Parse { line: line_no, source })?;
        record.validate(line_no)?;
        if let Some(kp) = &record.keypoints {
            if kp.first().is_some_and(|j| j.len() == COCO17_JOINT_COUNT) {
                record.keypoints = Some(augment_keypoints(kp)?);
            }
        }
        records.push(record);
    }
    Ok(records)
}

/// Write records in the annotation schema.
pub fn save_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = SchemaHeader {
        schema: SCHEMA_NAME.into(),
        version: SCHEMA_VERSION,
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header encodes"))?;
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r).expect("record encodes"))?;
    }
    Ok(())
}

/// One sampled observation window over a record, by frame index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSample {
    /// Index of the first frame (inclusive).
    pub start: usize,
    /// Index of the last frame (inclusive); `end - start + 1 == t`.
    pub end: usize,
    /// Event frame minus window-end frame, in frames; None for
    /// never-crossing tracks.
    pub tte: Option<i64>,
}

/// Inclusive time-to-event window, in frames.
pub type TteRange = (i64, i64);

/// Enumerate observation windows of length `t`.
///
/// The stride is `floor(t * (1 - overlap))` with a minimum of 1. Enumeration
/// anchors at the earliest frame index with a full history that also passes
/// the time-to-event filter, then advances by the stride. Crossing tracks
/// keep only windows whose time-to-event lies inside `tte_range`;
/// never-crossing tracks keep every full window.
pub fn sample_windows(
    record: &AnnotationRecord,
    t: usize,
    tte_range: TteRange,
    overlap: f64,
) -> Result<Vec<WindowSample>> {
    assert!(
        (0.0..1.0).contains(&overlap),
        "overlap must be in [0, 1), got {overlap}"
    );
    if t == 0 || t > record.len() {
        return Err(DataError::WindowTooLong {
            t,
            len: record.len(),
        });
    }
    let stride = (((t as f64) * (1.0 - overlap)).floor() as usize).max(1);
    let last = record.len() - 1;
    let (lo, hi) = tte_range;
    let mut out = Vec::new();
    match (record.label, record.event_frame) {
        (CrossingLabel::Cross, Some(event)) => {
            let tte_at = |end: usize| i64::from(event) - i64::from(record.frames[end]);
            // earliest end index with full history and tte <= hi
            let mut anchor = t - 1;
            while anchor <= last && tte_at(anchor) > hi {
                anchor += 1;
            }
            let mut end = anchor;
            while end <= last {
                let tte = tte_at(end);
                if tte < lo {
                    break;
                }
                if tte <= hi {
                    out.push(WindowSample {
                        start: end + 1 - t,
                        end,
                        tte: Some(tte),
                    });
                }
                end += stride;
            }
        }
        _ => {
            let mut end = t - 1;
            while end <= last {
                out.push(WindowSample {
                    start: end + 1 - t,
                    end,
                    tte: None,
                });
                end += stride;
            }
        }
    }
    Ok(out)
}

/// Disjoint partition of pedestrian ids into train/val/test.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn part_of(&self, id: &str) -> Option<&'static str> {
        if self.train.iter().any(|x| x == id) {
            Some("train")
        } else if self.val.iter().any(|x| x == id) {
            Some("val")
        } else if self.test.iter().any(|x| x == id) {
            Some("test")
        } else {
            None
        }
    }
}

fn unique_ids(records: &[AnnotationRecord]) -> Vec<String> {
    let set: BTreeSet<&str> = records.iter().map(|r| r.pedestrian_id.as_str()).collect();
    set.into_iter().map(String::from).collect()
}

/// Allocate integer part sizes for `n` items: floors first, then give the
/// remainder to the parts with the largest fractional shares (ties resolved
/// by part order).
fn apportion(n: usize, ratios: &[f64]) -> Vec<usize> {
    let mut sizes: Vec<usize> = ratios
        .iter()
        .map(|r| (n as f64 * r).floor() as usize)
        .collect();
    let assigned: usize = sizes.iter().sum();
    let mut fracs: Vec<(usize, f64)> = ratios
        .iter()
        .enumerate()
        .map(|(i, r)| (i, n as f64 * r - sizes[i] as f64))
        .collect();
    fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..(n - assigned) {
        sizes[fracs[k % fracs.len()].0] += 1;
    }
    sizes
}

/// Seeded shuffled partition of pedestrian ids by ratio.
pub fn split_by_id(
    records: &[AnnotationRecord],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitSpec> {
    let (tr, va, te) = ratios;
    let sum = tr + va + te;
    if tr <= 0.0 || va < 0.0 || te < 0.0 || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::BadSplit(format!(
            "ratios {ratios:?} must be non-negative, train > 0, and sum to 1"
        )));
    }
    let mut ids = unique_ids(records);
    let mut rng = crate::training::seed_stream(seed, crate::training::STREAM_SPLIT);
    ids.shuffle(&mut rng);
    let sizes = apportion(ids.len(), &[tr, va, te]);
    let val_end = sizes[0] + sizes[1];
    Ok(SplitSpec {
        test: ids.split_off(val_end),
        val: ids.split_off(sizes[0]),
        train: ids,
        seed,
    })
}

/// Partition records by video-set label.
pub fn split_by_set(
    records: &[AnnotationRecord],
    train_sets: &[String],
    val_sets: &[String],
    test_sets: &[String],
) -> Result<SplitSpec> {
    if train_sets.is_empty() || val_sets.is_empty() || test_sets.is_empty() {
        return Err(DataError::BadSplit(
            "every part needs at least one video set".into(),
        ));
    }
    let known: BTreeSet<&str> = records.iter().map(|r| r.set_id.as_str()).collect();
    for s in train_sets.iter().chain(val_sets).chain(test_sets) {
        if !known.contains(s.as_str()) {
            return Err(DataError::BadSplit(format!("unknown video set {s:?}")));
        }
    }
    for (a, b) in [
        (train_sets, val_sets),
        (train_sets, test_sets),
        (val_sets, test_sets),
    ] {
        if a.iter().any(|s| b.contains(s)) {
            return Err(DataError::BadSplit(
                "video sets overlap between parts".into(),
            ));
        }
    }
    let ids_in = |sets: &[String]| -> Vec<String> {
        let set: BTreeSet<&str> = records
            .iter()
            .filter(|r| sets.contains(&r.set_id))
            .map(|r| r.pedestrian_id.as_str())
            .collect();
        set.into_iter().map(String::from).collect()
    };
    Ok(SplitSpec {
        train: ids_in(train_sets),
        val: ids_in(val_sets),
        test: ids_in(test_sets),
        seed: 0,
    })
}

/// Shuffle ids into `k` near-equal folds; iteration i tests on fold i and
/// trains on the remaining k-1 folds (no validation part).
pub fn kfold_split(records: &[AnnotationRecord], k: usize, seed: u64) -> Result<Vec<SplitSpec>> {
    let mut ids = unique_ids(records);
    if k < 2 {
        return Err(DataError::BadSplit(format!("k must be at least 2, got {k}")));
    }
    if k > ids.len() {
        return Err(DataError::BadSplit(format!(
            "k = {k} exceeds the {} distinct pedestrian ids",
            ids.len()
        )));
    }
    let mut rng = crate::training::seed_stream(seed, crate::training::STREAM_SPLIT);
    ids.shuffle(&mut rng);
    let mut folds: Vec<Vec<String>> = vec![Vec::new(); k];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok((0..k)
        .map(|i| SplitSpec {
            train: folds
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .flat_map(|(_, f)| f.iter().cloned())
                .collect(),
            val: Vec::new(),
            test: folds[i].clone(),
            seed,
        })
        .collect())
}

/// One-hot encoding of a categorical ego state over a fixed vocabulary.
pub fn ego_state_onehot(symbol: &str, vocabulary: &[String]) -> Result<Vec<f64>> {
    let idx = vocabulary
        .iter()
        .position(|v| v == symbol)
        .ok_or_else(|| DataError::UnknownState {
            symbol: symbol.to_string(),
            vocabulary: vocabulary.to_vec(),
        })?;
    let mut v = vec![0.0; vocabulary.len()];
    v[idx] = 1.0;
    Ok(v)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn record(
        id: &str,
        set: &str,
        len: usize,
        label: CrossingLabel,
        event: Option<u32>,
    ) -> AnnotationRecord {
        AnnotationRecord {
            pedestrian_id: id.into(),
            video_id: format!("video_{set}"),
            set_id: set.into(),
            frames: (0..len as u32).collect(),
            boxes: (0..len)
                .map(|i| [100.0 + i as f64, 200.0, 30.0, 60.0])
                .collect(),
            keypoints: None,
            ego_speed: Some(vec![20.0; len]),
            ego_state: None,
            label,
            event_frame: event,
            image_size: [1920, 1080],
            fps: 30.0,
        }
    }

    #[test]
    fn roundtrip_fixture_of_three_tracks() {
        let dir = std::env::temp_dir().join("pcip_data_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("three.jsonl");
        let records = vec![
            record("ped_1", "set01", 40, CrossingLabel::Cross, Some(35)),
            record("ped_2", "set01", 50, CrossingLabel::NotCross, None),
            record("ped_3", "set02", 60, CrossingLabel::Cross, Some(50)),
        ];
        save_annotations(&path, &records).unwrap();
        let loaded = load_annotations(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded, records);
    }

    #[test]
    fn load_rejects_non_increasing_frames() {
        let dir = std::env::temp_dir().join("pcip_data_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad_frames.jsonl");
        let mut r = record("ped", "set01", 10, CrossingLabel::NotCross, None);
        r.frames[5] = r.frames[4];
        save_annotations(&path, &[r]).unwrap();
        match load_annotations(&path) {
            Err(DataError::Invalid { line: 2, reason, .. }) => {
                assert!(reason.contains("increasing"), "{reason}")
            }
            other => panic!("expected invalid record, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_cross_without_event() {
        let dir = std::env::temp_dir().join("pcip_data_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("no_event.jsonl");
        let r = record("ped", "set01", 10, CrossingLabel::Cross, None);
        save_annotations(&path, &[r]).unwrap();
        assert!(matches!(
            load_annotations(&path),
            Err(DataError::Invalid { .. })
        ));
    }

    #[test]
    fn seventeen_joint_keypoints_are_augmented_on_load() {
        let dir = std::env::temp_dir().join("pcip_data_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("kp17.jsonl");
        let mut r = record("ped", "set01", 3, CrossingLabel::NotCross, None);
        r.keypoints = Some(vec![vec![[1.0, 2.0, 0.9]; 17]; 3]);
        save_annotations(&path, &[r]).unwrap();
        let loaded = load_annotations(&path).unwrap();
        let kp = loaded[0].keypoints.as_ref().unwrap();
        assert!(kp.iter().all(|j| j.len() == JOINT_COUNT));
    }

    #[test]
    fn worked_window_example() {
        // 100-frame track, event at frame 90, T=16, tte in [30, 60],
        // overlap 0.6 -> stride 6; expect end frames 30..60 step 6.
        let r = record("ped", "set01", 100, CrossingLabel::Cross, Some(90));
        let windows = sample_windows(&r, 16, (30, 60), 0.6).unwrap();
        let ends: Vec<usize> = windows.iter().map(|w| w.end).collect();
        assert_eq!(ends, vec![30, 36, 42, 48, 54, 60]);
        assert_eq!(windows.len(), 6);
        assert!(windows
            .iter()
            .all(|w| (30..=60).contains(&w.tte.unwrap()) && w.end - w.start == 15));
    }

    #[test]
    fn zero_overlap_gives_disjoint_windows() {
        let r = record("ped", "set01", 64, CrossingLabel::NotCross, None);
        let windows = sample_windows(&r, 16, (30, 60), 0.0).unwrap();
        let ends: Vec<usize> = windows.iter().map(|w| w.end).collect();
        assert_eq!(ends, vec![15, 31, 47, 63]);
    }

    #[test]
    fn tte_zero_keeps_only_the_event_window() {
        let r = record("ped", "set01", 100, CrossingLabel::Cross, Some(90));
        let windows = sample_windows(&r, 16, (0, 0), 0.6).unwrap();
        assert_eq!(windows.len(), 1);
        assert_eq!(windows[0].end, 90);
        assert_eq!(windows[0].tte, Some(0));
    }

    #[test]
    fn window_longer_than_track_errors() {
        let r = record("ped", "set01", 10, CrossingLabel::NotCross, None);
        assert!(matches!(
            sample_windows(&r, 16, (30, 60), 0.6),
            Err(DataError::WindowTooLong { t: 16, len: 10 })
        ));
    }

    fn ten_id_records() -> Vec<AnnotationRecord> {
        (0..10)
            .map(|i| {
                record(
                    &format!("ped_{i}"),
                    if i < 5 { "set01" } else { "set03" },
                    40,
                    CrossingLabel::NotCross,
                    None,
                )
            })
            .collect()
    }

    #[test]
    fn id_split_sizes_and_determinism() {
        let records = ten_id_records();
        let s = split_by_id(&records, (0.5, 0.1, 0.4), 7).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (5, 1, 4));
        assert_eq!(s, split_by_id(&records, (0.5, 0.1, 0.4), 7).unwrap());

        let mut all: Vec<&String> = s.train.iter().chain(&s.val).chain(&s.test).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 10);
    }

    #[test]
    fn set_split_partitions_by_set() {
        let records = ten_id_records();
        let s = split_by_set(
            &records,
            &["set01".into()],
            &["set03".into()],
            &["set03".into()],
        );
        assert!(s.is_err(), "overlapping sets must be rejected");

        let mut records = records;
        records.push(record("ped_v", "set05", 40, CrossingLabel::NotCross, None));
        let s = split_by_set(
            &records,
            &["set01".into()],
            &["set05".into()],
            &["set03".into()],
        )
        .unwrap();
        assert!(s.test.iter().all(|id| {
            records
                .iter()
                .find(|r| &r.pedestrian_id == id)
                .unwrap()
                .set_id
                == "set03"
        }));
        for id in &s.train {
            assert_eq!(s.part_of(id), Some("train"));
        }

        assert!(split_by_set(&records, &["set01".into()], &[], &["set03".into()]).is_err());
        assert!(split_by_set(
            &records,
            &["set01".into()],
            &["nope".into()],
            &["set03".into()]
        )
        .is_err());
    }

    #[test]
    fn kfold_properties() {
        let records = ten_id_records();
        let folds = kfold_split(&records, 5, 3).unwrap();
        assert_eq!(folds.len(), 5);
        for f in &folds {
            assert_eq!(f.test.len(), 2);
            assert_eq!(f.train.len(), 8);
            assert!(f.val.is_empty());
        }
        // each id lands in exactly one test fold
        let mut seen: Vec<&String> = folds.iter().flat_map(|f| f.test.iter()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 10);
        assert_eq!(folds, kfold_split(&records, 5, 3).unwrap());
        assert!(kfold_split(&records, 11, 3).is_err());
    }

    #[test]
    fn onehot_cases() {
        let vocab: Vec<String> = ["stopped", "slowing", "steady", "speeding", "turning"]
            .map(String::from)
            .to_vec();
        assert_eq!(
            ego_state_onehot("stopped", &vocab).unwrap(),
            vec![1.0, 0.0, 0.0, 0.0, 0.0]
        );
        let a = ego_state_onehot("slowing", &vocab).unwrap();
        let b = ego_state_onehot("turning", &vocab).unwrap();
        assert_eq!(a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>(), 0.0);
        assert!(matches!(
            ego_state_onehot("flying", &vocab),
            Err(DataError::UnknownState { .. })
        ));
    }
}
