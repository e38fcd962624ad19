//! Feature tracks, pinhole camera geometry, and the track selection rules
//! that feed the closed-form solver.

mod fundamental;

pub use fundamental::{estimate_fundamental, ransac_fundamental_filter, sampson_distance};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;

/// Pinhole intrinsics for undistorted images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let cam = CameraModel {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// EuRoC cam0 intrinsics after undistortion.
    pub fn euroc() -> Self {
        CameraModel {
            fx: 458.654,
            fy: 457.296,
            cx: 367.215,
            cy: 248.375,
            width: 752,
            height: 480,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !self.contains(&Vector2::new(self.cx, self.cy)) {
            return Err(Error::InvalidArgument(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < self.width as f64
            && pixel.y < self.height as f64
    }

    pub fn bearing(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        )
        .normalize()
    }

    /// Projects a camera-frame point; `None` when it is not in front of the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p.z <= 0.0 {
            return None;
        }
        Some(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }
}

/// Camera-to-body transform `[R_BC | t_BC]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extrinsics {
    pub body_from_camera: Pose,
}

impl Extrinsics {
    pub fn new(body_from_camera: Pose) -> Self {
        Extrinsics { body_from_camera }
    }

    pub fn identity() -> Self {
        Extrinsics::new(Pose::identity())
    }

    /// World pose of the camera rigidly attached to `world_from_body`.
    pub fn camera_pose(&self, world_from_body: &Pose) -> Pose {
        world_from_body.compose(&self.body_from_camera)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub frame: usize,
    pub pixel: Vector2<f64>,
    pub bearing: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrack {
    pub id: u64,
    pub observations: Vec<Observation>,
}

impl FeatureTrack {
    /// Builds a track from raw pixels, lifting bearings through `camera`.
    pub fn from_pixels(
        id: u64,
        pixels: impl IntoIterator<Item = (usize, Vector2<f64>)>,
        camera: &CameraModel,
    ) -> Result<Self> {
        let observations: Vec<Observation> = pixels
            .into_iter()
            .map(|(frame, pixel)| Observation {
                frame,
                pixel,
                bearing: camera.bearing(&pixel),
            })
            .collect();
        let track = FeatureTrack { id, observations };
        track.validate()?;
        Ok(track)
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .observations
            .windows(2)
            .any(|w| w[1].frame <= w[0].frame)
        {
            return Err(Error::Data(format!(
                "track {}: frame indices not strictly increasing",
                self.id
            )));
        }
        for o in &self.observations {
            if (o.bearing.norm() - 1.0).abs() > 1e-10 || o.bearing.z <= 0.0 {
                return Err(Error::Data(format!(
                    "track {}: invalid bearing at frame {}",
                    self.id, o.frame
                )));
            }
        }
        Ok(())
    }

    pub fn observation_at(&self, frame: usize) -> Option<&Observation> {
        self.observations
            .binary_search_by_key(&frame, |o| o.frame)
            .ok()
            .map(|i| &self.observations[i])
    }

    /// Observations restricted to frames in `[first, last]`.
    pub fn within(&self, first: usize, last: usize) -> FeatureTrack {
        FeatureTrack {
            id: self.id,
            observations: self
                .observations
                .iter()
                .filter(|o| o.frame >= first && o.frame <= last)
                .copied()
                .collect(),
        }
    }
}

/// Cumulative pixel path length.
pub fn track_length_px(track: &FeatureTrack) -> f64 {
    track
        .observations
        .windows(2)
        .map(|w| (w[1].pixel - w[0].pixel).norm())
        .sum()
}

/// Passes when at least `m` tracks have length `>= l` pixels.
pub fn track_length_test(tracks: &[FeatureTrack], m: usize, l: f64) -> bool {
    count_long_tracks(tracks, l) >= m
}

pub fn count_long_tracks(tracks: &[FeatureTrack], l: f64) -> usize {
    tracks.iter().filter(|t| track_length_px(t) >= l).count()
}

/// `n` frame indices spread uniformly over `0..frame_count`, ends included.
pub fn select_keyframes(frame_count: usize, n: usize) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two keyframes, got {n}"
        )));
    }
    if frame_count < n {
        return Err(Error::InsufficientData(format!(
            "{frame_count} frames cannot hold {n} keyframes"
        )));
    }
    let span = frame_count - 1;
    let steps = n - 1;
    // round(i * span / steps), half up, in integers
    Ok((0..n)
        .map(|i| (2 * i * span + steps) / (2 * steps))
        .collect())
}

/// A track prepared for the closed-form solver: observations at keyframes only.
#[derive(Clone, Debug, PartialEq)]
pub struct InitTrack {
    pub track: FeatureTrack,
    /// Positions (into the keyframe list) of the keyframes observing this
    /// track, increasing. The first entry is the anchor keyframe.
    pub keyframe_slots: Vec<usize>,
}

impl InitTrack {
    /// Restricts `track` to `keyframes`; `None` if fewer than two are observed.
    pub fn restrict(track: &FeatureTrack, keyframes: &[usize]) -> Option<InitTrack> {
        let mut observations = Vec::new();
        let mut slots = Vec::new();
        for (slot, &frame) in keyframes.iter().enumerate() {
            if let Some(o) = track.observation_at(frame) {
                observations.push(*o);
                slots.push(slot);
            }
        }
        (slots.len() >= 2).then_some(InitTrack {
            track: FeatureTrack {
                id: track.id,
                observations,
            },
            keyframe_slots: slots,
        })
    }

    pub fn anchor(&self) -> usize {
        self.keyframe_slots[0]
    }
}

/// Picks the `m` tracks seen by the most keyframes, breaking ties by pixel
/// path length (longer first) and then by id.
pub fn select_init_features(
    tracks: &[FeatureTrack],
    keyframes: &[usize],
    m: usize,
) -> Result<Vec<InitTrack>> {
    let mut ranked: Vec<(usize, f64, InitTrack)> = tracks
        .iter()
        .filter_map(|t| {
            InitTrack::restrict(t, keyframes)
                .map(|it| (it.keyframe_slots.len(), track_length_px(t), it))
        })
        .collect();
    if ranked.len() < m {
        return Err(Error::InsufficientData(format!(
            "only {} tracks are seen by two or more keyframes, need {m}",
            ranked.len()
        )));
    }
    ranked.sort_by(|a, b| {
        b.0.cmp(&a.0)
            .then(b.1.total_cmp(&a.1))
            .then(a.2.track.id.cmp(&b.2.track.id))
    });
    Ok(ranked.into_iter().take(m).map(|(_, _, it)| it).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn track(id: u64, pixels: &[(f64, f64)]) -> FeatureTrack {
        let cam = CameraModel::euroc();
        FeatureTrack::from_pixels(
            id,
            pixels
                .iter()
                .enumerate()
                .map(|(k, &(u, v))| (k, Vector2::new(u, v))),
            &cam,
        )
        .unwrap()
    }

    fn straight_track(id: u64, frames: &[usize], step: f64) -> FeatureTrack {
        let cam = CameraModel::euroc();
        FeatureTrack::from_pixels(
            id,
            frames
                .iter()
                .map(|&f| (f, Vector2::new(100.0 + step * f as f64, 200.0))),
            &cam,
        )
        .unwrap()
    }

    #[test]
    fn track_length_cases() {
        assert_eq!(track_length_px(&track(0, &[(10.0, 10.0)])), 0.0);
        let t = track(1, &[(0.0, 0.0), (3.0, 4.0), (3.0, 104.0)]);
        assert_eq!(track_length_px(&t), 105.0);
    }

    #[test]
    fn track_length_test_boundary() {
        let long: Vec<_> = (0..20)
            .map(|i| track(i, &[(0.0, 0.0), (0.0, 200.0)]))
            .collect();
        assert!(!track_length_test(&long[..19], 20, 200.0));
        assert!(track_length_test(&long, 20, 200.0));
        assert!(track_length_test(&[], 0, 200.0));
    }

    #[test]
    fn keyframe_selection() {
        assert_eq!(select_keyframes(5, 5).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(select_keyframes(9, 5).unwrap(), vec![0, 2, 4, 6, 8]);
        let k = select_keyframes(100, 5).unwrap();
        let gaps: Vec<usize> = k.windows(2).map(|w| w[1] - w[0]).collect();
        let (lo, hi) = (gaps.iter().min().unwrap(), gaps.iter().max().unwrap());
        assert!(hi - lo <= 1, "{k:?}");
        assert_eq!((k[0], k[4]), (0, 99));
        assert!(matches!(
            select_keyframes(4, 5),
            Err(Error::InsufficientData(_))
        ));
    }

    proptest! {
        #[test]
        fn keyframes_span_the_window(n in 2usize..12, extra in 0usize..500) {
            let count = n + extra;
            let k = select_keyframes(count, n).unwrap();
            prop_assert_eq!(k.len(), n);
            prop_assert_eq!(k[0], 0);
            prop_assert_eq!(*k.last().unwrap(), count - 1);
            prop_assert!(k.windows(2).all(|w| w[1] > w[0]));
        }

        #[test]
        fn bearing_round_trip(u in 0.0f64..752.0, v in 0.0f64..480.0) {
            let cam = CameraModel::euroc();
            let b = cam.bearing(&Vector2::new(u, v));
            let again = cam.bearing(&cam.project(&b).unwrap());
            prop_assert!((again - b).amax() < 1e-12);
        }
    }

    #[test]
    fn camera_validation() {
        assert!(CameraModel::new(0.0, 1.0, 10.0, 10.0, 20, 20).is_err());
        assert!(CameraModel::new(1.0, 1.0, 30.0, 10.0, 20, 20).is_err());
        assert!(CameraModel::new(1.0, 1.0, 10.0, 10.0, 20, 20).is_ok());
    }

    #[test]
    fn init_features_all_covering() {
        let kf = [0, 2, 4, 6, 8];
        let tracks: Vec<_> = (0..20)
            .map(|i| straight_track(i, &[0, 1, 2, 3, 4, 5, 6, 7, 8], 1.0))
            .collect();
        let sel = select_init_features(&tracks, &kf, 20).unwrap();
        assert_eq!(sel.len(), 20);
        assert!(sel
            .iter()
            .all(|t| t.keyframe_slots.len() == 5 && t.anchor() == 0));
    }

    #[test]
    fn init_features_single_view_tracks_ineligible() {
        let kf = [0, 2, 4, 6, 8];
        let mut tracks: Vec<_> = (0..20)
            .map(|i| straight_track(i, &[0, 4, 8], 1.0))
            .collect();
        tracks.extend((20..25).map(|i| straight_track(i, &[1, 2, 3], 1.0)));
        let sel = select_init_features(&tracks, &kf, 20).unwrap();
        assert!(sel.iter().all(|t| t.track.id < 20));
        assert!(matches!(
            select_init_features(&tracks, &kf, 21),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn init_features_ranking_matches_sort_oracle() {
        let kf = [0, 3, 6, 9, 12];
        let patterns: [&[usize]; 6] = [
            &[0, 3],
            &[0, 3, 6, 9, 12],
            &[3, 4, 5, 6, 9],
            &[6, 9, 12],
            &[0, 1, 2, 3, 6, 9],
            &[9, 12],
        ];
        let tracks: Vec<_> = (0..30u64)
            .map(|i| straight_track(i, patterns[i as usize % 6], 1.0 + (i % 7) as f64))
            .collect();
        let sel = select_init_features(&tracks, &kf, 10).unwrap();

        // brute force: score every track independently and sort
        let mut oracle: Vec<(usize, f64, u64)> = tracks
            .iter()
            .map(|t| {
                let views = kf
                    .iter()
                    .filter(|&&f| t.observations.iter().any(|o| o.frame == f))
                    .count();
                let len: f64 = t
                    .observations
                    .windows(2)
                    .map(|w| (w[1].pixel - w[0].pixel).norm())
                    .sum();
                (views, len, t.id)
            })
            .filter(|x| x.0 >= 2)
            .collect();
        oracle.sort_by(|a, b| {
            b.0.cmp(&a.0)
                .then(b.1.partial_cmp(&a.1).unwrap())
                .then(a.2.cmp(&b.2))
        });
        let expected: Vec<u64> = oracle.iter().take(10).map(|x| x.2).collect();
        let got: Vec<u64> = sel.iter().map(|t| t.track.id).collect();
        assert_eq!(got, expected);
    }
}
