//! COCO person keypoints: canonical order, left/right pairs, per-instance sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_KEYPOINTS: usize = 17;

pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// Channel index of each keypoint's mirror image under a horizontal flip.
pub const FLIP_PERMUTATION: [usize; NUM_KEYPOINTS] = [0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13, 16, 15];

pub mod index {
    pub const NOSE: usize = 0;
    pub const LEFT_EYE: usize = 1;
    pub const RIGHT_EYE: usize = 2;
    pub const LEFT_EAR: usize = 3;
    pub const RIGHT_EAR: usize = 4;
    pub const LEFT_SHOULDER: usize = 5;
    pub const RIGHT_SHOULDER: usize = 6;
    pub const LEFT_ELBOW: usize = 7;
    pub const RIGHT_ELBOW: usize = 8;
    pub const LEFT_WRIST: usize = 9;
    pub const RIGHT_WRIST: usize = 10;
    pub const LEFT_HIP: usize = 11;
    pub const RIGHT_HIP: usize = 12;
    pub const LEFT_KNEE: usize = 13;
    pub const RIGHT_KNEE: usize = 14;
    pub const LEFT_ANKLE: usize = 15;
    pub const RIGHT_ANKLE: usize = 16;
}

/// COCO visibility flag.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Visibility {
    #[default]
    Unlabeled = 0,
    Occluded = 1,
    Visible = 2,
}

impl Visibility {
    pub fn is_labeled(self) -> bool {
        self != Visibility::Unlabeled
    }
}

impl From<Visibility> for u8 {
    fn from(v: Visibility) -> u8 {
        v as u8
    }
}

impl TryFrom<u8> for Visibility {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Visibility::Unlabeled),
            1 => Ok(Visibility::Occluded),
            2 => Ok(Visibility::Visible),
            other => Err(Error::invalid("visibility", format!("flag {other} not in {{0, 1, 2}}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// Confidence in [0, 1]; 1 for annotations.
    pub score: f64,
    pub visibility: Visibility,
}

impl Keypoint {
    pub fn labeled(x: f64, y: f64, visibility: Visibility) -> Self {
        Self {
            x,
            y,
            score: 1.0,
            visibility,
        }
    }
}

/// Exactly 17 keypoints in canonical COCO order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet(pub [Keypoint; NUM_KEYPOINTS]);

impl KeypointSet {
    /// Parses the COCO flat `[x1, y1, v1, x2, y2, v2, ...]` layout.
    pub fn from_coco_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != NUM_KEYPOINTS * 3 {
            return Err(Error::shape("keypoints", "flat length", NUM_KEYPOINTS * 3, flat.len()));
        }
        let mut set = KeypointSet::default();
        for (kp, chunk) in set.0.iter_mut().zip(flat.chunks_exact(3)) {
            let v = chunk[2];
            if v.fract() != 0.0 || !(0.0..=2.0).contains(&v) {
                return Err(Error::invalid("keypoints", format!("visibility {v} not in {{0, 1, 2}}")));
            }
            *kp = Keypoint::labeled(chunk[0], chunk[1], Visibility::try_from(v as u8)?);
        }
        Ok(set)
    }

    pub fn to_coco_flat(&self) -> Vec<f64> {
        self.0
            .iter()
            .flat_map(|k| [k.x, k.y, f64::from(u8::from(k.visibility))])
            .collect()
    }

    pub fn num_labeled(&self) -> usize {
        self.0.iter().filter(|k| k.visibility.is_labeled()).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Keypoint> {
        self.0.iter()
    }

    /// Mirrors x about `image_width` and swaps left/right channels.
    /// Unlabeled entries keep their placeholder coordinates.
    pub fn flipped(&self, image_width: f64) -> KeypointSet {
        let mut out = KeypointSet::default();
        for (dst, &src) in out.0.iter_mut().zip(FLIP_PERMUTATION.iter()) {
            let k = self.0[src];
            *dst = if k.visibility.is_labeled() {
                Keypoint {
                    x: image_width - k.x,
                    ..k
                }
            } else {
                k
            };
        }
        out
    }
}

impl std::ops::Index<usize> for KeypointSet {
    type Output = Keypoint;
    fn index(&self, i: usize) -> &Keypoint {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for KeypointSet {
    fn index_mut(&mut self, i: usize) -> &mut Keypoint {
        &mut self.0[i]
    }
}
