//! Oriented 3D boxes and object classes.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Cyclist,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [
        ObjectClass::Car,
        ObjectClass::Pedestrian,
        ObjectClass::Cyclist,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Car => "car",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Cyclist => "cyclist",
        }
    }
}

/// Wrap an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r >= PI {
        -PI
    } else {
        r
    }
}

/// Oriented box: `center` is the geometric center, `size` is `(l, w, h)` with
/// `l` along the heading. A box carries a score iff it is a detection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class: ObjectClass,
    pub score: Option<f64>,
}

/// A scored box; same representation, named for readability at call sites.
pub type Detection = Box3D;

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, class: ObjectClass) -> Self {
        Self {
            center,
            size,
            yaw: wrap_angle(yaw),
            class,
            score: None,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn without_score(mut self) -> Self {
        self.score = None;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.center.iter().all(|v| v.is_finite()) && self.yaw.is_finite(),
            Validation,
            "box has non-finite center or yaw: {:?}",
            self
        );
        ensure!(
            self.size.iter().all(|&s| s > 0.0 && s.is_finite()),
            Validation,
            "box sizes must be positive, got {:?}",
            self.size
        );
        ensure!(
            (-PI..PI).contains(&self.yaw),
            Validation,
            "yaw {} outside [-pi, pi)",
            self.yaw
        );
        if let Some(s) = self.score {
            ensure!(
                (0.0..=1.0).contains(&s),
                Validation,
                "score {s} outside [0, 1]"
            );
        }
        Ok(())
    }

    /// BEV corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = self.size[0] / 2.0;
        let hw = self.size[1] / 2.0;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[x, y]| {
            [
                self.center[0] + c * x - s * y,
                self.center[1] + s * x + c * y,
            ]
        })
    }

    pub fn bev_area(&self) -> f64 {
        self.size[0] * self.size[1]
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn z_range(&self) -> (f64, f64) {
        (
            self.center[2] - self.size[2] / 2.0,
            self.center[2] + self.size[2] / 2.0,
        )
    }

    /// Half of the BEV diagonal; an upper bound on the distance from center to any corner.
    pub fn bev_radius(&self) -> f64 {
        0.5 * self.size[0].hypot(self.size[1])
    }

    /// Whether a 3D point lies inside the box (boundary inclusive).
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        let (z0, z1) = self.z_range();
        lx.abs() <= self.size[0] / 2.0 && ly.abs() <= self.size[1] / 2.0 && p[2] >= z0 && p[2] <= z1
    }

    /// Whether the BEV footprint contains `(x, y)`.
    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        (c * dx + s * dy).abs() <= self.size[0] / 2.0
            && (-s * dx + c * dy).abs() <= self.size[1] / 2.0
    }

    pub(crate) fn degenerate_error(&self) -> Error {
        Error::Contract(format!("degenerate box with size {:?}", self.size))
    }
}
