//! Paired augmentation: random flip about the x-axis and global scaling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::frame::PointCloudFrame;
use crate::boxes::{wrap_angle, Box3D};
use crate::error::{ensure, Result};

pub const SCALE_RANGE: (f64, f64) = (0.95, 1.05);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    /// Negate y (reflection about the x-axis).
    pub flip: bool,
    pub scale: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        flip: false,
        scale: 1.0,
    };

    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            flip: rng.gen_bool(0.5),
            scale: rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1),
        }
    }

    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let y = if self.flip { -p[1] } else { p[1] };
        [p[0] * self.scale, y * self.scale, p[2] * self.scale]
    }

    pub fn apply_box(&self, b: &Box3D) -> Box3D {
        let mut out = *b;
        out.center = self.apply_point(b.center);
        out.size = b.size.map(|s| s * self.scale);
        if self.flip {
            out.yaw = wrap_angle(-b.yaw);
        }
        out
    }

    pub fn apply_frame(&self, frame: &PointCloudFrame) -> PointCloudFrame {
        let f = frame.modality.num_features();
        let mut out = frame.clone();
        for row in out.points.chunks_exact_mut(f) {
            let p = self.apply_point([row[0], row[1], row[2]]);
            row[..3].copy_from_slice(&p);
        }
        out.labels = frame
            .labels
            .as_ref()
            .map(|ls| ls.iter().map(|b| self.apply_box(b)).collect());
        out
    }
}

/// Apply one transform to both modalities and the labels.
pub fn augment_with(
    lidar: &PointCloudFrame,
    radar: &PointCloudFrame,
    labels: &[Box3D],
    t: Transform,
) -> Result<(PointCloudFrame, PointCloudFrame, Vec<Box3D>)> {
    ensure!(
        lidar.frame_id == radar.frame_id,
        Contract,
        "augmenting unpaired frames {} and {}",
        lidar.frame_id,
        radar.frame_id
    );
    Ok((
        t.apply_frame(lidar),
        t.apply_frame(radar),
        labels.iter().map(|b| t.apply_box(b)).collect(),
    ))
}

/// Draw a transform from `seed` and apply it to the pair.
pub fn augment_pair(
    lidar: &PointCloudFrame,
    radar: &PointCloudFrame,
    labels: &[Box3D],
    seed: u64,
) -> Result<(PointCloudFrame, PointCloudFrame, Vec<Box3D>)> {
    augment_with(lidar, radar, labels, Transform::sample(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::ObjectClass;
    use crate::scene::Modality;

    #[test]
    fn flip_negates_y_and_yaw() {
        let t = Transform {
            flip: true,
            scale: 1.0,
        };
        assert_eq!(t.apply_point([1.0, 2.0, 0.0]), [1.0, -2.0, 0.0]);
        let b = Box3D::new([1.0, 2.0, 0.0], [2.0, 1.0, 1.0], 0.5, ObjectClass::Car);
        assert_eq!(t.apply_box(&b).yaw, -0.5);
    }

    #[test]
    fn sampled_scale_in_range() {
        for seed in 0..200 {
            let t = Transform::sample(seed);
            assert!((0.95..=1.05).contains(&t.scale));
        }
    }

    #[test]
    fn unpaired_rejected() {
        let a = PointCloudFrame::new(1, Modality::Lidar, vec![]).unwrap();
        let b = PointCloudFrame::new(2, Modality::Radar, vec![]).unwrap();
        assert!(augment_pair(&a, &b, &[], 0).is_err());
    }
}
