//! Point clouds and the KITTI Velodyne scan format.
//!
//! A KITTI scan is a flat sequence of little-endian `f32` quadruples
//! `(x, y, z, intensity)` with no header.

use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::geometry::Pose;

const BYTES_PER_POINT: usize = 16;

/// Sensor-frame Cartesian points in meters, with optional per-point intensity.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub intensity: Option<Vec<f32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self {
            points,
            intensity: None,
        }
    }

    pub fn with_intensity(points: Vec<Vector3<f64>>, intensity: Vec<f32>) -> Result<Self> {
        if intensity.len() != points.len() {
            return Err(Error::InvalidInput(format!(
                "{} intensities for {} points",
                intensity.len(),
                points.len()
            )));
        }
        Ok(Self {
            points,
            intensity: Some(intensity),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Every `step`-th point, order preserved.
    pub fn subsample(&self, step: usize) -> PointCloud {
        let step = step.max(1);
        PointCloud {
            points: self.points.iter().step_by(step).copied().collect(),
            intensity: self
                .intensity
                .as_ref()
                .map(|i| i.iter().step_by(step).copied().collect()),
        }
    }

    /// Decodes a KITTI scan from raw bytes.
    pub fn from_kitti_bytes(bytes: &[u8]) -> Result<Self> {
        let residual = bytes.len() % BYTES_PER_POINT;
        if residual != 0 {
            return Err(Error::Format(format!(
                "scan length {} is not a multiple of {BYTES_PER_POINT}; {residual} trailing bytes",
                bytes.len()
            )));
        }
        let n = bytes.len() / BYTES_PER_POINT;
        let mut points = Vec::with_capacity(n);
        let mut intensity = Vec::with_capacity(n);
        for chunk in bytes.chunks_exact(BYTES_PER_POINT) {
            let f = |i: usize| f32::from_le_bytes(chunk[i * 4..i * 4 + 4].try_into().unwrap());
            let p = Vector3::new(f(0) as f64, f(1) as f64, f(2) as f64);
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::Format(format!(
                    "non-finite coordinate at point {}",
                    points.len()
                )));
            }
            points.push(p);
            intensity.push(f(3));
        }
        Ok(Self {
            points,
            intensity: Some(intensity),
        })
    }

    /// Encodes as KITTI bytes. Coordinates are narrowed to `f32`; missing
    /// intensity is written as zero.
    pub fn to_kitti_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * BYTES_PER_POINT);
        for (i, p) in self.points.iter().enumerate() {
            let inten = self.intensity.as_ref().map_or(0.0, |v| v[i]);
            for v in [p[0] as f32, p[1] as f32, p[2] as f32, inten] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

pub fn load_kitti_scan(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    PointCloud::from_kitti_bytes(&bytes)
}

pub fn write_kitti_scan(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &cloud.to_kitti_bytes())
}

/// Applies `R p + T` to every point; order and intensity are preserved.
pub fn transform_cloud(cloud: &PointCloud, pose: &Pose) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| pose.apply(p)).collect(),
        intensity: cloud.intensity.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(points: &[[f32; 4]]) -> Vec<u8> {
        points
            .iter()
            .flat_map(|p| p.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    #[test]
    fn decodes_two_points_in_order() {
        let bytes = encode(&[[1.0, 2.0, 3.0, 0.5], [4.0, 5.0, 6.0, 0.1]]);
        assert_eq!(bytes.len(), 32);
        let c = PointCloud::from_kitti_bytes(&bytes).unwrap();
        assert_eq!(
            c.points,
            vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(4.0, 5.0, 6.0)]
        );
        assert_eq!(c.intensity.unwrap(), vec![0.5, 0.1]);
    }

    #[test]
    fn empty_file_is_empty_cloud() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        std::fs::write(&path, []).unwrap();
        assert!(load_kitti_scan(&path).unwrap().is_empty());
    }

    #[test]
    fn seventeen_bytes_is_a_format_error() {
        let err = PointCloud::from_kitti_bytes(&[0u8; 17]).unwrap_err();
        match err {
            Error::Format(msg) => assert!(msg.contains("1 trailing bytes"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_kitti_scan("/nonexistent/scan.bin"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn transform_examples() {
        let c = PointCloud::new(vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
        ]);
        assert_eq!(transform_cloud(&c, &Pose::identity()), c);
        let t = transform_cloud(&c, &Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)));
        assert_eq!(t.points[0], Vector3::new(1.0, 0.0, 0.0));
        let r = transform_cloud(
            &c,
            &Pose::from_yaw(std::f64::consts::FRAC_PI_2, Vector3::zeros()),
        );
        assert!((r.points[1] - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            prop::array::uniform3(-3.0..3.0f64),
            prop::array::uniform3(-50.0..50.0f64),
        )
            .prop_map(|(w, t)| Pose::from_axis_angle(Vector3::from(w), Vector3::from(t)))
    }

    proptest! {
        #[test]
        fn transform_then_inverse_is_identity(
            pose in arb_pose(),
            pts in prop::collection::vec(prop::array::uniform3(-80.0..80.0f64), 1..50),
        ) {
            let c = PointCloud::new(pts.into_iter().map(Vector3::from).collect());
            let back = transform_cloud(&transform_cloud(&c, &pose), &pose.inverse());
            for (a, b) in c.points.iter().zip(&back.points) {
                prop_assert!((a - b).abs().max() < 1e-9);
            }
        }

        #[test]
        fn kitti_bytes_round_trip(pts in prop::collection::vec(prop::array::uniform4(-100.0..100.0f32), 0..40)) {
            let cloud = PointCloud::with_intensity(
                pts.iter().map(|p| Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)).collect(),
                pts.iter().map(|p| p[3]).collect(),
            ).unwrap();
            let back = PointCloud::from_kitti_bytes(&cloud.to_kitti_bytes()).unwrap();
            prop_assert_eq!(back, cloud);
        }
    }
}
