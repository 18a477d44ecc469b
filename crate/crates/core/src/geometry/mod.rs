//! Camera geometry and synthetic scene generation.
//!
//! World convention: right-handed with +x to the right, +y pointing *down*,
//! +z away from the camera.  The camera sits at the world origin and pitches
//! down by a fixed angle, so the ground plane (y = [`scene::GROUND_Y`]) fills
//! the lower part of the frame and a strip of sky remains at the top.
//!
//! Everything in this module is plain `f64` on the host — no tape involvement
//! except [`sample_at_points`], which gathers rows out of a feature map and
//! therefore participates in backpropagation through the map argument.

mod scene;

pub use scene::{
    class_name, generate_scene, Domain, DomainShiftConfig, SceneDims, SceneSample, GROUND_Y,
};

use crate::tensor::Tensor;

/// Minimum camera-frame depth for a projection to count as in front of the
/// camera.  Depths at or below this are marked invalid rather than producing
/// huge or non-finite pixel coordinates.
pub const MIN_DEPTH: f64 = 1e-3;

/// Pinhole camera with a rigid world-to-camera transform.
///
/// Projection of a world point `p`: `p_cam = R * p + t`, then
/// `u = cx + fx * x / z`, `v = cy + fy * y / z` with `z = p_cam[2]`.
#[derive(Clone, Debug)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 3x3 world-to-camera rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    /// Image bounds used for the validity check.
    pub width: usize,
    pub height: usize,
}

/// One projected point: pixel coordinates plus camera-frame depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    /// True iff depth > [`MIN_DEPTH`] and (u, v) falls inside the image
    /// rectangle `[0, w) x [0, h)`.
    pub valid: bool,
}

impl CameraModel {
    /// Applies the rigid transform only, returning camera-frame coordinates.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    /// Projects one world point to continuous pixel coordinates.
    pub fn project(&self, p: [f64; 3]) -> Projected {
        let c = self.to_camera(p);
        let depth = c[2];
        if depth <= MIN_DEPTH {
            return Projected { u: 0.0, v: 0.0, depth, valid: false };
        }
        let u = self.cx + self.fx * c[0] / depth;
        let v = self.cy + self.fy * c[1] / depth;
        let valid =
            u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64;
        Projected { u, v, depth, valid }
    }
}

/// Camera used by every generated scene: focal length 0.875 * w, principal
/// point at the image centre, pitched down by 12 degrees, positioned at the
/// world origin.
pub fn default_camera(height: usize, width: usize) -> CameraModel {
    let pitch = 12.0_f64.to_radians();
    let (s, c) = pitch.sin_cos();
    // Rows are the camera axes expressed in world coordinates.  Pitching the
    // view direction downwards (towards +y) tilts the camera y axis with it.
    let rotation = [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]];
    CameraModel {
        fx: 0.875 * width as f64,
        fy: 0.875 * width as f64,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        rotation,
        translation: [0.0; 3],
        width,
        height,
    }
}

/// Projects an `[n, 3]` row-major point list, returning flat `[n, 2]` pixel
/// coordinates and a per-point validity flag.  Invalid points keep (0, 0) as
/// a placeholder coordinate; consumers must gate on the flag.
pub fn project_points(cam: &CameraModel, points: &[f64]) -> (Vec<f64>, Vec<bool>) {
    assert!(points.len() % 3 == 0, "point list length {} is not a multiple of 3", points.len());
    let n = points.len() / 3;
    let mut proj = vec![0.0; n * 2];
    let mut valid = vec![false; n];
    for i in 0..n {
        let p = self::CameraModel::project(cam, [points[3 * i], points[3 * i + 1], points[3 * i + 2]]);
        proj[2 * i] = p.u;
        proj[2 * i + 1] = p.v;
        valid[i] = p.valid;
    }
    (proj, valid)
}

/// Rounds a continuous pixel coordinate to its nearest integer pixel with
/// half-up rounding, then clamps into `[0, extent)`.  Clamping matters for
/// coordinates like u = 63.7 on a 64-wide image, which round to 64.
pub fn nearest_pixel(coord: f64, extent: usize) -> usize {
    debug_assert!(extent > 0);
    let r = (coord + 0.5).floor();
    if r < 0.0 {
        0
    } else if r as usize >= extent {
        extent - 1
    } else {
        r as usize
    }
}

/// Gathers per-point feature rows out of a dense `[h, w, d]` map at the
/// nearest pixel of each valid projection.
///
/// Returns the gathered `[n_valid, d]` tensor (differentiable through `map`)
/// and the indices of the surviving points in their original order, so that
/// callers can line the rows up with per-point data such as labels.
pub fn sample_at_points(
    map: &Tensor,
    proj: &[f64],
    valid: &[bool],
) -> (Tensor, Vec<usize>) {
    assert_eq!(map.rank(), 3, "expected an [h, w, d] map, got shape {:?}", map.shape());
    let (h, w, d) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    assert_eq!(proj.len(), valid.len() * 2, "projection/validity length mismatch");
    let mut rows = Vec::new();
    let mut kept = Vec::new();
    for (i, &ok) in valid.iter().enumerate() {
        if !ok {
            continue;
        }
        let px = nearest_pixel(proj[2 * i], w);
        let py = nearest_pixel(proj[2 * i + 1], h);
        rows.push(py * w + px);
        kept.push(i);
    }
    let flat = map.reshape(&[h * w, d]);
    (flat.gather_rows(&rows), kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn project_matches_hand_computation() {
        // Identity rotation, zero translation: u = cx + fx * x / z.
        let cam = CameraModel {
            fx: 10.0,
            fy: 10.0,
            cx: 32.0,
            cy: 24.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            width: 64,
            height: 48,
        };
        let p = cam.project([1.0, 0.0, 2.0]);
        assert_eq!(p.u, 37.0);
        assert_eq!(p.v, 24.0);
        assert_eq!(p.depth, 2.0);
        assert!(p.valid);
    }

    #[test]
    fn points_behind_camera_are_invalid() {
        let cam = default_camera(48, 64);
        let p = cam.project([0.0, 0.0, -5.0]);
        assert!(!p.valid);
        // Exactly at the depth floor is also rejected.
        let q = CameraModel {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            ..cam.clone()
        }
        .project([0.0, 0.0, MIN_DEPTH]);
        assert!(!q.valid);
    }

    #[test]
    fn default_camera_sees_the_ground_below_centre() {
        let cam = default_camera(48, 64);
        // A ground point straight ahead at depth ~6 lands in the lower half.
        let p = cam.project([0.0, GROUND_Y, 6.0]);
        assert!(p.valid);
        assert!(p.v > 24.0, "ground point projected to v = {}", p.v);
        // The horizon (y = 0, very far) sits above the centre line because of
        // the downward pitch.
        let h = cam.project([0.0, 0.0, 1.0e6]);
        assert!(h.v < 24.0);
    }

    #[test]
    fn nearest_pixel_rounds_half_up_and_clamps() {
        assert_eq!(nearest_pixel(3.49, 64), 3);
        assert_eq!(nearest_pixel(3.5, 64), 4);
        assert_eq!(nearest_pixel(63.7, 64), 63);
        assert_eq!(nearest_pixel(-0.4, 64), 0);
        assert_eq!(nearest_pixel(0.0, 1), 0);
    }

    #[test]
    fn sample_at_points_gathers_expected_rows() {
        // 2x3 map with d = 1; feature value encodes the flat pixel index.
        let tape = crate::tensor::Tape::new();
        let map = tape.leaf(&[2, 3, 1], (0..6).map(|i| i as f64).collect());
        let proj = vec![
            0.2, 0.3, // -> pixel (0, 0) = row 0
            2.6, 1.4, // -> pixel (3 -> clamp 2, 1) = row 5
            1.0, 0.0, // invalid, skipped
        ];
        let valid = vec![true, true, false];
        let (rows, kept) = sample_at_points(&map, &proj, &valid);
        assert_eq!(rows.shape(), &[2, 1]);
        assert_eq!(rows.data(), &[0.0, 5.0]);
        assert_eq!(kept, vec![0, 1]);
        // Gradient flows back into the gathered pixels only.
        let loss = rows.sum();
        let grads = tape.backward(&loss).unwrap();
        let g = grads.wrt(&map).unwrap();
        assert_eq!(g, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }
}
