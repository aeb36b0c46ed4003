//! Simulated sensors: a spinning LiDAR grid and four surround cameras.

use crate::config::WorldConfig;

use super::geom::{Pose2, Vec3};
use super::scene::{raycast, HitClass, SceneGraph};

/// Regular (azimuth x elevation) ray grid in the ego frame.
#[derive(Debug, Clone)]
pub struct LidarSpec {
    pub azimuth_bins: usize,
    pub elevation_rows: usize,
    pub elevation_deg: [f64; 2],
    pub max_range: f64,
    pub mount_height: f64,
}

impl LidarSpec {
    pub fn from_world(cfg: &WorldConfig) -> Self {
        LidarSpec {
            azimuth_bins: cfg.azimuth_bins,
            elevation_rows: cfg.elevation_rows,
            elevation_deg: cfg.elevation_deg,
            max_range: cfg.lidar_max_range,
            mount_height: cfg.lidar_mount_height,
        }
    }

    pub fn n_rays(&self) -> usize {
        self.azimuth_bins * self.elevation_rows
    }

    pub fn azimuth(&self, a: usize) -> f64 {
        std::f64::consts::TAU * a as f64 / self.azimuth_bins as f64
    }

    pub fn elevation(&self, e: usize) -> f64 {
        let lo = self.elevation_deg[0].to_radians();
        let hi = self.elevation_deg[1].to_radians();
        if self.elevation_rows == 1 {
            return lo;
        }
        lo + (hi - lo) * e as f64 / (self.elevation_rows - 1) as f64
    }

    /// Unit ray direction in the ego frame for bin (a, e).
    pub fn direction(&self, a: usize, e: usize) -> Vec3 {
        let az = self.azimuth(a);
        let el = self.elevation(e);
        Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
    }

    /// Recover the (azimuth, elevation) bin of a unit ego-frame direction.
    pub fn bin_of(&self, dir: Vec3) -> (usize, usize) {
        let az = dir.y.atan2(dir.x).rem_euclid(std::f64::consts::TAU);
        let a = (az / std::f64::consts::TAU * self.azimuth_bins as f64).round() as usize
            % self.azimuth_bins;
        let el = dir.z.clamp(-1.0, 1.0).asin();
        let lo = self.elevation_deg[0].to_radians();
        let hi = self.elevation_deg[1].to_radians();
        let step = if self.elevation_rows == 1 { 1.0 } else { (hi - lo) / (self.elevation_rows - 1) as f64 };
        let e = (((el - lo) / step).round() as isize).clamp(0, self.elevation_rows as isize - 1);
        (a, e as usize)
    }
}

/// One LiDAR bin's result for a given frame.
#[derive(Debug, Clone, Copy)]
pub struct LidarReturn {
    pub azimuth_idx: usize,
    pub elevation_idx: usize,
    /// Depth along the ray from the sensor; None is a miss.
    pub depth: Option<f64>,
    pub class: Option<HitClass>,
}

/// Cast the full LiDAR grid for `frame` from `ego`. Points are reported by
/// the caller via [`LidarReturn`] depths; see [`cloud_from_returns`].
pub fn simulate_lidar(
    scene: &SceneGraph,
    frame: usize,
    lidar: &LidarSpec,
    ego: Pose2,
) -> Vec<LidarReturn> {
    let origin = ego.to_world(Vec3::new(0.0, 0.0, lidar.mount_height));
    let mut out = Vec::with_capacity(lidar.n_rays());
    for a in 0..lidar.azimuth_bins {
        for e in 0..lidar.elevation_rows {
            let dir_world = lidar.direction(a, e).rot_z(ego.yaw);
            let hit = raycast(scene, origin, dir_world, frame, lidar.max_range);
            out.push(LidarReturn {
                azimuth_idx: a,
                elevation_idx: e,
                depth: hit.map(|(d, _)| d),
                class: hit.map(|(_, c)| c),
            });
        }
    }
    out
}

/// Hit points in the casting frame's own ego coordinates.
pub fn cloud_from_returns(returns: &[LidarReturn], lidar: &LidarSpec) -> Vec<[f64; 3]> {
    let mount = Vec3::new(0.0, 0.0, lidar.mount_height);
    returns
        .iter()
        .filter_map(|r| {
            r.depth.map(|d| {
                let p = mount.add(lidar.direction(r.azimuth_idx, r.elevation_idx).scale(d));
                [p.x, p.y, p.z]
            })
        })
        .collect()
}

/// Four-view surround rig: front/left/rear/right at 90 degree steps.
#[derive(Debug, Clone)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    pub focal_px: f64,
    pub mount_height: f64,
}

pub const N_VIEWS: usize = 4;
/// Image channels: one-hot {plane, vehicle, building} + inverse depth.
pub const IMG_CHANNELS: usize = 4;

impl CameraSpec {
    pub fn from_world(cfg: &WorldConfig) -> Self {
        CameraSpec {
            width: cfg.camera_width,
            height: cfg.camera_height,
            focal_px: cfg.camera_focal_px,
            mount_height: cfg.camera_mount_height,
        }
    }

    pub fn view_yaw(view: usize) -> f64 {
        std::f64::consts::FRAC_PI_2 * view as f64
    }

    /// Ego-frame unit ray through pixel (u, v) of `view`.
    ///
    /// Camera frame: +z optical axis, +x image right, +y image down; the
    /// front view looks along ego +x with image-right mapping to ego -y.
    pub fn pixel_ray(&self, view: usize, u: usize, v: usize) -> Vec3 {
        let cx = self.width as f64 / 2.0;
        let cy = self.height as f64 / 2.0;
        let xc = (u as f64 + 0.5 - cx) / self.focal_px;
        let yc = (v as f64 + 0.5 - cy) / self.focal_px;
        let fwd = Vec3::new(1.0, -xc, -yc).normalized();
        fwd.rot_z(Self::view_yaw(view))
    }

    pub fn image_len(&self) -> usize {
        N_VIEWS * self.width * self.height * IMG_CHANNELS
    }
}

/// Per-pixel raycasting into semantic + inverse-depth feature images.
/// Layout: [view][u][v][channel], f32 (what the dataset stores).
pub fn render_views(scene: &SceneGraph, frame: usize, cams: &CameraSpec, ego: Pose2) -> Vec<f32> {
    let mut img = vec![0.0f32; cams.image_len()];
    let origin_local = Vec3::new(0.0, 0.0, cams.mount_height);
    let origin = ego.to_world(origin_local);
    let max_range = 64.0; // cameras see further than the LiDAR
    for view in 0..N_VIEWS {
        for u in 0..cams.width {
            for v in 0..cams.height {
                let dir = cams.pixel_ray(view, u, v).rot_z(ego.yaw);
                let at = ((view * cams.width + u) * cams.height + v) * IMG_CHANNELS;
                if let Some((d, class)) = raycast(scene, origin, dir, frame, max_range) {
                    let ch = match class {
                        HitClass::Plane => 0,
                        HitClass::Vehicle => 1,
                        HitClass::Building => 2,
                    };
                    img[at + ch] = 1.0;
                    img[at + 3] = (1.0 / d) as f32;
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::scene::generate_scene;

    fn lidar() -> LidarSpec {
        LidarSpec::from_world(&WorldConfig::default())
    }

    #[test]
    fn ray_count_and_unit_norm() {
        let l = lidar();
        assert_eq!(l.n_rays(), 256);
        for a in 0..l.azimuth_bins {
            for e in 0..l.elevation_rows {
                assert!((l.direction(a, e).norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bin_recovery_is_exact() {
        let l = lidar();
        for a in 0..l.azimuth_bins {
            for e in 0..l.elevation_rows {
                assert_eq!(l.bin_of(l.direction(a, e)), (a, e));
            }
        }
    }

    #[test]
    fn empty_scene_plane_depths() {
        let scene = SceneGraph::empty(3, 16.0);
        let l = lidar();
        let returns = simulate_lidar(&scene, 0, &l, Pose2::identity());
        for r in &returns {
            let el = l.elevation(r.elevation_idx);
            if el < 0.0 {
                let expect = l.mount_height / el.abs().sin();
                if expect <= l.max_range {
                    let d = r.depth.expect("downward ray inside range must hit");
                    assert!((d - expect).abs() < 2e-3, "el {el}: {d} vs {expect}");
                } else {
                    assert!(r.depth.is_none());
                }
            } else {
                assert!(r.depth.is_none(), "upward rays cannot hit the plane");
            }
        }
    }

    #[test]
    fn static_scene_static_ego_gives_identical_clouds() {
        let mut cfg = WorldConfig::default();
        cfg.vehicles = [0, 0];
        cfg.ego_moving_prob = 0.0;
        let scene = generate_scene(5, &cfg, 3).unwrap();
        let l = lidar();
        let c0 = cloud_from_returns(&simulate_lidar(&scene, 0, &l, scene.ego[0]), &l);
        let c2 = cloud_from_returns(&simulate_lidar(&scene, 2, &l, scene.ego[2]), &l);
        assert_eq!(c0.len(), c2.len());
        for (a, b) in c0.iter().zip(c2.iter()) {
            for i in 0..3 {
                assert!((a[i] - b[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn box_ahead_shortens_forward_rays() {
        use crate::toyworld::scene::{BoxClass, SceneBox};
        let mut scene = SceneGraph::empty(3, 16.0);
        scene.boxes.push(SceneBox {
            center: Vec3::new(6.0, 0.0, 1.0),
            half: Vec3::new(1.0, 2.0, 1.0),
            yaw: 0.0,
            class: BoxClass::Vehicle,
            vel: [0.0, 0.0],
            yaw_rate: 0.0,
        });
        let l = lidar();
        let empty = SceneGraph::empty(3, 16.0);
        let with_box = simulate_lidar(&scene, 0, &l, Pose2::identity());
        let without = simulate_lidar(&empty, 0, &l, Pose2::identity());
        let mut shortened = 0;
        for (a, b) in with_box.iter().zip(without.iter()) {
            match (a.depth, b.depth) {
                (Some(da), Some(db)) => {
                    assert!(da <= db + 1e-3);
                    if da < db - 1e-3 {
                        shortened += 1;
                    }
                }
                (Some(_), None) => shortened += 1,
                (None, Some(_)) => panic!("adding a box cannot create a miss"),
                (None, None) => {}
            }
        }
        assert!(shortened > 0, "forward rays should be intercepted by the box");
    }

    #[test]
    fn lidar_points_lie_on_surfaces() {
        let cfg = WorldConfig::default();
        let l = lidar();
        for seed in [3u64, 9, 21] {
            let scene = generate_scene(seed, &cfg, 3).unwrap();
            for frame in 0..scene.frames() {
                let ego = scene.ego[frame];
                let returns = simulate_lidar(&scene, frame, &l, ego);
                for p in cloud_from_returns(&returns, &l) {
                    let world = ego.to_world(Vec3::new(p[0], p[1], p[2]));
                    assert!(scene.sdf(world, frame).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn camera_horizon_structure() {
        let scene = SceneGraph::empty(3, 16.0);
        let cams = CameraSpec::from_world(&WorldConfig::default());
        let img = render_views(&scene, 0, &cams, Pose2::identity());
        let at = |view: usize, u: usize, v: usize, ch: usize| {
            img[((view * cams.width + u) * cams.height + v) * IMG_CHANNELS + ch]
        };
        // bottom rows (large v) look down -> plane class; top rows are sky
        for view in 0..N_VIEWS {
            assert_eq!(at(view, 32, cams.height - 1, 0), 1.0, "view {view} bottom row");
            assert_eq!(at(view, 32, 0, 0), 0.0, "view {view} top row");
            assert_eq!(at(view, 32, 0, 3), 0.0, "sky has zero inverse depth");
        }
        // inverse depth decreases toward the horizon going up the image
        let mut prev = f32::INFINITY;
        for v in (cams.height / 2 + 1..cams.height).rev() {
            let inv = at(0, 32, v, 3);
            if inv > 0.0 {
                assert!(inv <= prev + 1e-6);
                prev = inv;
            }
        }
    }

    #[test]
    fn camera_sees_box_class() {
        use crate::toyworld::scene::{BoxClass, SceneBox};
        let mut scene = SceneGraph::empty(3, 16.0);
        scene.boxes.push(SceneBox {
            center: Vec3::new(6.0, 0.0, 1.2),
            half: Vec3::new(1.0, 2.0, 1.2),
            yaw: 0.0,
            class: BoxClass::Building,
            vel: [0.0, 0.0],
            yaw_rate: 0.0,
        });
        let cams = CameraSpec::from_world(&WorldConfig::default());
        let img = render_views(&scene, 0, &cams, Pose2::identity());
        // center pixel of the front view stares straight at the box
        let u = cams.width / 2;
        let v = cams.height / 2;
        let at = ((u) * cams.height + v) * IMG_CHANNELS;
        assert_eq!(img[at + 2], 1.0, "building one-hot");
        assert_eq!(img[at], 0.0);
        assert_eq!(img[at + 1], 0.0);
    }
}
