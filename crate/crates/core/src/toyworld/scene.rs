//! Procedural scene graphs with analytic signed-distance geometry.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::WorldConfig;

use super::geom::{Pose2, Vec3};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("box placement rejected {0} times; spec leaves no room")]
    RejectionExhausted(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxClass {
    Vehicle,
    Building,
}

#[derive(Debug, Clone)]
pub struct SceneBox {
    pub center: Vec3,
    pub half: Vec3,
    pub yaw: f64,
    pub class: BoxClass,
    /// Planar velocity, m/s; zero for buildings.
    pub vel: [f64; 2],
    pub yaw_rate: f64,
}

impl SceneBox {
    pub fn pose_at(&self, frame: usize) -> (Vec3, f64) {
        let t = frame as f64;
        (
            Vec3::new(self.center.x + self.vel[0] * t, self.center.y + self.vel[1] * t, self.center.z),
            self.yaw + self.yaw_rate * t,
        )
    }

    /// Signed distance from `p` to this box at `frame`.
    pub fn sdf(&self, p: Vec3, frame: usize) -> f64 {
        let (c, yaw) = self.pose_at(frame);
        let local = p.sub(c).rot_z(-yaw);
        let q = Vec3::new(
            local.x.abs() - self.half.x,
            local.y.abs() - self.half.y,
            local.z.abs() - self.half.z,
        );
        let outside = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
        let inside = q.x.max(q.y).max(q.z).min(0.0);
        outside + inside
    }
}

/// What a ray hit; used for camera semantics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HitClass {
    Plane,
    Vehicle,
    Building,
}

#[derive(Debug, Clone)]
pub struct SceneGraph {
    pub boxes: Vec<SceneBox>,
    /// Ego poses for frames 0..=delta_t at 1 Hz.
    pub ego: Vec<Pose2>,
    pub extent: f64,
}

impl SceneGraph {
    pub fn empty(delta_t: usize, extent: f64) -> Self {
        SceneGraph { boxes: Vec::new(), ego: vec![Pose2::identity(); delta_t + 1], extent }
    }

    pub fn frames(&self) -> usize {
        self.ego.len()
    }

    /// Scene SDF: min of the ground plane (z) and every box.
    pub fn sdf(&self, p: Vec3, frame: usize) -> f64 {
        let mut d = p.z;
        for b in &self.boxes {
            d = d.min(b.sdf(p, frame));
        }
        d
    }

    /// SDF together with the class of the nearest surface.
    pub fn sdf_class(&self, p: Vec3, frame: usize) -> (f64, HitClass) {
        let mut d = p.z;
        let mut class = HitClass::Plane;
        for b in &self.boxes {
            let bd = b.sdf(p, frame);
            if bd < d {
                d = bd;
                class = match b.class {
                    BoxClass::Vehicle => HitClass::Vehicle,
                    BoxClass::Building => HitClass::Building,
                };
            }
        }
        (d, class)
    }

    /// Ego motion of `frame` relative to frame 0: (dx, dy, dyaw).
    pub fn ego_motion(&self, frame: usize) -> (f64, f64, f64) {
        self.ego[0].relative(self.ego[frame])
    }

    pub fn ego_is_moving(&self, frame: usize) -> bool {
        let (a, b) = if frame + 1 < self.ego.len() {
            (self.ego[frame], self.ego[frame + 1])
        } else {
            (self.ego[frame - 1], self.ego[frame])
        };
        let (dx, dy, dyaw) = a.relative(b);
        dx.hypot(dy) > 1e-3 || dyaw.abs() > 1e-3
    }
}

const SPHERE_TRACE_EPS: f64 = 1e-4;
const SPHERE_TRACE_MAX_ITERS: usize = 2000;

/// Sphere tracing: march by the SDF value, stop when |SDF| < 1e-4 or the
/// depth exceeds `max_range`.
pub fn raycast(
    scene: &SceneGraph,
    origin: Vec3,
    dir: Vec3,
    frame: usize,
    max_range: f64,
) -> Option<(f64, HitClass)> {
    debug_assert!((dir.norm() - 1.0).abs() < 1e-9, "raycast requires unit direction");
    let mut t = 0.0;
    for _ in 0..SPHERE_TRACE_MAX_ITERS {
        let p = origin.add(dir.scale(t));
        let (d, class) = scene.sdf_class(p, frame);
        if d.abs() < SPHERE_TRACE_EPS {
            return Some((t, class));
        }
        t += d;
        if t > max_range {
            return None;
        }
    }
    None
}

fn sample_range(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] >= range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..range[1])
    }
}

fn sample_count(rng: &mut ChaCha8Rng, range: [usize; 2]) -> usize {
    if range[0] >= range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..=range[1])
    }
}

const REJECTION_LIMIT: usize = 1000;
/// A box may not come closer than this to the ego position at any frame.
const EGO_CLEARANCE: f64 = 0.8;

/// Deterministic scene generation; boxes are rejection-sampled so that no
/// box ever intersects the ego position at any simulated frame.
pub fn generate_scene(seed: u64, cfg: &WorldConfig, delta_t: usize) -> Result<SceneGraph, SceneError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // ego trajectory first: either parked or driving a gentle arc
    let mut ego = vec![Pose2::identity()];
    let moving = rng.gen_range(0.0..1.0) < cfg.ego_moving_prob;
    let speed = if moving { sample_range(&mut rng, cfg.ego_speed) } else { 0.0 };
    let yaw_rate = if moving { sample_range(&mut rng, cfg.ego_yaw_rate) } else { 0.0 };
    for i in 0..delta_t {
        let prev = ego[i];
        let yaw = prev.yaw + yaw_rate;
        ego.push(Pose2 {
            x: prev.x + speed * prev.yaw.cos(),
            y: prev.y + speed * prev.yaw.sin(),
            yaw,
        });
    }

    let mut scene = SceneGraph { boxes: Vec::new(), ego, extent: cfg.extent };

    let n_vehicles = sample_count(&mut rng, cfg.vehicles);
    let n_buildings = sample_count(&mut rng, cfg.buildings);
    for class_idx in 0..n_vehicles + n_buildings {
        let class = if class_idx < n_vehicles { BoxClass::Vehicle } else { BoxClass::Building };
        let mut placed = false;
        for _attempt in 0..REJECTION_LIMIT {
            let margin = 2.0;
            let x = rng.gen_range(-(cfg.extent - margin)..(cfg.extent - margin));
            let y = rng.gen_range(-(cfg.extent - margin)..(cfg.extent - margin));
            let yaw = rng.gen_range(0.0..std::f64::consts::TAU);
            let (half, vel, yaw_rate) = match class {
                BoxClass::Vehicle => {
                    let half = Vec3::new(
                        rng.gen_range(1.2..2.4),
                        rng.gen_range(0.7..1.0),
                        rng.gen_range(0.6..0.9),
                    );
                    let speed = sample_range(&mut rng, cfg.vehicle_speed);
                    let vel = [speed * yaw.cos(), speed * yaw.sin()];
                    let yr = sample_range(&mut rng, cfg.vehicle_yaw_rate);
                    (half, vel, yr)
                }
                BoxClass::Building => {
                    let half = Vec3::new(
                        rng.gen_range(2.0..4.5),
                        rng.gen_range(2.0..4.5),
                        rng.gen_range(1.5..3.5),
                    );
                    (half, [0.0, 0.0], 0.0)
                }
            };
            let candidate = SceneBox {
                center: Vec3::new(x, y, half.z),
                half,
                yaw,
                class,
                vel,
                yaw_rate,
            };
            let clear = (0..scene.frames()).all(|f| {
                let e = scene.ego[f];
                candidate.sdf(Vec3::new(e.x, e.y, 0.9), f) > EGO_CLEARANCE
            });
            if clear {
                scene.boxes.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SceneError::RejectionExhausted(REJECTION_LIMIT));
        }
    }
    Ok(scene)
}
