//! Run configuration: one JSON document with per-subsystem sections.
//!
//! Unknown keys are rejected, defaults are materialized on load, and the
//! resolved document is written next to every output for provenance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Half-width of the square world, metres.
    pub extent: f64,
    pub vehicles: [usize; 2],
    pub buildings: [usize; 2],
    pub vehicle_speed: [f64; 2],
    pub vehicle_yaw_rate: [f64; 2],
    pub ego_moving_prob: f64,
    pub ego_speed: [f64; 2],
    pub ego_yaw_rate: [f64; 2],
    pub azimuth_bins: usize,
    pub elevation_rows: usize,
    pub elevation_deg: [f64; 2],
    pub lidar_max_range: f64,
    pub lidar_mount_height: f64,
    pub camera_width: usize,
    pub camera_height: usize,
    pub camera_focal_px: f64,
    pub camera_mount_height: f64,
    /// Caption quantizer: ranges below this are "near".
    pub near_threshold: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            extent: 16.0,
            vehicles: [1, 3],
            buildings: [1, 3],
            vehicle_speed: [1.0, 4.0],
            vehicle_yaw_rate: [-0.2, 0.2],
            ego_moving_prob: 0.8,
            ego_speed: [2.0, 5.0],
            ego_yaw_rate: [-0.15, 0.15],
            azimuth_bins: 32,
            elevation_rows: 8,
            elevation_deg: [-15.0, 5.0],
            lidar_max_range: 24.0,
            lidar_mount_height: 1.8,
            camera_width: 64,
            camera_height: 32,
            camera_focal_px: 32.0,
            camera_mount_height: 1.5,
            near_threshold: 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BevConfig {
    pub w: usize,
    pub h: usize,
    pub c: usize,
}

impl Default for BevConfig {
    fn default() -> Self {
        BevConfig { w: 32, h: 32, c: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Max,
    Avg,
    Attention,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Sequence-model channel width C.
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq: usize,
    pub n_world_queries: usize,
    pub pool_mode: PoolMode,
    pub separated_mode: bool,
    pub delta_t: usize,
    /// Test hook: bypass the shared language projection (requires 4c == C).
    pub projection_identity: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 96,
            layers: 4,
            heads: 4,
            max_seq: 256,
            n_world_queries: 4,
            pool_mode: PoolMode::Max,
            separated_mode: false,
            delta_t: 3,
            projection_identity: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub z: usize,
    pub c_prime: usize,
    pub samples_train: usize,
    pub samples_eval: usize,
    pub near: f64,
    pub far: f64,
    /// Rays with weight sum below this carry no surface.
    pub surface_eps: f64,
    /// Divide rendered depth by the weight sum when emitting points.
    pub renormalize_depth: bool,
    /// Stratified jitter of sample depths (off: deterministic midpoints).
    pub jitter: bool,
    /// Volume height span in metres.
    pub z_span: [f64; 2],
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            z: 8,
            c_prime: 16,
            samples_train: 64,
            samples_eval: 128,
            near: 0.5,
            far: 24.0,
            surface_eps: 1e-4,
            renormalize_depth: false,
            jitter: false,
            z_span: [-2.0, 6.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_phase_a")]
    pub steps_phase_a: usize,
    #[serde(default = "default_joint")]
    pub steps_joint: usize,
    /// Mandatory: every training run pins its seed.
    pub seed: u64,
    #[serde(default = "default_true")]
    pub cosine_decay: bool,
    #[serde(default = "default_frames")]
    pub supervised_frames: Vec<usize>,
    /// Optional deterministic ray subsampling per step (speed knob).
    #[serde(default)]
    pub rays_per_step: Option<usize>,
    /// Supervise non-returning rays at max range instead of excluding them.
    #[serde(default)]
    pub include_miss_rays: bool,
    #[serde(default = "default_precision")]
    pub precision: Precision,
}

fn default_lr() -> f64 {
    3e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_batch() -> usize {
    4
}
fn default_phase_a() -> usize {
    1000
}
fn default_joint() -> usize {
    5000
}
fn default_true() -> bool {
    true
}
fn default_frames() -> Vec<usize> {
    vec![0, 1, 2, 3]
}
fn default_precision() -> Precision {
    Precision::F32
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
            batch_size: default_batch(),
            steps_phase_a: default_phase_a(),
            steps_joint: default_joint(),
            seed: 0,
            cosine_decay: true,
            supervised_frames: default_frames(),
            rays_per_step: None,
            include_miss_rays: false,
            precision: default_precision(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundsPreset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub bounds: BoundsPreset,
    pub squared_chamfer: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { bounds: BoundsPreset::Desk, squared_chamfer: false }
    }
}

impl EvalConfig {
    /// (±xy, z_min, z_max), inclusive.
    pub fn bounds_box(&self) -> (f64, f64, f64) {
        match self.bounds {
            BoundsPreset::Desk => (16.0, -2.0, 6.0),
            BoundsPreset::Paper => (51.2, -3.0, 5.0),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub bev: BevConfig,
    pub model: ModelConfig,
    pub render: RenderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let w = &self.world;
        if w.extent <= 0.0 {
            return Err(invalid("world.extent must be positive"));
        }
        for (name, range) in [("vehicles", w.vehicles), ("buildings", w.buildings)] {
            if range[0] > range[1] || range[1] > 9 {
                return Err(invalid(format!("world.{name} range must be ordered and at most 9")));
            }
        }
        if w.azimuth_bins == 0 || w.elevation_rows == 0 {
            return Err(invalid("lidar needs at least one azimuth bin and elevation row"));
        }
        if w.lidar_max_range <= 0.0 {
            return Err(invalid("world.lidar_max_range must be positive"));
        }

        let b = &self.bev;
        if b.w % 4 != 0 || b.h % 4 != 0 || b.w == 0 || b.h == 0 {
            return Err(invalid("bev.w and bev.h must be positive multiples of 4"));
        }
        if b.c == 0 {
            return Err(invalid("bev.c must be positive"));
        }

        let m = &self.model;
        if m.width % m.heads != 0 {
            return Err(invalid("model.width must be divisible by model.heads"));
        }
        if m.delta_t == 0 {
            return Err(invalid("model.delta_t must be at least 1"));
        }
        let l_bev = (b.w / 4) * (b.h / 4);
        if m.n_world_queries == 0 || l_bev % m.n_world_queries != 0 {
            return Err(invalid(format!(
                "model.n_world_queries must divide the {l_bev} compressed BEV cells"
            )));
        }
        if region_grid(b.w / 4, b.h / 4, m.n_world_queries).is_none() {
            return Err(invalid("model.n_world_queries admits no rectangular region partition"));
        }
        if m.projection_identity && 4 * b.c != m.width {
            return Err(invalid("projection_identity requires 4*bev.c == model.width"));
        }

        let r = &self.render;
        if b.c % r.z != 0 {
            return Err(invalid("bev.c must be divisible by render.z"));
        }
        if r.samples_train < 2 || r.samples_eval < 2 {
            return Err(invalid("render sample counts must be at least 2"));
        }
        if !(r.near > 0.0 && r.far > r.near) {
            return Err(invalid("render.near/far must satisfy 0 < near < far"));
        }
        if r.z_span[0] >= r.z_span[1] {
            return Err(invalid("render.z_span must be increasing"));
        }

        let t = &self.train;
        if t.lr <= 0.0 || t.beta1 <= 0.0 || t.beta2 <= 0.0 || t.eps <= 0.0 {
            return Err(invalid("train rates must be positive"));
        }
        if t.batch_size == 0 {
            return Err(invalid("train.batch_size must be positive"));
        }
        if t.supervised_frames.is_empty() {
            return Err(invalid("train.supervised_frames must not be empty"));
        }
        for &f in &t.supervised_frames {
            if f > m.delta_t {
                return Err(invalid(format!("supervised frame {f} exceeds delta_t {}", m.delta_t)));
            }
        }
        Ok(())
    }

    /// Stable content hash of the resolved config (FNV-1a over JSON).
    pub fn content_hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = 0xcbf29ce484222325u64;
        for b in json.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Most-square (gw, gh) factorization of n that tiles a (w, h) grid.
pub fn region_grid(w: usize, h: usize, n: usize) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    for gw in 1..=n {
        if n % gw != 0 {
            continue;
        }
        let gh = n / gw;
        if w % gw != 0 || h % gh != 0 {
            continue;
        }
        let score = gw.abs_diff(gh);
        match best {
            Some((bw, bh)) if bw.abs_diff(bh) <= score => {}
            _ => best = Some((gw, gh)),
        }
    }
    best
}
