//! BEV-to-point renderer: lifts a (current or future) BEV feature into a
//! volumetric feature, evaluates an implicit SDF field at ray samples, and
//! integrates per-ray depths with occlusion-aware weights.
//!
//! Per ray, with sigmoid-warped SDF values u_i = sig(t * s_i):
//!   alpha_i = max((u_i - u_{i+1}) / u_i, 0)
//!   T_i     = prod_{j<i} (1 - alpha_j)
//!   w_i     = T_i * alpha_i
//!   depth   = sum_i w_i * d_i       (left sample depth of each interval)

use rand_chacha::ChaCha8Rng;

use crate::config::{RenderConfig, WorldConfig};
use crate::nn::{Init, Linear};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::params::{ParamId, ParamStore};
use crate::toyworld::{LidarSpec, Vec3};
use crate::worldlink::EgoMotion;

/// Metric mapping of the volume grid: x/y follow the BEV grid, z spans the
/// configured band.
#[derive(Debug, Clone, Copy)]
pub struct VolumeGeom {
    pub w: usize,
    pub h: usize,
    pub z: usize,
    pub extent: f64,
    pub z_span: [f64; 2],
}

impl VolumeGeom {
    /// Frame-0 ego position -> continuous voxel coordinates.
    pub fn voxel_of(&self, p: [f64; 3]) -> [f64; 3] {
        let cell_x = 2.0 * self.extent / self.w as f64;
        let cell_y = 2.0 * self.extent / self.h as f64;
        let cell_z = (self.z_span[1] - self.z_span[0]) / self.z as f64;
        [
            (p[0] + self.extent) / cell_x - 0.5,
            (p[1] + self.extent) / cell_y - 0.5,
            (p[2] - self.z_span[0]) / cell_z - 0.5,
        ]
    }

    /// Frame-0 ego position -> [-1, 1]^3 (position input of the SDF field).
    pub fn normalized(&self, p: [f64; 3]) -> [f64; 3] {
        let zmid = 0.5 * (self.z_span[0] + self.z_span[1]);
        let zhal = 0.5 * (self.z_span[1] - self.z_span[0]);
        [p[0] / self.extent, p[1] / self.extent, (p[2] - zmid) / zhal]
    }
}

/// A batch of rays with shared deterministic sample depths.
#[derive(Debug, Clone)]
pub struct RayBundle {
    /// Frame-0 ego coordinates.
    pub origins: Vec<[f64; 3]>,
    pub dirs: Vec<[f64; 3]>,
    /// Strictly increasing bin-midpoint depths in [near, far].
    pub sample_depths: Vec<f64>,
}

impl RayBundle {
    pub fn n_rays(&self) -> usize {
        self.origins.len()
    }

    pub fn select(&self, idx: &[usize]) -> RayBundle {
        RayBundle {
            origins: idx.iter().map(|&i| self.origins[i]).collect(),
            dirs: idx.iter().map(|&i| self.dirs[i]).collect(),
            sample_depths: self.sample_depths.clone(),
        }
    }
}

/// Midpoints of n equal bins of [near, far]; optional stratified jitter.
pub fn sample_depths(cfg: &RenderConfig, n: usize, jitter_rng: Option<&mut ChaCha8Rng>) -> Vec<f64> {
    use rand::Rng;
    let bin = (cfg.far - cfg.near) / n as f64;
    match jitter_rng {
        Some(rng) if cfg.jitter => {
            (0..n).map(|i| cfg.near + (i as f64 + rng.gen_range(0.05..0.95)) * bin).collect()
        }
        _ => (0..n).map(|i| cfg.near + (i as f64 + 0.5) * bin).collect(),
    }
}

/// The full LiDAR grid for one frame, shifted by that frame's ego motion and
/// expressed in frame-0 coordinates.
pub fn build_rays(lidar: &LidarSpec, motion: &EgoMotion, cfg: &RenderConfig, n_samples: usize) -> RayBundle {
    let mount = Vec3::new(0.0, 0.0, lidar.mount_height);
    let origin0 = mount.rot_z(motion.dyaw).add(Vec3::new(motion.dx, motion.dy, 0.0));
    let mut origins = Vec::with_capacity(lidar.n_rays());
    let mut dirs = Vec::with_capacity(lidar.n_rays());
    for a in 0..lidar.azimuth_bins {
        for e in 0..lidar.elevation_rows {
            let d = lidar.direction(a, e).rot_z(motion.dyaw);
            origins.push([origin0.x, origin0.y, origin0.z]);
            dirs.push([d.x, d.y, d.z]);
        }
    }
    RayBundle { origins, dirs, sample_depths: sample_depths(cfg, n_samples, None) }
}

/// Shallow SDF field over (normalized position ⊕ trilinear feature), with a
/// learnable sharpness t stored as exp(parameter).
pub struct SdfField {
    l1: Linear,
    l2: Linear,
    l3: Linear,
    log_t: ParamId,
}

pub const SDF_HIDDEN: usize = 64;
const T_INIT: f64 = 10.0;

impl SdfField {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, c_prime: usize) -> Self {
        let d_in = 3 + c_prime;
        SdfField {
            l1: Linear::new(store, rng, "render.sdf.l1", d_in, SDF_HIDDEN, Init::He),
            l2: Linear::new(store, rng, "render.sdf.l2", SDF_HIDDEN, SDF_HIDDEN, Init::He),
            l3: Linear::new(store, rng, "render.sdf.l3", SDF_HIDDEN, 1, Init::He),
            log_t: store.register("render.sdf.log_t", Tensor::scalar(S::of(T_INIT.ln())), false),
        }
    }

    pub fn eval<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let h = self.l1.forward(g, store, x);
        let h = g.softplus(h);
        let h = self.l2.forward(g, store, h);
        let h = g.softplus(h);
        self.l3.forward(g, store, h)
    }

    /// Sharpness t > 0, positive by construction.
    pub fn temperature<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>) -> Var {
        let logt = store.var(g, self.log_t);
        g.exp(logt)
    }
}

struct ConvP {
    w: ParamId,
    b: ParamId,
}

pub struct Renderer {
    up1: ConvP,
    up2: ConvP,
    c3d1: ConvP,
    c3d2: ConvP,
    pub sdf: SdfField,
    pub geom: VolumeGeom,
    pub c_prime: usize,
    bev_c: usize,
}

/// Shape law of the volume lift: a (w/4 x h/4) token grid of width 4c comes
/// back as a [w, h, z, c'] volume.
pub fn lift_volume_out_shape(w4: usize, h4: usize, z: usize, c_prime: usize) -> (usize, usize, usize, usize) {
    (4 * w4, 4 * h4, z, c_prime)
}

impl Renderer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        world: &WorldConfig,
        bev_w: usize,
        bev_h: usize,
        bev_c: usize,
        cfg: &RenderConfig,
    ) -> Self {
        assert_eq!(bev_c % cfg.z, 0, "bev channels must split across volume height");
        let c4 = 4 * bev_c;
        let c2 = 2 * bev_c;
        let zc = bev_c / cfg.z;
        let conv2d = |name: &str, cin: usize, cout: usize, store: &mut ParamStore<S>, rng: &mut ChaCha8Rng| ConvP {
            w: store.he(&format!("{name}.weight"), &[3, 3, cin, cout], 9 * cin, rng),
            b: store.zeros(&format!("{name}.bias"), &[cout]),
        };
        let up1 = conv2d("render.up1", c4, c2, store, rng);
        let up2 = conv2d("render.up2", c2, bev_c, store, rng);
        let c3d1 = ConvP {
            w: store.he("render.c3d1.weight", &[3, 3, 3, zc, cfg.c_prime], 27 * zc, rng),
            b: store.zeros("render.c3d1.bias", &[cfg.c_prime]),
        };
        let c3d2 = ConvP {
            w: store.he("render.c3d2.weight", &[3, 3, 3, cfg.c_prime, cfg.c_prime], 27 * cfg.c_prime, rng),
            b: store.zeros("render.c3d2.bias", &[cfg.c_prime]),
        };
        let sdf = SdfField::new(store, rng, cfg.c_prime);
        Renderer {
            up1,
            up2,
            c3d1,
            c3d2,
            sdf,
            geom: VolumeGeom {
                w: bev_w,
                h: bev_h,
                z: cfg.z,
                extent: world.extent,
                z_span: cfg.z_span,
            },
            c_prime: cfg.c_prime,
            bev_c,
        }
    }

    /// [L_bev, 4c] tokens -> [w, h, z, c'] volumetric feature.
    pub fn lift_volume<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, b: Var) -> Var {
        let shape = g.value(b).shape().to_vec();
        let (w4, h4) = (self.geom.w / 4, self.geom.h / 4);
        assert_eq!(shape, vec![w4 * h4, 4 * self.bev_c], "encoded BEV token shape");
        let grid = g.reshape(b, &[w4, h4, 4 * self.bev_c]);
        let x = g.upsample2x(grid);
        let w1 = store.var(g, self.up1.w);
        let b1 = store.var(g, self.up1.b);
        let x = g.conv2d(x, w1, b1, 1);
        let x = g.gelu(x);
        let x = g.upsample2x(x);
        let w2 = store.var(g, self.up2.w);
        let b2 = store.var(g, self.up2.b);
        let x = g.conv2d(x, w2, b2, 1);
        let x = g.gelu(x);
        // split channels into (z, c/z): adds the height dimension
        let zc = self.bev_c / self.geom.z;
        let x = g.reshape(x, &[self.geom.w, self.geom.h, self.geom.z, zc]);
        let w3 = store.var(g, self.c3d1.w);
        let b3 = store.var(g, self.c3d1.b);
        let x = g.conv3d(x, w3, b3);
        let x = g.gelu(x);
        let w4v = store.var(g, self.c3d2.w);
        let b4 = store.var(g, self.c3d2.b);
        g.conv3d(x, w4v, b4)
    }

    /// Point features for every (ray, sample): positions in voxel and
    /// normalized coordinates, as constant graph inputs.
    fn sample_positions<S: Scalar>(&self, bundle: &RayBundle) -> (Tensor<S>, Tensor<S>) {
        let n = bundle.sample_depths.len();
        let r = bundle.n_rays();
        let mut vox = Vec::with_capacity(r * n * 3);
        let mut norm = Vec::with_capacity(r * n * 3);
        for (o, d) in bundle.origins.iter().zip(bundle.dirs.iter()) {
            for &depth in &bundle.sample_depths {
                let p = [o[0] + depth * d[0], o[1] + depth * d[1], o[2] + depth * d[2]];
                let v = self.geom.voxel_of(p);
                let nn = self.geom.normalized(p);
                vox.extend_from_slice(&[S::of(v[0]), S::of(v[1]), S::of(v[2])]);
                norm.extend_from_slice(&[S::of(nn[0]), S::of(nn[1]), S::of(nn[2])]);
            }
        }
        (Tensor::from_vec(&[r * n, 3], vox), Tensor::from_vec(&[r * n, 3], norm))
    }

    /// Render every ray of the bundle against the volume.
    /// Returns (depth, weight sum), both [n_rays].
    pub fn render_depth<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        vol: Var,
        bundle: &RayBundle,
    ) -> (Var, Var) {
        let n = bundle.sample_depths.len();
        assert!(n >= 2, "need at least two samples per ray");
        let r = bundle.n_rays();
        let (vox, norm) = self.sample_positions::<S>(bundle);
        let pos_vox = g.constant(vox);
        let pos_norm = g.constant(norm);
        let feats = g.trilinear_sample(vol, pos_vox);
        let x = g.concat_cols(&[pos_norm, feats]);
        let s = self.sdf.eval(g, store, x);
        let s_mat = g.reshape(s, &[r, n]);
        let t = self.sdf.temperature(g, store);
        let st = g.mul_scalar_var(s_mat, t);
        let alpha = g.sdf_opacity(st);
        let w = g.survival_weights(alpha);
        // left sample depth of each interval
        let mut dleft = Vec::with_capacity(r * (n - 1));
        for _ in 0..r {
            for i in 0..n - 1 {
                dleft.push(S::of(bundle.sample_depths[i]));
            }
        }
        let dmat = g.constant(Tensor::from_vec(&[r, n - 1], dleft));
        let wd = g.mul(w, dmat);
        let depth = g.sum_cols(wd);
        let wsum = g.sum_cols(w);
        (depth, wsum)
    }
}

/// Frame weight schedule: lambda_i = 1 + 0.5 * i.
pub fn lambda_for_frame(i: usize) -> f64 {
    1.0 + 0.5 * i as f64
}

/// One supervised frame of the depth loss.
pub struct DepthLossTerm<S> {
    /// Rendered depths of the frame's returning rays.
    pub pred: Var,
    pub gt: Vec<S>,
    pub lambda: S,
}

/// L_D = sum_i lambda_i * mean_k |d_k - d~_k|. Frames with no returning rays
/// contribute zero and raise the warning flag.
pub fn depth_loss<S: Scalar>(g: &mut Graph<S>, terms: &[DepthLossTerm<S>]) -> (Var, bool) {
    let mut total: Option<Var> = None;
    let mut warned = false;
    for term in terms {
        if term.gt.is_empty() {
            warned = true;
            continue;
        }
        let n = term.gt.len();
        assert_eq!(g.value(term.pred).numel(), n, "depth_loss prediction/gt mismatch");
        let gt = g.constant(Tensor::from_vec(&[n], term.gt.clone()));
        let diff = g.sub(term.pred, gt);
        let l1 = g.abs(diff);
        let summed = g.sum(l1);
        let scaled = g.scale(summed, term.lambda / S::of(n as f64));
        total = Some(match total {
            Some(t) => g.add(t, scaled),
            None => scaled,
        });
    }
    match total {
        Some(t) => (t, warned),
        None => (g.constant(Tensor::scalar(S::zero())), true),
    }
}
