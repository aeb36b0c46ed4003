//! BEV world tokenizer: geometric pixel-ray splatting onto a metric grid,
//! a two-stage stride-2 downsampling block, and the flatten/projection into
//! sequence tokens.
//!
//! Grid convention: cell (ix, iy) covers x in [-extent + ix*cell, ...), the
//! grid is axis-aligned with the frame-0 ego frame (x forward, y left), and
//! flattening is x-major: token index = ix * h + iy.

use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

use crate::config::{BevConfig, ModelConfig, WorldConfig};
use crate::nn::{Act, Init, Mlp2};
use crate::numerics::{Graph, RowLists, Scalar, Var};
use crate::params::ParamStore;
use crate::toyworld::{CameraSpec, IMG_CHANNELS, N_VIEWS};

/// Precomputed pixel-to-cell traversal pattern. Camera geometry is rigid in
/// the ego frame, so the pattern is shared by every frame and scene.
#[derive(Debug, Clone)]
pub struct SplatPattern {
    /// For each BEV cell (x-major), the pixels whose rays cross it.
    pub cell_pixels: RowLists,
    pub n_pixels: usize,
}

/// March one 2-D ray through the grid from `(start_x, start_y)` (metres,
/// ego frame), visiting every crossed cell out to the grid boundary.
fn trace_cells(
    start_x: f64,
    start_y: f64,
    dir_x: f64,
    dir_y: f64,
    w: usize,
    h: usize,
    extent: f64,
) -> Vec<(usize, usize)> {
    let norm = dir_x.hypot(dir_y);
    if norm < 1e-9 {
        return Vec::new(); // vertical ray projects to a point
    }
    let (dx, dy) = (dir_x / norm, dir_y / norm);
    let cell = 2.0 * extent / w as f64;
    debug_assert!((2.0 * extent / h as f64 - cell).abs() < 1e-9, "square cells expected");
    let mut ix = ((start_x + extent) / cell).floor() as isize;
    let mut iy = ((start_y + extent) / cell).floor() as isize;
    let step_x: isize = if dx > 0.0 { 1 } else { -1 };
    let step_y: isize = if dy > 0.0 { 1 } else { -1 };
    let boundary = |i: isize, step: isize| -> f64 {
        let edge_idx = if step > 0 { i + 1 } else { i };
        -extent + edge_idx as f64 * cell
    };
    let mut t_max_x = if dx != 0.0 { (boundary(ix, step_x) - start_x) / dx } else { f64::INFINITY };
    let mut t_max_y = if dy != 0.0 { (boundary(iy, step_y) - start_y) / dy } else { f64::INFINITY };
    let t_delta_x = if dx != 0.0 { cell / dx.abs() } else { f64::INFINITY };
    let t_delta_y = if dy != 0.0 { cell / dy.abs() } else { f64::INFINITY };
    let mut cells = Vec::new();
    loop {
        if ix < 0 || iy < 0 || ix >= w as isize || iy >= h as isize {
            break;
        }
        cells.push((ix as usize, iy as usize));
        if t_max_x < t_max_y {
            ix += step_x;
            t_max_x += t_delta_x;
        } else {
            iy += step_y;
            t_max_y += t_delta_y;
        }
    }
    cells
}

impl SplatPattern {
    pub fn build(cams: &CameraSpec, bev: &BevConfig, world: &WorldConfig) -> Self {
        let n_pixels = N_VIEWS * cams.width * cams.height;
        let mut lists: Vec<Vec<u32>> = vec![Vec::new(); bev.w * bev.h];
        for view in 0..N_VIEWS {
            for u in 0..cams.width {
                for v in 0..cams.height {
                    let ray = cams.pixel_ray(view, u, v);
                    let pixel = ((view * cams.width + u) * cams.height + v) as u32;
                    for (ix, iy) in trace_cells(0.0, 0.0, ray.x, ray.y, bev.w, bev.h, world.extent) {
                        lists[ix * bev.h + iy].push(pixel);
                    }
                }
            }
        }
        SplatPattern { cell_pixels: Arc::new(lists), n_pixels }
    }
}

pub struct BevTokenizer {
    pub pattern: SplatPattern,
    lift1: LiftConv,
    lift2: LiftConv,
    ds1: LiftConv,
    ds2: LiftConv,
    pub bev: BevConfig,
}

struct LiftConv {
    w: crate::params::ParamId,
    b: crate::params::ParamId,
}

impl LiftConv {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        kdims: &[usize],
        fan_in: usize,
        cout: usize,
    ) -> Self {
        let w = store.he(&format!("{name}.weight"), kdims, fan_in, rng);
        let b = store.zeros(&format!("{name}.bias"), &[cout]);
        LiftConv { w, b }
    }
}

/// Output shape law of the downsampling block: (w, h, c) -> (w/4, h/4, 4c).
pub fn downsample_out_shape(w: usize, h: usize, c: usize) -> (usize, usize, usize) {
    let after1 = (crate::numerics::kernels::conv2d_out_dim(w, 2), crate::numerics::kernels::conv2d_out_dim(h, 2));
    let after2 = (crate::numerics::kernels::conv2d_out_dim(after1.0, 2), crate::numerics::kernels::conv2d_out_dim(after1.1, 2));
    (after2.0, after2.1, 4 * c)
}

impl BevTokenizer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        bev: &BevConfig,
        world: &WorldConfig,
    ) -> Self {
        let cams = CameraSpec::from_world(world);
        let pattern = SplatPattern::build(&cams, bev, world);
        let c = bev.c;
        BevTokenizer {
            pattern,
            lift1: LiftConv::new(store, rng, "bevtok.lift1", &[3, 3, IMG_CHANNELS, c], 9 * IMG_CHANNELS, c),
            lift2: LiftConv::new(store, rng, "bevtok.lift2", &[3, 3, c, c], 9 * c, c),
            ds1: LiftConv::new(store, rng, "bevtok.ds1", &[3, 3, c, 2 * c], 9 * c, 2 * c),
            ds2: LiftConv::new(store, rng, "bevtok.ds2", &[3, 3, 2 * c, 4 * c], 9 * 2 * c, 4 * c),
            bev: bev.clone(),
        }
    }

    /// Geometric splat only (before the conv stack): [w, h, IMG_CHANNELS].
    pub fn splat<S: Scalar>(&self, g: &mut Graph<S>, images: Var) -> Var {
        let shape = g.value(images).shape().to_vec();
        assert_eq!(shape, vec![self.pattern.n_pixels, IMG_CHANNELS], "images must be [pixels, channels]");
        let pooled = g.scatter_mean_rows(images, self.pattern.cell_pixels.clone());
        g.reshape(pooled, &[self.bev.w, self.bev.h, IMG_CHANNELS])
    }

    /// Lift multi-view images into the BEV grid: [w, h, c].
    pub fn lift_to_bev<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, images: Var) -> Var {
        let grid = self.splat(g, images);
        let w1 = store.var(g, self.lift1.w);
        let b1 = store.var(g, self.lift1.b);
        let x = g.conv2d(grid, w1, b1, 1);
        let x = g.gelu(x);
        let w2 = store.var(g, self.lift2.w);
        let b2 = store.var(g, self.lift2.b);
        g.conv2d(x, w2, b2, 1)
    }

    /// Two stride-2 conv blocks: [w, h, c] -> [w/4, h/4, 4c].
    pub fn downsample<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, bev_grid: Var) -> Var {
        let shape = g.value(bev_grid).shape().to_vec();
        assert!(shape[0] % 4 == 0 && shape[1] % 4 == 0, "downsample needs dims divisible by 4, got {shape:?}");
        let w1 = store.var(g, self.ds1.w);
        let b1 = store.var(g, self.ds1.b);
        let x = g.conv2d(bev_grid, w1, b1, 2);
        let x = g.gelu(x);
        let w2 = store.var(g, self.ds2.w);
        let b2 = store.var(g, self.ds2.b);
        let x = g.conv2d(x, w2, b2, 2);
        g.gelu(x)
    }
}

/// Language-space projection shared between BEV tokens and world queries
/// (4c -> C), plus the shared output projection (C -> 4c).
pub struct SharedProjection {
    pub into_seq: Mlp2,
    pub out_of_seq: Mlp2,
    pub identity: bool,
    pub c4: usize,
    pub width: usize,
}

impl SharedProjection {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        bev: &BevConfig,
        model: &ModelConfig,
    ) -> Self {
        let c4 = 4 * bev.c;
        let width = model.width;
        SharedProjection {
            into_seq: Mlp2::new(store, rng, "proj.in", c4, width, width, Act::Gelu, Init::He),
            out_of_seq: Mlp2::new(store, rng, "proj.out", width, c4, c4, Act::Gelu, Init::He),
            identity: model.projection_identity,
            c4,
            width,
        }
    }

    /// Per-token projection into the sequence space.
    pub fn project_in<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        if self.identity {
            assert_eq!(self.c4, self.width, "identity projection needs 4c == C");
            return x;
        }
        self.into_seq.forward(g, store, x)
    }

    /// Shared out-projection applied to BEV and query positions only.
    pub fn project_out<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        if self.identity {
            return x;
        }
        self.out_of_seq.forward(g, store, x)
    }
}

/// Row-major (x-major) flatten followed by the shared projection: [L_bev, C].
pub fn flatten_project<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    proj: &SharedProjection,
    comp: Var,
) -> Var {
    let shape = g.value(comp).shape().to_vec();
    assert_eq!(shape.len(), 3, "compressed BEV must be [w/4, h/4, 4c]");
    let l_bev = shape[0] * shape[1];
    let flat = g.reshape(comp, &[l_bev, shape[2]]);
    proj.project_in(g, store, flat)
}
