//! World queries and the current-to-future link.
//!
//! Queries are pooled from the compressed BEV, copied once per future frame,
//! conditioned on ego motion and a frame embedding, and projected through
//! the shared language-space MLP. After the sequence model enriches them,
//! three cross-attention blocks turn the encoded BEV plus each frame's
//! queries into that frame's future BEV.

use rand_chacha::ChaCha8Rng;

use crate::bevtok::SharedProjection;
use crate::config::{region_grid, ModelConfig, PoolMode};
use crate::nn::{Act, Init, Linear, Mlp2, Norm};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::params::{ParamId, ParamStore};

/// Planar ego-motion condition for one future frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EgoMotion {
    pub dx: f64,
    pub dy: f64,
    pub dyaw: f64,
}

impl EgoMotion {
    /// Network input features: yaw enters as (sin, cos) to avoid wraparound.
    pub fn features<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_vec(
            &[1, 4],
            vec![S::of(self.dx), S::of(self.dy), S::of(self.dyaw.sin()), S::of(self.dyaw.cos())],
        )
    }
}

struct LinkBlock {
    ln_q: Norm,
    cross_q: Linear,
    cross_k: Linear,
    cross_v: Linear,
    cross_o: Linear,
    ln_s: Norm,
    self_q: Linear,
    self_k: Linear,
    self_v: Linear,
    self_o: Linear,
    ln_f: Norm,
    fc1: Linear,
    fc2: Linear,
}

pub struct WorldLink {
    pub n_queries: usize,
    pub delta_t: usize,
    pub pool_mode: PoolMode,
    region: (usize, usize),
    heads: usize,
    width: usize,
    frame_emb: ParamId,
    ego_mlp: Mlp2,
    attn_probe: ParamId,
    blocks: Vec<LinkBlock>,
}

const LINK_BLOCKS: usize = 3;
const LINK_HEADS: usize = 4;

impl WorldLink {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        model: &ModelConfig,
        comp_w: usize,
        comp_h: usize,
        c4: usize,
    ) -> Self {
        let region = region_grid(comp_w, comp_h, model.n_world_queries)
            .expect("validated config admits a region partition");
        let frame_emb = store.randn("link.frame_emb", &[model.delta_t, c4], 0.02, rng);
        let ego_mlp = Mlp2::new(store, rng, "link.ego", 4, c4, c4, Act::Gelu, Init::He);
        let attn_probe = store.randn("link.pool_probe", &[c4, 1], 0.02, rng);
        let heads = if c4 % LINK_HEADS == 0 { LINK_HEADS } else { 1 };
        let blocks = (0..LINK_BLOCKS)
            .map(|b| {
                let p = format!("link.block{b}");
                LinkBlock {
                    ln_q: Norm::new(store, &format!("{p}.ln_q"), c4),
                    cross_q: Linear::new(store, rng, &format!("{p}.cross.q"), c4, c4, Init::He),
                    cross_k: Linear::new(store, rng, &format!("{p}.cross.k"), c4, c4, Init::He),
                    cross_v: Linear::new(store, rng, &format!("{p}.cross.v"), c4, c4, Init::He),
                    // residual output projections start at zero: the link is
                    // the identity at initialization
                    cross_o: Linear::new(store, rng, &format!("{p}.cross.o"), c4, c4, Init::Zero),
                    ln_s: Norm::new(store, &format!("{p}.ln_s"), c4),
                    self_q: Linear::new(store, rng, &format!("{p}.self.q"), c4, c4, Init::He),
                    self_k: Linear::new(store, rng, &format!("{p}.self.k"), c4, c4, Init::He),
                    self_v: Linear::new(store, rng, &format!("{p}.self.v"), c4, c4, Init::He),
                    self_o: Linear::new(store, rng, &format!("{p}.self.o"), c4, c4, Init::Zero),
                    ln_f: Norm::new(store, &format!("{p}.ln_f"), c4),
                    fc1: Linear::new(store, rng, &format!("{p}.ffn.fc1"), c4, 4 * c4, Init::He),
                    fc2: Linear::new(store, rng, &format!("{p}.ffn.fc2"), 4 * c4, c4, Init::Zero),
                }
            })
            .collect();
        WorldLink {
            n_queries: model.n_world_queries,
            delta_t: model.delta_t,
            pool_mode: model.pool_mode,
            region,
            heads,
            width: c4,
            frame_emb,
            ego_mlp,
            attn_probe,
            blocks,
        }
    }

    /// Pool the compressed BEV grid [w4, h4, 4c] into n query vectors.
    pub fn init_queries<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, comp: Var) -> Var {
        let shape = g.value(comp).shape().to_vec();
        assert_eq!(shape.len(), 3, "init_queries expects the compressed BEV grid");
        match self.pool_mode {
            PoolMode::Max => g.region_max_pool(comp, self.region),
            PoolMode::Avg => g.region_avg_pool(comp, self.region),
            PoolMode::Attention => self.attention_pool(g, store, comp),
        }
    }

    /// Single-probe attention pooling per region.
    fn attention_pool<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, comp: Var) -> Var {
        let shape = g.value(comp).shape().to_vec();
        let (w, h, c) = (shape[0], shape[1], shape[2]);
        let (gw, gh) = self.region;
        let (rw, rh) = (w / gw, h / gh);
        let flat = g.reshape(comp, &[w * h, c]);
        let probe = store.var(g, self.attn_probe);
        let scale = S::of(1.0 / (c as f64).sqrt());
        let mut outs = Vec::with_capacity(gw * gh);
        for rx in 0..gw {
            for ry in 0..gh {
                let mut idx = Vec::with_capacity(rw * rh);
                for ix in rx * rw..(rx + 1) * rw {
                    for iy in ry * rh..(ry + 1) * rh {
                        idx.push(ix * h + iy);
                    }
                }
                let cells = g.gather_rows(flat, &idx);
                let scores = g.matmul(cells, probe);
                let scores = g.scale(scores, scale);
                let lane = g.reshape(scores, &[1, idx.len()]);
                let probs = g.softmax(lane, 1);
                outs.push(g.matmul(probs, cells));
            }
        }
        g.concat_rows(&outs)
    }

    /// Eq.-style assembly: per frame i, Q + ego(i) + FE_i, concatenated and
    /// pushed through the shared language projection.
    pub fn assemble<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        proj: &SharedProjection,
        queries: Var,
        ego: &[EgoMotion],
    ) -> Var {
        assert_eq!(ego.len(), self.delta_t, "need one ego motion per future frame");
        let fe = store.var(g, self.frame_emb);
        let mut groups = Vec::with_capacity(self.delta_t);
        for (i, motion) in ego.iter().enumerate() {
            let feats = g.constant(motion.features::<S>());
            let e = self.ego_mlp.forward(g, store, feats);
            let e_row = g.reshape(e, &[self.width]);
            let with_ego = g.add_bias(queries, e_row);
            let fe_i = g.slice_rows(fe, i, 1);
            let fe_row = g.reshape(fe_i, &[self.width]);
            groups.push(g.add_bias(with_ego, fe_row));
        }
        let cat = g.concat_rows(&groups);
        proj.project_in(g, store, cat)
    }

    /// Ego embedding alone (separated ablation path): [1, 4c].
    pub fn ego_embedding<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, motion: &EgoMotion) -> Var {
        let feats = g.constant(motion.features::<S>());
        self.ego_mlp.forward(g, store, feats)
    }

    fn attention<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        q_in: Var,
        kv_in: Var,
        wq: &Linear,
        wk: &Linear,
        wv: &Linear,
        wo: &Linear,
    ) -> Var {
        let dh = self.width / self.heads;
        let q = wq.forward(g, store, q_in);
        let k = wk.forward(g, store, kv_in);
        let v = wv.forward(g, store, kv_in);
        let scale = S::of(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.heads);
        for hidx in 0..self.heads {
            let qh = g.slice_cols(q, hidx * dh, dh);
            let kh = g.slice_cols(k, hidx * dh, dh);
            let vh = g.slice_cols(v, hidx * dh, dh);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let probs = g.softmax(scores, 1);
            heads.push(g.matmul(probs, vh));
        }
        let cat = g.concat_cols(&heads);
        wo.forward(g, store, cat)
    }

    /// One frame's future BEV from the encoded BEV and that frame's queries.
    /// Pre-norm residual blocks; identity at zero-initialized output.
    fn link_one<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, b_t: Var, queries: Var) -> Var {
        let mut x = b_t;
        for blk in &self.blocks {
            let normed = blk.ln_q.forward(g, store, x);
            let cross = self.attention(g, store, normed, queries, &blk.cross_q, &blk.cross_k, &blk.cross_v, &blk.cross_o);
            x = g.add(x, cross);
            let normed = blk.ln_s.forward(g, store, x);
            let selfa = self.attention(g, store, normed, normed, &blk.self_q, &blk.self_k, &blk.self_v, &blk.self_o);
            x = g.add(x, selfa);
            let normed = blk.ln_f.forward(g, store, x);
            let h = blk.fc1.forward(g, store, normed);
            let h = g.gelu(h);
            let h = blk.fc2.forward(g, store, h);
            x = g.add(x, h);
        }
        x
    }

    /// Future BEV features, one per frame, processed independently.
    pub fn current_to_future<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        b_t: Var,
        queries_per_frame: &[Var],
    ) -> Vec<Var> {
        assert_eq!(
            queries_per_frame.len(),
            self.delta_t,
            "need encoded queries for every future frame"
        );
        queries_per_frame.iter().map(|&q| self.link_one(g, store, b_t, q)).collect()
    }

    /// Separated-unification ablation: the raw compressed BEV bypasses the
    /// sequence model and each frame is conditioned on its ego embedding
    /// alone (no world queries).
    pub fn separated_mode_future<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        raw_comp_flat: Var,
        ego: &[EgoMotion],
    ) -> Vec<Var> {
        assert_eq!(ego.len(), self.delta_t);
        ego.iter()
            .map(|m| {
                let e = self.ego_embedding(g, store, m);
                self.link_one(g, store, raw_comp_flat, e)
            })
            .collect()
    }
}
