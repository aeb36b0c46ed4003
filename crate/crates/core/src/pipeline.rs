//! End-to-end model: tokenizer, sequence model, world link, and renderer
//! over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bevtok::{flatten_project, BevTokenizer, SharedProjection};
use crate::config::RunConfig;
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::params::ParamStore;
use crate::render::{
    build_rays, depth_loss, lambda_for_frame, DepthLossTerm, RayBundle, Renderer,
};
use crate::seqmodel::{
    greedy_decode, ntp_loss, ntp_targets, text_tokens, SequenceLayout, Transformer, Vocabulary,
};
use crate::toyworld::{supervision_rays, FrameSample, LidarSpec, Vec3, IMG_CHANNELS};
use crate::worldlink::{EgoMotion, WorldLink};

pub struct Pipeline<S: Scalar> {
    pub cfg: RunConfig,
    pub store: ParamStore<S>,
    pub vocab: Vocabulary,
    pub tokenizer: BevTokenizer,
    pub proj: SharedProjection,
    pub seq: Transformer,
    pub link: WorldLink,
    pub renderer: Renderer,
    pub lidar: LidarSpec,
}

pub struct JointOut {
    pub l_n: Var,
    pub l_d: Var,
    pub ntp_warn: bool,
    pub depth_warn: bool,
}

struct JointEncoded {
    l_n: Var,
    ntp_warn: bool,
    /// Renderer inputs: frame 0 (encoded current BEV), then the futures.
    frame_sources: Vec<Var>,
}

pub struct Generated {
    pub answer: String,
    /// One cloud per frame 0..=delta_t, in that frame's own ego coordinates.
    pub clouds: Vec<Vec<[f64; 3]>>,
}

impl<S: Scalar> Pipeline<S> {
    /// Deterministic initialization from the training seed.
    pub fn init(cfg: &RunConfig) -> Self {
        cfg.validate().expect("validated config");
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let mut store = ParamStore::new();
        let vocab = Vocabulary::toy();
        let tokenizer = BevTokenizer::new(&mut store, &mut rng, &cfg.bev, &cfg.world);
        let proj = SharedProjection::new(&mut store, &mut rng, &cfg.bev, &cfg.model);
        let seq = Transformer::new(&mut store, &mut rng, &cfg.model, vocab.len());
        let link = WorldLink::new(
            &mut store,
            &mut rng,
            &cfg.model,
            cfg.bev.w / 4,
            cfg.bev.h / 4,
            4 * cfg.bev.c,
        );
        let renderer = Renderer::new(
            &mut store,
            &mut rng,
            &cfg.world,
            cfg.bev.w,
            cfg.bev.h,
            cfg.bev.c,
            &cfg.render,
        );
        let lidar = LidarSpec::from_world(&cfg.world);
        Pipeline { cfg: cfg.clone(), store, vocab, tokenizer, proj, seq, link, renderer, lidar }
    }

    pub fn delta_t(&self) -> usize {
        self.cfg.model.delta_t
    }

    pub fn l_bev(&self) -> usize {
        (self.cfg.bev.w / 4) * (self.cfg.bev.h / 4)
    }

    fn images_var(&self, g: &mut Graph<S>, sample: &FrameSample) -> Var {
        let n_pixels = self.tokenizer.pattern.n_pixels;
        assert_eq!(sample.images.len(), n_pixels * IMG_CHANNELS, "image payload size");
        let t = Tensor::from_f32_slice(&[n_pixels, IMG_CHANNELS], &sample.images);
        g.constant(t)
    }

    fn ego_motions(&self, sample: &FrameSample) -> Vec<EgoMotion> {
        sample
            .ego_motion
            .iter()
            .map(|m| EgoMotion { dx: m[0] as f64, dy: m[1] as f64, dyaw: m[2] as f64 })
            .collect()
    }

    /// Supervision bundle for one frame: returning rays (plus, optionally,
    /// misses pinned at max range), optionally deterministically subsampled.
    fn frame_bundle(
        &self,
        sample: &FrameSample,
        frame: usize,
        n_samples: usize,
        subsample: Option<(usize, u64)>, // (rays_per_step, mix seed)
    ) -> (RayBundle, Vec<S>) {
        let mut rays = supervision_rays(sample, &self.lidar, frame);
        if self.cfg.train.include_miss_rays {
            self.append_miss_rays(sample, frame, &mut rays);
        }
        let mut idx: Vec<usize> = (0..rays.len()).collect();
        if let Some((m, mix)) = subsample {
            if m < idx.len() {
                use rand::seq::SliceRandom;
                let mut rng = ChaCha8Rng::seed_from_u64(mix ^ (frame as u64).wrapping_mul(0x9E37));
                idx.shuffle(&mut rng);
                idx.truncate(m);
                idx.sort_unstable();
            }
        }
        let bundle = RayBundle {
            origins: idx.iter().map(|&i| rays.origins[i]).collect(),
            dirs: idx.iter().map(|&i| rays.dirs[i]).collect(),
            sample_depths: crate::render::sample_depths(&self.cfg.render, n_samples, None),
        };
        let gt: Vec<S> = idx.iter().map(|&i| S::of(rays.depths[i])).collect();
        (bundle, gt)
    }

    /// Rays of LiDAR bins without a return, supervised at max range.
    fn append_miss_rays(&self, sample: &FrameSample, frame: usize, rays: &mut crate::toyworld::FrameRays) {
        use std::collections::HashSet;
        let hit_bins: HashSet<usize> = rays.bins.iter().copied().collect();
        let motion = if frame == 0 {
            EgoMotion::default()
        } else {
            let m = sample.ego_motion[frame - 1];
            EgoMotion { dx: m[0] as f64, dy: m[1] as f64, dyaw: m[2] as f64 }
        };
        let grid = build_rays(&self.lidar, &motion, &self.cfg.render, 2);
        for a in 0..self.lidar.azimuth_bins {
            for e in 0..self.lidar.elevation_rows {
                let bin = a * self.lidar.elevation_rows + e;
                if hit_bins.contains(&bin) {
                    continue;
                }
                rays.origins.push(grid.origins[bin]);
                rays.dirs.push(grid.dirs[bin]);
                rays.depths.push(self.lidar.max_range);
                rays.bins.push(bin);
            }
        }
    }

    /// Phase A: reconstruct the current frame through tokenizer + renderer
    /// only. Returns the depth loss (lambda_0 = 1).
    pub fn phase_a_loss(&self, g: &mut Graph<S>, sample: &FrameSample) -> (Var, bool) {
        let images = self.images_var(g, sample);
        let bev = self.tokenizer.lift_to_bev(g, &self.store, images);
        let comp = self.tokenizer.downsample(g, &self.store, bev);
        let l_bev = self.l_bev();
        let flat = g.reshape(comp, &[l_bev, 4 * self.cfg.bev.c]);
        let vol = self.renderer.lift_volume(g, &self.store, flat);
        let (bundle, gt) = self.frame_bundle(
            sample,
            0,
            self.cfg.render.samples_train,
            self.cfg.train.rays_per_step.map(|m| (m, self.cfg.train.seed)),
        );
        if gt.is_empty() {
            return (g.constant(Tensor::scalar(S::zero())), true);
        }
        let (pred, _wsum) = self.renderer.render_depth(g, &self.store, vol, &bundle);
        depth_loss(g, &[DepthLossTerm { pred, gt, lambda: S::of(lambda_for_frame(0)) }])
    }

    /// Teacher-forced encoding up to the per-frame BEV sources used by the
    /// renderer (frame 0 first, then the generated future frames).
    fn joint_encode(&self, g: &mut Graph<S>, sample: &FrameSample) -> JointEncoded {
        let delta_t = self.delta_t();
        assert_eq!(sample.ego_motion.len(), delta_t, "dataset delta_t mismatch");
        let images = self.images_var(g, sample);
        let bev = self.tokenizer.lift_to_bev(g, &self.store, images);
        let comp = self.tokenizer.downsample(g, &self.store, bev);
        let l_bev = self.l_bev();
        let c4 = 4 * self.cfg.bev.c;
        let ego = self.ego_motions(sample);

        // understanding path (always trained)
        let f_t = flatten_project(g, &self.store, &self.proj, comp);
        let (prompt_toks, answer_toks) =
            text_tokens(&self.vocab, &sample.prompt, &sample.answer).expect("grammar text");
        let text_ids: Vec<usize> =
            prompt_toks.iter().chain(answer_toks.iter()).copied().collect();
        let text_emb = self.seq.embed_tokens(g, &self.store, &text_ids);

        let (queries_projected, n_query_positions) = if self.cfg.model.separated_mode {
            (None, 0)
        } else {
            let q = self.link.init_queries(g, &self.store, comp);
            let qw = self.link.assemble(g, &self.store, &self.proj, q, &ego);
            (Some(qw), delta_t * self.link.n_queries)
        };

        let mut parts = vec![f_t, text_emb];
        if let Some(qw) = queries_projected {
            parts.push(qw);
        }
        let embedded = g.concat_rows(&parts);
        let layout = SequenceLayout {
            l_bev,
            prompt_len: prompt_toks.len(),
            answer_len: answer_toks.len(),
            n_queries: n_query_positions,
        };
        let out = self.seq.forward(g, &self.store, embedded, &layout).expect("sequence fits");
        let (targets, mask) = ntp_targets(&prompt_toks, &answer_toks);
        let (l_n, ntp_warn) = ntp_loss(g, out.text_logits, &targets, &mask);

        // generation path
        let frame_sources: Vec<Var> = if self.cfg.model.separated_mode {
            let raw = g.reshape(comp, &[l_bev, c4]);
            let futures = self.link.separated_mode_future(g, &self.store, raw, &ego);
            std::iter::once(raw).chain(futures).collect()
        } else {
            let bev_h = g.slice_rows(out.hidden, 0, l_bev);
            let b_t = self.proj.project_out(g, &self.store, bev_h);
            let q_h = g.slice_rows(out.hidden, layout.query_start(), n_query_positions);
            let q_enc = self.proj.project_out(g, &self.store, q_h);
            let per_frame: Vec<Var> = (0..delta_t)
                .map(|i| g.slice_rows(q_enc, i * self.link.n_queries, self.link.n_queries))
                .collect();
            let futures = self.link.current_to_future(g, &self.store, b_t, &per_frame);
            std::iter::once(b_t).chain(futures).collect()
        };
        JointEncoded { l_n, ntp_warn, frame_sources }
    }

    /// Full joint forward pass (understanding + generation).
    /// `step_mix` seeds the deterministic ray subsample when enabled.
    pub fn joint_forward(&self, g: &mut Graph<S>, sample: &FrameSample, step_mix: u64) -> JointOut {
        let enc = self.joint_encode(g, sample);
        let subsample = self.cfg.train.rays_per_step.map(|m| (m, step_mix));
        let mut terms = Vec::new();
        for &frame in &self.cfg.train.supervised_frames {
            let (bundle, gt) =
                self.frame_bundle(sample, frame, self.cfg.render.samples_train, subsample);
            if gt.is_empty() {
                continue;
            }
            let vol = self.renderer.lift_volume(g, &self.store, enc.frame_sources[frame]);
            let (pred, _wsum) = self.renderer.render_depth(g, &self.store, vol, &bundle);
            terms.push(DepthLossTerm { pred, gt, lambda: S::of(lambda_for_frame(frame)) });
        }
        let (l_d, depth_warn) = depth_loss(g, &terms);
        JointOut { l_n: enc.l_n, l_d, ntp_warn: enc.ntp_warn, depth_warn }
    }

    /// Mean absolute depth error of one frame along the joint (sequence
    /// model) path, over the full set of returning rays. None when the
    /// frame has no returns.
    pub fn frame_depth_l1(&self, sample: &FrameSample, frame: usize) -> Option<f64> {
        let mut g = Graph::no_grad();
        let enc = self.joint_encode(&mut g, sample);
        let (bundle, gt) = self.frame_bundle(sample, frame, self.cfg.render.samples_train, None);
        if gt.is_empty() {
            return None;
        }
        let vol = self.renderer.lift_volume(&mut g, &self.store, enc.frame_sources[frame]);
        let (pred, _) = self.renderer.render_depth(&mut g, &self.store, vol, &bundle);
        let pv = g.value(pred).data();
        let total: f64 = pv
            .iter()
            .zip(gt.iter())
            .map(|(&p, &t)| (p.as_f64() - t.as_f64()).abs())
            .sum();
        Some(total / gt.len() as f64)
    }

    /// Inference: decode the caption, then condition generation on the
    /// decoded text and the supplied ego plan. No gradients.
    pub fn generate(&self, sample: &FrameSample, ego: &[EgoMotion], prompt: &str) -> Generated {
        assert_eq!(ego.len(), self.delta_t(), "one ego motion per future frame");
        let l_bev = self.l_bev();
        let c4 = 4 * self.cfg.bev.c;

        // stage 1: encode BEV tokens once, decode the answer
        let mut g = Graph::no_grad();
        let images = self.images_var(&mut g, sample);
        let bev = self.tokenizer.lift_to_bev(&mut g, &self.store, images);
        let comp = self.tokenizer.downsample(&mut g, &self.store, bev);
        let f_t = flatten_project(&mut g, &self.store, &self.proj, comp);
        let f_t_value = g.value(f_t).clone();
        let comp_value = g.value(comp).clone();
        let answer = greedy_decode(&self.seq, &self.store, &f_t_value, &self.vocab, prompt, 64)
            .expect("decoding stays in vocabulary");

        // stage 2: full sequence with the decoded answer and world queries
        let mut g = Graph::no_grad();
        let comp = g.constant(comp_value);
        let f_t = g.constant(f_t_value);
        let (prompt_toks, answer_toks) =
            text_tokens(&self.vocab, prompt, &answer).expect("decoded text is in-vocabulary");
        let text_ids: Vec<usize> =
            prompt_toks.iter().chain(answer_toks.iter()).copied().collect();
        let text_emb = self.seq.embed_tokens(&mut g, &self.store, &text_ids);

        let frame_sources: Vec<Var> = if self.cfg.model.separated_mode {
            let raw = g.reshape(comp, &[l_bev, c4]);
            let futures = self.link.separated_mode_future(&mut g, &self.store, raw, ego);
            std::iter::once(raw).chain(futures).collect()
        } else {
            let q = self.link.init_queries(&mut g, &self.store, comp);
            let qw = self.link.assemble(&mut g, &self.store, &self.proj, q, ego);
            let n_query_positions = self.delta_t() * self.link.n_queries;
            let embedded = g.concat_rows(&[f_t, text_emb, qw]);
            let layout = SequenceLayout {
                l_bev,
                prompt_len: prompt_toks.len(),
                answer_len: answer_toks.len(),
                n_queries: n_query_positions,
            };
            let out = self.seq.forward(&mut g, &self.store, embedded, &layout).expect("sequence fits");
            let bev_h = g.slice_rows(out.hidden, 0, l_bev);
            let b_t = self.proj.project_out(&mut g, &self.store, bev_h);
            let q_h = g.slice_rows(out.hidden, layout.query_start(), n_query_positions);
            let q_enc = self.proj.project_out(&mut g, &self.store, q_h);
            let per_frame: Vec<Var> = (0..self.delta_t())
                .map(|i| g.slice_rows(q_enc, i * self.link.n_queries, self.link.n_queries))
                .collect();
            let futures = self.link.current_to_future(&mut g, &self.store, b_t, &per_frame);
            std::iter::once(b_t).chain(futures).collect()
        };

        // stage 3: render every frame over the full LiDAR grid
        let mut clouds = Vec::with_capacity(self.delta_t() + 1);
        for (frame, &src) in frame_sources.iter().enumerate() {
            let motion = if frame == 0 { EgoMotion::default() } else { ego[frame - 1] };
            let bundle =
                build_rays(&self.lidar, &motion, &self.cfg.render, self.cfg.render.samples_eval);
            let vol = self.renderer.lift_volume(&mut g, &self.store, src);
            let (depth, wsum) = self.renderer.render_depth(&mut g, &self.store, vol, &bundle);
            let d = g.value(depth).data().to_vec();
            let w = g.value(wsum).data().to_vec();
            let mut cloud = Vec::new();
            for (i, (&di, &wi)) in d.iter().zip(w.iter()).enumerate() {
                let wi = wi.as_f64();
                if wi < self.cfg.render.surface_eps {
                    continue; // no surface along this ray
                }
                let mut depth_m = di.as_f64();
                if self.cfg.render.renormalize_depth {
                    depth_m /= wi;
                }
                let o = bundle.origins[i];
                let dd = bundle.dirs[i];
                let p0 = Vec3::new(o[0] + depth_m * dd[0], o[1] + depth_m * dd[1], o[2] + depth_m * dd[2]);
                // frame-0 coordinates -> the frame's own ego coordinates
                let own = p0
                    .sub(Vec3::new(motion.dx, motion.dy, 0.0))
                    .rot_z(-motion.dyaw);
                cloud.push([own.x, own.y, own.z]);
            }
            clouds.push(cloud);
        }
        Generated { answer, clouds }
    }
}
