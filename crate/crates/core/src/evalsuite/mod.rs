//! Quantitative evaluation: range-filtered Chamfer per horizon, the
//! Copy&Paste baseline, ROUGE-L caption scoring, and CSV reports.

pub mod chamfer;
pub mod rouge;

use std::path::Path;

use crate::config::RunConfig;
use crate::numerics::Scalar;
use crate::pipeline::Pipeline;
use crate::toyworld::{Dataset, FrameSample, PROMPT};
use crate::worldlink::EgoMotion;

pub use chamfer::{chamfer, chamfer_brute_force, range_filter, KdTree3, MetricError};
pub use rouge::rouge_l;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneHorizonRow {
    pub scene: usize,
    pub horizon: usize,
    /// None records an undefined metric (empty cloud after filtering).
    pub model_cd: Option<f64>,
    pub copy_paste_cd: Option<f64>,
    pub n_gt: usize,
    pub n_pred: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneTextRow {
    pub scene: usize,
    pub rouge_l: f64,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: String,
    pub scene_count: usize,
    pub config_hash: u64,
    pub rows: Vec<SceneHorizonRow>,
    pub text_rows: Vec<SceneTextRow>,
}

impl EvalReport {
    pub fn mean_model_cd(&self, horizon: usize) -> Option<f64> {
        mean(self.rows.iter().filter(|r| r.horizon == horizon).filter_map(|r| r.model_cd))
    }

    pub fn mean_copy_paste_cd(&self, horizon: usize) -> Option<f64> {
        mean(self.rows.iter().filter(|r| r.horizon == horizon).filter_map(|r| r.copy_paste_cd))
    }

    pub fn undefined_scenes(&self) -> Vec<usize> {
        let mut s: Vec<usize> =
            self.rows.iter().filter(|r| r.model_cd.is_none()).map(|r| r.scene).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn mean_rouge(&self) -> f64 {
        mean(self.text_rows.iter().map(|r| r.rouge_l)).unwrap_or(0.0)
    }

    pub fn exact_match_rate(&self) -> f64 {
        if self.text_rows.is_empty() {
            return 0.0;
        }
        self.text_rows.iter().filter(|r| r.exact).count() as f64 / self.text_rows.len() as f64
    }

    pub fn horizons(&self) -> Vec<usize> {
        let mut h: Vec<usize> = self.rows.iter().map(|r| r.horizon).collect();
        h.sort_unstable();
        h.dedup();
        h
    }

    /// One row per (scene, horizon), one text row per scene, then summary
    /// rows. Optional-float cells are empty when undefined.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# mode={}\n", self.mode));
        out.push_str(&format!("# scenes={}\n", self.scene_count));
        out.push_str(&format!("# config_hash={:016x}\n", self.config_hash));
        out.push_str("kind,scene,horizon_s,model_cd,copy_paste_cd,n_gt,n_pred,rouge_l,exact_match\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&format!(
                "scene,{},{},{},{},{},{},,\n",
                r.scene,
                r.horizon,
                opt(r.model_cd),
                opt(r.copy_paste_cd),
                r.n_gt,
                r.n_pred
            ));
        }
        for t in &self.text_rows {
            out.push_str(&format!("text,{},,,,,,{},{}\n", t.scene, t.rouge_l, t.exact));
        }
        for h in self.horizons() {
            out.push_str(&format!(
                "summary,,{},{},{},,,,\n",
                h,
                opt(self.mean_model_cd(h)),
                opt(self.mean_copy_paste_cd(h))
            ));
        }
        out.push_str(&format!("summary_text,,,,,,,{},{}\n", self.mean_rouge(), self.exact_match_rate()));
        out
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv_string())
    }

    /// Inverse of [`to_csv_string`] for the per-scene rows (summaries are
    /// recomputed, not parsed).
    pub fn from_csv_string(text: &str) -> Option<EvalReport> {
        let mut mode = String::new();
        let mut scene_count = 0usize;
        let mut config_hash = 0u64;
        let mut rows = Vec::new();
        let mut text_rows = Vec::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# mode=") {
                mode = rest.to_string();
            } else if let Some(rest) = line.strip_prefix("# scenes=") {
                scene_count = rest.parse().ok()?;
            } else if let Some(rest) = line.strip_prefix("# config_hash=") {
                config_hash = u64::from_str_radix(rest, 16).ok()?;
            } else if line.starts_with("scene,") {
                let f: Vec<&str> = line.split(',').collect();
                rows.push(SceneHorizonRow {
                    scene: f[1].parse().ok()?,
                    horizon: f[2].parse().ok()?,
                    model_cd: if f[3].is_empty() { None } else { Some(f[3].parse().ok()?) },
                    copy_paste_cd: if f[4].is_empty() { None } else { Some(f[4].parse().ok()?) },
                    n_gt: f[5].parse().ok()?,
                    n_pred: f[6].parse().ok()?,
                });
            } else if line.starts_with("text,") {
                let f: Vec<&str> = line.split(',').collect();
                text_rows.push(SceneTextRow {
                    scene: f[1].parse().ok()?,
                    rouge_l: f[7].parse().ok()?,
                    exact: f[8].parse().ok()?,
                });
            }
        }
        Some(EvalReport { mode, scene_count, config_hash, rows, text_rows })
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Per-horizon Copy&Paste Chamfer: the current ground-truth cloud reused as
/// the prediction for every future frame.
pub fn copy_paste_baseline(
    clouds: &[Vec<[f64; 3]>],
    bounds: (f64, f64, f64),
    squared: bool,
) -> Vec<Option<f64>> {
    let (xy, zmin, zmax) = bounds;
    let current = range_filter(&clouds[0], xy, zmin, zmax);
    clouds
        .iter()
        .map(|future| {
            let fut = range_filter(future, xy, zmin, zmax);
            chamfer(&current, &fut, squared).ok()
        })
        .collect()
}

fn to_f64_cloud(c: &[[f32; 3]]) -> Vec<[f64; 3]> {
    c.iter().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect()
}

/// Evaluate an arbitrary forecaster: it maps a sample to (answer text,
/// clouds per frame in each frame's own ego coordinates).
pub fn evaluate_with<F>(
    dataset: &Dataset,
    cfg: &RunConfig,
    mode: &str,
    mut forecaster: F,
) -> EvalReport
where
    F: FnMut(usize, &FrameSample) -> (String, Vec<Vec<[f64; 3]>>),
{
    let bounds = cfg.eval.bounds_box();
    let squared = cfg.eval.squared_chamfer;
    let mut rows = Vec::new();
    let mut text_rows = Vec::new();
    for (scene, sample) in dataset.samples.iter().enumerate() {
        let gt_clouds: Vec<Vec<[f64; 3]>> = sample.clouds.iter().map(|c| to_f64_cloud(c)).collect();
        let (answer, pred_clouds) = forecaster(scene, sample);
        let cp = copy_paste_baseline(&gt_clouds, bounds, squared);
        for horizon in 0..gt_clouds.len() {
            let gt = range_filter(&gt_clouds[horizon], bounds.0, bounds.1, bounds.2);
            let pred = range_filter(&pred_clouds[horizon], bounds.0, bounds.1, bounds.2);
            let model_cd = chamfer(&pred, &gt, squared).ok();
            rows.push(SceneHorizonRow {
                scene,
                horizon,
                model_cd,
                copy_paste_cd: cp[horizon],
                n_gt: gt.len(),
                n_pred: pred.len(),
            });
        }
        text_rows.push(SceneTextRow {
            scene,
            rouge_l: rouge_l(&answer, &sample.answer),
            exact: answer == sample.answer,
        });
    }
    EvalReport {
        mode: mode.to_string(),
        scene_count: dataset.samples.len(),
        config_hash: cfg.content_hash(),
        rows,
        text_rows,
    }
}

/// Evaluate a trained pipeline with ground-truth ego motion as the
/// generation condition.
pub fn evaluate<S: Scalar>(pipe: &Pipeline<S>, dataset: &Dataset) -> EvalReport {
    let mode = if pipe.cfg.model.separated_mode { "separated" } else { "unified" };
    evaluate_with(dataset, &pipe.cfg, mode, |_, sample| {
        let ego: Vec<EgoMotion> = sample
            .ego_motion
            .iter()
            .map(|m| EgoMotion { dx: m[0] as f64, dy: m[1] as f64, dyaw: m[2] as f64 })
            .collect();
        let gen = pipe.generate(sample, &ego, PROMPT);
        (gen.answer, gen.clouds)
    })
}
