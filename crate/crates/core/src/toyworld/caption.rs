//! Template caption grammar over the closed toy vocabulary.
//!
//! Captions are a pure function of (scene, frame). Box positions are
//! quantized to {ahead, behind, left, right} x {near, far} in the ego frame
//! of the captioned frame.

use super::geom::Vec3;
use super::scene::{BoxClass, SceneGraph};

pub const PROMPT: &str = "describe the scene";

/// Quantized relative position of a point in the ego frame.
pub fn quantize_relpos(x: f64, y: f64, near_threshold: f64) -> (&'static str, &'static str) {
    let dir = if x.abs() >= y.abs() {
        if x >= 0.0 {
            "ahead"
        } else {
            "behind"
        }
    } else if y >= 0.0 {
        "left"
    } else {
        "right"
    };
    let dist = if x.hypot(y) < near_threshold { "near" } else { "far" };
    (dir, dist)
}

fn class_part(
    scene: &SceneGraph,
    frame: usize,
    class: BoxClass,
    noun: &str,
    plural: &str,
    near_threshold: f64,
) -> String {
    let ego = scene.ego[frame];
    let items: Vec<String> = scene
        .boxes
        .iter()
        .filter(|b| b.class == class)
        .map(|b| {
            let (c, _) = b.pose_at(frame);
            let local = ego.to_local(Vec3::new(c.x, c.y, 0.0));
            let (dir, dist) = quantize_relpos(local.x, local.y, near_threshold);
            format!("{noun} {dir} {dist}")
        })
        .collect();
    if items.is_empty() {
        format!("0 {plural}")
    } else {
        format!("{} {plural}: {}", items.len(), items.join(" , "))
    }
}

/// (prompt, answer) for a frame of a scene.
pub fn caption(scene: &SceneGraph, frame: usize, near_threshold: f64) -> (String, String) {
    let vehicles = class_part(scene, frame, BoxClass::Vehicle, "vehicle", "vehicles", near_threshold);
    let buildings = class_part(scene, frame, BoxClass::Building, "building", "buildings", near_threshold);
    let motion = if scene.ego_is_moving(frame) { "moving" } else { "stopped" };
    let answer = format!("{vehicles} ; {buildings} ; ego {motion}");
    (PROMPT.to_string(), answer)
}
