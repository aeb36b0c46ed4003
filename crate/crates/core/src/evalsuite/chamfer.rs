//! Range filtering and Chamfer distance with a k-d accelerated nearest
//! neighbor that is bit-compatible with the O(N^2) brute force.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("chamfer distance is undefined for an empty cloud")]
    EmptyCloud,
}

/// Inclusive axis-aligned crop: |x| <= xy, |y| <= xy, z in [z_min, z_max].
pub fn range_filter(points: &[[f64; 3]], xy: f64, z_min: f64, z_max: f64) -> Vec<[f64; 3]> {
    points
        .iter()
        .copied()
        .filter(|p| p[0].abs() <= xy && p[1].abs() <= xy && p[2] >= z_min && p[2] <= z_max)
        .collect()
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

struct KdNode {
    point: [f64; 3],
    axis: u8,
    left: Option<u32>,
    right: Option<u32>,
}

/// Static median-split k-d tree over 3-D points.
pub struct KdTree3 {
    nodes: Vec<KdNode>,
    root: u32,
}

impl KdTree3 {
    pub fn build(points: &[[f64; 3]]) -> Self {
        assert!(!points.is_empty(), "kd-tree needs at least one point");
        let mut nodes = Vec::with_capacity(points.len());
        let mut scratch: Vec<[f64; 3]> = points.to_vec();
        let root = Self::build_rec(&mut scratch, &mut nodes, 0).expect("nonempty");
        KdTree3 { nodes, root }
    }

    fn build_rec(pts: &mut [[f64; 3]], nodes: &mut Vec<KdNode>, depth: usize) -> Option<u32> {
        if pts.is_empty() {
            return None;
        }
        let axis = depth % 3;
        let mid = pts.len() / 2;
        pts.select_nth_unstable_by(mid, |a, b| {
            a[axis].partial_cmp(&b[axis]).unwrap_or(std::cmp::Ordering::Equal)
        });
        let point = pts[mid];
        let idx = nodes.len() as u32;
        nodes.push(KdNode { point, axis: axis as u8, left: None, right: None });
        let (lo, rest) = pts.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = Self::build_rec(lo, nodes, depth + 1);
        let right = Self::build_rec(hi, nodes, depth + 1);
        nodes[idx as usize].left = left;
        nodes[idx as usize].right = right;
        Some(idx)
    }

    /// Squared distance to the nearest stored point.
    pub fn nearest2(&self, q: &[f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        self.search(self.root, q, &mut best);
        best
    }

    fn search(&self, node: u32, q: &[f64; 3], best: &mut f64) {
        let n = &self.nodes[node as usize];
        let d = dist2(q, &n.point);
        if d < *best {
            *best = d;
        }
        let axis = n.axis as usize;
        let diff = q[axis] - n.point[axis];
        let (first, second) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        if let Some(c) = first {
            self.search(c, q, best);
        }
        if diff * diff < *best {
            if let Some(c) = second {
                self.search(c, q, best);
            }
        }
    }
}

/// Directed mean nearest-neighbor distance from each point of `from` into
/// the tree, via sqrt of the exact squared minimum.
fn directed_mean(from: &[[f64; 3]], tree: &KdTree3, squared: bool) -> f64 {
    let mut acc = 0.0;
    for p in from {
        let d2 = tree.nearest2(p);
        acc += if squared { d2 } else { d2.sqrt() };
    }
    acc / from.len() as f64
}

fn directed_mean_brute(from: &[[f64; 3]], into: &[[f64; 3]], squared: bool) -> f64 {
    let mut acc = 0.0;
    for p in from {
        let mut best = f64::INFINITY;
        for q in into {
            let d = dist2(p, q);
            if d < best {
                best = d;
            }
        }
        acc += if squared { best } else { best.sqrt() };
    }
    acc / from.len() as f64
}

/// CD = 1/2 (mean_p min_q |p-q| + mean_q min_p |p-q|), non-squared by
/// default; `squared` switches both directed terms to squared distances.
pub fn chamfer(p: &[[f64; 3]], q: &[[f64; 3]], squared: bool) -> Result<f64, MetricError> {
    if p.is_empty() || q.is_empty() {
        return Err(MetricError::EmptyCloud);
    }
    let tq = KdTree3::build(q);
    let tp = KdTree3::build(p);
    Ok(0.5 * (directed_mean(p, &tq, squared) + directed_mean(q, &tp, squared)))
}

/// Reference implementation used by the acceptance oracle.
pub fn chamfer_brute_force(p: &[[f64; 3]], q: &[[f64; 3]], squared: bool) -> Result<f64, MetricError> {
    if p.is_empty() || q.is_empty() {
        return Err(MetricError::EmptyCloud);
    }
    Ok(0.5 * (directed_mean_brute(p, q, squared) + directed_mean_brute(q, p, squared)))
}
