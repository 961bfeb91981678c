use crate::error::{contract, Result};
use crate::mask::Mask;
use crate::wsor::{FeatureMaps, Instance};

/// Length of a node's spatial feature vector.
pub const SPATIAL_DIM: usize = 7;
/// Length of an edge feature vector: both spatial vectors, centroid displacement, log area ratio.
pub const EDGE_DIM: usize = 2 * SPATIAL_DIM + 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    /// Mask-averaged features, one block per trunk scale, finest first.
    pub appearance: Vec<f64>,
    /// `[cx/W, cy/H, area/(H·W), x0/W, y0/H, (x1+1)/W, (y1+1)/H]`.
    pub spatial: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub features: Vec<f64>,
}

/// Fully-connected directed graph over the instances of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceGraph {
    pub nodes: Vec<Node>,
    /// Every ordered pair `(i, j)`, `i ≠ j`, in row-major order.
    pub edges: Vec<Edge>,
}

impl InstanceGraph {
    pub fn appearance_dim(&self) -> Option<usize> {
        self.nodes.first().map(|n| n.appearance.len())
    }
}

/// Spatial descriptor of a mask; `None` for an empty mask.
pub fn spatial_features(mask: &Mask) -> Option<Vec<f64>> {
    let (cx, cy) = mask.centroid()?;
    let bb = mask.bbox()?;
    let (h, w) = (mask.height() as f64, mask.width() as f64);
    Some(vec![
        cx / w,
        cy / h,
        mask.area() as f64 / (h * w),
        bb.x0 as f64 / w,
        bb.y0 as f64 / h,
        (bb.x1 + 1) as f64 / w,
        (bb.y1 + 1) as f64 / h,
    ])
}

/// Mean feature vector inside `mask` at every scale. A mask that vanishes at
/// a coarse scale falls back to the cell under its centroid.
pub fn appearance_features(mask: &Mask, features: &FeatureMaps) -> Vec<f64> {
    let (cx, cy) = mask.centroid().unwrap_or((0.0, 0.0));
    let mut out = Vec::new();
    for t in &features.scales {
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let small = mask.resize_nearest(h, w);
        let mut cells: Vec<usize> = (0..h * w).filter(|&p| small.bits()[p]).collect();
        if cells.is_empty() {
            let y = ((cy / mask.height() as f64 * h as f64) as usize).min(h - 1);
            let x = ((cx / mask.width() as f64 * w as f64) as usize).min(w - 1);
            cells.push(y * w + x);
        }
        let d = t.data();
        for ch in 0..c {
            let plane = &d[ch * h * w..(ch + 1) * h * w];
            out.push(cells.iter().map(|&p| plane[p]).sum::<f64>() / cells.len() as f64);
        }
    }
    out
}

fn edge_features(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut f = Vec::with_capacity(EDGE_DIM);
    f.extend_from_slice(a);
    f.extend_from_slice(b);
    f.push(b[0] - a[0]);
    f.push(b[1] - a[1]);
    f.push((a[2] / b[2]).ln());
    f
}

/// Build the instance graph. No instances gives an empty graph.
pub fn build_graph(instances: &[Instance], features: &FeatureMaps) -> Result<InstanceGraph> {
    contract!(features.scales.len() == 4, "expected four feature scales");
    let mut nodes = Vec::with_capacity(instances.len());
    for (k, inst) in instances.iter().enumerate() {
        let spatial = spatial_features(&inst.mask);
        contract!(spatial.is_some(), "instance {k} has an empty mask");
        nodes.push(Node {
            appearance: appearance_features(&inst.mask, features),
            spatial: spatial.expect("checked"),
        });
    }
    let mut edges = Vec::with_capacity(nodes.len() * nodes.len().saturating_sub(1));
    for i in 0..nodes.len() {
        for j in 0..nodes.len() {
            if i != j {
                edges.push(Edge {
                    from: i,
                    to: j,
                    features: edge_features(&nodes[i].spatial, &nodes[j].spatial),
                });
            }
        }
    }
    Ok(InstanceGraph { nodes, edges })
}
