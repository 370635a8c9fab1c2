//! Relation-graph attention encoders over detected objects.
//!
//! Three graphs share one computation pattern: bilinear correlation scores
//! between projected object features, top-k neighbor selection on the
//! head-averaged scores, per-head edge normalization over the neighbor
//! set, and a multi-head aggregation of neighbor values. The implicit
//! graph uses the scores as-is; the semantic and spatial graphs add a
//! learned per-head scalar bias for each discrete relation label.
//!
//! Spatial labels are synthesized from bounding boxes with fixed geometric
//! rules; semantic labels arrive with the data.

use crate::autodiff::{Tape, TensorId};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{self, split_heads};
use crate::store::ParameterStore;
use rand::Rng;

/// Graph kinds in pipeline order. The order also fixes parameter naming
/// and the meaning of fusion weight slots.
pub const GRAPH_KINDS: [&str; 3] = ["implicit", "semantic", "spatial"];

/// Spatial relation ids produced by [`synthesize_spatial_labels`]; 0 means
/// no relation (too far apart).
pub const SPATIAL_LABELS: [&str; 7] = [
    "left-of", "right-of", "above", "below", "overlaps", "contains", "inside",
];

pub const SPATIAL_NONE: u16 = 0;
pub const SPATIAL_LEFT_OF: u16 = 1;
pub const SPATIAL_RIGHT_OF: u16 = 2;
pub const SPATIAL_ABOVE: u16 = 3;
pub const SPATIAL_BELOW: u16 = 4;
pub const SPATIAL_OVERLAPS: u16 = 5;
pub const SPATIAL_CONTAINS: u16 = 6;
pub const SPATIAL_INSIDE: u16 = 7;

/// Centers farther apart than this carry no spatial relation.
pub const SPATIAL_MAX_CENTER_DIST: f64 = 0.8;

/// Detected objects: flat `m x d_in` features and normalized boxes.
#[derive(Debug, Clone)]
pub struct ObjectSet {
    pub features: Vec<f64>,
    pub boxes: Vec<[f64; 4]>,
    pub d_in: usize,
}

impl ObjectSet {
    pub fn new(features: Vec<f64>, boxes: Vec<[f64; 4]>, d_in: usize) -> Result<Self> {
        if boxes.is_empty() {
            return Err(Error::Degenerate("scene with no objects".into()));
        }
        if features.len() != boxes.len() * d_in {
            return Err(Error::ShapeMismatch {
                op: "object set",
                lhs: vec![boxes.len(), d_in],
                rhs: vec![features.len()],
            });
        }
        for (i, b) in boxes.iter().enumerate() {
            if !(b[0] < b[2] && b[1] < b[3]) {
                return Err(Error::Data(format!("degenerate box {i}: {b:?}")));
            }
        }
        Ok(ObjectSet {
            features,
            boxes,
            d_in,
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// One encoded relation graph on the tape.
pub struct GraphTensors {
    /// Updated node features `[m, d]`.
    pub nodes: TensorId,
    /// Per-head normalized edge weights, each `[m, m]`, zero outside the
    /// neighbor sets.
    pub head_edges: Vec<TensorId>,
    /// Head-averaged edges `[m, m]`.
    pub mean_edges: TensorId,
    /// Neighbor indices per node, each of size `min(k, m-1)`.
    pub neighbors: Vec<Vec<usize>>,
}

/// Per-head bilinear correlation scores between projected node features.
/// `scale` multiplies every score; graph encoders pass `1/sqrt(d/heads)`.
pub fn correlation_scores(
    tape: &mut Tape,
    q_proj: TensorId,
    k_proj: TensorId,
    heads: usize,
    scale: f64,
) -> Result<Vec<TensorId>> {
    let qh = split_heads(tape, q_proj, heads)?;
    let kh = split_heads(tape, k_proj, heads)?;
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let kt = tape.transpose(kh[h])?;
        let s = tape.matmul(qh[h], kt)?;
        out.push(tape.scale(s, scale));
    }
    Ok(out)
}

/// Element-wise average of per-head score matrices, read out as plain data
/// for the non-differentiable neighbor selection.
pub fn head_average_data(tape: &Tape, heads: &[TensorId]) -> Vec<f64> {
    let n = tape.data(heads[0]).len();
    let mut avg = vec![0.0; n];
    for &h in heads {
        for (a, &v) in avg.iter_mut().zip(tape.data(h)) {
            *a += v;
        }
    }
    for a in &mut avg {
        *a /= heads.len() as f64;
    }
    avg
}

/// Top-k neighbor sets from an `m x m` score matrix. Self-edges are
/// excluded, ties break toward the lower index, and each set has exactly
/// `min(k, m-1)` entries.
pub fn topk_neighbors(scores: &[f64], m: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::Config("adjacency k must be at least 1".into()));
    }
    if scores.len() != m * m {
        return Err(Error::ShapeMismatch {
            op: "topk_neighbors",
            lhs: vec![m, m],
            rhs: vec![scores.len()],
        });
    }
    let keep = k.min(m.saturating_sub(1));
    let mut sets = Vec::with_capacity(m);
    for i in 0..m {
        let mut order: Vec<usize> = (0..m).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            scores[i * m + b]
                .partial_cmp(&scores[i * m + a])
                .unwrap()
                .then(a.cmp(&b))
        });
        order.truncate(keep);
        order.sort_unstable();
        sets.push(order);
    }
    Ok(sets)
}

pub fn neighbor_mask(neighbors: &[Vec<usize>], m: usize) -> Vec<bool> {
    let mut mask = vec![false; m * m];
    for (i, set) in neighbors.iter().enumerate() {
        for &j in set {
            mask[i * m + j] = true;
        }
    }
    mask
}

/// Normalize per-head scores over each node's neighbor set.
pub fn implicit_edges(
    tape: &mut Tape,
    score_heads: &[TensorId],
    mask: &[bool],
) -> Result<Vec<TensorId>> {
    score_heads
        .iter()
        .map(|&s| tape.masked_softmax_rows(s, mask))
        .collect()
}

/// Label-biased edges: each head adds its learned scalar for the discrete
/// relation label of the pair before normalizing over the neighbor set.
pub fn explicit_edges(
    tape: &mut Tape,
    score_heads: &[TensorId],
    mask: &[bool],
    labels: &[u16],
    bias_table: TensorId,
) -> Result<Vec<TensorId>> {
    let m = tape.shape(score_heads[0])[0];
    if labels.len() != m * m {
        return Err(Error::ShapeMismatch {
            op: "explicit_edges",
            lhs: vec![m, m],
            rhs: vec![labels.len()],
        });
    }
    let n_labels = tape.shape(bias_table)[1];
    if let Some(&bad) = labels.iter().find(|&&l| usize::from(l) >= n_labels) {
        return Err(Error::Data(format!(
            "relation label {bad} outside bias table of {n_labels} entries"
        )));
    }
    let ids: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    let mut out = Vec::with_capacity(score_heads.len());
    for (h, &scores) in score_heads.iter().enumerate() {
        let row = tape.slice_cols(bias_table, 0, n_labels)?; // keep table 2-D
        let head_row = tape.gather_rows(row, &[h])?;
        let head_col = tape.reshape(head_row, &[n_labels, 1])?;
        let bias_flat = tape.gather_rows(head_col, &ids)?;
        let bias = tape.reshape(bias_flat, &[m, m])?;
        let logits = tape.add(scores, bias)?;
        out.push(tape.masked_softmax_rows(logits, mask)?);
    }
    Ok(out)
}

/// Multi-head aggregation: each head mixes projected neighbor values with
/// its edge weights, applies ReLU, and the heads concatenate back to `d`.
pub fn gat_update(
    tape: &mut Tape,
    edges: &[TensorId],
    v_proj: TensorId,
    heads: usize,
) -> Result<TensorId> {
    let vh = split_heads(tape, v_proj, heads)?;
    let mut outs = Vec::with_capacity(heads);
    for (h, &e) in edges.iter().enumerate() {
        let mixed = tape.matmul(e, vh[h])?;
        outs.push(tape.relu(mixed));
    }
    tape.concat_cols(&outs)
}

pub fn init_graph(
    store: &mut ParameterStore,
    rng: &mut impl Rng,
    kind: &str,
    cfg: &ModelConfig,
    n_labels: Option<usize>,
) -> Result<()> {
    let p = format!("graph.{kind}");
    layers::init_linear(store, rng, &format!("{p}.wq"), cfg.d, cfg.d, false)?;
    layers::init_linear(store, rng, &format!("{p}.wk"), cfg.d, cfg.d, false)?;
    layers::init_linear(store, rng, &format!("{p}.wv"), cfg.d, cfg.d, false)?;
    if let Some(n) = n_labels {
        // Zero start: explicit graphs begin exactly as the implicit one.
        store.insert_zeros(&format!("{p}.label_bias"), &[cfg.heads, n])?;
    }
    Ok(())
}

/// Run one relation graph over projected object features `v` of shape
/// `[m, d]`.
pub fn encode_graph(
    tape: &mut Tape,
    store: &ParameterStore,
    kind: &str,
    v: TensorId,
    labels: Option<&[u16]>,
    cfg: &ModelConfig,
) -> Result<GraphTensors> {
    let m = tape.shape(v)[0];
    let p = format!("graph.{kind}");
    let q_proj = layers::linear(tape, store, &format!("{p}.wq"), v, cfg.dropout)?;
    let k_proj = layers::linear(tape, store, &format!("{p}.wk"), v, cfg.dropout)?;
    let scale = 1.0 / ((cfg.d / cfg.heads) as f64).sqrt();
    let scores = correlation_scores(tape, q_proj, k_proj, cfg.heads, scale)?;
    let avg = head_average_data(tape, &scores);
    let neighbors = topk_neighbors(&avg, m, cfg.adjacency_k)?;
    let mask = neighbor_mask(&neighbors, m);
    let edges = match labels {
        None => implicit_edges(tape, &scores, &mask)?,
        Some(lab) => {
            let table = tape.param(store, &format!("{p}.label_bias"))?;
            explicit_edges(tape, &scores, &mask, lab, table)?
        }
    };
    let v_proj = layers::linear(tape, store, &format!("{p}.wv"), v, cfg.dropout)?;
    let nodes = gat_update(tape, &edges, v_proj, cfg.heads)?;
    let mut acc = edges[0];
    for &e in &edges[1..] {
        acc = tape.add(acc, e)?;
    }
    let mean_edges = tape.scale(acc, 1.0 / cfg.heads as f64);
    Ok(GraphTensors {
        nodes,
        head_edges: edges,
        mean_edges,
        neighbors,
    })
}

/// Encode the implicit, semantic, and spatial graphs over shared projected
/// features. Scenes need at least two objects to form neighbor sets.
pub fn encode_image(
    tape: &mut Tape,
    store: &ParameterStore,
    v: TensorId,
    semantic_labels: &[u16],
    spatial_labels: &[u16],
    cfg: &ModelConfig,
) -> Result<[GraphTensors; 3]> {
    let m = tape.shape(v)[0];
    if m < 2 {
        return Err(Error::Degenerate(
            "relation graphs need at least two objects".into(),
        ));
    }
    let implicit = encode_graph(tape, store, GRAPH_KINDS[0], v, None, cfg)?;
    let semantic = encode_graph(tape, store, GRAPH_KINDS[1], v, Some(semantic_labels), cfg)?;
    let spatial = encode_graph(tape, store, GRAPH_KINDS[2], v, Some(spatial_labels), cfg)?;
    Ok([implicit, semantic, spatial])
}

fn center(b: &[f64; 4]) -> (f64, f64) {
    ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0)
}

fn contains_box(outer: &[f64; 4], inner: &[f64; 4]) -> bool {
    outer[0] < inner[0] && outer[1] < inner[1] && outer[2] > inner[2] && outer[3] > inner[3]
}

fn boxes_overlap(a: &[f64; 4], b: &[f64; 4]) -> bool {
    a[0] < b[2] && b[0] < a[2] && a[1] < b[3] && b[1] < a[3]
}

/// Spatial relation of `a` with respect to `b`: containment first, then
/// overlap, then the dominant center displacement, with y growing
/// downward so "above" means a smaller y.
pub fn spatial_relation(a: &[f64; 4], b: &[f64; 4]) -> u16 {
    if contains_box(a, b) {
        return SPATIAL_CONTAINS;
    }
    if contains_box(b, a) {
        return SPATIAL_INSIDE;
    }
    if boxes_overlap(a, b) {
        return SPATIAL_OVERLAPS;
    }
    let (ax, ay) = center(a);
    let (bx, by) = center(b);
    let (dx, dy) = (bx - ax, by - ay);
    if (dx * dx + dy * dy).sqrt() > SPATIAL_MAX_CENTER_DIST {
        return SPATIAL_NONE;
    }
    if dx.abs() >= dy.abs() {
        if dx > 0.0 {
            SPATIAL_LEFT_OF
        } else {
            SPATIAL_RIGHT_OF
        }
    } else if dy > 0.0 {
        SPATIAL_ABOVE
    } else {
        SPATIAL_BELOW
    }
}

/// Full `m x m` spatial label matrix; the diagonal is 0.
pub fn synthesize_spatial_labels(boxes: &[[f64; 4]]) -> Vec<u16> {
    let m = boxes.len();
    let mut labels = vec![SPATIAL_NONE; m * m];
    for i in 0..m {
        for j in 0..m {
            if i != j {
                labels[i * m + j] = spatial_relation(&boxes[i], &boxes[j]);
            }
        }
    }
    labels
}
