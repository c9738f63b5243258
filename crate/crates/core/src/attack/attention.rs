use crate::detector::AttentionSamplingState;
use crate::error::{Error, Result};
use crate::geometry::GroundGrid;
use crate::raster::Image;

/// Squared distances between every sampling location and its point's target.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLossTerms {
    /// Flat `[layer][head][query][view][point]`, like the sampling offsets.
    pub terms: Vec<f64>,
    pub queries: usize,
    pub views: usize,
    pub points: usize,
    pub total: f64,
}

fn check_targets(state: &AttentionSamplingState, targets: &[[f64; 2]]) -> Result<()> {
    if targets.len() != state.points {
        return Err(Error::DimensionMismatch(format!("{} attention targets for {} sampling points", targets.len(), state.points)));
    }
    if state.offsets.len() != state.layers * state.heads * state.queries * state.views * state.points
        || state.reference_points.len() != state.queries
    {
        return Err(Error::DimensionMismatch("attention state arrays disagree with its dimensions".into()));
    }
    Ok(())
}

/// Sum over layers and heads of the mean squared distance between the sampling locations
/// and the per-point targets.
pub fn attention_loss(state: &AttentionSamplingState, targets: &[[f64; 2]]) -> Result<AttentionLossTerms> {
    check_targets(state, targets)?;
    let (layers, heads, queries, views, points) = state.dims();
    let norm = 1.0 / (queries * views * points) as f64;
    let mut terms = Vec::with_capacity(state.offsets.len());
    let mut total = 0.0;
    for l in 0..layers {
        for h in 0..heads {
            let mut inner = 0.0;
            for q in 0..queries {
                for d in 0..views {
                    for (k, t) in targets.iter().enumerate() {
                        let p = state.sampling_location(l, h, q, d, k);
                        let term = (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2);
                        inner += term;
                        terms.push(term);
                    }
                }
            }
            total += norm * inner;
        }
    }
    Ok(AttentionLossTerms { terms, queries, views, points, total })
}

/// Gradient of the attention loss with respect to every sampling location.
pub fn attention_loss_gradient(state: &AttentionSamplingState, targets: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    check_targets(state, targets)?;
    let (layers, heads, queries, views, points) = state.dims();
    let norm = 2.0 / (queries * views * points) as f64;
    let mut g = vec![[0.0; 2]; state.offsets.len()];
    for l in 0..layers {
        for h in 0..heads {
            for q in 0..queries {
                for d in 0..views {
                    for (k, t) in targets.iter().enumerate() {
                        let p = state.sampling_location(l, h, q, d, k);
                        g[state.index(l, h, q, d, k)] = [norm * (p[0] - t[0]), norm * (p[1] - t[1])];
                    }
                }
            }
        }
    }
    Ok(g)
}

/// One target per sampling point, cycling through the four grid corners.
pub fn corner_targets(grid: &GroundGrid, points: usize) -> Vec<[f64; 2]> {
    let (x1, y1) = ((grid.cols() - 1) as f64, (grid.rows() - 1) as f64);
    let corners = [[0.0, 0.0], [x1, 0.0], [0.0, y1], [x1, y1]];
    (0..points).map(|k| corners[k % 4]).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projecting-conflicting-gradients surgery: each task gradient loses its component
/// along every other task's (original) gradient it conflicts with; the surgered
/// gradients are summed.
pub fn pcgrad(tasks: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = tasks.first().map_or(0, |t| t.len());
    if tasks.iter().any(|t| t.len() != n) {
        return Err(Error::ShapeMismatch("task gradients differ in length".into()));
    }
    let norms: Vec<f64> = tasks.iter().map(|t| dot(t, t)).collect();
    let mut out = vec![0.0; n];
    for (i, gi) in tasks.iter().enumerate() {
        let mut g = gi.clone();
        for (j, gj) in tasks.iter().enumerate() {
            if i == j || norms[j] == 0.0 {
                continue;
            }
            let d = dot(&g, gj);
            if d < 0.0 {
                let c = d / norms[j];
                for (x, y) in g.iter_mut().zip(gj) {
                    *x -= c * y;
                }
            }
        }
        for (o, x) in out.iter_mut().zip(&g) {
            *o += x;
        }
    }
    Ok(out)
}

/// [`pcgrad`] over two sets of per-view gradients, flattened across all views.
pub fn pcgrad_combine(g_det: &[Image], g_att: &[Image]) -> Result<Vec<Image>> {
    if g_det.len() != g_att.len() || g_det.iter().zip(g_att).any(|(a, b)| !a.same_shape(b)) {
        return Err(Error::ShapeMismatch("per-view gradient sets differ in shape".into()));
    }
    let flat = |gs: &[Image]| gs.iter().flat_map(|g| g.data.iter().copied()).collect::<Vec<f64>>();
    let combined = pcgrad(&[flat(g_det), flat(g_att)])?;
    let mut out = g_det.to_vec();
    let mut offset = 0;
    for img in &mut out {
        let n = img.data.len();
        img.data.copy_from_slice(&combined[offset..offset + n]);
        offset += n;
    }
    Ok(out)
}
