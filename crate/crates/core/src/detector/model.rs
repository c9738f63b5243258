//! The two toy multiview detectors and their exact reverse passes.
//!
//! Shared front end: a 4-layer convolutional single-view extractor with two stride-2
//! layers and dilations 1, 3, 1, 5 (receptive field 59 px). A 1x1 head/foot keypoint head
//! reads its features, which are also projected bilinearly onto the ground grid through
//! the ground homography. The CONV variant concatenates the projected views and runs three dilated
//! 3x3 convolutions; the ATTN variant first fuses the views with deformable attention
//! whose queries are the ground cells.

use nalgebra::Vector3;

use super::nn::{sigmoid_backward, sigmoid_tensor, silu, silu_backward, Bilinear, Conv2d, Tensor};
use super::{Architecture, DetectorConfig};
use crate::error::{Error, Result};
use crate::geometry::{world_to_pixel, CameraCalibration, GroundGrid};
use crate::raster::Image;

/// Total downsampling of the single-view extractor.
pub const FEATURE_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer {
    pub value: Conv2d,
    pub offset: Conv2d,
    pub weight: Conv2d,
    pub output: Conv2d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub architecture: Architecture,
    pub views: usize,
    pub features: usize,
    pub heads: usize,
    pub points: usize,
    pub backbone: [Conv2d; 4],
    pub keypoint_head: Conv2d,
    pub attention: Vec<AttentionLayer>,
    pub ground_head: [Conv2d; 3],
    pub n_params: usize,
}

impl Network {
    pub fn new(config: &DetectorConfig, views: usize) -> Self {
        let f = config.feature_width;
        let hw = config.head_width;
        let mut n = 0;
        let backbone = [
            Conv2d::new(3, f, 3, 2, 1, &mut n),
            Conv2d::new(f, f, 3, 1, 3, &mut n),
            Conv2d::new(f, f, 3, 2, 1, &mut n),
            Conv2d::new(f, f, 3, 1, 5, &mut n),
        ];
        let keypoint_head = Conv2d::new(f, 2, 1, 1, 1, &mut n);
        let (heads, points) = (config.attn_heads, config.attn_points);
        let attention = match config.architecture {
            Architecture::Conv => Vec::new(),
            Architecture::Attn => (0..config.attn_layers)
                .map(|_| AttentionLayer {
                    value: Conv2d::new(f, f, 1, 1, 1, &mut n),
                    offset: Conv2d::new(f, heads * views * points * 2, 1, 1, 1, &mut n),
                    weight: Conv2d::new(f, heads * views * points, 1, 1, 1, &mut n),
                    output: Conv2d::new(f, f, 1, 1, 1, &mut n),
                })
                .collect(),
        };
        let head_in = match config.architecture {
            Architecture::Conv => f * views,
            Architecture::Attn => f,
        };
        let ground_head = [
            Conv2d::new(head_in, hw, 3, 1, 1, &mut n),
            Conv2d::new(hw, hw, 3, 1, 2, &mut n),
            Conv2d::new(hw, 1, 3, 1, 4, &mut n),
        ];
        Self {
            architecture: config.architecture,
            views,
            features: f,
            heads,
            points,
            backbone,
            keypoint_head,
            attention,
            ground_head,
            n_params: n,
        }
    }

    pub fn init_params(&self, rng: &mut impl rand::Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params];
        for conv in &self.backbone {
            conv.init(&mut p, rng, 1.0, 0.0);
        }
        self.keypoint_head.init(&mut p, rng, 0.5, -3.0);
        for layer in &self.attention {
            layer.value.init(&mut p, rng, 1.0, 0.0);
            layer.weight.init(&mut p, rng, 0.1, 0.0);
            layer.output.init(&mut p, rng, 1.0, 0.0);
            // Offsets start on a small ring around the reference point, one direction per
            // (head, point), with a weak dependence on the query.
            layer.offset.init(&mut p, rng, 0.05, 0.0);
            let (hh, dd, kk) = (self.heads, self.views, self.points);
            for h in 0..hh {
                for d in 0..dd {
                    for k in 0..kk {
                        let angle = std::f64::consts::TAU * (h * kk + k) as f64 / (hh * kk) as f64;
                        let radius = 1.0 + (k % 2) as f64;
                        let ch = ((h * dd + d) * kk + k) * 2;
                        p[layer.offset.b_off + ch] = radius * angle.cos();
                        p[layer.offset.b_off + ch + 1] = radius * angle.sin();
                    }
                }
            }
        }
        self.ground_head[0].init(&mut p, rng, 1.0, 0.0);
        self.ground_head[1].init(&mut p, rng, 1.0, 0.0);
        self.ground_head[2].init(&mut p, rng, 0.5, -3.0);
        p
    }
}

/// Precomputed bilinear taps mapping each ground cell to one view's feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub taps: Vec<Bilinear>,
}

impl Projection {
    pub fn new(calib: &CameraCalibration, grid: &GroundGrid, feat_h: usize, feat_w: usize) -> Self {
        let stride = FEATURE_STRIDE as f64;
        let mut taps = Vec::with_capacity(grid.num_cells());
        for row in 0..grid.rows() {
            for col in 0..grid.cols() {
                let [x, y] = grid.cell_center(row, col);
                let tap = match world_to_pixel(calib, &Vector3::new(x, y, 0.0)) {
                    // Feature cell j is centered on pixel coordinate stride * j + 0.5.
                    Ok(p) => Bilinear::new((p.x - 0.5) / stride, (p.y - 0.5) / stride, feat_h, feat_w),
                    Err(_) => Bilinear { idx: [usize::MAX; 4], ..Default::default() },
                };
                taps.push(tap);
            }
        }
        Self { taps }
    }

    fn forward(&self, feat: &Tensor, rows: usize, cols: usize) -> Tensor {
        let mut out = Tensor::zeros(feat.c, rows, cols);
        for ch in 0..feat.c {
            let src = feat.channel(ch);
            let dst = out.channel_mut(ch);
            for (q, tap) in self.taps.iter().enumerate() {
                dst[q] = tap.sample(src);
            }
        }
        out
    }

    fn backward(&self, dproj: &Tensor, feat_h: usize, feat_w: usize) -> Tensor {
        let mut dfeat = Tensor::zeros(dproj.c, feat_h, feat_w);
        for ch in 0..dproj.c {
            let g = dproj.channel(ch);
            let dst = dfeat.channel_mut(ch);
            for (q, tap) in self.taps.iter().enumerate() {
                if g[q] != 0.0 {
                    tap.scatter(dst, g[q]);
                }
            }
        }
        dfeat
    }
}

struct ConvStep {
    cols: Vec<f64>,
    pre: Tensor,
    in_hw: (usize, usize),
}

struct ViewTrace {
    backbone: Vec<ConvStep>,
    keypoint_cols: Vec<f64>,
    keypoints: Tensor,
    feat_hw: (usize, usize),
}

struct AttnTrace {
    query: Tensor,
    query_cols: Vec<f64>,
    offsets: Tensor,
    weights: Vec<f64>,
    values: Vec<Tensor>,
    value_cols: Vec<Vec<f64>>,
    taps: Vec<Bilinear>,
    mixed_cols: Vec<f64>,
    out_pre: Tensor,
}

/// Everything the reverse pass needs from one forward evaluation.
pub struct Trace {
    views: Vec<ViewTrace>,
    attention: Vec<AttnTrace>,
    head: Vec<ConvStep>,
    ground: Tensor,
}

/// Raw network outputs.
pub struct RawOutput {
    pub ground: Tensor,
    /// Per view `[2, h, w]`: channel 0 head, channel 1 foot.
    pub keypoints: Vec<Tensor>,
    /// Flat offsets `[layer][head][query][view][point]` as `(dx, dy)` in cells.
    pub offsets: Option<Vec<[f64; 2]>>,
}

/// Gradients of a scalar objective with respect to the raw outputs.
pub struct OutputGrads {
    pub ground: Vec<f64>,
    pub keypoints: Vec<Tensor>,
    /// Same layout as [`RawOutput::offsets`].
    pub sampling_locations: Option<Vec<[f64; 2]>>,
}

fn image_to_tensor(img: &Image) -> Tensor {
    let mut t = Tensor::zeros(img.channels, img.height, img.width);
    let plane = img.height * img.width;
    for (i, px) in img.data.chunks_exact(img.channels).enumerate() {
        for (ch, v) in px.iter().enumerate() {
            t.data[ch * plane + i] = v - 0.5;
        }
    }
    t
}

fn tensor_to_image(t: &Tensor) -> Image {
    let mut img = Image::new(t.h, t.w, t.c);
    let plane = t.plane();
    for ch in 0..t.c {
        for i in 0..plane {
            img.data[i * t.c + ch] = t.data[ch * plane + i];
        }
    }
    img
}

impl Network {
    #[inline]
    fn offset_index(&self, layer: usize, h: usize, q: usize, d: usize, k: usize, n_q: usize) -> usize {
        (((layer * self.heads + h) * n_q + q) * self.views + d) * self.points + k
    }

    pub fn forward(
        &self,
        params: &[f64],
        projections: &[Projection],
        grid: &GroundGrid,
        images: &[Image],
    ) -> Result<(RawOutput, Trace)> {
        if images.len() != self.views || projections.len() != self.views {
            return Err(Error::ShapeMismatch(format!("expected {} views, got {}", self.views, images.len())));
        }
        let (g_rows, g_cols) = grid.shape;
        let n_q = g_rows * g_cols;

        let mut views = Vec::with_capacity(self.views);
        let mut projected = Vec::with_capacity(self.views);
        let mut keypoints = Vec::with_capacity(self.views);
        for (img, proj) in images.iter().zip(projections) {
            let mut x = image_to_tensor(img);
            let mut steps = Vec::with_capacity(4);
            for conv in &self.backbone {
                let in_hw = (x.h, x.w);
                let (pre, cols) = conv.forward(params, &x);
                x = silu(&pre);
                steps.push(ConvStep { cols, pre, in_hw });
            }
            let (kp_pre, keypoint_cols) = self.keypoint_head.forward(params, &x);
            let kp = sigmoid_tensor(&kp_pre);
            keypoints.push(kp.clone());
            if proj.taps.len() != n_q {
                return Err(Error::ShapeMismatch("projection table does not match the grid".into()));
            }
            projected.push(proj.forward(&x, g_rows, g_cols));
            views.push(ViewTrace { backbone: steps, keypoint_cols, keypoints: kp, feat_hw: (x.h, x.w) });
        }

        let mut attention = Vec::with_capacity(self.attention.len());
        let mut offsets_out = None;
        let head_input = match self.architecture {
            Architecture::Conv => {
                let mut cat = Tensor::zeros(self.features * self.views, g_rows, g_cols);
                let chunk = self.features * n_q;
                for (d, p) in projected.iter().enumerate() {
                    cat.data[d * chunk..(d + 1) * chunk].copy_from_slice(&p.data);
                }
                cat
            }
            Architecture::Attn => {
                let mut z = Tensor::zeros(self.features, g_rows, g_cols);
                for p in &projected {
                    z.add_assign(p);
                }
                let inv = 1.0 / self.views as f64;
                z.data.iter_mut().for_each(|v| *v *= inv);
                let mut all_offsets = vec![[0.0; 2]; self.attention.len() * self.heads * n_q * self.views * self.points];
                for (l, layer) in self.attention.iter().enumerate() {
                    let (tr, next) = self.attention_forward(l, layer, params, &z, &projected, g_rows, g_cols, &mut all_offsets);
                    attention.push(tr);
                    z = next;
                }
                offsets_out = Some(all_offsets);
                z
            }
        };

        let mut head = Vec::with_capacity(3);
        let mut x = head_input;
        for (i, conv) in self.ground_head.iter().enumerate() {
            let in_hw = (x.h, x.w);
            let (pre, cols) = conv.forward(params, &x);
            x = if i < 2 { silu(&pre) } else { sigmoid_tensor(&pre) };
            head.push(ConvStep { cols, pre, in_hw });
        }
        let ground = x;
        let raw = RawOutput { ground: ground.clone(), keypoints, offsets: offsets_out };
        Ok((raw, Trace { views, attention, head, ground }))
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_forward(
        &self,
        l: usize,
        layer: &AttentionLayer,
        params: &[f64],
        query: &Tensor,
        projected: &[Tensor],
        g_rows: usize,
        g_cols: usize,
        all_offsets: &mut [[f64; 2]],
    ) -> (AttnTrace, Tensor) {
        let n_q = g_rows * g_cols;
        let (hh, dd, kk) = (self.heads, self.views, self.points);
        let ch_per_head = self.features / hh;
        let (offsets, query_cols) = layer.offset.forward(params, query);
        let (logits, _) = layer.weight.forward(params, query);

        // Softmax over (view, point) per (head, query).
        let mut weights = vec![0.0; hh * dd * kk * n_q];
        for h in 0..hh {
            for q in 0..n_q {
                let idx = |d: usize, k: usize| ((h * dd + d) * kk + k) * n_q + q;
                let mut max = f64::MIN;
                for d in 0..dd {
                    for k in 0..kk {
                        max = max.max(logits.data[idx(d, k)]);
                    }
                }
                let mut sum = 0.0;
                for d in 0..dd {
                    for k in 0..kk {
                        let e = (logits.data[idx(d, k)] - max).exp();
                        weights[idx(d, k)] = e;
                        sum += e;
                    }
                }
                for d in 0..dd {
                    for k in 0..kk {
                        weights[idx(d, k)] /= sum;
                    }
                }
            }
        }

        let mut values = Vec::with_capacity(dd);
        let mut value_cols = Vec::with_capacity(dd);
        for p in projected {
            let (v, cols) = layer.value.forward(params, p);
            values.push(v);
            value_cols.push(cols);
        }

        let mut mixed = Tensor::zeros(self.features, g_rows, g_cols);
        let mut taps = Vec::with_capacity(hh * dd * kk * n_q);
        for h in 0..hh {
            for d in 0..dd {
                for k in 0..kk {
                    let ch = ((h * dd + d) * kk + k) * 2;
                    for q in 0..n_q {
                        let off = [offsets.data[ch * n_q + q], offsets.data[(ch + 1) * n_q + q]];
                        all_offsets[self.offset_index(l, h, q, d, k, n_q)] = off;
                        let (qx, qy) = ((q % g_cols) as f64, (q / g_cols) as f64);
                        let tap = Bilinear::new(qx + off[0], qy + off[1], g_rows, g_cols);
                        let a = weights[((h * dd + d) * kk + k) * n_q + q];
                        for c in 0..ch_per_head {
                            let cc = h * ch_per_head + c;
                            mixed.data[cc * n_q + q] += a * tap.sample(values[d].channel(cc));
                        }
                        taps.push(tap);
                    }
                }
            }
        }
        let (out_pre, mixed_cols) = layer.output.forward(params, &mixed);
        let next = silu(&out_pre);
        let trace = AttnTrace {
            query: query.clone(),
            query_cols,
            offsets,
            weights,
            values,
            value_cols,
            taps,
            mixed_cols,
            out_pre,
        };
        (trace, next)
    }

    /// Reverse pass. Accumulates parameter gradients into `param_grads` when given and
    /// returns per-view input gradients (HWC, image-shaped) when `need_input`.
    pub fn backward(
        &self,
        params: &[f64],
        projections: &[Projection],
        grid: &GroundGrid,
        trace: &Trace,
        grads: &OutputGrads,
        mut param_grads: Option<&mut [f64]>,
        need_input: bool,
    ) -> Option<Vec<Image>> {
        let (g_rows, g_cols) = grid.shape;
        let n_q = g_rows * g_cols;

        // Ground head.
        let mut dx = Tensor { data: grads.ground.clone(), ..trace.ground.clone() };
        dx = sigmoid_backward(&trace.ground, &dx);
        for i in (0..3).rev() {
            let step = &trace.head[i];
            if i < 2 {
                dx = silu_backward(&step.pre, &dx);
            }
            dx = self.ground_head[i]
                .backward(params, step.in_hw, &step.cols, &dx, param_grads.as_deref_mut(), true)
                .expect("input gradient requested");
        }

        let mut dproj: Vec<Tensor> = (0..self.views).map(|_| Tensor::zeros(self.features, g_rows, g_cols)).collect();
        match self.architecture {
            Architecture::Conv => {
                let chunk = self.features * n_q;
                for (d, dp) in dproj.iter_mut().enumerate() {
                    dp.data.copy_from_slice(&dx.data[d * chunk..(d + 1) * chunk]);
                }
            }
            Architecture::Attn => {
                let mut dz = dx;
                for l in (0..self.attention.len()).rev() {
                    dz = self.attention_backward(
                        l,
                        params,
                        &trace.attention[l],
                        &dz,
                        grads.sampling_locations.as_deref(),
                        &mut dproj,
                        param_grads.as_deref_mut(),
                        g_cols,
                    );
                }
                let inv = 1.0 / self.views as f64;
                for dp in &mut dproj {
                    for (a, b) in dp.data.iter_mut().zip(&dz.data) {
                        *a += b * inv;
                    }
                }
            }
        }

        let mut inputs = Vec::with_capacity(self.views);
        for (v, vt) in trace.views.iter().enumerate() {
            let (fh, fw) = vt.feat_hw;
            let mut dfeat = projections[v].backward(&dproj[v], fh, fw);
            let dkp = sigmoid_backward(&vt.keypoints, &grads.keypoints[v]);
            let dk = self
                .keypoint_head
                .backward(params, (fh, fw), &vt.keypoint_cols, &dkp, param_grads.as_deref_mut(), true)
                .expect("input gradient requested");
            dfeat.add_assign(&dk);
            let mut d = dfeat;
            for i in (0..4).rev() {
                let step = &vt.backbone[i];
                d = silu_backward(&step.pre, &d);
                let want_input = i > 0 || need_input;
                match self.backbone[i].backward(params, step.in_hw, &step.cols, &d, param_grads.as_deref_mut(), want_input) {
                    Some(t) => d = t,
                    None => break,
                }
            }
            if need_input {
                inputs.push(tensor_to_image(&d));
            }
        }
        need_input.then_some(inputs)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        l: usize,
        params: &[f64],
        tr: &AttnTrace,
        dz_out: &Tensor,
        dloc_ext: Option<&[[f64; 2]]>,
        dproj: &mut [Tensor],
        mut param_grads: Option<&mut [f64]>,
        g_cols: usize,
    ) -> Tensor {
        let layer = &self.attention[l];
        let n_q = dz_out.plane();
        let g_rows = dz_out.h;
        let (hh, dd, kk) = (self.heads, self.views, self.points);
        let ch_per_head = self.features / hh;

        let d_out_pre = silu_backward(&tr.out_pre, dz_out);
        let dmixed = layer
            .output
            .backward(params, (g_rows, g_cols), &tr.mixed_cols, &d_out_pre, param_grads.as_deref_mut(), true)
            .expect("input gradient requested");

        let mut dweights = vec![0.0; hh * dd * kk * n_q];
        let mut doffsets = Tensor::zeros(tr.offsets.c, g_rows, g_cols);
        let mut dvalues: Vec<Tensor> = (0..dd).map(|_| Tensor::zeros(self.features, g_rows, g_cols)).collect();
        let mut t = 0;
        for h in 0..hh {
            for d in 0..dd {
                for k in 0..kk {
                    let ch = ((h * dd + d) * kk + k) * 2;
                    for q in 0..n_q {
                        let tap = &tr.taps[t];
                        t += 1;
                        let wi = ((h * dd + d) * kk + k) * n_q + q;
                        let a = tr.weights[wi];
                        let (mut gx, mut gy, mut da) = (0.0, 0.0, 0.0);
                        for c in 0..ch_per_head {
                            let cc = h * ch_per_head + c;
                            let g = dmixed.data[cc * n_q + q];
                            if g == 0.0 {
                                continue;
                            }
                            let plane = tr.values[d].channel(cc);
                            da += g * tap.sample(plane);
                            tap.scatter(dvalues[d].channel_mut(cc), a * g);
                            let (sx, sy) = tap.grad_xy(plane);
                            gx += a * g * sx;
                            gy += a * g * sy;
                        }
                        if let Some(ext) = dloc_ext {
                            let e = ext[self.offset_index(l, h, q, d, k, n_q)];
                            gx += e[0];
                            gy += e[1];
                        }
                        dweights[wi] = da;
                        doffsets.data[ch * n_q + q] = gx;
                        doffsets.data[(ch + 1) * n_q + q] = gy;
                    }
                }
            }
        }

        // Softmax backward per (head, query).
        let mut dlogits = Tensor::zeros(hh * dd * kk, g_rows, g_cols);
        for h in 0..hh {
            for q in 0..n_q {
                let idx = |d: usize, k: usize| ((h * dd + d) * kk + k) * n_q + q;
                let mut dot = 0.0;
                for d in 0..dd {
                    for k in 0..kk {
                        dot += tr.weights[idx(d, k)] * dweights[idx(d, k)];
                    }
                }
                for d in 0..dd {
                    for k in 0..kk {
                        let i = idx(d, k);
                        dlogits.data[i] = tr.weights[i] * (dweights[i] - dot);
                    }
                }
            }
        }

        for d in 0..dd {
            let dp = layer
                .value
                .backward(params, (g_rows, g_cols), &tr.value_cols[d], &dvalues[d], param_grads.as_deref_mut(), true)
                .expect("input gradient requested");
            dproj[d].add_assign(&dp);
        }
        let mut dquery = layer
            .offset
            .backward(params, (g_rows, g_cols), &tr.query_cols, &doffsets, param_grads.as_deref_mut(), true)
            .expect("input gradient requested");
        // Both 1x1 layers read the same query, so they share the im2col buffer.
        let dq2 = layer
            .weight
            .backward(params, (g_rows, g_cols), &tr.query_cols, &dlogits, param_grads, true)
            .expect("input gradient requested");
        dquery.add_assign(&dq2);
        debug_assert_eq!(tr.query.c, dquery.c);
        dquery
    }
}
