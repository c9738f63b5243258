//! Toy multiview ground-plane detectors (convolutional and deformable-attention
//! aggregation), their losses, training and per-view input gradients.

mod io;
mod model;
pub mod nn;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraCalibration, GroundGrid};
use crate::raster::Image;
use crate::scene::{GroundTruth, OccupancyMap, ScoreMap};

pub use io::{read_weights, weights_bytes, write_loss_csv, write_weights, WEIGHTS_VERSION};
pub use model::{Network, Projection, FEATURE_STRIDE};
pub use train::{train, EpochRecord, TrainingLog};

use model::{OutputGrads, RawOutput, Trace};
use nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Architecture {
    Conv,
    Attn,
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::Conv => "CONV",
            Architecture::Attn => "ATTN",
        })
    }
}

/// Form of the ground and single-view distances.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// Unsquared Euclidean norms of the flattened map differences.
    Norm,
    /// Mean squared differences.
    SquaredMse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub architecture: Architecture,
    pub feature_width: usize,
    pub head_width: usize,
    pub attn_layers: usize,
    pub attn_heads: usize,
    pub attn_points: usize,
    pub omega: f64,
    pub loss_form: LossForm,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl DetectorConfig {
    pub fn conv() -> Self {
        Self {
            architecture: Architecture::Conv,
            feature_width: 16,
            head_width: 32,
            attn_layers: 1,
            attn_heads: 2,
            attn_points: 4,
            omega: 1.0,
            loss_form: LossForm::Norm,
            epochs: 20,
            batch_size: 8,
            learning_rate: 2e-3,
            seed: 7,
        }
    }

    pub fn attn() -> Self {
        Self { architecture: Architecture::Attn, ..Self::conv() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if self.feature_width == 0 || self.head_width == 0 {
            return bad("feature_width and head_width must be positive");
        }
        if self.architecture == Architecture::Attn {
            if self.attn_layers == 0 || self.attn_heads == 0 || self.attn_points == 0 {
                return bad("attn_layers, attn_heads and attn_points must be positive");
            }
            if self.feature_width % self.attn_heads != 0 {
                return bad("feature_width must be divisible by attn_heads");
            }
        }
        if !(self.omega >= 0.0) || !self.omega.is_finite() {
            return bad("omega must be finite and non-negative");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self::conv()
    }
}

/// Per-(layer, head, query, view, point) sampling pointers of the attention detector.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSamplingState {
    pub layers: usize,
    pub heads: usize,
    pub queries: usize,
    pub views: usize,
    pub points: usize,
    /// Query reference points `(x, y)` in grid coordinates (x = column, y = row).
    pub reference_points: Vec<[f64; 2]>,
    /// Flat `[layer][head][query][view][point]` offsets in grid cells.
    pub offsets: Vec<[f64; 2]>,
}

impl AttentionSamplingState {
    pub fn index(&self, l: usize, h: usize, q: usize, d: usize, k: usize) -> usize {
        (((l * self.heads + h) * self.queries + q) * self.views + d) * self.points + k
    }

    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        (self.layers, self.heads, self.queries, self.views, self.points)
    }

    pub fn sampling_location(&self, l: usize, h: usize, q: usize, d: usize, k: usize) -> [f64; 2] {
        let p = self.reference_points[q];
        let o = self.offsets[self.index(l, h, q, d, k)];
        [p[0] + o[0], p[1] + o[1]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorOutput {
    pub occupancy: OccupancyMap,
    pub head: Vec<ScoreMap>,
    pub foot: Vec<ScoreMap>,
    pub attention: Option<AttentionSamplingState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ground: f64,
    pub single_view: Vec<f64>,
    pub omega: f64,
}

impl LossBreakdown {
    pub fn compose(ground: f64, single_view: Vec<f64>, omega: f64) -> Self {
        let mean = if single_view.is_empty() { 0.0 } else { single_view.iter().sum::<f64>() / single_view.len() as f64 };
        Self { total: ground + omega * mean, ground, single_view, omega }
    }

    pub fn single_view_mean(&self) -> f64 {
        if self.single_view.is_empty() {
            0.0
        } else {
            self.single_view.iter().sum::<f64>() / self.single_view.len() as f64
        }
    }

    /// Element-wise mean of several breakdowns sharing ω.
    pub fn mean(items: &[LossBreakdown]) -> Option<Self> {
        let first = items.first()?;
        let n = items.len() as f64;
        let ground = items.iter().map(|b| b.ground).sum::<f64>() / n;
        let sv = (0..first.single_view.len())
            .map(|v| items.iter().map(|b| b.single_view[v]).sum::<f64>() / n)
            .collect();
        Some(Self::compose(ground, sv, first.omega))
    }
}

/// Gradient of a scalar objective with respect to the detector outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGradient {
    pub occupancy: ScoreMap,
    pub head: Vec<ScoreMap>,
    pub foot: Vec<ScoreMap>,
    /// Gradient with respect to each sampling location, laid out like
    /// [`AttentionSamplingState::offsets`].
    pub sampling_locations: Option<Vec<[f64; 2]>>,
}

impl OutputGradient {
    pub fn zeros_like(out: &DetectorOutput) -> Self {
        let z = |m: &ScoreMap| ScoreMap::zeros(m.rows, m.cols);
        Self {
            occupancy: z(&out.occupancy.scores),
            head: out.head.iter().map(z).collect(),
            foot: out.foot.iter().map(z).collect(),
            sampling_locations: out.attention.as_ref().map(|a| vec![[0.0; 2]; a.offsets.len()]),
        }
    }
}

/// Trained (or freshly initialized) detector parameters together with everything needed
/// to run them: the rig calibration, the ground grid and the image size.
#[derive(Clone, Debug)]
pub struct DetectorWeights {
    pub config: DetectorConfig,
    pub calibs: Vec<CameraCalibration>,
    pub grid: GroundGrid,
    /// (height, width) of the input views.
    pub image_size: [usize; 2],
    pub params: Vec<f64>,
    pub final_train: Option<LossBreakdown>,
    pub final_validation: Option<LossBreakdown>,
    network: Network,
    projections: Vec<Projection>,
}

impl PartialEq for DetectorWeights {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.calibs == other.calibs
            && self.grid == other.grid
            && self.image_size == other.image_size
            && self.params == other.params
            && self.final_train == other.final_train
            && self.final_validation == other.final_validation
    }
}

impl DetectorWeights {
    /// Randomly initialized detector for the given rig.
    pub fn init(config: &DetectorConfig, calibs: &[CameraCalibration], grid: &GroundGrid, image_size: [usize; 2]) -> Result<Self> {
        use rand::SeedableRng;
        let network = Network::new(config, calibs.len());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        let params = network.init_params(&mut rng);
        Self::from_params(config.clone(), calibs.to_vec(), grid.clone(), image_size, params)
    }

    pub fn from_params(
        config: DetectorConfig,
        calibs: Vec<CameraCalibration>,
        grid: GroundGrid,
        image_size: [usize; 2],
        params: Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        grid.validate()?;
        if calibs.len() < 2 {
            return Err(Error::ConfigInvalid("a multiview detector needs at least 2 views".into()));
        }
        let [h, w] = image_size;
        if h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 || h < 8 || w < 8 {
            return Err(Error::ConfigInvalid(format!("image size {h}x{w} must be a multiple of {FEATURE_STRIDE}")));
        }
        for c in &calibs {
            c.validate()?;
            if (c.height(), c.width()) != (h, w) {
                return Err(Error::ShapeMismatch(format!("view {} calibration is {}x{}, expected {h}x{w}", c.view_id, c.height(), c.width())));
            }
        }
        let network = Network::new(&config, calibs.len());
        if params.len() != network.n_params {
            return Err(Error::ShapeMismatch(format!("expected {} parameters, got {}", network.n_params, params.len())));
        }
        let (fh, fw) = (h / FEATURE_STRIDE, w / FEATURE_STRIDE);
        let projections = calibs.iter().map(|c| Projection::new(c, &grid, fh, fw)).collect();
        Ok(Self { config, calibs, grid, image_size, params, final_train: None, final_validation: None, network, projections })
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn num_views(&self) -> usize {
        self.calibs.len()
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    /// Shape of the per-view head/foot maps.
    pub fn map_shape(&self) -> (usize, usize) {
        (self.image_size[0] / FEATURE_STRIDE, self.image_size[1] / FEATURE_STRIDE)
    }

    fn check_images(&self, images: &[Image]) -> Result<()> {
        if images.len() != self.num_views() {
            return Err(Error::ShapeMismatch(format!("expected {} views, got {}", self.num_views(), images.len())));
        }
        for (v, img) in images.iter().enumerate() {
            if img.height != self.image_size[0] || img.width != self.image_size[1] || img.channels != 3 {
                return Err(Error::ShapeMismatch(format!(
                    "view {v} is {}x{}x{}, expected {}x{}x3",
                    img.height, img.width, img.channels, self.image_size[0], self.image_size[1]
                )));
            }
        }
        Ok(())
    }

    fn run(&self, images: &[Image]) -> Result<(DetectorOutput, Trace)> {
        self.check_images(images)?;
        let (raw, trace) = self.network.forward(&self.params, &self.projections, &self.grid, images)?;
        Ok((self.wrap(raw), trace))
    }

    fn wrap(&self, raw: RawOutput) -> DetectorOutput {
        let (rows, cols) = self.grid.shape;
        let to_map = |t: &Tensor, ch: usize| ScoreMap { rows: t.h, cols: t.w, data: t.channel(ch).to_vec() };
        let attention = raw.offsets.map(|offsets| AttentionSamplingState {
            layers: self.config.attn_layers,
            heads: self.config.attn_heads,
            queries: rows * cols,
            views: self.num_views(),
            points: self.config.attn_points,
            reference_points: (0..rows * cols).map(|q| [(q % cols) as f64, (q / cols) as f64]).collect(),
            offsets,
        });
        DetectorOutput {
            occupancy: OccupancyMap { grid: self.grid.clone(), scores: to_map(&raw.ground, 0) },
            head: raw.keypoints.iter().map(|t| to_map(t, 0)).collect(),
            foot: raw.keypoints.iter().map(|t| to_map(t, 1)).collect(),
            attention,
        }
    }

    fn unwrap_grad(&self, g: &OutputGradient) -> Result<OutputGrads> {
        let (mh, mw) = self.map_shape();
        if g.head.len() != self.num_views() || g.foot.len() != self.num_views() {
            return Err(Error::ShapeMismatch("output gradient has the wrong number of views".into()));
        }
        let mut keypoints = Vec::with_capacity(self.num_views());
        for (h, f) in g.head.iter().zip(&g.foot) {
            if (h.rows, h.cols) != (mh, mw) || (f.rows, f.cols) != (mh, mw) {
                return Err(Error::ShapeMismatch("head/foot gradient shape".into()));
            }
            let mut t = Tensor::zeros(2, mh, mw);
            t.channel_mut(0).copy_from_slice(&h.data);
            t.channel_mut(1).copy_from_slice(&f.data);
            keypoints.push(t);
        }
        Ok(OutputGrads { ground: g.occupancy.data.clone(), keypoints, sampling_locations: g.sampling_locations.clone() })
    }

    /// Gradient of `objective(output)` with respect to the parameters, accumulated into
    /// `param_grads`. Returns the objective value and the output.
    pub(crate) fn param_gradient<F>(&self, images: &[Image], param_grads: &mut [f64], objective: F) -> Result<(f64, DetectorOutput)>
    where
        F: FnOnce(&DetectorOutput) -> Result<(f64, OutputGradient)>,
    {
        let (out, trace) = self.run(images)?;
        let (value, g) = objective(&out)?;
        let grads = self.unwrap_grad(&g)?;
        self.network.backward(&self.params, &self.projections, &self.grid, &trace, &grads, Some(param_grads), false);
        Ok((value, out))
    }
}

/// Runs the detector on one multiview frame.
pub fn forward(weights: &DetectorWeights, images: &[Image]) -> Result<DetectorOutput> {
    Ok(weights.run(images)?.0)
}

fn check_shapes(output: &DetectorOutput, truth: &GroundTruth) -> Result<()> {
    let ok = output.occupancy.scores.same_shape(&truth.occupancy.scores)
        && output.head.len() == truth.head_maps.len()
        && output.foot.len() == truth.foot_maps.len()
        && output.head.iter().zip(&truth.head_maps).all(|(a, b)| a.same_shape(b))
        && output.foot.iter().zip(&truth.foot_maps).all(|(a, b)| a.same_shape(b));
    if ok {
        Ok(())
    } else {
        Err(Error::ShapeMismatch("detector output does not match the ground-truth maps".into()))
    }
}

/// Distance between two maps and its gradient with respect to `pred`.
fn map_distance(pred: &ScoreMap, target: &ScoreMap, form: LossForm) -> (f64, Vec<f64>) {
    let r: Vec<f64> = pred.data.iter().zip(&target.data).map(|(p, t)| p - t).collect();
    match form {
        LossForm::Norm => {
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            let g = if norm > 0.0 { r.iter().map(|x| x / norm).collect() } else { vec![0.0; r.len()] };
            (norm, g)
        }
        LossForm::SquaredMse => {
            let n = r.len() as f64;
            let mse = r.iter().map(|x| x * x).sum::<f64>() / n;
            (mse, r.iter().map(|x| 2.0 * x / n).collect())
        }
    }
}

/// Ground loss, per-view single-view losses and their ω-weighted total.
pub fn compute_losses(output: &DetectorOutput, truth: &GroundTruth, omega: f64) -> Result<LossBreakdown> {
    Ok(loss_with_gradient(output, truth, omega, LossForm::Norm)?.0)
}

/// Loss breakdown plus the gradient of its total with respect to the outputs.
pub fn loss_with_gradient(
    output: &DetectorOutput,
    truth: &GroundTruth,
    omega: f64,
    form: LossForm,
) -> Result<(LossBreakdown, OutputGradient)> {
    check_shapes(output, truth)?;
    let n = output.head.len();
    let (ground, gg) = map_distance(&output.occupancy.scores, &truth.occupancy.scores, form);
    let mut grad = OutputGradient::zeros_like(output);
    grad.occupancy.data = gg;
    let scale = if n > 0 { omega / n as f64 } else { 0.0 };
    let mut single = Vec::with_capacity(n);
    for v in 0..n {
        let (lh, gh) = map_distance(&output.head[v], &truth.head_maps[v], form);
        let (lf, gf) = map_distance(&output.foot[v], &truth.foot_maps[v], form);
        single.push(lh + lf);
        grad.head[v].data = gh.into_iter().map(|x| x * scale).collect();
        grad.foot[v].data = gf.into_iter().map(|x| x * scale).collect();
    }
    Ok((LossBreakdown::compose(ground, single, omega), grad))
}

/// Per-view input gradients of an arbitrary scalar objective of the detector output.
pub fn input_gradients_with<F>(weights: &DetectorWeights, images: &[Image], objective: F) -> Result<(DetectorOutput, Vec<Image>)>
where
    F: FnOnce(&DetectorOutput) -> Result<OutputGradient>,
{
    let (out, mut grads) = input_gradients_many(weights, images, |o| Ok(vec![objective(o)?]))?;
    Ok((out, grads.pop().expect("one objective")))
}

/// Per-view gradients of the ω-weighted total detection loss.
pub fn input_gradients(
    weights: &DetectorWeights,
    images: &[Image],
    truth: &GroundTruth,
    omega: f64,
) -> Result<(LossBreakdown, Vec<Image>)> {
    let mut breakdown = None;
    let (_, grads) = input_gradients_with(weights, images, |out| {
        let (b, g) = loss_with_gradient(out, truth, omega, LossForm::Norm)?;
        breakdown = Some(b);
        Ok(g)
    })?;
    Ok((breakdown.expect("objective evaluated"), grads))
}

/// Per-view input gradients of several objectives sharing one forward pass.
pub fn input_gradients_many<F>(weights: &DetectorWeights, images: &[Image], objectives: F) -> Result<(DetectorOutput, Vec<Vec<Image>>)>
where
    F: FnOnce(&DetectorOutput) -> Result<Vec<OutputGradient>>,
{
    let (out, trace) = weights.run(images)?;
    let mut all = Vec::new();
    for g in objectives(&out)? {
        let grads = weights.unwrap_grad(&g)?;
        let per_view = weights
            .network
            .backward(&weights.params, &weights.projections, &weights.grid, &trace, &grads, None, true)
            .expect("input gradients requested");
        for (v, img) in per_view.iter().enumerate() {
            if !img.is_finite() {
                return Err(Error::NonFiniteGradient(v));
            }
        }
        all.push(per_view);
    }
    Ok((out, all))
}
