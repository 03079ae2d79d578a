//! Inference-only GCN: embedding, graph-convolution layers with optional batch
//! norm, mean readout, and dense layers. A model with no graph-convolution and
//! no readout is an MLP and consumes single-vertex graphs.

mod io;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Dataset, FusionBatch, Graph, ScalarGraph};

pub use io::{load_model, save_model, MODEL_SCHEMA_VERSION};

/// Affine map `x -> weight · x + bias` with `weight` of shape `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl DenseParams {
    pub fn new(weight: Array2<f64>, bias: Option<Array1<f64>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.nrows() {
                return Err(Error::dims("bias length", weight.nrows(), b.len()));
            }
        }
        Ok(DenseParams { weight, bias })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    /// Applies the map to every row of `h` (`[rows, in] -> [rows, out]`).
    fn apply_rows(&self, h: &Array2<f64>) -> Array2<f64> {
        let mut z = h.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            z += b;
        }
        z
    }
}

/// Inference-mode batch normalization over the feature axis.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Array1<f64>,
    pub beta_shift: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub epsilon: f64,
}

impl BatchNormParams {
    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// Identity normalization of width `dim` (up to `epsilon`).
    pub fn identity(dim: usize, epsilon: f64) -> Self {
        BatchNormParams {
            gamma: Array1::ones(dim),
            beta_shift: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            epsilon,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let d = self.gamma.len();
        for (name, v) in [
            ("beta_shift", &self.beta_shift),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if v.len() != d {
                return Err(format!("batch norm {name} has length {}, expected {d}", v.len()));
            }
        }
        if self.running_var.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err("batch norm running_var must be finite and >= 0".into());
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(format!("batch norm epsilon {} must be >= 0", self.epsilon));
        }
        Ok(())
    }

    /// `gamma · (x − mean) / sqrt(var + eps) + beta`, per column of `z`.
    pub fn apply_rows(&self, z: &mut Array2<f64>) {
        for mut row in z.outer_iter_mut() {
            for (k, x) in row.iter_mut().enumerate() {
                *x = self.gamma[k] * (*x - self.running_mean[k])
                    / (self.running_var[k] + self.epsilon).sqrt()
                    + self.beta_shift[k];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Bias-free linear map applied per vertex.
    Embedding(DenseParams),
    /// Normalized neighborhood aggregation, shared linear map, optional BN, ReLU.
    GraphConv {
        linear: DenseParams,
        batch_norm: Option<BatchNormParams>,
    },
    /// Mean over vertices.
    MeanReadout,
    Dense {
        linear: DenseParams,
        batch_norm: Option<BatchNormParams>,
        activation: Activation,
    },
}

impl Layer {
    pub fn linear(&self) -> Option<&DenseParams> {
        match self {
            Layer::Embedding(p) => Some(p),
            Layer::GraphConv { linear, .. } | Layer::Dense { linear, .. } => Some(linear),
            Layer::MeanReadout => None,
        }
    }

    pub fn linear_mut(&mut self) -> Option<&mut DenseParams> {
        match self {
            Layer::Embedding(p) => Some(p),
            Layer::GraphConv { linear, .. } | Layer::Dense { linear, .. } => Some(linear),
            Layer::MeanReadout => None,
        }
    }

    pub fn batch_norm(&self) -> Option<&BatchNormParams> {
        match self {
            Layer::GraphConv { batch_norm, .. } | Layer::Dense { batch_norm, .. } => {
                batch_norm.as_ref()
            }
            _ => None,
        }
    }

    pub fn batch_norm_mut(&mut self) -> Option<&mut BatchNormParams> {
        match self {
            Layer::GraphConv { batch_norm, .. } | Layer::Dense { batch_norm, .. } => {
                batch_norm.as_mut()
            }
            _ => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Embedding(_) => "embedding",
            Layer::GraphConv { .. } => "graph_conv",
            Layer::MeanReadout => "mean_readout",
            Layer::Dense { .. } => "dense",
        }
    }

    fn activation(&self) -> Activation {
        match self {
            Layer::Embedding(_) => Activation::Identity,
            Layer::GraphConv { .. } => Activation::Relu,
            Layer::MeanReadout => Activation::Identity,
            Layer::Dense { activation, .. } => *activation,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub architecture: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnModel {
    layers: Vec<Layer>,
    pub metadata: ModelMetadata,
}

/// Where pre-activations are read on layers carrying batch norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CapturePoint {
    PreBn,
    #[default]
    PostBn,
}

impl GcnModel {
    /// Validates layer ordering and dimensions. The final layer must emit one value.
    pub fn new(layers: Vec<Layer>, metadata: ModelMetadata) -> Result<Self> {
        let bad = |layer: usize, message: String| Error::ModelSchema { layer, message };
        if layers.is_empty() {
            return Err(Error::InvalidModel("model has no layers".into()));
        }
        let readouts: Vec<usize> = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::MeanReadout))
            .map(|(i, _)| i)
            .collect();
        if readouts.len() > 1 {
            return Err(bad(readouts[1], "more than one mean readout".into()));
        }
        let readout = readouts.first().copied();
        let mut width: Option<usize> = None;
        for (i, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Embedding(p) => {
                    if i != 0 {
                        return Err(bad(i, "embedding must be the first layer".into()));
                    }
                    if p.bias.is_some() {
                        return Err(bad(i, "embedding carries no bias".into()));
                    }
                }
                Layer::GraphConv { .. } => match readout {
                    None => return Err(bad(i, "graph convolution without a mean readout".into())),
                    Some(r) if i > r => {
                        return Err(bad(i, "graph convolution after the readout".into()))
                    }
                    _ => {}
                },
                Layer::Dense { .. } => {
                    if matches!(readout, Some(r) if i < r) {
                        return Err(bad(i, "dense layer before the readout".into()));
                    }
                }
                Layer::MeanReadout => {}
            }
            if let Some(p) = layer.linear() {
                if let Some(b) = &p.bias {
                    if b.len() != p.out_dim() {
                        return Err(bad(
                            i,
                            format!("bias length {} != out_dim {}", b.len(), p.out_dim()),
                        ));
                    }
                }
                if let Some(w) = width {
                    if p.in_dim() != w {
                        return Err(bad(
                            i,
                            format!("in_dim {} does not match previous width {w}", p.in_dim()),
                        ));
                    }
                }
                if let Some(bn) = layer.batch_norm() {
                    bn.validate().map_err(|m| bad(i, m))?;
                    if bn.dim() != p.out_dim() {
                        return Err(bad(
                            i,
                            format!("batch norm width {} != out_dim {}", bn.dim(), p.out_dim()),
                        ));
                    }
                }
                width = Some(p.out_dim());
            }
        }
        let last = layers.len() - 1;
        match layers[last].linear() {
            Some(p) if p.out_dim() == 1 => {}
            _ => return Err(bad(last, "final layer must be a linear map with out_dim 1".into())),
        }
        Ok(GcnModel { layers, metadata })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Graph-free model: no graph convolution and no readout.
    pub fn is_mlp(&self) -> bool {
        !self.layers.iter().any(|l| matches!(l, Layer::GraphConv { .. } | Layer::MeanReadout))
    }

    pub fn input_dim(&self) -> usize {
        self.layers
            .iter()
            .find_map(Layer::linear)
            .expect("validated model has a linear layer")
            .in_dim()
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| l.batch_norm().is_some())
    }

    /// Indices of layers carrying a linear map, in order.
    pub fn parametric_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.linear().is_some())
            .map(|(i, _)| i)
            .collect()
    }

    /// Index of the mean readout, if any.
    pub fn readout_index(&self) -> Option<usize> {
        self.layers.iter().position(|l| matches!(l, Layer::MeanReadout))
    }

    /// True when layer `index` produces per-vertex outputs.
    pub fn is_vertex_level(&self, index: usize) -> bool {
        match self.readout_index() {
            Some(r) => index < r,
            None => false,
        }
    }

    /// Compact structural signature; equal signatures mean fusable models.
    pub fn signature(&self) -> Vec<String> {
        self.layers
            .iter()
            .map(|l| match l.linear() {
                None => l.kind_name().to_string(),
                Some(p) => format!(
                    "{}[{}->{}{}{}{:?}]",
                    l.kind_name(),
                    p.in_dim(),
                    p.out_dim(),
                    if p.bias.is_some() { ",bias" } else { "" },
                    if l.batch_norm().is_some() { ",bn" } else { "" },
                    l.activation(),
                ),
            })
            .collect()
    }

    pub fn check_compatible(&self, other: &GcnModel) -> Result<()> {
        let (a, b) = (self.signature(), other.signature());
        if a != b {
            return Err(Error::ArchitectureMismatch(format!(
                "{} vs {}",
                a.join(" "),
                b.join(" ")
            )));
        }
        Ok(())
    }

    /// Rebuilds the model with replaced layers, re-validating.
    pub fn with_layers(&self, layers: Vec<Layer>) -> Result<Self> {
        GcnModel::new(layers, self.metadata.clone())
    }

    fn check_input(&self, graph: &Graph) -> Result<()> {
        if graph.feature_dim() != self.input_dim() {
            return Err(Error::dims(
                "graph feature_dim vs model input",
                self.input_dim(),
                graph.feature_dim(),
            ));
        }
        if self.is_mlp() && graph.num_vertices() != 1 {
            return Err(Error::dims(
                "MLP input vertex count",
                1,
                graph.num_vertices(),
            ));
        }
        Ok(())
    }

    /// Runs the network, calling `capture(layer, values)` with each
    /// parametric layer's linear output (`[rows, out]`) at `point`.
    fn run(
        &self,
        graph: &Graph,
        point: CapturePoint,
        mut capture: impl FnMut(usize, &Array2<f64>),
    ) -> Result<f64> {
        self.check_input(graph)?;
        let mut h = graph.features().clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::MeanReadout => h
                    .mean_axis(Axis(0))
                    .expect("graphs have at least one vertex")
                    .insert_axis(Axis(0)),
                Layer::Embedding(p) => {
                    let z = p.apply_rows(&h);
                    capture(i, &z);
                    z
                }
                Layer::GraphConv { linear, batch_norm } => {
                    let agg = aggregate(graph, &h);
                    let mut z = linear.apply_rows(&agg);
                    self.normalize_and_capture(i, &mut z, batch_norm.as_ref(), point, &mut capture);
                    z.mapv_inplace(relu);
                    z
                }
                Layer::Dense {
                    linear,
                    batch_norm,
                    activation,
                } => {
                    let mut z = linear.apply_rows(&h);
                    self.normalize_and_capture(i, &mut z, batch_norm.as_ref(), point, &mut capture);
                    if *activation == Activation::Relu {
                        z.mapv_inplace(relu);
                    }
                    z
                }
            };
        }
        debug_assert_eq!(h.dim(), (1, 1));
        Ok(h[[0, 0]])
    }

    fn normalize_and_capture(
        &self,
        index: usize,
        z: &mut Array2<f64>,
        bn: Option<&BatchNormParams>,
        point: CapturePoint,
        capture: &mut impl FnMut(usize, &Array2<f64>),
    ) {
        if point == CapturePoint::PreBn {
            capture(index, z);
        }
        if let Some(bn) = bn {
            bn.apply_rows(z);
        }
        if point == CapturePoint::PostBn {
            capture(index, z);
        }
    }
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// `agg_i = deg_i^{-1/2} Σ_{j ∈ N(i) ∪ {i}} deg_j^{-1/2} h_j`.
fn aggregate(graph: &Graph, h: &Array2<f64>) -> Array2<f64> {
    let n = graph.num_vertices();
    let inv_sqrt: Vec<f64> = (0..n).map(|v| 1.0 / (graph.degree(v) as f64).sqrt()).collect();
    let mut out = Array2::zeros(h.raw_dim());
    for i in 0..n {
        let mut row = out.row_mut(i);
        row.scaled_add(inv_sqrt[i], &h.row(i));
        for &j in graph.neighbors(i) {
            row.scaled_add(inv_sqrt[j], &h.row(j));
        }
        row *= inv_sqrt[i];
    }
    out
}

/// Scalar prediction for one graph.
pub fn forward(model: &GcnModel, graph: &Graph) -> Result<f64> {
    model.run(graph, CapturePoint::PostBn, |_, _| {})
}

/// Predictions for every graph, in order.
pub fn predict(model: &GcnModel, graphs: &[Graph]) -> Result<Vec<f64>> {
    graphs.par_iter().map(|g| forward(model, g)).collect()
}

/// Pre-activations of one parametric layer over a fusion batch.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerActivations<'g> {
    /// Before the readout: `neurons[j][k]` is neuron `j`'s scalar graph on batch graph `k`.
    Graphs(Vec<Vec<ScalarGraph<'g>>>),
    /// After the readout (or in an MLP): `[neurons, samples]`.
    Scalars(Array2<f64>),
}

impl LayerActivations<'_> {
    pub fn num_neurons(&self) -> usize {
        match self {
            LayerActivations::Graphs(n) => n.len(),
            LayerActivations::Scalars(m) => m.nrows(),
        }
    }

    pub fn num_samples(&self) -> usize {
        match self {
            LayerActivations::Graphs(n) => n.first().map_or(0, Vec::len),
            LayerActivations::Scalars(m) => m.ncols(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapturedLayer<'g> {
    pub layer_index: usize,
    pub activations: LayerActivations<'g>,
}

/// Per-layer pre-activations of every parametric layer over one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSample<'g> {
    pub capture_point: CapturePoint,
    pub layers: Vec<CapturedLayer<'g>>,
}

impl<'g> ActivationSample<'g> {
    pub fn layer(&self, layer_index: usize) -> Option<&LayerActivations<'g>> {
        self.layers
            .iter()
            .find(|c| c.layer_index == layer_index)
            .map(|c| &c.activations)
    }
}

/// Runs the batch and records every parametric layer's pre-activations.
pub fn forward_with_capture<'g>(
    model: &GcnModel,
    batch: &'g FusionBatch,
    capture_point: CapturePoint,
) -> Result<(Vec<f64>, ActivationSample<'g>)> {
    let params = model.parametric_layers();
    let per_graph: Vec<(f64, Vec<Array2<f64>>)> = batch
        .graphs()
        .par_iter()
        .map(|g| {
            let mut captured = Vec::with_capacity(params.len());
            let y = model.run(g, capture_point, |_, z| captured.push(z.clone()))?;
            Ok((y, captured))
        })
        .collect::<Result<_>>()?;

    let predictions = per_graph.iter().map(|(y, _)| *y).collect();
    let samples = batch.sample_size();
    let mut layers = Vec::with_capacity(params.len());
    for (slot, &layer_index) in params.iter().enumerate() {
        let width = model.layers[layer_index].linear().expect("parametric").out_dim();
        let activations = if model.is_vertex_level(layer_index) {
            let mut neurons: Vec<Vec<ScalarGraph<'g>>> = (0..width)
                .map(|_| Vec::with_capacity(samples))
                .collect();
            for (k, g) in batch.graphs().iter().enumerate() {
                let z = &per_graph[k].1[slot];
                for (j, neuron) in neurons.iter_mut().enumerate() {
                    neuron.push(ScalarGraph::new(g, z.column(j).to_owned())?);
                }
            }
            LayerActivations::Graphs(neurons)
        } else {
            let mut m = Array2::zeros((width, samples));
            for k in 0..samples {
                let z = &per_graph[k].1[slot];
                m.column_mut(k).assign(&z.row(0));
            }
            LayerActivations::Scalars(m)
        };
        layers.push(CapturedLayer {
            layer_index,
            activations,
        });
    }
    Ok((
        predictions,
        ActivationSample {
            capture_point,
            layers,
        },
    ))
}

/// Mean absolute error over a dataset whose graphs all carry targets.
pub fn evaluate_mae(model: &GcnModel, dataset: &Dataset) -> Result<f64> {
    let targets = targets_of(dataset)?;
    let predictions = predict(model, dataset.graphs())?;
    Ok(mean_abs_error(&predictions, &targets))
}

pub(crate) fn targets_of(dataset: &Dataset) -> Result<Vec<f64>> {
    dataset
        .graphs()
        .iter()
        .enumerate()
        .map(|(index, g)| g.target().ok_or(Error::MissingTarget { index }))
        .collect()
}

pub(crate) fn mean_abs_error(predictions: &[f64], targets: &[f64]) -> f64 {
    let total: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).abs())
        .sum();
    total / predictions.len() as f64
}

/// Reorders hidden neurons. `permutations[h][r]` is the old index of new
/// neuron `r` in the `h`-th hidden parametric layer; the output layer is fixed.
pub fn permute_model(model: &GcnModel, permutations: &[Vec<usize>]) -> Result<GcnModel> {
    let params = model.parametric_layers();
    let hidden = params.len() - 1;
    if permutations.len() != hidden {
        return Err(Error::dims("permutation count", hidden, permutations.len()));
    }
    for (h, perm) in permutations.iter().enumerate() {
        let width = model.layers[params[h]].linear().expect("parametric").out_dim();
        if !is_permutation(perm, width) {
            return Err(Error::InvalidParameter(format!(
                "permutation {h} is not a permutation of 0..{width}"
            )));
        }
    }
    let mut layers = model.layers.clone();
    for (slot, &li) in params.iter().enumerate() {
        let layer = &mut layers[li];
        if slot > 0 {
            let prev = &permutations[slot - 1];
            let p = layer.linear_mut().expect("parametric");
            p.weight = p.weight.select(Axis(1), prev);
        }
        if let Some(rows) = permutations.get(slot) {
            let p = layer.linear_mut().expect("parametric");
            p.weight = p.weight.select(Axis(0), rows);
            if let Some(b) = &mut p.bias {
                *b = b.select(Axis(0), rows);
            }
            if let Some(bn) = layer.batch_norm_mut() {
                bn.gamma = bn.gamma.select(Axis(0), rows);
                bn.beta_shift = bn.beta_shift.select(Axis(0), rows);
                bn.running_mean = bn.running_mean.select(Axis(0), rows);
                bn.running_var = bn.running_var.select(Axis(0), rows);
            }
        }
    }
    model.with_layers(layers)
}

fn is_permutation(perm: &[usize], n: usize) -> bool {
    if perm.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    perm.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
}

/// Widths of the hidden parametric layers (all but the output layer).
pub fn hidden_widths(model: &GcnModel) -> Vec<usize> {
    let params = model.parametric_layers();
    params[..params.len() - 1]
        .iter()
        .map(|&i| model.layers[i].linear().expect("parametric").out_dim())
        .collect()
}

/// Uniformly random permutations for every hidden layer.
pub fn random_permutations(model: &GcnModel, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    hidden_widths(model)
        .into_iter()
        .map(|w| {
            let mut p: Vec<usize> = (0..w).collect();
            p.shuffle(rng);
            p
        })
        .collect()
}

/// Layer-size description used by [`random_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embedding: bool,
    pub graph_conv_layers: usize,
    pub batch_norm: bool,
    /// Widths of hidden dense layers after the readout; a width-1 output layer follows.
    pub dense_dims: Vec<usize>,
    /// Batch norm on hidden dense layers.
    #[serde(default)]
    pub dense_batch_norm: bool,
    /// Graph-free model: no graph convolution, no readout.
    #[serde(default)]
    pub mlp: bool,
}

impl ArchSpec {
    /// Benchmark-style regression GCN: one-hot embedding, 4 GC layers with
    /// BN at width 145, then a 145 -> 72 -> 36 -> 1 readout MLP.
    pub fn zinc_gcn() -> Self {
        ArchSpec {
            input_dim: 28,
            hidden_dim: 145,
            embedding: true,
            graph_conv_layers: 4,
            batch_norm: true,
            dense_dims: vec![72, 36],
            dense_batch_norm: false,
            mlp: false,
        }
    }

    pub fn small_gcn(input_dim: usize, hidden_dim: usize, batch_norm: bool) -> Self {
        ArchSpec {
            input_dim,
            hidden_dim,
            embedding: false,
            graph_conv_layers: 2,
            batch_norm,
            dense_dims: vec![hidden_dim, hidden_dim],
            dense_batch_norm: false,
            mlp: false,
        }
    }

    pub fn small_mlp(input_dim: usize, hidden_dim: usize) -> Self {
        ArchSpec {
            input_dim,
            hidden_dim,
            embedding: false,
            graph_conv_layers: 0,
            batch_norm: false,
            dense_dims: vec![hidden_dim, hidden_dim],
            dense_batch_norm: false,
            mlp: true,
        }
    }

    pub fn describe(&self) -> String {
        if self.mlp {
            format!(
                "mlp in={} dense={:?}{}",
                self.input_dim,
                self.dense_dims,
                if self.embedding { " +embedding" } else { "" }
            )
        } else {
            format!(
                "gcn in={} hidden={} gc={}{}{} dense={:?}",
                self.input_dim,
                self.hidden_dim,
                self.graph_conv_layers,
                if self.batch_norm { "+bn" } else { "" },
                if self.embedding { " +embedding" } else { "" },
                self.dense_dims
            )
        }
    }
}

/// He-initialized random model; deterministic for a fixed seed.
pub fn random_model(arch: &ArchSpec, seed: u64) -> Result<GcnModel> {
    if arch.input_dim == 0 || arch.hidden_dim == 0 || arch.dense_dims.contains(&0) {
        return Err(Error::InvalidModel("layer widths must be positive".into()));
    }
    if arch.mlp && arch.graph_conv_layers > 0 {
        return Err(Error::InvalidModel("an MLP has no graph convolutions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut width = arch.input_dim;
    if arch.embedding {
        layers.push(Layer::Embedding(dense(&mut rng, width, arch.hidden_dim, false)));
        width = arch.hidden_dim;
    }
    if !arch.mlp {
        for _ in 0..arch.graph_conv_layers {
            layers.push(Layer::GraphConv {
                linear: dense(&mut rng, width, arch.hidden_dim, true),
                batch_norm: arch.batch_norm.then(|| batch_norm(&mut rng, arch.hidden_dim)),
            });
            width = arch.hidden_dim;
        }
        layers.push(Layer::MeanReadout);
    }
    for &d in &arch.dense_dims {
        layers.push(Layer::Dense {
            linear: dense(&mut rng, width, d, true),
            batch_norm: arch.dense_batch_norm.then(|| batch_norm(&mut rng, d)),
            activation: Activation::Relu,
        });
        width = d;
    }
    layers.push(Layer::Dense {
        linear: dense(&mut rng, width, 1, true),
        batch_norm: None,
        activation: Activation::Identity,
    });
    GcnModel::new(
        layers,
        ModelMetadata {
            name: format!("random-{seed}"),
            seed: Some(seed),
            architecture: arch.describe(),
        },
    )
}

/// Multiplies every weight and bias entry by `1 + noise·ξ` with standard
/// normal `ξ`. Batch-norm parameters are left untouched.
pub fn perturb_model(model: &GcnModel, noise: f64, seed: u64) -> Result<GcnModel> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise must be nonnegative, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xi = Normal::new(0.0, 1.0).expect("positive std");
    let mut layers = model.layers.clone();
    for layer in &mut layers {
        if let Some(p) = layer.linear_mut() {
            p.weight.mapv_inplace(|w| w * (1.0 + noise * xi.sample(&mut rng)));
            if let Some(b) = &mut p.bias {
                b.mapv_inplace(|v| v * (1.0 + noise * xi.sample(&mut rng)));
            }
        }
    }
    model.with_layers(layers)
}

fn dense(rng: &mut ChaCha8Rng, input: usize, output: usize, bias: bool) -> DenseParams {
    let w = Normal::new(0.0, (2.0 / input as f64).sqrt()).expect("positive std");
    let b = Normal::new(0.0, 0.1).expect("positive std");
    let weight = Array2::from_shape_simple_fn((output, input), || w.sample(rng));
    let bias = bias.then(|| Array1::from_shape_simple_fn(output, || b.sample(rng)));
    DenseParams { weight, bias }
}

fn batch_norm(rng: &mut ChaCha8Rng, dim: usize) -> BatchNormParams {
    let shift = Normal::new(0.0, 0.1).expect("positive std");
    let mean = Normal::new(0.0, 0.5).expect("positive std");
    BatchNormParams {
        gamma: Array1::from_shape_simple_fn(dim, || rng.random_range(0.5..1.5)),
        beta_shift: Array1::from_shape_simple_fn(dim, || shift.sample(rng)),
        running_mean: Array1::from_shape_simple_fn(dim, || mean.sample(rng)),
        running_var: Array1::from_shape_simple_fn(dim, || rng.random_range(0.5..2.0)),
        epsilon: 1e-5,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{synthesize_dataset, GeneratorSpec};
    use ndarray::array;

    fn single_conv(w: f64, b: f64, bn: Option<BatchNormParams>) -> GcnModel {
        GcnModel::new(
            vec![
                Layer::GraphConv {
                    linear: DenseParams::new(array![[w]], Some(array![b])).unwrap(),
                    batch_norm: bn,
                },
                Layer::MeanReadout,
                Layer::Dense {
                    linear: DenseParams::new(array![[1.0]], Some(array![0.0])).unwrap(),
                    batch_norm: None,
                    activation: Activation::Identity,
                },
            ],
            ModelMetadata::default(),
        )
        .unwrap()
    }

    fn one_vertex(x: f64) -> Graph {
        Graph::new(1, vec![], array![[x]], None).unwrap()
    }

    #[test]
    fn single_vertex_conv() {
        let m = single_conv(2.0, 1.0, None);
        assert_eq!(forward(&m, &one_vertex(3.0)).unwrap(), 7.0);
    }

    #[test]
    fn two_vertex_path_by_hand() {
        // deg = 2 for both ends; aggregation of vertex 0 is (x0 + x1) / 2.
        // x = (1, 3): agg = (2, 2); z = 2*2 - 1 = 3 on both; relu 3; mean 3;
        // dense 0.5*3 + 0.25 = 1.75.
        let m = GcnModel::new(
            vec![
                Layer::GraphConv {
                    linear: DenseParams::new(array![[2.0]], Some(array![-1.0])).unwrap(),
                    batch_norm: None,
                },
                Layer::MeanReadout,
                Layer::Dense {
                    linear: DenseParams::new(array![[0.5]], Some(array![0.25])).unwrap(),
                    batch_norm: None,
                    activation: Activation::Identity,
                },
            ],
            ModelMetadata::default(),
        )
        .unwrap();
        let g = Graph::new(2, vec![(0, 1)], array![[1.0], [3.0]], None).unwrap();
        assert!((forward(&m, &g).unwrap() - 1.75).abs() < 1e-15);

        // Asymmetric degrees: star 0-1, 0-2. deg0 = 3, deg1 = deg2 = 2.
        let g = Graph::new(3, vec![(0, 1), (0, 2)], array![[1.0], [2.0], [4.0]], None).unwrap();
        let s3 = 3f64.sqrt();
        let s2 = 2f64.sqrt();
        let agg0 = (1.0 / s3) * (1.0 / s3 + 2.0 / s2 + 4.0 / s2);
        let agg1 = (1.0 / s2) * (2.0 / s2 + 1.0 / s3);
        let agg2 = (1.0 / s2) * (4.0 / s2 + 1.0 / s3);
        let h: f64 = [agg0, agg1, agg2].iter().map(|a| (2.0 * a - 1.0f64).max(0.0)).sum::<f64>() / 3.0;
        let expected = 0.5 * h + 0.25;
        assert!((forward(&m, &g).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_input_zero_output() {
        let mut m = random_model(&ArchSpec::small_gcn(3, 4, true), 1).unwrap();
        let mut layers = m.layers().to_vec();
        for l in &mut layers {
            if let Some(p) = l.linear_mut() {
                if let Some(b) = &mut p.bias {
                    b.fill(0.0);
                }
            }
            if let Some(bn) = l.batch_norm_mut() {
                bn.running_mean.fill(0.0);
                bn.beta_shift.fill(0.0);
            }
        }
        m = m.with_layers(layers).unwrap();
        let g = Graph::new(3, vec![(0, 1)], Array2::zeros((3, 3)), None).unwrap();
        assert_eq!(forward(&m, &g).unwrap(), 0.0);
    }

    #[test]
    fn capture_without_bn_is_point_independent() {
        let m = random_model(&ArchSpec::small_gcn(3, 4, false), 2).unwrap();
        let ds = synthesize_dataset(
            &GeneratorSpec {
                count: 3,
                feature_dim: 3,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let batch = FusionBatch::new(ds.graphs().to_vec()).unwrap();
        let (p1, a1) = forward_with_capture(&m, &batch, CapturePoint::PreBn).unwrap();
        let (p2, a2) = forward_with_capture(&m, &batch, CapturePoint::PostBn).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(a1.layers, a2.layers);
        // predictions are bitwise equal to separate forwards
        for (g, p) in batch.graphs().iter().zip(&p1) {
            assert_eq!(forward(&m, g).unwrap().to_bits(), p.to_bits());
        }
    }

    #[test]
    fn capture_single_vertex_value() {
        let m = single_conv(2.0, 1.0, None);
        let batch = FusionBatch::new(vec![one_vertex(3.0)]).unwrap();
        let (_, acts) = forward_with_capture(&m, &batch, CapturePoint::PreBn).unwrap();
        match acts.layer(0).unwrap() {
            LayerActivations::Graphs(n) => assert_eq!(n[0][0].values()[0], 7.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn post_bn_capture_subtracts_mean() {
        let bn = BatchNormParams {
            gamma: array![1.0],
            beta_shift: array![0.0],
            running_mean: array![2.5],
            running_var: array![1.0],
            epsilon: 0.0,
        };
        let m = single_conv(2.0, 1.0, Some(bn));
        let batch = FusionBatch::new(vec![one_vertex(3.0)]).unwrap();
        let (_, pre) = forward_with_capture(&m, &batch, CapturePoint::PreBn).unwrap();
        let (_, post) = forward_with_capture(&m, &batch, CapturePoint::PostBn).unwrap();
        let v = |a: &ActivationSample| match a.layer(0).unwrap() {
            LayerActivations::Graphs(n) => n[0][0].values()[0],
            _ => unreachable!(),
        };
        assert_eq!(v(&pre), 7.0);
        assert_eq!(v(&post), 7.0 - 2.5);
    }

    #[test]
    fn batch_norm_matches_formula() {
        let bn = BatchNormParams {
            gamma: array![1.5, 0.5],
            beta_shift: array![0.1, -0.2],
            running_mean: array![0.3, 1.0],
            running_var: array![2.0, 0.25],
            epsilon: 1e-5,
        };
        let mut z = array![[1.0, 2.0], [-1.0, 0.0]];
        let orig = z.clone();
        bn.apply_rows(&mut z);
        for r in 0..2 {
            for k in 0..2 {
                let expect = bn.gamma[k] * (orig[[r, k]] - bn.running_mean[k])
                    / (bn.running_var[k] + bn.epsilon).sqrt()
                    + bn.beta_shift[k];
                assert_eq!(z[[r, k]], expect);
            }
        }
    }

    #[test]
    fn mae_arithmetic() {
        let m = single_conv(0.0, 0.0, None);
        let graphs = vec![
            one_vertex(1.0).with_target(Some(1.0)),
            one_vertex(1.0).with_target(Some(-1.0)),
        ];
        let ds = Dataset::new(graphs, 1).unwrap();
        assert_eq!(evaluate_mae(&m, &ds).unwrap(), 1.0);
        let missing = Dataset::new(vec![one_vertex(0.0)], 1).unwrap();
        assert!(matches!(
            evaluate_mae(&m, &missing),
            Err(Error::MissingTarget { index: 0 })
        ));
    }

    #[test]
    fn mlp_matches_plain_arithmetic() {
        let m = random_model(&ArchSpec::small_mlp(3, 4), 5).unwrap();
        assert!(m.is_mlp());
        let x = array![0.3, -1.2, 0.7];
        let mut h = x.clone();
        for l in m.layers() {
            if let Layer::Dense {
                linear, activation, ..
            } = l
            {
                h = linear.weight.dot(&h) + linear.bias.as_ref().unwrap();
                if *activation == Activation::Relu {
                    h.mapv_inplace(relu);
                }
            }
        }
        let g = Graph::new(1, vec![], x.insert_axis(Axis(0)), None).unwrap();
        assert!((forward(&m, &g).unwrap() - h[0]).abs() < 1e-12);
        let two = Graph::new(2, vec![], Array2::zeros((2, 3)), None).unwrap();
        assert!(forward(&m, &two).is_err());
    }

    #[test]
    fn identity_permutation_is_noop() {
        let m = random_model(&ArchSpec::small_gcn(3, 4, true), 3).unwrap();
        let ids: Vec<Vec<usize>> = hidden_widths(&m).iter().map(|&w| (0..w).collect()).collect();
        assert_eq!(permute_model(&m, &ids).unwrap(), m);
    }

    #[test]
    fn swap_two_neurons() {
        let m = GcnModel::new(
            vec![
                Layer::Dense {
                    linear: DenseParams::new(array![[1.0, 2.0], [3.0, 4.0]], Some(array![0.1, 0.2]))
                        .unwrap(),
                    batch_norm: None,
                    activation: Activation::Relu,
                },
                Layer::Dense {
                    linear: DenseParams::new(array![[5.0, 6.0]], Some(array![0.0])).unwrap(),
                    batch_norm: None,
                    activation: Activation::Identity,
                },
            ],
            ModelMetadata::default(),
        )
        .unwrap();
        let p = permute_model(&m, &[vec![1, 0]]).unwrap();
        assert_eq!(p.layers()[0].linear().unwrap().weight, array![[3.0, 4.0], [1.0, 2.0]]);
        assert_eq!(p.layers()[0].linear().unwrap().bias, Some(array![0.2, 0.1]));
        assert_eq!(p.layers()[1].linear().unwrap().weight, array![[6.0, 5.0]]);
    }

    #[test]
    fn bad_permutations_rejected() {
        let m = random_model(&ArchSpec::small_gcn(3, 4, false), 3).unwrap();
        assert!(permute_model(&m, &[vec![0, 1, 2, 3]]).is_err());
        let mut perms: Vec<Vec<usize>> =
            hidden_widths(&m).iter().map(|&w| (0..w).collect()).collect();
        perms[0] = vec![0, 0, 1, 2];
        assert!(permute_model(&m, &perms).is_err());
    }

    #[test]
    fn random_model_is_deterministic() {
        let a = ArchSpec::zinc_gcn();
        assert_eq!(random_model(&a, 9).unwrap(), random_model(&a, 9).unwrap());
        assert_ne!(random_model(&a, 9).unwrap(), random_model(&a, 10).unwrap());
    }

    #[test]
    fn layer_order_is_validated() {
        let d = || DenseParams::new(array![[1.0]], Some(array![0.0])).unwrap();
        let dense_then_readout = vec![
            Layer::Dense {
                linear: d(),
                batch_norm: None,
                activation: Activation::Relu,
            },
            Layer::MeanReadout,
            Layer::Dense {
                linear: d(),
                batch_norm: None,
                activation: Activation::Identity,
            },
        ];
        assert!(GcnModel::new(dense_then_readout, ModelMetadata::default()).is_err());
        let biased_embedding = vec![Layer::Embedding(d())];
        assert!(GcnModel::new(biased_embedding, ModelMetadata::default()).is_err());
    }

    #[test]
    fn perturbation_is_seeded_and_scaled() {
        let m = random_model(&ArchSpec::small_gcn(3, 4, true), 1).unwrap();
        assert_eq!(perturb_model(&m, 0.0, 5).unwrap(), m);
        let p = perturb_model(&m, 0.01, 5).unwrap();
        assert_eq!(p, perturb_model(&m, 0.01, 5).unwrap());
        assert_ne!(p, m);
        let (w0, w1) = (&m.layers()[0].linear().unwrap().weight, &p.layers()[0].linear().unwrap().weight);
        assert!(w0.iter().zip(w1).all(|(a, b)| (a - b).abs() <= 0.1 * a.abs()));
        assert!(perturb_model(&m, -1.0, 5).is_err());
    }
}
