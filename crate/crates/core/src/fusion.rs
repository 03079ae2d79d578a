//! Layer-wise OT fusion of two models with identical architectures.
//!
//! Model A is aligned to the anchor B one parametric layer at a time. For
//! layer `l` with transport plan `T` (rows: A neurons, columns: B neurons)
//! and target weights `β`:
//!
//! * incoming: `Ŵ = W · T_prev · diag(1/β_prev)`
//! * outgoing: `W̃ = diag(1/β) · Tᵀ · Ŵ`, `b̃ = diag(1/β) · Tᵀ · b`
//!
//! Batch-norm vectors follow the bias. The aligned model is then mixed with
//! the anchor.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize, Serializer};

use crate::costs::{build_cost_matrix, weight_cost_matrix, CostKind, CostSpec, FgwSettings};
use crate::error::{Error, Result};
use crate::graph::{sample_batch, Dataset, FusionBatch, Graph};
use crate::model::{
    forward, forward_with_capture, mean_abs_error, targets_of, ActivationSample, BatchNormParams,
    CapturePoint, DenseParams, GcnModel, Layer, LayerActivations,
};
use crate::ot::{
    emd, sinkhorn_unbalanced, solve_assignment, CostMatrix, Histogram, SinkhornParams, TransportPlan,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    Emd,
    Sinkhorn,
}

/// Optional rescaling of a cost matrix before Sinkhorn, making ε relative to
/// the cost scale. EMD plans are scale invariant and never rescaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CostNormalization {
    #[default]
    None,
    Max,
    Mean,
}

pub const DEFAULT_LAMBDA: f64 = 0.2;
pub const DEFAULT_SAMPLE_SIZE: usize = 340;
pub const DEFAULT_FGW_SAMPLE_SIZE: usize = 2;

/// Default entropic strength for a cost kind.
pub fn default_epsilon(kind: CostKind) -> f64 {
    match kind {
        CostKind::Qe | CostKind::Fgw => 5e-5,
        CostKind::Efd | CostKind::Weight => 5e-4,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub solver: Solver,
    pub cost: CostSpec,
    pub sinkhorn: SinkhornParams,
    pub sample_size: usize,
    pub capture_point: CapturePoint,
    /// Weight on the anchor.
    pub interpolation: f64,
    pub seed: u64,
    /// Build costs from aligned weights instead of activations.
    pub use_weight_cost: bool,
    /// Round Sinkhorn plans to the nearest permutation.
    pub round_plans: bool,
    pub cost_normalization: CostNormalization,
    /// Divide by the plan's column sums instead of the uniform target weights.
    /// Identical for exact plans; removes the entropic mass loss of Sinkhorn plans.
    pub marginal_correction: bool,
}

impl FusionConfig {
    /// Defaults for a solver and cost kind.
    pub fn new(solver: Solver, kind: CostKind) -> Self {
        let cost = match kind {
            CostKind::Efd => CostSpec::efd(DEFAULT_LAMBDA),
            CostKind::Qe => CostSpec::qe(DEFAULT_LAMBDA),
            CostKind::Fgw => CostSpec::fgw(FgwSettings::default()),
            CostKind::Weight => CostSpec::weight(),
        };
        FusionConfig {
            solver,
            cost,
            sinkhorn: SinkhornParams {
                epsilon: default_epsilon(kind),
                ..SinkhornParams::default()
            },
            sample_size: if kind == CostKind::Fgw {
                DEFAULT_FGW_SAMPLE_SIZE
            } else {
                DEFAULT_SAMPLE_SIZE
            },
            capture_point: CapturePoint::PostBn,
            interpolation: 0.5,
            seed: 0,
            use_weight_cost: kind == CostKind::Weight,
            round_plans: false,
            cost_normalization: CostNormalization::None,
            marginal_correction: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.interpolation) {
            return Err(Error::InvalidParameter(format!(
                "interpolation {} outside [0, 1]",
                self.interpolation
            )));
        }
        if self.sample_size == 0 && !self.use_weight_cost {
            return Err(Error::InvalidParameter("sample_size must be at least 1".into()));
        }
        if self.use_weight_cost != (self.cost.kind == CostKind::Weight) {
            return Err(Error::InvalidParameter(
                "weight-based alignment requires the weight cost kind and vice versa".into(),
            ));
        }
        self.cost.validate()?;
        if self.solver == Solver::Sinkhorn {
            self.sinkhorn.validate()?;
        }
        Ok(())
    }
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig::new(Solver::Emd, CostKind::Efd)
    }
}

/// Where a layer's plan came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanSource {
    Activations,
    Weights,
    /// Output layer: matched by position.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl CostSummary {
    fn of(cost: &CostMatrix) -> Self {
        CostSummary {
            min: cost.min(),
            max: cost.max(),
            mean: cost.mean(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerTrace {
    pub layer_index: usize,
    pub layer_kind: &'static str,
    pub source: PlanSource,
    pub cost: Option<CostSummary>,
    #[serde(serialize_with = "plan_record")]
    pub plan: TransportPlan,
    /// Against uniform marginals.
    pub marginal_error: f64,
    pub permutation: Option<Vec<usize>>,
    #[serde(skip)]
    pub cost_matrix: Option<Array2<f64>>,
}

/// Diagnostics of one fusion run, one entry per aligned layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentTrace {
    pub solver: Solver,
    pub cost: CostKind,
    pub sample_size: usize,
    pub capture_point: CapturePoint,
    pub seed: u64,
    pub layers: Vec<LayerTrace>,
}

impl AlignmentTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    pub fn layer(&self, layer_index: usize) -> Option<&LayerTrace> {
        self.layers.iter().find(|l| l.layer_index == layer_index)
    }
}

fn plan_record<S: Serializer>(plan: &TransportPlan, s: S) -> std::result::Result<S::Ok, S::Error> {
    #[derive(Serialize)]
    struct Record<'a> {
        objective: f64,
        converged: bool,
        iterations: usize,
        coupling: Vec<&'a [f64]>,
    }
    let coupling = plan
        .coupling
        .as_slice()
        .map(|data| data.chunks(plan.coupling.ncols().max(1)).collect())
        .unwrap_or_default();
    Record {
        objective: plan.objective,
        converged: plan.converged,
        iterations: plan.iterations,
        coupling,
    }
    .serialize(s)
}

/// `T · diag(1/β)`, entrywise division so uniform permutation plans map to 0/1.
fn incoming_map(plan: &TransportPlan, beta: &Histogram) -> Array2<f64> {
    let w = beta.weights();
    Array2::from_shape_fn(plan.coupling.dim(), |(i, j)| plan.coupling[[i, j]] / w[j])
}

/// `diag(1/β) · Tᵀ`.
fn outgoing_map(plan: &TransportPlan, beta: &Histogram) -> Array2<f64> {
    let w = beta.weights();
    let (m, n) = plan.coupling.dim();
    Array2::from_shape_fn((n, m), |(i, j)| plan.coupling[[j, i]] / w[i])
}

fn check_plan(plan: &TransportPlan, beta: &Histogram, rows: usize, context: &str) -> Result<()> {
    if plan.coupling.nrows() != rows {
        return Err(Error::dims(context, rows, plan.coupling.nrows()));
    }
    if beta.len() != plan.coupling.ncols() {
        return Err(Error::dims("plan columns vs beta", plan.coupling.ncols(), beta.len()));
    }
    Ok(())
}

/// `Ŵ = W · T_prev · diag(1/β_prev)`; the bias is unchanged.
pub fn align_layer_incoming(weights: &DenseParams, t_prev: &TransportPlan, beta_prev: &Histogram) -> Result<DenseParams> {
    check_plan(t_prev, beta_prev, weights.in_dim(), "plan rows vs weight in_dim")?;
    Ok(DenseParams {
        weight: weights.weight.dot(&incoming_map(t_prev, beta_prev)),
        bias: weights.bias.clone(),
    })
}

/// `W̃ = diag(1/β) · Tᵀ · W` and `b̃ = diag(1/β) · Tᵀ · b`.
pub fn align_layer_outgoing(weights: &DenseParams, t_curr: &TransportPlan, beta_curr: &Histogram) -> Result<DenseParams> {
    check_plan(t_curr, beta_curr, weights.out_dim(), "plan rows vs weight out_dim")?;
    let map = outgoing_map(t_curr, beta_curr);
    Ok(DenseParams {
        weight: map.dot(&weights.weight),
        bias: weights.bias.as_ref().map(|b| map.dot(b)),
    })
}

/// Maps all four batch-norm vectors with `diag(1/β) · Tᵀ`.
pub fn align_batchnorm(bn: &BatchNormParams, t_prev: &TransportPlan, beta_prev: &Histogram) -> Result<BatchNormParams> {
    check_plan(t_prev, beta_prev, bn.dim(), "plan rows vs batch-norm width")?;
    let map = outgoing_map(t_prev, beta_prev);
    Ok(BatchNormParams {
        gamma: map.dot(&bn.gamma),
        beta_shift: map.dot(&bn.beta_shift),
        running_mean: map.dot(&bn.running_mean),
        running_var: map.dot(&bn.running_var),
        epsilon: bn.epsilon,
    })
}

fn normalize(cost: &CostMatrix, how: CostNormalization) -> Array2<f64> {
    let scale = match how {
        CostNormalization::None => 1.0,
        CostNormalization::Max => cost.max(),
        CostNormalization::Mean => cost.mean(),
    };
    if scale > 0.0 {
        cost.entries() / scale
    } else {
        cost.entries().clone()
    }
}

fn round_to_permutation(plan: &TransportPlan, cost: &Array2<f64>) -> TransportPlan {
    let perm = solve_assignment(&plan.coupling.mapv(|t| -t));
    let mut rounded = TransportPlan::from_permutation(&perm, cost);
    rounded.iterations = plan.iterations;
    rounded.converged = plan.converged;
    rounded
}

/// Solves a layer's OT problem with uniform marginals.
pub fn solve_layer(cost: &CostMatrix, config: &FusionConfig) -> Result<TransportPlan> {
    let (m, n) = cost.dim();
    let (alpha, beta) = (Histogram::uniform(m), Histogram::uniform(n));
    match config.solver {
        Solver::Emd => emd(&alpha, &beta, cost.entries()),
        Solver::Sinkhorn => {
            let c = normalize(cost, config.cost_normalization);
            let mut plan = sinkhorn_unbalanced(&alpha, &beta, &c, &config.sinkhorn)?;
            if config.round_plans {
                plan = round_to_permutation(&plan, &c);
            }
            Ok(plan)
        }
    }
}

/// Cost actually used on a layer: FGW needs graph structure, so scalar
/// (post-readout) layers fall back to squared differences.
fn layer_cost_spec(spec: &CostSpec, acts: &LayerActivations) -> CostSpec {
    match (spec.kind, acts) {
        (CostKind::Fgw, LayerActivations::Scalars(_)) => CostSpec {
            kind: CostKind::Efd,
            fgw: None,
            ..spec.clone()
        },
        _ => spec.clone(),
    }
}

/// Activations captured on both models for activation-based alignment.
#[derive(Debug, Clone, Copy)]
pub struct CapturedPair<'a, 'g> {
    pub a: &'a ActivationSample<'g>,
    pub b: &'a ActivationSample<'g>,
}

/// Plan for parametric layer `layer_index`.
///
/// `aligned_a` is model A's layer after incoming alignment (used by the
/// weight cost). The output layer always receives the identity plan.
pub fn compute_layer_tm(
    layer_index: usize,
    model_a: &GcnModel,
    model_b: &GcnModel,
    captured: Option<CapturedPair>,
    aligned_a: &DenseParams,
    config: &FusionConfig,
) -> Result<LayerTrace> {
    let layer_b = &model_b.layers()[layer_index];
    let pb = layer_b
        .linear()
        .ok_or_else(|| Error::InvalidParameter(format!("layer {layer_index} has no parameters")))?;
    let n = pb.out_dim();
    let last = *model_a.parametric_layers().last().expect("validated model");
    let (source, cost) = if layer_index == last {
        (PlanSource::Identity, None)
    } else if config.use_weight_cost {
        (PlanSource::Weights, Some(weight_cost_matrix(aligned_a, pb)?))
    } else {
        let pair = captured.ok_or_else(|| {
            Error::InvalidParameter("activation alignment needs captured activations".into())
        })?;
        let missing = || Error::InvalidParameter(format!("no activations captured for layer {layer_index}"));
        let xa = pair.a.layer(layer_index).ok_or_else(missing)?;
        let xb = pair.b.layer(layer_index).ok_or_else(missing)?;
        let spec = layer_cost_spec(&config.cost, xa);
        (PlanSource::Activations, Some(build_cost_matrix(xa, xb, &spec, layer_index)?))
    };
    let plan = match &cost {
        None => TransportPlan::identity(n),
        Some(c) => solve_layer(c, config)?,
    };
    let (m, n) = plan.coupling.dim();
    Ok(LayerTrace {
        layer_index,
        layer_kind: layer_b.kind_name(),
        source,
        cost: cost.as_ref().map(CostSummary::of),
        marginal_error: plan.marginal_error(&Histogram::uniform(m), &Histogram::uniform(n)),
        permutation: plan.as_permutation(),
        plan,
        cost_matrix: cost.map(CostMatrix::into_inner),
    })
}

/// `t·anchor + (1 − t)·other`, returning an operand unchanged when the mix is trivial.
fn mix(anchor: f64, other: f64, t: f64) -> f64 {
    if anchor == other || t == 1.0 {
        anchor
    } else if t == 0.0 {
        other
    } else {
        t * anchor + (1.0 - t) * other
    }
}

fn mix_array<D: ndarray::Dimension>(
    anchor: &ndarray::Array<f64, D>,
    other: &ndarray::Array<f64, D>,
    t: f64,
) -> ndarray::Array<f64, D> {
    let mut out = anchor.clone();
    Zip::from(&mut out).and(other).for_each(|a, &o| *a = mix(*a, o, t));
    out
}

fn mix_dense(anchor: &DenseParams, other: &DenseParams, t: f64) -> DenseParams {
    DenseParams {
        weight: mix_array(&anchor.weight, &other.weight, t),
        bias: match (&anchor.bias, &other.bias) {
            (Some(a), Some(o)) => Some(mix_array(a, o, t)),
            _ => anchor.bias.clone(),
        },
    }
}

fn mix_bn(anchor: &BatchNormParams, other: &BatchNormParams, t: f64) -> BatchNormParams {
    BatchNormParams {
        gamma: mix_array(&anchor.gamma, &other.gamma, t),
        beta_shift: mix_array(&anchor.beta_shift, &other.beta_shift, t),
        running_mean: mix_array(&anchor.running_mean, &other.running_mean, t),
        running_var: mix_array(&anchor.running_var, &other.running_var, t),
        epsilon: mix(anchor.epsilon, other.epsilon, t),
    }
}

/// Replaces a layer's linear map and batch norm, keeping its kind.
fn rebuild(layer: &Layer, linear: DenseParams, bn: Option<BatchNormParams>) -> Layer {
    match layer {
        Layer::Embedding(_) => Layer::Embedding(linear),
        Layer::GraphConv { .. } => Layer::GraphConv {
            linear,
            batch_norm: bn,
        },
        Layer::Dense { activation, .. } => Layer::Dense {
            linear,
            batch_norm: bn,
            activation: *activation,
        },
        Layer::MeanReadout => Layer::MeanReadout,
    }
}

/// Fuses `model_a` into the anchor `model_b` using a batch sampled from `dataset`.
pub fn fuse(
    model_a: &GcnModel,
    model_b: &GcnModel,
    dataset: &Dataset,
    config: &FusionConfig,
) -> Result<(GcnModel, AlignmentTrace)> {
    config.validate()?;
    if config.use_weight_cost {
        return fuse_aligned(model_a, model_b, None, config, 0);
    }
    let batch = sample_batch(dataset, config.sample_size, config.seed)?;
    fuse_with_batch(model_a, model_b, &batch, config)
}

/// Fusion on an explicit batch (ignored under the weight cost).
pub fn fuse_with_batch(
    model_a: &GcnModel,
    model_b: &GcnModel,
    batch: &FusionBatch,
    config: &FusionConfig,
) -> Result<(GcnModel, AlignmentTrace)> {
    config.validate()?;
    if config.use_weight_cost {
        return fuse_aligned(model_a, model_b, None, config, 0);
    }
    model_a.check_compatible(model_b)?;
    let (_, a) = forward_with_capture(model_a, batch, config.capture_point)?;
    let (_, b) = forward_with_capture(model_b, batch, config.capture_point)?;
    fuse_aligned(model_a, model_b, Some(CapturedPair { a: &a, b: &b }), config, batch.sample_size())
}

/// Uniform `β`, or the plan's column sums (empty columns keep `1/n`).
fn target_weights(plan: &TransportPlan, corrected: bool) -> Result<Histogram> {
    let n = plan.coupling.ncols();
    if !corrected {
        return Ok(Histogram::uniform(n));
    }
    let cols = plan.coupling.sum_axis(ndarray::Axis(0));
    Histogram::new(cols.mapv(|c| if c > 0.0 { c } else { 1.0 / n as f64 }))
}

fn fuse_aligned(
    model_a: &GcnModel,
    model_b: &GcnModel,
    captured: Option<CapturedPair>,
    config: &FusionConfig,
    sample_size: usize,
) -> Result<(GcnModel, AlignmentTrace)> {
    model_a.check_compatible(model_b)?;
    let t = config.interpolation;
    let mut layers = Vec::with_capacity(model_b.layers().len());
    let mut traces = Vec::new();
    // previous plan and its target weights; None means canonical inputs
    let mut prev: Option<(TransportPlan, Histogram)> = None;
    for (i, (la, lb)) in model_a.layers().iter().zip(model_b.layers()).enumerate() {
        let (Some(pa), Some(pb)) = (la.linear(), lb.linear()) else {
            // mean readout: the previous plan flows through
            layers.push(lb.clone());
            continue;
        };
        let incoming = match &prev {
            Some((plan, beta)) => align_layer_incoming(pa, plan, beta)?,
            None => pa.clone(),
        };
        let trace = compute_layer_tm(i, model_a, model_b, captured, &incoming, config)?;
        let beta = target_weights(&trace.plan, config.marginal_correction)?;
        let aligned = align_layer_outgoing(&incoming, &trace.plan, &beta)?;
        let bn = match (la.batch_norm(), lb.batch_norm()) {
            (Some(bn_a), Some(bn_b)) => Some(mix_bn(bn_b, &align_batchnorm(bn_a, &trace.plan, &beta)?, t)),
            _ => None,
        };
        layers.push(rebuild(lb, mix_dense(pb, &aligned, t), bn));
        prev = Some((trace.plan.clone(), beta));
        traces.push(trace);
    }
    let fused = model_b.with_layers(layers)?;
    let trace = AlignmentTrace {
        solver: config.solver,
        cost: config.cost.kind,
        sample_size,
        capture_point: config.capture_point,
        seed: config.seed,
        layers: traces,
    };
    Ok((fused, trace))
}

/// Elementwise interpolation with no alignment: `t·b + (1 − t)·a`.
pub fn vanilla_fuse(model_a: &GcnModel, model_b: &GcnModel, interpolation: f64) -> Result<GcnModel> {
    if !(0.0..=1.0).contains(&interpolation) {
        return Err(Error::InvalidParameter(format!(
            "interpolation {interpolation} outside [0, 1]"
        )));
    }
    model_a.check_compatible(model_b)?;
    let layers = model_a
        .layers()
        .iter()
        .zip(model_b.layers())
        .map(|(la, lb)| match (la.linear(), lb.linear()) {
            (Some(pa), Some(pb)) => {
                let bn = match (la.batch_norm(), lb.batch_norm()) {
                    (Some(a), Some(b)) => Some(mix_bn(b, a, interpolation)),
                    _ => None,
                };
                rebuild(lb, mix_dense(pb, pa, interpolation), bn)
            }
            _ => lb.clone(),
        })
        .collect();
    model_b.with_layers(layers)
}

/// Mean of the members' predictions.
pub fn ensemble_predict(models: &[GcnModel], graph: &Graph) -> Result<f64> {
    if models.is_empty() {
        return Err(Error::InvalidParameter("ensemble needs at least one model".into()));
    }
    let total = models
        .iter()
        .map(|m| forward(m, graph))
        .sum::<Result<f64>>()?;
    Ok(total / models.len() as f64)
}

/// MAE of the ensemble's mean prediction.
pub fn ensemble_mae(models: &[GcnModel], dataset: &Dataset) -> Result<f64> {
    let targets = targets_of(dataset)?;
    let predictions = dataset
        .graphs()
        .iter()
        .map(|g| ensemble_predict(models, g))
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_abs_error(&predictions, &targets))
}
