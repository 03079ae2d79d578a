//! Ground costs between the neurons of two layers.
//!
//! A neuron is represented by its pre-activations on a batch: one scalar
//! graph per input graph before the readout, one scalar per input graph
//! after it. Pairwise costs between scalar graphs on a shared structure:
//!
//! * EFD: `c² = λ Σ_u (a_i(u) − a_j(u))²` (vertex-wise vectorization)
//! * QE: `c = λ Σ_{(u,w)} (a_i(u) − a_j(w))² + (1 − λ) Σ_u (a_i(u) − a_j(u))²`,
//!   each undirected edge counted in both orientations
//! * FGW: fused Gromov-Wasserstein distance between the two scalar graphs
//!
//! The cost between two neurons is the sum of pairwise costs over the batch.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, ScalarGraph};
use crate::model::{DenseParams, LayerActivations};
use crate::ot::{fgw_distance, CostMatrix, FgwInner, FgwProblem, SinkhornParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostKind {
    Efd,
    Qe,
    Fgw,
    /// Euclidean distance between aligned weight rows.
    Weight,
}

/// Which index set the EFD sum runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EfdVariant {
    /// Sum over vertices of the vectorized graphs.
    #[default]
    VertexSum,
    /// Sum over edges `(u, w)` of `(a_i(u) − a_j(w))²`, both orientations.
    EdgeSum,
}

/// How per-sample costs combine into a neuron-to-neuron cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// `Σ_k c(neuron i on graph k, neuron j on graph k)`.
    #[default]
    Matched,
    /// `Σ_k Σ_l c(neuron i on graph k, neuron j on graph l)` over every pair
    /// the pairwise cost is defined for (same structure, or any pair for FGW).
    AllPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StructureKind {
    /// Hop distances.
    #[default]
    ShortestPath,
    Adjacency,
}

/// Template for the FGW problems solved between scalar graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct FgwSettings {
    pub structure: StructureKind,
    pub trade_off: f64,
    pub inner: FgwInner,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for FgwSettings {
    fn default() -> Self {
        FgwSettings {
            structure: StructureKind::ShortestPath,
            trade_off: 0.5,
            inner: FgwInner::Exact,
            max_iters: 10_000,
            tol: 1e-7,
        }
    }
}

impl FgwSettings {
    pub fn with_sinkhorn(params: SinkhornParams) -> Self {
        FgwSettings {
            inner: FgwInner::Sinkhorn(params),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub kind: CostKind,
    pub lambda: f64,
    pub efd_variant: EfdVariant,
    pub aggregation: Aggregation,
    pub fgw: Option<FgwSettings>,
}

impl CostSpec {
    pub fn efd(lambda: f64) -> Self {
        CostSpec {
            kind: CostKind::Efd,
            lambda,
            efd_variant: EfdVariant::VertexSum,
            aggregation: Aggregation::Matched,
            fgw: None,
        }
    }

    pub fn qe(lambda: f64) -> Self {
        CostSpec {
            kind: CostKind::Qe,
            ..CostSpec::efd(lambda)
        }
    }

    pub fn fgw(settings: FgwSettings) -> Self {
        CostSpec {
            kind: CostKind::Fgw,
            fgw: Some(settings),
            ..CostSpec::efd(1.0)
        }
    }

    pub fn weight() -> Self {
        CostSpec {
            kind: CostKind::Weight,
            ..CostSpec::efd(1.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidParameter(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if (self.kind == CostKind::Fgw) != self.fgw.is_some() {
            return Err(Error::InvalidParameter(
                "FGW settings must be present exactly when the cost kind is FGW".into(),
            ));
        }
        if let Some(f) = &self.fgw {
            if !(0.0..=1.0).contains(&f.trade_off) {
                return Err(Error::InvalidParameter(format!("FGW trade_off {} outside [0, 1]", f.trade_off)));
            }
        }
        Ok(())
    }
}

fn check_shared(gi: &ScalarGraph, gj: &ScalarGraph) -> Result<()> {
    if std::ptr::eq(gi.graph(), gj.graph()) || gi.graph().same_structure(gj.graph()) {
        Ok(())
    } else {
        Err(Error::InvalidGraph("scalar graphs do not share a structure".into()))
    }
}

fn vertex_sq_sum(gi: &ScalarGraph, gj: &ScalarGraph) -> f64 {
    gi.values()
        .iter()
        .zip(gj.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

fn edge_sq_sum(gi: &ScalarGraph, gj: &ScalarGraph) -> f64 {
    let (a, b) = (gi.values(), gj.values());
    gi.graph()
        .edges()
        .iter()
        .map(|&(u, w)| (a[u] - b[w]).powi(2) + (a[w] - b[u]).powi(2))
        .sum()
}

/// Euclidean feature distance with the vertex-sum reading.
pub fn pairwise_efd(gi: &ScalarGraph, gj: &ScalarGraph, lambda: f64) -> Result<f64> {
    check_shared(gi, gj)?;
    Ok((lambda * vertex_sq_sum(gi, gj)).sqrt())
}

/// Euclidean feature distance with the edge-indexed reading.
pub fn pairwise_efd_edges(gi: &ScalarGraph, gj: &ScalarGraph, lambda: f64) -> Result<f64> {
    check_shared(gi, gj)?;
    Ok((lambda * edge_sq_sum(gi, gj)).sqrt())
}

/// Quadratic energy.
pub fn pairwise_qe(gi: &ScalarGraph, gj: &ScalarGraph, lambda: f64) -> Result<f64> {
    check_shared(gi, gj)?;
    Ok(lambda * edge_sq_sum(gi, gj) + (1.0 - lambda) * vertex_sq_sum(gi, gj))
}

pub fn structure_matrix(graph: &Graph, kind: StructureKind) -> Array2<f64> {
    match kind {
        StructureKind::ShortestPath => graph.shortest_path_matrix(),
        StructureKind::Adjacency => graph.adjacency_matrix(),
    }
}

/// FGW distance between two scalar graphs with squared feature differences
/// and uniform vertex weights. The shared structure is not exploited.
pub fn pairwise_fgw(gi: &ScalarGraph, gj: &ScalarGraph, settings: &FgwSettings) -> Result<f64> {
    let sa = structure_matrix(gi.graph(), settings.structure);
    let sb = structure_matrix(gj.graph(), settings.structure);
    fgw_with_structures(gi.values(), gj.values(), &sa, &sb, settings)
}

fn fgw_with_structures(
    a: &Array1<f64>,
    b: &Array1<f64>,
    sa: &Array2<f64>,
    sb: &Array2<f64>,
    settings: &FgwSettings,
) -> Result<f64> {
    let feature_cost = Array2::from_shape_fn((a.len(), b.len()), |(u, v)| (a[u] - b[v]).powi(2));
    let mut problem = FgwProblem::new(sa.clone(), sb.clone(), feature_cost, settings.trade_off);
    problem.inner = settings.inner.clone();
    problem.max_iters = settings.max_iters;
    problem.tol = settings.tol;
    Ok(fgw_distance(&problem)?.0)
}

/// Pairwise cost between scalar graphs under `spec`.
pub fn pairwise_cost(gi: &ScalarGraph, gj: &ScalarGraph, spec: &CostSpec) -> Result<f64> {
    match spec.kind {
        CostKind::Efd => match spec.efd_variant {
            EfdVariant::VertexSum => pairwise_efd(gi, gj, spec.lambda),
            EfdVariant::EdgeSum => pairwise_efd_edges(gi, gj, spec.lambda),
        },
        CostKind::Qe => pairwise_qe(gi, gj, spec.lambda),
        CostKind::Fgw => pairwise_fgw(gi, gj, spec.fgw.as_ref().expect("validated")),
        CostKind::Weight => Err(Error::InvalidParameter(
            "weight cost has no pairwise activation form".into(),
        )),
    }
}

/// Neuron-to-neuron cost matrix between two captures of the same batch.
///
/// Scalar (post-readout) activations use `Σ_k (x_ik − y_jk)²` for EFD and QE;
/// FGW is rejected there. `layer` only labels errors.
pub fn build_cost_matrix(
    acts_a: &LayerActivations,
    acts_b: &LayerActivations,
    spec: &CostSpec,
    layer: usize,
) -> Result<CostMatrix> {
    spec.validate()?;
    if spec.kind == CostKind::Weight {
        return Err(Error::InvalidParameter(
            "weight cost is built from parameters, not activations".into(),
        ));
    }
    if acts_a.num_samples() != acts_b.num_samples() {
        return Err(Error::dims("batch size of the two captures", acts_a.num_samples(), acts_b.num_samples()));
    }
    let entries = match (acts_a, acts_b) {
        (LayerActivations::Scalars(xa), LayerActivations::Scalars(xb)) => {
            if spec.kind == CostKind::Fgw {
                return Err(Error::FgwWithoutStructure { layer });
            }
            scalar_costs(xa, xb, spec.aggregation)
        }
        (LayerActivations::Graphs(ga), LayerActivations::Graphs(gb)) => graph_costs(ga, gb, spec)?,
        _ => {
            return Err(Error::InvalidParameter(format!(
                "layer {layer}: captures disagree on graph structure"
            )))
        }
    };
    CostMatrix::new(entries)
}

fn scalar_costs(xa: &Array2<f64>, xb: &Array2<f64>, aggregation: Aggregation) -> Array2<f64> {
    let (m, n) = (xa.nrows(), xb.nrows());
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    let (a, b) = (xa.row(i), xb.row(j));
                    match aggregation {
                        Aggregation::Matched => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
                        Aggregation::AllPairs => a
                            .iter()
                            .map(|x| b.iter().map(|y| (x - y) * (x - y)).sum::<f64>())
                            .sum(),
                    }
                })
                .collect()
        })
        .collect();
    Array2::from_shape_fn((m, n), |(i, j)| rows[i][j])
}

fn graph_costs(ga: &[Vec<ScalarGraph>], gb: &[Vec<ScalarGraph>], spec: &CostSpec) -> Result<Array2<f64>> {
    let (m, n) = (ga.len(), gb.len());
    let samples = ga.first().map_or(0, Vec::len);
    for k in 0..samples {
        for neuron in ga.iter().chain(gb) {
            if !neuron[k].graph().same_structure(ga[0][k].graph()) {
                return Err(Error::InvalidParameter(format!(
                    "batch graph {k} differs between the two captures"
                )));
            }
        }
    }
    // sample pairs the cost is summed over
    let pairs: Vec<(usize, usize)> = match spec.aggregation {
        Aggregation::Matched => (0..samples).map(|k| (k, k)).collect(),
        Aggregation::AllPairs => (0..samples)
            .flat_map(|k| (0..samples).map(move |l| (k, l)))
            .filter(|&(k, l)| {
                spec.kind == CostKind::Fgw || ga[0][k].graph().same_structure(ga[0][l].graph())
            })
            .collect(),
    };
    let structures: Option<Vec<Array2<f64>>> = spec.fgw.as_ref().map(|f| {
        (0..samples)
            .map(|k| structure_matrix(ga[0][k].graph(), f.structure))
            .collect()
    });

    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    let mut total = 0.0;
                    for &(k, l) in &pairs {
                        let (x, y) = (&ga[i][k], &gb[j][l]);
                        total += match (&structures, spec.fgw.as_ref()) {
                            (Some(s), Some(f)) => {
                                fgw_with_structures(x.values(), y.values(), &s[k], &s[l], f)?
                            }
                            _ => pairwise_cost(x, y, spec)?,
                        };
                    }
                    Ok(total)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok(Array2::from_shape_fn((m, n), |(i, j)| rows[i][j]))
}

/// Euclidean distance between weight rows, with the bias appended when present.
/// `layer_a` should already be aligned to `layer_b`'s inputs.
pub fn weight_cost_matrix(layer_a: &DenseParams, layer_b: &DenseParams) -> Result<CostMatrix> {
    if layer_a.in_dim() != layer_b.in_dim() {
        return Err(Error::dims("weight cost in_dim", layer_b.in_dim(), layer_a.in_dim()));
    }
    if layer_a.bias.is_some() != layer_b.bias.is_some() {
        return Err(Error::InvalidParameter("only one layer carries a bias".into()));
    }
    let (m, n) = (layer_a.out_dim(), layer_b.out_dim());
    let entries = Array2::from_shape_fn((m, n), |(i, j)| {
        let mut s: f64 = layer_a
            .weight
            .row(i)
            .iter()
            .zip(layer_b.weight.row(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        if let (Some(ba), Some(bb)) = (&layer_a.bias, &layer_b.bias) {
            s += (ba[i] - bb[j]).powi(2);
        }
        s.sqrt()
    });
    CostMatrix::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn graph(n: usize, edges: Vec<(usize, usize)>) -> Graph {
        Graph::new(n, edges, Array2::zeros((n, 1)), None).unwrap()
    }

    #[test]
    fn efd_examples() {
        let g = graph(3, vec![(0, 1)]);
        let x = ScalarGraph::new(&g, array![0.0, 0.0, 3.0]).unwrap();
        let y = ScalarGraph::new(&g, array![0.0, 4.0, 3.0]).unwrap();
        assert_eq!(pairwise_efd(&x, &x, 0.7).unwrap(), 0.0);
        assert_eq!(pairwise_efd(&x, &y, 1.0).unwrap(), 4.0);
        let g2 = graph(2, vec![]);
        let z = ScalarGraph::new(&g2, array![1.0, 2.0]).unwrap();
        assert_eq!(pairwise_efd(&z, &z.clone(), 1.0).unwrap(), 0.0);
    }

    #[test]
    fn qe_single_edge_example() {
        // edge term (both orientations): (a_i(0) − a_j(1))² + (a_i(1) − a_j(0))² = 0
        // vertex term: 1 + 1 = 2; total 0.5·0 + 0.5·2 = 1
        let g = graph(2, vec![(0, 1)]);
        let x = ScalarGraph::new(&g, array![1.0, 0.0]).unwrap();
        let y = ScalarGraph::new(&g, array![0.0, 1.0]).unwrap();
        // brute force over ordered edge list
        let ordered = [(0usize, 1usize), (1, 0)];
        let edge: f64 = ordered.iter().map(|&(u, w)| (x.values()[u] - y.values()[w]).powi(2)).sum();
        let vert: f64 = (0..2).map(|u| (x.values()[u] - y.values()[u]).powi(2)).sum();
        assert_eq!(edge, 0.0);
        assert_eq!(vert, 2.0);
        assert_eq!(pairwise_qe(&x, &y, 0.5).unwrap(), 0.5 * edge + 0.5 * vert);
        assert_eq!(pairwise_qe(&x, &y, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn qe_zero_lambda_is_squared_efd() {
        let g = graph(3, vec![(0, 1), (1, 2)]);
        let x = ScalarGraph::new(&g, array![0.5, -1.0, 2.0]).unwrap();
        let y = ScalarGraph::new(&g, array![1.5, 0.0, 0.0]).unwrap();
        let efd = pairwise_efd(&x, &y, 1.0).unwrap();
        assert!((pairwise_qe(&x, &y, 0.0).unwrap() - efd * efd).abs() < 1e-12);
        let edgeless = graph(3, vec![]);
        let z = ScalarGraph::new(&edgeless, array![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(pairwise_qe(&z, &z, 0.4).unwrap(), 0.0);
    }

    #[test]
    fn structure_mismatch_rejected() {
        let g1 = graph(2, vec![(0, 1)]);
        let g2 = graph(2, vec![]);
        let x = ScalarGraph::new(&g1, array![1.0, 2.0]).unwrap();
        let y = ScalarGraph::new(&g2, array![1.0, 2.0]).unwrap();
        assert!(pairwise_efd(&x, &y, 1.0).is_err());
        assert!(pairwise_qe(&x, &y, 1.0).is_err());
    }

    #[test]
    fn fgw_pairwise() {
        let g = graph(3, vec![(0, 1), (1, 2)]);
        let x = ScalarGraph::new(&g, array![0.0, 1.0, 2.0]).unwrap();
        let y = ScalarGraph::new(&g, array![2.0, 1.0, 0.0]).unwrap();
        let s = FgwSettings::default();
        assert!(pairwise_fgw(&x, &x, &s).unwrap().abs() < 1e-8);
        // reversal is an automorphism with matching features
        assert!(pairwise_fgw(&x, &y, &s).unwrap().abs() < 1e-8);
        let feature_only = FgwSettings {
            trade_off: 1.0,
            ..Default::default()
        };
        let z = ScalarGraph::new(&g, array![0.5, 3.0, -1.0]).unwrap();
        let d = pairwise_fgw(&x, &z, &feature_only).unwrap();
        let m = Array2::from_shape_fn((3, 3), |(u, v)| (x.values()[u] - z.values()[v]).powi(2));
        let h = crate::ot::Histogram::uniform(3);
        let e = crate::ot::emd(&h, &h, &m).unwrap().objective;
        assert!((d - e).abs() < 1e-12);
    }

    #[test]
    fn weight_cost_examples() {
        let a = DenseParams::new(array![[1.0, 0.0], [0.0, 1.0]], None).unwrap();
        let b = DenseParams::new(array![[0.0, 1.0], [1.0, 0.0]], None).unwrap();
        let c = weight_cost_matrix(&a, &b).unwrap();
        let s = 2f64.sqrt();
        assert_eq!(c.entries(), &array![[s, 0.0], [0.0, s]]);
        let d = weight_cost_matrix(&a, &a).unwrap();
        assert!(d.entries().diag().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn spec_validation() {
        assert!(CostSpec::efd(1.5).validate().is_err());
        let mut s = CostSpec::qe(0.2);
        s.kind = CostKind::Fgw;
        assert!(s.validate().is_err());
        assert!(CostSpec::fgw(FgwSettings::default()).validate().is_ok());
    }

    #[test]
    fn fgw_rejected_on_scalars() {
        let a = LayerActivations::Scalars(array![[1.0, 2.0]]);
        let err = build_cost_matrix(&a, &a, &CostSpec::fgw(FgwSettings::default()), 4).unwrap_err();
        assert!(matches!(err, Error::FgwWithoutStructure { layer: 4 }));
    }

    #[test]
    fn scalar_costs_are_squared_differences() {
        let a = LayerActivations::Scalars(array![[1.0, 2.0], [0.0, 0.0]]);
        let b = LayerActivations::Scalars(array![[1.0, 0.0], [3.0, 3.0]]);
        let c = build_cost_matrix(&a, &b, &CostSpec::efd(1.0), 0).unwrap();
        assert_eq!(c.entries(), &array![[4.0, 5.0], [1.0, 18.0]]);
    }
}
