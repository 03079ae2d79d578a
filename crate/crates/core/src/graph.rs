//! Graphs, datasets and fusion batches.
//!
//! A [`Graph`] stores an undirected edge list without self-loops; the
//! self-loop of the propagation rule is added implicitly by
//! [`Graph::neighbors`] consumers, so the normalization degree of a vertex is
//! `1 + number of incident edges` and never zero.
//!
//! Datasets are stored as line-delimited JSON: a header record declaring
//! `feature_dim` (and optionally `vocab`), followed by one record per graph.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Undirected graph with dense per-vertex features and an optional regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    edges: Vec<(usize, usize)>,
    features: Array2<f64>,
    target: Option<f64>,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph, validating every structural invariant.
    ///
    /// Edges are normalized to `(min, max)` order; `(u, v)` and `(v, u)` count
    /// as the same edge.
    pub fn new(
        num_vertices: usize,
        edges: Vec<(usize, usize)>,
        features: Array2<f64>,
        target: Option<f64>,
    ) -> Result<Self> {
        if features.nrows() != num_vertices {
            return Err(Error::dims("feature rows", num_vertices, features.nrows()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGraph("non-finite feature value".into()));
        }
        let mut seen = HashSet::with_capacity(edges.len());
        let mut normalized = Vec::with_capacity(edges.len());
        for (u, v) in edges {
            if u >= num_vertices || v >= num_vertices {
                return Err(Error::InvalidGraph(format!(
                    "edge ({u}, {v}) references a vertex outside 0..{num_vertices}"
                )));
            }
            if u == v {
                return Err(Error::InvalidGraph(format!("self-loop at vertex {u}")));
            }
            let e = (u.min(v), u.max(v));
            if !seen.insert(e) {
                return Err(Error::InvalidGraph(format!("duplicate edge ({u}, {v})")));
            }
            normalized.push(e);
        }
        let mut neighbors = vec![Vec::new(); num_vertices];
        for &(u, v) in &normalized {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        Ok(Graph {
            edges: normalized,
            features,
            target,
            neighbors,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Undirected edges, each stored once as `(min, max)`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn target(&self) -> Option<f64> {
        self.target
    }

    pub fn with_target(mut self, target: Option<f64>) -> Self {
        self.target = target;
        self
    }

    /// Adjacent vertices of `v`, excluding `v` itself.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    /// Normalization degree `|N(v)|`, counting the implicit self-loop.
    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len() + 1
    }

    /// True when both graphs have the same vertex count and edge set.
    pub fn same_structure(&self, other: &Graph) -> bool {
        self.num_vertices() == other.num_vertices() && self.edges == other.edges
    }

    /// All-pairs hop distances. Unreachable pairs get `num_vertices`, which
    /// exceeds every finite path length in the graph.
    pub fn shortest_path_matrix(&self) -> Array2<f64> {
        let n = self.num_vertices();
        let mut dist = Array2::from_elem((n, n), n as f64);
        let mut queue = std::collections::VecDeque::new();
        for s in 0..n {
            let mut hops = vec![usize::MAX; n];
            hops[s] = 0;
            queue.clear();
            queue.push_back(s);
            while let Some(u) = queue.pop_front() {
                for &w in &self.neighbors[u] {
                    if hops[w] == usize::MAX {
                        hops[w] = hops[u] + 1;
                        queue.push_back(w);
                    }
                }
            }
            for (t, &h) in hops.iter().enumerate() {
                if h != usize::MAX {
                    dist[[s, t]] = h as f64;
                }
            }
        }
        dist
    }

    /// 0/1 adjacency matrix with zero diagonal.
    pub fn adjacency_matrix(&self) -> Array2<f64> {
        let n = self.num_vertices();
        let mut adj = Array2::zeros((n, n));
        for &(u, v) in &self.edges {
            adj[[u, v]] = 1.0;
            adj[[v, u]] = 1.0;
        }
        adj
    }
}

/// One real value per vertex of a borrowed graph: a single neuron's response.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGraph<'g> {
    graph: &'g Graph,
    values: Array1<f64>,
}

impl<'g> ScalarGraph<'g> {
    pub fn new(graph: &'g Graph, values: Array1<f64>) -> Result<Self> {
        if values.len() != graph.num_vertices() {
            return Err(Error::dims(
                "scalar graph values",
                graph.num_vertices(),
                values.len(),
            ));
        }
        Ok(ScalarGraph { graph, values })
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }
}

/// Ordered collection of graphs sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    graphs: Vec<Graph>,
    feature_dim: usize,
}

impl Dataset {
    pub fn new(graphs: Vec<Graph>, feature_dim: usize) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for (i, g) in graphs.iter().enumerate() {
            if g.feature_dim() != feature_dim {
                return Err(Error::dims(
                    format!("feature_dim of graph {i}"),
                    feature_dim,
                    g.feature_dim(),
                ));
            }
        }
        Ok(Dataset {
            graphs,
            feature_dim,
        })
    }

    pub fn graphs(&self) -> &[Graph] {
        &self.graphs
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// Replaces every target, in graph order.
    pub fn with_targets(self, targets: &[f64]) -> Result<Self> {
        if targets.len() != self.graphs.len() {
            return Err(Error::dims("targets", self.graphs.len(), targets.len()));
        }
        let graphs = self
            .graphs
            .into_iter()
            .zip(targets)
            .map(|(g, &t)| g.with_target(Some(t)))
            .collect();
        Ok(Dataset {
            graphs,
            feature_dim: self.feature_dim,
        })
    }
}

/// The graphs fed through both networks during fusion. Vertex `k` of graph
/// `g` denotes the same vertex in both models.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionBatch {
    graphs: Vec<Graph>,
}

impl FusionBatch {
    pub fn new(graphs: Vec<Graph>) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::SampleSizeOutOfRange {
                requested: 0,
                available: 0,
            });
        }
        Ok(FusionBatch { graphs })
    }

    pub fn graphs(&self) -> &[Graph] {
        &self.graphs
    }

    pub fn sample_size(&self) -> usize {
        self.graphs.len()
    }
}

/// Draws `sample_size` graphs without replacement. Pure in `(dataset, sample_size, seed)`.
pub fn sample_batch(dataset: &Dataset, sample_size: usize, seed: u64) -> Result<FusionBatch> {
    if sample_size == 0 || sample_size > dataset.len() {
        return Err(Error::SampleSizeOutOfRange {
            requested: sample_size,
            available: dataset.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample(&mut rng, dataset.len(), sample_size);
    let graphs = picked.iter().map(|i| dataset.graphs[i].clone()).collect();
    FusionBatch::new(graphs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetFormat {
    /// Header line followed by one JSON object per graph.
    #[default]
    JsonLines,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderRecord {
    feature_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRecord {
    n: usize,
    edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    atom: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y: Option<f64>,
}

/// Reads a dataset; graph order equals file order. Record indices in errors
/// are 1-based line numbers.
pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        DatasetFormat::JsonLines => read_jsonl(BufReader::new(file), path),
    }
}

fn read_jsonl(reader: impl BufRead, path: &Path) -> Result<Dataset> {
    let mut header: Option<HeaderRecord> = None;
    let mut graphs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let record = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { record, message };
        match &header {
            None => {
                let h: HeaderRecord = serde_json::from_str(line)
                    .map_err(|e| parse_err(format!("bad header: {e}")))?;
                if h.feature_dim == 0 {
                    return Err(parse_err("feature_dim must be positive".into()));
                }
                if let Some(v) = h.vocab {
                    if v != h.feature_dim {
                        return Err(parse_err(format!(
                            "vocab {v} must equal feature_dim {} (one-hot expansion)",
                            h.feature_dim
                        )));
                    }
                }
                header = Some(h);
            }
            Some(h) => {
                let r: GraphRecord =
                    serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
                let graph = record_to_graph(r, h).map_err(|e| parse_err(e.to_string()))?;
                graphs.push(graph);
            }
        }
    }
    let header = header.ok_or(Error::EmptyDataset)?;
    if graphs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Dataset::new(graphs, header.feature_dim)
}

fn record_to_graph(r: GraphRecord, header: &HeaderRecord) -> Result<Graph> {
    let dim = header.feature_dim;
    let features = match (r.x, r.atom) {
        (Some(_), Some(_)) => {
            return Err(Error::InvalidGraph("record has both `x` and `atom`".into()))
        }
        (None, None) => return Err(Error::InvalidGraph("record has neither `x` nor `atom`".into())),
        (Some(rows), None) => {
            if rows.len() != r.n {
                return Err(Error::dims("rows of `x`", r.n, rows.len()));
            }
            let mut m = Array2::zeros((r.n, dim));
            for (i, row) in rows.iter().enumerate() {
                if row.len() != dim {
                    return Err(Error::dims(format!("row {i} of `x`"), dim, row.len()));
                }
                for (j, &v) in row.iter().enumerate() {
                    m[[i, j]] = v;
                }
            }
            m
        }
        (None, Some(atoms)) => {
            let vocab = header.vocab.ok_or_else(|| {
                Error::InvalidGraph("`atom` features need a `vocab` in the header".into())
            })?;
            if atoms.len() != r.n {
                return Err(Error::dims("length of `atom`", r.n, atoms.len()));
            }
            let mut m = Array2::zeros((r.n, dim));
            for (i, &a) in atoms.iter().enumerate() {
                if a >= vocab {
                    return Err(Error::InvalidGraph(format!(
                        "atom index {a} outside vocabulary of size {vocab}"
                    )));
                }
                m[[i, a]] = 1.0;
            }
            m
        }
    };
    let edges = r.edges.iter().map(|e| (e[0], e[1])).collect();
    Graph::new(r.n, edges, features, r.y)
}

/// Writes a dataset in the line-delimited format with dense `x` rows.
pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let json_err = |e: serde_json::Error| Error::Json {
        path: path.to_path_buf(),
        source: e,
    };
    let header = HeaderRecord {
        feature_dim: dataset.feature_dim,
        vocab: None,
    };
    let mut line = serde_json::to_string(&header).map_err(json_err)?;
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    for g in &dataset.graphs {
        let record = GraphRecord {
            n: g.num_vertices(),
            edges: g.edges.iter().map(|&(u, v)| [u, v]).collect(),
            x: Some(g.features.outer_iter().map(|r| r.to_vec()).collect()),
            atom: None,
            y: g.target,
        };
        line = serde_json::to_string(&record).map_err(json_err)?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    /// Standard normal entries.
    Gaussian,
    /// One-hot rows over `feature_dim` categories, like atom types.
    OneHot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetRule {
    None,
    /// `y = weights · mean_v(x_v) + bias`
    LinearMean { weights: Vec<f64>, bias: f64 },
}

/// Parameters for [`synthesize_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub count: usize,
    pub min_vertices: usize,
    pub max_vertices: usize,
    /// Fraction of the `n(n-1)/2` possible edges present in each graph.
    pub edge_density: f64,
    pub feature_dim: usize,
    pub features: FeatureKind,
    pub target: TargetRule,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            count: 200,
            min_vertices: 6,
            max_vertices: 14,
            edge_density: 0.3,
            feature_dim: 8,
            features: FeatureKind::Gaussian,
            target: TargetRule::None,
        }
    }
}

/// Generates a random dataset; deterministic for a fixed seed.
pub fn synthesize_dataset(spec: &GeneratorSpec, seed: u64) -> Result<Dataset> {
    if spec.count == 0 {
        return Err(Error::InfeasibleSpec("graph count must be positive".into()));
    }
    if spec.min_vertices == 0 || spec.min_vertices > spec.max_vertices {
        return Err(Error::InfeasibleSpec(format!(
            "vertex range {}..={} is empty or includes zero",
            spec.min_vertices, spec.max_vertices
        )));
    }
    if !(0.0..=1.0).contains(&spec.edge_density) {
        return Err(Error::InfeasibleSpec(format!(
            "edge density {} outside [0, 1]",
            spec.edge_density
        )));
    }
    if spec.feature_dim == 0 {
        return Err(Error::InfeasibleSpec("feature_dim must be positive".into()));
    }
    if let TargetRule::LinearMean { weights, .. } = &spec.target {
        if weights.len() != spec.feature_dim {
            return Err(Error::InfeasibleSpec(format!(
                "target weights have length {}, feature_dim is {}",
                weights.len(),
                spec.feature_dim
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let n = rng.random_range(spec.min_vertices..=spec.max_vertices);
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
            .collect();
        let k = (spec.edge_density * pairs.len() as f64).round() as usize;
        let mut edges: Vec<(usize, usize)> = index::sample(&mut rng, pairs.len(), k)
            .iter()
            .map(|i| pairs[i])
            .collect();
        edges.sort_unstable();

        let mut features = Array2::zeros((n, spec.feature_dim));
        match spec.features {
            FeatureKind::Gaussian => {
                for v in features.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
            }
            FeatureKind::OneHot => {
                for mut row in features.outer_iter_mut() {
                    row[rng.random_range(0..spec.feature_dim)] = 1.0;
                }
            }
        }
        let target = match &spec.target {
            TargetRule::None => None,
            TargetRule::LinearMean { weights, bias } => {
                let mean = features.mean_axis(ndarray::Axis(0)).expect("n >= 1");
                Some(mean.dot(&Array1::from(weights.clone())) + bias)
            }
        };
        graphs.push(Graph::new(n, edges, features, target)?);
    }
    Dataset::new(graphs, spec.feature_dim)
}
