//! JSON model files.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "metadata": { "name": "...", "seed": 7, "architecture": "..." },
//!   "layers": [
//!     { "kind": "embedding", "weight": { "rows": 4, "cols": 3, "data": [...] } },
//!     { "kind": "graph_conv", "weight": {...}, "bias": [...], "batch_norm": {...} },
//!     { "kind": "mean_readout" },
//!     { "kind": "dense", "weight": {...}, "bias": [...], "activation": "relu" }
//!   ]
//! }
//! ```
//!
//! Matrices are row-major with explicit dims. Unknown layer kinds and fields
//! are rejected.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Activation, BatchNormParams, DenseParams, GcnModel, Layer, ModelMetadata};
use crate::error::{Error, Result};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    schema_version: u32,
    metadata: ModelMetadata,
    layers: Vec<LayerRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixRecord {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchNormRecord {
    gamma: Vec<f64>,
    beta_shift: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    epsilon: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LayerRecord {
    Embedding {
        weight: MatrixRecord,
    },
    GraphConv {
        weight: MatrixRecord,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        batch_norm: Option<BatchNormRecord>,
    },
    MeanReadout,
    Dense {
        weight: MatrixRecord,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        batch_norm: Option<BatchNormRecord>,
        activation: Activation,
    },
}

fn matrix_record(m: &Array2<f64>) -> MatrixRecord {
    MatrixRecord {
        rows: m.nrows(),
        cols: m.ncols(),
        data: m.iter().copied().collect(),
    }
}

fn bn_record(bn: &BatchNormParams) -> BatchNormRecord {
    BatchNormRecord {
        gamma: bn.gamma.to_vec(),
        beta_shift: bn.beta_shift.to_vec(),
        running_mean: bn.running_mean.to_vec(),
        running_var: bn.running_var.to_vec(),
        epsilon: bn.epsilon,
    }
}

fn to_record(layer: &Layer) -> LayerRecord {
    let bias = |p: &DenseParams| p.bias.as_ref().map(|b| b.to_vec());
    match layer {
        Layer::Embedding(p) => LayerRecord::Embedding {
            weight: matrix_record(&p.weight),
        },
        Layer::GraphConv { linear, batch_norm } => LayerRecord::GraphConv {
            weight: matrix_record(&linear.weight),
            bias: bias(linear),
            batch_norm: batch_norm.as_ref().map(bn_record),
        },
        Layer::MeanReadout => LayerRecord::MeanReadout,
        Layer::Dense {
            linear,
            batch_norm,
            activation,
        } => LayerRecord::Dense {
            weight: matrix_record(&linear.weight),
            bias: bias(linear),
            batch_norm: batch_norm.as_ref().map(bn_record),
            activation: *activation,
        },
    }
}

fn from_record(index: usize, record: LayerRecord) -> Result<Layer> {
    let schema = |message: String| Error::ModelSchema {
        layer: index,
        message,
    };
    let matrix = |m: MatrixRecord| -> Result<Array2<f64>> {
        Array2::from_shape_vec((m.rows, m.cols), m.data).map_err(|_| {
            schema(format!(
                "weight data length does not match {}x{}",
                m.rows, m.cols
            ))
        })
    };
    let linear = |w: MatrixRecord, b: Option<Vec<f64>>| -> Result<DenseParams> {
        let weight = matrix(w)?;
        DenseParams::new(weight, b.map(Array1::from)).map_err(|e| schema(e.to_string()))
    };
    let bn = |r: BatchNormRecord| BatchNormParams {
        gamma: r.gamma.into(),
        beta_shift: r.beta_shift.into(),
        running_mean: r.running_mean.into(),
        running_var: r.running_var.into(),
        epsilon: r.epsilon,
    };
    Ok(match record {
        LayerRecord::Embedding { weight } => Layer::Embedding(DenseParams {
            weight: matrix(weight)?,
            bias: None,
        }),
        LayerRecord::GraphConv {
            weight,
            bias,
            batch_norm,
        } => Layer::GraphConv {
            linear: linear(weight, bias)?,
            batch_norm: batch_norm.map(bn),
        },
        LayerRecord::MeanReadout => Layer::MeanReadout,
        LayerRecord::Dense {
            weight,
            bias,
            batch_norm,
            activation,
        } => Layer::Dense {
            linear: linear(weight, bias)?,
            batch_norm: batch_norm.map(bn),
            activation,
        },
    })
}

pub fn model_to_json(model: &GcnModel) -> String {
    let file = ModelFile {
        schema_version: MODEL_SCHEMA_VERSION,
        metadata: model.metadata.clone(),
        layers: model.layers().iter().map(to_record).collect(),
    };
    serde_json::to_string_pretty(&file).expect("model records always serialize")
}

pub fn model_from_json(text: &str, path: &Path) -> Result<GcnModel> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    if file.schema_version != MODEL_SCHEMA_VERSION {
        return Err(Error::InvalidModel(format!(
            "unsupported schema version {} (expected {MODEL_SCHEMA_VERSION})",
            file.schema_version
        )));
    }
    let layers = file
        .layers
        .into_iter()
        .enumerate()
        .map(|(i, r)| from_record(i, r))
        .collect::<Result<Vec<_>>>()?;
    GcnModel::new(layers, file.metadata)
}

pub fn save_model(model: &GcnModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = model_to_json(model);
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<GcnModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text, path)
}
