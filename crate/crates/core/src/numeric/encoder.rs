//! The two-tower encoder: affine layers, `tanh` on hidden layers, linear head.
//!
//! The query tower consumes the concatenation `[image ‖ text]`; the target tower
//! consumes image features only. Both towers must emit the same embedding dim.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SNAPSHOT_FORMAT: &str = "recall-forge.encoder";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayerRecord", into = "LayerRecord")]
pub struct Layer {
    /// `dim_out` rows of `dim_in` weights.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    dim_in: usize,
    dim_out: usize,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl TryFrom<LayerRecord> for Layer {
    type Error = Error;

    fn try_from(r: LayerRecord) -> Result<Self> {
        if r.weights.len() != r.dim_out {
            return Err(Error::shape("layer rows", r.dim_out, r.weights.len()));
        }
        if r.bias.len() != r.dim_out {
            return Err(Error::shape("layer bias", r.dim_out, r.bias.len()));
        }
        if let Some(row) = r.weights.iter().find(|row| row.len() != r.dim_in) {
            return Err(Error::shape("layer columns", r.dim_in, row.len()));
        }
        Ok(Layer {
            weights: r.weights,
            bias: r.bias,
        })
    }
}

impl From<Layer> for LayerRecord {
    fn from(l: Layer) -> Self {
        LayerRecord {
            dim_in: l.dim_in(),
            dim_out: l.dim_out(),
            weights: l.weights,
            bias: l.bias,
        }
    }
}

impl Layer {
    pub fn zeros(dim_in: usize, dim_out: usize) -> Self {
        Layer {
            weights: vec![vec![0.0; dim_in]; dim_out],
            bias: vec![0.0; dim_out],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut layer = Layer::zeros(dim, dim);
        for (i, row) in layer.weights.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        layer
    }

    pub fn dim_in(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn dim_out(&self) -> usize {
        self.bias.len()
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tower {
    pub layers: Vec<Layer>,
}

/// Per-layer activations kept for the backward pass. `activations[0]` is the
/// input, `activations[l + 1]` the output of layer `l`.
#[derive(Debug, Clone)]
pub(crate) struct ForwardTrace {
    pub activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace holds the input at least")
    }
}

impl Tower {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::dim_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::dim_out)
    }

    fn zeros_like(&self) -> Tower {
        Tower {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.dim_in(), l.dim_out()))
                .collect(),
        }
    }

    fn validate(&self, name: &'static str) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Argument(format!("{name} has no layers")));
        }
        for pair in self.layers.windows(2) {
            if pair[0].dim_out() != pair[1].dim_in() {
                return Err(Error::shape(name, pair[0].dim_out(), pair[1].dim_in()));
            }
        }
        let finite = self
            .layers
            .iter()
            .flat_map(|l| l.weights.iter().flatten().chain(&l.bias))
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Domain(format!("{name} has non-finite parameters")));
        }
        Ok(())
    }

    pub(crate) fn forward_trace(&self, x: &[f64], context: &'static str) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(context, self.input_dim(), x.len()));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.affine(activations.last().unwrap());
            if l < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            activations.push(z);
        }
        Ok(ForwardTrace { activations })
    }

    pub fn forward(&self, x: &[f64], context: &'static str) -> Result<Vec<f64>> {
        Ok(self
            .forward_trace(x, context)?
            .activations
            .pop()
            .expect("non-empty"))
    }

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂output`.
    pub(crate) fn backward(&self, trace: &ForwardTrace, d_out: &[f64], grad: &mut Tower) {
        let last = self.layers.len() - 1;
        let mut delta = d_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            if l < last {
                let a = &trace.activations[l + 1];
                delta.iter_mut().zip(a).for_each(|(d, a)| *d *= 1.0 - a * a);
            }
            let input = &trace.activations[l];
            let g = &mut grad.layers[l];
            for ((grow, gb), d) in g.weights.iter_mut().zip(g.bias.iter_mut()).zip(&delta) {
                *gb += d;
                grow.iter_mut().zip(input).for_each(|(gw, x)| *gw += d * x);
            }
            if l > 0 {
                let layer = &self.layers[l];
                let mut prev = vec![0.0; layer.dim_in()];
                for (row, d) in layer.weights.iter().zip(&delta) {
                    prev.iter_mut().zip(row).for_each(|(p, w)| *p += w * d);
                }
                delta = prev;
            }
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().flatten().chain(&l.bias))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().flatten().chain(l.bias.iter_mut()))
    }
}

/// All weights of both towers. Snapshots of this type are the base and
/// refined retrievers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParameters {
    pub query_tower: Tower,
    pub target_tower: Tower,
}

#[derive(Serialize, Deserialize)]
struct SnapshotFile {
    format: String,
    version: u32,
    embedding_dim: usize,
    #[serde(flatten)]
    params: EncoderParameters,
}

/// Layer widths for both towers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub image_dim: usize,
    pub text_dim: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
}

impl Architecture {
    /// Default desk-scale shape: input → 64 → 32.
    pub fn desk(image_dim: usize, text_dim: usize) -> Self {
        Architecture {
            image_dim,
            text_dim,
            hidden: vec![64],
            embedding_dim: 32,
        }
    }
}

impl EncoderParameters {
    pub fn new(query_tower: Tower, target_tower: Tower) -> Result<Self> {
        let p = EncoderParameters {
            query_tower,
            target_tower,
        };
        p.validate()?;
        Ok(p)
    }

    /// Glorot-uniform weights, zero biases, seeded.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        if arch.image_dim == 0 || arch.text_dim == 0 || arch.embedding_dim == 0 {
            return Err(Error::Argument("architecture dims must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tower = |input: usize| {
            let mut dims = vec![input];
            dims.extend(&arch.hidden);
            dims.push(arch.embedding_dim);
            Tower {
                layers: dims
                    .windows(2)
                    .map(|w| {
                        let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
                        Layer {
                            weights: (0..w[1])
                                .map(|_| (0..w[0]).map(|_| rng.random_range(-bound..bound)).collect())
                                .collect(),
                            bias: vec![0.0; w[1]],
                        }
                    })
                    .collect(),
            }
        };
        let query_tower = tower(arch.image_dim + arch.text_dim);
        let target_tower = tower(arch.image_dim);
        EncoderParameters::new(query_tower, target_tower)
    }

    pub fn validate(&self) -> Result<()> {
        self.query_tower.validate("query tower")?;
        self.target_tower.validate("target tower")?;
        if self.query_tower.output_dim() != self.target_tower.output_dim() {
            return Err(Error::shape(
                "tower embedding dims",
                self.query_tower.output_dim(),
                self.target_tower.output_dim(),
            ));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.target_tower.output_dim()
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParameters {
            query_tower: self.query_tower.zeros_like(),
            target_tower: self.target_tower.zeros_like(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.values().count()
    }

    /// Every scalar in a fixed order: query tower then target tower, layer by
    /// layer, weights row-major then bias.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.query_tower.values().chain(self.target_tower.values())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.query_tower
            .values_mut()
            .chain(self.target_tower.values_mut())
    }

    /// Mutable access to the scalar at `index` in [`values`](Self::values) order.
    pub fn value_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for layer in self
            .query_tower
            .layers
            .iter_mut()
            .chain(self.target_tower.layers.iter_mut())
        {
            let (rows, cols) = (layer.dim_out(), layer.dim_in());
            if index < rows * cols {
                return Some(&mut layer.weights[index / cols][index % cols]);
            }
            index -= rows * cols;
            if index < rows {
                return Some(&mut layer.bias[index]);
            }
            index -= rows;
        }
        None
    }

    /// `self -= rate * grad`.
    pub fn descend(&mut self, grad: &EncoderParameters, rate: f64) {
        self.values_mut()
            .zip(grad.values())
            .for_each(|(p, g)| *p -= rate * g);
    }

    pub(crate) fn query_input(image: &[f64], text: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(image.len() + text.len());
        x.extend_from_slice(image);
        x.extend_from_slice(text);
        x
    }

    pub fn encode_query(&self, image_feat: &[f64], text_feat: &[f64]) -> Result<Vec<f64>> {
        self.query_tower
            .forward(&Self::query_input(image_feat, text_feat), "encode_query")
    }

    pub fn encode_target(&self, image_feat: &[f64]) -> Result<Vec<f64>> {
        self.target_tower.forward(image_feat, "encode_target")
    }

    /// First 16 hex chars of the SHA-256 of the snapshot JSON.
    pub fn snapshot_id(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("parameters always serialize");
        let digest = Sha256::digest(&bytes);
        hex::encode(&digest[..8])
    }

    pub fn to_snapshot_json(&self) -> String {
        let file = SnapshotFile {
            format: SNAPSHOT_FORMAT.into(),
            version: SNAPSHOT_VERSION,
            embedding_dim: self.embedding_dim(),
            params: self.clone(),
        };
        serde_json::to_string(&file).expect("parameters always serialize")
    }

    pub fn from_snapshot_json(text: &str) -> Result<Self> {
        let file: SnapshotFile = serde_json::from_str(text)?;
        if file.format != SNAPSHOT_FORMAT || file.version != SNAPSHOT_VERSION {
            return Err(Error::Data(format!(
                "unsupported snapshot {} v{}",
                file.format, file.version
            )));
        }
        file.params.validate()?;
        if file.params.embedding_dim() != file.embedding_dim {
            return Err(Error::shape(
                "snapshot embedding_dim",
                file.embedding_dim,
                file.params.embedding_dim(),
            ));
        }
        Ok(file.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_snapshot_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_snapshot_json(&text)
    }
}
