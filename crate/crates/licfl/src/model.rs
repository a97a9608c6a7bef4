//! Minimal dense network with exact gradients.
//!
//! Clients train a feed-forward ReLU network with a single sigmoid output on
//! flattened telemetry windows. The network intentionally stays small: every
//! federation algorithm in this crate consumes only the flattened parameter
//! vector, so the architecture is a replaceable detail.

use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

/// Network architecture: `input_dim -> hidden... -> 1`, ReLU inside,
/// sigmoid at the output. `hidden` may be empty (single linear layer).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
}

impl Default for NetworkSpec {
    /// 24-step windows of 4 sensors, flattened, through 32-16-1.
    fn default() -> Self {
        NetworkSpec {
            input_dim: 96,
            hidden: vec![32, 16],
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::contract("network dimensions must all be >= 1"));
        }
        Ok(())
    }

    /// Per-layer shapes, output layer included.
    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let mut dims = vec![self.input_dim];
        dims.extend_from_slice(&self.hidden);
        dims.push(1);
        dims.windows(2)
            .map(|w| LayerShape {
                rows: w[1],
                cols: w[0],
                bias: w[1],
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(LayerShape::len).sum()
    }
}

/// Shape of one dense layer: `rows x cols` weight matrix plus `bias` terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
    pub bias: usize,
}

impl LayerShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols + self.bias
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flattened model parameters plus the shape metadata needed to interpret
/// them. Layout is layer-major, weights (row-major) then bias within each
/// layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    shapes: Vec<LayerShape>,
}

/// One training sample: a flattened window and its binary failure label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindow {
    pub x: Vec<f64>,
    /// 0.0 or 1.0.
    pub y: f64,
}

impl LabeledWindow {
    pub fn new(x: Vec<f64>, failed: bool) -> Self {
        LabeledWindow {
            x,
            y: if failed { 1.0 } else { 0.0 },
        }
    }
}

impl ParamVector {
    pub fn new(values: Vec<f64>, shapes: Vec<LayerShape>) -> Result<Self> {
        let expected: usize = shapes.iter().map(LayerShape::len).sum();
        if values.len() != expected {
            return Err(Error::contract(format!(
                "parameter vector length {} does not match shapes (expected {expected})",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("parameter vector has non-finite entries"));
        }
        Ok(ParamVector { values, shapes })
    }

    pub fn zeros(shapes: Vec<LayerShape>) -> Self {
        let len = shapes.iter().map(LayerShape::len).sum();
        ParamVector {
            values: vec![0.0; len],
            shapes,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn input_dim(&self) -> usize {
        self.shapes.first().map_or(0, |s| s.cols)
    }

    /// Builds a sibling vector with the same shapes and new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<ParamVector> {
        ParamVector::new(values, self.shapes.clone())
    }

    /// Weight and bias slices of layer `l`.
    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let mut offset = 0;
        for s in &self.shapes[..l] {
            offset += s.len();
        }
        let s = self.shapes[l];
        let w_end = offset + s.rows * s.cols;
        (&self.values[offset..w_end], &self.values[w_end..w_end + s.bias])
    }

    /// Euclidean norm of the flat values; for a weight matrix this is its
    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        crate::linalg::l2_norm(&self.values)
    }
}

/// Glorot-uniform weights, zero biases, deterministic per seed.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<ParamVector> {
    spec.validate()?;
    let shapes = spec.layer_shapes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for s in &shapes {
        let limit = (6.0 / (s.cols + s.rows) as f64).sqrt();
        for _ in 0..s.rows * s.cols {
            values.push(rng.gen_range(-limit..limit));
        }
        values.extend(std::iter::repeat_n(0.0, s.bias));
    }
    ParamVector::new(values, shapes)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Forward pass; prediction strictly inside (0, 1).
pub fn forward(p: &ParamVector, x: &[f64]) -> Result<f64> {
    if x.len() != p.input_dim() {
        return Err(Error::contract(format!(
            "input length {} does not match network input dim {}",
            x.len(),
            p.input_dim()
        )));
    }
    if p.shapes.last().map_or(0, |s| s.rows) != 1 {
        return Err(Error::contract("network output dimension must be 1"));
    }
    let last = p.shapes.len() - 1;
    let mut activation = x.to_vec();
    for l in 0..p.shapes.len() {
        let s = p.shapes[l];
        let (w, b) = p.layer(l);
        let mut z = vec![0.0; s.rows];
        for (r, zr) in z.iter_mut().enumerate() {
            let row = &w[r * s.cols..(r + 1) * s.cols];
            *zr = b[r]
                + row
                    .iter()
                    .zip(&activation)
                    .map(|(wi, ai)| wi * ai)
                    .sum::<f64>();
        }
        if l == last {
            return Ok(sigmoid(z[0]));
        }
        for v in z.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        activation = z;
    }
    unreachable!("at least one layer is guaranteed by construction")
}

/// Mean squared error over the batch plus its exact backpropagation
/// gradient, with the same shape metadata as `p`.
pub fn loss_and_grad(p: &ParamVector, batch: &[LabeledWindow]) -> Result<(f64, ParamVector)> {
    let refs: Vec<&LabeledWindow> = batch.iter().collect();
    loss_and_grad_refs(p, &refs)
}

fn loss_and_grad_refs(p: &ParamVector, batch: &[&LabeledWindow]) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(Error::contract("loss_and_grad requires a non-empty batch"));
    }
    let num_layers = p.shapes.len();
    if p.shapes.last().map_or(0, |s| s.rows) != 1 {
        return Err(Error::contract("network output dimension must be 1"));
    }
    let inv_batch = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; p.len()];
    let mut loss = 0.0;

    // Per-layer offsets into the flat vector.
    let mut offsets = Vec::with_capacity(num_layers);
    let mut off = 0;
    for s in &p.shapes {
        offsets.push(off);
        off += s.len();
    }

    for sample in batch {
        if sample.x.len() != p.input_dim() {
            return Err(Error::contract(format!(
                "sample input length {} does not match network input dim {}",
                sample.x.len(),
                p.input_dim()
            )));
        }
        // Forward, caching activations (pre-activation for hidden layers is
        // recoverable from the ReLU output, so only activations are kept).
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(num_layers + 1);
        activations.push(sample.x.clone());
        let mut y_hat = 0.0;
        for l in 0..num_layers {
            let s = p.shapes[l];
            let (w, b) = p.layer(l);
            let prev = &activations[l];
            let mut z = vec![0.0; s.rows];
            for (r, zr) in z.iter_mut().enumerate() {
                let row = &w[r * s.cols..(r + 1) * s.cols];
                *zr = b[r] + row.iter().zip(prev).map(|(wi, ai)| wi * ai).sum::<f64>();
            }
            if l == num_layers - 1 {
                y_hat = sigmoid(z[0]);
                activations.push(vec![y_hat]);
            } else {
                for v in z.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                activations.push(z);
            }
        }

        let err = y_hat - sample.y;
        loss += err * err * inv_batch;

        // Backward. delta holds dLoss/dz for the current layer.
        let mut delta = vec![2.0 * err * inv_batch * y_hat * (1.0 - y_hat)];
        for l in (0..num_layers).rev() {
            let s = p.shapes[l];
            let (w, _) = p.layer(l);
            let prev = &activations[l];
            let g = &mut grad[offsets[l]..offsets[l] + s.len()];
            for (r, dr) in delta.iter().enumerate() {
                let g_row = &mut g[r * s.cols..(r + 1) * s.cols];
                for (gw, a) in g_row.iter_mut().zip(prev) {
                    *gw += dr * a;
                }
                g[s.rows * s.cols + r] += dr;
            }
            if l == 0 {
                break;
            }
            // delta for the previous layer: (W^T delta) masked by ReLU.
            let mut next = vec![0.0; s.cols];
            for (r, dr) in delta.iter().enumerate() {
                let row = &w[r * s.cols..(r + 1) * s.cols];
                for (nv, wv) in next.iter_mut().zip(row) {
                    *nv += dr * wv;
                }
            }
            for (nv, a) in next.iter_mut().zip(prev) {
                if *a <= 0.0 {
                    *nv = 0.0;
                }
            }
            delta = next;
        }
    }

    Ok((loss, ParamVector {
        values: grad,
        shapes: p.shapes.clone(),
    }))
}

/// Local client training: mini-batch SGD with a seeded shuffle.
///
/// The input parameters are never modified. When `batch_size` covers the
/// whole dataset no shuffle happens, so a single full-batch step equals
/// `p - lr * grad(p)` bit-exactly.
pub fn client_update(
    p: &ParamVector,
    data: &[LabeledWindow],
    lr: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<ParamVector> {
    if data.is_empty() {
        return Err(Error::contract("client_update requires a non-empty dataset"));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::contract("client_update requires lr >= 0"));
    }
    if epochs == 0 || batch_size == 0 {
        return Err(Error::contract(
            "client_update requires epochs >= 1 and batch_size >= 1",
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = p.clone();
    let mut indices: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        if batch_size < data.len() {
            indices.shuffle(&mut rng);
        }
        for chunk in indices.chunks(batch_size) {
            let batch: Vec<&LabeledWindow> = chunk.iter().map(|&i| &data[i]).collect();
            let (_, grad) = loss_and_grad_refs(&params, &batch)?;
            for (pv, gv) in params.values.iter_mut().zip(grad.values()) {
                *pv -= lr * gv;
            }
        }
    }
    Ok(params)
}

/// Mean squared error of the model over a dataset, forward passes only.
pub fn mean_loss(p: &ParamVector, data: &[LabeledWindow]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("mean_loss requires a non-empty dataset"));
    }
    let mut sum = 0.0;
    for s in data {
        let y_hat = forward(p, &s.x)?;
        sum += (y_hat - s.y) * (y_hat - s.y);
    }
    Ok(sum / data.len() as f64)
}

/// Copies the parameters out as a flat vector.
pub fn flatten(p: &ParamVector) -> Vec<f64> {
    p.values.clone()
}

/// Rebuilds a parameter vector from a flat vector and shape metadata.
pub fn unflatten(values: Vec<f64>, shapes: &[LayerShape]) -> Result<ParamVector> {
    ParamVector::new(values, shapes.to_vec())
}

const CHECKPOINT_MAGIC: &str = "licfl-params";
const CHECKPOINT_VERSION: &str = "v1";
/// Caps both the header line scan and the parameter count a checkpoint may
/// declare, so a hostile header cannot trigger huge allocations.
const MAX_CHECKPOINT_PARAMS: usize = 1 << 28;

impl ParamVector {
    /// Serializes as a text header (`licfl-params v1 <n> <rxcxb>...`)
    /// followed by the values as little-endian f64 in flatten order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} {}", self.shapes.len());
        for s in &self.shapes {
            header.push_str(&format!(" {}x{}x{}", s.rows, s.cols, s.bias));
        }
        header.push('\n');
        let mut out = header.into_bytes();
        out.reserve(self.values.len() * 8);
        for v in &self.values {
            out.write_f64::<LittleEndian>(*v).expect("vec write");
        }
        out
    }

    /// Parses the checkpoint byte format. Rejects malformed headers, length
    /// mismatches, and non-finite values without panicking.
    pub fn from_bytes(bytes: &[u8]) -> Result<ParamVector> {
        let newline = bytes
            .iter()
            .take(4096)
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(1, "missing checkpoint header line"))?;
        let header = std::str::from_utf8(&bytes[..newline])
            .map_err(|_| Error::parse(1, "checkpoint header is not UTF-8"))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(CHECKPOINT_MAGIC) {
            return Err(Error::parse(1, "bad checkpoint magic"));
        }
        if fields.next() != Some(CHECKPOINT_VERSION) {
            return Err(Error::parse(1, "unsupported checkpoint version"));
        }
        let num_layers: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::parse(1, "bad layer count in checkpoint header"))?;
        if num_layers > 1024 {
            return Err(Error::parse(1, "implausible layer count"));
        }
        let mut shapes = Vec::with_capacity(num_layers);
        let mut total: usize = 0;
        for _ in 0..num_layers {
            let spec = fields
                .next()
                .ok_or_else(|| Error::parse(1, "truncated shape list"))?;
            let mut parts = spec.split('x');
            let (r, c, b) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(r), Some(c), Some(b), None) => (r, c, b),
                _ => return Err(Error::parse(1, format!("bad shape entry {spec:?}"))),
            };
            let parse = |s: &str| -> Result<usize> {
                s.parse()
                    .map_err(|_| Error::parse(1, format!("bad shape number {s:?}")))
            };
            let shape = LayerShape {
                rows: parse(r)?,
                cols: parse(c)?,
                bias: parse(b)?,
            };
            let layer_len = shape
                .rows
                .checked_mul(shape.cols)
                .and_then(|wl| wl.checked_add(shape.bias))
                .ok_or_else(|| Error::parse(1, "shape size overflow"))?;
            total = total
                .checked_add(layer_len)
                .filter(|&t| t <= MAX_CHECKPOINT_PARAMS)
                .ok_or_else(|| Error::parse(1, "checkpoint too large"))?;
            shapes.push(shape);
        }
        if fields.next().is_some() {
            return Err(Error::parse(1, "trailing fields in checkpoint header"));
        }
        let body = &bytes[newline + 1..];
        if body.len() != total * 8 {
            return Err(Error::parse(
                2,
                format!("expected {} value bytes, found {}", total * 8, body.len()),
            ));
        }
        let mut rdr = body;
        let mut values = Vec::with_capacity(total);
        for _ in 0..total {
            values.push(rdr.read_f64::<LittleEndian>().expect("length checked"));
        }
        ParamVector::new(values, shapes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamVector> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        ParamVector::from_bytes(&bytes)
    }
}
