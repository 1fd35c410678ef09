//! The fixed MLP and its calculus: forward pass, mean binary cross-entropy,
//! exact reverse-mode gradients, and exact Hessian-vector products via
//! forward-over-reverse differentiation.
//!
//! Parameters live in one flat `f64` vector with a fixed layout (per weight
//! layer: row-major weight matrix, then bias vector), so optimizers and
//! landscape probes can treat the whole network as a point in R^n. All
//! arithmetic is 64-bit; batch reductions run in fixed index order so results
//! are bit-stable per seed.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episodes::Example;

/// Sigmoid outputs are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` to keep the
/// cross-entropy finite; the clamp is differentiated exactly (zero slope in
/// the clamped region).
pub const PROB_CLAMP: f64 = 1e-7;

const CHECKPOINT_MAGIC: &[u8; 8] = b"CLABPAR1";
const SERIES_MAGIC: &[u8; 8] = b"CLABSNP1";

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// MLP shape: `input -> hidden_width x hidden_layers -> 1`, ReLU inside,
/// sigmoid output. The default reading of a "5-layer" net is 4 hidden layers
/// plus the output layer; set `hidden_layers = 5` for the other reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
}

impl Architecture {
    /// The standard experiment network: 128-wide, 4 hidden layers.
    pub fn standard(input: usize) -> Self {
        Architecture { input, hidden_width: 128, hidden_layers: 4 }
    }

    /// A small net with the same topology, for oracle tests.
    pub fn tiny(input: usize) -> Self {
        Architecture { input, hidden_width: 4, hidden_layers: 4 }
    }

    /// `(out, in)` per weight layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut prev = self.input;
        for _ in 0..self.hidden_layers {
            dims.push((self.hidden_width, prev));
            prev = self.hidden_width;
        }
        dims.push((1, prev));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(o, i)| o * i + o).sum()
    }

    /// `(weights_start, bias_start, end)` of one layer in the flat layout.
    fn offsets(&self, layer: usize) -> (usize, usize, usize) {
        let dims = self.layer_dims();
        assert!(layer < dims.len(), "layer {layer} out of range");
        let mut start = 0;
        for (out, inp) in dims.iter().take(layer) {
            start += out * inp + out;
        }
        let (out, inp) = dims[layer];
        (start, start + out * inp, start + out * inp + out)
    }
}

/// All network parameters as one flat vector plus the layer layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    arch: Architecture,
    data: Vec<f64>,
}

impl ParamSet {
    pub fn zeros(arch: Architecture) -> Self {
        ParamSet { data: vec![0.0; arch.param_count()], arch }
    }

    /// Constant-filled parameters (used for learning-rate vectors).
    pub fn constant(arch: Architecture, value: f64) -> Self {
        ParamSet { data: vec![value; arch.param_count()], arch }
    }

    pub fn from_flat(arch: Architecture, data: Vec<f64>) -> Result<Self, NetError> {
        if data.len() != arch.param_count() {
            return Err(NetError::ShapeMismatch(format!(
                "flat vector has {} values, architecture needs {}",
                data.len(),
                arch.param_count()
            )));
        }
        Ok(ParamSet { arch, data })
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    /// Flat range of weight matrix `layer` (row-major `(out, in)`).
    pub fn weight_range(&self, layer: usize) -> std::ops::Range<usize> {
        let (start, bias, _) = self.arch.offsets(layer);
        start..bias
    }

    /// Flat range of bias vector `layer`.
    pub fn bias_range(&self, layer: usize) -> std::ops::Range<usize> {
        let (_, bias, end) = self.arch.offsets(layer);
        bias..end
    }

    /// Flat range of the whole layer block (weights then bias).
    pub fn layer_block(&self, layer: usize) -> std::ops::Range<usize> {
        let (start, _, end) = self.arch.offsets(layer);
        start..end
    }

    /// One contiguous block per weight layer, covering the full vector.
    pub fn layer_blocks(&self) -> Vec<std::ops::Range<usize>> {
        (0..self.arch.layer_dims().len()).map(|l| self.layer_block(l)).collect()
    }
}

/// He fan-in initialization: weights `N(0, 2/fan_in)`, biases zero.
pub fn init_params(arch: Architecture, seed: u64) -> ParamSet {
    let mut p = ParamSet::zeros(arch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (layer, (_, fan_in)) in arch.layer_dims().iter().enumerate() {
        let dist = Normal::new(0.0, (2.0 / *fan_in as f64).sqrt()).expect("valid stddev");
        let range = p.weight_range(layer);
        for w in &mut p.data[range] {
            *w = dist.sample(&mut rng);
        }
    }
    p
}

/// Cached per-layer state from one forward pass, enough to run the reverse
/// and forward-over-reverse passes.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    batch: usize,
    /// `acts[l]` is the input to weight layer `l`; `acts[0]` is the raw batch.
    acts: Vec<Vec<f64>>,
    /// `pre[l]` is the pre-activation of weight layer `l`.
    pre: Vec<Vec<f64>>,
    /// Clamped sigmoid outputs.
    probs: Vec<f64>,
    /// False where the clamp was hit (derivative is zero there).
    unclamped: Vec<bool>,
}

impl ForwardTape {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn flatten_inputs(inputs: &[Vec<bool>], width: usize) -> Result<Vec<f64>, NetError> {
    let mut flat = Vec::with_capacity(inputs.len() * width);
    for (row, x) in inputs.iter().enumerate() {
        if x.len() != width {
            return Err(NetError::ShapeMismatch(format!(
                "input row {row} has width {}, expected {width}",
                x.len()
            )));
        }
        flat.extend(x.iter().map(|b| if *b { 1.0 } else { 0.0 }));
    }
    Ok(flat)
}

fn forward_flat(arch: Architecture, theta: &[f64], inputs: Vec<f64>, batch: usize) -> ForwardTape {
    debug_assert_eq!(theta.len(), arch.param_count());
    debug_assert_eq!(inputs.len(), batch * arch.input);
    let dims = arch.layer_dims();
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(dims.len());
    let mut pre: Vec<Vec<f64>> = Vec::with_capacity(dims.len());
    acts.push(inputs);

    for (l, &(out, inp)) in dims.iter().enumerate() {
        let (w_start, b_start, _) = arch.offsets(l);
        let a = &acts[l];
        let mut z = vec![0.0; batch * out];
        for b in 0..batch {
            let a_row = &a[b * inp..(b + 1) * inp];
            let z_row = &mut z[b * out..(b + 1) * out];
            for (o, zv) in z_row.iter_mut().enumerate() {
                let w_row = &theta[w_start + o * inp..w_start + (o + 1) * inp];
                let mut acc = theta[b_start + o];
                for (wv, av) in w_row.iter().zip(a_row.iter()) {
                    acc += wv * av;
                }
                *zv = acc;
            }
        }
        if l + 1 < dims.len() {
            let a_next: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
            pre.push(z);
            acts.push(a_next);
        } else {
            pre.push(z);
        }
    }

    let logits = pre.last().expect("at least one layer");
    let mut probs = Vec::with_capacity(batch);
    let mut unclamped = Vec::with_capacity(batch);
    for &z in logits.iter() {
        let s = stable_sigmoid(z);
        let p = s.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        unclamped.push(s == p);
        probs.push(p);
    }
    ForwardTape { batch, acts, pre, probs, unclamped }
}

/// Runs the network on a batch of bit-vector inputs.
pub fn forward(p: &ParamSet, inputs: &[Vec<bool>]) -> Result<(Vec<f64>, ForwardTape), NetError> {
    let flat = flatten_inputs(inputs, p.arch.input)?;
    let tape = forward_flat(p.arch, &p.data, flat, inputs.len());
    Ok((tape.probs.clone(), tape))
}

/// Mean binary cross-entropy over one batch, with per-example probabilities.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub mean: f64,
    pub probabilities: Vec<f64>,
}

fn bce_mean(probs: &[f64], labels: &[f64]) -> f64 {
    let mut total = 0.0;
    for (p, y) in probs.iter().zip(labels.iter()) {
        total += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    total / probs.len() as f64
}

/// Reverse pass from output-layer deltas to a flat parameter gradient.
fn backward_flat(arch: Architecture, theta: &[f64], tape: &ForwardTape, delta_out: &[f64]) -> Vec<f64> {
    let dims = arch.layer_dims();
    let batch = tape.batch;
    let mut grad = vec![0.0; arch.param_count()];
    let mut delta = delta_out.to_vec();

    for l in (0..dims.len()).rev() {
        let (out, inp) = dims[l];
        let (w_start, b_start, _) = arch.offsets(l);
        let a = &tape.acts[l];
        for b in 0..batch {
            let d_row = &delta[b * out..(b + 1) * out];
            let a_row = &a[b * inp..(b + 1) * inp];
            for (o, dv) in d_row.iter().enumerate() {
                if *dv == 0.0 {
                    continue;
                }
                let g_row = &mut grad[w_start + o * inp..w_start + (o + 1) * inp];
                for (gv, av) in g_row.iter_mut().zip(a_row.iter()) {
                    *gv += dv * av;
                }
                grad[b_start + o] += dv;
            }
        }
        if l > 0 {
            let mask = &tape.pre[l - 1];
            let mut next = vec![0.0; batch * inp];
            for b in 0..batch {
                let d_row = &delta[b * out..(b + 1) * out];
                let n_row = &mut next[b * inp..(b + 1) * inp];
                for (o, dv) in d_row.iter().enumerate() {
                    if *dv == 0.0 {
                        continue;
                    }
                    let w_row = &theta[w_start + o * inp..w_start + (o + 1) * inp];
                    for (nv, wv) in n_row.iter_mut().zip(w_row.iter()) {
                        *nv += dv * wv;
                    }
                }
                let m_row = &mask[b * inp..(b + 1) * inp];
                for (nv, mv) in n_row.iter_mut().zip(m_row.iter()) {
                    if *mv <= 0.0 {
                        *nv = 0.0;
                    }
                }
            }
            delta = next;
        }
    }
    grad
}

fn output_deltas(tape: &ForwardTape, labels: &[f64]) -> Vec<f64> {
    let inv_b = 1.0 / tape.batch as f64;
    tape.probs
        .iter()
        .zip(labels.iter())
        .zip(tape.unclamped.iter())
        .map(|((p, y), un)| if *un { (p - y) * inv_b } else { 0.0 })
        .collect()
}

fn labels_of(batch: &[Example]) -> Vec<f64> {
    batch.iter().map(|e| if e.label { 1.0 } else { 0.0 }).collect()
}

fn inputs_of(batch: &[Example], width: usize) -> Result<Vec<f64>, NetError> {
    let mut flat = Vec::with_capacity(batch.len() * width);
    for (row, e) in batch.iter().enumerate() {
        if e.bits.len() != width {
            return Err(NetError::ShapeMismatch(format!(
                "example {row} has width {}, expected {width}",
                e.bits.len()
            )));
        }
        flat.extend(e.bits.iter().map(|b| if *b { 1.0 } else { 0.0 }));
    }
    Ok(flat)
}

/// Mean BCE and its exact gradient over a labeled batch.
pub fn loss_and_grad(p: &ParamSet, batch: &[Example]) -> Result<(LossValue, ParamSet), NetError> {
    assert!(!batch.is_empty(), "batch must be nonempty");
    let inputs = inputs_of(batch, p.arch.input)?;
    let labels = labels_of(batch);
    let tape = forward_flat(p.arch, &p.data, inputs, batch.len());
    let mean = bce_mean(&tape.probs, &labels);
    let delta = output_deltas(&tape, &labels);
    let grad = backward_flat(p.arch, &p.data, &tape, &delta);
    let loss = LossValue { mean, probabilities: tape.probs.clone() };
    Ok((loss, ParamSet { arch: p.arch, data: grad }))
}

/// Exact Hessian-vector product of the mean BCE at `p` in direction `v`,
/// computed by differentiating the reverse pass along the tangent `v`
/// (forward-over-reverse). Not a finite-difference approximation.
pub fn hvp(p: &ParamSet, batch: &[Example], v: &[f64]) -> Result<Vec<f64>, NetError> {
    assert!(!batch.is_empty(), "batch must be nonempty");
    if v.len() != p.len() {
        return Err(NetError::ShapeMismatch(format!(
            "direction has {} values, parameters have {}",
            v.len(),
            p.len()
        )));
    }
    let inputs = inputs_of(batch, p.arch.input)?;
    let labels = labels_of(batch);
    let tape = forward_flat(p.arch, &p.data, inputs, batch.len());
    Ok(hvp_flat(p.arch, &p.data, &tape, &labels, v))
}

fn hvp_flat(arch: Architecture, theta: &[f64], tape: &ForwardTape, labels: &[f64], v: &[f64]) -> Vec<f64> {
    let dims = arch.layer_dims();
    let batch = tape.batch;

    // Tangent forward: d_acts / d_pre along direction v. ReLU and the clamp
    // are piecewise linear, so their masks are constants of the tangent pass.
    let mut d_acts: Vec<Vec<f64>> = Vec::with_capacity(dims.len());
    let mut d_pre: Vec<Vec<f64>> = Vec::with_capacity(dims.len());
    d_acts.push(vec![0.0; batch * arch.input]);
    for (l, &(out, inp)) in dims.iter().enumerate() {
        let (w_start, b_start, _) = arch.offsets(l);
        let a = &tape.acts[l];
        let da = &d_acts[l];
        let mut dz = vec![0.0; batch * out];
        for b in 0..batch {
            let a_row = &a[b * inp..(b + 1) * inp];
            let da_row = &da[b * inp..(b + 1) * inp];
            let dz_row = &mut dz[b * out..(b + 1) * out];
            for (o, dzv) in dz_row.iter_mut().enumerate() {
                let w_row = &theta[w_start + o * inp..w_start + (o + 1) * inp];
                let dw_row = &v[w_start + o * inp..w_start + (o + 1) * inp];
                let mut acc = v[b_start + o];
                for i in 0..inp {
                    acc += dw_row[i] * a_row[i] + w_row[i] * da_row[i];
                }
                *dzv = acc;
            }
        }
        if l + 1 < dims.len() {
            let mask = &tape.pre[l];
            let da_next: Vec<f64> =
                dz.iter().zip(mask.iter()).map(|(d, z)| if *z > 0.0 { *d } else { 0.0 }).collect();
            d_pre.push(dz);
            d_acts.push(da_next);
        } else {
            d_pre.push(dz);
        }
    }

    // Primal and tangent output deltas.
    let inv_b = 1.0 / batch as f64;
    let dz_out = d_pre.last().expect("at least one layer");
    let mut delta = vec![0.0; batch];
    let mut t_delta = vec![0.0; batch];
    for b in 0..batch {
        if tape.unclamped[b] {
            let p = tape.probs[b];
            delta[b] = (p - labels[b]) * inv_b;
            t_delta[b] = p * (1.0 - p) * dz_out[b] * inv_b;
        }
    }

    // Tangent reverse: accumulate d(grad) while propagating (delta, t_delta).
    let mut hv = vec![0.0; arch.param_count()];
    for l in (0..dims.len()).rev() {
        let (out, inp) = dims[l];
        let (w_start, b_start, _) = arch.offsets(l);
        let a = &tape.acts[l];
        let da = &d_acts[l];
        for b in 0..batch {
            let d_row = &delta[b * out..(b + 1) * out];
            let td_row = &t_delta[b * out..(b + 1) * out];
            let a_row = &a[b * inp..(b + 1) * inp];
            let da_row = &da[b * inp..(b + 1) * inp];
            for o in 0..out {
                let (dv, tdv) = (d_row[o], td_row[o]);
                if dv == 0.0 && tdv == 0.0 {
                    continue;
                }
                let h_row = &mut hv[w_start + o * inp..w_start + (o + 1) * inp];
                for i in 0..inp {
                    h_row[i] += tdv * a_row[i] + dv * da_row[i];
                }
                hv[b_start + o] += tdv;
            }
        }
        if l > 0 {
            let mask = &tape.pre[l - 1];
            let mut next = vec![0.0; batch * inp];
            let mut t_next = vec![0.0; batch * inp];
            for b in 0..batch {
                let d_row = &delta[b * out..(b + 1) * out];
                let td_row = &t_delta[b * out..(b + 1) * out];
                let n_row = &mut next[b * inp..(b + 1) * inp];
                let tn_row = &mut t_next[b * inp..(b + 1) * inp];
                for o in 0..out {
                    let (dv, tdv) = (d_row[o], td_row[o]);
                    if dv == 0.0 && tdv == 0.0 {
                        continue;
                    }
                    let w_row = &theta[w_start + o * inp..w_start + (o + 1) * inp];
                    let dw_row = &v[w_start + o * inp..w_start + (o + 1) * inp];
                    for i in 0..inp {
                        n_row[i] += dv * w_row[i];
                        tn_row[i] += tdv * w_row[i] + dv * dw_row[i];
                    }
                }
                let m_row = &mask[b * inp..(b + 1) * inp];
                for i in 0..inp {
                    if m_row[i] <= 0.0 {
                        n_row[i] = 0.0;
                        tn_row[i] = 0.0;
                    }
                }
            }
            delta = next;
            t_delta = t_next;
        }
    }
    hv
}

/// Fraction of examples classified correctly; probability 0.5 predicts 1.
pub fn accuracy(p: &ParamSet, batch: &[Example]) -> Result<f64, NetError> {
    assert!(!batch.is_empty(), "batch must be nonempty");
    let inputs = inputs_of(batch, p.arch.input)?;
    let tape = forward_flat(p.arch, &p.data, inputs, batch.len());
    let correct = tape
        .probs
        .iter()
        .zip(batch.iter())
        .filter(|(prob, e)| (**prob >= 0.5) == e.label)
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

/// A scalar objective over flat parameters with exact first- and
/// second-order operators. Implemented by the episode losses and by the
/// synthetic surfaces in tests.
pub trait Objective {
    fn dim(&self) -> usize;
    fn loss(&self, theta: &[f64]) -> f64;
    fn loss_grad(&self, theta: &[f64]) -> (f64, Vec<f64>);
    fn hvp(&self, theta: &[f64], v: &[f64]) -> Vec<f64>;
}

/// Mean BCE of a fixed labeled batch as a function of the flat parameters.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    arch: Architecture,
    inputs: Vec<f64>,
    labels: Vec<f64>,
    batch: usize,
}

impl BatchLoss {
    pub fn new(arch: Architecture, batch: &[Example]) -> Result<Self, NetError> {
        assert!(!batch.is_empty(), "batch must be nonempty");
        Ok(BatchLoss {
            arch,
            inputs: inputs_of(batch, arch.input)?,
            labels: labels_of(batch),
            batch: batch.len(),
        })
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    fn tape(&self, theta: &[f64]) -> ForwardTape {
        forward_flat(self.arch, theta, self.inputs.clone(), self.batch)
    }
}

impl Objective for BatchLoss {
    fn dim(&self) -> usize {
        self.arch.param_count()
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        bce_mean(&self.tape(theta).probs, &self.labels)
    }

    fn loss_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let tape = self.tape(theta);
        let mean = bce_mean(&tape.probs, &self.labels);
        let delta = output_deltas(&tape, &self.labels);
        (mean, backward_flat(self.arch, theta, &tape, &delta))
    }

    fn hvp(&self, theta: &[f64], v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dim(), "direction length mismatch");
        let tape = self.tape(theta);
        hvp_flat(self.arch, theta, &tape, &self.labels, v)
    }
}

/// One stored parameter vector: architecture, seed, theta, and optionally the
/// per-parameter learning rates trained alongside it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub theta: ParamSet,
    pub alpha: Option<ParamSet>,
    pub seed: u64,
}

fn write_arch<W: Write>(w: &mut W, arch: Architecture) -> Result<(), NetError> {
    w.write_all(&(arch.input as u32).to_le_bytes())?;
    w.write_all(&(arch.hidden_width as u32).to_le_bytes())?;
    w.write_all(&(arch.hidden_layers as u32).to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NetError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NetError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_arch<R: Read>(r: &mut R) -> Result<Architecture, NetError> {
    Ok(Architecture {
        input: read_u32(r)? as usize,
        hidden_width: read_u32(r)? as usize,
        hidden_layers: read_u32(r)? as usize,
    })
}

fn write_values<W: Write>(w: &mut W, values: &[f64]) -> Result<(), NetError> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_values<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, NetError> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

/// Writes a checkpoint: header (magic, architecture, n, seed) then the flat
/// 64-bit little-endian value array; bit-exact on round-trip.
pub fn save_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<(), NetError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    write_arch(&mut w, ckpt.theta.arch)?;
    w.write_all(&(ckpt.theta.len() as u64).to_le_bytes())?;
    w.write_all(&ckpt.seed.to_le_bytes())?;
    w.write_all(&[ckpt.alpha.is_some() as u8])?;
    write_values(&mut w, ckpt.theta.flat())?;
    if let Some(alpha) = &ckpt.alpha {
        if alpha.arch != ckpt.theta.arch {
            return Err(NetError::ShapeMismatch("alpha architecture differs from theta".into()));
        }
        write_values(&mut w, alpha.flat())?;
    }
    Ok(())
}

pub fn load_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint, NetError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NetError::Checkpoint("wrong magic bytes".into()));
    }
    let arch = read_arch(&mut r)?;
    let n = read_u64(&mut r)? as usize;
    if n != arch.param_count() {
        return Err(NetError::Checkpoint(format!(
            "header says {n} values, architecture needs {}",
            arch.param_count()
        )));
    }
    let seed = read_u64(&mut r)?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let theta = ParamSet::from_flat(arch, read_values(&mut r, n)?)?;
    let alpha = if flag[0] != 0 {
        Some(ParamSet::from_flat(arch, read_values(&mut r, n)?)?)
    } else {
        None
    };
    Ok(Checkpoint { theta, alpha, seed })
}

/// Writes a parameter trajectory: `(episode, theta)` snapshots in order.
pub fn save_param_series<W: Write>(
    mut w: W,
    arch: Architecture,
    snapshots: &[(u64, Vec<f64>)],
) -> Result<(), NetError> {
    w.write_all(SERIES_MAGIC)?;
    write_arch(&mut w, arch)?;
    w.write_all(&(arch.param_count() as u64).to_le_bytes())?;
    w.write_all(&(snapshots.len() as u64).to_le_bytes())?;
    for (episode, theta) in snapshots {
        if theta.len() != arch.param_count() {
            return Err(NetError::ShapeMismatch("snapshot length mismatch".into()));
        }
        w.write_all(&episode.to_le_bytes())?;
        write_values(&mut w, theta)?;
    }
    Ok(())
}

pub fn load_param_series<R: Read>(mut r: R) -> Result<(Architecture, Vec<(u64, Vec<f64>)>), NetError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != SERIES_MAGIC {
        return Err(NetError::Checkpoint("wrong magic bytes".into()));
    }
    let arch = read_arch(&mut r)?;
    let n = read_u64(&mut r)? as usize;
    if n != arch.param_count() {
        return Err(NetError::Checkpoint("series width disagrees with architecture".into()));
    }
    let count = read_u64(&mut r)? as usize;
    let mut snapshots = Vec::with_capacity(count);
    for _ in 0..count {
        let episode = read_u64(&mut r)?;
        snapshots.push((episode, read_values(&mut r, n)?));
    }
    Ok((arch, snapshots))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(bits: &[u8], label: bool) -> Example {
        Example { bits: bits.iter().map(|b| *b != 0).collect(), label }
    }

    fn balanced_batch(f: usize) -> Vec<Example> {
        (0..8)
            .map(|i| {
                let bits: Vec<u8> = (0..f).map(|j| ((i >> (j % 8)) & 1) as u8).collect();
                example(&bits, i % 2 == 0)
            })
            .collect()
    }

    #[test]
    fn param_count_matches_closed_form() {
        let arch = Architecture::standard(8);
        let expected = 8 * 128 + 128 + 3 * (128 * 128 + 128) + (128 + 1);
        assert_eq!(arch.param_count(), expected);
        assert_eq!(arch.layer_dims().len(), 5);
    }

    #[test]
    fn flat_round_trip_is_identity() {
        let arch = Architecture::tiny(3);
        let p = init_params(arch, 4);
        let q = ParamSet::from_flat(arch, p.flat().to_vec()).unwrap();
        assert_eq!(p, q);
        assert!(ParamSet::from_flat(arch, vec![0.0; 3]).is_err());
    }

    #[test]
    fn layer_blocks_partition_the_vector() {
        let arch = Architecture::tiny(3);
        let p = ParamSet::zeros(arch);
        let blocks = p.layer_blocks();
        assert_eq!(blocks.first().unwrap().start, 0);
        assert_eq!(blocks.last().unwrap().end, p.len());
        for pair in blocks.windows(2) {
            assert_eq!(pair[0].end, pair[1].start);
        }
        let (out, inp) = arch.layer_dims()[0];
        assert_eq!(p.weight_range(0).len(), out * inp);
        assert_eq!(p.bias_range(0).len(), out);
    }

    #[test]
    fn init_biases_zero_and_seed_deterministic() {
        let arch = Architecture::standard(8);
        let p = init_params(arch, 11);
        for l in 0..arch.layer_dims().len() {
            assert!(p.flat()[p.bias_range(l)].iter().all(|b| *b == 0.0));
        }
        let q = init_params(arch, 11);
        assert_eq!(p.flat(), q.flat());
        assert_ne!(p.flat(), init_params(arch, 12).flat());
    }

    #[test]
    fn init_weight_variance_tracks_fan_in() {
        let arch = Architecture::standard(32);
        let p = init_params(arch, 0);
        let w = &p.flat()[p.weight_range(0)];
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let var: f64 = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        let target = 2.0 / 32.0;
        assert!((var - target).abs() / target < 0.10, "var {var} vs target {target}");
    }

    #[test]
    fn zero_net_outputs_half() {
        let arch = Architecture::tiny(4);
        let p = ParamSet::zeros(arch);
        let batch = balanced_batch(4);
        let inputs: Vec<Vec<bool>> = batch.iter().map(|e| e.bits.clone()).collect();
        let (probs, _) = forward(&p, &inputs).unwrap();
        assert!(probs.iter().all(|p| *p == 0.5));
    }

    #[test]
    fn forward_commutes_with_batch_permutation() {
        let arch = Architecture::tiny(4);
        let p = init_params(arch, 3);
        let batch = balanced_batch(4);
        let inputs: Vec<Vec<bool>> = batch.iter().map(|e| e.bits.clone()).collect();
        let (probs, _) = forward(&p, &inputs).unwrap();
        let mut reversed = inputs.clone();
        reversed.reverse();
        let (rprobs, _) = forward(&p, &reversed).unwrap();
        let mut expected = probs.clone();
        expected.reverse();
        assert_eq!(rprobs, expected);
    }

    #[test]
    fn forward_rejects_bad_width() {
        let arch = Architecture::tiny(4);
        let p = ParamSet::zeros(arch);
        assert!(forward(&p, &[vec![true; 3]]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let arch = Architecture::tiny(4);
        let zero = ParamSet::zeros(arch);
        let batch = balanced_batch(4);
        // All outputs 0.5 -> everything predicts label 1; batch is balanced.
        assert_eq!(accuracy(&zero, &batch).unwrap(), 0.5);

        // Saturate the output bias so predictions follow its sign.
        let mut p = ParamSet::zeros(arch);
        let last = arch.layer_dims().len() - 1;
        let bias = p.bias_range(last);
        p.flat_mut()[bias][0] = 40.0;
        let all_pos: Vec<Example> = batch.iter().map(|e| Example { label: true, ..e.clone() }).collect();
        assert_eq!(accuracy(&p, &all_pos).unwrap(), 1.0);
    }

    #[test]
    fn loss_is_bounded_by_clamp() {
        let arch = Architecture::tiny(4);
        let mut p = ParamSet::zeros(arch);
        let last = arch.layer_dims().len() - 1;
        let bias = p.bias_range(last);
        p.flat_mut()[bias][0] = 100.0; // confidently wrong on negatives
        let batch = vec![example(&[0, 0, 0, 0], false)];
        let (loss, _) = loss_and_grad(&p, &batch).unwrap();
        let bound = -(PROB_CLAMP.ln());
        assert!(loss.mean <= bound + 1e-9, "loss {} above clamp bound {bound}", loss.mean);
        assert!(loss.mean.is_finite());
    }

    #[test]
    fn saturated_perfect_fit_has_tiny_gradient() {
        let arch = Architecture::tiny(4);
        let mut p = ParamSet::zeros(arch);
        let last = arch.layer_dims().len() - 1;
        let bias = p.bias_range(last);
        p.flat_mut()[bias][0] = 40.0;
        let batch: Vec<Example> = (0..6).map(|i| example(&[(i & 1) as u8, 0, 1, 0], true)).collect();
        let (_, grad) = loss_and_grad(&p, &batch).unwrap();
        let norm: f64 = grad.flat().iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm < 1e-6, "gradient norm {norm}");
    }

    #[test]
    fn gradient_of_mean_is_mean_of_gradients() {
        let arch = Architecture::tiny(4);
        let p = init_params(arch, 17);
        let batch = balanced_batch(4);
        let (_, grad) = loss_and_grad(&p, &batch).unwrap();
        let mut mean = vec![0.0; p.len()];
        for e in &batch {
            let (_, g) = loss_and_grad(&p, std::slice::from_ref(e)).unwrap();
            for (m, gv) in mean.iter_mut().zip(g.flat()) {
                *m += gv / batch.len() as f64;
            }
        }
        for (a, b) in grad.flat().iter().zip(mean.iter()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn hvp_of_zero_is_zero_and_linear() {
        let arch = Architecture::tiny(4);
        let p = init_params(arch, 23);
        let batch = balanced_batch(4);
        let n = p.len();
        let zero = hvp(&p, &batch, &vec![0.0; n]).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let v1: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let v2: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        let (a, b) = (0.7, -1.3);
        let combo: Vec<f64> = v1.iter().zip(v2.iter()).map(|(x, y)| a * x + b * y).collect();
        let h_combo = hvp(&p, &batch, &combo).unwrap();
        let h1 = hvp(&p, &batch, &v1).unwrap();
        let h2 = hvp(&p, &batch, &v2).unwrap();
        let scale: f64 = h_combo.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
        for i in 0..n {
            let expect = a * h1[i] + b * h2[i];
            assert!((h_combo[i] - expect).abs() <= 1e-10 * scale, "coord {i}");
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exact() {
        let arch = Architecture::tiny(5);
        let theta = init_params(arch, 1);
        let alpha = ParamSet::constant(arch, 0.01);
        let ckpt = Checkpoint { theta: theta.clone(), alpha: Some(alpha.clone()), seed: 99 };
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &ckpt).unwrap();
        let back = load_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.seed, 99);
        assert_eq!(back.theta.flat(), theta.flat());
        assert_eq!(back.alpha.unwrap().flat(), alpha.flat());

        let mut corrupted = buf.clone();
        corrupted[0] ^= 0xff;
        assert!(load_checkpoint(corrupted.as_slice()).is_err());
    }

    #[test]
    fn param_series_round_trips() {
        let arch = Architecture::tiny(2);
        let snaps: Vec<(u64, Vec<f64>)> =
            (0..3).map(|i| (i * 10, init_params(arch, i).into_flat())).collect();
        let mut buf = Vec::new();
        save_param_series(&mut buf, arch, &snaps).unwrap();
        let (arch2, back) = load_param_series(buf.as_slice()).unwrap();
        assert_eq!(arch2, arch);
        assert_eq!(back, snaps);
    }
}
