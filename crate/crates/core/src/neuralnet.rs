//! Minimal dense-network kernel with hand-derived backprop.
//!
//! Networks are fixed lists of [`DenseLayer`]s. [`Mlp::forward`] records a
//! [`Tape`] of per-layer inputs and pre-activations which
//! [`Mlp::backward`] consumes. Everything is `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Softplus,
    Sigmoid,
    Softmax,
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub use crate::domain::sigmoid;

/// Binary cross-entropy evaluated from a logit: softplus(z) - y z.
#[inline]
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    softplus(z) - y * z
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// log(sum(exp(z))), stable.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

impl Activation {
    pub fn apply(self, pre: &[f64]) -> Vec<f64> {
        match self {
            Activation::Identity => pre.to_vec(),
            Activation::Relu => pre.iter().map(|&z| z.max(0.0)).collect(),
            Activation::Softplus => pre.iter().map(|&z| softplus(z)).collect(),
            Activation::Sigmoid => pre.iter().map(|&z| sigmoid(z)).collect(),
            Activation::Softmax => softmax(pre),
        }
    }

    /// Chain `upstream` (gradient w.r.t. the activation output) back through
    /// the activation, given the pre-activation and output.
    pub fn backprop(self, pre: &[f64], out: &[f64], upstream: &[f64]) -> Vec<f64> {
        match self {
            Activation::Identity => upstream.to_vec(),
            Activation::Relu => pre
                .iter()
                .zip(upstream)
                .map(|(&z, &g)| if z > 0.0 { g } else { 0.0 })
                .collect(),
            Activation::Softplus => pre.iter().zip(upstream).map(|(&z, &g)| g * sigmoid(z)).collect(),
            Activation::Sigmoid => out.iter().zip(upstream).map(|(&s, &g)| g * s * (1.0 - s)).collect(),
            Activation::Softmax => {
                let dot: f64 = out.iter().zip(upstream).map(|(s, g)| s * g).sum();
                out.iter().zip(upstream).map(|(&s, &g)| s * (g - dot)).collect()
            }
        }
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err(Error::Shape {
                what: "matrix rows",
                expected: c,
                got: rows.iter().map(|x| x.len()).find(|&l| l != c).unwrap_or(c),
            });
        }
        Ok(Self {
            rows: r,
            cols: c,
            data: rows.concat(),
        })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `self^T * g`.
    pub fn matvec_t(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, &gi) in self.data.chunks_exact(self.cols).zip(g) {
            if gi == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(row) {
                *o += gi * w;
            }
        }
        out
    }

    fn is_valid(&self) -> bool {
        self.data.len() == self.rows * self.cols && self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// out x in
    pub w: Matrix,
    pub b: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(w: Matrix, b: Vec<f64>, activation: Activation) -> Result<Self> {
        if b.len() != w.rows {
            return Err(Error::Shape {
                what: "layer bias",
                expected: w.rows,
                got: b.len(),
            });
        }
        Ok(Self { w, b, activation })
    }

    /// He-uniform for relu layers, Glorot-uniform otherwise; zero bias.
    pub fn init<R: Rng>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = match activation {
            Activation::Relu => (6.0 / input as f64).sqrt(),
            _ => (6.0 / (input + output) as f64).sqrt(),
        };
        let data = (0..input * output)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            w: Matrix {
                rows: output,
                cols: input,
                data,
            },
            b: vec![0.0; output],
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows
    }
}

/// Cached per-layer values from one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Pre-activation of the last layer.
    pub fn last_pre(&self) -> &[f64] {
        self.pre.last().map_or(&[], |v| v.as_slice())
    }
}

/// Parameter-shaped gradient buffers for an [`Mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl MlpGrads {
    pub fn add_assign(&mut self, other: &MlpGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.iter_mut().zip(ow).for_each(|(a, b)| *a += b);
            b.iter_mut().zip(ob).for_each(|(a, b)| *a += b);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().chain(b).all(|&v| v == 0.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        let m = Self { layers };
        m.check()?;
        Ok(m)
    }

    /// Random network with widths `dims[0] -> dims[1] -> ...`.
    pub fn init<R: Rng>(dims: &[usize], activations: &[Activation], rng: &mut R) -> Self {
        assert_eq!(dims.len(), activations.len() + 1, "one activation per layer");
        Self {
            layers: dims
                .windows(2)
                .zip(activations)
                .map(|(d, &a)| DenseLayer::init(d[0], d[1], a, rng))
                .collect(),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        for l in &self.layers {
            if !l.w.is_valid() || l.b.len() != l.w.rows || l.b.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("layer has inconsistent shape or non-finite values".into()));
            }
        }
        for pair in self.layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Shape {
                    what: "layer chain",
                    expected: pair[0].output_dim(),
                    got: pair[1].input_dim(),
                });
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.data.len() + l.b.len()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                what: "network input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            output: Vec::new(),
        };
        let mut h = x.to_vec();
        for l in &self.layers {
            let mut z = l.w.matvec(&h);
            z.iter_mut().zip(&l.b).for_each(|(a, b)| *a += b);
            let out = l.activation.apply(&z);
            tape.inputs.push(h);
            tape.pre.push(z);
            h = out;
        }
        tape.output = h.clone();
        Ok((h, tape))
    }

    /// Output only, without keeping a tape.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.0)
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self
                .layers
                .iter()
                .map(|l| (vec![0.0; l.w.data.len()], vec![0.0; l.b.len()]))
                .collect(),
        }
    }

    fn check_tape(&self, tape: &Tape) -> Result<()> {
        if tape.pre.len() != self.layers.len() || tape.inputs.len() != self.layers.len() {
            return Err(Error::Tape(format!(
                "tape has {} layers, network has {}",
                tape.pre.len(),
                self.layers.len()
            )));
        }
        for (l, (inp, pre)) in self.layers.iter().zip(tape.inputs.iter().zip(&tape.pre)) {
            if inp.len() != l.input_dim() || pre.len() != l.output_dim() {
                return Err(Error::Tape("tape layer widths do not match network".into()));
            }
        }
        Ok(())
    }

    /// Backprop from a gradient w.r.t. the network output.
    pub fn backward(&self, tape: &Tape, upstream: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
        let mut g = self.zero_grads();
        let dx = self.backward_into(tape, upstream, &mut g)?;
        Ok((g, dx))
    }

    /// Like [`Mlp::backward`] but accumulates into existing buffers.
    pub fn backward_into(&self, tape: &Tape, upstream: &[f64], grads: &mut MlpGrads) -> Result<Vec<f64>> {
        self.check_tape(tape)?;
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape {
                what: "upstream gradient",
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let last = self.layers.len() - 1;
        let d_pre = self.layers[last]
            .activation
            .backprop(&tape.pre[last], &tape.output, upstream);
        self.backward_pre_into(tape, d_pre, grads)
    }

    /// Backprop from a gradient w.r.t. the last layer's pre-activation.
    pub fn backward_pre_into(&self, tape: &Tape, d_pre_last: Vec<f64>, grads: &mut MlpGrads) -> Result<Vec<f64>> {
        self.check_tape(tape)?;
        if d_pre_last.len() != self.output_dim() {
            return Err(Error::Shape {
                what: "pre-activation gradient",
                expected: self.output_dim(),
                got: d_pre_last.len(),
            });
        }
        let mut d_pre = d_pre_last;
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            let inp = &tape.inputs[li];
            let (gw, gb) = &mut grads.layers[li];
            for (r, &d) in d_pre.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[r] += d;
                let row = &mut gw[r * l.w.cols..(r + 1) * l.w.cols];
                row.iter_mut().zip(inp).for_each(|(g, &x)| *g += d * x);
            }
            let d_in = l.w.matvec_t(&d_pre);
            if li == 0 {
                return Ok(d_in);
            }
            let prev = &self.layers[li - 1];
            d_pre = prev.activation.backprop(&tape.pre[li - 1], inp, &d_in);
        }
        unreachable!("network has at least one layer")
    }
}

/// Anything exposing its parameters as an ordered list of flat slices.
pub trait Parameters {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }
}

impl Parameters for Mlp {
    fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.data.as_slice(), l.b.as_slice()])
            .collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.w.data.as_mut_slice(), l.b.as_mut_slice()])
            .collect()
    }
}

impl Parameters for MlpGrads {
    fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<P: Parameters, G: Parameters>(params: &mut P, grads: &G, state: &mut AdamState) -> Result<()> {
    let g = grads.to_flat();
    if g.len() != state.m.len() {
        return Err(Error::Shape {
            what: "adam gradient",
            expected: state.m.len(),
            got: g.len(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let mut off = 0;
    for s in params.slices_mut() {
        for p in s.iter_mut() {
            let gi = g[off];
            let m = &mut state.m[off];
            let v = &mut state.v[off];
            *m = state.beta1 * *m + (1.0 - state.beta1) * gi;
            *v = state.beta2 * *v + (1.0 - state.beta2) * gi * gi;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= state.lr * mhat / (vhat.sqrt() + state.eps);
            off += 1;
        }
    }
    if off != g.len() {
        return Err(Error::Shape {
            what: "adam parameters",
            expected: g.len(),
            got: off,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// Largest relative error per parameter tensor.
    pub per_tensor: Vec<f64>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Floor on the relative-error denominator, so gradients that are zero to
/// rounding are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Central-difference check of `analytic` against `loss` for every parameter.
pub fn grad_check<P, F>(params: &mut P, loss: F, analytic: &[f64], h: f64, tolerance: f64) -> GradCheckReport
where
    P: Parameters,
    F: Fn(&P) -> f64,
{
    let sizes: Vec<usize> = params.slices().iter().map(|s| s.len()).collect();
    let mut flat = params.to_flat();
    assert_eq!(flat.len(), analytic.len(), "analytic gradient length");
    let mut per_tensor = Vec::with_capacity(sizes.len());
    let mut off = 0;
    for size in sizes {
        let mut worst: f64 = 0.0;
        for i in off..off + size {
            let orig = flat[i];
            flat[i] = orig + h;
            params.set_flat(&flat);
            let up = loss(params);
            flat[i] = orig - h;
            params.set_flat(&flat);
            let down = loss(params);
            flat[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max(rel);
        }
        per_tensor.push(worst);
        off += size;
    }
    params.set_flat(&flat);
    let max_rel_error = per_tensor.iter().cloned().fold(0.0, f64::max);
    GradCheckReport {
        per_tensor,
        max_rel_error,
        tolerance,
        passed: max_rel_error < tolerance,
    }
}

/// Check an [`Mlp`]'s backprop for a loss of its output. `loss_fn` returns the
/// loss and its gradient w.r.t. the output.
pub fn grad_check_mlp<F>(mlp: &Mlp, loss_fn: F, x: &[f64], h: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (out, tape) = mlp.forward(x)?;
    let (_, dout) = loss_fn(&out);
    let (grads, _) = mlp.backward(&tape, &dout)?;
    let mut probe = mlp.clone();
    Ok(grad_check(
        &mut probe,
        |m: &Mlp| loss_fn(&m.predict(x).expect("shape checked")).0,
        &grads.to_flat(),
        h,
        tolerance,
    ))
}

pub const MLP_FORMAT: &str = "ridesub-mlp";
pub const MLP_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MlpFile {
    format: String,
    version: u32,
    network: Mlp,
}

impl Mlp {
    pub fn to_checkpoint_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&MlpFile {
            format: MLP_FORMAT.into(),
            version: MLP_VERSION,
            network: self.clone(),
        })?)
    }

    pub fn from_checkpoint_json(s: &str) -> Result<Self> {
        let f: MlpFile = serde_json::from_str(s)?;
        if f.format != MLP_FORMAT || f.version != MLP_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint {} v{}", f.format, f.version)));
        }
        f.network.check()?;
        Ok(f.network)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::{prop, prop_assert, proptest};

    fn random_net(seed: u64, dims: &[usize], acts: &[Activation]) -> Mlp {
        let mut g = rng::stream(seed, &[0]);
        let mut m = Mlp::init(dims, acts, &mut g);
        for l in &mut m.layers {
            for b in &mut l.b {
                *b = g.random_range(-0.5..0.5);
            }
        }
        m
    }

    fn sq_loss(target: Vec<f64>) -> impl Fn(&[f64]) -> (f64, Vec<f64>) {
        move |o: &[f64]| {
            let l = o.iter().zip(&target).map(|(a, b)| 0.5 * (a - b).powi(2)).sum();
            (l, o.iter().zip(&target).map(|(a, b)| a - b).collect())
        }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let l = DenseLayer::new(Matrix::identity(3), vec![0.0; 3], Activation::Identity).unwrap();
        let m = Mlp::new(vec![l]).unwrap();
        let x = [0.3, -1.2, 7.0];
        assert_eq!(m.predict(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn softplus_and_softmax_at_zero() {
        assert!((Activation::Softplus.apply(&[0.0])[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let s = Activation::Softmax.apply(&[0.0, 0.0, 0.0]);
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors() {
        let m = random_net(1, &[3, 4, 2], &[Activation::Relu, Activation::Identity]);
        assert!(matches!(m.forward(&[1.0, 2.0]), Err(Error::Shape { .. })));
        let other = random_net(2, &[3, 2], &[Activation::Identity]);
        let (_, tape) = other.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(m.backward(&tape, &[1.0, 1.0]), Err(Error::Tape(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let m = random_net(3, &[3, 4, 2], &[Activation::Relu, Activation::Sigmoid]);
        let (_, tape) = m.forward(&[0.1, 0.2, 0.3]).unwrap();
        let (g, dx) = m.backward(&tape, &[0.0, 0.0]).unwrap();
        assert!(g.is_zero());
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_net_matches_finite_differences() {
        for seed in 0..20 {
            let m = random_net(seed, &[3, 4, 2], &[Activation::Relu, Activation::Identity]);
            let mut g = rng::stream(seed, &[1]);
            let x: Vec<f64> = (0..3).map(|_| g.random_range(-1.0..1.0)).collect();
            let rep = grad_check_mlp(&m, sq_loss(vec![0.3, -0.2]), &x, 1e-5, 1e-4).unwrap();
            assert!(rep.passed, "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn every_activation_passes_grad_check() {
        use Activation::*;
        for (i, act) in [Identity, Relu, Softplus, Sigmoid, Softmax].into_iter().enumerate() {
            for seed in 0..100u64 {
                let m = random_net(seed * 10 + i as u64, &[4, 5, 3], &[Softplus, act]);
                let mut g = rng::stream(seed, &[2, i as u64]);
                let x: Vec<f64> = (0..4).map(|_| g.random_range(-2.0..2.0)).collect();
                let target: Vec<f64> = (0..3).map(|_| g.random_range(-1.0..1.0)).collect();
                let rep = grad_check_mlp(&m, sq_loss(target), &x, 1e-5, 1e-4).unwrap();
                assert!(rep.passed, "{act:?} seed {seed}: {rep:?}");
            }
        }
    }

    #[test]
    fn sigmoid_bce_gradient_is_p_minus_y() {
        let l = DenseLayer::new(Matrix::from_rows(&[vec![0.7]]).unwrap(), vec![-0.2], Activation::Sigmoid).unwrap();
        let m = Mlp::new(vec![l]).unwrap();
        for &y in &[0.0, 1.0] {
            let x = [1.3];
            let (out, tape) = m.forward(&x).unwrap();
            let p = out[0];
            let dp = (p - y) / (p * (1.0 - p));
            let (g, _) = m.backward(&tape, &[dp]).unwrap();
            // dL/db == dL/dz
            assert!((g.layers[0].1[0] - (p - y)).abs() < 1e-12);
        }
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let m = random_net(5, &[3, 4, 2], &[Activation::Relu, Activation::Identity]);
        let x = [0.2, -0.4, 0.9];
        let loss = sq_loss(vec![1.0, -1.0]);
        let (out, tape) = m.forward(&x).unwrap();
        let (grads, _) = m.backward(&tape, &loss(&out).1).unwrap();
        let flipped: Vec<f64> = grads.to_flat().iter().map(|g| -g).collect();
        let mut probe = m.clone();
        let rep = grad_check(&mut probe, |n: &Mlp| loss(&n.predict(&x).unwrap()).0, &flipped, 1e-5, 1e-4);
        assert!(!rep.passed);
    }

    #[test]
    fn linear_squared_loss_is_near_exact() {
        let m = random_net(9, &[3, 2], &[Activation::Identity]);
        let rep = grad_check_mlp(&m, sq_loss(vec![0.5, 0.5]), &[0.3, 0.1, -0.7], 1e-5, 1e-4).unwrap();
        assert!(rep.max_rel_error < 1e-8, "{rep:?}");
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut m = random_net(4, &[3, 2], &[Activation::Identity]);
        let before = m.clone();
        let g = m.zero_grads();
        let mut st = AdamState::new(m.n_params(), 1e-3);
        adam_step(&mut m, &g, &mut st).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        let mut m = random_net(4, &[3, 2], &[Activation::Identity]);
        let before = m.to_flat();
        let mut g = m.zero_grads();
        for s in g.slices_mut() {
            s.fill(0.37);
        }
        let mut st = AdamState::new(m.n_params(), 0.01);
        adam_step(&mut m, &g, &mut st).unwrap();
        for (a, b) in m.to_flat().iter().zip(&before) {
            // bias-corrected m/sqrt(v) = g/|g| = 1, up to eps
            assert!(((b - a) - 0.01).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut m = random_net(6, &[3, 4, 1], &[Activation::Relu, Activation::Sigmoid]);
            let mut st = AdamState::new(m.n_params(), 1e-2);
            for i in 0..20 {
                let x = [i as f64 * 0.1, 0.5, -0.5];
                let (out, tape) = m.forward(&x).unwrap();
                let (g, _) = m.backward(&tape, &[out[0] - 1.0]).unwrap();
                adam_step(&mut m, &g, &mut st).unwrap();
            }
            m
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = random_net(8, &[3, 4, 2], &[Activation::Relu, Activation::Softmax]);
        let s = m.to_checkpoint_json().unwrap();
        assert_eq!(Mlp::from_checkpoint_json(&s).unwrap(), m);
        assert!(Mlp::from_checkpoint_json(&s.replace("ridesub-mlp", "other")).is_err());
    }

    proptest! {
        #[test]
        fn stable_activations(z in prop::collection::vec(-500.0f64..500.0, 1..8)) {
            let sp = Activation::Softplus.apply(&z);
            prop_assert!(sp.iter().all(|v| v.is_finite() && *v > 0.0));
            let sm = Activation::Softmax.apply(&z);
            prop_assert!(sm.iter().all(|v| v.is_finite()));
            prop_assert!((sm.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let sg = Activation::Sigmoid.apply(&z);
            prop_assert!(sg.iter().all(|v| v.is_finite()));
            for &zi in &z {
                prop_assert!(bce_with_logit(zi, 1.0).is_finite());
                prop_assert!(bce_with_logit(zi, 0.0).is_finite());
            }
        }

        #[test]
        fn softplus_positive_and_softmax_open_interval(z in prop::collection::vec(-15.0f64..15.0, 2..8)) {
            prop_assert!(Activation::Softplus.apply(&z).iter().all(|&v| v > 0.0));
            let sm = Activation::Softmax.apply(&z);
            prop_assert!(sm.iter().all(|&v| v > 0.0 && v < 1.0));
            prop_assert!((sm.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
