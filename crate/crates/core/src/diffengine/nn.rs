//! Dense and convolutional layers with analytic backprop, stored in one flat
//! parameter vector so a single Adam state covers the whole network.

use nalgebra::{DMatrix, DMatrixView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QocError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => f64::from(u8::from(z > 0.0)),
        }
    }
}

/// 2-D convolution over a `(channels, height, width)` input, zero padding, stride 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.padding + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.padding + 1 - self.kernel
    }

    fn weights(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
    Conv2d {
        conv: Conv2dSpec,
        activation: Activation,
    },
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize, activation: Activation) -> Self {
        LayerSpec::Dense {
            inputs,
            outputs,
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        match self {
            LayerSpec::Dense { inputs, .. } => *inputs,
            LayerSpec::Conv2d { conv, .. } => conv.in_channels * conv.height * conv.width,
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            LayerSpec::Dense { outputs, .. } => *outputs,
            LayerSpec::Conv2d { conv, .. } => {
                conv.out_channels * conv.out_height() * conv.out_width()
            }
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            LayerSpec::Dense {
                inputs, outputs, ..
            } => inputs * outputs + outputs,
            LayerSpec::Conv2d { conv, .. } => conv.weights() + conv.out_channels,
        }
    }

    fn activation(&self) -> Activation {
        match self {
            LayerSpec::Dense { activation, .. } | LayerSpec::Conv2d { activation, .. } => {
                *activation
            }
        }
    }

    fn fan(&self) -> (usize, usize) {
        match self {
            LayerSpec::Dense {
                inputs, outputs, ..
            } => (*inputs, *outputs),
            LayerSpec::Conv2d { conv, .. } => {
                let k2 = conv.kernel * conv.kernel;
                (conv.in_channels * k2, conv.out_channels * k2)
            }
        }
    }
}

/// Network layout plus flat parameters. Dense weights are row-major
/// `(outputs, inputs)` followed by the bias; conv kernels are
/// `(out_c, in_c, k, k)` followed by one bias per output channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<LayerSpec>,
    pub params: Vec<f64>,
}

impl MlpParams {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        for w in layers.windows(2) {
            if w[0].outputs() != w[1].inputs() {
                return Err(QocError::DimensionMismatch {
                    what: "layer widths",
                    expected: w[0].outputs(),
                    found: w[1].inputs(),
                });
            }
        }
        for l in &layers {
            if let LayerSpec::Conv2d { conv, .. } = l {
                if conv.kernel == 0
                    || conv.kernel > conv.height + 2 * conv.padding
                    || conv.kernel > conv.width + 2 * conv.padding
                {
                    return Err(QocError::InvalidParameter(format!(
                        "conv kernel {} does not fit input",
                        conv.kernel
                    )));
                }
            }
        }
        let n = layers.iter().map(LayerSpec::n_params).sum();
        Ok(Self {
            layers,
            params: vec![0.0; n],
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, LayerSpec::inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, LayerSpec::outputs)
    }

    /// Start offset of each layer inside `params`.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for l in &self.layers {
            off.push(acc);
            acc += l.n_params();
        }
        off
    }

    pub fn layer_params(&self, layer: usize) -> &[f64] {
        let off = self.offsets()[layer];
        &self.params[off..off + self.layers[layer].n_params()]
    }

    pub fn layer_params_mut(&mut self, layer: usize) -> &mut [f64] {
        let off = self.offsets()[layer];
        let n = self.layers[layer].n_params();
        &mut self.params[off..off + n]
    }

    pub fn scale_layer(&mut self, layer: usize, factor: f64) {
        for p in self.layer_params_mut(layer) {
            *p *= factor;
        }
    }
}

/// Glorot-uniform weights (He-uniform before ReLU), zero biases.
pub fn mlp_init(layers: Vec<LayerSpec>, seed: u64) -> Result<MlpParams> {
    let mut net = MlpParams::new(layers)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets = net.offsets();
    for (l, off) in net.layers.clone().iter().zip(offsets) {
        let (fan_in, fan_out) = l.fan();
        let bound = match l.activation() {
            Activation::Relu => (6.0 / fan_in as f64).sqrt(),
            _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        };
        let n_w = l.n_params() - l.n_params_bias();
        for p in &mut net.params[off..off + n_w] {
            *p = rng.random_range(-bound..bound);
        }
    }
    Ok(net)
}

impl LayerSpec {
    fn n_params_bias(&self) -> usize {
        match self {
            LayerSpec::Dense { outputs, .. } => *outputs,
            LayerSpec::Conv2d { conv, .. } => conv.out_channels,
        }
    }
}

/// Activations kept for the backward pass: `inputs[l]` feeds layer `l`,
/// `pre[l]` is its pre-activation.
#[derive(Clone, Debug)]
pub struct ForwardTape {
    pub inputs: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

pub fn mlp_forward(net: &MlpParams, input: &[f64]) -> Result<ForwardTape> {
    if input.len() != net.input_dim() {
        return Err(QocError::DimensionMismatch {
            what: "network input",
            expected: net.input_dim(),
            found: input.len(),
        });
    }
    let offsets = net.offsets();
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut pre = Vec::with_capacity(net.layers.len());
    let mut x = input.to_vec();
    for (l, off) in net.layers.iter().zip(offsets) {
        let p = &net.params[off..off + l.n_params()];
        let z = match l {
            LayerSpec::Dense {
                inputs: n_in,
                outputs,
                ..
            } => dense_forward(p, &x, *n_in, *outputs),
            LayerSpec::Conv2d { conv, .. } => conv_forward(p, &x, conv),
        };
        let act = l.activation();
        let y: Vec<f64> = z.iter().map(|v| act.apply(*v)).collect();
        inputs.push(std::mem::replace(&mut x, y));
        pre.push(z);
    }
    Ok(ForwardTape {
        inputs,
        pre,
        output: x,
    })
}

/// Returns `(parameter gradient, input gradient)` for `d loss / d output = grad_out`.
pub fn mlp_backward(
    net: &MlpParams,
    tape: &ForwardTape,
    grad_out: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if grad_out.len() != net.output_dim() {
        return Err(QocError::DimensionMismatch {
            what: "output gradient",
            expected: net.output_dim(),
            found: grad_out.len(),
        });
    }
    let offsets = net.offsets();
    let mut grads = vec![0.0; net.n_params()];
    let mut g = grad_out.to_vec();
    for li in (0..net.layers.len()).rev() {
        let l = &net.layers[li];
        let act = l.activation();
        let y_out: &[f64] = if li + 1 < net.layers.len() {
            &tape.inputs[li + 1]
        } else {
            &tape.output
        };
        let dz: Vec<f64> = g
            .iter()
            .zip(&tape.pre[li])
            .zip(y_out)
            .map(|((gy, z), y)| gy * act.derivative(*z, *y))
            .collect();
        let off = offsets[li];
        let p = &net.params[off..off + l.n_params()];
        let gp = &mut grads[off..off + l.n_params()];
        g = match l {
            LayerSpec::Dense {
                inputs, outputs, ..
            } => dense_backward(p, &tape.inputs[li], &dz, *inputs, *outputs, gp),
            LayerSpec::Conv2d { conv, .. } => conv_backward(p, &tape.inputs[li], &dz, conv, gp),
        };
    }
    Ok((grads, g))
}

/// Activations for a batch, one column per sample.
#[derive(Clone, Debug)]
pub struct BatchTape {
    pub inputs: Vec<DMatrix<f64>>,
    pub pre: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

/// Batched [`mlp_forward`]: `inputs` has one column per sample.
pub fn mlp_forward_batch(net: &MlpParams, inputs: DMatrix<f64>) -> Result<BatchTape> {
    if inputs.nrows() != net.input_dim() {
        return Err(QocError::DimensionMismatch {
            what: "network input",
            expected: net.input_dim(),
            found: inputs.nrows(),
        });
    }
    let offsets = net.offsets();
    let mut tape_in = Vec::with_capacity(net.layers.len());
    let mut pre = Vec::with_capacity(net.layers.len());
    let mut x = inputs;
    for (l, off) in net.layers.iter().zip(offsets) {
        let p = &net.params[off..off + l.n_params()];
        let z = match l {
            LayerSpec::Dense {
                inputs: n_in,
                outputs,
                ..
            } => {
                let (w, b) = p.split_at(n_in * outputs);
                // Row-major (out, in) storage is the column-major (in, out) transpose.
                let wt = DMatrixView::from_slice(w, *n_in, *outputs);
                let mut z = wt.tr_mul(&x);
                for mut col in z.column_iter_mut() {
                    col.iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
                }
                z
            }
            LayerSpec::Conv2d { conv, .. } => {
                let cols: Vec<Vec<f64>> = x
                    .column_iter()
                    .map(|c| conv_forward(p, c.as_slice(), conv))
                    .collect();
                DMatrix::from_fn(l.outputs(), x.ncols(), |i, j| cols[j][i])
            }
        };
        let act = l.activation();
        let y = z.map(|v| act.apply(v));
        tape_in.push(std::mem::replace(&mut x, y));
        pre.push(z);
    }
    Ok(BatchTape {
        inputs: tape_in,
        pre,
        output: x,
    })
}

/// Batched [`mlp_backward`]; parameter gradients are summed over the batch.
pub fn mlp_backward_batch(
    net: &MlpParams,
    tape: &BatchTape,
    grad_out: &DMatrix<f64>,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if grad_out.shape() != tape.output.shape() {
        return Err(QocError::DimensionMismatch {
            what: "output gradient",
            expected: tape.output.len(),
            found: grad_out.len(),
        });
    }
    let offsets = net.offsets();
    let mut grads = vec![0.0; net.n_params()];
    let mut g = grad_out.clone();
    for li in (0..net.layers.len()).rev() {
        let l = &net.layers[li];
        let act = l.activation();
        let y_out = if li + 1 < net.layers.len() {
            &tape.inputs[li + 1]
        } else {
            &tape.output
        };
        let mut dz = g;
        dz.iter_mut()
            .zip(tape.pre[li].iter())
            .zip(y_out.iter())
            .for_each(|((d, z), y)| *d *= act.derivative(*z, *y));
        let off = offsets[li];
        let p = &net.params[off..off + l.n_params()];
        let gp = &mut grads[off..off + l.n_params()];
        let x = &tape.inputs[li];
        g = match l {
            LayerSpec::Dense {
                inputs: n_in,
                outputs,
                ..
            } => {
                let (w, _) = p.split_at(n_in * outputs);
                let wt = DMatrixView::from_slice(w, *n_in, *outputs);
                let gwt = x * dz.transpose();
                let (gw, gb) = gp.split_at_mut(n_in * outputs);
                gw.iter_mut().zip(gwt.as_slice()).for_each(|(a, b)| *a += b);
                for col in dz.column_iter() {
                    gb.iter_mut().zip(col.iter()).for_each(|(a, b)| *a += b);
                }
                wt * &dz
            }
            LayerSpec::Conv2d { conv, .. } => {
                let cols: Vec<Vec<f64>> = x
                    .column_iter()
                    .zip(dz.column_iter())
                    .map(|(xc, dc)| conv_backward(p, xc.as_slice(), dc.as_slice(), conv, gp))
                    .collect();
                DMatrix::from_fn(l.inputs(), x.ncols(), |i, j| cols[j][i])
            }
        };
    }
    Ok((grads, g))
}

fn dense_forward(p: &[f64], x: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
    let (w, b) = p.split_at(n_in * n_out);
    (0..n_out)
        .map(|o| {
            let row = &w[o * n_in..(o + 1) * n_in];
            b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
        })
        .collect()
}

fn dense_backward(
    p: &[f64],
    x: &[f64],
    dz: &[f64],
    n_in: usize,
    n_out: usize,
    gp: &mut [f64],
) -> Vec<f64> {
    let w = &p[..n_in * n_out];
    let (gw, gb) = gp.split_at_mut(n_in * n_out);
    let mut gx = vec![0.0; n_in];
    for o in 0..n_out {
        let d = dz[o];
        gb[o] += d;
        if d == 0.0 {
            continue;
        }
        let row = &w[o * n_in..(o + 1) * n_in];
        let grow = &mut gw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            grow[i] += d * x[i];
            gx[i] += d * row[i];
        }
    }
    gx
}

/// Input pixel feeding output `(oy, ox)` through kernel tap `(ky, kx)`, if inside the image.
fn tap(c: &Conv2dSpec, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
    let iy = (oy + ky).checked_sub(c.padding)?;
    let ix = (ox + kx).checked_sub(c.padding)?;
    (iy < c.height && ix < c.width).then_some((iy, ix))
}

fn conv_forward(p: &[f64], x: &[f64], c: &Conv2dSpec) -> Vec<f64> {
    let (w, b) = p.split_at(c.weights());
    let (oh, ow, k) = (c.out_height(), c.out_width(), c.kernel);
    let mut out = vec![0.0; c.out_channels * oh * ow];
    for oc in 0..c.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[oc];
                for ic in 0..c.in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            if let Some((iy, ix)) = tap(c, oy, ox, ky, kx) {
                                let wi = ((oc * c.in_channels + ic) * k + ky) * k + kx;
                                acc += w[wi] * x[(ic * c.height + iy) * c.width + ix];
                            }
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

fn conv_backward(p: &[f64], x: &[f64], dz: &[f64], c: &Conv2dSpec, gp: &mut [f64]) -> Vec<f64> {
    let n_w = c.weights();
    let w = &p[..n_w];
    let (gw, gb) = gp.split_at_mut(n_w);
    let (oh, ow, k) = (c.out_height(), c.out_width(), c.kernel);
    let mut gx = vec![0.0; x.len()];
    for oc in 0..c.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let d = dz[(oc * oh + oy) * ow + ox];
                gb[oc] += d;
                for ic in 0..c.in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            if let Some((iy, ix)) = tap(c, oy, ox, ky, kx) {
                                let wi = ((oc * c.in_channels + ic) * k + ky) * k + kx;
                                let xi = (ic * c.height + iy) * c.width + ix;
                                gw[wi] += d * x[xi];
                                gx[xi] += d * w[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub cfg: AdamConfig,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            cfg: AdamConfig::default(),
        }
    }
}

/// One bias-corrected Adam update. Gradients are first rescaled so their
/// global L2 norm is at most `clip` (when given). Returns the pre-clip norm.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    clip: Option<f64>,
) -> Result<f64> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(QocError::DimensionMismatch {
            what: "adam parameters",
            expected: params.len(),
            found: if grads.len() != params.len() {
                grads.len()
            } else {
                state.m.len()
            },
        });
    }
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    let scale = match clip {
        Some(c) if norm > c && norm > 0.0 => c / norm,
        _ => 1.0,
    };
    state.t += 1;
    let AdamConfig { beta1, beta2, eps } = state.cfg;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i] * scale;
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::finite_diff;

    fn two_layer() -> MlpParams {
        mlp_init(
            vec![
                LayerSpec::dense(4, 6, Activation::Tanh),
                LayerSpec::dense(6, 3, Activation::Identity),
            ],
            3,
        )
        .unwrap()
    }

    fn check_backward(net: &MlpParams, x: &[f64]) {
        let w: Vec<f64> = (0..net.output_dim())
            .map(|i| 0.3 + 0.2 * i as f64)
            .collect();
        let loss = |p: &[f64], x: &[f64]| {
            let n = MlpParams {
                layers: net.layers.clone(),
                params: p.to_vec(),
            };
            let y = mlp_forward(&n, x).unwrap().output;
            y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let tape = mlp_forward(net, x).unwrap();
        let (gp, gx) = mlp_backward(net, &tape, &w).unwrap();
        let fd_p = finite_diff(|p| loss(p, x), &net.params, 1e-6).unwrap();
        let fd_x = finite_diff(|xi| loss(&net.params, xi), x, 1e-6).unwrap();
        for (a, b) in gp.iter().zip(&fd_p).chain(gx.iter().zip(&fd_x)) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-2), "{a} vs {b}");
        }
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        check_backward(&two_layer(), &[0.1, -0.4, 0.7, 0.2]);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let conv = Conv2dSpec {
            in_channels: 1,
            out_channels: 2,
            height: 3,
            width: 5,
            kernel: 3,
            padding: 1,
        };
        let net = mlp_init(
            vec![
                LayerSpec::Conv2d {
                    conv,
                    activation: Activation::Relu,
                },
                LayerSpec::dense(30, 2, Activation::Tanh),
            ],
            5,
        )
        .unwrap();
        let x: Vec<f64> = (0..15)
            .map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.4)
            .collect();
        check_backward(&net, &x);
    }

    #[test]
    fn shape_errors() {
        assert!(MlpParams::new(vec![
            LayerSpec::dense(2, 3, Activation::Tanh),
            LayerSpec::dense(4, 1, Activation::Tanh),
        ])
        .is_err());
        let net = two_layer();
        assert!(mlp_forward(&net, &[1.0]).is_err());
        let mut p = vec![0.0; 3];
        assert!(adam_step(&mut p, &[0.0; 2], &mut AdamState::new(3), 0.1, None).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_zero_net_is_zero() {
        let net = two_layer();
        let a = mlp_forward(&net, &[0.5; 4]).unwrap().output;
        let b = mlp_forward(&net, &[0.5; 4]).unwrap().output;
        assert_eq!(a, b);
        let zero = MlpParams::new(net.layers.clone()).unwrap();
        assert!(mlp_forward(&zero, &[0.5; 4])
            .unwrap()
            .output
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn adam_edge_cases() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, 0.1, None).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        adam_step(&mut p, &[3.0, -1.0], &mut st, 0.0, Some(1.0)).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![0.0];
        let mut st = AdamState::new(1);
        for _ in 0..200 {
            let g = 2.0 * (x[0] - 3.0);
            adam_step(&mut x, &[g], &mut st, 0.1, None).unwrap();
        }
        assert!((x[0] - 3.0).abs() <= 1e-3, "{}", x[0]);
    }

    #[test]
    fn batch_matches_single_sample() {
        let conv = Conv2dSpec {
            in_channels: 1,
            out_channels: 2,
            height: 2,
            width: 3,
            kernel: 3,
            padding: 1,
        };
        let net = mlp_init(
            vec![
                LayerSpec::Conv2d {
                    conv,
                    activation: Activation::Relu,
                },
                LayerSpec::dense(12, 5, Activation::Tanh),
                LayerSpec::dense(5, 2, Activation::Identity),
            ],
            9,
        )
        .unwrap();
        let xs: Vec<Vec<f64>> = (0..4)
            .map(|k| {
                (0..6)
                    .map(|i| ((i * 5 + k * 3) % 7) as f64 / 7.0 - 0.5)
                    .collect()
            })
            .collect();
        let gos: Vec<Vec<f64>> = (0..4).map(|k| vec![0.2 * k as f64 - 0.3, 0.7]).collect();
        let mut sum = vec![0.0; net.n_params()];
        for (x, go) in xs.iter().zip(&gos) {
            let t = mlp_forward(&net, x).unwrap();
            let (gp, _) = mlp_backward(&net, &t, go).unwrap();
            sum.iter_mut().zip(&gp).for_each(|(a, b)| *a += b);
        }
        let xb = DMatrix::from_fn(6, 4, |i, j| xs[j][i]);
        let gb = DMatrix::from_fn(2, 4, |i, j| gos[j][i]);
        let tape = mlp_forward_batch(&net, xb).unwrap();
        for (j, x) in xs.iter().enumerate() {
            let single = mlp_forward(&net, x).unwrap().output;
            for i in 0..2 {
                assert!((tape.output[(i, j)] - single[i]).abs() < 1e-14);
            }
        }
        let (gp, _) = mlp_backward_batch(&net, &tape, &gb).unwrap();
        for (a, b) in gp.iter().zip(&sum) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
