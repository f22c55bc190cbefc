//! Small fixed-topology MLPs with hand-written reverse-mode gradients.
//!
//! All three trainable networks (noise predictor, consistency body, policy)
//! are instances of the same dense stack. The input is the concatenation
//! `[x, time_embedding(t / T), cond]`; hidden layers apply the activation, the
//! last layer is linear. Parameters live in one flat vector, layer by layer,
//! each layer stored as its row-major weight matrix followed by its bias.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Silu => "silu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "silu" => Some(Activation::Silu),
            _ => None,
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSpec {
    /// `[input, hidden..., output]`.
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub time_embed_dim: usize,
    pub cond_dim: usize,
}

impl NetSpec {
    pub fn new(
        layer_widths: Vec<usize>,
        activation: Activation,
        time_embed_dim: usize,
        cond_dim: usize,
    ) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::Config(format!(
                "a network needs at least 2 layer widths, got {}",
                layer_widths.len()
            )));
        }
        if layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!(
                "layer widths must be >= 1: {layer_widths:?}"
            )));
        }
        if layer_widths[0] <= time_embed_dim + cond_dim {
            return Err(Error::Config(format!(
                "input width {} leaves no room for data after {} time features and {} conditioning features",
                layer_widths[0], time_embed_dim, cond_dim
            )));
        }
        Ok(Self {
            layer_widths,
            activation,
            time_embed_dim,
            cond_dim,
        })
    }

    /// Convenience constructor: `[data + time + cond, hidden..., out]`.
    pub fn mlp(
        data_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        activation: Activation,
        time_embed_dim: usize,
        cond_dim: usize,
    ) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(data_dim + time_embed_dim + cond_dim);
        widths.extend_from_slice(hidden);
        widths.push(out_dim);
        Self::new(widths, activation, time_embed_dim, cond_dim)
    }

    pub fn data_dim(&self) -> usize {
        self.layer_widths[0] - self.time_embed_dim - self.cond_dim
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// `(weight offset, bias offset, fan_in, fan_out)` per layer.
    fn layout(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let mut off = 0;
        self.layer_widths.windows(2).map(move |w| {
            let (n_in, n_out) = (w[0], w[1]);
            let w_off = off;
            let b_off = off + n_in * n_out;
            off = b_off + n_out;
            (w_off, b_off, n_in, n_out)
        })
    }
}

/// Sinusoidal features of `s = t / T`; the lowest frequency is a quarter
/// period over `[0, 1]` so the embedding is injective on the unit interval.
pub fn time_embedding(s: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let w = std::f64::consts::FRAC_PI_2 * (1u64 << k) as f64;
        out.push((w * s).sin());
        out.push((w * s).cos());
    }
    if dim % 2 == 1 {
        out.push(s);
    }
    out
}

/// One dense layer in unflattened form.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `weights[o][i]`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// Intermediate values of one forward pass, consumed by [`NetParams::backward`].
#[derive(Debug, Clone)]
pub struct ActivationCache {
    version: u64,
    n_params: usize,
    /// Input to each layer (layer 0's entry is the assembled network input).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    spec: NetSpec,
    flat: Vec<f64>,
    ema_flat: Vec<f64>,
    ema_rate: f64,
    version: u64,
}

impl NetParams {
    pub fn zeros(spec: NetSpec, ema_rate: f64) -> Result<Self> {
        let n = spec.n_params();
        Self::from_flat(spec, vec![0.0; n], vec![0.0; n], ema_rate)
    }

    /// Gaussian init with variance `1 / fan_in`, zero biases. The final layer is
    /// scaled by `out_scale`.
    pub fn init(spec: NetSpec, ema_rate: f64, out_scale: f64, rng: &mut Rng) -> Result<Self> {
        let mut flat = vec![0.0; spec.n_params()];
        let n_layers = spec.n_layers();
        for (l, (w_off, _, n_in, n_out)) in spec.layout().enumerate() {
            let mut std = 1.0 / (n_in as f64).sqrt();
            if l + 1 == n_layers {
                std *= out_scale;
            }
            for w in &mut flat[w_off..w_off + n_in * n_out] {
                *w = std * rng::normal(rng);
            }
        }
        let ema = flat.clone();
        Self::from_flat(spec, flat, ema, ema_rate)
    }

    pub fn from_flat(spec: NetSpec, flat: Vec<f64>, ema_flat: Vec<f64>, ema_rate: f64) -> Result<Self> {
        let n = spec.n_params();
        check_len("parameter vector", n, &flat)?;
        check_len("EMA parameter vector", n, &ema_flat)?;
        if !(0.0..=1.0).contains(&ema_rate) {
            return Err(Error::Domain {
                what: "ema_rate",
                value: ema_rate,
                lo: 0.0,
                hi: 1.0,
            });
        }
        Ok(Self {
            spec,
            flat,
            ema_flat,
            ema_rate,
            version: 0,
        })
    }

    pub fn from_layers(spec: NetSpec, layers: &[DenseLayer], ema_rate: f64) -> Result<Self> {
        if layers.len() != spec.n_layers() {
            return Err(Error::Shape {
                context: "layer count",
                expected: spec.n_layers(),
                got: layers.len(),
            });
        }
        let mut flat = Vec::with_capacity(spec.n_params());
        for (layer, (_, _, n_in, n_out)) in layers.iter().zip(spec.layout()) {
            if layer.weights.len() != n_out || layer.weights.iter().any(|r| r.len() != n_in) {
                return Err(Error::Shape {
                    context: "layer weights",
                    expected: n_in * n_out,
                    got: layer.weights.iter().map(Vec::len).sum(),
                });
            }
            check_len("layer bias", n_out, &layer.bias)?;
            for row in &layer.weights {
                flat.extend_from_slice(row);
            }
            flat.extend_from_slice(&layer.bias);
        }
        let ema = flat.clone();
        Self::from_flat(spec, flat, ema, ema_rate)
    }

    pub fn unflatten(&self) -> Vec<DenseLayer> {
        self.spec
            .layout()
            .map(|(w_off, b_off, n_in, n_out)| DenseLayer {
                weights: (0..n_out)
                    .map(|o| self.flat[w_off + o * n_in..w_off + (o + 1) * n_in].to_vec())
                    .collect(),
                bias: self.flat[b_off..b_off + n_out].to_vec(),
            })
            .collect()
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn ema_flat(&self) -> &[f64] {
        &self.ema_flat
    }

    pub fn ema_rate(&self) -> f64 {
        self.ema_rate
    }

    /// Mutable live parameters. Invalidates outstanding activation caches.
    pub fn flat_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.flat
    }

    pub fn ema_flat_mut(&mut self) -> &mut [f64] {
        &mut self.ema_flat
    }

    /// Resets the shadow copy to the live parameters.
    pub fn sync_ema(&mut self) {
        self.ema_flat.copy_from_slice(&self.flat);
    }

    /// `ema <- mu * ema + (1 - mu) * flat`. Live parameters are untouched.
    pub fn ema_update(&mut self) {
        let mu = self.ema_rate;
        for (e, &p) in self.ema_flat.iter_mut().zip(&self.flat) {
            *e = mu * *e + (1.0 - mu) * p;
        }
    }

    /// Order-sensitive fingerprint of the live parameters.
    pub fn fingerprint(&self) -> u64 {
        fingerprint(&self.flat)
    }

    fn assemble(&self, x: &[f64], t_frac: f64, cond: Option<&[f64]>) -> Result<Vec<f64>> {
        let spec = &self.spec;
        check_len("network data input", spec.data_dim(), x)?;
        let mut input = Vec::with_capacity(spec.input_dim());
        input.extend_from_slice(x);
        input.extend(time_embedding(t_frac, spec.time_embed_dim));
        match (spec.cond_dim, cond) {
            (0, _) => {}
            (n, Some(c)) => {
                check_len("network conditioning input", n, c)?;
                input.extend_from_slice(c);
            }
            (n, None) => {
                return Err(Error::Shape {
                    context: "network conditioning input",
                    expected: n,
                    got: 0,
                })
            }
        }
        Ok(input)
    }

    /// Forward pass with the live parameters.
    pub fn forward(&self, x: &[f64], t_frac: f64, cond: Option<&[f64]>) -> Result<Vec<f64>> {
        let input = self.assemble(x, t_frac, cond)?;
        Ok(eval(&self.spec, &self.flat, input))
    }

    /// Forward pass with the EMA shadow parameters.
    pub fn forward_ema(&self, x: &[f64], t_frac: f64, cond: Option<&[f64]>) -> Result<Vec<f64>> {
        let input = self.assemble(x, t_frac, cond)?;
        Ok(eval(&self.spec, &self.ema_flat, input))
    }

    /// Forward pass that records what [`NetParams::backward`] needs.
    pub fn forward_cached(
        &self,
        x: &[f64],
        t_frac: f64,
        cond: Option<&[f64]>,
    ) -> Result<(Vec<f64>, ActivationCache)> {
        let input = self.assemble(x, t_frac, cond)?;
        let spec = &self.spec;
        let n_layers = spec.n_layers();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers - 1);
        let mut h = input;
        for (l, (w_off, b_off, n_in, n_out)) in spec.layout().enumerate() {
            let z = affine(&self.flat[w_off..b_off], &self.flat[b_off..b_off + n_out], &h, n_in);
            inputs.push(h);
            if l + 1 == n_layers {
                let cache = ActivationCache {
                    version: self.version,
                    n_params: self.flat.len(),
                    inputs,
                    pre,
                };
                return Ok((z, cache));
            }
            h = z.iter().map(|&v| spec.activation.apply(v)).collect();
            pre.push(z);
        }
        unreachable!("network has at least one layer")
    }

    /// Gradient of `upstream . output` with respect to the live parameters.
    pub fn backward(&self, cache: &ActivationCache, upstream: &[f64]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.flat.len()];
        self.backward_into(cache, upstream, &mut grad)?;
        Ok(grad)
    }

    /// Like [`NetParams::backward`] but accumulates into `grad`.
    pub fn backward_into(&self, cache: &ActivationCache, upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        let spec = &self.spec;
        if cache.version != self.version
            || cache.n_params != self.flat.len()
            || cache.inputs.len() != spec.n_layers()
        {
            return Err(Error::Contract(
                "activation cache does not belong to the current parameters".into(),
            ));
        }
        check_len("upstream gradient", spec.output_dim(), upstream)?;
        check_len("gradient buffer", self.flat.len(), grad)?;

        let layout: Vec<_> = spec.layout().collect();
        let mut delta = upstream.to_vec();
        for l in (0..layout.len()).rev() {
            let (w_off, b_off, n_in, n_out) = layout[l];
            let h = &cache.inputs[l];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[w_off + o * n_in..w_off + (o + 1) * n_in];
                for (g, &hi) in row.iter_mut().zip(h) {
                    *g += d * hi;
                }
                grad[b_off + o] += d;
            }
            if l == 0 {
                break;
            }
            let w = &self.flat[w_off..b_off];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (p, &wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *p += d * wi;
                }
            }
            for (p, &z) in prev.iter_mut().zip(&cache.pre[l - 1]) {
                *p *= spec.activation.derivative(z);
            }
            delta = prev;
        }
        Ok(())
    }
}

fn affine(w: &[f64], b: &[f64], h: &[f64], n_in: usize) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(o, &bo)| {
            let row = &w[o * n_in..(o + 1) * n_in];
            bo + row.iter().zip(h).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

fn eval(spec: &NetSpec, weights: &[f64], input: Vec<f64>) -> Vec<f64> {
    let n_layers = spec.n_layers();
    let mut h = input;
    for (l, (w_off, b_off, n_in, n_out)) in spec.layout().enumerate() {
        let z = affine(&weights[w_off..b_off], &weights[b_off..b_off + n_out], &h, n_in);
        h = if l + 1 == n_layers {
            z
        } else {
            z.into_iter().map(|v| spec.activation.apply(v)).collect()
        };
    }
    h
}

/// FNV-1a over the bit patterns of `v`.
pub fn fingerprint(v: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for x in v {
        for byte in x.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    AdamLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdamLike,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            ..Default::default()
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamLike,
            lr,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    step_count: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, n_params: usize) -> Result<Self> {
        if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", cfg.lr)));
        }
        let (m, v) = match cfg.kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::AdamLike => (vec![0.0; n_params], vec![0.0; n_params]),
        };
        Ok(Self {
            cfg,
            step_count: 0,
            m,
            v,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn step(&mut self, params: &mut NetParams, grad: &[f64]) -> Result<()> {
        check_len("optimizer gradient", params.flat.len(), grad)?;
        check_finite("optimizer gradient", grad)?;
        self.step_count += 1;
        let lr = self.cfg.lr;
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.flat_mut().iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::AdamLike => {
                check_len("optimizer moments", grad.len(), &self.m)?;
                let OptimizerConfig { beta1, beta2, eps, .. } = self.cfg;
                let t = self.step_count as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                let flat = params.flat_mut();
                for i in 0..grad.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    flat[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn small_spec(act: Activation) -> NetSpec {
        NetSpec::mlp(3, &[5, 4], 2, act, 2, 1).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(NetSpec::new(vec![3], Activation::Tanh, 0, 0).is_err());
        assert!(NetSpec::new(vec![3, 0, 2], Activation::Tanh, 0, 0).is_err());
        assert!(NetSpec::new(vec![3, 2], Activation::Tanh, 2, 1).is_err());
        let s = small_spec(Activation::Tanh);
        assert_eq!(s.input_dim(), 6);
        assert_eq!(s.data_dim(), 3);
        assert_eq!(s.n_params(), 6 * 5 + 5 + 5 * 4 + 4 + 4 * 2 + 2);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let p = NetParams::zeros(small_spec(Activation::Silu), 0.9).unwrap();
        let out = p.forward(&[1.0, -2.0, 0.5], 0.3, Some(&[0.7])).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let p = NetParams::init(small_spec(Activation::Tanh), 0.9, 1.0, &mut stream(1, 0, 0)).unwrap();
        let a = p.forward(&[0.1, 0.2, 0.3], 0.5, Some(&[1.0])).unwrap();
        let b = p.forward(&[0.1, 0.2, 0.3], 0.5, Some(&[1.0])).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn hand_evaluated_one_hidden_layer() {
        // 2 -> 2 (tanh) -> 1, no time or conditioning features.
        let spec = NetSpec::new(vec![2, 2, 1], Activation::Tanh, 0, 0).unwrap();
        let layers = vec![
            DenseLayer {
                weights: vec![vec![1.0, 2.0], vec![-1.0, 0.5]],
                bias: vec![0.0, 0.5],
            },
            DenseLayer {
                weights: vec![vec![3.0, -2.0]],
                bias: vec![0.25],
            },
        ];
        let p = NetParams::from_layers(spec, &layers, 0.9).unwrap();
        // h = tanh([0.5 + 2*(-0.25), -0.5 - 0.125 + 0.5]) = tanh([0, -0.125])
        let expected = 3.0 * 0.0f64.tanh() - 2.0 * (-0.125f64).tanh() + 0.25;
        let out = p.forward(&[0.5, -0.25], 0.0, None).unwrap();
        assert!((out[0] - expected).abs() < 1e-15);
        assert!((out[0] - 0.498_706_003_543_192_4).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let p = NetParams::zeros(small_spec(Activation::Tanh), 0.9).unwrap();
        assert!(matches!(p.forward(&[1.0], 0.1, Some(&[0.0])), Err(Error::Shape { .. })));
        assert!(matches!(p.forward(&[1.0, 2.0, 3.0], 0.1, None), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let p = NetParams::init(small_spec(Activation::Silu), 0.9, 1.0, &mut stream(2, 0, 0)).unwrap();
        let (_, cache) = p.forward_cached(&[0.3, 0.1, -0.2], 0.4, Some(&[0.9])).unwrap();
        let g = p.backward(&cache, &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_net_gradient_is_outer_product() {
        let spec = NetSpec::new(vec![3, 2], Activation::Tanh, 0, 0).unwrap();
        let p = NetParams::init(spec, 0.9, 1.0, &mut stream(3, 0, 0)).unwrap();
        let x = [0.5, -1.0, 2.0];
        let up = [0.3, -0.7];
        let (_, cache) = p.forward_cached(&x, 0.0, None).unwrap();
        let g = p.backward(&cache, &up).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(g[o * 3 + i], up[o] * x[i]);
            }
            assert_eq!(g[6 + o], up[o]);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut p = NetParams::init(small_spec(Activation::Tanh), 0.9, 1.0, &mut stream(4, 0, 0)).unwrap();
        let (_, cache) = p.forward_cached(&[0.3, 0.1, -0.2], 0.4, Some(&[0.9])).unwrap();
        p.flat_mut()[0] += 1.0;
        assert!(matches!(p.backward(&cache, &[1.0, 1.0]), Err(Error::Contract(_))));
        let other = NetParams::zeros(NetSpec::new(vec![3, 2], Activation::Tanh, 0, 0).unwrap(), 0.9).unwrap();
        let (_, c2) = other.forward_cached(&[0.0; 3], 0.0, None).unwrap();
        assert!(p.backward(&c2, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn ema_update_formula() {
        let spec = NetSpec::new(vec![1, 1], Activation::Tanh, 0, 0).unwrap();
        let mut p = NetParams::from_flat(spec.clone(), vec![0.0, 2.0], vec![1.0, 1.0], 0.95).unwrap();
        p.ema_update();
        assert!((p.ema_flat()[0] - 0.95).abs() < 1e-15);
        assert!((p.ema_flat()[1] - 1.05).abs() < 1e-15);
        assert_eq!(p.flat(), &[0.0, 2.0]);

        let mut fixed = NetParams::from_flat(spec.clone(), vec![0.0, 2.0], vec![1.0, 1.0], 1.0).unwrap();
        fixed.ema_update();
        assert_eq!(fixed.ema_flat(), &[1.0, 1.0]);

        let mut copy = NetParams::from_flat(spec, vec![0.0, 2.0], vec![1.0, 1.0], 0.0).unwrap();
        copy.ema_update();
        assert_eq!(copy.ema_flat(), &[0.0, 2.0]);
    }

    #[test]
    fn optimizer_examples() {
        let spec = NetSpec::new(vec![1, 1], Activation::Tanh, 0, 0).unwrap();
        let mut p = NetParams::from_flat(spec.clone(), vec![1.0, 0.0], vec![0.0, 0.0], 0.9).unwrap();
        let mut sgd = Optimizer::new(OptimizerConfig::sgd(0.1), 2).unwrap();
        sgd.step(&mut p, &[2.0, 0.0]).unwrap();
        assert!((p.flat()[0] - 0.8).abs() < 1e-15);

        let before = p.flat().to_vec();
        let mut adam = Optimizer::new(OptimizerConfig::adam(0.01), 2).unwrap();
        adam.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p.flat(), &before[..]);

        adam.step(&mut p, &[0.0, 0.0]).unwrap();
        let mut fresh = Optimizer::new(OptimizerConfig::adam(0.01), 2).unwrap();
        let mut q = NetParams::from_flat(spec, vec![0.0, 0.0], vec![0.0, 0.0], 0.9).unwrap();
        fresh.step(&mut q, &[3.0, -0.02]).unwrap();
        assert!((q.flat()[0] + 0.01).abs() < 1e-9);
        assert!((q.flat()[1] - 0.01).abs() < 1e-6);

        let err = fresh.step(&mut q, &[1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }), "{err}");
    }

    #[test]
    fn ema_does_not_perturb_live_training() {
        let spec = small_spec(Activation::Tanh);
        let base = NetParams::init(spec, 0.9, 1.0, &mut stream(5, 0, 0)).unwrap();
        let run = |with_ema: bool| {
            let mut p = base.clone();
            let mut opt = Optimizer::new(OptimizerConfig::adam(0.05), p.flat().len()).unwrap();
            for i in 0..20 {
                let x = [0.1 * i as f64, -0.2, 0.3];
                let (out, cache) = p.forward_cached(&x, 0.5, Some(&[1.0])).unwrap();
                let g = p.backward(&cache, &out).unwrap();
                opt.step(&mut p, &g).unwrap();
                if with_ema {
                    p.ema_update();
                }
            }
            p.flat().to_vec()
        };
        assert_eq!(run(true), run(false));
    }

    proptest! {
        #[test]
        fn flatten_round_trip(seed in any::<u64>()) {
            let p = NetParams::init(small_spec(Activation::Silu), 0.9, 1.0, &mut stream(seed, 0, 0)).unwrap();
            let q = NetParams::from_layers(p.spec().clone(), &p.unflatten(), 0.9).unwrap();
            prop_assert_eq!(p.flat(), q.flat());
        }

        #[test]
        fn time_embedding_is_bounded(s in 0.0f64..=1.0) {
            let e = time_embedding(s, 8);
            prop_assert_eq!(e.len(), 8);
            prop_assert!(e.iter().all(|v| v.abs() <= 1.0));
        }
    }
}
