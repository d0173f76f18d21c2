//! One-hidden-layer dense network with exact backpropagation and an Adam-style
//! optimizer. This is the shared function-approximation substrate for the
//! behavioral critic, the value head, the dual potentials and the desk-scale
//! IQL agent. All math is f64.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Mat};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

/// `out = W2 * relu(W1 * x + b1) + b2`, weights row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    /// hidden_dim x input_dim
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// output_dim x hidden_dim
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub activation: Activation,
}

/// One slot per `Network` parameter, same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            w1: vec![0.0; net.w1.len()],
            b1: vec![0.0; net.b1.len()],
            w2: vec![0.0; net.w2.len()],
            b2: vec![0.0; net.b2.len()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slots().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, factor: f64) {
        for slot in self.slots_mut() {
            for v in slot.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) {
        axpy(&mut self.w1, factor, &other.w1);
        axpy(&mut self.b1, factor, &other.b1);
        axpy(&mut self.w2, factor, &other.w2);
        axpy(&mut self.b2, factor, &other.b2);
    }

    fn slots(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn slots_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Adam state: first/second moments per parameter plus hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub first_moment: Gradients,
    pub second_moment: Gradients,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
}

impl OptimState {
    pub fn new(net: &Network, learning_rate: f64) -> Self {
        OptimState {
            first_moment: Gradients::zeros_like(net),
            second_moment: Gradients::zeros_like(net),
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
        }
    }
}

pub const DEFAULT_LEARNING_RATE: f64 = 3e-4;

/// Hidden and preactivation values cached by a forward pass, reused by backward.
pub struct ForwardCache {
    pub hidden_pre: Mat,
    pub hidden_post: Mat,
    pub output: Mat,
}

impl Network {
    /// Fan-in-scaled uniform init (`|w| <= sqrt(6/fan_in)`), zero biases,
    /// deterministic in `seed`.
    pub fn new(input_dim: usize, hidden_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || output_dim == 0 {
            return Err(Error::invalid_argument(format!(
                "network dims must be >= 1, got {}x{}x{}",
                input_dim, hidden_dim, output_dim
            )));
        }
        let mut rng = rng::stream(seed, "network-init");
        let limit1 = (6.0 / input_dim as f64).sqrt();
        let limit2 = (6.0 / hidden_dim as f64).sqrt();
        let w1 = (0..hidden_dim * input_dim)
            .map(|_| rng.gen_range(-limit1..limit1))
            .collect();
        let w2 = (0..output_dim * hidden_dim)
            .map(|_| rng.gen_range(-limit2..limit2))
            .collect();
        Ok(Network {
            input_dim,
            hidden_dim,
            output_dim,
            w1,
            b1: vec![0.0; hidden_dim],
            w2,
            b2: vec![0.0; output_dim],
            activation: Activation::Relu,
        })
    }

    pub fn check_input(&self, batch: &Mat) -> Result<()> {
        if batch.cols != self.input_dim {
            return Err(Error::invalid_argument(format!(
                "input has {} columns, network expects {}",
                batch.cols, self.input_dim
            )));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Mat) -> Result<Mat> {
        Ok(self.forward_cached(batch)?.output)
    }

    pub fn forward_cached(&self, batch: &Mat) -> Result<ForwardCache> {
        self.check_input(batch)?;
        let b = batch.rows;
        let h = self.hidden_dim;
        let o = self.output_dim;
        let mut hidden_pre = Mat::zeros(b, h);
        let mut hidden_post = Mat::zeros(b, h);
        let mut output = Mat::zeros(b, o);
        for i in 0..b {
            let x = batch.row(i);
            let pre = hidden_pre.row_mut(i);
            for j in 0..h {
                pre[j] = dot(&self.w1[j * self.input_dim..(j + 1) * self.input_dim], x)
                    + self.b1[j];
            }
            let post = hidden_post.row_mut(i);
            for j in 0..h {
                post[j] = pre[j].max(0.0);
            }
            let out = output.row_mut(i);
            for k in 0..o {
                out[k] = dot(&self.w2[k * h..(k + 1) * h], post) + self.b2[k];
            }
        }
        Ok(ForwardCache {
            hidden_pre,
            hidden_post,
            output,
        })
    }

    /// Exact gradients of `sum(upstream ⊙ forward(batch))` w.r.t. parameters.
    pub fn backward(&self, batch: &Mat, upstream: &Mat) -> Result<Gradients> {
        let cache = self.forward_cached(batch)?;
        self.backward_from_cache(batch, upstream, &cache).map(|(g, _)| g)
    }

    /// Like [`Network::backward`], also returning the gradient w.r.t. inputs.
    pub fn backward_with_input(&self, batch: &Mat, upstream: &Mat) -> Result<(Gradients, Mat)> {
        let cache = self.forward_cached(batch)?;
        self.backward_from_cache(batch, upstream, &cache)
    }

    pub fn backward_from_cache(
        &self,
        batch: &Mat,
        upstream: &Mat,
        cache: &ForwardCache,
    ) -> Result<(Gradients, Mat)> {
        self.check_input(batch)?;
        if upstream.rows != batch.rows || upstream.cols != self.output_dim {
            return Err(Error::invalid_argument(format!(
                "upstream gradient is {}x{}, expected {}x{}",
                upstream.rows, upstream.cols, batch.rows, self.output_dim
            )));
        }
        let b = batch.rows;
        let h = self.hidden_dim;
        let o = self.output_dim;
        let d = self.input_dim;
        let mut grads = Gradients::zeros_like(self);
        let mut input_grad = Mat::zeros(b, d);
        let mut dz = vec![0.0; h];
        for i in 0..b {
            let u = upstream.row(i);
            let post = cache.hidden_post.row(i);
            let pre = cache.hidden_pre.row(i);
            // layer 2
            for k in 0..o {
                let uk = u[k];
                if uk != 0.0 {
                    axpy(&mut grads.w2[k * h..(k + 1) * h], uk, post);
                }
                grads.b2[k] += uk;
            }
            // hidden delta with relu mask
            for j in 0..h {
                let mut s = 0.0;
                for k in 0..o {
                    s += u[k] * self.w2[k * h + j];
                }
                dz[j] = if pre[j] > 0.0 { s } else { 0.0 };
            }
            // layer 1
            let x = batch.row(i);
            for j in 0..h {
                let dj = dz[j];
                if dj != 0.0 {
                    axpy(&mut grads.w1[j * d..(j + 1) * d], dj, x);
                }
                grads.b1[j] += dj;
            }
            let gin = input_grad.row_mut(i);
            for j in 0..h {
                let dj = dz[j];
                if dj != 0.0 {
                    axpy(gin, dj, &self.w1[j * d..(j + 1) * d]);
                }
            }
        }
        Ok((grads, input_grad))
    }

    pub fn params_finite(&self) -> bool {
        self.w1.iter().all(|v| v.is_finite())
            && self.b1.iter().all(|v| v.is_finite())
            && self.w2.iter().all(|v| v.is_finite())
            && self.b2.iter().all(|v| v.is_finite())
    }

    /// In-place Polyak update: `self = (1 - tau) * self + tau * source`.
    pub fn polyak_from(&mut self, source: &Network, tau: f64) {
        for (t, s) in self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
            .zip(
                source
                    .w1
                    .iter()
                    .chain(source.b1.iter())
                    .chain(source.w2.iter())
                    .chain(source.b2.iter()),
            )
        {
            *t = (1.0 - tau) * *t + tau * *s;
        }
    }
}

/// Adam update with bias correction; increments `step_count`.
pub fn optim_step(net: &mut Network, grads: &Gradients, state: &mut OptimState) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Numeric {
            step: state.step_count as usize,
            msg: "non-finite gradients passed to optim_step".to_string(),
        });
    }
    state.step_count += 1;
    let t = state.step_count as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let lr = state.learning_rate;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps_opt);

    let params: [&mut Vec<f64>; 4] = [&mut net.w1, &mut net.b1, &mut net.w2, &mut net.b2];
    let gs: [&[f64]; 4] = [&grads.w1, &grads.b1, &grads.w2, &grads.b2];
    let ms = state.first_moment.slots_mut();
    let vs = state.second_moment.slots_mut();
    for (((p, g), m), v) in params.into_iter().zip(gs).zip(ms).zip(vs) {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

const NET_MAGIC: &[u8; 4] = b"NET1";

/// Serializes to the flat `NET1` blob: magic, three u32 dims (LE), activation
/// tag byte, then all parameters as little-endian f64 in w1, b1, w2, b2 order.
pub fn serialize_network(net: &Network) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + 8 * (net.w1.len() + net.b1.len() + net.w2.len() + net.b2.len()));
    out.extend_from_slice(NET_MAGIC);
    out.extend_from_slice(&(net.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(net.hidden_dim as u32).to_le_bytes());
    out.extend_from_slice(&(net.output_dim as u32).to_le_bytes());
    out.push(match net.activation {
        Activation::Relu => 0u8,
    });
    for v in net
        .w1
        .iter()
        .chain(net.b1.iter())
        .chain(net.w2.iter())
        .chain(net.b2.iter())
    {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn deserialize_network(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < 17 {
        return Err(Error::format(bytes.len() as u64, "truncated NET1 header"));
    }
    if &bytes[0..4] != NET_MAGIC {
        return Err(Error::format(0, "bad magic, expected NET1"));
    }
    let input_dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let hidden_dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let output_dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let activation = match bytes[16] {
        0 => Activation::Relu,
        tag => {
            return Err(Error::format(16, format!("unknown activation tag {tag}")));
        }
    };
    let n_params = hidden_dim * input_dim + hidden_dim + output_dim * hidden_dim + output_dim;
    let expected = 17 + 8 * n_params;
    if bytes.len() != expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!("NET1 blob has {} bytes, expected {}", bytes.len(), expected),
        ));
    }
    let mut vals = bytes[17..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |n: usize| -> Vec<f64> { vals.by_ref().take(n).collect() };
    Ok(Network {
        input_dim,
        hidden_dim,
        output_dim,
        w1: take(hidden_dim * input_dim),
        b1: take(hidden_dim),
        w2: take(output_dim * hidden_dim),
        b2: take(output_dim),
        activation,
    })
}
