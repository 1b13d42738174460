//! Parameterized building blocks. Each layer only stores [`ParamId`]s; values live
//! in a [`ParamStore`] so a forward pass can borrow the store immutably.

use rand::Rng;

use super::graph::{AttnGeom, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Kaiming-uniform bound `gain · √(3 / fan_in)`.
pub fn kaiming_bound(fan_in: usize, gain: f64) -> f64 {
    gain * (3.0 / fan_in as f64).sqrt()
}

/// Gain for a leaky ReLU with negative slope `a`.
pub fn leaky_relu_gain(a: f64) -> f64 {
    (2.0 / (1.0 + a * a)).sqrt()
}

pub fn uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..=bound)))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weight `[d_out, d_in]` drawn uniformly within `bound`, zero bias.
    pub fn with_bound<T: Real>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, bound: f64, rng: &mut impl Rng) -> Self {
        let weight = store.add(&format!("{name}.weight"), uniform(&[d_out, d_in], bound, rng));
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Self { weight, bias, d_in, d_out }
    }

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, gain: f64, rng: &mut impl Rng) -> Self {
        Self::with_bound(store, name, d_in, d_out, kaiming_bound(d_in, gain), rng)
    }

    /// `x: [n, d_in] -> [n, d_out]`
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul_nt(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = kaiming_bound(c_in * kernel * kernel, gain);
        let weight = store.add(&format!("{name}.weight"), uniform(&[c_out, c_in, kernel, kernel], bound, rng));
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Self { weight, bias, stride, pad }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full(&[channels], T::one())),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Uses batch statistics in training mode (queuing a running-stat update on the
    /// graph) and the running statistics otherwise.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        if g.is_training() {
            let (y, mean, var) = g.batch_norm_train(x, gamma, beta, self.eps)?;
            let m = T::of(self.momentum);
            let blend = |old: &Tensor<T>, new: &[T]| {
                let data = old.data().iter().zip(new).map(|(&o, &n)| (T::one() - m) * o + m * n).collect();
                Tensor::new(old.shape(), data).expect("same shape")
            };
            let rm = blend(store.value(self.running_mean), &mean);
            let rv = blend(store.value(self.running_var), &var);
            g.defer_buffer_update(self.running_mean, rm);
            g.defer_buffer_update(self.running_var, rv);
            Ok(y)
        } else {
            let mean = store.value(self.running_mean).data().to_vec();
            let var = store.value(self.running_var).data().to_vec();
            g.batch_norm_eval(x, gamma, beta, &mean, &var, self.eps)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[d], T::one())),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[d])),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Multi-head attention over batched sequences stacked along rows.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    /// Projections are initialized uniformly in `±1/√d`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::InvalidConfig(format!("model width {d} is not divisible by {heads} heads")));
        }
        let bound = 1.0 / (d as f64).sqrt();
        Ok(Self {
            q: Linear::with_bound(store, &format!("{name}.q"), d, d, bound, rng),
            k: Linear::with_bound(store, &format!("{name}.k"), d, d, bound, rng),
            v: Linear::with_bound(store, &format!("{name}.v"), d, d, bound, rng),
            out: Linear::with_bound(store, &format!("{name}.out"), d, d, bound, rng),
            heads,
        })
    }

    /// `query: [batch·seq_q, d]`, `memory: [batch·seq_k, d]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        query: Var,
        memory: Var,
        batch: usize,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let d = self.q.d_out;
        let (rq, rk) = (g.shape(query)[0], g.shape(memory)[0]);
        if batch == 0 || rq % batch != 0 || rk % batch != 0 {
            return Err(Error::ShapeMismatch { op: "multi_head_attention", lhs: vec![rq, rk], rhs: vec![batch] });
        }
        let geom = AttnGeom { batch, seq_q: rq / batch, seq_k: rk / batch, heads: self.heads, d_head: d / self.heads };
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, memory)?;
        let v = self.v.forward(g, store, memory)?;
        let a = g.attention(q, k, v, geom, mask)?;
        self.out.forward(g, store, a)
    }
}

/// Causal mask: `-inf` above the diagonal, zero elsewhere.
pub fn causal_mask<T: Real>(n: usize) -> Tensor<T> {
    Tensor::from_fn(&[n, n], |i| if i % n > i / n { T::neg_infinity() } else { T::zero() })
}

/// Two linear maps with a ReLU and dropout in between.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, hidden: usize, dropout: f64, rng: &mut impl Rng) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.inner"), d, hidden, leaky_relu_gain(0.0), rng),
            outer: Linear::new(store, &format!("{name}.outer"), hidden, d, 1.0, rng),
            dropout,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, store, x)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout);
        self.outer.forward(g, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_matches_manual_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "l", 3, 2, 1.0, &mut rng);
        store.get_mut(lin.bias).value = Tensor::new(&[2], vec![0.5, -1.0]).unwrap();
        let mut g = Graph::new(false, 0);
        let x = g.constant(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = lin.forward(&mut g, &store, x).unwrap();
        let w = store.value(lin.weight).data();
        let want0 = w[0] + 2.0 * w[1] + 3.0 * w[2] + 0.5;
        let want1 = w[3] + 2.0 * w[4] + 3.0 * w[5] - 1.0;
        let got = g.value(y).data();
        assert!((got[0] - want0).abs() < 1e-12 && (got[1] - want1).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_updates_running_stats_after_apply() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let mut g = Graph::new(true, 0);
        let x = g.constant(Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        bn.forward(&mut g, &store, x).unwrap();
        assert_eq!(store.value(bn.running_mean).data(), &[0.0]);
        g.apply_buffer_updates(&mut store);
        // mean 2.5, unbiased variance 5/3
        assert!((store.value(bn.running_mean).data()[0] - 0.25).abs() < 1e-12);
        assert!((store.value(bn.running_var).data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_batch_norm_uses_running_stats() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        store.get_mut(bn.running_mean).value = Tensor::new(&[1], vec![1.0]).unwrap();
        store.get_mut(bn.running_var).value = Tensor::new(&[1], vec![4.0]).unwrap();
        let mut g = Graph::new(false, 0);
        let x = g.constant(Tensor::new(&[1, 1], vec![5.0]).unwrap());
        let y = bn.forward(&mut g, &store, x).unwrap();
        assert!((g.value(y).data()[0] - 4.0 / (4.0f64 + 1e-5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn attention_rejects_indivisible_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        assert!(MultiHeadAttention::new(&mut store, "a", 10, 4, &mut rng).is_err());
    }

    #[test]
    fn causal_mask_blocks_future() {
        let m = causal_mask::<f32>(3);
        assert_eq!(m.data()[1], f32::NEG_INFINITY);
        assert_eq!(m.data()[3], 0.0);
        assert_eq!(m.data()[5], f32::NEG_INFINITY);
        assert_eq!(m.data()[8], 0.0);
    }
}
