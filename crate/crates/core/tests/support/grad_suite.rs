#![allow(dead_code)]
//! Central-difference checks of every differentiable op, in double precision, on
//! several random shapes each. Shared by the gradient tests and the acceptance run.

use std::collections::BTreeMap;

use parkcast_core::nn::gradcheck::relative_errors;
use parkcast_core::nn::{causal_mask, AttnGeom, Graph, Tensor, Var};
use parkcast_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Worst relative error and number of checked shapes per op.
#[derive(Debug, Default)]
pub struct Checker {
    pub ops: BTreeMap<String, (f64, usize)>,
}

impl Checker {
    pub fn check<F>(&mut self, name: &str, inputs: &[Tensor<f64>], build: F)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let worst = match relative_errors(inputs, H, build) {
            Ok(errs) => errs.into_iter().fold(0.0, f64::max),
            Err(_) => f64::INFINITY,
        };
        let e = self.ops.entry(name.to_string()).or_insert((0.0, 0));
        e.0 = e.0.max(worst);
        e.1 += 1;
    }

    pub fn failures(&self) -> Vec<String> {
        self.ops.iter().filter(|(_, (e, _))| !(*e < TOL)).map(|(n, (e, _))| format!("{n}: {e:e}")).collect()
    }
}

pub type Group = fn(&mut Checker);

pub const ALL: [(&str, Group); 11] = [
    ("elementwise_binary_ops", elementwise_binary_ops),
    ("unary_ops", unary_ops),
    ("bias_and_matmuls", bias_and_matmuls),
    ("conv2d_with_stride_and_padding", conv2d_with_stride_and_padding),
    ("max_pool", max_pool),
    ("batch_norm_train_and_eval", batch_norm_train_and_eval),
    ("layer_norm_and_softmax", layer_norm_and_softmax),
    ("slicing_and_concatenation", slicing_and_concatenation),
    ("losses", losses),
    ("attention_with_and_without_mask", attention_with_and_without_mask),
    ("composite_chain_matches_numeric_gradient", composite_chain_matches_numeric_gradient),
];

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so kinks (relu, abs, max) are not straddled by ±h.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn shapes2(rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    (0..5).map(|_| (rng.gen_range(1..6), rng.gen_range(1..7))).collect()
}

pub fn elementwise_binary_ops(ck: &mut Checker) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (r, c) in shapes2(&mut rng) {
        let a = rand_tensor(&mut rng, &[r, c]);
        let b = rand_tensor(&mut rng, &[r, c]);
        ck.check("add", &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
        ck.check("sub", &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
        ck.check("mul", &[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    }
}

pub fn unary_ops(ck: &mut Checker) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (r, c) in shapes2(&mut rng) {
        let x = away_from_zero(&mut rng, &[r, c]);
        let k = rand_tensor(&mut rng, &[r, c]);
        ck.check("scale", std::slice::from_ref(&x), |g, v| Ok(g.scale(v[0], -1.7)));
        ck.check("add_const", std::slice::from_ref(&x), |g, v| g.add_const(v[0], &k));
        ck.check("leaky_relu", std::slice::from_ref(&x), |g, v| Ok(g.leaky_relu(v[0], 0.01)));
        ck.check("relu", std::slice::from_ref(&x), |g, v| Ok(g.relu(v[0])));
        ck.check("sigmoid", std::slice::from_ref(&x), |g, v| Ok(g.sigmoid(v[0])));
        ck.check("dropout", std::slice::from_ref(&x), |g, v| Ok(g.dropout(v[0], 0.3)));
        ck.check("reshape", std::slice::from_ref(&x), |g, v| g.reshape(v[0], &[c, r]));
        ck.check("transpose", std::slice::from_ref(&x), |g, v| g.transpose(v[0]));
        ck.check("sum", std::slice::from_ref(&x), |g, v| Ok(g.sum(v[0])));
        ck.check("mean", std::slice::from_ref(&x), |g, v| Ok(g.mean(v[0])));
    }
}

pub fn bias_and_matmuls(ck: &mut Checker) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let (m, k, n) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
        let a = rand_tensor(&mut rng, &[m, k]);
        let b = rand_tensor(&mut rng, &[k, n]);
        let bt = rand_tensor(&mut rng, &[n, k]);
        let bias = rand_tensor(&mut rng, &[k]);
        ck.check("matmul", &[a.clone(), b], |g, v| g.matmul(v[0], v[1]));
        ck.check("matmul_nt", &[a.clone(), bt], |g, v| g.matmul_nt(v[0], v[1]));
        ck.check("add_bias", &[a, bias], |g, v| g.add_bias(v[0], v[1]));
    }
}

pub fn conv2d_with_stride_and_padding(ck: &mut Checker) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..5 {
        let (b, c, o) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        let k = [1, 3, 5, 3, 2][case];
        let stride = [1, 1, 2, 2, 1][case];
        let pad = [0, 1, 2, 0, 1][case];
        let (h, w) = (rng.gen_range(k..k + 5), rng.gen_range(k..k + 5));
        let x = rand_tensor(&mut rng, &[b, c, h, w]);
        let wt = rand_tensor(&mut rng, &[o, c, k, k]);
        let bias = rand_tensor(&mut rng, &[o]);
        ck.check("conv2d", &[x, wt, bias], |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad));
    }
}

pub fn max_pool(ck: &mut Checker) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let shape = [rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(2..7), rng.gen_range(2..7)];
        // Distinct, well separated values keep the argmax stable under ±h.
        let n: usize = shape.iter().product();
        let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        for i in (1..n).rev() {
            vals.swap(i, rng.gen_range(0..=i));
        }
        let x = Tensor::new(&shape, vals).unwrap();
        ck.check("max_pool2", &[x], |g, v| g.max_pool2(v[0]));
    }
}

pub fn batch_norm_train_and_eval(ck: &mut Checker) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..5 {
        let shape: Vec<usize> =
            if case % 2 == 0 { vec![rng.gen_range(2..4), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4)] } else { vec![rng.gen_range(2..6), rng.gen_range(1..5)] };
        let c = shape[1];
        let x = rand_tensor(&mut rng, &shape);
        let gamma = rand_tensor(&mut rng, &[c]);
        let beta = rand_tensor(&mut rng, &[c]);
        let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.2..2.0)).collect();
        ck.check("batch_norm_train", &[x.clone(), gamma.clone(), beta.clone()], |g, v| {
            g.batch_norm_train(v[0], v[1], v[2], 1e-5).map(|r| r.0)
        });
        ck.check("batch_norm_eval", &[x, gamma, beta], |g, v| g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5));
    }
}

pub fn layer_norm_and_softmax(ck: &mut Checker) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (r, c) in shapes2(&mut rng) {
        let c = c + 1;
        let x = rand_tensor(&mut rng, &[r, c]);
        let gamma = rand_tensor(&mut rng, &[c]);
        let beta = rand_tensor(&mut rng, &[c]);
        ck.check("layer_norm", &[x.clone(), gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
        ck.check("softmax rows", std::slice::from_ref(&x), |g, v| g.softmax(v[0], 1));
        ck.check("softmax cols", std::slice::from_ref(&x), |g, v| g.softmax(v[0], 0));
        let x3 = rand_tensor(&mut rng, &[2, r, c]);
        ck.check("softmax middle", &[x3], |g, v| g.softmax(v[0], 1));
    }
}

pub fn slicing_and_concatenation(ck: &mut Checker) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (r, c) in shapes2(&mut rng) {
        let a = rand_tensor(&mut rng, &[r, c]);
        let b = rand_tensor(&mut rng, &[r, c + 1]);
        let d = rand_tensor(&mut rng, &[r + 1, c]);
        ck.check("concat_cols", &[a.clone(), b], |g, v| g.concat_cols(&[v[0], v[1], v[0]]));
        ck.check("concat_rows", &[a.clone(), d], |g, v| g.concat_rows(&[v[1], v[0]]));
        let (s, l) = (c / 2, c - c / 2);
        ck.check("slice_cols", std::slice::from_ref(&a), |g, v| g.slice_cols(v[0], s, l));
        let (s, l) = (r / 2, r - r / 2);
        ck.check("slice_rows", std::slice::from_ref(&a), |g, v| g.slice_rows(v[0], s, l));
    }
}

pub fn losses(ck: &mut Checker) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (r, c) in shapes2(&mut rng) {
        let p = Tensor::from_fn(&[r, c], |_| rng.gen_range(0.05..0.95));
        let t: Vec<f64> = (0..r * c).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        ck.check("bce", &[p], |g, v| g.bce(v[0], &t));
        let x = rand_tensor(&mut rng, &[r, c]);
        let y: Vec<f64> = x.data().iter().map(|v| v + if rng.gen_bool(0.5) { 0.3 } else { -0.3 }).collect();
        ck.check("l1", &[x], |g, v| g.l1(v[0], &y));
    }
}

pub fn attention_with_and_without_mask(ck: &mut Checker) {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..5 {
        let geom = AttnGeom {
            batch: rng.gen_range(1..3),
            seq_q: rng.gen_range(1..5),
            seq_k: rng.gen_range(1..5),
            heads: rng.gen_range(1..3),
            d_head: rng.gen_range(1..4),
        };
        let w = geom.heads * geom.d_head;
        let q = rand_tensor(&mut rng, &[geom.batch * geom.seq_q, w]);
        let k = rand_tensor(&mut rng, &[geom.batch * geom.seq_k, w]);
        let v = rand_tensor(&mut rng, &[geom.batch * geom.seq_k, w]);
        ck.check("attention", &[q.clone(), k, v], |g, x| g.attention(x[0], x[1], x[2], geom, None));
        // The causal mask is square: self-attention over seq_q rows.
        let sq = AttnGeom { seq_k: geom.seq_q, ..geom };
        let k = rand_tensor(&mut rng, &[sq.batch * sq.seq_k, w]);
        let v = rand_tensor(&mut rng, &[sq.batch * sq.seq_k, w]);
        let mask = causal_mask::<f64>(sq.seq_q);
        ck.check("masked attention", &[q, k, v], |g, x| g.attention(x[0], x[1], x[2], sq, Some(&mask)));
    }
}

pub fn composite_chain_matches_numeric_gradient(ck: &mut Checker) {
    // A small network exercising gradient accumulation through shared nodes.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[5, 4]);
        let gamma = rand_tensor(&mut rng, &[5]);
        let beta = rand_tensor(&mut rng, &[5]);
        ck.check("chain", &[x, w, gamma, beta], |g, v| {
            let h = g.matmul_nt(v[0], v[1])?;
            let h = g.layer_norm(h, v[2], v[3], 1e-5)?;
            let s = g.sigmoid(h);
            let t = g.mul(s, h)?;
            g.add(t, h)
        });
    }
}
