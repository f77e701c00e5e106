//! Small layers and ops built from differentiable primitives.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{VarBuilder, VarMap};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::seed;

pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    ((x * 0.5)?.tanh()? + 1.0)? * 0.5
}

pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

pub fn log_softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let s = x.broadcast_sub(&m)?;
    s.broadcast_sub(&s.exp()?.sum_keepdim(D::Minus1)?.log()?)
}

/// Layer normalisation over the last dimension.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            gain: vb.get_with_hints(dim, "gain", candle_nn::Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", candle_nn::Init::Const(0.0))?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let c = x.broadcast_sub(&mean)?;
        let var = c.sqr()?.mean_keepdim(D::Minus1)?;
        let y = c.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        y.broadcast_mul(&self.gain)?.broadcast_add(&self.bias)
    }
}

/// Replaces candle's unseeded initial values with ones drawn from `seed`.
///
/// Each variable gets its own stream keyed by name, so the result does not
/// depend on construction order. Weights of rank ≥ 2 are uniform in
/// ±1/√fan_in, embeddings (`*emb*`) are N(0, 0.02²), layer-norm gains are 1
/// and every other rank-1 tensor is 0.
pub fn seeded_init(vars: &VarMap, seed: u64) -> Result<()> {
    let data = vars.data().lock().unwrap();
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    for name in names {
        let var = &data[name];
        let dims = var.dims().to_vec();
        let n: usize = dims.iter().product();
        let mut rng = seed::rng(seed::derive_named(seed, name));
        let values: Vec<f64> = if name.contains("emb") {
            let normal = Normal::new(0.0, 0.02).unwrap();
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        } else if dims.len() >= 2 {
            let fan_in: usize = dims[1..].iter().product();
            let b = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-b..b)).collect()
        } else if name.ends_with("gain") {
            vec![1.0; n]
        } else {
            vec![0.0; n]
        };
        let t = Tensor::from_vec(values, dims, var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

/// Sum of squares of every variable, a cheap fingerprint for tests.
pub fn param_fingerprint(vars: &VarMap) -> Result<String> {
    let data = vars.data().lock().unwrap();
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    let mut bytes = Vec::new();
    for name in names {
        let v = data[name].as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        bytes.extend(name.as_bytes());
        bytes.extend(v.iter().flat_map(|x| x.to_le_bytes()));
    }
    Ok(crate::checkpoint::sha256_hex(&bytes))
}

pub fn device() -> Device {
    Device::Cpu
}

/// Adam with the given learning rate and no weight decay.
pub fn adam(vars: &VarMap, lr: f64) -> Result<candle_nn::AdamW> {
    let params = candle_nn::ParamsAdamW { lr, weight_decay: 0.0, ..Default::default() };
    Ok(candle_nn::Optimizer::new(vars.all_vars(), params)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1000.0f32, 0.0, -3.0], [0.1, 0.2, f32::NEG_INFINITY]], &Device::Cpu).unwrap();
        let p: Vec<Vec<f32>> = softmax_last(&x).unwrap().to_vec2().unwrap();
        for row in &p {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(p[1][2], 0.0);
        let lp: Vec<Vec<f32>> = log_softmax_last(&x).unwrap().to_vec2().unwrap();
        assert!((lp[0][0]).abs() < 1e-6);
    }

    #[test]
    fn sigmoid_matches_closed_form() {
        let x = Tensor::new(&[-30.0f64, -1.0, 0.0, 2.5], &Device::Cpu).unwrap();
        let y: Vec<f64> = sigmoid(&x).unwrap().to_vec1().unwrap();
        for (xi, yi) in [-30.0f64, -1.0, 0.0, 2.5].iter().zip(y) {
            assert!((yi - 1.0 / (1.0 + (-xi).exp())).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let dev = Device::Cpu;
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F64, &dev);
        let ln = LayerNorm::new(4, vb.pp("ln")).unwrap();
        seeded_init(&vm, 1).unwrap();
        let x = candle_core::Var::from_tensor(&Tensor::new(&[[0.3f64, -1.2, 2.0, 0.7]], &dev).unwrap()).unwrap();
        let w = Tensor::new(&[[1.0f64, -2.0, 0.5, 3.0]], &dev).unwrap();
        let f = |x: &Tensor| -> f64 {
            (ln.forward(x).unwrap() * &w).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        let loss = (ln.forward(x.as_tensor()).unwrap() * &w).unwrap().sum_all().unwrap();
        let g: Vec<Vec<f64>> = loss.backward().unwrap().get(x.as_tensor()).unwrap().to_vec2().unwrap();
        let base: Vec<f64> = x.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        for j in 0..4 {
            let h = 1e-6;
            let mut p = base.clone();
            p[j] += h;
            let mut m = base.clone();
            m[j] -= h;
            let tp = Tensor::from_vec(p, (1, 4), &dev).unwrap();
            let tm = Tensor::from_vec(m, (1, 4), &dev).unwrap();
            let fd = (f(&tp) - f(&tm)) / (2.0 * h);
            assert!((fd - g[0][j]).abs() < 1e-6, "{j}: {fd} vs {}", g[0][j]);
        }
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let make = || {
            let vm = VarMap::new();
            let vb = VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu);
            candle_nn::linear(3, 2, vb.pp("a")).unwrap();
            seeded_init(&vm, 9).unwrap();
            param_fingerprint(&vm).unwrap()
        };
        assert_eq!(make(), make());
    }
}
