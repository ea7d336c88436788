//! Small layer wrappers binding parameter ids to graph ops.

use rand::Rng;

use crate::diffcore::{Conv2dSpec, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::Result;

/// `y = x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// LeCun-normal weights, zero bias.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, bias: bool, rng: &mut impl Rng) -> Result<Self> {
        let w = store.add(format!("{name}.w"), Tensor::randn(&[cin, cout], 1.0 / (cin as f64).sqrt(), rng))?;
        let b = if bias { Some(store.add(format!("{name}.b"), Tensor::zeros(&[cout]))?) } else { None };
        Ok(Self { w, b })
    }

    /// All-zero weights and bias.
    pub fn zeros<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[cin, cout]))?;
        let b = if bias { Some(store.add(format!("{name}.b"), Tensor::zeros(&[cout]))?) } else { None };
        Ok(Self { w, b })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }

    pub fn cout<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.value(self.w).shape()[1]
    }

    /// Zeroes weight and bias in place.
    pub fn zero_out<T: Real>(&self, store: &mut ParamStore<T>) {
        store.value_mut(self.w).data_mut().iter_mut().for_each(|v| *v = T::zero());
        if let Some(b) = self.b {
            store.value_mut(b).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RmsNorm {
    pub gain: ParamId,
}

impl RmsNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self { gain: store.add(format!("{name}.g"), Tensor::full(&[c], T::one()))? })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        g.rmsnorm(x, gain)
    }
}

/// Square-kernel convolution.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: Conv2dSpec,
}

impl Conv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        spec: Conv2dSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let std = 1.0 / ((kernel * kernel * cin) as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::randn(&[kernel, kernel, cin, cout], std, rng))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]))?;
        Ok(Self { w, b, spec })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), self.spec)
    }
}

/// `linear -> SiLU -> linear`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, hidden: usize, cout: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), cin, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, cout, true, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.silu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Fixed 2D sinusoidal embedding `[h, w, c]`: quarter channels each for sin/cos of row
/// and column. `c` must be divisible by 4.
pub fn sincos_2d(h: usize, w: usize, c: usize) -> Tensor<f64> {
    let q = c / 4;
    let mut out = vec![0.0; h * w * c];
    for r in 0..h {
        for col in 0..w {
            let base = (r * w + col) * c;
            for i in 0..q {
                let f = 10_000f64.powf(-(i as f64) / q.max(1) as f64);
                out[base + i] = (r as f64 * f).sin();
                out[base + q + i] = (r as f64 * f).cos();
                out[base + 2 * q + i] = (col as f64 * f).sin();
                out[base + 3 * q + i] = (col as f64 * f).cos();
            }
        }
    }
    Tensor::new(&[h, w, c], out).expect("shape")
}
