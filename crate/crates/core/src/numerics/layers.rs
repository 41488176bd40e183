//! Parameterized building blocks on top of [`Graph`].

use rand::Rng;

use super::{Graph, NumericsError, ParamId, ParamStore, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `x @ w + b` with `w: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Uniform init in `±1/sqrt(in)`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Linear {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = store.add_uniform(format!("{name}.w"), &[d_in, d_out], bound, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NumericsError> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(x, w, b)
    }

    /// Zeroes weight and bias.
    pub fn zero(&self, store: &mut ParamStore) {
        store.value_mut(self.w).data_mut().fill(0.0);
        store.value_mut(self.b).data_mut().fill(0.0);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> LayerNorm {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NumericsError> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

/// Multi-head attention with query, key, value and output projections.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<MultiHeadAttention, NumericsError> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(NumericsError::Heads { dim: d, heads });
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
        })
    }

    /// `query_src: [batch * lq, d]`, `kv_src: [batch * lkv, d]`. Self-attention
    /// passes the same var for both.
    pub fn forward(
        &self,
        g: &mut Graph,
        query_src: Var,
        kv_src: Var,
        batch: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var, NumericsError> {
        let q = self.q.forward(g, query_src)?;
        let k = self.k.forward(g, kv_src)?;
        let v = self.v.forward(g, kv_src)?;
        let ctx = g.attention(q, k, v, batch, self.heads, mask)?;
        self.o.forward(g, ctx)
    }
}

/// Position-wise `Linear -> GELU -> Linear`.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> FeedForward {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NumericsError> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Strided 1-D convolution with `stride == kernel_size` over `x: [T, c_in]`.
///
/// `w` is laid out `[kernel_size * c_in, c_out]`, row index `tap * c_in + ch`.
/// Non-overlapping windows make the unfold a plain reshape.
pub fn conv1d(g: &mut Graph, x: Var, w: Var, b: Var, kernel_size: usize) -> Result<Var, NumericsError> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(NumericsError::Shape(format!("conv1d expects [T, C], got {shape:?}")));
    }
    let (t, c_in) = (shape[0], shape[1]);
    if kernel_size == 0 || t % kernel_size != 0 {
        return Err(NumericsError::Stride {
            len: t,
            stride: kernel_size,
        });
    }
    let unfolded = g.reshape(x, &[t / kernel_size, kernel_size * c_in])?;
    g.linear(unfolded, w, b)
}

/// Inverted dropout with a mask drawn from `rng`; identity when `rate == 0`.
pub fn dropout(g: &mut Graph, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var, NumericsError> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = g.shape(x).to_vec();
    let mask = Tensor::from_fn(&shape, |_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
    let m = g.constant(mask);
    g.mul(x, m)
}

/// Sinusoidal absolute position table `[len, d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[len, d], |i| {
        let (pos, j) = (i / d, i % d);
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        let angle = pos as f64 * freq;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
