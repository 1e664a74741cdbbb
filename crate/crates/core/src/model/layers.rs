//! Dense building blocks with explicit backward passes.
//!
//! Every `backward` accumulates parameter gradients into a structure of the
//! same shape as the layer and returns the gradient of its input.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;

use super::Mat;

/// Anything that owns named parameter tensors, visited in a fixed order.
pub trait Tensors {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat));
}

pub(crate) fn join(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

impl Tensors for Mat {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        f(prefix.to_string(), self)
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat)) {
        f(prefix.to_string(), self)
    }
}

impl<T: Tensors> Tensors for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

macro_rules! impl_tensors {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::model::layers::Tensors for $ty {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a $crate::model::Mat)) {
                $( self.$field.visit(&$crate::model::layers::join(prefix, stringify!($field)), f); )*
            }

            fn visit_mut<'a>(
                &'a mut self,
                prefix: &str,
                f: &mut dyn FnMut(String, &'a mut $crate::model::Mat),
            ) {
                $( self.$field.visit_mut(&$crate::model::layers::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use impl_tensors;

/// How a freshly built tensor is filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Weight,
    Gain,
    Bias,
}

pub type Init<'i> = dyn FnMut(Role, (usize, usize)) -> Mat + 'i;

/// `y = x W + b`, with `W: in x out` and `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Mat,
    pub b: Mat,
}

impl_tensors!(Linear { w, b });

impl Linear {
    pub fn new(input: usize, output: usize, init: &mut Init<'_>) -> Self {
        Linear {
            w: init(Role::Weight, (input, output)),
            b: init(Role::Bias, (1, output)),
        }
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    pub fn backward(&self, x: &Mat, dy: &Mat, grad: &mut Linear) -> Mat {
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut grad.w);
        grad.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

const LN_EPS: f64 = 1e-5;

/// Layer normalization over the feature axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Mat,
    pub bias: Mat,
}

impl_tensors!(LayerNorm { gain, bias });

pub struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize, init: &mut Init<'_>) -> Self {
        LayerNorm {
            gain: init(Role::Gain, (1, dim)),
            bias: init(Role::Bias, (1, dim)),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, LnCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let mut y = &xhat * &self.gain;
        y += &self.bias;
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LnCache, dy: &Mat, grad: &mut LayerNorm) -> Mat {
        grad.gain += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * &self.gain;
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (i, mut out) in dx.rows_mut().into_iter().enumerate() {
            let g = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let mean_g = g.sum() / d;
            let mean_gx = g.dot(&xh) / d;
            let inv = cache.inv_std[i];
            Zip::from(&mut out)
                .and(&g)
                .and(&xh)
                .for_each(|o, &gv, &xv| *o = inv * (gv - mean_g - xv * mean_gx));
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Position-wise `down(gelu(up(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl_tensors!(FeedForward { up, down });

pub struct FfnCache {
    x: Mat,
    pre: Mat,
    act: Mat,
}

impl FeedForward {
    pub fn new(d_model: usize, d_ff: usize, init: &mut Init<'_>) -> Self {
        FeedForward {
            up: Linear::new(d_model, d_ff, init),
            down: Linear::new(d_ff, d_model, init),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, FfnCache) {
        let pre = self.up.forward(x);
        let act = pre.mapv(gelu);
        let y = self.down.forward(&act);
        (y, FfnCache { x: x.clone(), pre, act })
    }

    pub fn backward(&self, cache: &FfnCache, dy: &Mat, grad: &mut FeedForward) -> Mat {
        let dact = self.down.backward(&cache.act, dy, &mut grad.down);
        let dpre = Zip::from(&dact).and(&cache.pre).map_collect(|&g, &x| g * gelu_grad(x));
        self.up.backward(&cache.x, &dpre, &mut grad.up)
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl_tensors!(Attention { q, k, v, o });

pub struct AttnCache {
    xq: Mat,
    xkv: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<Mat>,
    ctx: Mat,
}

fn softmax_rows(scores: &mut Mat) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Per-head attention over already projected `q`, `k`, `v`. Returns the
/// concatenated context and each head's probability matrix.
pub fn attend(q: &Mat, k: &Mat, v: &Mat, n_heads: usize, causal: bool) -> (Mat, Vec<Mat>) {
    let d = q.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Mat::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores *= scale;
        if causal {
            for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                row.slice_mut(s![i + 1..]).fill(f64::NEG_INFINITY);
            }
        }
        softmax_rows(&mut scores);
        ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    (ctx, probs)
}

impl Attention {
    pub fn new(d_model: usize, init: &mut Init<'_>) -> Self {
        Attention {
            q: Linear::new(d_model, d_model, init),
            k: Linear::new(d_model, d_model, init),
            v: Linear::new(d_model, d_model, init),
            o: Linear::new(d_model, d_model, init),
        }
    }

    pub fn forward(&self, xq: &Mat, xkv: &Mat, n_heads: usize, causal: bool) -> (Mat, AttnCache) {
        let q = self.q.forward(xq);
        let k = self.k.forward(xkv);
        let v = self.v.forward(xkv);
        let (ctx, probs) = attend(&q, &k, &v, n_heads, causal);
        let out = self.o.forward(&ctx);
        (
            out,
            AttnCache {
                xq: xq.clone(),
                xkv: xkv.clone(),
                q,
                k,
                v,
                probs,
                ctx,
            },
        )
    }

    /// Forward pass with keys and values projected ahead of time.
    pub fn forward_cached(&self, xq: &Mat, k: &Mat, v: &Mat, n_heads: usize, causal: bool) -> Mat {
        let q = self.q.forward(xq);
        let (ctx, _) = attend(&q, k, v, n_heads, causal);
        self.o.forward(&ctx)
    }

    /// Returns `(d xq, d xkv)`.
    pub fn backward(&self, cache: &AttnCache, dout: &Mat, n_heads: usize, grad: &mut Attention) -> (Mat, Mat) {
        let d = cache.q.ncols();
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dctx = self.o.backward(&cache.ctx, dout, &mut grad.o);
        let mut dq = Mat::zeros(cache.q.raw_dim());
        let mut dk = Mat::zeros(cache.k.raw_dim());
        let mut dv = Mat::zeros(cache.v.raw_dim());
        for (h, p) in cache.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dctx_h = dctx.slice(cols);
            let mut dp = dctx_h.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
            for (mut drow, prow) in dp.rows_mut().into_iter().zip(p.rows()) {
                let inner = drow.dot(&prow);
                Zip::from(&mut drow)
                    .and(&prow)
                    .for_each(|g, &pv| *g = pv * (*g - inner) * scale);
            }
            dq.slice_mut(cols).assign(&dp.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&dp.t().dot(&cache.q.slice(cols)));
        }
        let dxq = self.q.backward(&cache.xq, &dq, &mut grad.q);
        let mut dxkv = self.k.backward(&cache.xkv, &dk, &mut grad.k);
        dxkv += &self.v.backward(&cache.xkv, &dv, &mut grad.v);
        (dxq, dxkv)
    }
}

/// Inverted dropout. Returns the scaled keep-mask when active.
pub fn dropout<R: Rng + ?Sized>(x: &mut Mat, p: f64, rng: Option<&mut R>) -> Option<Mat> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    let mask = Mat::from_shape_fn(x.raw_dim(), |_| if rng.random::<f64>() < p { 0.0 } else { keep });
    *x *= &mask;
    Some(mask)
}

pub fn dropout_backward(dy: &Mat, mask: &Option<Mat>) -> Mat {
    match mask {
        Some(m) => dy * m,
        None => dy.clone(),
    }
}
