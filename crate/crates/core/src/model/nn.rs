//! Transformer building blocks with explicit backward passes.
//!
//! Forward functions return a cache holding exactly what the matching
//! backward function needs. Backward functions accumulate parameter
//! gradients into a flat buffer laid out like the parameters.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, NdFloat, Zip};

use super::params::{ParamId, ParamLayout};

pub const LN_EPS: f64 = 1e-6;

fn cst<F: NdFloat>(v: f64) -> F {
    F::from(v).unwrap()
}

pub fn linear<F: NdFloat>(x: ArrayView2<'_, F>, w: ArrayView2<'_, F>, b: ArrayView1<'_, F>) -> Array2<F> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

/// Accumulates `dW += xᵀ·dy`, `db += Σ dy` and returns `dx = dy·Wᵀ`.
pub fn linear_backward<F: NdFloat>(
    layout: &ParamLayout,
    params: &[F],
    grads: &mut [F],
    (w, b): (ParamId, ParamId),
    x: ArrayView2<'_, F>,
    dy: ArrayView2<'_, F>,
    need_dx: bool,
) -> Option<Array2<F>> {
    ndarray::linalg::general_mat_mul(F::one(), &x.t(), &dy, F::one(), &mut layout.mat_mut(grads, w));
    layout.vec_mut(grads, b).zip_mut_with(&dy.sum_axis(Axis(0)), |g, &d| *g += d);
    need_dx.then(|| dy.dot(&layout.mat(params, w).t()))
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<F> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

pub fn layer_norm<F: NdFloat>(
    x: ArrayView2<'_, F>,
    gamma: ArrayView1<'_, F>,
    beta: ArrayView1<'_, F>,
) -> (Array2<F>, LayerNormCache<F>) {
    let (n, d) = x.dim();
    let inv_d = F::one() / cst::<F>(d as f64);
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = Array1::zeros(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() * inv_d;
        let var = row.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) * inv_d;
        let r = F::one() / (var + cst(LN_EPS)).sqrt();
        rstd[i] = r;
        xhat.row_mut(i).zip_mut_with(&row, |o, &v| *o = (v - mean) * r);
    }
    let mut y = &xhat * &gamma;
    y += &beta;
    (y, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward<F: NdFloat>(
    layout: &ParamLayout,
    params: &[F],
    grads: &mut [F],
    (g, b): (ParamId, ParamId),
    cache: &LayerNormCache<F>,
    dy: ArrayView2<'_, F>,
) -> Array2<F> {
    let gamma = layout.vec(params, g);
    layout.vec_mut(grads, g).zip_mut_with(&(&dy * &cache.xhat).sum_axis(Axis(0)), |a, &v| *a += v);
    layout.vec_mut(grads, b).zip_mut_with(&dy.sum_axis(Axis(0)), |a, &v| *a += v);
    let dxhat = &dy * &gamma;
    let (n, d) = dy.dim();
    let inv_d = F::one() / cst::<F>(d as f64);
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_dh = dh.sum() * inv_d;
        let mean_dhx = dh.dot(&xh) * inv_d;
        let r = cache.rstd[i];
        Zip::from(dx.row_mut(i))
            .and(&dh)
            .and(&xh)
            .for_each(|o, &a, &h| *o = r * (a - mean_dh - h * mean_dhx));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<F: NdFloat>(x: F) -> F {
    let half = cst::<F>(0.5);
    let inner = cst::<F>(GELU_C) * (x + cst::<F>(GELU_A) * x * x * x);
    half * x * (F::one() + inner.tanh())
}

pub fn gelu_grad<F: NdFloat>(x: F) -> F {
    let half = cst::<F>(0.5);
    let inner = cst::<F>(GELU_C) * (x + cst::<F>(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = cst::<F>(GELU_C) * (F::one() + cst::<F>(3.0 * GELU_A) * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * dinner
}

#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub ln1: (ParamId, ParamId),
    pub qkv: (ParamId, ParamId),
    pub proj: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
}

impl BlockIds {
    pub fn register(layout: &mut ParamLayout, prefix: &str, width: usize, hidden: usize) -> Self {
        let mut pair = |name: &str, rows: usize, cols: usize| {
            (
                layout.push(format!("{prefix}.{name}.weight"), &[rows, cols], true),
                layout.push(format!("{prefix}.{name}.bias"), &[cols], false),
            )
        };
        let qkv = pair("attn.qkv", width, 3 * width);
        let proj = pair("attn.proj", width, width);
        let fc1 = pair("mlp.fc1", width, hidden);
        let fc2 = pair("mlp.fc2", hidden, width);
        let ln1 = (
            layout.push(format!("{prefix}.norm1.weight"), &[width], false),
            layout.push(format!("{prefix}.norm1.bias"), &[width], false),
        );
        let ln2 = (
            layout.push(format!("{prefix}.norm2.weight"), &[width], false),
            layout.push(format!("{prefix}.norm2.bias"), &[width], false),
        );
        Self { ln1, qkv, proj, ln2, fc1, fc2 }
    }

    /// Linear weights of the two residual branches.
    pub fn branch_weights(&self) -> [ParamId; 4] {
        [self.qkv.0, self.proj.0, self.fc1.0, self.fc2.0]
    }
}

#[derive(Debug, Clone)]
pub struct BlockCache<F> {
    ln1: LayerNormCache<F>,
    h1: Array2<F>,
    qkv: Array2<F>,
    probs: Vec<Array2<F>>,
    attn: Array2<F>,
    ln2: LayerNormCache<F>,
    h2: Array2<F>,
    pre_act: Array2<F>,
    act: Array2<F>,
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `h + MLP(LN(h))`.
pub fn block_forward<F: NdFloat>(
    layout: &ParamLayout,
    params: &[F],
    ids: &BlockIds,
    heads: usize,
    x: Array2<F>,
) -> (Array2<F>, BlockCache<F>) {
    let (n, width) = x.dim();
    let dh = width / heads;
    let scale = F::one() / cst::<F>(dh as f64).sqrt();

    let (h1, ln1) = layer_norm(x.view(), layout.vec(params, ids.ln1.0), layout.vec(params, ids.ln1.1));
    let qkv = linear(h1.view(), layout.mat(params, ids.qkv.0), layout.vec(params, ids.qkv.1));
    let mut attn = Array2::zeros((n, width));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = qkv.slice(s![.., width + h * dh..width + (h + 1) * dh]);
        let v = qkv.slice(s![.., 2 * width + h * dh..2 * width + (h + 1) * dh]);
        let mut scores = q.dot(&k.t());
        for mut row in scores.rows_mut() {
            let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
            let mut sum = F::zero();
            row.mapv_inplace(|v| {
                let e = ((v - max) * scale).exp();
                sum += e;
                e
            });
            row.mapv_inplace(|v| v / sum);
        }
        attn.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&scores.dot(&v));
        probs.push(scores);
    }
    let mut x2 = linear(attn.view(), layout.mat(params, ids.proj.0), layout.vec(params, ids.proj.1));
    x2 += &x;

    let (h2, ln2) = layer_norm(x2.view(), layout.vec(params, ids.ln2.0), layout.vec(params, ids.ln2.1));
    let pre_act = linear(h2.view(), layout.mat(params, ids.fc1.0), layout.vec(params, ids.fc1.1));
    let act = pre_act.mapv(gelu);
    let mut y = linear(act.view(), layout.mat(params, ids.fc2.0), layout.vec(params, ids.fc2.1));
    y += &x2;
    let cache = BlockCache { ln1, h1, qkv, probs, attn, ln2, h2, pre_act, act };
    (y, cache)
}

pub fn block_backward<F: NdFloat>(
    layout: &ParamLayout,
    params: &[F],
    grads: &mut [F],
    ids: &BlockIds,
    heads: usize,
    cache: &BlockCache<F>,
    dy: Array2<F>,
) -> Array2<F> {
    let (n, width) = dy.dim();
    let dh = width / heads;
    let scale = F::one() / cst::<F>(dh as f64).sqrt();

    // MLP branch
    let dact = linear_backward(layout, params, grads, ids.fc2, cache.act.view(), dy.view(), true).unwrap();
    let mut dpre = dact;
    Zip::from(&mut dpre).and(&cache.pre_act).for_each(|d, &a| *d = *d * gelu_grad(a));
    let dh2 = linear_backward(layout, params, grads, ids.fc1, cache.h2.view(), dpre.view(), true).unwrap();
    let mut dx2 = layer_norm_backward(layout, params, grads, ids.ln2, &cache.ln2, dh2.view());
    dx2 += &dy;

    // attention branch
    let dattn = linear_backward(layout, params, grads, ids.proj, cache.attn.view(), dx2.view(), true).unwrap();
    let mut dqkv = Array2::zeros((n, 3 * width));
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let q = cache.qkv.slice(s![.., cols.clone()]);
        let k = cache.qkv.slice(s![.., width + cols.start..width + cols.end]);
        let v = cache.qkv.slice(s![.., 2 * width + cols.start..2 * width + cols.end]);
        let p = &cache.probs[h];
        let dout = dattn.slice(s![.., cols.clone()]);
        let dp = dout.dot(&v.t());
        let dv = p.t().dot(&dout);
        // softmax backward, with the 1/sqrt(dh) scale folded in
        let mut ds = Array2::zeros((n, n));
        for i in 0..n {
            let pr = p.row(i);
            let dpr = dp.row(i);
            let dot = pr.dot(&dpr);
            Zip::from(ds.row_mut(i)).and(&pr).and(&dpr).for_each(|o, &pv, &dv| *o = pv * (dv - dot) * scale);
        }
        let dq = ds.dot(&k);
        let dk = ds.t().dot(&q);
        dqkv.slice_mut(s![.., cols.clone()]).assign(&dq);
        dqkv.slice_mut(s![.., width + cols.start..width + cols.end]).assign(&dk);
        dqkv.slice_mut(s![.., 2 * width + cols.start..2 * width + cols.end]).assign(&dv);
    }
    let dh1 = linear_backward(layout, params, grads, ids.qkv, cache.h1.view(), dqkv.view(), true).unwrap();
    let mut dx = layer_norm_backward(layout, params, grads, ids.ln1, &cache.ln1, dh1.view());
    dx += &dx2;
    dx
}

/// Multiply-add count of one block on `n` tokens.
pub fn block_flops(n: usize, width: usize, hidden: usize) -> u64 {
    let (n, w, h) = (n as u64, width as u64, hidden as u64);
    2 * n * w * 3 * w + 2 * 2 * n * n * w + 2 * n * w * w + 2 * 2 * n * w * h
}
