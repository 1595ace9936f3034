//! Differentiable building blocks with hand-written reverse passes.
//!
//! Every layer keeps its weights in a [`ParamStore`] and exposes a
//! `forward` that returns whatever the matching `backward` needs. Backward
//! passes accumulate into [`Grads`] and return the input adjoint.

use rand::Rng;

use super::params::{Grads, ParamId, ParamStore};
use crate::tensor::{gemm, matmul, Mat};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    /// Weights ~ N(0, 1/inp), zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inp: usize,
        out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self::with_std(store, name, inp, out, bias, 1.0 / (inp as f64).sqrt(), rng)
    }

    pub fn with_std<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inp: usize,
        out: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add_normal(format!("{name}.weight"), inp, out, std, rng);
        let b = bias.then(|| store.add(format!("{name}.bias"), Mat::zeros(1, out)));
        Linear { w, b, inp, out }
    }

    pub fn forward(&self, store: &ParamStore, x: &Mat) -> Mat {
        let mut y = matmul(x, store.get(self.w));
        if let Some(b) = self.b {
            let bias = store.get(b).data();
            for i in 0..y.rows() {
                for (v, bv) in y.row_mut(i).iter_mut().zip(bias) {
                    *v += bv;
                }
            }
        }
        y
    }

    /// Accumulates weight gradients and returns `dy * W^T`.
    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, x: &Mat, dy: &Mat) -> Mat {
        self.accumulate(grads, x, dy);
        let w = store.get(self.w);
        let mut dx = Mat::zeros(dy.rows(), w.rows());
        gemm(1.0, dy, false, w, true, 0.0, &mut dx);
        dx
    }

    /// Weight gradients only; for layers whose input needs no adjoint.
    pub fn accumulate(&self, grads: &mut Grads, x: &Mat, dy: &Mat) {
        gemm(1.0, x, true, dy, false, 1.0, grads.get_mut(self.w));
        if let Some(b) = self.b {
            let db = grads.get_mut(b).data_mut();
            for i in 0..dy.rows() {
                for (g, d) in db.iter_mut().zip(dy.row(i)) {
                    *g += d;
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    /// `(gain, bias)`; `None` for the parameter-free variant used under modulation.
    pub affine: Option<(ParamId, ParamId)>,
    pub dim: usize,
}

pub struct LayerNormCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, affine: bool) -> Self {
        let affine = affine.then(|| {
            (
                store.add(format!("{name}.gain"), Mat::filled(1, dim, 1.0)),
                store.add(format!("{name}.bias"), Mat::zeros(1, dim)),
            )
        });
        LayerNorm { affine, dim }
    }

    pub fn forward(&self, store: &ParamStore, x: &Mat) -> (Mat, LayerNormCache) {
        let n = x.cols() as f64;
        let mut xhat = Mat::zeros(x.rows(), x.cols());
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let r = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(r);
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
        }
        let y = match self.affine {
            None => xhat.clone(),
            Some((g, b)) => {
                let (g, b) = (store.get(g).data(), store.get(b).data());
                let mut y = xhat.clone();
                for i in 0..y.rows() {
                    for ((v, gv), bv) in y.row_mut(i).iter_mut().zip(g).zip(b) {
                        *v = *v * gv + bv;
                    }
                }
                y
            }
        };
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, cache: &LayerNormCache, dy: &Mat) -> Mat {
        let n = dy.cols() as f64;
        let mut dxhat = dy.clone();
        if let Some((g, b)) = self.affine {
            {
                let dg = grads.get_mut(g).data_mut();
                for i in 0..dy.rows() {
                    for ((acc, d), xh) in dg.iter_mut().zip(dy.row(i)).zip(cache.xhat.row(i)) {
                        *acc += d * xh;
                    }
                }
            }
            {
                let db = grads.get_mut(b).data_mut();
                for i in 0..dy.rows() {
                    for (acc, d) in db.iter_mut().zip(dy.row(i)) {
                        *acc += d;
                    }
                }
            }
            let gain = store.get(g).data();
            for i in 0..dxhat.rows() {
                for (v, gv) in dxhat.row_mut(i).iter_mut().zip(gain) {
                    *v *= gv;
                }
            }
        }
        let mut dx = Mat::zeros(dy.rows(), dy.cols());
        for i in 0..dy.rows() {
            let dh = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let sum_dh: f64 = dh.iter().sum();
            let sum_dh_xh: f64 = dh.iter().zip(xh).map(|(a, b)| a * b).sum();
            let r = cache.inv_std[i];
            for ((o, d), x) in dx.row_mut(i).iter_mut().zip(dh).zip(xh) {
                *o = r / n * (n * d - sum_dh - x * sum_dh_xh);
            }
        }
        dx
    }
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: &Mat) -> Mat {
    let data = x
        .data()
        .iter()
        .map(|&v| 0.5 * v * (1.0 + (GELU_A * (v + GELU_B * v * v * v)).tanh()))
        .collect();
    Mat::from_vec(x.rows(), x.cols(), data)
}

pub fn gelu_backward(x: &Mat, dy: &Mat) -> Mat {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &d)| {
            let t = (GELU_A * (v + GELU_B * v * v * v)).tanh();
            let dt = (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * v * v);
            d * (0.5 * (1.0 + t) + 0.5 * v * dt)
        })
        .collect();
    Mat::from_vec(x.rows(), x.cols(), data)
}

pub fn silu(x: &Mat) -> Mat {
    let data = x.data().iter().map(|&v| v / (1.0 + (-v).exp())).collect();
    Mat::from_vec(x.rows(), x.cols(), data)
}

pub fn silu_backward(x: &Mat, dy: &Mat) -> Mat {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &d)| {
            let s = 1.0 / (1.0 + (-v).exp());
            d * s * (1.0 + v * (1.0 - s))
        })
        .collect();
    Mat::from_vec(x.rows(), x.cols(), data)
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct MlpCache {
    x: Mat,
    pre: Mat,
    act: Mat,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inp: usize,
        hidden: usize,
        out: usize,
        rng: &mut R,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), inp, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out, true, rng),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Mat) -> (Mat, MlpCache) {
        let pre = self.fc1.forward(store, x);
        let act = gelu(&pre);
        let y = self.fc2.forward(store, &act);
        (y, MlpCache { x: x.clone(), pre, act })
    }

    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, cache: &MlpCache, dy: &Mat) -> Mat {
        let dact = self.fc2.backward(store, grads, &cache.act, dy);
        let dpre = gelu_backward(&cache.pre, &dact);
        self.fc1.backward(store, grads, &cache.x, &dpre)
    }
}

/// Multi-head scaled dot-product attention without masking.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionCache {
    x: Mat,
    ctx: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<Mat>,
    o: Mat,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert_eq!(dim % heads, 0, "dim must be divisible by heads");
        Attention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
            heads,
            dim,
        }
    }

    /// Queries from `x`, keys and values from `ctx`.
    pub fn forward(&self, store: &ParamStore, x: &Mat, ctx: &Mat) -> (Mat, AttentionCache) {
        let q = self.q.forward(store, x);
        let k = self.k.forward(store, ctx);
        let v = self.v.forward(store, ctx);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut o = Mat::zeros(x.rows(), self.dim);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.cols_slice(h * dh, dh);
            let kh = k.cols_slice(h * dh, dh);
            let vh = v.cols_slice(h * dh, dh);
            let mut s = Mat::zeros(x.rows(), ctx.rows());
            gemm(scale, &qh, false, &kh, true, 0.0, &mut s);
            for i in 0..s.rows() {
                crate::tensor::softmax_in_place(s.row_mut(i));
            }
            let oh = matmul(&s, &vh);
            o.add_cols_slice(h * dh, &oh);
            probs.push(s);
        }
        let y = self.o.forward(store, &o);
        (
            y,
            AttentionCache {
                x: x.clone(),
                ctx: ctx.clone(),
                q,
                k,
                v,
                probs,
                o,
            },
        )
    }

    /// Returns `(dx, dctx)`.
    pub fn backward(&self, store: &ParamStore, grads: &mut Grads, cache: &AttentionCache, dy: &Mat) -> (Mat, Mat) {
        let d_o = self.o.backward(store, grads, &cache.o, dy);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Mat::zeros(cache.q.rows(), self.dim);
        let mut dk = Mat::zeros(cache.k.rows(), self.dim);
        let mut dv = Mat::zeros(cache.v.rows(), self.dim);
        for h in 0..self.heads {
            let p = &cache.probs[h];
            let doh = d_o.cols_slice(h * dh, dh);
            let qh = cache.q.cols_slice(h * dh, dh);
            let kh = cache.k.cols_slice(h * dh, dh);
            let vh = cache.v.cols_slice(h * dh, dh);
            let mut dp = Mat::zeros(p.rows(), p.cols());
            gemm(1.0, &doh, false, &vh, true, 0.0, &mut dp);
            let mut dvh = Mat::zeros(vh.rows(), dh);
            gemm(1.0, p, true, &doh, false, 0.0, &mut dvh);
            let mut ds = dp;
            for i in 0..ds.rows() {
                let pr = p.row(i);
                let dot: f64 = ds.row(i).iter().zip(pr).map(|(a, b)| a * b).sum();
                for (d, pv) in ds.row_mut(i).iter_mut().zip(pr) {
                    *d = pv * (*d - dot);
                }
            }
            let mut dqh = Mat::zeros(qh.rows(), dh);
            gemm(scale, &ds, false, &kh, false, 0.0, &mut dqh);
            let mut dkh = Mat::zeros(kh.rows(), dh);
            gemm(scale, &ds, true, &qh, false, 0.0, &mut dkh);
            dq.add_cols_slice(h * dh, &dqh);
            dk.add_cols_slice(h * dh, &dkh);
            dv.add_cols_slice(h * dh, &dvh);
        }
        let dx = self.q.backward(store, grads, &cache.x, &dq);
        let mut dctx = self.k.backward(store, grads, &cache.ctx, &dk);
        dctx.add_assign(&self.v.backward(store, grads, &cache.ctx, &dv));
        (dx, dctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of `sum(w .* f(x))` w.r.t. the input.
    fn check_input_grad(f: impl Fn(&Mat) -> Mat, back: impl Fn(&Mat, &Mat) -> Mat, x: &Mat, w: &Mat) {
        let analytic = back(x, w);
        let h = 1e-6;
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fp: f64 = f(&xp).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
            let fm: f64 = f(&xm).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
            let num = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((a - num).abs() < 1e-6 * (1.0 + a.abs()), "{a} vs {num}");
        }
    }

    #[test]
    fn activations_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_mat(&mut rng, 3, 4);
        let w = rand_mat(&mut rng, 3, 4);
        check_input_grad(gelu, gelu_backward, &x, &w);
        check_input_grad(silu, silu_backward, &x, &w);
    }

    #[test]
    fn layer_norm_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 5, true);
        store.get_mut(ln.affine.unwrap().0).data_mut()[2] = 1.7;
        let x = rand_mat(&mut rng, 2, 5);
        let w = rand_mat(&mut rng, 2, 5);
        check_input_grad(
            |x| ln.forward(&store, x).0,
            |x, w| {
                let (_, cache) = ln.forward(&store, x);
                let mut g = store.zero_grads();
                ln.backward(&store, &mut g, &cache, w)
            },
            &x,
            &w,
        );
    }

    #[test]
    fn attention_input_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "a", 4, 2, &mut rng);
        let x = rand_mat(&mut rng, 3, 4);
        let ctx = rand_mat(&mut rng, 5, 4);
        let w = rand_mat(&mut rng, 3, 4);
        check_input_grad(
            |x| attn.forward(&store, x, &ctx).0,
            |x, w| {
                let (_, cache) = attn.forward(&store, x, &ctx);
                let mut g = store.zero_grads();
                attn.backward(&store, &mut g, &cache, w).0
            },
            &x,
            &w,
        );
        check_input_grad(
            |c| attn.forward(&store, &x, c).0,
            |c, w| {
                let (_, cache) = attn.forward(&store, &x, c);
                let mut g = store.zero_grads();
                attn.backward(&store, &mut g, &cache, w).1
            },
            &ctx,
            &w,
        );
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "a", 6, 3, &mut rng);
        let x = rand_mat(&mut rng, 4, 6);
        let (_, cache) = attn.forward(&store, &x, &x);
        for p in &cache.probs {
            for i in 0..p.rows() {
                assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
