use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::layers::{LayerNormCache, MlpCache};
use super::{Grads, LayerNorm, Linear, Mlp, ParamStore};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Mat};

/// Pre-norm transformer block:
/// `h = x + Wo·MHA(LN₁(x))`, `y = h + FFN(LN₂(h))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    ln1: LayerNormCache<T>,
    a: Mat<T>,
    qkv: Mat<T>,
    /// Softmax weights, `heads × T × T`.
    probs: Vec<T>,
    concat: Mat<T>,
    ln2: LayerNormCache<T>,
    ffn: MlpCache<T>,
}

impl<T> AttentionCache<T> {
    /// Attention weights of head `h`, row-major `T × T`.
    pub fn probs(&self, h: usize, tokens: usize) -> &[T] {
        &self.probs[h * tokens * tokens..(h + 1) * tokens * tokens]
    }
}

fn head_slice<T: Real>(qkv: &Mat<T>, which: usize, h: usize, dh: usize, dim: usize) -> Mat<T> {
    let off = which * dim + h * dh;
    Mat::from_fn(qkv.rows, dh, |r, c| qkv.at(r, off + c))
}

impl TransformerBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{name}: {heads} heads do not divide model dim {dim}")));
        }
        Ok(TransformerBlock {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim, rng)?,
            qkv: Linear::new(ps, &format!("{name}.qkv"), dim, 3 * dim, true, rng)?,
            out: Linear::new(ps, &format!("{name}.out"), dim, dim, true, rng)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim, rng)?,
            ffn: Mlp::new(ps, &format!("{name}.ffn"), dim, ffn_hidden, dim, rng)?,
            heads,
            dim,
        })
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Mat<T>) -> Result<(Mat<T>, AttentionCache<T>)> {
        if x.cols != self.dim || x.rows == 0 {
            return Err(Error::shape(
                "self_attention",
                format!("T ≥ 1 rows of width {}", self.dim),
                format!("{}×{}", x.rows, x.cols),
            ));
        }
        let t = x.rows;
        let dh = self.dim / self.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (a, ln1) = self.ln1.forward(ps, x)?;
        let qkv = self.qkv.forward(ps, &a)?;
        let mut probs = vec![T::zero(); self.heads * t * t];
        let mut concat = Mat::zeros(t, self.dim);
        for h in 0..self.heads {
            let q = head_slice(&qkv, 0, h, dh, self.dim);
            let k = head_slice(&qkv, 1, h, dh, self.dim);
            let v = head_slice(&qkv, 2, h, dh, self.dim);
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            gemm_nt(p, &q.data, &k.data, t, dh, t);
            for row in p.chunks_mut(t) {
                let mut m = T::neg_infinity();
                for s in row.iter_mut() {
                    *s *= scale;
                    m = m.max(*s);
                }
                let mut z = T::zero();
                for s in row.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                for s in row.iter_mut() {
                    *s /= z;
                }
            }
            let mut o = vec![T::zero(); t * dh];
            gemm_nn(&mut o, p, &v.data, t, t, dh);
            for r in 0..t {
                concat.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(&o[r * dh..(r + 1) * dh]);
            }
        }
        let mut hidden = self.out.forward(ps, &concat)?;
        hidden.add_assign(x);
        let (b, ln2) = self.ln2.forward(ps, &hidden)?;
        let (f, ffn) = self.ffn.forward(ps, &b)?;
        let mut y = hidden;
        y.add_assign(&f);
        Ok((
            y,
            AttentionCache {
                ln1,
                a,
                qkv,
                probs,
                concat,
                ln2,
                ffn,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &AttentionCache<T>,
        dy: &Mat<T>,
    ) -> Mat<T> {
        let t = dy.rows;
        let dh = self.dim / self.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        // y = h + ffn(ln2(h))
        let db = self.ffn.backward(ps, grads, &cache.ffn, dy);
        let mut dhid = self.ln2.backward(ps, grads, &cache.ln2, &db);
        dhid.add_assign(dy);
        // h = x + out(concat)
        let dconcat = self.out.backward(ps, grads, &cache.concat, &dhid);
        let mut dqkv = Mat::zeros(t, 3 * self.dim);
        for h in 0..self.heads {
            let q = head_slice(&cache.qkv, 0, h, dh, self.dim);
            let k = head_slice(&cache.qkv, 1, h, dh, self.dim);
            let v = head_slice(&cache.qkv, 2, h, dh, self.dim);
            let p = cache.probs(h, t);
            let d_o = Mat::from_fn(t, dh, |r, c| dconcat.at(r, h * dh + c));
            // dP = dO·Vᵀ, dV = Pᵀ·dO
            let mut dp = vec![T::zero(); t * t];
            gemm_nt(&mut dp, &d_o.data, &v.data, t, dh, t);
            let mut dv = vec![T::zero(); t * dh];
            gemm_tn(&mut dv, p, &d_o.data, t, t, dh);
            // softmax backward, then the 1/√d scale
            let mut ds = vec![T::zero(); t * t];
            for r in 0..t {
                let pr = &p[r * t..(r + 1) * t];
                let dpr = &dp[r * t..(r + 1) * t];
                let inner: T = pr.iter().zip(dpr).map(|(&a, &b)| a * b).sum();
                for c in 0..t {
                    ds[r * t + c] = pr[c] * (dpr[c] - inner) * scale;
                }
            }
            let mut dq = vec![T::zero(); t * dh];
            gemm_nn(&mut dq, &ds, &k.data, t, t, dh);
            let mut dk = vec![T::zero(); t * dh];
            gemm_tn(&mut dk, &ds, &q.data, t, t, dh);
            for r in 0..t {
                let row = dqkv.row_mut(r);
                for c in 0..dh {
                    row[h * dh + c] += dq[r * dh + c];
                    row[self.dim + h * dh + c] += dk[r * dh + c];
                    row[2 * self.dim + h * dh + c] += dv[r * dh + c];
                }
            }
        }
        let da = self.qkv.backward(ps, grads, &cache.a, &dqkv);
        let mut dx = self.ln1.backward(ps, grads, &cache.ln1, &da);
        dx.add_assign(&dhid);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(dim: usize, heads: usize, seed: u64) -> (ParamStore<f64>, TransformerBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let b = TransformerBlock::new(&mut ps, "blk", dim, heads, 2 * dim, &mut rng).unwrap();
        // larger weights so attention is far from uniform
        for p in ps.params_mut() {
            if p.name.ends_with("weight") {
                p.value.iter_mut().for_each(|v| *v *= 25.0);
            } else if p.name.ends_with("bias") {
                p.value.iter_mut().enumerate().for_each(|(i, v)| *v = 0.05 * (i as f64).sin());
            }
        }
        (ps, b)
    }

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
    }

    /// Direct evaluation of the same block, written independently with explicit loops.
    fn reference(ps: &ParamStore<f64>, b: &TransformerBlock, x: &Mat<f64>) -> Mat<f64> {
        let ln = |l: &LayerNorm, x: &Mat<f64>| {
            let g = ps.get(l.gain);
            let bb = ps.get(l.bias);
            Mat::from_fn(x.rows, x.cols, |r, c| {
                let row = x.row(r);
                let n = row.len() as f64;
                let m = row.iter().sum::<f64>() / n;
                let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
                (row[c] - m) / (v + 1e-5).sqrt() * g[c] + bb[c]
            })
        };
        let lin = |l: &Linear, x: &Mat<f64>| {
            let w = ps.get(l.w);
            let bias = l.b.map(|b| ps.get(b).to_vec()).unwrap_or(vec![0.0; l.d_out]);
            Mat::from_fn(x.rows, l.d_out, |r, o| {
                bias[o] + (0..l.d_in).map(|i| x.at(r, i) * w[i * l.d_out + o]).sum::<f64>()
            })
        };
        let gelu = |v: f64| 0.5 * v * (1.0 + ((2.0 / core::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh());
        let (t, d, hcount) = (x.rows, b.dim, b.heads);
        let dh = d / hcount;
        let a = ln(&b.ln1, x);
        let qkv = lin(&b.qkv, &a);
        let mut concat = Mat::zeros(t, d);
        for h in 0..hcount {
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| (0..dh).map(|c| qkv.at(i, h * dh + c) * qkv.at(j, d + h * dh + c)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for c in 0..dh {
                    let v: f64 = (0..t).map(|j| scores[j].exp() / z * qkv.at(j, 2 * d + h * dh + c)).sum();
                    concat.set(i, h * dh + c, v);
                }
            }
        }
        let mut hid = lin(&b.out, &concat);
        hid.add_assign(x);
        let bb = ln(&b.ln2, &hid);
        let mut f1 = lin(&b.ffn.fc1, &bb);
        f1.data.iter_mut().for_each(|v| *v = gelu(*v));
        let f2 = lin(&b.ffn.fc2, &f1);
        let mut y = hid;
        y.add_assign(&f2);
        y
    }

    #[test]
    fn matches_direct_formula() {
        let (ps, b) = block(8, 2, 3);
        let x = rand_mat(4, 8, 4);
        let (y, _) = b.forward(&ps, &x).unwrap();
        let want = reference(&ps, &b, &x);
        for (a, w) in y.data.iter().zip(&want.data) {
            assert!((a - w).abs() < 1e-12, "{a} vs {w}");
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (ps, b) = block(8, 4, 5);
        let x = rand_mat(1, 8, 6);
        let (_, cache) = b.forward(&ps, &x).unwrap();
        for h in 0..4 {
            assert_eq!(cache.probs(h, 1), &[1.0]);
        }
    }

    #[test]
    fn token_permutation_is_equivariant() {
        let (ps, b) = block(8, 2, 7);
        let x = rand_mat(5, 8, 8);
        let perm = [3usize, 0, 4, 1, 2];
        let xp = Mat::from_fn(5, 8, |r, c| x.at(perm[r], c));
        let (y, _) = b.forward(&ps, &x).unwrap();
        let (yp, _) = b.forward(&ps, &xp).unwrap();
        for r in 0..5 {
            for c in 0..8 {
                assert!((yp.at(r, c) - y.at(perm[r], c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_count_must_divide_dim() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(TransformerBlock::new(&mut ps, "b", 10, 3, 8, &mut rng).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (ps, b) = block(6, 2, 9);
        let x = rand_mat(4, 6, 10);
        let w = Mat::from_fn(4, 6, |r, c| ((r * 5 + c) as f64 * 0.77).cos());
        let f = |ps: &ParamStore<f64>, x: &Mat<f64>| {
            let (y, _) = b.forward(ps, x).unwrap();
            y.data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = b.forward(&ps, &x).unwrap();
        let mut g = ps.zero_grads();
        let dx = b.backward(&ps, &mut g, &cache, &w);
        let eps = 1e-6;
        for (pi, p) in ps.params().iter().enumerate() {
            for k in 0..p.value.len() {
                let mut a = ps.clone();
                a.params_mut()[pi].value[k] += eps;
                let mut c = ps.clone();
                c.params_mut()[pi].value[k] -= eps;
                let fd = (f(&a, &x) - f(&c, &x)) / (2.0 * eps);
                let an = g.g[pi][k];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "{}[{k}] fd {fd} an {an}", p.name);
            }
        }
        for k in 0..x.data.len() {
            let mut a = x.clone();
            a.data[k] += eps;
            let mut c = x.clone();
            c.data[k] -= eps;
            let fd = (f(&ps, &a) - f(&ps, &c)) / (2.0 * eps);
            assert!((fd - dx.data[k]).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
    }
}
