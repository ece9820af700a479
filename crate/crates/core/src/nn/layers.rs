use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{Grads, Init, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Mat};

const INIT_STD: f64 = 0.02;

/// `y = x·W + b` applied row-wise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = ps.add(format!("{name}.weight"), &[d_in, d_out], Init::TruncNormal(INIT_STD), rng)?;
        let b = if bias {
            Some(ps.add(format!("{name}.bias"), &[d_out], Init::Const(0.0), rng)?)
        } else {
            None
        };
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Mat<T>) -> Result<Mat<T>> {
        if x.cols != self.d_in {
            return Err(Error::shape("linear", format!("{} input columns", self.d_in), format!("{}", x.cols)));
        }
        let mut y = Mat::zeros(x.rows, self.d_out);
        if let Some(b) = self.b {
            let b = ps.get(b);
            for r in 0..x.rows {
                y.row_mut(r).copy_from_slice(b);
            }
        }
        gemm_nn(&mut y.data, &x.data, ps.get(self.w), x.rows, self.d_in, self.d_out);
        Ok(y)
    }

    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, grads: &mut Grads<T>, x: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
        gemm_tn(grads.get_mut(self.w), &x.data, &dy.data, x.rows, self.d_in, self.d_out);
        if let Some(b) = self.b {
            let gb = grads.get_mut(b);
            for r in 0..dy.rows {
                for (g, &d) in gb.iter_mut().zip(dy.row(r)) {
                    *g += d;
                }
            }
        }
        let mut dx = Mat::zeros(x.rows, self.d_in);
        gemm_nt(&mut dx.data, &dy.data, ps.get(self.w), dy.rows, self.d_out, self.d_in);
        dx
    }
}

/// Same-padded 1D cross-correlation along time; weights stored `(k·C_in) × C_out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv1d {
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) || kernel == 0 {
            return Err(Error::Config(format!("{name}: kernel size {kernel} must be odd")));
        }
        // fan-in scaled so stacked convolutions keep a usable signal at init
        let std = 1.0 / libm::sqrt((kernel * c_in) as f64);
        let w = ps.add(format!("{name}.weight"), &[kernel, c_in, c_out], Init::TruncNormal(std), rng)?;
        let b = ps.add(format!("{name}.bias"), &[c_out], Init::Const(0.0), rng)?;
        Ok(Conv1d { w, b, kernel, c_in, c_out })
    }

    /// Rows of input aligned with output row range for tap `j`: returns (out_start, in_start, len).
    fn tap_range(&self, j: usize, frames: usize) -> (usize, usize, usize) {
        let half = self.kernel / 2;
        // output t reads input t + j - half
        if j < half {
            let shift = half - j;
            (shift, 0, frames.saturating_sub(shift))
        } else {
            let shift = j - half;
            (0, shift, frames.saturating_sub(shift))
        }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Mat<T>) -> Result<Mat<T>> {
        if x.cols != self.c_in {
            return Err(Error::shape("conv1d", format!("{} input channels", self.c_in), format!("{}", x.cols)));
        }
        let frames = x.rows;
        let mut y = Mat::zeros(frames, self.c_out);
        let b = ps.get(self.b);
        for r in 0..frames {
            y.row_mut(r).copy_from_slice(b);
        }
        let w = ps.get(self.w);
        let tap = self.c_in * self.c_out;
        for j in 0..self.kernel {
            let (o, i, len) = self.tap_range(j, frames);
            if len == 0 {
                continue;
            }
            gemm_nn(
                &mut y.data[o * self.c_out..(o + len) * self.c_out],
                &x.data[i * self.c_in..(i + len) * self.c_in],
                &w[j * tap..(j + 1) * tap],
                len,
                self.c_in,
                self.c_out,
            );
        }
        Ok(y)
    }

    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, grads: &mut Grads<T>, x: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
        let frames = x.rows;
        let tap = self.c_in * self.c_out;
        {
            let gb = grads.get_mut(self.b);
            for r in 0..frames {
                for (g, &d) in gb.iter_mut().zip(dy.row(r)) {
                    *g += d;
                }
            }
        }
        let w = ps.get(self.w);
        let mut dx = Mat::zeros(frames, self.c_in);
        for j in 0..self.kernel {
            let (o, i, len) = self.tap_range(j, frames);
            if len == 0 {
                continue;
            }
            let dys = &dy.data[o * self.c_out..(o + len) * self.c_out];
            gemm_tn(
                &mut grads.get_mut(self.w)[j * tap..(j + 1) * tap],
                &x.data[i * self.c_in..(i + len) * self.c_in],
                dys,
                len,
                self.c_in,
                self.c_out,
            );
            gemm_nt(
                &mut dx.data[i * self.c_in..(i + len) * self.c_in],
                dys,
                &w[j * tap..(j + 1) * tap],
                len,
                self.c_out,
                self.c_in,
            );
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    T::of(0.5) * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + T::of(3.0) * k * x * x);
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * du
}

fn gelu_mat<T: Real>(x: &Mat<T>) -> Mat<T> {
    Mat {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|&v| gelu(v)).collect(),
    }
}

fn gelu_backward<T: Real>(pre: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
    Mat {
        rows: pre.rows,
        cols: pre.cols,
        data: pre.data.iter().zip(&dy.data).map(|(&x, &d)| d * gelu_grad(x)).collect(),
    }
}

/// Stack of same-padded convolutions with GELU between layers (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub layers: Vec<Conv1d>,
}

#[derive(Debug, Clone)]
pub struct ConvStackCache<T> {
    /// Input of each layer (post-activation of the previous).
    inputs: Vec<Mat<T>>,
    /// Pre-activation output of each non-final layer.
    pre: Vec<Mat<T>>,
}

impl ConvStack {
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        channels: &[usize],
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(channels.len());
        let mut prev = c_in;
        for (i, &c) in channels.iter().enumerate() {
            layers.push(Conv1d::new(ps, &format!("{name}.{i}"), prev, c, kernel, rng)?);
            prev = c;
        }
        Ok(ConvStack { layers })
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Mat<T>) -> Result<(Mat<T>, ConvStackCache<T>)> {
        let mut cache = ConvStackCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::new(),
        };
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let y = l.forward(ps, &h)?;
            cache.inputs.push(h);
            if i + 1 < self.layers.len() {
                h = gelu_mat(&y);
                cache.pre.push(y);
            } else {
                h = y;
            }
        }
        Ok((h, cache))
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &ConvStackCache<T>,
        dy: &Mat<T>,
    ) -> Mat<T> {
        let mut d = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                d = gelu_backward(&cache.pre[i], &d);
            }
            d = self.layers[i].backward(ps, grads, &cache.inputs[i], &d);
        }
        d
    }
}

/// Row-wise layer normalization with learned gain and bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Mat<T>,
    rstd: Vec<T>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        let gain = ps.add(format!("{name}.gain"), &[dim], Init::Const(1.0), rng)?;
        let bias = ps.add(format!("{name}.bias"), &[dim], Init::Const(0.0), rng)?;
        Ok(LayerNorm { gain, bias, dim })
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Mat<T>) -> Result<(Mat<T>, LayerNormCache<T>)> {
        if x.cols != self.dim {
            return Err(Error::shape("layer_norm", format!("{} columns", self.dim), format!("{}", x.cols)));
        }
        let g = ps.get(self.gain);
        let b = ps.get(self.bias);
        let n = T::of(self.dim as f64);
        let mut y = Mat::zeros(x.rows, x.cols);
        let mut xhat = Mat::zeros(x.rows, x.cols);
        let mut rstd = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for (k, &v) in row.iter().enumerate() {
                xh[k] = (v - mean) * rs;
            }
            let yr = y.row_mut(r);
            for k in 0..x.cols {
                yr[k] = xhat.at(r, k) * g[k] + b[k];
            }
        }
        Ok((y, LayerNormCache { xhat, rstd }))
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &LayerNormCache<T>,
        dy: &Mat<T>,
    ) -> Mat<T> {
        let g = ps.get(self.gain);
        let n = T::of(self.dim as f64);
        let mut dx = Mat::zeros(dy.rows, dy.cols);
        let mut dgain = vec![T::zero(); self.dim];
        let mut dbias = vec![T::zero(); self.dim];
        for r in 0..dy.rows {
            let xh = cache.xhat.row(r);
            let d = dy.row(r);
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            for k in 0..self.dim {
                dgain[k] += d[k] * xh[k];
                dbias[k] += d[k];
                let dxh = d[k] * g[k];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh[k];
            }
            let rs = cache.rstd[r];
            let out = dx.row_mut(r);
            for k in 0..self.dim {
                let dxh = d[k] * g[k];
                out[k] = rs * (dxh - sum_dxh / n - xh[k] * sum_dxh_xh / n);
            }
        }
        for (a, b) in grads.get_mut(self.gain).iter_mut().zip(dgain) {
            *a += b;
        }
        for (a, b) in grads.get_mut(self.bias).iter_mut().zip(dbias) {
            *a += b;
        }
        dx
    }
}

/// Two linear layers with a GELU in between.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    x: Mat<T>,
    pre: Mat<T>,
    act: Mat<T>,
}

impl Mlp {
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(ps, &format!("{name}.fc1"), d_in, hidden, true, rng)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, d_out, true, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Mat<T>) -> Result<(Mat<T>, MlpCache<T>)> {
        let pre = self.fc1.forward(ps, x)?;
        let act = gelu_mat(&pre);
        let y = self.fc2.forward(ps, &act)?;
        Ok((y, MlpCache { x: x.clone(), pre, act }))
    }

    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, grads: &mut Grads<T>, cache: &MlpCache<T>, dy: &Mat<T>) -> Mat<T> {
        let dact = self.fc2.backward(ps, grads, &cache.act, dy);
        let dpre = gelu_backward(&cache.pre, &dact);
        self.fc1.backward(ps, grads, &cache.x, &dpre)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_kernel_copies_input() {
        let mut ps = ParamStore::<f64>::new();
        let conv = Conv1d::new(&mut ps, "c", 3, 3, 3, &mut rng()).unwrap();
        let w = ps.get_mut(conv.w);
        w.iter_mut().for_each(|v| *v = 0.0);
        // centre tap, identity over channels
        for c in 0..3 {
            w[9 + c * 3 + c] = 1.0;
        }
        let x = rand_mat(7, 3, 1);
        assert_eq!(conv.forward(&ps, &x).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut ps = ParamStore::<f64>::new();
        let conv = Conv1d::new(&mut ps, "c", 2, 4, 5, &mut rng()).unwrap();
        ps.get_mut(conv.w).iter_mut().for_each(|v| *v = 0.0);
        ps.get_mut(conv.b).copy_from_slice(&[1.0, -2.0, 0.5, 3.0]);
        let y = conv.forward(&ps, &rand_mat(6, 2, 2)).unwrap();
        for r in 0..6 {
            assert_eq!(y.row(r), &[1.0, -2.0, 0.5, 3.0]);
        }
    }

    #[test]
    fn conv_matches_sliding_dot_product() {
        let mut ps = ParamStore::<f64>::new();
        let conv = Conv1d::new(&mut ps, "c", 3, 2, 3, &mut rng()).unwrap();
        let x = rand_mat(5, 3, 3);
        let y = conv.forward(&ps, &x).unwrap();
        let w = ps.get(conv.w);
        let b = ps.get(conv.b);
        for t in 0..5i64 {
            for o in 0..2 {
                let mut s = b[o];
                for j in 0..3i64 {
                    let src = t + j - 1;
                    if !(0..5).contains(&src) {
                        continue;
                    }
                    for c in 0..3 {
                        s += x.at(src as usize, c) * w[(j as usize * 3 + c) * 2 + o];
                    }
                }
                assert!((y.at(t as usize, o) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_preserves_length_and_rejects_even_kernel() {
        let mut ps = ParamStore::<f64>::new();
        let conv = Conv1d::new(&mut ps, "c", 1, 1, 5, &mut rng()).unwrap();
        for f in 1..12 {
            assert_eq!(conv.forward(&ps, &rand_mat(f, 1, f as u64)).unwrap().rows, f);
        }
        assert!(Conv1d::new(&mut ps, "d", 1, 1, 4, &mut rng()).is_err());
        assert!(matches!(conv.forward(&ps, &rand_mat(3, 2, 0)), Err(Error::Shape { .. })));
    }

    fn fd_check(f: &dyn Fn(&ParamStore<f64>, &Mat<f64>) -> f64, ps: &ParamStore<f64>, x: &Mat<f64>, g: &Grads<f64>, dx: &Mat<f64>) {
        let eps = 1e-6;
        for (pi, p) in ps.params().iter().enumerate() {
            for k in 0..p.value.len() {
                let mut a = ps.clone();
                a.params_mut()[pi].value[k] += eps;
                let mut b = ps.clone();
                b.params_mut()[pi].value[k] -= eps;
                let fd = (f(&a, x) - f(&b, x)) / (2.0 * eps);
                let an = g.g[pi][k];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "{}[{k}]: fd {fd} analytic {an}", p.name);
            }
        }
        for k in 0..x.data.len() {
            let mut a = x.clone();
            a.data[k] += eps;
            let mut b = x.clone();
            b.data[k] -= eps;
            let fd = (f(ps, &a) - f(ps, &b)) / (2.0 * eps);
            assert!((fd - dx.data[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "x[{k}]: fd {fd} analytic {}", dx.data[k]);
        }
    }

    /// Weighted sum of outputs so every output coordinate gets a distinct upstream gradient.
    fn probe(y: &Mat<f64>) -> (f64, Mat<f64>) {
        let w = Mat::from_fn(y.rows, y.cols, |r, c| ((r * 7 + c * 3) as f64 * 0.61).sin());
        (y.data.iter().zip(&w.data).map(|(a, b)| a * b).sum(), w)
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut ps = ParamStore::<f64>::new();
        let stack = ConvStack::new(&mut ps, "cs", 3, &[4, 2], 3, &mut rng()).unwrap();
        let x = rand_mat(6, 3, 5);
        let f = |ps: &ParamStore<f64>, x: &Mat<f64>| probe(&stack.forward(ps, x).unwrap().0).0;
        let (y, cache) = stack.forward(&ps, &x).unwrap();
        let mut g = ps.zero_grads();
        let dx = stack.backward(&ps, &mut g, &cache, &probe(&y).1);
        fd_check(&f, &ps, &x, &g, &dx);

        let mut ps = ParamStore::<f64>::new();
        let ln = LayerNorm::new(&mut ps, "ln", 5, &mut rng()).unwrap();
        ps.get_mut(ln.gain).copy_from_slice(&[1.0, 0.5, -0.3, 2.0, 1.1]);
        ps.get_mut(ln.bias).copy_from_slice(&[0.1, 0.0, 0.2, -0.1, 0.3]);
        let x = rand_mat(3, 5, 6);
        let f = |ps: &ParamStore<f64>, x: &Mat<f64>| probe(&ln.forward(ps, x).unwrap().0).0;
        let (y, cache) = ln.forward(&ps, &x).unwrap();
        let mut g = ps.zero_grads();
        let dx = ln.backward(&ps, &mut g, &cache, &probe(&y).1);
        fd_check(&f, &ps, &x, &g, &dx);

        let mut ps = ParamStore::<f64>::new();
        let mlp = Mlp::new(&mut ps, "m", 4, 6, 3, &mut rng()).unwrap();
        ps.params_mut().iter_mut().for_each(|p| p.value.iter_mut().for_each(|v| *v *= 20.0));
        let x = rand_mat(2, 4, 7);
        let f = |ps: &ParamStore<f64>, x: &Mat<f64>| probe(&mlp.forward(ps, x).unwrap().0).0;
        let (y, cache) = mlp.forward(&ps, &x).unwrap();
        let mut g = ps.zero_grads();
        let dx = mlp.backward(&ps, &mut g, &cache, &probe(&y).1);
        fd_check(&f, &ps, &x, &g, &dx);
    }
}
