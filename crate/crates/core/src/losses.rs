//! Contrastive alignment objective and the masked token prediction loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttentionCache, Grads, Init, MlpCache, Mlp, ParamId, ParamStore, TransformerBlock};
use crate::real::Real;
use crate::tensor::{dot, Mat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau_init: f64,
    pub learn_tau: bool,
    pub lambda_g: f64,
    pub lambda_l: f64,
    pub lambda_t: f64,
    pub lambda_mtp: f64,
    pub use_global: bool,
    pub use_local: bool,
    pub use_token: bool,
    pub use_mtp: bool,
    pub mask_ratio: f64,
    /// Treat MTP targets as constants.
    pub mtp_stop_grad: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau_init: 0.07,
            learn_tau: true,
            lambda_g: 1.0,
            lambda_l: 1.0,
            lambda_t: 0.5,
            lambda_mtp: 0.3,
            use_global: true,
            use_local: true,
            use_token: true,
            use_mtp: true,
            mask_ratio: 0.75,
            mtp_stop_grad: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_init > 0.0 && self.tau_init.is_finite()) {
            return Err(Error::Config(format!("tau_init {} must be positive", self.tau_init)));
        }
        for (n, v) in [
            ("lambda_g", self.lambda_g),
            ("lambda_l", self.lambda_l),
            ("lambda_t", self.lambda_t),
            ("lambda_mtp", self.lambda_mtp),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{n} = {v} must be non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} outside [0, 1)", self.mask_ratio)));
        }
        Ok(())
    }

    /// Effective weights with toggles applied: (global, local, token, mtp).
    pub fn weights(&self) -> [f64; 4] {
        let on = |b: bool, v: f64| if b { v } else { 0.0 };
        [
            on(self.use_global, self.lambda_g),
            on(self.use_local, self.lambda_l),
            on(self.use_token, self.lambda_t),
            on(self.use_mtp, self.lambda_mtp),
        ]
    }
}

/// Mean over rows of `−log softmax(logits)ᵢᵢ`; `exclude[i·K + j]` drops column
/// `j` from row `i`'s denominator (the diagonal is never dropped).
/// Returns the loss and its gradient with respect to the logits.
pub fn softmax_xent_diag<T: Real>(logits: &Mat<T>, exclude: Option<&[bool]>) -> Result<(T, Mat<T>)> {
    let k = logits.rows;
    if k == 0 {
        return Err(Error::Empty("contrastive batch"));
    }
    if logits.cols != k {
        return Err(Error::shape("infonce", format!("{k}×{k} scores"), format!("{}×{}", k, logits.cols)));
    }
    if let Some(m) = exclude {
        if m.len() != k * k {
            return Err(Error::shape("infonce", format!("{} mask entries", k * k), format!("{}", m.len())));
        }
    }
    let inv_k = T::one() / T::of(k as f64);
    let keep = |i: usize, j: usize| i == j || exclude.is_none_or(|m| !m[i * k + j]);
    let mut loss = T::zero();
    let mut grad = Mat::zeros(k, k);
    for i in 0..k {
        let row = logits.row(i);
        let mut mx = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if keep(i, j) && v > mx {
                mx = v;
            }
        }
        let mut z = T::zero();
        for (j, &v) in row.iter().enumerate() {
            if keep(i, j) {
                z += (v - mx).exp();
            }
        }
        let lse = mx + z.ln();
        loss += (lse - row[i]) * inv_k;
        let g = grad.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            if keep(i, j) {
                g[j] = (v - lse).exp() * inv_k;
            }
        }
        g[i] -= inv_k;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("infonce"));
    }
    Ok((loss, grad))
}

/// One InfoNCE direction with its gradients.
#[derive(Debug, Clone)]
pub struct InfoNce<T> {
    pub loss: T,
    pub d_anchors: Mat<T>,
    pub d_positives: Mat<T>,
    /// Derivative with respect to `ρ = ln τ`.
    pub d_log_tau: T,
}

fn scores<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    Mat::from_fn(a.rows, b.rows, |i, j| dot(a.row(i), b.row(j)))
}

/// Given `dL/dlogits` of `S/τ`, accumulate gradients into `a`, `b` and `ρ`.
fn backprop_scores<T: Real>(a: &Mat<T>, b: &Mat<T>, logits: &Mat<T>, dl: &Mat<T>, tau: T, da: &mut Mat<T>, db: &mut Mat<T>) -> T {
    let inv = T::one() / tau;
    let mut drho = T::zero();
    for i in 0..a.rows {
        for j in 0..b.rows {
            let g = dl.at(i, j);
            if g == T::zero() {
                continue;
            }
            drho -= g * logits.at(i, j);
            let gs = g * inv;
            for (x, &y) in da.row_mut(i).iter_mut().zip(b.row(j)) {
                *x += gs * y;
            }
            for (x, &y) in db.row_mut(j).iter_mut().zip(a.row(i)) {
                *x += gs * y;
            }
        }
    }
    drho
}

/// `−(1/K) Σᵢ log softmaxⱼ(⟨aᵢ, bⱼ⟩/τ)ᵢ` with anchors `a` and positives `b`.
pub fn infonce_directional<T: Real>(a: &Mat<T>, b: &Mat<T>, tau: T, exclude: Option<&[bool]>) -> Result<InfoNce<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "infonce",
            format!("{}×{}", a.rows, a.cols),
            format!("{}×{}", b.rows, b.cols),
        ));
    }
    if !(tau > T::zero()) {
        return Err(Error::range("tau", format!("{} must be positive", tau.f64())));
    }
    let mut logits = scores(a, b);
    let inv = T::one() / tau;
    logits.data.iter_mut().for_each(|v| *v *= inv);
    let (loss, dl) = softmax_xent_diag(&logits, exclude)?;
    let mut d_anchors = Mat::zeros(a.rows, a.cols);
    let mut d_positives = Mat::zeros(b.rows, b.cols);
    let d_log_tau = backprop_scores(a, b, &logits, &dl, tau, &mut d_anchors, &mut d_positives);
    Ok(InfoNce {
        loss,
        d_anchors,
        d_positives,
        d_log_tau,
    })
}

/// Token-level InfoNCE: rows are `K·T` tokens, sample `i` owning rows
/// `[iT, (i+1)T)`. Negatives are the other positions of the same sample.
pub fn infonce_token<T: Real>(a: &Mat<T>, b: &Mat<T>, tokens: usize, tau: T) -> Result<InfoNce<T>> {
    if tokens == 0 || !a.rows.is_multiple_of(tokens) || a.shape() != b.shape() {
        return Err(Error::shape(
            "infonce_token",
            format!("matching K·{tokens} token rows"),
            format!("{}×{} and {}×{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let k = a.rows / tokens;
    if k == 0 {
        return Err(Error::Empty("token batch"));
    }
    let d = a.cols;
    let sub = |m: &Mat<T>, i: usize| Mat {
        rows: tokens,
        cols: d,
        data: m.data[i * tokens * d..(i + 1) * tokens * d].to_vec(),
    };
    let mut out = InfoNce {
        loss: T::zero(),
        d_anchors: Mat::zeros(a.rows, d),
        d_positives: Mat::zeros(b.rows, d),
        d_log_tau: T::zero(),
    };
    let inv_k = T::one() / T::of(k as f64);
    for i in 0..k {
        let r = infonce_directional(&sub(a, i), &sub(b, i), tau, None)?;
        out.loss += r.loss * inv_k;
        out.d_log_tau += r.d_log_tau * inv_k;
        let span = i * tokens * d..(i + 1) * tokens * d;
        for (x, &y) in out.d_anchors.data[span.clone()].iter_mut().zip(&r.d_anchors.data) {
            *x += y * inv_k;
        }
        for (x, &y) in out.d_positives.data[span].iter_mut().zip(&r.d_positives.data) {
            *x += y * inv_k;
        }
    }
    Ok(out)
}

/// Projected, unit-norm embeddings of a batch. IMU is modality A, pose B.
#[derive(Debug, Clone)]
pub struct AlignInputs<T> {
    pub global_imu: Mat<T>,
    pub global_pose: Mat<T>,
    /// Per sensor, `K × d`.
    pub local_imu: Vec<Mat<T>>,
    pub local_pose: Vec<Mat<T>>,
    /// Per sensor, `(K·T) × d`.
    pub token_imu: Vec<Mat<T>>,
    pub token_pose: Vec<Mat<T>>,
    pub tokens: usize,
    /// `presence[i][n]`: sensor `n` observed for sample `i`. `None` means all.
    pub presence: Option<Vec<Vec<bool>>>,
    /// `K × K` near-duplicate mask for global and local denominators.
    pub exclude: Option<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct AlignGrads<T> {
    pub global_imu: Mat<T>,
    pub global_pose: Mat<T>,
    pub local_imu: Vec<Mat<T>>,
    pub local_pose: Vec<Mat<T>>,
    pub token_imu: Vec<Mat<T>>,
    pub token_pose: Vec<Mat<T>>,
    pub log_tau: T,
}

/// The six directional terms (imu→pose, pose→imu per level) and weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignBreakdown {
    pub global_i2p: f64,
    pub global_p2i: f64,
    pub local_i2p: f64,
    pub local_p2i: f64,
    pub token_i2p: f64,
    pub token_p2i: f64,
    pub global: f64,
    pub local: f64,
    pub token: f64,
    pub total: f64,
}

fn select_rows<T: Real>(m: &Mat<T>, rows: &[usize], block: usize) -> Mat<T> {
    let w = m.cols * block;
    let mut data = Vec::with_capacity(rows.len() * w);
    for &r in rows {
        data.extend_from_slice(&m.data[r * w..(r + 1) * w]);
    }
    Mat {
        rows: rows.len() * block,
        cols: m.cols,
        data,
    }
}

fn scatter_rows<T: Real>(dst: &mut Mat<T>, src: &Mat<T>, rows: &[usize], block: usize, scale: T) {
    let w = dst.cols * block;
    for (s, &r) in rows.iter().enumerate() {
        for (x, &y) in dst.data[r * w..(r + 1) * w].iter_mut().zip(&src.data[s * w..(s + 1) * w]) {
            *x += y * scale;
        }
    }
}

fn sub_mask(mask: &[bool], k: usize, rows: &[usize]) -> Vec<bool> {
    let mut out = Vec::with_capacity(rows.len() * rows.len());
    for &i in rows {
        for &j in rows {
            out.push(mask[i * k + j]);
        }
    }
    out
}

/// Bidirectional term on a subset of samples; returns (i2p, p2i) and adds
/// `scale ×` the gradient of their mean into the buffers.
#[allow(clippy::too_many_arguments)]
fn bidirectional<T: Real>(
    a: &Mat<T>,
    b: &Mat<T>,
    rows: &[usize],
    block: usize,
    token: bool,
    tau: T,
    exclude: Option<&[bool]>,
    k: usize,
    scale: T,
    da: &mut Mat<T>,
    db: &mut Mat<T>,
    drho: &mut T,
) -> Result<(T, T)> {
    let sa = select_rows(a, rows, block);
    let sb = select_rows(b, rows, block);
    let (ab, ba) = if !token {
        let m = exclude.map(|m| sub_mask(m, k, rows));
        let mt = m.as_ref().map(|m| transpose_mask(m, rows.len()));
        (
            infonce_directional(&sa, &sb, tau, m.as_deref())?,
            infonce_directional(&sb, &sa, tau, mt.as_deref())?,
        )
    } else {
        (infonce_token(&sa, &sb, block, tau)?, infonce_token(&sb, &sa, block, tau)?)
    };
    let half = scale * T::of(0.5);
    scatter_rows(da, &ab.d_anchors, rows, block, half);
    scatter_rows(db, &ab.d_positives, rows, block, half);
    scatter_rows(db, &ba.d_anchors, rows, block, half);
    scatter_rows(da, &ba.d_positives, rows, block, half);
    *drho += half * (ab.d_log_tau + ba.d_log_tau);
    Ok((ab.loss, ba.loss))
}

fn transpose_mask(m: &[bool], k: usize) -> Vec<bool> {
    let mut t = vec![false; k * k];
    for i in 0..k {
        for j in 0..k {
            t[j * k + i] = m[i * k + j];
        }
    }
    t
}

/// `λg·Lg + λl·Ll + λt·Lt`, each the mean of both directions; local and token
/// terms are averaged over sensors, using only samples where the sensor is
/// present. Terms with zero weight are skipped.
pub fn align_loss<T: Real>(x: &AlignInputs<T>, tau: T, cfg: &LossConfig) -> Result<(AlignBreakdown, AlignGrads<T>)> {
    let k = x.global_imu.rows;
    let n = x.local_imu.len();
    if x.local_pose.len() != n || x.token_imu.len() != n || x.token_pose.len() != n {
        return Err(Error::shape("align_loss", format!("{n} sensors per level"), "mismatched sensor lists"));
    }
    if let Some(p) = &x.presence {
        if p.len() != k || p.iter().any(|r| r.len() != n) {
            return Err(Error::shape("align_loss", format!("{k}×{n} presence"), "mismatched presence mask"));
        }
    }
    let [wg, wl, wt, _] = cfg.weights();
    let zeros = |v: &[Mat<T>]| v.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect::<Vec<_>>();
    let mut g = AlignGrads {
        global_imu: Mat::zeros(k, x.global_imu.cols),
        global_pose: Mat::zeros(k, x.global_pose.cols),
        local_imu: zeros(&x.local_imu),
        local_pose: zeros(&x.local_pose),
        token_imu: zeros(&x.token_imu),
        token_pose: zeros(&x.token_pose),
        log_tau: T::zero(),
    };
    let mut br = AlignBreakdown::default();
    let all: Vec<usize> = (0..k).collect();
    let exclude = x.exclude.as_deref();
    if wg > 0.0 {
        let (ab, ba) = bidirectional(
            &x.global_imu,
            &x.global_pose,
            &all,
            1,
            false,
            tau,
            exclude,
            k,
            T::of(wg),
            &mut g.global_imu,
            &mut g.global_pose,
            &mut g.log_tau,
        )?;
        br.global_i2p = ab.f64();
        br.global_p2i = ba.f64();
        br.global = 0.5 * (br.global_i2p + br.global_p2i);
    }
    let present: Vec<Vec<usize>> = (0..n)
        .map(|s| (0..k).filter(|&i| x.presence.as_ref().is_none_or(|p| p[i][s])).collect())
        .collect();
    let active = present.iter().filter(|r| !r.is_empty()).count();
    for token_level in [false, true] {
        let w = if token_level { wt } else { wl };
        if w <= 0.0 || active == 0 {
            continue;
        }
        let per = T::of(w / active as f64);
        let (mut ab_sum, mut ba_sum) = (0.0, 0.0);
        for s in 0..n {
            if present[s].is_empty() {
                continue;
            }
            let (ab, ba) = if token_level {
                let (ga, gb) = (&mut g.token_imu[s], &mut g.token_pose[s]);
                let (a, b) = (&x.token_imu[s], &x.token_pose[s]);
                bidirectional(a, b, &present[s], x.tokens, true, tau, None, k, per, ga, gb, &mut g.log_tau)?
            } else {
                let (ga, gb) = (&mut g.local_imu[s], &mut g.local_pose[s]);
                let (a, b) = (&x.local_imu[s], &x.local_pose[s]);
                bidirectional(a, b, &present[s], 1, false, tau, exclude, k, per, ga, gb, &mut g.log_tau)?
            };
            ab_sum += ab.f64();
            ba_sum += ba.f64();
        }
        let (ab, ba) = (ab_sum / active as f64, ba_sum / active as f64);
        if token_level {
            br.token_i2p = ab;
            br.token_p2i = ba;
            br.token = 0.5 * (ab + ba);
        } else {
            br.local_i2p = ab;
            br.local_p2i = ba;
            br.local = 0.5 * (ab + ba);
        }
    }
    br.total = wg * br.global + wl * br.local + wt * br.token;
    Ok((br, g))
}

/// Masked `(sensor, timestep)` positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    pub positions: Vec<(usize, usize)>,
    pub sensors: usize,
    pub tokens: usize,
}

impl MaskSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, n: usize, t: usize) -> bool {
        self.positions.contains(&(n, t))
    }

    /// Row-major `N × T` membership table.
    pub fn table(&self) -> Vec<bool> {
        let mut m = vec![false; self.sensors * self.tokens];
        for &(n, t) in &self.positions {
            m[n * self.tokens + t] = true;
        }
        m
    }
}

/// `⌊α·N·T⌋`.
pub fn mask_count(sensors: usize, tokens: usize, alpha: f64) -> usize {
    libm::floor(alpha * (sensors * tokens) as f64) as usize
}

/// Uniform draw of `⌊α·N·T⌋` distinct positions.
pub fn sample_mask<R: Rng + ?Sized>(sensors: usize, tokens: usize, alpha: f64, rng: &mut R) -> Result<MaskSet> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::range("mask ratio", format!("{alpha} outside [0, 1)")));
    }
    let total = sensors * tokens;
    let m = mask_count(sensors, tokens, alpha);
    let mut idx = rand::seq::index::sample(rng, total, m).into_vec();
    idx.sort_unstable();
    Ok(MaskSet {
        positions: idx.into_iter().map(|i| (i / tokens, i % tokens)).collect(),
        sensors,
        tokens,
    })
}

/// Mean over rows of the per-coordinate mean squared error, with the gradient
/// with respect to `pred`. An empty set gives zero.
pub fn mtp_mse<T: Real>(pred: &Mat<T>, target: &Mat<T>) -> Result<(T, Mat<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mtp_loss",
            format!("{}×{}", target.rows, target.cols),
            format!("{}×{}", pred.rows, pred.cols),
        ));
    }
    let mut grad = Mat::zeros(pred.rows, pred.cols);
    if pred.rows == 0 || pred.cols == 0 {
        return Ok((T::zero(), grad));
    }
    let inv = T::one() / T::of((pred.rows * pred.cols) as f64);
    let mut loss = T::zero();
    for ((g, &p), &y) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let e = p - y;
        loss += e * e * inv;
        *g = T::of(2.0) * e * inv;
    }
    Ok((loss, grad))
}

/// Masked token predictor: masked tokens become a learned query, every token
/// gets sensor and position embeddings, one transformer block runs over the
/// flattened `N·T` sequence and an MLP reads out the masked slots.
#[derive(Debug, Clone, PartialEq)]
pub struct MtpPredictor {
    pub query: ParamId,
    pub sensor_emb: ParamId,
    pub pos_emb: ParamId,
    pub block: TransformerBlock,
    pub head: Mlp,
    pub sensors: usize,
    pub tokens: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct MtpCache<T> {
    attn: AttentionCache<T>,
    gathered: MlpCache<T>,
    dpred: Mat<T>,
}

#[derive(Debug, Clone)]
pub struct MtpOutput<T> {
    pub loss: T,
    pub pred: Mat<T>,
    pub cache: MtpCache<T>,
}

impl MtpPredictor {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        sensors: usize,
        tokens: usize,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(MtpPredictor {
            query: ps.add(format!("{name}.query"), &[dim], Init::TruncNormal(0.02), rng)?,
            sensor_emb: ps.add(format!("{name}.sensor_emb"), &[sensors, dim], Init::TruncNormal(0.02), rng)?,
            pos_emb: ps.add(format!("{name}.pos_emb"), &[tokens, dim], Init::TruncNormal(0.02), rng)?,
            block: TransformerBlock::new(ps, &format!("{name}.block"), dim, heads, hidden, rng)?,
            head: Mlp::new(ps, &format!("{name}.head"), dim, hidden, dim, rng)?,
            sensors,
            tokens,
            dim,
        })
    }

    fn check<T: Real>(&self, z: &[Mat<T>], mask: &MaskSet) -> Result<()> {
        if z.len() != self.sensors || z.iter().any(|m| m.shape() != (self.tokens, self.dim)) {
            return Err(Error::shape(
                "mtp_loss",
                format!("{} sensors of {}×{} tokens", self.sensors, self.tokens, self.dim),
                format!("{} sensors", z.len()),
            ));
        }
        if mask.sensors != self.sensors || mask.tokens != self.tokens {
            return Err(Error::shape(
                "mtp_loss",
                format!("mask over {}×{}", self.sensors, self.tokens),
                format!("{}×{}", mask.sensors, mask.tokens),
            ));
        }
        if mask.positions.iter().any(|&(s, k)| s >= self.sensors || k >= self.tokens)
            || mask.table().iter().filter(|&&b| b).count() != mask.len()
        {
            return Err(Error::range("mask", "positions must be unique and in range"));
        }
        Ok(())
    }

    /// Predictions for the masked slots (in mask order) and the loss against `z`.
    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, z: &[Mat<T>], mask: &MaskSet) -> Result<MtpOutput<T>> {
        self.check(z, mask)?;
        let (n, t, d) = (self.sensors, self.tokens, self.dim);
        let (q, se, pe) = (ps.get(self.query), ps.get(self.sensor_emb), ps.get(self.pos_emb));
        let masked = mask.table();
        let mut x = Mat::zeros(n * t, d);
        for s in 0..n {
            for k in 0..t {
                let src = if masked[s * t + k] { q } else { z[s].row(k) };
                let row = x.row_mut(s * t + k);
                for c in 0..d {
                    row[c] = src[c] + se[s * d + c] + pe[k * d + c];
                }
            }
        }
        let (h, attn) = self.block.forward(ps, &x)?;
        let picked = Mat::from_fn(mask.len(), d, |r, c| {
            let (s, k) = mask.positions[r];
            h.at(s * t + k, c)
        });
        let (pred, gathered) = self.head.forward(ps, &picked)?;
        let target = Mat::from_fn(mask.len(), d, |r, c| {
            let (s, k) = mask.positions[r];
            z[s].at(k, c)
        });
        let (loss, dpred) = mtp_mse(&pred, &target)?;
        Ok(MtpOutput {
            loss,
            pred,
            cache: MtpCache { attn, gathered, dpred },
        })
    }

    /// Backpropagate `scale × loss`; returns the gradient with respect to `z`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut Grads<T>,
        out: &MtpOutput<T>,
        mask: &MaskSet,
        scale: T,
        stop_grad: bool,
    ) -> Vec<Mat<T>> {
        let (n, t, d) = (self.sensors, self.tokens, self.dim);
        let mut dz: Vec<Mat<T>> = (0..n).map(|_| Mat::zeros(t, d)).collect();
        if mask.is_empty() {
            return dz;
        }
        let mut dpred = out.cache.dpred.clone();
        dpred.data.iter_mut().for_each(|v| *v *= scale);
        let dpicked = self.head.backward(ps, grads, &out.cache.gathered, &dpred);
        let mut dh = Mat::zeros(n * t, d);
        for (r, &(s, k)) in mask.positions.iter().enumerate() {
            dh.row_mut(s * t + k).copy_from_slice(dpicked.row(r));
            if !stop_grad {
                for (g, &v) in dz[s].row_mut(k).iter_mut().zip(dpred.row(r)) {
                    *g -= v;
                }
            }
        }
        let dx = self.block.backward(ps, grads, &out.cache.attn, &dh);
        let masked = mask.table();
        for s in 0..n {
            for k in 0..t {
                let row = dx.row(s * t + k);
                {
                    let gse = &mut grads.get_mut(self.sensor_emb)[s * d..(s + 1) * d];
                    gse.iter_mut().zip(row).for_each(|(g, &v)| *g += v);
                }
                {
                    let gpe = &mut grads.get_mut(self.pos_emb)[k * d..(k + 1) * d];
                    gpe.iter_mut().zip(row).for_each(|(g, &v)| *g += v);
                }
                if masked[s * t + k] {
                    grads.get_mut(self.query).iter_mut().zip(row).for_each(|(g, &v)| *g += v);
                } else {
                    dz[s].row_mut(k).iter_mut().zip(row).for_each(|(g, &v)| *g += v);
                }
            }
        }
        dz
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub align: AlignBreakdown,
    pub mtp: f64,
    pub total: f64,
}

/// `L_align + λ_mtp · L_mtp`.
pub fn total_loss(align: &AlignBreakdown, mtp: f64, cfg: &LossConfig) -> LossBreakdown {
    let w = cfg.weights()[3];
    LossBreakdown {
        align: *align,
        mtp,
        total: align.total + if w > 0.0 { w * mtp } else { 0.0 },
    }
}
