//! Per-sensor IMU encoders, the body-part encoder, the global aggregator and
//! the projection heads into the shared space.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    AttentionCache, ConvStack, ConvStackCache, Grads, Init, LayerNorm, LayerNormCache, Linear, Mlp, MlpCache, ParamId,
    ParamStore, TransformerBlock,
};
use crate::real::Real;
use crate::tensor::{l2_normalize, l2_normalize_backward, Mat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Token and local embedding width `D`.
    pub dim: usize,
    /// Global embedding width `D'`.
    pub global_dim: usize,
    /// Shared-space width.
    pub proj_dim: usize,
    /// Frames per window `F`.
    pub frames: usize,
    /// Patch length `f`.
    pub patch_len: usize,
    /// Hidden conv widths; a final layer to `dim` is appended.
    pub conv_channels: Vec<usize>,
    pub conv_kernel: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub blocks: usize,
    pub agg_hidden: usize,
    /// One IMU encoder per sensor (otherwise a single shared one).
    pub per_sensor_imu: bool,
    /// One part encoder shared across parts with a part-id embedding.
    pub shared_part_encoder: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 256,
            global_dim: 256,
            proj_dim: 256,
            frames: 250,
            patch_len: 10,
            conv_channels: vec![64, 128],
            conv_kernel: 5,
            heads: 4,
            ffn_hidden: 512,
            blocks: 1,
            agg_hidden: 512,
            per_sensor_imu: true,
            shared_part_encoder: true,
        }
    }
}

impl EncoderConfig {
    pub fn tokens(&self) -> usize {
        self.frames / self.patch_len.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("dim", self.dim),
            ("global_dim", self.global_dim),
            ("proj_dim", self.proj_dim),
            ("frames", self.frames),
            ("patch_len", self.patch_len),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("agg_hidden", self.agg_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("encoder {n} must be positive")));
            }
        }
        if !self.frames.is_multiple_of(self.patch_len) {
            return Err(Error::Config(format!(
                "frames {} not divisible by patch length {}",
                self.frames, self.patch_len
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("{} heads do not divide dim {}", self.heads, self.dim)));
        }
        if self.conv_kernel.is_multiple_of(2) || self.conv_channels.contains(&0) {
            return Err(Error::Config("conv kernel must be odd and channels positive".into()));
        }
        Ok(())
    }
}

/// Regroup `F × D` features into `T × (f·D)` patch rows (`T = F/f`).
pub fn patchify<T: Real>(features: &Mat<T>, f: usize) -> Result<Mat<T>> {
    if f == 0 || !features.rows.is_multiple_of(f) {
        return Err(Error::shape(
            "patchify",
            format!("frame count divisible by {f}"),
            format!("{}", features.rows),
        ));
    }
    // Row-major storage makes f consecutive rows one contiguous patch.
    Mat::from_vec(features.rows / f, features.cols * f, features.data.clone())
}

pub fn mean_pool<T: Real>(tokens: &Mat<T>) -> Vec<T> {
    tokens.col_mean()
}

/// Spread the gradient of a mean pool back over `rows` rows.
pub fn mean_pool_backward<T: Real>(d: &[T], rows: usize) -> Mat<T> {
    let s = T::one() / T::of(rows as f64);
    Mat::from_fn(rows, d.len(), |_, c| d[c] * s)
}

/// Conv stack, patch projection with positional (and optional part-id)
/// embeddings, then transformer blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub conv: ConvStack,
    pub patch: Linear,
    pub pos: ParamId,
    pub part_emb: Option<ParamId>,
    pub blocks: Vec<TransformerBlock>,
    pub c_in: usize,
    pub patch_len: usize,
    pub tokens: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct BranchCache<T> {
    conv: ConvStackCache<T>,
    patches: Mat<T>,
    blocks: Vec<AttentionCache<T>>,
}

impl Branch {
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        parts: Option<usize>,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut channels = cfg.conv_channels.clone();
        channels.push(cfg.dim);
        let t = cfg.tokens();
        Ok(Branch {
            conv: ConvStack::new(ps, &format!("{name}.conv"), c_in, &channels, cfg.conv_kernel, rng)?,
            patch: Linear::new(ps, &format!("{name}.patch"), cfg.patch_len * cfg.dim, cfg.dim, true, rng)?,
            pos: ps.add(format!("{name}.pos"), &[t, cfg.dim], Init::TruncNormal(0.02), rng)?,
            part_emb: match parts {
                Some(p) => Some(ps.add(format!("{name}.part_emb"), &[p, cfg.dim], Init::TruncNormal(0.02), rng)?),
                None => None,
            },
            blocks: (0..cfg.blocks)
                .map(|b| TransformerBlock::new(ps, &format!("{name}.block{b}"), cfg.dim, cfg.heads, cfg.ffn_hidden, rng))
                .collect::<Result<_>>()?,
            c_in,
            patch_len: cfg.patch_len,
            tokens: t,
            dim: cfg.dim,
        })
    }

    /// Tokens `T × D` for one `F × C` window.
    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Mat<T>, part: Option<usize>) -> Result<(Mat<T>, BranchCache<T>)> {
        if x.cols != self.c_in || x.rows != self.tokens * self.patch_len {
            return Err(Error::shape(
                "encode",
                format!("{}×{}", self.tokens * self.patch_len, self.c_in),
                format!("{}×{}", x.rows, x.cols),
            ));
        }
        let (feat, conv) = self.conv.forward(ps, x)?;
        let patches = patchify(&feat, self.patch_len)?;
        let mut h = self.patch.forward(ps, &patches)?;
        let pos = ps.get(self.pos);
        for (v, &p) in h.data.iter_mut().zip(pos) {
            *v += p;
        }
        if let (Some(id), Some(k)) = (self.part_emb, part) {
            let e = &ps.get(id)[k * self.dim..(k + 1) * self.dim];
            for r in 0..h.rows {
                h.row_mut(r).iter_mut().zip(e).for_each(|(v, &p)| *v += p);
            }
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(ps, &h)?;
            blocks.push(c);
            h = y;
        }
        Ok((h, BranchCache { conv, patches, blocks }))
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &BranchCache<T>,
        d_tokens: &Mat<T>,
        part: Option<usize>,
    ) {
        let mut d = d_tokens.clone();
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            d = b.backward(ps, grads, c, &d);
        }
        for (g, &v) in grads.get_mut(self.pos).iter_mut().zip(&d.data) {
            *g += v;
        }
        if let (Some(id), Some(k)) = (self.part_emb, part) {
            let g = &mut grads.get_mut(id)[k * self.dim..(k + 1) * self.dim];
            for r in 0..d.rows {
                g.iter_mut().zip(d.row(r)).for_each(|(g, &v)| *g += v);
            }
        }
        let dp = self.patch.backward(ps, grads, &cache.patches, &d);
        let dfeat = Mat {
            rows: self.tokens * self.patch_len,
            cols: self.dim,
            data: dp.data,
        };
        self.conv.backward(ps, grads, &cache.conv, &dfeat);
    }
}

/// `G = MLP(LayerNorm(concat(Z̄₁ … Z̄_N)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregator {
    pub norm: LayerNorm,
    pub mlp: Mlp,
    pub sensors: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct AggregatorCache<T> {
    norm: LayerNormCache<T>,
    mlp: MlpCache<T>,
}

impl Aggregator {
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        sensors: usize,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let w = sensors * cfg.dim;
        Ok(Aggregator {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), w, rng)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), w, cfg.agg_hidden, cfg.global_dim, rng)?,
            sensors,
            dim: cfg.dim,
        })
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, locals: &[Vec<T>]) -> Result<(Vec<T>, AggregatorCache<T>)> {
        if locals.len() != self.sensors || locals.iter().any(|l| l.len() != self.dim) {
            return Err(Error::shape(
                "aggregate_global",
                format!("{} locals of width {}", self.sensors, self.dim),
                format!("{}", locals.len()),
            ));
        }
        let x = Mat::from_vec(1, self.sensors * self.dim, locals.concat())?;
        let (n, norm) = self.norm.forward(ps, &x)?;
        let (g, mlp) = self.mlp.forward(ps, &n)?;
        Ok((g.data, AggregatorCache { norm, mlp }))
    }

    /// Gradient per local vector.
    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, grads: &mut Grads<T>, cache: &AggregatorCache<T>, dg: &[T]) -> Vec<Vec<T>> {
        let dg = Mat {
            rows: 1,
            cols: dg.len(),
            data: dg.to_vec(),
        };
        let dn = self.mlp.backward(ps, grads, &cache.mlp, &dg);
        let dx = self.norm.backward(ps, grads, &cache.norm, &dn);
        dx.data.chunks(self.dim).map(|c| c.to_vec()).collect()
    }
}

/// Linear map followed by row-wise L2 normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub lin: Linear,
}

#[derive(Debug, Clone)]
pub struct Projected<T> {
    pub input: Mat<T>,
    pub unit: Mat<T>,
    pub norms: Vec<T>,
    /// Rows whose projection was the zero vector.
    pub degenerate: usize,
}

impl Projection {
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        // No bias: the map stays linear, so input scale never changes direction.
        Ok(Projection {
            lin: Linear::new(ps, name, d_in, d_out, false, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: Mat<T>) -> Result<Projected<T>> {
        let raw = self.lin.forward(ps, &x)?;
        let mut unit = Mat::zeros(raw.rows, raw.cols);
        let mut norms = Vec::with_capacity(raw.rows);
        let mut degenerate = 0;
        for r in 0..raw.rows {
            let (u, n) = l2_normalize(raw.row(r));
            if u.iter().all(|v| *v == T::zero()) {
                degenerate += 1;
            }
            unit.row_mut(r).copy_from_slice(&u);
            norms.push(n);
        }
        Ok(Projected {
            input: x,
            unit,
            norms,
            degenerate,
        })
    }

    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, grads: &mut Grads<T>, p: &Projected<T>, d_unit: &Mat<T>) -> Mat<T> {
        let mut draw = Mat::zeros(d_unit.rows, d_unit.cols);
        for r in 0..d_unit.rows {
            let g = l2_normalize_backward(p.unit.row(r), p.norms[r], d_unit.row(r));
            draw.row_mut(r).copy_from_slice(&g);
        }
        self.lin.backward(ps, grads, &p.input, &draw)
    }
}
