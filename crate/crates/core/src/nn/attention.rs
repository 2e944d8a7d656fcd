//! Pre-norm transformer block: `x + Attn(LN(x))`, then `+ FF(LN(·))`.
//!
//! Input is a batch of sequences stacked row-wise: `(batch · len) × d_model`.
//! [`Queries::Last`] evaluates only the final position of every sequence,
//! which is all a prediction head reading one position needs; keys and
//! values still cover the whole sequence.

use rand::{Rng, RngCore};

use super::dense::{Activation, DenseGrads, DenseLayer};
use super::dropout::{apply_mask, dropout};
use super::gemm_strided;
use super::norm::{LayerNorm, LayerNormCache, LayerNormGrads};
use super::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Queries {
    All,
    Last,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    d_model: usize,
    heads: usize,
    max_len: usize,
    causal: bool,
    pub dropout: f64,
    pub ln1: LayerNorm,
    pub wq: DenseLayer,
    pub wk: DenseLayer,
    pub wv: DenseLayer,
    pub wo: DenseLayer,
    pub ln2: LayerNorm,
    pub ff1: DenseLayer,
    pub ff2: DenseLayer,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    batch: usize,
    len: usize,
    queries: Queries,
    ln1: LayerNormCache,
    h1: Matrix,
    hq: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<f64>,
    ctx: Matrix,
    attn: Matrix,
    mask_attn: Vec<f64>,
    ln2: LayerNormCache,
    h2: Matrix,
    f1: Matrix,
    f2: Matrix,
    mask_ff: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub ln1: LayerNormGrads,
    pub wq: DenseGrads,
    pub wk: DenseGrads,
    pub wv: DenseGrads,
    pub wo: DenseGrads,
    pub ln2: LayerNormGrads,
    pub ff1: DenseGrads,
    pub ff2: DenseGrads,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(
        d_model: usize,
        heads: usize,
        ff_dim: usize,
        max_len: usize,
        causal: bool,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::InvalidArgument(format!("{heads} heads do not divide d_model {d_model}")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidArgument(format!("dropout rate {dropout} outside [0, 1)")));
        }
        Ok(AttentionBlock {
            d_model,
            heads,
            max_len,
            causal,
            dropout,
            ln1: LayerNorm::new(d_model),
            wq: DenseLayer::new(d_model, d_model, Activation::Identity, rng),
            wk: DenseLayer::new(d_model, d_model, Activation::Identity, rng),
            wv: DenseLayer::new(d_model, d_model, Activation::Identity, rng),
            wo: DenseLayer::new(d_model, d_model, Activation::Identity, rng),
            ln2: LayerNorm::new(d_model),
            ff1: DenseLayer::new(d_model, ff_dim, Activation::Relu, rng),
            ff2: DenseLayer::new(ff_dim, d_model, Activation::Identity, rng),
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn ff_dim(&self) -> usize {
        self.ff1.outputs()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn is_causal(&self) -> bool {
        self.causal
    }

    /// Inference forward pass.
    pub fn forward(&self, x: &Matrix, len: usize, queries: Queries) -> Result<(Matrix, AttentionCache)> {
        self.forward_impl(x, len, queries, None)
    }

    /// Training forward pass; dropout draws from `rng`.
    pub fn forward_train(
        &self,
        x: &Matrix,
        len: usize,
        queries: Queries,
        rng: &mut dyn RngCore,
    ) -> Result<(Matrix, AttentionCache)> {
        self.forward_impl(x, len, queries, Some(rng))
    }

    fn query_count(&self, len: usize, queries: Queries) -> usize {
        match queries {
            Queries::All => len,
            Queries::Last => 1,
        }
    }

    fn forward_impl(
        &self,
        x: &Matrix,
        len: usize,
        queries: Queries,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<(Matrix, AttentionCache)> {
        if len == 0 || len > self.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {len} outside 1..={}",
                self.max_len
            )));
        }
        if x.cols() != self.d_model || x.rows() % len != 0 {
            return Err(Error::shape(
                "attention_forward",
                format!("(batch·{len}) x {}", self.d_model),
                format!("{}x{}", x.rows(), x.cols()),
            ));
        }
        let d = self.d_model;
        let batch = x.rows() / len;
        let nq = self.query_count(len, queries);
        let q_off = len - nq;

        let (h1, ln1) = self.ln1.forward(x)?;
        let hq = gather_queries(&h1, batch, len, nq);
        let xq = gather_queries(x, batch, len, nq);
        let q = self.wq.forward(&hq)?;
        let k = self.wk.forward(&h1)?;
        let v = self.wv.forward(&h1)?;

        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut probs = vec![0.0; batch * self.heads * nq * len];
        let mut ctx = Matrix::zeros(batch * nq, d);
        for b in 0..batch {
            for h in 0..self.heads {
                let p = &mut probs[(b * self.heads + h) * nq * len..][..nq * len];
                let qo = b * nq * d + h * hd;
                let ko = b * len * d + h * hd;
                gemm_strided(
                    nq,
                    hd,
                    len,
                    scale,
                    (&q.as_slice()[qo..], d, 1),
                    (&k.as_slice()[ko..], 1, d),
                    0.0,
                    (p, len, 1),
                );
                for i in 0..nq {
                    let visible = if self.causal { q_off + i + 1 } else { len };
                    let row = &mut p[i * len..(i + 1) * len];
                    super::loss::softmax_in_place(&mut row[..visible]);
                    row[visible..].iter_mut().for_each(|v| *v = 0.0);
                }
                gemm_strided(
                    nq,
                    len,
                    hd,
                    1.0,
                    (p, len, 1),
                    (&v.as_slice()[ko..], d, 1),
                    0.0,
                    (&mut ctx.as_mut_slice()[qo..], d, 1),
                );
            }
        }
        let attn = self.wo.forward(&ctx)?;
        let (attn_drop, mask_attn) = match rng.as_deref_mut() {
            Some(r) => dropout(&attn, self.dropout, r, true)?,
            None => (attn.clone(), Vec::new()),
        };
        let mut r1 = xq;
        r1.add_assign(&attn_drop);

        let (h2, ln2) = self.ln2.forward(&r1)?;
        let f1 = self.ff1.forward(&h2)?;
        let f2 = self.ff2.forward(&f1)?;
        let (f_drop, mask_ff) = match rng.as_deref_mut() {
            Some(r) => dropout(&f2, self.dropout, r, true)?,
            None => (f2.clone(), Vec::new()),
        };
        let mut out = r1;
        out.add_assign(&f_drop);

        let cache = AttentionCache {
            batch,
            len,
            queries,
            ln1,
            h1,
            hq,
            q,
            k,
            v,
            probs,
            ctx,
            attn,
            mask_attn,
            ln2,
            h2,
            f1,
            f2,
            mask_ff,
        };
        Ok((out, cache))
    }

    /// Backward pass. `grad_out` has one row per evaluated query position;
    /// the returned input gradient covers every input row.
    pub fn backward(&self, cache: &AttentionCache, grad_out: &Matrix) -> Result<(Matrix, AttentionGrads)> {
        let d = self.d_model;
        let (batch, len) = (cache.batch, cache.len);
        let nq = self.query_count(len, cache.queries);
        let q_off = len - nq;
        if grad_out.shape() != (batch * nq, d) {
            return Err(Error::shape(
                "attention_backward",
                format!("{}x{d}", batch * nq),
                format!("{:?}", grad_out.shape()),
            ));
        }

        // Feed-forward branch.
        let mut df2 = grad_out.clone();
        apply_mask(&mut df2, &cache.mask_ff);
        let (df1, g_ff2) = self.ff2.backward(&cache.f1, &cache.f2, &df2)?;
        let (dh2, g_ff1) = self.ff1.backward(&cache.h2, &cache.f1, &df1)?;
        let (dr1_ln, g_ln2) = self.ln2.backward(&cache.ln2, &dh2);
        let mut dr1 = grad_out.clone();
        dr1.add_assign(&dr1_ln);

        // Attention branch.
        let mut dattn = dr1.clone();
        apply_mask(&mut dattn, &cache.mask_attn);
        let (dctx, g_wo) = self.wo.backward(&cache.ctx, &cache.attn, &dattn)?;

        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = Matrix::zeros(batch * nq, d);
        let mut dk = Matrix::zeros(batch * len, d);
        let mut dv = Matrix::zeros(batch * len, d);
        let mut dp = vec![0.0; nq * len];
        for b in 0..batch {
            for h in 0..self.heads {
                let p = &cache.probs[(b * self.heads + h) * nq * len..][..nq * len];
                let qo = b * nq * d + h * hd;
                let ko = b * len * d + h * hd;
                // dP = dctx · Vᵀ
                gemm_strided(
                    nq,
                    hd,
                    len,
                    1.0,
                    (&dctx.as_slice()[qo..], d, 1),
                    (&cache.v.as_slice()[ko..], 1, d),
                    0.0,
                    (&mut dp, len, 1),
                );
                // dV = Pᵀ · dctx
                gemm_strided(
                    len,
                    nq,
                    hd,
                    1.0,
                    (p, 1, len),
                    (&dctx.as_slice()[qo..], d, 1),
                    0.0,
                    (&mut dv.as_mut_slice()[ko..], d, 1),
                );
                // Softmax backward, restricted to visible keys.
                for i in 0..nq {
                    let visible = if self.causal { q_off + i + 1 } else { len };
                    let pr = &p[i * len..i * len + visible];
                    let dr = &mut dp[i * len..i * len + visible];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (g, pv) in dr.iter_mut().zip(pr) {
                        *g = pv * (*g - dot);
                    }
                    dp[i * len + visible..(i + 1) * len].iter_mut().for_each(|v| *v = 0.0);
                }
                // dQ = dS · K · scale, dK = dSᵀ · Q · scale
                gemm_strided(
                    nq,
                    len,
                    hd,
                    scale,
                    (&dp, len, 1),
                    (&cache.k.as_slice()[ko..], d, 1),
                    0.0,
                    (&mut dq.as_mut_slice()[qo..], d, 1),
                );
                gemm_strided(
                    len,
                    nq,
                    hd,
                    scale,
                    (&dp, 1, len),
                    (&cache.q.as_slice()[qo..], d, 1),
                    0.0,
                    (&mut dk.as_mut_slice()[ko..], d, 1),
                );
            }
        }
        let (dhq, g_wq) = self.wq.backward(&cache.hq, &cache.q, &dq)?;
        let (mut dh1, g_wk) = self.wk.backward(&cache.h1, &cache.k, &dk)?;
        let (dh1_v, g_wv) = self.wv.backward(&cache.h1, &cache.v, &dv)?;
        dh1.add_assign(&dh1_v);
        scatter_add_queries(&mut dh1, &dhq, batch, len, nq);
        let (mut dx, g_ln1) = self.ln1.backward(&cache.ln1, &dh1);
        scatter_add_queries(&mut dx, &dr1, batch, len, nq);

        Ok((
            dx,
            AttentionGrads {
                ln1: g_ln1,
                wq: g_wq,
                wk: g_wk,
                wv: g_wv,
                wo: g_wo,
                ln2: g_ln2,
                ff1: g_ff1,
                ff2: g_ff2,
            },
        ))
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(16);
        out.extend(self.ln1.params_mut());
        out.extend(self.wq.params_mut());
        out.extend(self.wk.params_mut());
        out.extend(self.wv.params_mut());
        out.extend(self.wo.params_mut());
        out.extend(self.ln2.params_mut());
        out.extend(self.ff1.params_mut());
        out.extend(self.ff2.params_mut());
        out
    }
}

impl AttentionGrads {
    /// Same order as [`AttentionBlock::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(16);
        out.extend(self.ln1.slices());
        out.extend(self.wq.slices());
        out.extend(self.wk.slices());
        out.extend(self.wv.slices());
        out.extend(self.wo.slices());
        out.extend(self.ln2.slices());
        out.extend(self.ff1.slices());
        out.extend(self.ff2.slices());
        out
    }
}

fn gather_queries(x: &Matrix, batch: usize, len: usize, nq: usize) -> Matrix {
    if nq == len {
        return x.clone();
    }
    let mut out = Matrix::zeros(batch * nq, x.cols());
    for b in 0..batch {
        for i in 0..nq {
            out.row_mut(b * nq + i).copy_from_slice(x.row(b * len + len - nq + i));
        }
    }
    out
}

fn scatter_add_queries(dst: &mut Matrix, src: &Matrix, batch: usize, len: usize, nq: usize) {
    for b in 0..batch {
        for i in 0..nq {
            let row = dst.row_mut(b * len + len - nq + i);
            for (a, s) in row.iter_mut().zip(src.row(b * nq + i)) {
                *a += s;
            }
        }
    }
}
