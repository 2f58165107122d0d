//! One decoder layer: multi-channel self-attention followed by the
//! multi-stage feed-forward network.
//!
//! Attention runs three channels over the same values `v`:
//!
//! * semantic: `a_h = φ(q·kᵀ) / √d_k`
//! * temporal: `a_t[i][j] = α[bucket(t_i − t_j)]`
//! * positional: `a_p[i][j] = β[i − j]`
//!
//! Causal pairs (`j ≤ i`) between two real positions keep their score and
//! every other entry is zeroed. Because `φ` attention is not normalised,
//! zeroing is the whole mask.

use fxmm_tensor::{Scalar, Tensor, Var};

use crate::moe::{MoeConfig, MoeLayer, Site};
use crate::params::{glorot, truncated_normal, Forward, ParamId, Params};
use crate::seed::Rng;
use crate::{Error, Result};

/// Init std of the temporal and positional bias tables.
pub const BIAS_INIT_STD: f64 = 0.02;

/// Log₂ bucket of a timestamp gap in seconds. Gaps of 0 and 1 share bucket 0,
/// then `[2^b, 2^(b+1))` maps to `b`, capped at `buckets − 1`.
pub fn time_bucket(delta: i64, buckets: usize) -> usize {
    let d = delta.max(1) as u64;
    let b = (63 - d.leading_zeros()) as usize;
    b.min(buckets.saturating_sub(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockConfig {
    /// Stream width `w`.
    pub width: usize,
    /// Attention width `d_h`, split evenly across heads.
    pub head_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub time_buckets: usize,
    pub max_len: usize,
    pub moe: MoeConfig,
}

impl BlockConfig {
    /// Defaults for width `w`: `d_h = w`, `d_FFN = 4w`, one head, 32 buckets.
    pub fn for_width(width: usize, max_len: usize, moe: MoeConfig) -> Self {
        Self {
            width,
            head_dim: width,
            heads: 1,
            ffn_dim: 4 * width,
            time_buckets: 32,
            max_len,
            moe,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.head_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::config("block widths must be positive"));
        }
        if self.heads == 0 || !self.head_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "head_dim {} is not divisible by {} heads",
                self.head_dim, self.heads
            )));
        }
        if self.time_buckets == 0 || self.max_len == 0 {
            return Err(Error::config("time_buckets and max_len must be positive"));
        }
        if !self.moe.placement.is_empty() {
            self.moe.validate()?;
        }
        Ok(())
    }
}

/// Timestamps and validity for a `[batch × len]` block of positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionContext {
    pub batch: usize,
    pub len: usize,
    pub timestamps: Vec<i64>,
    pub valid: Vec<bool>,
}

impl AttentionContext {
    pub fn new(batch: usize, len: usize, timestamps: Vec<i64>, valid: Vec<bool>) -> Result<Self> {
        if timestamps.len() != batch * len || valid.len() != batch * len {
            return Err(Error::config(format!(
                "context of {batch}×{len} needs {} timestamps and flags, got {} and {}",
                batch * len,
                timestamps.len(),
                valid.len()
            )));
        }
        Ok(Self {
            batch,
            len,
            timestamps,
            valid,
        })
    }

    /// Every position real, all timestamps zero.
    pub fn dense(batch: usize, len: usize) -> Self {
        Self {
            batch,
            len,
            timestamps: vec![0; batch * len],
            valid: vec![true; batch * len],
        }
    }

    /// Stacks `times` copies along the batch axis.
    pub fn repeat(&self, times: usize) -> Self {
        Self {
            batch: self.batch * times,
            len: self.len,
            timestamps: self.timestamps.repeat(times),
            valid: self.valid.repeat(times),
        }
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.len
    }

    /// `[batch × len × len]` with 1 on causal pairs of real positions.
    pub fn mask<T: Scalar>(&self) -> Tensor<T> {
        let n = self.len;
        let mut m = vec![T::zero(); self.batch * n * n];
        for b in 0..self.batch {
            let valid = &self.valid[b * n..(b + 1) * n];
            for i in (0..n).filter(|&i| valid[i]) {
                for j in (0..=i).filter(|&j| valid[j]) {
                    m[(b * n + i) * n + j] = T::one();
                }
            }
        }
        Tensor::new(vec![self.batch, n, n], m).expect("mask shape")
    }
}

/// Gated feed-forward `(φ(x·W1) ⊗ (x·W2))·W3`.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
}

impl Ffn {
    pub fn build<T: Scalar>(
        params: &mut Params<T>,
        prefix: &str,
        width: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            w1: params.add(format!("{prefix}.w1"), glorot(rng, width, hidden)),
            w2: params.add(format!("{prefix}.w2"), glorot(rng, width, hidden)),
            w3: params.add(format!("{prefix}.w3"), glorot(rng, hidden, width)),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.w2, self.w3]
    }

    /// `x` is `[tokens × w]`.
    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (w1, w2, w3) = (fwd.p(self.w1), fwd.p(self.w2), fwd.p(self.w3));
        let a = fwd.tape.matmul(x, w1)?;
        let a = fwd.tape.silu(a);
        let b = fwd.tape.matmul(x, w2)?;
        let g = fwd.tape.mul(a, b)?;
        Ok(fwd.tape.matmul(g, w3)?)
    }
}

/// A linear projection, either dense or a mixture of linear experts.
#[derive(Debug, Clone)]
pub enum Projection {
    Dense(ParamId),
    Experts(MoeLayer),
}

impl Projection {
    fn build<T: Scalar>(
        params: &mut Params<T>,
        label: &str,
        input: usize,
        output: usize,
        moe: Option<&MoeConfig>,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(match moe {
            Some(cfg) => Projection::Experts(MoeLayer::linear(params, label, input, output, cfg, rng)?),
            None => Projection::Dense(params.add(label.to_string(), glorot(rng, input, output))),
        })
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<'_, T>, x: Var, active: &[bool]) -> Result<Var> {
        match self {
            Projection::Dense(w) => {
                let w = fwd.p(*w);
                Ok(fwd.tape.matmul(x, w)?)
            }
            Projection::Experts(layer) => layer.forward_masked(fwd, x, active),
        }
    }

    pub fn is_experts(&self) -> bool {
        matches!(self, Projection::Experts(_))
    }
}

#[derive(Debug, Clone)]
pub enum FeedForward {
    Dense(Ffn),
    Experts(MoeLayer),
}

impl FeedForward {
    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<'_, T>, x: Var, active: &[bool]) -> Result<Var> {
        match self {
            FeedForward::Dense(ffn) => ffn.forward(fwd, x),
            FeedForward::Experts(layer) => layer.forward_masked(fwd, x, active),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FuxiBlock {
    cfg: BlockConfig,
    attn_gain: ParamId,
    out_gain: ParamId,
    ffn_gain: ParamId,
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub u: Projection,
    pub w_o: ParamId,
    pub ffn: FeedForward,
    pub alpha: ParamId,
    pub beta: ParamId,
}

impl FuxiBlock {
    /// Registers one layer's parameters under `prefix`, with experts at the
    /// sites named in `cfg.moe.placement`.
    pub fn build<T: Scalar>(
        params: &mut Params<T>,
        prefix: &str,
        cfg: &BlockConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (w, dh) = (cfg.width, cfg.head_dim);
        let moe = |site: Site| cfg.moe.placement.contains(site).then_some(&cfg.moe);

        let attn_gain = params.add(format!("{prefix}.attn_norm"), Tensor::full(vec![w], T::one()));
        let q = Projection::build(params, &format!("{prefix}.w_q"), w, dh, moe(Site::Q), rng)?;
        let k = Projection::build(params, &format!("{prefix}.w_k"), w, dh, moe(Site::K), rng)?;
        let v = Projection::build(params, &format!("{prefix}.w_v"), w, dh, moe(Site::V), rng)?;
        let u = Projection::build(params, &format!("{prefix}.w_u"), w, 3 * dh, moe(Site::U), rng)?;
        let alpha = params.add(
            format!("{prefix}.alpha"),
            truncated_normal(rng, vec![cfg.time_buckets], BIAS_INIT_STD),
        );
        let beta = params.add(
            format!("{prefix}.beta"),
            truncated_normal(rng, vec![cfg.max_len], BIAS_INIT_STD),
        );
        let out_gain = params.add(format!("{prefix}.out_norm"), Tensor::full(vec![3 * dh], T::one()));
        let w_o = params.add(format!("{prefix}.w_o"), glorot(rng, 3 * dh, w));
        let ffn_gain = params.add(format!("{prefix}.ffn_norm"), Tensor::full(vec![w], T::one()));
        let ffn = match moe(Site::Ffn) {
            Some(m) => FeedForward::Experts(MoeLayer::ffn(params, &format!("{prefix}.ffn"), w, cfg.ffn_dim, m, rng)?),
            None => FeedForward::Dense(Ffn::build(params, &format!("{prefix}.ffn"), w, cfg.ffn_dim, rng)),
        };
        Ok(Self {
            cfg: cfg.clone(),
            attn_gain,
            out_gain,
            ffn_gain,
            q,
            k,
            v,
            u,
            w_o,
            ffn,
            alpha,
            beta,
        })
    }

    pub fn config(&self) -> &BlockConfig {
        &self.cfg
    }

    fn check_input<T: Scalar>(&self, fwd: &Forward<'_, T>, x: Var, ctx: &AttentionContext) -> Result<()> {
        let want = [ctx.batch, ctx.len, self.cfg.width];
        if fwd.tape.shape(x) != want {
            return Err(Error::config(format!(
                "block input shape {:?} does not match context {:?}",
                fwd.tape.shape(x),
                want
            )));
        }
        if ctx.len > self.cfg.max_len {
            return Err(Error::config(format!(
                "sequence length {} exceeds max_len {}",
                ctx.len, self.cfg.max_len
            )));
        }
        Ok(())
    }

    /// Returns `a_h` as `[B·heads × n × n]` and `v` as `[B × n × d_h]`.
    pub fn semantic_attention<T: Scalar>(
        &self,
        fwd: &mut Forward<'_, T>,
        x_prev: Var,
        ctx: &AttentionContext,
    ) -> Result<(Var, Var)> {
        self.check_input(fwd, x_prev, ctx)?;
        let (b, n, w) = (ctx.batch, ctx.len, self.cfg.width);
        let (dh, heads) = (self.cfg.head_dim, self.cfg.heads);
        let dk = dh / heads;

        let x2 = fwd.tape.reshape(x_prev, &[b * n, w])?;
        let gain = fwd.p(self.attn_gain);
        let xn = fwd.tape.rms_norm(x2, gain)?;
        let mut qkv = Vec::with_capacity(3);
        for proj in [&self.q, &self.k, &self.v] {
            let y = proj.forward(fwd, xn, &ctx.valid)?;
            qkv.push(fwd.tape.silu(y));
        }
        let split = |fwd: &mut Forward<'_, T>, y: Var| -> Result<Var> {
            if heads == 1 {
                return Ok(fwd.tape.reshape(y, &[b, n, dh])?);
            }
            let y = fwd.tape.reshape(y, &[b, n, heads, dk])?;
            let y = fwd.tape.swap_axes_12(y)?;
            Ok(fwd.tape.reshape(y, &[b * heads, n, dk])?)
        };
        let q = split(fwd, qkv[0])?;
        let k = split(fwd, qkv[1])?;
        let v = fwd.tape.reshape(qkv[2], &[b, n, dh])?;

        let logits = fwd.tape.bmm(q, k, true)?;
        let act = fwd.tape.silu(logits);
        let scaled = fwd.tape.scale(act, 1.0 / (dk as f64).sqrt());
        let mask = head_mask::<T>(ctx, heads);
        let mask = fwd.tape.constant(mask);
        let a_h = fwd.tape.mul(scaled, mask)?;
        Ok((a_h, v))
    }

    /// `[B × n × n]` temporal channel scores.
    pub fn temporal_bias<T: Scalar>(&self, fwd: &mut Forward<'_, T>, ctx: &AttentionContext) -> Result<Var> {
        let n = ctx.len;
        let mut idx = Vec::with_capacity(ctx.batch * n * n);
        for b in 0..ctx.batch {
            let ts = &ctx.timestamps[b * n..(b + 1) * n];
            for i in 0..n {
                for j in 0..n {
                    let bucket = if j <= i {
                        time_bucket(ts[i] - ts[j], self.cfg.time_buckets)
                    } else {
                        0
                    };
                    idx.push(bucket);
                }
            }
        }
        let alpha = fwd.p(self.alpha);
        self.table_channel(fwd, alpha, &idx, ctx)
    }

    /// `[B × n × n]` positional channel scores.
    pub fn positional_bias<T: Scalar>(&self, fwd: &mut Forward<'_, T>, ctx: &AttentionContext) -> Result<Var> {
        let n = ctx.len;
        if n > self.cfg.max_len {
            return Err(Error::config(format!(
                "sequence length {n} exceeds max_len {}",
                self.cfg.max_len
            )));
        }
        let one: Vec<usize> = (0..n)
            .flat_map(|i| (0..n).map(move |j| i.saturating_sub(j)))
            .collect();
        let idx = one.repeat(ctx.batch);
        let beta = fwd.p(self.beta);
        self.table_channel(fwd, beta, &idx, ctx)
    }

    fn table_channel<T: Scalar>(
        &self,
        fwd: &mut Forward<'_, T>,
        table: Var,
        idx: &[usize],
        ctx: &AttentionContext,
    ) -> Result<Var> {
        let n = ctx.len;
        let g = fwd.tape.gather_rows(table, idx)?;
        let g = fwd.tape.reshape(g, &[ctx.batch, n, n])?;
        let mask = fwd.tape.constant(ctx.mask());
        Ok(fwd.tape.mul(g, mask)?)
    }

    /// `h = RMSNorm(concat(a_h·v, a_t·v, a_p·v) ⊗ φ(x_prev·W_u))`, `[B × n × 3d_h]`.
    pub fn ams_forward<T: Scalar>(
        &self,
        fwd: &mut Forward<'_, T>,
        x_prev: Var,
        ctx: &AttentionContext,
    ) -> Result<Var> {
        let (b, n, w) = (ctx.batch, ctx.len, self.cfg.width);
        let (dh, heads) = (self.cfg.head_dim, self.cfg.heads);
        let dk = dh / heads;

        let (a_h, v) = self.semantic_attention(fwd, x_prev, ctx)?;
        let hv = if heads == 1 {
            fwd.tape.bmm(a_h, v, false)?
        } else {
            let vh = fwd.tape.reshape(v, &[b, n, heads, dk])?;
            let vh = fwd.tape.swap_axes_12(vh)?;
            let vh = fwd.tape.reshape(vh, &[b * heads, n, dk])?;
            let y = fwd.tape.bmm(a_h, vh, false)?;
            let y = fwd.tape.reshape(y, &[b, heads, n, dk])?;
            let y = fwd.tape.swap_axes_12(y)?;
            fwd.tape.reshape(y, &[b, n, dh])?
        };
        let a_t = self.temporal_bias(fwd, ctx)?;
        let tv = fwd.tape.bmm(a_t, v, false)?;
        let a_p = self.positional_bias(fwd, ctx)?;
        let pv = fwd.tape.bmm(a_p, v, false)?;
        let cat = fwd.tape.concat_last(&[hv, tv, pv])?;

        let x2 = fwd.tape.reshape(x_prev, &[b * n, w])?;
        let gate = self.u.forward(fwd, x2, &ctx.valid)?;
        let gate = fwd.tape.silu(gate);
        let gate = fwd.tape.reshape(gate, &[b, n, 3 * dh])?;
        let gated = fwd.tape.mul(cat, gate)?;
        let gain = fwd.p(self.out_gain);
        Ok(fwd.tape.rms_norm(gated, gain)?)
    }

    /// `o = h·W_o + x_prev`, then `x = FFN(RMSNorm(o)) + o`.
    pub fn mffn_forward<T: Scalar>(
        &self,
        fwd: &mut Forward<'_, T>,
        h: Var,
        x_prev: Var,
        ctx: &AttentionContext,
    ) -> Result<Var> {
        let (b, n, w) = (ctx.batch, ctx.len, self.cfg.width);
        let h2 = fwd.tape.reshape(h, &[b * n, 3 * self.cfg.head_dim])?;
        let x2 = fwd.tape.reshape(x_prev, &[b * n, w])?;
        let w_o = fwd.p(self.w_o);
        let proj = fwd.tape.matmul(h2, w_o)?;
        let o = fwd.tape.add(proj, x2)?;
        let gain = fwd.p(self.ffn_gain);
        let on = fwd.tape.rms_norm(o, gain)?;
        let f = self.ffn.forward(fwd, on, &ctx.valid)?;
        let x = fwd.tape.add(f, o)?;
        Ok(fwd.tape.reshape(x, &[b, n, w])?)
    }

    pub fn forward<T: Scalar>(
        &self,
        fwd: &mut Forward<'_, T>,
        x_prev: Var,
        ctx: &AttentionContext,
    ) -> Result<Var> {
        let h = self.ams_forward(fwd, x_prev, ctx)?;
        self.mffn_forward(fwd, h, x_prev, ctx)
    }
}

fn head_mask<T: Scalar>(ctx: &AttentionContext, heads: usize) -> Tensor<T> {
    let m = ctx.mask::<T>();
    if heads == 1 {
        return m;
    }
    let nn = ctx.len * ctx.len;
    let data: Vec<T> = m
        .data()
        .chunks(nn)
        .flat_map(|c| std::iter::repeat_n(c, heads).flatten().copied())
        .collect();
    Tensor::new(vec![ctx.batch * heads, ctx.len, ctx.len], data).expect("mask shape")
}
