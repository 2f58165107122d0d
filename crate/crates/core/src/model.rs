//! The full recommender: `M` embedding streams through one shared block
//! stack, cosine scoring against tied item embeddings, and the
//! sampled-softmax objective.
//!
//! Streams are stacked along the batch axis, so the shared stack runs once
//! over `M·B` sequences and streams never exchange features.

use fxmm_tensor::{kernels, Reduction, Scalar, Var, COSINE_EPS};

use crate::block::{AttentionContext, BlockConfig, FuxiBlock};
use crate::data::{EvalCase, SequenceBatch};
use crate::embedding::{EmbeddingBank, PAD};
use crate::metrics::Scorer;
use crate::moe::MoeConfig;
use crate::params::{Forward, Params};
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Item count including PAD.
    pub num_items: usize,
    pub dim: usize,
    pub streams: usize,
    pub layers: usize,
    pub heads: usize,
    /// Attention width; the stream width when unset.
    pub head_dim: Option<usize>,
    /// FFN hidden width; four times the stream width when unset.
    pub ffn_dim: Option<usize>,
    pub time_buckets: usize,
    pub max_len: usize,
    pub moe: MoeConfig,
    /// Logits are `r / temperature`.
    pub temperature: f64,
    pub reduction: Reduction,
    /// One decoder per stream instead of a shared one.
    pub ensemble: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_items: 0,
            dim: 128,
            streams: 4,
            layers: 2,
            heads: 1,
            head_dim: None,
            ffn_dim: None,
            time_buckets: 32,
            max_len: 50,
            moe: MoeConfig::default(),
            temperature: 1.0,
            reduction: Reduction::Mean,
            ensemble: false,
        }
    }
}

impl ModelConfig {
    pub fn stream_width(&self) -> usize {
        self.dim / self.streams.max(1)
    }

    pub fn block(&self) -> BlockConfig {
        let w = self.stream_width();
        BlockConfig {
            width: w,
            head_dim: self.head_dim.unwrap_or(w),
            heads: self.heads,
            ffn_dim: self.ffn_dim.unwrap_or(4 * w),
            time_buckets: self.time_buckets,
            max_len: self.max_len,
            moe: self.moe.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("layers must be at least 1"));
        }
        self.validate_shapes()
    }

    fn validate_shapes(&self) -> Result<()> {
        if self.streams == 0 || !self.dim.is_multiple_of(self.streams) {
            return Err(Error::config(format!(
                "dim {} is not divisible by {} streams",
                self.dim, self.streams
            )));
        }
        if self.max_len < 2 {
            return Err(Error::config(format!("max_len must be at least 2, got {}", self.max_len)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature must be positive"));
        }
        self.block().validate()
    }
}

/// Final hidden states per stream, each `[B × n × w]`.
#[derive(Debug, Clone)]
pub struct StreamOutputs {
    pub batch: usize,
    pub len: usize,
    pub streams: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct FuxiMme<T: Scalar> {
    cfg: ModelConfig,
    params: Params<T>,
    bank: EmbeddingBank,
    decoders: Vec<Vec<FuxiBlock>>,
}

impl<T: Scalar> FuxiMme<T> {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Self::build_unchecked(cfg, seed)
    }

    /// Like [`build`](Self::build) but allows an empty block stack.
    pub fn build_unchecked(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate_shapes()?;
        let mut params = Params::new();
        let bank = EmbeddingBank::build(&mut params, cfg.num_items, cfg.dim, cfg.streams, seed)?;
        let block = cfg.block();
        let n_dec = if cfg.ensemble { cfg.streams } else { 1 };
        let mut decoders = Vec::with_capacity(n_dec);
        for d in 0..n_dec {
            let mut layers = Vec::with_capacity(cfg.layers);
            for l in 0..cfg.layers {
                let mut rng = seed::rng(seed, seed::STREAM_INIT, 10_000 + (d * 100 + l) as u64);
                let prefix = if cfg.ensemble {
                    format!("decoder{d}.layer{l}")
                } else {
                    format!("layer{l}")
                };
                layers.push(FuxiBlock::build(&mut params, &prefix, &block, &mut rng)?);
            }
            decoders.push(layers);
        }
        Ok(Self {
            cfg: cfg.clone(),
            params,
            bank,
            decoders,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn bank(&self) -> &EmbeddingBank {
        &self.bank
    }

    pub fn decoders(&self) -> &[Vec<FuxiBlock>] {
        &self.decoders
    }

    pub fn embedding_param_count(&self) -> usize {
        self.bank.param_count(&self.params)
    }

    pub fn decoder_param_count(&self) -> usize {
        self.params.count() - self.embedding_param_count()
    }

    /// Restores zero PAD rows after an update.
    pub fn zero_pad_rows(&mut self) {
        self.bank.zero_pad_rows(&mut self.params);
    }

    fn check_batch(&self, batch: &SequenceBatch) -> Result<()> {
        if batch.len > self.cfg.max_len {
            return Err(Error::config(format!(
                "batch length {} exceeds max_len {}",
                batch.len, self.cfg.max_len
            )));
        }
        self.bank.check_ids(&batch.items)
    }

    pub fn encode(&self, fwd: &mut Forward<'_, T>, batch: &SequenceBatch) -> Result<StreamOutputs> {
        self.check_batch(batch)?;
        let (b, n, w, m) = (batch.batch, batch.len, self.cfg.stream_width(), self.cfg.streams);
        let ctx = batch.context();
        let inputs = (0..m)
            .map(|k| self.bank.lookup(fwd, k, &batch.items, b, n))
            .collect::<Result<Vec<_>>>()?;

        let streams = if self.cfg.ensemble {
            inputs
                .into_iter()
                .zip(&self.decoders)
                .map(|(x, layers)| run_stack(fwd, layers, x, &ctx))
                .collect::<Result<Vec<_>>>()?
        } else if m == 1 {
            vec![run_stack(fwd, &self.decoders[0], inputs[0], &ctx)?]
        } else {
            let flat = inputs
                .iter()
                .map(|&x| fwd.tape.reshape(x, &[1, b * n * w]))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let stacked = fwd.tape.concat_last(&flat)?;
            let stacked = fwd.tape.reshape(stacked, &[m * b, n, w])?;
            let out = run_stack(fwd, &self.decoders[0], stacked, &ctx.repeat(m))?;
            (0..m)
                .map(|k| {
                    let rows: Vec<usize> = (k * b..(k + 1) * b).collect();
                    Ok(fwd.tape.gather_rows(out, &rows)?)
                })
                .collect::<Result<Vec<_>>>()?
        };
        Ok(StreamOutputs {
            batch: b,
            len: n,
            streams,
        })
    }

    /// `r = (1/M)·Σ_k cos(x_k at flat position `pos`, e_{item,k})`.
    pub fn score(&self, fwd: &Forward<'_, T>, out: &StreamOutputs, pos: usize, item: usize) -> Result<f64> {
        self.bank.check_ids(&[item])?;
        let w = self.cfg.stream_width();
        let mut total = 0.0;
        for (k, &s) in out.streams.iter().enumerate() {
            let x = &fwd.tape.data(s)[pos * w..(pos + 1) * w];
            let e = &self.params.get(self.bank.table(k)).data()[item * w..(item + 1) * w];
            total += cosine(x, e);
        }
        Ok(total / out.streams.len() as f64)
    }

    /// Per-position cosine scores `[P × C]` for one stream against the
    /// candidate ids `[P × C]`.
    fn candidate_cosines(
        &self,
        fwd: &mut Forward<'_, T>,
        hidden: Var,
        stream: usize,
        positions: &[usize],
        candidates: &[usize],
    ) -> Result<Var> {
        let (p, w) = (positions.len(), self.cfg.stream_width());
        let c = candidates.len() / p;
        let h = fwd.tape.reshape(hidden, &[fwd.tape.value(hidden).numel() / w, w])?;
        let h = fwd.tape.gather_rows(h, positions)?;
        let h = fwd.tape.l2_normalize(h);
        let h = fwd.tape.reshape(h, &[p, 1, w])?;
        let table = fwd.p(self.bank.table(stream));
        let e = fwd.tape.gather_rows(table, candidates)?;
        let e = fwd.tape.l2_normalize(e);
        let e = fwd.tape.reshape(e, &[p, c, w])?;
        let cos = fwd.tape.bmm(h, e, true)?;
        Ok(fwd.tape.reshape(cos, &[p, c])?)
    }

    /// Sampled-softmax loss over every position with a target. `negatives`
    /// holds `N_neg` ids per target position, in position order.
    pub fn loss(&self, fwd: &mut Forward<'_, T>, batch: &SequenceBatch, negatives: &[usize]) -> Result<Var> {
        let positions = batch.target_positions();
        if positions.is_empty() {
            return Err(Error::Data("batch has no target positions".into()));
        }
        let p = positions.len();
        if negatives.is_empty() || !negatives.len().is_multiple_of(p) {
            return Err(Error::config(format!(
                "{} negatives do not split over {p} positions",
                negatives.len()
            )));
        }
        let n_neg = negatives.len() / p;
        let mut candidates = Vec::with_capacity(p * (n_neg + 1));
        for (i, &pos) in positions.iter().enumerate() {
            candidates.push(batch.targets[pos]);
            candidates.extend_from_slice(&negatives[i * n_neg..(i + 1) * n_neg]);
        }
        self.bank.check_ids(&candidates)?;

        let out = self.encode(fwd, batch)?;
        let m = self.cfg.streams;
        let zeros = vec![0; p];
        let inv_t = 1.0 / self.cfg.temperature;
        let mut cosines = Vec::with_capacity(m);
        for (k, &s) in out.streams.iter().enumerate() {
            cosines.push(self.candidate_cosines(fwd, s, k, &positions, &candidates)?);
        }
        if self.cfg.ensemble {
            let mut total: Option<Var> = None;
            for cos in cosines {
                let logits = fwd.tape.scale(cos, inv_t);
                let l = fwd.tape.cross_entropy(logits, &zeros, self.cfg.reduction)?;
                total = Some(match total {
                    Some(t) => fwd.tape.add(t, l)?,
                    None => l,
                });
            }
            let total = total.expect("at least one stream");
            Ok(fwd.tape.scale(total, 1.0 / m as f64))
        } else {
            let mut sum = cosines[0];
            for &cos in &cosines[1..] {
                sum = fwd.tape.add(sum, cos)?;
            }
            let logits = fwd.tape.scale(sum, inv_t / m as f64);
            Ok(fwd.tape.cross_entropy(logits, &zeros, self.cfg.reduction)?)
        }
    }

    /// Full-catalog scores `[B × num_items]` at the last position of each
    /// row. The PAD column is `-inf`.
    pub fn score_last(&self, batch: &SequenceBatch) -> Result<Vec<T>> {
        let (b, n) = (batch.batch, batch.len);
        if let Some(row) = (0..b).find(|&r| !batch.valid[r * n + n - 1]) {
            return Err(Error::Data(format!("sequence {row} in batch is empty")));
        }
        let mut fwd = Forward::inference(&self.params);
        let out = self.encode(&mut fwd, batch)?;
        let (w, items, m) = (self.cfg.stream_width(), self.cfg.num_items, self.cfg.streams);
        let eps = T::lit(COSINE_EPS);
        let inv_m = T::lit(1.0 / m as f64);
        let mut scores = vec![T::zero(); b * items];
        for (k, &s) in out.streams.iter().enumerate() {
            let data = fwd.tape.data(s);
            let mut h = Vec::with_capacity(b * w);
            for r in 0..b {
                let row = &data[(r * n + n - 1) * w..(r * n + n) * w];
                let norm = kernels::clamped_norm(row, eps);
                h.extend(row.iter().map(|&v| v / norm));
            }
            let table = self.params.get(self.bank.table(k)).data();
            let mut e = Vec::with_capacity(table.len());
            for row in table.chunks(w) {
                let norm = kernels::clamped_norm(row, eps);
                e.extend(row.iter().map(|&v| v / norm));
            }
            let cos = kernels::matmul_nt(&h, &e, b, w, items);
            for (s, c) in scores.iter_mut().zip(cos) {
                *s += c * inv_m;
            }
        }
        for r in 0..b {
            scores[r * items + PAD] = T::neg_infinity();
        }
        Ok(scores)
    }

    /// Top `k` items after the given history, best first, ties by lower id.
    pub fn predict_topk(&self, items: &[usize], times: &[i64], k: usize) -> Result<Vec<usize>> {
        if items.is_empty() {
            return Err(Error::Data("cannot rank after an empty sequence".into()));
        }
        if k > self.cfg.num_items - 1 {
            return Err(Error::config(format!(
                "K={k} exceeds the {} real items",
                self.cfg.num_items - 1
            )));
        }
        let case = EvalCase {
            user: 0,
            items: items.to_vec(),
            times: times.to_vec(),
            target: PAD,
        };
        let batch = SequenceBatch::for_eval(&[&case], self.cfg.max_len);
        let scores = self.score_last(&batch)?;
        Ok(rank_items(&scores, k))
    }
}

/// Item ids `1..` sorted by descending score, ties by ascending id.
pub fn rank_items<T: Scalar>(scores: &[T], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (1..scores.len()).collect();
    ids.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    ids.truncate(k);
    ids
}

fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let eps = T::lit(COSINE_EPS);
    (kernels::dot(a, b) / (kernels::clamped_norm(a, eps) * kernels::clamped_norm(b, eps))).as_f64()
}

fn run_stack<T: Scalar>(
    fwd: &mut Forward<'_, T>,
    layers: &[FuxiBlock],
    mut x: Var,
    ctx: &AttentionContext,
) -> Result<Var> {
    for layer in layers {
        x = layer.forward(fwd, x, ctx)?;
    }
    Ok(x)
}

impl<T: Scalar> Scorer for FuxiMme<T> {
    fn num_items(&self) -> usize {
        self.cfg.num_items
    }

    fn score_cases(&self, cases: &[&EvalCase]) -> Result<Vec<f64>> {
        let batch = SequenceBatch::for_eval(cases, self.cfg.max_len);
        Ok(self.score_last(&batch)?.into_iter().map(|v| v.as_f64()).collect())
    }
}
