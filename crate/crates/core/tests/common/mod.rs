//! Oracles shared by the property suites and the acceptance runner.

#![allow(dead_code)]

use fuxi_mme::block::{AttentionContext, BlockConfig, FuxiBlock};
use fuxi_mme::data::{EvalCase, SequenceBatch, TrainSequence};
use fuxi_mme::metrics::{self, EvalOptions, Scorer};
use fuxi_mme::model::{FuxiMme, ModelConfig};
use fuxi_mme::moe::{Expert, GateDecision, MoeConfig, MoeLayer, Placement};
use fuxi_mme::params::{Forward, Params, RouteMode};
use fuxi_mme::seed::{self, Rng};
use fxmm_tensor::{Mode, Reduction, Tensor, Var};
use rand::Rng as _;

pub type Check = Result<(), String>;

pub fn uniform(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn moe(placement: &str, experts: usize, top_k: usize) -> MoeConfig {
    MoeConfig {
        experts,
        top_k,
        placement: Placement::parse(placement).unwrap(),
        noise: true,
    }
}

// ---------------------------------------------------------------- blocks

pub struct Stack {
    pub params: Params<f64>,
    pub blocks: Vec<FuxiBlock>,
    pub width: usize,
}

impl Stack {
    pub fn random(rng: &mut Rng, max_len: usize) -> Self {
        let width = [4, 8, 12][rng.random_range(0..3)];
        let heads = if width % 2 == 0 && rng.random_bool(0.3) { 2 } else { 1 };
        let placement = ["", "ffn,u", "ffn,q", "ffn,k", "ffn,v"][rng.random_range(0..5)];
        let mut cfg = BlockConfig::for_width(width, max_len, moe(placement, 4, 2));
        cfg.heads = heads;
        cfg.ffn_dim = 2 * width;
        let layers = rng.random_range(1..=2);
        let mut params = Params::new();
        let mut init = seed::rng(rng.random(), seed::STREAM_INIT, 0);
        let blocks = (0..layers)
            .map(|l| FuxiBlock::build(&mut params, &format!("layer{l}"), &cfg, &mut init).unwrap())
            .collect();
        // non-trivial bias tables so the temporal and positional channels matter
        let ids: Vec<_> = params
            .iter()
            .filter(|(_, n, _)| n.ends_with("alpha") || n.ends_with("beta"))
            .map(|(id, _, _)| id)
            .collect();
        for id in ids {
            for v in params.get_mut(id).data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        Self { params, blocks, width }
    }

    /// Inference-route output `[B × n × w]`.
    pub fn run(&self, x: &Tensor<f64>, ctx: &AttentionContext) -> Vec<f64> {
        let mut fwd = Forward::inference(&self.params);
        let mut h = fwd.tape.constant(x.clone());
        for b in &self.blocks {
            h = b.forward(&mut fwd, h, ctx).unwrap();
        }
        fwd.tape.data(h).to_vec()
    }
}

/// Timestamps with gaps spanning many buckets; the first `pad[b]` slots of
/// row `b` are PAD.
pub fn random_context(rng: &mut Rng, batch: usize, len: usize, pad: &[usize]) -> AttentionContext {
    let mut ts = Vec::new();
    let mut valid = Vec::new();
    for &lead in &pad[..batch] {
        let mut t: i64 = rng.random_range(0..1_000_000);
        for j in 0..len {
            t += 1i64 << rng.random_range(0..24);
            ts.push(t);
            valid.push(j >= lead);
        }
    }
    AttentionContext::new(batch, len, ts, valid).unwrap()
}

/// Perturbing position `t` (input vector and timestamp) leaves outputs at
/// positions `< t` bit-identical.
pub fn causality_trial(rng: &mut Rng) -> Check {
    let len = rng.random_range(2..=8);
    let stack = Stack::random(rng, len);
    let batch = rng.random_range(1..=3);
    let pad: Vec<usize> = (0..batch).map(|_| rng.random_range(0..len)).collect();
    let ctx = random_context(rng, batch, len, &pad);
    let w = stack.width;
    let x = uniform(rng, &[batch, len, w], 2.0);
    let base = stack.run(&x, &ctx);

    let (row, t) = (rng.random_range(0..batch), rng.random_range(1..len));
    let mut x2 = x.clone();
    for v in &mut x2.data_mut()[(row * len + t) * w..(row * len + t + 1) * w] {
        *v += rng.random_range(-3.0..3.0);
    }
    let mut ctx2 = ctx.clone();
    let shift = rng.random_range(1..100_000);
    for j in t..len {
        ctx2.timestamps[row * len + j] += shift;
    }
    let out = stack.run(&x2, &ctx2);
    for b in 0..batch {
        let limit = if b == row { t } else { len };
        let span = b * len * w..(b * len + limit) * w;
        if base[span.clone()] != out[span] {
            return Err(format!("row {b}: position < {limit} changed after perturbing {t}"));
        }
    }
    let at = (row * len + t) * w..(row * len + t + 1) * w;
    if ctx.valid[row * len + t] && base[at.clone()] == out[at] {
        return Err(format!("perturbing position {t} did not reach its own output"));
    }
    Ok(())
}

/// Prepending PAD slots with arbitrary content leaves real positions
/// unchanged.
pub fn pad_transparency_trial(rng: &mut Rng) -> Check {
    let real = rng.random_range(1..=6);
    let extra = rng.random_range(1..=4);
    let stack = Stack::random(rng, real + extra);
    let w = stack.width;
    let ctx = random_context(rng, 1, real, &[0]);
    let x = uniform(rng, &[1, real, w], 2.0);
    let base = stack.run(&x, &ctx);

    let long = real + extra;
    let first = ctx.timestamps[0];
    let mut ts = vec![first; extra];
    ts.extend_from_slice(&ctx.timestamps);
    let valid: Vec<bool> = (0..long).map(|j| j >= extra).collect();
    let ctx2 = AttentionContext::new(1, long, ts, valid).unwrap();
    let junk = uniform(rng, &[extra * w], 5.0);
    let mut data = junk.data().to_vec();
    data.extend_from_slice(x.data());
    let x2 = Tensor::new(vec![1, long, w], data).unwrap();
    let out = stack.run(&x2, &ctx2);
    let tail = &out[extra * w..];
    let worst = base.iter().zip(tail).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if worst > 1e-12 {
        return Err(format!("real outputs moved by {worst:e} after {extra} PAD slots"));
    }
    Ok(())
}

pub fn finite_output_trial(rng: &mut Rng) -> Check {
    let len = rng.random_range(1..=8);
    let stack = Stack::random(rng, len);
    let batch = rng.random_range(1..=3);
    let pad: Vec<usize> = (0..batch).map(|_| rng.random_range(0..len)).collect();
    let ctx = random_context(rng, batch, len, &pad);
    let scale = [1e-3, 1.0, 100.0][rng.random_range(0..3)];
    let x = uniform(rng, &[batch, len, stack.width], scale);
    let out = stack.run(&x, &ctx);
    match out.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(format!("non-finite output at flat index {i}")),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------- gating

pub struct Mixture {
    pub params: Params<f32>,
    pub layer: MoeLayer,
    pub width: usize,
}

impl Mixture {
    pub fn random(rng: &mut Rng, experts: usize, top_k: usize, width: usize) -> Self {
        let mut params = Params::new();
        let mut init = seed::rng(rng.random(), seed::STREAM_INIT, 0);
        let cfg = moe("ffn", experts, top_k);
        let layer = MoeLayer::ffn(&mut params, "moe", width, 2 * width, &cfg, &mut init).unwrap();
        let id = layer.gate().w_noise();
        for v in params.get_mut(id).data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        Self { params, layer, width }
    }
}

/// Every token gets exactly `min(k, N)` positive weights summing to one.
pub fn gating_check(rng: &mut Rng, tokens: usize) -> Check {
    let mut done = 0;
    while done < tokens {
        let n = rng.random_range(1..=8);
        let k = rng.random_range(1..=n);
        let width = rng.random_range(2..=16);
        let mix = Mixture::random(rng, n, k, width);
        let t = 1_000.min(tokens - done);
        let x = uniform(rng, &[t, width], 3.0).cast::<f32>();
        for route in [RouteMode::Train, RouteMode::Infer] {
            let noise = Some(seed::rng(rng.random(), seed::STREAM_GATE_NOISE, 0));
            let d = mix.layer.gate().decide(&mix.params, &x, route, noise).map_err(|e| e.to_string())?;
            for tok in 0..t {
                let w = d.token_weights(tok);
                let positive = w.iter().filter(|&&v| v > 0.0).count();
                let sum: f64 = w.iter().sum();
                if positive != k.min(n) || (sum - 1.0).abs() > 1e-6 {
                    return Err(format!("N={n} k={k}: {positive} positive weights summing to {sum}"));
                }
            }
        }
        let a = mix.layer.gate().decide(&mix.params, &x, RouteMode::Infer, None).unwrap();
        let b = mix.layer.gate().decide(&mix.params, &x, RouteMode::Infer, None).unwrap();
        if a != b {
            return Err("inference routing differs between two calls".into());
        }
        done += t;
    }
    Ok(())
}

/// Sparse output against `Σ_i G(x)_i · Expert_i(x)` with every expert run on
/// every token. Returns the largest absolute difference.
pub fn dense_oracle_gap(rng: &mut Rng) -> f64 {
    let n = rng.random_range(1..=6);
    let k = rng.random_range(1..=n);
    let width = rng.random_range(2..=12);
    let mix = Mixture::random(rng, n, k, width);
    let tokens = rng.random_range(1..=20);
    let x = uniform(rng, &[tokens, width], 2.0).cast::<f32>();
    let noise = Some(seed::rng(rng.random(), seed::STREAM_GATE_NOISE, 0));
    let mut fwd = Forward::new(&mix.params, Mode::Inference, RouteMode::Train, noise);
    let xv = fwd.tape.constant(x.clone());
    let (sparse, decision) = mix.layer.forward_with_decision(&mut fwd, xv).unwrap();
    let sparse = fwd.tape.data(sparse).to_vec();

    let mut dense = vec![0.0f64; tokens * width];
    for (e, expert) in mix.layer.experts().iter().enumerate() {
        let mut f = Forward::inference(&mix.params);
        let xv = f.tape.constant(x.clone());
        let y = expert.forward(&mut f, xv).unwrap();
        for (i, &v) in f.tape.data(y).iter().enumerate() {
            dense[i] += decision.weights[(i / width) * n + e] * f64::from(v);
        }
    }
    sparse
        .iter()
        .zip(&dense)
        .map(|(&s, &d)| (f64::from(s) - d).abs())
        .fold(0.0, f64::max)
}

/// Experts nobody routed to get no gradient, and nudging their weights
/// leaves the loss bit-identical.
pub fn unselected_expert_check(rng: &mut Rng) -> Check {
    let width = 6;
    let mut params = Params::<f64>::new();
    let mut init = seed::rng(rng.random(), seed::STREAM_INIT, 0);
    let layer = MoeLayer::ffn(&mut params, "moe", width, 8, &moe("ffn", 6, 2), &mut init).unwrap();
    let x = uniform(rng, &[2, width], 1.0);
    let r = uniform(rng, &[2, width], 1.0);
    let noise_seed: u64 = rng.random();
    fn run<'p>(
        layer: &MoeLayer,
        p: &'p Params<f64>,
        mode: Mode,
        x: &Tensor<f64>,
        r: &Tensor<f64>,
        noise_seed: u64,
    ) -> (Forward<'p, f64>, Var, GateDecision) {
        let mut fwd = Forward::new(p, mode, RouteMode::Train, Some(seed::rng(noise_seed, 0, 0)));
        let xv = fwd.tape.constant(x.clone());
        let (y, d) = layer.forward_with_decision(&mut fwd, xv).unwrap();
        let rv = fwd.tape.constant(r.clone());
        let y = fwd.tape.mul(y, rv).unwrap();
        let loss = fwd.tape.sum(y);
        (fwd, loss, d)
    }
    let (fwd, loss, decision) = run(&layer, &params, Mode::Training, &x, &r, noise_seed);
    let grads = fwd.tape.backward(loss).unwrap();
    let base = fwd.tape.data(loss)[0];
    let mut acc = params.clone();
    acc.accumulate(&grads).unwrap();

    let used = decision.counts();
    for (e, expert) in layer.experts().iter().enumerate() {
        if used[e] > 0 {
            continue;
        }
        let Expert::Ffn(ffn) = expert else { unreachable!() };
        for id in ffn.param_ids() {
            if let Some(g) = acc.get(id).grad() {
                if g.iter().any(|&v| v != 0.0) {
                    return Err(format!("unselected expert {e} has gradient on {}", params.name(id)));
                }
            }
            let mut p = params.clone();
            p.get_mut(id).data_mut()[0] += 1e-3;
            let (f, l, _) = run(&layer, &p, Mode::Inference, &x, &r, noise_seed);
            if f.tape.data(l)[0] != base {
                return Err(format!("loss depends on unselected expert {e}"));
            }
        }
    }
    for id in [layer.gate().w_g(), layer.gate().w_noise()] {
        if acc.get(id).grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)) {
            return Err(format!("{} received no gradient", params.name(id)));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- loss

pub fn random_train_batch(rng: &mut Rng, num_items: usize, rows: usize, max_len: usize) -> SequenceBatch {
    let seqs: Vec<TrainSequence> = (0..rows)
        .map(|u| {
            let len = rng.random_range(2..=max_len + 1);
            let mut t = 1_000;
            let times = (0..len)
                .map(|_| {
                    t += rng.random_range(1..50_000);
                    t
                })
                .collect();
            TrainSequence {
                user: u as u64,
                items: (0..len).map(|_| rng.random_range(1..num_items)).collect(),
                times,
            }
        })
        .collect();
    let refs: Vec<&TrainSequence> = seqs.iter().collect();
    SequenceBatch::for_training(&refs, max_len)
}

/// Sampled loss with the full complement as negatives against brute-force
/// full-softmax cross-entropy over cosine scores. Returns the absolute gap.
pub fn loss_oracle_gap(rng: &mut Rng) -> f64 {
    let num_items = rng.random_range(4..=10);
    let streams = [1, 2, 4][rng.random_range(0..3)];
    let cfg = ModelConfig {
        num_items,
        dim: 4 * streams,
        streams,
        layers: rng.random_range(1..=2),
        max_len: 6,
        moe: moe(["", "ffn,u", "ffn"][rng.random_range(0..3)], 3, 2),
        temperature: rng.random_range(0.2..2.0),
        ..ModelConfig::default()
    };
    let model = FuxiMme::<f64>::build(&cfg, rng.random()).unwrap();
    let rows = rng.random_range(1..=3);
    let batch = random_train_batch(rng, num_items, rows, cfg.max_len);

    let positions = batch.target_positions();
    let mut negatives = Vec::new();
    for &p in &positions {
        let t = batch.targets[p];
        negatives.extend((1..num_items).filter(|&i| i != t));
    }
    let mut fwd = Forward::new(model.params(), Mode::Inference, RouteMode::Infer, None);
    let loss = model.loss(&mut fwd, &batch, &negatives).unwrap();
    let sampled = fwd.tape.data(loss)[0];

    let mut fwd = Forward::inference(model.params());
    let out = model.encode(&mut fwd, &batch).unwrap();
    let mut total = 0.0;
    for &p in &positions {
        let logits: Vec<f64> = (1..num_items)
            .map(|i| model.score(&fwd, &out, p, i).unwrap() / cfg.temperature)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[batch.targets[p] - 1];
    }
    let full = match cfg.reduction {
        Reduction::Mean => total / positions.len() as f64,
        Reduction::Sum => total,
    };
    (sampled - full).abs()
}

// ---------------------------------------------------------------- metrics

/// Fixed score matrix `[cases × items]`.
pub struct Table {
    pub items: usize,
    pub scores: Vec<f64>,
}

impl Scorer for Table {
    fn num_items(&self) -> usize {
        self.items
    }

    fn score_cases(&self, cases: &[&EvalCase]) -> fuxi_mme::Result<Vec<f64>> {
        let mut out = Vec::with_capacity(cases.len() * self.items);
        for c in cases {
            let u = c.user as usize;
            out.extend_from_slice(&self.scores[u * self.items..(u + 1) * self.items]);
        }
        Ok(out)
    }
}

/// Rank from a stable descending sort where the target goes after every
/// item with an equal score. PAD (column 0) is never a candidate.
pub fn brute_rank(scores: &[f64], target: usize) -> usize {
    let mut order: Vec<usize> = (1..scores.len()).filter(|&i| i != target).collect();
    order.push(target);
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    // stable sort keeps equal-scored items ahead of the target pushed last
    1 + order.iter().position(|&i| i == target).unwrap()
}

/// Largest gap between the library metrics and a brute-force recomputation
/// on one random score matrix.
pub fn metric_oracle_gap(rng: &mut Rng) -> f64 {
    let items = rng.random_range(3..=60);
    let users = rng.random_range(1..=40);
    let ties = rng.random_bool(0.5);
    let scores: Vec<f64> = (0..users * items)
        .map(|_| {
            let s: f64 = rng.random_range(-1.0..1.0);
            if ties { (s * 3.0).round() } else { s }
        })
        .collect();
    let cases: Vec<EvalCase> = (0..users)
        .map(|u| EvalCase {
            user: u as u64,
            items: vec![1],
            times: vec![0],
            target: rng.random_range(1..items),
        })
        .collect();
    let ks = vec![1, 5, 10, 20];
    let opts = EvalOptions {
        ks: ks.clone(),
        filter_seen: false,
        batch_size: rng.random_range(1..=16),
    };
    let table = Table { items, scores };
    let report = metrics::evaluate(&table, &cases, &opts).unwrap();

    let ranks: Vec<usize> = cases
        .iter()
        .enumerate()
        .map(|(u, c)| brute_rank(&table.scores[u * items..(u + 1) * items], c.target))
        .collect();
    let n = users as f64;
    let mut gap = (report.mrr - ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n).abs();
    for &k in &ks {
        let hr = ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        let ndcg = ranks
            .iter()
            .map(|&r| if r <= k { 1.0 / (r as f64 + 1.0).log2() } else { 0.0 })
            .sum::<f64>()
            / n;
        gap = gap.max((report.hr(k).unwrap() - hr).abs());
        gap = gap.max((report.ndcg(k).unwrap() - ndcg).abs());
    }
    gap
}

/// HR@K of uniformly random scores over `users` cases, with the expected
/// value and its standard error.
pub fn random_hr(rng: &mut Rng, items: usize, k: usize, users: usize) -> (f64, f64, f64) {
    let scores: Vec<f64> = (0..users * items).map(|_| rng.random()).collect();
    let cases: Vec<EvalCase> = (0..users)
        .map(|u| EvalCase {
            user: u as u64,
            items: vec![1],
            times: vec![0],
            target: rng.random_range(1..items),
        })
        .collect();
    let opts = EvalOptions {
        ks: vec![k],
        ..EvalOptions::default()
    };
    let report = metrics::evaluate(&Table { items, scores }, &cases, &opts).unwrap();
    let p = k as f64 / (items - 1) as f64;
    let sigma = (p * (1.0 - p) / users as f64).sqrt();
    (report.hr(k).unwrap(), p, sigma)
}
