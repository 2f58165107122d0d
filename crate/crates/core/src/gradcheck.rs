//! Central finite-difference checks of whole layers in 64-bit mode.
//!
//! Each check builds a scalar from a layer output, takes the analytic
//! gradient with respect to the inputs and every touched parameter, and
//! compares it with `(f(x+h) − f(x−h)) / 2h`. Gate noise is replayed from the
//! same seed on every evaluation so the routing realisation is fixed.

use fxmm_tensor::{Mode, Tensor, Var};
use rand::{Rng as _, SeedableRng};

use crate::block::{AttentionContext, BlockConfig, FuxiBlock};
use crate::data::{SequenceBatch, TrainSequence};
use crate::model::{FuxiMme, ModelConfig};
use crate::moe::{MoeConfig, MoeLayer, Placement};
use crate::params::{Forward, Params, RouteMode};
use crate::seed::{self, Rng};
use crate::{Error, Result};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const FLOOR: f64 = 1e-6;
/// Coordinates sampled per tensor.
pub const COORDS: usize = 48;

const NOISE_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub coords: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

type Build<'b> = dyn Fn(&mut Forward<'_, f64>, &[Var]) -> Result<Var> + 'b;

fn eval(params: &Params<f64>, inputs: &[Tensor<f64>], build: &Build<'_>) -> Result<f64> {
    let noise = Some(Rng::seed_from_u64(NOISE_SEED));
    let mut fwd = Forward::new(params, Mode::Inference, RouteMode::Train, noise);
    let vars: Vec<Var> = inputs.iter().map(|t| fwd.tape.constant(t.clone())).collect();
    let out = build(&mut fwd, &vars)?;
    Ok(fwd.tape.data(out)[0])
}

fn sample_coords(rng: &mut Rng, numel: usize) -> Vec<usize> {
    if numel <= COORDS {
        return (0..numel).collect();
    }
    let mut v: Vec<usize> = rand::seq::index::sample(rng, numel, COORDS).into_vec();
    v.sort_unstable();
    v
}

/// Max relative error over sampled coordinates of `inputs` and `params`.
pub fn check(
    name: &'static str,
    params: &Params<f64>,
    inputs: &[Tensor<f64>],
    build: &Build<'_>,
) -> Result<CheckResult> {
    let noise = Some(Rng::seed_from_u64(NOISE_SEED));
    let mut fwd = Forward::new(params, Mode::Training, RouteMode::Train, noise);
    let vars: Vec<Var> = inputs.iter().map(|t| fwd.tape.leaf(t.clone().with_grad())).collect();
    let loss = build(&mut fwd, &vars)?;
    let grads = fwd.tape.backward(loss)?;

    let mut pick = seed::rng(7, 0, 0);
    let mut worst = 0.0f64;
    let mut coords = 0;
    for (k, input) in inputs.iter().enumerate() {
        let g = grads.wrt(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.numel()]);
        for i in sample_coords(&mut pick, input.numel()) {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(params, &plus, build)? - eval(params, &minus, build)?) / (2.0 * STEP);
            worst = worst.max(rel_err(g[i], numeric));
            coords += 1;
        }
    }

    let mut analytic: Vec<Option<Vec<f64>>> = vec![None; params.len()];
    for (key, g) in grads.bound() {
        analytic[key] = Some(g.to_vec());
    }
    for (id, _, t) in params.iter() {
        let g = analytic[id.index()].clone().unwrap_or_else(|| vec![0.0; t.numel()]);
        for i in sample_coords(&mut pick, t.numel()) {
            let mut p = params.clone();
            p.get_mut(id).data_mut()[i] += STEP;
            let up = eval(&p, inputs, build)?;
            p.get_mut(id).data_mut()[i] -= 2.0 * STEP;
            let down = eval(&p, inputs, build)?;
            worst = worst.max(rel_err(g[i], (up - down) / (2.0 * STEP)));
            coords += 1;
        }
    }
    Ok(CheckResult {
        name,
        max_rel_err: worst,
        coords,
    })
}

fn random(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape covers data")
}

fn moe_cfg(placement: Placement) -> MoeConfig {
    MoeConfig {
        experts: 4,
        top_k: 2,
        placement,
        noise: true,
    }
}

/// Redraws every tensor whose name matches `pick` from `U(−0.5, 0.5)`.
fn redraw(params: &mut Params<f64>, rng: &mut Rng, pick: impl Fn(&str) -> bool) {
    let ids: Vec<_> = params
        .iter()
        .filter(|(_, n, _)| pick(n))
        .map(|(id, _, _)| id)
        .collect();
    for id in ids {
        for v in params.get_mut(id).data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
}

fn context(batch: usize, len: usize, rng: &mut Rng) -> AttentionContext {
    let mut ts = Vec::with_capacity(batch * len);
    let mut valid = Vec::with_capacity(batch * len);
    for b in 0..batch {
        let pad = if b == 0 { 0 } else { rng.random_range(0..len - 1) };
        let mut t = 1_000;
        for j in 0..len {
            t += rng.random_range(0..5_000);
            ts.push(t);
            valid.push(j >= pad);
        }
    }
    AttentionContext::new(batch, len, ts, valid).expect("consistent context")
}

fn block(width: usize, len: usize, placement: Placement, seed: u64) -> Result<(Params<f64>, FuxiBlock)> {
    let mut cfg = BlockConfig::for_width(width, len, moe_cfg(placement));
    cfg.ffn_dim = 2 * width;
    let mut params = Params::new();
    let mut rng = seed::rng(seed, seed::STREAM_INIT, 0);
    let b = FuxiBlock::build(&mut params, "layer0", &cfg, &mut rng)?;
    // zero noise weights and tiny bias tables would hide those paths
    redraw(&mut params, &mut rng, |n| n.ends_with("w_noise") || n.ends_with("alpha") || n.ends_with("beta"));
    Ok((params, b))
}

/// Multi-channel attention output, with an expert mixture on `W_u`.
pub fn check_ams(width: usize) -> Result<CheckResult> {
    let (b, n) = (2, 5);
    let (params, blk) = block(width, n, Placement::parse("u")?, 1)?;
    let mut rng = seed::rng(1, 99, 0);
    let ctx = context(b, n, &mut rng);
    let x = random(&mut rng, &[b, n, width], 1.0);
    let r = random(&mut rng, &[b, n, 3 * width], 1.0);
    check("ams", &params, &[x], &|fwd, v| {
        let h = blk.ams_forward(fwd, v[0], &ctx)?;
        let w = fwd.tape.constant(r.clone());
        let y = fwd.tape.mul(h, w)?;
        Ok(fwd.tape.sum(y))
    })
}

/// Output projection, residuals and the dense gated FFN.
pub fn check_mffn(width: usize) -> Result<CheckResult> {
    let (b, n) = (2, 4);
    let (params, blk) = block(width, n, Placement::dense(), 2)?;
    let mut rng = seed::rng(2, 99, 0);
    let ctx = AttentionContext::dense(b, n);
    let h = random(&mut rng, &[b, n, 3 * width], 1.0);
    let x = random(&mut rng, &[b, n, width], 1.0);
    let r = random(&mut rng, &[b, n, width], 1.0);
    check("mffn", &params, &[h, x], &|fwd, v| {
        let y = blk.mffn_forward(fwd, v[0], v[1], &ctx)?;
        let w = fwd.tape.constant(r.clone());
        let y = fwd.tape.mul(y, w)?;
        Ok(fwd.tape.sum(y))
    })
}

/// Noisy top-2 of 4 FFN experts.
pub fn check_moe(width: usize) -> Result<CheckResult> {
    let tokens = 6;
    let mut params = Params::new();
    let mut rng = seed::rng(3, seed::STREAM_INIT, 0);
    let layer = MoeLayer::ffn(&mut params, "moe", width, 2 * width, &moe_cfg(Placement::standard()), &mut rng)?;
    redraw(&mut params, &mut rng, |n| n.ends_with("w_noise"));
    let x = random(&mut rng, &[tokens, width], 1.0);
    let r = random(&mut rng, &[tokens, width], 1.0);
    check("moe", &params, &[x], &|fwd, v| {
        let y = layer.forward(fwd, v[0])?;
        let w = fwd.tape.constant(r.clone());
        let y = fwd.tape.mul(y, w)?;
        Ok(fwd.tape.sum(y))
    })
}

/// Sampled-softmax loss through a two-layer, two-stream model.
pub fn check_loss(width: usize) -> Result<CheckResult> {
    let cfg = ModelConfig {
        num_items: 10,
        dim: 2 * width,
        streams: 2,
        layers: 2,
        ffn_dim: Some(2 * width),
        max_len: 5,
        moe: moe_cfg(Placement::standard()),
        ..ModelConfig::default()
    };
    let mut model = FuxiMme::<f64>::build(&cfg, 4)?;
    let mut rng = seed::rng(4, 99, 0);
    // init-scale embeddings put the cosine where its curvature swamps a 1e-5 step
    redraw(model.params_mut(), &mut rng, |n| n.ends_with("w_noise") || n.starts_with("embedding."));
    model.zero_pad_rows();
    let seqs = [
        TrainSequence {
            user: 1,
            items: vec![3, 1, 4, 1, 5, 9],
            times: vec![10, 50, 400, 900, 5_000, 5_001],
        },
        TrainSequence {
            user: 2,
            items: vec![2, 6, 5],
            times: vec![7, 8, 90_000],
        },
    ];
    let batch = SequenceBatch::for_training(&[&seqs[0], &seqs[1]], cfg.max_len);
    let mut negatives = Vec::new();
    for pos in batch.target_positions() {
        negatives.extend(crate::data::sample_negatives(&mut rng, 3, batch.targets[pos], cfg.num_items)?);
    }
    let params = model.params().clone();
    check("loss", &params, &[], &|fwd, _| model.loss(fwd, &batch, &negatives))
}

pub fn run_all(width: usize) -> Result<Vec<CheckResult>> {
    if width == 0 || width > 16 {
        return Err(Error::config(format!("gradcheck width must be in 1..=16, got {width}")));
    }
    Ok(vec![
        check_ams(width)?,
        check_mffn(width)?,
        check_moe(width)?,
        check_loss(width)?,
    ])
}
