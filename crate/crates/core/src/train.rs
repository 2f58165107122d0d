//! Training loop, early stopping, checkpoint resume and the ablation runner.
//!
//! Each epoch reseeds its shuffle, negative-sampling and gate-noise streams
//! from the master seed and the epoch index, so a run resumed from an epoch
//! boundary replays exactly what an uninterrupted run would have done.
//!
//! The log has one line per epoch:
//! `epoch<TAB>loss<TAB>val_ndcg@10<TAB>expert_utilization_json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fxmm_tensor::{Mode, TensorError};
use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::config::{TrainConfig, Variant};
use crate::data::{self, IngestOptions, SequenceBatch, Split};
use crate::metrics::{self, EvalOptions, MetricsReport};
use crate::model::FuxiMme;
use crate::optim::Adam;
use crate::params::{Forward, Params, RouteMode};
use crate::seed;
use crate::{Error, Result};

pub const BEST_FILE: &str = "best.fxmm";
pub const LAST_FILE: &str = "last.fxmm";
pub const LOG_FILE: &str = "train.log";
pub const TEST_FILE: &str = "test_metrics.json";

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for checkpoints, the log and test metrics.
    pub out: Option<PathBuf>,
    /// A `last` checkpoint to continue from; `best` is read from the same
    /// directory.
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs in this call, as if interrupted.
    pub stop_after: Option<usize>,
    /// Echo log lines to stderr.
    pub echo: bool,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Model holding the best validation parameters.
    pub model: FuxiMme<f32>,
    pub best_epoch: usize,
    pub best_val: f64,
    /// Completed epochs, including resumed ones.
    pub epochs: usize,
    pub losses: Vec<f64>,
    pub log: String,
    /// Test metrics at the best epoch; absent when interrupted.
    pub test: Option<MetricsReport>,
}

pub fn ingest_options(cfg: &TrainConfig) -> IngestOptions {
    IngestOptions {
        min_user_len: cfg.min_user_len,
        min_item_count: cfg.min_item_count,
    }
}

pub fn load_split(cfg: &TrainConfig) -> Result<Split> {
    let opts = ingest_options(cfg);
    let store = match &cfg.cache_dir {
        Some(dir) => data::ingest_cached(&cfg.data, opts, dir)?,
        None => data::ingest(&cfg.data, opts)?,
    };
    data::split_leave_one_out(&store)
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn merge_usage(total: &mut BTreeMap<String, Vec<u64>>, step: BTreeMap<String, Vec<u64>>) {
    for (site, counts) in step {
        let entry = total.entry(site).or_insert_with(|| vec![0; counts.len()]);
        entry.iter_mut().zip(counts).for_each(|(a, b)| *a += b);
    }
}

fn non_finite(params: &Params<f32>, epoch: usize, step: usize) -> Error {
    Error::NonFinite {
        epoch,
        step,
        parameter: params
            .first_non_finite()
            .unwrap_or("none; activations overflowed from finite values")
            .to_string(),
    }
}

struct State {
    epoch: usize,
    best_epoch: usize,
    bad_epochs: usize,
    best_val: f64,
    log: String,
    best: Params<f32>,
}

pub fn train(cfg: &TrainConfig, split: &Split, opts: &TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    let model_cfg = cfg.resolved_model(split.num_items);
    let mut model = FuxiMme::<f32>::build(&model_cfg, cfg.seed)?;
    let mut adam = Adam::new(model.params(), cfg.lr);
    let mut st = State {
        epoch: 0,
        best_epoch: 0,
        bad_epochs: 0,
        best_val: f64::NEG_INFINITY,
        log: String::new(),
        best: model.params().clone(),
    };
    let config_text = cfg.to_text();

    if let Some(path) = &opts.resume {
        let last = Checkpoint::<f32>::load(path)?;
        if last.model != model_cfg {
            return Err(Error::Checkpoint("checkpoint model config differs from the run config".into()));
        }
        model.params_mut().load_values(&last.params)?;
        adam = last
            .adam
            .ok_or_else(|| Error::Checkpoint("resume checkpoint lacks optimizer state".into()))?;
        let best_path = path.with_file_name(BEST_FILE);
        st.best.load_values(&Checkpoint::<f32>::load(&best_path)?.params)?;
        st.epoch = last.epoch as usize;
        st.best_epoch = last.best_epoch as usize;
        st.bad_epochs = last.bad_epochs as usize;
        st.best_val = last.best_metric;
        st.log = last.log;
    }
    if let Some(dir) = &opts.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let trainable: Vec<usize> = (0..split.train.len())
        .filter(|&i| split.train[i].items.len() >= 2)
        .collect();
    if trainable.is_empty() {
        return Err(Error::Data("no training sequence has two or more items".into()));
    }
    let val_opts = EvalOptions {
        ks: vec![10],
        filter_seen: cfg.filter_seen,
        batch_size: cfg.eval_batch,
    };

    let mut losses = Vec::new();
    let mut ran = 0;
    let mut stopped_early = st.bad_epochs >= cfg.patience;
    while st.epoch < cfg.max_epochs && !stopped_early {
        if opts.stop_after == Some(ran) {
            break;
        }
        let e = st.epoch as u64;
        let mut order = trainable.clone();
        order.shuffle(&mut seed::rng(cfg.seed, seed::STREAM_SHUFFLE, e));
        let mut neg_rng = seed::rng(cfg.seed, seed::STREAM_NEGATIVES, e);
        let mut noise = Some(seed::rng(cfg.seed, seed::STREAM_GATE_NOISE, e));
        let mut usage = BTreeMap::new();
        let (mut loss_sum, mut steps) = (0.0, 0usize);

        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let seqs: Vec<_> = chunk.iter().map(|&i| &split.train[i]).collect();
            let batch = SequenceBatch::for_training(&seqs, model_cfg.max_len);
            let mut negatives = Vec::new();
            for pos in batch.target_positions() {
                negatives.extend(data::sample_negatives(
                    &mut neg_rng,
                    cfg.negatives,
                    batch.targets[pos],
                    split.num_items,
                )?);
            }
            let mut fwd = Forward::new(model.params(), Mode::Training, RouteMode::Train, noise.take())
                .with_parallel(!cfg.deterministic);
            let loss = match model.loss(&mut fwd, &batch, &negatives) {
                Err(Error::Tensor(TensorError::DegenerateSoftmax)) => {
                    return Err(non_finite(model.params(), st.epoch + 1, step));
                }
                other => other?,
            };
            let value = f64::from(fwd.tape.data(loss)[0]);
            let grads = fwd.tape.backward(loss)?;
            let (_, rng, step_usage) = fwd.finish();
            noise = rng;
            merge_usage(&mut usage, step_usage);

            let params = model.params_mut();
            params.zero_grad();
            params.accumulate(&grads)?;
            if !value.is_finite() || params.first_non_finite().is_some() {
                return Err(non_finite(params, st.epoch + 1, step));
            }
            adam.step(params)?;
            model.zero_pad_rows();
            loss_sum += value;
            steps += 1;
        }

        let val = metrics::evaluate(&model, &split.valid, &val_opts)?
            .ndcg(10)
            .expect("k=10 requested");
        let mean_loss = loss_sum / steps as f64;
        losses.push(mean_loss);
        st.epoch += 1;
        ran += 1;
        let usage_json = serde_json::to_string(&usage).expect("usage map serialises");
        let line = format!("{}\t{mean_loss:.6}\t{val:.6}\t{usage_json}\n", st.epoch);
        if opts.echo {
            eprint!("{line}");
        }
        st.log.push_str(&line);

        if val > st.best_val {
            st.best_val = val;
            st.best_epoch = st.epoch;
            st.bad_epochs = 0;
            st.best = model.params().clone();
        } else {
            st.bad_epochs += 1;
        }
        stopped_early = st.bad_epochs >= cfg.patience;

        if let Some(dir) = &opts.out {
            let ck = |params: Params<f32>, adam: Option<Adam<f32>>| Checkpoint {
                train_config: config_text.clone(),
                model: model_cfg.clone(),
                log: st.log.clone(),
                epoch: st.epoch as u64,
                best_epoch: st.best_epoch as u64,
                bad_epochs: st.bad_epochs as u64,
                best_metric: st.best_val,
                params,
                adam,
            };
            if st.best_epoch == st.epoch {
                ck(st.best.clone(), None).save(&dir.join(BEST_FILE))?;
            }
            ck(model.params().clone(), Some(adam.clone())).save(&dir.join(LAST_FILE))?;
            write(&dir.join(LOG_FILE), st.log.as_bytes())?;
        }
    }

    let finished = st.epoch >= cfg.max_epochs || stopped_early;
    model.params_mut().load_values(&st.best)?;
    let test = if finished {
        let opts_test = EvalOptions {
            ks: vec![10, 50],
            filter_seen: cfg.filter_seen,
            batch_size: cfg.eval_batch,
        };
        let report = metrics::evaluate(&model, &split.test, &opts_test)?;
        if let Some(dir) = &opts.out {
            let json = serde_json::to_string_pretty(&report.to_json()).expect("report serialises");
            write(&dir.join(TEST_FILE), json.as_bytes())?;
        }
        Some(report)
    } else {
        None
    };
    Ok(TrainReport {
        model,
        best_epoch: st.best_epoch,
        best_val: st.best_val,
        epochs: st.epoch,
        losses,
        log: st.log,
        test,
    })
}

/// Trains `variant` on the configured data and returns its test metrics.
pub fn run_ablation(variant: Variant, cfg: &TrainConfig, echo: bool) -> Result<MetricsReport> {
    let mut cfg = cfg.clone();
    cfg.variant = Some(variant);
    let split = load_split(&cfg)?;
    let opts = TrainOptions {
        out: Some(cfg.out.join(variant.tag())),
        echo,
        ..TrainOptions::default()
    };
    let report = train(&cfg, &split, &opts)?;
    Ok(report.test.expect("uninterrupted run evaluates the test split"))
}

/// Loads a checkpoint and evaluates it on the test split of `data`.
pub fn evaluate_checkpoint(checkpoint: &Path, data: &Path, ks: &[usize]) -> Result<MetricsReport> {
    let ck = Checkpoint::<f32>::load(checkpoint)?;
    let cfg = TrainConfig::parse(&ck.train_config, Path::new("."))?;
    let store = data::ingest(data, ingest_options(&cfg))?;
    if store.num_items != ck.model.num_items {
        return Err(Error::Data(format!(
            "data has {} items, checkpoint was trained on {}",
            store.num_items, ck.model.num_items
        )));
    }
    let split = data::split_leave_one_out(&store)?;
    let mut model = FuxiMme::<f32>::build(&ck.model, 0)?;
    model.params_mut().load_values(&ck.params)?;
    let opts = EvalOptions {
        ks: ks.to_vec(),
        filter_seen: cfg.filter_seen,
        batch_size: cfg.eval_batch,
    };
    metrics::evaluate(&model, &split.test, &opts)
}
