use std::fs;
use std::path::Path;

use fuxi_mme::checkpoint::Checkpoint;
use fuxi_mme::config::TrainConfig;
use fuxi_mme::metrics::{self, EvalOptions};
use fuxi_mme::synth::SynthSpec;
use fuxi_mme::train::{self, TrainOptions, BEST_FILE, LAST_FILE, LOG_FILE};
use fuxi_mme::Error;

fn setup(dir: &Path, extra: &str) -> TrainConfig {
    SynthSpec::markov(60, 150, 10, 7).generate().unwrap().write_tsv(&dir.join("d.tsv")).unwrap();
    let base = "data = d.tsv\nout = run\nlr = 0.003\nbatch_size = 32\nnegatives = 16\nmax_epochs = 3\n\
                deterministic = true\ndim = 16\nstreams = 2\nlayers = 2\nmax_len = 12\n";
    let key = |l: &str| l.split('=').next().unwrap().trim().to_string();
    let overridden: Vec<String> = extra.lines().map(key).collect();
    let mut text: String = base
        .lines()
        .filter(|l| !overridden.contains(&key(l)))
        .map(|l| format!("{l}\n"))
        .collect();
    text.push_str(extra);
    TrainConfig::parse(&text, dir).unwrap()
}

fn run(cfg: &TrainConfig, out: &Path, resume: Option<&Path>, stop_after: Option<usize>) -> train::TrainReport {
    let split = train::load_split(cfg).unwrap();
    let opts = TrainOptions {
        out: Some(out.to_path_buf()),
        resume: resume.map(Path::to_path_buf),
        stop_after,
        echo: false,
    };
    train::train(cfg, &split, &opts).unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn identical_runs_write_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&cfg, &a, None, None);
    run(&cfg, &b, None, None);
    for f in [LOG_FILE, BEST_FILE, LAST_FILE, train::TEST_FILE] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f} differs");
    }
    let log = String::from_utf8(read(&a.join(LOG_FILE))).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 4);
        let usage: serde_json::Value = serde_json::from_str(fields[3]).unwrap();
        assert!(usage.get("layer0.ffn").is_some() && usage.get("layer1.w_u").is_some());
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));
    let whole = run(&cfg, &full, None, None);
    let first = run(&cfg, &part, None, Some(1));
    assert!(first.test.is_none());
    assert_eq!(first.epochs, 1);
    let rest = run(&cfg, &part, Some(&part.join(LAST_FILE)), None);
    assert_eq!(rest.epochs, 3);
    assert_eq!(rest.log, whole.log);
    for f in [LOG_FILE, BEST_FILE, LAST_FILE, train::TEST_FILE] {
        assert_eq!(read(&full.join(f)), read(&part.join(f)), "{f} differs");
    }
}

#[test]
fn checkpoint_files_round_trip_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "max_epochs = 1\n");
    let out = dir.path().join("o");
    run(&cfg, &out, None, None);
    for f in [BEST_FILE, LAST_FILE] {
        let bytes = read(&out.join(f));
        assert_eq!(Checkpoint::<f32>::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }
}

#[test]
fn training_loss_falls_over_five_epochs() {
    let dir = tempfile::tempdir().unwrap();
    SynthSpec::markov(100, 400, 12, 2).generate().unwrap().write_tsv(&dir.path().join("d.tsv")).unwrap();
    let mut curves = Vec::new();
    for seed in 1..=3 {
        let text = format!(
            "data = d.tsv\nseed = {seed}\nlr = 0.003\nbatch_size = 32\nnegatives = 32\nmax_epochs = 5\n\
             dim = 16\nstreams = 2\nlayers = 2\nmax_len = 12\n"
        );
        let cfg = TrainConfig::parse(&text, dir.path()).unwrap();
        let split = train::load_split(&cfg).unwrap();
        curves.push(train::train(&cfg, &split, &TrainOptions::default()).unwrap().losses);
    }
    let median: Vec<f64> = (0..5)
        .map(|e| {
            let mut v: Vec<f64> = curves.iter().map(|c| c[e]).collect();
            v.sort_by(f64::total_cmp);
            v[1]
        })
        .collect();
    assert!(median.windows(2).all(|w| w[1] < w[0]), "{median:?}");
}

#[test]
fn flat_validation_stops_after_patience() {
    let dir = tempfile::tempdir().unwrap();
    // updates far below f32 resolution keep every parameter, hence the metric, fixed
    let cfg = setup(dir.path(), "lr = 1e-30\nmax_epochs = 100\npatience = 4\n");
    let report = run(&cfg, &dir.path().join("o"), None, None);
    assert_eq!(report.best_epoch, 1);
    assert_eq!(report.epochs, 1 + 4);
    assert!(report.test.is_some());
}

#[test]
fn best_checkpoint_holds_the_best_validation_score() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "max_epochs = 4\n");
    let out = dir.path().join("o");
    let report = run(&cfg, &out, None, None);
    let vals: Vec<f64> = report
        .log
        .lines()
        .map(|l| l.split('\t').nth(2).unwrap().parse().unwrap())
        .collect();
    let best = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!((report.best_val - best).abs() < 1e-6);
    assert_eq!(vals[report.best_epoch - 1], best);

    let split = train::load_split(&cfg).unwrap();
    let opts = EvalOptions {
        ks: vec![10],
        ..EvalOptions::default()
    };
    let reloaded = metrics::evaluate(&report.model, &split.valid, &opts).unwrap();
    assert!((reloaded.ndcg(10).unwrap() - report.best_val).abs() < 1e-12);
    let ck = Checkpoint::<f32>::load(&out.join(BEST_FILE)).unwrap();
    for ((_, a, x), (_, b, y)) in ck.params.iter().zip(report.model.params().iter()) {
        assert_eq!((a, x.data()), (b, y.data()));
    }
    assert_eq!(ck.best_metric, report.best_val);
}

#[test]
fn diverging_run_names_a_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "lr = 1e30\n");
    let split = train::load_split(&cfg).unwrap();
    match train::train(&cfg, &split, &TrainOptions::default()) {
        Err(Error::NonFinite { parameter, epoch, .. }) => {
            assert_eq!(epoch, 1);
            assert!(!parameter.is_empty());
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn poisoned_checkpoint_names_the_bad_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "max_epochs = 2\n");
    let out = dir.path().join("o");
    run(&cfg, &out, None, Some(1));
    let path = out.join(LAST_FILE);
    let mut ck = Checkpoint::<f32>::load(&path).unwrap();
    let id = ck.params.find("layer1.w_o").unwrap();
    ck.params.get_mut(id).data_mut()[3] = f32::NAN;
    ck.save(&path).unwrap();

    let split = train::load_split(&cfg).unwrap();
    let opts = TrainOptions {
        resume: Some(path),
        ..TrainOptions::default()
    };
    match train::train(&cfg, &split, &opts) {
        Err(Error::NonFinite { parameter, epoch, step }) => {
            assert_eq!((parameter.as_str(), epoch, step), ("layer1.w_o", 2, 0));
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn resume_rejects_a_different_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "max_epochs = 1\n");
    let out = dir.path().join("o");
    run(&cfg, &out, None, None);
    let other = setup(dir.path(), "max_epochs = 2\ndim = 32\n");
    let split = train::load_split(&other).unwrap();
    let opts = TrainOptions {
        resume: Some(out.join(LAST_FILE)),
        ..TrainOptions::default()
    };
    assert!(matches!(train::train(&other, &split, &opts), Err(Error::Checkpoint(_))));
}
