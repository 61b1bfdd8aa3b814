use std::fs;
use std::path::Path;

use dcgn::attention::AttentionParams;
use dcgn::data::load_tensor;
use dcgn::harness::eval::fddf_from_features;
use dcgn::harness::{dump_attention, evaluate, resume, train, Checkpoint, EvalSpec, ExperimentConfig, Model, Trainer};
use dcgn::losses::LossKind;
use dcgn::tensor::Tensor;
use dcgn::Error;

fn ring(dir: &Path, extra: &[(&str, &str)]) -> ExperimentConfig {
    let out = dir.to_str().unwrap().to_string();
    let mut pairs: Vec<(String, String)> = [
        ("net.latent_dim", "4"),
        ("net.mlp_hidden", "16"),
        ("net.mlp_layers", "2"),
        ("train.steps", "40"),
        ("train.batch_size", "16"),
        ("train.log_interval", "5"),
        ("loss.r1_interval", "4"),
        ("eval.samples", "256"),
        ("output.dir", &out),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    pairs.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    ExperimentConfig::from_pairs(pairs).unwrap()
}

fn scenes(dir: &Path, extra: &[(&str, &str)]) -> ExperimentConfig {
    let mut e = vec![
        ("data.kind", "mini_scenes"),
        ("data.image_size", "16"),
        ("net.base_channels", "2"),
        ("net.max_channels", "8"),
        ("net.feature_dim", "8"),
        ("train.steps", "6"),
        ("train.batch_size", "4"),
        ("eval.samples", "64"),
    ];
    e.extend_from_slice(extra);
    ring(dir, &e)
}

fn silent() -> impl FnMut(&str) {
    |_: &str| {}
}

#[test]
fn zero_steps_writes_initial_checkpoint_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ring(dir.path(), &[("train.steps", "0"), ("train.warmup_steps", "0")]);
    let out = train(&cfg, &mut silent()).unwrap();
    let init = Trainer::new(&cfg).unwrap().checkpoint();
    assert_eq!(out.checkpoint, init);
    assert_eq!(Checkpoint::load(dir.path().join("final.ckpt")).unwrap(), init);
    let ckpts: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "ckpt"))
        .collect();
    assert_eq!(ckpts.len(), 1);
    assert_eq!(out.log.len(), 1);
}

#[test]
fn repeated_runs_log_identically() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let extra = [("eval.interval", "20"), ("eval.metrics", "mode_coverage,fddf")];
    let la = train(&ring(a.path(), &extra), &mut silent()).unwrap();
    let lb = train(&ring(b.path(), &extra), &mut silent()).unwrap();
    let strip = |l: &Vec<String>| l.iter().skip(1).cloned().collect::<Vec<_>>();
    assert_eq!(strip(&la.log), strip(&lb.log));
    assert!(la.log.iter().any(|l| l.contains("modes_hit=")));
    assert_eq!(la.checkpoint.params, lb.checkpoint.params);
    assert_eq!(la.checkpoint.optimizer, lb.checkpoint.optimizer);
    assert_eq!(la.checkpoint.rng, lb.checkpoint.rng);
    let file = fs::read_to_string(a.path().join("log.txt")).unwrap();
    assert_eq!(file.lines().count(), la.log.len());
}

#[test]
fn resume_reproduces_uninterrupted_trajectory() {
    let (full_dir, part_dir) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let full = train(
        &ring(full_dir.path(), &[("train.checkpoint_interval", "10")]),
        &mut silent(),
    )
    .unwrap();
    let mid = Checkpoint::load(full_dir.path().join("checkpoint_20.ckpt")).unwrap();
    let mut mid_elsewhere = mid.clone();
    mid_elsewhere.config_text = ExperimentConfig::from_text(&mid.config_text)
        .unwrap()
        .with_overrides([("output.dir", part_dir.path().to_str().unwrap())])
        .unwrap()
        .to_text();
    let resumed = resume(&mid_elsewhere, &mut silent()).unwrap();
    assert_eq!(resumed.checkpoint.params, full.checkpoint.params);
    assert_eq!(resumed.checkpoint.optimizer, full.checkpoint.optimizer);
    assert_eq!(resumed.checkpoint.rng, full.checkpoint.rng);
    let after = |log: &[String]| {
        log.iter()
            .filter(|l| l.starts_with("step="))
            .filter(|l| l["step=".len()..].split(' ').next().unwrap().parse::<u64>().unwrap() >= 20)
            .cloned()
            .collect::<Vec<_>>()
    };
    assert_eq!(after(&resumed.log), after(&full.log));
    assert!(!after(&resumed.log).is_empty());
}

#[test]
fn checkpoint_file_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&scenes(dir.path(), &[("net.d.attn.mode", "ref_kq")]), &mut silent()).unwrap();
    let bytes = fs::read(dir.path().join("final.ckpt")).unwrap();
    let loaded = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(loaded, out.checkpoint);
    let again = dir.path().join("again.ckpt");
    loaded.save(&again).unwrap();
    assert_eq!(fs::read(again).unwrap(), bytes);
}

#[test]
fn warmup_switches_exactly_at_boundary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ring(dir.path(), &[("train.warmup_steps", "7"), ("train.log_interval", "1")]);
    let t = Trainer::new(&cfg).unwrap();
    assert_eq!(t.loss_kind_at(6), LossKind::NonSaturating);
    assert_eq!(t.loss_kind_at(7), LossKind::DualContrastive);
    let out = train(&cfg, &mut silent()).unwrap();
    for l in out.log.iter().filter(|l| l.starts_with("step=")) {
        let step: u64 = l["step=".len()..].split(' ').next().unwrap().parse().unwrap();
        let want = if step < 7 {
            "kind=non_saturating"
        } else {
            "kind=dual_contrastive"
        };
        assert!(l.contains(want), "{l}");
    }
}

#[test]
fn default_warmup_is_a_tenth_of_steps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ring(dir.path(), &[("train.steps", "250")]);
    assert_eq!(cfg.train.warmup_steps, 25);
}

#[test]
fn non_finite_loss_aborts_with_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ring(dir.path(), &[("train.lr", "1e300"), ("train.warmup_steps", "0")]);
    let mut lines = Vec::new();
    let err = train(&cfg, &mut |l: &str| lines.push(l.to_string())).unwrap_err();
    assert!(matches!(err, Error::Numeric { .. }), "{err:?}");
    assert!(lines.last().unwrap().contains("event=abort"));
    let good = Checkpoint::load(dir.path().join("last_good.ckpt")).unwrap();
    assert!(good.params.iter().all(|(_, t)| t.is_finite()));
    assert!(!dir.path().join("final.ckpt").exists());
}

#[test]
fn config_errors_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let bad = ExperimentConfig::from_pairs([
        ("train.steps", "10"),
        ("train.warmup_steps", "20"),
        ("output.dir", dir.path().join("x").to_str().unwrap()),
    ]);
    assert!(matches!(bad, Err(Error::Config(_))));
    let bad = ExperimentConfig::from_pairs([("train.batch_size", "1")]);
    assert!(matches!(bad, Err(Error::Config(_))));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn siamese_training_runs_and_logs_r1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenes(
        dir.path(),
        &[("net.d.attn.mode", "ref_kq"), ("train.log_interval", "1")],
    );
    let out = train(&cfg, &mut silent()).unwrap();
    assert!(out.log.iter().any(|l| l.contains(" r1=")));
    assert!(out.checkpoint.params.names().any(|n| n.starts_with("d.attn.")));
}

#[test]
fn evaluation_is_deterministic_and_features_reproduce_fddf() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&scenes(dir.path(), &[("net.d.attn.mode", "ref_kq")]), &mut silent()).unwrap();
    let model = Model::from_checkpoint(&out.checkpoint).unwrap();
    let spec = EvalSpec::from_config(&model.config);
    let a = evaluate(&model, &spec).unwrap();
    let b = evaluate(&model, &spec).unwrap();
    assert_eq!(a, b);
    let feats = a.features.clone().unwrap();
    let path = dir.path().join("features.ntf");
    dcgn::data::save_tensor(&path, &feats).unwrap();
    let from_file = fddf_from_features(&load_tensor(&path).unwrap()).unwrap();
    assert_eq!(from_file, a.get("fddf").unwrap());
}

#[test]
fn untrained_generator_is_far_from_reals_and_eval_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenes(dir.path(), &[("eval.samples", "2048"), ("eval.metrics", "ffd")]);
    let model = Model::init(&cfg).unwrap();
    let spec = EvalSpec::from_config(&cfg);
    let fake = evaluate(&model, &spec).unwrap().get("ffd").unwrap();
    let other = evaluate(
        &model,
        &EvalSpec {
            seed: 1,
            ..spec.clone()
        },
    )
    .unwrap()
    .get("ffd")
    .unwrap();
    assert!((fake - other).abs() / fake < 0.10, "{fake} vs {other}");
    let reals = cfg.data.generate(4096, 77).unwrap();
    let (r1, r2) = (
        reals.gather_first(&(0..2048).collect::<Vec<_>>()).unwrap(),
        reals.gather_first(&(2048..4096).collect::<Vec<_>>()).unwrap(),
    );
    let split = dcgn::metrics::ffd(spec.extractor_seed, &r1, &r2, 2048).unwrap();
    assert!(fake > split, "{fake} vs {split}");
}

#[test]
fn metric_dataset_mismatch_is_contract_error() {
    let dir = tempfile::tempdir().unwrap();
    let img = scenes(dir.path(), &[]);
    let spec = EvalSpec::from_config(&img);
    let model = Model::init(&img).unwrap();
    let cov = EvalSpec {
        metrics: vec![dcgn::harness::Metric::ModeCoverage],
        ..spec.clone()
    };
    assert!(matches!(evaluate(&model, &cov), Err(Error::Contract(_))));
    let pts = ring(dir.path(), &[]);
    let ffd = EvalSpec {
        metrics: vec![dcgn::harness::Metric::Ffd],
        ..EvalSpec::from_config(&pts)
    };
    assert!(matches!(
        evaluate(&Model::init(&pts).unwrap(), &ffd),
        Err(Error::Contract(_))
    ));
}

fn with_g_attention(dir: &Path) -> Model {
    let cfg = scenes(
        dir,
        &[
            ("net.g.attn.mode", "self"),
            ("net.g.attn.resolution", "8"),
            ("net.g.attn.patch_size", "3"),
        ],
    );
    Model::init(&cfg).unwrap()
}

#[test]
fn attention_dump_zero_mlp_gives_zero_maps() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = with_g_attention(dir.path());
    model.g_params = model.g_params.map_values(|name, t| {
        if name.starts_with("g.attn.head") {
            Tensor::zeros(t.shape())
        } else {
            t.clone()
        }
    });
    let files = dump_attention(&model, 2, &[(4, 4), (0, 7)], &dir.path().join("maps"), 0).unwrap();
    assert_eq!(files.len(), 2 * (1 + 2 * 2));
    for f in files.iter().filter(|f| f.extension().unwrap() == "ntf") {
        assert!(load_tensor(f).unwrap().data().iter().all(|&v| v == 0.0));
    }
    for f in files.iter().filter(|f| f.extension().unwrap() == "pgm") {
        let bytes = fs::read(f).unwrap();
        assert!(bytes.ends_with(&[0u8; 16 * 16]));
    }
}

#[test]
fn attention_dump_pgm_matches_rounded_upsampled_map() {
    let dir = tempfile::tempdir().unwrap();
    let model = with_g_attention(dir.path());
    let out = dir.path().join("maps");
    dump_attention(&model, 1, &[(3, 5)], &out, 4).unwrap();
    let map = load_tensor(out.join("attn_0_3_5.ntf")).unwrap();
    assert_eq!(map.shape(), &[8, 8]);
    let max = map.data().iter().cloned().fold(0.0, f64::max);
    assert!((max - 1.0).abs() < 1e-12);

    let pgm = fs::read(out.join("attn_0_3_5.pgm")).unwrap();
    let header = b"P5\n16 16\n255\n";
    assert!(pgm.starts_with(header));
    let pixels = &pgm[header.len()..];
    assert_eq!(pixels.len(), 16 * 16);
    // Upsampling by two with half-pixel centers, computed directly.
    let at = |y: isize, x: isize| map.data()[(y.clamp(0, 7) * 8 + x.clamp(0, 7)) as usize];
    for oy in 0..16isize {
        for ox in 0..16isize {
            let (sy, sx) = ((oy as f64 + 0.5) / 2.0 - 0.5, (ox as f64 + 0.5) / 2.0 - 0.5);
            let (y0, x0) = (sy.floor() as isize, sx.floor() as isize);
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let (fy, y0) = if y0 < 0 { (0.0, 0) } else { (fy, y0) };
            let (fx, x0) = if x0 < 0 { (0.0, 0) } else { (fx, x0) };
            let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
            let want = (255.0 * v).round() as u8;
            assert_eq!(pixels[(oy * 16 + ox) as usize], want, "({oy},{ox})");
        }
    }
    assert!(fs::read(out.join("sample_0.ppm"))
        .unwrap()
        .starts_with(b"P6\n16 16\n255\n"));
}

#[test]
fn attention_dump_needs_generator_attention() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::init(&scenes(dir.path(), &[])).unwrap();
    assert!(matches!(
        dump_attention(&model, 1, &[(0, 0)], dir.path(), 0),
        Err(Error::Contract(_))
    ));
}

#[test]
fn generator_attention_params_load_from_store() {
    let dir = tempfile::tempdir().unwrap();
    let model = with_g_attention(dir.path());
    let block = model.gen.attention().unwrap();
    AttentionParams::from_store(block.config, &model.g_params, &block.prefix).unwrap();
    let stored: usize = model
        .g_params
        .iter()
        .filter(|(n, _)| n.starts_with(block.prefix.as_str()))
        .map(|(_, t)| t.numel())
        .sum();
    assert_eq!(stored, block.config.param_count());
}

#[test]
fn generator_average_is_off_by_default() {
    let dir = tempfile::tempdir().unwrap();
    let t = Trainer::new(&ring(dir.path(), &[])).unwrap();
    assert!(t.model().g_ema.is_none());
    assert!(!t.checkpoint().params.names().any(|n| n.starts_with("ema.")));
}

#[test]
fn generator_average_follows_half_life() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ring(dir.path(), &[("train.g_ema_half_life", "3")]);
    let mut t = Trainer::new(&cfg).unwrap();
    let beta = 0.5f64.powf(1.0 / 3.0);
    let mut avg: Vec<Vec<f64>> = t.model().g_params.iter().map(|(_, v)| v.data().to_vec()).collect();
    for _ in 0..5 {
        t.step_once().unwrap();
        for (a, (_, cur)) in avg.iter_mut().zip(t.model().g_params.iter()) {
            for (x, &c) in a.iter_mut().zip(cur.data()) {
                *x = beta * *x + (1.0 - beta) * c;
            }
        }
    }
    let ema = t.model().g_ema.as_ref().unwrap();
    for (a, (_, e)) in avg.iter().zip(ema.iter()) {
        for (x, y) in a.iter().zip(e.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    assert_ne!(ema, &t.model().g_params);
    assert_eq!(t.model().sampling_params(), ema);
}

#[test]
fn generator_average_survives_checkpoint_and_resume() {
    let (full_dir, part_dir) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let extra = [("train.g_ema_half_life", "4"), ("train.checkpoint_interval", "20")];
    let full = train(&ring(full_dir.path(), &extra), &mut silent()).unwrap();
    let mid = Checkpoint::load(full_dir.path().join("checkpoint_20.ckpt")).unwrap();
    let mut moved = mid.clone();
    moved.config_text = ExperimentConfig::from_text(&mid.config_text)
        .unwrap()
        .with_overrides([("output.dir", part_dir.path().to_str().unwrap())])
        .unwrap()
        .to_text();
    let resumed = resume(&moved, &mut silent()).unwrap();
    assert_eq!(resumed.checkpoint.params, full.checkpoint.params);
    let model = Model::from_checkpoint(&full.checkpoint).unwrap();
    assert!(model.g_ema.is_some());

    let mut off = full.checkpoint.clone();
    off.config_text = model
        .config
        .with_overrides([("train.g_ema_half_life", "0")])
        .unwrap()
        .to_text();
    assert!(matches!(Model::from_checkpoint(&off), Err(Error::Contract(_))));
    assert!(ExperimentConfig::from_pairs([("train.g_ema_half_life", "-1")]).is_err());
}
