use std::fs;
use std::path::Path;

use tidewater::imaging::Image;
use tidewater::losses::LossReport;
use tidewater::model::{ModelWeights, Network};
use tidewater::optim::Optimizer;
use tidewater::trainer::{
    checkpoint_dir, ema_update, infer, load_network, Ablation, Corpus, NetworkChoice, TrainConfig, TrainError, Trainer,
    LOG_FILE, STATE_FILE,
};
use tidewater_autograd::Tensor;

fn scene(h: usize, w: usize, k: usize) -> Image {
    let f = k as f64;
    Image::from_fn(h, w, |c, y, x| {
        let v = 0.5 + 0.3 * ((x as f64 * (0.2 + 0.05 * f) + y as f64 * 0.13 + c as f64 * 1.7 + f).sin());
        v.clamp(0.0, 1.0)
    })
    .unwrap()
}

fn murky(x: &Image) -> Image {
    Image::from_fn(x.height(), x.width(), |c, y, xx| {
        let gain = [0.6, 0.9, 0.95][c];
        0.7 * gain * x.get(c, y, xx) + 0.3 * [0.1, 0.5, 0.6][c]
    })
    .unwrap()
}

/// Writes `n_lab` labeled pairs and `n_unl` unlabeled images under `root`.
fn write_corpus(root: &Path, n_lab: usize, n_unl: usize) {
    for d in ["labeled/degraded", "labeled/clean", "unlabeled"] {
        fs::create_dir_all(root.join(d)).unwrap();
    }
    for k in 0..n_lab {
        let clean = scene(40, 40, k);
        clean.save_png(&root.join(format!("labeled/clean/{k:03}.png"))).unwrap();
        murky(&clean).save_png(&root.join(format!("labeled/degraded/{k:03}.png"))).unwrap();
    }
    for k in 0..n_unl {
        murky(&scene(40, 40, 100 + k)).save_png(&root.join(format!("unlabeled/{k:03}.png"))).unwrap();
    }
}

fn desk(root: &Path, epochs: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        labeled_root: root.join("labeled"),
        unlabeled_root: root.join("unlabeled"),
        batch_labeled: batch,
        batch_unlabeled: batch,
        seed: 11,
        ..TrainConfig::desk(epochs)
    }
}

fn weights_like(w: &ModelWeights, v: f64) -> ModelWeights {
    let mut out = w.clone();
    for (_, t) in out.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = v);
    }
    out
}

#[test]
fn ema_endpoints_and_mix() {
    let net = tidewater::aimnet::AimNet::new(tidewater::aimnet::ModelConfig::desk()).unwrap();
    let t = net.build(1);
    let s = net.build(2);
    assert_eq!(ema_update(&t, &s, 0.0).unwrap(), s);
    assert_eq!(ema_update(&t, &s, 1.0).unwrap(), t);
    let mixed = ema_update(&weights_like(&t, 1.0), &weights_like(&s, 3.0), 0.75).unwrap();
    assert!(mixed.iter().all(|(_, x)| x.data().iter().all(|&v| (v - 1.5).abs() < 1e-15)));

    let mut other = s.clone();
    let name = other.names().into_iter().next().unwrap();
    other.insert(name, Tensor::zeros(vec![1]));
    assert!(ema_update(&t, &other, 0.5).is_err());
    assert!(ema_update(&t, &s, 1.5).is_err());
}

#[test]
fn config_invariants() {
    let ok = TrainConfig::desk(4);
    ok.validate().unwrap();
    let bad = [
        TrainConfig { batch_unlabeled: 3, ..ok.clone() },
        TrainConfig { lr_decay_epoch: 5, ..ok.clone() },
        TrainConfig {
            ablation: Ablation { use_mean_teacher: false, use_reliable_bank: true, use_contrastive: false },
            ..ok.clone()
        },
        TrainConfig {
            ablation: Ablation { use_mean_teacher: false, use_reliable_bank: false, use_contrastive: true },
            ..ok.clone()
        },
        TrainConfig { ema_momentum: 1.2, ..ok.clone() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(TrainError::InvalidConfig(_))), "{c:?}");
    }
}

#[test]
fn toml_and_overrides() {
    let text = TrainConfig::desk(3).to_toml();
    let back = TrainConfig::load(Some(&text), &[]).unwrap();
    assert_eq!(back, TrainConfig::desk(3));

    let over = TrainConfig::load(
        Some(&text),
        &[
            "epochs=6".into(),
            "lr_decay_epoch=6".into(),
            "ablation.use_contrastive=false".into(),
            "scorer_name=uciqe".into(),
            "weights.beta1=0.5".into(),
        ],
    )
    .unwrap();
    assert_eq!(over.epochs, 6);
    assert!(!over.ablation.use_contrastive);
    assert_eq!(over.scorer_name, "uciqe");
    assert_eq!(over.weights.beta1, 0.5);

    assert!(matches!(TrainConfig::load(Some(&text), &["no_such_key=1".into()]), Err(TrainError::ConfigParse(_))));
    assert!(matches!(TrainConfig::load(Some(&text), &["epochs".into()]), Err(TrainError::ConfigParse(_))));
    assert!(matches!(TrainConfig::load(Some(&text), &["epochs=1".into()]), Err(TrainError::InvalidConfig(_))));
}

#[test]
fn learning_rate_and_lambda_schedule() {
    let c = TrainConfig::default();
    assert_eq!(c.learning_rate_at(0), 2e-4);
    assert_eq!(c.learning_rate_at(99), 2e-4);
    assert!((c.learning_rate_at(100) - 2e-5).abs() < 1e-20);
    assert!((c.lambda_at(200).unwrap() - 0.2).abs() < 1e-12);
    assert_eq!(c.lambda_at(250).unwrap(), c.lambda_at(200).unwrap());
}

#[test]
fn data_root_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = desk(dir.path(), 1, 2);
    assert!(matches!(Corpus::load(&c), Err(TrainError::DataRootMissing(_))));

    write_corpus(dir.path(), 2, 2);
    let corpus = Corpus::load(&c).unwrap();
    assert_eq!((corpus.labeled.len(), corpus.unlabeled.len()), (2, 2));

    fs::copy(dir.path().join("labeled/degraded/001.png"), dir.path().join("unlabeled/zz.png")).unwrap();
    assert!(matches!(Corpus::load(&c), Err(TrainError::OverlappingCorpora { .. })));

    c.ablation = Ablation::supervised();
    Corpus::load(&c).unwrap();

    fs::remove_file(dir.path().join("labeled/clean/000.png")).unwrap();
    assert!(matches!(Corpus::load(&c), Err(TrainError::UnpairedFile(_))));
}

#[test]
fn singleton_step_matches_replayed_optimizer() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 1, 1);
    let trainer = Trainer::new(desk(dir.path(), 1, 1)).unwrap();
    let corpus = Corpus::load(&trainer.config).unwrap();
    let mut state = trainer.init_state();
    let before = state.clone();
    let (lab, unl) = trainer.batches(&corpus, 0, 0, 0).unwrap();
    let outcome = trainer.train_step(&mut state, &lab, &unl, 0).unwrap();
    assert!(outcome.report.is_finite());
    let r = &outcome.report;
    let recomposed = LossReport::compose(&trainer.config.weights, r.l_sup, r.l_per, r.l_grad, r.l_un, r.l_cr, r.lambda_t);
    assert!((r.total - recomposed.total).abs() < 1e-10);

    let mut replay_w = before.student.clone();
    let mut replay_opt: Optimizer = before.optimizer.clone();
    replay_opt.apply(&mut replay_w, &outcome.gradients, trainer.config.learning_rate).unwrap();
    for ((n, a), (_, b)) in replay_w.iter().zip(state.student.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-10, "{n}");
        }
    }
    let expected_teacher = ema_update(&before.teacher, &state.student, trainer.config.ema_momentum).unwrap();
    assert_eq!(state.teacher, expected_teacher);
    assert_eq!(state.step, 1);
    assert_eq!(state.bank.len(), 1);
}

#[test]
fn supervised_arm_never_touches_teacher() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 2, 2);
    let c = TrainConfig { ablation: Ablation::supervised(), ..desk(dir.path(), 1, 2) };
    let trainer = Trainer::new(c).unwrap();
    let corpus = Corpus::load(&trainer.config).unwrap();
    let mut state = trainer.init_state();
    let init = state.teacher.clone();
    let (lab, unl) = trainer.batches(&corpus, 0, 0, 0).unwrap();
    assert!(unl.is_empty());
    let r = trainer.train_step(&mut state, &lab, &unl, 0).unwrap().report;
    assert_eq!((r.l_un, r.l_cr), (0.0, 0.0));
    assert_eq!(state.teacher, init);
    assert_ne!(state.student, init);
    assert!(state.bank.is_empty());
}

#[test]
fn labeled_batches_do_not_depend_on_the_arm() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 4, 3);
    let full = Trainer::new(desk(dir.path(), 2, 2)).unwrap();
    let sup = Trainer::new(TrainConfig { ablation: Ablation::supervised(), ..desk(dir.path(), 2, 2) }).unwrap();
    let corpus = Corpus::load(&full.config).unwrap();
    for (epoch, k, step) in [(0, 0, 0), (0, 1, 1), (1, 0, 2)] {
        let (a, _) = full.batches(&corpus, epoch, k, step).unwrap();
        let (b, _) = sup.batches(&corpus, epoch, k, step).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.input, y.input);
            assert_eq!(x.target, y.target);
        }
    }
}

#[test]
fn bank_off_uses_raw_teacher_output() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 1, 1);
    let mut c = desk(dir.path(), 1, 1);
    c.ablation.use_reliable_bank = false;
    c.ablation.use_contrastive = false;
    let trainer = Trainer::new(c).unwrap();
    let corpus = Corpus::load(&trainer.config).unwrap();
    let mut state = trainer.init_state();
    let (lab, unl) = trainer.batches(&corpus, 0, 0, 0).unwrap();
    let teacher_out = infer(&trainer.net, &state.teacher, &unl[0].weak).unwrap();
    let student_raw = trainer.net.run(&state.student, &unl[0].strong).unwrap().restored;
    let expected = teacher_out.data().iter().zip(&student_raw).map(|(a, b)| (a - b).abs()).sum::<f64>()
        / teacher_out.data().len() as f64;
    let r = trainer.train_step(&mut state, &lab, &unl, 0).unwrap().report;
    assert!((r.l_un - expected).abs() < 1e-12, "{} vs {expected}", r.l_un);
    assert_eq!(r.l_cr, 0.0);
    assert!(state.bank.is_empty());
}

#[test]
fn non_finite_weights_abort_the_step() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 1, 1);
    let trainer = Trainer::new(desk(dir.path(), 1, 1)).unwrap();
    let corpus = Corpus::load(&trainer.config).unwrap();
    let mut state = trainer.init_state();
    for (_, t) in state.student.iter_mut() {
        t.data_mut()[0] = f64::NAN;
    }
    let (lab, unl) = trainer.batches(&corpus, 0, 0, 0).unwrap();
    let err = trainer.train_step(&mut state, &lab, &unl, 0);
    assert!(err.is_err(), "NaN weights must not produce a step");
    assert_eq!(state.step, 0);
}

#[test]
fn zero_epochs_keep_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 2, 2);
    let trainer = Trainer::new(TrainConfig { checkpoint_every: 1, ..desk(dir.path(), 0, 2) }).unwrap();
    let corpus = Corpus::load(&trainer.config).unwrap();
    let state = trainer.train(&corpus, &dir.path().join("run"), None).unwrap();
    let init = trainer.init_state();
    assert_eq!(state.student, init.student);
    assert_eq!(state.teacher, init.student);
}

#[test]
fn deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 4, 3);
    let mk = |epochs| {
        let mut c = desk(dir.path(), epochs, 2);
        c.weights.warmup_total = 4;
        c.lr_decay_epoch = 1;
        c.checkpoint_every = 1;
        Trainer::new(c).unwrap()
    };
    let full = mk(2);
    let corpus = Corpus::load(&full.config).unwrap();
    let a = full.train(&corpus, &dir.path().join("a"), None).unwrap();
    let b = full.train(&corpus, &dir.path().join("b"), None).unwrap();
    assert_eq!(a, b);
    let bytes = |run: &str, e| fs::read(checkpoint_dir(&dir.path().join(run), e).join(STATE_FILE)).unwrap();
    assert_eq!(bytes("a", 2), bytes("b", 2));
    assert!(!a.bank.is_empty());

    mk(1).train(&corpus, &dir.path().join("c"), None).unwrap();
    let c = full.train(&corpus, &dir.path().join("c"), Some(&checkpoint_dir(&dir.path().join("c"), 1))).unwrap();
    assert_eq!(a, c);
    assert_eq!(bytes("a", 2), bytes("c", 2));
    let log = |run: &str| fs::read_to_string(dir.path().join(run).join(LOG_FILE)).unwrap();
    assert_eq!(log("a"), log("c"));
    assert_eq!(log("a").lines().count(), 1 + 4);

    let other = Trainer::new(TrainConfig { seed: 12, ..mk(2).config }).unwrap();
    assert!(matches!(
        other.load_checkpoint(&checkpoint_dir(&dir.path().join("a"), 1)),
        Err(TrainError::IncompatibleCheckpoint(_))
    ));

    let (net, w) = load_network(&checkpoint_dir(&dir.path().join("a"), 2), NetworkChoice::Teacher).unwrap();
    assert_eq!(w, a.teacher);
    let (_, s) = load_network(&checkpoint_dir(&dir.path().join("a"), 2), NetworkChoice::Student).unwrap();
    assert_eq!(s, a.student);
    assert_eq!(net.digest(), full.net.digest());
}

#[test]
fn infer_pads_crops_and_clamps() {
    let net = tidewater::aimnet::AimNet::new(tidewater::aimnet::ModelConfig::desk()).unwrap();
    let w = net.build(3);
    let x = scene(21, 30, 2);
    let y = infer(&net, &w, &x).unwrap();
    assert_eq!(y.dims(), (21, 30));
    assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let aligned = scene(24, 32, 2);
    assert_eq!(infer(&net, &w, &aligned).unwrap().dims(), (24, 32));
}
