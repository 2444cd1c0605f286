use std::fs;

use gradcore::Tensor;
use pseudoflow::dataio::{generate_clips, Domain, SceneConfig, Split, VideoSequence};
use pseudoflow::flowsynth::FlowMode;
use pseudoflow::losses::LossWeights;
use pseudoflow::models::{DiscriminatorConfig, GeneratorConfig};
use pseudoflow::trainer::{frame_translator, translate_sequence, LogRow, TrainConfig, TrainData, Trainer};
use pseudoflow::{Error, Result};

fn tiny() -> TrainConfig {
    TrainConfig {
        seed: 3,
        epochs: 100,
        generator: GeneratorConfig { base_width: 4, n_downsample: 1, n_resblocks: 1, ..GeneratorConfig::desk() },
        discriminator: DiscriminatorConfig { base_width: 4, n_strided: 2, ..DiscriminatorConfig::desk() },
        ..TrainConfig::default()
    }
}

fn data() -> TrainData {
    let cfg = SceneConfig { width: 16, height: 16, frames_per_clip: 4, train_clips: 3, ..SceneConfig::default() };
    let x = generate_clips(&cfg, 1, Domain::X, Split::Train).unwrap();
    let y = generate_clips(&cfg, 1, Domain::Y, Split::Train).unwrap();
    TrainData::from_clips(&x, &y)
}

fn with_paths(mut cfg: TrainConfig, dir: &std::path::Path) -> TrainConfig {
    cfg.paths.log = Some(dir.join("log.csv"));
    cfg.paths.checkpoint_dir = Some(dir.join("ckpt"));
    cfg
}

#[test]
fn seeded_runs_are_bitwise_identical() {
    let d = data();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = TrainConfig { max_iterations: 50, ..tiny() };
    Trainer::new(with_paths(cfg.clone(), a.path())).unwrap().run(&d, |_| {}).unwrap();
    Trainer::new(with_paths(cfg, b.path())).unwrap().run(&d, |_| {}).unwrap();
    let la = fs::read_to_string(a.path().join("log.csv")).unwrap();
    assert!(la == fs::read_to_string(b.path().join("log.csv")).unwrap());
    assert_eq!(la.lines().count(), 51);
    // the checkpoints embed their own paths, so compare contents
    let ta = Trainer::load_checkpoint(&a.path().join("ckpt/final.ckpt")).unwrap();
    let tb = Trainer::load_checkpoint(&b.path().join("ckpt/final.ckpt")).unwrap();
    assert!(ta.models == tb.models && ta.opt == tb.opt);
}

#[test]
fn different_seeds_diverge() {
    let d = data();
    let cfg = TrainConfig { max_iterations: 3, ..tiny() };
    let (_, ra) = pseudoflow::train(cfg.clone(), &d).unwrap();
    let (_, rb) = pseudoflow::train(TrainConfig { seed: 4, ..cfg }, &d).unwrap();
    assert_ne!(ra, rb);
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let d = data();
    let (full, part) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = TrainConfig { max_iterations: 20, checkpoint_every: 8, ..tiny() };
    let mut whole = Trainer::new(with_paths(cfg.clone(), full.path())).unwrap();
    let rows = whole.run(&d, |_| {}).unwrap();

    // interrupted run: stop after 8 iterations, then resume from the checkpoint
    let mut first = Trainer::new(with_paths(TrainConfig { max_iterations: 8, ..cfg.clone() }, part.path())).unwrap();
    first.run(&d, |_| {}).unwrap();
    let ck = part.path().join("ckpt/final.ckpt");
    let mut resumed = Trainer::load_checkpoint(&ck).unwrap();
    assert_eq!(resumed.iteration, 8);
    resumed.cfg.max_iterations = 20;
    let tail = resumed.run(&d, |_| {}).unwrap();
    assert_eq!(tail, rows[8..]);
    assert_eq!(resumed.models, whole.models);
    assert_eq!(resumed.opt, whole.opt);

    // the periodic checkpoint of the full run is a resume point too
    let mut mid = Trainer::load_checkpoint(&full.path().join("ckpt/iter_00000008.ckpt")).unwrap();
    mid.cfg.paths = Default::default();
    assert_eq!(mid.run(&d, |_| {}).unwrap(), rows[8..]);

    // the appended log equals the uninterrupted one
    assert_eq!(
        fs::read_to_string(part.path().join("log.csv")).unwrap(),
        fs::read_to_string(full.path().join("log.csv")).unwrap()
    );
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(TrainConfig { max_iterations: 2, ..tiny() }).unwrap();
    t.run(&d, |_| {}).unwrap();
    let p = dir.path().join("a.ckpt");
    t.save_checkpoint(&p).unwrap();
    let mut back = Trainer::load_checkpoint(&p).unwrap();
    assert_eq!(back.models, t.models);
    assert_eq!(back.opt, t.opt);
    assert_eq!(back.cfg, t.cfg);
    let q = dir.path().join("b.ckpt");
    back.save_checkpoint(&q).unwrap();
    assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
}

#[test]
fn zero_epochs_writes_a_checkpoint_and_a_header() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_paths(TrainConfig { epochs: 0, ..tiny() }, dir.path());
    let mut t = Trainer::new(cfg).unwrap();
    assert!(t.run(&d, |_| {}).unwrap().is_empty());
    assert!(dir.path().join("ckpt/final.ckpt").is_file());
    assert_eq!(fs::read_to_string(dir.path().join("log.csv")).unwrap().trim_end(), LogRow::header());
    assert_eq!(Trainer::load_checkpoint(&dir.path().join("ckpt/final.ckpt")).unwrap().models, t.models);
}

#[test]
fn zero_weights_and_frozen_discriminators_leave_only_adv() {
    let d = data();
    let cfg = TrainConfig {
        max_iterations: 5,
        weights: LossWeights::zero(),
        update_discriminators: false,
        ..tiny()
    };
    let mut t = Trainer::new(cfg).unwrap();
    let before = (t.models.d_x.clone(), t.models.d_y.clone());
    let rows = t.run(&d, |_| {}).unwrap();
    for r in &rows {
        let l = &r.losses;
        assert_eq!(Some(l.total), l.adv);
        assert!(l.ur().is_none() && l.us().is_none() && l.cyc.is_none() && l.cont.is_none());
        assert!(l.d_x.is_none() && l.d_y.is_none());
    }
    assert_eq!((t.models.d_x, t.models.d_y), before);
}

#[test]
fn wrong_pair_flow_leaves_recycle_loss_higher() {
    let d = data();
    let mean_ur = |mode| {
        let mut cfg = TrainConfig { max_iterations: 100, ..tiny() };
        cfg.flow.mode = mode;
        let (_, rows) = pseudoflow::train(cfg, &d).unwrap();
        rows[50..].iter().map(|r| r.losses.ur().unwrap()).sum::<f64>() / 50.0
    };
    let (matched, wrong) = (mean_ur(FlowMode::Full), mean_ur(FlowMode::WrongPair));
    assert!(wrong > matched, "wrong {wrong} vs matched {matched}");
}

#[test]
fn non_finite_loss_names_the_last_checkpoint() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(tiny()).unwrap();
    let (x, y) = d.batch(0, 0, 1).unwrap();
    t.step(&x, &y).unwrap();
    let p = dir.path().join("good.ckpt");
    t.save_checkpoint(&p).unwrap();
    let models = t.models.clone();
    let bad = x.map(|_| f32::NAN);
    match t.step(&bad, &y) {
        Err(Error::NonFiniteLoss { iteration, last_checkpoint }) => {
            assert_eq!(iteration, 1);
            assert_eq!(last_checkpoint.as_deref(), Some(p.as_path()));
        }
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
    // nothing was updated
    assert_eq!(t.models, models);
    assert_eq!(t.iteration, 1);
}

#[test]
fn translate_sequence_is_per_frame() {
    let cfg = SceneConfig { width: 16, height: 16, frames_per_clip: 5, val_clips: 1, ..SceneConfig::default() };
    let clip = generate_clips(&cfg, 2, Domain::X, Split::Val).unwrap().remove(0);
    let t = Trainer::new(tiny()).unwrap();
    let f = frame_translator(&t.models.g_y);
    let out = translate_sequence(&f, &clip).unwrap();
    assert_eq!(out.len(), clip.len());
    assert_eq!(out.domain, Domain::Y);
    assert_eq!(out.gt_flow, clip.gt_flow);

    let single = VideoSequence::new(Domain::X, "one", vec![clip.frames[3].clone()]);
    assert_eq!(translate_sequence(&f, &single).unwrap().frames[0], out.frames[3]);

    let perm = [4, 0, 3, 1, 2];
    let shuffled = VideoSequence::new(Domain::X, "perm", perm.iter().map(|&i| clip.frames[i].clone()).collect());
    let so = translate_sequence(&f, &shuffled).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(so.frames[k], out.frames[i]);
    }
    let empty = VideoSequence::new(Domain::X, "none", Vec::new());
    assert!(translate_sequence(&f, &empty).unwrap().is_empty());
}

#[test]
fn frame_translator_rejects_batches() {
    let t = Trainer::new(tiny()).unwrap();
    let f = frame_translator(&t.models.g_y);
    let r: Result<Tensor<f32>> = f(&Tensor::zeros(&[1, 3, 16, 16]));
    assert!(matches!(r, Err(Error::Dimension { .. })));
}

#[test]
fn toml_configs() {
    let cfg = tiny();
    assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    let partial = TrainConfig::from_toml("seed = 9\n[weights]\nlambda_cyc = 10.0\n").unwrap();
    assert_eq!(partial.seed, 9);
    assert_eq!(partial.weights.lambda_cyc, 10.0);
    assert_eq!(partial.weights.lambda_ur, LossWeights::default().lambda_ur);
    assert!(matches!(TrainConfig::from_toml("sed = 9\n"), Err(Error::Config(_))));
    assert!(matches!(TrainConfig::from_toml("lr = -1.0\n"), Err(Error::Config(_))));
    let both = "[flags]\nsuppress_x_domain = true\nsuppress_y_domain = true\n";
    assert!(matches!(TrainConfig::from_toml(both), Err(Error::Config(_))));
}

#[test]
fn mismatched_data_is_rejected() {
    let mut d = data();
    d.y[0] = Tensor::zeros(&[3, 8, 8]);
    let mut t = Trainer::new(TrainConfig { max_iterations: 1, ..tiny() }).unwrap();
    assert!(matches!(t.run(&d, |_| {}), Err(Error::Dimension { .. })));
}
