mod common;

use stylefat::params::ParamStore;
use stylefat::trainer::*;
use stylefat::*;

fn same(a: &ParamStore<f32>, b: &ParamStore<f32>) -> bool {
    a.values_equal(b)
}

fn every_param_changed(a: &ParamStore<f32>, b: &ParamStore<f32>) -> Vec<String> {
    a.iter()
        .zip(b.iter())
        .filter(|((_, x), (_, y))| x.data() == y.data())
        .map(|((n, _), _)| n.to_string())
        .collect()
}

fn read_log(path: &std::path::Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn ema_examples() {
    let mut ema = ParamStore::<f64>::new();
    let id = ema.add("p", Tensor::zeros(&[3]), stylefat::params::Constraint::Free);
    let mut live = ParamStore::<f64>::new();
    live.add("p", Tensor::ones(&[3]), stylefat::params::Constraint::Free);
    ema_update(&mut ema, &live, 0.001).unwrap();
    assert!(ema.get(id).data().iter().all(|v| (*v - 0.001).abs() < 1e-15));

    let mut r = common::rng(1);
    let data = common::uniform(&mut r, 5, -1.0, 1.0);
    let mut a = ParamStore::<f64>::new();
    a.add("p", Tensor::from_vec(data.clone(), &[5]), stylefat::params::Constraint::Free);
    let b = a.clone();
    ema_update(&mut a, &b, 0.001).unwrap();
    assert_eq!(a.iter().next().unwrap().1.data(), data.as_slice());
}

#[test]
fn ema_matches_loop_and_rejects_mismatch() {
    let mut r = common::rng(2);
    let e = common::uniform(&mut r, 7, -1.0, 1.0);
    let l = common::uniform(&mut r, 7, -1.0, 1.0);
    let mut ema = ParamStore::<f64>::new();
    ema.add("p", Tensor::from_vec(e.clone(), &[7]), stylefat::params::Constraint::Free);
    let mut live = ParamStore::<f64>::new();
    live.add("p", Tensor::from_vec(l.clone(), &[7]), stylefat::params::Constraint::Free);
    ema_update(&mut ema, &live, 0.3).unwrap();
    let got = ema.iter().next().unwrap().1.to_vec();
    for i in 0..7 {
        assert!((got[i] - (0.7 * e[i] + 0.3 * l[i])).abs() < 1e-7);
    }
    let mut other = ParamStore::<f64>::new();
    other.add("p", Tensor::zeros(&[6]), stylefat::params::Constraint::Free);
    assert!(matches!(ema_update(&mut ema, &other, 0.3), Err(Error::Shape(_))));
}

#[test]
fn rmsprop_first_step_matches_formula() {
    let mut p = ParamStore::<f64>::new();
    p.add("w", Tensor::from_f64(&[1.0, -2.0], &[2]), stylefat::params::Constraint::Free);
    let mut opt = RmsProp::new(&p, 0.1, 0.99, 1e-8);
    opt.step(&mut p, &[Tensor::from_f64(&[0.5, -3.0], &[2])]).unwrap();
    let got = p.iter().next().unwrap().1.to_vec();
    for (i, (p0, g)) in [(1.0, 0.5), (-2.0, -3.0)].into_iter().enumerate() {
        let v: f64 = 0.01 * g * g;
        assert!((got[i] - (p0 - 0.1 * g / (v.sqrt() + 1e-8))).abs() < 1e-12);
    }
}

#[test]
fn one_step_moves_every_parameter_set() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::tiny_train_config(dir.path());
    let (photos, anime) = common::tiny_datasets(16, 4);
    let mut state = TrainState::<f32>::new(&config).unwrap();
    let before = state.clone();
    assert!(same(state.ema.params(), state.generator.params()));
    state.step_on(&photos, &anime).unwrap();
    assert_eq!(state.iteration, 1);
    let unchanged = every_param_changed(before.generator.params(), state.generator.params());
    assert!(unchanged.is_empty(), "generator params not updated: {unchanged:?}");
    // with every hinge margin active the real and fake terms cancel on the
    // head bias, so only the bias may stay put
    let unchanged = every_param_changed(before.discriminator.params(), state.discriminator.params());
    assert!(unchanged.iter().all(|n| n.ends_with("head.bias")), "discriminator params not updated: {unchanged:?}");
    assert!(!same(before.ema.params(), state.ema.params()));
}

#[test]
fn ema_changes_only_through_the_average() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::tiny_train_config(dir.path());
    let (photos, anime) = common::tiny_datasets(16, 4);
    let mut state = TrainState::<f32>::new(&config).unwrap();
    let ema0 = state.ema.params().clone();
    state.step_on(&photos, &anime).unwrap();
    let mut expect = ema0;
    ema_update(&mut expect, state.generator.params(), config.ema_weight).unwrap();
    assert!(same(&expect, state.ema.params()));
}

#[test]
fn zero_learning_rate_freezes_everything() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = common::tiny_train_config(dir.path());
    config.learning_rate = 0.0;
    let (photos, anime) = common::tiny_datasets(16, 4);
    let mut state = TrainState::<f32>::new(&config).unwrap();
    let before = state.clone();
    state.step_on(&photos, &anime).unwrap();
    assert!(same(before.generator.params(), state.generator.params()));
    assert!(same(before.discriminator.params(), state.discriminator.params()));
    assert!(same(before.ema.params(), state.ema.params()));
}

#[test]
fn log_row_k_is_the_report_of_step_k() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::tiny_train_config(dir.path());
    let (photos, anime) = common::tiny_datasets(16, 4);
    let mut state = TrainState::<f32>::new(&config).unwrap();
    let mut seen = Vec::new();
    fit_from(&mut state, &photos, &anime, |k, r| seen.push((k, *r))).unwrap();
    let lines = read_log(&dir.path().join("losses.csv"));
    assert_eq!(lines[0], LossReport::CSV_HEADER);
    assert_eq!(lines.len(), 1 + seen.len());
    for (line, (k, report)) in lines[1..].iter().zip(&seen) {
        assert_eq!(*line, report.to_csv_row(*k));
    }
    assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    assert!(dir.path().join("config.toml").exists());
}

#[test]
fn fixed_seed_runs_log_identically() {
    let (photos, anime) = common::tiny_datasets(16, 4);
    let logs: Vec<Vec<String>> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let mut state = TrainState::<f32>::new(&common::tiny_train_config(dir.path())).unwrap();
            fit_from(&mut state, &photos, &anime, |_, _| {}).unwrap();
            read_log(&dir.path().join("losses.csv"))
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::tiny_train_config(dir.path());
    let (photos, anime) = common::tiny_datasets(16, 4);
    let mut state = TrainState::<f32>::new(&config).unwrap();
    let path = dir.path().join("fresh.bin");
    save_checkpoint(&state, &path).unwrap();
    assert_eq!(load_checkpoint::<f32>(&path).unwrap().iteration, 0);

    state.step_on(&photos, &anime).unwrap();
    save_checkpoint(&state, &path).unwrap();
    let back = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(back.iteration, 1);
    assert_eq!(back.config, state.config);
    assert!(same(back.generator.params(), state.generator.params()));
    assert!(same(back.ema.params(), state.ema.params()));
    assert!(same(back.discriminator.params(), state.discriminator.params()));
    assert_eq!(back.opt_g.square_avg(), state.opt_g.square_avg());
    assert_eq!(back.opt_d.square_avg(), state.opt_d.square_avg());
    assert!(!std::fs::read_dir(dir.path()).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().ends_with(".tmp")));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let state = TrainState::<f32>::new(&common::tiny_train_config(dir.path())).unwrap();
    let path = dir.path().join("c.bin");
    save_checkpoint(&state, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    for cut in [0, 7, 20, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Checkpoint(_))), "cut at {cut}");
    }
    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 0x55;
    std::fs::write(&path, &flipped).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Checkpoint(_))));
    let mut versioned = bytes.clone();
    versioned[8] = versioned[8].wrapping_add(1);
    std::fs::write(&path, &versioned).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Checkpoint(_))));
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn resumed_training_reproduces_the_next_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::tiny_train_config(dir.path());
    let (photos, anime) = common::tiny_datasets(16, 4);
    let mut state = TrainState::<f32>::new(&config).unwrap();
    state.step_on(&photos, &anime).unwrap();
    state.step_on(&photos, &anime).unwrap();
    let path = dir.path().join("mid.bin");
    save_checkpoint(&state, &path).unwrap();
    let expect = state.step_on(&photos, &anime).unwrap();
    let mut resumed = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(resumed.step_on(&photos, &anime).unwrap(), expect);
    assert!(same(resumed.generator.params(), state.generator.params()));
}

#[test]
fn interrupted_fit_resumes_from_its_last_checkpoint() {
    let (photos, anime) = common::tiny_datasets(16, 4);
    let full_dir = tempfile::tempdir().unwrap();
    let mut full = TrainState::<f32>::new(&common::tiny_train_config(full_dir.path())).unwrap();
    fit_from(&mut full, &photos, &anime, |_, _| {}).unwrap();

    // a run that stops after step 3 keeps the checkpoint written at step 2
    let dir = tempfile::tempdir().unwrap();
    let mut config = common::tiny_train_config(dir.path());
    config.iterations = 3;
    let mut part = TrainState::<f32>::new(&config).unwrap();
    let mut c2 = config.clone();
    c2.iterations = 2;
    part.config = c2;
    fit_from(&mut part, &photos, &anime, |_, _| {}).unwrap();
    part.step_on(&photos, &anime).unwrap();

    let mut resumed = load_checkpoint::<f32>(&dir.path().join("checkpoint.bin")).unwrap();
    assert_eq!(resumed.iteration, 2);
    resumed.config = common::tiny_train_config(dir.path());
    fit_from(&mut resumed, &photos, &anime, |_, _| {}).unwrap();
    assert_eq!(read_log(&dir.path().join("losses.csv")), read_log(&full_dir.path().join("losses.csv")));
    assert!(same(resumed.ema.params(), full.ema.params()));
}

#[test]
fn toy_directory_loads_in_range() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_faces(dir.path(), DomainTag::Photo, 2, 24, 0).unwrap();
    std::fs::write(dir.path().join("notes.txt"), "not an image").unwrap();
    std::fs::write(dir.path().join("broken.png"), "not a png either").unwrap();
    let data = load_dataset(dir.path(), 16).unwrap();
    assert_eq!(data.len(), 2);
    let all = data.all::<f32>().unwrap();
    assert_eq!(all.tensor().shape(), &[2, 3, 16, 16]);
    assert!(all.tensor().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(load_dataset(dir.path(), 16).unwrap().names(), data.names());
}

#[test]
fn empty_or_undecodable_directories_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(dir.path(), 16), Err(Error::Config(_))));
    std::fs::write(dir.path().join("a.png"), "junk").unwrap();
    assert!(matches!(load_dataset(dir.path(), 16), Err(Error::Config(_))));
}

#[test]
fn benchmark_layouts() {
    assert_eq!(DatasetLayout::FACE2ANIME.train_per_domain, 8000);
    assert_eq!(DatasetLayout::FACE2ANIME.test_per_domain, 898);
    assert_eq!(DatasetLayout::SELFIE2ANIME.train_per_domain, 3400);
    assert_eq!(DatasetLayout::SELFIE2ANIME.test_per_domain, 100);
    let paper = TrainConfig::default();
    assert_eq!((paper.iterations, paper.batch_size, paper.learning_rate, paper.ema_weight), (100_000, 4, 1e-4, 0.001));
    assert_eq!((paper.lambda_rec, paper.lambda_fm), (1.2, 1.0));
    assert_eq!(TrainConfig::selfie2anime().lambda_rec, 2.0);
}

#[test]
fn sampler_is_a_permutation_per_epoch() {
    let s = Sampler { seed: 3, batch_size: 4, hflip: true };
    let mut seen: Vec<usize> = (0..2).flat_map(|it| s.draw(DomainTag::Anime, 8, it).0).collect();
    seen.sort();
    assert_eq!(seen, (0..8).collect::<Vec<_>>());
    assert_eq!(s.draw(DomainTag::Photo, 8, 5), s.draw(DomainTag::Photo, 8, 5));
    let off = Sampler { hflip: false, ..s };
    assert!(off.draw(DomainTag::Photo, 8, 0).1.iter().all(|f| !f));
}
