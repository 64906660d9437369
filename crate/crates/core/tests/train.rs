use focus_core::checkpoint::Checkpoint;
use focus_core::config::RunConfig;
use focus_core::criterion::{tight_box, LossReport};
use focus_core::imgproc::{binarize, resize_bilinear, resize_map};
use focus_core::nn::ParamStore;
use focus_core::rng::SplitMix64;
use focus_core::synth::{gen_split, ImageSample, Mode};
use focus_core::train::*;
use focus_tensor::Tensor;
use proptest::prelude::*;

fn small() -> RunConfig {
    let mut c = RunConfig::desk();
    c.image_size = 32;
    c.backbone_dim = 16;
    c.backbone_heads = 2;
    c.decoder_dim = 16;
    c.decoder_layers = 1;
    c.encoder_layers = 1;
    c.edge_width = 8;
    c.msda_heads = 2;
    c.msda_points = 2;
    c.refiner_resolution = 32;
    c.refiner_align = 4;
    c.batch_size = 2;
    c.iterations = 10;
    c.checkpoint_every = 0;
    c
}

fn samples(n: usize) -> Vec<ImageSample> {
    gen_split(Mode::Salient, 64, 3, "train", n)
        .unwrap()
        .into_iter()
        .map(|mut s| {
            s.image = resize_bilinear(&s.image, 32, 32).unwrap();
            s.fg_mask = binarize(&resize_map(&s.fg_mask, 64, 64, 32, 32).unwrap(), 0.5);
            s.bg_mask = s.fg_mask.iter().map(|v| 1.0 - v).collect();
            s.fg_box = tight_box(&s.fg_mask, 32, 32);
            s.bg_box = tight_box(&s.bg_mask, 32, 32);
            s
        })
        .collect()
}

fn bits(store: &ParamStore) -> Vec<u64> {
    store.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

#[test]
fn ten_steps_log_ten_finite_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let mut t = Trainer::new(&cfg, &samples(8), dir.path()).unwrap();
    let mut seen = 0;
    t.run(|_| seen += 1).unwrap();
    assert_eq!(seen, 10);
    let rows = read_loss_csv(&dir.path().join(LOSS_FILE)).unwrap();
    assert_eq!(rows.len(), 10);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.step, i + 1);
        let l = r.loss;
        assert!([l.total, l.clip, l.label, l.mask, l.bbox, r.grad_norm].iter().all(|v| v.is_finite()));
        assert!(l.clip > 0.0);
        assert!(r.grad_norm <= cfg.clip_norm + 1e-12, "{}", r.grad_norm);
    }
    assert_eq!(rows, t.logs);
    assert!(dir.path().join(CHECKPOINT_FILE).exists());
}

#[test]
fn training_is_deterministic() {
    let cfg = RunConfig { iterations: 4, ..small() };
    let data = samples(6);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut x = Trainer::new(&cfg, &data, a.path()).unwrap();
    let mut y = Trainer::new(&cfg, &data, b.path()).unwrap();
    x.run(|_| {}).unwrap();
    y.run(|_| {}).unwrap();
    assert_eq!(bits(&x.model.store), bits(&y.model.store));
    assert_eq!(x.logs, y.logs);
    assert_eq!(
        std::fs::read(a.path().join(CHECKPOINT_FILE)).unwrap(),
        std::fs::read(b.path().join(CHECKPOINT_FILE)).unwrap()
    );
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let full = RunConfig { iterations: 6, ..small() };
    let data = samples(5);
    let a = tempfile::tempdir().unwrap();
    let mut straight = Trainer::new(&full, &data, a.path()).unwrap();
    straight.run(|_| {}).unwrap();

    let b = tempfile::tempdir().unwrap();
    let half = RunConfig { iterations: 3, ..full.clone() };
    Trainer::new(&half, &data, b.path()).unwrap().run(|_| {}).unwrap();
    let ck = Checkpoint::load(&b.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.iteration, 3);
    let mut resumed = Trainer::resume(&full, &data, b.path(), &ck).unwrap();
    assert_eq!(resumed.step, 3);
    resumed.run(|_| {}).unwrap();

    assert_eq!(bits(&straight.model.store), bits(&resumed.model.store));
    assert_eq!(straight.opt, resumed.opt);
    assert_eq!(straight.logs, resumed.logs);

    // a different model config cannot resume
    let other = RunConfig { decoder_layers: 2, ..full };
    assert!(Trainer::resume(&other, &data, b.path(), &ck).is_err());
}

#[test]
fn adamw_matches_closed_form() {
    let mut cfg = RunConfig::desk();
    cfg.lr = 0.01;
    cfg.weight_decay = 0.1;
    let mut store = ParamStore::new();
    store.add("w", Tensor::new(&[1, 2], vec![1.0, -2.0]).unwrap());
    store.add("b", Tensor::new(&[2], vec![0.5, 0.5]).unwrap());
    let mut opt = AdamW::new(&cfg, &store);
    let grads_seq = [[0.3, -0.1, 2.0, 0.0], [-0.2, 0.4, 1.0, 1.0], [0.05, 0.05, -3.0, 0.5]];
    // independent scalar reference
    let mut x = [1.0, -2.0, 0.5, 0.5];
    let (mut m, mut v) = ([0.0; 4], [0.0; 4]);
    for (t, gs) in grads_seq.iter().enumerate() {
        let t = (t + 1) as i32;
        for i in 0..4 {
            m[i] = 0.9 * m[i] + 0.1 * gs[i];
            v[i] = 0.999 * v[i] + 0.001 * gs[i] * gs[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            let wd = if i < 2 { 0.1 } else { 0.0 };
            x[i] = x[i] * (1.0 - 0.01 * wd) - 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        opt.step(&mut store, &[gs[..2].to_vec(), gs[2..].to_vec()]);
    }
    let got: Vec<f64> = store.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    for (a, b) in got.iter().zip(&x) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
    // first step moves each coordinate by lr against the gradient sign
    let mut s2 = ParamStore::new();
    s2.add("b", Tensor::new(&[3], vec![0.0; 3]).unwrap());
    let mut o2 = AdamW::new(&cfg, &s2);
    o2.step(&mut s2, &[vec![5.0, -1e-3, 0.0]]);
    let d = s2.iter().next().unwrap().1.data().to_vec();
    assert!((d[0] + 0.01).abs() < 1e-9 && (d[1] - 0.01).abs() < 1e-6 && d[2] == 0.0);
}

#[test]
fn clipping_examples() {
    let mut g = vec![vec![3.0], vec![4.0]];
    let n = clip_global_norm(&mut g, 1.0);
    assert!((n - 1.0).abs() < 1e-15);
    assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    let mut g = vec![vec![0.003, 0.004]];
    assert_eq!(clip_global_norm(&mut g, 0.01), 0.005);
    assert_eq!(g, vec![vec![0.003, 0.004]]);
}

#[test]
fn loss_rows_round_trip() {
    let log = StepLog {
        step: 17,
        loss: LossReport {
            total: 1.25,
            clip: 0.1 + 0.2,
            label: 1e-300,
            mask: 3.0,
            bbox: 0.0,
        },
        grad_norm: 0.009999999999999998,
    };
    assert_eq!(StepLog::parse(&log.csv_row()).unwrap(), log);
    assert!(StepLog::parse("2,1,1,1,1,1,1,1").is_err());
    assert!(StepLog::parse("1,1,1").is_err());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join(LOSS_FILE);
    write_loss_csv(&p, &[log, StepLog { step: 18, ..log }]).unwrap();
    assert!(std::fs::read_to_string(&p).unwrap().starts_with(LOSS_HEADER));
    assert_eq!(read_loss_csv(&p).unwrap().len(), 2);
}

#[test]
fn window_mean_examples() {
    let v = [1.0, 2.0, 3.0, 4.0, 5.0];
    assert_eq!(window_mean(&v, 5, 2), 4.5);
    assert_eq!(window_mean(&v, 2, 50), 1.5);
    assert_eq!(window_mean(&v, 3, 3), 2.0);
}

#[test]
fn bad_inputs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(Trainer::new(&small(), &[], dir.path()).is_err());
    let big = gen_split(Mode::Salient, 64, 1, "train", 1).unwrap();
    assert!(Trainer::new(&small(), &big, dir.path()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn epochs_are_permutations(seed in any::<u64>(), n in 1usize..40, batch in 1usize..9) {
        let epochs = 3;
        let steps = epochs * n / batch;
        let all: Vec<usize> = (0..steps).flat_map(|s| batch_indices(seed, n, batch, s)).collect();
        for e in 0..all.len() / n {
            let mut chunk = all[e * n..(e + 1) * n].to_vec();
            chunk.sort();
            prop_assert_eq!(chunk, (0..n).collect::<Vec<_>>());
        }
        prop_assert_eq!(batch_indices(seed, n, batch, 1), batch_indices(seed, n, batch, 1));
    }

    #[test]
    fn clipped_norm_never_exceeds_the_cap(seed in any::<u64>(), cap in 1e-4f64..10.0) {
        let mut r = SplitMix64::new(seed);
        let mut g: Vec<Vec<f64>> = (0..4).map(|k| (0..1 + k * 3).map(|_| r.uniform(-50.0, 50.0)).collect()).collect();
        let before = g.clone();
        let n = clip_global_norm(&mut g, cap);
        prop_assert!(n <= cap + 1e-12);
        // direction is kept
        let k = g[0][0] / before[0][0];
        for (a, b) in g.iter().flatten().zip(before.iter().flatten()) {
            prop_assert!((a - k * b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}
