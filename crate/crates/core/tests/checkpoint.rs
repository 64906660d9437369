use focus_core::checkpoint::*;
use focus_core::config::RunConfig;
use focus_core::model::{Model, SECTIONS};
use focus_tensor::Tensor;

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
    c
}

fn sample_checkpoint() -> Checkpoint {
    let cfg = small();
    let m = Model::new(&cfg).unwrap();
    Checkpoint {
        iteration: 41,
        config: cfg.to_text(),
        params: m.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        optimizer: vec![
            ("step".into(), Tensor::new(&[1], vec![41.0]).unwrap()),
            ("m.heads.class.w".into(), Tensor::new(&[2, 2], vec![0.1, -0.2, 1e-300, f64::MIN_POSITIVE]).unwrap()),
        ],
    }
}

#[test]
fn byte_round_trip_is_exact() {
    let c = sample_checkpoint();
    let bytes = c.to_bytes().unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    for ((_, a), (_, b)) in c.params.iter().zip(&back.params) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn sections_follow_the_model() {
    let c = sample_checkpoint();
    let mut want: Vec<String> = SECTIONS.iter().map(|s| s.to_string()).collect();
    want.push(OPTIMIZER_SECTION.into());
    assert_eq!(c.sections(), want);
}

#[test]
fn file_round_trip_and_model_rebuild() {
    let c = sample_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("nested").join("ck.bin");
    c.save(&p).unwrap();
    let back = Checkpoint::load(&p).unwrap();
    assert_eq!(back, c);
    let m = Model::from_checkpoint(&back).unwrap();
    assert_eq!(m.cfg, small());
    for ((n, t), (n2, t2)) in m.store.iter().zip(&c.params) {
        assert_eq!(n, n2);
        assert_eq!(t, t2);
    }
}

#[test]
fn corrupt_inputs_are_rejected() {
    let bytes = sample_checkpoint().to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let mut ver = bytes;
    ver[8] = 99;
    assert!(Checkpoint::from_bytes(&ver).is_err());
    assert!(Checkpoint::load(std::path::Path::new("/nonexistent/ck.bin")).is_err());
}

#[test]
fn mismatched_parameters_fail_to_load() {
    let mut c = sample_checkpoint();
    c.params.pop();
    assert!(Model::from_checkpoint(&c).is_err());
    let mut c = sample_checkpoint();
    c.params[0].1 = Tensor::new(&[1], vec![0.0]).unwrap();
    assert!(Model::from_checkpoint(&c).is_err());
}
