use focus_core::config::*;
use focus_core::Error;

#[test]
fn presets() {
    let d = RunConfig::desk();
    assert_eq!((d.image_size, d.backbone_dim, d.decoder_dim, d.embed_dim), (96, 64, 64, 32));
    assert_eq!((d.decoder_layers, d.encoder_layers, d.batch_size), (3, 2, 4));
    assert_eq!((d.lr, d.weight_decay, d.clip_norm), (2e-4, 0.05, 0.01));
    assert_eq!((d.beta1, d.beta2, d.adam_eps), (0.9, 0.999, 1e-8));
    d.validate().unwrap();
    let p = RunConfig::preset("paper").unwrap();
    assert_eq!((p.image_size, p.lr, p.iterations, p.batch_size), (512, 1e-5, 20_000, 8));
    p.validate().unwrap();
    assert!(matches!(RunConfig::preset("huge"), Err(Error::Config(_))));
}

#[test]
fn text_round_trip() {
    let mut c = RunConfig::desk();
    c.apply_text("seed = 99\nmodel.decoder_layers = 2\noptim.lr = 0.001\nedge.overlay = \"blend\"\nprompt.foreground = \"the thing\"\n")
        .unwrap();
    assert_eq!(c.seed, 99);
    assert_eq!(c.decoder_layers, 2);
    assert_eq!(c.overlay, OverlayMode::Blend);
    assert_eq!(c.prompts.foreground, "the thing");
    let text = c.to_text();
    assert_eq!(text.lines().count(), KEYS.len());
    let back = RunConfig::from_text(RunConfig::paper(), &text).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.to_text(), text);
}

#[test]
fn table_syntax_is_equivalent_to_dotted_keys() {
    let a = RunConfig::from_text(RunConfig::desk(), "[model]\nbackbone_dim = 32\n[train]\nbatch_size = 2\n").unwrap();
    let b = RunConfig::from_text(RunConfig::desk(), "model.backbone_dim = 32\ntrain.batch_size = 2\n").unwrap();
    assert_eq!(a, b);
}

#[test]
fn unknown_and_ill_typed_keys_are_rejected() {
    let mut c = RunConfig::desk();
    for bad in ["model.widht = 3", "lr = 0.1", "seed = -1", "model.decoder_dim = \"big\"", "train.deep_supervision = 1"] {
        let err = c.apply_text(bad).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{bad}: {err}");
    }
    assert!(c.apply_override("synth.mode=pastel").is_err());
    assert!(c.apply_override("no-equals-sign").is_err());
    assert!(c.apply_override("edge.source=bogus").is_err());
}

#[test]
fn overrides_accept_bare_words() {
    let mut c = RunConfig::desk();
    c.apply_override("synth.mode=camouflage").unwrap();
    c.apply_override("eval.e_measure = max").unwrap();
    c.apply_override("train.iterations=12").unwrap();
    c.apply_override("loss.tau=0.1").unwrap();
    assert_eq!(c.synth_mode, focus_core::synth::Mode::Camouflage);
    assert_eq!(c.e_measure, focus_core::metrics::EMeasure::Max);
    assert_eq!(c.iterations, 12);
    assert_eq!(c.tau, 0.1);
    assert_eq!(c.get("loss.tau").unwrap().as_float(), Some(0.1));
}

#[test]
fn validation_catches_inconsistent_values() {
    let cases: Vec<Box<dyn Fn(&mut RunConfig)>> = vec![
        Box::new(|c| c.image_size = 100),
        Box::new(|c| c.backbone_heads = 5),
        Box::new(|c| c.backbone_blocks = 3),
        Box::new(|c| c.tau = 0.0),
        Box::new(|c| c.clip_norm = -1.0),
        Box::new(|c| c.edge_low = 0.5),
        Box::new(|c| c.batch_size = 0),
        Box::new(|c| c.groups = 3),
        Box::new(|c| c.prompts.background = c.prompts.foreground.clone()),
        Box::new(|c| c.beta2 = 1.0),
    ];
    for (i, f) in cases.iter().enumerate() {
        let mut c = RunConfig::desk();
        f(&mut c);
        assert!(c.validate().is_err(), "case {i}");
    }
}
