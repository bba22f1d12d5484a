use mrla_core::blocks::{AttnMode, Carry, Variant};
use mrla_core::model::{build_model, config_dataset, synth_dataset, train, MiniModel, MrlaMode, TrainConfig};
use mrla_core::tensor::no_grad;
use mrla_core::verify::{attn_score_matrix, query_cosine_stats};
use mrla_core::{DType, Error, Tensor};

fn small(mode: MrlaMode) -> TrainConfig {
    TrainConfig {
        mode,
        stages: vec![3, 2],
        epochs: 2,
        ..TrainConfig::default()
    }
}

fn bytes(m: &MiniModel, dir: &std::path::Path, name: &str) -> Vec<u8> {
    let p = dir.join(name);
    m.save(&p).unwrap();
    std::fs::read(p).unwrap()
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(MrlaMode::Light);
    let data = config_dataset(&cfg).unwrap();
    let mut a = build_model(&cfg).unwrap();
    let mut b = build_model(&cfg).unwrap();
    assert_eq!(bytes(&a, dir.path(), "a0"), bytes(&b, dir.path(), "b0"));
    let ra = train(&mut a, &data, &cfg).unwrap();
    let rb = train(&mut b, &data, &cfg).unwrap();
    assert_eq!(ra.loss_csv(), rb.loss_csv());
    assert_eq!(bytes(&a, dir.path(), "a1"), bytes(&b, dir.path(), "b1"));

    let other = build_model(&TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(bytes(&a, dir.path(), "a1"), bytes(&other, dir.path(), "c"));
}

#[test]
fn checkpoint_reload_reproduces_logits() {
    let dir = tempfile::tempdir().unwrap();
    for variant in [Variant::Cnn, Variant::Vit] {
        let cfg = TrainConfig { variant, ..small(MrlaMode::Base) };
        let m = build_model(&cfg).unwrap();
        let p = dir.path().join("m.mrlt");
        m.save(&p).unwrap();
        let back = MiniModel::load(&p).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.arch, m.arch);
        let data = config_dataset(&cfg).unwrap();
        let x = &data.samples[7].0;
        assert_eq!(m.forward(x).unwrap().data(), back.forward(x).unwrap().data());
    }
}

/// Stage output must not depend on whatever carry the caller passes in.
#[test]
fn carry_resets_at_each_stage() {
    for mode in [MrlaMode::Base, MrlaMode::Light] {
        let cfg = small(mode);
        let m = build_model(&cfg).unwrap();
        let data = config_dataset(&cfg).unwrap();
        let x = &data.samples[0].0;
        let stage0 = no_grad(|| m.stage_forward(0, x, &mut Carry::Empty, None, &mut Vec::new())).unwrap();
        let c = m.arch.stages[1].channels;
        let h = m.arch.stages[1].height;
        let junk = Tensor::full(&[h, h, c], 123.0, DType::F32).unwrap();
        let mut poisoned = match mode {
            MrlaMode::Base => Carry::Base {
                keys: vec![Tensor::full(&[c], 5.0, DType::F32).unwrap()],
                values: vec![junk],
            },
            _ => Carry::Light { o_prev: junk },
        };
        let a = no_grad(|| m.stage_forward(1, &stage0, &mut Carry::Empty, None, &mut Vec::new())).unwrap();
        let b = no_grad(|| m.stage_forward(1, &stage0, &mut poisoned, None, &mut Vec::new())).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(poisoned.layers(), if mode == MrlaMode::Base { 2 } else { 1 });
    }
}

/// With one block per stage there is no carry to scale, so both modes
/// compute the same function of the same weights.
#[test]
fn depth_one_base_equals_light() {
    let mk = |mode| TrainConfig { stages: vec![1, 1], ..small(mode) };
    let base = build_model(&mk(MrlaMode::Base)).unwrap();
    let light = build_model(&mk(MrlaMode::Light)).unwrap();
    let data = config_dataset(&mk(MrlaMode::Base)).unwrap();
    let (a, mut b) = (base.clone(), light);
    // Copy shared weights so only the mode differs.
    let shared: Vec<(String, Tensor)> = base.named_params();
    for (name, t) in b.params_mut() {
        if let Some((_, src)) = shared.iter().find(|(n, _)| *n == name) {
            *t = src.clone();
        }
    }
    for (x, _) in data.samples.iter().take(10) {
        assert_eq!(a.forward(x).unwrap().data(), b.forward(x).unwrap().data());
    }
}

#[test]
fn synthetic_classes_are_linearly_separable() {
    let d = synth_dataset(3, 30, [8, 8, 3], 3.0, 0, DType::F64).unwrap();
    assert_eq!(d.class_counts(), vec![30, 30, 30]);
    // Nearest class mean, with means estimated from the samples themselves.
    let n = 8 * 8 * 3;
    let mut means = vec![vec![0.0; n]; 3];
    for (x, y) in &d.samples {
        for (m, v) in means[*y].iter_mut().zip(x.data()) {
            *m += v / 30.0;
        }
    }
    let correct = d
        .samples
        .iter()
        .filter(|(x, y)| {
            let dist = |m: &Vec<f64>| m.iter().zip(x.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            (0..3).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap() == *y
        })
        .count();
    assert!(correct as f64 / 90.0 > 0.9, "{correct}/90");
    let again = synth_dataset(3, 30, [8, 8, 3], 3.0, 0, DType::F64).unwrap();
    assert_eq!(d.checksum(), again.checksum());
}

#[test]
fn vit_three_stages_four_blocks() {
    let cfg = TrainConfig {
        variant: Variant::Vit,
        stages: vec![4, 4, 4],
        channels: vec![8, 8, 16],
        ..small(MrlaMode::Light)
    };
    let m = build_model(&cfg).unwrap();
    assert_eq!(m.arch.stages.len(), 3);
    assert!(m.arch.stages.iter().all(|s| s.blocks == 4 && s.height == 4 && s.width == 4));
    let data = config_dataset(&cfg).unwrap();
    let (logits, traces) = m.forward_traced(&data.samples[0].0, None).unwrap();
    assert_eq!(logits.shape(), &[3]);
    assert!(traces.iter().all(|t| t.len() == 4 && t.iter().all(|b| b.score_evals == 1)));
    // Kernel length 1 at C = 8 and 3 at C = 16.
    assert_eq!(m.mrla_param_count(), 8 * (8 * 10 + 2) + 4 * (16 * 10 + 2 * 3));
}

#[test]
fn attn_matrix_counts_and_zero_query() {
    let cfg = small(MrlaMode::Base);
    let mut m = build_model(&cfg).unwrap();
    let data = config_dataset(&cfg).unwrap();
    let x = &data.samples[3].0;
    let s = attn_score_matrix(&m, 0, x).unwrap();
    let depth = 3;
    assert_eq!(s.populated(), s.cells.len() * depth * (depth + 1) / 2);
    for head in &s.cells {
        assert_eq!(head[0].iter().filter(|c| c.is_some()).count(), 1);
    }
    for b in &mut m.stages[0].blocks {
        let p = b.mrla.as_mut().unwrap();
        p.conv_q = Tensor::zeros(p.conv_q.shape(), DType::F32).unwrap();
    }
    let s = attn_score_matrix(&m, 0, x).unwrap();
    assert!(s.cells.iter().flatten().flatten().flatten().all(|&v| v == 0.5));
    assert!(matches!(attn_score_matrix(&m, 2, x), Err(Error::Config(_))));

    let light = build_model(&small(MrlaMode::Light)).unwrap();
    let s = attn_score_matrix(&light, 1, x).unwrap();
    assert_eq!(s.mode, AttnMode::Light);
    assert_eq!(s.populated(), s.cells.len() * 3);
    let off = build_model(&small(MrlaMode::Off)).unwrap();
    assert!(attn_score_matrix(&off, 0, x).is_err());
}

#[test]
fn query_cosines_skip_first_blocks() {
    let cfg = small(MrlaMode::Light);
    let m = build_model(&cfg).unwrap();
    let data = config_dataset(&TrainConfig { per_class: 2, ..cfg }).unwrap();
    let stats = query_cosine_stats(&m, &data, 10).unwrap();
    // 6 samples x (2 pairs x 2 heads + 1 pair x 4 heads).
    assert_eq!(stats.values.len() + stats.skipped, 6 * (2 * 2 + 4));
    assert!(stats.values.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(stats.bins.iter().map(|b| b.2).sum::<usize>(), stats.values.len());
}

#[test]
fn stochastic_depth_keeps_shapes_and_skips_blocks() {
    let cfg = TrainConfig { survival_prob: 0.5, ..small(MrlaMode::Light) };
    let m = build_model(&cfg).unwrap();
    let data = config_dataset(&cfg).unwrap();
    let mut rng = mrla_core::Rng::new(3);
    let mut dropped = 0;
    for (x, _) in data.samples.iter().take(20) {
        let (logits, traces) = m.forward_traced(x, Some(&mut rng)).unwrap();
        assert_eq!(logits.shape(), &[3]);
        dropped += traces.iter().flatten().filter(|b| b.dropped).count();
    }
    assert!(dropped > 0 && dropped < 100, "{dropped}");
}

#[test]
fn config_parse_errors_name_the_line() {
    let cases = [
        ("mode = light\nlr 0.1\n", 2),
        ("# c\n\nunknown = 3\n", 3),
        ("epochs = 3\nepochs = 4\n", 2),
        ("d_k = four\n", 1),
        ("mode = sideways\n", 1),
    ];
    for (text, line) in cases {
        match TrainConfig::parse(text) {
            Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
    let cfg = TrainConfig::parse("  # comment\nmode = base  # trailing\nd_k=2\n").unwrap();
    assert_eq!(cfg.mode, MrlaMode::Base);
    assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    assert!(cfg.clone().with_overrides(&["lr=0.5"]).unwrap().lr == 0.5);
    assert!(cfg.with_overrides(&["nope=1"]).is_err());
}
