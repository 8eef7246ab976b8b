mod common;

use candle_core::{DType, Device, Tensor};
use common::{random_config, random_text, word_vocab};
use pathground::model::{AblationMode, Ctx, GroundingModel, TokenRole};
use pathground::train::{box_loss, named_grads};
use pathground::{Error, LossConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_images(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> Tensor {
    let data: Vec<f32> = (0..b * 3 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, (b, 3, h, w), &Device::Cpu).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f32>().unwrap()
}

#[test]
fn shape_contracts_hold_on_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..12 {
        let mode = AblationMode::ALL[trial % 4];
        let cfg = random_config(&mut rng, mode);
        let model = GroundingModel::new(cfg.clone(), word_vocab(), trial as u64, &Device::Cpu).unwrap();
        let (h, w) = (32 * rng.random_range(1..=3), 32 * rng.random_range(1..=3));
        let b = rng.random_range(1..=3);
        let images = random_images(&mut rng, b, h, w);
        let exprs: Vec<String> = (0..b).map(|_| {
            let n = rng.random_range(1..6);
            random_text(&mut rng, n)
        }).collect();
        let know: Vec<String> = (0..b).map(|_| {
            let n = rng.random_range(1..8);
            random_text(&mut rng, n)
        }).collect();
        let e: Vec<&str> = exprs.iter().map(String::as_str).collect();
        let k: Vec<Option<&str>> = know.iter().map(|s| Some(s.as_str())).collect();
        let ctx = &mut Ctx::eval();

        let f_v = model.encode_image(&images, ctx).unwrap();
        assert_eq!(f_v.tokens(), h * w / 1024, "{cfg:?}");
        assert_eq!(f_v.features.dims(), &[b, h * w / 1024, cfg.c_v]);

        let be = model.tokenize(&e).unwrap();
        let bk = model.tokenize(&know.iter().map(String::as_str).collect::<Vec<_>>()).unwrap();
        let f_e = model.encode_text(&be, TokenRole::Expression, ctx).unwrap();
        let f_k = model.encode_text(&bk, TokenRole::Knowledge, ctx).unwrap();
        assert_eq!(f_e.features.dims(), &[b, be.seq_len(), cfg.c_e]);
        let n_l = match mode {
            AblationMode::None => f_e.tokens(),
            AblationMode::ConcatText => model.language_features(&e, &k, ctx).unwrap().tokens(),
            AblationMode::Branch | AblationMode::BranchKfm => {
                let fused = model.fuse_knowledge(&f_e, &f_k, ctx).unwrap();
                assert_eq!(fused.tokens(), f_e.tokens() + f_k.tokens());
                assert_eq!(fused.channels(), cfg.c_e);
                fused.tokens()
            }
        };

        let out = model.forward_batch(&images, &e, &k, ctx).unwrap();
        assert_eq!(out.sequence_len, 1 + h * w / 1024 + n_l, "{mode}");
        assert_eq!(out.boxes.dims(), &[b, 4]);
        assert_eq!(out.reg.dims(), &[b, cfg.c_p]);
        let v = out.boxes.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| *x > 0.0 && *x < 1.0), "{v:?}");
    }
}

#[test]
fn extra_padding_leaves_outputs_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (i, mode) in AblationMode::ALL.into_iter().enumerate() {
        let cfg = random_config(&mut rng, mode);
        let model = GroundingModel::new(cfg, word_vocab(), i as u64, &Device::Cpu).unwrap();
        let images = random_images(&mut rng, 1, 64, 64);
        let pair = Tensor::cat(&[&images, &random_images(&mut rng, 1, 64, 64)], 0).unwrap();
        let (e, k) = ("tumor cells", "pale round nuclei");
        let long_e = random_text(&mut rng, 12);
        let long_k = random_text(&mut rng, 15);
        let ctx = &mut Ctx::eval();
        let alone = model.forward_batch(&images, &[e], &[Some(k)], ctx).unwrap();
        let padded = model
            .forward_batch(&pair, &[e, &long_e], &[Some(k), Some(&long_k)], ctx)
            .unwrap();
        let first = padded.boxes.narrow(0, 0, 1).unwrap();
        assert!(max_abs_diff(&alone.boxes, &first) < 1e-5, "{mode}");
        let reg = padded.reg.narrow(0, 0, 1).unwrap();
        assert!(max_abs_diff(&alone.reg, &reg) < 1e-5, "{mode}");
    }
}

#[test]
fn one_text_encoder_serves_both_branches() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = random_config(&mut rng, AblationMode::BranchKfm);
    let full = GroundingModel::new(cfg.clone(), word_vocab(), 0, &Device::Cpu).unwrap();
    let plain = GroundingModel::new(
        pathground::model::ModelConfig { ablation_mode: AblationMode::None, ..cfg },
        word_vocab(),
        0,
        &Device::Cpu,
    )
    .unwrap();
    assert!(full.text_param_count() > 0);
    assert_eq!(full.text_param_count(), plain.text_param_count());
    let names: Vec<String> = full.params().vars().into_iter().map(|(n, _)| n).collect();
    assert!(names.iter().all(|n| ["visual.", "text.", "kfm.", "cfm."].iter().any(|p| n.starts_with(p))), "{names:?}");

    let ctx = &mut Ctx::eval();
    let batch = full.tokenize(&["dense crowded nuclei"]).unwrap();
    let e = full.encode_text(&batch, TokenRole::Expression, ctx).unwrap();
    let k = full.encode_text(&batch, TokenRole::Knowledge, ctx).unwrap();
    assert_eq!(max_abs_diff(&e.features, &k.features), 0.0);
}

#[test]
fn knowledge_token_order_changes_language_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = GroundingModel::new(random_config(&mut rng, AblationMode::BranchKfm), word_vocab(), 1, &Device::Cpu).unwrap();
    let ctx = &mut Ctx::eval();
    let a = model.language_features(&["tumor cells"], &[Some("pale round dense nuclei")], ctx).unwrap();
    let b = model.language_features(&["tumor cells"], &[Some("nuclei dense round pale")], ctx).unwrap();
    assert_eq!(a.features.dims(), b.features.dims());
    assert!(max_abs_diff(&a.features, &b.features) > 1e-4);
}

#[test]
fn every_mode_trains_its_modules() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for mode in AblationMode::ALL {
        let model = GroundingModel::new(random_config(&mut rng, mode), word_vocab(), 3, &Device::Cpu).unwrap();
        let images = random_images(&mut rng, 2, 64, 32);
        let mut drng = ChaCha8Rng::seed_from_u64(0);
        let out = model
            .forward_batch(
                &images,
                &["tumor cells", "spindle cells in cords"],
                &[Some("pale nuclei"), Some("dark crowded nuclei")],
                &mut Ctx::train(&mut drng),
            )
            .unwrap();
        let gt = Tensor::new(&[[0.3f32, 0.4, 0.2, 0.3], [0.6, 0.5, 0.4, 0.2]], &Device::Cpu).unwrap();
        let loss = box_loss(&out.boxes, &gt, &LossConfig::default()).unwrap();
        let grads = named_grads(&model.params().vars(), &loss.total.backward().unwrap());
        let nonzero = |prefix: &str| {
            grads.iter().filter(|(n, _)| n.starts_with(prefix)).any(|(_, g)| {
                g.abs().unwrap().sum_all().unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap() > 0.0
            })
        };
        for prefix in ["visual.", "text.", "cfm."] {
            assert!(nonzero(prefix), "{mode}: no gradient under {prefix}");
        }
        assert_eq!(nonzero("kfm."), mode == AblationMode::BranchKfm, "{mode}");
    }
}

#[test]
fn missing_knowledge_names_the_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = GroundingModel::new(random_config(&mut rng, AblationMode::BranchKfm), word_vocab(), 0, &Device::Cpu).unwrap();
    let gt = pathground::BoundingBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
    let mut s = common::blank_sample("train-x40-00042", pathground::Magnification::X40, gt);
    s.knowledge = None;
    match model.forward(&s) {
        Err(Error::Config(m)) => assert!(m.contains("train-x40-00042"), "{m}"),
        other => panic!("expected a configuration error, got {other:?}"),
    }
}
