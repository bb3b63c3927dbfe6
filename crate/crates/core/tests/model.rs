use mmcl::mitigation::{lora_attach, lora_merge, LoraConfig, RankSpec, TargetRule};
use mmcl::model::{
    assemble_parts, assemble_sequence, forward, gradients, init_parameters, mean_loss, Component, ModelConfig,
    Parameters, TrainabilityMask,
};
use mmcl::rng::{normal, rng_from};
use mmcl::synthdata::{Sample, SceneSpec, SyntheticImage, IMG};
use mmcl::Error;

fn tiny() -> ModelConfig {
    ModelConfig {
        layers: 1,
        d_model: 8,
        heads: 2,
        ffn: 16,
        context: 32,
        vocab: 16,
        patches: 4,
        patch_features: 4,
        vision_dim: 4,
    }
}

fn image(seed: u64) -> SyntheticImage {
    let mut rng = rng_from(seed);
    SyntheticImage {
        patches: 4,
        features: 4,
        data: (0..16).map(|_| normal::<f32, _>(&mut rng, 1.0)).collect(),
        scene: SceneSpec { objects: vec![], glyph: None },
    }
}

fn batch() -> Vec<Sample> {
    let mut vl = Sample::text(2, vec![IMG, 7, 9], vec![11, 12, 2]);
    vl.image = Some(image(5));
    let text = Sample::text(1, vec![6, 8, 10], vec![13, 14]);
    vec![vl, text]
}

fn perturbed(params: &Parameters<f64>, name: &str, idx: usize, h: f64) -> Parameters<f64> {
    let mut p = params.clone();
    p.visit_mut(&mut |n, _, t| {
        if n == name {
            t.as_mut_slice()[idx] += h;
        }
    });
    p
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

#[test]
fn finite_difference_full_fine_tuning() {
    let cfg = tiny();
    let params = init_parameters::<f64>(&cfg, 3).unwrap();
    assert!(params.count() <= 5000, "{} parameters", params.count());
    let samples = batch();
    let refs: Vec<&Sample> = samples.iter().collect();
    let rule = TargetRule::Smoothed { alpha: 0.1 };
    let (l, grads) = gradients(&params, None, &refs, &TrainabilityMask::fine_tuning(), rule).unwrap();
    assert!((l - mean_loss(&params, None, &samples, rule).unwrap()).abs() < 1e-12);

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (name, g) in &grads {
        for (i, &a) in g.as_slice().iter().enumerate() {
            let lp = mean_loss(&perturbed(&params, name, i, h), None, &samples, rule).unwrap();
            let lm = mean_loss(&perturbed(&params, name, i, -h), None, &samples, rule).unwrap();
            let n = (lp - lm) / (2.0 * h);
            let e = rel_err(a, n);
            assert!(e < 1e-4, "{name}[{i}]: analytic {a} numeric {n}");
            worst = worst.max(e);
            checked += 1;
        }
    }
    assert!(checked > 1000);
    assert!(grads.keys().any(|k| k.starts_with("alignment.")));
    assert!(!grads.contains_key("vision_encoder.weight"));
}

#[test]
fn finite_difference_adapters() {
    let cfg = tiny();
    let params = init_parameters::<f64>(&cfg, 4).unwrap();
    let lcfg = LoraConfig { rank: RankSpec::Explicit(2), ..LoraConfig::default() };
    let mut ad = lora_attach(&params, &lcfg, 1).unwrap();
    let mut rng = rng_from(77);
    ad.visit_mut(&mut |_, t| t.as_mut_slice().iter_mut().for_each(|v| *v += normal::<f64, _>(&mut rng, 0.3)));
    let samples = batch();
    let refs: Vec<&Sample> = samples.iter().collect();
    let rule = TargetRule::OneHot;
    let (_, grads) = gradients(&params, Some(&ad), &refs, &TrainabilityMask::lora(), rule).unwrap();
    assert!(grads.keys().all(|k| k.starts_with("lora.") || k.starts_with("alignment.")));

    let h = 1e-5;
    for (name, g) in grads.iter().filter(|(k, _)| k.starts_with("lora.")) {
        for (i, &a) in g.as_slice().iter().enumerate() {
            let loss_at = |delta: f64| {
                let mut p = ad.clone();
                p.visit_mut(&mut |n, t| {
                    if n == name {
                        t.as_mut_slice()[i] += delta;
                    }
                });
                mean_loss(&params, Some(&p), &samples, rule).unwrap()
            };
            let n = (loss_at(h) - loss_at(-h)) / (2.0 * h);
            assert!(rel_err(a, n) < 1e-4, "{name}[{i}]: analytic {a} numeric {n}");
        }
    }
}

#[test]
fn masks_select_gradient_sets() {
    let params = init_parameters::<f64>(&tiny(), 1).unwrap();
    let samples = batch();
    let refs: Vec<&Sample> = samples.iter().collect();
    let (_, g) = gradients(&params, None, &refs, &TrainabilityMask::alignment_stage(), TargetRule::OneHot).unwrap();
    assert_eq!(g.len(), 4);
    assert!(g.keys().all(|k| k.starts_with("alignment.")));
    let (_, g) = gradients(&params, None, &refs, &TrainabilityMask::pretraining(), TargetRule::OneHot).unwrap();
    assert!(g.keys().all(|k| !k.starts_with("alignment.") && k != "vision_encoder.weight"));
    let names = params.names();
    assert!(names.iter().any(|(n, c)| n == "vision_encoder.weight" && *c == Component::VisionEncoder));
}

#[test]
fn causal_prefix_is_unaffected_by_later_tokens() {
    let params = init_parameters::<f64>(&tiny(), 2).unwrap();
    let im = image(1);
    let a = assemble_parts(&params, Some(&im), &[IMG, 7], &[8, 9, 10]).unwrap();
    let b = assemble_parts(&params, Some(&im), &[IMG, 7], &[8, 15, 3]).unwrap();
    let la = forward(&params, None, &a.embeddings).unwrap();
    let lb = forward(&params, None, &b.embeddings).unwrap();
    let keep = a.len() - 2;
    for r in 0..keep {
        assert_eq!(la.row(r), lb.row(r));
    }
    assert_ne!(la.row(keep), lb.row(keep));
    assert_eq!(a.image_span, Some((1, 4)));
}

#[test]
fn attached_adapters_start_neutral_and_merge_exactly() {
    let params = init_parameters::<f64>(&tiny(), 9).unwrap();
    let samples = batch();
    let asm = assemble_sequence(&params, &samples[0]).unwrap();
    let base = forward(&params, None, &asm.embeddings).unwrap();
    let mut ad = lora_attach(&params, &LoraConfig::default(), 3).unwrap();
    assert_eq!(forward(&params, Some(&ad), &asm.embeddings).unwrap(), base);

    let mut rng = rng_from(8);
    ad.visit_mut(&mut |n, t| {
        if n.ends_with(".b") {
            t.as_mut_slice().iter_mut().for_each(|v| *v = normal::<f64, _>(&mut rng, 0.2));
        }
    });
    let with = forward(&params, Some(&ad), &asm.embeddings).unwrap();
    assert!(with.max_abs_diff(&base) > 1e-3);
    let merged = lora_merge(params.clone(), ad.clone()).unwrap();
    let after = forward(&merged, None, &asm.embeddings).unwrap();
    assert!(after.max_abs_diff(&with) < 1e-10);

    let other = init_parameters::<f64>(&tiny(), 10).unwrap();
    assert!(matches!(lora_merge(other, ad), Err(Error::AdapterMismatch(_))));
}

#[test]
fn f32_tracks_f64() {
    let p64 = init_parameters::<f64>(&tiny(), 6).unwrap();
    let p32 = init_parameters::<f32>(&tiny(), 6).unwrap();
    let s = &batch()[0];
    let l64 = forward(&p64, None, &assemble_sequence(&p64, s).unwrap().embeddings).unwrap();
    let l32 = forward(&p32, None, &assemble_sequence(&p32, s).unwrap().embeddings).unwrap();
    for (a, b) in l64.as_slice().iter().zip(l32.as_slice()) {
        assert!((a - f64::from(*b)).abs() < 1e-4);
    }
}

#[test]
fn malformed_sequences_are_rejected() {
    let params = init_parameters::<f64>(&tiny(), 1).unwrap();
    let im = image(0);
    assert!(matches!(assemble_parts(&params, None, &[IMG, 7], &[8]), Err(Error::Placeholder(_))));
    assert!(matches!(assemble_parts(&params, Some(&im), &[7], &[8]), Err(Error::Placeholder(_))));
    assert!(matches!(assemble_parts(&params, Some(&im), &[IMG, IMG], &[8]), Err(Error::Placeholder(_))));
    let long = vec![7; 40];
    assert!(matches!(
        assemble_parts(&params, None, &long, &[8]),
        Err(Error::ContextExceeded { len: 42, budget: 32 })
    ));
    assert!(assemble_parts(&params, None, &[99], &[8]).is_err());
}
