use super::*;
use crate::degradation::NoiseSpec;

fn tiny() -> ModelConfig {
    ModelConfig::toy(4, 8, 2, &[(4, 2)], 1)
}

fn train_cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch: 2,
        lr: 1e-3,
        lr_drop_step: None,
        noise: NoiseSpec::GaussianIid { sigma: 50.0 },
        patch: Some((8, 8)),
        seed: 3,
    }
}

fn bits(m: &SertModel) -> Vec<u64> {
    m.store().tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn textures_are_in_range_and_low_rank() {
    let t = synth_texture(16, 16, 8, 1, 0);
    assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(t, synth_texture(16, 16, 8, 1, 0));
    assert_ne!(t, synth_texture(16, 16, 8, 1, 1));
    // greedy Gram-Schmidt over pixel spectra never needs more than 3 vectors
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for px in t.data().chunks(8) {
        let mut r = px.to_vec();
        for q in &basis {
            let d: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
            r.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        }
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-8 {
            basis.push(r.iter().map(|v| v / n).collect());
        }
    }
    assert!(basis.len() <= 3, "{}", basis.len());
}

#[test]
fn batches_replay_from_seed_and_step() {
    let data = Dataset::synthetic(5, 12, 12, 4, 2);
    let cfg = train_cfg(1);
    let a = batch_at(&data, &cfg, 7).unwrap();
    let b = batch_at(&data, &cfg, 7).unwrap();
    let c = batch_at(&data, &cfg, 8).unwrap();
    assert_eq!(a.len(), 2);
    assert_eq!(a[0].noisy.shape(), &[8, 8, 4]);
    assert_eq!(a[1].noisy, b[1].noisy);
    assert_ne!(a[0].noisy, c[0].noisy);
}

#[test]
fn resumed_training_equals_uninterrupted() {
    let data = Dataset::synthetic(4, 8, 8, 4, 5);
    let cfg = train_cfg(6);
    let mut straight = Trainer::new(SertModel::init(&tiny(), 11).unwrap(), 11, cfg.clone());
    straight.run(&data, |_, _| {}).unwrap();

    let mut first = Trainer::new(SertModel::init(&tiny(), 11).unwrap(), 11, cfg.clone());
    for _ in 0..3 {
        first.step(&data).unwrap();
    }
    let bytes = first.checkpoint().to_bytes().unwrap();
    let mut resumed = Trainer::resume(&Checkpoint::from_bytes(&bytes).unwrap(), cfg).unwrap();
    assert_eq!(resumed.step, 3);
    resumed.run(&data, |_, _| {}).unwrap();
    assert_eq!(bits(&resumed.model), bits(&straight.model));
    assert_eq!(resumed.adam, straight.adam);
}

#[test]
fn training_reduces_the_loss() {
    let data = Dataset::synthetic(4, 8, 8, 4, 6);
    let mut cfg = train_cfg(40);
    cfg.batch = 1;
    let mut t = Trainer::new(SertModel::init(&tiny(), 1).unwrap(), 1, cfg);
    let val: Vec<Tensor> = (0..2).map(|i| synth_texture(8, 8, 4, 99, i)).collect();
    let noise = NoiseSpec::GaussianIid { sigma: 50.0 };
    let before = validate(&t.model, &val, &noise, 0).unwrap();
    // identity at initialization
    assert_eq!(before.noisy_psnr, before.denoised_psnr);
    t.run(&data, |_, _| {}).unwrap();
    let after = validate(&t.model, &val, &noise, 0).unwrap();
    assert!(after.denoised_psnr > before.denoised_psnr + 0.5, "{before:?} -> {after:?}");
}

#[test]
fn learning_rate_schedule() {
    let (steps, drop) = TrainConfig::epochs(80, 10, 4);
    assert_eq!(steps, 240);
    assert_eq!(drop, Some(150));
    let mut cfg = train_cfg(240);
    cfg.lr_drop_step = drop;
    assert_eq!(cfg.lr_at(149), 1e-3);
    assert_eq!(cfg.lr_at(150), 1e-4);
}

#[test]
fn datasets_must_share_band_count() {
    assert!(Dataset::new(vec![]).is_err());
    let imgs = vec![synth_texture(4, 4, 3, 1, 0), synth_texture(4, 4, 4, 1, 1)];
    assert!(matches!(Dataset::new(imgs), Err(Error::Dimension(_))));
}

#[test]
fn oversized_patches_are_rejected() {
    let data = Dataset::synthetic(1, 6, 6, 4, 1);
    assert!(matches!(batch_at(&data, &train_cfg(1), 0), Err(Error::Usage(_))));
}

#[test]
fn parameter_groups_collapse_indices() {
    assert_eq!(param_group("layers.2.blocks.5.ra.h.wq"), "layers.*.blocks.*.ra.h.wq");
    assert_eq!(param_group("head.w"), "head.w");
}

#[test]
fn whole_model_check_passes_on_sampled_entries() {
    let report = gradcheck_model(&tiny(), 4, 8, 8, Some(6)).unwrap();
    let groups = group_errors(&report);
    assert!(groups.iter().any(|(g, _)| g == "layers.*.blocks.*.se.memory"));
    for (g, e) in groups {
        assert!(e < 1e-4, "{g}: {e}");
    }
}
