use dpae_autograd::Tensor;
use dpae_core::data::{
    add_noise, generate_dataset, mask_patches, normalize, read_dataset, write_dataset, BreakLocation, GeneratorConfig,
    PatchGrid, Split, TEST_CLIP,
};
use dpae_core::rng::stream;
use proptest::prelude::*;

#[test]
fn generation_is_deterministic_per_seed() {
    let a = generate_dataset(&GeneratorConfig::desk(4)).unwrap();
    let b = generate_dataset(&GeneratorConfig::desk(4)).unwrap();
    let c = generate_dataset(&GeneratorConfig::desk(5)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.samples[0].matrix, c.samples[0].matrix);
}

#[test]
fn paper_profile_labels_and_split() {
    let config = GeneratorConfig::paper(1);
    let d = generate_dataset(&config).unwrap();
    assert_eq!(d.len(), 356);
    assert_eq!(d.samples[0].matrix.shape(), &[200, 38]);
    let (lo, hi) = config.size_range_cm;
    assert!(d.samples.iter().all(|s| (lo..=hi).contains(&s.label.size_cm)));
    for location in [BreakLocation::ColdLeg, BreakLocation::HotLeg] {
        let train = d
            .indices(Split::Train)
            .into_iter()
            .filter(|&i| d.samples[i].label.location == location)
            .count();
        assert_eq!(train, (178.0f64 * 0.8).round() as usize);
    }
}

#[test]
fn normalization_round_trips_and_bounds_train() {
    let raw = generate_dataset(&GeneratorConfig::desk(2)).unwrap();
    let norm = normalize(&raw);
    assert!(norm.normalized);
    for i in norm.indices(Split::Train) {
        assert!(norm.samples[i].matrix.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    for i in norm.indices(Split::Test) {
        assert!(norm.samples[i].matrix.data().iter().all(|v| (TEST_CLIP.0..=TEST_CLIP.1).contains(v)));
    }
    let i = norm.indices(Split::Train)[0];
    let back = norm.stats.denormalize(&norm.samples[i].matrix);
    for (a, b) in back.data().iter().zip(raw.samples[i].matrix.data()) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

#[test]
fn dataset_survives_disk_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = GeneratorConfig::desk(6);
    config.count = 8;
    let d = normalize(&generate_dataset(&config).unwrap());
    write_dataset(&d, tmp.path(), &serde_json::json!({"note": "test"})).unwrap();
    assert_eq!(read_dataset(tmp.path()).unwrap(), d);
}

#[test]
fn noise_power_matches_requested_snr() {
    let (p, l) = (4000, 3);
    let x = Tensor::new(vec![p, l], (0..p * l).map(|k| 0.5 + (k % 7) as f64 * 0.1).collect()).unwrap();
    let mut rng = stream(11, 0);
    for snr in [10.0, 25.0] {
        let y = add_noise(&x, Some(snr), &mut rng).unwrap();
        for c in 0..l {
            let signal = (0..p).map(|t| x.get(t, c).powi(2)).sum::<f64>() / p as f64;
            let noise = (0..p).map(|t| (y.get(t, c) - x.get(t, c)).powi(2)).sum::<f64>() / p as f64;
            let measured = 10.0 * (signal / noise).log10();
            assert!((measured - snr).abs() < 0.2, "channel {c}: {measured} dB for {snr} dB");
        }
    }
}

proptest! {
    #[test]
    fn patchify_inverts(m in 1usize..4, l in 1usize..5, d in 1usize..6, seed in 0u64..1000) {
        let p = m * d;
        let grid = PatchGrid::new(p, l, d).unwrap();
        let x = Tensor::new(vec![p, l], (0..p * l).map(|k| (k as f64 + seed as f64).sin()).collect()).unwrap();
        let xp = grid.patchify(&x).unwrap();
        prop_assert_eq!(xp.shape(), &[m * l, d][..]);
        prop_assert_eq!(grid.unpatchify(&xp).unwrap(), x);
    }

    #[test]
    fn masking_zeroes_exactly_the_rounded_count(n in 1usize..60, d in 1usize..5, ratio in 0.0f64..=1.0, seed: u64) {
        let xp = Tensor::new(vec![n, d], vec![1.0; n * d]).unwrap();
        let (out, mask) = mask_patches(&xp, ratio, &mut stream(seed, 0)).unwrap();
        let zeroed = mask.iter().filter(|&&m| m).count();
        prop_assert_eq!(zeroed, (ratio * n as f64).round() as usize);
        for r in 0..n {
            let expected = if mask[r] { 0.0 } else { 1.0 };
            prop_assert!((0..d).all(|c| out.get(r, c) == expected));
        }
    }
}

