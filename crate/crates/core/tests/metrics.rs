mod support;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semsplat::metrics::{psnr, ssim, PSNR_CAP_DB};
use support::oracles::*;

#[test]
fn metrics_match_reference_on_random_pairs() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (rng.random_range(11..40), rng.random_range(11..40));
        let a = random_image(&mut rng, w, h, 3);
        // Correlated pair so SSIM is far from zero.
        let mut b = a.clone();
        b.data.iter_mut().for_each(|v| *v = (*v + 0.2 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0));
        let p = psnr(&a, &b).unwrap();
        assert!((p - psnr_reference(&a, &b)).abs() <= 1e-4, "psnr seed {seed}");
        let s = ssim(&a, &b).unwrap();
        let r = ssim_reference(&a, &b);
        assert!((s - r).abs() <= 1e-3, "ssim seed {seed}: {s} vs {r}");
    }
}

#[test]
fn identical_images_hit_caps() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_image(&mut rng, 16, 16, 3);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
}
