use super::*;
use crate::dataset_forge::digits::DigitSource;
use crate::dataset_forge::{generate_colored_mnist, BiasedDatasetSpec, SplitSizes};

fn toy_images(n: usize) -> Vec<Image> {
    let src = DigitSource::procedural(n.div_ceil(10), 1, 3);
    let spec = BiasedDatasetSpec::colored_mnist(0.9, SplitSizes { train: n, unbiased_test: 0, guiding_test: 0 }, 3);
    generate_colored_mnist(&spec, &src).unwrap().train().iter().map(|e| e.image.clone()).collect()
}

fn small_config() -> SwapAeConfig {
    SwapAeConfig { crop_mode: CropMode::Uniform, batch_size: 4, ..SwapAeConfig::default() }
}

#[test]
fn latent_and_output_shapes() {
    let s = SwapAEState::new(SwapAeConfig::default(), 1).unwrap();
    let img = &toy_images(1)[0];
    let z = s.encode(img).unwrap();
    assert_eq!(z.z_c.shape, vec![4, 7, 7]);
    assert_eq!(z.z_s.len(), 16);
    let out = s.decode(&z).unwrap();
    assert_eq!(out.shape(), [28, 28, 3]);
    assert!(out.in_unit_range());
    assert!(s.encode(&Image::zeros(32, 32, 3)).is_err());
}

#[test]
fn reconstruction_loss_values() {
    let imgs = toy_images(2);
    assert_eq!(reconstruction_loss(&imgs[0], &imgs[0]).unwrap(), 0.0);
    let zeros = Image::zeros(28, 28, 3);
    let ones = Image::new(28, 28, 3, vec![1.0; 28 * 28 * 3]);
    assert_eq!(reconstruction_loss(&zeros, &ones).unwrap(), 1.0);
    let mut acc = 0.0f64;
    for r in 0..28 {
        for c in 0..28 {
            for ch in 0..3 {
                let d = imgs[0].at(r, c, ch) as f64 - imgs[1].at(r, c, ch) as f64;
                acc += d * d;
            }
        }
    }
    let oracle = acc / (28.0 * 28.0 * 3.0);
    assert!((reconstruction_loss(&imgs[0], &imgs[1]).unwrap() - oracle).abs() < 1e-6);
    assert!(reconstruction_loss(&zeros, &Image::zeros(27, 28, 3)).is_err());
}

#[test]
fn gan_loss_values() {
    let g = gan_losses(&[], &[0.5]);
    assert!((g.generator - 2f64.ln()).abs() < 1e-12);
    let opt = gan_losses(&[1.0 - GAN_EPS], &[GAN_EPS]);
    assert!(opt.discriminator < 1e-6);
    let real = [0.9, 0.2, 0.6];
    let fake = [0.1, 0.7, 0.4];
    let l = gan_losses(&real, &fake);
    let g_oracle = (-(0.1f64).ln() - (0.7f64).ln() - (0.4f64).ln()) / 3.0;
    let d_oracle = (-(0.9f64).ln() - (0.2f64).ln() - (0.6f64).ln()) / 3.0
        + (-(0.9f64).ln() - (0.3f64).ln() - (0.6f64).ln()) / 3.0;
    assert!((l.generator - g_oracle).abs() < 1e-12);
    assert!((l.discriminator - d_oracle).abs() < 1e-12);
    // clamping keeps both sides finite at the edges
    assert!(gan_losses(&[0.0], &[1.0]).discriminator.is_finite());
}

#[test]
fn confused_patch_discriminator_gives_log2() {
    let mut s = SwapAEState::new(small_config(), 2).unwrap();
    let w = s.nets.patch_h2.weight;
    let b = s.nets.patch_h2.bias.unwrap();
    s.store.get_mut(w).data.iter_mut().for_each(|v| *v = 0.0);
    s.store.get_mut(b).data.iter_mut().for_each(|v| *v = 0.0);
    let imgs = toy_images(2);
    for (g, st) in [(&imgs[0], &imgs[0]), (&imgs[0], &imgs[1])] {
        let l = s.cooccurrence_loss(g, st, CropMode::Uniform, None).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-6);
    }
    assert!(s.cooccurrence_loss(&imgs[0], &imgs[1], CropMode::BiasTailored, None).is_err());
}

#[test]
fn identity_swap_is_reconstruction() {
    let s = SwapAEState::new(SwapAeConfig::default(), 3).unwrap();
    let img = &toy_images(1)[0];
    let a = s.swap_generate(img, img).unwrap();
    let b = s.decode(&s.encode(img).unwrap()).unwrap();
    assert_eq!(a, b);
}

fn self_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|i| (i, (i * 7 + 3) % n)).collect()
}

#[test]
fn autoencoder_only_reconstruction_improves() {
    let imgs = toy_images(64);
    let targets = vec![0; 64];
    let pairs = self_pairs(64);
    let cfg = SwapAeConfig {
        lambda_gan_recon: 0.0,
        lambda_gan_swap: 0.0,
        lambda_cooccur: 0.0,
        batch_size: 64,
        learning_rate: 1e-3,
        ..small_config()
    };
    let mut s = SwapAEState::new(cfg, 4).unwrap();
    let data = SwapTrainData { images: &imgs, targets: &targets, pairs: &pairs, distributions: None, classifier: None };
    let held = toy_images(70)[64..].to_vec();
    let held_loss = |s: &SwapAEState| {
        held.iter().map(|x| reconstruction_loss(x, &s.decode(&s.encode(x).unwrap()).unwrap()).unwrap()).sum::<f64>()
    };
    let before = held_loss(&s);
    let log = s.train(&data, 100, None).unwrap();
    let after = held_loss(&s);
    assert!(after < before, "{before} -> {after}");
    let smooth: Vec<f64> = log.chunks(25).map(|c| c.iter().map(|l| l.recon).sum::<f64>() / c.len() as f64).collect();
    assert!(smooth[smooth.len() - 1] < 0.8 * smooth[0], "{smooth:?}");
    assert!(log.iter().all(|l| l.gan_recon >= 0.0 && l.cooccur >= 0.0));
}

#[test]
fn training_is_deterministic_and_resumable() {
    let imgs = toy_images(16);
    let targets = vec![0; 16];
    let pairs = self_pairs(16);
    let data = SwapTrainData { images: &imgs, targets: &targets, pairs: &pairs, distributions: None, classifier: None };
    let mut a = SwapAEState::new(small_config(), 5).unwrap();
    let mut b = SwapAEState::new(small_config(), 5).unwrap();
    let la = a.train(&data, 3, None).unwrap();
    let lb = b.train(&data, 3, None).unwrap();
    assert_eq!(la, lb);
    assert!(a == b);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("swap.ckpt");
    a.save(&path).unwrap();
    let mut c = SwapAEState::load(&path).unwrap();
    assert!(c == a);
    a.train(&data, 2, None).unwrap();
    c.train(&data, 2, None).unwrap();
    assert!(c == a);
}

#[test]
fn nan_input_names_the_component() {
    let mut imgs = toy_images(4);
    imgs[0].data[100] = f32::NAN;
    let mut s = SwapAEState::new(small_config(), 6).unwrap();
    let x = batch_tensor(imgs.iter());
    let err = s.training_step(&x, &x, None).unwrap_err();
    assert!(matches!(err, Error::NonFiniteSwapLoss { step: 1, .. }), "{err}");
}

#[test]
fn config_guards() {
    let mut s = SwapAEState::new(SwapAeConfig::default(), 7).unwrap();
    let x = batch_tensor(toy_images(2).iter());
    assert!(s.training_step(&x, &x, None).is_err());
    let bad = SwapAeConfig { r1_gamma: -1.0, ..SwapAeConfig::default() };
    assert!(SwapAEState::new(bad, 0).is_err());
    let bad = SwapAeConfig { image_size: 30, ..SwapAeConfig::default() };
    assert!(SwapAEState::new(bad, 0).is_err());
}

#[test]
fn sample_grid_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = toy_images(2);
    let refs: Vec<&Image> = imgs.iter().collect();
    write_sample_grid(&refs, &refs, &imgs, &dir.path().join("g.png")).unwrap();
    let g = image::open(dir.path().join("g.png")).unwrap();
    assert_eq!((g.width(), g.height()), (3 * 28 + 2, 56));
    let log = vec![LossComponents { step: 1, recon: 0.1, gan_recon: 0.7, gan_swap: 0.7, cooccur: 0.69, d_image: 1.3, d_patch: 1.4 }];
    write_loss_csv(&log, &dir.path().join("l.csv")).unwrap();
    let text = fs::read_to_string(dir.path().join("l.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
}
