//! Swapping autoencoder: encoder E, modulated generator G, image
//! discriminator D and patch co-occurrence discriminator D_patch.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, CropBox, ParamId, ParamStore, Tape, Tensor, Var};
use crate::cam_sampler::{sample_placements, to_sampling_distribution, CropMode, ImportanceMap, PatchDistribution};
use crate::classifiers::Classifier;
use crate::dataset_forge::{batch_tensor, unbatch_tensor, Image};
use crate::nn::{Conv, Dense, Modulation, LEAKY_SLOPE};
use crate::{Error, Result};

/// Probability clamp used by the scalar GAN losses.
pub const GAN_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapAeConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub enc_widths: [usize; 2],
    pub content_channels: usize,
    pub style_dim: usize,
    pub gen_width: usize,
    pub disc_width: usize,
    pub patch_features: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub betas: (f32, f32),
    pub lambda_recon: f32,
    pub lambda_gan_recon: f32,
    pub lambda_gan_swap: f32,
    pub lambda_cooccur: f32,
    pub temperature: f64,
    pub patch_size: usize,
    pub reference_crops: usize,
    pub crop_mode: CropMode,
    /// Pixel stride of one sampling-grid cell.
    pub cam_stride: usize,
    /// R1 penalty weight on the image discriminator.
    pub r1_gamma: f32,
    /// Finite-difference step of the R1 estimate.
    pub r1_sigma: f32,
    /// Decay of the inference weight average; 0 keeps the raw weights.
    pub ema_decay: f32,
    pub sample_every: u64,
}

impl Default for SwapAeConfig {
    fn default() -> Self {
        Self {
            image_size: 28,
            image_channels: 3,
            enc_widths: [16, 32],
            content_channels: 4,
            style_dim: 16,
            gen_width: 32,
            disc_width: 16,
            patch_features: 32,
            steps: 5000,
            batch_size: 8,
            learning_rate: 0.002,
            betas: (0.0, 0.99),
            lambda_recon: 1.0,
            lambda_gan_recon: 1.0,
            lambda_gan_swap: 1.0,
            lambda_cooccur: 1.0,
            temperature: crate::cam_sampler::DEFAULT_TEMPERATURE,
            patch_size: 7,
            reference_crops: crate::cam_sampler::DEFAULT_REFERENCE_CROPS,
            crop_mode: CropMode::BiasTailored,
            cam_stride: 4,
            r1_gamma: 10.0,
            r1_sigma: 0.01,
            ema_decay: 0.999,
            sample_every: 500,
        }
    }
}

impl SwapAeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.image_size % 4 != 0 || self.image_size == 0 {
            return bad(format!("image size {} must be a positive multiple of 4", self.image_size));
        }
        if self.patch_size == 0 || self.patch_size > self.image_size {
            return bad(format!("patch size {} does not fit {}", self.patch_size, self.image_size));
        }
        if self.batch_size == 0 || self.reference_crops == 0 || self.cam_stride == 0 {
            return bad("batch_size, reference_crops and cam_stride must be positive".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.r1_gamma >= 0.0) || !(self.r1_sigma > 0.0) {
            return bad("r1_gamma must be nonnegative and r1_sigma positive".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay));
        }
        let lambdas = [self.lambda_recon, self.lambda_gan_recon, self.lambda_gan_swap, self.lambda_cooccur];
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            return bad("loss weights must be nonnegative".into());
        }
        Ok(())
    }

    pub fn content_side(&self) -> usize {
        self.image_size / 4
    }

    fn sampling_grid(&self) -> (usize, usize) {
        let g = self.image_size.div_ceil(self.cam_stride);
        (g, g)
    }
}

/// `z_c` is `[C_c, h, w]`, `z_s` has `style_dim` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair {
    pub z_c: Tensor,
    pub z_s: Vec<f32>,
}

#[derive(Clone, Debug)]
struct Nets {
    enc: [Conv; 3],
    content: Conv,
    style: Dense,
    gen_in: Conv,
    gen_mid: Conv,
    gen_last: Conv,
    gen_out: Conv,
    modulations: [Modulation; 3],
    disc: [Conv; 3],
    disc_head: Dense,
    patch: [Conv; 2],
    patch_fc: Dense,
    patch_h1: Dense,
    patch_h2: Dense,
}

fn down(n: usize) -> usize {
    (n - 1) / 2 + 1
}

impl Nets {
    fn build(cfg: &SwapAeConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> (Self, usize) {
        let c = cfg.image_channels;
        let [e0, e1] = cfg.enc_widths;
        let g = cfg.gen_width;
        let enc = [
            Conv::new(store, "enc0", c, e0, 3, 1, rng),
            Conv::new(store, "enc1", e0, e1, 3, 2, rng),
            Conv::new(store, "enc2", e1, e1, 3, 2, rng),
        ];
        let content = Conv::new(store, "enc.content", e1, cfg.content_channels, 1, 1, rng);
        let style = Dense::new(store, "enc.style", e1, cfg.style_dim, true, rng);
        let gen_in = Conv::new(store, "gen0", cfg.content_channels, g, 3, 1, rng);
        let gen_mid = Conv::new(store, "gen1", g, g, 3, 1, rng);
        let gen_last = Conv::new(store, "gen2", g, g / 2, 3, 1, rng);
        let gen_out = Conv::new(store, "gen.out", g / 2, c, 1, 1, rng);
        let modulations = [
            Modulation::new(store, "gen0.mod", cfg.style_dim, g, rng),
            Modulation::new(store, "gen1.mod", cfg.style_dim, g, rng),
            Modulation::new(store, "gen2.mod", cfg.style_dim, g / 2, rng),
        ];
        let generator_params = store.len();
        let d = cfg.disc_width;
        let disc = [
            Conv::new(store, "disc0", c, d, 3, 2, rng),
            Conv::new(store, "disc1", d, 2 * d, 3, 2, rng),
            Conv::new(store, "disc2", 2 * d, 2 * d, 3, 2, rng),
        ];
        let s = down(down(down(cfg.image_size)));
        let disc_head = Dense::new(store, "disc.head", 2 * d * s * s, 1, true, rng);
        let patch = [
            Conv::new(store, "patch0", c, d, 3, 1, rng),
            Conv::new(store, "patch1", d, 2 * d, 3, 2, rng),
        ];
        let ps = down(cfg.patch_size);
        let f = cfg.patch_features;
        let patch_fc = Dense::new(store, "patch.fc", 2 * d * ps * ps, f, true, rng);
        let patch_h1 = Dense::new(store, "patch.head0", 2 * f, f, true, rng);
        let patch_h2 = Dense::new(store, "patch.head1", f, 1, true, rng);
        let nets = Self {
            enc,
            content,
            style,
            gen_in,
            gen_mid,
            gen_last,
            gen_out,
            modulations,
            disc,
            disc_head,
            patch,
            patch_fc,
            patch_h1,
            patch_h2,
        };
        (nets, generator_params)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub step: u64,
    pub recon: f64,
    pub gan_recon: f64,
    pub gan_swap: f64,
    pub cooccur: f64,
    pub d_image: f64,
    pub d_patch: f64,
}

impl LossComponents {
    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("recon", self.recon),
            ("gan_recon", self.gan_recon),
            ("gan_swap", self.gan_swap),
            ("cooccur", self.cooccur),
            ("d_image", self.d_image),
            ("d_patch", self.d_patch),
        ]
    }
}

/// CAM inputs for bias-tailored crops.
pub struct CamContext<'a> {
    pub classifier: &'a Classifier,
    /// Target class of each content image, used for the swapped image's CAM.
    pub content_targets: &'a [usize],
    /// Sampling distribution of each style image.
    pub style_distributions: &'a [&'a PatchDistribution],
}

/// Everything trained, plus optimiser and sampler state.
#[derive(Clone, Debug)]
pub struct SwapAEState {
    pub config: SwapAeConfig,
    pub store: ParamStore,
    /// Moving average of the encoder and generator weights, used for inference.
    pub ema: ParamStore,
    n_gen: usize,
    nets: Nets,
    opt_g: Adam,
    opt_d: Adam,
    pub step: u64,
    seed: u64,
    rng: ChaCha8Rng,
}

fn lrelu(tape: &mut Tape, x: Var) -> Var {
    tape.leaky_relu(x, LEAKY_SLOPE)
}

/// `mean(softplus(sign · logits))`: the non-saturating `−log σ(±l)`.
fn nsgan(tape: &mut Tape, logits: Var, real: bool) -> Var {
    let l = if real { tape.scale(logits, -1.0) } else { logits };
    let sp = tape.softplus(l);
    tape.mean(sp)
}

impl SwapAEState {
    pub fn new(config: SwapAeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (nets, n_gen) = Nets::build(&config, &mut store, &mut init);
        let ids: Vec<ParamId> = store.ids().collect();
        let opt_g = Adam::new(&store, ids[..n_gen].to_vec(), config.learning_rate, config.betas);
        let opt_d = Adam::new(&store, ids[n_gen..].to_vec(), config.learning_rate, config.betas);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let ema = store.clone();
        Ok(Self { config, store, ema, n_gen, nets, opt_g, opt_d, step: 0, seed, rng })
    }

    fn check_images(&self, t: &Tensor) -> Result<()> {
        let (_, c, h, w) = t.dims4();
        let s = self.config.image_size;
        if (c, h, w) != (self.config.image_channels, s, s) {
            return Err(Error::InvalidArgument(format!(
                "image {h}x{w}x{c} does not match autoencoder resolution {s}x{s}x{}",
                self.config.image_channels
            )));
        }
        Ok(())
    }

    fn encode_var(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> (Var, Var) {
        let mut h = x;
        for conv in &self.nets.enc {
            let y = conv.forward(tape, store, h);
            h = lrelu(tape, y);
        }
        let zc = self.nets.content.forward(tape, store, h);
        let pooled = tape.global_avg_pool(h);
        let zs = self.nets.style.forward(tape, store, pooled);
        (zc, zs)
    }

    fn decode_var(&self, tape: &mut Tape, store: &ParamStore, zc: Var, zs: Var) -> Var {
        let n = &self.nets;
        let mut h = n.gen_in.forward(tape, store, zc);
        h = n.modulations[0].forward(tape, store, h, zs);
        h = lrelu(tape, h);
        h = tape.upsample2x(h);
        h = n.gen_mid.forward(tape, store, h);
        h = n.modulations[1].forward(tape, store, h, zs);
        h = lrelu(tape, h);
        h = tape.upsample2x(h);
        h = n.gen_last.forward(tape, store, h);
        h = n.modulations[2].forward(tape, store, h, zs);
        h = lrelu(tape, h);
        let out = n.gen_out.forward(tape, store, h);
        tape.sigmoid(out)
    }

    fn disc_var(&self, tape: &mut Tape, x: Var) -> Var {
        let mut h = x;
        for conv in &self.nets.disc {
            let y = conv.forward(tape, &self.store, h);
            h = lrelu(tape, y);
        }
        let n = tape.shape(h)[0];
        let per = tape.value(h).numel() / n;
        let flat = tape.reshape(h, vec![n, per]);
        self.nets.disc_head.forward(tape, &self.store, flat)
    }

    fn patch_features(&self, tape: &mut Tape, patches: Var) -> Var {
        let mut h = patches;
        for conv in &self.nets.patch {
            let y = conv.forward(tape, &self.store, h);
            h = lrelu(tape, y);
        }
        let n = tape.shape(h)[0];
        let per = tape.value(h).numel() / n;
        let flat = tape.reshape(h, vec![n, per]);
        let f = self.nets.patch_fc.forward(tape, &self.store, flat);
        lrelu(tape, f)
    }

    /// Logit that `target` co-occurs with the pooled `references` (`n` per target).
    fn patch_disc_var(&self, tape: &mut Tape, target: Var, references: Var) -> Var {
        let ft = self.patch_features(tape, target);
        let fr = self.patch_features(tape, references);
        let pooled = tape.group_mean(fr, self.config.reference_crops);
        let joint = tape.concat_cols(ft, pooled);
        let h = self.nets.patch_h1.forward(tape, &self.store, joint);
        let h = lrelu(tape, h);
        self.nets.patch_h2.forward(tape, &self.store, h)
    }

    /// Latents for an NCHW batch: `z_c [N, C_c, h, w]` and `z_s [N, style_dim]`.
    pub fn encode_batch(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_images(images)?;
        let mut tape = Tape::inference();
        let x = tape.constant(images.clone());
        let (zc, zs) = self.encode_var(&mut tape, &self.ema, x);
        Ok((tape.value(zc).clone(), tape.value(zs).clone()))
    }

    pub fn decode_batch(&self, z_c: &Tensor, z_s: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = z_c.dims4();
        let side = self.config.content_side();
        if c != self.config.content_channels || (h, w) != (side, side) {
            return Err(Error::InvalidArgument(format!("content code {c}x{h}x{w} has the wrong shape")));
        }
        if z_s.shape != [n, self.config.style_dim] {
            return Err(Error::InvalidArgument(format!("style code shape {:?}", z_s.shape)));
        }
        let mut tape = Tape::inference();
        let zc = tape.constant(z_c.clone());
        let zs = tape.constant(z_s.clone());
        let out = self.decode_var(&mut tape, &self.ema, zc, zs);
        Ok(tape.value(out).clone())
    }

    pub fn encode(&self, image: &Image) -> Result<LatentPair> {
        let (zc, zs) = self.encode_batch(&batch_tensor([image]))?;
        let mut shape = zc.shape.clone();
        shape.remove(0);
        Ok(LatentPair { z_c: Tensor::new(shape, zc.data), z_s: zs.data })
    }

    pub fn decode(&self, latents: &LatentPair) -> Result<Image> {
        let mut shape = vec![1];
        shape.extend_from_slice(&latents.z_c.shape);
        if shape.len() != 4 {
            return Err(Error::InvalidArgument("content code must be 3-D".into()));
        }
        let zc = Tensor::new(shape, latents.z_c.data.clone());
        let zs = Tensor::new(vec![1, latents.z_s.len()], latents.z_s.clone());
        Ok(unbatch_tensor(&self.decode_batch(&zc, &zs)?).remove(0))
    }

    /// `G(z_c(content), z_s(style))`.
    pub fn swap_generate(&self, content: &Image, style: &Image) -> Result<Image> {
        if self.step == 0 {
            eprintln!("warning: swap_generate called on an untrained autoencoder");
        }
        if content.shape() != style.shape() {
            return Err(Error::InvalidArgument("content and style images differ in shape".into()));
        }
        let c = self.encode(content)?;
        let s = self.encode(style)?;
        self.decode(&LatentPair { z_c: c.z_c, z_s: s.z_s })
    }

    /// Batched swap over aligned content/style lists.
    pub fn swap_generate_batch(&self, contents: &[&Image], styles: &[&Image]) -> Result<Vec<Image>> {
        if contents.len() != styles.len() {
            return Err(Error::InvalidArgument("content and style lists differ in length".into()));
        }
        if self.step == 0 && !contents.is_empty() {
            eprintln!("warning: swap_generate called on an untrained autoencoder");
        }
        let mut out = Vec::with_capacity(contents.len());
        for (cc, sc) in contents.chunks(128).zip(styles.chunks(128)) {
            let (zc, _) = self.encode_batch(&batch_tensor(cc.iter().copied()))?;
            let (_, zs) = self.encode_batch(&batch_tensor(sc.iter().copied()))?;
            out.extend(unbatch_tensor(&self.decode_batch(&zc, &zs)?));
        }
        Ok(out)
    }

    fn style_distribution(&self, dist: Option<&PatchDistribution>) -> PatchDistribution {
        let (gh, gw) = self.config.sampling_grid();
        match (self.config.crop_mode, dist) {
            (CropMode::BiasTailored, Some(d)) => d.clone(),
            _ => PatchDistribution::uniform(gh, gw),
        }
    }

    fn sample_boxes(
        &mut self,
        dist: &PatchDistribution,
        src: usize,
        n: usize,
    ) -> Result<Vec<CropBox>> {
        let s = self.config.image_size;
        let placements = sample_placements(
            dist,
            self.config.crop_mode,
            self.config.cam_stride,
            self.config.patch_size,
            n,
            (s, s),
            &mut self.rng,
        )?;
        Ok(placements.into_iter().map(|p| (src, p.top, p.left)).collect())
    }

    /// CAM sampling distributions of generated images for the given classes.
    fn generated_distributions(&self, images: &Tensor, classes: &[usize], classifier: &Classifier) -> Result<Vec<PatchDistribution>> {
        let fm = classifier.feature_maps(images)?;
        let (n, ch, h, w) = fm.maps.dims4();
        let hw = h * w;
        (0..n)
            .map(|i| {
                let wc = &fm.weights.data[classes[i] * ch..(classes[i] + 1) * ch];
                let mut values = vec![0.0f64; hw];
                for (k, wk) in wc.iter().enumerate() {
                    let plane = &fm.maps.data[(i * ch + k) * hw..(i * ch + k + 1) * hw];
                    for (v, f) in values.iter_mut().zip(plane) {
                        *v += *wk as f64 * *f as f64;
                    }
                }
                let map = ImportanceMap {
                    height: h,
                    width: w,
                    values,
                    class_index: classes[i],
                    source_example_id: String::new(),
                };
                to_sampling_distribution(&map, self.config.temperature)
            })
            .collect()
    }

    /// One generator update followed by one discriminator update on aligned
    /// content (`x1`) and style (`x2`) batches.
    pub fn training_step(&mut self, x1: &Tensor, x2: &Tensor, cams: Option<&CamContext>) -> Result<LossComponents> {
        self.check_images(x1)?;
        self.check_images(x2)?;
        let b = x1.shape[0];
        if x2.shape[0] != b || b == 0 {
            return Err(Error::InvalidArgument("content and style batches must be equal and nonempty".into()));
        }
        if self.config.crop_mode == CropMode::BiasTailored {
            match cams {
                None => {
                    return Err(Error::InvalidArgument(
                        "bias_tailored crops need CAM distributions for generated and style images".into(),
                    ))
                }
                Some(c) if c.content_targets.len() != b || c.style_distributions.len() != b => {
                    return Err(Error::InvalidArgument("CAM context does not match the batch".into()));
                }
                Some(c) if c.classifier.spec.feature_stride() != self.config.cam_stride => {
                    return Err(Error::InvalidArgument("classifier stride differs from cam_stride".into()));
                }
                _ => {}
            }
        }
        let step = self.step + 1;
        let cfg = self.config.clone();
        let n_ref = cfg.reference_crops;

        // generator pass
        let mut tape = Tape::new();
        let x1v = tape.constant(x1.clone());
        let x2v = tape.constant(x2.clone());
        let x = tape.concat_rows(&[x1v, x2v]);
        let (zc, zs) = self.encode_var(&mut tape, &self.store, x);
        let recon = self.decode_var(&mut tape, &self.store, zc, zs);
        let zc1 = tape.slice_rows(zc, 0, b);
        let zs2 = tape.slice_rows(zs, b, b);
        let swap = self.decode_var(&mut tape, &self.store, zc1, zs2);
        let diff = tape.sub(recon, x);
        let sq = tape.mul(diff, diff);
        let l_recon = tape.mean(sq);
        let fakes = tape.concat_rows(&[recon, swap]);
        let d_fake = self.disc_var(&mut tape, fakes);
        let d_rec = tape.slice_rows(d_fake, 0, 2 * b);
        let d_sw = tape.slice_rows(d_fake, 2 * b, b);
        let l_gan_recon = nsgan(&mut tape, d_rec, true);
        let l_gan_swap = nsgan(&mut tape, d_sw, true);

        let swap_t = tape.value(swap).clone();
        let swap_dists: Vec<PatchDistribution> = match (cfg.crop_mode, cams) {
            (CropMode::BiasTailored, Some(c)) => self.generated_distributions(&swap_t, c.content_targets, c.classifier)?,
            _ => vec![self.style_distribution(None); b],
        };
        let (mut fake_boxes, mut real_boxes, mut ref_boxes) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..b {
            let sd = self.style_distribution(cams.map(|c| c.style_distributions[i]));
            fake_boxes.extend(self.sample_boxes(&swap_dists[i], i, 1)?);
            real_boxes.extend(self.sample_boxes(&sd, i, 1)?);
            ref_boxes.extend(self.sample_boxes(&sd, i, n_ref)?);
        }
        let fake_patch = tape.crop(swap, &fake_boxes, cfg.patch_size);
        let refs = tape.crop(x2v, &ref_boxes, cfg.patch_size);
        let p_fake = self.patch_disc_var(&mut tape, fake_patch, refs);
        let l_cooc = nsgan(&mut tape, p_fake, true);

        let terms = [
            (l_recon, cfg.lambda_recon),
            (l_gan_recon, cfg.lambda_gan_recon),
            (l_gan_swap, cfg.lambda_gan_swap),
            (l_cooc, cfg.lambda_cooccur),
        ];
        let mut total = tape.scale(terms[0].0, terms[0].1);
        for &(t, w) in &terms[1..] {
            let s = tape.scale(t, w);
            total = tape.add(total, s);
        }
        let scalar = |tape: &Tape, v: Var| tape.value(v).data[0] as f64;
        let mut losses = LossComponents {
            step,
            recon: scalar(&tape, l_recon),
            gan_recon: scalar(&tape, l_gan_recon),
            gan_swap: scalar(&tape, l_gan_swap),
            cooccur: scalar(&tape, l_cooc),
            d_image: 0.0,
            d_patch: 0.0,
        };
        check_finite(&losses, step)?;
        let grads = tape.backward(total);
        self.opt_g.step(&mut self.store, &grads);
        self.update_ema();
        let recon_t = tape.value(recon).clone();
        drop(tape);

        // discriminator pass
        let gan_on = cfg.lambda_gan_recon > 0.0 || cfg.lambda_gan_swap > 0.0;
        let mut tape = Tape::new();
        let real = tape.constant(Tensor::new(
            vec![2 * b, x1.shape[1], x1.shape[2], x1.shape[3]],
            [x1.data.as_slice(), x2.data.as_slice()].concat(),
        ));
        let x2v = tape.constant(x2.clone());
        let fake_all = tape.constant(Tensor::new(
            vec![3 * b, x1.shape[1], x1.shape[2], x1.shape[3]],
            [recon_t.data.as_slice(), swap_t.data.as_slice()].concat(),
        ));
        let swap_c = tape.constant(swap_t);
        let dr = self.disc_var(&mut tape, real);
        let df = self.disc_var(&mut tape, fake_all);
        let l_dr = nsgan(&mut tape, dr, true);
        let l_df = nsgan(&mut tape, df, false);
        let d_image = tape.add(l_dr, l_df);
        let r1 = if cfg.r1_gamma > 0.0 {
            let real_t = tape.value(real).clone();
            Some(self.r1_penalty(&mut tape, &real_t, dr))
        } else {
            None
        };
        let real_patch = tape.crop(x2v, &real_boxes, cfg.patch_size);
        let refs = tape.crop(x2v, &ref_boxes, cfg.patch_size);
        let fake_patch = tape.crop(swap_c, &fake_boxes, cfg.patch_size);
        let pr = self.patch_disc_var(&mut tape, real_patch, refs);
        let pf = self.patch_disc_var(&mut tape, fake_patch, refs);
        let l_pr = nsgan(&mut tape, pr, true);
        let l_pf = nsgan(&mut tape, pf, false);
        let d_patch = tape.add(l_pr, l_pf);
        losses.d_image = scalar(&tape, d_image);
        losses.d_patch = scalar(&tape, d_patch);
        check_finite(&losses, step)?;
        let wi = if gan_on { 1.0 } else { 0.0 };
        let wp = if cfg.lambda_cooccur > 0.0 { 1.0 } else { 0.0 };
        if wi + wp > 0.0 {
            let a = tape.scale(d_image, wi);
            let p = tape.scale(d_patch, wp);
            let mut total_d = tape.add(a, p);
            if let (Some(r1), true) = (r1, gan_on) {
                total_d = tape.add(total_d, r1);
            }
            let grads = tape.backward(total_d);
            self.opt_d.step(&mut self.store, &grads);
        }
        self.step = step;
        Ok(losses)
    }

    fn update_ema(&mut self) {
        let d = self.config.ema_decay;
        let ids: Vec<ParamId> = self.store.ids().take(self.n_gen).collect();
        for id in ids {
            let src = &self.store.get(id).data;
            let dst = &mut self.ema.get_mut(id).data;
            for (e, p) in dst.iter_mut().zip(src) {
                *e = d * *e + (1.0 - d) * p;
            }
        }
    }

    /// `γ/2 · E‖∇ₓD(x)‖²` on real images, estimated as
    /// `E[((D(x + σε) − D(x)) / σ)²]` with Rademacher `ε`, whose expectation is
    /// the squared gradient norm up to O(σ).
    fn r1_penalty(&mut self, tape: &mut Tape, real: &Tensor, d_real: Var) -> Var {
        let sigma = self.config.r1_sigma;
        let mut shifted = real.clone();
        for v in shifted.data.iter_mut() {
            *v += if self.rng.random::<bool>() { sigma } else { -sigma };
        }
        let xs = tape.constant(shifted);
        let ds = self.disc_var(tape, xs);
        let diff = tape.sub(ds, d_real);
        let sq = tape.mul(diff, diff);
        let m = tape.mean(sq);
        tape.scale(m, 0.5 * self.config.r1_gamma / (sigma * sigma))
    }

    /// Runs `steps` updates on batches drawn uniformly from `data.pairs`.
    pub fn train(&mut self, data: &SwapTrainData, steps: u64, samples_dir: Option<&Path>) -> Result<Vec<LossComponents>> {
        data.validate(self.config.crop_mode)?;
        let b = self.config.batch_size;
        let per = data.images[0].data.len();
        let probe: Vec<(usize, usize)> = data.pairs.iter().take(8).copied().collect();
        let mut log = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let picks: Vec<(usize, usize)> =
                (0..b).map(|_| data.pairs[self.rng.random_range(0..data.pairs.len())]).collect();
            let gather = |idx: &mut dyn Iterator<Item = usize>| {
                let mut buf = Vec::with_capacity(b * per);
                let mut tmp = vec![0.0f32; per];
                for i in idx {
                    data.images[i].write_chw(&mut tmp);
                    buf.extend_from_slice(&tmp);
                }
                let img = &data.images[0];
                Tensor::new(vec![b, img.channels, img.height, img.width], buf)
            };
            let x1 = gather(&mut picks.iter().map(|p| p.0));
            let x2 = gather(&mut picks.iter().map(|p| p.1));
            let targets: Vec<usize> = picks.iter().map(|p| data.targets[p.0]).collect();
            let losses = match (data.classifier, data.distributions) {
                (Some(classifier), Some(dists)) => {
                    let style: Vec<&PatchDistribution> = picks.iter().map(|p| &dists[p.1]).collect();
                    let ctx = CamContext { classifier, content_targets: &targets, style_distributions: &style };
                    self.training_step(&x1, &x2, Some(&ctx))?
                }
                _ => self.training_step(&x1, &x2, None)?,
            };
            log.push(losses);
            if let Some(dir) = samples_dir {
                let every = self.config.sample_every;
                if every > 0 && (self.step % every == 0 || self.step == 1) && !probe.is_empty() {
                    fs::create_dir_all(dir)?;
                    let c: Vec<&Image> = probe.iter().map(|p| &data.images[p.0]).collect();
                    let s: Vec<&Image> = probe.iter().map(|p| &data.images[p.1]).collect();
                    let g = self.swap_generate_batch(&c, &s)?;
                    write_sample_grid(&c, &s, &g, &dir.join(format!("step_{:06}.png", self.step)))?;
                }
            }
        }
        Ok(log)
    }
}

fn check_finite(l: &LossComponents, step: u64) -> Result<()> {
    for (name, v) in l.named() {
        if !v.is_finite() {
            return Err(Error::NonFiniteSwapLoss { step, component: name.to_string() });
        }
    }
    Ok(())
}

/// Training images plus the candidate `(content, style)` index pairs.
pub struct SwapTrainData<'a> {
    pub images: &'a [Image],
    pub targets: &'a [usize],
    pub pairs: &'a [(usize, usize)],
    /// Per-image CAM sampling distributions (bias-tailored mode).
    pub distributions: Option<&'a [PatchDistribution]>,
    pub classifier: Option<&'a Classifier>,
}

impl SwapTrainData<'_> {
    fn validate(&self, mode: CropMode) -> Result<()> {
        if self.images.is_empty() || self.pairs.is_empty() {
            return Err(Error::InvalidArgument("autoencoder training needs images and pairs".into()));
        }
        if self.targets.len() != self.images.len() {
            return Err(Error::InvalidArgument("one target per image required".into()));
        }
        if self.pairs.iter().any(|&(a, b)| a >= self.images.len() || b >= self.images.len()) {
            return Err(Error::InvalidArgument("pair index out of range".into()));
        }
        if mode == CropMode::BiasTailored {
            match (self.classifier, self.distributions) {
                (Some(_), Some(d)) if d.len() == self.images.len() => {}
                _ => {
                    return Err(Error::InvalidArgument(
                        "bias_tailored crops need a classifier and one distribution per image".into(),
                    ))
                }
            }
        }
        Ok(())
    }
}

/// Mean squared error over all pixels and channels.
pub fn reconstruction_loss(x: &Image, x_hat: &Image) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::InvalidArgument(format!("shape {:?} vs {:?}", x.shape(), x_hat.shape())));
    }
    let s: f64 = x.data.iter().zip(&x_hat.data).map(|(a, b)| ((*a - *b) as f64).powi(2)).sum();
    Ok(s / x.data.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanLosses {
    pub generator: f64,
    pub discriminator: f64,
}

/// Non-saturating losses from discriminator probabilities, clamped to `[ε, 1 − ε]`.
pub fn gan_losses(d_real: &[f64], d_fake: &[f64]) -> GanLosses {
    let clamp = |p: f64| p.clamp(GAN_EPS, 1.0 - GAN_EPS);
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().map(|p| f(clamp(*p))).sum::<f64>() / v.len() as f64
        }
    };
    let generator = mean(d_fake, &|p| -p.ln());
    let discriminator = mean(d_real, &|p| -p.ln()) + mean(d_fake, &|p| -(1.0 - p).ln());
    GanLosses { generator, discriminator }
}

impl SwapAEState {
    /// Generator-side co-occurrence loss `−log D_patch(crop(generated), crops(style))`
    /// for a single image pair.
    pub fn cooccurrence_loss(
        &mut self,
        generated: &Image,
        style: &Image,
        mode: CropMode,
        distributions: Option<(&PatchDistribution, &PatchDistribution)>,
    ) -> Result<f64> {
        let (gh, gw) = self.config.sampling_grid();
        let uniform = PatchDistribution::uniform(gh, gw);
        let (dg, ds) = match (mode, distributions) {
            (CropMode::BiasTailored, Some(d)) => d,
            (CropMode::BiasTailored, None) => {
                return Err(Error::InvalidArgument("bias_tailored mode needs CAM distributions".into()))
            }
            (CropMode::Uniform, _) => (&uniform, &uniform),
        };
        let saved = self.config.crop_mode;
        self.config.crop_mode = mode;
        let fake_boxes = self.sample_boxes(dg, 0, 1);
        let ref_boxes = self.sample_boxes(ds, 0, self.config.reference_crops);
        self.config.crop_mode = saved;
        let (fake_boxes, ref_boxes) = (fake_boxes?, ref_boxes?);
        let mut tape = Tape::inference();
        let g = tape.constant(batch_tensor([generated]));
        let s = tape.constant(batch_tensor([style]));
        let fp = tape.crop(g, &fake_boxes, self.config.patch_size);
        let rp = tape.crop(s, &ref_boxes, self.config.patch_size);
        let logit = self.patch_disc_var(&mut tape, fp, rp);
        let l = nsgan(&mut tape, logit, true);
        Ok(tape.value(l).data[0] as f64)
    }
}

pub fn write_loss_csv(log: &[LossComponents], path: &Path) -> Result<()> {
    let mut s = String::from("step,recon,gan_recon,gan_swap,cooccur,d_image,d_patch\n");
    for l in log {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            l.step, l.recon, l.gan_recon, l.gan_swap, l.cooccur, l.d_image, l.d_patch
        ));
    }
    fs::write(path, s)?;
    Ok(())
}

fn to_rgb8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One row per pair: content | style | swapped.
pub fn write_sample_grid(contents: &[&Image], styles: &[&Image], swapped: &[Image], path: &Path) -> Result<()> {
    let Some(first) = contents.first() else { return Ok(()) };
    let (h, w) = (first.height as u32, first.width as u32);
    let rows = contents.len() as u32;
    let mut canvas = image::RgbImage::new(3 * w + 2, rows * h);
    for (r, ((c, s), g)) in contents.iter().zip(styles).zip(swapped).enumerate() {
        for (col, img) in [*c, *s, g].into_iter().enumerate() {
            for y in 0..img.height {
                for x in 0..img.width {
                    let px = |ch: usize| to_rgb8(img.at(y, x, ch.min(img.channels - 1)));
                    canvas.put_pixel(
                        col as u32 * (w + 1) + x as u32,
                        r as u32 * h + y as u32,
                        image::Rgb([px(0), px(1), px(2)]),
                    );
                }
            }
        }
    }
    canvas.save(path)?;
    Ok(())
}

const SWAE_MAGIC: &[u8; 8] = b"BSWPSWAE";
pub const SWAE_VERSION: u32 = 3;

#[derive(Serialize, Deserialize)]
struct SwapHeader {
    config: SwapAeConfig,
    step: u64,
    seed: u64,
    rng_stream: u64,
    rng_word_pos: String,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    opt_g_steps: u64,
    opt_d_steps: u64,
}

fn push_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl SwapAEState {
    /// Parameters, both optimisers' moments and the sampler position.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = SwapHeader {
            config: self.config.clone(),
            step: self.step,
            seed: self.seed,
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            names: self.store.names().to_vec(),
            shapes: self.store.tensors().iter().map(|t| t.shape.clone()).collect(),
            opt_g_steps: self.opt_g.steps(),
            opt_d_steps: self.opt_d.steps(),
        };
        let hjson = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(SWAE_MAGIC);
        out.extend_from_slice(&SWAE_VERSION.to_le_bytes());
        out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
        out.extend_from_slice(&hjson);
        for t in self.store.tensors().iter().chain(&self.ema.tensors()[..self.n_gen]) {
            push_f32s(&mut out, &t.data);
        }
        for opt in [&self.opt_g, &self.opt_d] {
            let (m, v) = opt.moments();
            for buf in m.iter().chain(v) {
                push_f32s(&mut out, buf);
            }
        }
        fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let bad = |reason: &str| Error::Manifest { record: path.display().to_string(), reason: reason.into() };
        if bytes.len() < 16 || &bytes[..8] != SWAE_MAGIC {
            return Err(bad("not an autoencoder checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != SWAE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let header: SwapHeader =
            serde_json::from_slice(bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?)?;
        let mut state = Self::new(header.config, header.seed)?;
        if state.store.names() != header.names.as_slice() {
            return Err(bad("parameter layout does not match configuration"));
        }
        let mut off = 16 + hlen;
        let mut take = |n: usize| -> Result<Vec<f32>> {
            let chunk = bytes.get(off..off + 4 * n).ok_or_else(|| bad("truncated payload"))?;
            off += 4 * n;
            Ok(chunk.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
        };
        let ids: Vec<ParamId> = state.store.ids().collect();
        for (id, shape) in ids.iter().zip(&header.shapes) {
            if &state.store.get(*id).shape != shape {
                return Err(bad("parameter shape mismatch"));
            }
            let n = state.store.get(*id).numel();
            state.store.get_mut(*id).data = take(n)?;
        }
        for id in &ids[..state.n_gen] {
            let n = state.ema.get(*id).numel();
            state.ema.get_mut(*id).data = take(n)?;
        }
        for (opt, steps) in [(&mut state.opt_g, header.opt_g_steps), (&mut state.opt_d, header.opt_d_steps)] {
            let sizes: Vec<usize> = opt.moments().0.iter().map(Vec::len).collect();
            let m = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
            let v = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
            opt.restore(steps, m, v);
        }
        state.step = header.step;
        state.rng.set_stream(header.rng_stream);
        state.rng.set_word_pos(header.rng_word_pos.parse().map_err(|_| bad("bad rng position"))?);
        Ok(state)
    }
}

impl PartialEq for SwapAEState {
    fn eq(&self, o: &Self) -> bool {
        self.config == o.config
            && self.store == o.store
            && self.ema == o.ema
            && self.step == o.step
            && self.opt_g == o.opt_g
            && self.opt_d == o.opt_d
            && self.rng == o.rng
    }
}

#[cfg(test)]
mod tests;
