//! Synthetic datasets, the training configuration file, and the Adam
//! training loop with optional adversarial updates.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::autodiff::Tape;
use crate::disc::DiscriminatorParams;
use crate::imaging::{self, ct::CtGeometry, mri, phantom};
use crate::io::checkpoint::{self, CheckpointError};
use crate::io::kv::{self, KvError};
use crate::loss::{self, FeatureStack, LossWeights, Modality, Transform};
use crate::metrics;
use crate::net::{self, ModelParams, NetConfig};
use crate::optim::{Adam, AdamConfig, StepOutcome};
use crate::rng;
use crate::tensor::{is_pow2, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub phantom: phantom::PhantomKind,
    pub train_count: usize,
    pub val_count: usize,
    pub image_size: usize,
    pub af: usize,
    pub acs_fraction: f64,
    /// Full-view count; also the view count of the CT transform loss.
    pub views: usize,
    pub sparse_views: usize,
    pub noise_sigma: f64,
}

impl DatasetSpec {
    pub fn desk(modality: Modality) -> Self {
        DatasetSpec {
            phantom: phantom::PhantomKind::RandomEllipses,
            train_count: 64,
            val_count: 8,
            image_size: match modality {
                Modality::Mri => 32,
                Modality::Ct => 64,
            },
            af: 8,
            acs_fraction: 0.04,
            views: 60,
            sparse_views: 15,
            noise_sigma: 0.0,
        }
    }

    pub fn mri_mask(&self, seed: u64) -> Result<mri::MriSamplingSpec, TensorError> {
        mri::make_cartesian_mask(self.image_size, self.af, self.acs_fraction, seed)
    }

    pub fn sparse_geometry(&self) -> CtGeometry {
        CtGeometry::desk(self.image_size, self.sparse_views)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub modality: Modality,
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Discriminator learning rate in adversarial mode.
    pub d_lr: f64,
    pub crop: usize,
    pub gan: bool,
    pub seed: u64,
    pub log_every: usize,
    pub data: DatasetSpec,
    pub net: NetConfig,
    pub weights: LossWeights,
}

impl TrainConfig {
    pub fn desk(modality: Modality) -> Self {
        TrainConfig {
            modality,
            steps: 200,
            batch: 4,
            adam: AdamConfig::default(),
            d_lr: 1e-3,
            crop: 32,
            gan: false,
            seed: 0,
            log_every: 50,
            data: DatasetSpec::desk(modality),
            net: NetConfig::desk(modality.channels()),
            weights: LossWeights::default(),
        }
    }

    /// Full-scale optimiser and network settings.
    pub fn full_scale(modality: Modality) -> Self {
        TrainConfig {
            steps: 100_000,
            batch: 8,
            adam: AdamConfig {
                lr: 2e-5,
                ..AdamConfig::default()
            },
            d_lr: 2e-5,
            crop: 192,
            log_every: 1000,
            data: DatasetSpec {
                image_size: 256,
                ..DatasetSpec::desk(modality)
            },
            net: NetConfig::full_scale(modality.channels()),
            ..Self::desk(modality)
        }
    }

    /// Parses `key = value` lines on top of the desk defaults of the
    /// configured modality.
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let entries = kv::parse(text)?;
        let modality = match entries.iter().find(|e| e.key == "modality") {
            Some(e) => e.parse::<Modality>()?,
            None => Modality::Mri,
        };
        let mut c = Self::desk(modality);
        for e in &entries {
            match e.key.as_str() {
                "modality" => {}
                "steps" => c.steps = e.parse()?,
                "batch" => c.batch = e.parse()?,
                "lr" => c.adam.lr = e.finite()?,
                "beta1" => c.adam.beta1 = e.finite()?,
                "beta2" => c.adam.beta2 = e.finite()?,
                "adam_eps" => c.adam.eps = e.finite()?,
                "d_lr" => c.d_lr = e.finite()?,
                "crop" => c.crop = e.parse()?,
                "gan" => c.gan = e.parse()?,
                "seed" => {
                    c.seed = e.parse()?;
                    c.net.seed = c.seed;
                }
                "log_every" => c.log_every = e.parse()?,
                "phantom" => c.data.phantom = e.parse()?,
                "train_count" => c.data.train_count = e.parse()?,
                "val_count" => c.data.val_count = e.parse()?,
                "image_size" => c.data.image_size = e.parse()?,
                "af" => c.data.af = e.parse()?,
                "acs_fraction" => c.data.acs_fraction = e.finite()?,
                "views" => c.data.views = e.parse()?,
                "sparse_views" => c.data.sparse_views = e.parse()?,
                "noise_sigma" => c.data.noise_sigma = e.finite()?,
                "alpha" => c.weights.alpha = e.finite()?,
                "beta" => c.weights.beta = e.finite()?,
                "gamma" => c.weights.gamma = e.finite()?,
                "eta" => c.weights.eta = e.finite()?,
                "epsilon" => c.weights.epsilon = e.finite()?,
                "per_pixel" => c.weights.per_pixel = e.parse()?,
                "in_channels" => {
                    if e.parse::<usize>()? != modality.channels() {
                        return Err(e.bad("fixed by the modality"));
                    }
                }
                _ => {
                    if !checkpoint::apply_net_key(&mut c.net, e)? {
                        return Err(e.unknown());
                    }
                }
            }
        }
        c.validate().map_err(KvError::Missing).map(|_| c)
    }

    /// Checks cross-field constraints; the message names the offending keys.
    pub fn validate(&self) -> Result<(), String> {
        let d = &self.data;
        let p = self.net.patch_size;
        let checks: [(bool, String); 10] = [
            (self.batch > 0, "batch must be positive".into()),
            (self.log_every > 0, "log_every must be positive".into()),
            (d.image_size >= 16, format!("image_size {} below 16", d.image_size)),
            (d.train_count > 0 && d.val_count > 0, "train_count and val_count must be positive".into()),
            (
                self.crop > 0 && self.crop <= d.image_size && self.crop.is_multiple_of(p),
                format!("crop {} must be in 1..=image_size and divisible by patch_size {p}", self.crop),
            ),
            (d.image_size.is_multiple_of(p), format!("image_size {} not divisible by patch_size {p}", d.image_size)),
            (
                self.modality == Modality::Ct || (is_pow2(self.crop) && is_pow2(d.image_size)),
                "mri crop and image_size must be powers of two".into(),
            ),
            (d.af > 0 && d.views > 0 && d.sparse_views > 0, "af, views and sparse_views must be positive".into()),
            (self.weights.validate().is_ok(), "loss weights must be nonnegative".into()),
            (self.adam.lr > 0.0 && self.d_lr > 0.0, "learning rates must be positive".into()),
        ];
        match checks.into_iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(msg),
            None => Ok(()),
        }
    }

    /// One line echoing the loss weights, as written to the run log.
    pub fn weights_line(&self) -> String {
        let w = &self.weights;
        format!(
            "loss weights: alpha = {} beta = {} gamma = {} eta = {} epsilon = {:e}",
            w.alpha, w.beta, w.gamma, w.eta, w.epsilon
        )
    }
}

/// One training or validation pair: `[h, w, c]` target and input.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub target: Tensor<f32>,
    pub input: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Phantom seed of item `index` in split `split` (0 train, 1 validation).
pub fn phantom_seed(seed: u64, split: u64, index: u64) -> u64 {
    rng::stream_id(&[seed, rng::domain::DATA, split, index])
}

/// Generates and degrades every phantom up front. Ground truths are
/// normalised to a maximum of 1 before simulation.
pub fn build_dataset(cfg: &TrainConfig) -> Result<Dataset, TensorError> {
    let d = &cfg.data;
    let mask = d.mri_mask(cfg.seed)?;
    let geom = d.sparse_geometry();
    let make = |split: u64, i: usize| -> Result<Sample, TensorError> {
        let ps = phantom_seed(cfg.seed, split, i as u64);
        let img = phantom::make_phantom::<f64>(d.phantom, d.image_size, d.image_size, ps).image;
        let img = imaging::normalize_max(&img);
        let sim = match cfg.modality {
            Modality::Mri => imaging::simulate_mri(&img, &mask, d.noise_sigma, ps)?,
            Modality::Ct => imaging::simulate_ct(&img, &geom, d.noise_sigma, ps)?,
        };
        Ok(Sample {
            target: sim.x.cast(),
            input: sim.x_u.cast(),
        })
    };
    Ok(Dataset {
        train: (0..d.train_count).map(|i| make(0, i)).collect::<Result<_, _>>()?,
        val: (0..d.val_count).map(|i| make(1, i)).collect::<Result<_, _>>()?,
    })
}

fn crop(t: &Tensor<f32>, top: usize, left: usize, size: usize) -> Vec<f32> {
    let (w, c) = (t.shape()[1], t.shape()[2]);
    let mut out = Vec::with_capacity(size * size * c);
    for r in top..top + size {
        out.extend_from_slice(&t.data()[(r * w + left) * c..(r * w + left + size) * c]);
    }
    out
}

/// Batch of random crops for `step`: `(targets, inputs)` as `[B, s, s, c]`.
pub fn sample_batch(cfg: &TrainConfig, data: &Dataset, step: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut pick = rng::keyed(cfg.seed, &[rng::domain::BATCH, step]);
    let (s, n, c) = (cfg.crop, cfg.data.image_size, cfg.modality.channels());
    let (mut xs, mut us) = (Vec::new(), Vec::new());
    for slot in 0..cfg.batch {
        let item = &data.train[pick.random_range(0..data.train.len())];
        let mut off = rng::keyed(cfg.seed, &[rng::domain::CROP, step, slot as u64]);
        let (top, left) = (off.random_range(0..=n - s), off.random_range(0..=n - s));
        xs.extend(crop(&item.target, top, left, s));
        us.extend(crop(&item.input, top, left, s));
    }
    let shape = [cfg.batch, s, s, c];
    (Tensor::new(&shape, xs).expect("batch"), Tensor::new(&shape, us).expect("batch"))
}

/// Reconstructs `[h, w, c]` images in eval mode, masking on only when
/// `masking` (draws keyed by `(seed, 0, index)`).
pub fn reconstruct_all(model: &ModelParams<f32>, inputs: &[Tensor<f32>], masking: bool, seed: u64) -> Result<Vec<Tensor<f32>>, TensorError> {
    const CHUNK: usize = 8;
    let mut out = Vec::with_capacity(inputs.len());
    for (ci, chunk) in inputs.chunks(CHUNK).enumerate() {
        let s = chunk[0].shape().to_vec();
        let mut data = Vec::with_capacity(chunk.len() * chunk[0].len());
        for t in chunk {
            if t.shape() != s.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "reconstruct",
                    lhs: s.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
        }
        let batch = Tensor::new(&[chunk.len(), s[0], s[1], s[2]], data)?;
        let ids: Vec<u64> = (0..chunk.len()).map(|i| (ci * CHUNK + i) as u64).collect();
        let draws = net::draw_masks(&model.cfg, seed, 0, &ids, masking);
        let y = model.run(&batch, &draws)?;
        out.extend(y.data().chunks_exact(chunk[0].len()).map(|d| Tensor::new(&s, d.to_vec()).expect("chunk")));
    }
    Ok(out)
}

/// Mean validation PSNR and SSIM of the model's reconstructions.
pub fn validate(model: &ModelParams<f32>, val: &[Sample]) -> Result<metrics::MetricsReport, TensorError> {
    let inputs: Vec<Tensor<f32>> = val.iter().map(|s| s.input.clone()).collect();
    let preds = reconstruct_all(model, &inputs, model.cfg.eval_mask, 0)?;
    let refs: Vec<Tensor<f32>> = val.iter().map(|s| s.target.clone()).collect();
    metrics::compute_metrics_batch(&preds, &refs)
}

/// Metrics of the degraded inputs themselves.
pub fn input_metrics(val: &[Sample]) -> Result<metrics::MetricsReport, TensorError> {
    let inputs: Vec<Tensor<f32>> = val.iter().map(|s| s.input.clone()).collect();
    let refs: Vec<Tensor<f32>> = val.iter().map(|s| s.target.clone()).collect();
    metrics::compute_metrics_batch(&inputs, &refs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelParams<f32>,
    pub best: ModelParams<f32>,
    pub best_psnr: f64,
    /// Generator total loss at every step, before that step's update.
    pub losses: Vec<f64>,
    /// Discriminator loss at every step (adversarial mode only).
    pub d_losses: Vec<f64>,
    pub rows: Vec<LogRow>,
    pub skipped_steps: Vec<usize>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}; last good parameters at {last_good:?}")]
    NonFinite { step: usize, last_good: Option<PathBuf> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Files written by a run under its output directory.
pub mod files {
    pub const FINAL: &str = "final";
    pub const BEST: &str = "best";
    pub const LAST_GOOD: &str = "last_good";
    pub const METRICS: &str = "metrics.csv";
    pub const LOG: &str = "train.log";
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    data: &'a Dataset,
    transform: Transform,
    feat: FeatureStack<f32>,
}

impl Run<'_> {
    /// Generator loss of one batch; `adv` adds the adversarial term with
    /// the given (frozen) discriminator. Returns the loss, the parameter
    /// gradients and the reconstruction.
    fn generator_step(
        &self,
        model: &ModelParams<f32>,
        disc: Option<&DiscriminatorParams<f32>>,
        x: &Tensor<f32>,
        xu: &Tensor<f32>,
        step: u64,
    ) -> Result<(f64, Vec<Tensor<f32>>, Tensor<f32>), TensorError> {
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let uv = tape.constant(xu.clone());
        let ids: Vec<u64> = (0..self.cfg.batch as u64).collect();
        let draws = net::draw_masks(&model.cfg, self.cfg.seed, step, &ids, true);
        let x_hat = net::mambamir_forward(&mut tape, uv, model, &bound, &draws)?;
        let adv = match disc {
            Some(d) => {
                let db = d.store.bind(&mut tape, false);
                let out = d.forward(&mut tape, &db, x_hat)?;
                Some(loss::gen_adv_loss(&mut tape, out)?)
            }
            None => None,
        };
        let terms = loss::total_loss(&mut tape, xv, x_hat, &self.cfg.weights, &self.transform, &self.feat, adv)?;
        let value = tape.value(terms.total).data()[0] as f64;
        if !value.is_finite() {
            return Ok((value, Vec::new(), tape.value(x_hat).clone()));
        }
        tape.backward(terms.total)?;
        Ok((value, model.store.grads(&tape, &bound), tape.value(x_hat).clone()))
    }

    fn disc_step(&self, disc: &DiscriminatorParams<f32>, x: &Tensor<f32>, fake: &Tensor<f32>) -> Result<(f64, Vec<Tensor<f32>>), TensorError> {
        let mut tape = Tape::new();
        let bound = disc.store.bind(&mut tape, true);
        let real = tape.constant(x.clone());
        let fake = tape.constant(fake.clone());
        let ro = disc.forward(&mut tape, &bound, real)?;
        let fo = disc.forward(&mut tape, &bound, fake)?;
        let l = loss::disc_loss(&mut tape, ro, fo)?;
        let value = tape.value(l).data()[0] as f64;
        tape.backward(l)?;
        Ok((value, disc.store.grads(&tape, &bound)))
    }
}

/// Runs the training loop. With `out`, writes `metrics.csv`, `train.log`
/// and the `final` and `best` checkpoints there.
pub fn train(cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    let data = build_dataset(cfg)?;
    train_on(cfg, &data, out)
}

pub fn train_on(cfg: &TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    let run = Run {
        cfg,
        data,
        transform: Transform::for_modality(cfg.modality, cfg.crop, cfg.data.views)?,
        feat: FeatureStack::new(cfg.modality.channels(), 0),
    };
    let mut model = ModelParams::<f32>::init(&cfg.net);
    let mut adam = Adam::new(cfg.adam, &model.store);
    let mut disc = cfg.gan.then(|| DiscriminatorParams::<f32>::init(cfg.modality.channels(), cfg.seed));
    let mut adam_d = disc.as_ref().map(|d| {
        Adam::new(
            AdamConfig {
                lr: cfg.d_lr,
                ..cfg.adam
            },
            &d.store,
        )
    });

    let mut log = String::new();
    let _ = writeln!(log, "modality = {} steps = {} batch = {} lr = {} gan = {} seed = {}", cfg.modality, cfg.steps, cfg.batch, cfg.adam.lr, cfg.gan, cfg.seed);
    let _ = writeln!(log, "{}", cfg.weights_line());
    let _ = writeln!(log, "parameters = {}", model.store.numel());
    let base = input_metrics(&run.data.val)?;
    let _ = writeln!(log, "input psnr = {:.4} ssim = {:.4}", base.psnr_mean, base.ssim_mean);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(files::LOG), &log)?;
    }

    let mut csv = String::from("step,loss,psnr,ssim\n");
    let mut rows = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut d_losses = Vec::new();
    let mut skipped = Vec::new();
    let mut window = Vec::new();
    let mut best = model.clone();
    let mut best_psnr = f64::NEG_INFINITY;

    let mut record = |step: usize, loss: f64, model: &ModelParams<f32>, csv: &mut String| -> Result<(), TrainError> {
        let m = validate(model, &run.data.val)?;
        let _ = writeln!(csv, "{step},{loss},{},{}", m.psnr_mean, m.ssim_mean);
        rows.push(LogRow {
            step,
            loss,
            psnr: m.psnr_mean,
            ssim: m.ssim_mean,
        });
        if m.psnr_mean > best_psnr {
            best_psnr = m.psnr_mean;
            best = model.clone();
            if let Some(dir) = out {
                checkpoint::save_checkpoint(&dir.join(files::BEST), model)?;
            }
        }
        if let Some(dir) = out {
            crate::io::write_atomic(&dir.join(files::METRICS), csv.as_bytes())?;
        }
        Ok(())
    };

    let abort = |step: usize, model: &ModelParams<f32>| -> TrainError {
        let last_good = out.and_then(|dir| {
            let p = dir.join(files::LAST_GOOD);
            checkpoint::save_checkpoint(&p, model).ok().map(|_| p)
        });
        TrainError::NonFinite { step, last_good }
    };

    if cfg.steps == 0 {
        let (x, xu) = sample_batch(cfg, run.data, 0);
        let (l, _, _) = run.generator_step(&model, None, &x, &xu, 0)?;
        record(0, l, &model, &mut csv)?;
    }
    for step in 0..cfg.steps {
        let (x, xu) = sample_batch(cfg, run.data, step as u64);
        if let (Some(d), Some(ad)) = (disc.as_mut(), adam_d.as_mut()) {
            // forward once to get the current fake, update D on it, then
            // take the generator step against the updated D
            let (_, _, fake) = run.generator_step(&model, None, &x, &xu, step as u64)?;
            let (dl, dg) = run.disc_step(d, &x, &fake)?;
            if !dl.is_finite() {
                return Err(abort(step, &model));
            }
            d_losses.push(dl);
            ad.step(&mut d.store, &dg)?;
        }
        let (l, grads, _) = run.generator_step(&model, disc.as_ref(), &x, &xu, step as u64)?;
        if !l.is_finite() {
            return Err(abort(step, &model));
        }
        losses.push(l);
        window.push(l);
        if step == 0 {
            record(0, l, &model, &mut csv)?;
            window.clear();
        }
        if adam.step(&mut model.store, &grads)? == StepOutcome::SkippedNonFinite {
            skipped.push(step);
        }
        let done = step + 1;
        if done % cfg.log_every == 0 || done == cfg.steps {
            let mean = if window.is_empty() { l } else { window.iter().sum::<f64>() / window.len() as f64 };
            window.clear();
            record(done, mean, &model, &mut csv)?;
        }
    }

    if let Some(dir) = out {
        checkpoint::save_checkpoint(&dir.join(files::FINAL), &model)?;
        let mut tail = format!("best psnr = {best_psnr:.4}\n");
        if !skipped.is_empty() {
            let _ = writeln!(tail, "skipped non-finite steps: {skipped:?}");
        }
        fs::write(dir.join(files::LOG), log + &tail)?;
    }
    Ok(TrainOutcome {
        model,
        best,
        best_psnr,
        losses,
        d_losses,
        rows,
        skipped_steps: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_overrides() {
        let c = TrainConfig::parse("# run\nmodality = ct\nsteps = 10\nalpha = 2.5\nembed_dim = 8\nseed = 7\n").unwrap();
        assert_eq!(c.modality, Modality::Ct);
        assert_eq!(c.net.in_channels, 1);
        assert_eq!((c.steps, c.weights.alpha, c.net.embed_dim, c.seed, c.net.seed), (10, 2.5, 8, 7, 7));
        assert_eq!(c.weights.gamma, 0.0025);
    }

    #[test]
    fn config_errors() {
        assert!(matches!(TrainConfig::parse("bogus = 1"), Err(KvError::UnknownKey { .. })));
        assert!(matches!(TrainConfig::parse("lr = fast"), Err(KvError::BadValue { .. })));
        assert!(matches!(TrainConfig::parse("lr = inf"), Err(KvError::BadValue { .. })));
        assert!(TrainConfig::parse("alpha = -1").is_err());
        assert!(TrainConfig::parse("crop = 30").is_err());
        assert!(TrainConfig::parse("modality = mri\nin_channels = 1").is_err());
    }

    #[test]
    fn batch_sampling_is_keyed() {
        let mut cfg = TrainConfig::desk(Modality::Mri);
        cfg.data.train_count = 4;
        cfg.data.val_count = 1;
        cfg.crop = 16;
        let d = build_dataset(&cfg).unwrap();
        assert_eq!(sample_batch(&cfg, &d, 3), sample_batch(&cfg, &d, 3));
        assert_ne!(sample_batch(&cfg, &d, 3), sample_batch(&cfg, &d, 4));
        assert_eq!(sample_batch(&cfg, &d, 3).0.shape(), &[4, 16, 16, 2]);
    }
}
