//! Synthetic training data, the Adam training loop and whole-model gradient
//! checks.

use std::collections::BTreeMap;

use rand::Rng;

use crate::degradation::NoiseSpec;
use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::metrics;
use crate::model::{ModelConfig, SertModel};
use crate::numerics::gradcheck::{check_params, ParamCheck, NETWORK_STEP};
use crate::numerics::{adam_step, AdamState, Tape, Tensor};
use crate::rng;

const TEXTURE: u32 = 20;
const BATCH: u32 = 21;
const PERTURB: u32 = 22;

/// Smooth, spectrally low-rank test cube in `[0, 1]`.
///
/// A few endmember spectra (smooth cosine series over the band axis) are
/// mixed by abundance maps built from low-frequency plane waves and
/// normalized with a softmax, so the cube has rank at most `endmembers`.
pub fn synth_texture(h: usize, w: usize, bands: usize, seed: u64, index: u64) -> Tensor {
    const ENDMEMBERS: usize = 3;
    const WAVES: usize = 3;
    let mut r = rng::stream(seed, rng::stream_id(TEXTURE, index));
    let spectra: Vec<Vec<f64>> = (0..ENDMEMBERS)
        .map(|_| {
            let base = rng::uniform(&mut r, 0.25, 0.75);
            let terms: Vec<(f64, f64, f64)> = (1..=2)
                .map(|k| (rng::uniform(&mut r, -0.12, 0.12), k as f64, rng::uniform(&mut r, 0.0, std::f64::consts::TAU)))
                .collect();
            (0..bands)
                .map(|b| {
                    let t = b as f64 / bands.max(1) as f64;
                    let v = base
                        + terms
                            .iter()
                            .map(|(a, k, phi)| a * (std::f64::consts::PI * k * t + phi).cos())
                            .sum::<f64>();
                    v.clamp(0.0, 1.0)
                })
                .collect()
        })
        .collect();
    let fields: Vec<Vec<(f64, f64, f64, f64)>> = (0..ENDMEMBERS)
        .map(|_| {
            (0..WAVES)
                .map(|_| {
                    let fy = rng::uniform(&mut r, -2.0, 2.0) / h as f64;
                    let fx = rng::uniform(&mut r, -2.0, 2.0) / w as f64;
                    let amp = rng::uniform(&mut r, 0.5, 1.5);
                    (amp, fy, fx, rng::uniform(&mut r, 0.0, std::f64::consts::TAU))
                })
                .collect()
        })
        .collect();
    let mut out = vec![0.0; h * w * bands];
    let mut logits = [0.0; ENDMEMBERS];
    for y in 0..h {
        for x in 0..w {
            for (e, field) in fields.iter().enumerate() {
                logits[e] = 2.0
                    * field
                        .iter()
                        .map(|(a, fy, fx, phi)| a * (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) + phi).sin())
                        .sum::<f64>();
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let px = &mut out[(y * w + x) * bands..(y * w + x + 1) * bands];
            for (e, s) in spectra.iter().enumerate() {
                let a = (logits[e] - m).exp() / z;
                px.iter_mut().zip(s).for_each(|(o, v)| *o += a * v);
            }
        }
    }
    Tensor::from_parts(vec![h, w, bands], out)
}

/// Clean training images; samples are random crops of these.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Tensor>,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>) -> Result<Self> {
        let bands = match images.first() {
            None => return Err(Error::Usage("the training set is empty".into())),
            Some(t) if t.shape().len() != 3 => {
                return Err(Error::Dimension(format!("training images are [H, W, B], got {:?}", t.shape())))
            }
            Some(t) => t.shape()[2],
        };
        if let Some(t) = images.iter().find(|t| t.shape().len() != 3 || t.shape()[2] != bands) {
            return Err(Error::Dimension(format!(
                "training images must share {bands} bands, found {:?}",
                t.shape()
            )));
        }
        Ok(Self { images })
    }

    /// `count` textures of `h x w x bands`, textures `0..count` of `seed`.
    pub fn synthetic(count: usize, h: usize, w: usize, bands: usize, seed: u64) -> Self {
        Self {
            images: (0..count as u64).map(|i| synth_texture(h, w, bands, seed, i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn bands(&self) -> usize {
        self.images[0].shape()[2]
    }
}

fn crop(t: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Tensor {
    let (tw, b) = (t.shape()[1], t.shape()[2]);
    let mut out = Vec::with_capacity(h * w * b);
    for y in y0..y0 + h {
        let start = (y * tw + x0) * b;
        out.extend_from_slice(&t.data()[start..start + w * b]);
    }
    Tensor::from_parts(vec![h, w, b], out)
}

/// Optimization settings. Everything random is derived from `seed` and the
/// step index, so any step can be replayed in isolation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    /// Learning rate is divided by 10 from this step on.
    pub lr_drop_step: Option<u64>,
    pub noise: NoiseSpec,
    /// Crop size; whole images when `None` (they must then share a size).
    pub patch: Option<(usize, usize)>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.lr_drop_step {
            Some(d) if step >= d => self.lr / 10.0,
            _ => self.lr,
        }
    }

    /// Schedule of `epochs` passes over `samples` images with the drop at
    /// 5/8 of the run.
    pub fn epochs(epochs: u64, samples: usize, batch: usize) -> (u64, Option<u64>) {
        let per_epoch = (samples as u64).div_ceil(batch.max(1) as u64).max(1);
        let steps = epochs * per_epoch;
        (steps, Some(epochs * 5 / 8 * per_epoch))
    }

    fn to_pairs(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("steps".to_string(), self.steps.to_string()),
            ("batch".into(), self.batch.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("train_seed".into(), self.seed.to_string()),
        ];
        if let Some(d) = self.lr_drop_step {
            kv.push(("lr_drop_step".into(), d.to_string()));
        }
        if let Some((h, w)) = self.patch {
            kv.push(("patch".into(), format!("{h}x{w}")));
        }
        kv
    }
}

/// One training example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub clean: Tensor,
    pub noisy: Tensor,
}

/// The examples used at `step`: image indices, crop offsets and noise seeds
/// all come from the step's own random stream.
pub fn batch_at(data: &Dataset, cfg: &TrainConfig, step: u64) -> Result<Vec<Sample>> {
    let mut r = rng::stream(cfg.seed, rng::stream_id(BATCH, step));
    (0..cfg.batch)
        .map(|_| {
            let img = &data.images[r.random_range(0..data.len())];
            let (ih, iw) = (img.shape()[0], img.shape()[1]);
            let (ph, pw) = cfg.patch.unwrap_or((ih, iw));
            if ph > ih || pw > iw {
                return Err(Error::Usage(format!("patch {ph}x{pw} is larger than a {ih}x{iw} image")));
            }
            let y0 = r.random_range(0..=ih - ph);
            let x0 = r.random_range(0..=iw - pw);
            let noise_seed: u64 = r.random();
            let clean = crop(img, y0, x0, ph, pw);
            let (noisy, _) = cfg.noise.apply(&clean, noise_seed)?;
            Ok(Sample { clean, noisy })
        })
        .collect()
}

/// Model, optimizer and step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: SertModel,
    pub adam: AdamState,
    pub step: u64,
    pub config: TrainConfig,
    model_seed: u64,
}

impl Trainer {
    pub fn new(model: SertModel, model_seed: u64, config: TrainConfig) -> Self {
        let adam = AdamState::with_lr(model.store().tensors(), config.lr);
        Self {
            model,
            adam,
            step: 0,
            config,
            model_seed,
        }
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let model = ck.to_model()?;
        let adam = match &ck.adam {
            Some(a) => a.clone(),
            None => AdamState::with_lr(model.store().tensors(), config.lr),
        };
        Ok(Self {
            model,
            adam,
            step: ck.step,
            config,
            model_seed: ck.seed,
        })
    }

    /// Mean-squared error of the current model on `samples`, with gradients
    /// applied by one Adam update. Returns the loss before the update.
    pub fn train_on(&mut self, samples: &[Sample]) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.model.store().bind(&mut tape);
        let mut total = None;
        for s in samples {
            let y = tape.constant(s.noisy.clone());
            let x = tape.constant(s.clean.clone());
            let out = self.model.forward(&mut tape, &bound, y)?;
            let l = tape.mse(out, x)?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        let total = total.ok_or_else(|| Error::Usage("empty batch".into()))?;
        let loss = tape.scale(total, 1.0 / samples.len() as f64);
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss became {value} at step {}", self.step)));
        }
        let grads = tape.backward(loss)?;
        let grads = bound.collect(&grads, self.model.store());
        self.adam.lr = self.config.lr_at(self.step);
        adam_step(self.model.store_mut().tensors_mut(), &grads, &mut self.adam)?;
        self.step += 1;
        Ok(value)
    }

    /// Runs the step the counter points at.
    pub fn step(&mut self, data: &Dataset) -> Result<f64> {
        let samples = batch_at(data, &self.config, self.step)?;
        self.train_on(&samples)
    }

    /// Steps until `config.steps`, calling `log(step, loss)` after each.
    pub fn run(&mut self, data: &Dataset, mut log: impl FnMut(u64, f64)) -> Result<()> {
        while self.step < self.config.steps {
            let loss = self.step(data)?;
            log(self.step, loss);
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::capture(&self.model, self.model_seed, self.step, Some(&self.adam));
        ck.extra = self.config.to_pairs();
        ck.extra.push(("noise".into(), noise_label(&self.config.noise)));
        ck
    }
}

fn noise_label(spec: &NoiseSpec) -> String {
    crate::degradation::Recipe { spec: spec.clone(), seed: 0 }
        .to_pairs()
        .into_iter()
        .filter(|(k, _)| k != "version" && k != "seed")
        .map(|(k, v)| format!("{k}:{}", v.replace(' ', "")))
        .collect::<Vec<_>>()
        .join(";")
}

/// Mean PSNR of the noisy inputs and of the model outputs over `clean`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Validation {
    pub noisy_psnr: f64,
    pub denoised_psnr: f64,
}

/// Corrupts every image of `clean` with `noise` (seed `seed + i`) and scores
/// the model on it.
pub fn validate(model: &SertModel, clean: &[Tensor], noise: &NoiseSpec, seed: u64) -> Result<Validation> {
    let (mut noisy, mut denoised) = (0.0, 0.0);
    for (i, x) in clean.iter().enumerate() {
        let (y, _) = noise.apply(x, seed.wrapping_add(i as u64))?;
        noisy += metrics::psnr(&y, x, 1.0)?;
        denoised += metrics::psnr(&model.denoise(&y)?, x, 1.0)?;
    }
    let n = clean.len().max(1) as f64;
    Ok(Validation {
        noisy_psnr: noisy / n,
        denoised_psnr: denoised / n,
    })
}

/// Parameter group of a parameter name: numeric path segments become `*`.
pub fn param_group(name: &str) -> String {
    name.split('.')
        .map(|s| if s.chars().all(|c| c.is_ascii_digit()) { "*" } else { s })
        .collect::<Vec<_>>()
        .join(".")
}

/// Finite-difference check of the whole network on an `h x w` input.
///
/// Parameters are redrawn from `N(0, 0.1^2)` first so that no path is
/// trivially zero (the tail convolution starts at zero).
pub fn gradcheck_model(
    config: &ModelConfig,
    seed: u64,
    h: usize,
    w: usize,
    max_entries: Option<usize>,
) -> Result<Vec<ParamCheck>> {
    let mut model = SertModel::init(config, seed)?;
    for (i, t) in model.store_mut().tensors_mut().iter_mut().enumerate() {
        *t = rng::normal_tensor(&mut rng::stream(seed, rng::stream_id(PERTURB, i as u64)), t.shape(), 0.1);
    }
    let mut r = rng::stream(seed, rng::stream_id(PERTURB, u64::from(u32::MAX)));
    let y = rng::normal_tensor(&mut r, &[h, w, config.bands], 1.0);
    let target = rng::normal_tensor(&mut r, &[h, w, config.bands], 1.0);
    check_params(
        model.store(),
        |tape, bound| {
            let yv = tape.constant(y.clone());
            let out = model.forward(tape, bound, yv)?;
            let t = tape.constant(target.clone());
            tape.mse(out, t)
        },
        max_entries,
        NETWORK_STEP,
    )
}

/// Worst error per parameter group, in first-seen order.
pub fn group_errors(report: &[ParamCheck]) -> Vec<(String, f64)> {
    let mut order = Vec::new();
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    for r in report {
        let g = param_group(&r.name);
        let e = worst.entry(g.clone()).or_insert_with(|| {
            order.push(g);
            0.0
        });
        *e = e.max(r.max_relative_error);
    }
    order.into_iter().map(|g| (g.clone(), worst[&g])).collect()
}

#[cfg(test)]
#[path = "train_tests.rs"]
mod tests;
