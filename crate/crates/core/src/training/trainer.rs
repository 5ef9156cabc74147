//! The training loop: per-image tapes evaluated in parallel, gradients
//! averaged in batch order, clipped, and applied with Adam.
//!
//! Every random draw is keyed by `(seed, purpose, step, index)`, so a run
//! resumed from a checkpoint continues exactly as an uninterrupted one.

use rand::seq::index;

use super::config::TrainConfig;
use super::losses::{bits_per_dim, dequantize, image_noise, latent_noise, total_loss, LossNoise, LossWeights};
use crate::error::{Error, Result};
use crate::flow::{FlowModel, Mode};
use crate::optim::{clip_gradients, Adam};
use crate::par::{self, Execution};
use crate::rng::{purpose, stream};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub nll: f64,
    pub bits_per_dim: f64,
    pub l_ln: f64,
    pub l_ae: f64,
    pub l_in: f64,
    pub total: f64,
    pub grad_norm: f64,
}

impl StepMetrics {
    pub const HEADER: &'static str = "step,nll,bits_per_dim,l_ln,l_ae,l_in,total,grad_norm";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.nll, self.bits_per_dim, self.l_ln, self.l_ae, self.l_in, self.total, self.grad_norm
        )
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: FlowModel,
    pub adam: Adam,
    /// Completed updates.
    pub step: u64,
    pub exec: Execution,
}

impl Trainer {
    pub fn new(config: TrainConfig, exec: Execution) -> Result<Self> {
        config.validate()?;
        let model = FlowModel::new(config.flow.clone(), config.seed)?;
        Ok(Self::resume(config, model, None, 0, exec))
    }

    pub fn resume(config: TrainConfig, model: FlowModel, adam: Option<Adam>, step: u64, exec: Execution) -> Self {
        let adam =
            adam.unwrap_or_else(|| Adam::new(config.learning_rate, model.params.iter().map(|p| p.value.shape())));
        Trainer {
            config,
            model,
            adam,
            step,
            exec,
        }
    }

    fn weights(&self) -> LossWeights {
        LossWeights {
            beta_ln: self.config.beta_ln,
            beta_ae: self.config.beta_ae,
            beta_in: self.config.beta_in,
        }
    }

    /// Dequantized images of the batch used at `step`, each `(1, C, H, W)`.
    pub fn batch(&self, data: &[Tensor], step: u64) -> Result<Vec<Tensor>> {
        if data.is_empty() {
            return Err(Error::Param("training data is empty".into()));
        }
        let seed = self.config.seed;
        let size = self.config.batch_size.min(data.len());
        let picks = index::sample(&mut stream(seed, &[purpose::BATCH, step]), data.len(), size);
        picks
            .iter()
            .enumerate()
            .map(|(b, i)| {
                let x = &data[i];
                self.model.check_input(x.shape())?;
                dequantize(x, Some(&mut stream(seed, &[purpose::DEQUANT, step, b as u64])))
            })
            .collect()
    }

    /// Data-dependent actnorm init from the next batch, if not done yet.
    pub fn ensure_initialized(&mut self, data: &[Tensor]) -> Result<()> {
        if !self.model.is_initialized() {
            let batch = Tensor::stack_batch(&self.batch(data, self.step)?)?;
            self.model.data_init(&batch)?;
        }
        Ok(())
    }

    pub fn train_step(&mut self, data: &[Tensor]) -> Result<StepMetrics> {
        self.ensure_initialized(data)?;
        let xs = self.batch(data, self.step)?;
        let (seed, step, cfg) = (self.config.seed, self.step, &self.config);
        let weights = self.weights();
        let model = &self.model;
        let per_image = par::map_indexed(self.exec, xs.len(), |b| -> Result<(Vec<Tensor>, [f64; 5])> {
            let key = |p: u64| stream(seed, &[p, step, b as u64]);
            let noise = LossNoise {
                latent: (weights.beta_ln > 0.0)
                    .then(|| latent_noise(model, 1, cfg.latent_noise, &mut key(purpose::LATENT_NOISE))),
                image: (weights.beta_in > 0.0)
                    .then(|| image_noise(xs[b].shape(), cfg.image_noise, &mut key(purpose::IMAGE_NOISE))),
            };
            let mut dropout = key(purpose::DROPOUT);
            let tape = Tape::new();
            let p = model.params.bind(&tape, true);
            let terms = total_loss(
                model,
                &p,
                tape.constant(xs[b].clone()),
                weights,
                &noise,
                &mut Mode::Train(&mut dropout),
            )?;
            let grads = tape.backprop(terms.total)?;
            Ok((p.gradients(&grads), terms.values()))
        });

        let n = xs.len() as f64;
        let mut grads: Option<Vec<Tensor>> = None;
        let mut sums = [0.0; 5];
        for result in per_image {
            let (g, values) = result?;
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v / n;
            }
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
            }
        }
        let mut grads = grads.ok_or_else(|| Error::Param("empty batch".into()))?;
        for g in &mut grads {
            g.scale_assign(1.0 / n);
        }
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(Error::NonFinite {
                what: "gradient",
                index: i,
            });
        }
        let grad_norm = clip_gradients(&mut grads, cfg.grad_clip_value, cfg.grad_clip_norm);
        let trainable: Vec<bool> = self.model.params.iter().map(|p| p.trainable).collect();
        let mut params: Vec<&mut Tensor> = self.model.params.iter_mut().map(|p| &mut p.value).collect();
        self.adam.step_masked(&mut params, &grads, |i| trainable[i])?;
        self.step += 1;

        let [nll, l_ln, l_ae, l_in, total] = sums;
        Ok(StepMetrics {
            step: self.step,
            nll,
            bits_per_dim: bits_per_dim(nll, self.config.flow.dims()),
            l_ln,
            l_ae,
            l_in,
            total,
            grad_norm,
        })
    }

    /// Run until `total_steps` updates have been made, reporting each step.
    pub fn run(
        &mut self,
        data: &[Tensor],
        mut on_step: impl FnMut(&Trainer, &StepMetrics) -> Result<()>,
    ) -> Result<()> {
        self.ensure_initialized(data)?;
        while self.step < self.config.total_steps {
            let m = self.train_step(data)?;
            on_step(self, &m)?;
        }
        Ok(())
    }
}
