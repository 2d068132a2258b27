//! Training loop and evaluation.

pub mod augment;
pub mod data;
pub mod loss;
pub mod metrics;
pub mod optim;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Ctx;
use crate::rng;
use crate::tensor::Element;

use self::augment::D4;
use self::data::{collate, Sample};
use self::loss::{combined_loss, LossWeights};
use self::metrics::{argmax_labels, MetricsAccumulator, MetricsOptions, MetricsReport};
use self::optim::{PolySchedule, Sgd};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_power: f64,
    pub loss: LossWeights,
    /// Random D4 transform per drawn sample.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 4,
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_power: 0.9,
            loss: LossWeights::default(),
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> PolySchedule {
        PolySchedule {
            base_lr: self.base_lr,
            total_steps: self.steps,
            power: self.lr_power,
        }
    }
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// 1-based.
    pub step: usize,
    pub lr: f64,
    pub dice_loss: f64,
    pub ce_loss: f64,
    pub total: f64,
}

pub const LOSS_LOG_HEADER: &str = "step,lr,dice_loss,ce_loss,total";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e}",
            self.step, self.lr, self.dice_loss, self.ce_loss, self.total
        )
    }
}

pub struct Trainer<T> {
    pub model: Model<T>,
    pub opt: Sgd<T>,
    pub config: TrainConfig,
    /// Steps completed so far.
    pub step: usize,
    rng: ChaCha8Rng,
}

impl<T: Element> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let opt = Sgd::new(&model.params, config.momentum, config.weight_decay);
        let rng = rng::stream(config.seed, rng::AUGMENT);
        Ok(Self {
            model,
            opt,
            config,
            step: 0,
            rng,
        })
    }

    /// Restores a trainer mid-run: optimizer state, completed steps and the
    /// augmentation stream position.
    pub fn resume(model: Model<T>, config: TrainConfig, opt: Sgd<T>, rng_word_pos: u64) -> Result<Self> {
        let mut t = Self::new(model, config)?;
        if opt.velocity.len() != t.model.params.len() {
            return Err(Error::invalid("resume", "optimizer state does not match the model"));
        }
        t.step = opt.steps_taken;
        t.opt = opt;
        t.rng.set_word_pos(rng_word_pos as u128);
        Ok(t)
    }

    pub fn rng_word_pos(&self) -> u64 {
        self.rng.get_word_pos() as u64
    }

    /// Completed passes over a dataset of `n` samples.
    pub fn epoch(&self, n: usize) -> usize {
        self.step * self.config.batch_size / n.max(1)
    }

    /// Batches cycle through `data` in order; augmentation draws from the
    /// trainer's own stream.
    pub fn train_step(&mut self, data: &[Sample]) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::invalid("train", "empty dataset"));
        }
        let bs = self.config.batch_size;
        let mut batch = Vec::with_capacity(bs);
        for i in 0..bs {
            let s = &data[(self.step * bs + i) % data.len()];
            s.validate(self.model.config.num_classes)?;
            batch.push(if self.config.augment {
                D4::sample(&mut self.rng).apply(s)?
            } else {
                s.clone()
            });
        }
        let refs: Vec<&Sample> = batch.iter().collect();
        let (x, labels) = collate::<T>(&refs)?;
        let lr = self.config.schedule().lr(self.step);

        let mut g = Graph::new();
        let vars = self.model.params.bind(&mut g);
        let mut cx = Ctx::new(&mut g, &vars);
        let xv = cx.g.constant(x);
        let logits = self.model.forward(&mut cx, xv)?;
        let terms = combined_loss(cx.g, logits, &labels, self.config.loss)?;
        g.backward(terms.total)?;
        let grads: Vec<_> = vars.iter().map(|&v| g.grad(v)).collect();
        let log = StepLog {
            step: self.step + 1,
            lr,
            dice_loss: g.value(terms.dice).item().to_f64_lossy(),
            ce_loss: g.value(terms.ce).item().to_f64_lossy(),
            total: g.value(terms.total).item().to_f64_lossy(),
        };
        if !log.total.is_finite() {
            return Err(Error::invalid(
                "train",
                format!("loss became {} at step {}", log.total, log.step),
            ));
        }
        self.opt.step(&mut self.model.params, &grads, lr)?;
        self.step += 1;
        Ok(log)
    }
}

/// Hard predictions (argmax over classes) for a batch of samples.
pub fn predict_labels<T: Element>(model: &Model<T>, samples: &[&Sample]) -> Result<Vec<Vec<usize>>> {
    let (x, _) = collate::<T>(samples)?;
    let y = model.predict(&x)?;
    let s = y.shape();
    let logits: Vec<f64> = y.data().iter().map(|v| v.to_f64_lossy()).collect();
    Ok(argmax_labels(&logits, s[0], s[1], s[2] * s[3]))
}

pub fn evaluate<T: Element>(
    model: &Model<T>,
    samples: &[Sample],
    opts: MetricsOptions,
    batch_size: usize,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate", "no samples"));
    }
    let k = model.config.num_classes;
    let mut acc = MetricsAccumulator::new(k, opts);
    for chunk in samples.chunks(batch_size.max(1)) {
        for s in chunk {
            s.validate(k)?;
        }
        let refs: Vec<&Sample> = chunk.iter().collect();
        for (pred, s) in predict_labels(model, &refs)?.iter().zip(chunk) {
            acc.add(pred, &s.mask, s.height, s.width);
        }
    }
    Ok(acc.finish())
}

/// Loss of the current parameters on a fixed batch, without augmentation.
pub fn batch_loss<T: Element>(model: &Model<T>, samples: &[&Sample], weights: LossWeights) -> Result<f64> {
    let (x, labels) = collate::<T>(samples)?;
    let mut g = Graph::new();
    let vars: Vec<Var> = model.params.iter().map(|p| g.constant(p.tensor.clone())).collect();
    let mut cx = Ctx::new(&mut g, &vars);
    let xv = cx.g.constant(x);
    let logits = model.forward(&mut cx, xv)?;
    let t = combined_loss(cx.g, logits, &labels, weights)?;
    Ok(g.value(t.total).item().to_f64_lossy())
}

#[cfg(test)]
mod tests {
    use super::data::synth_dataset;
    use super::*;
    use crate::model::ModelConfig;

    fn trainer(seed: u64) -> Trainer<f32> {
        let cfg = ModelConfig {
            seed,
            ..ModelConfig::tiny()
        };
        Trainer::new(
            Model::build(&cfg).unwrap(),
            TrainConfig {
                steps: 20,
                seed,
                ..TrainConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn first_steps_are_reproducible() {
        let data = synth_dataset(8, 32, 32, 2, 1).unwrap();
        let run = || {
            let mut t = trainer(7);
            (0..5).map(|_| t.train_step(&data).unwrap()).collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a[0].step, 1);
        assert_eq!(a[0].lr, 0.05);
        assert!(a
            .iter()
            .all(|l| l.total.is_finite() && l.dice_loss >= 0.0 && l.ce_loss >= 0.0));
    }

    #[test]
    fn resume_continues_identically() {
        let data = synth_dataset(8, 32, 32, 2, 1).unwrap();
        let mut full = trainer(3);
        let logs: Vec<_> = (0..6).map(|_| full.train_step(&data).unwrap()).collect();

        let mut first = trainer(3);
        for _ in 0..3 {
            first.train_step(&data).unwrap();
        }
        let (model, opt, pos) = (first.model.clone(), first.opt.clone(), first.rng_word_pos());
        let mut second = Trainer::resume(model, first.config.clone(), opt, pos).unwrap();
        let rest: Vec<_> = (0..3).map(|_| second.train_step(&data).unwrap()).collect();
        assert_eq!(&logs[3..], rest.as_slice());
    }

    #[test]
    fn evaluate_reports_every_class() {
        let data = synth_dataset(3, 32, 32, 2, 2).unwrap();
        let m = Model::<f32>::build(&ModelConfig::tiny()).unwrap();
        let r = evaluate(&m, &data, MetricsOptions::default(), 2).unwrap();
        assert_eq!(r.classes.len(), 2);
        assert_eq!(r.samples, 3);
        assert!(evaluate(&m, &[], MetricsOptions::default(), 2).is_err());
    }
}
