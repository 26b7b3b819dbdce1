//! Adam optimization of the full objective over a fixed pair set.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{self, Checkpoint};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::jnd::{jnd_map, JndMap};
use crate::losses::{total_loss, LossBreakdown, LossWeights};
use crate::model::AlignModel;
use crate::nn::Params;
use crate::synth::{load_dataset, procedural_pairs, SynthPair};
use crate::tensor::{NdArray, Tape};

/// Mixed into the config seed for the sampling stream, keeping it apart
/// from the parameter and dataset streams.
const SAMPLER_SALT: u64 = 0x5a4d_706c_6572_0001;
const DATA_SALT: u64 = 0x5a4d_6461_7461_0002;

pub const LOSS_LOG_HEADER: &str = "step,l_content,l_shape,l_jnd,total";

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<NdArray>,
    pub v: Vec<NdArray>,
}

impl Adam {
    pub fn new(lr: f64, params: &Params) -> Self {
        let zeros: Vec<NdArray> = params.values().iter().map(|p| NdArray::zeros(p.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update.
    pub fn step(&mut self, params: &mut Params, grads: &[NdArray]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Invalid(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                pd[i] -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// A pair with its arrays and reference JND map precomputed.
pub struct Sample {
    pub reference: NdArray,
    pub target: NdArray,
    pub jnd: JndMap,
}

pub fn prepare(pairs: &[SynthPair]) -> Result<Vec<Sample>> {
    pairs
        .par_iter()
        .map(|p| {
            Ok(Sample {
                reference: p.reference.to_array(),
                target: p.target.to_array(),
                jnd: jnd_map(&p.reference)?,
            })
        })
        .collect()
}

/// Loss breakdown and parameter gradients for one sample.
pub fn sample_gradients(model: &AlignModel, w: &LossWeights, s: &Sample) -> Result<(LossBreakdown, Vec<NdArray>)> {
    let tape = Tape::new();
    let p = model.params().bind(&tape);
    let r = tape.constant(s.reference.clone());
    let out = model.forward(&p, &r, &tape.constant(s.target.clone()))?;
    let (loss, parts) = total_loss(&out, &r, model.regular_mesh(), &s.jnd, w)?;
    loss.backward()?;
    Ok((parts, p.grads()))
}

/// Loss of one sample without gradients.
pub fn sample_loss(model: &AlignModel, w: &LossWeights, s: &Sample) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let p = model.params().bind_constant(&tape);
    let r = tape.constant(s.reference.clone());
    let out = model.forward(&p, &r, &tape.constant(s.target.clone()))?;
    Ok(total_loss(&out, &r, model.regular_mesh(), &s.jnd, w)?.1)
}

pub struct Trainer {
    pub config: Config,
    pub model: AlignModel,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let model = AlignModel::new(config.model()?, config.seed)?;
        let adam = Adam::new(config.lr, model.params());
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ SAMPLER_SALT);
        Ok(Self {
            config,
            model,
            adam,
            rng,
            step: 0,
        })
    }

    /// One Adam step on a batch drawn with replacement. Per-sample gradients
    /// are computed in parallel and summed in batch order.
    pub fn train_step(&mut self, data: &[Sample]) -> Result<LossBreakdown> {
        if data.is_empty() {
            return Err(Error::Empty("train_step"));
        }
        let idx: Vec<usize> = (0..self.config.batch).map(|_| self.rng.gen_range(0..data.len())).collect();
        let w = self.config.weights();
        let model = &self.model;
        let results: Vec<(LossBreakdown, Vec<NdArray>)> =
            idx.par_iter().map(|&i| sample_gradients(model, &w, &data[i])).collect::<Result<_>>()?;

        let n = results.len() as f64;
        let mut grads: Vec<NdArray> = self.model.params().values().iter().map(|p| NdArray::zeros(p.shape())).collect();
        let mut mean = LossBreakdown {
            l_content: 0.0,
            l_shape: 0.0,
            l_jnd: 0.0,
            total: 0.0,
            alpha: w.alpha,
            beta: w.beta,
        };
        for (parts, g) in &results {
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.add_assign(gi);
            }
            mean.l_content += parts.l_content / n;
            mean.l_shape += parts.l_shape / n;
            mean.l_jnd += parts.l_jnd / n;
            mean.total += parts.total / n;
        }
        for (name, g) in self.model.params().names().iter().zip(&mut grads) {
            *g = g.scale(1.0 / n);
            if !g.is_finite() {
                return Err(Error::Invalid(format!("non-finite gradient for parameter {name} at step {}", self.step + 1)));
            }
        }
        self.adam.step(self.model.params_mut(), &grads)?;
        self.step += 1;
        Ok(mean)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.model.params().clone(),
            adam: Some(self.adam.clone()),
            step: self.step,
            rng: Some(checkpoint::RngState::capture(&self.rng)),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(ck.config)?;
        crate::nn::check_compatible(t.model.params(), &ck.params)?;
        *t.model.params_mut() = ck.params;
        if let Some(adam) = ck.adam {
            crate::nn::check_compatible(t.model.params(), &params_like(&t.model, &adam.m))?;
            crate::nn::check_compatible(t.model.params(), &params_like(&t.model, &adam.v))?;
            t.adam = adam;
        }
        if let Some(rng) = ck.rng {
            t.rng = rng.restore();
        }
        t.step = ck.step;
        Ok(t)
    }
}

fn params_like(model: &AlignModel, values: &[NdArray]) -> Params {
    let mut p = Params::new();
    for (n, v) in model.params().names().iter().zip(values) {
        // Names are unique and the values came from a finite checkpoint.
        let _ = p.insert(n.clone(), v.clone());
    }
    p
}

/// Training pairs for `config`: its data directory, or synthetic pairs
/// generated from a stream seeded by the config seed.
pub fn training_pairs(config: &Config) -> Result<Vec<SynthPair>> {
    match &config.data {
        Some(dir) => load_dataset(dir),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ DATA_SALT);
            procedural_pairs(&mut rng, config.pairs, config.channels, &config.pair_options())
        }
    }
}

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(format!("ckpt_{step:06}.bin"))
}

/// Runs `trainer` to `config.steps`, appending one CSV row per step to
/// `log` and saving checkpoints under `config.out`. Returns the path of
/// the final checkpoint.
pub fn run(trainer: &mut Trainer, data: &[Sample], log: &mut dyn Write) -> Result<PathBuf> {
    let out = trainer.config.out.clone();
    std::fs::create_dir_all(&out)?;
    let every = trainer.config.checkpoint_every;
    while trainer.step < trainer.config.steps {
        let b = trainer.train_step(data)?;
        writeln!(log, "{},{},{},{},{}", trainer.step, b.l_content, b.l_shape, b.l_jnd, b.total)?;
        if every > 0 && trainer.step % every == 0 && trainer.step < trainer.config.steps {
            checkpoint::save(&trainer.to_checkpoint(), checkpoint_path(&out, trainer.step))?;
        }
    }
    log.flush()?;
    let last = out.join("final.bin");
    checkpoint::save(&trainer.to_checkpoint(), &last)?;
    Ok(last)
}
