//! Alternating GAN training.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::data::DatasetSpec;
use crate::error::{contract_err, shape_err, Result};
use crate::losses::{gan_loss, r1_penalty, LossKind, Role};
use crate::networks::{sample_latent, Discriminator, Generator};
use crate::nn::{Adam, ParamStore};
use crate::tensor::Tensor;

use super::checkpoint::{Checkpoint, RngState};
use super::config::ExperimentConfig;
use super::eval::{evaluate, EvalSpec};

/// RNG streams derived from `train.seed`.
pub(crate) mod stream {
    pub const TRAIN: u64 = 0;
    pub const INIT_G: u64 = 1;
    pub const INIT_D: u64 = 2;
    pub const DATA: u64 = 3;
    pub const EVAL: u64 = 4;
}

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Networks plus their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ExperimentConfig,
    pub gen: Generator,
    pub disc: Discriminator,
    pub g_params: ParamStore,
    pub d_params: ParamStore,
    /// Running average of `g_params`, present when
    /// `train.g_ema_half_life > 0`.
    pub g_ema: Option<ParamStore>,
}

impl Model {
    /// Freshly initialized networks for `config`.
    pub fn init(config: &ExperimentConfig) -> Result<Self> {
        let gen = Generator::new(&config.net)?;
        let disc = Discriminator::new(&config.net)?;
        let g_params = gen.init(&mut seeded(config.train.seed, stream::INIT_G));
        let d_params = disc.init(&mut seeded(config.train.seed, stream::INIT_D));
        let g_ema = (config.train.g_ema_half_life > 0.0).then(|| g_params.clone());
        Ok(Self {
            config: config.clone(),
            gen,
            disc,
            g_params,
            d_params,
            g_ema,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ExperimentConfig::from_text(&ckpt.config_text)?;
        let gen = Generator::new(&config.net)?;
        let disc = Discriminator::new(&config.net)?;
        let ema = ckpt.params.scoped("ema.");
        let g_ema = if config.train.g_ema_half_life > 0.0 {
            if ema.is_empty() {
                return Err(contract_err!(
                    "config enables train.g_ema_half_life but the checkpoint has no average"
                ));
            }
            Some(ema)
        } else if !ema.is_empty() {
            return Err(contract_err!(
                "checkpoint has a generator average the config does not enable"
            ));
        } else {
            None
        };
        let model = Self {
            config,
            gen,
            disc,
            g_params: ckpt.params.with_prefix("g."),
            d_params: ckpt.params.with_prefix("d."),
            g_ema,
        };
        model.check_params()?;
        Ok(model)
    }

    fn check_params(&self) -> Result<()> {
        let expect = self.gen.init(&mut seeded(0, 0));
        let expect_d = self.disc.init(&mut seeded(0, 0));
        let mut stores = vec![(&self.g_params, &expect), (&self.d_params, &expect_d)];
        if let Some(ema) = &self.g_ema {
            stores.push((ema, &expect));
        }
        for (store, want) in stores {
            for (name, t) in want.iter() {
                let got = store.get(name)?;
                if got.shape() != t.shape() {
                    return Err(shape_err!(
                        "parameter {name} has shape {:?}, config expects {:?}",
                        got.shape(),
                        t.shape()
                    ));
                }
            }
            if store.len() != want.len() {
                return Err(contract_err!("checkpoint has parameters the config does not define"));
            }
        }
        Ok(())
    }

    /// Generator weights used for sampling and evaluation: the running
    /// average when enabled, else the trained weights.
    pub fn sampling_params(&self) -> &ParamStore {
        self.g_ema.as_ref().unwrap_or(&self.g_params)
    }

    /// Folds the current generator weights into the running average.
    fn update_ema(&mut self) -> Result<()> {
        let Some(ema) = &mut self.g_ema else {
            return Ok(());
        };
        let beta = 0.5f64.powf(1.0 / self.config.train.g_ema_half_life);
        let mut next = ParamStore::new();
        for (name, avg) in ema.iter() {
            let cur = self.g_params.get(name)?;
            let data = avg
                .data()
                .iter()
                .zip(cur.data())
                .map(|(a, c)| c + beta * (a - c))
                .collect();
            next.insert(name, Tensor::new(avg.shape(), data)?);
        }
        *ema = next;
        Ok(())
    }

    /// `n` generator samples with latents drawn from `rng`, in chunks.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        let z = sample_latent(n, self.config.net.latent_dim, rng);
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + 256).min(n);
            let zc = z.gather_first(&(start..end).collect::<Vec<_>>())?;
            parts.push(self.gen.generate(self.sampling_params(), &zc)?);
            start = end;
        }
        Tensor::cat_first(&parts)
    }
}

/// A batch known to come from the training data.
#[derive(Clone, Debug)]
pub struct RealBatch(Tensor);

impl RealBatch {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Reference images for the Siamese discriminator: a shuffle of this
    /// real batch. Panics if the permutation is not one, so a reference can
    /// never be anything but a real image.
    pub fn references<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Tensor> {
        let n = self.0.shape()[0];
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        let mut seen = vec![false; n];
        for &i in &perm {
            assert!(
                i < n && !seen[i],
                "reference index {i} is not drawn from the real batch"
            );
            seen[i] = true;
        }
        self.0.gather_first(&perm)
    }
}

/// Values logged for one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub kind: LossKind,
    pub d_loss: f64,
    pub g_loss: f64,
    pub r1: Option<f64>,
    pub real_logit: f64,
    pub fake_logit: f64,
}

impl StepRecord {
    pub fn to_line(&self) -> String {
        let mut s = format!(
            "step={} kind={} d_loss={} g_loss={}",
            self.step, self.kind, self.d_loss, self.g_loss
        );
        if let Some(r1) = self.r1 {
            s.push_str(&format!(" r1={r1}"));
        }
        s.push_str(&format!(
            " real_logit={} fake_logit={}",
            self.real_logit, self.fake_logit
        ));
        s
    }
}

fn mean(t: &Tensor) -> f64 {
    t.data().iter().sum::<f64>() / t.numel().max(1) as f64
}

#[derive(Clone)]
struct State {
    model: Model,
    adam_g: Adam,
    adam_d: Adam,
    rng: ChaCha8Rng,
    step: u64,
}

pub struct Trainer {
    state: State,
    train_set: Option<Tensor>,
}

impl Trainer {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let model = Model::init(config)?;
        let t = &config.train;
        let state = State {
            model,
            adam_g: Adam::new(t.lr, t.beta1, t.beta2),
            adam_d: Adam::new(t.lr, t.beta1, t.beta2),
            rng: seeded(t.seed, stream::TRAIN),
            step: 0,
        };
        Ok(Self {
            train_set: Self::load_train_set(config)?,
            state,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = Model::from_checkpoint(ckpt)?;
        let t = model.config.train.clone();
        let mut adam_g = Adam::new(t.lr, t.beta1, t.beta2);
        adam_g.load_state(&ckpt.optimizer.scoped("adam_g."))?;
        let mut adam_d = Adam::new(t.lr, t.beta1, t.beta2);
        adam_d.load_state(&ckpt.optimizer.scoped("adam_d."))?;
        let step = ckpt.optimizer.get("train.step")?.item()? as u64;
        let config = model.config.clone();
        Ok(Self {
            train_set: Self::load_train_set(&config)?,
            state: State {
                model,
                adam_g,
                adam_d,
                rng: ckpt.rng.restore(),
                step,
            },
        })
    }

    fn load_train_set(config: &ExperimentConfig) -> Result<Option<Tensor>> {
        let data_seed = seeded(config.train.seed, stream::DATA).next_u64();
        match &config.data {
            DatasetSpec::ImageFolder { .. } => config.data.generate(0, data_seed).map(Some),
            _ if config.data_samples > 0 => config.data.generate(config.data_samples, data_seed).map(Some),
            _ => Ok(None),
        }
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.state.model.config
    }

    pub fn model(&self) -> &Model {
        &self.state.model
    }

    /// Completed iterations.
    pub fn step(&self) -> u64 {
        self.state.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let s = &self.state;
        let mut params = s.model.g_params.clone();
        params.extend_prefixed("", &s.model.d_params);
        if let Some(ema) = &s.model.g_ema {
            params.extend_prefixed("ema.", ema);
        }
        let mut optimizer = ParamStore::new();
        optimizer.extend_prefixed("adam_g.", &s.adam_g.state());
        optimizer.extend_prefixed("adam_d.", &s.adam_d.state());
        optimizer.insert("train.step", Tensor::scalar(s.step as f64));
        Checkpoint {
            config_text: s.model.config.to_text(),
            params,
            optimizer,
            rng: RngState::capture(&s.rng),
        }
    }

    /// Loss kind used at iteration `step`.
    pub fn loss_kind_at(&self, step: u64) -> LossKind {
        if step < self.config().train.warmup_steps {
            LossKind::NonSaturating
        } else {
            self.config().loss.kind
        }
    }

    fn real_batch(&mut self) -> Result<RealBatch> {
        let b = self.config().train.batch_size;
        let s = &mut self.state;
        let t = match &self.train_set {
            Some(set) => {
                let n = set.shape()[0];
                let idx: Vec<usize> = (0..b).map(|_| s.rng.gen_range(0..n)).collect();
                set.gather_first(&idx)?
            }
            None => {
                let seed = s.rng.next_u64();
                s.model.config.data.generate(b, seed)?
            }
        };
        Ok(RealBatch(t))
    }

    /// One iteration: `d_steps_per_g` discriminator updates, then one
    /// generator update.
    pub fn step_once(&mut self) -> Result<StepRecord> {
        let step = self.state.step;
        let kind = self.loss_kind_at(step);
        let cfg = self.config().clone();
        let (b, latent) = (cfg.train.batch_size, cfg.net.latent_dim);
        let siamese = self.state.model.disc.is_siamese();

        let mut d_loss = 0.0;
        let mut r1_value = None;
        let mut logits = (0.0, 0.0);
        let mut last = None;
        for j in 0..cfg.train.d_steps_per_g {
            let real = self.real_batch()?;
            let refs = if siamese {
                Some(real.references(&mut self.state.rng)?)
            } else {
                None
            };
            let s = &mut self.state;
            let z = sample_latent(b, latent, &mut s.rng);
            let fake = s.model.gen.generate(&s.model.g_params, &z)?;

            let mut g = Graph::new();
            let dp = s.model.d_params.bind(&mut g, true);
            let rv = g.constant(real.tensor().clone());
            let fv = g.constant(fake);
            let refv = refs.as_ref().map(|r| g.constant(r.clone()));
            let disc = &s.model.disc;
            let (rl, _) = disc.forward(&mut g, &dp, rv, refv)?;
            let (fl, _) = disc.forward(&mut g, &dp, fv, refv)?;
            let loss = gan_loss(&mut g, kind, Role::Discriminator, Some(rl), fl)?;
            d_loss = g.value(loss).item()?;
            logits = (mean(g.value(rl)), mean(g.value(fl)));

            let d_update = step * cfg.train.d_steps_per_g as u64 + j as u64;
            let mut total = loss;
            if cfg.loss.r1_gamma > 0.0 && d_update % cfg.loss.r1_interval == 0 {
                let pen = r1_penalty(&mut g, real.tensor(), cfg.loss.r1_gamma, |g, x| {
                    disc.forward(g, &dp, x, refv).map(|(l, _)| l)
                })?;
                r1_value = Some(g.value(pen).item()?);
                let lazy = g.scale(pen, cfg.loss.r1_interval as f64)?;
                total = g.add(total, lazy)?;
            }
            let grads = g.backward(total)?;
            let named = dp.gradients(&grads, &g);
            s.adam_d.step(&mut s.model.d_params, &named)?;
            last = Some((real, refs));
        }

        let (real, refs) = last.expect("at least one discriminator step");
        let s = &mut self.state;
        let z = sample_latent(b, latent, &mut s.rng);
        let mut g = Graph::new();
        let gp = s.model.g_params.bind(&mut g, true);
        let dp = s.model.d_params.bind(&mut g, false);
        let zv = g.constant(z);
        let fake = s.model.gen.forward(&mut g, &gp, zv)?;
        let refv = refs.map(|r| g.constant(r));
        let (fl, _) = s.model.disc.forward(&mut g, &dp, fake, refv)?;
        let rl = if kind == LossKind::DualContrastive {
            let rv = g.constant(real.tensor().clone());
            Some(s.model.disc.forward(&mut g, &dp, rv, refv)?.0)
        } else {
            None
        };
        let loss = gan_loss(&mut g, kind, Role::Generator, rl, fl)?;
        let g_loss = g.value(loss).item()?;
        let grads = g.backward(loss)?;
        let named = gp.gradients(&grads, &g);
        s.adam_g.step(&mut s.model.g_params, &named)?;
        s.model.update_ema()?;

        s.step += 1;
        Ok(StepRecord {
            step,
            kind,
            d_loss,
            g_loss,
            r1: r1_value,
            real_logit: logits.0,
            fake_logit: logits.1,
        })
    }

    fn should_log(&self, step: u64) -> bool {
        let t = &self.config().train;
        step % t.log_interval.max(1) == 0 || step == t.warmup_steps || step + 1 == t.steps
    }

    /// Evaluates the configured metrics on the current state.
    pub fn evaluate_now(&self) -> Result<String> {
        let spec = EvalSpec::from_config(self.config());
        let report = evaluate(&self.state.model, &spec)?;
        Ok(format!("step={} {}", self.state.step, report.to_line()))
    }

    /// Trains until `until` iterations are complete, passing every log
    /// record to `sink`. If an iteration fails (for example on a non-finite
    /// value) the trainer rolls back to the state before it and returns the
    /// error, so [`Trainer::checkpoint`] then yields the last good state.
    pub fn run_until(&mut self, until: u64, sink: &mut dyn FnMut(&str)) -> Result<()> {
        let until = until.min(self.config().train.steps);
        while self.state.step < until {
            let snapshot = self.state.clone();
            let step = self.state.step;
            match self.step_once() {
                Ok(rec) => {
                    if self.should_log(step) {
                        sink(&rec.to_line());
                    }
                }
                Err(e) => {
                    self.state = snapshot;
                    sink(&format!("step={step} event=abort error={e:?}"));
                    return Err(e);
                }
            }
            let interval = self.config().eval.interval;
            if interval > 0 && self.state.step % interval == 0 && !self.config().eval.metrics.is_empty() {
                let line = self.evaluate_now()?;
                sink(&line);
            }
        }
        Ok(())
    }
}

/// Result of [`train`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<String>,
    pub run_dir: PathBuf,
}

fn append_log(path: &Path, lines: &[String]) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

/// Runs a full training job in `config.output_dir`: writes `config.txt`,
/// `log.txt`, periodic `checkpoint_<step>.ckpt` files and `final.ckpt`. On
/// failure writes `last_good.ckpt` and returns the error.
pub fn train(config: &ExperimentConfig, sink: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config)?;
    run_job(&mut trainer, sink)
}

/// Continues a job from a checkpoint in the checkpoint config's output
/// directory.
pub fn resume(ckpt: &Checkpoint, sink: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    let mut trainer = Trainer::from_checkpoint(ckpt)?;
    run_job(&mut trainer, sink)
}

fn run_job(trainer: &mut Trainer, sink: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    let config = trainer.config().clone();
    let dir = config.output_dir.clone();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.txt"), config.to_text())?;
    let log_path = dir.join("log.txt");
    let mut log = Vec::new();
    let header = format!(
        "event=start step={} {}",
        trainer.step(),
        config
            .to_text()
            .lines()
            .map(|l| l.replace(" = ", "="))
            .collect::<Vec<_>>()
            .join(" ")
    );
    sink(&header);
    if trainer.step() == 0 {
        fs::write(&log_path, "")?;
    }
    append_log(&log_path, std::slice::from_ref(&header))?;
    log.push(header);

    let steps = config.train.steps;
    let every = config.train.checkpoint_interval;
    let mut result = Ok(());
    while trainer.step() < steps {
        let target = if every > 0 {
            ((trainer.step() / every) + 1) * every
        } else {
            steps
        };
        let mut lines = Vec::new();
        result = trainer.run_until(target, &mut |l| {
            sink(l);
            lines.push(l.to_string());
        });
        append_log(&log_path, &lines)?;
        log.extend(lines);
        if result.is_err() {
            break;
        }
        if every > 0 && trainer.step() % every == 0 && trainer.step() < steps {
            trainer
                .checkpoint()
                .save(dir.join(format!("checkpoint_{}.ckpt", trainer.step())))?;
        }
    }
    if let Err(e) = result {
        trainer.checkpoint().save(dir.join("last_good.ckpt"))?;
        return Err(e);
    }
    let checkpoint = trainer.checkpoint();
    checkpoint.save(dir.join("final.ckpt"))?;
    Ok(TrainOutcome {
        checkpoint,
        log,
        run_dir: dir,
    })
}
