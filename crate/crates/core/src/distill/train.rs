use std::fmt;

use ndarray::Array2;

use super::{cd_forward, CdOutput, CdStreams, ConsistencyHead, ConsistencyModel, DistillConfig, StudentInit};
use crate::adversarial::GanConfig;
use crate::diffusion::{Guided, Label, MixtureSpec, Schedule, ScoreModel};
use crate::error::{Error, Result};
use crate::numerics::{fingerprint, streams, AdamConfig, AdamState, MlpParams, Params, RngStream};

/// Running means over one logging window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillRecord {
    pub iteration: usize,
    pub cd_loss: f64,
    /// Generator hinge signal; zero without a discriminator.
    pub gen_loss: f64,
    /// Discriminator hinge loss; zero without a discriminator.
    pub disc_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentCheckpoint {
    pub model: ConsistencyModel,
    pub config: DistillConfig,
    pub gan: Option<GanConfig>,
    pub records: Vec<DistillRecord>,
    pub teacher_fingerprint: String,
    pub iterations_done: usize,
}

/// A stopped training run: the cause and the last checkpoint whose
/// weights were all finite.
#[derive(Debug, Clone)]
pub struct TrainAbort {
    pub error: Error,
    pub last_good: Option<Box<StudentCheckpoint>>,
}

impl fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.last_good {
            Some(c) => write!(f, "{} (last good checkpoint at iteration {})", self.error, c.iterations_done),
            None => write!(f, "{}", self.error),
        }
    }
}

impl std::error::Error for TrainAbort {}

impl From<Error> for TrainAbort {
    fn from(error: Error) -> Self {
        Self { error, last_good: None }
    }
}

/// State of a distillation run. The plain CD loop and the adversarial loop
/// drive the same trainer so that both consume identical random draws.
#[derive(Debug)]
pub struct CdTrainer<'a> {
    pub teacher: &'a ScoreModel,
    pub spec: &'a MixtureSpec,
    pub schedule: &'a Schedule,
    pub config: DistillConfig,
    pub model: ConsistencyModel,
    adam: AdamState,
    data_rng: RngStream,
    streams: CdStreams,
    teacher_fingerprint: String,
    pub iteration: usize,
    pub records: Vec<DistillRecord>,
    window: (f64, f64, f64, usize),
}

impl<'a> CdTrainer<'a> {
    pub fn new(
        teacher: &'a ScoreModel,
        config: &DistillConfig,
        spec: &'a MixtureSpec,
        schedule: &'a Schedule,
        seed: u64,
    ) -> Result<Self> {
        config.validate(schedule.len())?;
        if teacher.layout.data_dim != spec.dim() {
            return Err(Error::config("teacher and data dimensions differ"));
        }
        if config.teacher_omega > 0.0 && !teacher.is_conditional() {
            return Err(Error::config("teacher guidance needs a conditional teacher"));
        }
        let init = match config.init {
            StudentInit::Teacher => teacher.clone(),
            StudentInit::Random => {
                let sizes = teacher.net.layer_sizes();
                let hidden = &sizes[1..sizes.len() - 1];
                let mut rng = RngStream::new(seed, streams::INIT);
                ScoreModel::new(teacher.layout, hidden, teacher.net.activation, &mut rng)?
            }
        };
        let head = ConsistencyHead::new(schedule.tau(), config.sigma_data)?;
        let model = ConsistencyModel::new(init, head, config.ema_rate)?;
        Ok(Self {
            teacher,
            spec,
            schedule,
            adam: AdamState::new(&model.online.net, AdamConfig::with_lr(config.learning_rate)),
            config: config.clone(),
            model,
            data_rng: RngStream::new(seed, streams::DATA),
            streams: CdStreams::new(seed),
            teacher_fingerprint: fingerprint(&teacher.net),
            iteration: 0,
            records: Vec::new(),
            window: (0.0, 0.0, 0.0, 0),
        })
    }

    pub fn teacher_fingerprint(&self) -> &str {
        &self.teacher_fingerprint
    }

    /// Training batch and its class labels.
    pub fn next_batch(&mut self) -> (Array2<f64>, Vec<usize>) {
        self.spec.sample(self.config.batch_size, &mut self.data_rng)
    }

    /// Student inputs carry the class only when the teacher is guided.
    pub fn student_labels(&self, classes: &[usize]) -> Vec<Label> {
        if self.config.teacher_omega > 0.0 {
            classes.iter().map(|&c| Some(c)).collect()
        } else {
            Vec::new()
        }
    }

    pub fn cd_forward(&mut self, x0: &Array2<f64>, classes: &[usize]) -> Result<CdOutput> {
        let labels = self.student_labels(classes);
        let teacher = Guided::new(
            self.teacher,
            classes.iter().map(|&c| Some(c)).collect(),
            self.config.teacher_omega,
        )?;
        cd_forward(
            &self.model,
            &teacher,
            x0.view(),
            &labels,
            self.schedule,
            &self.config,
            &mut self.streams,
        )
    }

    /// Adam step on the online weights.
    pub fn apply_gradient(&mut self, grads: &MlpParams) -> Result<()> {
        self.adam.step(&mut self.model.online.net, grads)
    }

    pub fn update_target(&mut self) -> Result<()> {
        self.model.update_target()
    }

    /// Closes an iteration: accumulates losses and emits a record at the
    /// end of each logging window and at the final iteration.
    pub fn finish_iteration(&mut self, cd_loss: f64, gen_loss: f64, disc_loss: f64) {
        self.iteration += 1;
        let w = &mut self.window;
        w.0 += cd_loss;
        w.1 += gen_loss;
        w.2 += disc_loss;
        w.3 += 1;
        if self.iteration % self.config.log_every == 0 || self.iteration == self.config.iterations {
            let n = w.3 as f64;
            self.records.push(DistillRecord {
                iteration: self.iteration,
                cd_loss: w.0 / n,
                gen_loss: w.1 / n,
                disc_loss: w.2 / n,
            });
            self.window = (0.0, 0.0, 0.0, 0);
        }
    }

    pub fn checkpoint(&self, gan: Option<GanConfig>) -> StudentCheckpoint {
        StudentCheckpoint {
            model: self.model.clone(),
            config: self.config.clone(),
            gan,
            records: self.records.clone(),
            teacher_fingerprint: self.teacher_fingerprint.clone(),
            iterations_done: self.iteration,
        }
    }

    /// Wraps `error` together with the state before the failing iteration.
    pub fn abort(&self, error: Error, last_good: StudentCheckpoint) -> TrainAbort {
        let diverged = match error {
            e @ Error::Diverged { .. } => e,
            e => Error::Diverged {
                iteration: self.iteration,
                reason: e.to_string(),
            },
        };
        TrainAbort {
            error: diverged,
            last_good: Some(Box::new(last_good)),
        }
    }
}

/// Consistency distillation without the adversarial branch: per iteration
/// a batch, the CD loss, an Adam step on `theta` and the EMA update of
/// `theta^-`.
pub fn train_scott_cd_only(
    teacher: &ScoreModel,
    config: &DistillConfig,
    spec: &MixtureSpec,
    schedule: &Schedule,
    seed: u64,
) -> std::result::Result<StudentCheckpoint, TrainAbort> {
    let mut trainer = CdTrainer::new(teacher, config, spec, schedule, seed)?;
    let mut last_good = trainer.checkpoint(None);
    while trainer.iteration < config.iterations {
        let step = (|| -> Result<f64> {
            let (x0, classes) = trainer.next_batch();
            let cd = trainer.cd_forward(&x0, &classes)?;
            if !cd.loss.is_finite() {
                return Err(Error::Diverged {
                    iteration: trainer.iteration,
                    reason: format!("CD loss is {}", cd.loss),
                });
            }
            let grads = trainer.model.backward_online(&cd.online, cd.cot.view())?;
            trainer.apply_gradient(&grads)?;
            trainer.update_target()?;
            Ok(cd.loss)
        })();
        match step {
            Ok(loss) => trainer.finish_iteration(loss, 0.0, 0.0),
            Err(e) => return Err(trainer.abort(e, last_good)),
        }
        if trainer.model.online.net.all_finite() {
            last_good = trainer.checkpoint(None);
        }
    }
    Ok(trainer.checkpoint(None))
}
