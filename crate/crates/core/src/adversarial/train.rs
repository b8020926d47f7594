use super::{hinge_losses, scott_loss, Discriminator, FakeTime, GanConfig, MAX_LOGIT};
use crate::diffusion::{Label, MixtureSpec, Schedule, ScoreModel};
use crate::distill::{CdTrainer, DistillConfig, StudentCheckpoint, TrainAbort};
use crate::error::{Error, Result};
use crate::numerics::{streams, AdamConfig, AdamState, Params, RngStream};

/// Consistency distillation with the adversarial branch. Each iteration:
/// CD loss, hinge losses on the student's one-step outputs, an Adam step on
/// `theta` for `L_CD + lambda_adv L_G`, an Adam step on `phi` for `L_D`,
/// then the EMA update of `theta^-`.
///
/// The discriminator draws only from its own stream, so with
/// `lambda_adv = 0` the student is bit-identical to the plain CD run.
pub fn train_scott_full(
    teacher: &ScoreModel,
    config: &DistillConfig,
    gan: &GanConfig,
    spec: &MixtureSpec,
    schedule: &Schedule,
    seed: u64,
) -> std::result::Result<(StudentCheckpoint, Discriminator), TrainAbort> {
    gan.validate()?;
    let mut trainer = CdTrainer::new(teacher, config, spec, schedule, seed)?;
    let mut disc_rng = RngStream::new(seed, streams::DISCRIMINATOR);
    let mut disc = Discriminator::from_teacher(teacher, gan.rank, gan.adapter_scale, &mut disc_rng)?;
    let mut phi = disc.params();
    let mut disc_adam = AdamState::new(&phi, AdamConfig::with_lr(config.learning_rate * gan.lr_ratio));
    let mut last_good = trainer.checkpoint(Some(*gan));

    while trainer.iteration < config.iterations {
        let step = (|| -> Result<(f64, f64, f64)> {
            let it = trainer.iteration;
            let (x0, classes) = trainer.next_batch();
            let cd = trainer.cd_forward(&x0, &classes)?;
            let conds: Vec<Label> = classes.iter().map(|&c| Some(c)).collect();
            let t_fake = match gan.fake_time {
                FakeTime::Source => cd.t_n.clone(),
                FakeTime::Zero => vec![0.0; cd.t_n.len()],
            };
            let hinge = hinge_losses(&disc, x0.view(), cd.online.output.view(), &conds, &t_fake)?;
            let worst = hinge.real_logits.iter().chain(hinge.fake_logits.iter()).fold(0.0f64, |m, v| {
                if v.is_nan() {
                    f64::NAN
                } else {
                    m.max(v.abs())
                }
            });
            if !(worst <= MAX_LOGIT) {
                return Err(Error::Diverged {
                    iteration: it,
                    reason: format!("discriminator logit magnitude {worst}"),
                });
            }
            let total = scott_loss(cd.loss, hinge.gen_loss, gan.weights);
            if !(total.is_finite() && hinge.disc_loss.is_finite()) {
                return Err(Error::Diverged {
                    iteration: it,
                    reason: format!("losses cd={} gen={} disc={}", cd.loss, hinge.gen_loss, hinge.disc_loss),
                });
            }
            let mut cot = cd.cot.clone();
            if gan.weights.lambda_adv != 0.0 {
                cot.scaled_add(gan.weights.lambda_adv, &hinge.grads_fake);
            }
            let grads = trainer.model.backward_online(&cd.online, cot.view())?;
            trainer.apply_gradient(&grads)?;
            disc_adam.step(&mut phi, &hinge.grads_phi)?;
            disc.set_params(&phi)?;
            trainer.update_target()?;
            Ok((cd.loss, hinge.gen_loss, hinge.disc_loss))
        })();
        match step {
            Ok((cd, g, d)) => trainer.finish_iteration(cd, g, d),
            Err(e) => return Err(trainer.abort(e, last_good)),
        }
        if trainer.model.online.net.all_finite() {
            last_good = trainer.checkpoint(Some(*gan));
        }
    }
    Ok((trainer.checkpoint(Some(*gan)), disc))
}
