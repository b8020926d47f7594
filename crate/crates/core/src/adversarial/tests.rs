use ndarray::array;

use super::*;
use crate::diffusion::{MixtureSpec, Schedule, TeacherConfig};
use crate::distill::{train_scott_cd_only, DistillConfig};
use crate::numerics::{streams, MlpParams};

fn teacher(hidden: &[usize], seed: u64) -> ScoreModel {
    let layout = TeacherConfig::default().layout(&MixtureSpec::three_mode(), &Schedule::default_cosine());
    ScoreModel::new(layout, hidden, Activation::Tanh, &mut RngStream::new(seed, streams::INIT)).unwrap()
}

fn disc(hidden: &[usize], rank: usize) -> (ScoreModel, Discriminator) {
    let t = teacher(hidden, 1);
    let d = Discriminator::from_teacher(&t, rank, 1.0, &mut RngStream::new(1, streams::DISCRIMINATOR)).unwrap();
    (t, d)
}

#[test]
fn adapter_starts_as_its_base() {
    let base = Dense::init(5, 7, &mut RngStream::new(2, 1));
    let ad = LowRankAdapter::new(base.clone(), 3, 1.0, &mut RngStream::new(2, 2)).unwrap();
    assert_eq!(ad.rank(), 3);
    assert_eq!(ad.effective_weight(), base.weight);
    assert!(ad.b.iter().any(|&v| v != 0.0));
    let x = array![[0.1, -0.2, 0.3, 0.4, -0.5]];
    assert_eq!(ad.forward(x.view()).0, base.forward(x.view()));
    assert!(LowRankAdapter::new(base.clone(), 0, 1.0, &mut RngStream::new(2, 2)).is_err());
    assert!(LowRankAdapter::new(base, 6, 1.0, &mut RngStream::new(2, 2)).is_err());
}

#[test]
fn layer_split_and_trainable_fraction() {
    let (t, d) = disc(&[64, 64, 64, 64], 4);
    // Five teacher layers: three frozen, one adapted, output replaced.
    assert_eq!(d.encoder.len(), 3);
    assert_eq!(d.decoder.len(), 1);
    assert_eq!(d.encoder[..], t.net.layers[..3]);
    assert_eq!(d.trainable_count(), 4 * 64 + 64 * 4 + 65);
    let frozen: usize = t.net.layers[..4].iter().map(Dense::param_count).sum();
    assert_eq!(d.total_count(), frozen + d.trainable_count());
    assert!(d.trainable_fraction() < 0.10, "{}", d.trainable_fraction());
    let (_, small) = disc(&[8, 8], 2);
    assert_eq!(small.encoder.len(), 2);
    assert!(small.decoder.is_empty());
}

#[test]
fn construction_errors() {
    let t = teacher(&[8, 8, 8], 1);
    let rng = &mut RngStream::new(1, 1);
    assert!(matches!(Discriminator::from_teacher(&t, 0, 1.0, rng), Err(Error::Config(_))));
    assert!(matches!(Discriminator::from_teacher(&t, 9, 1.0, rng), Err(Error::Config(_))));
    let cfg = TeacherConfig {
        conditional: false,
        ..TeacherConfig::default()
    };
    let uncond = ScoreModel::new(
        cfg.layout(&MixtureSpec::three_mode(), &Schedule::default_cosine()),
        &[8, 8],
        Activation::Tanh,
        rng,
    )
    .unwrap();
    assert!(Discriminator::from_teacher(&uncond, 1, 1.0, rng).is_err());
}

#[test]
fn initial_logits_are_the_teacher_features_through_the_head() {
    let (t, d) = disc(&[16, 16, 16], 2);
    let mut layers = t.net.layers[..3].to_vec();
    layers.push(d.head.clone());
    let reference = MlpParams::from_layers(layers, Activation::Tanh).unwrap();
    let z = array![[0.3], [-1.2], [2.0]];
    let labels = [Some(0), Some(2), None];
    let times = [0.0, 0.5, 1.0];
    let input = d.layout.build(z.view(), &times, &labels).unwrap();
    let expected = reference.predict(input.view());
    let got = d.logits(z.view(), &labels, &times).unwrap();
    for i in 0..3 {
        assert!((got[i] - expected[[i, 0]]).abs() < 1e-12);
    }
    assert_eq!(got, d.logits(z.view(), &labels, &times).unwrap());
}

#[test]
fn zero_head_gives_zero_logits() {
    let (_, mut d) = disc(&[16, 16, 16], 2);
    d.head = Dense::zeros(16, 1);
    let z = array![[0.3], [-1.2]];
    assert_eq!(
        d.logits(z.view(), &[Some(1), Some(0)], &[0.0, 0.7]).unwrap().to_vec(),
        vec![0.0, 0.0]
    );
}

#[test]
fn forward_contracts() {
    let (_, d) = disc(&[16, 16, 16], 2);
    let z = array![[0.3], [-1.2]];
    assert!(matches!(
        d.forward(z.view(), &[Some(1)], &[0.0, 0.1]),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        d.forward(z.view(), &[Some(1), Some(0)], &[0.0, 1.5]),
        Err(Error::Contract(_))
    ));
    assert!(d.forward(z.view(), &[Some(1), Some(3)], &[0.0, 0.1]).is_err());
    assert!(d
        .backward(&d.forward(z.view(), &[None, None], &[0.0, 0.1]).unwrap().1, &[1.0])
        .is_err());
}

#[test]
fn hinge_examples() {
    assert_eq!(hinge_values(&[2.0], &[-2.0]).unwrap().0, 0.0);
    assert_eq!(hinge_values(&[0.0], &[0.0]).unwrap().0, 2.0);
    assert_eq!(hinge_values(&[0.0], &[-0.5]).unwrap().1, 0.5);
    assert_eq!(hinge_values(&[1.0, 3.0], &[-1.0, -4.0]).unwrap().0, 0.0);
    assert!(hinge_values(&[0.99], &[-1.0]).unwrap().0 > 0.0);
    assert!(hinge_values(&[], &[0.0]).is_err());
}

#[test]
fn scott_loss_examples() {
    let w = LossWeights::default();
    assert!((scott_loss(1.0, 0.5, w) - 1.2).abs() < 1e-15);
    assert_eq!(scott_loss(1.0, 0.0, w), 1.0);
    assert_eq!(scott_loss(0.7, f64::NAN, LossWeights { lambda_adv: 0.0 }), 0.7);
}

#[test]
fn players_receive_separate_gradients() {
    let (_, d) = disc(&[16, 16, 16], 2);
    let real = array![[-1.5], [0.1], [1.4]];
    let fake = array![[-1.0], [0.4], [1.0]];
    let conds = [Some(0), Some(1), Some(2)];
    let t_fake = [0.3, 0.6, 0.9];
    let out = hinge_losses(&d, real.view(), fake.view(), &conds, &t_fake).unwrap();

    // phi-gradient: backward of L_D only.
    let (rl, rt) = d.forward(real.view(), &conds, &[0.0; 3]).unwrap();
    let (fl, ft) = d.forward(fake.view(), &conds, &t_fake).unwrap();
    let rc: Vec<f64> = rl.iter().map(|&x| if x < 1.0 { -1.0 / 3.0 } else { 0.0 }).collect();
    let fc: Vec<f64> = fl.iter().map(|&x| if x > -1.0 { 1.0 / 3.0 } else { 0.0 }).collect();
    let (mut expect, _) = d.backward(&rt, &rc).unwrap();
    expect.add_scaled(1.0, &d.backward(&ft, &fc).unwrap().0);
    assert_eq!(out.grads_phi, expect);

    // Fake-gradient: backward of L_G only.
    let (_, gz) = d.backward(&ft, &[-1.0 / 3.0; 3]).unwrap();
    assert_eq!(out.grads_fake, gz);
    assert_eq!(out.real_logits, rl);
    assert_eq!(out.fake_logits, fl);
    assert!(out.disc_loss >= 0.0);
}

#[test]
fn gan_config_validation() {
    GanConfig::default().validate().unwrap();
    assert_eq!(GanConfig::default().fake_time, FakeTime::Source);
    for ft in [FakeTime::Source, FakeTime::Zero] {
        assert_eq!(FakeTime::parse(ft.name()), Some(ft));
    }
    assert_eq!(GanConfig::default().rank, 4);
    assert_eq!(GanConfig::default().weights.lambda_adv, 0.4);
    for bad in [
        GanConfig {
            rank: 0,
            ..GanConfig::default()
        },
        GanConfig {
            lr_ratio: 0.0,
            ..GanConfig::default()
        },
        GanConfig {
            weights: LossWeights { lambda_adv: -0.1 },
            ..GanConfig::default()
        },
    ] {
        assert!(bad.validate().is_err());
    }
}

fn run_config(schedule: &Schedule) -> DistillConfig {
    DistillConfig {
        iterations: 10,
        batch_size: 16,
        log_every: 5,
        ..DistillConfig::for_grid(schedule.len())
    }
}

#[test]
fn zero_weight_matches_plain_cd_and_keeps_the_encoder() {
    let spec = MixtureSpec::three_mode();
    let schedule = Schedule::default_cosine();
    let t = teacher(&[16, 16, 16, 16], 3);
    let config = run_config(&schedule);
    let gan = GanConfig {
        weights: LossWeights { lambda_adv: 0.0 },
        rank: 2,
        ..GanConfig::default()
    };
    let (full, d) = train_scott_full(&t, &config, &gan, &spec, &schedule, 4).unwrap();
    let plain = train_scott_cd_only(&t, &config, &spec, &schedule, 4).unwrap();
    assert_eq!(full.model, plain.model);
    assert_eq!(d.encoder[..], t.net.layers[..d.encoder.len()]);
    for (ad, base) in d.decoder.iter().zip(&t.net.layers[d.encoder.len()..]) {
        assert_eq!(&ad.base, base);
    }
    assert!(full.records.iter().all(|r| r.disc_loss > 0.0));
}

#[test]
fn adversarial_runs_are_reproducible_and_move_the_student() {
    let spec = MixtureSpec::three_mode();
    let schedule = Schedule::default_cosine();
    let t = teacher(&[16, 16, 16, 16], 5);
    let config = run_config(&schedule);
    let gan = GanConfig {
        rank: 2,
        ..GanConfig::default()
    };
    let (a, da) = train_scott_full(&t, &config, &gan, &spec, &schedule, 6).unwrap();
    let (b, db) = train_scott_full(&t, &config, &gan, &spec, &schedule, 6).unwrap();
    assert_eq!(a, b);
    assert_eq!(da, db);
    let plain = train_scott_cd_only(&t, &config, &spec, &schedule, 6).unwrap();
    assert_ne!(a.model.online, plain.model.online);
    assert_eq!(a.gan, Some(gan));
    assert!(da.decoder.iter().all(|ad| ad.a.iter().any(|&v| v != 0.0)));
}

#[test]
fn exploding_discriminator_aborts() {
    let spec = MixtureSpec::three_mode();
    let schedule = Schedule::default_cosine();
    let t = teacher(&[16, 16, 16, 16], 7);
    let config = DistillConfig {
        learning_rate: 1e9,
        ..run_config(&schedule)
    };
    let gan = GanConfig {
        rank: 2,
        lr_ratio: 1e6,
        ..GanConfig::default()
    };
    let abort = train_scott_full(&t, &config, &gan, &spec, &schedule, 1).unwrap_err();
    assert!(matches!(abort.error, Error::Diverged { .. }), "{}", abort.error);
    let last = abort.last_good.expect("checkpoint");
    assert!(last.model.online.net.all_finite());
}

#[test]
fn params_round_trip() {
    let (_, mut d) = disc(&[16, 16, 16, 16], 3);
    let mut p = d.params();
    p.factors[0].0[[0, 0]] = 0.25;
    p.head.bias[0] = -1.0;
    d.set_params(&p).unwrap();
    assert_eq!(d.params(), p);
    let mut wrong = p.clone();
    wrong.factors.pop();
    assert!(d.set_params(&wrong).is_err());
}

#[test]
fn fake_time_placement_changes_the_run() {
    let spec = MixtureSpec::three_mode();
    let schedule = Schedule::default_cosine();
    let t = teacher(&[16, 16, 16, 16], 9);
    let config = run_config(&schedule);
    let source = GanConfig {
        rank: 2,
        ..GanConfig::default()
    };
    let zero = GanConfig {
        fake_time: FakeTime::Zero,
        ..source
    };
    let (a, _) = train_scott_full(&t, &config, &source, &spec, &schedule, 2).unwrap();
    let (b, _) = train_scott_full(&t, &config, &zero, &spec, &schedule, 2).unwrap();
    assert_ne!(a.model.online, b.model.online);
}
