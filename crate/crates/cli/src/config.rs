//! Flat `key = value` experiment configs with dotted section keys.
//!
//! Every key has a default, so an empty file is a valid config. Values are
//! kept as text in a sorted map; the typed [`ExperimentConfig`] is parsed
//! from it, and hashes of the map identify which artifacts a config
//! produces.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use scott_core::adversarial::{FakeTime, GanConfig, LossWeights};
use scott_core::diffusion::{CfgSetting, Component, MixtureSpec, Schedule, ScheduleKind, TeacherConfig, TimeEmbedding};
use scott_core::distill::{default_grid_skip, Distance, DistillConfig, StudentInit};
use scott_core::numerics::Activation;
use scott_core::sampling::TeacherLabels;
use scott_core::solvers::{DpmNoiseScale, SolverConfig, SolverFamily};

use crate::error::{CliError, CliResult};

/// Every accepted key with its default value.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "1"),
    ("output.dir", "runs/default"),
    ("data.spec", "three-mode"),
    ("schedule.kind", "cosine"),
    ("schedule.grid", "64"),
    ("schedule.tau", "0.002"),
    ("schedule.t_max", "1"),
    ("teacher.hidden", "64,64,64,64"),
    ("teacher.activation", "tanh"),
    ("teacher.time", "fourier:1"),
    ("teacher.conditional", "true"),
    ("teacher.label_dropout", "0.1"),
    ("teacher.iterations", "20000"),
    ("teacher.batch_size", "256"),
    ("teacher.learning_rate", "0.001"),
    ("teacher.cosine_decay", "false"),
    ("teacher.ema_rate", "0.999"),
    ("teacher.log_every", "500"),
    ("distill.grid_skip", "auto"),
    ("distill.solver", "ddim"),
    ("distill.eta", "0.2"),
    ("distill.substeps", "3"),
    ("distill.dpm_noise", "source"),
    ("distill.dpm_drift", "2"),
    ("distill.distance", "l1"),
    ("distill.iterations", "2000"),
    ("distill.batch_size", "256"),
    ("distill.learning_rate", "0.001"),
    ("distill.ema_rate", "0.95"),
    ("distill.teacher_omega", "0"),
    ("distill.init", "teacher"),
    ("distill.sigma_data", "0.5"),
    ("distill.log_every", "100"),
    ("gan.enabled", "false"),
    ("gan.lambda_adv", "0.4"),
    ("gan.rank", "4"),
    ("gan.adapter_scale", "1"),
    ("gan.lr_ratio", "2.5"),
    ("gan.fake_time", "source"),
    ("sample.count", "4096"),
    ("sample.steps", "1,2,4"),
    ("sample.seeds", "1"),
    ("sample.omega", "0"),
    ("sample.class", "none"),
    ("sample.teacher", "false"),
    ("sample.teacher_steps", "64"),
    ("sample.teacher_eta", "0"),
    ("sample.teacher_labels", "mixture"),
    ("sample.teacher_omega", "1"),
    ("sample.histogram_range", "-3:3"),
    ("eval.reference", "4096"),
    ("eval.k", "3"),
    ("bench.solver", "ddim"),
    ("bench.eta", "0.2"),
    ("bench.from", "48"),
    ("bench.to", "24"),
    ("bench.substeps", "1,2,3,4,6"),
    ("bench.trajectories", "10000"),
    ("order.solvers", "dpm-sde1,pf-euler"),
    ("order.steps", "8,16,32,64"),
    ("order.trajectories", "20000"),
];

/// Key prefixes that determine a teacher checkpoint.
const TEACHER_SECTIONS: &[&str] = &["seed", "data.", "schedule.", "teacher."];
/// Key prefixes that determine a student checkpoint.
const STUDENT_SECTIONS: &[&str] = &["seed", "data.", "schedule.", "teacher.", "distill.", "gan."];

/// Resolved key/value text, sorted by key.
#[derive(Debug, Clone, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl Default for RawConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RawConfig {
    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> CliResult<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected `key = value`, got `{line}`", i + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| CliError::Config(format!("{origin}:{}: {}", i + 1, e.message())))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> CliResult<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not `key=value`")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(CliError::Config(format!("unknown key `{key}`"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("every key has a default")
    }

    /// Canonical text, one `key = value` line per key; loading it back
    /// reproduces the config exactly.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").expect("string write");
        }
        out
    }

    fn hash_sections(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            if prefixes
                .iter()
                .any(|p| p.is_empty() || k == p || (p.ends_with('.') && k.starts_with(p)))
            {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn hash(&self) -> String {
        self.hash_sections(&[""])
    }

    pub fn teacher_hash(&self) -> String {
        self.hash_sections(TEACHER_SECTIONS)
    }

    pub fn student_hash(&self) -> String {
        self.hash_sections(STUDENT_SECTIONS)
    }

    fn parse<T: FromStr>(&self, key: &str, what: &str) -> CliResult<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| CliError::Config(format!("key `{key}`: expected {what}, got `{v}`")))
    }

    fn bool(&self, key: &str) -> CliResult<bool> {
        self.parse(key, "true or false")
    }

    fn usize(&self, key: &str) -> CliResult<usize> {
        self.parse(key, "a non-negative integer")
    }

    fn f64(&self, key: &str) -> CliResult<f64> {
        let x: f64 = self.parse(key, "a number")?;
        if !x.is_finite() {
            return Err(CliError::Config(format!("key `{key}`: value must be finite")));
        }
        Ok(x)
    }

    fn list<T: FromStr>(&self, key: &str, what: &str) -> CliResult<Vec<T>> {
        let v = self.get(key);
        let items: Result<Vec<T>, _> = v.split(',').map(|s| s.trim().parse()).collect();
        match items {
            Ok(items) if !items.is_empty() => Ok(items),
            _ => Err(CliError::Config(format!(
                "key `{key}`: expected a comma-separated list of {what}, got `{v}`"
            ))),
        }
    }

    fn with<T>(&self, key: &str, what: &str, parse: impl FnOnce(&str) -> Option<T>) -> CliResult<T> {
        let v = self.get(key);
        parse(v).ok_or_else(|| CliError::Config(format!("key `{key}`: expected {what}, got `{v}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub count: usize,
    pub steps: Vec<usize>,
    pub seeds: Vec<u64>,
    pub setting: CfgSetting,
    pub teacher: bool,
    pub teacher_steps: usize,
    pub teacher_solver: SolverConfig,
    pub teacher_labels: TeacherLabels,
    pub teacher_omega: f64,
    pub histogram_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub reference: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub solver: SolverConfig,
    pub from: usize,
    pub to: usize,
    pub substeps: Vec<usize>,
    pub trajectories: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderConfig {
    pub solvers: Vec<SolverConfig>,
    pub steps: Vec<usize>,
    pub trajectories: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub raw: RawConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub spec: MixtureSpec,
    pub schedule: Schedule,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub gan: Option<GanConfig>,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub order: OrderConfig,
}

/// `three-mode`, `gaussian:MEAN:STD` or `ring:MODES:RADIUS:STD`.
pub fn parse_spec(s: &str) -> Option<MixtureSpec> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        ["three-mode"] => Some(MixtureSpec::three_mode()),
        ["gaussian", m, sd] => MixtureSpec::single_gaussian(m.parse().ok()?, sd.parse().ok()?).ok(),
        ["ring", n, r, sd] => MixtureSpec::ring_2d(n.parse().ok()?, r.parse().ok()?, sd.parse().ok()?).ok(),
        ["mixture", rest @ ..] if !rest.is_empty() => {
            // mixture:MEAN/STD/WEIGHT:... (1-D components)
            let components = rest
                .iter()
                .map(|c| {
                    let f: Vec<f64> = c.split('/').map(|x| x.parse().ok()).collect::<Option<_>>()?;
                    match f.as_slice() {
                        [m, sd, w] => Some(Component {
                            mean: vec![*m],
                            std: *sd,
                            weight: *w,
                        }),
                        _ => None,
                    }
                })
                .collect::<Option<Vec<_>>>()?;
            MixtureSpec::new(components).ok()
        }
        _ => None,
    }
}

fn solver(family: SolverFamily, eta: f64) -> SolverConfig {
    match family {
        SolverFamily::Ddim => SolverConfig::ddim(eta),
        SolverFamily::PfEuler => SolverConfig::pf_euler(),
        SolverFamily::DpmSde1 => SolverConfig::dpm_sde1(),
    }
}

fn check(cond: bool, key: &str, msg: &str) -> CliResult<()> {
    if cond {
        Ok(())
    } else {
        Err(CliError::Config(format!("key `{key}`: {msg}")))
    }
}

impl ExperimentConfig {
    /// File values (if any), then `--set` overrides, then the dedicated
    /// seed and output flags.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>, out: Option<&Path>) -> CliResult<Self> {
        let mut raw = RawConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            raw.apply_text(&text, &path.display().to_string())?;
        }
        for o in overrides {
            raw.apply_override(o)?;
        }
        if let Some(seed) = seed {
            raw.set("seed", &seed.to_string())?;
        }
        if let Some(out) = out {
            raw.set("output.dir", &out.display().to_string())?;
        }
        Self::from_raw(raw)
    }

    pub fn from_raw(raw: RawConfig) -> CliResult<Self> {
        let seed: u64 = raw.parse("seed", "a non-negative integer")?;
        let spec = raw.with(
            "data.spec",
            "three-mode, gaussian:M:S, ring:N:R:S or mixture:M/S/W:...",
            parse_spec,
        )?;

        let kind = raw.with("schedule.kind", "a schedule name", ScheduleKind::parse)?;
        let grid = raw.usize("schedule.grid")?;
        let schedule = Schedule::new(kind, grid, raw.f64("schedule.tau")?, raw.f64("schedule.t_max")?)
            .map_err(|e| CliError::Config(format!("schedule: {e}")))?;

        let teacher = TeacherConfig {
            hidden: raw.list("teacher.hidden", "widths")?,
            activation: raw.with("teacher.activation", "tanh or identity", Activation::from_name)?,
            time_embedding: raw.with("teacher.time", "scalar or fourier:N", TimeEmbedding::parse)?,
            conditional: raw.bool("teacher.conditional")?,
            label_dropout: raw.f64("teacher.label_dropout")?,
            iterations: raw.usize("teacher.iterations")?,
            batch_size: raw.usize("teacher.batch_size")?,
            learning_rate: raw.f64("teacher.learning_rate")?,
            cosine_decay: raw.bool("teacher.cosine_decay")?,
            ema_rate: raw.f64("teacher.ema_rate")?,
            log_every: raw.usize("teacher.log_every")?,
        };
        teacher.validate().map_err(|e| CliError::Config(format!("teacher: {e}")))?;
        check(teacher.log_every > 0, "teacher.log_every", "must be positive")?;
        check(
            teacher.ema_rate > 0.0 && teacher.ema_rate <= 1.0,
            "teacher.ema_rate",
            "must lie in (0, 1]",
        )?;

        let family = raw.with("distill.solver", "ddim, pf-euler or dpm-sde1", SolverFamily::parse)?;
        let mut teacher_solver = solver(family, raw.f64("distill.eta")?).with_substeps(raw.usize("distill.substeps")?);
        teacher_solver.dpm_noise_scale = raw.with("distill.dpm_noise", "source or target", DpmNoiseScale::parse)?;
        teacher_solver.dpm_drift_factor = raw.f64("distill.dpm_drift")?;
        let grid_skip = match raw.get("distill.grid_skip") {
            "auto" => default_grid_skip(grid),
            _ => raw.usize("distill.grid_skip")?,
        };
        let distill = DistillConfig {
            grid_skip,
            solver: teacher_solver,
            distance: raw.with("distill.distance", "l1 or squared-l2", Distance::parse)?,
            iterations: raw.usize("distill.iterations")?,
            batch_size: raw.usize("distill.batch_size")?,
            learning_rate: raw.f64("distill.learning_rate")?,
            ema_rate: raw.f64("distill.ema_rate")?,
            teacher_omega: raw.f64("distill.teacher_omega")?,
            init: raw.with("distill.init", "teacher or random", StudentInit::parse)?,
            sigma_data: raw.f64("distill.sigma_data")?,
            log_every: raw.usize("distill.log_every")?,
        };
        distill
            .validate(grid)
            .map_err(|e| CliError::Config(format!("distill: {e}")))?;

        // Validated even when disabled so a bad value never lies dormant.
        let g = GanConfig {
            weights: LossWeights {
                lambda_adv: raw.f64("gan.lambda_adv")?,
            },
            rank: raw.usize("gan.rank")?,
            adapter_scale: raw.f64("gan.adapter_scale")?,
            lr_ratio: raw.f64("gan.lr_ratio")?,
            fake_time: raw.with("gan.fake_time", "source or zero", FakeTime::parse)?,
        };
        g.validate().map_err(|e| CliError::Config(format!("gan: {e}")))?;
        let gan = if raw.bool("gan.enabled")? {
            check(
                teacher.conditional,
                "gan.enabled",
                "the discriminator needs a conditional teacher",
            )?;
            Some(g)
        } else {
            None
        };

        let class = match raw.get("sample.class") {
            "none" => None,
            _ => Some(raw.usize("sample.class")?),
        };
        let range = raw.with("sample.histogram_range", "LO:HI", |s| {
            let (lo, hi) = s.split_once(':')?;
            let (lo, hi): (f64, f64) = (lo.parse().ok()?, hi.parse().ok()?);
            (lo < hi && lo.is_finite() && hi.is_finite()).then_some((lo, hi))
        })?;
        let sample = SampleConfig {
            count: raw.usize("sample.count")?,
            steps: raw.list("sample.steps", "step counts")?,
            seeds: raw.list("sample.seeds", "seeds")?,
            setting: CfgSetting {
                omega: raw.f64("sample.omega")?,
                condition: class,
            },
            teacher: raw.bool("sample.teacher")?,
            teacher_steps: raw.usize("sample.teacher_steps")?,
            teacher_solver: SolverConfig::ddim(raw.f64("sample.teacher_eta")?),
            teacher_labels: raw.with("sample.teacher_labels", "null, mixture or class:N", TeacherLabels::parse)?,
            teacher_omega: raw.f64("sample.teacher_omega")?,
            histogram_range: range,
        };
        check(sample.count > 0, "sample.count", "must be positive")?;
        check(
            sample.steps.iter().all(|&k| k >= 1 && k <= grid),
            "sample.steps",
            "step counts must lie in [1, grid size]",
        )?;
        check(sample.teacher_steps >= 1, "sample.teacher_steps", "must be positive")?;
        sample
            .setting
            .validate()
            .map_err(|e| CliError::Config(format!("sample: {e}")))?;
        if let Some(c) = class {
            check(c < spec.n_components(), "sample.class", "class index out of range")?;
        }

        let eval = EvalConfig {
            reference: raw.usize("eval.reference")?,
            k: raw.usize("eval.k")?,
        };
        check(
            eval.reference > eval.k && eval.k >= 1,
            "eval.k",
            "need 1 <= k < eval.reference",
        )?;

        let bench_family = raw.with("bench.solver", "ddim, pf-euler or dpm-sde1", SolverFamily::parse)?;
        let bench = BenchConfig {
            solver: solver(bench_family, raw.f64("bench.eta")?),
            from: raw.usize("bench.from")?,
            to: raw.usize("bench.to")?,
            substeps: raw.list("bench.substeps", "sub-step counts")?,
            trajectories: raw.usize("bench.trajectories")?,
        };
        check(
            bench.to < bench.from && bench.from < grid,
            "bench.from",
            "need bench.to < bench.from < grid size",
        )?;
        check(bench.substeps.iter().all(|&h| h >= 1), "bench.substeps", "must be positive")?;

        let order = OrderConfig {
            solvers: raw
                .list::<String>("order.solvers", "solver names")?
                .iter()
                .map(|s| {
                    SolverFamily::parse(s)
                        .map(|f| solver(f, 0.0))
                        .ok_or_else(|| CliError::Config(format!("key `order.solvers`: unknown solver `{s}`")))
                })
                .collect::<CliResult<_>>()?,
            steps: raw.list("order.steps", "step counts")?,
            trajectories: raw.usize("order.trajectories")?,
        };
        check(
            order.steps.len() >= 3 && order.steps.iter().all(|&k| k >= 4),
            "order.steps",
            "need at least three counts, each >= 4",
        )?;

        Ok(Self {
            seed,
            out_dir: PathBuf::from(raw.get("output.dir")),
            spec,
            schedule,
            teacher,
            distill,
            gan,
            sample,
            eval,
            bench,
            order,
            raw,
        })
    }
}
