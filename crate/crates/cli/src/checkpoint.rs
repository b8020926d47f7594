//! Versioned plain-text checkpoints.
//!
//! ```text
//! scott-checkpoint 1
//! kind teacher
//! seed 1
//! config_hash 3f2a...
//! schedule cosine 64 0.002 1
//! meta layout.data_dim 1
//! tensor net.0.weight 64 6
//! <one matrix row per line>
//! end
//! ```
//!
//! Numbers use Rust's shortest round-trip formatting, so save -> load is
//! bit-exact and save -> load -> save is byte-identical.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use scott_core::adversarial::{Discriminator, LowRankAdapter};
use scott_core::diffusion::{InputLayout, Schedule, ScheduleKind, ScoreModel, TimeEmbedding};
use scott_core::distill::{ConsistencyHead, ConsistencyModel};
use scott_core::numerics::{Activation, Dense, MlpParams};

use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "scott-checkpoint";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Teacher,
    Student,
    Discriminator,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Teacher => "teacher",
            ModelKind::Student => "student",
            ModelKind::Discriminator => "discriminator",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "teacher" => Some(ModelKind::Teacher),
            "student" => Some(ModelKind::Student),
            "discriminator" => Some(ModelKind::Discriminator),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Schedule parameters sufficient to rebuild it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSummary {
    pub kind: String,
    pub grid: usize,
    pub tau: f64,
    pub t_max: f64,
}

impl ScheduleSummary {
    pub fn of(s: &Schedule) -> Self {
        Self {
            kind: s.kind().name(),
            grid: s.len(),
            tau: s.tau(),
            t_max: s.t_max(),
        }
    }

    pub fn build(&self) -> CliResult<Schedule> {
        let kind = ScheduleKind::parse(&self.kind)
            .ok_or_else(|| CliError::Config(format!("checkpoint schedule kind `{}` is unknown", self.kind)))?;
        Ok(Schedule::new(kind, self.grid, self.tau, self.t_max)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: ModelKind,
    pub seed: u64,
    pub config_hash: String,
    pub schedule: ScheduleSummary,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<Tensor>,
}

fn bad(offset: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("corrupt checkpoint at byte {offset}: {msg}"))
}

/// Lines with the byte offset at which each starts.
struct Lines<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> CliResult<(usize, &'a str)> {
        if self.pos >= self.text.len() {
            return Err(bad(self.pos, format!("unexpected end of file, expected {what}")));
        }
        let start = self.pos;
        let rest = &self.text[start..];
        let end = rest.find('\n').map_or(rest.len(), |i| i + 1);
        self.pos += end;
        Ok((start, rest[..end].trim_end_matches('\n')))
    }

    fn keyed(&mut self, key: &str) -> CliResult<(usize, &'a str)> {
        let (at, line) = self.next(key)?;
        let value = line
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| bad(at, format!("expected `{key} ...`, got `{line}`")))?;
        Ok((at, value))
    }
}

fn num<T: std::str::FromStr>(at: usize, s: &str, what: &str) -> CliResult<T> {
    s.parse().map_err(|_| bad(at, format!("invalid {what} `{s}`")))
}

impl Checkpoint {
    pub fn new(kind: ModelKind, seed: u64, config_hash: &str, schedule: &Schedule) -> Self {
        Self {
            version: FORMAT_VERSION,
            kind,
            seed,
            config_hash: config_hash.to_string(),
            schedule: ScheduleSummary::of(schedule),
            meta: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let s = &self.schedule;
        writeln!(out, "{MAGIC} {}", self.version).unwrap();
        writeln!(out, "kind {}", self.kind.name()).unwrap();
        writeln!(out, "seed {}", self.seed).unwrap();
        writeln!(out, "config_hash {}", self.config_hash).unwrap();
        writeln!(out, "schedule {} {} {} {}", s.kind, s.grid, s.tau, s.t_max).unwrap();
        for (k, v) in &self.meta {
            writeln!(out, "meta {k} {v}").unwrap();
        }
        for t in &self.tensors {
            writeln!(out, "tensor {} {} {}", t.name, t.rows, t.cols).unwrap();
            for row in t.data.chunks(t.cols.max(1)) {
                let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                writeln!(out, "{}", line.join(" ")).unwrap();
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let mut lines = Lines { text, pos: 0 };
        let (at, version) = lines.keyed(MAGIC)?;
        let version: u32 = num(at, version, "format version")?;
        if version != FORMAT_VERSION {
            return Err(CliError::Config(format!(
                "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let (at, kind) = lines.keyed("kind")?;
        let kind = ModelKind::parse(kind).ok_or_else(|| bad(at, format!("unknown model kind `{kind}`")))?;
        let (at, seed) = lines.keyed("seed")?;
        let seed = num(at, seed, "seed")?;
        let (_, hash) = lines.keyed("config_hash")?;
        let (at, sched) = lines.keyed("schedule")?;
        let parts: Vec<&str> = sched.split(' ').collect();
        if parts.len() != 4 {
            return Err(bad(at, "schedule needs kind, grid, tau and t_max"));
        }
        let schedule = ScheduleSummary {
            kind: parts[0].to_string(),
            grid: num(at, parts[1], "grid size")?,
            tau: num(at, parts[2], "tau")?,
            t_max: num(at, parts[3], "t_max")?,
        };
        let mut ckpt = Checkpoint {
            version,
            kind,
            seed,
            config_hash: hash.to_string(),
            schedule,
            meta: Vec::new(),
            tensors: Vec::new(),
        };
        loop {
            let (at, line) = lines.next("`meta`, `tensor` or `end`")?;
            if line == "end" {
                if lines.pos != text.len() {
                    return Err(bad(lines.pos, "trailing data after `end`"));
                }
                return Ok(ckpt);
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').ok_or_else(|| bad(at, "meta needs a key and a value"))?;
                ckpt.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 3 {
                    return Err(bad(at, "tensor needs a name, rows and cols"));
                }
                let (rows, cols): (usize, usize) = (num(at, parts[1], "row count")?, num(at, parts[2], "column count")?);
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let (at, row) = lines.next("a tensor row")?;
                    let values: Vec<f64> = if cols == 0 {
                        Vec::new()
                    } else {
                        row.split(' ').map(|v| num(at, v, "number")).collect::<CliResult<_>>()?
                    };
                    if values.len() != cols {
                        return Err(bad(at, format!("expected {cols} values, got {}", values.len())));
                    }
                    data.extend(values);
                }
                ckpt.tensors.push(Tensor {
                    name: parts[0].to_string(),
                    rows,
                    cols,
                    data,
                });
            } else {
                return Err(bad(at, format!("unexpected line `{line}`")));
            }
        }
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_text()).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
    }

    /// Reads a checkpoint; a missing file is a dependency error.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(CliError::Dependency(format!("checkpoint {} does not exist", path.display())))
            }
            Err(e) => return Err(CliError::Io(format!("cannot read {}: {e}", path.display()))),
        };
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
    }

    /// Loads and checks the kind and the hash of the config that must have
    /// produced the file.
    pub fn load_expecting(path: &Path, kind: ModelKind, config_hash: &str) -> CliResult<Self> {
        let c = Self::load(path)?;
        if c.kind != kind {
            return Err(CliError::Dependency(format!(
                "{} holds a {}, expected a {}",
                path.display(),
                c.kind.name(),
                kind.name()
            )));
        }
        if c.config_hash != config_hash {
            return Err(CliError::Dependency(format!(
                "{} was produced under a different config (hash {} != {}); rerun the producing command",
                path.display(),
                c.config_hash,
                config_hash
            )));
        }
        Ok(c)
    }

    pub fn meta(&self, key: &str) -> CliResult<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| CliError::Config(format!("checkpoint lacks meta `{key}`")))
    }

    fn meta_num<T: std::str::FromStr>(&self, key: &str) -> CliResult<T> {
        let v = self.meta(key)?;
        v.parse()
            .map_err(|_| CliError::Config(format!("checkpoint meta `{key}` is invalid: `{v}`")))
    }

    fn push_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    fn push_matrix(&mut self, name: String, m: &Array2<f64>) {
        self.tensors.push(Tensor {
            name,
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.iter().copied().collect(),
        });
    }

    fn push_dense(&mut self, prefix: &str, d: &Dense) {
        self.push_matrix(format!("{prefix}.weight"), &d.weight);
        self.tensors.push(Tensor {
            name: format!("{prefix}.bias"),
            rows: 1,
            cols: d.bias.len(),
            data: d.bias.to_vec(),
        });
    }

    fn tensor(&self, name: &str) -> CliResult<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CliError::Config(format!("checkpoint lacks tensor `{name}`")))
    }

    fn matrix(&self, name: &str) -> CliResult<Array2<f64>> {
        let t = self.tensor(name)?;
        Ok(Array2::from_shape_vec((t.rows, t.cols), t.data.clone()).expect("rows x cols"))
    }

    fn dense(&self, prefix: &str) -> CliResult<Dense> {
        let weight = self.matrix(&format!("{prefix}.weight"))?;
        let bias = Array1::from(self.tensor(&format!("{prefix}.bias"))?.data.clone());
        if bias.len() != weight.nrows() {
            return Err(CliError::Config(format!("`{prefix}` bias and weight disagree")));
        }
        Ok(Dense { weight, bias })
    }

    fn push_layout(&mut self, layout: &InputLayout, activation: Activation) {
        self.push_meta("layout.data_dim", layout.data_dim);
        self.push_meta("layout.time", layout.time.name());
        self.push_meta("layout.n_classes", layout.n_classes);
        self.push_meta("layout.t_max", format!("{:?}", layout.t_max));
        self.push_meta("activation", activation.name());
    }

    fn layout(&self) -> CliResult<(InputLayout, Activation)> {
        let time = self.meta("layout.time")?;
        let layout = InputLayout {
            data_dim: self.meta_num("layout.data_dim")?,
            time: TimeEmbedding::parse(time)
                .ok_or_else(|| CliError::Config(format!("checkpoint time embedding `{time}` is unknown")))?,
            n_classes: self.meta_num("layout.n_classes")?,
            t_max: self.meta_num("layout.t_max")?,
        };
        let act = self.meta("activation")?;
        let activation =
            Activation::from_name(act).ok_or_else(|| CliError::Config(format!("checkpoint activation `{act}` is unknown")))?;
        Ok((layout, activation))
    }

    fn push_net(&mut self, prefix: &str, net: &MlpParams) {
        for (i, l) in net.layers.iter().enumerate() {
            self.push_dense(&format!("{prefix}.{i}"), l);
        }
    }

    fn net(&self, prefix: &str, layers: usize, activation: Activation) -> CliResult<MlpParams> {
        let layers = (0..layers)
            .map(|i| self.dense(&format!("{prefix}.{i}")))
            .collect::<CliResult<Vec<_>>>()?;
        Ok(MlpParams::from_layers(layers, activation)?)
    }

    fn layer_sizes_meta(net: &MlpParams) -> String {
        net.layer_sizes().iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }

    fn layer_count(&self) -> CliResult<usize> {
        let sizes = self.meta("layers")?;
        Ok(sizes.split(',').count().saturating_sub(1))
    }

    pub fn from_teacher(model: &ScoreModel, seed: u64, config_hash: &str, schedule: &Schedule) -> Self {
        let mut c = Self::new(ModelKind::Teacher, seed, config_hash, schedule);
        c.push_layout(&model.layout, model.net.activation);
        c.push_meta("layers", Self::layer_sizes_meta(&model.net));
        c.push_net("net", &model.net);
        c
    }

    pub fn to_teacher(&self) -> CliResult<ScoreModel> {
        self.expect_kind(ModelKind::Teacher)?;
        let (layout, act) = self.layout()?;
        let net = self.net("net", self.layer_count()?, act)?;
        self.check_sizes(&net)?;
        Ok(ScoreModel::from_parts(layout, net)?)
    }

    pub fn from_student(
        model: &ConsistencyModel,
        teacher_fingerprint: &str,
        iterations_done: usize,
        seed: u64,
        config_hash: &str,
        schedule: &Schedule,
    ) -> Self {
        let mut c = Self::new(ModelKind::Student, seed, config_hash, schedule);
        c.push_layout(&model.online.layout, model.online.net.activation);
        c.push_meta("layers", Self::layer_sizes_meta(&model.online.net));
        c.push_meta("head.tau", format!("{:?}", model.head.tau));
        c.push_meta("head.sigma_data", format!("{:?}", model.head.sigma_data));
        c.push_meta("ema_rate", format!("{:?}", model.ema_rate));
        c.push_meta("iterations_done", iterations_done);
        c.push_meta("teacher_fingerprint", teacher_fingerprint);
        c.push_net("online", &model.online.net);
        c.push_net("target", &model.target.net);
        c
    }

    pub fn to_student(&self) -> CliResult<ConsistencyModel> {
        self.expect_kind(ModelKind::Student)?;
        let (layout, act) = self.layout()?;
        let n = self.layer_count()?;
        let online = ScoreModel::from_parts(layout, self.net("online", n, act)?)?;
        let target = ScoreModel::from_parts(layout, self.net("target", n, act)?)?;
        self.check_sizes(&online.net)?;
        let head = ConsistencyHead::new(self.meta_num("head.tau")?, self.meta_num("head.sigma_data")?)?;
        let mut model = ConsistencyModel::new(online, head, self.meta_num("ema_rate")?)?;
        model.target = target;
        Ok(model)
    }

    pub fn from_discriminator(d: &Discriminator, seed: u64, config_hash: &str, schedule: &Schedule) -> Self {
        let mut c = Self::new(ModelKind::Discriminator, seed, config_hash, schedule);
        c.push_layout(&d.layout, d.activation);
        c.push_meta("encoder_layers", d.encoder.len());
        c.push_meta("decoder_layers", d.decoder.len());
        for (i, l) in d.encoder.iter().enumerate() {
            c.push_dense(&format!("encoder.{i}"), l);
        }
        for (i, ad) in d.decoder.iter().enumerate() {
            c.push_meta(&format!("decoder.{i}.scale"), format!("{:?}", ad.scale));
            c.push_dense(&format!("decoder.{i}.base"), &ad.base);
            c.push_matrix(format!("decoder.{i}.a"), &ad.a);
            c.push_matrix(format!("decoder.{i}.b"), &ad.b);
        }
        c.push_dense("head", &d.head);
        c
    }

    pub fn to_discriminator(&self) -> CliResult<Discriminator> {
        self.expect_kind(ModelKind::Discriminator)?;
        let (layout, activation) = self.layout()?;
        let encoder = (0..self.meta_num::<usize>("encoder_layers")?)
            .map(|i| self.dense(&format!("encoder.{i}")))
            .collect::<CliResult<Vec<_>>>()?;
        let decoder = (0..self.meta_num::<usize>("decoder_layers")?)
            .map(|i| {
                Ok(LowRankAdapter {
                    base: self.dense(&format!("decoder.{i}.base"))?,
                    a: self.matrix(&format!("decoder.{i}.a"))?,
                    b: self.matrix(&format!("decoder.{i}.b"))?,
                    scale: self.meta_num(&format!("decoder.{i}.scale"))?,
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        Ok(Discriminator {
            layout,
            activation,
            encoder,
            decoder,
            head: self.dense("head")?,
        })
    }

    fn expect_kind(&self, kind: ModelKind) -> CliResult<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(CliError::Dependency(format!(
                "checkpoint holds a {}, expected a {}",
                self.kind.name(),
                kind.name()
            )))
        }
    }

    fn check_sizes(&self, net: &MlpParams) -> CliResult<()> {
        if self.meta("layers")? != Self::layer_sizes_meta(net) {
            return Err(CliError::Config("checkpoint layer sizes disagree with its tensors".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use scott_core::diffusion::{MixtureSpec, TeacherConfig};
    use scott_core::numerics::{streams, RngStream};

    fn teacher() -> (ScoreModel, Schedule) {
        let schedule = Schedule::default_cosine();
        let layout = TeacherConfig::default().layout(&MixtureSpec::three_mode(), &schedule);
        let m = ScoreModel::new(layout, &[5, 4], Activation::Tanh, &mut RngStream::new(3, streams::INIT)).unwrap();
        (m, schedule)
    }

    #[test]
    fn teacher_round_trip_is_bit_exact_and_idempotent() {
        let (m, s) = teacher();
        let c = Checkpoint::from_teacher(&m, 3, "abc", &s);
        let text = c.to_text();
        let back = Checkpoint::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_teacher().unwrap(), m);
        assert_eq!(back.to_text(), text);
        assert_eq!(back.schedule.build().unwrap(), s);
    }

    #[test]
    fn student_and_discriminator_round_trip() {
        let (m, s) = teacher();
        let mut student = ConsistencyModel::new(m.clone(), ConsistencyHead::for_schedule(&s), 0.95).unwrap();
        student.target.net.layers[0].bias[0] = 0.1 + 0.2;
        let c = Checkpoint::from_student(&student, "f00", 12, 4, "h", &s);
        let back = Checkpoint::parse(&c.to_text()).unwrap();
        assert_eq!(back.to_student().unwrap(), student);
        assert_eq!(back.meta("iterations_done").unwrap(), "12");

        let d = Discriminator::from_teacher(&m, 2, 1.0, &mut RngStream::new(1, streams::DISCRIMINATOR)).unwrap();
        let c = Checkpoint::from_discriminator(&d, 4, "h", &s);
        assert_eq!(Checkpoint::parse(&c.to_text()).unwrap().to_discriminator().unwrap(), d);
        assert!(c.to_teacher().is_err());
    }

    #[test]
    fn truncated_and_corrupt_files_report_offsets() {
        let (m, s) = teacher();
        let text = Checkpoint::from_teacher(&m, 3, "abc", &s).to_text();
        for cut in [0, 10, text.len() / 2, text.len() - 4] {
            let e = Checkpoint::parse(&text[..cut]).unwrap_err();
            assert!(e.message().contains("byte"), "{e}");
        }
        let garbled = text.replacen("tensor net.0.bias", "tensor net.0.bias x", 1);
        assert!(Checkpoint::parse(&garbled).is_err());
        let nan_row = text.replacen("kind teacher", "kind critic", 1);
        assert!(Checkpoint::parse(&nan_row).unwrap_err().message().contains("byte 19"));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let (m, s) = teacher();
        let text = Checkpoint::from_teacher(&m, 3, "abc", &s)
            .to_text()
            .replacen("scott-checkpoint 1", "scott-checkpoint 2", 1);
        let e = Checkpoint::parse(&text).unwrap_err();
        assert!(e.message().contains("version 2"), "{e}");
    }

    #[test]
    fn dependency_checks() {
        let (m, s) = teacher();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        assert_eq!(Checkpoint::load(&path).unwrap_err().exit_code(), 3);
        Checkpoint::from_teacher(&m, 3, "abc", &s).save(&path).unwrap();
        Checkpoint::load_expecting(&path, ModelKind::Teacher, "abc").unwrap();
        assert_eq!(
            Checkpoint::load_expecting(&path, ModelKind::Teacher, "abd")
                .unwrap_err()
                .exit_code(),
            3
        );
        assert_eq!(
            Checkpoint::load_expecting(&path, ModelKind::Student, "abc")
                .unwrap_err()
                .exit_code(),
            3
        );
    }
}
