//! Config ingestion, end-to-end runs and their on-disk records.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::allocation::{allocation_metrics, AllocationMetrics};
use crate::baselines::ExpertTable;
use crate::error::{Error, Result};
use crate::hierarchy::export_hierarchy;
use crate::model::{Model, ModelConfig, ModelKind};
use crate::optim::ParamRole;
use crate::recovery::{skill_recovery_score, RecoveryScore};
use crate::skills::write_checkpoint;
use crate::train::{
    evaluate, few_shot_adapt, mean_dev_loss, multitask_train, parameter_values, AdaptConfig, EvalRecord,
    History, StepRecord, TrainConfig,
};
use crate::world::{generate_synthetic_benchmark, shared_oracle_loss, TaskKind, TaskSpec, WorldConfig};

pub const DEFAULT_SKILL_GRID: [usize; 5] = [2, 4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub grid: Vec<usize>,
    /// Concurrent runs; 0 uses one per core.
    pub parallelism: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            grid: DEFAULT_SKILL_GRID.to_vec(),
            parallelism: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Every random draw in a run derives from this value.
    pub seed: u64,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub sweep: SweepConfig,
    /// Root under which run directories are created.
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            sweep: SweepConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be positive and finite, got {v}")))
    }
}

fn nonzero(key: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::config(key, "must be positive"))
    } else {
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.world;
        nonzero("world.num_tasks", w.num_tasks)?;
        nonzero("world.num_true_skills", w.num_true_skills)?;
        nonzero("world.input_dim", w.input_dim)?;
        nonzero("world.examples_per_task", w.examples_per_task)?;
        nonzero("world.dev_per_task", w.dev_per_task)?;
        nonzero("world.eval_per_task", w.eval_per_task)?;
        if !(w.noise_sigma >= 0.0) || !w.noise_sigma.is_finite() {
            return Err(Error::config("world.noise_sigma", format!("must be non-negative, got {}", w.noise_sigma)));
        }
        w.validate().map_err(|e| Error::config("world", e.to_string()))?;

        let m = &self.model;
        nonzero("model.num_skills", m.num_skills)?;
        if let Some(t) = &m.expert_table {
            if m.kind == ModelKind::Expert && t.num_skills != m.num_skills {
                return Err(Error::config(
                    "model.num_skills",
                    format!("expert table declares {} skills, config {}", t.num_skills, m.num_skills),
                ));
            }
        }
        match m.parameterisation {
            crate::model::Parameterisation::Sparse { sparsity, .. } => {
                if !(0.0..1.0).contains(&sparsity) {
                    return Err(Error::config(
                        "model.parameterisation.sparsity",
                        format!("must lie in [0, 1), got {sparsity}"),
                    ));
                }
            }
            crate::model::Parameterisation::LowRank { rank } => nonzero("model.parameterisation.rank", rank)?,
            crate::model::Parameterisation::Dense {} => {}
        }

        let t = &self.train;
        nonzero("train.batch_size", t.batch_size)?;
        positive("train.lr_z", t.lr_z)?;
        positive("train.lr_phi", t.lr_phi)?;
        positive("train.tau", t.tau)?;
        if let Some(tf) = t.tau_final {
            positive("train.tau_final", tf)?;
        }
        positive("train.ibp.alpha", t.ibp.alpha)?;
        if !(t.ibp.strength >= 0.0) || !t.ibp.strength.is_finite() {
            return Err(Error::config("train.ibp.strength", format!("must be non-negative, got {}", t.ibp.strength)));
        }
        positive("train.threshold_factor", t.threshold_factor)?;

        let a = &self.adapt;
        nonzero("adapt.batch_size", a.batch_size)?;
        a.validate().map_err(|e| Error::config("adapt.k_shot", e.to_string()))?;
        if a.k_shot > w.examples_per_task {
            return Err(Error::config(
                "adapt.k_shot",
                format!("exceeds world.examples_per_task ({})", w.examples_per_task),
            ));
        }
        self.validate_grid(&self.sweep.grid)
    }

    fn validate_grid(&self, grid: &[usize]) -> Result<()> {
        if grid.is_empty() {
            return Err(Error::config("sweep.grid", "must not be empty"));
        }
        if grid.contains(&0) {
            return Err(Error::config("sweep.grid", "skill counts must be positive"));
        }
        let mut sorted = grid.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != grid.len() {
            return Err(Error::config("sweep.grid", "contains duplicates"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the config without its output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn run_dir_name(&self) -> String {
        format!(
            "{}-S{}-seed{}-{}",
            self.model.kind,
            self.model.num_skills,
            self.seed,
            &self.hash()[..12]
        )
    }
}

fn unknown_field(msg: &str) -> Option<&str> {
    msg.strip_prefix("unknown field `")?.split('`').next()
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let msg = e.inner().to_string();
        let mut key = e.path().to_string();
        // internally tagged enums report the enclosing path only
        if let Some(field) = unknown_field(&msg) {
            if !key.ends_with(field) {
                key = if key == "." { field.to_string() } else { format!("{key}.{field}") };
            }
        }
        Error::config(key, msg)
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    parse_config_str(&text)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub loss: f64,
    pub mse: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub metrics: Option<AllocationMetrics>,
    pub recovery: Option<RecoveryScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotResult {
    pub task: String,
    /// Eval loss before and after adaptation, one entry per resample.
    pub pre_loss: Vec<f64>,
    pub post_loss: Vec<f64>,
    pub mean_post_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub allocation: usize,
    pub skill: usize,
    pub base: usize,
    pub embedding: usize,
    pub generator: usize,
}

/// Deterministic outcome of a run; identical configs give identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub status: RunStatus,
    pub config_hash: String,
    pub model_kind: ModelKind,
    pub num_skills: usize,
    pub seed: u64,
    pub total_steps: Option<usize>,
    pub selected_step: Option<usize>,
    pub shared_oracle_loss: Option<f64>,
    pub threshold: Option<f64>,
    pub steps_to_threshold: Option<usize>,
    pub mean_train_loss: Option<f64>,
    pub mean_dev_loss: Option<f64>,
    pub train_tasks: Vec<TaskResult>,
    pub layers: Vec<LayerSummary>,
    pub few_shot: Vec<FewShotResult>,
    pub mean_few_shot_loss: Option<f64>,
    pub parameters: ParamCounts,
}

impl Summary {
    fn new(cfg: &ExperimentConfig) -> Self {
        Summary {
            status: RunStatus::Ok,
            config_hash: cfg.hash(),
            model_kind: cfg.model.kind,
            num_skills: cfg.model.num_skills,
            seed: cfg.seed,
            total_steps: None,
            selected_step: None,
            shared_oracle_loss: None,
            threshold: None,
            steps_to_threshold: None,
            mean_train_loss: None,
            mean_dev_loss: None,
            train_tasks: Vec::new(),
            layers: Vec::new(),
            few_shot: Vec::new(),
            mean_few_shot_loss: None,
            parameters: ParamCounts::default(),
        }
    }

    /// Mean of a per-layer quantity over the layers that have it.
    pub fn layer_mean(&self, f: impl Fn(&LayerSummary) -> Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self.layers.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub status: RunStatus,
    pub stage: String,
    pub message: String,
}

/// Wall-clock per stage in milliseconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub world_ms: f64,
    pub train_ms: f64,
    pub evaluate_ms: f64,
    pub adapt_ms: f64,
    pub total_ms: f64,
}

/// One row of `history.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub task_id: String,
    pub loss: f64,
    pub reg_loss: f64,
    pub lr_z: f64,
    pub lr_phi: f64,
}

/// One row of `evals.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub summary: Summary,
    pub history: Vec<HistoryRow>,
    pub evals: Vec<EvalRow>,
    pub timing: Timing,
    pub artifacts: Vec<PathBuf>,
    pub failure: Option<Failure>,
}

pub const HISTORY_HEADER: [&str; 6] = ["step", "task_id", "loss", "reg_loss", "lr_z", "lr_phi"];
pub const EVALS_HEADER: [&str; 3] = ["step", "train_loss", "dev_loss"];

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
}

pub fn write_history_csv(rows: &[HistoryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HISTORY_HEADER)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.task_id.clone(),
            r.loss.to_string(),
            r.reg_loss.to_string(),
            r.lr_z.to_string(),
            r.lr_phi.to_string(),
        ])?;
    }
    finish_csv(w)
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::State(format!("bad `{name}` field in csv row {rec:?}")))
}

fn check_header(r: &mut csv::Reader<&[u8]>, want: &[&str]) -> Result<()> {
    let got = r.headers()?;
    if got.iter().ne(want.iter().copied()) {
        return Err(Error::State(format!("unexpected csv header {got:?}")));
    }
    Ok(())
}

pub fn read_history_csv(text: &str) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    check_header(&mut r, &HISTORY_HEADER)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(HistoryRow {
                step: parse_field(&rec, 0, "step")?,
                task_id: rec.get(1).unwrap_or_default().to_string(),
                loss: parse_field(&rec, 2, "loss")?,
                reg_loss: parse_field(&rec, 3, "reg_loss")?,
                lr_z: parse_field(&rec, 4, "lr_z")?,
                lr_phi: parse_field(&rec, 5, "lr_phi")?,
            })
        })
        .collect()
}

pub fn write_evals_csv(rows: &[EvalRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(EVALS_HEADER)?;
    for r in rows {
        w.write_record([r.step.to_string(), r.train_loss.to_string(), r.dev_loss.to_string()])?;
    }
    finish_csv(w)
}

pub fn read_evals_csv(text: &str) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    check_header(&mut r, &EVALS_HEADER)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(EvalRow {
                step: parse_field(&rec, 0, "step")?,
                train_loss: parse_field(&rec, 1, "train_loss")?,
                dev_loss: parse_field(&rec, 2, "dev_loss")?,
            })
        })
        .collect()
}

fn history_rows(h: &History, names: &[String]) -> Vec<HistoryRow> {
    h.steps
        .iter()
        .map(|r: &StepRecord| HistoryRow {
            step: r.step,
            task_id: names.get(r.task).cloned().unwrap_or_else(|| r.task.to_string()),
            loss: r.loss,
            reg_loss: r.reg_loss,
            lr_z: r.lr_z,
            lr_phi: r.lr_phi,
        })
        .collect()
}

fn eval_rows(h: &History) -> Vec<EvalRow> {
    h.evals
        .iter()
        .map(|e: &EvalRecord| EvalRow {
            step: e.step,
            train_loss: e.train_loss,
            dev_loss: e.dev_loss,
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Seed for resample `r` of held-out task `h`; distinct from every other
/// pair within a run.
fn adapt_seed(seed: u64, h: usize, r: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(((h as u64) << 20) | r as u64)
}

/// Writes into the run directory and remembers what was written.
struct Sink {
    dir: PathBuf,
    artifacts: Vec<PathBuf>,
}

impl Sink {
    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.dir.join(name);
        fs::write(&p, bytes)?;
        self.artifacts.push(p);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        self.write(name, s)
    }
}

struct Partial {
    summary: Summary,
    history: Vec<HistoryRow>,
    evals: Vec<EvalRow>,
    timing: Timing,
}

/// Expert runs without a table use the planted allocation for both the
/// training and held-out tasks.
fn default_expert_table(
    world: &crate::world::SyntheticWorld,
    train: &[TaskSpec],
    heldout: &[TaskSpec],
) -> Result<ExpertTable> {
    let z = world.true_z.stack(&world.heldout_z)?;
    let names: Vec<String> = train.iter().chain(heldout).map(|t| t.id.clone()).collect();
    ExpertTable::from_allocation(&z, &names)
}

fn stages(cfg: &ExperimentConfig, sink: &mut Sink, p: &mut Partial, stage: &mut &'static str) -> Result<()> {
    *stage = "world";
    let t0 = Instant::now();
    let (world, train, heldout) = generate_synthetic_benchmark(cfg.seed, &cfg.world)?;
    p.timing.world_ms = t0.elapsed().as_secs_f64() * 1e3;

    *stage = "model";
    let names: Vec<String> = train.iter().map(|t| t.id.clone()).collect();
    let table = match (cfg.model.kind, &cfg.model.expert_table) {
        (ModelKind::Expert, None) => Some(default_expert_table(&world, &train, &heldout)?),
        _ => None,
    };
    let model = Model::new(&cfg.model, cfg.world.input_dim, &names, cfg.world.task_kind, table, cfg.seed)?;
    p.summary.num_skills = model.num_skills;

    *stage = "train";
    let t0 = Instant::now();
    let total = cfg.train.total_steps(&train);
    p.summary.total_steps = Some(total);
    let trained = multitask_train(model, &train, &cfg.train, cfg.seed)?;
    p.timing.train_ms = t0.elapsed().as_secs_f64() * 1e3;
    let model = trained.model;
    p.history = history_rows(&trained.history, &model.task_names);
    p.evals = eval_rows(&trained.history);
    p.summary.selected_step = trained.history.selected_step;
    sink.write("history.csv", write_history_csv(&p.history)?)?;
    sink.write("evals.csv", write_evals_csv(&p.evals)?)?;

    *stage = "evaluate";
    let t0 = Instant::now();
    if cfg.world.task_kind == TaskKind::Regression {
        let floor = shared_oracle_loss(&train)?;
        let threshold = cfg.train.threshold_factor * floor;
        p.summary.shared_oracle_loss = Some(floor);
        p.summary.threshold = Some(threshold);
        p.summary.steps_to_threshold = trained.history.steps_to_threshold(threshold);
    }
    for task in &train {
        let m = evaluate(&model, task)?;
        p.summary.train_tasks.push(TaskResult {
            task: task.id.clone(),
            loss: m.loss,
            mse: m.mse,
            accuracy: m.accuracy,
        });
    }
    let losses: Vec<f64> = p.summary.train_tasks.iter().map(|r| r.loss).collect();
    p.summary.mean_train_loss = Some(mean(&losses));
    p.summary.mean_dev_loss = Some(mean_dev_loss(&model, &train)?);
    p.summary.parameters = ParamCounts {
        allocation: model.scalar_count(ParamRole::Allocation),
        skill: model.scalar_count(ParamRole::Skill),
        base: model.scalar_count(ParamRole::Base),
        embedding: model.scalar_count(ParamRole::Embedding),
        generator: model.scalar_count(ParamRole::Generator),
    };
    for l in 0..model.num_allocations() {
        let metrics = model.expected_allocation(l).and_then(|z| allocation_metrics(&z).ok());
        let recovery = match model.hardened_allocation(l) {
            Some(z) if z.num_skills() >= world.true_z.num_skills() => {
                Some(skill_recovery_score(&z, &world.true_z)?)
            }
            _ => None,
        };
        p.summary.layers.push(LayerSummary { layer: l, metrics, recovery });
        if let Some(file) = model.allocation_file(l)? {
            sink.json(&format!("allocation_layer_{l}.json"), &file)?;
            let z = file.hardened()?;
            sink.write(&format!("allocation_layer_{l}.csv"), z.to_csv())?;
            if l == 0 {
                let h = export_hierarchy(&z, &model.task_names)?;
                sink.json("hierarchy.json", &h.to_json())?;
                sink.write("hierarchy.txt", h.render_text())?;
            }
        }
    }
    let values = parameter_values(&model);
    let named: Vec<(&str, &crate::tensor::Tensor)> = values.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let extra = serde_json::json!({
        "model_kind": model.kind,
        "num_skills": model.num_skills,
        "tasks": model.task_names,
    });
    let ckpt = sink.dir.join("skills.bin");
    write_checkpoint(&ckpt, &named, extra)?;
    sink.artifacts.push(ckpt.clone());
    sink.artifacts.push(ckpt.with_extension("json"));
    p.timing.evaluate_ms = t0.elapsed().as_secs_f64() * 1e3;

    *stage = "adapt";
    let t0 = Instant::now();
    let resamples = cfg.adapt.resamples.max(1);
    let results: Vec<FewShotResult> = heldout
        .iter()
        .enumerate()
        .map(|(h, task)| {
            let mut pre = Vec::with_capacity(resamples);
            let mut post = Vec::with_capacity(resamples);
            for r in 0..resamples {
                let out = few_shot_adapt(&model, task, &cfg.adapt, &cfg.train, adapt_seed(cfg.seed, h, r))?;
                pre.push(out.pre.loss);
                post.push(out.post.loss);
            }
            Ok(FewShotResult {
                task: task.id.clone(),
                mean_post_loss: mean(&post),
                pre_loss: pre,
                post_loss: post,
            })
        })
        .collect::<Result<_>>()?;
    if !results.is_empty() {
        let m: Vec<f64> = results.iter().map(|r| r.mean_post_loss).collect();
        p.summary.mean_few_shot_loss = Some(mean(&m));
    }
    p.summary.few_shot = results;
    p.timing.adapt_ms = t0.elapsed().as_secs_f64() * 1e3;
    Ok(())
}

/// Runs one experiment into `<output_dir>/<run_dir_name>`, replacing any
/// previous contents.
///
/// Invalid configs and unwritable output are errors. A failure inside the
/// run itself still yields a record, with `failure` set and a
/// `failure.json` marker next to the partial outputs.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let dir = cfg.output_dir.join(cfg.run_dir_name());
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    let mut sink = Sink {
        dir: dir.clone(),
        artifacts: Vec::new(),
    };
    sink.json("config.json", cfg)?;

    let mut p = Partial {
        summary: Summary::new(cfg),
        history: Vec::new(),
        evals: Vec::new(),
        timing: Timing::default(),
    };
    let mut stage = "setup";
    let failure = match stages(cfg, &mut sink, &mut p, &mut stage) {
        Ok(()) => None,
        Err(e) => {
            p.summary.status = RunStatus::Failed;
            let f = Failure {
                status: RunStatus::Failed,
                stage: stage.to_string(),
                message: e.to_string(),
            };
            sink.json("failure.json", &f)?;
            Some(f)
        }
    };
    p.timing.total_ms = start.elapsed().as_secs_f64() * 1e3;
    sink.json("summary.json", &p.summary)?;
    sink.json("timing.json", &p.timing)?;
    Ok(RunRecord {
        dir,
        config: cfg.clone(),
        summary: p.summary,
        history: p.history,
        evals: p.evals,
        timing: p.timing,
        artifacts: sink.artifacts,
        failure,
    })
}

impl RunRecord {
    /// Reads a run back from its directory.
    pub fn load(dir: &Path) -> Result<RunRecord> {
        let config = parse_config(&dir.join("config.json"))?;
        let summary: Summary = serde_json::from_str(&fs::read_to_string(dir.join("summary.json"))?)?;
        let read_opt = |name: &str| -> Result<Option<String>> {
            let p = dir.join(name);
            if p.exists() {
                Ok(Some(fs::read_to_string(p)?))
            } else {
                Ok(None)
            }
        };
        let history = match read_opt("history.csv")? {
            Some(t) => read_history_csv(&t)?,
            None => Vec::new(),
        };
        let evals = match read_opt("evals.csv")? {
            Some(t) => read_evals_csv(&t)?,
            None => Vec::new(),
        };
        let timing = match read_opt("timing.json")? {
            Some(t) => serde_json::from_str(&t)?,
            None => Timing::default(),
        };
        let failure = match read_opt("failure.json")? {
            Some(t) => Some(serde_json::from_str(&t)?),
            None => None,
        };
        let mut artifacts: Vec<PathBuf> = fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        artifacts.sort();
        Ok(RunRecord {
            dir: dir.to_path_buf(),
            config,
            summary,
            history,
            evals,
            timing,
            artifacts,
            failure,
        })
    }
}

fn run_all(configs: Vec<ExperimentConfig>, parallelism: usize) -> Result<Vec<RunRecord>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::State(format!("thread pool: {e}")))?;
    pool.install(|| configs.par_iter().map(run_experiment).collect())
}

/// Output of a multi-run command: the runs plus the combined table.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutcome {
    pub records: Vec<RunRecord>,
    pub table: PathBuf,
}

/// One run per inventory size in `grid` (the config's grid when `None`),
/// plus `sweep_metrics.csv` over all of them.
pub fn sweep(cfg: &ExperimentConfig, grid: Option<&[usize]>) -> Result<BatchOutcome> {
    cfg.validate()?;
    let grid = grid.map(<[usize]>::to_vec).unwrap_or_else(|| cfg.sweep.grid.clone());
    cfg.validate_grid(&grid)?;
    let configs: Vec<ExperimentConfig> = grid
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.model.num_skills = s;
            c.sweep.grid = grid.clone();
            c
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let records = run_all(configs, cfg.sweep.parallelism)?;
    let dir = cfg.output_dir.join(format!("sweep-{}", &cfg.hash()[..12]));
    fs::create_dir_all(&dir)?;
    let table = dir.join("sweep_metrics.csv");
    fs::write(&table, crate::report::sweep_metrics_csv(&records)?)?;
    Ok(BatchOutcome { records, table })
}

/// The same world and protocol under each model kind, plus `comparison.csv`.
pub fn compare(cfg: &ExperimentConfig, kinds: &[ModelKind]) -> Result<BatchOutcome> {
    cfg.validate()?;
    if kinds.is_empty() {
        return Err(Error::config("kinds", "at least one model kind is required"));
    }
    let configs: Vec<ExperimentConfig> = kinds
        .iter()
        .map(|&k| {
            let mut c = cfg.clone();
            c.model.kind = k;
            if k != ModelKind::Expert {
                c.model.expert_table = None;
            }
            c
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let records = run_all(configs, cfg.sweep.parallelism)?;
    let dir = cfg.output_dir.join(format!("compare-{}", &cfg.hash()[..12]));
    fs::create_dir_all(&dir)?;
    let table = dir.join("comparison.csv");
    fs::write(&table, crate::report::comparison_csv(&records)?)?;
    Ok(BatchOutcome { records, table })
}
