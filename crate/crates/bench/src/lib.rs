//! Shared fixtures for the benchmarks.

use skillmix::model::{Model, ModelConfig, ModelKind};
use skillmix::world::{generate_synthetic_benchmark, TaskKind, TaskSpec, SyntheticWorld, WorldConfig};

/// The default planted world for `seed`.
pub fn world(seed: u64) -> (SyntheticWorld, Vec<TaskSpec>) {
    let (w, train, _) = generate_synthetic_benchmark(seed, &WorldConfig::default()).expect("default world is valid");
    (w, train)
}

/// A freshly initialised model of `kind` over `tasks`.
pub fn model(kind: ModelKind, num_skills: usize, hidden_dim: usize, tasks: &[TaskSpec]) -> Model {
    let cfg = ModelConfig { kind, num_skills, hidden_dim, ..ModelConfig::default() };
    let names: Vec<String> = tasks.iter().map(|t| t.id.clone()).collect();
    let input_dim = tasks[0].input_dim();
    Model::new(&cfg, input_dim, &names, TaskKind::Regression, None, 0).expect("valid model config")
}
