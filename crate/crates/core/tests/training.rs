use skillmix::allocation::BinaryAllocation;
use skillmix::baselines::ExpertTable;
use skillmix::model::{Model, ModelConfig, ModelKind, Parameterisation};
use skillmix::train::{multitask_train, TrainConfig};
use skillmix::world::{generate_synthetic_benchmark, SyntheticWorld, TaskKind, TaskSpec, WorldConfig};

fn world(seed: u64) -> (SyntheticWorld, Vec<TaskSpec>, Vec<String>) {
    let cfg = WorldConfig {
        num_tasks: 8,
        num_true_skills: 3,
        input_dim: 6,
        examples_per_task: 48,
        num_heldout: 1,
        ..WorldConfig::default()
    };
    let (w, tasks, _) = generate_synthetic_benchmark(seed, &cfg).unwrap();
    let names = tasks.iter().map(|t| t.id.clone()).collect();
    (w, tasks, names)
}

fn build(kind: ModelKind, num_skills: usize, w: &SyntheticWorld, names: &[String]) -> Model {
    let cfg = ModelConfig { kind, num_skills, hidden_dim: 4, ..ModelConfig::default() };
    let table = (kind == ModelKind::Expert).then(|| ExpertTable::from_allocation(&w.true_z, names).unwrap());
    Model::new(&cfg, 6, names, TaskKind::Regression, table, 3).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn loss_decreases_for_every_kind() {
    let cfg = TrainConfig { steps: Some(600), lr_phi: 1e-2, eval_every: 0, select_by_dev: false, ..TrainConfig::default() };
    for seed in 0..3u64 {
        let (w, tasks, names) = world(seed);
        for kind in ModelKind::ALL {
            let out = multitask_train(build(kind, 3, &w, &names), &tasks, &cfg, seed).unwrap();
            let losses: Vec<f64> = out.history.steps.iter().map(|s| s.loss).collect();
            let tenth = losses.len() / 10;
            let early = median(losses[..tenth].to_vec());
            let late = median(losses[losses.len() - tenth..].to_vec());
            assert!(late < early, "{kind} seed {seed}: {early} -> {late}");
        }
    }
}

#[test]
fn sparse_skilled_also_learns() {
    let (_, tasks, names) = world(5);
    let cfg = ModelConfig {
        num_skills: 3,
        hidden_dim: 0,
        parameterisation: Parameterisation::Sparse { sparsity: 0.5, warmup_steps: 50 },
        ..ModelConfig::default()
    };
    let m = Model::new(&cfg, 6, &names, TaskKind::Regression, None, 0).unwrap();
    let tc = TrainConfig { steps: Some(400), lr_phi: 1e-2, eval_every: 100, ..TrainConfig::default() };
    let out = multitask_train(m, &tasks, &tc, 0).unwrap();
    assert!(out.model.masks_selected());
    let evals = &out.history.evals;
    assert!(evals.last().unwrap().train_loss < evals[0].train_loss);
}

#[test]
fn frozen_identity_trains_like_private() {
    let (w, tasks, names) = world(7);
    let t = names.len();
    let mut skilled = build(ModelKind::Skilled, t, &w, &names);
    skilled.freeze_allocation(BinaryAllocation::identity(t)).unwrap();
    let private = build(ModelKind::Private, t, &w, &names);
    let cfg = TrainConfig { steps: Some(150), eval_every: 50, ..TrainConfig::default() };
    let a = multitask_train(skilled, &tasks, &cfg, 2).unwrap();
    let b = multitask_train(private, &tasks, &cfg, 2).unwrap();
    assert_eq!(a.history.steps, b.history.steps);
    assert_eq!(a.history.evals, b.history.evals);
    let x = tasks[0].eval.x().unwrap();
    for i in 0..t {
        assert_eq!(a.model.predict(i, &x).unwrap(), b.model.predict(i, &x).unwrap());
    }
}

#[test]
fn expert_allocation_is_never_updated() {
    let (w, tasks, names) = world(9);
    let m = build(ModelKind::Expert, 3, &w, &names);
    let before = m.hardened_allocation(0).unwrap();
    assert_eq!(before, w.true_z);
    let cfg = TrainConfig { steps: Some(300), lr_z: 10.0, ..TrainConfig::default() };
    let out = multitask_train(m, &tasks, &cfg, 1).unwrap();
    assert_eq!(out.model.hardened_allocation(0).unwrap(), before);
    assert!(out.history.steps.iter().all(|s| s.reg_loss == 0.0));
}
