use headkv::allocation::{allocate, clamp_to_sequence, validate_plan, AllocationConfig, Policy};
use headkv::harness::{
    compare_methods, comparison_methods, evaluate_needle, evaluate_reasoning, run_estimation,
    Budget, ExperimentConfig, ModelConfig,
};
use headkv::selection::{compress, PoolingConfig};
use headkv::toymodel::{build_toy_model, ModelSpec};

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk_default();
    cfg.grid.lengths = vec![256, 1024];
    cfg.grid.depths = vec![0.0, 0.5, 1.0];
    cfg.n_examples = 8;
    cfg.n_eval_examples = 4;
    cfg
}

#[test]
fn accuracy_grows_with_budget() {
    let cfg = small();
    let scores = run_estimation(&cfg).unwrap();
    let methods = comparison_methods(&cfg, &[scores]);
    let budgets = [
        Budget::Entries(16),
        Budget::Entries(32),
        Budget::Entries(64),
        Budget::Full,
    ];
    for table in [
        evaluate_needle(&cfg, &methods, &budgets).unwrap(),
        evaluate_reasoning(&cfg, &methods, &budgets).unwrap(),
    ] {
        for m in &methods {
            // per cell, not just on average
            for w in budgets.windows(2) {
                let lo: Vec<f64> = table
                    .rows
                    .iter()
                    .filter(|r| r.method == m.label && r.b == w[0])
                    .map(|r| r.accuracy)
                    .collect();
                let hi: Vec<f64> = table
                    .rows
                    .iter()
                    .filter(|r| r.method == m.label && r.b == w[1])
                    .map(|r| r.accuracy)
                    .collect();
                assert_eq!(lo.len(), hi.len());
                for (a, b) in lo.iter().zip(&hi) {
                    assert!(a <= b, "{} {} -> {}: {a} > {b}", m.label, w[0], w[1]);
                }
            }
            assert_eq!(table.mean_accuracy(&m.label, Budget::Full), Some(1.0));
        }
    }
}

#[test]
fn comparisons_are_paired_and_reproducible() {
    let mut cfg = small();
    cfg.budgets = Some(vec![Budget::Entries(32), Budget::Full]);
    cfg.betas = Some(vec![1.2, 2.0]);
    let a = compare_methods(&cfg).unwrap();
    let b = compare_methods(&cfg).unwrap();
    let csv = |t: &headkv::harness::ResultTable| {
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        buf
    };
    assert_eq!(csv(&a.needle), csv(&b.needle));
    assert_eq!(csv(&a.reasoning), csv(&b.reasoning));
    let labels = a.needle.methods();
    assert_eq!(labels.len(), 3 + 3 * 2);
    assert!(labels.contains(&"headkv-R2-beta2".to_string()));
    for e in a.memory.iter().filter(|e| e.b == Budget::Entries(32)) {
        assert_eq!(e.report.total_entries, (32 + 8) * 64, "{}", e.method);
    }

    let mut other = cfg.clone();
    other.corpus_seed += 1;
    let c = compare_methods(&other).unwrap();
    assert_ne!(csv(&a.needle), csv(&c.needle));
}

#[test]
fn toy_model_pipeline() {
    let mut cfg = small();
    let spec = ModelSpec::new(2, 4, 8, 256, 11);
    cfg.model = ModelConfig::Toy(spec.clone());
    cfg.grid.lengths = vec![48];
    cfg.grid.depths = vec![0.0, 1.0];
    cfg.n_examples = 2;
    let scores = run_estimation(&cfg).unwrap();
    assert!((scores.normalized.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let model = build_toy_model(&spec).unwrap();
    let prompt: Vec<u32> = (0..60).map(|i| 200 + (i * 13 % 50) as u32).collect();
    let alloc = AllocationConfig {
        b: 12,
        beta: 1.5,
        alpha: 8,
        policy: Policy::HeadKv,
    };
    let plan = allocate(&alloc, spec.shape(), Some(&scores), None).unwrap();
    assert!(validate_plan(&plan, &alloc, spec.shape(), Some(&scores)).passed());
    let plan = clamp_to_sequence(&plan, prompt.len()).unwrap();
    let c = compress(&model, &prompt, &plan, &PoolingConfig::default()).unwrap();
    for (id, cache) in c.caches.iter() {
        assert_eq!(cache.len(), plan.per_head[id] + 8);
    }
    assert_eq!(c.report.total_entries, plan.total + 8 * 8);
}
