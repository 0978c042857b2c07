use std::path::Path;

use qfa_core::checkpoint::{checkpoint_digest, load_supernet, save_supernet};
use qfa_core::harness::{self, ExperimentConfig, Layout, Paths};
use qfa_core::supernet::{build_supernet, Dims, FloatModel, SupernetOptions};
use qfa_core::tensor::Rng;
use qfa_core::train::{
    generate_corpus, train_supernet, train_supernet_until, CorpusSpec, Dataset, TrainConfig,
    TrainState,
};

const SMALL: &str = r#"{
  "seed": 4,
  "corpus": {"train_tokens": 5000, "val_tokens": 1200},
  "pretrain": {"steps": 80},
  "train": {"steps": 60, "eval_every": 20, "eval_examples": 64},
  "checkpoint_every": 25,
  "ablations": ["shared"],
  "search": {"phase1_n": 12, "phase2_n": 6, "eval_examples": 128, "constraints": [3.0]},
  "analysis": {"samples": 1000}
}"#;

fn small_config(root: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_json(SMALL).unwrap();
    cfg.paths = Paths::under(root);
    cfg.normalize().unwrap()
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    walkdir::WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            let rel = e.path().strip_prefix(root).unwrap().to_string_lossy().into_owned();
            (rel, std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn pipeline_matches_stages_run_one_by_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    harness::pipeline(&cfg, false).unwrap();
    let via_pipeline = read_tree(dir.path());

    for entry in std::fs::read_dir(dir.path()).unwrap() {
        std::fs::remove_dir_all(entry.unwrap().path()).unwrap();
    }
    let variants = cfg.variants();
    harness::gen_corpus(&cfg).unwrap();
    harness::pretrain(&cfg).unwrap();
    harness::quantize(&cfg).unwrap();
    harness::train_supernet(&cfg, &variants, false).unwrap();
    harness::analyze_sampler(&cfg).unwrap();
    harness::search(&cfg, &variants).unwrap();
    harness::eval(&cfg, &variants, &[]).unwrap();
    harness::report(&cfg, &variants).unwrap();
    let names = |t: &[(String, Vec<u8>)]| t.iter().map(|(k, _)| k.clone()).collect::<Vec<_>>();
    let by_stage = read_tree(dir.path());
    assert_eq!(names(&via_pipeline), names(&by_stage));
    assert!(via_pipeline == by_stage, "artifacts differ");
}

#[test]
fn search_stage_leaves_checkpoints_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let variants = cfg.variants();
    harness::gen_corpus(&cfg).unwrap();
    harness::pretrain(&cfg).unwrap();
    harness::quantize(&cfg).unwrap();
    harness::train_supernet(&cfg, &variants, false).unwrap();
    let layout = Layout::new(&cfg.paths);
    let before: Vec<String> = variants
        .iter()
        .map(|&v| checkpoint_digest(&layout.supernet(v)).unwrap())
        .collect();
    harness::search(&cfg, &variants).unwrap();
    let after: Vec<String> = variants
        .iter()
        .map(|&v| checkpoint_digest(&layout.supernet(v)).unwrap())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn interrupted_training_resumes_to_the_same_model() {
    let dims = Dims::default();
    let corpus = generate_corpus(
        &CorpusSpec {
            train_tokens: 4000,
            val_tokens: 600,
            ..Default::default()
        },
        2,
    );
    let train = Dataset::from_tokens(&corpus.train, dims.context).unwrap();
    let val = Dataset::from_tokens(&corpus.val, dims.context).unwrap();
    let float = FloatModel::init(dims, &mut Rng::new(3)).unwrap();
    let fresh = build_supernet(&float, &SupernetOptions::default(), &mut Rng::new(4)).unwrap();
    let cfg = TrainConfig {
        steps: 90,
        schedule: qfa_core::sampler::BitSchedule {
            schedule_len: 40,
            ..Default::default()
        },
        eval_every: 30,
        eval_examples: 64,
        ..Default::default()
    };

    let mut straight = fresh.clone();
    let log_straight = train_supernet(&mut straight, &cfg, &train, &val).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut model = fresh;
    let mut state = TrainState::default();
    let mut log = train_supernet_until(&mut model, &cfg, &mut state, &train, &val, 35).unwrap();
    save_supernet(dir.path(), &model, Some(&state)).unwrap();
    let (mut model, state) = load_supernet(dir.path()).unwrap();
    let mut state = state.expect("training state saved");
    assert_eq!(state.next_step, 35);
    log.extend(train_supernet_until(&mut model, &cfg, &mut state, &train, &val, cfg.steps).unwrap());

    assert_eq!(model, straight);
    assert_eq!(log.to_jsonl(), log_straight.to_jsonl());
}
