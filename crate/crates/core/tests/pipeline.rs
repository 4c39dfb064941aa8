//! Pipeline integration tests over the demo corpus: resume, idempotence,
//! atomicity, cache coherence, and stage-output invariants.

use std::fs;
use std::path::Path;

use crps_core::client::ModelClient;
use crps_core::pipeline::{
    build_client, files, read_jsonl, stage_critique, stage_emit, stage_eval, stage_explore,
    stage_pair, stage_stats, stage_synthesize, PipelineError, RunConfig,
};
use crps_core::record::{
    serialize_line, ContrastPair, CritiqueRecord, Problem, RejectedCritique, SynthRecord,
    TreeRecord, Validate,
};
use crps_core::toy::{toy_config, toy_corpus};

fn write_problems(dir: &Path, problems: &[Problem]) {
    fs::create_dir_all(dir).unwrap();
    let mut lines = String::new();
    for p in problems {
        lines.push_str(&serialize_line(p));
        lines.push('\n');
    }
    fs::write(dir.join(files::PROBLEMS), lines).unwrap();
}

fn run_all(dir: &Path, cfg: &RunConfig, client: &ModelClient) {
    stage_explore(dir, cfg, client).unwrap();
    stage_pair(dir, cfg).unwrap();
    stage_critique(dir, cfg, client).unwrap();
    stage_synthesize(dir, cfg, client).unwrap();
    stage_emit(dir, cfg).unwrap();
    stage_eval(dir, cfg, client).unwrap();
}

#[test]
fn stage_outputs_satisfy_type_invariants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config();
    let (problems, script) = toy_corpus();
    write_problems(dir.path(), &problems);
    let client = ModelClient::mock(script);
    run_all(dir.path(), &cfg, &client);

    let trees: Vec<TreeRecord> = read_jsonl(&dir.path().join(files::TREES)).unwrap();
    assert_eq!(trees.len(), problems.len());
    for tree in &trees {
        tree.validate().unwrap();
        let root = &tree.nodes[tree.root];
        assert_eq!(root.visits, tree.completed_rollouts as u64);
        for node in &tree.nodes {
            if !node.children.is_empty() {
                let child_sum: u64 = node.children.iter().map(|&c| tree.nodes[c].visits).sum();
                assert_eq!(node.visits, child_sum, "conservation at node {}", node.id);
            }
        }
    }

    // Every emitted pair satisfies its invariants (checked exhaustively).
    let pairs: Vec<ContrastPair> = read_jsonl(&dir.path().join(files::PAIRS)).unwrap();
    assert!(!pairs.is_empty());
    for p in &pairs {
        p.validate().unwrap();
    }

    let critiques: Vec<CritiqueRecord> = read_jsonl(&dir.path().join(files::CRITIQUES)).unwrap();
    for c in &critiques {
        c.validate().unwrap();
    }
    // Rejected critiques keep the raw text for offline inspection.
    let rejected: Vec<RejectedCritique> =
        read_jsonl(&dir.path().join(files::CRITIQUES_REJECTED)).unwrap();
    assert!(!rejected.is_empty());
    for r in &rejected {
        assert!(!r.raw.is_empty());
        assert!(!r.reason.is_empty());
    }

    let synth: Vec<SynthRecord> = read_jsonl(&dir.path().join(files::SYNTH)).unwrap();
    for s in &synth {
        s.validate().unwrap();
    }

    // No leftover temp files from atomic writes.
    for entry in fs::read_dir(dir.path()).unwrap() {
        let name = entry.unwrap().file_name();
        assert!(
            !name.to_string_lossy().ends_with(".tmp"),
            "stray temp file {name:?}"
        );
    }
}

#[test]
fn stages_are_idempotent_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config();
    let (problems, script) = toy_corpus();
    write_problems(dir.path(), &problems);
    let client = ModelClient::mock(script.clone());
    run_all(dir.path(), &cfg, &client);

    let snapshot: Vec<(String, Vec<u8>)> = [
        files::TREES,
        files::TRAJECTORIES,
        files::PAIRS,
        files::CRITIQUES,
        files::CRITIQUES_REJECTED,
        files::SYNTH,
        files::DATASET,
        files::EVAL,
        files::REPORT,
        files::MANIFEST,
    ]
    .iter()
    .map(|n| (n.to_string(), fs::read(dir.path().join(n)).unwrap()))
    .collect();

    // Re-run every stage against the same directory with a fresh client.
    let client2 = ModelClient::mock(script);
    run_all(dir.path(), &cfg, &client2);
    for (name, before) in &snapshot {
        let after = fs::read(dir.path().join(name)).unwrap();
        assert_eq!(&after, before, "{name} changed on rerun");
    }
}

#[test]
fn deleting_synth_recomputes_only_later_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config();
    let (problems, script) = toy_corpus();
    write_problems(dir.path(), &problems);
    let client = ModelClient::mock(script.clone());
    run_all(dir.path(), &cfg, &client);
    let synth_before = fs::read(dir.path().join(files::SYNTH)).unwrap();
    let dataset_before = fs::read(dir.path().join(files::DATASET)).unwrap();

    fs::remove_file(dir.path().join(files::SYNTH)).unwrap();

    // Earlier stages resume without model calls; synthesis recomputes.
    let client2 = ModelClient::mock(script);
    stage_explore(dir.path(), &cfg, &client2).unwrap();
    stage_pair(dir.path(), &cfg).unwrap();
    stage_critique(dir.path(), &cfg, &client2).unwrap();
    assert_eq!(
        client2.call_count(),
        0,
        "completed stages must not re-issue model calls"
    );
    stage_synthesize(dir.path(), &cfg, &client2).unwrap();
    assert!(client2.call_count() > 0);
    stage_emit(dir.path(), &cfg).unwrap();

    assert_eq!(fs::read(dir.path().join(files::SYNTH)).unwrap(), synth_before);
    assert_eq!(
        fs::read(dir.path().join(files::DATASET)).unwrap(),
        dataset_before
    );
}

#[test]
fn response_cache_never_changes_output() {
    let cfg = toy_config();
    let (problems, script) = toy_corpus();

    let plain_dir = tempfile::tempdir().unwrap();
    write_problems(plain_dir.path(), &problems);
    let plain_client = ModelClient::mock(script.clone());
    run_all(plain_dir.path(), &cfg, &plain_client);

    let cached_dir = tempfile::tempdir().unwrap();
    let cache = tempfile::tempdir().unwrap();
    write_problems(cached_dir.path(), &problems);
    let cached_client = ModelClient::mock(script)
        .with_cache(cache.path().to_path_buf())
        .unwrap();
    run_all(cached_dir.path(), &cfg, &cached_client);

    for name in [files::DATASET, files::EVAL, files::SYNTH] {
        assert_eq!(
            fs::read(plain_dir.path().join(name)).unwrap(),
            fs::read(cached_dir.path().join(name)).unwrap(),
            "{name} differs with cache enabled"
        );
    }
    assert!(cache.path().read_dir().unwrap().next().is_some());
}

#[test]
fn worker_count_does_not_change_output() {
    let (problems, script) = toy_corpus();

    let single_dir = tempfile::tempdir().unwrap();
    let cfg1 = toy_config();
    write_problems(single_dir.path(), &problems);
    let client1 = ModelClient::mock(script.clone());
    run_all(single_dir.path(), &cfg1, &client1);

    let multi_dir = tempfile::tempdir().unwrap();
    let mut cfg4 = toy_config();
    cfg4.workers = 4;
    write_problems(multi_dir.path(), &problems);
    let client4 = ModelClient::mock(script);
    run_all(multi_dir.path(), &cfg4, &client4);

    for name in [
        files::TREES,
        files::TRAJECTORIES,
        files::PAIRS,
        files::CRITIQUES,
        files::SYNTH,
        files::DATASET,
        files::EVAL,
    ] {
        assert_eq!(
            fs::read(single_dir.path().join(name)).unwrap(),
            fs::read(multi_dir.path().join(name)).unwrap(),
            "{name} differs across worker counts"
        );
    }
}

#[test]
fn invalid_config_rejected_before_work() {
    let mut cfg = toy_config();
    cfg.search.c_puct = -1.0;
    match cfg.validate() {
        Err(PipelineError::ConfigInvalid(msg)) => assert!(msg.contains("c_puct")),
        other => panic!("expected ConfigInvalid, got {other:?}"),
    }
    let mut cfg = toy_config();
    cfg.workers = 0;
    assert!(matches!(
        cfg.validate(),
        Err(PipelineError::ConfigInvalid(_))
    ));
    // Mock backend without a script is caught at client construction.
    let cfg = toy_config();
    let err = build_client(&cfg).err().expect("missing script must fail");
    assert!(matches!(err, PipelineError::ConfigInvalid(_)));
}

#[test]
fn missing_stage_input_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config();
    match stage_pair(dir.path(), &cfg) {
        Err(PipelineError::MissingStageInput(name)) => {
            assert_eq!(name, files::TRAJECTORIES);
        }
        other => panic!("expected MissingStageInput, got {other:?}"),
    }
    let (_, script) = toy_corpus();
    let client = ModelClient::mock(script);
    match stage_explore(dir.path(), &cfg, &client) {
        Err(PipelineError::MissingStageInput(name)) => assert_eq!(name, files::PROBLEMS),
        other => panic!("expected MissingStageInput, got {other:?}"),
    }
}

#[test]
fn stats_summarizes_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config();
    let (problems, script) = toy_corpus();
    write_problems(dir.path(), &problems);
    let client = ModelClient::mock(script);
    run_all(dir.path(), &cfg, &client);

    let report = stage_stats(dir.path()).unwrap();
    assert_eq!(report.stage_counts["problems.jsonl"], 12);
    assert_eq!(report.stage_counts["dataset.jsonl"], 18);
    let rate = report.critique_failure_rate.unwrap();
    assert!((rate - 0.1).abs() < 1e-9, "failure rate {rate}");
    assert_eq!(report.drop_reasons["no_positive"], 1);
    assert_eq!(report.drop_reasons["no_negative"], 1);
    let eval = report.eval.unwrap();
    assert!((eval.strict_consistency - 0.75).abs() < 1e-9);
    assert_eq!(eval.n, 12);

    // Stats is read-only and stable.
    let again = stage_stats(dir.path()).unwrap();
    assert_eq!(again.stage_counts, report.stage_counts);

    // Empty run dir: empty report, no error.
    let empty = tempfile::tempdir().unwrap();
    let report = stage_stats(empty.path()).unwrap();
    assert!(report.stage_counts.is_empty());
}

#[test]
fn live_backend_requires_api_key() {
    // Construction must fail fast when the key is absent.
    std::env::remove_var("CRPS_API_KEY");
    let mut cfg = toy_config();
    cfg.backend = crps_core::pipeline::BackendKind::Live;
    let err = build_client(&cfg).err().expect("missing key must fail");
    assert!(matches!(
        err,
        PipelineError::Client(crps_core::client::ClientError::AuthFailure(_))
    ));
}

#[test]
fn config_round_trips_through_toml() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config();
    cfg.mock_script = Some("mock_script.json".into());
    cfg.templates_dir = Some(dir.path().join("tpl"));
    let path = dir.path().join("config.toml");
    cfg.save(&path).unwrap();
    let back = RunConfig::load(&path).unwrap();
    assert_eq!(back, cfg);
}
