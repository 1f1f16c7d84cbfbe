use std::sync::OnceLock;

use ivg::guidance::GuidanceConfig;
use ivg::harness::{
    emit_report, generate, read_report_csv, run_best_beta, run_grid, run_method, train_models, ArtifactDir, EvalSet,
    ExperimentReport, MethodId, ModelSet, PipelineConfig, ReportFormat, ValueKind, CSV_COLUMNS,
};
use ivg::synth::{build_task, SynthTaskSpec};
use ivg::Error;

struct Setup {
    eval: EvalSet,
    models: ModelSet,
}

fn setup() -> &'static Setup {
    static SETUP: OnceLock<Setup> = OnceLock::new();
    SETUP.get_or_init(|| {
        let spec = SynthTaskSpec { n_train_pairs: 300, n_eval_prompts: 24, ..SynthTaskSpec::default_sentiment() };
        let cfg = PipelineConfig::for_task(spec);
        let task = build_task(&cfg.task).unwrap();
        let models = train_models(&task, &cfg).unwrap().model_set(&task.base_lm);
        Setup { eval: EvalSet::from(&task), models }
    })
}

fn small_cfg() -> GuidanceConfig {
    GuidanceConfig { beam_width: 2, successors: 2, chunk_len: 3, num_samples: 4, max_len: 10, ..Default::default() }
}

fn same_run(a: &ExperimentReport, b: &ExperimentReport) -> bool {
    ExperimentReport { wall_time_s: 0.0, ..a.clone() } == ExperimentReport { wall_time_s: 0.0, ..b.clone() }
}

#[test]
fn reports_are_reproducible_and_thread_independent() {
    let s = setup();
    let seeds = [0, 1, 2];
    let a = run_method(MethodId::IVG, &s.eval, &s.models, &small_cfg(), &seeds).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| run_method(MethodId::IVG, &s.eval, &s.models, &small_cfg(), &seeds).unwrap());
    assert!(same_run(&a, &b));
    assert_eq!(a.per_seed.len(), 3);
    assert!((a.per_seed.iter().sum::<f64>() / 3.0 - a.mean_gold).abs() < 1e-9);
}

#[test]
fn grid_base_cell_is_the_base_report_and_counts_add_up() {
    let s = setup();
    let cfg = small_cfg();
    let grid = run_grid(&s.eval, &s.models, &cfg, &[0, 1], &[0.5, 1.0]).unwrap();
    let base = run_method(MethodId::BASE, &s.eval, &s.models, &cfg, &[0, 1]).unwrap();
    assert!(same_run(grid.cell(ValueKind::None, ValueKind::None), &base));
    let summed = grid.reports().map(|r| r.fwd_totals).sum();
    assert_eq!(grid.total_counts(), summed);
    assert_eq!(grid.reports().count(), 9);
    assert_eq!(grid.cell(ValueKind::Implicit, ValueKind::Explicit).method, MethodId::IVG);
}

#[test]
fn best_of_sixteen_draws_sixteen_samples_per_prompt() {
    let s = setup();
    let cfg = GuidanceConfig { num_samples: 16, ..Default::default() };
    let bon_e = MethodId::BestOfN(ValueKind::Explicit);
    for (i, prompt) in s.eval.prompts.iter().enumerate() {
        let r = generate(bon_e, &s.models, prompt, &cfg, i as u64).unwrap();
        assert_eq!(r.extension_lengths, vec![r.extension_lengths[0].clone()]);
        assert_eq!(r.extension_lengths[0].len(), 16);
    }
    let report = run_method(bon_e, &s.eval, &s.models, &cfg, &[0, 1]).unwrap();
    assert_eq!(report.fwd_totals.scorer, 16 * s.eval.prompts.len() as u64 * 2);
}

#[test]
fn best_beta_keeps_the_highest_mean() {
    let s = setup();
    let cfg = small_cfg();
    let eft_i = MethodId::combo(ValueKind::Implicit, ValueKind::None);
    let best = run_best_beta(eft_i, &s.eval, &s.models, &cfg, &[0], &[0.25, 2.0]).unwrap();
    for beta in [0.25, 2.0] {
        let r = run_method(eft_i, &s.eval, &s.models, &GuidanceConfig { beta, ..cfg.clone() }, &[0]).unwrap();
        assert!(best.mean_gold >= r.mean_gold);
    }
    let cbs_e = MethodId::combo(ValueKind::None, ValueKind::Explicit);
    assert_eq!(run_best_beta(cbs_e, &s.eval, &s.models, &cfg, &[0], &[0.25, 2.0]).unwrap().beta, cfg.beta);
}

#[test]
fn csv_round_trip_recovers_the_means() {
    let s = setup();
    let dir = tempfile::tempdir().unwrap();
    let reports: Vec<ExperimentReport> = [MethodId::BASE, MethodId::IVG]
        .iter()
        .map(|&m| run_method(m, &s.eval, &s.models, &small_cfg(), &[0, 1]).unwrap())
        .collect();
    let path = dir.path().join("r.csv");
    emit_report(&reports, &path, ReportFormat::Csv).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
    assert_eq!(text.lines().count(), 3);
    let rows = read_report_csv(&path).unwrap();
    for (row, r) in rows.iter().zip(&reports) {
        assert_eq!(row.method, r.method.name());
        assert!((row.mean_gold - r.mean_gold).abs() <= 1e-5);
        assert!((row.stderr - r.std_err).abs() <= 1e-5);
        assert_eq!((row.fwd_base, row.fwd_scorer, row.seed_count), (r.fwd_totals.base, r.fwd_totals.scorer, 2));
    }
    emit_report(&reports[..1], dir.path().join("r.jsonl"), ReportFormat::JsonLines).unwrap();
    let line = std::fs::read_to_string(dir.path().join("r.jsonl")).unwrap();
    let back: ExperimentReport = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(back, reports[0]);
}

#[test]
fn empty_and_unwritable_reports_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(emit_report(&[], dir.path().join("r.csv"), ReportFormat::Csv).is_err());
    let s = setup();
    let r = run_method(MethodId::BASE, &s.eval, &s.models, &small_cfg(), &[0]).unwrap();
    assert!(emit_report(&[r], dir.path().join("missing/dir/r.csv"), ReportFormat::Csv).is_err());
}

#[test]
fn missing_models_are_named() {
    let s = setup();
    let bare = ModelSet { tuned: None, ..s.models.clone() };
    let err = run_method(MethodId::IVG, &s.eval, &bare, &small_cfg(), &[0]).unwrap_err();
    assert!(matches!(&err, Error::MissingArtifact(m) if m.contains("tuned")), "{err}");
    let bare = ModelSet { explicit: None, ..s.models.clone() };
    let err = run_method(MethodId::BestOfN(ValueKind::Explicit), &s.eval, &bare, &small_cfg(), &[0]).unwrap_err();
    assert!(matches!(&err, Error::MissingArtifact(m) if m.contains("explicit")), "{err}");
    assert!(run_method(MethodId::BASE, &s.eval, &bare, &small_cfg(), &[0]).is_ok());
}

#[test]
fn artifact_stages_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let art = ArtifactDir::new(dir.path());
    let cfg = PipelineConfig::default_sentiment();
    assert!(matches!(art.train_sft(&cfg), Err(Error::MissingArtifact(_))));
    let spec = SynthTaskSpec { n_train_pairs: 50, n_eval_prompts: 5, ..SynthTaskSpec::default_context() };
    art.make_task(&spec).unwrap();
    assert!(matches!(art.train_dpo(&cfg), Err(Error::MissingArtifact(m)) if m.contains("SFT")));
    assert!(matches!(art.train_fudge(&cfg), Err(Error::MissingArtifact(m)) if m.contains("reward")));
    art.train_sft(&cfg).unwrap();
    art.train_dpo(&cfg).unwrap();
    let models = art.models().unwrap();
    assert!(models.tuned.is_some() && models.explicit.is_none());
    assert_eq!(art.eval_set().unwrap().prompts.len(), 5);
}
