//! End-to-end behaviour of the run driver and the individual stages.

mod common;

use std::collections::BTreeMap;
use std::path::Path;

use forge_core::eval::ari;
use forge_core::lossgate::GateDecision;
use forge_core::pipeline::*;
use forge_core::trainer::{train_epoch, FineTuneState};
use forge_core::{EmbeddingMatrix, Error, Matrix};

use common::*;

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn stages(out: &RunOutcome) -> Vec<&str> {
    out.summary.history.iter().map(|r| r.stage.as_str()).collect()
}

#[test]
fn resumed_runs_match_an_uninterrupted_run() {
    let cfg = tiny_config(&[("run.seed", "5")]);
    let dir = tempfile::tempdir().unwrap();
    let whole = dir.path().join("whole");
    let out = run_full(&cfg, &whole).unwrap();
    assert_eq!(stages(&out), ["step1", "labels_0", "finetune_1", "lmft", "final"]);
    let reference = read(&whole.join("summary.json"));

    for keep in 0..out.state.stages_done.len() {
        // Pretend the run stopped after `keep` stages.
        let cut = dir.path().join(format!("cut{keep}"));
        run_full(&cfg, &cut).unwrap();
        let state_path = cut.join("state.json");
        let mut state: PipelineState = serde_json::from_slice(&read(&state_path)).unwrap();
        state.stages_done.truncate(keep);
        state.metric_history.truncate(keep);
        std::fs::write(&state_path, serde_json::to_vec(&state).unwrap()).unwrap();
        std::fs::remove_file(cut.join("summary.json")).unwrap();

        let resumed = run_full(&cfg, &cut).unwrap();
        assert_eq!(read(&cut.join("summary.json")), reference, "resumed after {keep} stages");
        assert_eq!(resumed.state.stages_done, out.state.stages_done);
    }
}

#[test]
fn resume_refuses_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    run_full(&tiny_config(&[]), dir.path()).unwrap();
    let other = tiny_config(&[("train.margin", "0.3")]);
    assert!(matches!(run_full(&other, dir.path()), Err(Error::BadConfig(_))));
}

#[test]
fn zero_refinement_rounds_stop_after_the_first_clustering() {
    let cfg = tiny_config(&[("run.num_refinement_iterations", "0")]);
    let dir = tempfile::tempdir().unwrap();
    let out = run_full(&cfg, dir.path()).unwrap();
    assert_eq!(stages(&out), ["step1", "labels_0", "final"]);
    assert!(!dir.path().join("lmft.ckpt").exists());
    let step1 = &out.summary.history[0];
    // The final model is the self-distilled model.
    assert_eq!(step1.checkpoint_digest.as_deref(), Some(out.summary.final_checkpoint_digest.as_str()));
    assert_eq!(step1.verification.as_ref(), Some(&out.summary.final_verification));
}

#[test]
fn ground_truth_never_reaches_training() {
    let cfg = tiny_config(&[("run.seed", "2")]);
    let honest = prepare(&cfg).unwrap();
    let mut scrambled = honest.clone();
    let n = scrambled.train.truth.speakers.len();
    scrambled.train.truth.speakers = (0..n).map(|i| honest.train.truth.speakers[(i * 7 + 3) % n]).collect();

    let dir = tempfile::tempdir().unwrap();
    let a = run_prepared(&cfg, &honest, &dir.path().join("a")).unwrap();
    let b = run_prepared(&cfg, &scrambled, &dir.path().join("b")).unwrap();
    assert_eq!(a.summary.final_checkpoint_digest, b.summary.final_checkpoint_digest);
    assert_eq!(a.labels, b.labels);
    for (x, y) in a.summary.history.iter().zip(&b.summary.history) {
        assert_eq!(x.checkpoint_digest, y.checkpoint_digest);
        assert_eq!(x.verification, y.verification);
    }
    // Only the reported label quality depends on the truth.
    assert_ne!(a.summary.initial_labels, b.summary.initial_labels);
}

#[test]
fn an_all_reliable_gate_changes_nothing() {
    let cfg = tiny_config(&[]);
    let p = prepare(&cfg).unwrap();
    let f = &p.train.features;
    let labels = p.train.truth.label_map().unwrap();
    let fresh = || FineTuneState::new(&p.pretrained, cfg.encoder.embed_dim, labels.num_classes(), &cfg.train, 9).unwrap();
    let (mut open, mut gated) = (fresh(), fresh());
    let all = GateDecision::all_reliable(f.len());
    for epoch in 0..2 {
        let r1 = train_epoch(&mut open, f, &labels, &cfg.train, None, Some(&p.aug), epoch, 9).unwrap();
        let r2 = train_epoch(&mut gated, f, &labels, &cfg.train, Some(&all), Some(&p.aug), epoch, 9).unwrap();
        assert_eq!(r1.record.losses, r2.record.losses);
    }
    assert_eq!(open.net, gated.net);
    assert_eq!(open.class_weights, gated.class_weights);
}

#[test]
fn a_disabled_gate_never_fires() {
    let cfg = tiny_config(&[("gate.enabled", "off"), ("train.epochs", "4")]);
    let p = prepare(&cfg).unwrap();
    let labels = p.train.truth.label_map().unwrap();
    let out = run_step3_finetune(&p.train.features, &labels, &cfg, &p.pretrained, &p.aug, 0).unwrap();
    assert_eq!(out.decisions.len(), 4);
    assert!(out.decisions.iter().all(Option::is_none));
    assert!(out.epochs.iter().all(|e| e.counts.gated() == 0 && !e.label_correction));
}

#[test]
fn gate_waits_for_warmup_and_label_correction_waits_longer() {
    let gate = GateConfig {
        warmup_epochs: 2,
        lc_delay: 1,
        min_separation: 0.0,
        ..GateConfig::default()
    };
    let mut r = rng(4);
    let losses: Vec<f64> = (0..200).map(|i| if i < 40 { 4.0 } else { 0.5 } + 0.3 * normal(&mut r)).collect();
    let probs: Vec<Vec<f64>> = (0..200).map(|i| if i % 2 == 0 { vec![0.9, 0.1] } else { vec![0.5, 0.5] }).collect();
    let prev = GateInput { losses, probs };
    for epoch in 0..2 {
        assert!(gate_for_epoch(&gate, epoch, Some(&prev), 0).unwrap().0.is_none());
    }
    let (d, _, lc) = gate_for_epoch(&gate, 2, Some(&prev), 0).unwrap();
    assert!(!lc);
    assert_eq!(d.unwrap().counts().correctable, 0);
    let (d, _, lc) = gate_for_epoch(&gate, 3, Some(&prev), 0).unwrap();
    assert!(lc);
    let c = d.unwrap().counts();
    assert!(c.correctable > 0 && c.discarded > 0);
    assert!((35..=45).contains(&c.gated()), "{c:?}");
}

#[test]
fn self_distillation_finds_speakers_in_a_clean_world() {
    let cfg = RunConfig::parse_with(&config_text("desk.cfg"), &[("world.channel_std", "0.1")]).unwrap();
    let p = prepare(&cfg).unwrap();
    let (teacher, losses) = run_step1_initial_model(&p.train.features, &cfg, &p.pretrained, &p.aug).unwrap();
    assert!(losses.iter().all(|l| l.is_finite()));
    let emb = embed_features(&teacher, &p.train.features).unwrap();
    let labels = run_step2_pseudo_label(&emb, &cfg, 0).unwrap();
    let q = label_quality(&labels, &p.train.truth, cfg.eval.nmi_normalizer).unwrap();
    assert!(q.ari >= 0.8, "ARI {}", q.ari);
}

#[test]
fn clustering_recovers_well_separated_speakers() {
    let cfg = RunConfig::parse_with("", &[("cluster.k", "40"), ("cluster.target_k", "8")]).unwrap();
    let mut r = rng(8);
    let centres: Vec<Vec<f64>> = (0..8)
        .map(|s| (0..16).map(|d| if d == 2 * s { 1.0 } else { 0.0 }).collect())
        .collect();
    let ids: Vec<_> = (0..160).map(|i| forge_core::UtteranceId::new(format!("u{i}")).unwrap()).collect();
    let rows: Vec<Vec<f64>> = (0..160)
        .map(|i| centres[i % 8].iter().map(|c| c + 0.05 * normal(&mut r)).collect())
        .collect();
    let emb = EmbeddingMatrix::from_f64_rows(ids.clone(), &Matrix::from_rows(&rows).unwrap()).unwrap();
    let labels = run_step2_pseudo_label(&emb, &cfg, 0).unwrap();
    let truth: Vec<usize> = (0..160).map(|i| i % 8).collect();
    assert_eq!(ari(&labels.labels_for(&ids).unwrap(), &truth).unwrap(), 1.0);
    assert_eq!(labels.num_classes(), 8);
}

#[test]
fn contrastive_mode_writes_its_artifacts() {
    let cfg = tiny_config(&[("run.mode", "ssl_contrastive_e2e")]);
    let dir = tempfile::tempdir().unwrap();
    let out = run_full(&cfg, dir.path()).unwrap();
    assert_eq!(out.summary.mode, "ssl_contrastive_e2e");
    assert!(dir.path().join("contrastive.ckpt").exists());
    let tsv = String::from_utf8(read(&dir.path().join("drift.tsv"))).unwrap();
    let mut lines = tsv.lines();
    assert_eq!(lines.next(), Some("mode\titeration\tepoch\tlayer\tdistance"));
    assert_eq!(lines.count(), cfg.train.epochs * cfg.encoder.num_layers);
}

#[test]
fn event_log_records_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_full(&tiny_config(&[]), dir.path()).unwrap();
    let text = String::from_utf8(read(&dir.path().join("events.jsonl"))).unwrap();
    let events: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let staged: Vec<&str> = events
        .iter()
        .filter(|e| e["event"] == "stage")
        .map(|e| e["data"]["stage"].as_str().unwrap())
        .collect();
    assert_eq!(staged, stages(&out));
    assert_eq!(events.first().unwrap()["event"], "start");
    assert_eq!(events.last().unwrap()["event"], "finish");
}

#[test]
fn overrides_replace_assignments_in_place() {
    let text = "# base\nrun.seed = 1\ntrain.margin = 0.2\n";
    let out = with_overrides(text, &[("train.margin", "0.3"), ("gate.tau2", "0.6")]);
    assert_eq!(out, "# base\nrun.seed = 1\ntrain.margin = 0.3\ngate.tau2 = 0.6\n");
    let cfg = RunConfig::parse(&out).unwrap();
    assert_eq!(cfg.train.margin, 0.3);
    let expected: BTreeMap<String, String> = [("run.seed", "1"), ("train.margin", "0.3"), ("gate.tau2", "0.6")]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    assert_eq!(cfg.entries, expected);
    assert!(RunConfig::parse("train.margin = 0.2\ntrain.margin = 0.3\n").is_err());
}

#[test]
fn run_seed_also_seeds_the_world() {
    let a = prepare(&tiny_config(&[("run.seed", "1")])).unwrap();
    let b = prepare(&tiny_config(&[("run.seed", "2")])).unwrap();
    assert_ne!(a.train.features, b.train.features);
    let again = prepare(&tiny_config(&[("run.seed", "1")])).unwrap();
    assert_eq!(a.train.features, again.train.features);
}
