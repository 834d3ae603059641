//! Library-level run over the synthetic corpus with the rule-based mock model.

use bridgelab_core::config::{Config, SyntheticStudent};
use bridgelab_core::harness::{
    self, Bridge, BridgeStyle, EvalReport, EvalSetup, Generator, Judge, PipelineSpec,
};
use bridgelab_core::metrics::SliceSpec;
use bridgelab_core::preference::{generate_dpo, pair_members, DpoOptions};
use bridgelab_core::qa::QAExample;
use bridgelab_core::supervision::{generate_sft, rewrite_set_from_target, SftOptions, TeacherConfig};
use bridgelab_core::synthetic;

fn setup(config: &Config, spec: PipelineSpec) -> EvalSetup {
    let gateway = config.build_gateway().unwrap();
    EvalSetup {
        generator: Generator::new(gateway.clone(), &spec.generator_model),
        bridge: spec.bridge_model.as_ref().map(|m| Bridge::new(gateway.clone(), m, spec.bridge_style)),
        judge: Some(Judge { gateway, model_id: "judge".into() }),
        spec,
        slices: SliceSpec::default(),
        workers: 4,
        seed: None,
    }
}

fn run(config: &Config, spec: PipelineSpec, data: &[QAExample]) -> EvalReport {
    harness::evaluate(&[("synth".to_string(), data.to_vec())], &setup(config, spec)).unwrap()
}

#[test]
fn supervision_preferences_and_evaluation() {
    let data = synthetic::generate_dataset(30, 11);
    let config = Config::default();
    let gateway = config.build_gateway().unwrap();

    let options =
        SftOptions { teacher: TeacherConfig::new("teacher"), workers: 4, filter_by_answer_f1: false };
    let (sft, stats) = generate_sft(&data, &gateway, &options);
    assert_eq!(stats.failed_examples, 0);
    assert_eq!(sft.len(), data.len());
    let calls: usize = data.iter().map(|e| e.documents.len()).sum();
    assert_eq!(stats.teacher_calls, calls);
    for (record, example) in sft.iter().zip(&data) {
        assert_eq!(record.id, example.id);
        assert!(rewrite_set_from_target(example, &record.target).unwrap().is_complete());
    }

    let generator = Generator::new(gateway.clone(), "gen");
    let dpo_options = DpoOptions { seed: 2, workers: 4, ..DpoOptions::default() };
    let (pairs, dstats) = generate_dpo(&data, &sft, &generator, &dpo_options);
    assert_eq!(dstats.failed_examples, 0);
    assert_eq!(dstats.records, pairs.len());
    assert!(!pairs.is_empty());
    for record in &pairs {
        let example = data.iter().find(|e| record.id.starts_with(&e.id)).unwrap();
        let (chosen, rejected) = pair_members(example, record).unwrap();
        assert_ne!(chosen, rejected);
    }

    let naive = run(&config, PipelineSpec::naive("gen"), &data);
    let identity = run(&config, PipelineSpec::bridged("gen", "student", BridgeStyle::Student), &data);
    assert_eq!(naive.scored, 30);
    assert_eq!(identity.bridged_count, 30);
    assert_eq!(naive.aggregate, identity.aggregate);

    let mut filtering = config.clone();
    filtering.backend.synthetic_student = SyntheticStudent::Filter;
    let filtered = run(&filtering, PipelineSpec::bridged("gen", "student", BridgeStyle::Student), &data);
    assert_eq!(filtered.scored, 30);
    assert!(filtered.errors.is_empty());
}
