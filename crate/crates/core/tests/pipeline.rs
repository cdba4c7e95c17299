use predquant::harness::{evaluate, generate, model_for, quantize_and_evaluate, summarize, train_fp, AblationRow, DatasetSpec, TaskSpec, TrainConfig};
use predquant::model::save_model;
use predquant::recon::{BitPolicy, ReconConfig, ReconOptions};

fn clusters() -> (predquant::harness::DataBundle, predquant::model::ModelGraph) {
    let spec = DatasetSpec {
        task: TaskSpec::clusters(),
        ..Default::default()
    };
    let data = generate(&spec).unwrap();
    let graph = train_fp(model_for(&spec.task, 0).unwrap(), &data, &TrainConfig::default(), 0).unwrap();
    (data, graph)
}

#[test]
fn eight_bit_init_only_is_near_lossless() {
    let (data, graph) = clusters();
    let cfg = ReconConfig {
        weight_bits: 8,
        act_bits: 8,
        bit_policy: BitPolicy::Uniform,
        ..Default::default()
    };
    let run = quantize_and_evaluate(&graph, &data, &cfg, ReconOptions::NONE, 1024, 0).unwrap();
    let fp = evaluate(&graph, &data.val).unwrap();
    assert!((fp - run.row.val_acc).abs() < 1.0, "FP {fp} vs {}", run.row.val_acc);
    assert!(run.report.blocks.is_empty());
}

#[test]
fn quantized_model_file_round_trips() {
    let (data, graph) = clusters();
    let cfg = ReconConfig {
        iterations: 50,
        ..Default::default()
    };
    let run = quantize_and_evaluate(&graph, &data, &cfg, ReconOptions::PD_REG, 256, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.pqm");
    save_model(&path, &run.model.graph, Some(&run.model.layers)).unwrap();
    let (g, state) = predquant::model::load_model(&path).unwrap();
    let back = predquant::model::QuantizedModel::new(g, state.unwrap()).unwrap();
    assert_eq!(back, run.model);
    assert_eq!(evaluate(&back, &data.val).unwrap(), run.row.val_acc);

    // Flipping a payload byte is caught by the checksum.
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 40] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert!(predquant::model::load_model(&path).is_err());
}

#[test]
fn report_arithmetic_matches_recount() {
    let rows: Vec<AblationRow> = [(90.0, 85.0), (92.0, 86.0), (91.0, 88.0)]
        .iter()
        .enumerate()
        .map(|(i, &(c, v))| AblationRow::new(&ReconOptions::PD_ONLY, i as u64, c, v))
        .collect();
    let s = &summarize(&rows)[0];
    assert_eq!(s.runs, 3);
    assert!((s.calib_mean - 91.0).abs() < 1e-5);
    assert!((s.val_mean - 86.333_33).abs() < 1e-4);
    assert!((s.gap_mean - 4.666_67).abs() < 1e-4);
    // Sample std of 85, 86, 88.
    assert!((s.val_std - 1.527_525).abs() < 1e-4);
    assert!(rows.iter().all(|r| (r.overfit_gap - (r.calib_acc - r.val_acc)).abs() < 1e-6));
}
