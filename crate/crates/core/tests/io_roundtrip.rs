use flowfit_core::binning::bin_particles;
use flowfit_core::io::{
    fit_result_json, load_binned, load_model, load_particles, predict_document, save_binned, save_model,
    save_particles, ModelDocument, TimedFrames,
};
use flowfit_core::simulation::make_misspec_experiment;
use flowfit_core::{fit_em, BinGrid, BinMode, ColumnScaling, EmConfig, Hyperparams};

#[test]
fn binned_series_survives_disk() {
    let exp = make_misspec_experiment(5).unwrap();
    let grid = BinGrid::covering(&exp.cytograms, 40).unwrap();
    let binned = bin_particles(&exp.cytograms, &grid, BinMode::Counts).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("binned.csv");
    save_binned(&path, exp.observed.times(), &binned).unwrap();
    let (times, back) = load_binned(&path).unwrap();
    assert_eq!(times, exp.observed.times());
    assert_eq!(back, binned);
}

#[test]
fn particles_survive_disk() {
    let exp = make_misspec_experiment(6).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("particles.csv");
    save_particles(&path, exp.observed.times(), &exp.cytograms).unwrap();
    let back = load_particles(&path).unwrap().align(&exp.observed).unwrap();
    assert_eq!(back, exp.cytograms);
}

#[test]
fn fitted_model_document_round_trip() {
    let exp = make_misspec_experiment(7).unwrap();
    let grid = BinGrid::covering(&exp.cytograms, 40).unwrap();
    let binned = bin_particles(&exp.cytograms, &grid, BinMode::Counts).unwrap();
    let y = TimedFrames::from_binned(exp.observed.times(), &binned)
        .unwrap()
        .align(&exp.observed)
        .unwrap();
    let hyper = Hyperparams::new(0.01, 0.01, 1.0).unwrap();
    let config = EmConfig {
        restarts: 2,
        rel_tol: 1e-5,
        ..EmConfig::default()
    };
    let fit = fit_em(&exp.observed, &y, 3, &hyper, &config).unwrap();
    let doc = ModelDocument::from_fit(&fit, &exp.observed, &hyper, ColumnScaling::identity(3), 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_model(&path, &doc).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back, doc);
    assert_eq!(back.params().unwrap(), fit.params);
    assert_eq!(back.fit.objective_trace, fit.objective_trace);

    let rows = predict_document(&back, &exp.observed).unwrap();
    assert_eq!(rows.len(), 3 * exp.observed.len());

    let again = fit_em(&exp.observed, &y, 3, &hyper, &config).unwrap();
    assert_eq!(fit_result_json(&fit).unwrap(), fit_result_json(&again).unwrap());
}

#[test]
fn tampered_document_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let exp = make_misspec_experiment(8).unwrap();
    let params = flowfit_core::simulation::misspec_truth_params();
    let doc = ModelDocument::new(
        &params,
        exp.observed.names().to_vec(),
        exp.observed.len(),
        &Hyperparams::new(0.0, 0.0, 1.0).unwrap(),
        ColumnScaling::identity(3),
        Default::default(),
    );
    let text = doc.to_json().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["clusters"][1]["sigma"][0][0] = (-0.5).into();
    std::fs::write(&path, v.to_string()).unwrap();
    let err = load_model(&path).unwrap_err().to_string();
    assert!(err.contains("model.json"), "{err}");

    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v.as_object_mut().unwrap().remove("hyperparams");
    std::fs::write(&path, v.to_string()).unwrap();
    let err = load_model(&path).unwrap_err().to_string();
    assert!(err.contains("hyperparams"), "{err}");
}
