//! End-to-end behaviour of the reference pipeline at reduced step counts.

use std::path::PathBuf;
use std::sync::Arc;

use exedit_core::image_ops::{load_image, prepare_image, IMAGE_SIZE};
use exedit_core::metrics::Metrics;
use exedit_core::pipeline::{lambda_sweep, EditOptions, Editor, NullObserver, Pipeline, Stage, StageAction};
use exedit_core::reference::{ReferenceModels, DEFAULT_SEED};
use exedit_core::suite::graded_suite;
use exedit_core::vlm::HeuristicVlm;

fn photos() -> Vec<(String, image::RgbImage)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/natural");
    ["astronaut", "coffee", "chelsea"]
        .iter()
        .map(|n| (n.to_string(), load_image(dir.join(format!("{n}.jpg"))).unwrap()))
        .collect()
}

fn fast() -> EditOptions {
    EditOptions {
        inversion_steps: 20,
        gen_steps: 5,
        ..Default::default()
    }
}

#[test]
fn s_visual_grows_with_lambda() {
    let models = ReferenceModels::new(DEFAULT_SEED);
    let pipeline = Pipeline::reference(&models, Arc::new(HeuristicVlm::new())).unwrap();
    let metrics = Metrics::reference(&models);
    let lambdas = [0.0, 0.2, 0.4, 0.6, 0.8];
    for t in graded_suite(&photos(), 3) {
        let results = lambda_sweep(&pipeline, &t, &lambdas, &fast(), &mut NullObserver).unwrap();
        let y = prepare_image(&t.y, IMAGE_SIZE);
        let sv: Vec<f64> = results
            .iter()
            .map(|r| metrics.s_visual(&t.x, &t.x_edit, &y, &r.image).unwrap())
            .collect();
        // the curve rises up to 0.6 and flattens beyond it
        assert!(sv.windows(2).take(3).all(|w| w[1] > w[0]), "{}: {sv:?}", t.id);
        assert!(sv[3] > 0.9, "{}: {sv:?}", t.id);
        assert!(sv.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn sweep_plan_shares_inversion() {
    let models = ReferenceModels::new(DEFAULT_SEED);
    let pipeline = Pipeline::reference(&models, Arc::new(HeuristicVlm::new())).unwrap();
    let t = &graded_suite(&photos(), 1)[0];
    let lambdas = [0.2, 0.65, 1.0];
    let action = |plan: &exedit_core::pipeline::Plan, stage: Stage| {
        plan.stages.iter().find(|s| s.stage == stage).map(|s| s.action)
    };
    let before = pipeline.plan(t, &lambdas, &fast()).unwrap();
    assert_eq!(before.stages.len(), 6);
    assert_eq!(action(&before, Stage::Inverting), Some(StageAction::Run));

    let results = lambda_sweep(&pipeline, t, &lambdas, &fast(), &mut NullObserver).unwrap();
    assert_eq!(results.len(), 3);
    assert!(results.iter().all(|r| r.caption() == results[0].caption()));
    assert!(!results[0].provenance.cache.inversion);

    let after = pipeline.plan(t, &lambdas, &fast()).unwrap();
    assert_eq!(action(&after, Stage::Inverting), Some(StageAction::Cached));
    assert_eq!(action(&after, Stage::Capturing), Some(StageAction::Cached));
    let again = lambda_sweep(&pipeline, t, &[0.65], &fast(), &mut NullObserver).unwrap();
    assert!(again[0].provenance.cache.inversion);
    assert_eq!(again[0].image, results[1].image);
}
