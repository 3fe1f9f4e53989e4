//! Runs the four-way ablation over the bundled colour-graded suite and prints
//! per-variant SSIM to the test image and S-Visual.
//!
//! `cargo run --example ablation_report -p exedit-core -- [inversion_steps] [gen_steps]`

use std::sync::Arc;
use std::time::Instant;

use exedit_core::image_ops::{load_image, mean_abs_diff, prepare_image, IMAGE_SIZE};
use exedit_core::metrics::{ssim, Metrics};
use exedit_core::pipeline::{ablate, EditOptions, NullObserver, Pipeline};
use exedit_core::reference::{ReferenceModels, DEFAULT_SEED};
use exedit_core::suite::graded_suite;
use exedit_core::vlm::HeuristicVlm;

fn main() -> anyhow::Result<()> {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/natural");
    let photos = ["astronaut", "coffee", "chelsea", "rocket", "grass", "brick"]
        .iter()
        .map(|n| Ok((n.to_string(), load_image(dir.join(format!("{n}.jpg")))?)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut args = std::env::args().skip(1).map(|s| s.parse::<usize>());
    let opts = EditOptions {
        inversion_steps: args.next().transpose()?.unwrap_or(50),
        gen_steps: args.next().transpose()?.unwrap_or(10),
        ..Default::default()
    };

    let models = ReferenceModels::new(DEFAULT_SEED);
    let pipeline = Pipeline::reference(&models, Arc::new(HeuristicVlm::new()))?;
    let metrics = Metrics::reference(&models);
    for t in graded_suite(&photos, 10) {
        let start = Instant::now();
        let variants = ablate(&pipeline, &t, &opts, &mut NullObserver)?;
        let y = prepare_image(&t.y, IMAGE_SIZE);
        println!("{} ({:.1}s) caption: {:?}", t.id, start.elapsed().as_secs_f64(), variants["none"].caption());
        for (name, r) in &variants {
            let sv = metrics.s_visual(&t.x, &t.x_edit, &y, &r.image)?;
            println!("  {name:<15} ssim(y) {:.3}  s_visual {sv:.3}  mad(y) {:.4}", ssim(&r.image, &y), mean_abs_diff(&r.image, &y));
        }
    }
    Ok(())
}
