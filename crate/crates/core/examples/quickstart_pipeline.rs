//! Generate a small two-split dataset with images, run every stage and
//! print the bundle summary.
//!
//! cargo run --example quickstart_pipeline -- [output_dir]

use ravel::pipeline::{inspect, run_all, RunConfig};
use ravel::synth::two_split_mixture;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("ravel-quickstart"));
    let input = out.with_extension("input");

    // 8 components, 25 images per split per component: 400 images.
    let dataset = two_split_mixture(8, 25, 32, 1.0, 12.0, 7, true).with_images(&input, 48)?;
    let files = dataset.write(&input)?;

    let mut config = RunConfig::new(
        &files.manifest,
        &files.embeddings_meta,
        &files.embeddings_bin,
        &dataset.splits,
        &out,
    );
    config.image_root = files.image_root;
    config.k_list = vec![4, 8];
    config.overwrite = true;

    let bundle = run_all(&config)?;
    for stage in &bundle.run.stages {
        println!("{:<14} {:>6} ms", stage.name, stage.wall_ms);
    }
    println!("{}", serde_json::to_string_pretty(&inspect(&bundle.dir)?)?);
    println!("bundle written to {}", bundle.dir.display());
    Ok(())
}
