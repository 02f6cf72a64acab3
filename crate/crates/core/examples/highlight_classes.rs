//! Label search and class highlighting against a loaded bundle, without
//! going through HTTP.

use ravel::pipeline::{run_all, RunConfig};
use ravel::server::BundleView;
use ravel::synth::two_split_mixture;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let work = std::env::temp_dir().join("ravel-highlight-example");
    let dataset = two_split_mixture(12, 30, 16, 1.0, 10.0, 4, true);
    let files = dataset.write(&work.join("input"))?;
    let mut config = RunConfig::new(
        &files.manifest,
        &files.embeddings_meta,
        &files.embeddings_bin,
        &dataset.splits,
        work.join("bundle"),
    );
    config.k_list = vec![12, 24];
    config.overwrite = true;
    let bundle = run_all(&config)?;

    let view = BundleView::load(&bundle.dir)?;
    for hit in view.search_labels("S_0") {
        println!("label {:<10} {} images", hit.label, hit.count);
    }
    for k in [12, 24] {
        let lit = view.label_clusters(k, &["class_03", "class_07"]).unwrap_or_default();
        println!("k = {k}: class_03 or class_07 appear in clusters {lit:?}");
    }
    Ok(())
}

