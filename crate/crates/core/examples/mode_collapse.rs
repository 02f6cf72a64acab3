//! A generator that collapses one mode of the real distribution onto a
//! single point. Cluster metrics single out both the lost mode and the
//! collapsed cluster.

use ravel::clustering::{kmeans, KMeansParams};
use ravel::metrics::{cluster_metrics, dataset_flags, DEFAULT_KNN_K};
use ravel::synth::mode_collapse;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = mode_collapse(10, 500, 32, 1.0, 12.0, 20.0, 5);
    let x = &ds.embeddings;
    let k = 20;
    let clustering = kmeans(x, &KMeansParams::new(k, 0))?;
    let flags = dataset_flags(x, &ds.records, DEFAULT_KNN_K);
    let rows = cluster_metrics(&clustering.assignments, k, &flags, x, &ds.records)?;

    println!("dataset precision {:.3}, recall {:.3}", flags.precision().unwrap_or(0.0), flags.recall().unwrap_or(0.0));
    println!("{:>3} {:>6} {:>6} {:>8} {:>9} {:>7}", "id", "left", "right", "%split2", "precision", "recall");
    for r in &rows {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        println!(
            "{:>3} {:>6} {:>6} {:>8} {:>9} {:>7}",
            r.cluster_id,
            r.n_left,
            r.n_right,
            fmt(r.percent_split2),
            fmt(r.precision),
            fmt(r.recall)
        );
    }
    Ok(())
}
