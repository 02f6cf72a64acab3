//! Improved precision and recall between a reference set and a generated
//! set that only covers half of the reference modes.

use ravel::metrics::{build_manifold, per_image_flags, DEFAULT_KNN_K};
use ravel::synth::isotropic_blobs;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dim = 8;
    let (reference, modes) = isotropic_blobs(4, 300, dim, 1.0, 10.0, 1);
    let (generated, _) = isotropic_blobs(2, 600, dim, 1.0, 10.0, 2);

    let flags = per_image_flags(reference.data(), generated.data(), dim, DEFAULT_KNN_K);
    println!("precision = {:.3}", flags.precision().unwrap_or(f64::NAN));
    println!("recall    = {:.3}", flags.recall().unwrap_or(f64::NAN));

    // Recall broken down by reference mode: the two missing modes have none.
    let recall = flags.recall.as_ref().map_err(|e| e.to_string())?;
    for mode in 0..4 {
        let rows: Vec<usize> = (0..modes.len()).filter(|&r| modes[r] == mode).collect();
        let hit = rows.iter().filter(|&&r| recall[r]).count();
        println!("  mode {mode}: {hit}/{} reference images covered", rows.len());
    }

    // The manifold itself can be queried directly.
    let manifold = build_manifold(reference.data(), dim, DEFAULT_KNN_K)?;
    let origin = vec![0.0f32; dim];
    println!("origin inside reference manifold: {}", manifold.membership(&origin)?);
    Ok(())
}
