//! k-means++ and Lloyd iteration on well-separated Gaussian blobs, scored
//! against the generating labels.

use ravel::clustering::{adjusted_rand_index, kmeans, KMeansParams};
use ravel::synth::isotropic_blobs;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (x, truth) = isotropic_blobs(10, 100, 16, 0.1, 10.0, 42);
    let result = kmeans(&x, &KMeansParams::new(10, 0))?;

    println!("n = {}, d = {}, k = {}", x.n(), x.d(), result.k);
    println!("iterations: {}", result.iterations_run);
    for (i, inertia) in result.inertia_history.iter().enumerate() {
        println!("  iter {i:>2}  inertia {inertia:.3}");
    }
    println!("cluster sizes: {:?}", result.cluster_sizes());
    println!("ARI vs generating labels: {:.4}", adjusted_rand_index(&result.assignments, &truth));
    Ok(())
}
