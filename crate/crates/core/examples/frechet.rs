//! Fréchet distance between Gaussian fits of two embedding sets, and how it
//! grows as one set drifts.

use ravel::metrics::{frechet_distance, sample_moments};
use ravel::synth::isotropic_blobs;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dim = 16;
    let (a, _) = isotropic_blobs(1, 4000, dim, 1.0, 0.0, 10);
    let (m1, c1) = sample_moments(a.data(), dim).ok_or("need two samples")?;

    for shift in [0.0f32, 0.5, 1.0, 2.0] {
        let (b, _) = isotropic_blobs(1, 4000, dim, 1.0, 0.0, 11);
        let shifted: Vec<f32> = b.data().iter().map(|v| v + shift).collect();
        let (m2, c2) = sample_moments(&shifted, dim).ok_or("need two samples")?;
        let fd = frechet_distance(&m1, &c1, &m2, &c2)?;
        // Mean term alone is dim * shift^2.
        println!("shift {shift:>4}: FD = {fd:8.4}  (mean term {:.1})", dim as f32 * shift * shift);
    }
    Ok(())
}
