//! 2D layouts of clustered data with UMAP and with the PCA fallback.

use ravel::projection::{pca_project, umap_project, UmapParams};
use ravel::synth::isotropic_blobs;

fn spread(coords: &[[f64; 2]], labels: &[usize], c: usize) -> ([f64; 2], f64) {
    let pts: Vec<[f64; 2]> = coords.iter().zip(labels).filter(|(_, &l)| l == c).map(|(p, _)| *p).collect();
    let n = pts.len() as f64;
    let mean = [pts.iter().map(|p| p[0]).sum::<f64>() / n, pts.iter().map(|p| p[1]).sum::<f64>() / n];
    let rms = (pts.iter().map(|p| (p[0] - mean[0]).powi(2) + (p[1] - mean[1]).powi(2)).sum::<f64>() / n).sqrt();
    (mean, rms)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (x, labels) = isotropic_blobs(5, 200, 32, 1.0, 15.0, 3);
    let data: Vec<f64> = x.data().iter().map(|&v| f64::from(v)).collect();

    let umap = umap_project(&data, x.d(), &UmapParams::default())?;
    let pca = pca_project(&data, x.d())?;
    for (name, p) in [("umap", &umap), ("pca", &pca)] {
        println!("{name}:");
        for c in 0..5 {
            let (mean, rms) = spread(&p.coords, &labels, c);
            println!("  blob {c}: centre ({:7.2}, {:7.2})  rms {rms:.2}", mean[0], mean[1]);
        }
    }
    Ok(())
}
