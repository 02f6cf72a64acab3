//! Bring your own embeddings: write a manifest and a raw f32 sidecar, then
//! load and validate them the way `ravel ingest` does.

use std::io::Write;

use ravel::dataset::{write_embeddings, DatasetHandle, EmbeddingMatrix, SplitNames};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("ravel-custom-embeddings");
    std::fs::create_dir_all(&dir)?;

    // Six images: three "ffhq", three "stylegan2"; two labeled.
    let mut manifest = std::fs::File::create(dir.join("manifest.jsonl"))?;
    for i in 0..6 {
        let split = if i < 3 { "ffhq" } else { "stylegan2" };
        let label = if i % 3 == 0 { r#","label":"smiling""# } else { "" };
        writeln!(manifest, r#"{{"id":"img{i}","split":"{split}"{label}}}"#)?;
    }

    let data: Vec<f32> = (0..6 * 4).map(|v| v as f32 / 10.0).collect();
    let matrix = EmbeddingMatrix::new(data, 6, 4, "toy-encoder")?;
    write_embeddings(&matrix, &dir.join("embeddings.meta.json"), &dir.join("embeddings.bin"))?;
    println!("{}", std::fs::read_to_string(dir.join("embeddings.meta.json"))?);

    let handle = DatasetHandle::load(
        &dir.join("manifest.jsonl"),
        &dir.join("embeddings.meta.json"),
        &dir.join("embeddings.bin"),
        SplitNames::new("ffhq", "stylegan2")?,
    )?;
    println!("{} images, dim {}", handle.len(), handle.embeddings().d());
    println!("labels: {:?}", handle.label_index());
    println!("unlabeled rows: {:?}", handle.unlabeled_rows());
    Ok(())
}
