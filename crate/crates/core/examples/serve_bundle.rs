//! Build a bundle and serve it until Ctrl-C.
//!
//! cargo run --example serve_bundle -- [port]

use std::net::SocketAddr;

use ravel::pipeline::{run_all, RunConfig};
use ravel::server::{shutdown_signal, PreparedServer, ServeOptions};
use ravel::synth::two_split_mixture;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let port: u16 = std::env::args().nth(1).map(|p| p.parse()).transpose()?.unwrap_or(0);
    let work = std::env::temp_dir().join("ravel-serve-example");
    let dataset = two_split_mixture(6, 40, 16, 1.0, 10.0, 11, true).with_images(&work.join("input"), 64)?;
    let files = dataset.write(&work.join("input"))?;
    let mut config = RunConfig::new(
        &files.manifest,
        &files.embeddings_meta,
        &files.embeddings_bin,
        &dataset.splits,
        work.join("bundle"),
    );
    config.image_root = files.image_root;
    config.k_list = vec![6, 12];
    config.overwrite = true;
    let bundle = tokio::task::spawn_blocking(move || run_all(&config)).await??;

    let server = PreparedServer::bind(&bundle.dir, SocketAddr::from(([127, 0, 0, 1], port)), ServeOptions::default()).await?;
    let addr = server.local_addr()?;
    println!("try: curl http://{addr}/api/summary");
    println!("     curl 'http://{addr}/api/clusters?k=6'");
    println!("     curl http://{addr}/api/clusters/6/0/samples");
    server.serve(shutdown_signal()).await?;
    Ok(())
}
