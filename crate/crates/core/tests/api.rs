mod common;

use std::collections::{BTreeMap, HashSet};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use ravel::dataset::Side;
use ravel::pipeline::{run_all, ClustersRecord, FINALIZED_MARKER};
use ravel::server::{router, AppState, PreparedServer, ServeOptions, ServerError};
use ravel::synth::{identical_splits, SyntheticDataset};
use serde_json::Value;

struct TestServer {
    addr: SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<Result<(), ServerError>>>,
}

impl TestServer {
    fn start(bundle: &Path) -> Self {
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (stop, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let dir = bundle.to_path_buf();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let server = PreparedServer::bind(&dir, ([127, 0, 0, 1], 0).into(), ServeOptions::default()).await?;
                addr_tx.send(server.local_addr()?).unwrap();
                server
                    .serve(async move {
                        let _ = stop_rx.await;
                    })
                    .await
            })
        });
        let addr = addr_rx.recv().expect("server bound");
        let server = TestServer {
            addr,
            stop: Some(stop),
            thread: Some(thread),
        };
        // Wait for the bundle to finish loading.
        for _ in 0..500 {
            if server.status("/api/summary") == 200 {
                return server;
            }
            std::thread::sleep(std::time::Duration::from_millis(10));
        }
        panic!("bundle never loaded");
    }

    fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    fn status(&self, path: &str) -> u16 {
        match ureq::get(&self.url(path)).call() {
            Ok(r) => r.status(),
            Err(ureq::Error::Status(code, _)) => code,
            Err(e) => panic!("{e}"),
        }
    }

    fn get_bytes(&self, path: &str) -> (u16, Vec<u8>, BTreeMap<String, String>) {
        let resp = match ureq::get(&self.url(path)).call() {
            Ok(r) => r,
            Err(ureq::Error::Status(_, r)) => r,
            Err(e) => panic!("{e}"),
        };
        let status = resp.status();
        let headers = resp
            .headers_names()
            .into_iter()
            .map(|h| {
                let v = resp.header(&h).unwrap_or_default().to_string();
                (h.to_ascii_lowercase(), v)
            })
            .collect();
        let mut body = Vec::new();
        std::io::Read::read_to_end(&mut resp.into_reader(), &mut body).unwrap();
        (status, body, headers)
    }

    fn json(&self, path: &str) -> (u16, Value) {
        let (status, body, _) = self.get_bytes(path);
        (status, serde_json::from_slice(&body).unwrap())
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// The 400-image fixture relabeled with ImageNet-like names; component 3
/// is unlabeled.
fn labeled_fixture(dir: &Path, images: bool) -> (SyntheticDataset, PathBuf) {
    let mut ds = common::fixture_dataset();
    let names = ["Sea Urchin", "goldfish", "sea anemone"];
    for r in &mut ds.records {
        r.label = names.get(ds.components[r.row]).map(|s| s.to_string());
    }
    if images {
        ds = ds.with_images(&dir.join("input"), 20).unwrap();
    }
    let config = common::write_fixture(&ds, dir);
    let bundle = run_all(&config).unwrap();
    (ds, bundle.dir)
}

#[test]
fn summary_mirrors_the_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, bundle) = labeled_fixture(tmp.path(), false);
    let server = TestServer::start(&bundle);
    let (status, body) = server.json("/api/summary");
    assert_eq!(status, 200);
    assert_eq!(body["n_total"], 400);
    assert_eq!(body["n_left"], 200);
    assert_eq!(body["k_list"], serde_json::json!([4]));
    assert_eq!(body["split_names"]["left"], "real");
    assert_eq!(body["split_names"]["right"], "generated");
    assert_eq!(body["embedding_name"], "synthetic");
    assert_eq!(body["knn_k"], 3);
    for key in ["frechet_distance", "precision", "recall", "undefined"] {
        assert!(body.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn identical_splits_report_full_precision() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = identical_splits(150, 8, 3);
    let mut config = common::write_fixture(&ds, tmp.path());
    config.k_list = vec![5];
    let bundle = run_all(&config).unwrap();
    let server = TestServer::start(&bundle.dir);
    let (_, body) = server.json("/api/summary");
    assert_eq!(body["precision"], 1.0);
    assert_eq!(body["recall"], 1.0);
    assert!(body["frechet_distance"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn clusters_route_has_k_sorted_rows_with_coords() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, bundle) = labeled_fixture(tmp.path(), false);
    let server = TestServer::start(&bundle);
    let (status, rows) = server.json("/api/clusters?k=4");
    assert_eq!(status, 200);
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 4);
    let mut total = 0;
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row["id"], i);
        for key in [
            "n_left",
            "n_right",
            "percent_split2",
            "precision",
            "recall",
            "split_centroid_distance",
            "median_dist_to_centroid",
            "undefined",
        ] {
            assert!(row.get(key).is_some(), "missing {key}");
        }
        let xy = row["coords"].as_array().unwrap();
        assert_eq!(xy.len(), 2);
        assert!(xy.iter().all(|v| v.as_f64().unwrap().is_finite()));
        total += row["n_left"].as_u64().unwrap() + row["n_right"].as_u64().unwrap();
    }
    assert_eq!(total, 400);

    let (status, body) = server.json("/api/clusters?k=7");
    assert_eq!(status, 404);
    assert_eq!(body["reason"], "unknown_k");
    assert_eq!(server.status("/api/clusters"), 400);
    assert_eq!(server.status("/api/clusters?k=abc"), 400);
}

#[test]
fn samples_partition_the_dataset_in_display_order() {
    let tmp = tempfile::tempdir().unwrap();
    let (ds, bundle) = labeled_fixture(tmp.path(), false);
    let server = TestServer::start(&bundle);
    let clusters: ClustersRecord =
        serde_json::from_slice(&std::fs::read(bundle.join("clusters_4.json")).unwrap()).unwrap();
    let row_of: BTreeMap<&str, usize> = ds.records.iter().map(|r| (r.id.as_str(), r.row)).collect();

    let mut seen = HashSet::new();
    for cid in 0..4 {
        let (status, samples) = server.json(&format!("/api/clusters/4/{cid}/samples"));
        assert_eq!(status, 200);
        let samples = samples.as_array().unwrap();
        let mut sides = Vec::new();
        let mut labels_per_side: BTreeMap<String, Vec<Option<String>>> = BTreeMap::new();
        for s in samples {
            let id = s["id"].as_str().unwrap();
            let row = row_of[id];
            assert_eq!(clusters.assignments[row], cid);
            assert!(seen.insert(row), "{id} listed twice");
            let split = s["split"].as_str().unwrap().to_string();
            let expected = match ds.records[row].split {
                Side::Left => "left",
                Side::Right => "right",
            };
            assert_eq!(split, expected);
            assert_eq!(s["split_name"], ds.splits.name(ds.records[row].split));
            assert_eq!(s.get("label").and_then(Value::as_str), ds.records[row].label.as_deref());
            assert!(s.get("thumb_url").is_none());
            assert!(s["in_other_manifold"].is_boolean());
            assert_eq!(s["coords"].as_array().unwrap().len(), 2);
            sides.push(split.clone());
            labels_per_side
                .entry(split)
                .or_default()
                .push(s.get("label").and_then(Value::as_str).map(String::from));
        }
        // Left block first, then right.
        let first_right = sides.iter().position(|s| s == "right").unwrap_or(sides.len());
        assert!(sides[first_right..].iter().all(|s| s == "right"));
        // Within a side: each label is one contiguous run; unlabeled last.
        for labels in labels_per_side.values() {
            let mut finished: HashSet<Option<String>> = HashSet::new();
            for w in labels.windows(2) {
                if w[0] != w[1] {
                    assert!(w[0].is_some(), "unlabeled must come last");
                    assert!(finished.insert(w[0].clone()));
                    assert!(!finished.contains(&w[1]));
                }
            }
        }
    }
    assert_eq!(seen.len(), 400);

    let (status, body) = server.json("/api/clusters/4/4/samples");
    assert_eq!(status, 404);
    assert_eq!(body["reason"], "unknown_cluster");
    assert_eq!(server.status("/api/clusters/9/0/samples"), 404);
}

#[test]
fn unlabeled_samples_keep_manifest_order() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = ravel::synth::two_split_mixture(3, 30, 8, 1.0, 10.0, 2, false);
    let mut config = common::write_fixture(&ds, tmp.path());
    config.k_list = vec![3];
    let bundle = run_all(&config).unwrap();
    let server = TestServer::start(&bundle.dir);
    for cid in 0..3 {
        let (_, samples) = server.json(&format!("/api/clusters/3/{cid}/samples"));
        let samples = samples.as_array().unwrap();
        assert!(samples.iter().all(|s| s.get("label").is_none()));
        let rows: Vec<usize> = samples
            .iter()
            .map(|s| ds.records.iter().position(|r| r.id == s["id"]).unwrap())
            .collect();
        let (left, right): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&r| ds.records[r].split == Side::Left);
        assert!(left.windows(2).all(|w| w[0] < w[1]));
        assert!(right.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(rows, [left, right].concat());
    }
}

#[test]
fn label_search_is_case_insensitive_substring() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, bundle) = labeled_fixture(tmp.path(), false);
    let server = TestServer::start(&bundle);
    let (status, hits) = server.json("/api/labels?q=urch");
    assert_eq!(status, 200);
    assert_eq!(hits, serde_json::json!([{"label": "Sea Urchin", "count": 100}]));
    let (_, hits) = server.json("/api/labels?q=SEA");
    let names: Vec<&str> = hits.as_array().unwrap().iter().map(|h| h["label"].as_str().unwrap()).collect();
    assert_eq!(names, vec!["Sea Urchin", "sea anemone"]);
    let (status, hits) = server.json("/api/labels?q=zebra");
    assert_eq!(status, 200);
    assert_eq!(hits, serde_json::json!([]));
    let (_, all) = server.json("/api/labels");
    assert_eq!(all.as_array().unwrap().len(), 3);
}

#[test]
fn label_clusters_are_exact_on_a_planted_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let mut ds = common::fixture_dataset();
    let mut config = common::write_fixture(&ds, &tmp.path().join("first"));
    config.k_list = vec![8];
    let first = run_all(&config).unwrap();
    let clusters: ClustersRecord =
        serde_json::from_slice(&std::fs::read(first.dir.join("clusters_8.json")).unwrap()).unwrap();

    // Labels do not influence clustering: plant "A" in clusters 2 and 5
    // only, "B" everywhere, and rerun.
    for r in &mut ds.records {
        let c = clusters.assignments[r.row];
        r.label = Some(if c == 2 || c == 5 { "A" } else { "B" }.to_string());
    }
    let mut config2 = common::write_fixture(&ds, &tmp.path().join("second"));
    config2.k_list = vec![8];
    let second = run_all(&config2).unwrap();
    let server = TestServer::start(&second.dir);

    let (status, ids) = server.json("/api/label-clusters?k=8&classes=A");
    assert_eq!(status, 200);
    assert_eq!(ids, serde_json::json!([2, 5]));
    let (_, ids) = server.json("/api/label-clusters?k=8&classes=A,B");
    assert_eq!(ids, serde_json::json!([0, 1, 2, 3, 4, 5, 6, 7]));
    let (_, ids) = server.json("/api/label-clusters?k=8&classes=nope");
    assert_eq!(ids, serde_json::json!([]));
    let (_, ids) = server.json("/api/label-clusters?k=8");
    assert_eq!(ids, serde_json::json!([]));
    assert_eq!(server.status("/api/label-clusters?k=3&classes=A"), 404);
}

#[test]
fn thumbnails_and_images_are_served_immutably() {
    let tmp = tempfile::tempdir().unwrap();
    let (ds, bundle) = labeled_fixture(tmp.path(), true);
    let server = TestServer::start(&bundle);
    let id = &ds.records[7].id;

    let (status, body, resp) = server.get_bytes(&format!("/thumbs/{id}"));
    assert_eq!(status, 200);
    assert_eq!(resp["content-type"], "image/jpeg");
    assert!(resp["cache-control"].contains("immutable"));
    assert_eq!(&body[..2], &[0xFF, 0xD8]);

    let (status, body, resp) = server.get_bytes(&format!("/images/{id}"));
    assert_eq!(status, 200);
    assert_eq!(resp["content-type"], "image/png");
    let original = std::fs::read(tmp.path().join("input/images").join(format!("{id}.png"))).unwrap();
    assert_eq!(body, original);

    let (status, body) = server.json("/thumbs/not-an-id");
    assert_eq!(status, 404);
    assert_eq!(body["reason"], "unknown_id");

    let (_, samples) = server.json("/api/clusters/4/0/samples");
    let url = samples[0]["thumb_url"].as_str().unwrap().to_string();
    assert_eq!(server.status(&url), 200);
}

#[test]
fn embedding_only_bundle_has_no_media() {
    let tmp = tempfile::tempdir().unwrap();
    let (ds, bundle) = labeled_fixture(tmp.path(), false);
    let server = TestServer::start(&bundle);
    for kind in ["thumbs", "images"] {
        let (status, body) = server.json(&format!("/{kind}/{}", ds.records[0].id));
        assert_eq!(status, 404);
        assert_eq!(body["error"], "not_found");
        assert_eq!(body["reason"], "no_images");
    }
}

#[test]
fn responses_are_pure_under_concurrency() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, bundle) = labeled_fixture(tmp.path(), false);
    let server = TestServer::start(&bundle);
    let paths: Vec<String> = [
        "/api/summary".to_string(),
        "/api/clusters?k=4".to_string(),
        "/api/labels?q=sea".to_string(),
        "/api/label-clusters?k=4&classes=goldfish".to_string(),
    ]
    .into_iter()
    .chain((0..4).map(|c| format!("/api/clusters/4/{c}/samples")))
    .collect();
    let serial: Vec<Vec<u8>> = paths.iter().map(|p| server.get_bytes(p).1).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..8)
            .map(|t| {
                let (paths, serial, server) = (&paths, &serial, &server);
                s.spawn(move || {
                    for round in 0..5 {
                        for i in 0..paths.len() {
                            let j = (i + t + round) % paths.len();
                            assert_eq!(server.get_bytes(&paths[j]).1, serial[j]);
                        }
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
    });
}

#[test]
fn requests_before_load_get_503() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(AppState::pending(), &ServeOptions::default());
    rt.spawn(async move { axum::serve(listener, app).await });
    let url = format!("http://{addr}/api/summary");
    match ureq::get(&url).call() {
        Err(ureq::Error::Status(503, resp)) => {
            assert_eq!(resp.header("retry-after"), Some("1"));
            let body: Value = serde_json::from_reader(resp.into_reader()).unwrap();
            assert_eq!(body["reason"], "bundle_loading");
        }
        other => panic!("expected 503, got {other:?}"),
    }
    match ureq::get(&format!("http://{addr}/api/clusters?k=4")).call() {
        Err(ureq::Error::Status(code, _)) => assert_eq!(code, 503),
        other => panic!("expected 503, got {other:?}"),
    }
}

#[test]
fn unfinalized_bundle_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, bundle) = labeled_fixture(tmp.path(), false);
    let rt = tokio::runtime::Runtime::new().unwrap();
    let bind = |dir: PathBuf| {
        rt.block_on(PreparedServer::bind(&dir, ([127, 0, 0, 1], 0).into(), ServeOptions::default()))
    };

    std::fs::write(bundle.join(FINALIZED_MARKER), "0000\n").unwrap();
    assert!(matches!(bind(bundle.clone()), Err(ServerError::NotFinalized(_))));
    std::fs::remove_file(bundle.join(FINALIZED_MARKER)).unwrap();
    assert!(matches!(bind(bundle.clone()), Err(ServerError::NotFinalized(_))));
    assert!(matches!(ravel::server::BundleView::load(&bundle), Err(ServerError::NotFinalized(_))));
}

#[test]
fn root_serves_a_placeholder_or_the_ui_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, bundle) = labeled_fixture(tmp.path(), false);
    let server = TestServer::start(&bundle);
    let (status, body, _) = server.get_bytes("/");
    assert_eq!(status, 200);
    assert!(String::from_utf8(body).unwrap().contains("<title>ravel</title>"));

    let ui = tmp.path().join("ui");
    std::fs::create_dir_all(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<p>explorer</p>").unwrap();
    let rt = tokio::runtime::Runtime::new().unwrap();
    let view = ravel::server::BundleView::load(&bundle).unwrap();
    let options = ServeOptions {
        ui_dir: Some(ui),
        cors: true,
    };
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(AppState::loaded(view), &options);
    rt.spawn(async move { axum::serve(listener, app).await });
    let resp = ureq::get(&format!("http://{addr}/")).set("Origin", "http://example.test").call().unwrap();
    assert_eq!(resp.header("access-control-allow-origin"), Some("*"));
    assert_eq!(resp.into_string().unwrap(), "<p>explorer</p>");
    let summary = ureq::get(&format!("http://{addr}/api/summary")).call().unwrap();
    assert_eq!(summary.status(), 200);
}
