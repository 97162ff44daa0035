use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use adaptok::calibration::{average_compression, RatioSet, ScoreHistogram, Thresholds};
use adaptok::complexity::ComplexityScore;
use adaptok_cli::run;

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("adaptok").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    lines
        .map(|l| header.iter().map(|h| h.to_string()).zip(l.split(',').map(str::to_string)).collect())
        .collect()
}

fn synth(dir: &Path, count: usize, resolution: usize) -> PathBuf {
    let data = dir.join("data");
    let (c, r) = (count.to_string(), resolution.to_string());
    assert_eq!(cli(&["synth", "--count", &c, "--resolution", &r, "--seed", "3", "--out", p(&data)]), 0);
    data
}

#[test]
fn calibrate_hits_target_and_matches_exhaustive_scan() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 80, 16);
    let scored = tmp.path().join("scored");
    assert_eq!(
        cli(&[
            "score",
            "--descriptions",
            p(&data.join("descriptions.jsonl")),
            "--images",
            p(&data.join("images")),
            "--thresholds",
            "2,4",
            "--out",
            p(&scored),
        ]),
        0
    );
    let rows = read_rows(&scored.join("scores.csv"));
    assert_eq!(rows.len(), 80);
    assert!(rows.iter().all(|r| !r["dct_complexity"].is_empty() && !r["ratio"].is_empty()));

    let cal = tmp.path().join("cal");
    assert_eq!(
        cli(&["calibrate", "--scores", p(&scored.join("scores.csv")), "--target-ratio", "8", "--out", p(&cal)]),
        0
    );
    let ranked = read_rows(&cal.join("thresholds.csv"));
    assert!(!ranked.is_empty());

    // Exhaustive scan oracle.
    let ratios = RatioSet::new(4, 8, 16).unwrap();
    let hist = ScoreHistogram::from_scores(rows.iter().map(|r| ComplexityScore::new(r["score"].parse().unwrap()).unwrap()));
    let mut want: Vec<(f64, f64, Thresholds)> = Vec::new();
    for t in Thresholds::all() {
        let d = hist.induced(t).unwrap();
        let avg = average_compression(d, ratios);
        if (avg - 8.0).abs() / 8.0 <= 0.05 {
            let h: f64 = d.as_array().iter().filter(|&&q| q > 0.0).map(|&q| -q * q.ln()).sum();
            want.push((h, (avg - 8.0).abs(), t));
        }
    }
    want.sort_by(|x, y| {
        let e = if (x.0 - y.0).abs() <= 1e-12 { std::cmp::Ordering::Equal } else { y.0.total_cmp(&x.0) };
        e.then(if (x.1 - y.1).abs() <= 1e-12 { std::cmp::Ordering::Equal } else { x.1.total_cmp(&y.1) })
            .then(x.2.cmp(&y.2))
    });
    let got: Vec<Thresholds> = ranked
        .iter()
        .map(|r| Thresholds::new(r["a"].parse().unwrap(), r["b"].parse().unwrap()).unwrap())
        .collect();
    assert_eq!(got, want.iter().map(|w| w.2).collect::<Vec<_>>());
    for r in &ranked {
        let avg: f64 = r["avg_ratio"].parse().unwrap();
        assert!((avg - 8.0).abs() / 8.0 <= 0.05);
    }

    // Impossible target: header-only output, data error.
    let none = tmp.path().join("none");
    assert_eq!(
        cli(&["calibrate", "--scores", p(&scored.join("scores.csv")), "--target-ratio", "100", "--out", p(&none)]),
        2
    );
    assert_eq!(read_rows(&none.join("thresholds.csv")).len(), 0);
}

#[test]
fn oracle_filter_then_max() {
    let tmp = tempfile::tempdir().unwrap();
    let table = tmp.path().join("mse.csv");
    let triples = [
        ("a", [0.0040, 0.0041, 0.0060]),
        ("b", [0.0010, 0.0030, 0.0024]),
        ("c", [0.0050, 0.0050, 0.0050]),
        ("d", [0.0100, 0.0020, 0.0030]),
        ("e", [0.0001, 0.0200, 0.0016]),
    ];
    let mut text = "id,mse_f1,mse_f2,mse_f3\n".to_string();
    for (id, m) in triples {
        text.push_str(&format!("{id},{},{},{}\n", m[0], m[1], m[2]));
    }
    std::fs::write(&table, text).unwrap();
    let out = tmp.path().join("o");
    assert_eq!(
        cli(&["oracle", "--mse", p(&table), "--tau", "0.0015", "--ratios", "8,16,32", "--out", p(&out)]),
        0
    );
    let rows = read_rows(&out.join("oracle.csv"));
    for ((_, m), row) in triples.iter().zip(&rows) {
        let best = m.iter().cloned().fold(f64::INFINITY, f64::min);
        let want = [8, 16, 32].into_iter().zip(m).filter(|(_, v)| **v - best < 0.0015).map(|(f, _)| f).max().unwrap();
        assert_eq!(row["oracle_ratio"], want.to_string());
    }
    assert_eq!(rows[0]["oracle_ratio"], "16");
    // tau is required
    assert_eq!(cli(&["oracle", "--mse", p(&table), "--out", p(&out)]), 1);
    assert_eq!(cli(&["oracle", "--mse", p(&table), "--tau", "0", "--out", p(&out)]), 2);
}

fn tiny_model_config(dir: &Path) -> PathBuf {
    let path = dir.join("model.json");
    std::fs::write(
        &path,
        r#"{"resolution": 16, "block_out_channels": [8, 8, 8], "latent_channels": 2, "ratios": {"f1": 2, "f2": 4, "f3": 8}, "middle_block_units": 1, "norm_groups": 4}"#,
    )
    .unwrap();
    path
}

fn train(data: &Path, model: &Path, out: &Path, extra: &[&str]) -> i32 {
    let mut args = vec![
        "train",
        "--data",
        p(data),
        "--model-config",
        p(model),
        "--thresholds",
        "2,4",
        "--steps",
        "4",
        "--batch",
        "4",
        "--gan-start",
        "2",
        "--seed",
        "11",
        "--out",
        p(out),
    ];
    args.extend_from_slice(extra);
    cli(&args)
}

#[test]
fn train_encode_decode_eval_consistency_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 12, 16);
    let model = tiny_model_config(tmp.path());
    let (run1, run2) = (tmp.path().join("run1"), tmp.path().join("run2"));
    assert_eq!(train(&data, &model, &run1, &[]), 0);
    assert_eq!(train(&data, &model, &run2, &[]), 0);
    for f in ["final.catm", "metrics.csv", "recon.csv", "labels.csv"] {
        assert_eq!(std::fs::read(run1.join(f)).unwrap(), std::fs::read(run2.join(f)).unwrap(), "{f}");
    }
    let metrics = read_rows(&run1.join("metrics.csv"));
    assert_eq!(metrics.len(), 4);

    let ck = run1.join("final.catm");
    let enc = tmp.path().join("enc");
    assert_eq!(
        cli(&["encode", "--checkpoint", p(&ck), "--images", p(&data.join("images")), "--labels", p(&run1.join("labels.csv")), "--out", p(&enc)]),
        0
    );
    let dec = tmp.path().join("dec");
    assert_eq!(cli(&["decode", "--checkpoint", p(&ck), "--latents", p(&enc.join("latents.catl")), "--out", p(&dec)]), 0);
    let ev = tmp.path().join("ev");
    assert_eq!(
        cli(&[
            "eval",
            "--reference",
            p(&data.join("images")),
            "--recon",
            p(&dec.join("images")),
            "--latents",
            p(&enc.join("latents.catl")),
            "--out",
            p(&ev),
        ]),
        0
    );
    let recon: BTreeMap<String, (String, f64)> = read_rows(&run1.join("recon.csv"))
        .into_iter()
        .map(|r| (r["id"].clone(), (r["ratio"].clone(), r["mse"].parse().unwrap())))
        .collect();
    let evals = read_rows(&ev.join("eval.csv"));
    assert_eq!(evals.len(), 12);
    for r in &evals {
        let (ratio, want) = &recon[&r["id"]];
        assert_eq!(&r["ratio"], ratio);
        let got: f64 = r["mse"].parse().unwrap();
        assert!((got - want).abs() <= 1e-6, "{}: {got} vs {want}", r["id"]);
    }

    // Every ratio from the checkpoint directly.
    let ev_all = tmp.path().join("ev_all");
    assert_eq!(cli(&["eval", "--reference", p(&data.join("images")), "--checkpoint", p(&ck), "--out", p(&ev_all)]), 0);
    assert_eq!(read_rows(&ev_all.join("eval.csv")).len(), 36);

    // Encoding is deterministic, including sampled latents.
    let enc2 = tmp.path().join("enc2");
    let enc3 = tmp.path().join("enc3");
    for d in [&enc2, &enc3] {
        assert_eq!(
            cli(&["encode", "--checkpoint", p(&ck), "--images", p(&data.join("images")), "--ratio", "4", "--sample", "--seed", "5", "--out", p(d)]),
            0
        );
    }
    assert_eq!(std::fs::read(enc2.join("latents.catl")).unwrap(), std::fs::read(enc3.join("latents.catl")).unwrap());

    // Report joins the tables.
    let rep = tmp.path().join("rep");
    assert_eq!(
        cli(&["report", "--scores", p(&run1.join("labels.csv")), "--eval", p(&ev.join("eval.csv")), "--resolution", "16", "--ratios", "2,4,8", "--out", p(&rep)]),
        0
    );
    let report: BTreeMap<String, String> = read_rows(&rep.join("report.csv")).into_iter().map(|r| (r["metric"].clone(), r["value"].clone())).collect();
    assert_eq!(report["n_images"], "12");
    assert!(report.contains_key("average_compression") && report.contains_key("mean_mse"));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 10, 16);
    let model = tiny_model_config(tmp.path());
    let full = tmp.path().join("full");
    assert_eq!(train(&data, &model, &full, &[]), 0);
    let part = tmp.path().join("part");
    assert_eq!(train(&data, &model, &part, &["--checkpoint-every", "3"]), 0);
    let resumed = tmp.path().join("resumed");
    let ck = part.join("step_000003.catm");
    assert_eq!(train(&data, &model, &resumed, &["--resume", p(&ck)]), 0);
    let a = adaptok::nestedvae::Checkpoint::load(&full.join("final.catm")).unwrap();
    let b = adaptok::nestedvae::Checkpoint::load(&resumed.join("final.catm")).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(std::fs::read(full.join("recon.csv")).unwrap(), std::fs::read(resumed.join("recon.csv")).unwrap());
}

#[test]
fn usage_and_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["frobnicate"]), 1);
    assert_eq!(cli(&["calibrate", "--bogus"]), 1);
    assert_eq!(cli(&[]), 1);
    assert_eq!(cli(&["--help"]), 0);
    let missing = tmp.path().join("missing.csv");
    assert_eq!(cli(&["calibrate", "--scores", p(&missing), "--target-ratio", "8", "--out", p(tmp.path())]), 2);
    assert_eq!(cli(&["score", "--descriptions", p(&missing), "--thresholds", "4,2", "--out", p(tmp.path())]), 1);
}

/// Serves `n` requests answering every prompt with `reply`; returns the URL
/// and a handle yielding the raw requests.
fn serve(n: usize, reply: &'static str) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/score", listener.local_addr().unwrap());
    let h = std::thread::spawn(move || {
        let mut seen = Vec::new();
        for stream in listener.incoming().take(n) {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            head.push_str(&String::from_utf8(body).unwrap());
            seen.push(head);
            let payload = format!("{{\"response\": \"{reply}\"}}");
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            )
            .unwrap();
        }
        seen
    });
    (url, h)
}

#[test]
fn http_scorer_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), 3, 16);
    let (url, server) = serve(3, "Score: 7 out of 9");
    let out = tmp.path().join("s");
    assert_eq!(
        cli(&[
            "score",
            "--descriptions",
            p(&data.join("descriptions.jsonl")),
            "--scorer",
            "http",
            "--endpoint",
            &url,
            "--thresholds",
            "2,4",
            "--out",
            p(&out),
        ]),
        0
    );
    let requests = server.join().unwrap();
    assert_eq!(requests.len(), 3);
    assert!(requests.iter().all(|r| r.starts_with("POST /score") && r.contains("\"prompt\"")));
    let rows = read_rows(&out.join("scores.csv"));
    assert!(rows.iter().all(|r| r["score"] == "7" && r["ratio"] == "4"));
    let audit = std::fs::read_to_string(out.join("score_audit.jsonl")).unwrap();
    assert_eq!(audit.lines().count(), 3);
    assert!(audit.contains("Score: 7 out of 9"));

    // Unreachable endpoint: falls back to the mock, or fails when asked to.
    let dead = TcpListener::bind("127.0.0.1:0").unwrap();
    let dead_url = format!("http://{}/score", dead.local_addr().unwrap());
    drop(dead);
    let args = |out: &Path, extra: Option<&'static str>| {
        let mut v = vec![
            "score".to_string(),
            "--descriptions".into(),
            p(&data.join("descriptions.jsonl")).into(),
            "--scorer".into(),
            "http".into(),
            "--endpoint".into(),
            dead_url.clone(),
            "--retries".into(),
            "0".into(),
            "--out".into(),
            p(out).into(),
        ];
        v.extend(extra.map(String::from));
        v
    };
    let fb = tmp.path().join("fb");
    assert_eq!(run(std::iter::once("adaptok".to_string()).chain(args(&fb, None))), 0);
    assert!(std::fs::read_to_string(fb.join("score_audit.jsonl")).unwrap().contains("\"fell_back\":true"));
    let hard = tmp.path().join("hard");
    assert_eq!(run(std::iter::once("adaptok".to_string()).chain(args(&hard, Some("--no-fallback")))), 2);
}
