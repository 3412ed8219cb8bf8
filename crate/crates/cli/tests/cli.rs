use std::io::Cursor;
use std::path::Path;
use std::process::{Command, Output};

use image::{ImageBuffer, ImageFormat, Rgb};
use serde_json::Value;
use vsem_core::kg::{Lang, NodeId};
use vsem_core::pipeline::{FileSource, InMemorySource, SourceNode};

fn vsem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vsem"))
        .args(args)
        .env_remove("VSEM_ADDR")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn png(seed: u8) -> Vec<u8> {
    let img: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_pixel(2, 2, Rgb([seed, 3, 7]));
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png).unwrap();
    out
}

fn id(s: &str) -> NodeId {
    NodeId::new(s).unwrap()
}

/// Writes a small source, seeds and build config; returns their paths.
fn fixture(dir: &Path) {
    let mut src = InMemorySource::new();
    for i in 0..6u8 {
        src.insert_image(format!("img/{i}.png"), png(i));
    }
    let names = ["dog", "cat", "wolf", "fox", "lion", "tiger"];
    for (i, n) in names.iter().enumerate() {
        let mut node = SourceNode::new(id(n))
            .gloss(Lang::En, format!("the {n}"))
            .gloss(Lang::Fr, format!("le {n}"))
            .image(format!("img/{i}.png"));
        for (label, t) in [("is_a", (i + 1) % 6), ("part_of", (i + 2) % 6)] {
            node = node.relation(label, id(names[t]));
        }
        src.insert_node(node);
    }
    FileSource::write(&src, dir.join("source")).unwrap();
    std::fs::write(dir.join("seeds.txt"), "# seeds\ndog\n\ncat\n").unwrap();
    std::fs::write(
        dir.join("build.json"),
        r#"{"pipeline":{"target_node_count":100,"gloss_match_threshold":0.0},"provider":"mock:1","scorer":{"constant":1.0}}"#,
    )
    .unwrap();
}

fn p(dir: &Path, f: &str) -> String {
    dir.join(f).display().to_string()
}

#[test]
fn end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fixture(d);

    let o = vsem(&["build", "--seeds", &p(d, "seeds.txt"), "--source", &p(d, "source"), "--config", &p(d, "build.json"), "--out", &p(d, "graph")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_slice(&std::fs::read(d.join("graph/filter_report.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"], 2);

    let o = vsem(&["stats", "--graph", &p(d, "graph"), "--json"]);
    assert_eq!(code(&o), 0);
    let stats: Value = serde_json::from_slice(&o.stdout).unwrap();
    let nodes = stats["nodes"].as_u64().unwrap();
    assert!(nodes >= 2);
    assert_eq!(stats["glosses"].as_u64().unwrap(), 2 * nodes);
    let o = vsem(&["stats", "--graph", &p(d, "graph")]);
    assert_eq!(code(&o), 0);
    assert!(!o.stdout.is_empty());

    std::fs::write(d.join("split.json"), r#"{"eval_count_per_language":1,"rng_seed":3}"#).unwrap();
    let o = vsem(&["split", "--graph", &p(d, "graph"), "--spec", &p(d, "split.json"), "--out", &p(d, "splits")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("splits/manifest.json").exists());

    let o = vsem(&["index", "--graph", &p(d, "graph"), "--provider", "mock:16", "--languages", "en,fr", "--out", &p(d, "idx.vec")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = vsem(&["query", "--index", &p(d, "idx.vec"), "--text", "the dog", "--lang", "en", "-k", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["results"][0]["node"], "dog");
    assert_eq!(r["results"][0]["gloss"], "dog#en#0");

    std::fs::write(d.join("q.png"), png(9)).unwrap();
    let o = vsem(&["query", "--index", &p(d, "idx.vec"), "--image", &p(d, "q.png"), "-k", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    std::fs::write(
        d.join("queries.jsonl"),
        "{\"text\":\"the dog\",\"lang\":\"en\",\"gold\":\"dog\"}\n{\"text\":\"le cat\",\"lang\":\"fr\",\"gold\":\"cat\"}\n",
    )
    .unwrap();
    let o = vsem(&["eval", "--index", &p(d, "idx.vec"), "--queries", &p(d, "queries.jsonl"), "--out", &p(d, "eval.json")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let e: Value = serde_json::from_slice(&std::fs::read(d.join("eval.json")).unwrap()).unwrap();
    assert_eq!(e["hits"]["1"], 100.0);
    assert_eq!(e["mean_rank"], 1.0);
    assert!(e["per_language"]["fr"].is_object());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fixture(d);

    // usage
    assert_eq!(code(&vsem(&[])), 1);
    assert_eq!(code(&vsem(&["stats"])), 1);
    assert_eq!(code(&vsem(&["query", "--index", "x", "--text", "t"])), 1);
    assert_eq!(code(&vsem(&["--help"])), 0);

    // data / format
    assert_eq!(code(&vsem(&["stats", "--graph", &p(d, "missing")])), 2);
    std::fs::create_dir_all(d.join("bad")).unwrap();
    for f in ["nodes.jsonl", "glosses.jsonl", "facts.jsonl", "images.jsonl"] {
        std::fs::write(d.join("bad").join(f), "{oops\n").unwrap();
    }
    assert_eq!(code(&vsem(&["stats", "--graph", &p(d, "bad")])), 2);

    // provider failure
    std::fs::write(
        d.join("bad-provider.json"),
        r#"{"provider":"exit 7","scorer":{"constant":1.0}}"#,
    )
    .unwrap();
    let o = vsem(&["build", "--seeds", &p(d, "seeds.txt"), "--source", &p(d, "source"), "--config", &p(d, "bad-provider.json"), "--out", &p(d, "g2")]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn serve_refuses_broken_index() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("i.vec"), b"garbage").unwrap();
    let o = vsem(&["serve", "--index", &p(tmp.path(), "i.vec"), "--addr", "127.0.0.1:0"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("index"));
}
