use std::collections::BTreeSet;
use std::io::Cursor;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine;
use http_body_util::BodyExt;
use image::{ImageBuffer, ImageFormat, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

use vsem_core::corpus::write_graph;
use vsem_core::embed::{Embedding, EmbeddingProvider, MockProvider, ProviderError};
use vsem_core::kg::{
    ContentHash, Fact, FilterFlags, FrozenGraph, Gloss, ImageRecord, KnowledgeGraph, Lang, Node,
    NodeId, RelationType,
};
use vsem_core::retrieval::{retrieve_by_image, retrieve_by_sentence, GlossIndex, IndexMeta};
use vsem_service::{router, serve_on, AppState, Loaded, NodeDetail, ServiceConfig};

const DIM: usize = 8;

fn id(s: &str) -> NodeId {
    NodeId::new(s).unwrap()
}

fn png(seed: u32) -> Vec<u8> {
    let px = Rgb([seed as u8, (seed >> 8) as u8, (seed >> 16) as u8]);
    let img: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_pixel(1, 1, px);
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png).unwrap();
    out
}

/// Twenty nodes with English and French glosses, a few images and facts.
fn graph() -> KnowledgeGraph {
    let mut g = KnowledgeGraph::new();
    for i in 0..20 {
        let nid = id(&format!("bn:{i:05}n"));
        let mut node = Node::new(nid.clone());
        node.glosses.push(Gloss::new(nid.clone(), Lang::Fr, format!("zèbre {i}")).unwrap());
        node.glosses.push(Gloss::new(nid.clone(), Lang::En, format!("thing number {i}")).unwrap());
        if i % 3 == 0 {
            node.glosses.push(Gloss::new(nid.clone(), Lang::En, format!("another {i}")).unwrap());
        }
        for j in 0..(i % 3) {
            node.images.push(ImageRecord {
                node: nid.clone(),
                content_hash: ContentHash::of(format!("{i}-{j}").as_bytes()),
                locator: format!("img/{i}-{j}.jpg"),
                filter_flags: FilterFlags::ALL,
            });
        }
        g.add_node(node).unwrap();
    }
    for i in 0..20usize {
        let r = RelationType::ALL[i % RelationType::ALL.len()];
        g.add_fact(Fact::new(id(&format!("bn:{i:05}n")), r, id(&format!("bn:{:05}n", (i + 1) % 20))))
            .unwrap();
        g.add_fact(Fact::new(id(&format!("bn:{:05}n", (i + 7) % 20)), RelationType::IsA, id(&format!("bn:{i:05}n"))))
            .ok();
    }
    g
}

struct Fixture {
    index: GlossIndex,
    english: GlossIndex,
    graph: FrozenGraph,
    provider: Arc<MockProvider>,
}

fn fixture() -> Fixture {
    let provider = Arc::new(MockProvider::new(DIM));
    let g = graph();
    let langs: BTreeSet<Lang> = Lang::ALL.into_iter().collect();
    let index = GlossIndex::from_graph(&g, provider.as_ref(), &langs).unwrap();
    let english = index.restrict_to(&BTreeSet::from([Lang::En])).unwrap();
    Fixture {
        index,
        english,
        graph: g.freeze(),
        provider,
    }
}

fn config() -> ServiceConfig {
    ServiceConfig::new(SocketAddr::from(([127, 0, 0, 1], 0)), "unused")
}

fn app_with(f: &Fixture, cfg: &ServiceConfig) -> Router {
    let provider: Arc<dyn EmbeddingProvider> = f.provider.clone();
    let loaded = Loaded::new(f.index.clone(), Some(f.graph.clone()), provider).unwrap();
    router(AppState::ready(loaded), cfg)
}

fn app(f: &Fixture) -> Router {
    app_with(f, &config())
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

fn post_json(path: &str, body: &Value) -> Request<Body> {
    Request::post(path)
        .header("content-type", "application/json")
        .body(Body::from(serde_json::to_vec(body).unwrap()))
        .unwrap()
}

fn get(path: &str) -> Request<Body> {
    Request::get(path).body(Body::empty()).unwrap()
}

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

#[tokio::test]
async fn health_reports_index_counts() {
    let f = fixture();
    let (status, body) = send(&app(&f), get("/health")).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v, json!({"status": "ok", "nodes": 20, "glosses": 47}));
}

#[tokio::test]
async fn loading_state_returns_503() {
    let app = router(AppState::loading(), &config());
    for req in [get("/health"), post_json("/retrieve/sentence", &json!({"text": "x"})), get("/node/x")] {
        let (status, _) = send(&app, req).await;
        assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    }
}

#[tokio::test]
async fn unknown_path_is_404() {
    let f = fixture();
    let (status, body) = send(&app(&f), get("/nope")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(serde_json::from_slice::<Value>(&body).unwrap()["error"].is_string());
}

#[tokio::test]
async fn sentence_request_validation() {
    let f = fixture();
    let app = app(&f);
    let ok = send(&app, post_json("/retrieve/sentence", &json!({"text": "thing", "lang": "en", "k": 5}))).await;
    assert_eq!(ok.0, StatusCode::OK);
    let v: Value = serde_json::from_slice(&ok.1).unwrap();
    assert_eq!(v["results"].as_array().unwrap().len(), 5);

    for bad in [
        json!({"text": "thing", "k": 0}),
        json!({"text": "thing", "k": -3}),
        json!({"text": "thing", "k": 1001}),
        json!({"text": "thing", "k": 2.5}),
        json!({"text": "   ", "k": 3}),
        json!({"text": "", "k": 3}),
        json!({"text": "thing", "lang": "xx"}),
        json!({"k": 3}),
        json!({"text": "thing", "extra": true}),
    ] {
        let (status, _) = send(&app, post_json("/retrieve/sentence", &bad)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad}");
    }
    let (status, _) = send(
        &app,
        Request::post("/retrieve/sentence")
            .header("content-type", "application/json")
            .body(Body::from("{not json"))
            .unwrap(),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    // content type is enforced
    for ct in [None, Some("text/plain")] {
        let mut req = Request::post("/retrieve/sentence");
        if let Some(ct) = ct {
            req = req.header("content-type", ct);
        }
        let (status, _) = send(&app, req.body(Body::from(r#"{"text":"thing"}"#)).unwrap()).await;
        assert_eq!(status, StatusCode::UNSUPPORTED_MEDIA_TYPE);
    }
    let (status, _) = send(
        &app,
        Request::post("/retrieve/sentence")
            .header("content-type", "application/json; charset=utf-8")
            .body(Body::from(r#"{"text":"thing"}"#))
            .unwrap(),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
}

struct Failing;

impl EmbeddingProvider for Failing {
    fn dim(&self) -> usize {
        DIM
    }
    fn normalized(&self) -> bool {
        true
    }
    fn embed_text(&self, _: &str, _: Option<Lang>) -> Result<Embedding, ProviderError> {
        Err(ProviderError::Provider("model unavailable".into()))
    }
    fn embed_image(&self, _: &[u8]) -> Result<Embedding, ProviderError> {
        Err(ProviderError::Crash("gone".into()))
    }
}

#[tokio::test]
async fn provider_failure_is_422() {
    let f = fixture();
    let loaded = Loaded::new(f.index.clone(), None, Arc::new(Failing)).unwrap();
    let app = router(AppState::ready(loaded), &config());
    let (status, body) = send(&app, post_json("/retrieve/sentence", &json!({"text": "x"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(String::from_utf8(body).unwrap().contains("model unavailable"));
    let (status, _) = send(&app, post_json("/retrieve/image", &json!({"image_b64": b64(&png(1))}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    // node lookup without a graph
    let (status, _) = send(&app, get("/node/bn:00001n")).await;
    assert_eq!(status, StatusCode::NOT_IMPLEMENTED);
}

#[tokio::test]
async fn provider_dimension_must_match_index() {
    let f = fixture();
    assert!(Loaded::new(f.index.clone(), None, Arc::new(MockProvider::new(DIM + 1))).is_err());
    let mut g = graph();
    g = {
        // a graph lacking an indexed node is rejected
        let mut smaller = KnowledgeGraph::new();
        for n in g.nodes().filter(|n| n.id.as_str() != "bn:00003n") {
            smaller.add_node(n.clone()).unwrap();
        }
        smaller
    };
    assert!(Loaded::new(f.index.clone(), Some(g.freeze()), f.provider.clone()).is_err());
}

#[tokio::test]
async fn image_requests() {
    // toy index with a single English gloss
    let mut g = KnowledgeGraph::new();
    let mut n = Node::new(id("dog"));
    n.glosses.push(Gloss::new(id("dog"), Lang::En, "a dog").unwrap());
    g.add_node(n).unwrap();
    let p = Arc::new(MockProvider::new(DIM));
    let idx = GlossIndex::from_graph(&g, p.as_ref(), &BTreeSet::from([Lang::En])).unwrap();
    let app = router(AppState::ready(Loaded::new(idx, Some(g.freeze()), p).unwrap()), &config());

    let (status, body) = send(&app, post_json("/retrieve/image", &json!({"image_b64": b64(&png(7))}))).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["results"].as_array().unwrap().len(), 1);
    assert_eq!(v["results"][0]["node"], "dog");

    let (status, _) = send(&app, post_json("/retrieve/image", &json!({"image_b64": b64(b"just some text")}))).await;
    assert_eq!(status, StatusCode::UNSUPPORTED_MEDIA_TYPE);
    let (status, _) = send(&app, post_json("/retrieve/image", &json!({"image_b64": "%%% not base64"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = send(&app, post_json("/retrieve/image", &json!({"image_b64": b64(&png(7)), "k": 0}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let mut truncated = png(7);
    truncated.truncate(truncated.len() - 12);
    let (status, _) = send(&app, post_json("/retrieve/image", &json!({"image_b64": b64(&truncated)}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn image_needs_english_glosses() {
    let mut g = KnowledgeGraph::new();
    let mut n = Node::new(id("chien"));
    n.glosses.push(Gloss::new(id("chien"), Lang::Fr, "un chien").unwrap());
    g.add_node(n).unwrap();
    let p = Arc::new(MockProvider::new(DIM));
    let idx = GlossIndex::from_graph(&g, p.as_ref(), &BTreeSet::from([Lang::Fr])).unwrap();
    let app = router(AppState::ready(Loaded::new(idx, None, p).unwrap()), &config());
    let (status, _) = send(&app, post_json("/retrieve/image", &json!({"image_b64": b64(&png(1))}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn body_over_limit_is_413() {
    let f = fixture();
    let app = app(&f);
    let huge = "A".repeat(9 * 1024 * 1024);
    let (status, _) = send(&app, post_json("/retrieve/image", &json!({"image_b64": huge}))).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);

    let mut small = config();
    small.max_body_bytes = 64;
    let app = app_with(&f, &small);
    let (status, _) = send(&app, post_json("/retrieve/image", &json!({"image_b64": b64(&png(3))}))).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn node_detail_matches_graph() {
    let f = fixture();
    let app = app(&f);
    let (status, body) = send(&app, get("/node/bn%3A00003n")).await;
    assert_eq!(status, StatusCode::OK);
    let d: NodeDetail = serde_json::from_slice(&body).unwrap();
    assert_eq!(d.id, "bn:00003n");
    let glosses: Vec<(String, String)> = d.glosses.iter().map(|g| (g.lang.code().to_string(), g.text.clone())).collect();
    assert_eq!(
        glosses,
        vec![
            ("en".to_string(), "another 3".to_string()),
            ("en".to_string(), "thing number 3".to_string()),
            ("fr".to_string(), "zèbre 3".to_string()),
        ]
    );
    for i in 0..20 {
        let nid = format!("bn:{i:05}n");
        let (status, body) = send(&app, get(&format!("/node/{nid}"))).await;
        assert_eq!(status, StatusCode::OK);
        let d: NodeDetail = serde_json::from_slice(&body).unwrap();
        let want: Vec<(RelationType, String)> = f
            .graph
            .neighbors(&nid, None)
            .unwrap()
            .into_iter()
            .map(|(r, n)| (r, n.to_string()))
            .collect();
        let got: Vec<(RelationType, String)> = d.neighbors.iter().map(|n| (n.relation, n.node.clone())).collect();
        assert_eq!(got, want);
        assert_eq!(d.images.len(), i % 3);
        assert!(d.images.windows(2).all(|w| w[0] <= w[1]));
    }
    let (status, _) = send(&app, get("/node/bn:99999n")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn responses_equal_library_calls() {
    let f = fixture();
    let app = app(&f);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..50 {
        let k = rng.random_range(1..=25usize);
        let (req, want) = if i % 2 == 0 {
            let lang = Lang::ALL[rng.random_range(0..Lang::ALL.len())];
            let text = format!("query {}", rng.random::<u32>());
            let want = retrieve_by_sentence(&f.index, f.provider.as_ref(), &text, lang, k).unwrap();
            (post_json("/retrieve/sentence", &json!({"text": text, "lang": lang, "k": k})), want)
        } else {
            let bytes = png(rng.random());
            let want = retrieve_by_image(&f.english, f.provider.as_ref(), &bytes, k).unwrap();
            (post_json("/retrieve/image", &json!({"image_b64": b64(&bytes), "k": k})), want)
        };
        let (status, body) = send(&app, req).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body, serde_json::to_vec(&want).unwrap(), "request {i}");
    }
}

#[tokio::test]
async fn identical_requests_identical_bodies() {
    let f = fixture();
    let app = app(&f);
    let req = || post_json("/retrieve/sentence", &json!({"text": "thing number 4", "k": 20}));
    let a = send(&app, req()).await;
    let b = send(&app, req()).await;
    assert_eq!(a, b);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_succeed() {
    let f = fixture();
    let mut cfg = config();
    cfg.max_concurrent = 4;
    let app = app_with(&f, &cfg);
    let want = send(&app, post_json("/retrieve/sentence", &json!({"text": "shared", "k": 7}))).await;
    let tasks: Vec<_> = (0..16)
        .map(|_| {
            let app = app.clone();
            tokio::spawn(async move { send(&app, post_json("/retrieve/sentence", &json!({"text": "shared", "k": 7}))).await })
        })
        .collect();
    for t in tasks {
        assert_eq!(t.await.unwrap(), want);
    }
}

async fn raw_get(addr: SocketAddr, path: &str) -> Option<String> {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let mut s = tokio::net::TcpStream::connect(addr).await.ok()?;
    s.write_all(format!("GET {path} HTTP/1.1\r\nhost: x\r\nconnection: close\r\n\r\n").as_bytes())
        .await
        .ok()?;
    let mut out = String::new();
    s.read_to_string(&mut out).await.ok()?;
    Some(out)
}

#[tokio::test]
async fn serve_loads_index_then_answers() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let gdir = dir.path().join("graph");
    write_graph(&f.graph, &gdir).unwrap();
    let ipath = dir.path().join("index.vec");
    f.index
        .clone()
        .with_meta(IndexMeta {
            provider: Some(format!("mock:{DIM}")),
            graph: Some("graph".into()),
        })
        .save(&ipath)
        .unwrap();

    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let cfg = ServiceConfig::new(addr, &ipath);
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve_on(listener, cfg, async {
        let _ = rx.await;
    }));

    let mut health = String::new();
    for _ in 0..100 {
        health = raw_get(addr, "/health").await.unwrap_or_default();
        if health.starts_with("HTTP/1.1 200") {
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    assert!(health.starts_with("HTTP/1.1 200"), "{health}");
    assert!(health.contains(r#""nodes":20"#));
    let node = raw_get(addr, "/node/bn:00002n").await.unwrap();
    assert!(node.starts_with("HTTP/1.1 200"), "{node}");

    tx.send(()).unwrap();
    server.await.unwrap().unwrap();
}

#[tokio::test]
async fn serve_refuses_invalid_index() {
    let dir = tempfile::tempdir().unwrap();
    let ipath = dir.path().join("index.vec");
    std::fs::write(&ipath, b"not a vector file").unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let cfg = ServiceConfig::new(listener.local_addr().unwrap(), &ipath);
    let r = tokio::time::timeout(
        Duration::from_secs(10),
        serve_on(listener, cfg, std::future::pending()),
    )
    .await
    .expect("server should stop on its own");
    assert!(r.is_err());

    let mut bad = config();
    bad.max_concurrent = 0;
    assert!(bad.validate().is_err());
}
