//! Remote provider against the echo embedding server.

use semlogue::embeddings::{
    ConfiguredProvider, HashedProvider, Provider, ProviderConfig, ProviderKind, RemoteProvider,
};
use semlogue::server::EchoEmbedServer;
use std::time::Duration;

const DIM: usize = 256;

#[test]
fn remote_matches_local_hashed_and_preserves_order() {
    let server = EchoEmbedServer::start("127.0.0.1:0", DIM, 2).unwrap();
    let client = RemoteProvider::new(server.endpoint(), DIM, Duration::from_secs(5), 100, 1);
    let texts = vec![
        "hello there".to_string(),
        "".to_string(),
        "a third text".to_string(),
    ];
    let remote = client.embed(&texts).unwrap();
    let local = HashedProvider::new(DIM);
    for (t, r) in texts.iter().zip(&remote) {
        assert_eq!(r, &local.embed_one(t));
    }
    server.stop();
}

#[test]
fn batching_splits_250_texts_into_3_requests() {
    let server = EchoEmbedServer::start("127.0.0.1:0", DIM, 2).unwrap();
    let client = RemoteProvider::new(server.endpoint(), DIM, Duration::from_secs(5), 100, 0);
    let texts: Vec<String> = (0..250).map(|i| format!("text number {i}")).collect();
    let out = client.embed(&texts).unwrap();
    assert_eq!(out.len(), 250);
    assert_eq!(server.request_count(), 3);
    server.stop();
}

#[test]
fn wrong_dim_is_a_dim_mismatch_error() {
    let server = EchoEmbedServer::start("127.0.0.1:0", DIM, 1).unwrap();
    // client expects a different dimension than the server produces
    let client = RemoteProvider::new(server.endpoint(), DIM * 2, Duration::from_secs(5), 100, 0);
    let err = client.embed(&["x".to_string()]).unwrap_err();
    assert!(matches!(err, semlogue::Error::DimMismatch { .. }), "{err}");
    server.stop();
}

#[test]
fn unreachable_endpoint_errors_with_endpoint_and_batch() {
    let client = RemoteProvider::new(
        "http://127.0.0.1:1/embed".to_string(),
        DIM,
        Duration::from_millis(200),
        100,
        1,
    );
    let err = client.embed(&["x".to_string()]).unwrap_err();
    match err {
        semlogue::Error::RemoteEmbed {
            endpoint,
            batch_index,
            ..
        } => {
            assert!(endpoint.contains("127.0.0.1:1"));
            assert_eq!(batch_index, 0);
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn provider_config_builds_remote_end_to_end() {
    let server = EchoEmbedServer::start("127.0.0.1:0", DIM, 1).unwrap();
    let cfg = ProviderConfig {
        kind: ProviderKind::Remote,
        dim: DIM,
        endpoint: Some(server.endpoint()),
        ..ProviderConfig::default()
    };
    let provider: ConfiguredProvider<f64> = ConfiguredProvider::from_config(&cfg).unwrap();
    // tags are stripped client-side before the wire call
    let via_remote = provider.embed_one("<u> hi there <u>").unwrap();
    let local: ConfiguredProvider<f64> = ConfiguredProvider {
        provider: Provider::Hashed(HashedProvider::new(DIM)),
        strip_tags: true,
    };
    assert_eq!(via_remote, local.embed_one("<u> hi there <u>").unwrap());
    server.stop();
}
