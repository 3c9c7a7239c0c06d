//! Starts the inference service on a free local port with a reduced
//! checkpoint, then queries the health and classify endpoints.
//!
//! `cargo run --release --example http_service -- [OUT_DIR]`

use std::path::{Path, PathBuf};

use capture_oneshot::dataset::render_splash;
use capture_oneshot::model::{init_model, save_checkpoint, Checkpoint, DropoutMode, ModelConfig};
use capture_oneshot::service::{serve, ClassifyResponse, ServiceConfig};
use capture_oneshot::{Error, Result};

pub fn run_example(out: &Path) -> Result<(serde_json::Value, ClassifyResponse, u16)> {
    std::fs::create_dir_all(out)?;
    let cfg = ModelConfig {
        input_side: 32,
        blocks: vec![vec![8], vec![8]],
        ..ModelConfig::new(2, DropoutMode::fixed())
    };
    let ckpt = Checkpoint::new(cfg.clone(), vec!["a".into(), "b".into()], 0, init_model(&cfg, 1)?)?;
    let path = out.join("service.ckpt");
    save_checkpoint(&ckpt, &path)?;
    let body = render_splash(1, 0, 0, 64).to_png_bytes()?;

    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
        let base = format!("http://{}", listener.local_addr()?);
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let server = tokio::spawn(serve(listener, path, ServiceConfig::default(), async {
            let _ = stopped.await;
        }));
        let client = reqwest::Client::new();
        let http = |e: reqwest::Error| Error::Config(format!("http: {e}"));
        let health = loop {
            let r = client.get(format!("{base}/v1/healthz")).send().await.map_err(http)?;
            if r.status() == 200 {
                break r.json::<serde_json::Value>().await.map_err(http)?;
            }
            tokio::time::sleep(std::time::Duration::from_millis(20)).await;
        };
        println!("healthz: {health}");
        let response: ClassifyResponse = client
            .post(format!("{base}/v1/classify"))
            .header("content-type", "image/png")
            .body(body)
            .send()
            .await
            .map_err(http)?
            .json()
            .await
            .map_err(http)?;
        println!("classify: {}", serde_json::to_string(&response)?);
        let garbage = client
            .post(format!("{base}/v1/classify"))
            .body(vec![1u8, 2, 3])
            .send()
            .await
            .map_err(http)?;
        let status = garbage.status().as_u16();
        println!("garbage body: {status} {}", garbage.text().await.map_err(http)?);
        let _ = stop.send(());
        server.await.map_err(|e| Error::Config(e.to_string()))??;
        Ok((health, response, status))
    })
}

fn main() -> Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("capture_oneshot_service"));
    run_example(&out)?;
    Ok(())
}
