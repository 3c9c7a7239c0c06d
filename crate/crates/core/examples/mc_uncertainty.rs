//! Monte Carlo dropout on an untrained reduced network: the predictive mean,
//! the variance diagonal and the rejection decision for one image.
//!
//! `cargo run --release --example mc_uncertainty`

use capture_oneshot::bayes::{classify_with_rejection, mc_predict_seeded, mc_reduce, McConfig, McResult};
use capture_oneshot::dataset::render_splash;
use capture_oneshot::model::{init_model, DropoutMode, ModelConfig};
use capture_oneshot::Result;

pub fn run_example() -> Result<(McResult, McResult)> {
    // two one-hot passes that disagree: mean 0.5, variance 0.25 per class
    let hand = mc_reduce(&[vec![1.0, 0.0], vec![0.0, 1.0]], &McConfig::default())?;
    println!("hand case: mean {:?}, diag {:?}", hand.mean, hand.variance_diag);

    let cfg = ModelConfig {
        input_side: 32,
        blocks: vec![vec![8], vec![8]],
        ..ModelConfig::new(4, DropoutMode::Fixed { p: 0.3 })
    };
    let params = init_model(&cfg, 1)?;
    let image = render_splash(2, 0, 0, 32);
    let mc = McConfig {
        samples: 30,
        full_covariance: true,
        ..McConfig::default()
    };
    let result = mc_predict_seeded(&params, &cfg, &image, &mc, 9)?;
    let names: Vec<String> = (0..4).map(|i| format!("class_{i}")).collect();
    let p = classify_with_rejection(&result, &names, mc.reject_threshold)?;
    println!(
        "predicted {} with confidence {:.3}, uncertainty {:.5}, rejected {}",
        p.class_name, p.confidence, p.uncertainty, p.rejected
    );
    Ok((hand, result))
}

fn main() -> Result<()> {
    run_example()?;
    Ok(())
}
