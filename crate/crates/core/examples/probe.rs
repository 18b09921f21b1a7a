use std::time::Instant;

use gaitnet_core::data::{generate_dataset, GeneratorConfig};
use gaitnet_core::train::{train, TrainConfig};

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(12);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let data = generate_dataset(&GeneratorConfig::default(), [120, 120, 120, 120], 0);
    let cfg = TrainConfig { epochs, learning_rate: lr, seed: 0, ..Default::default() };
    let t0 = Instant::now();
    let run = train::<f32>(&cfg, &data, |ep| {
        println!(
            "epoch {} loss {:.4} ce {:.4} mse {:.4} fr {:.4} acc {:.3} f1 {:.3} ({:.1}s)",
            ep.epoch,
            ep.loss,
            ep.ce,
            ep.mse,
            ep.fr,
            ep.eval_accuracy,
            ep.eval_macro_f1,
            t0.elapsed().as_secs_f64()
        );
    })
    .unwrap();
    println!("total {:.1}s best_acc {:.3}", t0.elapsed().as_secs_f64(), run.best_accuracy);
}
