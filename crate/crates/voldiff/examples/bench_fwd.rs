use std::time::Instant;
use voldiff::model::{param_init, unet_forward_batch, ModelWeights, UNetConfig};

fn main() {
    let cfg = UNetConfig::default();
    let store = param_init(&cfg, 1).unwrap();
    let weights = ModelWeights::resolve(store.params(), &cfg).unwrap();
    let cond = vec![0.1; 3 * 81];
    let scalars = [0.0; 5];
    for lanes in [1usize, 10, 100] {
        let noisy = vec![0.5; 81 * lanes];
        let reps = (20_000 / lanes).max(20);
        let start = Instant::now();
        for r in 0..reps {
            let t = r % 500 + 1;
            let out = unet_forward_batch(&weights, &cond, &noisy, lanes, t, 500, &scalars).unwrap();
            std::hint::black_box(out);
        }
        let dt = start.elapsed().as_secs_f64();
        let flops = 3.1e6 * lanes as f64 * reps as f64;
        println!(
            "lanes {lanes:>3}: {:.3} ms/call, {:.2} Gflop/s",
            dt / reps as f64 * 1e3,
            flops / dt / 1e9
        );
    }
}
