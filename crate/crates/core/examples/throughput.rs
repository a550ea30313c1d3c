//! Rough timing of forward and training passes for the default networks.

use std::time::Instant;

use mcm::{backward, Tensor, UNet, UNetConfig, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mcm::Result<()> {
    let batch: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(32);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for cfg in [UNetConfig::base_default(), UNetConfig::mcm_default()] {
        let mut net = UNet::<f32>::build(&cfg, 0)?;
        println!("{} channels {:?}: {} parameters", cfg.base_channels, cfg.channel_multipliers, net.num_parameters());
        let x = Tensor::randn(&[batch, cfg.in_channels, cfg.image_size, cfg.image_size], &mut rng);
        let ts: Vec<usize> = (0..batch).map(|i| 1 + i * 7).collect();
        let start = Instant::now();
        let out = net.forward(&Var::constant(x.clone()), &ts)?;
        drop(out);
        let fwd = start.elapsed();
        let frozen = {
            let mut f = net.clone();
            f.freeze();
            let s = Instant::now();
            let _ = f.forward(&Var::constant(x.clone()), &ts)?;
            s.elapsed()
        };
        let start = Instant::now();
        let out = net.forward(&Var::constant(x.clone()), &ts)?;
        let mut loss = out[0].square()?.mean()?;
        for o in &out[1..] {
            loss = loss.add(&o.square()?.mean()?)?;
        }
        backward(&loss, net.params_mut())?;
        let train = start.elapsed();
        println!(
            "  batch {batch}: forward {:.3}s (frozen {:.3}s), forward+backward {:.3}s ({:.1} ms/image)",
            fwd.as_secs_f64(),
            frozen.as_secs_f64(),
            train.as_secs_f64(),
            train.as_secs_f64() * 1e3 / batch as f64
        );
    }
    Ok(())
}
