//! Times student forward+backward and teacher forward at desk scale.

use std::time::Instant;

use mtseg::model::{Mode, UNet, UNetConfig};
use ndarray::Array4;

fn main() {
    let net = UNet::new(UNetConfig { base_channels: 16, ..UNetConfig::default() }).unwrap();
    let p = net.init_params::<f32>(0);
    let x = Array4::from_shape_fn((8, 1, 64, 64), |(n, _, i, j)| ((n + i * j) % 7) as f32 / 7.0);
    let g = Array4::from_elem((8, 1, 64, 64), 1e-3f32);
    let reps = 10;
    let t = Instant::now();
    for r in 0..reps {
        let pass = net.forward(&p, &x, Mode::Train { dropout_seed: r }, true).unwrap();
        let _ = net.backward(&p, &pass, &g).unwrap();
    }
    let fb = t.elapsed().as_secs_f64() / reps as f64;
    let t = Instant::now();
    for r in 0..reps {
        let _ = net.forward(&p, &x, Mode::Train { dropout_seed: r }, false).unwrap();
    }
    let f = t.elapsed().as_secs_f64() / reps as f64;
    println!("student fwd+bwd: {:.1} ms, forward only: {:.1} ms per batch of 8", fb * 1e3, f * 1e3);
}
