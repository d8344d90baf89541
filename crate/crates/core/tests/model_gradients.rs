use mtseg::model::{Mode, UNet, UNetConfig, Upsample};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(upsample: Upsample) -> UNet {
    UNet::new(UNetConfig { base_channels: 2, depth: 2, dropout: 0.5, upsample, ..UNetConfig::default() }).unwrap()
}

/// Scalar objective sum(weights * logits) so that dL/dlogits = weights.
fn objective(net: &UNet, p: &mtseg::model::ParamStore<f64>, x: &Array4<f64>, weights: &Array4<f64>) -> f64 {
    let pass = net.forward(p, x, Mode::Train { dropout_seed: 11 }, false).unwrap();
    (&pass.logits * weights).sum()
}

fn check(upsample: Upsample) {
    let net = tiny(upsample);
    let mut p = net.init_params::<f64>(3);
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let x = Array4::from_shape_simple_fn((2, 1, 8, 8), || r.gen_range(-1.0..1.0));
    let weights = Array4::from_shape_simple_fn((2, 1, 8, 8), || r.gen_range(-1.0..1.0));
    let pass = net.forward(&p, &x, Mode::Train { dropout_seed: 11 }, true).unwrap();
    let grads = net.backward(&p, &pass, &weights).unwrap();

    let h = 1e-6;
    let mut worst = 0.0f64;
    for (pi, g) in grads.0.iter().enumerate() {
        let n = g.len();
        for k in [0, n / 2, n - 1] {
            let orig = p.params[pi].value.as_slice().unwrap()[k];
            p.params[pi].value.as_slice_mut().unwrap()[k] = orig + h;
            let up = objective(&net, &p, &x, &weights);
            p.params[pi].value.as_slice_mut().unwrap()[k] = orig - h;
            let down = objective(&net, &p, &x, &weights);
            p.params[pi].value.as_slice_mut().unwrap()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = g.as_slice().unwrap()[k];
            let err = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-3);
            worst = worst.max(err);
            assert!(err < 1e-4, "{} [{k}]: analytic {an} vs fd {fd}", p.params[pi].name);
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn unet_backward_matches_finite_differences_transposed() {
    check(Upsample::Transposed);
}

#[test]
fn unet_backward_matches_finite_differences_nearest() {
    check(Upsample::Nearest);
}
