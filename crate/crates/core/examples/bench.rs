use ddae_core::backbone::{build_ddae, DDAEConfig};
use ndarray::Array4;
use std::time::Instant;

fn main() {
    let net = build_ddae(&DDAEConfig::desk(), 1).unwrap();
    println!("desk params: {}", net.param_count());
    let x = Array4::from_shape_fn((64, 3, 32, 32), |(n, c, h, w)| {
        ((n + c + h + w) as f32 * 0.37).sin() * 0.5
    });
    let t: Vec<usize> = (0..64).map(|i| 1 + i * 15).collect();
    // warm
    let _ = net.forward_eps(&x, &t).unwrap();
    let start = Instant::now();
    let reps = 3;
    for _ in 0..reps {
        let _ = net.forward_eps(&x, &t).unwrap();
    }
    let f = start.elapsed().as_secs_f64() / reps as f64;
    println!("forward batch64: {:.3}s ({:.1} img/s)", f, 64.0 / f);
    let start = Instant::now();
    for _ in 0..reps {
        let (eps, cache) = net.forward_train(&x, &t).unwrap();
        let d = eps.mapv(|v| v * 1e-4);
        let _ = net.backward_from_eps(&cache, &d, false);
    }
    let fb = start.elapsed().as_secs_f64() / reps as f64;
    println!("train step batch64: {:.3}s ({:.1} img/s)", fb, 64.0 / fb);
    println!("est. epoch on 5k imgs: {:.1}s", 5000.0 / (64.0 / fb));
}
