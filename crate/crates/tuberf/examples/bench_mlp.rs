//! Rough throughput probe for the tape on an MLP-shaped workload.

use std::time::Instant;

use tuberf::autodiff::{adam_step, AdamState, Params, Tape, Tensor};

fn main() {
    let points: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(20_000);
    let hidden: usize = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(48);
    let input_dim = 51;

    let mut params = Params::new();
    let mk = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| (i as f64 * 0.001).sin() * 0.1).collect())
            .unwrap()
    };
    let w1 = params.register("w1", mk(&[input_dim, hidden]));
    let b1 = params.register("b1", mk(&[hidden]));
    let w2 = params.register("w2", mk(&[hidden, hidden]));
    let b2 = params.register("b2", mk(&[hidden]));
    let w3 = params.register("w3", mk(&[hidden, hidden]));
    let b3 = params.register("b3", mk(&[hidden]));
    let w4 = params.register("w4", mk(&[hidden, 4]));
    let b4 = params.register("b4", mk(&[4]));
    let mut adam = AdamState::new(&params, 5e-4);

    let x = mk(&[points, input_dim]);
    let iters = 30;
    let start = Instant::now();
    for _ in 0..iters {
        let mut tape = Tape::new();
        let xn = tape.input(x.clone());
        let mut h = xn;
        for (w, b) in [(w1, b1), (w2, b2), (w3, b3)] {
            let wn = tape.param(&params, w);
            let bn = tape.param(&params, b);
            let lin = tape.matmul(h, wn).unwrap();
            let lin = tape.add(lin, bn).unwrap();
            h = tape.relu(lin);
        }
        let wn = tape.param(&params, w4);
        let bn = tape.param(&params, b4);
        let out = tape.matmul(h, wn).unwrap();
        let out = tape.add(out, bn).unwrap();
        let sq = tape.mul(out, out).unwrap();
        let loss = tape.mean(sq);
        tape.backward(loss, &mut params).unwrap();
        adam_step(&mut params, &mut adam);
    }
    let dt = start.elapsed().as_secs_f64();
    let flops_fwd = 2.0 * points as f64 * (input_dim * hidden + 2 * hidden * hidden + hidden * 4) as f64;
    let flops = 3.0 * flops_fwd * iters as f64;
    println!(
        "{points} points, hidden {hidden}: {:.1} ms/iter, approx {:.1} GFLOP/s",
        dt * 1000.0 / iters as f64,
        flops / dt / 1e9
    );
}
