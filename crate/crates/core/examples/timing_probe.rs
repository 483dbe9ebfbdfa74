use morse_core::autodiff::Tape;
use morse_core::nn::gaussian;
use morse_core::rng::stream;
use std::time::Instant;

fn main() {
    // Conv microbench: 24ch -> 8ch, 3x3 at 128x128 (the gate's first layer shape).
    let mut rng = stream(0, 1);
    let x = gaussian::<f32>(vec![24, 128, 128], 0.0, 1.0, &mut rng);
    let w = gaussian::<f32>(vec![8, 24, 3, 3], 0.0, 0.1, &mut rng);
    let b = gaussian::<f32>(vec![8], 0.0, 0.1, &mut rng);
    let macs = 24.0 * 8.0 * 9.0 * 128.0 * 128.0;
    let reps = 50;
    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        let xv = tape.input(x.clone()).unwrap();
        let wv = tape.input(w.clone()).unwrap();
        let bv = tape.input(b.clone()).unwrap();
        std::hint::black_box(tape.value(tape.conv2d(xv, wv, bv).unwrap()));
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("conv 24->8 3x3 @128: {:.3} ms, {:.2} Gflop/s", dt * 1e3, 2.0 * macs / dt / 1e9);

    // Without tape: raw kernel timing via 1000 reps of smaller shape.
    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        let xv = tape.input(x.clone()).unwrap();
        std::hint::black_box(tape.value(tape.relu(xv).unwrap()));
    }
    let dt2 = t0.elapsed().as_secs_f64() / reps as f64;
    println!("relu node on [24,128,128]: {:.3} ms", dt2 * 1e3);
}
