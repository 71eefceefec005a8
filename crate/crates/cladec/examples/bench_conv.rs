use cladec::ops::*;
use std::time::Instant;

fn bench(name: &str, g: &ConvGeom, iters: usize) {
    let x = vec![0.5f32; g.n * g.c_in * g.h * g.w];
    let k = vec![0.1f32; g.c_out * g.c_in * g.k * g.k];
    let b = vec![0.0f32; g.c_out];
    let gout = vec![0.3f32; g.n * g.c_out * g.oh * g.ow];
    let macs = (g.n * g.c_out * g.oh * g.ow * g.c_in * g.k * g.k) as f64;
    let t0 = Instant::now();
    for _ in 0..iters {
        let _ = conv2d_forward(&x, &k, Some(&b), g);
    }
    let fwd = t0.elapsed().as_secs_f64() / iters as f64;
    let t1 = Instant::now();
    for _ in 0..iters {
        let _ = conv2d_backward(Some(&x), &gout, &k, g, true, true);
    }
    let bwd = t1.elapsed().as_secs_f64() / iters as f64;
    // deconv fwd on the same geometry (from the conv-output side)
    let xd = vec![0.5f32; g.n * g.c_out * g.oh * g.ow];
    let t2 = Instant::now();
    for _ in 0..iters {
        let _ = conv2d_input_grad(&xd, &k, g);
    }
    let dfwd = t2.elapsed().as_secs_f64() / iters as f64;
    let t3 = Instant::now();
    for _ in 0..iters {
        let _ = deconv2d_backward(Some(&xd), &x, &k, g, true, true);
    }
    let dbwd = t3.elapsed().as_secs_f64() / iters as f64;
    println!("{name}: conv fwd {:.2} ms | conv bwd {:.2} ms | deconv fwd {:.2} ms | deconv bwd {:.2} ms  ({:.0} MFLOP fwd)",
        fwd * 1e3, bwd * 1e3, dfwd * 1e3, dbwd * 1e3, 2.0 * macs / 1e6);
}

fn main() {
    for (name, ci, h, w, co, k, s, p) in [
        ("dec s1 (128ch @2x2)", 128usize, 2usize, 2usize, 128usize, 5usize, 2usize, 2usize),
        ("dec s2 (128->64 @4)", 64, 4, 4, 128, 5, 2, 2),
        ("dec s3 (64->32 @8)", 32, 8, 8, 64, 5, 2, 2),
        ("dec s4 (32->16 @16)", 16, 16, 16, 32, 5, 2, 2),
        ("dec s5 (16->1 @32)", 1, 32, 32, 16, 5, 2, 2),
        ("enc c1 (1->8 @32)", 1, 32, 32, 8, 3, 2, 1),
        ("enc c2 (8->16 @16)", 8, 16, 16, 16, 3, 2, 1),
        ("enc c3 (16->32 @8)", 16, 8, 8, 32, 3, 2, 1),
        ("enc c4 (32->64 @4)", 32, 4, 4, 64, 3, 2, 1),
        ("enc c5 (64->128 @2)", 64, 2, 2, 128, 3, 2, 1),
    ] {
        let g = ConvGeom::new(64, ci, h, w, co, k, s, p).unwrap();
        bench(name, &g, 30);
    }
}
