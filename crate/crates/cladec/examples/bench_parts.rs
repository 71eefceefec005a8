use cladec::ops::*;
use cladec::tensor::Scalar;
use std::time::Instant;

fn main() {
    // dec s4 conv picture: c_in=16 @16x16 -> c_out=32 @8x8, k5 s2 p2, n=64
    let g = ConvGeom::new(64, 16, 16, 16, 32, 5, 2, 2).unwrap();
    let x = vec![0.5f32; 64 * 16 * 256];
    let k = vec![0.1f32; 32 * 16 * 25];
    let gout = vec![0.3f32; 64 * 32 * 64];
    let it = 50;

    // Whole-batch single-chunk timings of each stage.
    let (bp, r) = (64 * 64, 16 * 25);
    let mut col = vec![0.0f32; r * bp];
    let t = Instant::now();
    for _ in 0..it { test_im2col(&x, 64, &g, &mut col); }
    println!("im2col (whole batch): {:.2} ms", t.elapsed().as_secs_f64() / it as f64 * 1e3);

    let mut gmat = vec![0.0f32; 32 * bp];
    let t = Instant::now();
    for _ in 0..it { test_gather(&gout, 64, 32, 64, &mut gmat); }
    println!("gather: {:.2} ms", t.elapsed().as_secs_f64() / it as f64 * 1e3);

    // fwd GEMM 32 x 400 x 4096
    let mut prod = vec![0.0f32; 32 * bp];
    let t = Instant::now();
    for _ in 0..it { f32::gemm(32, r, bp, 1.0, &k, &col, 0.0, &mut prod); }
    let el = t.elapsed().as_secs_f64() / it as f64;
    println!("fwd GEMM 32x400x4096: {:.2} ms ({:.1} GFLOPs single-thread)", el * 1e3, 2.0 * (32 * r * bp) as f64 / el / 1e9);

    // dx GEMM 400 x 32 x 4096
    let mut colg = vec![0.0f32; r * bp];
    let t = Instant::now();
    for _ in 0..it { gemm_ex(r, 32, bp, 1.0f32, &k, true, &gmat, false, 0.0, &mut colg); }
    let el = t.elapsed().as_secs_f64() / it as f64;
    println!("dx GEMM 400x32x4096: {:.2} ms ({:.1} GFLOPs single-thread)", el * 1e3, 2.0 * (r * 32 * bp) as f64 / el / 1e9);

    // dk GEMM 32 x 4096 x 400
    let mut part = vec![0.0f32; 32 * r];
    let t = Instant::now();
    for _ in 0..it { gemm_ex(32, bp, r, 1.0f32, &gmat, false, &col, true, 0.0, &mut part); }
    let el = t.elapsed().as_secs_f64() / it as f64;
    println!("dk GEMM 32x4096x400: {:.2} ms ({:.1} GFLOPs single-thread)", el * 1e3, 2.0 * (32 * r * bp) as f64 / el / 1e9);

    let mut gin = vec![0.0f32; 64 * 16 * 256];
    let t = Instant::now();
    for _ in 0..it { test_col2im(&colg, 64, &g, &mut gin); }
    println!("col2im: {:.2} ms", t.elapsed().as_secs_f64() / it as f64 * 1e3);
}
