//! Quick wall-time probe for the expensive experiment paths.
//!
//! cargo run --release -p qpc-core --example perf_probe

use qpc_core::experiments::{run_fig4, Fig4Spec};
use qpc_core::primitives::lwe::{pq_decrypt, pq_encrypt, pq_keygen, LweParams};
use std::time::Instant;

fn main() {
    let t = Instant::now();
    let params = LweParams::desk();
    let (pk, sk) = pq_keygen(&params, 1).unwrap();
    println!("lwe keygen: {:.2?}", t.elapsed());

    let t = Instant::now();
    let msgs = 50usize;
    for i in 0..msgs {
        let m = vec![i as u8; 32];
        let c = pq_encrypt(&m, &pk, i as u64);
        assert_eq!(pq_decrypt(&c, &sk).unwrap(), m);
    }
    let dt = t.elapsed();
    println!(
        "lwe {msgs} x 256-bit roundtrips: {dt:.2?} ({:.2?} per msg, est 1000 msgs {:.1?})",
        dt / msgs as u32,
        dt * (1000 / msgs) as u32
    );

    let t = Instant::now();
    let mut spec = Fig4Spec::default();
    spec.source.duration = 10.0;
    spec.jitter_grid_ps = vec![0, 1_500, 3_000];
    let rows = run_fig4(&spec).unwrap();
    let dt = t.elapsed();
    println!(
        "fig4 3 points x 10s: {dt:.2?} (est 5 points x 40s: {:.1?})",
        dt * 20 / 3
    );
    for r in rows {
        println!("  jitter {} qber {:.4} skr {:.2}", r.jitter_ps, r.qber, r.skr_bits_per_s);
    }
}
