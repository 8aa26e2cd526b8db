//! Regenerates the shipped parity-check matrix asset.
//!
//! Usage: cargo run --release -p qpc-core --example gen_ldpc_asset
//!
//! The construction is fully determined by (n, m, degree profile, seed), so
//! rerunning reproduces the committed file byte for byte.

use qpc_core::postproc::ldpc::{peg_construct, standard_degree_sequence};

const N: usize = 4096;
const M: usize = 2048;
const SEED: u64 = 1009;

fn main() {
    let degrees = standard_degree_sequence(N);
    let code = peg_construct(N, M, &degrees, SEED);
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/ldpc_4096_2048.txt");
    let mut text = String::from("# rate-1/2 PEG parity-check matrix, seed 1009\n");
    text.push_str(&code.to_asset_string());
    std::fs::write(path, text).expect("write asset");
    println!(
        "wrote {path}: n={} k={} edges={} digest={}",
        code.n(),
        code.k(),
        code.edges(),
        code.digest().iter().map(|b| format!("{b:02x}")).collect::<String>()
    );
}
