//! Running the `sim` binary.

use std::process::{Command, Output};

use sha2::{Digest, Sha256};

use super::analyzer::fixture;

pub fn sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sim"))
        .args(args)
        .output()
        .expect("sim binary runs")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Argument lists covering every subcommand, each with the SHA-256 of its
/// stdout as produced on the reference build host.
pub fn determinism_cases() -> Vec<(Vec<String>, &'static str)> {
    let boundaries = fixture("boundaries.csv").display().to_string();
    let cases: [(&str, &str); 9] = [
        ("gen shared:n=2000,share=0.1 --seed 3", "0d4957ce78903f633596a11e05c9206424c2f696e86997e408313bcd4aeef982"),
        ("run --gen shared:n=2000,share=0.1 --seed 3 --mech conda", "bf7873bea7d5d66a0829355c2a16d3622d46b760712b64a0be23a915765aadca"),
        ("run --gen gemm:nops=2,elems=4096 --seed 0 --offload-fn pack,quantize --format text", "1d9e8e304a24c971057900ca0e591f4b5a7da32f3a2194b93460dd539de90e1f"),
        ("run --gen chase:n=200 --seed 4 --offload 1 --xlat conventional --mech nc", "8e95c586f5bc1fe1aa708abf4cd7f6a5e0163ee21e368a7906bdc4fb91b6f92b"),
        ("compare --gen shared:n=2000,share=0.05 --seed 1", "a272053d7ce767efd399802aa497938dde96669cac90848ca75d00aad8e3d2a2"),
        ("compare --gen quantize:n=500 --seed 2 --offload 1 --format text", "78b6d62348e05dd5938e02573d359f24e84ca3b552e9843c38aeec3e20e43408"),
        ("sweep-gemm --nops 1,2 --elems 4096", "f9661db46cfd3e38af39f6103dbe7f911a0a4dc70313bc9bc721847a357b71ec"),
        ("analyze --profiles BOUNDARIES --area-budget 4.4", "cdbf8e30fa2e5911392935eb15c27af4f59cb8beb7f3c370943d1110da764ee7"),
        ("analyze --gen gemm:nops=1,elems=1024 --seed 0 --mech conda", "cf516661111011887fe770ddc55ce6f2a2d0f927798a3b746129430a54c80a8c"),
    ];
    cases
        .into_iter()
        .map(|(args, digest)| {
            let args = args
                .split(' ')
                .map(|a| if a == "BOUNDARIES" { boundaries.clone() } else { a.to_string() })
                .collect();
            (args, digest)
        })
        .collect()
}

/// Runs every determinism case twice. Returns the cases whose two runs
/// differ or whose output differs from the recorded digest.
pub fn determinism_failures() -> Vec<String> {
    let mut bad = Vec::new();
    for (args, digest) in determinism_cases() {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let a = sim(&args);
        let b = sim(&args);
        let line = args.join(" ");
        if !a.status.success() {
            bad.push(format!("{line}: exit {:?}", a.status.code()));
        } else if a.stdout != b.stdout {
            bad.push(format!("{line}: reruns differ"));
        } else if sha256_hex(&a.stdout) != digest {
            bad.push(format!("{line}: digest {}", sha256_hex(&a.stdout)));
        }
    }
    bad
}
