//! Randomized CoNDA resolution trials and Bloom false-positive checks.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pimsim::coherence::{
    conda_record, conda_resolve, Access, CoherenceState, CondaEpoch, Signature,
};

use super::LINE;

fn random_lines(rng: &mut impl Rng, n: usize, taken: &mut BTreeSet<u64>) -> Vec<u64> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let l = rng.gen_range(0..1u64 << 40) * LINE;
        if taken.insert(l) {
            out.push(l);
        }
    }
    out
}

struct EpochSets {
    pim_read: Vec<u64>,
    pim_write: Vec<u64>,
    cpu_dirty: Vec<u64>,
    cpu_read: Vec<u64>,
}

fn disjoint_sets(rng: &mut impl Rng, max: usize) -> EpochSets {
    let mut taken = BTreeSet::new();
    let mut pick = |rng: &mut ChaCha8Rng| {
        let n = rng.gen_range(1..=max);
        random_lines(rng, n, &mut taken)
    };
    let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
    EpochSets {
        pim_read: pick(&mut r),
        pim_write: pick(&mut r),
        cpu_dirty: pick(&mut r),
        cpu_read: pick(&mut r),
    }
}

fn resolve(sets: &EpochSets, m: usize, k: u32) -> bool {
    let mut epoch = CondaEpoch::new(m, k);
    for &l in &sets.pim_read {
        conda_record(&mut epoch, l, Access::Read).unwrap();
    }
    for (i, &l) in sets.pim_write.iter().enumerate() {
        conda_record(&mut epoch, l, Access::Write(i as u64 + 1)).unwrap();
    }
    let mut state = CoherenceState::new(4096);
    let dirty: BTreeSet<u64> = sets.cpu_dirty.iter().copied().collect();
    let read: BTreeSet<u64> = sets.cpu_read.iter().copied().collect();
    let (res, _) = conda_resolve(&mut epoch, &mut state, &dirty, &read).unwrap();
    !res.is_conflict()
}

/// Epochs with one injected true overlap of a random kind. Returns how many
/// committed anyway (must be zero).
pub fn commits_despite_true_overlap(trials: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut commits = 0;
    for _ in 0..trials {
        let mut s = disjoint_sets(&mut rng, 64);
        match rng.gen_range(0..3) {
            0 => {
                let l = *s.pim_read.choose(&mut rng).unwrap();
                s.cpu_dirty.push(l);
            }
            1 => {
                let l = *s.pim_write.choose(&mut rng).unwrap();
                s.cpu_dirty.push(l);
            }
            _ => {
                let l = *s.pim_write.choose(&mut rng).unwrap();
                s.cpu_read.push(l);
            }
        }
        if resolve(&s, 2048, 4) {
            commits += 1;
        }
    }
    commits
}

/// Disjoint epochs with `m`-bit, `k`-hash signatures. Returns the commit
/// rate and the false-positive rate of the signatures measured over the
/// CPU lines probed at resolution.
pub fn disjoint_commit_rate(trials: usize, m: usize, k: u32, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut commits, mut probes, mut fps) = (0usize, 0usize, 0usize);
    for _ in 0..trials {
        let s = disjoint_sets(&mut rng, 32);
        if resolve(&s, m, k) {
            commits += 1;
        }
        let mut rs = Signature::new(m, k);
        let mut ws = Signature::new(m, k);
        s.pim_read.iter().for_each(|&l| rs.insert(l));
        s.pim_write.iter().for_each(|&l| ws.insert(l));
        for &l in &s.cpu_dirty {
            probes += 2;
            fps += rs.maybe_contains(l) as usize + ws.maybe_contains(l) as usize;
        }
        for &l in &s.cpu_read {
            probes += 1;
            fps += ws.maybe_contains(l) as usize;
        }
    }
    (commits as f64 / trials as f64, fps as f64 / probes as f64)
}

/// Standard Bloom estimate `(1 - (1 - 1/m)^(k n))^k`.
pub fn bloom_fpr_analytic(m: usize, k: u32, n: usize) -> f64 {
    let empty = (1.0 - 1.0 / m as f64).powf((k as usize * n) as f64);
    (1.0 - empty).powi(k as i32)
}

/// Mean false-positive rate over `filters` signatures of `n` random lines,
/// each probed with `probes` lines never inserted.
pub fn bloom_fpr_monte_carlo(m: usize, k: u32, n: usize, filters: usize, probes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..filters {
        let mut taken = BTreeSet::new();
        let mut sig = Signature::new(m, k);
        for l in random_lines(&mut rng, n, &mut taken) {
            sig.insert(l);
        }
        for _ in 0..probes {
            let l = loop {
                let l = rng.gen_range(0..1u64 << 40) * LINE;
                if !taken.contains(&l) {
                    break l;
                }
            };
            hits += sig.maybe_contains(l) as usize;
        }
    }
    hits as f64 / (filters * probes) as f64
}
