//! Independent reference implementations used to check the library: a
//! brute-force BPE trainer organized around byte-string symbols instead of
//! token ids, and a central finite-difference gradient probe.

use std::collections::BTreeMap;
use std::collections::HashSet;

use slmforge::model::{backward, Batch, Parameters, IGNORE_ID};

/// Brute-force BPE: keep the working sequence as owned byte strings, count
/// adjacent pairs into an ordered map, and fuse the most frequent pair.
/// Ties take the lexicographically smallest (left, right); pairs whose
/// fusion equals a banned surface are skipped. Returns the merges in rank
/// order.
pub fn naive_bpe_merges(
    corpus: &[u8],
    n_merges: usize,
    banned_surfaces: &[&str],
) -> Vec<(Vec<u8>, Vec<u8>)> {
    let banned: HashSet<Vec<u8>> = banned_surfaces
        .iter()
        .map(|s| s.as_bytes().to_vec())
        .collect();
    let mut seq: Vec<Vec<u8>> = corpus.iter().map(|&b| vec![b]).collect();
    let mut merges = Vec::with_capacity(n_merges);

    for _ in 0..n_merges {
        let mut counts: BTreeMap<(&[u8], &[u8]), u64> = BTreeMap::new();
        for w in seq.windows(2) {
            *counts.entry((w[0].as_slice(), w[1].as_slice())).or_insert(0) += 1;
        }
        // Ascending key order means the first strict maximum is the
        // tie-break winner.
        let mut best: Option<((&[u8], &[u8]), u64)> = None;
        for (&key, &cnt) in counts.iter() {
            let fused: Vec<u8> = key.0.iter().chain(key.1).copied().collect();
            if banned.contains(&fused) {
                continue;
            }
            if best.map_or(true, |(_, bc)| cnt > bc) {
                best = Some((key, cnt));
            }
        }
        let Some(((left, right), _)) = best else { break };
        let (left, right) = (left.to_vec(), right.to_vec());

        let mut out: Vec<Vec<u8>> = Vec::with_capacity(seq.len());
        let mut i = 0;
        while i < seq.len() {
            if i + 1 < seq.len() && seq[i] == left && seq[i + 1] == right {
                let mut fused = left.clone();
                fused.extend_from_slice(&right);
                out.push(fused);
                i += 2;
            } else {
                out.push(std::mem::take(&mut seq[i]));
                i += 1;
            }
        }
        seq = out;
        merges.push((left, right));
    }
    merges
}

/// Max relative error between analytic gradients and central finite
/// differences over every parameter element, in f64. `scale` guards the
/// denominator so near-zero gradients do not explode the ratio.
pub fn fd_max_rel_err(params: &Parameters<f64>, batch: &Batch, h: f64) -> f64 {
    let (_, grads) = backward(params, batch, IGNORE_ID).expect("analytic gradients");
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for ti in 0..params.n_tensors() {
        for j in 0..params.tensor(ti).data().len() {
            let orig = probe.tensor(ti).data()[j];
            probe.tensor_mut(ti).data_mut()[j] = orig + h;
            let (lp, _) = backward(&probe, batch, IGNORE_ID).expect("loss at +h");
            probe.tensor_mut(ti).data_mut()[j] = orig - h;
            let (lm, _) = backward(&probe, batch, IGNORE_ID).expect("loss at -h");
            probe.tensor_mut(ti).data_mut()[j] = orig;

            let fd = (lp - lm) / (2.0 * h);
            let an = grads.tensor(ti).data()[j];
            let scale = an.abs().max(fd.abs()).max(1e-3);
            worst = worst.max((fd - an).abs() / scale);
        }
    }
    worst
}
