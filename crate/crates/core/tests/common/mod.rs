#![allow(dead_code)]

use fmc::data::{make_synthetic, Dataset, SyntheticSpec};

/// Two unit-variance blobs at (±1.5, 0); 90% of the left blob and 10% of
/// the right blob belong to the first group.
pub fn biased(n: usize, seed: u64) -> Dataset {
    make_synthetic(&SyntheticSpec {
        n,
        seed,
        weights: vec![0.5, 0.5],
        centers: vec![vec![-1.5, 0.0], vec![1.5, 0.0]],
        scales: vec![],
        group_bias: Some(vec![0.9, 0.1]),
        group_probs: None,
        categorical: vec![],
    })
    .unwrap()
}

/// Two planted components over five 4-level features. Each component puts
/// mass 0.8 on its own level.
pub fn categorical(n: usize, seed: u64) -> Dataset {
    let table = |l: usize| -> Vec<f64> {
        (0..4).map(|c| if c == l { 0.8 } else { 0.2 / 3.0 }).collect()
    };
    make_synthetic(&SyntheticSpec {
        n,
        seed,
        weights: vec![0.5, 0.5],
        centers: vec![],
        scales: vec![],
        group_bias: Some(vec![0.8, 0.2]),
        group_probs: None,
        categorical: vec![vec![table(0); 5], vec![table(1); 5]],
    })
    .unwrap()
}

/// The biased blobs with a three-valued sensitive attribute.
pub fn three_groups(n: usize, seed: u64) -> Dataset {
    make_synthetic(&SyntheticSpec {
        n,
        seed,
        weights: vec![0.5, 0.5],
        centers: vec![vec![-1.5, 0.0], vec![1.5, 0.0]],
        scales: vec![],
        group_bias: None,
        group_probs: Some(vec![vec![0.6, 0.3, 0.1], vec![0.1, 0.3, 0.6]]),
        categorical: vec![],
    })
    .unwrap()
}

fn choose2(n: f64) -> f64 {
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index from the contingency table.
pub fn ari(a: &[usize], b: &[usize]) -> f64 {
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0.0; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1.0;
    }
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..kb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let index: f64 = table.iter().flatten().map(|&v| choose2(v)).sum();
    let sa: f64 = rows.iter().map(|&v| choose2(v)).sum();
    let sb: f64 = cols.iter().map(|&v| choose2(v)).sum();
    let expected = sa * sb / choose2(a.len() as f64);
    let max = 0.5 * (sa + sb);
    (index - expected) / (max - expected)
}
