use super::dialogue::{Dialogue, Domain};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Explicit split assignment by dialogue id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub dev: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<Dialogue>,
    pub validation: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

impl Splits {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }

    /// Partitions `dialogues` by manifest membership; unlisted dialogues are dropped.
    pub fn from_manifest(dialogues: Vec<Dialogue>, manifest: &SplitManifest) -> Self {
        let mut which: HashMap<&str, u8> = HashMap::new();
        for id in &manifest.train {
            which.insert(id, 0);
        }
        for id in &manifest.dev {
            which.insert(id, 1);
        }
        for id in &manifest.test {
            which.insert(id, 2);
        }
        let mut out = Splits::default();
        for d in dialogues {
            match which.get(d.id.as_str()) {
                Some(0) => out.train.push(d),
                Some(1) => out.validation.push(d),
                Some(2) => out.test.push(d),
                _ => log::warn!("dialogue {} is not listed in the split manifest", d.id),
            }
        }
        out
    }

    pub fn manifest(&self) -> SplitManifest {
        let ids = |ds: &[Dialogue]| ds.iter().map(|d| d.id.clone()).collect();
        SplitManifest { train: ids(&self.train), dev: ids(&self.validation), test: ids(&self.test) }
    }
}

/// Per-domain stratified 0.8 / 0.1 / 0.1 split, deterministic in `seed`.
/// Each split keeps input order.
pub fn split(dialogues: Vec<Dialogue>, seed: u64) -> Splits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![2u8; dialogues.len()];
    for domain in Domain::ALL {
        let mut idx: Vec<usize> = (0..dialogues.len()).filter(|&i| dialogues[i].domain == domain).collect();
        let n = idx.len();
        if n == 0 {
            continue;
        }
        if n < 10 {
            log::warn!("domain {domain} has only {n} dialogues; split ratios are approximate");
        }
        idx.shuffle(&mut rng);
        let n_train = (0.8 * n as f64).round() as usize;
        let n_val = ((0.1 * n as f64).round() as usize).min(n - n_train);
        for (k, &i) in idx.iter().enumerate() {
            assignment[i] = if k < n_train {
                0
            } else if k < n_train + n_val {
                1
            } else {
                2
            };
        }
    }
    let mut out = Splits::default();
    for (d, a) in dialogues.into_iter().zip(assignment) {
        match a {
            0 => out.train.push(d),
            1 => out.validation.push(d),
            _ => out.test.push(d),
        }
    }
    out
}
