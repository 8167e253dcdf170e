use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capability::{CapabilityCategory, DatasetRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// Learning response per trained sample: `s += delta * (1 - s)`.
    pub delta: f64,
    pub skill_low: f64,
    pub skill_high: f64,
    /// Categories the world knows about; empty means all twelve.
    pub categories: Vec<CapabilityCategory>,
    pub pool_size: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { delta: 0.08, skill_low: 0.2, skill_high: 0.9, categories: Vec::new(), pool_size: 1200 }
    }
}

impl WorldConfig {
    pub fn active_categories(&self) -> Vec<CapabilityCategory> {
        if self.categories.is_empty() {
            CapabilityCategory::ALL.to_vec()
        } else {
            let mut c = self.categories.clone();
            c.sort();
            c.dedup();
            c
        }
    }
}

/// Per-category true skill of a simulated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub skills: BTreeMap<CapabilityCategory, f64>,
    pub delta: f64,
    /// Number of learning steps applied so far.
    pub version: u64,
}

impl SyntheticWorld {
    /// Initial skills drawn uniformly from `[skill_low, skill_high]`.
    pub fn seeded(config: &WorldConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5157_4f52_4c44);
        let (lo, hi) = (config.skill_low.clamp(0.0, 1.0), config.skill_high.clamp(0.0, 1.0));
        let skills = config
            .active_categories()
            .into_iter()
            .map(|c| (c, if hi > lo { rng.random_range(lo..=hi) } else { lo }))
            .collect();
        Self { skills, delta: config.delta.clamp(0.0, 1.0), version: 0 }
    }

    pub fn skill(&self, c: CapabilityCategory) -> f64 {
        self.skills.get(&c).copied().unwrap_or(0.0)
    }

    pub fn min_skill(&self) -> (CapabilityCategory, f64) {
        self.skills
            .iter()
            .map(|(c, s)| (*c, *s))
            .fold((CapabilityCategory::Others, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
    }

    pub fn categories(&self) -> Vec<CapabilityCategory> {
        self.skills.keys().copied().collect()
    }

    /// Parameter vector (skills in canonical order) for checkpoints.
    pub fn parameters(&self) -> Vec<f64> {
        self.skills.values().copied().collect()
    }
}

/// Apply the learning response once per record, in order. Categories the
/// world does not model are ignored.
pub fn world_step(world: &mut SyntheticWorld, records: &[DatasetRecord]) {
    for r in records {
        if let Some(s) = world.skills.get_mut(&r.category) {
            *s = (*s + world.delta * (1.0 - *s)).clamp(0.0, 1.0);
        }
    }
    world.version += 1;
}
