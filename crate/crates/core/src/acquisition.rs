//! Candidate generation, surrogate ranking and exploit/explore allocation,
//! all filtered through a visited-cell memory over the discretized space.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::space::{ConfigSpace, Configuration, ParamKind, ParamValue, SpaceError};
use crate::surrogates::{Predictor, SurrogateError};

pub const DEFAULT_RESOLUTION: usize = 16;
pub const DEFAULT_BATCH_SIZE: usize = 512;
pub const DEFAULT_N_BATCHES: usize = 10;
pub const DEFAULT_EXPLOIT_FRACTION: f64 = 0.75;

#[derive(Debug, Error)]
pub enum AcquisitionError {
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error("no candidates to rank")]
    NoCandidates,
}

/// Per-parameter cell indices: stratum for numeric parameters, choice index
/// for categoricals.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey(pub Vec<u32>);

pub fn cell_key(space: &ConfigSpace, config: &Configuration, resolution: usize) -> CellKey {
    CellKey(
        space
            .params()
            .iter()
            .zip(&config.values)
            .map(|(p, v)| match (&p.kind, v) {
                (ParamKind::Categorical { .. }, ParamValue::Choice(i)) => *i as u32,
                _ => {
                    let u = p.unit_position(v).expect("numeric value for numeric parameter");
                    ((u * resolution as f64).floor() as usize).min(resolution - 1) as u32
                }
            })
            .collect(),
    )
}

#[derive(Debug, Clone)]
pub struct ExplorationMemory {
    resolution: usize,
    visited: HashSet<CellKey>,
}

impl ExplorationMemory {
    pub fn new(resolution: usize) -> Self {
        assert!(resolution >= 1, "resolution must be >= 1");
        Self {
            resolution,
            visited: HashSet::new(),
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn key(&self, space: &ConfigSpace, config: &Configuration) -> CellKey {
        cell_key(space, config, self.resolution)
    }

    pub fn contains(&self, key: &CellKey) -> bool {
        self.visited.contains(key)
    }

    pub fn is_visited(&self, space: &ConfigSpace, config: &Configuration) -> bool {
        self.contains(&self.key(space, config))
    }

    /// Returns `false` if the cell was already present.
    pub fn insert(&mut self, key: CellKey) -> bool {
        self.visited.insert(key)
    }

    pub fn len(&self) -> usize {
        self.visited.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visited.is_empty()
    }

    pub fn sorted_cells(&self) -> Vec<CellKey> {
        let mut cells: Vec<CellKey> = self.visited.iter().cloned().collect();
        cells.sort();
        cells
    }

    /// One row per visited cell, one column per parameter.
    pub fn to_csv(&self, space: &ConfigSpace) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(space.params().iter().map(|p| p.name.as_str()))
            .expect("in-memory write");
        for cell in self.sorted_cells() {
            w.write_record(cell.0.iter().map(u32::to_string))
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}

/// Uniform candidates whose cells are neither visited nor repeated within
/// this call. Gives up after `max_attempts` consecutive rejections, so an
/// exhausted space yields an empty list.
pub fn generate_candidates(
    space: &ConfigSpace,
    memory: &ExplorationMemory,
    batch_size: usize,
    n_batches: usize,
    max_attempts: usize,
    rng: &mut Rng,
) -> Vec<Configuration> {
    assert!(
        batch_size >= 1 && n_batches >= 1,
        "batch_size and n_batches must be >= 1"
    );
    let target = batch_size * n_batches;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(target);
    let mut rejections = 0;
    while out.len() < target && rejections < max_attempts {
        let c = space.sample_uniform(rng);
        let key = memory.key(space, &c);
        if memory.contains(&key) || !seen.insert(key) {
            rejections += 1;
            continue;
        }
        rejections = 0;
        out.push(c);
    }
    out
}

/// Candidates sorted by ascending predicted score; ties keep generation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankedCandidates {
    pub entries: Vec<(Configuration, f64)>,
}

impl RankedCandidates {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn rank_candidates<P: Predictor + ?Sized>(
    model: &P,
    space: &ConfigSpace,
    candidates: Vec<Configuration>,
    batch_size: usize,
) -> Result<RankedCandidates, AcquisitionError> {
    if candidates.is_empty() {
        return Err(AcquisitionError::NoCandidates);
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for chunk in candidates.chunks(batch_size.max(1)) {
        let encoded = chunk.iter().map(|c| space.encode(c)).collect::<Result<Vec<_>, _>>()?;
        scores.extend(model.predict(&encoded)?);
    }
    let mut entries: Vec<(Configuration, f64)> = candidates.into_iter().zip(scores).collect();
    entries.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(RankedCandidates { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Init,
    Exploit,
    Explore,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Init => "init",
            Role::Exploit => "exploit",
            Role::Explore => "explore",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub config: Configuration,
    pub role: Role,
}

/// Fill `n_slots` with `floor(exploit_fraction * n_slots)` top-ranked
/// candidates and uniform exploration for the rest. Every chosen cell is
/// recorded in `memory`. The batch comes back short when exploration runs
/// out of unvisited cells.
pub fn allocate_batch(
    ranked: &RankedCandidates,
    space: &ConfigSpace,
    memory: &mut ExplorationMemory,
    n_slots: usize,
    exploit_fraction: f64,
    max_attempts: usize,
    rng: &mut Rng,
) -> Vec<Allocation> {
    assert!(n_slots >= 1, "n_slots must be >= 1");
    assert!(
        (0.0..=1.0).contains(&exploit_fraction),
        "exploit_fraction must lie in [0, 1]"
    );
    let n_exploit = ((exploit_fraction * n_slots as f64).floor() as usize).min(n_slots);
    let mut batch = Vec::with_capacity(n_slots);
    for (config, _) in &ranked.entries {
        if batch.len() == n_exploit {
            break;
        }
        if memory.insert(memory.key(space, config)) {
            batch.push(Allocation {
                config: config.clone(),
                role: Role::Exploit,
            });
        }
    }
    let mut rejections = 0;
    while batch.len() < n_slots && rejections < max_attempts {
        let c = space.sample_uniform(rng);
        if memory.insert(memory.key(space, &c)) {
            rejections = 0;
            batch.push(Allocation {
                config: c,
                role: Role::Explore,
            });
        } else {
            rejections += 1;
        }
    }
    batch
}
