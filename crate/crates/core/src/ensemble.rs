//! Deep ensembles: independently seeded networks aggregated as an
//! equal-weight Gaussian mixture.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::nnet::{Network, NetworkSpec, SavedNetwork, TrainConfig, TrainReport};
use crate::numerics::{derive_seed, Matrix, Vector};
use crate::{Error, GaussianPrediction, Result};

/// Ensemble size used when none is given.
pub const DEFAULT_ENSEMBLE_SIZE: usize = 15;

const SCHEMA_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone)]
pub struct EnsembleModel {
    members: Vec<Network>,
    config: TrainConfig,
    master_seed: u64,
    reports: Vec<TrainReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    master_seed: u64,
    config: TrainConfig,
    members: Vec<String>,
}

/// Trains `m` members on the full dataset. Member `i` uses
/// `derive_seed(master_seed, i)` for both its initialization and its
/// minibatch order.
pub fn train_ensemble(
    spec: &NetworkSpec,
    x: &Matrix,
    y: &Vector,
    m: usize,
    config: &TrainConfig,
    master_seed: u64,
) -> Result<EnsembleModel> {
    if m == 0 {
        return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
    }
    spec.validate()?;
    config.validate()?;
    let trained: Vec<(Network, TrainReport)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(master_seed, i as u64);
            let run = || -> Result<(Network, TrainReport)> {
                let mut net = Network::new(spec.clone(), seed)?;
                let report = net.train(x, y, &TrainConfig { seed, ..config.clone() })?;
                Ok((net, report))
            };
            run().map_err(|e| Error::Member {
                member: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let (members, reports) = trained.into_iter().unzip();
    Ok(EnsembleModel {
        members,
        config: config.clone(),
        master_seed,
        reports,
    })
}

/// Aleatory (mean member variance) and epistemic (population variance of
/// member means) parts of a set of `(mean, variance)` member predictions.
pub fn decompose(members: &[(f64, f64)]) -> Result<(f64, f64)> {
    if members.is_empty() {
        return Err(Error::EmptyData);
    }
    let p = GaussianPrediction::from_mixture(members);
    Ok((p.variance_aleatory, p.variance_epistemic))
}

impl EnsembleModel {
    /// Wraps already trained members.
    pub fn from_members(members: Vec<Network>, config: TrainConfig, master_seed: u64) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
        };
        if members.iter().any(|m| m.spec() != first.spec()) {
            return Err(Error::Schema("ensemble members must share one network spec".into()));
        }
        Ok(Self {
            members,
            config,
            master_seed,
            reports: Vec::new(),
        })
    }

    pub fn members(&self) -> &[Network] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn spec(&self) -> &NetworkSpec {
        self.members[0].spec()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// Per-member training histories; empty for loaded ensembles.
    pub fn reports(&self) -> &[TrainReport] {
        &self.reports
    }

    /// `(mean, variance)` of every member at one input. Scalar-output
    /// members contribute zero variance.
    pub fn member_predictions(&self, x: &[f64]) -> Result<Vec<(f64, f64)>> {
        self.members
            .iter()
            .map(|m| m.predict(x).map(|o| (o.mean, o.variance.unwrap_or(0.0))))
            .collect()
    }

    /// Moment-matched mixture prediction for every row of `x`.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<GaussianPrediction>> {
        (0..x.nrows())
            .into_par_iter()
            .map(|i| {
                let xi: Vec<f64> = x.row(i).iter().copied().collect();
                Ok(GaussianPrediction::from_mixture(&self.member_predictions(&xi)?))
            })
            .collect()
    }

    /// Writes `manifest.json` plus one `member_NNN.json` per member.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut names = Vec::with_capacity(self.members.len());
        for (i, member) in self.members.iter().enumerate() {
            let name = format!("member_{i:03}.json");
            fs::write(dir.join(&name), serde_json::to_string(&member.to_saved())?)?;
            names.push(name);
        }
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            master_seed: self.master_seed,
            config: self.config.clone(),
            members: names,
        };
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "unsupported ensemble schema version {}",
                manifest.schema_version
            )));
        }
        let members = manifest
            .members
            .iter()
            .map(|name| {
                let saved: SavedNetwork = serde_json::from_str(&fs::read_to_string(dir.join(name))?)?;
                Network::from_saved(saved)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_members(members, manifest.config, manifest.master_seed)
    }
}
