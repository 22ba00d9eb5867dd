use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Branches, RunConfig};
use super::run::TrainingRun;
use crate::error::{Error, Result};

/// Axes of an ablation grid; missing axes keep the base config's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub seeds: Option<Vec<u64>>,
    pub n_groups: Option<Vec<usize>>,
    pub aux_cnn: Option<Vec<bool>>,
    pub o2m: Option<Vec<bool>>,
    pub perturbation_groups: Option<Vec<bool>>,
}

impl AblationGrid {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Configurations in row-major grid order (seed varies fastest).
    pub fn expand(&self, base: &RunConfig) -> Result<Vec<RunConfig>> {
        let axis = |v: &Option<Vec<bool>>, d: bool| v.clone().unwrap_or_else(|| vec![d]);
        let seeds = self.seeds.clone().unwrap_or_else(|| vec![base.seed]);
        let groups = self.n_groups.clone().unwrap_or_else(|| vec![base.n_groups]);
        let aux = axis(&self.aux_cnn, base.branches.aux_cnn);
        let o2m = axis(&self.o2m, base.branches.o2m);
        let pert = axis(&self.perturbation_groups, base.branches.perturbation_groups);
        let mut out = Vec::new();
        for &n in &groups {
            for &a in &aux {
                for &o in &o2m {
                    for &p in &pert {
                        for &seed in &seeds {
                            let mut cfg = base.clone();
                            cfg.n_groups = n;
                            cfg.branches = Branches {
                                aux_cnn: a,
                                o2m: o,
                                perturbation_groups: p,
                            };
                            cfg.seed = seed;
                            cfg.validate()?;
                            out.push(cfg);
                        }
                    }
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Config("ablation grid is empty".into()));
        }
        Ok(out)
    }
}

/// Short label of a configuration's branch setting.
pub fn variant_name(cfg: &RunConfig) -> String {
    let b = cfg.branches;
    let mut parts = Vec::new();
    if b.aux_cnn {
        parts.push("aux".to_string());
    }
    if b.o2m {
        parts.push(format!("o2m(m={})", cfg.replication));
    }
    if b.perturbation_groups {
        parts.push(format!("groups(N={})", cfg.n_groups));
    }
    if parts.is_empty() {
        "baseline".into()
    } else {
        parts.join("+")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub seed: u64,
    pub final_ap: f64,
    /// Epochs until AP reaches 90% of the baseline's final AP (same seed).
    pub epochs_to_threshold: Option<usize>,
}

/// Runs every configuration with `train_fn` and tabulates the results.
/// The baseline of a seed is its all-branches-off run when present, else
/// the first run with that seed.
pub fn ablate(
    configs: &[RunConfig],
    mut train_fn: impl FnMut(&RunConfig) -> Result<TrainingRun>,
) -> Result<Vec<AblationRow>> {
    let runs: Vec<TrainingRun> = configs.iter().map(&mut train_fn).collect::<Result<_>>()?;
    let baseline_of = |seed: u64| {
        runs.iter()
            .find(|r| r.config.seed == seed && r.config.branches == Branches::NONE)
            .or_else(|| runs.iter().find(|r| r.config.seed == seed))
            .map(TrainingRun::final_ap)
            .unwrap_or(0.0)
    };
    Ok(runs
        .iter()
        .map(|r| AblationRow {
            name: variant_name(&r.config),
            seed: r.config.seed,
            final_ap: r.final_ap(),
            epochs_to_threshold: r.epochs_to(0.9 * baseline_of(r.config.seed)),
        })
        .collect())
}

/// Markdown table of ablation rows.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("| variant | seed | final AP | epochs to 90% baseline AP |\n|---|---|---|---|\n");
    for r in rows {
        let e = r.epochs_to_threshold.map_or("-".to_string(), |e| e.to_string());
        s.push_str(&format!("| {} | {} | {:.4} | {} |\n", r.name, r.seed, r.final_ap, e));
    }
    s
}
