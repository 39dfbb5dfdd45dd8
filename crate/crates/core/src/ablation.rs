//! Module and loss-term ablations over a base experiment.

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experiment::{train_and_evaluate, RunMetrics};
use crate::federation::LossSet;
use crate::model::HeadKind;

/// One grid member. Unset toggles keep the base configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    /// Style alignment (F).
    pub alignment: Option<bool>,
    /// Transformer blocks (T); off swaps in position-wise dense layers.
    pub transformer: Option<bool>,
    /// Evidential head (E); off trains softmax with cross-entropy.
    pub evidential: Option<bool>,
    pub losses: Option<LossSet>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub seeds: Vec<u64>,
    pub variant: Vec<Variant>,
}

impl Grid {
    /// Every on/off combination of F, T and E with all losses.
    pub fn modules(seeds: Vec<u64>) -> Self {
        let mut variant = Vec::new();
        for bits in 0..8u8 {
            let (f, t, e) = (bits & 4 != 0, bits & 2 != 0, bits & 1 != 0);
            let mut name: Vec<&str> = [("F", f), ("T", t), ("E", e)]
                .iter()
                .filter(|(_, on)| *on)
                .map(|(n, _)| *n)
                .collect();
            if name.is_empty() {
                name.push("base");
            }
            variant.push(Variant {
                name: name.join("+"),
                alignment: Some(f),
                transformer: Some(t),
                evidential: Some(e),
                losses: None,
            });
        }
        Grid { seeds, variant }
    }

    /// The seven non-empty loss subsets with every module on.
    pub fn losses(seeds: Vec<u64>) -> Self {
        let variant = LossSet::all_nonempty()
            .into_iter()
            .map(|l| Variant {
                name: l.label(),
                losses: Some(l),
                ..Default::default()
            })
            .collect();
        Grid { seeds, variant }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("ablation grid: {e}")))
    }
}

impl Variant {
    /// The base configuration with this variant's toggles applied.
    pub fn apply(&self, base: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        if let Some(f) = self.alignment {
            cfg.federation.alignment = f;
        }
        if let Some(t) = self.transformer {
            cfg.model.transformer = t;
        }
        if let Some(e) = self.evidential {
            cfg.model.head = if e { HeadKind::Evidential } else { HeadKind::Softmax };
        }
        if let Some(l) = self.losses {
            l.validate()
                .map_err(|e| Error::Config(format!("variant {:?}: {e}", self.name)))?;
            cfg.federation.losses = l;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub alignment: bool,
    pub transformer: bool,
    pub evidential: bool,
    pub losses: String,
    pub seeds: Vec<u64>,
    /// Target-site means over seeds.
    pub acc: f64,
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub auc: Option<f64>,
    pub runs: Vec<RunMetrics>,
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs every variant on every seed with identical data and seeds.
pub fn run_ablation(base: &ExperimentConfig, grid: &Grid, parallel: bool) -> Result<Vec<AblationRow>> {
    if grid.variant.is_empty() {
        return Err(Error::Config("ablation grid has no variants".into()));
    }
    let seeds = if grid.seeds.is_empty() { vec![base.run.seed] } else { grid.seeds.clone() };
    let configs: Vec<ExperimentConfig> = grid.variant.iter().map(|v| v.apply(base)).collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(configs.len());
    for (v, cfg) in grid.variant.iter().zip(configs) {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            let mut c = cfg.clone();
            c.run.seed = seed;
            runs.push(train_and_evaluate(&c, parallel)?.metrics);
        }
        let n = runs.len() as f64;
        rows.push(AblationRow {
            name: v.name.clone(),
            alignment: cfg.federation.alignment,
            transformer: cfg.model.transformer,
            evidential: cfg.model.head == HeadKind::Evidential,
            losses: cfg.federation.losses.label(),
            seeds: seeds.clone(),
            acc: runs.iter().map(|r| r.target().acc).sum::<f64>() / n,
            precision: mean_opt(runs.iter().map(|r| r.target().precision)),
            sensitivity: mean_opt(runs.iter().map(|r| r.target().sensitivity)),
            auc: mean_opt(runs.iter().map(|r| r.target().auc)),
            runs,
        });
    }
    Ok(rows)
}

/// Comparison table with one row per variant and check marks for modules.
pub fn write_table_csv<W: std::io::Write>(writer: W, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["variant", "F", "T", "E", "losses", "seeds", "acc", "precision", "sensitivity", "auc"])?;
    let mark = |b: bool| if b { "✓" } else { "" }.to_string();
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.4}"));
    for r in rows {
        w.write_record([
            r.name.clone(),
            mark(r.alignment),
            mark(r.transformer),
            mark(r.evidential),
            r.losses.clone(),
            r.seeds.len().to_string(),
            format!("{:.4}", r.acc),
            opt(r.precision),
            opt(r.sensitivity),
            opt(r.auc),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_grids_have_expected_shape() {
        let m = Grid::modules(vec![0]);
        assert_eq!(m.variant.len(), 8);
        assert_eq!(m.variant[7].name, "F+T+E");
        assert_eq!(m.variant[0].name, "base");
        let l = Grid::losses(vec![0]);
        assert_eq!(l.variant.len(), 7);
        assert_eq!(l.variant[6].name, "KL+UCE+MSE");
    }

    #[test]
    fn empty_loss_set_is_a_config_error() {
        let v = Variant {
            name: "none".into(),
            losses: Some(LossSet {
                kl: false,
                uce: false,
                mse: false,
            }),
            ..Default::default()
        };
        assert!(matches!(v.apply(&ExperimentConfig::default()), Err(Error::Config(_))));
        assert!(matches!(
            run_ablation(&ExperimentConfig::default(), &Grid::default(), false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn toggles_map_onto_config() {
        let v = Variant {
            name: "x".into(),
            alignment: Some(false),
            transformer: Some(false),
            evidential: Some(false),
            losses: None,
        };
        let c = v.apply(&ExperimentConfig::default()).unwrap();
        assert!(!c.federation.alignment && !c.model.transformer);
        assert_eq!(c.model.head, HeadKind::Softmax);
        let full = Variant::default().apply(&ExperimentConfig::default()).unwrap();
        assert_eq!(full, ExperimentConfig::default());
    }

    #[test]
    fn grid_file_parses_and_rejects_typos() {
        let g = Grid::from_toml_str(
            "seeds = [0, 1]\n[[variant]]\nname = \"no-F\"\nalignment = false\n[[variant]]\nname = \"KL\"\nlosses = { kl = true, uce = false, mse = false }\n",
        )
        .unwrap();
        assert_eq!(g.variant.len(), 2);
        assert_eq!(g.seeds, vec![0, 1]);
        assert!(Grid::from_toml_str("[[variant]]\nalignmnt = false\n").is_err());
    }
}
