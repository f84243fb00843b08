//! Loss-term and input-spectrum toggle grid.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::evaluator::EvalSource;
use crate::losses::LossTerms;
use crate::model::VisibleInput;
use crate::trainer::{evaluate_both, EvalSummary, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub losses: Vec<LossTerms>,
    pub inputs: Vec<VisibleInput>,
    pub seeds: Vec<u64>,
    pub eval_source: EvalSource,
}

impl AblationGrid {
    pub fn validate(&self) -> Result<()> {
        if self.losses.is_empty() || self.inputs.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config(
                "ablation grid needs at least one loss set, input and seed".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub losses: String,
    pub input: VisibleInput,
    pub seed: u64,
    pub results: Vec<EvalSummary>,
}

impl AblationRun {
    /// mAP averaged over both query directions.
    pub fn mean_map(&self) -> f64 {
        self.results.iter().map(|r| r.map).sum::<f64>() / self.results.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub losses: String,
    pub input: VisibleInput,
    pub seeds: Vec<u64>,
    /// Seed-averaged metrics per direction.
    pub results: Vec<EvalSummary>,
}

impl AblationRow {
    pub fn mean_map(&self) -> f64 {
        self.results.iter().map(|r| r.map).sum::<f64>() / self.results.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub runs: Vec<AblationRun>,
    /// Batches per epoch used by every run.
    pub steps_per_epoch: usize,
    pub epochs: usize,
}

fn input_label(input: VisibleInput) -> &'static str {
    match input {
        VisibleInput::Grayscale => "grayscale",
        VisibleInput::Rgb => "rgb",
    }
}

impl AblationTable {
    pub fn row(&self, losses: &str, input: VisibleInput) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.losses == losses && r.input == input)
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        let _ = writeln!(
            md,
            "| losses | visible input | seeds | gray2ir rank-1 | gray2ir mAP | ir2gray rank-1 | ir2gray mAP |"
        );
        let _ = writeln!(md, "|---|---|---|---|---|---|---|");
        for row in &self.rows {
            let cell = |dir: &str| {
                row.results
                    .iter()
                    .find(|r| r.direction == dir)
                    .map(|r| format!("{:.2} | {:.2}", 100.0 * r.rank1, 100.0 * r.map))
                    .unwrap_or_else(|| "- | -".into())
            };
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} |",
                row.losses,
                input_label(row.input),
                row.seeds.len(),
                cell("gray2ir"),
                cell("ir2gray")
            );
        }
        let _ = writeln!(
            md,
            "\n{} epochs of {} batches each (one epoch covers the train split once in expectation).",
            self.epochs, self.steps_per_epoch
        );
        md
    }

    /// Writes `ablation.json` and `ablation.md` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("ablation.json");
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let md = dir.join("ablation.md");
        fs::write(&md, self.to_markdown()).map_err(|e| Error::io(&md, e))
    }
}

/// Trains one model per grid cell and seed from `base` and evaluates it in
/// both directions. Nothing is written to disk by the individual runs.
pub fn run_ablation(base: &TrainConfig, grid: &AblationGrid) -> Result<AblationTable> {
    grid.validate()?;
    let manifest: DatasetManifest = base.dataset.load()?;
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    let mut steps_per_epoch = 0;
    for &losses in &grid.losses {
        for &input in &grid.inputs {
            let mut cell = Vec::new();
            for &seed in &grid.seeds {
                let mut config = base.clone();
                config.losses = losses;
                config.model.visible_input = input;
                config.seed = seed;
                config.output_dir = None;
                config.eval_every = 0;
                let mut trainer = Trainer::with_manifest(config, manifest.clone())?;
                steps_per_epoch = trainer.steps_per_epoch();
                trainer.run()?;
                let results = evaluate_both(trainer.model(), &manifest, grid.eval_source)?
                    .iter()
                    .map(EvalSummary::from)
                    .collect();
                let run = AblationRun {
                    losses: losses.label(),
                    input,
                    seed,
                    results,
                };
                log::info!(
                    "ablation {} / {} / seed {seed}: mAP {:.4}",
                    run.losses,
                    input_label(input),
                    run.mean_map()
                );
                cell.push(run);
            }
            let results = cell[0]
                .results
                .iter()
                .enumerate()
                .map(|(i, first)| {
                    let n = cell.len() as f64;
                    EvalSummary {
                        direction: first.direction.clone(),
                        rank1: cell.iter().map(|r| r.results[i].rank1).sum::<f64>() / n,
                        map: cell.iter().map(|r| r.results[i].map).sum::<f64>() / n,
                    }
                })
                .collect();
            rows.push(AblationRow {
                losses: losses.label(),
                input,
                seeds: grid.seeds.clone(),
                results,
            });
            runs.extend(cell);
        }
    }
    Ok(AblationTable {
        rows,
        runs,
        steps_per_epoch,
        epochs: base.epochs,
    })
}
