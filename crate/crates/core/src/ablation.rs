//! Cartesian grids of training runs, one CSV row per cell.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::{RunConfig, MODEL_KEYS, TRAIN_KEYS};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{evaluate, train, TrainConfig};

pub const CSV_HEADER: &str = "backbone,depth,width,k,dilation,stochastic,final_loss,oa,miou";

/// Environment variable capping the number of concurrent runs.
pub const THREADS_VAR: &str = "DGCN_THREADS";

/// Ordered axes `key = v1,v2,…`; single-valued keys are fixed settings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GridSpec {
    pub axes: Vec<(String, Vec<String>)>,
}

impl GridSpec {
    /// Same syntax as run configs, with comma-separated value lists.
    pub fn parse(text: &str) -> Result<Self> {
        let mut axes: Vec<(String, Vec<String>)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("");
            // Reuse the config tokenizer for `key = value` spacing rules.
            let single = RunConfig::parse(line)
                .map_err(|e| Error::Config(format!("grid line {}: {e}", i + 1)))?;
            for key in single.keys() {
                let values: Vec<String> = single
                    .get(key)
                    .unwrap_or_default()
                    .split(',')
                    .map(|v| v.trim().to_string())
                    .collect();
                if values.iter().any(String::is_empty) {
                    return Err(Error::Config(format!(
                        "grid key {key:?} has an empty value"
                    )));
                }
                if !MODEL_KEYS.iter().chain(TRAIN_KEYS).any(|(k, _)| *k == key) {
                    return Err(Error::Config(format!("unknown grid key {key:?}")));
                }
                match axes.iter_mut().find(|(k, _)| k == key) {
                    Some(axis) => axis.1 = values,
                    None => axes.push((key.to_string(), values)),
                }
            }
        }
        Ok(Self { axes })
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|(_, v)| v.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every combination; the first axis varies slowest.
    pub fn cells(&self) -> Vec<RunConfig> {
        let mut cells = vec![RunConfig::default()];
        for (key, values) in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.set(key, v.clone());
                        c
                    })
                })
                .collect();
        }
        cells
    }
}

/// Result of one grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub final_loss: f64,
    pub oa: f64,
    pub miou: f64,
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    /// `None` when the cell's own configuration was invalid.
    pub model: Option<ModelConfig>,
    pub outcome: std::result::Result<RunOutcome, String>,
}

impl AblationRow {
    pub fn failed(&self) -> bool {
        self.outcome.is_err()
    }

    pub fn csv_row(&self, cell: &RunConfig) -> String {
        let field = |k: &str| cell.get(k).unwrap_or("?").to_string();
        let cfg_fields = match &self.model {
            Some(m) => format!(
                "{},{},{},{},{},{}",
                m.backbone,
                m.depth,
                m.width,
                m.k,
                if m.dilation { "on" } else { "off" },
                if m.epsilon > 0.0 { "on" } else { "off" }
            ),
            None => format!(
                "{},{},{},{},{},{}",
                field("backbone"),
                field("depth"),
                field("width"),
                field("k"),
                field("dilation"),
                field("stochastic")
            ),
        };
        match &self.outcome {
            Ok(o) => format!("{cfg_fields},{:.6},{:.6},{:.6}", o.final_loss, o.oa, o.miou),
            Err(_) => format!("{cfg_fields},failed,failed,failed"),
        }
    }
}

/// `DGCN_THREADS` if set to a positive integer, else the available cores.
pub fn worker_count() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    std::env::var(THREADS_VAR)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(available)
}

/// Trains and evaluates one cell.
pub fn run_cell(
    cell: &RunConfig,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    train_data: &Dataset,
    eval_data: &Dataset,
) -> AblationRow {
    let model = match cell.model_config(base_model.clone()) {
        Ok(m) => m,
        Err(e) => {
            return AblationRow {
                model: None,
                outcome: Err(e.to_string()),
            }
        }
    };
    let outcome = (|| {
        let tc = cell.train_config(base_train.clone())?;
        let (mut trained, logs) = train(model.clone(), train_data, &tc)?;
        let (metrics, _) = evaluate(&mut trained, eval_data)?;
        Ok::<_, Error>(RunOutcome {
            final_loss: logs.last().map_or(f64::NAN, |l| l.loss),
            oa: metrics.overall_accuracy,
            miou: metrics.mean_iou,
        })
    })()
    .map_err(|e| e.to_string());
    AblationRow {
        model: Some(model),
        outcome,
    }
}

/// Runs every cell on up to `workers` threads; rows come back in grid order.
pub fn run_grid(
    grid: &GridSpec,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    train_data: &Dataset,
    eval_data: &Dataset,
    workers: usize,
) -> Vec<(RunConfig, AblationRow)> {
    let cells = grid.cells();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<AblationRow>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = cells.get(i) else { break };
                let row = run_cell(cell, base_model, base_train, train_data, eval_data);
                slots.lock().expect("no panics while holding the lock")[i] = Some(row);
            });
        }
    });
    let rows = slots.into_inner().expect("workers joined");
    cells
        .into_iter()
        .zip(rows)
        .map(|(c, r)| (c, r.expect("every cell ran")))
        .collect()
}

pub fn grid_csv(rows: &[(RunConfig, AblationRow)]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (cell, row) in rows {
        writeln!(out, "{}", row.csv_row(cell)).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, Split, SynthSpec};

    #[test]
    fn grid_order_and_size() {
        let g = GridSpec::parse("backbone=plain,residual depth = 7,14\nwidth=8").unwrap();
        assert_eq!(g.len(), 4);
        let cells = g.cells();
        let pairs: Vec<(&str, &str)> = cells
            .iter()
            .map(|c| (c.get("backbone").unwrap(), c.get("depth").unwrap()))
            .collect();
        assert_eq!(
            pairs,
            [
                ("plain", "7"),
                ("plain", "14"),
                ("residual", "7"),
                ("residual", "14")
            ]
        );
        assert!(cells.iter().all(|c| c.get("width") == Some("8")));
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(GridSpec::parse("colour=red,blue").is_err());
        assert!(GridSpec::parse("depth=1,,2").is_err());
    }

    #[test]
    fn failed_cells_are_marked() {
        let data = synth_dataset(
            &SynthSpec {
                num_blocks: 1,
                points_per_block: 24,
                num_classes: 3,
                seed: 1,
                ..SynthSpec::default()
            },
            Split::Train,
        )
        .unwrap();
        let base = ModelConfig {
            num_classes: 3,
            depth: 1,
            width: 4,
            k: 3,
            fusion_width: 4,
            head_widths: [4, 4],
            ..ModelConfig::default()
        };
        let tc = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let grid = GridSpec::parse("k=3,40 backbone=plain").unwrap();
        let rows = run_grid(&grid, &base, &tc, &data, &data, 2);
        assert!(!rows[0].1.failed());
        assert!(rows[1].1.failed());
        let csv = grid_csv(&rows);
        assert_eq!(csv.lines().next(), Some(CSV_HEADER));
        assert!(csv
            .lines()
            .nth(2)
            .unwrap()
            .ends_with("failed,failed,failed"));
        assert!(csv
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("plain,1,4,3,on,on,"));
    }
}
