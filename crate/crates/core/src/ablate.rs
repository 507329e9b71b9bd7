//! Ablation matrix: train and evaluate a family of structural variants from
//! one base configuration. Every state reuses the base seed, data, and
//! schedule, so rows differ only in the component under test.

use std::io::Write;

use crate::config::{AblationState, RunConfig};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::train::{evaluate, Trainer};

/// One evaluated variant.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub state: AblationState,
    pub metrics: Metrics,
}

/// Split the comparison is scored on: validation when present, else training.
pub fn eval_split(data: &Dataset) -> Split {
    if data.val.is_empty() {
        Split::Train
    } else {
        Split::Val
    }
}

/// Train every requested state from scratch and evaluate each on
/// [`eval_split`]. `state_log` opens the per-state log sink; each log begins
/// with a `config` event holding the variant's full TOML so the differences
/// between states stay auditable.
pub fn run_states<W, F>(
    base: &RunConfig,
    states: &[AblationState],
    data: &Dataset,
    mut state_log: F,
) -> Result<Vec<AblationRow>>
where
    W: Write,
    F: FnMut(AblationState) -> Result<W>,
{
    let split = eval_split(data);
    let mut rows = Vec::with_capacity(states.len());
    for &state in states {
        let mut run = base.clone();
        run.model.ablation = state;
        run.validate()?;
        let mut log = state_log(state)?;
        let header = serde_json::json!({
            "event": "config", "state": state.name(), "toml": run.to_toml(),
        });
        writeln!(log, "{header}").map_err(|e| Error::io("log", e))?;
        let mut trainer = Trainer::new(run);
        trainer.train(&data.train, &mut log, None)?;
        let metrics =
            evaluate(&trainer.store, &trainer.run.model, data.split(split), trainer.run.train.batch_size);
        rows.push(AblationRow { state, metrics });
    }
    Ok(rows)
}

/// Fixed-width comparison table: one row per state, metrics in columns.
pub fn format_report(rows: &[AblationRow], split: Split) -> String {
    let mut out = format!("{:<10} {:<5} {:>7} {:>7} {:>7} {:>7}\n", "state", "split", "mDice", "mIoU", "Rec", "Pre");
    for row in rows {
        let m = &row.metrics;
        out.push_str(&format!(
            "{:<10} {:<5} {:>7.4} {:>7.4} {:>7.4} {:>7.4}\n",
            row.state.name(),
            split.name(),
            m.dice,
            m.iou,
            m.recall,
            m.precision
        ));
    }
    out
}
