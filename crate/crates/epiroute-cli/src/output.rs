//! Bit-stable file emission: CSV with full round-trip float precision and
//! pretty JSON summaries.

use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;

use epiroute::experiments::ExperimentResult;
use epiroute::mcsim::MCOutcome;
use epiroute::model::{ModelParams, Trajectory};

/// 17 significant digits: enough to reproduce any f64 exactly on re-parse.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<Option<f64>>]) -> anyhow::Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let fields: Vec<String> = row
            .iter()
            .map(|v| match v {
                Some(x) => {
                    anyhow::ensure!(x.is_finite(), "non-finite value in CSV output");
                    Ok(fmt_f64(*x))
                }
                None => Ok(String::new()),
            })
            .collect::<anyhow::Result<_>>()?;
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// `t,S0..SB,I0..IB,E,u_s..u_B`, one row per grid point. The control columns
/// carry the control of the segment starting at the row's time (the final row
/// repeats the last segment).
pub fn trajectory_csv(path: &Path, traj: &Trajectory, params: &ModelParams) -> anyhow::Result<()> {
    let b = params.max_energy;
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((0..=b).map(|i| format!("S{i}")));
    header.extend((0..=b).map(|i| format!("I{i}")));
    header.push("E".into());
    header.extend(params.control_levels().map(|i| format!("u{i}")));

    let mut rows = Vec::with_capacity(traj.len());
    for k in 0..traj.len() {
        let state = &traj.states[k];
        let mut row: Vec<Option<f64>> = Vec::with_capacity(header.len());
        row.push(Some(traj.times[k]));
        row.extend(state.susceptible.iter().map(|v| Some(*v)));
        row.extend(state.infective.iter().map(|v| Some(*v)));
        row.push(Some(state.exposure));
        match traj.controls.get(k.min(traj.controls.len().wrapping_sub(1))) {
            Some(control) => row.extend(control.iter().map(|v| Some(*v))),
            None => row.extend(params.control_levels().map(|_| Some(0.0))),
        }
        rows.push(row);
    }
    write_csv(path, &header, &rows)
}

/// Per-run ensemble outcomes.
pub fn outcomes_csv(
    path: &Path,
    outcomes: &[MCOutcome],
    params: &ModelParams,
) -> anyhow::Result<()> {
    let b = params.max_energy;
    let mut header: Vec<String> = vec![
        "run".into(),
        "delivered".into(),
        "delivery_time".into(),
        "unbiased_cost".into(),
        "pair_contacts".into(),
        "forwards".into(),
    ];
    header.extend((0..=b).map(|i| format!("S{i}")));
    header.extend((0..=b).map(|i| format!("I{i}")));

    let mut rows = Vec::with_capacity(outcomes.len());
    for (run, o) in outcomes.iter().enumerate() {
        let mut row: Vec<Option<f64>> = vec![
            Some(run as f64),
            Some(if o.delivered { 1.0 } else { 0.0 }),
            o.delivery_time,
            Some(o.unbiased_cost),
            Some(o.pair_contacts as f64),
            Some(o.forwards as f64),
        ];
        row.extend(o.susceptible_hist.iter().map(|v| Some(*v as f64)));
        row.extend(o.infective_hist.iter().map(|v| Some(*v as f64)));
        rows.push(row);
    }
    write_csv(path, &header, &rows)
}

pub fn experiment_csv(path: &Path, result: &ExperimentResult) -> anyhow::Result<()> {
    write_csv(path, &result.columns, &result.rows)
}
