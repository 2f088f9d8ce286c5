//! CSV logs, level-set grids and the key = value summary.

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, Context};
use nalgebra::DVector;
use rayon::prelude::*;
use softmin_cbf::barrier::{barrier_levels, BarrierConfig};
use softmin_cbf::{Mode, TrajectoryLog};

use crate::experiment::{Experiment, RunOutcome};
use crate::models::ModelBundle;

/// Float format with 17 significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn trajectory_header(n: usize, m: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((0..n).map(|i| format!("x{i}")));
    h.extend((0..m).map(|i| format!("u{i}")));
    h.extend(["h", "hbar_star", "h_s", "beta", "gamma", "mode"].map(String::from));
    h
}

pub fn write_trajectory<W: Write>(out: W, log: &TrajectoryLog, n: usize, m: usize) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trajectory_header(n, m))?;
    for r in &log.rows {
        let mut rec = vec![fmt_float(r.t)];
        rec.extend(r.x.iter().map(|v| fmt_float(*v)));
        rec.extend(r.u.iter().map(|v| fmt_float(*v)));
        rec.extend([r.h, r.hbar_star, r.h_s, r.beta, r.gamma].map(fmt_float));
        rec.push(r.mode.as_str().to_string());
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Barrier values on the diagnostic grid between control ticks.
pub fn write_fine_grid<W: Write>(out: W, log: &TrajectoryLog, n: usize) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("x{i}")));
    header.extend(["h_s", "h", "hbar_star"].map(String::from));
    w.write_record(header)?;
    for s in &log.fine_grid {
        let mut rec = vec![fmt_float(s.t)];
        rec.extend(s.x.iter().map(|v| fmt_float(*v)));
        rec.extend([s.h_s, s.h, s.hbar_star].map(fmt_float));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One parsed trajectory row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub h: f64,
    pub hbar_star: f64,
    pub h_s: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mode: Mode,
}

/// Parses a trajectory CSV, checking the column layout.
pub fn read_trajectory<R: Read>(input: R, n: usize, m: usize) -> anyhow::Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_reader(input);
    let expected = trajectory_header(n, m);
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != expected {
        bail!("unexpected trajectory columns {header:?}, expected {expected:?}");
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> anyhow::Result<f64> {
            rec[i].parse::<f64>().with_context(|| format!("row {line}: column `{}`", expected[i]))
        };
        let x = (1..=n).map(num).collect::<anyhow::Result<Vec<_>>>()?;
        let u = (n + 1..=n + m).map(num).collect::<anyhow::Result<Vec<_>>>()?;
        let k = n + m + 1;
        rows.push(CsvRow {
            t: num(0)?,
            x,
            u,
            h: num(k)?,
            hbar_star: num(k + 1)?,
            h_s: num(k + 2)?,
            beta: num(k + 3)?,
            gamma: num(k + 4)?,
            mode: rec[k + 5].parse().with_context(|| format!("row {line}: column `mode`"))?,
        });
    }
    Ok(rows)
}

/// `h_s`, `h_b`, `h` and `h̄_*` on a grid over the first two state
/// coordinates, other coordinates fixed. Columns: `x0,x1,h_s,h_b,h,hbar_star`.
/// Points whose predicted flow diverges get `nan` for `h` and `h̄_*`.
pub fn write_level_grid<W: Write>(
    out: W,
    bundle: &ModelBundle,
    cfg: &BarrierConfig,
    resolution: [usize; 2],
    lo: [f64; 2],
    hi: [f64; 2],
    fixed: &[f64],
) -> anyhow::Result<()> {
    let n = bundle.state_dim();
    anyhow::ensure!(fixed.len() + 2 == n, "grid needs {} fixed coordinates", n - 2);
    let axis = |k: usize, i: usize| lo[k] + (hi[k] - lo[k]) * i as f64 / (resolution[k] - 1) as f64;
    let points: Vec<DVector<f64>> = (0..resolution[1])
        .flat_map(|j| (0..resolution[0]).map(move |i| (i, j)))
        .map(|(i, j)| {
            let mut x = DVector::zeros(n);
            x[0] = axis(0, i);
            x[1] = axis(1, j);
            for (k, v) in fixed.iter().enumerate() {
                x[k + 2] = *v;
            }
            x
        })
        .collect();
    let values: Vec<[f64; 4]> = points
        .par_iter()
        .map(|x| {
            let (h, hbar) = barrier_levels(&bundle.field, &bundle.safety, cfg, x).unwrap_or((f64::NAN, f64::NAN));
            [bundle.safety.value(x), bundle.field.backup.barrier(x), h, hbar]
        })
        .collect();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x0", "x1", "h_s", "h_b", "h", "hbar_star"])?;
    for (x, v) in points.iter().zip(values) {
        let mut rec = vec![fmt_float(x[0]), fmt_float(x[1])];
        rec.extend(v.map(fmt_float));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the grid configured for `exp` to `path`.
pub fn write_experiment_grid(exp: &Experiment, path: &Path) -> anyhow::Result<()> {
    let g = &exp.config.grid;
    let d = &exp.bundle.domain;
    let lo = g.lo.unwrap_or([d.lo[0], d.lo[1]]);
    let hi = g.hi.unwrap_or([d.hi[0], d.hi[1]]);
    let n = exp.bundle.state_dim();
    let fixed = if g.fixed.is_empty() { vec![0.0; n - 2] } else { g.fixed.clone() };
    let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut cfg = exp.barrier;
    cfg.epsilon = 0.0;
    write_level_grid(std::io::BufWriter::new(file), &exp.bundle, &cfg, g.resolution, lo, hi, &fixed)
}

/// Ordered `key = value` lines.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Summary {
    pub entries: Vec<(String, String)>,
}

impl Summary {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn push_float(&mut self, key: impl Into<String>, value: f64) {
        self.push(key, fmt_float(value));
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> anyhow::Result<Summary> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once(" = ").with_context(|| format!("summary line {}: missing ` = `", i + 1))?;
            entries.push((k.to_string(), v.to_string()));
        }
        Ok(Summary { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// Per-run metrics keyed `run.<name>.<metric>`.
pub fn summarize(exp: &Experiment, outcomes: &[RunOutcome]) -> Summary {
    let mut s = Summary::default();
    s.push("model", exp.bundle.name);
    s.push("seed", exp.seed());
    s.push("runs", outcomes.len());
    if let Some(l) = exp.lipschitz_if_computed() {
        s.push_float("lipschitz.l_s", l.l_s);
        s.push_float("lipschitz.l_phi", l.l_phi);
        s.push_float("lipschitz.epsilon_threshold", l.epsilon_threshold);
        s.push_float("lipschitz.sampled_sup_h", l.sampled_sup_h);
    }
    if let Some(syn) = &exp.robot_synthesis {
        s.push_float("robot.c_b_requested", syn.c_b_requested);
        s.push_float("robot.c_b", syn.c_b);
        s.push_float("robot.lyapunov_residual", syn.residual);
    }
    let poly = &exp.bundle.polytope;
    for o in outcomes {
        let p = format!("run.{}", o.name);
        let log = &o.log;
        s.push_float(format!("{p}.epsilon"), o.epsilon);
        s.push(format!("{p}.rows"), log.rows.len());
        s.push_float(format!("{p}.min_h_s"), log.min_h_s());
        s.push_float(format!("{p}.min_hbar_star"), log.min_hbar_star());
        s.push_float(format!("{p}.min_h"), log.min_h());
        s.push_float(format!("{p}.min_beta"), log.min_beta());
        s.push_float(format!("{p}.max_constraint_violation"), log.max_violation(poly));
        let m = exp.bundle.field.system.input_dim();
        for k in 0..m {
            let (lo, hi) = log.rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.u[k]), b.max(r.u[k])));
            s.push_float(format!("{p}.min_u{k}"), lo);
            s.push_float(format!("{p}.max_u{k}"), hi);
        }
        if !log.fine_grid.is_empty() {
            let fine_min = log.fine_grid.iter().map(|f| f.hbar_star).fold(f64::INFINITY, f64::min);
            s.push_float(format!("{p}.fine_min_hbar_star"), fine_min);
        }
        if let Some(d) = o.final_goal_distance() {
            s.push_float(format!("{p}.final_goal_distance"), d);
        }
        s.push(format!("{p}.wall_time_s"), format!("{:.3}", log.wall_time));
        if let Some(e) = &o.error {
            s.push(format!("{p}.error"), e.replace('\n', " "));
        }
    }
    s
}

/// Writes `<name>.csv` (and `<name>.fine.csv` when recorded) per run plus
/// `summary.txt` into `dir`.
pub fn write_outcomes(exp: &Experiment, outcomes: &[RunOutcome], dir: &Path) -> anyhow::Result<Summary> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let n = exp.bundle.state_dim();
    let m = exp.bundle.field.system.input_dim();
    for o in outcomes {
        let path = dir.join(format!("{}.csv", o.name));
        let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        write_trajectory(std::io::BufWriter::new(file), &o.log, n, m)?;
        if !o.log.fine_grid.is_empty() {
            let path = dir.join(format!("{}.fine.csv", o.name));
            let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            write_fine_grid(std::io::BufWriter::new(file), &o.log, n)?;
        }
    }
    let summary = summarize(exp, outcomes);
    std::fs::write(dir.join("summary.txt"), summary.render())?;
    Ok(summary)
}
