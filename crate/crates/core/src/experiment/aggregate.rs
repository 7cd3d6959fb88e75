use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::MetricsRow;

pub const GRID_STEP: usize = 1000;

/// `GRID_STEP, 2 * GRID_STEP, ...` up to and including `budget`.
pub fn step_grid(budget: usize) -> Vec<usize> {
    (1..=budget / GRID_STEP).map(|i| i * GRID_STEP).collect()
}

/// Piecewise-linear interpolation of `(x, y)` points, held constant beyond
/// either end. `points` must be sorted by `x`.
pub fn interpolate(points: &[(f64, f64)], x: f64) -> f64 {
    let Some(first) = points.first() else { return f64::NAN };
    if x <= first.0 {
        return first.1;
    }
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x <= x1 {
            return if x1 == x0 {
                y1
            } else {
                y0 + (y1 - y0) * (x - x0) / (x1 - x0)
            };
        }
    }
    points[points.len() - 1].1
}

/// One metric of one seed sampled on the grid.
pub fn resample(rows: &[MetricsRow], grid: &[usize], metric: impl Fn(&MetricsRow) -> Option<f64>) -> Option<Vec<f64>> {
    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| metric(r).map(|y| (r.env_steps as f64, y)))
        .collect();
    if points.is_empty() {
        return None;
    }
    Some(grid.iter().map(|&x| interpolate(&points, x as f64)).collect())
}

/// Mean and standard error (sample stdev over sqrt n, zero for one value).
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub env_steps: usize,
    pub n_seeds: usize,
    pub reward_mean: f64,
    pub reward_se: f64,
    pub inapplicable_mean: f64,
    pub inapplicable_se: f64,
    pub classifier_loss_mean: Option<f64>,
    pub classifier_loss_se: Option<f64>,
    pub classifier_accuracy_mean: Option<f64>,
    pub classifier_accuracy_se: Option<f64>,
    pub epsilon_mean: f64,
    pub epsilon_se: f64,
}

type Metric = fn(&MetricsRow) -> Option<f64>;

const METRICS: [Metric; 5] = [
    |r| Some(r.mean_reward_norm),
    |r| Some(r.mean_inapplicable_per_episode),
    |r| r.classifier_loss,
    |r| r.classifier_accuracy,
    |r| Some(r.epsilon),
];

/// Cross-seed mean and standard error of every metric on the step grid.
pub fn aggregate(runs: &[Vec<MetricsRow>], budget: usize) -> Result<Vec<AggregateRow>> {
    if runs.is_empty() || runs.iter().any(Vec::is_empty) {
        return Err(Error::Empty("aggregation needs at least one non-empty run".into()));
    }
    let grid = step_grid(budget);
    let series: Vec<Vec<Option<Vec<f64>>>> = METRICS
        .iter()
        .map(|m| runs.iter().map(|r| resample(r, &grid, m)).collect())
        .collect();
    let stat = |metric: usize, i: usize| -> Option<(f64, f64)> {
        let values: Option<Vec<f64>> = series[metric].iter().map(|s| s.as_ref().map(|v| v[i])).collect();
        values.map(|v| mean_se(&v))
    };
    Ok(grid
        .iter()
        .enumerate()
        .map(|(i, &env_steps)| {
            let (reward_mean, reward_se) = stat(0, i).expect("reward is always present");
            let (inapplicable_mean, inapplicable_se) = stat(1, i).expect("inapplicable count is always present");
            let loss = stat(2, i);
            let acc = stat(3, i);
            let (epsilon_mean, epsilon_se) = stat(4, i).expect("epsilon is always present");
            AggregateRow {
                env_steps,
                n_seeds: runs.len(),
                reward_mean,
                reward_se,
                inapplicable_mean,
                inapplicable_se,
                classifier_loss_mean: loss.map(|s| s.0),
                classifier_loss_se: loss.map(|s| s.1),
                classifier_accuracy_mean: acc.map(|s| s.0),
                classifier_accuracy_se: acc.map(|s| s.1),
                epsilon_mean,
                epsilon_se,
            }
        })
        .collect())
}

pub fn write_aggregate<W: Write>(rows: &[AggregateRow], sources: &[String], mut out: W) -> Result<()> {
    writeln!(out, "# sources: {}", sources.join(" ")).map_err(|e| Error::io("<aggregate>", e))?;
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<aggregate>", e))?;
    Ok(())
}

pub fn save_aggregate(rows: &[AggregateRow], sources: &[String], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_aggregate(rows, sources, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Rows and the `# sources:` list of an aggregate file.
pub fn load_aggregate(path: &Path) -> Result<(Vec<AggregateRow>, Vec<String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (first, body) = text.split_once('\n').unwrap_or((&text, ""));
    let sources = first
        .strip_prefix("# sources:")
        .ok_or_else(|| Error::Config(format!("{} lacks the sources header", path.display())))?
        .split_whitespace()
        .map(str::to_string)
        .collect();
    let rows = csv::Reader::from_reader(body.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<AggregateRow>, _>>()?;
    Ok((rows, sources))
}

/// Rebuilds an aggregate from the per-seed files named in its header.
pub fn reaggregate(path: &Path, budget: usize) -> Result<Vec<u8>> {
    let (_, sources) = load_aggregate(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let runs = sources
        .iter()
        .map(|s| crate::trainer::load_metrics(&dir.join(s)))
        .collect::<Result<Vec<_>>>()?;
    let mut buf = Vec::new();
    write_aggregate(&aggregate(&runs, budget)?, &sources, &mut buf)?;
    Ok(buf)
}
