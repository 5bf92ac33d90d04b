//! Runtime-scaling sweeps, log-log slope fits and Pareto frontiers.

use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::error::{invalid, Result};

/// Default number of trailing sweep points used in a slope fit.
pub const DEFAULT_SLOPE_POINTS: usize = 7;

/// Wall time of one `(method, N)` cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchCell {
    pub method: String,
    pub n: usize,
    pub train_secs: f64,
    pub predict_secs: f64,
    /// Test error of the run (NMSE or error rate), when measured.
    pub error: Option<f64>,
    /// Not run, or ran past the time limit.
    pub censored: bool,
}

/// What one run of a benchmarked method reports.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measurement {
    pub train_secs: f64,
    pub predict_secs: f64,
    pub error: Option<f64>,
}

impl Measurement {
    pub fn train_only(secs: f64) -> Self {
        Self {
            train_secs: secs,
            predict_secs: 0.0,
            error: None,
        }
    }
}

impl BenchCell {
    pub fn total_secs(&self) -> f64 {
        self.train_secs + self.predict_secs
    }
}

/// Least-squares line through `(log N, log t)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlopeFit {
    pub method: String,
    pub slope: f64,
    pub intercept: f64,
    pub points: usize,
}

/// Runs `f` once and returns its result with the elapsed seconds.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

/// Times `run(n)` for every size in increasing order. Once a cell exceeds
/// `limit_secs` it is marked censored, and every larger size is recorded
/// as censored without being run.
pub fn sweep<F>(
    method: &str,
    sizes: &[usize],
    limit_secs: f64,
    mut run: F,
) -> Result<Vec<BenchCell>>
where
    F: FnMut(usize) -> Result<Measurement>,
{
    let mut sorted = sizes.to_vec();
    sorted.sort_unstable();
    let mut out = Vec::with_capacity(sorted.len());
    let mut stopped = false;
    for n in sorted {
        if stopped {
            out.push(BenchCell {
                method: method.into(),
                n,
                train_secs: f64::NAN,
                predict_secs: f64::NAN,
                error: None,
                censored: true,
            });
            continue;
        }
        let m = run(n)?;
        let censored = m.train_secs + m.predict_secs > limit_secs;
        stopped = censored;
        out.push(BenchCell {
            method: method.into(),
            n,
            train_secs: m.train_secs,
            predict_secs: m.predict_secs,
            error: m.error,
            censored,
        });
    }
    Ok(out)
}

/// Slope of `log(total time)` against `log N` over the last `k` uncensored
/// cells of `method`. `None` when fewer than two usable points remain.
pub fn loglog_slope(cells: &[BenchCell], method: &str, k: usize) -> Option<SlopeFit> {
    let mut pts: Vec<(f64, f64)> = cells
        .iter()
        .filter(|c| c.method == method && !c.censored && c.total_secs() > 0.0)
        .map(|c| ((c.n as f64).ln(), c.total_secs().ln()))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let pts = &pts[pts.len().saturating_sub(k)..];
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx;
    Some(SlopeFit {
        method: method.into(),
        slope,
        intercept: my - slope * mx,
        points: pts.len(),
    })
}

/// Writes `method,n,train_secs,predict_secs,total_secs,error,censored`
/// followed by one constant column per `extra` entry.
pub fn write_cells_csv<W: Write>(
    cells: &[BenchCell],
    extra: &[(&str, String)],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "method",
        "n",
        "train_secs",
        "predict_secs",
        "total_secs",
        "error",
        "censored",
    ];
    header.extend(extra.iter().map(|e| e.0));
    w.write_record(&header)
        .map_err(|e| invalid(e.to_string()))?;
    for c in cells {
        let secs = |v: f64| {
            if v.is_finite() {
                format!("{v:.6}")
            } else {
                String::new()
            }
        };
        w.write_record(
            [
                c.method.clone(),
                c.n.to_string(),
                secs(c.train_secs),
                secs(c.predict_secs),
                secs(c.total_secs()),
                c.error.map_or_else(String::new, |e| format!("{e:.6}")),
                c.censored.to_string(),
            ]
            .into_iter()
            .chain(extra.iter().map(|e| e.1.clone())),
        )
        .map_err(|e| invalid(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// A gnuplot script drawing every method of `csv_path` on log-log axes.
pub fn gnuplot_script(csv_path: &str, methods: &[String], output_png: &str) -> String {
    let mut s = String::new();
    s.push_str("set datafile separator ','\n");
    s.push_str("set logscale xy\n");
    s.push_str("set xlabel 'N'\nset ylabel 'seconds'\nset key left top\n");
    s.push_str(&format!(
        "set terminal pngcairo size 800,600\nset output '{output_png}'\n"
    ));
    let plots: Vec<String> = methods
        .iter()
        .map(|m| format!("'{csv_path}' using (strcol(1) eq '{m}' && strcol(7) eq 'false' ? $2 : 1/0):5 with linespoints title '{m}'"))
        .collect();
    s.push_str(&format!("plot {}\n", plots.join(", \\\n     ")));
    s
}

/// Methods on the runtime/error Pareto frontier at every size where at
/// least one uncensored cell has a measured error.
pub fn pareto_by_size(cells: &[BenchCell]) -> Vec<(usize, Vec<String>)> {
    let mut sizes: Vec<usize> = cells.iter().map(|c| c.n).collect();
    sizes.sort_unstable();
    sizes.dedup();
    sizes
        .into_iter()
        .filter_map(|n| {
            let here: Vec<&BenchCell> = cells
                .iter()
                .filter(|c| c.n == n && !c.censored && c.error.is_some())
                .collect();
            let pts: Vec<(f64, f64)> = here
                .iter()
                .map(|c| (c.total_secs(), c.error.unwrap_or(f64::NAN)))
                .collect();
            let front = pareto_frontier(&pts);
            (!front.is_empty()).then(|| {
                (
                    n,
                    front.into_iter().map(|i| here[i].method.clone()).collect(),
                )
            })
        })
        .collect()
}

/// Indices of points not dominated in both coordinates (lower is better
/// for each), sorted by the first coordinate. Ties keep the lower index.
pub fn pareto_frontier(points: &[(f64, f64)]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len())
        .filter(|&i| points[i].0.is_finite() && points[i].1.is_finite())
        .collect();
    idx.sort_by(|&a, &b| {
        points[a]
            .0
            .total_cmp(&points[b].0)
            .then(points[a].1.total_cmp(&points[b].1))
            .then(a.cmp(&b))
    });
    let mut out = Vec::new();
    let mut best = f64::INFINITY;
    for i in idx {
        if points[i].1 < best {
            best = points[i].1;
            out.push(i);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_stub_has_unit_slope() {
        let cells = sweep("stub", &[1000, 2000, 4000, 8000, 16000], 10.0, |n| {
            let ((), t) =
                timed(|| std::thread::sleep(std::time::Duration::from_micros(n as u64 / 4)));
            Ok(Measurement::train_only(t))
        })
        .unwrap();
        let fit = loglog_slope(&cells, "stub", DEFAULT_SLOPE_POINTS).unwrap();
        assert!((fit.slope - 1.0).abs() < 0.3, "{}", fit.slope);
    }

    #[test]
    fn censoring_stops_the_sweep() {
        let cells = sweep("slow", &[4, 1, 2, 8], 2.5, |n| {
            Ok(Measurement::train_only(n as f64))
        })
        .unwrap();
        let flags: Vec<bool> = cells.iter().map(|c| c.censored).collect();
        assert_eq!(flags, vec![false, false, true, true]);
        let fit = loglog_slope(&cells, "slow", 7).unwrap();
        assert_eq!(fit.points, 2);
        assert!((fit.slope - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frontier() {
        let pts = [
            (1.0, 5.0),
            (2.0, 3.0),
            (3.0, 4.0),
            (0.5, 9.0),
            (2.0, 3.0),
            (10.0, 1.0),
        ];
        assert_eq!(pareto_frontier(&pts), vec![3, 0, 1, 5]);
    }
}
