//! Fan-out of independent runs over worker threads, and mean±std tables.

use std::collections::VecDeque;
use std::sync::Mutex;

/// Runs `f` on every job with up to `workers` threads. Results come back in
/// job order whatever the worker count.
pub fn run_jobs<J, R, F>(jobs: Vec<J>, workers: usize, f: F) -> Vec<R>
where
    J: Send,
    R: Send,
    F: Fn(usize, J) -> R + Sync,
{
    let n = jobs.len();
    let queue = Mutex::new(jobs.into_iter().enumerate().collect::<VecDeque<_>>());
    let results = Mutex::new((0..n).map(|_| None).collect::<Vec<Option<R>>>());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let next = queue.lock().expect("queue lock").pop_front();
                let Some((i, job)) = next else { break };
                let r = f(i, job);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Mean and sample standard deviation; NaN if any value is NaN.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() || v.iter().any(|x| x.is_nan()) {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn cell(v: &[f64]) -> String {
    let (m, s) = mean_std(v);
    if m.is_nan() {
        "NaN".into()
    } else {
        format!("{m:.2}±{s:.2}")
    }
}

/// A table of accuracies indexed `[row][target][seed]`, in percent.
pub struct Grid {
    pub row_names: Vec<String>,
    pub target_names: Vec<String>,
    pub values: Vec<Vec<Vec<f64>>>,
}

impl Grid {
    /// Per-seed average over targets for one row.
    pub fn seed_averages(&self, row: usize) -> Vec<f64> {
        let targets = &self.values[row];
        let seeds = targets.first().map_or(0, Vec::len);
        (0..seeds)
            .map(|s| targets.iter().map(|t| t[s]).sum::<f64>() / targets.len() as f64)
            .collect()
    }

    pub fn row_cells(&self, row: usize) -> Vec<String> {
        let mut cells: Vec<String> = self.values[row].iter().map(|t| cell(t)).collect();
        cells.push(cell(&self.seed_averages(row)));
        cells
    }

    pub fn csv(&self, first: &str) -> String {
        let mut s = format!("{first},{},avg\n", self.target_names.join(","));
        for (r, name) in self.row_names.iter().enumerate() {
            s.push_str(&format!("{name},{}\n", self.row_cells(r).join(",")));
        }
        s
    }

    pub fn text(&self, first: &str) -> String {
        let mut header = vec![first.to_string()];
        header.extend(self.target_names.iter().cloned());
        header.push("avg".into());
        let rows: Vec<Vec<String>> = (0..self.row_names.len())
            .map(|r| {
                let mut c = vec![self.row_names[r].clone()];
                c.extend(self.row_cells(r));
                c
            })
            .collect();
        doprompt_core::analysis::text_table(&header, &rows)
    }
}
