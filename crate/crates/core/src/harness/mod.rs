//! Experiment drivers: synthetic data, hold-out splits, metrics and the
//! file outputs behind the `qep` command-line tool.

pub mod config;
pub mod experiments;
pub mod io;

pub use config::{Experiment, ExperimentConfig, PriorKind, Series};
pub use experiments::{
    deblur, fit_map, map_run, predict, predict_run, report, run_chain, sample_prior, MapRun, MetricsReport,
    PredictRun, RunOutput, TraceRow,
};

use nalgebra::DVector;

use crate::error::{check_len, invalid, Result};
use crate::kernels::Grid;

/// Piecewise-constant trajectory with jumps at `t = 1` and `t = 1.5`.
pub fn step_truth(t: f64) -> f64 {
    if t <= 1.0 {
        1.0
    } else if t <= 1.5 {
        0.5
    } else {
        2.0
    }
}

/// Continuous piecewise-linear trajectory with turns at `t = 1` and `t = 1.5`.
pub fn turning_truth(t: f64) -> f64 {
    if t <= 1.0 {
        1.5 * t
    } else if t <= 1.5 {
        3.5 - 2.0 * t
    } else {
        3.0 * t - 4.0
    }
}

fn series(n: usize, f: fn(f64) -> f64) -> Result<(Grid, DVector<f64>)> {
    if n < 2 {
        return invalid("a time series needs at least two points");
    }
    let grid = Grid::uniform_1d(n, 0.0, 2.0)?;
    let truth = DVector::from_iterator(n, grid.points().map(|p| f(p[0])));
    Ok((grid, truth))
}

/// `n` evenly spaced points on `[0, 2]` and the step trajectory on them.
pub fn gen_step_series(n: usize) -> Result<(Grid, DVector<f64>)> {
    series(n, step_truth)
}

/// `n` evenly spaced points on `[0, 2]` and the turning trajectory on them.
pub fn gen_turning_series(n: usize) -> Result<(Grid, DVector<f64>)> {
    series(n, turning_truth)
}

/// Splits `0..n` into `(train, test)`.
///
/// The test set is the last `⌊n/8⌋` indices plus every second index of the
/// preceding block `[n/2, n - ⌊n/8⌋)`, starting from its second entry.
pub fn holdout_split(n: usize) -> (Vec<usize>, Vec<usize>) {
    let tail = n - n / 8;
    let block = n / 2;
    let is_test = |i: usize| i >= tail || (i >= block && (i - block) % 2 == 1);
    (0..n).partition(|&i| !is_test(i))
}

/// `‖estimate - truth‖ / ‖truth‖`.
pub fn relative_error(estimate: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    check_len(truth.len(), estimate.len())?;
    let norm = truth.norm();
    if norm == 0.0 {
        return invalid("relative error is undefined for a zero truth");
    }
    Ok((estimate - truth).norm() / norm)
}

/// Piecewise-constant test image of overlapping gray rectangles, row-major,
/// values in `[0, 1]`.
pub fn blocks_image(rows: usize, cols: usize) -> Result<DVector<f64>> {
    if rows < 4 || cols < 4 {
        return invalid("blocks image needs at least 4x4 pixels");
    }
    let (r, c) = (rows as f64, cols as f64);
    // (top, left, bottom, right) as fractions of the image, and the gray level
    let blocks = [
        (0.125, 0.125, 0.5, 0.5, 0.9),
        (0.5, 0.375, 0.875, 0.875, 0.6),
        (0.1875, 0.625, 0.3125, 0.8125, 1.0),
        (0.625, 0.0625, 0.8125, 0.25, 0.4),
    ];
    Ok(DVector::from_fn(rows * cols, |k, _| {
        let (i, j) = ((k / cols) as f64 + 0.5, (k % cols) as f64 + 0.5);
        blocks
            .iter()
            .rev()
            .find(|b| i >= b.0 * r && i < b.2 * r && j >= b.1 * c && j < b.3 * c)
            .map_or(0.1, |b| b.4)
    }))
}

/// Pixels whose 4-neighbourhood is not constant in `image`.
pub fn edge_pixels(image: &DVector<f64>, rows: usize, cols: usize) -> Vec<usize> {
    let at = |i: usize, j: usize| image[i * cols + j];
    (0..rows * cols)
        .filter(|&k| {
            let (i, j) = (k / cols, k % cols);
            let v = at(i, j);
            (i > 0 && at(i - 1, j) != v)
                || (i + 1 < rows && at(i + 1, j) != v)
                || (j > 0 && at(i, j - 1) != v)
                || (j + 1 < cols && at(i, j + 1) != v)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectories_at_reference_points() {
        assert_eq!(step_truth(0.5), 1.0);
        assert_eq!(step_truth(1.25), 0.5);
        assert_eq!(step_truth(1.75), 2.0);
        assert_eq!(step_truth(1.0), 1.0);
        assert_eq!(turning_truth(1.0), 1.5);
        assert_eq!(turning_truth(1.5), 0.5);
        assert_eq!(turning_truth(2.0), 2.0);
        let (grid, truth) = gen_step_series(5).unwrap();
        assert_eq!(grid.point(4), &[2.0]);
        assert_eq!(truth.as_slice(), &[1.0, 1.0, 1.0, 0.5, 2.0]);
        assert!(gen_turning_series(1).is_err());
    }

    #[test]
    fn holdout_sizes() {
        let (train, test) = holdout_split(200);
        assert_eq!(train.len(), 138);
        assert_eq!(test.len(), 62);
        let (train, test) = holdout_split(16);
        assert_eq!(test, vec![9, 11, 13, 14, 15]);
        assert_eq!(train.len(), 11);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn relative_error_cases() {
        let t = DVector::from_vec(vec![1.0, -2.0, 2.0]);
        assert_eq!(relative_error(&t, &t).unwrap(), 0.0);
        assert_eq!(relative_error(&DVector::zeros(3), &t).unwrap(), 1.0);
        assert_eq!(relative_error(&(&t * 2.0), &t).unwrap(), 1.0);
        assert!(relative_error(&t, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn blocks_have_edges() {
        let img = blocks_image(32, 32).unwrap();
        let edges = edge_pixels(&img, 32, 32);
        assert!(!edges.is_empty() && edges.len() < 1024);
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
