//! Time-averaged Monte Carlo variance across repeated runs.

use std::fmt;
use std::io::Write;

use serde::Serialize;
use switchem::io::RecordTable;

use crate::error::CliError;

/// Per-parameter mean over `t` of the across-run unbiased variance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct McVarianceReport {
    pub parameters: Vec<String>,
    pub variances: Vec<f64>,
    pub runs: usize,
    /// Number of time steps entering the average.
    pub steps: usize,
}

/// Columns that hold parameter estimates.
pub fn is_parameter_column(name: &str) -> bool {
    name != "t" && !name.starts_with("xhat_") && !name.starts_with("p_mode_")
}

pub fn mc_variance(tables: &[RecordTable], burn_fraction: f64) -> Result<McVarianceReport, CliError> {
    if tables.len() < 2 {
        return Err(CliError::Config(format!("need at least 2 runs, got {}", tables.len())));
    }
    if !(0.0..1.0).contains(&burn_fraction) {
        return Err(CliError::Config(format!("burn_fraction {burn_fraction} outside [0, 1)")));
    }
    let header = &tables[0].header;
    let n = tables[0].rows.len();
    for (j, table) in tables.iter().enumerate().skip(1) {
        if &table.header != header {
            return Err(CliError::Config(format!("run {j} has different columns than run 0")));
        }
        if table.rows.len() != n {
            return Err(CliError::Config(format!("run {j} has {} rows, run 0 has {n}", table.rows.len())));
        }
    }
    let columns: Vec<usize> = (0..header.len()).filter(|&c| is_parameter_column(&header[c])).collect();
    let first = (burn_fraction * n as f64).ceil() as usize;
    let first = first.saturating_sub(1).min(n);
    let r = tables.len() as f64;
    let mut sums = vec![0.0; columns.len()];
    for row in first..n {
        for (out, &c) in sums.iter_mut().zip(&columns) {
            let mean = tables.iter().map(|tb| tb.rows[row][c]).sum::<f64>() / r;
            let ss: f64 = tables.iter().map(|tb| (tb.rows[row][c] - mean).powi(2)).sum();
            *out += ss / (r - 1.0);
        }
    }
    let steps = n - first;
    let variances = sums.into_iter().map(|s| if steps == 0 { 0.0 } else { s / steps as f64 }).collect();
    Ok(McVarianceReport {
        parameters: columns.iter().map(|&c| header[c].clone()).collect(),
        variances,
        runs: tables.len(),
        steps,
    })
}

impl McVarianceReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.parameters.iter().position(|p| p == name).map(|i| self.variances[i])
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "parameter,variance")?;
        for (p, v) in self.parameters.iter().zip(&self.variances) {
            writeln!(w, "{p},{v}")?;
        }
        Ok(())
    }
}

impl fmt::Display for McVarianceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>14}   ({} runs, {} steps)", "parameter", "variance", self.runs, self.steps)?;
        for (p, v) in self.parameters.iter().zip(&self.variances) {
            writeln!(f, "{p:<16} {v:>14.6e}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(values: &[f64]) -> RecordTable {
        RecordTable {
            header: vec!["t".into(), "mu_e_1".into(), "xhat_1".into(), "p_mode_1".into()],
            rows: values.iter().enumerate().map(|(i, v)| vec![(i + 1) as f64, *v, 9.0 * v, 0.5]).collect(),
        }
    }

    #[test]
    fn identical_runs_have_zero_variance() {
        let a = table(&[1.0, 2.0, 3.0]);
        let rep = mc_variance(&[a.clone(), a], 0.0).unwrap();
        assert_eq!(rep.parameters, ["mu_e_1"]);
        assert_eq!(rep.variances, [0.0]);
    }

    #[test]
    fn two_sample_formula() {
        let c = 0.3;
        let rep = mc_variance(&[table(&[c; 5]), table(&[-c; 5])], 0.0).unwrap();
        assert!((rep.variances[0] - 2.0 * c * c).abs() < 1e-15);
    }

    #[test]
    fn burn_fraction_drops_early_rows() {
        let a = table(&[10.0, 0.0, 0.0, 0.0]);
        let b = table(&[-10.0, 0.0, 0.0, 0.0]);
        assert!(mc_variance(&[a.clone(), b.clone()], 0.0).unwrap().variances[0] > 0.0);
        let rep = mc_variance(&[a, b], 0.5).unwrap();
        assert_eq!(rep.steps, 3);
        assert_eq!(rep.variances[0], 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = table(&[1.0, 2.0]);
        assert!(mc_variance(std::slice::from_ref(&a), 0.0).is_err());
        assert!(mc_variance(&[a.clone(), table(&[1.0])], 0.0).is_err());
        let mut other = a.clone();
        other.header[1] = "mu_e_2".into();
        assert!(mc_variance(&[a, other], 0.0).is_err());
    }
}
