use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::Path;

pub const METRICS_HEADER: &str = "iteration,frames,mean_real_reward,mean_u0,value_gap,failure_rate,diversity,value_loss,policy_loss,generator_loss,reconstruction_loss,wall_clock_s";

/// One line of the training log.
///
/// `mean_real_reward` averages the per-level mean episode reward over the
/// pool levels played this iteration; `mean_u0` averages the agent's
/// estimate for the initial observation of every pool level. `value_gap`
/// compares the two over the played levels only.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub frames: u64,
    pub mean_real_reward: f64,
    pub mean_u0: f64,
    pub value_gap: f64,
    pub failure_rate: f64,
    pub diversity: f64,
    pub value_loss: f64,
    pub policy_loss: f64,
    pub generator_loss: f64,
    /// Absent in unsupervised runs.
    pub reconstruction_loss: Option<f64>,
    pub wall_clock_s: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let rec = self
            .reconstruction_loss
            .map(|v| v.to_string())
            .unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{:.3}",
            self.iteration,
            self.frames,
            self.mean_real_reward,
            self.mean_u0,
            self.value_gap,
            self.failure_rate,
            self.diversity,
            self.value_loss,
            self.policy_loss,
            self.generator_loss,
            rec,
            self.wall_clock_s,
        )
    }

    pub fn from_csv(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 12 {
            return None;
        }
        let num = |i: usize| f[i].parse::<f64>().ok();
        Some(Self {
            iteration: f[0].parse().ok()?,
            frames: f[1].parse().ok()?,
            mean_real_reward: num(2)?,
            mean_u0: num(3)?,
            value_gap: num(4)?,
            failure_rate: num(5)?,
            diversity: num(6)?,
            value_loss: num(7)?,
            policy_loss: num(8)?,
            generator_loss: num(9)?,
            reconstruction_loss: if f[10].is_empty() { None } else { Some(num(10)?) },
            wall_clock_s: num(11)?,
        })
    }

    /// Equality on everything except wall-clock time.
    pub fn same_run_as(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.wall_clock_s = other.wall_clock_s;
        a.to_csv() == other.to_csv()
    }
}

/// Appends `row` to the CSV at `path`, writing the header first when the
/// file is new or empty.
pub fn log_metrics(path: &Path, row: &MetricsRow) -> io::Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{METRICS_HEADER}")?;
    }
    writeln!(f, "{}", row.to_csv())
}

/// Reads every row of a metrics CSV, skipping the header.
pub fn read_metrics(path: &Path) -> io::Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line.starts_with("iteration") || line.trim().is_empty() {
            continue;
        }
        rows.push(MetricsRow::from_csv(line).ok_or_else(|| {
            io::Error::new(io::ErrorKind::InvalidData, format!("bad metrics line {}", i + 1))
        })?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> MetricsRow {
        MetricsRow {
            iteration: 3,
            frames: 1200,
            mean_real_reward: -0.25,
            mean_u0: 0.125,
            value_gap: 0.375,
            failure_rate: 0.5,
            diversity: 1.5,
            value_loss: 0.01,
            policy_loss: -0.2,
            generator_loss: 0.04,
            reconstruction_loss: None,
            wall_clock_s: 12.0,
        }
    }

    #[test]
    fn csv_round_trip() {
        let r = row();
        assert_eq!(MetricsRow::from_csv(&r.to_csv()).unwrap(), r);
        let mut s = row();
        s.reconstruction_loss = Some(1.75);
        assert_eq!(MetricsRow::from_csv(&s.to_csv()).unwrap(), s);
        assert_eq!(METRICS_HEADER.split(',').count(), 12);
    }

    #[test]
    fn appends_with_single_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        log_metrics(&p, &row()).unwrap();
        log_metrics(&p, &row()).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("iteration")).count(), 1);
        assert_eq!(read_metrics(&p).unwrap().len(), 2);
    }
}
