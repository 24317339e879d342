//! Group summaries and pairwise Welch t-tests.

use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use super::{CoherencyRecord, FiberError, Result};
use crate::datapipe::Label;

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sided Welch unequal-variance t-test.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(FiberError::Degenerate(format!(
            "need at least 2 values per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(FiberError::Degenerate("non-finite value".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Err(FiberError::Degenerate(
            "both groups have zero variance".into(),
        ));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    let x = df / (df + t * t);
    Ok(beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0))
}

/// Linear interpolation between order statistics at rank `(n - 1) q`.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
    /// Most extreme data points within 1.5 IQR of the quartiles.
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

pub fn group_stats(values: &[f64]) -> Result<GroupStats> {
    if values.is_empty() {
        return Err(FiberError::EmptySample);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile(&sorted, 0.25);
    let q3 = quantile(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside = || {
        sorted
            .iter()
            .copied()
            .filter(|&v| v >= lo_fence && v <= hi_fence)
    };
    Ok(GroupStats {
        n: values.len(),
        mean: values.iter().sum::<f64>() / values.len() as f64,
        median: quantile(&sorted, 0.5),
        q1,
        q3,
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        whisker_low: inside().fold(f64::INFINITY, f64::min),
        whisker_high: inside().fold(f64::NEG_INFINITY, f64::max),
        outliers: sorted
            .iter()
            .copied()
            .filter(|&v| v < lo_fence || v > hi_fence)
            .collect(),
    })
}

/// Pairwise two-sided p-values; the diagonal is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueMatrix {
    pub names: Vec<String>,
    pub p: Vec<Vec<Option<f64>>>,
}

impl PValueMatrix {
    pub fn to_csv(&self) -> String {
        let mut s = format!(",{}\n", self.names.join(","));
        for (name, row) in self.names.iter().zip(&self.p) {
            let cells: Vec<String> = row
                .iter()
                .map(|p| p.map_or_else(|| "-".to_string(), |p| format!("{p:.6e}")))
                .collect();
            s.push_str(&format!("{name},{}\n", cells.join(",")));
        }
        s
    }
}

/// Computed for `i < j` and mirrored, so the matrix is exactly symmetric.
pub fn pvalue_matrix(groups: &[(String, Vec<f64>)]) -> Result<PValueMatrix> {
    if groups.len() < 2 {
        return Err(FiberError::TooFewGroups(groups.len()));
    }
    let k = groups.len();
    let mut p = vec![vec![None; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let v = welch_t_test(&groups[i].1, &groups[j].1).map_err(|e| FiberError::Pair {
                a: groups[i].0.clone(),
                b: groups[j].0.clone(),
                source: Box::new(e),
            })?;
            p[i][j] = Some(v);
            p[j][i] = Some(v);
        }
    }
    Ok(PValueMatrix {
        names: groups.iter().map(|(n, _)| n.clone()).collect(),
        p,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxPlot {
    pub group: String,
    #[serde(flatten)]
    pub stats: GroupStats,
}

/// Per-group statistics over the images with a defined coherency, plus the
/// p-value matrix over groups with at least two values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub groups: Vec<BoxPlot>,
    /// Images skipped because their collagen mask was empty.
    pub skipped: usize,
    pub pvalues: Option<PValueMatrix>,
}

pub fn summarize(records: &[CoherencyRecord]) -> Result<StatsReport> {
    let mut by_label: Vec<Vec<f64>> = vec![Vec::new(); Label::COUNT];
    let mut skipped = 0;
    for r in records {
        match r.coherency {
            Some(c) => by_label[r.label.index()].push(c),
            None => skipped += 1,
        }
    }
    let mut groups = Vec::new();
    let mut testable = Vec::new();
    for (label, values) in Label::ALL.iter().zip(&by_label) {
        if values.is_empty() {
            continue;
        }
        groups.push(BoxPlot {
            group: label.to_string(),
            stats: group_stats(values)?,
        });
        if values.len() >= 2 {
            testable.push((label.to_string(), values.clone()));
        } else {
            warn!("group {label} has one image; left out of the t-tests");
        }
    }
    let pvalues = if testable.len() >= 2 {
        Some(pvalue_matrix(&testable)?)
    } else {
        None
    };
    Ok(StatsReport {
        groups,
        skipped,
        pvalues,
    })
}

impl StatsReport {
    pub fn group_csv(&self) -> String {
        let mut s = String::from("group,n,mean_coherency,median_coherency,q1,q3\n");
        for g in &self.groups {
            let st = &g.stats;
            s.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                g.group, st.n, st.mean, st.median, st.q1, st.q3
            ));
        }
        s
    }

    /// Writes `group_stats.csv`, `pvalues.csv` (when defined) and `boxplot.json`.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir).map_err(|e| FiberError::io(out_dir, e))?;
        let write = |name: &str, body: String| {
            let path = out_dir.join(name);
            fs::write(&path, body).map_err(|e| FiberError::io(&path, e))
        };
        write("group_stats.csv", self.group_csv())?;
        if let Some(p) = &self.pvalues {
            write("pvalues.csv", p.to_csv())?;
        }
        write("boxplot.json", serde_json::to_string_pretty(&self.groups)?)
    }
}
