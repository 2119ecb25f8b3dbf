//! Success-rate tables with per-seed rows and median aggregates.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::perturb::Category;
use crate::error::Result;

pub const CLEAN_SUITE: &str = "clean";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: String,
    pub suite: String,
    pub seed: u64,
    pub successes: usize,
    pub n_trials: usize,
    /// `successes / n_trials`, computed once from the counts.
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub variant: String,
    pub suite: String,
    pub statistic: String,
    pub seeds: Vec<u64>,
    pub success_rate: f64,
}

/// Teacher-forced head loss before and after training one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub variant: String,
    pub seed: u64,
    pub l_head_initial: f64,
    pub l_head_final: f64,
    /// Rows of the implicit guidance; zero without an IAR.
    pub guidance_rows: usize,
    pub guidance_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub variant: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub title: String,
    pub rows: Vec<ResultRow>,
    pub aggregates: Vec<AggregateRow>,
    pub losses: Vec<LossRow>,
    pub failures: Vec<CellFailure>,
}

/// Median of a non-empty list; even lengths average the middle pair.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn suite_order() -> Vec<String> {
    let mut s = vec![CLEAN_SUITE.to_string()];
    s.extend(Category::ALL.iter().map(|c| c.name().to_string()));
    s
}

impl ResultsTable {
    pub fn new(title: &str) -> Self {
        Self { title: title.to_string(), ..Self::default() }
    }

    pub fn push(&mut self, variant: &str, suite: &str, seed: u64, successes: usize, n_trials: usize) {
        let success_rate = if n_trials == 0 { 0.0 } else { successes as f64 / n_trials as f64 };
        self.rows.push(ResultRow {
            variant: variant.to_string(),
            suite: suite.to_string(),
            seed,
            successes,
            n_trials,
            success_rate,
        });
    }

    /// Variants in first-appearance order.
    pub fn variants(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.variant) {
                out.push(r.variant.clone());
            }
        }
        out
    }

    /// Suites present, clean first then the perturbation categories.
    pub fn suites(&self) -> Vec<String> {
        suite_order().into_iter().filter(|s| self.rows.iter().any(|r| &r.suite == s)).collect()
    }

    pub fn rate(&self, variant: &str, suite: &str, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.suite == suite && r.seed == seed)
            .map(|r| r.success_rate)
    }

    /// Recomputes the median-over-seeds aggregate for every cell.
    pub fn aggregate_medians(&mut self) {
        let mut aggs = Vec::new();
        for v in self.variants() {
            for s in self.suites() {
                let cell: Vec<&ResultRow> = self.rows.iter().filter(|r| r.variant == v && r.suite == s).collect();
                let rates: Vec<f64> = cell.iter().map(|r| r.success_rate).collect();
                if let Some(m) = median(&rates) {
                    aggs.push(AggregateRow {
                        variant: v.clone(),
                        suite: s.clone(),
                        statistic: "median".into(),
                        seeds: cell.iter().map(|r| r.seed).collect(),
                        success_rate: m,
                    });
                }
            }
        }
        self.aggregates = aggs;
    }

    pub fn median_rate(&self, variant: &str, suite: &str) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|a| a.variant == variant && a.suite == suite && a.statistic == "median")
            .map(|a| a.success_rate)
    }

    /// Mean over perturbation suites of one seed's rates.
    pub fn perturbed_mean(&self, variant: &str, seed: u64) -> Option<f64> {
        let rates: Vec<f64> = Category::ALL.iter().filter_map(|c| self.rate(variant, c.name(), seed)).collect();
        (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
    }

    /// Median over seeds of the per-seed perturbed mean.
    pub fn median_perturbed_mean(&self, variant: &str) -> Option<f64> {
        let seeds = self.seeds(variant);
        let means: Vec<f64> = seeds.iter().filter_map(|&s| self.perturbed_mean(variant, s)).collect();
        median(&means)
    }

    pub fn seeds(&self, variant: &str) -> Vec<u64> {
        let mut s: Vec<u64> = self.rows.iter().filter(|r| r.variant == variant).map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// `clean − perturbed` per category for one run.
    pub fn gaps(&self, variant: &str, seed: u64) -> Vec<(Category, Option<f64>)> {
        let clean = self.rate(variant, CLEAN_SUITE, seed);
        Category::ALL
            .iter()
            .map(|&c| (c, clean.zip(self.rate(variant, c.name(), seed)).map(|(a, b)| a - b)))
            .collect()
    }

    /// Long-format CSV: one line per (variant, suite, seed).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,suite,seed,successes,n_trials,success_rate\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.variant, r.suite, r.seed, r.successes, r.n_trials, r.success_rate);
        }
        s
    }

    /// Wide CSV: clean, the seven perturbation columns and their mean, one
    /// line per run plus a median line per variant.
    pub fn perturbation_csv(&self) -> String {
        let mut s = String::from("variant,seed,clean");
        for c in Category::ALL {
            let _ = write!(s, ",{}", c.name());
        }
        s.push_str(",perturbed_mean\n");
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for v in self.variants() {
            for seed in self.seeds(&v) {
                let _ = write!(s, "{v},{seed},{}", fmt(self.rate(&v, CLEAN_SUITE, seed)));
                for c in Category::ALL {
                    let _ = write!(s, ",{}", fmt(self.rate(&v, c.name(), seed)));
                }
                let _ = writeln!(s, ",{}", fmt(self.perturbed_mean(&v, seed)));
            }
            let _ = write!(s, "{v},median,{}", fmt(self.median_rate(&v, CLEAN_SUITE)));
            for c in Category::ALL {
                let _ = write!(s, ",{}", fmt(self.median_rate(&v, c.name())));
            }
            let _ = writeln!(s, ",{}", fmt(self.median_perturbed_mean(&v)));
        }
        s
    }

    /// Human-readable summary of the medians (rounded for display only).
    pub fn render(&self) -> String {
        let suites = self.suites();
        let mut s = format!("{}\n{:<22}", self.title, "variant");
        for su in &suites {
            let _ = write!(s, "{su:>11}");
        }
        s.push('\n');
        for v in self.variants() {
            let _ = write!(s, "{v:<22}");
            for su in &suites {
                match self.median_rate(&v, su) {
                    Some(r) => {
                        let _ = write!(s, "{:>10.1}%", 100.0 * r);
                    }
                    None => s.push_str(&format!("{:>11}", "-")),
                }
            }
            s.push('\n');
        }
        for f in &self.failures {
            let _ = writeln!(s, "FAILED {} seed {}: {}", f.variant, f.seed, f.error);
        }
        s
    }

    /// Writes `<stem>.json`, `<stem>.csv` and, when perturbation suites are
    /// present, `<stem>_perturbation.csv`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        if self.suites().len() > 1 {
            std::fs::write(dir.join(format!("{stem}_perturbation.csv")), self.perturbation_csv())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn rates_are_exact_ratios(s in 0usize..500, extra in 0usize..500) {
            let n = s + extra;
            prop_assume!(n > 0);
            let mut t = ResultsTable::new("t");
            t.push("v", CLEAN_SUITE, 0, s, n);
            let json = serde_json::to_string(&t).unwrap();
            let back: ResultsTable = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(back.rows[0].success_rate, s as f64 / n as f64);
        }
    }

    #[test]
    fn median_of_three_seeds() {
        assert_eq!(median(&[0.2, 0.9, 0.5]), Some(0.5));
        assert_eq!(median(&[0.2, 0.4]), Some(0.30000000000000004));
        assert_eq!(median(&[]), None);
        let mut t = ResultsTable::new("t");
        for (seed, k) in [(0, 10), (1, 30), (2, 20)] {
            t.push("full", CLEAN_SUITE, seed, k, 40);
        }
        t.aggregate_medians();
        assert_eq!(t.median_rate("full", CLEAN_SUITE), Some(0.5));
    }

    #[test]
    fn perturbation_table_has_seven_category_columns() {
        let mut t = ResultsTable::new("t");
        t.push("base", CLEAN_SUITE, 0, 8, 10);
        for (i, c) in Category::ALL.iter().enumerate() {
            t.push("base", c.name(), 0, i, 10);
        }
        t.aggregate_medians();
        let csv = t.perturbation_csv();
        let header = csv.lines().next().unwrap();
        assert_eq!(header.split(',').count(), 2 + 1 + 7 + 1);
        assert_eq!(t.perturbed_mean("base", 0), Some(0.3));
        let gaps = t.gaps("base", 0);
        assert_eq!(gaps.len(), 7);
        assert!(gaps.iter().all(|(_, g)| g.is_some_and(f64::is_finite)));
    }
}
