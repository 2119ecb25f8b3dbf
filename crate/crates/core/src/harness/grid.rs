//! Ablation grids: each cell is a labelled variation of the run config.

use std::fmt;

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::iar::IarStrategy;
use crate::policy::Variant;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    /// Baseline, +EAR, +IAR, +EAR+IAR.
    Modules,
    /// Reference trajectory (shift, horizon) pairs.
    RefConfig,
    /// Query, attention pooling and downsample KV-cache interaction.
    IarStrategy,
    /// Head and EAR width against denoising steps, without the IAR.
    EarScaleDenoise,
}

/// (shift, horizon) pairs; the products repeat in pairs so equal
/// look-ahead spans can be compared at different strides.
pub const REF_CONFIG_PAIRS: [(usize, usize); 6] = [(1, 4), (2, 2), (1, 12), (2, 6), (2, 12), (3, 12)];

/// Label, head width, head steps, and optional EAR width and steps.
type Row = (&'static str, usize, usize, Option<(usize, usize)>);

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub label: String,
    pub config: RunConfig,
}

impl Grid {
    pub const ALL: [Grid; 4] = [Grid::Modules, Grid::RefConfig, Grid::IarStrategy, Grid::EarScaleDenoise];

    pub fn name(self) -> &'static str {
        match self {
            Grid::Modules => "modules",
            Grid::RefConfig => "ref-config",
            Grid::IarStrategy => "iar-strategy",
            Grid::EarScaleDenoise => "ear-scale-denoise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|g| g.name()).collect();
                Error::Config(format!("unknown grid '{s}' (expected one of {})", names.join(", ")))
            })
    }

    pub fn title(self) -> &'static str {
        match self {
            Grid::Modules => "Module ablation",
            Grid::RefConfig => "Reference action parameters",
            Grid::IarStrategy => "KV-cache interaction strategies",
            Grid::EarScaleDenoise => "Parameters and denoise steps",
        }
    }

    /// The cells of this grid applied on top of `base`.
    pub fn cells(self, base: &RunConfig) -> Vec<GridCell> {
        let cell = |label: String, f: &dyn Fn(&mut RunConfig)| {
            let mut config = base.clone();
            f(&mut config);
            GridCell { label, config }
        };
        match self {
            Grid::Modules => [Variant::Baseline, Variant::Ear, Variant::Iar, Variant::Full]
                .into_iter()
                .map(|v| cell(v.label().to_string(), &|c| c.variant = v))
                .collect(),
            Grid::RefConfig => REF_CONFIG_PAIRS
                .into_iter()
                .map(|(shift, h)| {
                    cell(format!("shift {shift} x {h} (span {})", shift * h), &|c| {
                        c.variant = base.ablate.variant;
                        c.ear.ref_shift = shift;
                        c.ear.h_ref = h;
                    })
                })
                .collect(),
            Grid::IarStrategy => IarStrategy::ALL
                .into_iter()
                .map(|s| {
                    cell(s.label().to_string(), &|c| {
                        c.variant = base.ablate.variant;
                        c.iar.strategy = s;
                    })
                })
                .collect(),
            Grid::EarScaleDenoise => {
                let d = base.agp.d_model;
                let e = base.ear.d_model;
                let steps = base.flow.n_steps;
                let rows: [Row; 8] = [
                    ("Baseline", d, steps, None),
                    ("#1", d * 3 / 2, steps, None),
                    ("#2", d * 3 / 2, steps * 2, None),
                    ("#3", d, steps / 2, Some((e, steps / 2))),
                    ("#4", d, steps, Some((e, steps))),
                    ("#5", d, steps, Some((e / 2, steps))),
                    ("#6", d, steps, Some((e * 3 / 4, steps))),
                    ("#7", d, steps, Some((e * 3 / 2, steps))),
                ];
                rows.into_iter()
                    .map(|(name, hd, hs, ear)| {
                        let label = match ear {
                            Some((ed, es)) => format!("{name} head {hd}/{hs} ear {ed}/{es}"),
                            None => format!("{name} head {hd}/{hs}"),
                        };
                        cell(label, &|c| {
                            c.agp.d_model = hd;
                            c.flow.n_steps = hs.max(1);
                            match ear {
                                Some((ed, es)) => {
                                    c.variant = Variant::Ear;
                                    c.ear.d_model = ed;
                                    c.ref_flow.n_steps = es.max(1);
                                }
                                None => c.variant = Variant::Baseline,
                            }
                        })
                    })
                    .collect()
            }
        }
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Directory-safe form of a cell label.
pub fn slug(label: &str) -> String {
    let mut s: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    while s.contains("--") {
        s = s.replace("--", "-");
    }
    s.trim_matches('-').to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rows_mirror_the_tables() {
        let base = RunConfig::default();
        let labels: Vec<String> = Grid::Modules.cells(&base).into_iter().map(|c| c.label).collect();
        assert_eq!(labels, ["Baseline", "+EAR", "+IAR", "+EAR+IAR"]);
        let labels: Vec<String> = Grid::IarStrategy.cells(&base).into_iter().map(|c| c.label).collect();
        assert_eq!(labels, ["Query", "Attention Pooling", "Downsample"]);
        let spans: Vec<usize> = Grid::RefConfig
            .cells(&base)
            .iter()
            .map(|c| c.config.ear.ref_shift * c.config.ear.h_ref)
            .collect();
        assert_eq!(spans, [4, 4, 12, 12, 24, 36]);
        let esd = Grid::EarScaleDenoise.cells(&base);
        assert_eq!(esd.len(), 8);
        assert!(esd.iter().all(|c| c.config.variant != Variant::Iar && c.config.variant != Variant::Full));
    }

    #[test]
    fn every_cell_builds_a_valid_model() {
        for g in Grid::ALL {
            for c in g.cells(&RunConfig::default()) {
                c.config.trainer_spec().build().unwrap_or_else(|e| panic!("{g} {}: {e}", c.label));
            }
        }
    }

    #[test]
    fn names_parse_and_slugs_are_safe() {
        for g in Grid::ALL {
            assert_eq!(Grid::parse(g.name()).unwrap(), g);
        }
        assert_eq!(Grid::parse("nope").unwrap_err().exit_code(), 2);
        assert_eq!(slug("+EAR+IAR"), "ear-iar");
        assert_eq!(slug("shift 1 x 4 (span 4)"), "shift-1-x-4-span-4");
    }
}
