//! Summaries of finished runs in the layout of the usual results table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use mixce::metrics::MetricReport;
use mixce::objectives::ObjectiveKind;
use mixce::trainer::{self, CellResult, CellStatus, EtaSummary};
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct Experiment {
    pub name: String,
    pub objective: ObjectiveKind,
    pub vocab_size: Option<u64>,
    pub best_eta: Option<f64>,
    pub seeds: usize,
    pub per_eta: Vec<EtaSummary>,
}

impl Experiment {
    fn best(&self) -> Option<&EtaSummary> {
        let eta = self.best_eta?;
        self.per_eta.iter().find(|s| s.eta == eta)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub experiments: Vec<Experiment>,
}

fn label(kind: ObjectiveKind) -> &'static str {
    match kind {
        ObjectiveKind::ForwardKl => "For. KL",
        ObjectiveKind::ReverseKl => "Rev. KL",
        ObjectiveKind::MixKl => "Mix KLs",
        ObjectiveKind::GeneralizedJs => "JS",
        ObjectiveKind::MixCeOracle => "MixCE*",
        ObjectiveKind::MixCeApprox => "MixCE",
        ObjectiveKind::SeqWeightedRevCe => "Seq. rev. CE",
    }
}

fn rank(kind: ObjectiveKind) -> usize {
    ObjectiveKind::ALL.iter().position(|&k| k == kind).unwrap_or(usize::MAX)
}

/// Directories under `root` (inclusive, up to three levels) holding cell
/// directories.
fn experiment_dirs(root: &Path, depth: usize, out: &mut Vec<PathBuf>) {
    let Ok(entries) = std::fs::read_dir(root) else { return };
    let mut subdirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    let has_cells = subdirs.iter().any(|p| {
        p.file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("cell-"))
            && p.join("metrics.json").is_file()
    });
    if has_cells {
        out.push(root.to_path_buf());
    }
    if depth > 0 {
        for d in subdirs {
            experiment_dirs(&d, depth - 1, out);
        }
    }
}

fn load_experiment(root: &Path, dir: &Path) -> Result<Option<Experiment>> {
    let mut cells = Vec::new();
    let mut objective = None;
    let mut vocab_size = None;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.filter_map(|e| e.ok()).map(|e| e.path()).collect();
    entries.sort();
    for cell in entries {
        let path = cell.join("metrics.json");
        if !path.is_file() {
            continue;
        }
        let metrics: MetricReport = trainer::read_json(&path)?;
        let (Some(eta), Some(seed)) = (
            metrics.meta.get("eta").and_then(|v| v.as_f64()),
            metrics.meta.get("seed").and_then(|v| v.as_u64()),
        ) else {
            log::warn!("{}: no eta/seed metadata, skipped", path.display());
            continue;
        };
        let kind: Option<ObjectiveKind> = metrics
            .meta
            .get("objective")
            .and_then(|v| v.as_str())
            .and_then(|s| s.parse().ok());
        match (objective, kind) {
            (_, None) => {
                log::warn!("{}: no objective metadata, skipped", path.display());
                continue;
            }
            (Some(a), Some(b)) if a != b => bail!("{}: mixes objectives {a} and {b}", dir.display()),
            (_, k) => objective = k,
        }
        vocab_size = vocab_size.or_else(|| metrics.meta.get("vocab_size").and_then(|v| v.as_u64()));
        cells.push(CellResult {
            eta,
            seed,
            status: CellStatus::Ok { metrics },
        });
    }
    let Some(objective) = objective else { return Ok(None) };
    let mut grid: Vec<f64> = cells.iter().map(|c| c.eta).collect();
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();
    let mut seeds: Vec<u64> = cells.iter().map(|c| c.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let summary = trainer::summarize(objective, &grid, &seeds, cells);
    let name = dir
        .strip_prefix(root)
        .ok()
        .map(|p| p.display().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
    Ok(Some(Experiment {
        name,
        objective,
        vocab_size,
        best_eta: summary.best_eta,
        seeds: seeds.len(),
        per_eta: summary.per_eta,
    }))
}

pub fn collect(root: &Path) -> Result<Report> {
    let mut dirs = Vec::new();
    experiment_dirs(root, 3, &mut dirs);
    let mut experiments = Vec::new();
    for d in dirs {
        if let Some(e) = load_experiment(root, &d)? {
            experiments.push(e);
        }
    }
    experiments.sort_by(|a, b| {
        a.vocab_size
            .cmp(&b.vocab_size)
            .then(rank(a.objective).cmp(&rank(b.objective)))
            .then(a.name.cmp(&b.name))
    });
    Ok(Report { experiments })
}

fn pm(mean: f64, std: f64, n: usize) -> String {
    if n > 1 {
        format!("{mean:.2e} ± {std:.1e}")
    } else {
        format!("{mean:.2e}")
    }
}

pub fn markdown(report: &Report) -> String {
    let mut groups: BTreeMap<Option<u64>, Vec<&Experiment>> = BTreeMap::new();
    for e in &report.experiments {
        groups.entry(e.vocab_size).or_default().push(e);
    }
    let mut out = String::new();
    for (vocab, exps) in groups {
        match vocab {
            Some(v) => writeln!(out, "## Vocab {v}\n").unwrap(),
            None => writeln!(out, "## Vocab unknown\n").unwrap(),
        }
        writeln!(out, "| Objective | Run | best η | seeds | avg. js | avg. 0s |").unwrap();
        writeln!(out, "|---|---|---|---|---|---|").unwrap();
        for e in exps {
            let eta = e.best_eta.map_or("-".to_string(), |x| x.to_string());
            let (js, zs) = match e.best().and_then(|s| s.aggregate.as_ref()) {
                Some(a) => (pm(a.avg_js_mean, a.avg_js_std, a.n), pm(a.avg_0s_mean, a.avg_0s_std, a.n)),
                None => ("incomplete".into(), "incomplete".into()),
            };
            writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} |",
                label(e.objective),
                e.name,
                eta,
                e.seeds,
                js,
                zs
            )
            .unwrap();
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use mixce::trainer::Aggregate;

    fn experiment(objective: ObjectiveKind, vocab: u64, js: f64) -> Experiment {
        Experiment {
            name: objective.name().into(),
            objective,
            vocab_size: Some(vocab),
            best_eta: Some(0.9),
            seeds: 5,
            per_eta: vec![EtaSummary {
                eta: 0.9,
                aggregate: Some(Aggregate {
                    n: 5,
                    avg_js_mean: js,
                    avg_js_std: js / 10.0,
                    avg_0s_mean: 1e-5,
                    avg_0s_std: 1e-6,
                }),
            }],
        }
    }

    #[test]
    fn markdown_groups_by_vocab() {
        let r = Report {
            experiments: vec![
                experiment(ObjectiveKind::ForwardKl, 20, 7.4e-4),
                experiment(ObjectiveKind::MixKl, 20, 4.89e-4),
                experiment(ObjectiveKind::ForwardKl, 50, 6.47e-3),
            ],
        };
        let md = markdown(&r);
        assert_eq!(md.matches("## Vocab").count(), 2);
        assert!(md.contains("| For. KL | forward_kl | 0.9 | 5 | 7.40e-4 ± 7.4e-5 |"));
        assert!(md.contains("Mix KLs"));
    }
}
