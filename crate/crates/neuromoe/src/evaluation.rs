//! Metrics, expert-utilization reporting, the ablation harness, and the
//! plain-text/CSV/SVG report writers. Every writer formats with fixed
//! precision and iterates in a fixed order, so identical inputs always
//! produce identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::config::{ExpertKind, GatingMode, ModelConfig, TrainConfig};
use crate::data::{fit_preprocess, split_cohort, split_hash, ClassLabel, PreparedRecord, SubjectRecord};
use crate::model::NeuroMoeModel;
use crate::training::{train, TrainHistory};
use crate::{Error, Result};

// ── Classification metrics ──

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// False when no subject was predicted as this class, so precision's
    /// denominator was zero and 0.0 was substituted.
    pub precision_defined: bool,
    /// False when the class had no true members, so recall's denominator was
    /// zero and 0.0 was substituted.
    pub recall_defined: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub n: usize,
    /// `confusion[t][p]`: subjects of true class `t` predicted as class `p`.
    pub confusion: [[usize; 3]; 3],
    pub accuracy: f64,
    /// Indexed like [`ClassLabel::ALL`].
    pub per_class: [ClassMetrics; 3],
    /// Unweighted mean of the three per-class F1 scores.
    pub f1_macro: f64,
    /// Support-weighted mean of the per-class F1 scores.
    pub f1_weighted: f64,
}

impl Metrics {
    pub fn from_confusion(confusion: [[usize; 3]; 3]) -> Result<Metrics> {
        let n: usize = confusion.iter().flatten().sum();
        if n == 0 {
            return Err(Error::Data("confusion matrix is empty".into()));
        }
        let trace: usize = (0..3).map(|k| confusion[k][k]).sum();
        let mut per_class = [ClassMetrics {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            precision_defined: true,
            recall_defined: true,
        }; 3];
        let mut f1_weighted = 0.0;
        for k in 0..3 {
            let tp = confusion[k][k] as f64;
            let predicted: usize = (0..3).map(|t| confusion[t][k]).sum();
            let support: usize = confusion[k].iter().sum();
            let c = &mut per_class[k];
            if predicted > 0 {
                c.precision = tp / predicted as f64;
            } else {
                c.precision_defined = false;
            }
            if support > 0 {
                c.recall = tp / support as f64;
            } else {
                c.recall_defined = false;
            }
            if c.precision + c.recall > 0.0 {
                c.f1 = 2.0 * c.precision * c.recall / (c.precision + c.recall);
            }
            f1_weighted += support as f64 * c.f1;
        }
        Ok(Metrics {
            n,
            confusion,
            accuracy: trace as f64 / n as f64,
            per_class,
            f1_macro: per_class.iter().map(|c| c.f1).sum::<f64>() / 3.0,
            f1_weighted: f1_weighted / n as f64,
        })
    }
}

/// Score every record with dropout disabled: prediction = argmax of the
/// fused logits.
pub fn evaluate(
    model: &NeuroMoeModel,
    store: &ParamStore,
    records: &[PreparedRecord],
) -> Result<Metrics> {
    if records.is_empty() {
        return Err(Error::Data("cannot evaluate an empty record set".into()));
    }
    let mut confusion = [[0usize; 3]; 3];
    for r in records {
        let pred = argmax(&model.predict(store, r)?.logits);
        confusion[r.label.index()][pred] += 1;
    }
    Metrics::from_confusion(confusion)
}

/// Fixed-format text block for console output and report files.
pub fn render_metrics(m: &Metrics) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "subjects: {}", m.n);
    let _ = writeln!(s, "accuracy: {:.6}", m.accuracy);
    let _ = writeln!(s, "f1_macro: {:.6}", m.f1_macro);
    let _ = writeln!(s, "f1_weighted: {:.6}", m.f1_weighted);
    let _ = writeln!(s, "confusion (rows = true, cols = predicted):");
    let _ = writeln!(s, "{:>8} {:>6} {:>6} {:>6}", "", "PD", "iRBD", "HC");
    for (k, label) in ClassLabel::ALL.iter().enumerate() {
        let _ = writeln!(
            s,
            "{:>8} {:>6} {:>6} {:>6}",
            label.name(),
            m.confusion[k][0],
            m.confusion[k][1],
            m.confusion[k][2]
        );
    }
    for (k, label) in ClassLabel::ALL.iter().enumerate() {
        let c = &m.per_class[k];
        let mut flags = String::new();
        if !c.precision_defined {
            flags.push_str("  [no predictions: precision set to 0]");
        }
        if !c.recall_defined {
            flags.push_str("  [no true members: recall set to 0]");
        }
        let _ = writeln!(
            s,
            "{:>8} precision {:.6}  recall {:.6}  f1 {:.6}{flags}",
            label.name(),
            c.precision,
            c.recall,
            c.f1
        );
    }
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_metrics(m: &Metrics, path: &Path) -> Result<()> {
    write_text(path, &render_metrics(m))
}

// ── Training history ──

pub fn render_history_csv(history: &TrainHistory, experts: &[ExpertKind]) -> String {
    let mut s = String::from("epoch,lr,ce_loss,balance_loss,train_accuracy,test_accuracy");
    for kind in experts {
        let _ = write!(s, ",gate_{}", kind.token());
    }
    s.push('\n');
    for e in &history.epochs {
        let _ = write!(
            s,
            "{},{:.9},{:.6},{:.9},{:.6},{:.6}",
            e.epoch, e.lr, e.ce_loss, e.balance_loss, e.train_accuracy, e.test_accuracy
        );
        for g in &e.mean_gate {
            let _ = write!(s, ",{g:.6}");
        }
        s.push('\n');
    }
    let _ = writeln!(
        s,
        "# best epoch {} with test accuracy {:.6}",
        history.best_epoch, history.best_test_accuracy
    );
    s
}

pub fn write_history_csv(
    history: &TrainHistory,
    experts: &[ExpertKind],
    path: &Path,
) -> Result<()> {
    write_text(path, &render_history_csv(history, experts))
}

// ── Expert utilization ──

#[derive(Debug, Clone, PartialEq)]
pub struct UtilizationReport {
    /// Experts in model order; columns of every weight row.
    pub experts: Vec<ExpertKind>,
    /// Column means of the per-subject gate weights.
    pub means: Vec<f64>,
    /// `(subject id, gate weights)` in input order.
    pub rows: Vec<(String, Vec<f64>)>,
    /// True when the model bypasses the gate, making every row exactly 1/E.
    pub static_uniform: bool,
}

pub fn utilization_report(
    model: &NeuroMoeModel,
    store: &ParamStore,
    records: &[PreparedRecord],
) -> Result<UtilizationReport> {
    if records.is_empty() {
        return Err(Error::Data("cannot report utilization of an empty record set".into()));
    }
    let experts = model.config.experts.clone();
    let mut means = vec![0.0; experts.len()];
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let weights = model.predict(store, r)?.weights;
        for (m, &w) in means.iter_mut().zip(&weights) {
            *m += w;
        }
        rows.push((r.id.clone(), weights));
    }
    for m in &mut means {
        *m /= records.len() as f64;
    }
    Ok(UtilizationReport {
        experts,
        means,
        rows,
        static_uniform: model.config.gating == GatingMode::Uniform,
    })
}

pub fn render_utilization_csv(report: &UtilizationReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# gate: {}",
        if report.static_uniform {
            "static uniform (1/E)"
        } else {
            "learned"
        }
    );
    s.push_str("subject");
    for kind in &report.experts {
        let _ = write!(s, ",{}", kind.token());
    }
    s.push('\n');
    for (id, weights) in &report.rows {
        s.push_str(id);
        for w in weights {
            let _ = write!(s, ",{w:.6}");
        }
        s.push('\n');
    }
    s.push_str("mean");
    for m in &report.means {
        let _ = write!(s, ",{m:.6}");
    }
    s.push('\n');
    s
}

pub fn write_utilization_csv(report: &UtilizationReport, path: &Path) -> Result<()> {
    write_text(path, &render_utilization_csv(report))
}

/// Bar chart of the mean gate weight per expert on a fixed 480x320 canvas
/// with a [0, 1] y-axis.
pub fn render_utilization_svg(report: &UtilizationReport) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const LEFT: f64 = 60.0;
    const RIGHT: f64 = 440.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 280.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"12\">"
    );
    let _ = writeln!(
        s,
        "  <text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\">mean expert gate weight \
         ({} subjects{})</text>",
        W / 2.0,
        report.rows.len(),
        if report.static_uniform { ", static uniform gate" } else { "" }
    );
    for i in 0..=4 {
        let frac = i as f64 / 4.0;
        let y = BOTTOM - frac * (BOTTOM - TOP);
        let _ = writeln!(
            s,
            "  <line x1=\"{LEFT:.1}\" y1=\"{y:.1}\" x2=\"{RIGHT:.1}\" y2=\"{y:.1}\" \
             stroke=\"#cccccc\"/>"
        );
        let _ = writeln!(
            s,
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{frac:.2}</text>",
            LEFT - 6.0,
            y + 4.0
        );
    }
    let slot = (RIGHT - LEFT) / report.experts.len() as f64;
    for (i, (kind, &mean)) in report.experts.iter().zip(&report.means).enumerate() {
        let x = LEFT + i as f64 * slot + 0.2 * slot;
        let width = 0.6 * slot;
        let height = mean.clamp(0.0, 1.0) * (BOTTOM - TOP);
        let y = BOTTOM - height;
        let _ = writeln!(
            s,
            "  <rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{width:.1}\" height=\"{height:.1}\" \
             fill=\"#4878a8\"/>"
        );
        let _ = writeln!(
            s,
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{mean:.3}</text>",
            x + width / 2.0,
            y - 5.0
        );
        let _ = writeln!(
            s,
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            x + width / 2.0,
            BOTTOM + 16.0,
            kind.token()
        );
    }
    let _ = writeln!(
        s,
        "  <line x1=\"{LEFT:.1}\" y1=\"{BOTTOM:.1}\" x2=\"{RIGHT:.1}\" y2=\"{BOTTOM:.1}\" \
         stroke=\"#000000\"/>"
    );
    s.push_str("</svg>\n");
    s
}

pub fn write_utilization_svg(report: &UtilizationReport, path: &Path) -> Result<()> {
    write_text(path, &render_utilization_svg(report))
}

// ── Ablation harness ──

/// One trained configuration under one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub seed: u64,
    pub metrics: Metrics,
    pub best_epoch: usize,
    /// Digest of the train/test assignment this seed produced; identical
    /// across configurations by construction.
    pub split_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub name: String,
    /// One cell per seed, in the caller's seed order.
    pub cells: Vec<AblationCell>,
    pub mean_accuracy: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub sd_accuracy: f64,
    pub mean_f1_macro: f64,
    pub sd_f1_macro: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub results: Vec<AblationResult>,
    /// `(seed, split digest)` shared by every configuration.
    pub splits: Vec<(u64, String)>,
}

/// The studied configurations: the full model, the gate replaced by a static
/// uniform average, and each expert removed in turn (six rows for the default
/// four-expert model).
pub fn ablation_configs(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let mut out = vec![("full".to_string(), base.clone())];
    let mut uniform = base.clone();
    uniform.gating = GatingMode::Uniform;
    out.push(("no_gate".to_string(), uniform));
    for &kind in &base.experts {
        let mut cfg = base.clone();
        cfg.experts = base.experts.iter().copied().filter(|&k| k != kind).collect();
        out.push((format!("no_{}", kind.token()), cfg));
    }
    out
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Train every ablation configuration under every seed. For each seed the
/// cohort is split and preprocessed once; all configurations see the same
/// train/test assignment and features, so rows differ only in architecture.
pub fn run_ablation(
    records: &[SubjectRecord],
    base_model: &ModelConfig,
    train_cfg: &TrainConfig,
    train_fraction: f64,
    seeds: &[u64],
) -> Result<AblationRun> {
    if seeds.is_empty() {
        return Err(Error::Data("ablation needs at least one seed".into()));
    }
    let configs = ablation_configs(base_model);
    let mut cells: Vec<Vec<AblationCell>> = vec![Vec::new(); configs.len()];
    let mut splits = Vec::with_capacity(seeds.len());

    for &seed in seeds {
        let (train_raw, test_raw) = split_cohort(records.to_vec(), train_fraction, seed)?;
        let digest = split_hash(&train_raw, &test_raw);
        let stats = fit_preprocess(&train_raw)?;
        if stats.feature_dim() != base_model.feature_dim {
            return Err(Error::Config(format!(
                "preprocessing produced {}-dimensional features, model expects {}",
                stats.feature_dim(),
                base_model.feature_dim
            )));
        }
        let prep = |rs: &[SubjectRecord]| -> Result<Vec<PreparedRecord>> {
            rs.iter().map(|r| crate::data::apply_preprocess(r, &stats)).collect()
        };
        let train_set = prep(&train_raw)?;
        let test_set = prep(&test_raw)?;
        splits.push((seed, digest.clone()));

        for (slot, (_, cfg)) in configs.iter().enumerate() {
            let outcome = train(&train_set, &test_set, cfg, train_cfg, seed)?;
            let metrics = evaluate(&outcome.model, &outcome.store, &test_set)?;
            cells[slot].push(AblationCell {
                seed,
                metrics,
                best_epoch: outcome.history.best_epoch,
                split_hash: digest.clone(),
            });
        }
    }

    let results = configs
        .into_iter()
        .zip(cells)
        .map(|((name, _), cells)| {
            let acc: Vec<f64> = cells.iter().map(|c| c.metrics.accuracy).collect();
            let f1: Vec<f64> = cells.iter().map(|c| c.metrics.f1_macro).collect();
            let (mean_accuracy, sd_accuracy) = mean_sd(&acc);
            let (mean_f1_macro, sd_f1_macro) = mean_sd(&f1);
            AblationResult {
                name,
                cells,
                mean_accuracy,
                sd_accuracy,
                mean_f1_macro,
                sd_f1_macro,
            }
        })
        .collect();
    Ok(AblationRun { results, splits })
}

pub fn render_ablation_csv(run: &AblationRun) -> String {
    let mut s =
        String::from("config,seed,accuracy,f1_macro,f1_weighted,best_epoch,split_hash\n");
    for result in &run.results {
        for cell in &result.cells {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{},{}",
                result.name,
                cell.seed,
                cell.metrics.accuracy,
                cell.metrics.f1_macro,
                cell.metrics.f1_weighted,
                cell.best_epoch,
                cell.split_hash
            );
        }
        let _ = writeln!(
            s,
            "{},mean,{:.6},{:.6},,,",
            result.name, result.mean_accuracy, result.mean_f1_macro
        );
        let _ = writeln!(
            s,
            "{},sd,{:.6},{:.6},,,",
            result.name, result.sd_accuracy, result.sd_f1_macro
        );
    }
    s
}

pub fn write_ablation_csv(run: &AblationRun, path: &Path) -> Result<()> {
    write_text(path, &render_ablation_csv(run))
}

// ── Tests ──

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_picks_largest_and_breaks_ties_low() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
        assert_eq!(argmax(&[1.0]), 0);
        assert_eq!(argmax(&[2.0, 2.0, 2.0]), 0);
    }

    #[test]
    fn perfect_diagonal_scores_one_everywhere() {
        let m = Metrics::from_confusion([[4, 0, 0], [0, 5, 0], [0, 0, 3]]).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.f1_macro, 1.0);
        assert_eq!(m.f1_weighted, 1.0);
        for c in &m.per_class {
            assert_eq!(c.f1, 1.0);
            assert!(c.precision_defined && c.recall_defined);
        }
    }

    #[test]
    fn hand_worked_confusion_matches() {
        // PD: 1 right, 1 predicted iRBD. iRBD: 2 right. HC: 2 right.
        // precision = (1, 2/3, 1), recall = (1/2, 1, 1),
        // f1 = (2/3, 4/5, 1), accuracy 5/6.
        let m = Metrics::from_confusion([[1, 1, 0], [0, 2, 0], [0, 0, 2]]).unwrap();
        assert!((m.accuracy - 5.0 / 6.0).abs() < 1e-15);
        assert!((m.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.per_class[1].f1 - 0.8).abs() < 1e-15);
        assert!((m.per_class[2].f1 - 1.0).abs() < 1e-15);
        let macro_expected = (2.0 / 3.0 + 0.8 + 1.0) / 3.0;
        assert!((m.f1_macro - macro_expected).abs() < 1e-15);
        let weighted_expected = (2.0 * (2.0 / 3.0) + 2.0 * 0.8 + 2.0 * 1.0) / 6.0;
        assert!((m.f1_weighted - weighted_expected).abs() < 1e-15);
    }

    #[test]
    fn zero_denominators_flagged_and_scored_zero() {
        // No HC subjects and nothing predicted PD.
        let m = Metrics::from_confusion([[0, 3, 0], [0, 4, 0], [0, 0, 0]]).unwrap();
        let pd = &m.per_class[0];
        assert!(!pd.precision_defined && pd.precision == 0.0);
        assert!(pd.recall_defined && pd.recall == 0.0);
        let hc = &m.per_class[2];
        assert!(!hc.recall_defined && hc.recall == 0.0);
        assert!(!hc.precision_defined);
        assert_eq!(hc.f1, 0.0);
        // Macro mean still divides by 3.
        let irbd_f1 = m.per_class[1].f1;
        assert!((m.f1_macro - irbd_f1 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn macro_f1_is_invariant_under_class_relabeling() {
        let base = [[5, 2, 1], [0, 7, 3], [2, 2, 6]];
        let m0 = Metrics::from_confusion(base).unwrap();
        // Swap classes 0 and 2 on both axes.
        let mut swapped = [[0usize; 3]; 3];
        let perm = [2, 0, 1];
        for t in 0..3 {
            for p in 0..3 {
                swapped[perm[t]][perm[p]] = base[t][p];
            }
        }
        let m1 = Metrics::from_confusion(swapped).unwrap();
        assert!((m0.f1_macro - m1.f1_macro).abs() < 1e-15);
        assert!((m0.accuracy - m1.accuracy).abs() < 1e-15);
        assert!((m0.f1_weighted - m1.f1_weighted).abs() < 1e-15);
    }

    #[test]
    fn empty_confusion_rejected() {
        assert!(Metrics::from_confusion([[0; 3]; 3]).is_err());
    }

    #[test]
    fn ablation_configs_cover_gate_and_every_expert() {
        let base = ModelConfig::default();
        let configs = ablation_configs(&base);
        assert_eq!(configs.len(), 6);
        assert_eq!(configs[0].0, "full");
        assert_eq!(configs[0].1, base);
        assert_eq!(configs[1].0, "no_gate");
        assert_eq!(configs[1].1.gating, GatingMode::Uniform);
        assert_eq!(configs[1].1.experts, base.experts);
        for (i, &kind) in base.experts.iter().enumerate() {
            let (name, cfg) = &configs[2 + i];
            assert_eq!(name, &format!("no_{}", kind.token()));
            assert_eq!(cfg.experts.len(), 3);
            assert!(!cfg.experts.contains(&kind));
        }
    }

    #[test]
    fn mean_sd_matches_hand_computation() {
        let (m, s) = mean_sd(&[0.5, 0.7, 0.9]);
        assert!((m - 0.7).abs() < 1e-15);
        assert!((s - 0.2).abs() < 1e-12);
        let (m1, s1) = mean_sd(&[0.4]);
        assert_eq!((m1, s1), (0.4, 0.0));
    }

    #[test]
    fn report_renderers_are_deterministic() {
        let report = UtilizationReport {
            experts: ExpertKind::ALL.to_vec(),
            means: vec![0.25; 4],
            rows: vec![
                ("a".into(), vec![0.25; 4]),
                ("b".into(), vec![0.1, 0.2, 0.3, 0.4]),
            ],
            static_uniform: false,
        };
        let csv = render_utilization_csv(&report);
        assert_eq!(csv, render_utilization_csv(&report));
        assert!(csv.starts_with("# gate: learned\nsubject,fmri,amri,dti,clinical\n"));
        assert!(csv.contains("b,0.100000,0.200000,0.300000,0.400000\n"));
        assert!(csv.ends_with("mean,0.250000,0.250000,0.250000,0.250000\n"));
        let svg = render_utilization_svg(&report);
        assert_eq!(svg, render_utilization_svg(&report));
        assert!(svg.starts_with("<svg ") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<rect ").count(), 4);
    }
}
