use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{degradation, pct_change, EvalReport, PrecisionLevel};

use super::eval::MatchedRecall;

/// Model ids used throughout a run.
pub const TEACHER: &str = "teacher";
pub const DIRECT: &str = "direct";
pub const KD_A: &str = "kd-a";
pub const KD_B: &str = "kd-b";
/// Suffix of models converted with the percentile scale policy.
pub const PERCENTILE_SUFFIX: &str = "@percentile";

/// Slack of the matched-recall directional check.
pub const MATCHED_PRECISION_SLACK: f64 = 0.01;

fn display_name(model: &str) -> &str {
    match model {
        TEACHER => "Teacher (L)",
        DIRECT => "Direct (S)",
        KD_A => "KD (S)",
        KD_B => "KD Form B (S)",
        other => other,
    }
}

/// Everything the emitter reads.
#[derive(Debug, Clone, Default)]
pub struct ReportSet {
    pub reports: BTreeMap<(String, PrecisionLevel), EvalReport>,
    pub matched_recall: Vec<MatchedRecall>,
    /// Trainable parameter count per model id.
    pub params: BTreeMap<String, usize>,
    /// SHA-256 of each model's checkpoint.
    pub checkpoints: BTreeMap<String, String>,
    pub config_digest: String,
    pub kd_alpha: f64,
    pub kd_b_alpha: f64,
}

impl ReportSet {
    pub fn insert(&mut self, report: EvalReport) {
        self.reports.insert((report.model.clone(), report.precision_level), report);
    }

    pub fn get(&self, model: &str, level: PrecisionLevel) -> Result<&EvalReport> {
        self.reports
            .get(&(model.to_string(), level))
            .ok_or_else(|| Error::Evaluation(format!("missing report: {model} at {level}")))
    }
}

/// One emitted number and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellProvenance {
    pub table: String,
    pub row: String,
    pub column: String,
    pub value: String,
    pub model: String,
    pub precision_level: PrecisionLevel,
    pub config_digest: String,
    pub checkpoint_sha256: Option<String>,
}

/// Result of a directional check; failures are kept, not hidden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

struct Table {
    file: &'static str,
    title: &'static str,
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn markdown(&self) -> String {
        let mut s = format!("### {}\n\n| {} |\n|", self.title, self.header.join(" | "));
        for _ in &self.header {
            s.push_str("---|");
        }
        s.push('\n');
        for r in &self.rows {
            writeln!(s, "| {} |", r.join(" | ")).unwrap();
        }
        s
    }
}

struct Emitter<'a> {
    set: &'a ReportSet,
    provenance: Vec<CellProvenance>,
}

impl Emitter<'_> {
    /// Formats `value` and records its source.
    fn cell(&mut self, table: &str, row: &str, column: &str, report: &EvalReport, value: String) -> String {
        let base = report.model.trim_end_matches(PERCENTILE_SUFFIX);
        self.provenance.push(CellProvenance {
            table: table.into(),
            row: row.into(),
            column: column.into(),
            value: value.clone(),
            model: report.model.clone(),
            precision_level: report.precision_level,
            config_digest: self.set.config_digest.clone(),
            checkpoint_sha256: self.set.checkpoints.get(base).cloned(),
        });
        value
    }
}

fn f3(v: f64) -> String {
    format!("{v:.3}")
}

fn opt3(v: Option<f64>) -> String {
    v.map_or("n/a".into(), f3)
}

/// Percentage delta rounded to `decimals`, re-checked against the exact value.
pub fn pct_cell(new: f64, base: f64, decimals: usize) -> Result<String> {
    let Some(p) = pct_change(new, base) else {
        return Ok("n/a".into());
    };
    let s = format!("{p:+.decimals$}%");
    let back: f64 = s.trim_end_matches('%').parse().expect("formatted number parses");
    if (back - p).abs() > 0.5 * 10f64.powi(-(decimals as i32)) + 1e-12 {
        return Err(Error::Evaluation(format!("delta {p} rendered as {s}")));
    }
    Ok(s)
}

fn check_far(r: &EvalReport) -> Result<()> {
    r.validate().map_err(|e| Error::Evaluation(format!("{} {}: {e}", r.model, r.precision_level)))
}

/// Directional checks of one run: INT8 sensitivity by model size and
/// precision at matched recall.
pub fn directional_checks(set: &ReportSet) -> Result<Vec<DirectionalCheck>> {
    let drop = |m: &str| -> Result<f64> {
        let d = degradation(set.get(m, PrecisionLevel::Fp32)?, set.get(m, PrecisionLevel::Int8)?)?;
        Ok(-d.delta_pct.unwrap_or(0.0))
    };
    let (t, d, k) = (drop(TEACHER)?, drop(DIRECT)?, drop(KD_A)?);
    let student = (d + k) / 2.0;
    let mut checks = vec![DirectionalCheck {
        name: "teacher INT8 degradation >= student degradation (minmax)".into(),
        passed: t >= student,
        detail: format!("teacher drop {t:.2}%, mean student drop {student:.2}% (direct {d:.2}%, kd-a {k:.2}%)"),
    }];
    let m = set
        .matched_recall
        .iter()
        .find(|m| m.precision_level == PrecisionLevel::Int8 && m.reference == DIRECT && m.subject == KD_A)
        .ok_or_else(|| Error::Evaluation("missing matched-recall record: kd-a vs direct at int8".into()))?;
    let (passed, detail) = match m.result.precision {
        Some(p) => (
            p >= m.reference_precision - MATCHED_PRECISION_SLACK,
            format!(
                "kd-a precision {p:.4} at recall {:.4} vs direct {:.4} at recall {:.4}",
                m.result.recall.unwrap_or(f64::NAN),
                m.reference_precision,
                m.reference_recall
            ),
        ),
        None => (false, format!("kd-a cannot reach direct recall {:.4}", m.reference_recall)),
    };
    checks.push(DirectionalCheck {
        name: format!("kd-a precision at matched recall >= direct - {MATCHED_PRECISION_SLACK} (int8)"),
        passed,
        detail,
    });
    Ok(checks)
}

/// Files written by [`emit_tables`].
pub const TABLE_FILES: [&str; 5] = [
    "table1_fp32.md",
    "table2_groups.md",
    "table3_quantization.md",
    "table4_int8_precision.md",
    "table5_ablation.md",
];

/// Builds every table and plot series in memory, re-verifies the FAR
/// identity and delta arithmetic, then writes all files into `dir`. Nothing
/// is written when a report is missing.
pub fn emit_tables(set: &ReportSet, dir: &Path) -> Result<Vec<PathBuf>> {
    use PrecisionLevel::{Fp32, Int8};
    for r in set.reports.values() {
        check_far(r)?;
    }
    let primary = [TEACHER, DIRECT, KD_A];
    for m in primary.iter().chain([&KD_B]) {
        set.get(m, Fp32)?;
        set.get(m, Int8)?;
    }
    let mut e = Emitter {
        set,
        provenance: Vec::new(),
    };
    let mut tables = Vec::new();

    let name = "Table 1";
    let mut rows = Vec::new();
    for m in primary {
        let r = set.get(m, Fp32)?;
        let row = display_name(m);
        let params = set.params.get(m).map_or("n/a".into(), |p| format!("{:.1}k", *p as f64 / 1000.0));
        rows.push(vec![
            row.to_string(),
            e.cell(name, row, "Params", r, params),
            e.cell(name, row, "mAP50", r, f3(r.map50)),
            e.cell(name, row, "mAP50-95", r, f3(r.map50_95)),
            e.cell(name, row, "Precision", r, f3(r.precision)),
            e.cell(name, row, "Recall", r, f3(r.recall)),
            e.cell(name, row, "FAR", r, f3(r.far)),
        ]);
    }
    tables.push(Table {
        file: TABLE_FILES[0],
        title: "FP32 detection performance",
        header: vec!["Model", "Params", "mAP50", "mAP50-95", "Precision", "Recall", "FAR"],
        rows,
    });

    let name = "Table 2";
    let mut rows = Vec::new();
    for m in primary {
        let r = set.get(m, Fp32)?;
        let row = display_name(m);
        let g = |k: &str| r.per_group_ap50.get(k).copied().flatten();
        rows.push(vec![
            row.to_string(),
            e.cell(name, row, "Pedestrian", r, opt3(g("pedestrian"))),
            e.cell(name, row, "Cyclist", r, opt3(g("cyclist"))),
            e.cell(name, row, "Motorcyclist", r, opt3(g("motorcyclist"))),
            e.cell(name, row, "VRU Avg", r, opt3(r.vru_avg_ap50)),
        ]);
    }
    tables.push(Table {
        file: TABLE_FILES[1],
        title: "Minority-group detection performance (AP50, FP32)",
        header: vec!["Model", "Pedestrian", "Cyclist", "Motorcyclist", "VRU Avg"],
        rows,
    });

    let name = "Table 3";
    let mut rows = Vec::new();
    let mut variants: Vec<(String, String)> = primary.iter().map(|m| (m.to_string(), display_name(m).to_string())).collect();
    for m in primary {
        let id = format!("{m}{PERCENTILE_SUFFIX}");
        if set.reports.contains_key(&(id.clone(), Int8)) {
            variants.push((id, format!("{} [percentile]", display_name(m))));
        }
    }
    for (id, row) in &variants {
        let base = id.trim_end_matches(PERCENTILE_SUFFIX);
        let fp = set.get(base, Fp32)?;
        let q = set.get(id, Int8)?;
        let d = crate::metrics::degradation_of(fp.map50, q.map50);
        rows.push(vec![
            row.clone(),
            e.cell(name, row, "FP32", fp, f3(fp.map50)),
            e.cell(name, row, "INT8", q, f3(q.map50)),
            e.cell(name, row, "dmAP", q, format!("{:+.3}", d.delta_map)),
            e.cell(name, row, "d%", q, pct_cell(q.map50, fp.map50, 1)?),
        ]);
    }
    tables.push(Table {
        file: TABLE_FILES[2],
        title: "Quantization impact: FP32 to INT8 (mAP50)",
        header: vec!["Model", "FP32", "INT8", "ΔmAP", "Δ%"],
        rows,
    });

    let name = "Table 4";
    let mut rows = Vec::new();
    let base = set.get(TEACHER, Int8)?;
    for m in primary {
        let r = set.get(m, Int8)?;
        let row = display_name(m);
        let (dp, df) = if m == TEACHER {
            ("baseline".to_string(), "baseline".to_string())
        } else {
            (pct_cell(r.precision, base.precision, 0)?, pct_cell(r.far, base.far, 0)?)
        };
        rows.push(vec![
            row.to_string(),
            e.cell(name, row, "mAP50", r, f3(r.map50)),
            e.cell(name, row, "Precision", r, f3(r.precision)),
            e.cell(name, row, "dPrec", r, dp),
            e.cell(name, row, "Recall", r, f3(r.recall)),
            e.cell(name, row, "FAR", r, f3(r.far)),
            e.cell(name, row, "dFAR", r, df),
        ]);
    }
    tables.push(Table {
        file: TABLE_FILES[3],
        title: "Precision and false alarm rate at INT8 (teacher INT8 baseline)",
        header: vec!["Model", "mAP50", "Precision", "ΔPrec", "Recall", "FAR", "ΔFAR"],
        rows,
    });

    let name = "Table 5";
    let mut rows = Vec::new();
    for (m, row, alpha) in [
        (DIRECT, "Direct (baseline)", "---".to_string()),
        (KD_B, "KD Form B", format!("{:.1}", set.kd_b_alpha)),
        (KD_A, "KD Form A", format!("{:.1}", set.kd_alpha)),
    ] {
        let r = set.get(m, Int8)?;
        rows.push(vec![
            row.to_string(),
            e.cell(name, row, "alpha", r, alpha),
            e.cell(name, row, "mAP50", r, f3(r.map50)),
            e.cell(name, row, "Precision", r, f3(r.precision)),
            e.cell(name, row, "Recall", r, f3(r.recall)),
            e.cell(name, row, "FAR", r, f3(r.far)),
        ]);
    }
    tables.push(Table {
        file: TABLE_FILES[4],
        title: "Task loss weight ablation at INT8",
        header: vec!["Formulation", "α", "mAP50", "Precision", "Recall", "FAR"],
        rows,
    });

    let mut fig2 = String::from("model,fp32_map50,int8_map50,fp32_precision,int8_precision\n");
    for m in primary {
        let (f, q) = (set.get(m, Fp32)?, set.get(m, Int8)?);
        writeln!(fig2, "{m},{},{},{},{}", f.map50, q.map50, f.precision, q.precision).unwrap();
    }
    let mut fig3 = String::from("model,precision_level,map50,precision,far,fps,fps_simulated\n");
    for m in primary {
        for level in [Fp32, Int8] {
            let r = set.get(m, level)?;
            writeln!(fig3, "{m},{level},{},{},{},{},{}", r.map50, r.precision, r.far, r.fps, r.fps_simulated).unwrap();
        }
    }

    let checks = directional_checks(set)?;
    let mut summary = String::from("## Run summary\n\n");
    for t in &tables {
        summary.push_str(&t.markdown());
        summary.push('\n');
    }
    summary.push_str("### Throughput (simulated, single image, CPU)\n\n| Model | FP32 FPS | INT8 FPS |\n|---|---|---|\n");
    for m in primary {
        writeln!(summary, "| {} | {:.1} | {:.1} |", display_name(m), set.get(m, Fp32)?.fps, set.get(m, Int8)?.fps).unwrap();
    }
    summary.push_str("\nThroughput comes from the CPU reference and integer-simulation paths and is not comparable to accelerator FPS.\n\n### Matched-recall comparison\n\n| Level | Reference | Subject | Ref. recall | Ref. precision | Subject recall | Subject precision | ΔPrec |\n|---|---|---|---|---|---|---|---|\n");
    for m in &set.matched_recall {
        writeln!(
            summary,
            "| {} | {} | {} | {:.3} | {:.3} | {} | {} | {} |",
            m.precision_level,
            m.reference,
            m.subject,
            m.reference_recall,
            m.reference_precision,
            opt3(m.result.recall),
            opt3(m.result.precision),
            m.precision_delta.map_or("unreachable".into(), |d| format!("{d:+.3}"))
        )
        .unwrap();
    }
    summary.push_str("\n### Directional checks\n\n");
    for c in &checks {
        if c.passed {
            writeln!(summary, "- PASS: {} ({})", c.name, c.detail).unwrap();
        } else {
            writeln!(summary, "- **FAIL: {}** ({})", c.name, c.detail).unwrap();
        }
    }

    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut write = |file: &str, body: &str| -> Result<()> {
        let p = dir.join(file);
        std::fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    for t in &tables {
        write(t.file, &t.markdown())?;
    }
    write("fig2_quantization.csv", &fig2)?;
    write("fig3_deployment.csv", &fig3)?;
    write("summary.md", &summary)?;
    write("directional_checks.json", &serde_json::to_string_pretty(&checks)?)?;
    write("provenance.json", &serde_json::to_string_pretty(&e.provenance)?)?;
    Ok(written)
}
