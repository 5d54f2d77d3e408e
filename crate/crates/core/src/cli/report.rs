use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::ReportArgs;
use crate::domain::Label;
use crate::error::{Error, Result};
use crate::evaluation::{ablation_label, auc_from_scores, roc_curve, ExperimentResult, PatientScore};
use crate::io::{read_json, write_json};

/// `strategy, fold 1..k, average` as tab-separated text.
pub fn render_tsv(result: &ExperimentResult) -> String {
    let k = result.metadata.k;
    let mut out = String::from("strategy");
    for f in 1..=k {
        write!(out, "\tfold{f}").unwrap();
    }
    out.push_str("\taverage\n");
    for row in &result.rows {
        out.push_str(&row.name);
        for a in &row.fold_auc {
            write!(out, "\t{a:.6}").unwrap();
        }
        writeln!(out, "\t{:.6}", row.average).unwrap();
    }
    out
}

pub fn render_markdown(result: &ExperimentResult) -> String {
    let k = result.metadata.k;
    let mut out = format!(
        "# {} (seed {}, config {})\n\n| strategy |",
        result.metadata.kind, result.metadata.seed, result.metadata.config_hash
    );
    for f in 1..=k {
        write!(out, " fold {f} |").unwrap();
    }
    out.push_str(" average |\n|---|");
    out.push_str(&"---:|".repeat(k + 1));
    out.push('\n');
    for row in &result.rows {
        write!(out, "| {} |", row.name).unwrap();
        for a in &row.fold_auc {
            write!(out, " {a:.4} |").unwrap();
        }
        writeln!(out, " **{:.4}** |", row.average).unwrap();
    }
    out
}

/// Aggregator rows by backbone columns of the average AUC.
fn render_ablation_grid(result: &ExperimentResult) -> String {
    let mut grid: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut backbones: Vec<String> = Vec::new();
    for row in &result.rows {
        let label = ablation_label(&row.config);
        let (agg, backbone) = label.split_once('+').unwrap_or((label.as_str(), ""));
        if !backbones.iter().any(|b| b == backbone) {
            backbones.push(backbone.to_string());
        }
        grid.entry(agg.to_string())
            .or_default()
            .insert(backbone.to_string(), row.average);
    }
    let mut out = String::from("| aggregator |");
    for b in &backbones {
        write!(out, " {b} |").unwrap();
    }
    out.push_str("\n|---|");
    out.push_str(&"---:|".repeat(backbones.len()));
    out.push('\n');
    for (agg, cells) in &grid {
        write!(out, "| {agg} |").unwrap();
        for b in &backbones {
            match cells.get(b) {
                Some(v) => write!(out, " {v:.4} |").unwrap(),
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `results.json`, `results.tsv`, `results.md` and `scores.csv`.
pub fn write_run_outputs(dir: &Path, result: &ExperimentResult) -> Result<()> {
    write_json(&dir.join("results.json"), result)?;
    write_text(&dir.join("results.tsv"), &render_tsv(result))?;
    write_text(&dir.join("results.md"), &render_markdown(result))?;
    let path = dir.join("scores.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for s in &result.scores {
        w.serialize(s).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let location = e
        .position()
        .map_or_else(|| "unknown position".to_string(), |p| format!("line {}", p.line()));
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Parse {
            path: path.to_path_buf(),
            location,
            message: format!("{other:?}"),
        },
    }
}

pub(crate) fn read_scores(path: &Path) -> Result<Vec<PatientScore>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect()
}

const SIZE: f64 = 320.0;
const MARGIN: f64 = 40.0;

fn roc_svg(title: &str, points: &[(f64, f64)]) -> String {
    let to_x = |fpr: f64| MARGIN + fpr * SIZE;
    let to_y = |tpr: f64| MARGIN + (1.0 - tpr) * SIZE;
    let path: Vec<String> = points
        .iter()
        .map(|&(f, t)| format!("{:.2},{:.2}", to_x(f), to_y(t)))
        .collect();
    let full = SIZE + 2.0 * MARGIN;
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{full}\" height=\"{full}\" font-family=\"sans-serif\" font-size=\"12\">\n",
            "<rect x=\"{m}\" y=\"{m}\" width=\"{s}\" height=\"{s}\" fill=\"none\" stroke=\"#444\"/>\n",
            "<line x1=\"{m}\" y1=\"{e}\" x2=\"{e}\" y2=\"{m}\" stroke=\"#bbb\" stroke-dasharray=\"4 4\"/>\n",
            "<polyline points=\"{path}\" fill=\"none\" stroke=\"#c0392b\" stroke-width=\"2\"/>\n",
            "<text x=\"{m}\" y=\"24\">{title}</text>\n",
            "<text x=\"{cx}\" y=\"{b}\" text-anchor=\"middle\">false positive rate</text>\n",
            "<text x=\"14\" y=\"{cx}\" transform=\"rotate(-90 14 {cx})\" text-anchor=\"middle\">true positive rate</text>\n",
            "</svg>\n"
        ),
        full = full,
        m = MARGIN,
        s = SIZE,
        e = MARGIN + SIZE,
        cx = MARGIN + SIZE / 2.0,
        b = full - 10.0,
        path = path.join(" "),
        title = escape(title),
    )
}

fn bars_svg(rows: &[(String, f64)]) -> String {
    let bar = 28.0;
    let label_width = 220.0;
    let width = label_width + SIZE + MARGIN;
    let height = MARGIN + rows.len() as f64 * (bar + 8.0) + MARGIN;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <text x=\"10\" y=\"24\">average AUC</text>\n"
    );
    for (i, (name, v)) in rows.iter().enumerate() {
        let y = MARGIN + i as f64 * (bar + 8.0);
        writeln!(
            out,
            "<text x=\"10\" y=\"{:.1}\">{}</text><rect x=\"{label_width}\" y=\"{y:.1}\" width=\"{:.2}\" height=\"{bar}\" fill=\"#2c7fb8\"/><text x=\"{:.2}\" y=\"{:.1}\">{v:.4}</text>",
            y + bar * 0.65,
            escape(name),
            v.clamp(0.0, 1.0) * SIZE,
            label_width + v.clamp(0.0, 1.0) * SIZE + 4.0,
            y + bar * 0.65,
        )
        .unwrap();
    }
    // chance line
    writeln!(
        out,
        "<line x1=\"{x:.1}\" y1=\"{MARGIN}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#999\" stroke-dasharray=\"4 4\"/>",
        height - MARGIN,
        x = label_width + 0.5 * SIZE
    )
    .unwrap();
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Summary table, one pooled ROC curve per row and a bar chart of averages.
pub fn cmd_report(args: &ReportArgs) -> Result<PathBuf> {
    let result: ExperimentResult = read_json(&args.run_dir.join("results.json"))?;
    let scores = read_scores(&args.run_dir.join("scores.csv"))?;
    let out = args.out.clone().unwrap_or_else(|| args.run_dir.join("report"));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let mut summary = render_markdown(&result);
    if result.metadata.kind == "ablation" {
        summary.push_str("\n## aggregator x backbone\n\n");
        summary.push_str(&render_ablation_grid(&result));
    }
    summary.push_str("\n## pooled ROC\n\n| strategy | pooled AUC | curve |\n|---|---:|---|\n");
    for row in &result.rows {
        let mine: Vec<&PatientScore> = scores.iter().filter(|s| s.strategy == row.name).collect();
        if mine.is_empty() {
            return Err(Error::Parse {
                path: args.run_dir.join("scores.csv"),
                location: format!("strategy '{}'", row.name),
                message: "no scores for this row".into(),
            });
        }
        let values: Vec<f64> = mine.iter().map(|s| s.score).collect();
        let labels: Vec<Label> = mine.iter().map(|s| s.label).collect();
        let pooled = auc_from_scores(&values, &labels)?;
        let curve = roc_curve(&values, &labels)?;
        let file = format!("roc-{}.svg", file_stem(&row.name));
        let title = format!("{}: pooled AUC {pooled:.4}, fold mean {:.4}", row.name, row.average);
        write_text(&out.join(&file), &roc_svg(&title, &curve))?;
        writeln!(summary, "| {} | {pooled:.4} | [{file}]({file}) |", row.name).unwrap();
    }
    let bars: Vec<(String, f64)> = result.rows.iter().map(|r| (r.name.clone(), r.average)).collect();
    write_text(&out.join("auc-bars.svg"), &bars_svg(&bars))?;
    write_text(&out.join("summary.md"), &summary)?;
    Ok(out)
}
