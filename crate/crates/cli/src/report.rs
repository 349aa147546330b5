//! Charts from metrics CSVs: per-task accuracy bars for sequence runs and the
//! probe/finetune trade-off scatter for LOCO runs.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use ppap_core::harness::{read_metrics_csv, MetricsRow};
use ppap_core::write_atomic;

use crate::svg::{axes, legend, Scale, Svg, HEIGHT, MARGIN_BOTTOM, MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, WIDTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Bars,
    Scatter,
}

pub fn read_rows(paths: &[PathBuf]) -> Result<Vec<MetricsRow>, String> {
    let mut rows = Vec::new();
    for p in paths {
        let f = File::open(p).map_err(|e| format!("cannot open {}: {e}", p.display()))?;
        rows.extend(read_metrics_csv(f).map_err(|e| format!("{}: {e}", p.display()))?);
    }
    Ok(rows)
}

/// Writes the charts into `out` and returns their paths.
pub fn report(rows: &[MetricsRow], style: Style, out: &Path) -> Result<Vec<PathBuf>, String> {
    std::fs::create_dir_all(out).map_err(|e| format!("cannot create {}: {e}", out.display()))?;
    let charts = match style {
        Style::Bars => vec![("bars.svg".to_string(), bars(rows)?)],
        Style::Scatter => scatter(rows)?,
    };
    let mut written = Vec::new();
    for (name, body) in charts {
        let path = out.join(name);
        write_atomic(&path, body.as_bytes()).map_err(|e| e.to_string())?;
        written.push(path);
    }
    Ok(written)
}

/// A method at one strength, aggregated over seeds and hold-outs.
#[derive(Debug, Clone, PartialEq)]
struct Family {
    method: String,
    strength: f64,
}

impl Family {
    fn of(row: &MetricsRow) -> Self {
        Self {
            method: row.method.clone(),
            strength: row.strength_or_r,
        }
    }

    fn label(&self) -> String {
        match self.method.as_str() {
            "none" | "scratch" => self.method.clone(),
            "ppap" => format!("ppap r={}", self.strength),
            "si" => format!("si c={}", self.strength),
            "ewc" => format!("ewc λ={}", self.strength),
            other => format!("{other} {}", self.strength),
        }
    }
}

/// Base colour per method, lightened for each further strength.
fn color(method: &str, shade: usize) -> String {
    let base: (u8, u8, u8) = match method {
        "ppap" => (230, 120, 20),
        "si" => (40, 150, 60),
        "ewc" => (120, 60, 170),
        "scratch" => (150, 150, 150),
        _ => (60, 60, 60),
    };
    let t = (shade as f64 * 0.22).min(0.7);
    let mix = |c: u8| (c as f64 + (255.0 - c as f64) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(base.0), mix(base.1), mix(base.2))
}

fn family_colors(families: &[Family]) -> Vec<String> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    families
        .iter()
        .map(|f| {
            let n = seen.entry(f.method.as_str()).or_default();
            let c = color(&f.method, *n);
            *n += 1;
            c
        })
        .collect()
}

fn push_unique<T: PartialEq>(v: &mut Vec<T>, x: T) -> usize {
    match v.iter().position(|y| *y == x) {
        Some(i) => i,
        None => {
            v.push(x);
            v.len() - 1
        }
    }
}

/// Running mean keyed by index.
#[derive(Default)]
struct Means(BTreeMap<(usize, usize), (f64, usize)>);

impl Means {
    fn add(&mut self, key: (usize, usize), v: f64) {
        let e = self.0.entry(key).or_default();
        e.0 += v;
        e.1 += 1;
    }

    fn get(&self, key: (usize, usize)) -> Option<f64> {
        self.0.get(&key).map(|(s, n)| s / *n as f64)
    }
}

/// The stage each run's per-task accuracies are read from: the last
/// `after-` stage it recorded, or `scratch` for runs trained from scratch.
fn final_stages(rows: &[MetricsRow]) -> BTreeMap<&str, &str> {
    let mut out = BTreeMap::new();
    for r in rows {
        if r.stage.starts_with("after-") || r.stage == "scratch" {
            out.insert(r.run_id.as_str(), r.stage.as_str());
        }
    }
    out
}

fn bars(rows: &[MetricsRow]) -> Result<String, String> {
    let stages = final_stages(rows);
    let mut families = Vec::new();
    let mut tasks = Vec::new();
    let mut means = Means::default();
    for r in rows {
        if stages.get(r.run_id.as_str()) != Some(&r.stage.as_str()) {
            continue;
        }
        let f = push_unique(&mut families, Family::of(r));
        let t = push_unique(&mut tasks, r.task_id.clone());
        means.add((f, t), r.accuracy);
    }
    if tasks.is_empty() {
        return Err("no per-task accuracies (after-* or scratch stages) to chart".into());
    }
    let colors = family_colors(&families);

    let mut svg = Svg::new();
    let y = Scale {
        lo: 0.0,
        hi: 1.0,
        from: HEIGHT - MARGIN_BOTTOM,
        to: MARGIN_TOP,
    };
    axes(&mut svg, None, y, "task", "final accuracy", "Final accuracy per task");
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let group_w = plot_w / tasks.len() as f64;
    let bar_w = group_w * 0.8 / families.len() as f64;
    for (t, task) in tasks.iter().enumerate() {
        let x0 = MARGIN_LEFT + group_w * t as f64 + group_w * 0.1;
        for (f, color) in colors.iter().enumerate() {
            if let Some(v) = means.get((f, t)) {
                let top = y.at(v.clamp(0.0, 1.0));
                svg.rect(x0 + bar_w * f as f64, top, bar_w, y.at(0.0) - top, color);
            }
        }
        svg.text(x0 + group_w * 0.4, HEIGHT - MARGIN_BOTTOM + 16.0, 11.0, "middle", task);
    }
    let entries: Vec<(String, String)> = families.iter().map(Family::label).zip(colors).collect();
    legend(&mut svg, &entries);
    Ok(svg.finish())
}

/// `-e{P}x{F}` at the end of a LOCO run id.
fn epoch_tag(run_id: &str) -> Option<&str> {
    let i = run_id.rfind("-e")?;
    let tag = &run_id[i + 1..];
    let (p, f) = tag[1..].split_once('x')?;
    let digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    (digits(p) && digits(f)).then_some(tag)
}

const REFERENCES: [(&str, &str); 3] = [
    ("reference-pretrain-end", "pretrain accuracy after pretraining"),
    ("reference-degraded", "probe after plain finetuning"),
    ("reference-finetune-end", "finetune accuracy, plain finetuning"),
];

fn scatter(rows: &[MetricsRow]) -> Result<Vec<(String, String)>, String> {
    let mut groups: Vec<Option<&str>> = Vec::new();
    for r in rows.iter().filter(|r| r.stage == "probe" || r.stage == "finetune") {
        push_unique(&mut groups, epoch_tag(&r.run_id));
    }
    if groups.is_empty() {
        return Err("no probe/finetune rows to chart".into());
    }
    groups
        .into_iter()
        .map(|g| {
            let name = match g {
                Some(tag) => format!("scatter-{tag}.svg"),
                None => "scatter.svg".to_string(),
            };
            let subset: Vec<&MetricsRow> = rows.iter().filter(|r| epoch_tag(&r.run_id) == g).collect();
            let title = match g {
                Some(tag) => format!("Pretrain retention vs finetune accuracy ({})", &tag[1..]),
                None => "Pretrain retention vs finetune accuracy".to_string(),
            };
            Ok((name, scatter_one(&subset, &title)))
        })
        .collect()
}

fn scatter_one(rows: &[&MetricsRow], title: &str) -> String {
    let mut families = Vec::new();
    let mut means = Means::default();
    let mut refs = Means::default();
    for r in rows {
        let axis = match r.stage.as_str() {
            "probe" => 0,
            "finetune" => 1,
            stage => {
                if let Some(i) = REFERENCES.iter().position(|(s, _)| *s == stage) {
                    refs.add((i, 0), r.accuracy);
                }
                continue;
            }
        };
        let f = push_unique(&mut families, Family::of(r));
        means.add((f, axis), r.accuracy);
    }
    let colors = family_colors(&families);
    let points: Vec<Option<(f64, f64)>> = (0..families.len())
        .map(|f| Some((means.get((f, 0))?, means.get((f, 1))?)))
        .collect();
    let references: Vec<Option<f64>> = (0..REFERENCES.len()).map(|i| refs.get((i, 0))).collect();

    let xs = points.iter().flatten().map(|p| p.0).chain(references[..2].iter().flatten().copied());
    let ys = points.iter().flatten().map(|p| p.1).chain(references[2]);
    let range = |it: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if lo > hi {
            return (0.0, 1.0);
        }
        let pad = ((hi - lo) * 0.1).max(0.02);
        ((lo - pad).max(0.0), (hi + pad).min(1.0))
    };
    let (x_lo, x_hi) = range(&mut { xs });
    let (y_lo, y_hi) = range(&mut { ys });
    let x = Scale {
        lo: x_lo,
        hi: x_hi,
        from: MARGIN_LEFT,
        to: WIDTH - MARGIN_RIGHT,
    };
    let y = Scale {
        lo: y_lo,
        hi: y_hi,
        from: HEIGHT - MARGIN_BOTTOM,
        to: MARGIN_TOP,
    };

    let mut svg = Svg::new();
    axes(&mut svg, Some(x), y, "probed pretrain accuracy", "finetune accuracy", title);
    let ref_colors = ["#1f5fbf", "#c03030", "#303030"];
    for (i, v) in references.iter().enumerate() {
        let Some(v) = *v else { continue };
        if i < 2 {
            let px = x.at(v);
            svg.line(px, MARGIN_TOP, px, HEIGHT - MARGIN_BOTTOM, ref_colors[i], true);
        } else {
            let py = y.at(v);
            svg.line(MARGIN_LEFT, py, WIDTH - MARGIN_RIGHT, py, ref_colors[i], true);
        }
    }

    // Connect strengths of the same method in order.
    let mut methods: Vec<&str> = Vec::new();
    for f in &families {
        push_unique(&mut methods, f.method.as_str());
    }
    for m in methods {
        let mut pts: Vec<(f64, (f64, f64))> = families
            .iter()
            .zip(&points)
            .filter(|(f, _)| f.method == m)
            .filter_map(|(f, p)| Some((f.strength, (*p)?)))
            .collect();
        if pts.len() > 1 {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let line: Vec<(f64, f64)> = pts.iter().map(|(_, (px, py))| (x.at(*px), y.at(*py))).collect();
            svg.polyline(&line, &color(m, 0));
        }
    }
    for (p, c) in points.iter().zip(&colors) {
        if let Some((px, py)) = p {
            svg.circle(x.at(*px), y.at(*py), 5.0, c);
        }
    }

    let mut entries: Vec<(String, String)> = families.iter().map(Family::label).zip(colors).collect();
    for (i, (_, label)) in REFERENCES.iter().enumerate() {
        if references[i].is_some() {
            entries.push((format!("-- {label}"), ref_colors[i].to_string()));
        }
    }
    legend(&mut svg, &entries);
    svg.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(run: &str, method: &str, s: f64, task: &str, stage: &str, acc: f64) -> MetricsRow {
        MetricsRow {
            run_id: run.into(),
            method: method.into(),
            strength_or_r: s,
            task_id: task.into(),
            stage: stage.into(),
            accuracy: acc,
            euclidean_score: None,
            seed: 0,
            wall_time_seconds: 0.0,
        }
    }

    #[test]
    fn epoch_tags() {
        assert_eq!(epoch_tag("ppap-0.1-s0-h3-e20x20"), Some("e20x20"));
        assert_eq!(epoch_tag("ppap-0.1-s0"), None);
        assert_eq!(epoch_tag("ewc-1e-3-s0"), None);
    }

    #[test]
    fn bars_use_last_after_stage() {
        let rows = vec![
            row("a", "none", 0.0, "task1", "after-task1", 0.9),
            row("a", "none", 0.0, "task1", "after-task2", 0.5),
            row("a", "none", 0.0, "task2", "after-task2", 0.8),
        ];
        assert_eq!(final_stages(&rows)["a"], "after-task2");
        let svg = bars(&rows).unwrap();
        assert_eq!(svg.matches("<rect").count(), 2 + 1 + 1);
    }

    #[test]
    fn scatter_needs_probe_rows() {
        let rows = vec![row("a", "none", 0.0, "task1", "after-task1", 0.9)];
        assert!(scatter(&rows).is_err());
    }

    #[test]
    fn colors_lighten_per_strength() {
        assert_eq!(color("ppap", 0), "#e67814");
        assert_ne!(color("ppap", 1), color("ppap", 0));
    }
}
