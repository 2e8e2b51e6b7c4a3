//! Token error rate, real-time factor, and the trade-off report.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    Match { reference: usize, hypothesis: usize },
    Substitute { reference: usize, hypothesis: usize },
    Insert { hypothesis: usize },
    Delete { reference: usize },
}

/// Minimal unit-cost edit alignment, in order. On ties the backtrace prefers
/// substitution (or match), then insertion, then deletion.
pub fn align(reference: &[usize], hypothesis: &[usize]) -> Vec<EditOp> {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i * w + j] = diag.min(d[i * w + j - 1] + 1).min(d[(i - 1) * w + j] + 1);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                ops.push(if same {
                    EditOp::Match { reference: i - 1, hypothesis: j - 1 }
                } else {
                    EditOp::Substitute { reference: i - 1, hypothesis: j - 1 }
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i * w + j - 1] + 1 == here {
            ops.push(EditOp::Insert { hypothesis: j - 1 });
            j -= 1;
        } else {
            ops.push(EditOp::Delete { reference: i - 1 });
            i -= 1;
        }
    }
    ops.reverse();
    ops
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_len: usize,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn wer(&self) -> f64 {
        if self.reference_len == 0 {
            return 0.0;
        }
        100.0 * self.errors() as f64 / self.reference_len as f64
    }

    pub fn del(&self) -> f64 {
        if self.reference_len == 0 {
            return 0.0;
        }
        100.0 * self.deletions as f64 / self.reference_len as f64
    }

    /// Pool counts across utterances.
    pub fn accumulate(&mut self, other: &WerBreakdown) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.reference_len += other.reference_len;
    }
}

pub fn wer(reference: &[usize], hypothesis: &[usize]) -> Result<WerBreakdown> {
    if reference.is_empty() {
        return Err(Error::InvalidInput("WER needs a non-empty reference".into()));
    }
    let mut out = WerBreakdown {
        reference_len: reference.len(),
        ..Default::default()
    };
    for op in align(reference, hypothesis) {
        match op {
            EditOp::Match { .. } => {}
            EditOp::Substitute { .. } => out.substitutions += 1,
            EditOp::Insert { .. } => out.insertions += 1,
            EditOp::Delete { .. } => out.deletions += 1,
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RtfSample {
    pub wall_seconds: f64,
    pub audio_seconds: f64,
    /// Mean ratio over repetitions.
    pub rtf: f64,
    pub rtf_variance: f64,
    pub repetitions: usize,
}

impl RtfSample {
    pub fn from_runs(walls: &[f64], audio_seconds: f64) -> Result<Self> {
        if !(audio_seconds > 0.0) || walls.is_empty() {
            return Err(Error::InvalidInput("RTF needs positive audio time and at least one run".into()));
        }
        let ratios: Vec<f64> = walls.iter().map(|w| w / audio_seconds).collect();
        let n = ratios.len() as f64;
        let mean = ratios.iter().sum::<f64>() / n;
        let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            wall_seconds: walls.iter().sum::<f64>() / n,
            audio_seconds,
            rtf: mean,
            rtf_variance: var,
            repetitions: walls.len(),
        })
    }
}

/// Time `run` after one untimed warm-up call; at least 3 timed repetitions.
pub fn measure_rtf<F: FnMut() -> Result<()>>(audio_seconds: f64, repetitions: usize, mut run: F) -> Result<RtfSample> {
    run()?;
    let mut walls = Vec::with_capacity(repetitions.max(3));
    for _ in 0..repetitions.max(3) {
        let start = Instant::now();
        run()?;
        walls.push(start.elapsed().as_secs_f64());
    }
    RtfSample::from_runs(&walls, audio_seconds)
}

pub const CSV_HEADER: &str =
    "experiment,emf_ctx_ms,br_vcmd_ms,br_dict_ms,domain_vec,dict_wer,vcmd_wer,vcmd_del,avg_fd_ms,l_avg_ms,rtf";

/// One line of the trade-off report. Context and buffer columns are text so
/// that per-domain values (`120/600`) and `Random` survive unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub emf_ctx_ms: String,
    pub br_vcmd_ms: String,
    pub br_dict_ms: String,
    pub domain_vec: bool,
    pub dict_wer: f64,
    pub vcmd_wer: f64,
    pub vcmd_del: f64,
    pub avg_fd_ms: f64,
    pub l_avg_ms: f64,
    pub rtf: f64,
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Schema(e.to_string())
    }
}

pub fn to_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER.split(','))?;
    for r in rows {
        let nums = [r.dict_wer, r.vcmd_wer, r.vcmd_del, r.avg_fd_ms, r.l_avg_ms, r.rtf].map(|x| x.to_string());
        let yn = if r.domain_vec { "Y" } else { "N" };
        let text = [&r.experiment, &r.emf_ctx_ms, &r.br_vcmd_ms, &r.br_dict_ms].map(String::as_str);
        w.write_record(text.into_iter().chain([yn]).chain(nums.iter().map(String::as_str)))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Schema(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut records = rd.records();
    let header = records.next().transpose()?;
    if header.as_ref().map(|h| h.iter().collect::<Vec<_>>().join(",")) != Some(CSV_HEADER.into()) {
        return Err(Error::Schema(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in records {
        let f = rec?;
        let n = f.position().map_or(0, |p| p.line());
        if f.len() != 11 {
            return Err(Error::Schema(format!("line {n}: {} columns, expected 11", f.len())));
        }
        let num = |i: usize, col: &str| {
            f[i].parse::<f64>()
                .map_err(|_| Error::Schema(format!("line {n}: column {col} is not a number: `{}`", &f[i])))
        };
        let domain_vec = match &f[4] {
            "Y" => true,
            "N" => false,
            other => return Err(Error::Schema(format!("line {n}: domain_vec `{other}`"))),
        };
        rows.push(ReportRow {
            experiment: f[0].into(),
            emf_ctx_ms: f[1].into(),
            br_vcmd_ms: f[2].into(),
            br_dict_ms: f[3].into(),
            domain_vec,
            dict_wer: num(5, "dict_wer")?,
            vcmd_wer: num(6, "vcmd_wer")?,
            vcmd_del: num(7, "vcmd_del")?,
            avg_fd_ms: num(8, "avg_fd_ms")?,
            l_avg_ms: num(9, "l_avg_ms")?,
            rtf: num(10, "rtf")?,
        });
    }
    Ok(rows)
}

/// Labelled scatter plot. Points are drawn in row order.
pub fn scatter_svg(title: &str, x_label: &str, y_label: &str, points: &[(String, f64, f64)]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const M: f64 = 50.0;
    let finite: Vec<&(String, f64, f64)> = points.iter().filter(|p| p.1.is_finite() && p.2.is_finite()).collect();
    let range = |vals: Vec<f64>| {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 1.0, hi + 1.0)
        } else {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        }
    };
    let (x0, x1) = range(finite.iter().map(|p| p.1).collect());
    let (y0, y1) = range(finite.iter().map(|p| p.2).collect());
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title)).unwrap();
    writeln!(s, r#"<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - M, W - M, H - M).unwrap();
    writeln!(s, r#"<line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"#, H - M).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, W / 2.0, H - 12.0, escape(x_label)).unwrap();
    writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    )
    .unwrap();
    for (v, at) in [(x0, sx(x0)), (x1, sx(x1))] {
        writeln!(s, r#"<text x="{at:.1}" y="{}" text-anchor="middle" font-size="10">{v:.3}</text>"#, H - M + 14.0).unwrap();
    }
    for (v, at) in [(y0, sy(y0)), (y1, sy(y1))] {
        writeln!(s, r#"<text x="{}" y="{at:.1}" text-anchor="end" font-size="10">{v:.3}</text>"#, M - 4.0).unwrap();
    }
    for (label, x, y) in finite {
        let (px, py) = (sx(*x), sy(*y));
        writeln!(s, r#"<circle cx="{px:.1}" cy="{py:.1}" r="4" fill="steelblue"/>"#).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#, px + 6.0, py - 6.0, escape(label)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Write the CSV and the two scatter plots (FD vs Dictation WER, RTF vs
/// Dictation WER). The RTF plot goes next to `svg` with an `-rtf` suffix.
pub fn emit_report(rows: &[ReportRow], csv: &Path, svg: &Path) -> Result<()> {
    std::fs::write(csv, to_csv(rows)?)?;
    let fd: Vec<_> = rows.iter().map(|r| (r.experiment.clone(), r.avg_fd_ms, r.dict_wer)).collect();
    std::fs::write(svg, scatter_svg("Dictation WER vs VCmd token finalization delay", "avg_fd_ms", "dict_wer", &fd))?;
    let rtf: Vec<_> = rows.iter().map(|r| (r.experiment.clone(), r.rtf, r.dict_wer)).collect();
    std::fs::write(rtf_svg_path(svg), scatter_svg("Dictation WER vs real time factor", "rtf", "dict_wer", &rtf))?;
    Ok(())
}

pub fn rtf_svg_path(svg: &Path) -> std::path::PathBuf {
    let stem = svg.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    svg.with_file_name(format!("{stem}-rtf.svg"))
}
