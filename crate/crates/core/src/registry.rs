//! The fourteen experiment configurations and their published result rows.

use serde::{Deserialize, Serialize};

use crate::encoder::DomainId;
use crate::error::{Error, Result};
use crate::lattice::ms_to_frames;
use crate::metrics::ReportRow;

pub const NAMES: [&str; 14] = [
    "B1", "B2", "B3", "C2", "C3", "D1", "D2", "D3", "E2", "E3", "R1", "R2", "S1", "S2",
];

/// Fixed left buffer of the alignment restriction (ms).
pub const LEFT_BUFFER_MS: f64 = 300.0;
pub const RANDOM_MIN_MS: f64 = 120.0;
pub const RANDOM_MAX_MS: f64 = 1200.0;

/// Training-time encoder center size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TrainContext {
    Fixed(f64),
    PerDomain { vcmd: f64, dictation: f64 },
    /// Uniform over the 60 ms grid between the bounds, drawn per batch.
    Random { min: f64, max: f64 },
}

/// Values as published, for re-encoding through the report schema.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaperRow {
    pub dict_wer: f64,
    pub vcmd_wer: f64,
    pub vcmd_del: f64,
    pub avg_fd_ms: f64,
    pub l_avg_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub context: TrainContext,
    pub br_vcmd_ms: f64,
    pub br_dict_ms: f64,
    pub bl_ms: f64,
    pub domain_vector: bool,
    pub infer_vcmd_ms: f64,
    pub infer_dict_ms: f64,
    pub paper: PaperRow,
}

fn row(dict_wer: f64, vcmd_wer: f64, vcmd_del: f64, avg_fd_ms: f64, l_avg_ms: f64) -> PaperRow {
    PaperRow {
        dict_wer,
        vcmd_wer,
        vcmd_del,
        avg_fd_ms,
        l_avg_ms,
    }
}

fn fixed(name: &str, ctx: f64, br_v: f64, br_d: f64, dvec: bool, paper: PaperRow) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        context: TrainContext::Fixed(ctx),
        br_vcmd_ms: br_v,
        br_dict_ms: br_d,
        bl_ms: LEFT_BUFFER_MS,
        domain_vector: dvec,
        infer_vcmd_ms: ctx,
        infer_dict_ms: ctx,
        paper,
    }
}

fn combined(name: &str, context: TrainContext, dvec: bool, paper: PaperRow) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        context,
        br_vcmd_ms: 420.0,
        br_dict_ms: 900.0,
        bl_ms: LEFT_BUFFER_MS,
        domain_vector: dvec,
        infer_vcmd_ms: 120.0,
        infer_dict_ms: 600.0,
        paper,
    }
}

pub fn registry(name: &str) -> Result<ExperimentConfig> {
    let random = TrainContext::Random {
        min: RANDOM_MIN_MS,
        max: RANDOM_MAX_MS,
    };
    let per_domain = TrainContext::PerDomain {
        vcmd: 120.0,
        dictation: 600.0,
    };
    Ok(match name.to_ascii_uppercase().as_str() {
        "B1" => fixed("B1", 120.0, 420.0, 420.0, false, row(15.4, 6.7, 2.8, 148.0, 449.0)),
        "B2" => fixed("B2", 300.0, 600.0, 600.0, false, row(13.8, 7.4, 3.6, 272.0, 463.0)),
        "B3" => fixed("B3", 600.0, 900.0, 900.0, false, row(13.2, 9.7, 5.4, 470.0, 505.0)),
        "C2" => fixed("C2", 300.0, 420.0, 600.0, false, row(13.7, 7.5, 3.6, 271.0, 482.0)),
        "C3" => fixed("C3", 600.0, 420.0, 900.0, false, row(13.2, 10.8, 6.4, 483.0, 548.0)),
        "D1" => fixed("D1", 120.0, 420.0, 420.0, true, row(14.0, 6.8, 2.9, 159.0, 441.0)),
        "D2" => fixed("D2", 300.0, 600.0, 600.0, true, row(12.8, 7.7, 3.8, 297.0, 464.0)),
        "D3" => fixed("D3", 600.0, 900.0, 900.0, true, row(12.4, 10.5, 6.2, 543.0, 509.0)),
        "E2" => fixed("E2", 300.0, 420.0, 600.0, true, row(12.8, 7.23, 3.28, 263.0, 457.0)),
        "E3" => fixed("E3", 600.0, 420.0, 900.0, true, row(12.5, 9.6, 5.7, 464.0, 476.0)),
        "R1" => combined("R1", random, false, row(13.6, 7.2, 3.1, 173.0, 440.0)),
        "R2" => combined("R2", random, true, row(12.7, 7.1, 3.1, 167.0, 440.0)),
        "S1" => combined("S1", per_domain, false, row(12.5, 7.7, 3.3, 185.0, 458.0)),
        "S2" => combined("S2", per_domain, true, row(12.6, 7.0, 2.9, 157.0, 450.0)),
        _ => {
            return Err(Error::UnknownExperiment {
                name: name.into(),
                valid: NAMES.join(", "),
            });
        }
    })
}

/// Parse a comma-separated list of names, rejecting unknown ones.
pub fn parse_names(list: &str) -> Result<Vec<String>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| registry(s).map(|c| c.name))
        .collect()
}

fn ms_text(ms: f64) -> String {
    format!("{ms}")
}

impl ExperimentConfig {
    pub fn br_ms(&self, domain: DomainId) -> f64 {
        match domain {
            DomainId::VCmd => self.br_vcmd_ms,
            DomainId::Dictation => self.br_dict_ms,
        }
    }

    pub fn infer_ms(&self, domain: DomainId) -> f64 {
        match domain {
            DomainId::VCmd => self.infer_vcmd_ms,
            DomainId::Dictation => self.infer_dict_ms,
        }
    }

    /// Largest center the model ever sees; shorter centers are cut from
    /// windows of this length by context altering.
    pub fn base_segment(&self, frame_ms: f64) -> usize {
        let ms = match self.context {
            TrainContext::Fixed(c) => c,
            TrainContext::PerDomain { vcmd, dictation } => vcmd.max(dictation),
            TrainContext::Random { max, .. } => max,
        };
        ms_to_frames(ms, frame_ms).max(1)
    }

    /// Candidate training centers (frames) for a batch of this domain.
    pub fn train_centers(&self, domain: DomainId, frame_ms: f64) -> Vec<usize> {
        match self.context {
            TrainContext::Fixed(c) => vec![ms_to_frames(c, frame_ms).max(1)],
            TrainContext::PerDomain { vcmd, dictation } => {
                let c = if domain == DomainId::VCmd { vcmd } else { dictation };
                vec![ms_to_frames(c, frame_ms).max(1)]
            }
            TrainContext::Random { min, max } => {
                (ms_to_frames(min, frame_ms).max(1)..=ms_to_frames(max, frame_ms)).collect()
            }
        }
    }

    pub fn infer_center(&self, domain: DomainId, frame_ms: f64) -> usize {
        ms_to_frames(self.infer_ms(domain), frame_ms).max(1)
    }

    pub fn emf_ctx_text(&self) -> String {
        match self.context {
            TrainContext::Fixed(c) => ms_text(c),
            TrainContext::PerDomain { vcmd, dictation } => format!("{}/{}", ms_text(vcmd), ms_text(dictation)),
            TrainContext::Random { .. } => "Random".into(),
        }
    }

    /// The published numbers in the report schema (RTF was not tabled).
    pub fn paper_report_row(&self) -> ReportRow {
        ReportRow {
            experiment: self.name.clone(),
            emf_ctx_ms: self.emf_ctx_text(),
            br_vcmd_ms: ms_text(self.br_vcmd_ms),
            br_dict_ms: ms_text(self.br_dict_ms),
            domain_vec: self.domain_vector,
            dict_wer: self.paper.dict_wer,
            vcmd_wer: self.paper.vcmd_wer,
            vcmd_del: self.paper.vcmd_del,
            avg_fd_ms: self.paper.avg_fd_ms,
            l_avg_ms: self.paper.l_avg_ms,
            rtf: f64::NAN,
        }
    }

    /// Apply `key=value` overrides, one per line; `#` starts a comment.
    pub fn apply_overrides(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("override line {}: expected key=value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let num = || {
                value
                    .parse::<f64>()
                    .ok()
                    .filter(|v| *v > 0.0)
                    .ok_or_else(|| Error::InvalidInput(format!("override {key}: `{value}` is not a positive number")))
            };
            match key {
                "br_vcmd_ms" => self.br_vcmd_ms = num()?,
                "br_dict_ms" => self.br_dict_ms = num()?,
                "bl_ms" => self.bl_ms = num()?,
                "infer_vcmd_ms" => self.infer_vcmd_ms = num()?,
                "infer_dict_ms" => self.infer_dict_ms = num()?,
                "domain_vector" => {
                    self.domain_vector = value
                        .parse()
                        .map_err(|_| Error::InvalidInput(format!("override domain_vector: `{value}`")))?
                }
                other => return Err(Error::InvalidInput(format!("unknown override key `{other}`"))),
            }
        }
        Ok(())
    }
}
