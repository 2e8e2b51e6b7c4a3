//! Training loop, evaluation, and sweeps over registry experiments.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Utterance, make_batches};
use crate::encoder::{ContextPlan, DomainId, plan_contexts, stack_features};
use crate::error::{Error, Result};
use crate::lattice::RestrictionBand;
use crate::metrics::{ReportRow, RtfSample, WerBreakdown, emit_report, measure_rtf, wer};
use crate::model::{ModelConfig, Transducer, dense_grads};
use crate::registry::ExperimentConfig;
use crate::runtime::{DecodeConfig, Endpointer, cut_at_endpoint, endpoint, greedy_streaming_decode, hypothesis};
use crate::tensor::{AdamConfig, AdamState, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub right_ctx: usize,
    pub left_cap: Option<usize>,
    pub dropout: f64,
    /// Utterances per domain used for the before/after probe loss.
    pub probe_per_domain: usize,
    /// Dictation utterances timed for RTF.
    pub rtf_utterances: usize,
    pub rtf_repetitions: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 8,
            lr: 3e-3,
            warmup_steps: 200,
            right_ctx: 1,
            left_cap: Some(20),
            dropout: 0.1,
            probe_per_domain: 16,
            rtf_utterances: 20,
            rtf_repetitions: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_seconds: f64,
    /// Utterances whose band admitted no path.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial_probe_loss: f64,
    pub final_probe_loss: f64,
    pub epochs: Vec<EpochSummary>,
    pub steps: usize,
}

/// Seed for an experiment's private RNG stream.
pub fn experiment_seed(seed: u64, name: &str) -> u64 {
    name.bytes().fold(seed ^ 0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// What the training loop chose for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BatchSetup {
    pub domain: DomainId,
    pub center: usize,
    pub base_segment: usize,
    pub domain_vector: bool,
    pub br_frames: usize,
}

pub fn batch_setup(exp: &ExperimentConfig, domain: DomainId, frame_ms: f64, rng: &mut ChaCha8Rng) -> BatchSetup {
    let centers = exp.train_centers(domain, frame_ms);
    let center = if centers.len() == 1 { centers[0] } else { centers[rng.gen_range(0..centers.len())] };
    BatchSetup {
        domain,
        center,
        base_segment: exp.base_segment(frame_ms),
        domain_vector: exp.domain_vector,
        br_frames: crate::lattice::ms_to_frames(exp.br_ms(domain), frame_ms),
    }
}

fn utterance_inputs(
    model: &Transducer,
    exp: &ExperimentConfig,
    hyper: &TrainHyper,
    utt: &Utterance,
    center: usize,
    base: usize,
) -> Result<(crate::tensor::Tensor, ContextPlan, RestrictionBand)> {
    let enc = &model.config.encoder;
    let stacked = stack_features(&utt.features, enc.stack, enc.stride)?;
    let t = stacked.rows();
    let plan = plan_contexts(t, base, center, hyper.right_ctx, hyper.left_cap)?;
    let band = RestrictionBand::build(&utt.alignment, exp.bl_ms, exp.br_ms(utt.domain), enc.frame_ms(), t)?;
    Ok((stacked, plan, band))
}

fn probe_set(corpus: &[Utterance], per_domain: usize) -> Vec<usize> {
    DomainId::ALL
        .iter()
        .flat_map(|&d| corpus.iter().enumerate().filter(move |(_, u)| u.domain == d).take(per_domain).map(|(i, _)| i))
        .collect()
}

/// Mean eval-mode loss over the probe utterances at each domain's inference center.
fn probe_loss(model: &Transducer, store: &ParamStore, exp: &ExperimentConfig, hyper: &TrainHyper, corpus: &[Utterance], probe: &[usize]) -> Result<f64> {
    let frame_ms = model.frame_ms();
    let mut total = 0.0;
    for &i in probe {
        let u = &corpus[i];
        let (x, plan, band) = utterance_inputs(model, exp, hyper, u, exp.infer_center(u.domain, frame_ms), exp.base_segment(frame_ms))?;
        let dom = exp.domain_vector.then_some(u.domain);
        total += model.loss(store, &x, &u.tokens, &plan, dom, Some(&band))?;
    }
    Ok(total / probe.len().max(1) as f64)
}

pub fn model_config(exp: &ExperimentConfig, hyper: &TrainHyper) -> ModelConfig {
    let mut c = ModelConfig::toy(exp.domain_vector);
    c.encoder.dropout = hyper.dropout;
    c
}

/// Train a fresh model for `exp`. `on_epoch` sees one summary per epoch.
pub fn train(
    exp: &ExperimentConfig,
    corpus: &[Utterance],
    hyper: &TrainHyper,
    seed: u64,
    on_epoch: impl FnMut(&EpochSummary),
) -> Result<(Transducer, ParamStore, TrainLog)> {
    train_observed(exp, corpus, hyper, seed, on_epoch, |_, _| {})
}

/// [`train`], also reporting every batch's setup and member utterances.
pub fn train_observed(
    exp: &ExperimentConfig,
    corpus: &[Utterance],
    hyper: &TrainHyper,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochSummary),
    mut on_batch: impl FnMut(&BatchSetup, &[usize]),
) -> Result<(Transducer, ParamStore, TrainLog)> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("training corpus is empty".into()));
    }
    let stream = experiment_seed(seed, &exp.name);
    let (model, mut store) = Transducer::new(model_config(exp, hyper), stream)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream ^ 0x7261_6e64);
    let frame_ms = model.frame_ms();
    let probe = probe_set(corpus, hyper.probe_per_domain);
    let initial_probe_loss = probe_loss(&model, &store, exp, hyper, corpus, &probe)?;

    let adam_cfg = AdamConfig {
        lr: hyper.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(&store);
    let mut epochs = Vec::with_capacity(hyper.epochs);
    let mut step = 0usize;
    for epoch in 0..hyper.epochs {
        let start = Instant::now();
        let batches = make_batches(corpus, hyper.batch_size, rng.r#gen())?;
        let (mut loss_sum, mut count, mut skipped) = (0.0, 0usize, 0usize);
        for batch in &batches {
            let setup = batch_setup(exp, batch.domain, frame_ms, &mut rng);
            on_batch(&setup, &batch.members);
            let mut acc: Option<Vec<Vec<f64>>> = None;
            let mut used = 0usize;
            let mut batch_loss = 0.0;
            for &i in &batch.members {
                let u = &corpus[i];
                let (x, plan, band) = utterance_inputs(&model, exp, hyper, u, setup.center, setup.base_segment)?;
                if band.check_feasible(u.tokens.len()).is_err() {
                    skipped += 1;
                    continue;
                }
                let dom = exp.domain_vector.then_some(u.domain);
                let out = model.loss_and_grads(&store, &x, &u.tokens, &plan, dom, Some(&band), Some(&mut rng))?;
                if !out.loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        loss: out.loss,
                    });
                }
                batch_loss += out.loss;
                let g = dense_grads(&store, &out.grads);
                match acc.as_mut() {
                    None => acc = Some(g),
                    Some(a) => {
                        for (dst, src) in a.iter_mut().zip(&g) {
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                }
                used += 1;
            }
            let Some(mut grads) = acc else { continue };
            let scale = 1.0 / used as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
            let lr = hyper.lr * ((step + 1) as f64 / hyper.warmup_steps.max(1) as f64).min(1.0);
            adam.step(&mut store, &grads, &adam_cfg, lr).map_err(|e| match e {
                Error::NonFiniteGradient(_) => Error::Diverged {
                    epoch,
                    step,
                    loss: batch_loss / used as f64,
                },
                other => other,
            })?;
            step += 1;
            loss_sum += batch_loss;
            count += used;
        }
        let summary = EpochSummary {
            epoch: epoch + 1,
            mean_loss: loss_sum / count.max(1) as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
            skipped,
        };
        on_epoch(&summary);
        epochs.push(summary);
    }
    let final_probe_loss = probe_loss(&model, &store, exp, hyper, corpus, &probe)?;
    Ok((
        model,
        store,
        TrainLog {
            initial_probe_loss,
            final_probe_loss,
            epochs,
            steps: step,
        },
    ))
}

pub fn decode_config(exp: &ExperimentConfig, hyper: &TrainHyper, domain: DomainId, frame_ms: f64) -> DecodeConfig {
    DecodeConfig {
        base_segment: exp.base_segment(frame_ms),
        center: exp.infer_center(domain, frame_ms),
        right_ctx: hyper.right_ctx,
        left_cap: hyper.left_cap,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEval {
    pub domain: DomainId,
    pub utterances: usize,
    pub wer: WerBreakdown,
    /// WER without endpoint truncation (equals `wer` for Dictation).
    pub uncut_wer: WerBreakdown,
    pub avg_fd_ms: f64,
    pub matched_tokens: usize,
    pub l_avg_ms: f64,
    pub early_decisions: usize,
}

/// Decode one domain's utterances; VCmd goes through the endpointer.
pub fn evaluate_domain(model: &Transducer, store: &ParamStore, cfg: &DecodeConfig, utts: &[&Utterance], with_endpointer: bool) -> Result<DomainEval> {
    let domain = utts.first().map_or(DomainId::VCmd, |u| u.domain);
    let mut out = DomainEval {
        domain,
        utterances: utts.len(),
        wer: WerBreakdown::default(),
        uncut_wer: WerBreakdown::default(),
        avg_fd_ms: 0.0,
        matched_tokens: 0,
        l_avg_ms: 0.0,
        early_decisions: 0,
    };
    let (mut fd_sum, mut l_sum, mut l_count) = (0.0, 0.0, 0usize);
    for u in utts {
        let events = greedy_streaming_decode(model, store, &u.features, cfg, u.domain)?;
        out.uncut_wer.accumulate(&wer(&u.tokens, &hypothesis(&events))?);
        let decision = if with_endpointer { endpoint(&u.features, &mut Endpointer::default()) } else { None };
        let r = cut_at_endpoint(u, events, decision)?;
        out.wer.accumulate(&r.wer);
        fd_sum += r.latency.delays.iter().sum::<f64>();
        out.matched_tokens += r.latency.delays.len();
        if let Some(l) = r.latency.endpoint_latency_ms {
            l_sum += l;
            l_count += 1;
        }
        out.early_decisions += usize::from(r.latency.early_decision);
    }
    out.avg_fd_ms = if out.matched_tokens > 0 { fd_sum / out.matched_tokens as f64 } else { 0.0 };
    out.l_avg_ms = if l_count > 0 { l_sum / l_count as f64 } else { 0.0 };
    Ok(out)
}

/// Wall-clock RTF of streaming decode over `utts` (encoder plus search).
pub fn decode_rtf(model: &Transducer, store: &ParamStore, cfg: &DecodeConfig, utts: &[&Utterance], repetitions: usize) -> Result<RtfSample> {
    let audio: f64 = utts.iter().map(|u| u.audio_ms()).sum::<f64>() / 1000.0;
    measure_rtf(audio, repetitions, || {
        for u in utts {
            greedy_streaming_decode(model, store, &u.features, cfg, u.domain)?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub experiment: ExperimentConfig,
    pub dictation: DomainEval,
    pub vcmd: DomainEval,
    pub rtf: RtfSample,
    pub train: TrainLog,
}

impl SweepResult {
    pub fn report_row(&self) -> ReportRow {
        let e = &self.experiment;
        ReportRow {
            experiment: e.name.clone(),
            emf_ctx_ms: e.emf_ctx_text(),
            br_vcmd_ms: format!("{}", e.br_vcmd_ms),
            br_dict_ms: format!("{}", e.br_dict_ms),
            domain_vec: e.domain_vector,
            dict_wer: self.dictation.wer.wer(),
            vcmd_wer: self.vcmd.wer.wer(),
            vcmd_del: self.vcmd.wer.del(),
            avg_fd_ms: self.vcmd.avg_fd_ms,
            l_avg_ms: self.vcmd.l_avg_ms,
            rtf: self.rtf.rtf,
        }
    }
}

/// Evaluate a trained model: Dictation without endpointer, VCmd with it.
pub fn evaluate(model: &Transducer, store: &ParamStore, exp: &ExperimentConfig, hyper: &TrainHyper, eval: &[Utterance]) -> Result<(DomainEval, DomainEval, RtfSample)> {
    let frame_ms = model.frame_ms();
    let pick = |d: DomainId| eval.iter().filter(move |u| u.domain == d).collect::<Vec<_>>();
    let (dict, vcmd) = (pick(DomainId::Dictation), pick(DomainId::VCmd));
    if dict.is_empty() || vcmd.is_empty() {
        return Err(Error::InvalidInput("evaluation set needs both domains".into()));
    }
    let dcfg = decode_config(exp, hyper, DomainId::Dictation, frame_ms);
    let d = evaluate_domain(model, store, &dcfg, &dict, false)?;
    let v = evaluate_domain(model, store, &decode_config(exp, hyper, DomainId::VCmd, frame_ms), &vcmd, true)?;
    let timed: Vec<&Utterance> = dict.iter().copied().take(hyper.rtf_utterances.max(1)).collect();
    let rtf = decode_rtf(model, store, &dcfg, &timed, hyper.rtf_repetitions)?;
    Ok((d, v, rtf))
}

pub fn run_experiment(
    exp: &ExperimentConfig,
    train_corpus: &[Utterance],
    eval_corpus: &[Utterance],
    hyper: &TrainHyper,
    seed: u64,
    on_epoch: impl FnMut(&EpochSummary),
) -> Result<(SweepResult, Transducer, ParamStore)> {
    let (model, store, log) = train(exp, train_corpus, hyper, seed, on_epoch)?;
    let (dictation, vcmd, rtf) = evaluate(&model, &store, exp, hyper, eval_corpus)?;
    Ok((
        SweepResult {
            experiment: exp.clone(),
            dictation,
            vcmd,
            rtf,
            train: log,
        },
        model,
        store,
    ))
}

/// Run every named experiment (sorted by name) and write the report files.
pub fn run_sweep(
    names: &[String],
    train_corpus: &[Utterance],
    eval_corpus: &[Utterance],
    hyper: &TrainHyper,
    seed: u64,
    out_dir: &Path,
    mut progress: impl FnMut(&str, &EpochSummary),
) -> Result<Vec<SweepResult>> {
    let mut sorted: Vec<String> = names.iter().map(|n| crate::registry::registry(n).map(|c| c.name)).collect::<Result<_>>()?;
    sorted.sort();
    sorted.dedup();
    std::fs::create_dir_all(out_dir)?;
    let mut results = Vec::with_capacity(sorted.len());
    for name in &sorted {
        let exp = crate::registry::registry(name)?;
        let (res, model, store) = run_experiment(&exp, train_corpus, eval_corpus, hyper, seed, |s| progress(name, s))?;
        let run = serde_json::json!({ "experiment": exp, "hyper": hyper });
        model.save(&out_dir.join(format!("{name}.ckpt")), &store, Some(&run))?;
        std::fs::write(out_dir.join(format!("{name}.json")), serde_json::to_string_pretty(&res)?)?;
        results.push(res);
    }
    let rows: Vec<ReportRow> = results.iter().map(SweepResult::report_row).collect();
    emit_report(&rows, &out_dir.join("report.csv"), &out_dir.join("report.svg"))?;
    Ok(results)
}
