//! Chunked greedy decoding, emission timing, and endpointing.
//!
//! Audio arrives in chunks of `center` encoder frames. A chunk can only be
//! encoded once its right context has arrived, so everything emitted while
//! decoding that chunk is stamped with the audio time at that point.

use std::io::Write;

use serde::Serialize;

use crate::corpus::{FRAME_MS, RAW_PER_FRAME, Utterance};
use crate::encoder::{DomainId, StreamingEncoder, stack_features};
use crate::error::{Error, Result};
use crate::lattice::BLANK;
use crate::metrics::{EditOp, WerBreakdown, align, wer};
use crate::model::Transducer;
use crate::predictor::PredictorState;
use crate::tensor::{ParamStore, Tensor};

pub const MAX_SYMBOLS_PER_FRAME: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DecodeConfig {
    /// Base segment the model was trained with (frames).
    pub base_segment: usize,
    /// Inference chunk size (frames).
    pub center: usize,
    pub right_ctx: usize,
    pub left_cap: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EmissionEvent {
    pub token: usize,
    /// Audio consumed when the token first appeared in the partial hypothesis.
    pub time_ms: f64,
    pub t: usize,
    pub u: usize,
}

/// Greedy transducer decode over streaming chunks.
pub fn greedy_streaming_decode(
    model: &Transducer,
    store: &ParamStore,
    features: &Tensor,
    cfg: &DecodeConfig,
    domain: DomainId,
) -> Result<Vec<EmissionEvent>> {
    let enc_cfg = &model.config.encoder;
    let domain_arg = enc_cfg.domain_vector.then_some(domain);
    if features.cols() != enc_cfg.feature_dim {
        return Err(Error::InvalidInput(format!(
            "features have {} dims, model expects {}",
            features.cols(),
            enc_cfg.feature_dim
        )));
    }
    let stacked = stack_features(features, enc_cfg.stack, enc_cfg.stride)?;
    let frame_ms = enc_cfg.frame_ms();
    let mut session = StreamingEncoder::new(
        &model.encoder,
        store,
        cfg.base_segment,
        cfg.center,
        cfg.right_ctx,
        cfg.left_cap,
        domain_arg,
    )?;

    let total = stacked.rows();
    let dim = stacked.cols();
    let width = enc_cfg.width;
    let slice = |a: usize, b: usize| Tensor::matrix(b - a, dim, stacked.data()[a * dim..b * dim].to_vec());

    let mut state = PredictorState::zeros(model.config.predictor.hidden);
    let (g0, s0) = model.predictor.step(store, &state, BLANK)?;
    state = s0;
    let mut pred_proj = model.joiner.project_prediction(store, &g0);
    let mut events = Vec::new();

    let mut start = 0;
    while start < total {
        let end = (start + cfg.center).min(total);
        let right_end = if end - start == cfg.center { (end + cfg.right_ctx).min(total) } else { end };
        let emb = session.step(start, &slice(start, end)?, &slice(end, right_end)?)?;
        let time_ms = right_end as f64 * frame_ms;
        let proj = model.joiner.project_frames(store, emb.data(), end - start);
        let jw = proj.len() / (end - start);
        for (k, frame) in proj.chunks(jw).enumerate() {
            for _ in 0..MAX_SYMBOLS_PER_FRAME {
                let lp = model.joiner.joint(store, frame, &pred_proj);
                let best = argmax(&lp);
                if best == BLANK {
                    break;
                }
                events.push(EmissionEvent {
                    token: best,
                    time_ms,
                    t: start + k,
                    u: events.len(),
                });
                let (g, next) = model.predictor.step(store, &state, best)?;
                state = next;
                pred_proj = model.joiner.project_prediction(store, &g);
            }
        }
        debug_assert_eq!(emb.cols(), width);
        start = end;
    }
    Ok(events)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn hypothesis(events: &[EmissionEvent]) -> Vec<usize> {
    events.iter().map(|e| e.token).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LatencyReport {
    /// Finalization delay of every matched token (ms).
    pub delays: Vec<f64>,
    pub avg_fd_ms: f64,
    /// Decision time minus speech end; `None` when no decision was made.
    pub endpoint_latency_ms: Option<f64>,
    /// Set when the endpointer fired before the true speech end.
    pub early_decision: bool,
}

/// Per-token delays over reference tokens the hypothesis reproduces under the
/// minimal edit alignment. `token_end_ms[k]` is when reference token `k` ends.
pub fn finalization_delay(events: &[EmissionEvent], reference: &[usize], token_end_ms: &[f64]) -> Result<LatencyReport> {
    if reference.is_empty() {
        return Err(Error::InvalidInput("finalization delay needs a non-empty reference".into()));
    }
    if token_end_ms.len() != reference.len() {
        return Err(Error::InvalidInput("one end time per reference token required".into()));
    }
    let delays: Vec<f64> = align(reference, &hypothesis(events))
        .into_iter()
        .filter_map(|op| match op {
            EditOp::Match { reference: r, hypothesis: h } => Some(events[h].time_ms - token_end_ms[r]),
            _ => None,
        })
        .collect();
    let avg_fd_ms = if delays.is_empty() { 0.0 } else { delays.iter().sum::<f64>() / delays.len() as f64 };
    Ok(LatencyReport {
        delays,
        avg_fd_ms,
        ..Default::default()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EndpointDecision {
    pub frame: usize,
    pub time_ms: f64,
    /// Posterior on the deciding frame and the run length that triggered it.
    pub posterior: f64,
    pub run: usize,
}

/// Declares an endpoint after `k` consecutive frames with posterior above `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct Endpointer {
    pub theta: f64,
    pub k: usize,
    pub frame_ms: f64,
    run: usize,
    frame: usize,
    decided: bool,
}

impl Default for Endpointer {
    fn default() -> Self {
        Self::new(0.95, 5, FRAME_MS)
    }
}

impl Endpointer {
    pub fn new(theta: f64, k: usize, frame_ms: f64) -> Self {
        Self {
            theta,
            k: k.max(1),
            frame_ms,
            run: 0,
            frame: 0,
            decided: false,
        }
    }

    /// Feed the posterior of the next frame. Returns a decision at most once.
    pub fn step(&mut self, posterior: f64) -> Option<EndpointDecision> {
        let frame = self.frame;
        self.frame += 1;
        if self.decided {
            return None;
        }
        self.run = if posterior > self.theta { self.run + 1 } else { 0 };
        if self.run >= self.k {
            self.decided = true;
            return Some(EndpointDecision {
                frame,
                time_ms: (frame + 1) as f64 * self.frame_ms,
                posterior,
                run: self.run,
            });
        }
        None
    }
}

/// Mean-energy level below which a frame counts as silence.
const SILENCE_ENERGY: f64 = 0.1;
const SILENCE_SHARPNESS: f64 = 60.0;

/// Fixed acoustic non-speech posterior of one 60 ms frame, from the mean
/// energy of its 10 ms feature frames. Independent of the ASR model.
pub fn silence_posterior(features: &Tensor, frame: usize) -> f64 {
    let lo = frame * RAW_PER_FRAME;
    let hi = ((frame + 1) * RAW_PER_FRAME).min(features.rows());
    if lo >= hi {
        return 1.0;
    }
    let vals = &features.data()[lo * features.cols()..hi * features.cols()];
    let energy = vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64;
    1.0 / (1.0 + (-SILENCE_SHARPNESS * (SILENCE_ENERGY - energy)).exp())
}

/// Run the endpointer over every 60 ms frame of an utterance.
pub fn endpoint(features: &Tensor, endpointer: &mut Endpointer) -> Option<EndpointDecision> {
    let frames = features.rows().div_ceil(RAW_PER_FRAME);
    (0..frames).find_map(|f| endpointer.step(silence_posterior(features, f)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EndpointedResult {
    /// Tokens surfaced no later than the endpoint decision.
    pub hypothesis: Vec<usize>,
    /// Every event of the uncut decode.
    pub events: Vec<EmissionEvent>,
    pub decision: Option<EndpointDecision>,
    pub wer: WerBreakdown,
    /// FD over the uncut decode; endpoint latency from the decision.
    pub latency: LatencyReport,
}

/// Decode with the endpointer: tokens not surfaced by the decision are lost.
pub fn endpointed_decode(
    model: &Transducer,
    store: &ParamStore,
    utt: &Utterance,
    cfg: &DecodeConfig,
    endpointer: &mut Endpointer,
) -> Result<EndpointedResult> {
    let events = greedy_streaming_decode(model, store, &utt.features, cfg, utt.domain)?;
    let decision = endpoint(&utt.features, endpointer);
    cut_at_endpoint(utt, events, decision)
}

/// Apply an endpoint decision to an already decoded event list.
pub fn cut_at_endpoint(utt: &Utterance, events: Vec<EmissionEvent>, decision: Option<EndpointDecision>) -> Result<EndpointedResult> {
    let kept: Vec<usize> = events
        .iter()
        .filter(|e| decision.is_none_or(|d| e.time_ms <= d.time_ms))
        .map(|e| e.token)
        .collect();
    let ends: Vec<f64> = (0..utt.tokens.len()).map(|u| utt.token_end_ms(u)).collect();
    let mut latency = finalization_delay(&events, &utt.tokens, &ends)?;
    if let Some(d) = decision {
        let l = d.time_ms - utt.speech_end_ms;
        latency.endpoint_latency_ms = Some(l);
        latency.early_decision = l < 0.0;
    }
    Ok(EndpointedResult {
        wer: wer(&utt.tokens, &kept)?,
        hypothesis: kept,
        events,
        decision,
        latency,
    })
}

/// Line-delimited emission trace: `{utt, token, emission_ms, t, u}` per event.
pub fn write_trace<W: Write>(out: &mut W, utt_id: &str, events: &[EmissionEvent]) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        utt: &'a str,
        token: usize,
        emission_ms: f64,
        t: usize,
        u: usize,
    }
    for e in events {
        serde_json::to_writer(
            &mut *out,
            &Line {
                utt: utt_id,
                token: e.token,
                emission_ms: e.time_ms,
                t: e.t,
                u: e.u,
            },
        )?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_utterance;
    use crate::model::ModelConfig;

    fn ev(token: usize, time_ms: f64) -> EmissionEvent {
        EmissionEvent { token, time_ms, t: 0, u: 0 }
    }

    #[test]
    fn fd_examples() {
        let r = finalization_delay(&[ev(3, 600.0)], &[3], &[600.0]).unwrap();
        assert_eq!(r.avg_fd_ms, 0.0);
        let r = finalization_delay(&[ev(3, 780.0)], &[3], &[600.0]).unwrap();
        assert_eq!(r.avg_fd_ms, 180.0);
        let r = finalization_delay(&[ev(1, 160.0), ev(2, 320.0), ev(3, 480.0)], &[1, 2, 3], &[100.0, 200.0, 300.0]).unwrap();
        assert_eq!(r.delays, vec![60.0, 120.0, 180.0]);
        assert_eq!(r.avg_fd_ms, 120.0);
        assert!(finalization_delay(&[], &[], &[]).is_err());
    }

    #[test]
    fn fd_skips_unmatched_tokens() {
        let r = finalization_delay(&[ev(1, 100.0), ev(9, 200.0), ev(3, 400.0)], &[1, 2, 3], &[60.0, 120.0, 300.0]).unwrap();
        assert_eq!(r.delays, vec![40.0, 100.0]);
    }

    #[test]
    fn endpointer_counting_rule() {
        let mut ep = Endpointer::default();
        assert!((0..50).all(|_| ep.step(0.5).is_none()));

        let mut ep = Endpointer::default();
        let mut decision = None;
        for f in 0..30 {
            let p = if (20..=24).contains(&f) { 0.99 } else { 0.1 };
            if let Some(d) = ep.step(p) {
                decision = Some(d);
            }
        }
        let d = decision.unwrap();
        assert_eq!(d.frame, 24);
        assert_eq!(d.time_ms, 1500.0);
        assert_eq!(d.time_ms - 1200.0, 300.0);
    }

    #[test]
    fn silence_detector_separates_speech_from_silence() {
        for seed in 0..20 {
            let u = generate_utterance(DomainId::VCmd, seed);
            for f in 0..u.frames() {
                let p = silence_posterior(&u.features, f);
                if f <= u.alignment.end_frame {
                    assert!(p < 0.5, "speech frame {f} posterior {p}");
                } else {
                    assert!(p > 0.95, "silence frame {f} posterior {p}");
                }
            }
            let d = endpoint(&u.features, &mut Endpointer::default()).unwrap();
            assert_eq!(d.time_ms - u.speech_end_ms, 300.0);
        }
    }

    fn tiny_model() -> (Transducer, ParamStore) {
        let mut c = ModelConfig::toy(false);
        c.encoder.layers = 1;
        c.encoder.width = 16;
        c.encoder.heads = 2;
        c.encoder.ffn = 16;
        c.predictor.embed = 8;
        c.predictor.hidden = 8;
        c.predictor.joiner = 8;
        Transducer::new(c, 3).unwrap()
    }

    #[test]
    fn decode_is_deterministic_and_chunk_causal() {
        let (m, store) = tiny_model();
        let u = generate_utterance(DomainId::VCmd, 4);
        let cfg = DecodeConfig {
            base_segment: 5,
            center: 2,
            right_ctx: 1,
            left_cap: Some(20),
        };
        let a = greedy_streaming_decode(&m, &store, &u.features, &cfg, DomainId::VCmd).unwrap();
        let b = greedy_streaming_decode(&m, &store, &u.features, &cfg, DomainId::VCmd).unwrap();
        assert_eq!(a, b);
        let total = u.frames();
        for (i, e) in a.iter().enumerate() {
            let chunk_end = (e.t / 2 * 2 + 2).min(total);
            let avail = if chunk_end - e.t / 2 * 2 == 2 { (chunk_end + 1).min(total) } else { chunk_end };
            assert_eq!(e.time_ms, avail as f64 * 60.0);
            assert!(e.time_ms >= (e.t + 1) as f64 * 60.0);
            assert_eq!(e.u, i);
            if i > 0 {
                assert!(e.time_ms >= a[i - 1].time_ms);
            }
        }
        // Per-frame cap bounds the total.
        assert!(a.len() <= total * MAX_SYMBOLS_PER_FRAME);
    }

    #[test]
    fn decode_rejects_mismatched_config() {
        let (m, store) = tiny_model();
        let u = generate_utterance(DomainId::VCmd, 4);
        let bad = DecodeConfig {
            base_segment: 2,
            center: 5,
            right_ctx: 1,
            left_cap: None,
        };
        assert!(greedy_streaming_decode(&m, &store, &u.features, &bad, DomainId::VCmd).is_err());
        let short = Tensor::zeros(vec![12, 3]);
        let ok = DecodeConfig { base_segment: 2, center: 2, right_ctx: 0, left_cap: None };
        assert!(greedy_streaming_decode(&m, &store, &short, &ok, DomainId::VCmd).is_err());
    }

    #[test]
    fn truncation_rules() {
        let u = generate_utterance(DomainId::VCmd, 9);
        let n = u.tokens.len();
        let events: Vec<_> = u
            .tokens
            .iter()
            .enumerate()
            .map(|(k, &t)| EmissionEvent { token: t, time_ms: u.token_end_ms(k) + 120.0, t: u.alignment.frames[k], u: k })
            .collect();
        let late = EndpointDecision { frame: 1000, time_ms: 1e9, posterior: 1.0, run: 5 };
        let full = cut_at_endpoint(&u, events.clone(), Some(late)).unwrap();
        assert_eq!(full.hypothesis, u.tokens);
        assert_eq!(full.wer.errors(), 0);

        let cut_time = events[n - 1].time_ms - 60.0;
        let early = EndpointDecision { frame: 0, time_ms: cut_time, posterior: 1.0, run: 5 };
        let cut = cut_at_endpoint(&u, events.clone(), Some(early)).unwrap();
        assert_eq!(cut.hypothesis, u.tokens[..n - 1].to_vec());
        assert_eq!(cut.wer.deletions, 1);
        assert_eq!(cut.latency.endpoint_latency_ms, Some(60.0));
        assert!(!cut.latency.early_decision);
        let before = EndpointDecision { frame: 0, time_ms: u.speech_end_ms - 60.0, posterior: 1.0, run: 5 };
        assert!(cut_at_endpoint(&u, events.clone(), Some(before)).unwrap().latency.early_decision);

        // Earlier endpoints never add tokens.
        let mut prev = usize::MAX;
        for k in (0..=20).rev() {
            let d = EndpointDecision { frame: 0, time_ms: k as f64 * 60.0, posterior: 1.0, run: 5 };
            let len = cut_at_endpoint(&u, events.clone(), Some(d)).unwrap().hypothesis.len();
            assert!(len <= prev);
            prev = len;
        }
    }

    #[test]
    fn trace_lines() {
        let mut buf = Vec::new();
        write_trace(&mut buf, "x", &[ev(4, 120.0), ev(5, 180.0)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with(r#"{"utt":"x","token":4,"emission_ms":120.0,"t":0,"u":0}"#));
    }
}
