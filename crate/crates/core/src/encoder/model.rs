use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ContextPlan, DomainId, DomainVector, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, dropout_mask};
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor, gemm};

#[derive(Debug, Clone, PartialEq)]
pub(super) struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub qkv: Linear,
    pub out: Linear,
    pub norm_ffn: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub(super) frontend: Linear,
    pub(super) positions: ParamId,
    pub(super) layers: Vec<EncoderLayer>,
    pub(super) final_norm: LayerNorm,
}

impl Encoder {
    pub fn new(config: EncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let frontend = Linear::new(store, "enc.frontend", config.stacked_dim(), w, rng);
        let normal = Normal::new(0.0, 0.02).expect("valid sigma");
        let pos = (0..config.max_positions * w).map(|_| normal.sample(rng)).collect();
        let positions = store.add("enc.positions", Tensor::matrix(config.max_positions, w, pos)?);
        let extra = if config.domain_vector { DomainVector::LEN } else { 0 };
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("enc.layer{l}");
                EncoderLayer {
                    norm_attn: LayerNorm::new(store, &format!("{p}.norm_attn"), w),
                    qkv: Linear::new(store, &format!("{p}.qkv"), w + extra, 3 * w, rng),
                    out: Linear::new(store, &format!("{p}.out"), w, w, rng),
                    norm_ffn: LayerNorm::new(store, &format!("{p}.norm_ffn"), w),
                    ff_in: Linear::new(store, &format!("{p}.ff_in"), w, config.ffn, rng),
                    ff_out: Linear::new(store, &format!("{p}.ff_out"), config.ffn, w, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(store, "enc.final_norm", w);
        Ok(Self {
            config,
            frontend,
            positions,
            layers,
            final_norm,
        })
    }

    pub(super) fn check_domain(&self, domain: Option<DomainId>) -> Result<()> {
        match (self.config.domain_vector, domain) {
            (true, None) => Err(Error::InvalidInput("encoder expects a domain vector".into())),
            (false, Some(_)) => Err(Error::InvalidInput(
                "domain vector supplied but the encoder was built without one".into(),
            )),
            _ => Ok(()),
        }
    }

    fn head_dim(&self) -> usize {
        self.config.width / self.config.heads
    }

    /// Masked full-utterance forward. `stacked` is `T × stacked_dim`; the
    /// result node is `T × width`. Passing a dropout RNG enables training mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        stacked: &Tensor,
        plan: &ContextPlan,
        domain: Option<DomainId>,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        self.check_domain(domain)?;
        let cfg = &self.config;
        if stacked.shape().len() != 2 || stacked.cols() != cfg.stacked_dim() || stacked.rows() != plan.frames {
            return Err(Error::InvalidInput(format!(
                "encoder input {:?} does not match plan of {} frames × {} dims",
                stacked.shape(),
                plan.frames,
                cfg.stacked_dim()
            )));
        }
        let mask = plan.attention_mask();
        let n = mask.rows();
        let rows = &mask.row_frames;
        let positions: Vec<usize> = rows.iter().map(|&f| f % cfg.max_positions).collect();

        let feats = g.input(stacked.clone());
        let x = g.gather(feats, rows)?;
        let h = self.frontend.forward(g, store, x)?;
        let pos_table = g.param(store, self.positions);
        let pos = g.gather(pos_table, &positions)?;
        let mut h = g.add(h, pos)?;

        let keys = mask.key_lists();
        let scale = 1.0 / (self.head_dim() as f64).sqrt();
        let dvec = match domain {
            Some(d) if cfg.domain_vector => {
                let one_hot = d.vector().one_hot();
                let data = (0..n).flat_map(|_| one_hot).collect();
                Some(g.input(Tensor::matrix(n, DomainVector::LEN, data)?))
            }
            _ => None,
        };

        for layer in &self.layers {
            let a = layer.norm_attn.forward(g, store, h)?;
            let a = match dvec {
                Some(dv) => g.concat(&[a, dv], 1)?,
                None => a,
            };
            let qkv = layer.qkv.forward(g, store, a)?;
            let attn = g.masked_attention(qkv, cfg.heads, &keys, scale)?;
            let w = cfg.width;
            let mut o = layer.out.forward(g, store, attn)?;
            if let Some(rng) = dropout.as_deref_mut() {
                o = apply_dropout(g, o, n, w, cfg.dropout, rng)?;
            }
            h = g.add(h, o)?;

            let b = layer.norm_ffn.forward(g, store, h)?;
            let f = layer.ff_in.forward(g, store, b)?;
            let f = g.relu(f);
            let mut f = layer.ff_out.forward(g, store, f)?;
            if let Some(rng) = dropout.as_deref_mut() {
                f = apply_dropout(g, f, n, w, cfg.dropout, rng)?;
            }
            h = g.add(h, f)?;
        }
        let h = self.final_norm.forward(g, store, h)?;
        g.slice(h, 0, 0, plan.frames)
    }

    /// Convenience wrapper returning the `T × width` embeddings in eval mode.
    pub fn embed(&self, store: &ParamStore, stacked: &Tensor, plan: &ContextPlan, domain: Option<DomainId>) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, stacked, plan, domain, None)?;
        Ok(g.value(out).clone())
    }

    /// Pre-layer hidden rows for stacked input rows at the given frames.
    pub(super) fn frontend_rows(&self, store: &ParamStore, stacked_rows: &[f64], frames: &[usize]) -> Vec<f64> {
        let w = self.config.width;
        let mut h = self.frontend.apply(store, stacked_rows, frames.len());
        let pos = store.get(self.positions);
        for (r, &f) in frames.iter().enumerate() {
            let p = pos.row_slice(f % self.config.max_positions);
            for j in 0..w {
                h[r * w + j] += p[j];
            }
        }
        h
    }

    /// Key/value projections for layer-input rows (tape-free).
    pub(super) fn layer_kv(&self, layer: usize, store: &ParamStore, x: &[f64], domain: Option<DomainId>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let w = self.config.width;
        let rows = x.len() / w;
        let l = &self.layers[layer];
        let mut a = l.norm_attn.apply(store, x);
        if let Some(d) = domain.filter(|_| self.config.domain_vector) {
            let oh = d.vector().one_hot();
            let mut widened = Vec::with_capacity(rows * (w + DomainVector::LEN));
            for r in 0..rows {
                widened.extend_from_slice(&a[r * w..(r + 1) * w]);
                widened.extend_from_slice(&oh);
            }
            a = widened;
        }
        let qkv = l.qkv.apply(store, &a, rows);
        let mut q = Vec::with_capacity(rows * w);
        let mut k = Vec::with_capacity(rows * w);
        let mut v = Vec::with_capacity(rows * w);
        for r in 0..rows {
            let row = &qkv[r * 3 * w..(r + 1) * 3 * w];
            q.extend_from_slice(&row[..w]);
            k.extend_from_slice(&row[w..2 * w]);
            v.extend_from_slice(&row[2 * w..]);
        }
        (q, k, v)
    }

    /// Finish a layer for query rows `x` given their queries and the full key
    /// and value rows they may attend to (tape-free).
    pub(super) fn layer_finish(&self, layer: usize, store: &ParamStore, x: &[f64], q: &[f64], keys: &[f64], values: &[f64]) -> Vec<f64> {
        let w = self.config.width;
        let dh = self.head_dim();
        let nq = x.len() / w;
        let nk = keys.len() / w;
        let l = &self.layers[layer];
        let scale = 1.0 / (dh as f64).sqrt();

        let mut attn = vec![0.0; nq * w];
        let mut qh = vec![0.0; nq * dh];
        let mut kh = vec![0.0; nk * dh];
        let mut vh = vec![0.0; nk * dh];
        let mut scores = vec![0.0; nq * nk];
        let mut out_h = vec![0.0; nq * dh];
        for head in 0..self.config.heads {
            let off = head * dh;
            for r in 0..nq {
                qh[r * dh..(r + 1) * dh].copy_from_slice(&q[r * w + off..r * w + off + dh]);
            }
            for r in 0..nk {
                kh[r * dh..(r + 1) * dh].copy_from_slice(&keys[r * w + off..r * w + off + dh]);
                vh[r * dh..(r + 1) * dh].copy_from_slice(&values[r * w + off..r * w + off + dh]);
            }
            gemm(&qh, &kh, &mut scores, nq, dh, nk, false, true, 0.0);
            for row in scores.chunks_mut(nk) {
                row.iter_mut().for_each(|s| *s *= scale);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                row.iter_mut().for_each(|s| *s /= total);
            }
            gemm(&scores, &vh, &mut out_h, nq, nk, dh, false, false, 0.0);
            for r in 0..nq {
                attn[r * w + off..r * w + off + dh].copy_from_slice(&out_h[r * dh..(r + 1) * dh]);
            }
        }
        let o = l.out.apply(store, &attn, nq);
        let h: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
        let b = l.norm_ffn.apply(store, &h);
        let mut f = l.ff_in.apply(store, &b, nq);
        f.iter_mut().for_each(|v| *v = v.max(0.0));
        let f = l.ff_out.apply(store, &f, nq);
        h.iter().zip(&f).map(|(a, b)| a + b).collect()
    }

    pub(super) fn finish(&self, store: &ParamStore, h: &[f64]) -> Vec<f64> {
        self.final_norm.apply(store, h)
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Deterministic default initialisation from a seed.
    pub fn seeded(config: EncoderConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        Self::new(config, store, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}

fn apply_dropout(g: &mut Graph, x: NodeId, rows: usize, cols: usize, rate: f64, rng: &mut ChaCha8Rng) -> Result<NodeId> {
    if rate == 0.0 {
        return Ok(x);
    }
    let m = g.input(dropout_mask(rows, cols, rate, rng));
    g.mul(x, m)
}
