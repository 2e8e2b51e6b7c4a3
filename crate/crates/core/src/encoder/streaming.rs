use super::{DomainId, Encoder};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone, Default)]
struct KvCache {
    first_frame: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl KvCache {
    fn end_frame(&self, width: usize) -> usize {
        self.first_frame + self.keys.len() / width
    }

    fn trim_before(&mut self, frame: usize, width: usize) {
        if frame > self.first_frame {
            let drop = (frame - self.first_frame).min(self.keys.len() / width);
            self.keys.drain(..drop * width);
            self.values.drain(..drop * width);
            self.first_frame += drop;
        }
    }
}

/// Chunk-by-chunk encoder session holding per-layer key/value history.
///
/// Feeding an utterance chunk by chunk reproduces [`Encoder::forward`] under
/// the plan with the same base segment, center, right context and left cap.
#[derive(Debug)]
pub struct StreamingEncoder<'a> {
    encoder: &'a Encoder,
    store: &'a ParamStore,
    domain: Option<DomainId>,
    base_segment: usize,
    center: usize,
    right_ctx: usize,
    left_cap: Option<usize>,
    next_frame: usize,
    caches: Vec<KvCache>,
}

impl<'a> StreamingEncoder<'a> {
    pub fn new(
        encoder: &'a Encoder,
        store: &'a ParamStore,
        base_segment: usize,
        center: usize,
        right_ctx: usize,
        left_cap: Option<usize>,
        domain: Option<DomainId>,
    ) -> Result<Self> {
        encoder.check_domain(domain)?;
        if center == 0 || center > base_segment {
            return Err(Error::InvalidInput(format!(
                "center {center} must be in 1..={base_segment}"
            )));
        }
        Ok(Self {
            encoder,
            store,
            domain,
            base_segment,
            center,
            right_ctx,
            left_cap,
            next_frame: 0,
            caches: vec![KvCache::default(); encoder.layer_count()],
        })
    }

    pub fn center(&self) -> usize {
        self.center
    }

    pub fn right_ctx(&self) -> usize {
        self.right_ctx
    }

    /// First frame the next call to [`StreamingEncoder::step`] must start at.
    pub fn next_frame(&self) -> usize {
        self.next_frame
    }

    fn history_start(&self, chunk_start: usize) -> usize {
        let window_start = (chunk_start + self.center).saturating_sub(self.base_segment);
        match self.left_cap {
            Some(cap) => window_start.saturating_sub(cap),
            None => 0,
        }
    }

    /// Encode one chunk.
    ///
    /// `center_rows` holds `center` stacked frames (fewer only for the last
    /// chunk). `right_rows` holds the look-ahead frames that exist; at the
    /// end of the utterance the missing ones are zero padding, which is never
    /// attended. Returns `center_rows.rows() × width` embeddings.
    pub fn step(&mut self, start_frame: usize, center_rows: &Tensor, right_rows: &Tensor) -> Result<Tensor> {
        if start_frame != self.next_frame {
            return Err(Error::InvalidInput(format!(
                "chunk starting at frame {start_frame} arrived out of order; expected {}",
                self.next_frame
            )));
        }
        let cfg = &self.encoder.config;
        let dim = cfg.stacked_dim();
        let w = cfg.width;
        let nc = center_rows.rows();
        let nr = right_rows.rows();
        if nc == 0 || nc > self.center || nr > self.right_ctx {
            return Err(Error::InvalidInput(format!(
                "chunk of {nc} center + {nr} right frames does not fit center {} / right {}",
                self.center, self.right_ctx
            )));
        }
        if center_rows.cols() != dim || (nr > 0 && right_rows.cols() != dim) {
            return Err(Error::InvalidInput(format!("chunk rows must have {dim} columns")));
        }
        if nc < self.center && nr > 0 {
            return Err(Error::InvalidInput("a short chunk cannot carry look-ahead".into()));
        }

        let frames: Vec<usize> = (start_frame..start_frame + nc + nr).collect();
        let mut stacked = Vec::with_capacity((nc + nr) * dim);
        stacked.extend_from_slice(center_rows.data());
        stacked.extend_from_slice(right_rows.data());
        let mut x = self.encoder.frontend_rows(self.store, &stacked, &frames);

        let history = self.history_start(start_frame);
        for (layer, cache) in self.caches.iter_mut().enumerate() {
            if start_frame > 0 && (cache.first_frame > history || cache.end_frame(w) != start_frame) {
                return Err(Error::InvalidInput(format!(
                    "layer {layer} history covers frames {}..{}, need {history}..{start_frame}",
                    cache.first_frame,
                    cache.end_frame(w)
                )));
            }
            let (q, k, v) = self.encoder.layer_kv(layer, self.store, &x, self.domain);
            let skip = history.saturating_sub(cache.first_frame) * w;
            let mut keys = Vec::with_capacity(cache.keys.len() - skip + k.len());
            keys.extend_from_slice(&cache.keys[skip..]);
            keys.extend_from_slice(&k);
            let mut values = Vec::with_capacity(keys.len());
            values.extend_from_slice(&cache.values[skip..]);
            values.extend_from_slice(&v);
            x = self.encoder.layer_finish(layer, self.store, &x, &q, &keys, &values);

            if start_frame == 0 {
                cache.first_frame = 0;
            }
            cache.keys.extend_from_slice(&k[..nc * w]);
            cache.values.extend_from_slice(&v[..nc * w]);
        }

        self.next_frame = start_frame + nc;
        let keep_from = self.history_start(self.next_frame);
        for cache in &mut self.caches {
            cache.trim_before(keep_from, w);
        }
        let out = self.encoder.finish(self.store, &x[..nc * w]);
        Tensor::matrix(nc, w, out)
    }

    /// Stream a whole stacked utterance through the session.
    pub fn encode_all(&mut self, stacked: &Tensor) -> Result<Tensor> {
        let t = stacked.rows();
        let dim = stacked.cols();
        let mut out = Vec::with_capacity(t * self.encoder.config.width);
        let mut start = self.next_frame;
        while start < t {
            let end = (start + self.center).min(t);
            let right_end = if end - start == self.center { (end + self.right_ctx).min(t) } else { end };
            let center = Tensor::matrix(end - start, dim, stacked.data()[start * dim..end * dim].to_vec())?;
            let right = Tensor::matrix(right_end - end, dim, stacked.data()[end * dim..right_end * dim].to_vec())?;
            out.extend(self.step(start, &center, &right)?.into_data());
            start = end;
        }
        Tensor::matrix(out.len() / self.encoder.config.width, self.encoder.config.width, out)
    }
}
