//! Label-history predictor and the joiner that combines it with encoder frames.
//!
//! The predictor is a single LSTM layer followed by layer normalisation of
//! its output. The blank row of the embedding table doubles as the
//! start-of-sequence input, so `g_0` is the output after consuming it.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::BLANK;
use crate::nn::{LayerNorm, Linear};
use crate::tensor::{log_softmax_row, sigmoid, tanh};
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorConfig {
    /// Vocabulary size including blank at index 0.
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub joiner: usize,
}

impl PredictorConfig {
    /// 16 labels plus blank, widths matching the toy encoder.
    pub fn toy() -> Self {
        Self {
            vocab: 17,
            embed: 64,
            hidden: 64,
            joiner: 64,
        }
    }
}

/// Recurrent state between predictor steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
    /// Last consumed token; blank stands for start-of-sequence.
    pub last_token: usize,
}

impl PredictorState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            hidden: vec![0.0; hidden],
            cell: vec![0.0; hidden],
            last_token: BLANK,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub config: PredictorConfig,
    embedding: ParamId,
    input: Linear,
    recurrent: ParamId,
    norm: LayerNorm,
}

impl Predictor {
    pub fn new(config: PredictorConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        use rand::Rng;
        let e = config.embed;
        let h = config.hidden;
        let emb = (0..config.vocab * e).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let embedding = store.add("pred.embedding", Tensor::matrix(config.vocab, e, emb).expect("sized"));
        let input = Linear::new(store, "pred.lstm.input", e, 4 * h, rng);
        let limit = (6.0 / (5 * h) as f64).sqrt();
        let rec = (0..h * 4 * h).map(|_| rng.gen_range(-limit..limit)).collect();
        let recurrent = store.add("pred.lstm.recurrent", Tensor::matrix(h, 4 * h, rec).expect("sized"));
        // Forget-gate bias of one keeps early gradients flowing.
        let bias = store.get_mut(input.bias).data_mut();
        bias[h..2 * h].iter_mut().for_each(|b| *b = 1.0);
        let norm = LayerNorm::new(store, "pred.norm", h);
        Self {
            config,
            embedding,
            input,
            recurrent,
            norm,
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t == BLANK || t >= self.config.vocab) {
            return Err(Error::InvalidInput(format!(
                "predictor history contains {bad}; tokens must be labels in 1..{}",
                self.config.vocab
            )));
        }
        Ok(())
    }

    /// Rows `g_0 … g_U` on the tape, starting from the zero state.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: &[usize]) -> Result<NodeId> {
        self.check_tokens(tokens)?;
        let h = self.config.hidden;
        let mut inputs = Vec::with_capacity(tokens.len() + 1);
        inputs.push(BLANK);
        inputs.extend_from_slice(tokens);

        let table = g.param(store, self.embedding);
        let x = g.gather(table, &inputs)?;
        let xw = self.input.forward(g, store, x)?;
        let rec = g.param(store, self.recurrent);
        let mut hidden = g.input(Tensor::zeros(vec![1, h]));
        let mut cell = g.input(Tensor::zeros(vec![1, h]));
        let mut outs = Vec::with_capacity(inputs.len());
        for step in 0..inputs.len() {
            let xs = g.slice(xw, 0, step, 1)?;
            let hr = g.matmul(hidden, rec, false)?;
            let gates = g.add(xs, hr)?;
            let i = g.slice(gates, 1, 0, h)?;
            let f = g.slice(gates, 1, h, h)?;
            let c = g.slice(gates, 1, 2 * h, h)?;
            let o = g.slice(gates, 1, 3 * h, h)?;
            let i = g.sigmoid(i);
            let f = g.sigmoid(f);
            let c = g.tanh(c);
            let o = g.sigmoid(o);
            let keep = g.mul(f, cell)?;
            let write = g.mul(i, c)?;
            cell = g.add(keep, write)?;
            let ct = g.tanh(cell);
            hidden = g.mul(o, ct)?;
            outs.push(hidden);
        }
        let stacked = g.concat(&outs, 0)?;
        self.norm.forward(g, store, stacked)
    }

    /// Consume one label (or blank as start-of-sequence) without a tape.
    /// Returns the normalised output row and the advanced state.
    pub fn step(&self, store: &ParamStore, state: &PredictorState, token: usize) -> Result<(Vec<f64>, PredictorState)> {
        if token >= self.config.vocab {
            return Err(Error::InvalidInput(format!("token {token} outside vocabulary")));
        }
        let h = self.config.hidden;
        let x = store.get(self.embedding).row_slice(token);
        let mut gates = self.input.apply(store, x, 1);
        let rec = store.get(self.recurrent);
        for (j, &hj) in state.hidden.iter().enumerate() {
            if hj != 0.0 {
                for (gk, &w) in gates.iter_mut().zip(rec.row_slice(j)) {
                    *gk += hj * w;
                }
            }
        }
        let mut hidden = vec![0.0; h];
        let mut cell = vec![0.0; h];
        for k in 0..h {
            let i = sigmoid(gates[k]);
            let f = sigmoid(gates[h + k]);
            let c = tanh(gates[2 * h + k]);
            let o = sigmoid(gates[3 * h + k]);
            cell[k] = f * state.cell[k] + i * c;
            hidden[k] = o * tanh(cell[k]);
        }
        let out = self.norm.apply(store, &hidden);
        Ok((
            out,
            PredictorState {
                hidden,
                cell,
                last_token: token,
            },
        ))
    }

    /// Tape-free batch run: `g_0 … g_U` plus the final state.
    pub fn run(&self, store: &ParamStore, tokens: &[usize]) -> Result<(Tensor, PredictorState)> {
        self.check_tokens(tokens)?;
        let (first, mut state) = self.step(store, &PredictorState::zeros(self.config.hidden), BLANK)?;
        let mut rows = first;
        for &t in tokens {
            let (row, next) = self.step(store, &state, t)?;
            rows.extend(row);
            state = next;
        }
        Ok((Tensor::matrix(tokens.len() + 1, self.config.hidden, rows)?, state))
    }
}

/// `log_softmax(W_out · tanh(P_f f_t + P_g g_u + b))` for every `(t, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Joiner {
    encoder_proj: Linear,
    predictor_proj: Linear,
    output: Linear,
    pub vocab: usize,
}

impl Joiner {
    pub fn new(encoder_width: usize, config: &PredictorConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        Self {
            encoder_proj: Linear::new(store, "joiner.encoder_proj", encoder_width, config.joiner, rng),
            predictor_proj: Linear::new(store, "joiner.predictor_proj", config.hidden, config.joiner, rng),
            output: Linear::new(store, "joiner.output", config.joiner, config.vocab, rng),
            vocab: config.vocab,
        }
    }

    /// Flattened `(T·(U+1)) × V` log-probabilities, row `t·(U+1) + u`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, frames: NodeId, preds: NodeId) -> Result<NodeId> {
        let f_cols = g.value(frames).cols();
        let g_cols = g.value(preds).cols();
        if f_cols != self.encoder_proj.inputs || g_cols != self.predictor_proj.inputs {
            return Err(Error::InvalidInput(format!(
                "joiner expects widths {}/{}, got {f_cols}/{g_cols}",
                self.encoder_proj.inputs, self.predictor_proj.inputs
            )));
        }
        let f = self.encoder_proj.forward(g, store, frames)?;
        let p = self.predictor_proj.forward(g, store, preds)?;
        let z = g.outer_add_tanh(f, p)?;
        let logits = self.output.forward(g, store, z)?;
        g.log_softmax(logits)
    }

    /// Encoder-side projection of frame rows (tape-free).
    pub fn project_frames(&self, store: &ParamStore, frames: &[f64], rows: usize) -> Vec<f64> {
        self.encoder_proj.apply(store, frames, rows)
    }

    /// Predictor-side projection of one predictor row (tape-free).
    pub fn project_prediction(&self, store: &ParamStore, pred: &[f64]) -> Vec<f64> {
        self.predictor_proj.apply(store, pred, 1)
    }

    /// Log-probabilities from already-projected frame and prediction rows.
    pub fn joint(&self, store: &ParamStore, frame_proj: &[f64], pred_proj: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = frame_proj.iter().zip(pred_proj).map(|(a, b)| tanh(a + b)).collect();
        let logits = self.output.apply(store, &z, 1);
        let mut out = vec![0.0; logits.len()];
        log_softmax_row(&logits, &mut out);
        out
    }
}
