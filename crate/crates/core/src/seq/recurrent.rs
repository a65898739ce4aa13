//! Single-layer recurrent language model (simple RNN or LSTM) with a softmax
//! output layer, learned initial state and exact backpropagation through
//! time. Everything is `f64`.
//!
//! Layout: the state `s_0 = (h0, c0)` is a parameter. The distribution for
//! position `t + 1` is `softmax(w_out · h_t + b_out)`, and token `t` moves the
//! state from `s_t` to `s_{t+1}`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_history, check_tokens, SequenceModel, Token};
use crate::dist::{Categorical, Vocab};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Rnn,
    Lstm,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Rnn => 1,
            CellKind::Lstm => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurrentConfig {
    pub cell: CellKind,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl RecurrentConfig {
    pub fn lstm(hidden_dim: usize) -> Self {
        RecurrentConfig {
            cell: CellKind::Lstm,
            embed_dim: hidden_dim,
            hidden_dim,
        }
    }
}

/// Parameter initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Init {
    Uniform { scale: f64 },
    Normal { std: f64 },
}

impl Default for Init {
    fn default() -> Self {
        Init::Uniform { scale: 0.08 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub const PARAM_NAMES: [&str; 8] = ["embedding", "w_in", "w_rec", "bias", "w_out", "b_out", "h0", "c0"];

/// All trainable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `[V, E]`
    pub embedding: Tensor,
    /// `[G·H, E]`, gate blocks in order i, f, g, o for LSTM
    pub w_in: Tensor,
    /// `[G·H, H]`
    pub w_rec: Tensor,
    /// `[G·H]`
    pub bias: Tensor,
    /// `[V, H]`
    pub w_out: Tensor,
    /// `[V]`
    pub b_out: Tensor,
    /// `[H]`
    pub h0: Tensor,
    /// `[H]` for LSTM, `[0]` for a simple RNN
    pub c0: Tensor,
}

impl Params {
    pub fn zeros(config: &RecurrentConfig, vocab_size: usize) -> Self {
        let (v, e, h) = (vocab_size, config.embed_dim, config.hidden_dim);
        let gh = config.cell.gates() * h;
        let c = if config.cell == CellKind::Lstm { h } else { 0 };
        Params {
            embedding: Tensor::zeros(&[v, e]),
            w_in: Tensor::zeros(&[gh, e]),
            w_rec: Tensor::zeros(&[gh, h]),
            bias: Tensor::zeros(&[gh]),
            w_out: Tensor::zeros(&[v, h]),
            b_out: Tensor::zeros(&[v]),
            h0: Tensor::zeros(&[h]),
            c0: Tensor::zeros(&[c]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(&t.shape);
        Params {
            embedding: z(&self.embedding),
            w_in: z(&self.w_in),
            w_rec: z(&self.w_rec),
            bias: z(&self.bias),
            w_out: z(&self.w_out),
            b_out: z(&self.b_out),
            h0: z(&self.h0),
            c0: z(&self.c0),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.embedding,
            &self.w_in,
            &self.w_rec,
            &self.bias,
            &self.w_out,
            &self.b_out,
            &self.h0,
            &self.c0,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.embedding,
            &mut self.w_in,
            &mut self.w_rec,
            &mut self.bias,
            &mut self.w_out,
            &mut self.b_out,
            &mut self.h0,
            &mut self.c0,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Errors unless every tensor has the same shape as in `other`.
    pub fn check_same_shape(&self, other: &Params) -> Result<()> {
        for ((a, b), name) in self.tensors().iter().zip(other.tensors()).zip(PARAM_NAMES) {
            if a.shape != b.shape || a.data.len() != b.data.len() {
                return Err(Error::ShapeMismatch {
                    name: name.into(),
                    detail: format!("{:?} vs {:?}", a.shape, b.shape),
                });
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentLM {
    vocab: Vocab,
    seq_len: usize,
    config: RecurrentConfig,
    params: Params,
}

/// Hidden and cell state between steps.
#[derive(Debug, Clone)]
pub struct State {
    h: Vec<f64>,
    c: Vec<f64>,
}

/// Forward activations kept for backpropagation.
struct Trace {
    inputs: Vec<Token>,
    /// `L` hidden states, flat `[L, H]`
    hs: Vec<f64>,
    /// `L` cell states (LSTM only)
    cs: Vec<f64>,
    /// post-activation gates for the `L - 1` transitions, flat `[L-1, G·H]`
    gates: Vec<f64>,
    /// output distributions, flat `[L, V]`
    probs: Vec<f64>,
    nll: f64,
    replaced: usize,
}

impl RecurrentLM {
    pub fn new(vocab: Vocab, seq_len: usize, config: RecurrentConfig, params: Params) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::Config("sequence length must be positive".into()));
        }
        if config.hidden_dim == 0 || config.embed_dim == 0 {
            return Err(Error::Config("hidden and embedding widths must be positive".into()));
        }
        Params::zeros(&config, vocab.size()).check_same_shape(&params)?;
        Ok(RecurrentLM {
            vocab,
            seq_len,
            config,
            params,
        })
    }

    /// Seeded random initialization of every tensor, including the initial
    /// state.
    pub fn random(
        vocab: Vocab,
        seq_len: usize,
        config: RecurrentConfig,
        init: Init,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let mut params = Params::zeros(&config, vocab.size());
        match init {
            Init::Uniform { scale } => {
                for t in params.tensors_mut() {
                    t.data.iter_mut().for_each(|x| *x = rng.random_range(-scale..=scale));
                }
            }
            Init::Normal { std } => {
                let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("normal init std {std}: {e}")))?;
                for t in params.tensors_mut() {
                    t.data.iter_mut().for_each(|x| *x = normal.sample(rng));
                }
            }
        }
        RecurrentLM::new(vocab, seq_len, config, params)
    }

    pub fn config(&self) -> &RecurrentConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn h_dim(&self) -> usize {
        self.config.hidden_dim
    }

    fn gh_dim(&self) -> usize {
        self.config.cell.gates() * self.config.hidden_dim
    }

    pub fn initial_state(&self) -> State {
        State {
            h: self.params.h0.data.clone(),
            c: self.params.c0.data.clone(),
        }
    }

    /// Consumes `token`, producing the next state.
    pub fn advance(&self, state: &State, token: Token) -> State {
        let mut gates = vec![0.0; self.gh_dim()];
        let mut next = State {
            h: vec![0.0; self.h_dim()],
            c: vec![0.0; state.c.len()],
        };
        self.cell_forward(&state.h, &state.c, token, &mut gates, &mut next.h, &mut next.c);
        next
    }

    /// Next-token distribution from a state.
    pub fn output(&self, state: &State) -> Categorical {
        let mut probs = vec![0.0; self.vocab.size()];
        self.output_probs(&state.h, &mut probs);
        Categorical::from_normalized(probs)
    }

    fn cell_forward(
        &self,
        h: &[f64],
        c: &[f64],
        token: Token,
        gates: &mut [f64],
        h_out: &mut [f64],
        c_out: &mut [f64],
    ) {
        let e = self.config.embed_dim;
        let hd = self.h_dim();
        let p = &self.params;
        let x = &p.embedding.data[token * e..(token + 1) * e];
        gates.copy_from_slice(&p.bias.data);
        matvec_acc(&p.w_in.data, e, x, gates);
        matvec_acc(&p.w_rec.data, hd, h, gates);
        match self.config.cell {
            CellKind::Rnn => {
                for (o, z) in h_out.iter_mut().zip(gates.iter_mut()) {
                    *z = z.tanh();
                    *o = *z;
                }
            }
            CellKind::Lstm => {
                let (i_g, rest) = gates.split_at_mut(hd);
                let (f_g, rest) = rest.split_at_mut(hd);
                let (g_g, o_g) = rest.split_at_mut(hd);
                for k in 0..hd {
                    i_g[k] = sigmoid(i_g[k]);
                    f_g[k] = sigmoid(f_g[k]);
                    g_g[k] = g_g[k].tanh();
                    o_g[k] = sigmoid(o_g[k]);
                    c_out[k] = f_g[k] * c[k] + i_g[k] * g_g[k];
                    h_out[k] = o_g[k] * c_out[k].tanh();
                }
            }
        }
    }

    fn output_probs(&self, h: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.params.b_out.data);
        matvec_acc(&self.params.w_out.data, self.h_dim(), h, out);
        softmax_in_place(out);
    }

    /// Teacher-forced forward pass over a full sequence. With `replace`, each
    /// conditioning token is swapped w.p. `rate` for a draw from the model's
    /// own prediction at that position.
    fn forward_trace(&self, targets: &[Token], replace: Option<(f64, &mut StreamRng)>) -> Trace {
        let l = self.seq_len;
        let (hd, gh, v) = (self.h_dim(), self.gh_dim(), self.vocab.size());
        let cd = self.params.c0.len();
        let mut tr = Trace {
            inputs: Vec::with_capacity(l.saturating_sub(1)),
            hs: vec![0.0; l * hd],
            cs: vec![0.0; l * cd],
            gates: vec![0.0; l.saturating_sub(1) * gh],
            probs: vec![0.0; l * v],
            nll: 0.0,
            replaced: 0,
        };
        tr.hs[..hd].copy_from_slice(&self.params.h0.data);
        tr.cs[..cd].copy_from_slice(&self.params.c0.data);
        let mut replace = replace;
        for t in 0..l {
            let (done, rest) = tr.hs.split_at_mut((t + 1) * hd);
            let h_t = &done[t * hd..];
            self.output_probs(h_t, &mut tr.probs[t * v..(t + 1) * v]);
            let p_t = &tr.probs[t * v..(t + 1) * v];
            tr.nll -= p_t[targets[t]].ln();
            if t + 1 == l {
                break;
            }
            let mut input = targets[t];
            if let Some((rate, rng)) = replace.as_mut() {
                if *rate > 0.0 && rng.random::<f64>() < *rate {
                    input = Categorical::from_normalized(p_t.to_vec()).sample(&mut **rng);
                    tr.replaced += 1;
                }
            }
            tr.inputs.push(input);
            let (c_done, c_rest) = tr.cs.split_at_mut((t + 1) * cd);
            self.cell_forward(
                h_t,
                &c_done[t * cd..],
                input,
                &mut tr.gates[t * gh..(t + 1) * gh],
                &mut rest[..hd],
                &mut c_rest[..cd],
            );
        }
        tr
    }

    /// Accumulates `scale · ∂(Σ_t −ln p_t[y_t]) / ∂θ` into `grads`.
    fn backward(&self, tr: &Trace, targets: &[Token], scale: f64, grads: &mut Params) {
        let l = self.seq_len;
        let (hd, gh, v, e) = (self.h_dim(), self.gh_dim(), self.vocab.size(), self.config.embed_dim);
        let cd = self.params.c0.len();
        let p = &self.params;
        let mut dh = vec![0.0; hd];
        let mut dc = vec![0.0; cd];
        let mut dlogits = vec![0.0; v];
        let mut dz = vec![0.0; gh];
        for t in (0..l).rev() {
            let h_t = &tr.hs[t * hd..(t + 1) * hd];
            dlogits.copy_from_slice(&tr.probs[t * v..(t + 1) * v]);
            dlogits[targets[t]] -= 1.0;
            dlogits.iter_mut().for_each(|x| *x *= scale);
            outer_acc(&mut grads.w_out.data, hd, &dlogits, h_t);
            grads.b_out.data.iter_mut().zip(&dlogits).for_each(|(g, d)| *g += d);
            matvec_t_acc(&p.w_out.data, hd, &dlogits, &mut dh);

            if t == 0 {
                grads.h0.data.iter_mut().zip(&dh).for_each(|(g, d)| *g += d);
                grads.c0.data.iter_mut().zip(&dc).for_each(|(g, d)| *g += d);
                break;
            }

            // Transition s_{t-1} --input_{t-1}--> s_t.
            let s = t - 1;
            let gates = &tr.gates[s * gh..(s + 1) * gh];
            let h_prev = &tr.hs[s * hd..(s + 1) * hd];
            match self.config.cell {
                CellKind::Rnn => {
                    for k in 0..hd {
                        dz[k] = dh[k] * (1.0 - gates[k] * gates[k]);
                    }
                }
                CellKind::Lstm => {
                    let c_t = &tr.cs[t * cd..(t + 1) * cd];
                    let c_prev = &tr.cs[s * cd..(s + 1) * cd];
                    let (i_g, f_g, g_g, o_g) = (
                        &gates[..hd],
                        &gates[hd..2 * hd],
                        &gates[2 * hd..3 * hd],
                        &gates[3 * hd..],
                    );
                    for k in 0..hd {
                        let tc = c_t[k].tanh();
                        let d_o = dh[k] * tc;
                        let dct = dc[k] + dh[k] * o_g[k] * (1.0 - tc * tc);
                        let d_i = dct * g_g[k];
                        let d_g = dct * i_g[k];
                        let d_f = dct * c_prev[k];
                        dc[k] = dct * f_g[k];
                        dz[k] = d_i * i_g[k] * (1.0 - i_g[k]);
                        dz[hd + k] = d_f * f_g[k] * (1.0 - f_g[k]);
                        dz[2 * hd + k] = d_g * (1.0 - g_g[k] * g_g[k]);
                        dz[3 * hd + k] = d_o * o_g[k] * (1.0 - o_g[k]);
                    }
                }
            }
            let token = tr.inputs[s];
            let x = &p.embedding.data[token * e..(token + 1) * e];
            outer_acc(&mut grads.w_in.data, e, &dz, x);
            outer_acc(&mut grads.w_rec.data, hd, &dz, h_prev);
            grads.bias.data.iter_mut().zip(&dz).for_each(|(g, d)| *g += d);
            matvec_t_acc(
                &p.w_in.data,
                e,
                &dz,
                &mut grads.embedding.data[token * e..(token + 1) * e],
            );
            dh.iter_mut().for_each(|x| *x = 0.0);
            matvec_t_acc(&p.w_rec.data, hd, &dz, &mut dh);
        }
    }

    fn check_batch(&self, batch: &[Vec<Token>]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Empty("empty batch".into()));
        }
        for seq in batch {
            if seq.len() != self.seq_len {
                return Err(Error::Corpus(format!(
                    "sequence of length {} given to a length-{} model",
                    seq.len(),
                    self.seq_len
                )));
            }
            check_tokens(self.vocab.size(), seq)?;
        }
        Ok(())
    }

    /// Mean per-token NLL over the batch and its gradient, summed in batch
    /// order.
    pub fn loss_and_grad(&self, batch: &[Vec<Token>]) -> Result<(f64, Params)> {
        self.check_batch(batch)?;
        let (loss, grads, _) = self.loss_and_grad_inner(batch, None);
        Ok((loss, grads))
    }

    /// As [`RecurrentLM::loss_and_grad`] with scheduled-sampling replacement.
    /// Sequence `i` draws replacements from `rngs[i]`; returns the number of
    /// replaced conditioning tokens as well.
    pub fn loss_and_grad_replaced(
        &self,
        batch: &[Vec<Token>],
        rate: f64,
        rngs: &mut [StreamRng],
    ) -> Result<(f64, Params, usize)> {
        self.check_batch(batch)?;
        if rngs.len() != batch.len() {
            return Err(Error::ShapeMismatch {
                name: "rngs".into(),
                detail: format!("{} streams for {} sequences", rngs.len(), batch.len()),
            });
        }
        Ok(self.loss_and_grad_inner(batch, Some((rate, rngs))))
    }

    fn loss_and_grad_inner(
        &self,
        batch: &[Vec<Token>],
        mut replace: Option<(f64, &mut [StreamRng])>,
    ) -> (f64, Params, usize) {
        let mut grads = self.params.zeros_like();
        let scale = 1.0 / (batch.len() * self.seq_len) as f64;
        let mut total = 0.0;
        let mut replaced = 0;
        for (i, seq) in batch.iter().enumerate() {
            let tr = match replace.as_mut() {
                Some((rate, rngs)) => self.forward_trace(seq, Some((*rate, &mut rngs[i]))),
                None => self.forward_trace(seq, None),
            };
            total += tr.nll;
            replaced += tr.replaced;
            self.backward(&tr, seq, scale, &mut grads);
        }
        (total * scale, grads, replaced)
    }

    /// Mean per-token NLL without gradients.
    pub fn mean_nll(&self, batch: &[Vec<Token>]) -> Result<f64> {
        self.check_batch(batch)?;
        let total: f64 = batch.iter().map(|s| self.forward_trace(s, None).nll).sum();
        Ok(total / (batch.len() * self.seq_len) as f64)
    }
}

impl SequenceModel for RecurrentLM {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn conditional(&self, history: &[Token]) -> Result<Categorical> {
        check_history(self, history)?;
        let mut state = self.initial_state();
        for &tok in history {
            state = self.advance(&state, tok);
        }
        Ok(self.output(&state))
    }

    fn prefix_conditionals(&self, tokens: &[Token]) -> Result<Vec<Categorical>> {
        let n = tokens.len().min(self.seq_len - 1);
        check_tokens(self.vocab.size(), &tokens[..n])?;
        let mut out = Vec::with_capacity(n + 1);
        let mut state = self.initial_state();
        out.push(self.output(&state));
        for &tok in &tokens[..n] {
            state = self.advance(&state, tok);
            out.push(self.output(&state));
        }
        Ok(out)
    }

    fn sample_continuation(&self, prefix: &[Token], rng: &mut StreamRng) -> Result<Vec<Token>> {
        check_tokens(self.vocab.size(), prefix)?;
        let mut tokens: Vec<Token> = prefix.iter().copied().take(self.seq_len).collect();
        let mut state = self.initial_state();
        for &tok in &tokens {
            state = self.advance(&state, tok);
        }
        while tokens.len() < self.seq_len {
            let next = self.output(&state).sample(rng);
            tokens.push(next);
            if tokens.len() < self.seq_len {
                state = self.advance(&state, next);
            }
        }
        Ok(tokens)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    x.iter_mut().for_each(|v| *v *= inv);
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out += W x` for row-major `W` with `cols` columns.
fn matvec_acc(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// `out += Wᵀ d`.
fn matvec_t_acc(w: &[f64], cols: usize, d: &[f64], out: &mut [f64]) {
    for (r, &dr) in d.iter().enumerate() {
        if dr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        out.iter_mut().zip(row).for_each(|(o, wv)| *o += wv * dr);
    }
}

/// `G += d xᵀ`.
fn outer_acc(g: &mut [f64], cols: usize, d: &[f64], x: &[f64]) {
    for (r, &dr) in d.iter().enumerate() {
        if dr == 0.0 {
            continue;
        }
        let row = &mut g[r * cols..(r + 1) * cols];
        row.iter_mut().zip(x).for_each(|(gv, xv)| *gv += dr * xv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn small(cell: CellKind) -> RecurrentLM {
        let config = RecurrentConfig {
            cell,
            embed_dim: 3,
            hidden_dim: 4,
        };
        RecurrentLM::random(
            Vocab::synthetic(5).unwrap(),
            6,
            config,
            Init::Uniform { scale: 0.5 },
            &mut stream(11, "init", 0),
        )
        .unwrap()
    }

    #[test]
    fn conditionals_are_normalized_and_deterministic() {
        for cell in [CellKind::Rnn, CellKind::Lstm] {
            let m = small(cell);
            let h = [1, 4, 2];
            let a = m.conditional(&h).unwrap();
            let b = m.conditional(&h).unwrap();
            assert_eq!(a, b);
            assert!((a.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn incremental_paths_match_direct_queries_bitwise() {
        let m = small(CellKind::Lstm);
        let seq = [3, 0, 1, 1, 4, 2];
        let along = m.prefix_conditionals(&seq).unwrap();
        assert_eq!(along.len(), 6);
        for (l, c) in along.iter().enumerate() {
            assert_eq!(c, &m.conditional(&seq[..l]).unwrap());
        }
        // Teacher-forced trace computes the same distributions.
        let tr = m.forward_trace(&seq, None);
        for (l, c) in along.iter().enumerate() {
            assert_eq!(c.probs(), &tr.probs[l * 5..(l + 1) * 5]);
        }
    }

    #[test]
    fn continuation_keeps_prefix() {
        let m = small(CellKind::Rnn);
        let out = m.sample_continuation(&[2, 2], &mut stream(1, "c", 0)).unwrap();
        assert_eq!(&out[..2], &[2, 2]);
        assert_eq!(out.len(), 6);
    }

    #[test]
    fn loss_matches_sum_of_conditionals() {
        let m = small(CellKind::Lstm);
        let seq = vec![3, 0, 1, 1, 4, 2];
        let conds = m.prefix_conditionals(&seq).unwrap();
        let expected: f64 = conds.iter().zip(&seq).map(|(c, &t)| -c.prob(t).ln()).sum::<f64>() / 6.0;
        let (loss, _) = m.loss_and_grad(&[seq]).unwrap();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_malformed_batches() {
        let m = small(CellKind::Lstm);
        assert!(m.loss_and_grad(&[]).is_err());
        assert!(m.loss_and_grad(&[vec![0, 1]]).is_err());
        assert!(m.loss_and_grad(&[vec![9; 6]]).is_err());
    }

    #[test]
    fn constructor_checks_shapes() {
        let config = RecurrentConfig::lstm(4);
        let mut params = Params::zeros(&config, 5);
        params.w_rec = Tensor::zeros(&[3, 3]);
        let err = RecurrentLM::new(Vocab::synthetic(5).unwrap(), 3, config, params).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn zero_rate_replacement_is_plain_teacher_forcing() {
        let m = small(CellKind::Lstm);
        let batch = vec![vec![3, 0, 1, 1, 4, 2], vec![0, 0, 0, 1, 1, 1]];
        let (l1, g1) = m.loss_and_grad(&batch).unwrap();
        let mut rngs = vec![stream(0, "r", 0), stream(0, "r", 1)];
        let (l2, g2, n) = m.loss_and_grad_replaced(&batch, 0.0, &mut rngs).unwrap();
        assert_eq!(n, 0);
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }
}
