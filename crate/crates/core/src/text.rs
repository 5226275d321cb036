//! Question encoder: word embeddings followed by a single-layer biLSTM.
//!
//! Produces the linguistic objects `L` (one contextual embedding per word)
//! and the query summary `q`, the backward pass's first state joined with
//! the forward pass's last state.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{self, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Embedding entries start uniform in `[-EMBEDDING_INIT, EMBEDDING_INIT]`.
pub const EMBEDDING_INIT: f64 = 1.0;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Token table; index equals position in the token list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved entries first, then `words` in order, skipping duplicates.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self { tokens: Vec::new(), index: HashMap::new() };
        for w in [PAD_TOKEN, UNK_TOKEN] {
            vocab.insert(w);
        }
        for w in words {
            vocab.insert(w.as_ref());
        }
        vocab
    }

    fn insert(&mut self, w: &str) {
        if !self.index.contains_key(w) {
            self.index.insert(w.to_string(), self.tokens.len());
            self.tokens.push(w.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// Indices padded with PAD or truncated to exactly `max_len`.
    pub fn encode<S: AsRef<str>>(&self, words: &[S], max_len: usize) -> Vec<usize> {
        let mut out: Vec<usize> = words.iter().take(max_len).map(|w| self.index_of(w.as_ref())).collect();
        out.resize(max_len, PAD);
        out
    }

    /// Plain text, one token per line.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<&str> = text.lines().collect();
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::Format("vocabulary must start with <pad> and <unk>".into()));
        }
        let vocab = Self::new(&tokens[2..]);
        if vocab.len() != tokens.len() {
            return Err(Error::Format("vocabulary contains duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Non-PAD prefix of an encoded question.
pub fn strip_padding(indices: &[usize]) -> &[usize] {
    let end = indices.iter().position(|&i| i == PAD).unwrap_or(indices.len());
    &indices[..end]
}

#[derive(Debug, Clone)]
pub struct LstmParams {
    /// `4h x input`, gate blocks ordered input, forget, candidate, output.
    pub w_input: ParamId,
    /// `4h x h`
    pub w_hidden: ParamId,
    /// `4h x 1`
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    pub fn register<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, input: usize, hidden: usize) -> Self {
        let w_input = store.add(format!("{name}.w_input"), params::linear_init(rng, 4 * hidden, input));
        let w_hidden = store.add(format!("{name}.w_hidden"), params::linear_init(rng, 4 * hidden, hidden));
        let mut b = Tensor::zeros(4 * hidden, 1);
        for r in hidden..2 * hidden {
            b.set(r, 0, 1.0);
        }
        let bias = store.add(format!("{name}.bias"), b);
        Self { w_input, w_hidden, bias, hidden }
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoderParams {
    /// `vocab x word_dim`
    pub embedding: ParamId,
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl TextEncoderParams {
    pub fn register<R: Rng>(store: &mut ParamStore, rng: &mut R, vocab: usize, word_dim: usize, d: usize) -> Self {
        let embedding = store.add("text.embedding", params::uniform(rng, vocab, word_dim, EMBEDDING_INIT));
        let forward = LstmParams::register(store, rng, "text.lstm_fwd", word_dim, d / 2);
        let backward = LstmParams::register(store, rng, "text.lstm_bwd", word_dim, d / 2);
        Self { embedding, forward, backward }
    }
}

/// Contextual word embeddings `l: d x S` and query summary `q: d x 1`.
#[derive(Debug, Clone, Copy)]
pub struct LinguisticObjects {
    pub l: Var,
    pub q: Var,
    pub len: usize,
}

/// Embedding lookup: column `s` is row `tokens[s]` of the table.
pub fn embed(tape: &mut Tape, table: Var, tokens: &[usize]) -> Result<Var> {
    tape.gather_rows_as_columns(table, tokens)
}

/// Hidden states of one LSTM direction, listed in processing order.
fn lstm_pass(tape: &mut Tape, p: &LstmParams, gx: Var, order: &[usize]) -> Result<Vec<Var>> {
    let h = p.hidden;
    let w_hidden = tape.param(p.w_hidden);
    let bias = tape.param(p.bias);
    let mut hidden: Option<Var> = None;
    let mut cell: Option<Var> = None;
    let mut states = Vec::with_capacity(order.len());
    for &s in order {
        let x = tape.slice(gx, 1, s, 1)?;
        let mut pre = tape.add(x, bias)?;
        if let Some(hp) = hidden {
            let rec = tape.matmul(w_hidden, hp)?;
            pre = tape.add(pre, rec)?;
        }
        let i = tape.slice(pre, 0, 0, h)?;
        let i = tape.sigmoid(i)?;
        let f = tape.slice(pre, 0, h, h)?;
        let f = tape.sigmoid(f)?;
        let g = tape.slice(pre, 0, 2 * h, h)?;
        let g = tape.tanh(g)?;
        let o = tape.slice(pre, 0, 3 * h, h)?;
        let o = tape.sigmoid(o)?;
        let ig = tape.mul(i, g)?;
        let c = match cell {
            Some(cp) => {
                let fc = tape.mul(f, cp)?;
                tape.add(fc, ig)?
            }
            None => ig,
        };
        let tc = tape.tanh(c)?;
        let hn = tape.mul(o, tc)?;
        states.push(hn);
        hidden = Some(hn);
        cell = Some(c);
    }
    Ok(states)
}

fn hstack(tape: &mut Tape, cols: &[Var]) -> Result<Var> {
    let mut acc = cols[0];
    for &c in &cols[1..] {
        acc = tape.concat(acc, c, 1)?;
    }
    Ok(acc)
}

/// Directional hidden states, each `h x S` in original word order.
pub fn bilstm_states(tape: &mut Tape, p: &TextEncoderParams, e: Var) -> Result<(Var, Var)> {
    let s = tape.shape(e)[1];
    if s == 0 {
        return Err(Error::Invalid("empty question".into()));
    }
    let fw_in = tape.param(p.forward.w_input);
    let bw_in = tape.param(p.backward.w_input);
    let gx_f = tape.matmul(fw_in, e)?;
    let gx_b = tape.matmul(bw_in, e)?;
    let order: Vec<usize> = (0..s).collect();
    let fwd = lstm_pass(tape, &p.forward, gx_f, &order)?;
    let rev: Vec<usize> = order.iter().rev().copied().collect();
    let mut bwd = lstm_pass(tape, &p.backward, gx_b, &rev)?;
    bwd.reverse();
    Ok((hstack(tape, &fwd)?, hstack(tape, &bwd)?))
}

/// `e_s = [forward_s ; backward_s]`, `q = [backward_1 ; forward_S]`.
pub fn bilstm(tape: &mut Tape, p: &TextEncoderParams, e: Var) -> Result<LinguisticObjects> {
    let (fwd, bwd) = bilstm_states(tape, p, e)?;
    let s = tape.shape(fwd)[1];
    let l = tape.concat(fwd, bwd, 0)?;
    let first_bwd = tape.slice(bwd, 1, 0, 1)?;
    let last_fwd = tape.slice(fwd, 1, s - 1, 1)?;
    let q = tape.concat(first_bwd, last_fwd, 0)?;
    Ok(LinguisticObjects { l, q, len: s })
}

/// Embedding plus biLSTM for an unpadded token sequence.
pub fn encode_question(tape: &mut Tape, p: &TextEncoderParams, tokens: &[usize]) -> Result<LinguisticObjects> {
    if tokens.is_empty() {
        return Err(Error::Invalid("empty question".into()));
    }
    let table = tape.param(p.embedding);
    let e = embed(tape, table, tokens)?;
    bilstm(tape, p, e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(vocab: usize, word_dim: usize, d: usize) -> (ParamStore, TextEncoderParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = TextEncoderParams::register(&mut store, &mut rng, vocab, word_dim, d);
        (store, p)
    }

    #[test]
    fn vocabulary_round_trip_and_reserved_slots() {
        let v = Vocabulary::new(["what", "color", "is", "what"]);
        assert_eq!(v.len(), 5);
        assert_eq!(v.index_of("<pad>"), PAD);
        assert_eq!(v.index_of("zebra"), UNK);
        assert_eq!(v.encode(&["what", "is", "zebra"], 5), vec![2, 4, 1, 0, 0]);
        assert_eq!(v.encode(&["what", "is", "color"], 2), vec![2, 4]);
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::from_text("a\nb\n").is_err());
        assert_eq!(strip_padding(&[3, 4, 0, 0]), &[3, 4]);
    }

    #[test]
    fn repeated_token_gives_identical_columns() {
        let (store, p) = setup(6, 4, 8);
        let mut tape = Tape::with_params(&store);
        let table = tape.param(p.embedding);
        let e = embed(&mut tape, table, &[3, 3]).unwrap();
        let t = tape.tensor(e);
        assert_eq!(t.column_values(0), t.column_values(1));
        assert!(t.data().iter().all(|v| v.abs() <= EMBEDDING_INIT));
    }

    #[test]
    fn single_word_query_reorders_the_only_state() {
        let (store, p) = setup(6, 4, 8);
        let mut tape = Tape::with_params(&store);
        let lo = encode_question(&mut tape, &p, &[4]).unwrap();
        let l = tape.tensor(lo.l);
        let q = tape.tensor(lo.q);
        assert_eq!(l.shape(), [8, 1]);
        assert_eq!(q.shape(), [8, 1]);
        // q = [backward ; forward], e_1 = [forward ; backward]
        assert_eq!(&q.data()[..4], &l.data()[4..]);
        assert_eq!(&q.data()[4..], &l.data()[..4]);
    }

    #[test]
    fn zero_input_with_zero_bias_is_a_fixed_point() {
        let (mut store, p) = setup(6, 4, 8);
        for lstm in [&p.forward, &p.backward] {
            *store.get_mut(lstm.bias) = Tensor::zeros(16, 1);
        }
        let mut tape = Tape::with_params(&store);
        let e = tape.constant(Tensor::zeros(4, 3));
        let lo = bilstm(&mut tape, &p, e).unwrap();
        assert!(tape.value(lo.l).iter().all(|&v| v == 0.0));
        assert!(tape.value(lo.q).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reversal_swaps_directional_roles() {
        let (mut store, p) = setup(6, 4, 8);
        // share weights between directions so the swap is exact
        for (a, b) in [
            (p.forward.w_input, p.backward.w_input),
            (p.forward.w_hidden, p.backward.w_hidden),
            (p.forward.bias, p.backward.bias),
        ] {
            let w = store.get(a).clone();
            *store.get_mut(b) = w;
        }
        let x = Tensor::new(4, 3, (0..12).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let xr = x.permute_columns(&[2, 1, 0]);
        let mut tape = Tape::with_params(&store);
        let e = tape.constant(x);
        let er = tape.constant(xr);
        let (fwd, _) = bilstm_states(&mut tape, &p, e).unwrap();
        let (_, bwd_r) = bilstm_states(&mut tape, &p, er).unwrap();
        let a = tape.tensor(fwd);
        let b = tape.tensor(bwd_r).permute_columns(&[2, 1, 0]);
        assert_eq!(a, b);
    }

    #[test]
    fn output_shapes() {
        let (store, p) = setup(6, 4, 8);
        for s in 1..6 {
            let mut tape = Tape::with_params(&store);
            let tokens: Vec<usize> = (0..s).map(|i| 2 + i % 4).collect();
            let lo = encode_question(&mut tape, &p, &tokens).unwrap();
            assert_eq!(tape.shape(lo.l), [8, s]);
            assert_eq!(tape.shape(lo.q), [8, 1]);
        }
        let mut tape = Tape::with_params(&store);
        assert!(encode_question(&mut tape, &p, &[]).is_err());
        assert!(encode_question(&mut tape, &p, &[9]).is_err());
    }
}
