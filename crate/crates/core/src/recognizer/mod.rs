//! Attention-based recognition: holistic encoder, 2-D attention and greedy
//! decoding over one fused pyramid level.
//!
//! Per decode step `t` the decoder cell consumes the embedding of the previous
//! symbol (the start symbol at `t = 0`), then
//!
//! ```text
//! e_ij  = tanh(conv3x3(F)_ij + W_h h_t)       centre tap = W_F, ring = 8-neighbour term
//! a_ij  = softmax_ij(w_e . e_ij)
//! g_t   = sum_ij a_ij F_ij
//! y_t   = softmax(W_p [h_t; g_t] + b_p)
//! ```
//!
//! The 3x3 attention convolution is zero padded, so border positions simply
//! have fewer neighbour contributions. Decoding is greedy; ties in the argmax
//! go to the lowest class id.

mod lstm;
mod symbols;

pub use lstm::{BiLstmLayer, LstmCell};
pub use symbols::SymbolTable;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{conv2d, max_pool2d, Archive, Tensor};

pub const START: usize = 0;
pub const END: usize = 1;
pub const PAD: usize = 2;
/// Number of reserved class ids at the start of the symbol table.
pub const RESERVED: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecognizerDims {
    /// Feature channels `C` of the fused maps.
    pub channels: usize,
    /// Decoder hidden size `D`; the bidirectional encoder uses `D/2` per direction.
    pub hidden: usize,
    /// Attention projection size.
    pub attention: usize,
    /// Symbol embedding size `E`.
    pub embedding: usize,
    /// Number of classes `K`, reserved ids included.
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecognizerWeights {
    pub encoder: [BiLstmLayer; 2],
    pub decoder: LstmCell,
    /// `[A, C, 3, 3]`; centre tap is `W_F`, the other eight taps the neighbour weights.
    pub att_feat: Tensor,
    /// `W_h`, `[A, D]`.
    pub att_hidden: Tensor,
    /// `w_e`, `[A]`.
    pub att_score: Tensor,
    /// `W_p`, `[K, D + C]`.
    pub out_weight: Tensor,
    pub out_bias: Tensor,
    /// `[K, E]`.
    pub embedding: Tensor,
}

impl RecognizerWeights {
    pub fn seeded(seed: u64, dims: RecognizerDims) -> Result<Self> {
        let RecognizerDims {
            channels: c,
            hidden: d,
            attention: a,
            embedding: e,
            classes: k,
        } = dims;
        if d == 0 || d % 2 != 0 {
            return Err(Error::config(format!(
                "hidden size must be even and positive, got {d}"
            )));
        }
        if k < RESERVED {
            return Err(Error::config(format!(
                "need at least {RESERVED} classes, got {k}"
            )));
        }
        let half = d / 2;
        let bi = |l: usize, input: usize| BiLstmLayer {
            fwd: LstmCell::seeded(seed, &format!("rec.enc.l{l}.fwd"), input, half),
            bwd: LstmCell::seeded(seed, &format!("rec.enc.l{l}.bwd"), input, half),
        };
        Ok(Self {
            encoder: [bi(1, c), bi(2, d)],
            decoder: LstmCell::seeded(seed, "rec.dec", e, d),
            att_feat: init::fan_in_uniform(seed, "rec.att.w_feat", &[a, c, 3, 3], c * 9),
            att_hidden: init::fan_in_uniform(seed, "rec.att.w_hidden", &[a, d], d),
            att_score: init::fan_in_uniform(seed, "rec.att.w_score", &[a], a),
            out_weight: init::fan_in_uniform(seed, "rec.out.weight", &[k, d + c], d + c),
            out_bias: init::fan_in_uniform(seed, "rec.out.bias", &[k], d + c),
            embedding: init::uniform(seed, "rec.embedding", &[k, e], 1.0),
        })
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        let bi = |l: usize| -> Result<BiLstmLayer> {
            Ok(BiLstmLayer {
                fwd: LstmCell::from_archive(ar, &format!("rec.enc.l{l}.fwd"))?,
                bwd: LstmCell::from_archive(ar, &format!("rec.enc.l{l}.bwd"))?,
            })
        };
        let w = Self {
            encoder: [bi(1)?, bi(2)?],
            decoder: LstmCell::from_archive(ar, "rec.dec")?,
            att_feat: ar.get("rec.att.w_feat")?.clone(),
            att_hidden: ar.get("rec.att.w_hidden")?.clone(),
            att_score: ar.get("rec.att.w_score")?.clone(),
            out_weight: ar.get("rec.out.weight")?.clone(),
            out_bias: ar.get("rec.out.bias")?.clone(),
            embedding: ar.get("rec.embedding")?.clone(),
        };
        w.dims()?;
        Ok(w)
    }

    pub fn store(&self, ar: &mut Archive) {
        for (i, layer) in self.encoder.iter().enumerate() {
            layer.fwd.store(ar, &format!("rec.enc.l{}.fwd", i + 1));
            layer.bwd.store(ar, &format!("rec.enc.l{}.bwd", i + 1));
        }
        self.decoder.store(ar, "rec.dec");
        ar.insert("rec.att.w_feat", self.att_feat.clone());
        ar.insert("rec.att.w_hidden", self.att_hidden.clone());
        ar.insert("rec.att.w_score", self.att_score.clone());
        ar.insert("rec.out.weight", self.out_weight.clone());
        ar.insert("rec.out.bias", self.out_bias.clone());
        ar.insert("rec.embedding", self.embedding.clone());
    }

    /// Checks that all shapes agree and returns the implied dimensions.
    pub fn dims(&self) -> Result<RecognizerDims> {
        let mismatch = |what: &str| Error::shape(format!("recognizer weights: {what}"));
        let ws = self.att_feat.expect_rank(4, "rec.att.w_feat")?;
        let (a, c) = (ws[0], ws[1]);
        if ws[2] != 3 || ws[3] != 3 {
            return Err(mismatch("attention kernel must be 3x3"));
        }
        let d = self.decoder.hidden();
        let (k, e) = self.embedding.dims2("rec.embedding")?;
        self.decoder.validate("rec.dec")?;
        if self.decoder.input() != e {
            return Err(mismatch("decoder input size differs from embedding size"));
        }
        if !d.is_multiple_of(2) {
            return Err(mismatch("decoder hidden size must be even"));
        }
        for (l, layer) in self.encoder.iter().enumerate() {
            layer.fwd.validate("rec.enc")?;
            layer.bwd.validate("rec.enc")?;
            let want_in = if l == 0 { c } else { d };
            for cell in [&layer.fwd, &layer.bwd] {
                if cell.hidden() != d / 2 || cell.input() != want_in {
                    return Err(mismatch("encoder layer sizes inconsistent with C and D"));
                }
            }
        }
        if self.att_hidden.shape() != [a, d] || self.att_score.shape() != [a] {
            return Err(mismatch("attention projections inconsistent"));
        }
        if self.out_weight.shape() != [k, d + c] || self.out_bias.shape() != [k] {
            return Err(mismatch("output projection must be [K, D + C]"));
        }
        if k < RESERVED {
            return Err(mismatch("fewer classes than reserved ids"));
        }
        Ok(RecognizerDims {
            channels: c,
            hidden: d,
            attention: a,
            embedding: e,
            classes: k,
        })
    }

    fn expect_channels(&self, fused: &Tensor) -> Result<(usize, usize, usize)> {
        let (c, h, w) = fused.dims3("fused feature")?;
        let want = self.att_feat.shape()[1];
        if c != want {
            return Err(Error::shape(format!(
                "feature map has {c} channels, recognizer expects {want}"
            )));
        }
        Ok((c, h, w))
    }

    /// Embedding row of `symbol`.
    pub fn embed(&self, symbol: usize) -> Result<Tensor> {
        let (k, e) = self.embedding.dims2("rec.embedding")?;
        if symbol >= k {
            return Err(Error::shape(format!(
                "symbol {symbol} out of range for {k} classes"
            )));
        }
        Ok(Tensor::vector(
            self.embedding.data()[symbol * e..(symbol + 1) * e].to_vec(),
        ))
    }
}

/// Holistic feature `h_w`: max-pool over height, run the two bidirectional
/// layers over the width sequence and concatenate the final forward and
/// backward states of the top layer.
pub fn encode_holistic(fused: &Tensor, w: &RecognizerWeights) -> Result<Tensor> {
    Ok(Tensor::vector(
        encode_holistic_f64(fused, w)?
            .iter()
            .map(|&v| v as f32)
            .collect(),
    ))
}

fn encode_holistic_f64(fused: &Tensor, w: &RecognizerWeights) -> Result<Vec<f64>> {
    let (c, h, width) = w.expect_channels(fused)?;
    w.dims()?;
    if h == 0 || width == 0 {
        return Err(Error::shape("encode_holistic: empty feature map"));
    }
    let pooled = max_pool2d(fused, (h, 1), (h, 1))?;
    let seq: Vec<Vec<f64>> = (0..width)
        .map(|t| {
            (0..c)
                .map(|ch| pooled.data()[ch * width + t] as f64)
                .collect()
        })
        .collect();
    let l1 = w.encoder[0].run(&seq);
    let l2 = w.encoder[1].run(&l1.sequence);
    let mut out = l2.last_fwd;
    out.extend(l2.last_bwd);
    Ok(out)
}

/// Attention map `[H,W]` and glimpse `[C]` for one decoder state.
pub fn attention_step(
    fused: &Tensor,
    h_t: &[f32],
    w: &RecognizerWeights,
) -> Result<(Tensor, Tensor)> {
    let h64: Vec<f64> = h_t.iter().map(|&v| v as f64).collect();
    attention_step_f64(fused, &h64, w)
}

/// `W_f * F`, the state-independent half of the attention scores.
fn feature_projection(fused: &Tensor, w: &RecognizerWeights) -> Result<Tensor> {
    w.expect_channels(fused)?;
    let (a, _) = w.att_hidden.dims2("rec.att.w_hidden")?;
    conv2d(fused, &w.att_feat, &Tensor::zeros(&[a]), 1, 1)
}

fn attention_step_f64(
    fused: &Tensor,
    h_t: &[f64],
    w: &RecognizerWeights,
) -> Result<(Tensor, Tensor)> {
    attend(fused, &feature_projection(fused, w)?, h_t, w)
}

fn attend(
    fused: &Tensor,
    proj: &Tensor,
    h_t: &[f64],
    w: &RecognizerWeights,
) -> Result<(Tensor, Tensor)> {
    let (c, h, width) = w.expect_channels(fused)?;
    let (a, d) = w.att_hidden.dims2("rec.att.w_hidden")?;
    if h_t.len() != d {
        return Err(Error::shape(format!(
            "hidden state has {} entries, expected {d}",
            h_t.len()
        )));
    }
    let wh = w.att_hidden.data();
    let hproj: Vec<f64> = (0..a)
        .map(|r| (0..d).map(|k| wh[r * d + k] as f64 * h_t[k]).sum())
        .collect();
    let we = w.att_score.data();
    let n = h * width;
    let pd = proj.data();
    let mut scores = vec![0f64; n];
    for (r, (&hp, &wv)) in hproj.iter().zip(we).enumerate() {
        let plane = &pd[r * n..(r + 1) * n];
        for (s, &p) in scores.iter_mut().zip(plane) {
            *s += wv as f64 * (p as f64 + hp).tanh();
        }
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in &mut scores {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in &mut scores {
        *s /= sum;
    }
    let fd = fused.data();
    let glimpse: Vec<f32> = (0..c)
        .map(|ch| {
            fd[ch * n..(ch + 1) * n]
                .iter()
                .zip(&scores)
                .map(|(&f, &al)| f as f64 * al)
                .sum::<f64>() as f32
        })
        .collect();
    let alpha = Tensor::new(&[h, width], scores.iter().map(|&v| v as f32).collect())?;
    Ok((alpha, Tensor::vector(glimpse)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeStep {
    #[serde(skip)]
    pub attention: Tensor,
    #[serde(skip)]
    pub glimpse: Tensor,
    #[serde(skip)]
    pub hidden: Tensor,
    #[serde(skip)]
    pub logits: Tensor,
    pub symbol: usize,
}

impl DecodeStep {
    /// Shannon entropy (nats) of the attention map.
    pub fn attention_entropy(&self) -> f64 {
        self.attention
            .data()
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -(p as f64) * (p as f64).ln())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionTrace {
    pub steps: Vec<DecodeStep>,
}

impl AttentionTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn symbols(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.symbol).collect()
    }

    /// Steps that predicted a text instance, i.e. everything before the end symbol.
    pub fn instances(&self) -> &[DecodeStep] {
        let n = self
            .steps
            .iter()
            .position(|s| s.symbol == END)
            .unwrap_or(self.steps.len());
        &self.steps[..n]
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

struct Decoder<'a> {
    fused: &'a Tensor,
    proj: Tensor,
    w: &'a RecognizerWeights,
    h: Vec<f64>,
    c: Vec<f64>,
}

impl<'a> Decoder<'a> {
    fn new(fused: &'a Tensor, w: &'a RecognizerWeights) -> Result<Self> {
        let h = encode_holistic_f64(fused, w)?;
        let c = vec![0.0; h.len()];
        let proj = feature_projection(fused, w)?;
        Ok(Self {
            fused,
            proj,
            w,
            h,
            c,
        })
    }

    fn step(&mut self, prev: usize) -> Result<DecodeStep> {
        let x: Vec<f64> = self
            .w
            .embed(prev)?
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect();
        let (h, c) = self.w.decoder.step(&x, &self.h, &self.c);
        self.h = h;
        self.c = c;
        let (attention, glimpse) = attend(self.fused, &self.proj, &self.h, self.w)?;
        let (k, cols) = self.w.out_weight.dims2("rec.out.weight")?;
        let wp = self.w.out_weight.data();
        let bp = self.w.out_bias.data();
        let features: Vec<f64> = self
            .h
            .iter()
            .copied()
            .chain(glimpse.data().iter().map(|&v| v as f64))
            .collect();
        let logits: Vec<f32> = (0..k)
            .map(|r| {
                (bp[r] as f64
                    + wp[r * cols..(r + 1) * cols]
                        .iter()
                        .zip(&features)
                        .map(|(&wv, &f)| wv as f64 * f)
                        .sum::<f64>()) as f32
            })
            .collect();
        let symbol = argmax(&logits);
        Ok(DecodeStep {
            attention,
            glimpse,
            hidden: Tensor::vector(self.h.iter().map(|&v| v as f32).collect()),
            logits: Tensor::vector(logits),
            symbol,
        })
    }
}

/// Greedy decoding for at most `max_steps` steps, stopping after the end symbol.
pub fn decode(fused: &Tensor, w: &RecognizerWeights, max_steps: usize) -> Result<AttentionTrace> {
    if max_steps == 0 {
        return Err(Error::config("max_steps must be >= 1"));
    }
    let mut dec = Decoder::new(fused, w)?;
    let mut trace = AttentionTrace::default();
    let mut prev = START;
    for _ in 0..max_steps {
        let step = dec.step(prev)?;
        prev = step.symbol;
        trace.steps.push(step);
        if prev == END {
            break;
        }
    }
    Ok(trace)
}

/// Teacher-forced decoding: step `t` is fed `symbols[t-1]` (start at `t = 0`)
/// regardless of what was predicted. One step per given symbol.
pub fn decode_forced(
    fused: &Tensor,
    w: &RecognizerWeights,
    symbols: &[usize],
) -> Result<AttentionTrace> {
    let mut dec = Decoder::new(fused, w)?;
    let mut trace = AttentionTrace::default();
    let mut prev = START;
    for &s in symbols {
        trace.steps.push(dec.step(prev)?);
        prev = s;
    }
    Ok(trace)
}

/// `-log softmax(logits)[target]` in f64.
pub fn cross_entropy(logits: &[f32], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::shape(format!(
            "target class {target} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits
        .iter()
        .map(|&v| v as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .map(|&v| (v as f64 - max).exp())
            .sum::<f64>()
            .ln();
    Ok((lse - logits[target] as f64).max(0.0))
}

/// Sum over steps of the negative log-probability of the ground-truth symbol.
///
/// Ground truth symbol `t` is scored against trace step `t`. Steps past the end
/// of the ground truth are not scored, so callers that want the end symbol
/// supervised append [`END`] to `gt`. A ground truth longer than the trace is
/// an error.
pub fn recognition_loss(trace: &AttentionTrace, gt: &[usize]) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::Degenerate("empty ground-truth sequence".into()));
    }
    if gt.len() > trace.len() {
        return Err(Error::shape(format!(
            "ground truth has {} symbols but the trace only {} steps",
            gt.len(),
            trace.len()
        )));
    }
    trace
        .steps
        .iter()
        .zip(gt)
        .map(|(s, &y)| cross_entropy(s.logits.data(), y))
        .sum()
}
