//! Contextual encoder: embeddings, a pre-LN transformer, and the BiLSTM
//! query used by visual attention.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, ImageFeatures, SEGMENT_REGION};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub char_dim: usize,
    pub char_filters: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 64,
            char_dim: 16,
            char_filters: 16,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("char_dim", self.char_dim),
            ("char_filters", self.char_filters),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Inverted dropout driven by a caller-owned stream.
pub struct Dropout<'r> {
    rate: f64,
    rng: &'r mut ChaCha8Rng,
}

impl<'r> Dropout<'r> {
    pub fn new(rate: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Self { rate, rng }
    }

    pub fn apply(&mut self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        if self.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.rate);
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, m)
    }
}

fn maybe_dropout(d: &mut Option<&mut Dropout<'_>>, g: &mut Graph<'_>, x: Var) -> Result<Var> {
    match d {
        Some(d) => d.apply(g, x),
        None => Ok(x),
    }
}

/// `fan_in × fan_out` weight with uniform `±1/sqrt(fan_in)` init.
pub(crate) fn weight<R: Rng>(
    store: &mut ParamStore,
    name: String,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<ParamId> {
    store.add_uniform(name, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Weight plus zero bias.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w: weight(store, format!("{name}.w"), fan_in, fan_out, rng)?,
            b: store.add_zeros(format!("{name}.b"), &[fan_out])?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_filled(format!("{name}.gamma"), &[d], 1.0)?,
            beta: store.add_zeros(format!("{name}.beta"), &[d])?,
        })
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt, 1e-5)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// One unpadded or padded encoder row. Positions with `mask == false` are
/// padding: they never act as attention keys.
#[derive(Debug, Clone)]
pub struct EncoderInput {
    pub tokens: Vec<usize>,
    /// Character ids per position; empty for special, region and pad slots.
    pub chars: Vec<Vec<usize>>,
    pub segments: Vec<u8>,
    pub mask: Vec<bool>,
    pub region_rows: Vec<Option<usize>>,
    pub image: Option<Arc<ImageFeatures>>,
    /// Words occupy positions `1..=words`.
    pub words: usize,
}

impl EncoderInput {
    /// Row `i` of `batch`, without its padding.
    pub fn from_batch(batch: &Batch, i: usize) -> Self {
        let row = batch.row(i);
        Self {
            tokens: row.tokens.to_vec(),
            chars: (0..row.len()).map(|p| row.char_ids(p).to_vec()).collect(),
            segments: row.segments.to_vec(),
            mask: vec![true; row.len()],
            region_rows: row.region_rows.to_vec(),
            image: batch.images[i].clone(),
            words: row.words,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn word_positions(&self) -> Vec<usize> {
        (1..1 + self.words).collect()
    }

    pub fn region_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&p| self.segments[p] == SEGMENT_REGION).collect()
    }

    /// Appends `extra` masked pad slots.
    pub fn padded(&self, extra: usize) -> Self {
        let mut out = self.clone();
        for _ in 0..extra {
            out.tokens.push(crate::data::PAD);
            out.chars.push(Vec::new());
            out.segments.push(crate::data::SEGMENT_TEXT);
            out.mask.push(false);
            out.region_rows.push(None);
        }
        out
    }
}

/// Encoder output for one row.
#[derive(Debug, Clone)]
pub struct HiddenStates {
    /// `positions × d_model`.
    pub h: Var,
    /// `[layer][head]` attention maps, `positions × positions`.
    pub attention: Vec<Vec<Var>>,
    /// Character features per position (`positions × char_filters`), zero
    /// where a position has no characters.
    pub chars: Var,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    vocab_size: usize,
    num_chars: usize,
    word_emb: ParamId,
    char_emb: ParamId,
    char_conv: Linear,
    char_proj: ParamId,
    pos_emb: ParamId,
    seg_emb: ParamId,
    region_pos: ParamId,
    region_proj: Option<Linear>,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
}

impl Encoder {
    /// `region_dim` enables region slots fed by image vectors of that size.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: EncoderConfig,
        vocab_size: usize,
        num_chars: usize,
        region_dim: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let emb = 0.1;
        let word_emb = store.add_uniform("encoder.word_emb", &[vocab_size, d], emb, rng)?;
        let char_emb = store.add_uniform("encoder.char_emb", &[num_chars, config.char_dim], emb, rng)?;
        let char_conv = Linear::new(store, "encoder.char_conv", 3 * config.char_dim, config.char_filters, rng)?;
        let char_proj = weight(store, "encoder.char_proj".into(), config.char_filters, d, rng)?;
        let pos_emb = store.add_uniform("encoder.pos_emb", &[config.max_len, d], emb, rng)?;
        let seg_emb = store.add_uniform("encoder.seg_emb", &[3, d], emb, rng)?;
        let region_pos = store.add_uniform("encoder.region_pos", &[1, d], emb, rng)?;
        let region_proj = match region_dim {
            Some(dv) => Some(Linear::new(store, "encoder.region_proj", dv, d, rng)?),
            None => None,
        };
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("encoder.layer{l}");
            blocks.push(Block {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
                q: Linear::new(store, &format!("{p}.attn.q"), d, d, rng)?,
                k: Linear::new(store, &format!("{p}.attn.k"), d, d, rng)?,
                v: Linear::new(store, &format!("{p}.attn.v"), d, d, rng)?,
                o: Linear::new(store, &format!("{p}.attn.o"), d, d, rng)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
                ff1: Linear::new(store, &format!("{p}.ff1"), d, config.d_ff, rng)?,
                ff2: Linear::new(store, &format!("{p}.ff2"), config.d_ff, d, rng)?,
            });
        }
        let final_ln = LayerNorm::new(store, "encoder.final_ln", d)?;
        Ok(Self {
            config,
            vocab_size,
            num_chars,
            word_emb,
            char_emb,
            char_conv,
            char_proj,
            pos_emb,
            seg_emb,
            region_pos,
            region_proj,
            blocks,
            final_ln,
        })
    }

    /// Per-window activations `tanh(W [c_{i-1}; c_i; c_{i+1}] + b)` for every
    /// word (zero-padded at both ends), with each word's `[start, end)` row range.
    pub fn char_windows(&self, g: &mut Graph<'_>, words: &[&[usize]]) -> Result<(Var, Vec<(usize, usize)>)> {
        let mut left = Vec::new();
        let mut mid = Vec::new();
        let mut right = Vec::new();
        let mut segments = Vec::with_capacity(words.len());
        for w in words {
            if w.is_empty() {
                return Err(Error::contract("character features of an empty word"));
            }
            if let Some(&c) = w.iter().find(|&&c| c >= self.num_chars) {
                return Err(Error::contract(format!("char id {c} out of range")));
            }
            let start = mid.len();
            for i in 0..w.len() {
                left.push(i.checked_sub(1).map(|j| w[j]));
                mid.push(Some(w[i]));
                right.push(w.get(i + 1).copied());
            }
            segments.push((start, mid.len()));
        }
        if words.is_empty() {
            return Err(Error::contract("character features of no words"));
        }
        let table = g.param(self.char_emb);
        let l = g.gather_rows_opt(table, &left)?;
        let m = g.gather_rows_opt(table, &mid)?;
        let r = g.gather_rows_opt(table, &right)?;
        let x = g.concat_cols(&[l, m, r])?;
        let pre = self.char_conv.forward(g, x)?;
        Ok((g.tanh(pre)?, segments))
    }

    /// Max-pooled width-3 convolution, one `char_filters` row per word.
    pub fn char_features(&self, g: &mut Graph<'_>, words: &[&[usize]]) -> Result<Var> {
        let (win, segs) = self.char_windows(g, words)?;
        g.segment_max(win, &segs)
    }

    /// Sum of word (or projected region), character, position and segment
    /// embeddings: `positions × d_model`.
    pub fn embed(&self, g: &mut Graph<'_>, input: &EncoderInput) -> Result<(Var, Var)> {
        let n = input.len();
        let d = self.config.d_model;
        if n == 0
            || input.chars.len() != n
            || input.segments.len() != n
            || input.mask.len() != n
            || input.region_rows.len() != n
        {
            return Err(Error::contract("encoder input fields have inconsistent lengths"));
        }
        if !input.mask.iter().any(|&m| m) {
            return Err(Error::contract("encoder input with no unmasked position"));
        }
        if let Some(&t) = input.tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::contract(format!("token id {t} out of range for vocab of {}", self.vocab_size)));
        }
        if input.segments.iter().any(|&s| s > SEGMENT_REGION) {
            return Err(Error::contract("segment id above 2"));
        }
        let is_region: Vec<bool> = input.segments.iter().map(|&s| s == SEGMENT_REGION).collect();
        let sequential = is_region.iter().filter(|r| !**r).count();
        if sequential > self.config.max_len {
            return Err(Error::contract(format!(
                "{sequential} positions exceed max_len {}",
                self.config.max_len
            )));
        }

        let word_idx: Vec<Option<usize>> = input
            .tokens
            .iter()
            .zip(&is_region)
            .map(|(&t, &r)| (!r).then_some(t))
            .collect();
        let table = g.param(self.word_emb);
        let mut x = g.gather_rows_opt(table, &word_idx)?;

        if is_region.iter().any(|&r| r) {
            let proj = self
                .region_proj
                .ok_or_else(|| Error::contract("region slots given to an encoder without region projection"))?;
            let img = input
                .image
                .as_ref()
                .ok_or_else(|| Error::contract("region slots without image features"))?;
            let slots: Vec<Option<usize>> = input
                .region_rows
                .iter()
                .zip(&is_region)
                .map(|(&row, &r)| if r { row } else { None })
                .collect();
            if slots.iter().zip(&is_region).any(|(s, &r)| r && s.is_none_or(|i| i >= img.rows())) {
                return Err(Error::contract("region slot without a valid feature row"));
            }
            let v = g.constant(Tensor::matrix(img.rows(), img.dim(), img.data().to_vec())?);
            let pv = proj.forward(g, v)?;
            let regions = g.gather_rows_opt(pv, &slots)?;
            x = g.add(x, regions)?;
            let rp = g.param(self.region_pos);
            let marks: Vec<Option<usize>> = is_region.iter().map(|&r| r.then_some(0)).collect();
            let rpos = g.gather_rows_opt(rp, &marks)?;
            x = g.add(x, rpos)?;
        }

        let with_chars: Vec<usize> = (0..n).filter(|&p| !input.chars[p].is_empty()).collect();
        let chars = if with_chars.is_empty() {
            g.constant(Tensor::zeros(&[n, self.config.char_filters]))
        } else {
            let words: Vec<&[usize]> = with_chars.iter().map(|&p| input.chars[p].as_slice()).collect();
            let feats = self.char_features(g, &words)?;
            let mut slot = vec![None; n];
            for (k, &p) in with_chars.iter().enumerate() {
                slot[p] = Some(k);
            }
            g.gather_rows_opt(feats, &slot)?
        };
        let cp = g.param(self.char_proj);
        let cproj = g.matmul(chars, cp)?;
        x = g.add(x, cproj)?;

        let mut next = 0;
        let pos_idx: Vec<Option<usize>> = is_region
            .iter()
            .map(|&r| {
                if r {
                    None
                } else {
                    next += 1;
                    Some(next - 1)
                }
            })
            .collect();
        let pt = g.param(self.pos_emb);
        let pos = g.gather_rows_opt(pt, &pos_idx)?;
        x = g.add(x, pos)?;
        let st = g.param(self.seg_emb);
        let seg_idx: Vec<usize> = input.segments.iter().map(|&s| s as usize).collect();
        let seg = g.gather_rows(st, &seg_idx)?;
        x = g.add(x, seg)?;
        debug_assert_eq!(g.shape(x), &[n, d]);
        Ok((x, chars))
    }

    pub fn encode(
        &self,
        g: &mut Graph<'_>,
        input: &EncoderInput,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<HiddenStates> {
        let (emb, chars) = self.embed(g, input)?;
        let mut x = maybe_dropout(&mut dropout, g, emb)?;
        let heads = self.config.n_heads;
        let dh = self.config.d_model / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attention = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let a_in = b.ln1.forward(g, x)?;
            let q = b.q.forward(g, a_in)?;
            let k = b.k.forward(g, a_in)?;
            let v = b.v.forward(g, a_in)?;
            let mut outs = Vec::with_capacity(heads);
            let mut maps = Vec::with_capacity(heads);
            for h in 0..heads {
                let (s, e) = (h * dh, (h + 1) * dh);
                let qh = g.slice_cols(q, s, e)?;
                let kh = g.slice_cols(k, s, e)?;
                let vh = g.slice_cols(v, s, e)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale)?;
                let att = g.masked_softmax_rows(scores, &input.mask)?;
                outs.push(g.matmul(att, vh)?);
                maps.push(att);
            }
            let cat = g.concat_cols(&outs)?;
            let o = b.o.forward(g, cat)?;
            let o = maybe_dropout(&mut dropout, g, o)?;
            x = g.add(x, o)?;
            let f_in = b.ln2.forward(g, x)?;
            let f = b.ff1.forward(g, f_in)?;
            let f = g.relu(f)?;
            let f = b.ff2.forward(g, f)?;
            let f = maybe_dropout(&mut dropout, g, f)?;
            x = g.add(x, f)?;
            attention.push(maps);
        }
        let h = self.final_ln.forward(g, x)?;
        Ok(HiddenStates { h, attention, chars })
    }
}

#[derive(Debug, Clone, Copy)]
struct LstmCell {
    w: Linear,
    hidden: usize,
}

impl LstmCell {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let w = Linear::new(store, name, input + hidden, 4 * hidden, rng)?;
        // forget-gate bias of one
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
        store.set_data(w.b, bias)?;
        Ok(Self { w, hidden })
    }

    fn run(&self, g: &mut Graph<'_>, xs: &[Var]) -> Result<Var> {
        let hd = self.hidden;
        let mut h = g.constant(Tensor::zeros(&[1, hd]));
        let mut c = g.constant(Tensor::zeros(&[1, hd]));
        for &x in xs {
            let xh = g.concat_cols(&[x, h])?;
            let z = self.w.forward(g, xh)?;
            let zi = g.slice_cols(z, 0, hd)?;
            let zf = g.slice_cols(z, hd, 2 * hd)?;
            let zg = g.slice_cols(z, 2 * hd, 3 * hd)?;
            let zo = g.slice_cols(z, 3 * hd, 4 * hd)?;
            let i = g.sigmoid(zi)?;
            let f = g.sigmoid(zf)?;
            let gg = g.tanh(zg)?;
            let o = g.sigmoid(zo)?;
            let fc = g.mul(f, c)?;
            let ig = g.mul(i, gg)?;
            c = g.add(fc, ig)?;
            let tc = g.tanh(c)?;
            h = g.mul(o, tc)?;
        }
        Ok(h)
    }
}

/// Bidirectional LSTM summarising the text positions of a row into one
/// `1 × d_model` query.
#[derive(Debug, Clone, Copy)]
pub struct LstmQuery {
    fwd: LstmCell,
    bwd: LstmCell,
    proj: Linear,
}

impl LstmQuery {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_model: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            fwd: LstmCell::new(store, &format!("{name}.fwd"), d_model, d_model, rng)?,
            bwd: LstmCell::new(store, &format!("{name}.bwd"), d_model, d_model, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), 2 * d_model, d_model, rng)?,
        })
    }

    /// Runs over the rows of `h` where `text_mask` is set.
    pub fn query(&self, g: &mut Graph<'_>, h: Var, text_mask: &[bool]) -> Result<Var> {
        if text_mask.len() != g.shape(h)[0] {
            return Err(Error::shape("lstm_query", g.shape(h), &[text_mask.len()]));
        }
        let rows: Vec<usize> = (0..text_mask.len()).filter(|&i| text_mask[i]).collect();
        if rows.is_empty() {
            return Err(Error::contract("lstm query over zero text positions"));
        }
        let mut xs = Vec::with_capacity(rows.len());
        for &r in &rows {
            xs.push(g.slice_rows(h, r, r + 1)?);
        }
        let f = self.fwd.run(g, &xs)?;
        xs.reverse();
        let b = self.bwd.run(g, &xs)?;
        let cat = g.concat_cols(&[f, b])?;
        self.proj.forward(g, cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_len: 16,
            char_dim: 4,
            char_filters: 5,
            dropout: 0.0,
        }
    }

    fn setup(region_dim: Option<usize>) -> (ParamStore, Encoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, tiny(), 20, 10, region_dim, &mut rng).unwrap();
        (store, enc)
    }

    fn input(tokens: &[usize]) -> EncoderInput {
        let n = tokens.len();
        let mut chars: Vec<Vec<usize>> = tokens.iter().map(|&t| vec![2 + t % 7, 3]).collect();
        chars[0].clear();
        chars[n - 1].clear();
        EncoderInput {
            tokens: tokens.to_vec(),
            chars,
            segments: vec![0; n],
            mask: vec![true; n],
            region_rows: vec![None; n],
            image: None,
            words: n - 2,
        }
    }

    fn rows(g: &Graph<'_>, v: Var, take: usize) -> Vec<f64> {
        let c = g.shape(v)[1];
        g.value(v)[..take * c].to_vec()
    }

    #[test]
    fn config_validation() {
        assert!(tiny().validate().is_ok());
        assert!(EncoderConfig { n_heads: 3, ..tiny() }.validate().is_err());
        assert!(EncoderConfig { d_ff: 0, ..tiny() }.validate().is_err());
        assert!(EncoderConfig::default().validate().is_ok());
    }

    #[test]
    fn output_shape_and_position_term() {
        let (store, enc) = setup(None);
        let mut g = Graph::with_params(&store);
        let inp = input(&[3, 7, 9, 11, 12, 7, 2]);
        let (x, _) = enc.embed(&mut g, &inp).unwrap();
        assert_eq!(g.shape(x), &[7, 8]);
        let v = g.value(x);
        assert_ne!(&v[8..16], &v[5 * 8..6 * 8], "same token, different positions");
        let hs = enc.encode(&mut g, &inp, None).unwrap();
        assert_eq!(g.shape(hs.h), &[7, 8]);
        for layer in &hs.attention {
            for &a in layer {
                for r in g.value(a).chunks(7) {
                    assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn single_real_token_attends_to_itself() {
        let (store, enc) = setup(None);
        let mut g = Graph::with_params(&store);
        let mut inp = input(&[3, 5, 2]).padded(3);
        inp.mask = vec![false, true, false, false, false, false];
        let hs = enc.encode(&mut g, &inp, None).unwrap();
        for layer in &hs.attention {
            for &a in layer {
                let v = g.value(a);
                assert_eq!(&v[6..12], &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn padding_does_not_change_real_positions() {
        let (store, enc) = setup(None);
        let base = input(&[3, 7, 9, 2]);
        let mut g = Graph::with_params(&store);
        let a = enc.encode(&mut g, &base, None).unwrap();
        for extra in [1, 5] {
            let b = enc.encode(&mut g, &base.padded(extra), None).unwrap();
            let (x, y) = (rows(&g, a.h, 4), rows(&g, b.h, 4));
            for (p, q) in x.iter().zip(&y) {
                assert!((p - q).abs() <= 1e-9);
            }
        }
        // swap the content of two pad slots
        let mut p1 = base.padded(2);
        p1.tokens[4] = 5;
        p1.tokens[5] = 6;
        let mut p2 = p1.clone();
        p2.tokens.swap(4, 5);
        let c = enc.encode(&mut g, &p1, None).unwrap();
        let d = enc.encode(&mut g, &p2, None).unwrap();
        let (x, y) = (rows(&g, c.h, 4), rows(&g, d.h, 4));
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() <= 1e-9);
        }
    }

    #[test]
    fn char_features_max_pool_dominates_windows() {
        let (store, enc) = setup(None);
        let mut g = Graph::with_params(&store);
        let word = [4usize, 5, 6];
        let (win, segs) = enc.char_windows(&mut g, &[&word]).unwrap();
        assert_eq!(segs, vec![(0, 3)]);
        let pooled = enc.char_features(&mut g, &[&word]).unwrap();
        let f = enc.config.char_filters;
        let w = g.value(win).to_vec();
        let p = g.value(pooled).to_vec();
        for j in 0..f {
            for i in 0..3 {
                assert!(p[j] >= w[i * f + j]);
            }
        }
        let single = enc.char_features(&mut g, &[&[4usize][..]]).unwrap();
        assert!(g.value(single).iter().all(|x| x.is_finite()));
        let twice = enc.char_features(&mut g, &[&word, &word]).unwrap();
        let t = g.value(twice);
        assert_eq!(&t[..f], &t[f..]);
        assert!(enc.char_features(&mut g, &[&[][..]]).is_err());
    }

    #[test]
    fn out_of_range_token_is_contract_error() {
        let (store, enc) = setup(None);
        let mut g = Graph::with_params(&store);
        assert!(matches!(enc.encode(&mut g, &input(&[3, 99, 2]), None), Err(Error::Contract(_))));
    }

    #[test]
    fn lstm_query_shape_and_pad_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let lq = LstmQuery::new(&mut store, "q", 8, &mut rng).unwrap();
        let h = Tensor::matrix(3, 8, (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let mut hp = h.data().to_vec();
        hp.extend(vec![9.0; 16]);
        let mut g = Graph::with_params(&store);
        let a = g.constant(h);
        let b = g.constant(Tensor::matrix(5, 8, hp).unwrap());
        let qa = lq.query(&mut g, a, &[true, true, true]).unwrap();
        let qb = lq.query(&mut g, b, &[true, true, true, false, false]).unwrap();
        assert_eq!(g.shape(qa), &[1, 8]);
        assert_eq!(g.value(qa), g.value(qb));
        assert!(lq.query(&mut g, a, &[false, false, false]).is_err());
        let one = lq.query(&mut g, a, &[false, true, false]).unwrap();
        assert!(g.value(one).iter().all(|x| x.is_finite()));
    }

    #[test]
    fn dropout_off_is_deterministic() {
        let (store, enc) = setup(None);
        let inp = input(&[3, 7, 9, 2]);
        let run = || {
            let mut g = Graph::with_params(&store);
            let hs = enc.encode(&mut g, &inp, None).unwrap();
            g.value(hs.h).to_vec()
        };
        assert_eq!(run(), run());
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::with_params(&store);
        let mut d1 = Dropout::new(0.5, &mut r1);
        let x = enc.encode(&mut g, &inp, Some(&mut d1)).unwrap();
        let mut d2 = Dropout::new(0.5, &mut r2);
        let y = enc.encode(&mut g, &inp, Some(&mut d2)).unwrap();
        assert_eq!(g.value(x.h), g.value(y.h));
    }
}
