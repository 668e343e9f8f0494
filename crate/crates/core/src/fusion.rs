//! Image-text fusion over encoder hidden states.
//!
//! - [`Cm`]: concatenation of word, character and mean image features
//! - [`Vam`]: query-driven attention over the global grid, then a gate
//! - [`Cam`]: word-guided visual attention, image-guided textual attention,
//!   gated fusion and a residual filtration gate
//! - [`fuse_tam`]: text and regions encoded jointly; reads off the text rows
//!
//! Every module returns per-word fused states plus its attention and gate
//! values as named [`Diagnostic`]s.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureKind, ImageFeatures};
use crate::encoder::{weight, EncoderInput, HiddenStates, Linear};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Rows are probability distributions.
    Attention,
    /// A sub-block of an attention map; rows need not sum to one.
    AttentionBlock,
    /// Sigmoid gate values.
    Gate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub role: Role,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Diagnostic {
    fn read(g: &Graph<'_>, v: Var, role: Role) -> Self {
        let s = g.shape(v);
        Self {
            role,
            rows: s[0],
            cols: s[1..].iter().product(),
            values: g.value(v).to_vec(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    /// `words × d_model`.
    pub m: Var,
    pub diagnostics: BTreeMap<String, Diagnostic>,
}

fn require(f: &ImageFeatures, kind: FeatureKind, module: &str) -> Result<()> {
    if f.kind != kind {
        return Err(Error::contract(format!("{module} needs {kind} features, got {}", f.kind)));
    }
    Ok(())
}

fn image(g: &mut Graph<'_>, f: &ImageFeatures) -> Result<Var> {
    g.constant_matrix(f.rows(), f.dim(), f.data().to_vec())
}

fn repeat_row(g: &mut Graph<'_>, row: Var, n: usize) -> Result<Var> {
    g.gather_rows(row, &vec![0; n])
}

fn plain(g: &mut Graph<'_>, x: Var, w: ParamId) -> Result<Var> {
    let w = g.param(w);
    g.matmul(x, w)
}

/// Concatenation fusion. Each source is projected to a slice of `d_model`
/// (`d - 2·⌊d/3⌋` for words, `⌊d/3⌋` each for characters and image), the
/// slices are concatenated and mixed back to `d_model`.
#[derive(Debug, Clone, Copy)]
pub struct Cm {
    pub word: Linear,
    pub char: Linear,
    pub image: Linear,
    pub mix: Linear,
}

impl Cm {
    pub fn widths(d_model: usize) -> (usize, usize, usize) {
        let third = d_model / 3;
        (d_model - 2 * third, third, third)
    }

    pub fn new<R: Rng>(store: &mut ParamStore, d_model: usize, char_dim: usize, image_dim: usize, rng: &mut R) -> Result<Self> {
        if d_model < 3 {
            return Err(Error::Config("concatenation fusion needs d_model >= 3".into()));
        }
        let (pw, pc, pv) = Self::widths(d_model);
        Ok(Self {
            word: Linear::new(store, "fusion.cm.word", d_model, pw, rng)?,
            char: Linear::new(store, "fusion.cm.char", char_dim, pc, rng)?,
            image: Linear::new(store, "fusion.cm.image", image_dim, pv, rng)?,
            mix: Linear::new(store, "fusion.cm.mix", d_model, d_model, rng)?,
        })
    }

    /// `word_h: n × d_model`, `char_h: n × char_dim`, `global`: 49-region grid.
    pub fn fuse(&self, g: &mut Graph<'_>, word_h: Var, char_h: Var, global: &ImageFeatures) -> Result<FusionOutput> {
        require(global, FeatureKind::Global, "concatenation fusion")?;
        let n = g.shape(word_h)[0];
        if g.shape(char_h)[0] != n {
            return Err(Error::shape("fuse_cm", g.shape(word_h), g.shape(char_h)));
        }
        let xw = self.word.forward(g, word_h)?;
        let xc = self.char.forward(g, char_h)?;
        let v = image(g, global)?;
        let pv = self.image.forward(g, v)?;
        let summary = g.mean_rows(pv)?;
        let xv = repeat_row(g, summary, n)?;
        let cat = g.concat_cols(&[xw, xc, xv])?;
        let m = self.mix.forward(g, cat)?;
        Ok(FusionOutput {
            m,
            diagnostics: BTreeMap::new(),
        })
    }
}

/// Visual attention fusion:
/// `s_i = wᵀ tanh(W_q q + W_v v_i)`, `α = softmax(s)`, `c = Σ α_i W'_v v_i`,
/// `g_t = σ(W_g [h_t; c])`, `m_t = g_t ∘ h_t + (1 − g_t) ∘ tanh(W_c c)`.
#[derive(Debug, Clone, Copy)]
pub struct Vam {
    pub w_q: ParamId,
    pub w_v: Linear,
    pub score: ParamId,
    pub value: ParamId,
    pub gate: Linear,
    pub w_c: ParamId,
}

impl Vam {
    pub fn new<R: Rng>(store: &mut ParamStore, d_model: usize, image_dim: usize, rng: &mut R) -> Result<Self> {
        let d = d_model;
        Ok(Self {
            w_q: weight(store, "fusion.vam.w_q".into(), d, d, rng)?,
            w_v: Linear::new(store, "fusion.vam.w_v", image_dim, d, rng)?,
            score: weight(store, "fusion.vam.score".into(), d, 1, rng)?,
            value: weight(store, "fusion.vam.value".into(), image_dim, d, rng)?,
            gate: Linear::new(store, "fusion.vam.gate", 2 * d, d, rng)?,
            w_c: weight(store, "fusion.vam.w_c".into(), d, d, rng)?,
        })
    }

    /// `h: n × d_model` word states, `query: 1 × d_model`.
    pub fn fuse(&self, g: &mut Graph<'_>, h: Var, query: Var, global: &ImageFeatures) -> Result<FusionOutput> {
        require(global, FeatureKind::Global, "visual attention fusion")?;
        let n = g.shape(h)[0];
        let v = image(g, global)?;
        let pq = plain(g, query, self.w_q)?;
        let pv = self.w_v.forward(g, v)?;
        let pre = g.add_row(pv, pq)?;
        let t = g.tanh(pre)?;
        let s = plain(g, t, self.score)?;
        let s = g.transpose(s)?;
        let alpha = g.softmax(s, 1)?;
        let vals = plain(g, v, self.value)?;
        let c = g.matmul(alpha, vals)?;
        let cn = repeat_row(g, c, n)?;
        let hc = g.concat_cols(&[h, cn])?;
        let z = self.gate.forward(g, hc)?;
        let gate = g.sigmoid(z)?;
        let vc = plain(g, cn, self.w_c)?;
        let vc = g.tanh(vc)?;
        let keep = g.mul(gate, h)?;
        let inv = g.one_minus(gate)?;
        let mixed = g.mul(inv, vc)?;
        let m = g.add(keep, mixed)?;
        let mut diagnostics = BTreeMap::new();
        diagnostics.insert("region_attention".into(), Diagnostic::read(g, alpha, Role::Attention));
        diagnostics.insert("gate".into(), Diagnostic::read(g, gate, Role::Gate));
        Ok(FusionOutput { m, diagnostics })
    }
}

/// Co-attention fusion. Per word `t`:
/// 1. `α_t = softmax_i(w_aᵀ tanh(W_h h_t + W_r v_i))`, `v̂_t = Σ_i α_ti W v_i`
/// 2. `β_t = softmax_j(w_bᵀ tanh(W_p v̂_t + W_k h_j))`, `ĥ_t = Σ_j β_tj h_j`
/// 3. `g_t = σ(W_g [ĥ_t; v̂_t])`, `m_t = g_t ∘ tanh(W_u v̂_t) + (1 − g_t) ∘ ĥ_t`
/// 4. `s_t = σ(W_s [h_t; m_t])`, `u_t = h_t + s_t ∘ (W_m m_t)`
#[derive(Debug, Clone, Copy)]
pub struct Cam {
    pub w_h: ParamId,
    pub w_r: Linear,
    pub score_v: ParamId,
    pub value: ParamId,
    pub w_p: ParamId,
    pub w_k: Linear,
    pub score_t: ParamId,
    pub gate: Linear,
    pub w_u: ParamId,
    pub filtration: Linear,
    pub w_m: ParamId,
    /// Replaces `s_t` with this constant when set.
    pub filtration_override: Option<f64>,
}

impl Cam {
    pub fn new<R: Rng>(store: &mut ParamStore, d_model: usize, image_dim: usize, rng: &mut R) -> Result<Self> {
        let d = d_model;
        Ok(Self {
            w_h: weight(store, "fusion.cam.w_h".into(), d, d, rng)?,
            w_r: Linear::new(store, "fusion.cam.w_r", image_dim, d, rng)?,
            score_v: weight(store, "fusion.cam.score_v".into(), d, 1, rng)?,
            value: weight(store, "fusion.cam.value".into(), image_dim, d, rng)?,
            w_p: weight(store, "fusion.cam.w_p".into(), d, d, rng)?,
            w_k: Linear::new(store, "fusion.cam.w_k", d, d, rng)?,
            score_t: weight(store, "fusion.cam.score_t".into(), d, 1, rng)?,
            gate: Linear::new(store, "fusion.cam.gate", 2 * d, d, rng)?,
            w_u: weight(store, "fusion.cam.w_u".into(), d, d, rng)?,
            filtration: Linear::new(store, "fusion.cam.filtration", 2 * d, d, rng)?,
            w_m: weight(store, "fusion.cam.w_m".into(), d, d, rng)?,
            filtration_override: None,
        })
    }

    /// `h: n × d_model` word states.
    pub fn fuse(&self, g: &mut Graph<'_>, h: Var, global: &ImageFeatures) -> Result<FusionOutput> {
        require(global, FeatureKind::Global, "co-attention fusion")?;
        let n = g.shape(h)[0];
        let r = global.rows();
        let v = image(g, global)?;

        // word-guided visual attention
        let qh = plain(g, h, self.w_h)?;
        let kv = self.w_r.forward(g, v)?;
        let pair = g.pairwise_sum(qh, kv)?;
        let t = g.tanh(pair)?;
        let s = plain(g, t, self.score_v)?;
        let s = g.reshape(s, &[n, r])?;
        let alpha = g.softmax(s, 1)?;
        let vals = plain(g, v, self.value)?;
        let v_hat = g.matmul(alpha, vals)?;

        // image-guided textual attention
        let qv = plain(g, v_hat, self.w_p)?;
        let kh = self.w_k.forward(g, h)?;
        let pair = g.pairwise_sum(qv, kh)?;
        let t = g.tanh(pair)?;
        let s = plain(g, t, self.score_t)?;
        let s = g.reshape(s, &[n, n])?;
        let beta = g.softmax(s, 1)?;
        let h_hat = g.matmul(beta, h)?;

        // gated multimodal fusion
        let cat = g.concat_cols(&[h_hat, v_hat])?;
        let z = self.gate.forward(g, cat)?;
        let gate = g.sigmoid(z)?;
        let vis = plain(g, v_hat, self.w_u)?;
        let vis = g.tanh(vis)?;
        let a = g.mul(gate, vis)?;
        let inv = g.one_minus(gate)?;
        let b = g.mul(inv, h_hat)?;
        let m = g.add(a, b)?;

        // filtration gate
        let s_gate = match self.filtration_override {
            Some(c) => g.constant(Tensor::new(vec![n, g.shape(h)[1]], vec![c; g.value(h).len()])?),
            None => {
                let hm = g.concat_cols(&[h, m])?;
                let z = self.filtration.forward(g, hm)?;
                g.sigmoid(z)?
            }
        };
        let wm = plain(g, m, self.w_m)?;
        let filtered = g.mul(s_gate, wm)?;
        let u = g.add(h, filtered)?;

        let mut diagnostics = BTreeMap::new();
        diagnostics.insert("visual_attention".into(), Diagnostic::read(g, alpha, Role::Attention));
        diagnostics.insert("textual_attention".into(), Diagnostic::read(g, beta, Role::Attention));
        diagnostics.insert("fusion_gate".into(), Diagnostic::read(g, gate, Role::Gate));
        diagnostics.insert("filtration_gate".into(), Diagnostic::read(g, s_gate, Role::Gate));
        Ok(FusionOutput { m: u, diagnostics })
    }
}

/// Single-stream fusion: `hs` comes from encoding text and region slots
/// together. Returns the word rows and, per layer and head, the
/// word-to-region block of the attention map.
pub fn fuse_tam(g: &mut Graph<'_>, hs: &HiddenStates, input: &EncoderInput) -> Result<FusionOutput> {
    let regions = input.region_positions();
    if regions.is_empty() {
        return Err(Error::contract("single-stream fusion needs at least one region slot"));
    }
    let words = input.word_positions();
    let m = g.gather_rows(hs.h, &words)?;
    let mut diagnostics = BTreeMap::new();
    for (l, layer) in hs.attention.iter().enumerate() {
        for (k, &a) in layer.iter().enumerate() {
            let full = g.value(a);
            let width = g.shape(a)[1];
            let mut values = Vec::with_capacity(words.len() * regions.len());
            for &w in &words {
                values.extend(regions.iter().map(|&r| full[w * width + r]));
            }
            diagnostics.insert(
                format!("layer{l}.head{k}.text_to_region"),
                Diagnostic {
                    role: Role::AttentionBlock,
                    rows: words.len(),
                    cols: regions.len(),
                    values,
                },
            );
        }
    }
    Ok(FusionOutput { m, diagnostics })
}
