//! Linear-chain CRF: sequence scores, forward algorithm, NLL and Viterbi.
//!
//! `transitions[i][j]` scores label `j` following label `i`. All recursions
//! run in log space; the only `-inf` values appear inside decode-time BIO
//! masking and never reach a tensor.

use rand::Rng;

use crate::data::Label;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Transition and boundary scores for `labels` tags.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    pub labels: usize,
    /// Row-major `labels × labels`.
    pub transitions: Vec<f64>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl CrfParams {
    pub fn zeros(labels: usize) -> Self {
        Self {
            labels,
            transitions: vec![0.0; labels * labels],
            start: vec![0.0; labels],
            end: vec![0.0; labels],
        }
    }

    pub fn random<R: Rng>(labels: usize, scale: f64, rng: &mut R) -> Self {
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        Self {
            labels,
            transitions: draw(labels * labels),
            start: draw(labels),
            end: draw(labels),
        }
    }

    pub fn transition(&self, from: usize, to: usize) -> f64 {
        self.transitions[from * self.labels + to]
    }

    pub fn set_transition(&mut self, from: usize, to: usize, v: f64) {
        self.transitions[from * self.labels + to] = v;
    }

    fn validate(&self) -> Result<()> {
        if self.transitions.len() != self.labels * self.labels
            || self.start.len() != self.labels
            || self.end.len() != self.labels
        {
            return Err(Error::contract("CRF parameter sizes disagree with label count"));
        }
        Ok(())
    }
}

/// Per-position label scores for one sentence, `n × labels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Emissions {
    n: usize,
    labels: usize,
    scores: Vec<f64>,
}

impl Emissions {
    pub fn new(n: usize, labels: usize, scores: Vec<f64>) -> Result<Self> {
        if n == 0 || labels == 0 {
            return Err(Error::contract("emissions need n >= 1 and at least one label"));
        }
        if scores.len() != n * labels {
            return Err(Error::shape("emissions", &[n, labels], &[scores.len()]));
        }
        if scores.iter().any(|x| !x.is_finite()) {
            return Err(Error::contract("non-finite emission score"));
        }
        Ok(Self { n, labels, scores })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::shape("emissions", t.shape(), &[]));
        }
        Self::new(t.rows(), t.cols(), t.data().to_vec())
    }

    pub fn random<R: Rng>(n: usize, labels: usize, scale: f64, rng: &mut R) -> Self {
        let scores = (0..n * labels).map(|_| rng.gen_range(-scale..scale)).collect();
        Self { n, labels, scores }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn at(&self, t: usize, y: usize) -> f64 {
        self.scores[t * self.labels + y]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn scores_mut(&mut self) -> &mut [f64] {
        &mut self.scores
    }

    fn view<'a>(&'a self, p: &'a CrfParams) -> Result<CrfView<'a>> {
        p.validate()?;
        if p.labels != self.labels {
            return Err(Error::contract(format!(
                "emissions have {} labels, CRF has {}",
                self.labels, p.labels
            )));
        }
        Ok(CrfView {
            emissions: &self.scores,
            n: self.n,
            labels: self.labels,
            transitions: &p.transitions,
            start: &p.start,
            end: &p.end,
        })
    }
}

pub fn score_sequence(e: &Emissions, p: &CrfParams, y: &[usize]) -> Result<f64> {
    e.view(p)?.score(y)
}

pub fn log_partition(e: &Emissions, p: &CrfParams) -> Result<f64> {
    Ok(e.view(p)?.forward().1)
}

pub fn nll(e: &Emissions, p: &CrfParams, gold: &[usize]) -> Result<f64> {
    let v = e.view(p)?;
    Ok(v.forward().1 - v.score(gold)?)
}

/// Posterior `P(y_t = j)` for every position, `n × labels` row-major.
pub fn marginals(e: &Emissions, p: &CrfParams) -> Result<Vec<f64>> {
    let v = e.view(p)?;
    let (alpha, log_z) = v.forward();
    let beta = v.backward_scores();
    Ok(alpha
        .iter()
        .zip(&beta)
        .map(|(a, b)| (a + b - log_z).exp())
        .collect())
}

/// Best label sequence and its score. Ties go to the lower label index.
///
/// With `constrain_bio`, the nine canonical BIO labels are assumed and
/// sequences that open an entity with `I-X` or continue a different type
/// are excluded.
pub fn viterbi(e: &Emissions, p: &CrfParams, constrain_bio: bool) -> Result<(Vec<usize>, f64)> {
    let v = e.view(p)?;
    let mask = if constrain_bio {
        if e.labels != Label::COUNT {
            return Err(Error::contract(format!(
                "BIO-constrained decoding needs {} labels, got {}",
                Label::COUNT,
                e.labels
            )));
        }
        Some(BioMask::canonical())
    } else {
        None
    };
    Ok(v.viterbi(mask.as_ref()))
}

/// Which starts and transitions are legal under BIO.
#[derive(Debug, Clone)]
pub struct BioMask {
    start: Vec<bool>,
    transition: Vec<bool>,
    labels: usize,
}

impl BioMask {
    pub fn canonical() -> Self {
        let labels: Vec<Label> = Label::all().collect();
        let l = labels.len();
        let start = labels.iter().map(|y| y.can_start()).collect();
        let mut transition = vec![false; l * l];
        for (i, a) in labels.iter().enumerate() {
            for (j, b) in labels.iter().enumerate() {
                transition[i * l + j] = b.can_follow(*a);
            }
        }
        Self {
            start,
            transition,
            labels: l,
        }
    }

    pub fn allows_start(&self, y: usize) -> bool {
        self.start[y]
    }

    pub fn allows(&self, from: usize, to: usize) -> bool {
        self.transition[from * self.labels + to]
    }
}

/// Borrowed CRF inputs; shared by the plain functions and the tape op.
pub(crate) struct CrfView<'a> {
    pub emissions: &'a [f64],
    pub n: usize,
    pub labels: usize,
    pub transitions: &'a [f64],
    pub start: &'a [f64],
    pub end: &'a [f64],
}

/// Gradients of the NLL with respect to each CRF input.
#[derive(Debug, Clone)]
pub(crate) struct CrfGrads {
    pub emissions: Vec<f64>,
    pub transitions: Vec<f64>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl CrfView<'_> {
    fn em(&self, t: usize, y: usize) -> f64 {
        self.emissions[t * self.labels + y]
    }

    fn tr(&self, i: usize, j: usize) -> f64 {
        self.transitions[i * self.labels + j]
    }

    fn score(&self, y: &[usize]) -> Result<f64> {
        if y.len() != self.n {
            return Err(Error::contract(format!(
                "label sequence length {} != {} positions",
                y.len(),
                self.n
            )));
        }
        if let Some(bad) = y.iter().find(|&&l| l >= self.labels) {
            return Err(Error::contract(format!(
                "label index {bad} >= label count {}",
                self.labels
            )));
        }
        let mut s = self.start[y[0]] + self.end[y[self.n - 1]];
        for t in 0..self.n {
            s += self.em(t, y[t]);
        }
        for t in 1..self.n {
            s += self.tr(y[t - 1], y[t]);
        }
        Ok(s)
    }

    /// Forward log-scores `alpha` (n × L) and `log Z`.
    fn forward(&self) -> (Vec<f64>, f64) {
        let l = self.labels;
        let mut alpha = vec![0.0; self.n * l];
        for j in 0..l {
            alpha[j] = self.start[j] + self.em(0, j);
        }
        for t in 1..self.n {
            for j in 0..l {
                let prev = &alpha[(t - 1) * l..t * l];
                let lse = logsumexp((0..l).map(|i| prev[i] + self.tr(i, j)));
                alpha[t * l + j] = lse + self.em(t, j);
            }
        }
        let last = &alpha[(self.n - 1) * l..];
        let log_z = logsumexp((0..l).map(|j| last[j] + self.end[j]));
        (alpha, log_z)
    }

    /// Backward log-scores `beta` (n × L), `beta[n-1] = end`.
    fn backward_scores(&self) -> Vec<f64> {
        let l = self.labels;
        let mut beta = vec![0.0; self.n * l];
        beta[(self.n - 1) * l..].copy_from_slice(self.end);
        for t in (0..self.n - 1).rev() {
            for i in 0..l {
                let next = &beta[(t + 1) * l..(t + 2) * l];
                beta[t * l + i] =
                    logsumexp((0..l).map(|j| self.tr(i, j) + self.em(t + 1, j) + next[j]));
            }
        }
        beta
    }

    pub(crate) fn nll_with_grads(&self, gold: &[usize]) -> Result<(f64, CrfGrads)> {
        let gold_score = self.score(gold)?;
        let l = self.labels;
        let (alpha, log_z) = self.forward();
        let beta = self.backward_scores();

        let mut d_em: Vec<f64> = alpha
            .iter()
            .zip(&beta)
            .map(|(a, b)| (a + b - log_z).exp())
            .collect();
        let mut d_start = d_em[..l].to_vec();
        let mut d_end = d_em[(self.n - 1) * l..].to_vec();
        let mut d_tr = vec![0.0; l * l];
        for t in 0..self.n - 1 {
            for i in 0..l {
                let a = alpha[t * l + i];
                for j in 0..l {
                    d_tr[i * l + j] +=
                        (a + self.tr(i, j) + self.em(t + 1, j) + beta[(t + 1) * l + j] - log_z)
                            .exp();
                }
            }
        }
        for (t, &y) in gold.iter().enumerate() {
            d_em[t * l + y] -= 1.0;
        }
        for w in gold.windows(2) {
            d_tr[w[0] * l + w[1]] -= 1.0;
        }
        d_start[gold[0]] -= 1.0;
        d_end[gold[self.n - 1]] -= 1.0;

        Ok((
            log_z - gold_score,
            CrfGrads {
                emissions: d_em,
                transitions: d_tr,
                start: d_start,
                end: d_end,
            },
        ))
    }

    fn viterbi(&self, mask: Option<&BioMask>) -> (Vec<usize>, f64) {
        let l = self.labels;
        let start_ok = |j: usize| mask.map_or(true, |m| m.allows_start(j));
        let trans_ok = |i: usize, j: usize| mask.map_or(true, |m| m.allows(i, j));

        let mut delta = vec![f64::NEG_INFINITY; self.n * l];
        let mut back = vec![0usize; self.n * l];
        for j in 0..l {
            if start_ok(j) {
                delta[j] = self.start[j] + self.em(0, j);
            }
        }
        for t in 1..self.n {
            for j in 0..l {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for i in 0..l {
                    if !trans_ok(i, j) {
                        continue;
                    }
                    let s = delta[(t - 1) * l + i] + self.tr(i, j);
                    if s > best {
                        best = s;
                        arg = i;
                    }
                }
                delta[t * l + j] = best + self.em(t, j);
                back[t * l + j] = arg;
            }
        }
        let mut best = f64::NEG_INFINITY;
        let mut last = 0;
        for j in 0..l {
            let s = delta[(self.n - 1) * l + j] + self.end[j];
            if s > best {
                best = s;
                last = j;
            }
        }
        let mut path = vec![0; self.n];
        path[self.n - 1] = last;
        for t in (1..self.n).rev() {
            path[t - 1] = back[t * l + path[t]];
        }
        (path, best)
    }
}

/// CRF parameters as trainable tensors, plus the emission projection.
#[derive(Debug, Clone)]
pub struct CrfLayer {
    pub labels: usize,
    pub emission_weight: ParamId,
    pub emission_bias: ParamId,
    pub transitions: ParamId,
    pub start: ParamId,
    pub end: ParamId,
}

impl CrfLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        labels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let scale = 1.0 / (d_model as f64).sqrt();
        Ok(Self {
            labels,
            emission_weight: store.add_uniform(
                format!("{prefix}.emission.weight"),
                &[d_model, labels],
                scale,
                rng,
            )?,
            emission_bias: store.add_zeros(format!("{prefix}.emission.bias"), &[labels])?,
            transitions: store.add_zeros(format!("{prefix}.transitions"), &[labels, labels])?,
            start: store.add_zeros(format!("{prefix}.start"), &[labels])?,
            end: store.add_zeros(format!("{prefix}.end"), &[labels])?,
        })
    }

    /// Projects `n × d_model` fused states to `n × labels` emission scores.
    pub fn emissions(&self, g: &mut Graph<'_>, states: Var) -> Result<Var> {
        let w = g.param(self.emission_weight);
        let b = g.param(self.emission_bias);
        g.linear(states, w, b)
    }

    pub fn nll(&self, g: &mut Graph<'_>, emissions: Var, gold: &[usize]) -> Result<Var> {
        let t = g.param(self.transitions);
        let s = g.param(self.start);
        let e = g.param(self.end);
        g.crf_nll(emissions, t, s, e, gold)
    }

    pub fn params(&self, store: &ParamStore) -> CrfParams {
        CrfParams {
            labels: self.labels,
            transitions: store.get(self.transitions).data().to_vec(),
            start: store.get(self.start).data().to_vec(),
            end: store.get(self.end).data().to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Every label sequence of length `n` over `l` labels, lexicographic.
    fn all_sequences(n: usize, l: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..n {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..l).map(move |y| {
                        let mut q = p.clone();
                        q.push(y);
                        q
                    })
                })
                .collect();
        }
        out
    }

    fn brute_log_z(e: &Emissions, p: &CrfParams) -> f64 {
        let scores: Vec<f64> = all_sequences(e.len(), e.labels())
            .iter()
            .map(|y| score_sequence(e, p, y).unwrap())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
    }

    fn brute_argmax(
        e: &Emissions,
        p: &CrfParams,
        legal: impl Fn(&[usize]) -> bool,
    ) -> (Vec<usize>, f64) {
        let mut best = (vec![], f64::NEG_INFINITY);
        for y in all_sequences(e.len(), e.labels()) {
            if !legal(&y) {
                continue;
            }
            let s = score_sequence(e, p, &y).unwrap();
            if s > best.1 {
                best = (y, s);
            }
        }
        best
    }

    #[test]
    fn score_zero_params_single_position() {
        let e = Emissions::new(1, 3, vec![0.0; 3]).unwrap();
        assert_eq!(score_sequence(&e, &CrfParams::zeros(3), &[2]).unwrap(), 0.0);
    }

    #[test]
    fn score_single_transition_term() {
        let e = Emissions::new(2, 3, vec![0.0; 6]).unwrap();
        let mut p = CrfParams::zeros(3);
        p.set_transition(1, 2, 3.0);
        assert_eq!(score_sequence(&e, &p, &[1, 2]).unwrap(), 3.0);
        assert_eq!(score_sequence(&e, &p, &[2, 1]).unwrap(), 0.0);
    }

    #[test]
    fn score_matches_hand_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let e = Emissions::random(4, 3, 2.0, &mut rng);
        let p = CrfParams::random(3, 2.0, &mut rng);
        let y = [2, 0, 0, 1];
        let hand = p.start[2]
            + e.at(0, 2)
            + e.at(1, 0)
            + e.at(2, 0)
            + e.at(3, 1)
            + p.transition(2, 0)
            + p.transition(0, 0)
            + p.transition(0, 1)
            + p.end[1];
        assert!((score_sequence(&e, &p, &y).unwrap() - hand).abs() < 1e-12);
    }

    #[test]
    fn score_rejects_out_of_range_label() {
        let e = Emissions::new(2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(
            score_sequence(&e, &CrfParams::zeros(3), &[0, 3]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn log_partition_uniform() {
        let e = Emissions::new(3, 9, vec![0.0; 27]).unwrap();
        let z = log_partition(&e, &CrfParams::zeros(9)).unwrap();
        assert!((z - 3.0 * 9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn log_partition_base_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = Emissions::random(1, 4, 1.0, &mut rng);
        let p = CrfParams::random(4, 1.0, &mut rng);
        let direct = logsumexp((0..4).map(|j| p.start[j] + e.at(0, j) + p.end[j]));
        assert!((log_partition(&e, &p).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn log_partition_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = Emissions::random(4, 3, 2.0, &mut rng);
        let p = CrfParams::random(3, 2.0, &mut rng);
        assert!((log_partition(&e, &p).unwrap() - brute_log_z(&e, &p)).abs() < 1e-9);
    }

    #[test]
    fn nll_near_zero_with_dominant_gold() {
        let gold = [1, 4, 0, 2];
        let mut scores = vec![0.0; 4 * 5];
        for (t, &y) in gold.iter().enumerate() {
            scores[t * 5 + y] = 100.0;
        }
        let e = Emissions::new(4, 5, scores).unwrap();
        let loss = nll(&e, &CrfParams::zeros(5), &gold).unwrap();
        assert!((0.0..=1e-6).contains(&loss), "{loss}");
    }

    #[test]
    fn nll_uniform_model() {
        let e = Emissions::new(5, 9, vec![0.0; 45]).unwrap();
        let loss = nll(&e, &CrfParams::zeros(9), &[0, 1, 2, 0, 3]).unwrap();
        assert!((loss - 5.0 * 9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn emission_gradient_is_marginal_minus_gold() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e = Emissions::random(3, 3, 1.5, &mut rng);
        let p = CrfParams::random(3, 1.5, &mut rng);
        let gold = [0, 2, 1];

        // marginals by enumeration
        let log_z = brute_log_z(&e, &p);
        let mut marg = vec![0.0; 9];
        for y in all_sequences(3, 3) {
            let w = (score_sequence(&e, &p, &y).unwrap() - log_z).exp();
            for (t, &yt) in y.iter().enumerate() {
                marg[t * 3 + yt] += w;
            }
        }
        let v = e.view(&p).unwrap();
        let (_, grads) = v.nll_with_grads(&gold).unwrap();
        for t in 0..3 {
            for j in 0..3 {
                let expect = marg[t * 3 + j] - if gold[t] == j { 1.0 } else { 0.0 };
                assert!((grads.emissions[t * 3 + j] - expect).abs() < 1e-9);
                // central differences
                let h = 1e-5;
                let mut ep = e.clone();
                ep.scores_mut()[t * 3 + j] += h;
                let mut em = e.clone();
                em.scores_mut()[t * 3 + j] -= h;
                let fd = (nll(&ep, &p, &gold).unwrap() - nll(&em, &p, &gold).unwrap()) / (2.0 * h);
                assert!((fd - expect).abs() / 1f64.max(expect.abs()) < 1e-4);
            }
        }
        let m = marginals(&e, &p).unwrap();
        for (a, b) in m.iter().zip(&marg) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn viterbi_per_step_argmax_without_transitions() {
        let dominant = [3, 0, 0, 8, 5];
        let mut scores = vec![0.0; 5 * 9];
        for (t, &y) in dominant.iter().enumerate() {
            scores[t * 9 + y] = 5.0;
        }
        let e = Emissions::new(5, 9, scores).unwrap();
        let (path, score) = viterbi(&e, &CrfParams::zeros(9), false).unwrap();
        assert_eq!(path, dominant);
        assert_eq!(score, 25.0);
    }

    #[test]
    fn viterbi_ties_prefer_lower_index() {
        let e = Emissions::new(3, 4, vec![0.0; 12]).unwrap();
        let (path, _) = viterbi(&e, &CrfParams::zeros(4), false).unwrap();
        assert_eq!(path, vec![0, 0, 0]);
    }

    #[test]
    fn viterbi_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let e = Emissions::random(4, 3, 2.0, &mut rng);
        let p = CrfParams::random(3, 2.0, &mut rng);
        let (path, score) = viterbi(&e, &p, false).unwrap();
        let (bp, bs) = brute_argmax(&e, &p, |_| true);
        assert_eq!(path, bp);
        assert!((score - bs).abs() < 1e-9);
    }

    #[test]
    fn constrained_viterbi_never_opens_with_inside() {
        // emissions favour (O, I-PER)
        let o = Label::O.index();
        let i_per = Label::parse("I-PER").unwrap().index();
        let mut scores = vec![0.0; 2 * 9];
        scores[o] = 4.0;
        scores[9 + i_per] = 6.0;
        let e = Emissions::new(2, 9, scores).unwrap();
        let p = CrfParams::zeros(9);

        let (free, _) = viterbi(&e, &p, false).unwrap();
        assert_eq!(free, vec![o, i_per]);

        let (path, score) = viterbi(&e, &p, true).unwrap();
        let mask = BioMask::canonical();
        let legal = |y: &[usize]| {
            mask.allows_start(y[0]) && y.windows(2).all(|w| mask.allows(w[0], w[1]))
        };
        assert!(legal(&path));
        let (bp, bs) = brute_argmax(&e, &p, legal);
        assert_eq!(path, bp);
        assert!((score - bs).abs() < 1e-9);
    }

    #[test]
    fn constrained_viterbi_needs_nine_labels() {
        let e = Emissions::new(2, 3, vec![0.0; 6]).unwrap();
        assert!(viterbi(&e, &CrfParams::zeros(3), true).is_err());
    }
}
