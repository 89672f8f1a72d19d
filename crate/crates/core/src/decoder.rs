//! Length-aware, grammar-constrained Viterbi decoding.
//!
//! A segmentation is scored as
//! `sum_t score(t, c_n(t)) + sum_n [ln p(len_n | c_n) + ln p(c_n | h_{n-1})]`
//! where `h_{n-1}` is the grammar context before segment `n`. The decoder
//! finds the exact argmax over all segmentations whose segments are at most
//! `max_len` frames long and whose label sequence is derived by the grammar
//! from its start to a final nonterminal.
//!
//! Search state is a pair `(class, nonterminal)`: the label of the running
//! segment and the context reached by the rule that opened it. For each state
//! and frame `t0` only the segment-opening score is stored; the score of a
//! segment ending at `t` is rebuilt from per-class prefix sums, so a frame
//! costs `O(states * max_len + rules)` and the whole decode is linear in `T`.
//!
//! Ties are broken deterministically: among equal scores the predecessor
//! with the smaller length wins, then the smaller class, then the smaller
//! nonterminal id. [`brute_force_decode`] applies the same order.

use ndarray::Array2;

use crate::error::{invalid, Error, Result};
use crate::grammar::{Grammar, LOG_ZERO};
use crate::network::PosteriorMatrix;
use crate::stats::{log_visual_score, ClassPrior};
use crate::ClassId;

/// Default cap on segment length, in frames.
pub const DEFAULT_MAX_LEN: usize = 2000;

/// Largest sequence the exhaustive oracle will enumerate.
pub const BRUTE_FORCE_MAX_FRAMES: usize = 12;

/// Segment duration scores `ln p(len | class)`.
pub trait DurationModel {
    fn log_prob(&self, len: usize, class: ClassId) -> Result<f64>;

    /// Scores for lengths `0..=max_len`; index 0 is never read.
    fn class_table(&self, class: ClassId, max_len: usize) -> Result<Vec<f64>> {
        let mut table = vec![LOG_ZERO; max_len + 1];
        for (len, v) in table.iter_mut().enumerate().skip(1) {
            *v = self.log_prob(len, class)?;
        }
        Ok(table)
    }
}

/// Constant duration score; disables length modeling.
#[derive(Clone, Copy, Debug, Default)]
pub struct FlatDuration;

impl DurationModel for FlatDuration {
    fn log_prob(&self, _len: usize, _class: ClassId) -> Result<f64> {
        Ok(0.0)
    }
}

fn sanitize(v: f64) -> f64 {
    if v.is_finite() {
        v.max(LOG_ZERO)
    } else {
        LOG_ZERO
    }
}

/// Per-frame log visual scores, `T x C`, all finite.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix(Array2<f64>);

impl ScoreMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return invalid("score matrix must have at least one frame and one class");
        }
        if let Some(((t, c), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return invalid(format!("non-finite score {v} at frame {t}, class {c}"));
        }
        Ok(ScoreMatrix(values))
    }

    /// Hybrid scores `ln p(c|x_t) - ln p(c)`.
    pub fn from_posteriors(post: &PosteriorMatrix, prior: &ClassPrior) -> Result<Self> {
        let log_post = post.log_probs();
        if log_post.ncols() != prior.num_classes() {
            return invalid("posterior and prior disagree on the number of classes");
        }
        let values = Array2::from_shape_fn(log_post.dim(), |(t, c)| {
            log_visual_score(log_post[[t, c]], prior, c)
        });
        ScoreMatrix::new(values)
    }

    pub fn frames(&self) -> usize {
        self.0.nrows()
    }

    pub fn classes(&self) -> usize {
        self.0.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }
}

/// Labeled segments covering a sequence, plus the log score of the path.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub labels: Vec<ClassId>,
    pub lengths: Vec<usize>,
    pub score: f64,
}

impl Segmentation {
    /// Run-length contraction of framewise labels. The score is set to 0.
    pub fn from_framewise(frames: &[ClassId]) -> Self {
        let mut labels = Vec::new();
        let mut lengths: Vec<usize> = Vec::new();
        for &c in frames {
            match labels.last() {
                Some(&last) if last == c => *lengths.last_mut().unwrap() += 1,
                _ => {
                    labels.push(c);
                    lengths.push(1);
                }
            }
        }
        Segmentation { labels, lengths, score: 0.0 }
    }

    pub fn frames(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// `(class, start, end)` for each segment, `end` exclusive.
    pub fn spans(&self) -> impl Iterator<Item = (ClassId, usize, usize)> + '_ {
        let mut start = 0;
        self.labels.iter().zip(&self.lengths).map(move |(&c, &len)| {
            let span = (c, start, start + len);
            start += len;
            span
        })
    }
}

/// Label of every frame, `c_n(t)` for `t = 0..T`.
pub fn expand_framewise(seg: &Segmentation) -> Vec<ClassId> {
    seg.labels
        .iter()
        .zip(&seg.lengths)
        .flat_map(|(&c, &len)| std::iter::repeat_n(c, len))
        .collect()
}

/// Scores a given segmentation directly: frame scores, length terms and the
/// best grammar derivation of its label sequence.
pub fn score_segmentation<D: DurationModel + ?Sized>(
    scores: &ScoreMatrix,
    grammar: &Grammar,
    durations: &D,
    labels: &[ClassId],
    lengths: &[usize],
) -> Result<f64> {
    if labels.len() != lengths.len() || lengths.iter().sum::<usize>() != scores.frames() {
        return invalid("segmentation does not cover the score matrix");
    }
    let context = grammar
        .derivation_log_prob(labels)
        .ok_or_else(|| Error::NoPath("label sequence rejected by the grammar".into()))?;
    let v = scores.values();
    let mut total = context;
    let mut t = 0;
    for (&c, &len) in labels.iter().zip(lengths) {
        if len == 0 {
            return invalid("zero-length segment");
        }
        total += (t..t + len).map(|u| v[[u, c]]).sum::<f64>();
        total += sanitize(durations.log_prob(len, c)?);
        t += len;
    }
    Ok(total)
}

#[derive(Clone, Copy)]
struct Back {
    state: u32,
    len: u32,
}

const NO_BACK: Back = Back { state: u32::MAX, len: 0 };

fn check_inputs(scores: &ScoreMatrix, grammar: &Grammar, max_len: usize) -> Result<()> {
    if max_len == 0 {
        return invalid("max_len must be at least 1");
    }
    if grammar.num_classes() != scores.classes() {
        return invalid(format!(
            "grammar has {} classes but scores have {}",
            grammar.num_classes(),
            scores.classes()
        ));
    }
    Ok(())
}

/// Exact Viterbi decoding under `grammar` with segment lengths `<= max_len`.
pub fn viterbi_decode<D: DurationModel + ?Sized>(
    scores: &ScoreMatrix,
    grammar: &Grammar,
    durations: &D,
    max_len: usize,
) -> Result<Segmentation> {
    check_inputs(scores, grammar, max_len)?;
    let frames = scores.frames();
    let cap = max_len.min(frames);

    let mut states: Vec<(ClassId, usize)> =
        grammar.rules().iter().map(|r| (r.label, r.target.0)).collect();
    states.sort_unstable();
    states.dedup();
    let n_states = states.len();
    if n_states == 0 {
        return Err(Error::NoPath("grammar has no rules".into()));
    }
    let state_of = |label: ClassId, target: usize| {
        states.binary_search(&(label, target)).expect("state exists for every rule")
    };
    let rule_state: Vec<usize> = grammar
        .rules()
        .iter()
        .map(|r| state_of(r.label, r.target.0))
        .collect();
    let mut by_context: Vec<Vec<usize>> = vec![Vec::new(); grammar.num_nonterminals()];
    for (s, &(_, h)) in states.iter().enumerate() {
        by_context[h].push(s);
    }

    let n_classes = scores.classes();
    let mut dur: Vec<Vec<f64>> = vec![Vec::new(); n_classes];
    let mut cum: Vec<Vec<f64>> = vec![Vec::new(); n_classes];
    let values = scores.values();
    for c in grammar.used_classes() {
        dur[c] = durations
            .class_table(c, cap)?
            .into_iter()
            .map(sanitize)
            .collect();
        let mut acc = Vec::with_capacity(frames + 1);
        let mut run = 0.0;
        acc.push(run);
        for t in 0..frames {
            run += values[[t, c]];
            acc.push(run);
        }
        cum[c] = acc;
    }

    // entry[s * frames + t0]: best score of everything before a segment of
    // state s that opens at frame t0, including the rule that opened it.
    let mut entry = vec![f64::NEG_INFINITY; n_states * frames];
    let mut back = vec![NO_BACK; n_states * frames];
    for (ri, r) in grammar.rules().iter().enumerate() {
        if r.source == grammar.start() {
            entry[rule_state[ri] * frames] = r.log_prob;
        }
    }

    let mut exit_val = vec![f64::NEG_INFINITY; n_states];
    let mut exit_len = vec![0usize; n_states];
    // best segment closing at t per context: (score, len, class)
    let mut ctx_best: Vec<(f64, usize, ClassId)> =
        vec![(f64::NEG_INFINITY, 0, 0); grammar.num_nonterminals()];

    for t in 0..frames {
        let longest = cap.min(t + 1);
        for (s, &(c, _)) in states.iter().enumerate() {
            let row = &entry[s * frames..(s + 1) * frames];
            let (cum_c, dur_c) = (&cum[c], &dur[c]);
            let end = cum_c[t + 1];
            let mut best = f64::NEG_INFINITY;
            let mut best_len = 0;
            for len in 1..=longest {
                let t0 = t + 1 - len;
                let v = row[t0] + (end - cum_c[t0]) + dur_c[len];
                if v > best {
                    best = v;
                    best_len = len;
                }
            }
            exit_val[s] = best;
            exit_len[s] = best_len;
        }
        if t + 1 == frames {
            break;
        }

        for (h, members) in by_context.iter().enumerate() {
            let mut best = (f64::NEG_INFINITY, 0, 0);
            for &s in members {
                let cand = (exit_val[s], exit_len[s], states[s].0);
                if better(cand.0, (cand.1, cand.2), best.0, (best.1, best.2)) {
                    best = cand;
                }
            }
            ctx_best[h] = best;
        }

        for (ri, r) in grammar.rules().iter().enumerate() {
            let (prev_val, prev_len, prev_class) = ctx_best[r.source.0];
            if prev_val == f64::NEG_INFINITY {
                continue;
            }
            let s = rule_state[ri];
            let idx = s * frames + t + 1;
            let cand = prev_val + r.log_prob;
            let cur = back[idx];
            let cur_key = if cur.state == u32::MAX {
                (usize::MAX, usize::MAX, usize::MAX)
            } else {
                let (pc, ph) = states[cur.state as usize];
                (cur.len as usize, pc, ph)
            };
            if better(cand, (prev_len, prev_class, r.source.0), entry[idx], cur_key) {
                let prev_state = state_of(prev_class, r.source.0);
                entry[idx] = cand;
                back[idx] = Back { state: prev_state as u32, len: prev_len as u32 };
            }
        }
    }

    let mut best: Option<(f64, usize, usize)> = None;
    for (s, &(c, h)) in states.iter().enumerate() {
        if !grammar.is_final(crate::grammar::Nonterminal(h)) || exit_val[s] == f64::NEG_INFINITY {
            continue;
        }
        let take = match best {
            None => true,
            Some((v, len, bs)) => {
                let (bc, bh) = states[bs];
                better(exit_val[s], (exit_len[s], c, h), v, (len, bc, bh))
            }
        };
        if take {
            best = Some((exit_val[s], exit_len[s], s));
        }
    }
    let (score, mut len, mut s) = best.ok_or_else(|| {
        Error::NoPath(format!(
            "no derivation reaches a final nonterminal in {frames} frames with segments <= {max_len}"
        ))
    })?;

    let mut labels = Vec::new();
    let mut lengths = Vec::new();
    let mut end = frames;
    loop {
        let t0 = end - len;
        labels.push(states[s].0);
        lengths.push(len);
        let b = back[s * frames + t0];
        if b.state == u32::MAX {
            debug_assert_eq!(t0, 0);
            break;
        }
        s = b.state as usize;
        len = b.len as usize;
        end = t0;
    }
    labels.reverse();
    lengths.reverse();
    Ok(Segmentation { labels, lengths, score })
}

/// `a` beats `b` if it scores strictly higher, or equally with a smaller key.
#[inline]
fn better<K: Ord>(a: f64, a_key: K, b: f64, b_key: K) -> bool {
    a > b || (a == b && a_key < b_key)
}

/// Exhaustive reference decoder for tiny inputs (`T <= 12`).
pub fn brute_force_decode<D: DurationModel + ?Sized>(
    scores: &ScoreMatrix,
    grammar: &Grammar,
    durations: &D,
    max_len: usize,
) -> Result<Segmentation> {
    check_inputs(scores, grammar, max_len)?;
    let frames = scores.frames();
    if frames > BRUTE_FORCE_MAX_FRAMES {
        return Err(Error::OracleGuard(format!(
            "{frames} frames exceeds the exhaustive limit of {BRUTE_FORCE_MAX_FRAMES}"
        )));
    }

    struct Search<'a, D: ?Sized> {
        scores: &'a Array2<f64>,
        grammar: &'a Grammar,
        durations: &'a D,
        max_len: usize,
        frames: usize,
        path: Vec<(usize, ClassId, usize)>,
        best: Option<(f64, Vec<(usize, ClassId, usize)>)>,
    }

    impl<D: DurationModel + ?Sized> Search<'_, D> {
        fn run(&mut self, t0: usize, h: usize, acc: f64) -> Result<()> {
            let rules = self.grammar.successors(crate::grammar::Nonterminal(h))?;
            for r in rules {
                for len in 1..=self.max_len.min(self.frames - t0) {
                    let frame_sum: f64 = (t0..t0 + len).map(|t| self.scores[[t, r.label]]).sum();
                    let dur = sanitize(self.durations.log_prob(len, r.label)?);
                    let v = acc + r.log_prob + frame_sum + dur;
                    self.path.push((len, r.label, r.target.0));
                    if t0 + len == self.frames {
                        if self.grammar.is_final(r.target) {
                            self.offer(v);
                        }
                    } else {
                        self.run(t0 + len, r.target.0, v)?;
                    }
                    self.path.pop();
                }
            }
            Ok(())
        }

        fn offer(&mut self, v: f64) {
            let take = match &self.best {
                None => true,
                Some((bv, bp)) => {
                    v > *bv || (v == *bv && self.path.iter().rev().lt(bp.iter().rev()))
                }
            };
            if take {
                self.best = Some((v, self.path.clone()));
            }
        }
    }

    let mut search = Search {
        scores: scores.values(),
        grammar,
        durations,
        max_len,
        frames,
        path: Vec::new(),
        best: None,
    };
    search.run(0, grammar.start().0, 0.0)?;
    let (score, path) = search
        .best
        .ok_or_else(|| Error::NoPath("no grammar path fits the sequence".into()))?;
    Ok(Segmentation {
        labels: path.iter().map(|p| p.1).collect(),
        lengths: path.iter().map(|p| p.0).collect(),
        score,
    })
}
