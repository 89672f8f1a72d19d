//! Online training with the Viterbi decode inside every step.
//!
//! One iteration draws a sequence, decodes it under the chain grammar of its
//! own transcript with the current model, and takes SGD steps on the
//! cross-entropy of the decoded frame labels plus frames replayed from a
//! buffer of earlier decodes. The class prior and length model are refreshed
//! from the decode after the steps.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use log::warn;
use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{expand_framewise, viterbi_decode, FlatDuration, ScoreMatrix, Segmentation, DEFAULT_MAX_LEN};
use crate::error::{invalid, Error, Result};
use crate::grammar::{linear_grammar_from_transcript, Grammar};
use crate::network::{accumulate_gradient, forward, sgd_step, FrameSequence, LabeledFrames, NetParams};
use crate::stats::{ClassPrior, LengthModel, UnseenLengthInit};
use crate::{ClassId, Transcript};

/// Which duration score the decoder uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthTerm {
    #[default]
    Poisson,
    /// Constant `p(len | class)`; ablation only.
    Flat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub max_len: usize,
    pub length_term: LengthTerm,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions { max_len: DEFAULT_MAX_LEN, length_term: LengthTerm::Poisson }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub lr_drop_iteration: usize,
    pub lr_dropped: f64,
    /// Replayed frames per sequence frame (`K`).
    pub sampling_ratio: usize,
    /// Buffer capacity in sequences; `None` keeps everything.
    pub buffer_capacity: Option<usize>,
    pub minibatch_frames: usize,
    pub max_len: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub hidden: usize,
    pub grad_clip: f64,
    pub length_term: LengthTerm,
    pub unseen_length_init: UnseenLengthInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 10_000,
            lr: 0.01,
            lr_drop_iteration: 2500,
            lr_dropped: 0.001,
            sampling_ratio: 25,
            buffer_capacity: None,
            minibatch_frames: 512,
            max_len: DEFAULT_MAX_LEN,
            seed: 0,
            batch_size: 1,
            hidden: 256,
            grad_clip: 100.0,
            length_term: LengthTerm::Poisson,
            unseen_length_init: UnseenLengthInit::SegmentsPerFrame,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return invalid("iterations must be at least 1");
        }
        if self.minibatch_frames == 0 || self.batch_size == 0 || self.max_len == 0 || self.hidden == 0 {
            return invalid("minibatch_frames, batch_size, max_len and hidden must be positive");
        }
        if !(self.lr > 0.0 && self.lr_dropped > 0.0) {
            return invalid("learning rates must be positive");
        }
        if self.buffer_capacity == Some(0) && self.sampling_ratio > 0 {
            return invalid("a zero-capacity buffer cannot be sampled from");
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        if iteration < self.lr_drop_iteration as u64 {
            self.lr
        } else {
            self.lr_dropped
        }
    }

    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions { max_len: self.max_len, length_term: self.length_term }
    }
}

/// A weakly labeled training sequence. `source` identifies it in the dataset.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub source: usize,
    pub features: Arc<FrameSequence>,
    pub transcript: Transcript,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferEntry {
    pub source: usize,
    pub features: Arc<FrameSequence>,
    pub labels: Vec<ClassId>,
}

/// FIFO store of decoded sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    entries: VecDeque<BufferEntry>,
    capacity: Option<usize>,
}

impl ReplayBuffer {
    pub fn new(capacity: Option<usize>) -> Self {
        ReplayBuffer { entries: VecDeque::new(), capacity }
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &BufferEntry> {
        self.entries.iter()
    }

    pub fn total_frames(&self) -> usize {
        self.entries.iter().map(|e| e.labels.len()).sum()
    }

    pub fn push(&mut self, entry: BufferEntry) -> Result<()> {
        if entry.labels.len() != entry.features.frames() {
            return invalid("buffer entry labels do not cover its frames");
        }
        if self.capacity == Some(0) {
            return Ok(());
        }
        if let Some(cap) = self.capacity {
            while self.entries.len() >= cap {
                self.entries.pop_front();
            }
        }
        self.entries.push_back(entry);
        Ok(())
    }

    /// `count` frames drawn uniformly with replacement over all buffered
    /// `(sequence, frame)` pairs. Empty when the buffer is empty.
    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> LabeledFrames {
        let dim = self.entries.front().map_or(0, |e| e.features.dim());
        if count == 0 || self.entries.is_empty() {
            return LabeledFrames::empty(dim);
        }
        let mut ends = Vec::with_capacity(self.entries.len());
        let mut acc = 0;
        for e in &self.entries {
            acc += e.labels.len();
            ends.push(acc);
        }
        let mut features = Array2::zeros((count, dim));
        let mut labels = Vec::with_capacity(count);
        for k in 0..count {
            let pos = rng.random_range(0..acc);
            let seq = ends.partition_point(|&end| end <= pos);
            let start = if seq == 0 { 0 } else { ends[seq - 1] };
            let entry = &self.entries[seq];
            features.row_mut(k).assign(&entry.features.frame(pos - start));
            labels.push(entry.labels[pos - start]);
        }
        LabeledFrames { features, labels }
    }
}

/// Everything needed for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub params: NetParams,
    pub prior: ClassPrior,
    pub lengths: LengthModel,
}

impl Model {
    pub fn num_classes(&self) -> usize {
        self.prior.num_classes()
    }

    /// Hybrid visual scores of a sequence.
    pub fn scores(&self, seq: &FrameSequence) -> Result<ScoreMatrix> {
        let post = forward(&self.params, seq)?;
        ScoreMatrix::from_posteriors(&post, &self.prior)
    }

    pub fn decode(&self, scores: &ScoreMatrix, grammar: &Grammar, opts: &DecodeOptions) -> Result<Segmentation> {
        decode_with(scores, grammar, &self.lengths, opts)
    }
}

pub(crate) fn decode_with(
    scores: &ScoreMatrix,
    grammar: &Grammar,
    lengths: &LengthModel,
    opts: &DecodeOptions,
) -> Result<Segmentation> {
    match opts.length_term {
        LengthTerm::Poisson => viterbi_decode(scores, grammar, lengths, opts.max_len),
        LengthTerm::Flat => viterbi_decode(scores, grammar, &FlatDuration, opts.max_len),
    }
}

#[derive(Clone, Debug)]
pub struct TrainerState {
    pub model: Model,
    pub buffer: ReplayBuffer,
    pub iteration: u64,
    pub skipped: u64,
    pub rng: ChaCha8Rng,
}

impl TrainerState {
    pub fn new(config: &TrainConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let params = NetParams::init(config.seed, input_dim, config.hidden, num_classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(TrainerState {
            model: Model {
                params,
                prior: ClassPrior::new(num_classes),
                lengths: LengthModel::new(num_classes),
            },
            buffer: ReplayBuffer::new(config.buffer_capacity),
            iteration: 0,
            skipped: 0,
            rng,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IterationStats {
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
    pub frames: usize,
    pub segments: usize,
    pub skipped: usize,
}

struct Decoded<'a> {
    sample: &'a TrainSample,
    seg: Segmentation,
    frame_labels: Vec<ClassId>,
    replay: LabeledFrames,
}

/// One update from a single sequence.
pub fn train_iteration(state: &mut TrainerState, sample: &TrainSample, config: &TrainConfig) -> Result<IterationStats> {
    train_batch(state, std::slice::from_ref(sample), config)
}

/// One update from `samples`. A single sequence is backpropagated chunk by
/// chunk with an SGD step per chunk; several sequences get their gradients
/// averaged into one step.
pub fn train_batch(state: &mut TrainerState, samples: &[TrainSample], config: &TrainConfig) -> Result<IterationStats> {
    if samples.is_empty() {
        return invalid("empty batch");
    }
    let classes = state.model.num_classes();
    let lr = config.lr_at(state.iteration);
    let opts = config.decode_options();
    let mut stats = IterationStats { iteration: state.iteration + 1, lr, ..Default::default() };

    let mut decoded = Vec::with_capacity(samples.len());
    for sample in samples {
        let frames = sample.features.frames();
        let mut lengths = state.model.lengths.clone();
        lengths.init_unseen(&sample.transcript, frames, config.unseen_length_init)?;
        let grammar = linear_grammar_from_transcript(&sample.transcript, classes)?;
        let scores = state.model.scores(&sample.features)?;
        let seg = match decode_with(&scores, &grammar, &lengths, &opts) {
            Ok(seg) => seg,
            Err(Error::NoPath(msg)) => {
                warn!("skipping sequence {}: {msg}", sample.source);
                stats.skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let replay = state.buffer.sample(config.sampling_ratio * frames, &mut state.rng);
        let frame_labels = expand_framewise(&seg);
        decoded.push(Decoded { sample, seg, frame_labels, replay });
    }

    let (_, hidden, _) = state.model.params.dims();
    if decoded.len() == 1 {
        let d = &decoded[0];
        let x = d.sample.features.features();
        let frames = x.nrows();
        let k = config.sampling_ratio;
        let mut h = Array1::zeros(hidden);
        for start in (0..frames).step_by(config.minibatch_frames) {
            let end = (start + config.minibatch_frames).min(frames);
            let replay = replay_slice(&d.replay, k * start, k * end);
            let mut grad = state.model.params.zeros_like();
            let (loss, last) = accumulate_gradient(
                &state.model.params,
                x.slice(s![start..end, ..]),
                h.view(),
                &d.frame_labels[start..end],
                &replay,
                &mut grad,
            )?;
            sgd_step(&mut state.model.params, &grad, lr, config.grad_clip)?;
            stats.loss += loss;
            h = last;
        }
    } else if !decoded.is_empty() {
        let mut total = state.model.params.zeros_like();
        let k = config.sampling_ratio;
        for d in &decoded {
            let x = d.sample.features.features();
            let frames = x.nrows();
            let mut h = Array1::zeros(hidden);
            for start in (0..frames).step_by(config.minibatch_frames) {
                let end = (start + config.minibatch_frames).min(frames);
                let replay = replay_slice(&d.replay, k * start, k * end);
                let (loss, last) = accumulate_gradient(
                    &state.model.params,
                    x.slice(s![start..end, ..]),
                    h.view(),
                    &d.frame_labels[start..end],
                    &replay,
                    &mut total,
                )?;
                stats.loss += loss;
                h = last;
            }
        }
        total.scale(1.0 / decoded.len() as f64);
        sgd_step(&mut state.model.params, &total, lr, config.grad_clip)?;
    }

    for d in decoded {
        let frames = d.sample.features.frames();
        state
            .model
            .lengths
            .init_unseen(&d.sample.transcript, frames, config.unseen_length_init)?;
        state.model.lengths.update(&d.seg);
        state.model.prior.update(&d.frame_labels)?;
        stats.frames += frames;
        stats.segments += d.seg.labels.len();
        state.buffer.push(BufferEntry {
            source: d.sample.source,
            features: Arc::clone(&d.sample.features),
            labels: d.frame_labels,
        })?;
    }
    state.skipped += stats.skipped as u64;
    state.iteration += 1;
    Ok(stats)
}

fn replay_slice(all: &LabeledFrames, start: usize, end: usize) -> LabeledFrames {
    let end = end.min(all.len());
    let start = start.min(end);
    LabeledFrames {
        features: all.features.slice(s![start..end, ..]).to_owned(),
        labels: all.labels[start..end].to_vec(),
    }
}

/// How training sequences are drawn.
#[derive(Clone, Debug, PartialEq)]
pub enum SampleOrder {
    /// Uniformly at random, with replacement.
    Shuffled,
    /// Cycle through these indices into the sample list.
    Fixed(Vec<usize>),
}

/// Runs `config.iterations` updates and calls `observe` after each one.
pub fn train_with(
    samples: &[TrainSample],
    config: &TrainConfig,
    order: &SampleOrder,
    state: &mut TrainerState,
    mut observe: impl FnMut(&TrainerState, &IterationStats) -> Result<()>,
) -> Result<()> {
    if samples.is_empty() {
        return invalid("empty training set");
    }
    if let SampleOrder::Fixed(idx) = order {
        if idx.is_empty() || idx.iter().any(|&i| i >= samples.len()) {
            return invalid("fixed order references unknown samples");
        }
    }
    let mut batch = Vec::with_capacity(config.batch_size);
    while state.iteration < config.iterations as u64 {
        batch.clear();
        for b in 0..config.batch_size {
            let i = match order {
                SampleOrder::Shuffled => state.rng.random_range(0..samples.len()),
                SampleOrder::Fixed(idx) => {
                    idx[(state.iteration as usize * config.batch_size + b) % idx.len()]
                }
            };
            batch.push(samples[i].clone());
        }
        let stats = train_batch(state, &batch, config)?;
        observe(state, &stats)?;
    }
    Ok(())
}

/// Trains from scratch with shuffled sampling.
pub fn train(samples: &[TrainSample], config: &TrainConfig) -> Result<TrainerState> {
    let first = samples.first().ok_or_else(|| Error::InvalidInput("empty training set".into()))?;
    let classes = samples
        .iter()
        .flat_map(|s| s.transcript.iter())
        .max()
        .map_or(1, |&m| m + 1);
    let mut state = TrainerState::new(config, first.features.dim(), classes)?;
    train_with(samples, config, &SampleOrder::Shuffled, &mut state, |_, _| Ok(()))?;
    Ok(state)
}

/// Append-only CSV training log line.
pub fn log_line(stats: &IterationStats) -> String {
    format!(
        "{},{},{},{},{},{}\n",
        stats.iteration, stats.loss, stats.lr, stats.frames, stats.segments, stats.skipped
    )
}

pub const LOG_HEADER: &str = "iteration,loss,lr,frames,segments,skipped\n";

// Checkpoint layout, all little-endian:
//   "NNVIT1", D H C as u64, the 11 parameter tensors as f64 in
//   NetParams::tensors order, lambda[C] f64 (0 = unset), seg_count[C] u64,
//   seg_len_sum[C] u64, prior counts[C] u64, iteration u64,
//   then "RESUME", rng seed [32], stream u64, word pos u128, skipped u64,
//   capacity u64 (MAX = unbounded), entry count u64 and per entry
//   source u64, T u64, T labels as u32.
const CHECKPOINT_MAGIC: &[u8; 6] = b"NNVIT1";
const RESUME_MAGIC: &[u8; 6] = b"RESUME";

pub fn encode_checkpoint(state: &TrainerState) -> Vec<u8> {
    let mut out = Vec::new();
    let m = &state.model;
    let (d, h, c) = m.params.dims();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [d, h, c] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for t in m.params.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for k in 0..c {
        out.extend_from_slice(&m.lengths.lambda(k).unwrap_or(0.0).to_le_bytes());
    }
    for k in 0..c {
        out.extend_from_slice(&m.lengths.seg_count(k).to_le_bytes());
    }
    for k in 0..c {
        out.extend_from_slice(&m.lengths.seg_len_sum(k).to_le_bytes());
    }
    for &n in m.prior.counts() {
        out.extend_from_slice(&n.to_le_bytes());
    }
    out.extend_from_slice(&state.iteration.to_le_bytes());

    out.extend_from_slice(RESUME_MAGIC);
    out.extend_from_slice(&state.rng.get_seed());
    out.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    out.extend_from_slice(&state.skipped.to_le_bytes());
    let cap = state.buffer.capacity().map_or(u64::MAX, |c| c as u64);
    out.extend_from_slice(&cap.to_le_bytes());
    out.extend_from_slice(&(state.buffer.len() as u64).to_le_bytes());
    for e in state.buffer.entries() {
        out.extend_from_slice(&(e.source as u64).to_le_bytes());
        out.extend_from_slice(&(e.labels.len() as u64).to_le_bytes());
        for &l in &e.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn decode_model(r: &mut Reader) -> Result<(Model, u64)> {
    if r.take(6)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let d = r.u64()? as usize;
    let h = r.u64()? as usize;
    let c = r.u64()? as usize;
    if d == 0 || h == 0 || c == 0 || d.max(h).max(c) > 1 << 20 {
        return Err(Error::Checkpoint(format!("implausible dims ({d}, {h}, {c})")));
    }
    let mut params = NetParams::zeros(d, h, c);
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = r.f64()?;
        }
    }
    let mut lambda = Vec::with_capacity(c);
    for _ in 0..c {
        let l = r.f64()?;
        lambda.push(if l > 0.0 { Some(l) } else { None });
    }
    let seg_count = (0..c).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let seg_len_sum = (0..c).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let counts = (0..c).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let iteration = r.u64()?;
    Ok((
        Model {
            params,
            prior: ClassPrior::from_counts(counts),
            lengths: LengthModel::from_parts(lambda, seg_count, seg_len_sum),
        },
        iteration,
    ))
}

/// Reads only the model part of a checkpoint.
pub fn read_model(path: &Path) -> Result<(Model, u64)> {
    let bytes = fs::read(path)?;
    decode_model(&mut Reader { bytes: &bytes, pos: 0 })
}

/// Restores a full trainer state. Buffer entries are re-attached to the
/// sequences of `samples` by their `source` id.
pub fn decode_checkpoint(bytes: &[u8], samples: &[TrainSample]) -> Result<TrainerState> {
    let mut r = Reader { bytes, pos: 0 };
    let (model, iteration) = decode_model(&mut r)?;
    if r.take(6)? != RESUME_MAGIC {
        return Err(Error::Checkpoint("missing resume section".into()));
    }
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let skipped = r.u64()?;
    let cap = r.u64()?;
    let capacity = if cap == u64::MAX { None } else { Some(cap as usize) };
    let mut buffer = ReplayBuffer::new(capacity);
    let n = r.u64()?;
    for _ in 0..n {
        let source = r.u64()? as usize;
        let len = r.u64()? as usize;
        let sample = samples
            .iter()
            .find(|s| s.source == source)
            .ok_or_else(|| Error::Checkpoint(format!("buffer refers to unknown sequence {source}")))?;
        let labels = (0..len)
            .map(|_| Ok(u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize))
            .collect::<Result<Vec<_>>>()?;
        buffer
            .push(BufferEntry { source, features: Arc::clone(&sample.features), labels })
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    if !r.done() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(TrainerState { model, buffer, iteration, skipped, rng })
}

/// Writes a checkpoint atomically (temp file, then rename).
pub fn write_checkpoint(state: &TrainerState, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(state))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SynthConfig};

    fn entry(source: usize, frames: usize, dim: usize) -> BufferEntry {
        let feats = Array2::from_shape_fn((frames, dim), |(t, d)| (source * 100 + t) as f64 + d as f64 * 0.5);
        BufferEntry {
            source,
            features: Arc::new(FrameSequence::new(feats).unwrap()),
            labels: (0..frames).map(|t| t % 2).collect(),
        }
    }

    fn samples(n_train: usize) -> Vec<TrainSample> {
        let mut cfg = SynthConfig::desk_scale(4);
        cfg.num_train = n_train;
        cfg.num_test = 0;
        let ds = generate_synthetic(&cfg).unwrap();
        ds.train
            .iter()
            .map(|&i| TrainSample {
                source: i,
                features: Arc::clone(&ds.videos[i].features),
                transcript: ds.videos[i].transcript.clone(),
            })
            .collect()
    }

    fn small_config() -> TrainConfig {
        TrainConfig { hidden: 8, iterations: 5, sampling_ratio: 2, lr: 0.001, ..Default::default() }
    }

    #[test]
    fn sample_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut buf = ReplayBuffer::new(None);
        assert!(buf.sample(0, &mut rng).is_empty());
        assert!(buf.sample(5, &mut rng).is_empty());
        buf.push(entry(7, 1, 2)).unwrap();
        let got = buf.sample(5, &mut rng);
        assert_eq!(got.len(), 5);
        for row in got.features.rows() {
            assert_eq!(row, buf.entries[0].features.frame(0));
        }
        assert_eq!(got.labels, vec![0; 5]);
    }

    #[test]
    fn sample_is_deterministic_given_rng() {
        let mut buf = ReplayBuffer::new(None);
        for i in 0..3 {
            buf.push(entry(i, 4 + i, 2)).unwrap();
        }
        let a = buf.sample(50, &mut ChaCha8Rng::seed_from_u64(9));
        let b = buf.sample(50, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn fifo_eviction() {
        let mut buf = ReplayBuffer::new(Some(3));
        for i in 0..4 {
            buf.push(entry(i, 2, 1)).unwrap();
        }
        let kept: Vec<_> = buf.entries().map(|e| e.source).collect();
        assert_eq!(kept, vec![1, 2, 3]);
        let mut bad = entry(9, 3, 1);
        bad.labels.pop();
        assert!(buf.push(bad).is_err());
    }

    #[test]
    fn one_frame_per_segment_decodes_to_unit_lengths() {
        let feats = FrameSequence::new(Array2::from_shape_fn((4, 3), |(t, d)| (t + d) as f64)).unwrap();
        let sample = TrainSample { source: 0, features: Arc::new(feats), transcript: vec![0, 1, 2, 1] };
        let cfg = TrainConfig { hidden: 4, ..small_config() };
        let mut state = TrainerState::new(&cfg, 3, 3).unwrap();
        let stats = train_iteration(&mut state, &sample, &cfg).unwrap();
        assert_eq!(stats.segments, 4);
        assert_eq!(state.model.lengths.lambda(0), Some(1.0));
        assert_eq!(state.model.lengths.lambda(1), Some(1.0));
        assert_eq!(state.model.lengths.seg_count(1), 2);
        assert_eq!(state.buffer.entries().next().unwrap().labels, vec![0, 1, 2, 1]);
    }

    #[test]
    fn too_long_transcript_is_skipped() {
        let feats = FrameSequence::new(Array2::zeros((2, 3))).unwrap();
        let sample = TrainSample { source: 0, features: Arc::new(feats), transcript: vec![0, 1, 2] };
        let cfg = TrainConfig { hidden: 4, ..small_config() };
        let mut state = TrainerState::new(&cfg, 3, 3).unwrap();
        let before = state.model.clone();
        let stats = train_iteration(&mut state, &sample, &cfg).unwrap();
        assert_eq!(stats.skipped, 1);
        assert_eq!(state.model, before);
        assert!(state.buffer.is_empty());
        assert_eq!(state.skipped, 1);
    }

    #[test]
    fn online_step_loss_is_plain_cross_entropy() {
        let data = samples(1);
        let cfg = TrainConfig { sampling_ratio: 0, minibatch_frames: 10_000, ..small_config() };
        let mut state = TrainerState::new(&cfg, data[0].features.dim(), 3).unwrap();
        // warm the buffer so K = 0 has something it could have drawn from
        train_iteration(&mut state, &data[0], &cfg).unwrap();
        let before = state.model.clone();
        let stats = train_iteration(&mut state, &data[0], &cfg).unwrap();

        let mut lengths = before.lengths.clone();
        lengths.init_unseen(&data[0].transcript, data[0].features.frames(), cfg.unseen_length_init).unwrap();
        let g = linear_grammar_from_transcript(&data[0].transcript, 3).unwrap();
        let seg = viterbi_decode(&before.scores(&data[0].features).unwrap(), &g, &lengths, cfg.max_len).unwrap();
        let post = forward(&before.params, &data[0].features).unwrap();
        let want: f64 = expand_framewise(&seg)
            .iter()
            .enumerate()
            .map(|(t, &y)| -post.log_probs()[[t, y]])
            .sum();
        assert!((stats.loss - want).abs() < 1e-9, "{} vs {want}", stats.loss);
    }

    #[test]
    fn buffer_and_prior_track_processed_sequences() {
        let data = samples(3);
        let cfg = small_config();
        let mut state = TrainerState::new(&cfg, data[0].features.dim(), 3).unwrap();
        let mut total = 0;
        for s in &data {
            train_iteration(&mut state, s, &cfg).unwrap();
            total += s.features.frames() as u64;
            assert_eq!(state.model.prior.total(), total);
        }
        assert_eq!(state.buffer.len(), 3);
        for (e, s) in state.buffer.entries().zip(&data) {
            assert_eq!(e.labels.len(), s.features.frames());
            assert_eq!(Segmentation::from_framewise(&e.labels).labels, s.transcript);
        }
    }

    #[test]
    fn chunked_and_batched_updates_run() {
        let data = samples(4);
        for (batch_size, minibatch) in [(1, 17), (2, 512), (3, 33)] {
            let cfg = TrainConfig { batch_size, minibatch_frames: minibatch, iterations: 3, ..small_config() };
            let mut state = TrainerState::new(&cfg, data[0].features.dim(), 3).unwrap();
            train_with(&data, &cfg, &SampleOrder::Shuffled, &mut state, |_, _| Ok(())).unwrap();
            assert_eq!(state.iteration, 3);
            assert_eq!(state.buffer.len(), 3 * batch_size);
            assert!(state.model.params.is_finite());
        }
    }

    #[test]
    fn single_iteration_train_matches_train_iteration() {
        let data = samples(5);
        let cfg = TrainConfig { iterations: 1, ..small_config() };
        let trained = train(&data, &cfg).unwrap();

        let mut state = TrainerState::new(&cfg, data[0].features.dim(), 3).unwrap();
        let i = state.rng.random_range(0..data.len());
        train_iteration(&mut state, &data[i], &cfg).unwrap();
        assert_eq!(encode_checkpoint(&trained), encode_checkpoint(&state));
    }

    #[test]
    fn checkpoint_resume_reproduces_trajectory() {
        let data = samples(6);
        let cfg = TrainConfig { iterations: 8, ..small_config() };
        let straight = train(&data, &cfg).unwrap();

        let half = TrainConfig { iterations: 4, ..cfg.clone() };
        let first = train(&data, &half).unwrap();
        let bytes = encode_checkpoint(&first);
        let mut resumed = decode_checkpoint(&bytes, &data).unwrap();
        assert_eq!(encode_checkpoint(&resumed), bytes);
        train_with(&data, &cfg, &SampleOrder::Shuffled, &mut resumed, |_, _| Ok(())).unwrap();
        assert_eq!(encode_checkpoint(&resumed), encode_checkpoint(&straight));

        let (model, it) = read_model_bytes(&bytes);
        assert_eq!(model, first.model);
        assert_eq!(it, 4);
    }

    fn read_model_bytes(bytes: &[u8]) -> (Model, u64) {
        decode_model(&mut Reader { bytes, pos: 0 }).unwrap()
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let data = samples(2);
        let cfg = TrainConfig { iterations: 2, ..small_config() };
        let bytes = encode_checkpoint(&train(&data, &cfg).unwrap());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3], &data).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad, &data).is_err());
        assert!(decode_checkpoint(&bytes, &[]).is_err());
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.01);
        assert_eq!(cfg.lr_at(2499), 0.01);
        assert_eq!(cfg.lr_at(2500), 0.001);
    }
}
