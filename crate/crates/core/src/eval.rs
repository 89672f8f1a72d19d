//! Inference entry points and evaluation metrics.

use rayon::prelude::*;
use serde::Serialize;

use crate::dataio::Dataset;
use crate::decoder::{expand_framewise, Segmentation};
use crate::error::{invalid, Error, Result};
use crate::grammar::{linear_grammar_from_transcript, Grammar};
use crate::network::FrameSequence;
use crate::trainer::{DecodeOptions, Model};
use crate::ClassId;

/// Decodes `seq` under `grammar` with the hybrid scores of `model`.
pub fn segment(model: &Model, seq: &FrameSequence, grammar: &Grammar, opts: &DecodeOptions) -> Result<Segmentation> {
    let scores = model.scores(seq)?;
    model.decode(&scores, grammar, opts)
}

/// Aligns `seq` to a known transcript; only the lengths are inferred.
pub fn align(model: &Model, seq: &FrameSequence, transcript: &[ClassId], opts: &DecodeOptions) -> Result<Segmentation> {
    let grammar = linear_grammar_from_transcript(transcript, model.num_classes())?;
    segment(model, seq, &grammar, opts)
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return invalid(format!("length mismatch: {a} vs {b}"));
    }
    Ok(())
}

pub fn frame_accuracy(pred: &[ClassId], gt: &[ClassId]) -> Result<f64> {
    same_len(pred.len(), gt.len())?;
    if gt.is_empty() {
        return Ok(1.0);
    }
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gt.len() as f64)
}

/// Intersection over detection. Each ground-truth segment is matched to the
/// same-class predicted segment with the largest overlap (earliest on ties)
/// and scores `|overlap| / |predicted segment|`; unmatched segments score 0.
pub fn jaccard_iod(pred: &Segmentation, gt: &Segmentation) -> Result<f64> {
    same_len(pred.frames(), gt.frames())?;
    if gt.labels.is_empty() {
        return Ok(1.0);
    }
    let pred_spans: Vec<_> = pred.spans().collect();
    let mut total = 0.0;
    for (class, g0, g1) in gt.spans() {
        let mut best: Option<(usize, usize)> = None;
        for &(c, p0, p1) in &pred_spans {
            if c != class {
                continue;
            }
            let overlap = g1.min(p1).saturating_sub(g0.max(p0));
            if overlap > 0 && best.is_none_or(|(o, _)| overlap > o) {
                best = Some((overlap, p1 - p0));
            }
        }
        if let Some((overlap, det)) = best {
            total += overlap as f64 / det as f64;
        }
    }
    Ok(total / gt.labels.len() as f64)
}

/// Levenshtein distance with unit costs.
pub fn edit_distance(a: &[ClassId], b: &[ClassId]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = (diag + usize::from(x != y)).min(up + 1).min(row[j] + 1);
            diag = up;
        }
    }
    row[b.len()]
}

pub fn unit_accuracy(pred: &[ClassId], gt: &[ClassId]) -> f64 {
    let d = edit_distance(pred, gt) as f64;
    (1.0 - d / gt.len().max(1) as f64).clamp(0.0, 1.0)
}

/// Which inference task is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Segmentation,
    Alignment,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VideoResult {
    pub id: String,
    pub frames: usize,
    pub correct_frames: usize,
    pub frame_accuracy: f64,
    pub jaccard_iod: f64,
    pub unit_accuracy: f64,
    #[serde(skip)]
    pub prediction: Segmentation,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: Task,
    /// Pooled over all frames.
    pub frame_accuracy: f64,
    /// Mean of per-video means.
    pub jaccard_iod: f64,
    /// Mean over videos.
    pub unit_accuracy: f64,
    pub videos: Vec<VideoResult>,
}

impl EvalReport {
    pub fn from_videos(task: Task, videos: Vec<VideoResult>) -> Self {
        let frames: usize = videos.iter().map(|v| v.frames).sum();
        let correct: usize = videos.iter().map(|v| v.correct_frames).sum();
        let n = videos.len().max(1) as f64;
        EvalReport {
            task,
            frame_accuracy: if frames == 0 { 0.0 } else { correct as f64 / frames as f64 },
            jaccard_iod: videos.iter().map(|v| v.jaccard_iod).sum::<f64>() / n,
            unit_accuracy: videos.iter().map(|v| v.unit_accuracy).sum::<f64>() / n,
            videos,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("video,frames,frame_accuracy,jaccard_iod,unit_accuracy\n");
        for v in &self.videos {
            out += &format!("{},{},{},{},{}\n", v.id, v.frames, v.frame_accuracy, v.jaccard_iod, v.unit_accuracy);
        }
        let frames: usize = self.videos.iter().map(|v| v.frames).sum();
        out += &format!("ALL,{frames},{},{},{}\n", self.frame_accuracy, self.jaccard_iod, self.unit_accuracy);
        out
    }

    pub fn to_text(&self) -> String {
        let task = match self.task {
            Task::Segmentation => "segmentation",
            Task::Alignment => "alignment",
        };
        format!(
            "task: {task}\nvideos: {}\nframe accuracy: {:.4}\njaccard (iod): {:.4}\nunit accuracy: {:.4}\n",
            self.videos.len(),
            self.frame_accuracy,
            self.jaccard_iod,
            self.unit_accuracy
        )
    }
}

/// Scores one prediction against framewise ground truth.
pub fn score_video(id: &str, prediction: Segmentation, gt: &[ClassId]) -> Result<VideoResult> {
    let pred = expand_framewise(&prediction);
    let fa = frame_accuracy(&pred, gt)?;
    let gt_seg = Segmentation::from_framewise(gt);
    Ok(VideoResult {
        id: id.to_owned(),
        frames: gt.len(),
        correct_frames: pred.iter().zip(gt).filter(|(p, g)| p == g).count(),
        frame_accuracy: fa,
        jaccard_iod: jaccard_iod(&prediction, &gt_seg)?,
        unit_accuracy: unit_accuracy(&prediction.labels, &gt_seg.labels),
        prediction,
    })
}

/// Runs `task` on every test video of `ds` in parallel. `grammar` is needed
/// for segmentation only. Every test video must have ground truth.
pub fn evaluate(
    model: &Model,
    ds: &Dataset,
    task: Task,
    grammar: Option<&Grammar>,
    opts: &DecodeOptions,
) -> Result<EvalReport> {
    if let Some(v) = ds.test_videos().find(|v| v.ground_truth.is_none()) {
        return Err(Error::InvalidInput(format!("test video {} has no ground truth", v.id)));
    }
    if task == Task::Segmentation && grammar.is_none() {
        return invalid("segmentation needs a grammar");
    }
    let videos = ds
        .test
        .par_iter()
        .map(|&i| {
            let v = &ds.videos[i];
            let pred = match task {
                Task::Segmentation => segment(model, &v.features, grammar.unwrap(), opts),
                Task::Alignment => align(model, &v.features, &v.transcript, opts),
            }
            .map_err(|e| Error::InvalidInput(format!("video {}: {e}", v.id)))?;
            score_video(&v.id, pred, v.ground_truth.as_deref().unwrap())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_videos(task, videos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetParams;
    use crate::stats::{ClassPrior, LengthModel};
    use crate::{Grammar, Nonterminal, Rule};
    use ndarray::Array2;
    use proptest::prelude::*;

    fn seg(parts: &[(ClassId, usize)]) -> Segmentation {
        Segmentation {
            labels: parts.iter().map(|p| p.0).collect(),
            lengths: parts.iter().map(|p| p.1).collect(),
            score: 0.0,
        }
    }

    fn model(classes: usize) -> Model {
        let mut lengths = LengthModel::new(classes);
        for c in 0..classes {
            lengths.set_lambda(c, 3.0).unwrap();
        }
        Model {
            params: NetParams::init(1, 2, 4, classes).unwrap(),
            prior: ClassPrior::new(classes),
            lengths,
        }
    }

    #[test]
    fn frame_accuracy_examples() {
        assert_eq!(frame_accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(frame_accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert!((frame_accuracy(&[0, 0, 1], &[0, 1, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(frame_accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn jaccard_examples() {
        let g = seg(&[(0, 4), (1, 4)]);
        assert_eq!(jaccard_iod(&g, &g).unwrap(), 1.0);
        assert_eq!(jaccard_iod(&seg(&[(2, 8)]), &g).unwrap(), 0.0);
        assert_eq!(jaccard_iod(&seg(&[(0, 2), (1, 2)]), &seg(&[(0, 4)])).unwrap(), 1.0);
        let got = jaccard_iod(&seg(&[(0, 6), (1, 2)]), &g).unwrap();
        assert!((got - 5.0 / 6.0).abs() < 1e-15);
        assert!(jaccard_iod(&seg(&[(0, 3)]), &g).is_err());
    }

    #[test]
    fn unit_accuracy_examples() {
        assert_eq!(unit_accuracy(&[0, 1, 2], &[0, 1, 2]), 1.0);
        assert_eq!(edit_distance(&[0, 1, 2], &[0, 3, 2]), 1);
        assert!((unit_accuracy(&[0, 1, 2], &[0, 3, 2]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(unit_accuracy(&[], &[0, 1, 2]), 0.0);
        assert_eq!(unit_accuracy(&[0, 1, 2, 0, 1, 2, 0], &[0]), 0.0);
        assert_eq!(unit_accuracy(&[], &[]), 1.0);
    }

    #[test]
    fn align_two_frames() {
        let m = model(2);
        let seq = FrameSequence::new(Array2::from_elem((2, 2), 0.3)).unwrap();
        let s = align(&m, &seq, &[0, 1], &DecodeOptions::default()).unwrap();
        assert_eq!(s.labels, vec![0, 1]);
        assert_eq!(s.lengths, vec![1, 1]);
        assert!(align(&m, &seq, &[0, 1, 0], &DecodeOptions::default()).is_err());
    }

    #[test]
    fn single_rule_grammar_takes_everything() {
        let m = model(3);
        let g = Grammar::new(2, vec![Rule::new(0, 1, 1, 1.0)], Nonterminal(0), &[Nonterminal(1)], 3).unwrap();
        let seq = FrameSequence::new(Array2::from_shape_fn((7, 2), |(t, d)| (t * d) as f64)).unwrap();
        let s = segment(&m, &seq, &g, &DecodeOptions::default()).unwrap();
        assert_eq!((s.labels, s.lengths), (vec![1], vec![7]));
    }

    #[test]
    fn chain_segmentation_equals_alignment() {
        let m = model(3);
        let seq = FrameSequence::new(Array2::from_shape_fn((9, 2), |(t, d)| ((t + 2 * d) as f64).sin())).unwrap();
        let tr = [2, 0, 1];
        let g = linear_grammar_from_transcript(&tr, 3).unwrap();
        let opts = DecodeOptions::default();
        assert_eq!(segment(&m, &seq, &g, &opts).unwrap(), align(&m, &seq, &tr, &opts).unwrap());
    }

    fn levenshtein_oracle(a: &[ClassId], b: &[ClassId]) -> usize {
        // full table, recursive definition
        let mut d = vec![vec![0; b.len() + 1]; a.len() + 1];
        for i in 0..=a.len() {
            for j in 0..=b.len() {
                d[i][j] = if i == 0 {
                    j
                } else if j == 0 {
                    i
                } else {
                    let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
                    sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1)
                };
            }
        }
        d[a.len()][b.len()]
    }

    proptest! {
        #[test]
        fn edit_distance_matches_table(a in prop::collection::vec(0usize..4, 0..9), b in prop::collection::vec(0usize..4, 0..9)) {
            prop_assert_eq!(edit_distance(&a, &b), levenshtein_oracle(&a, &b));
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert_eq!(edit_distance(&a, &a), 0);
        }

        #[test]
        fn frame_accuracy_symmetric(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..30)) {
            let (a, b): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            prop_assert_eq!(frame_accuracy(&a, &b).unwrap(), frame_accuracy(&b, &a).unwrap());
        }

        #[test]
        fn metrics_in_unit_interval(a in prop::collection::vec(0usize..3, 1..30), b in prop::collection::vec(0usize..3, 1..30)) {
            let n = a.len().min(b.len());
            let (pa, pb) = (Segmentation::from_framewise(&a[..n]), Segmentation::from_framewise(&b[..n]));
            let j = jaccard_iod(&pa, &pb).unwrap();
            prop_assert!((0.0..=1.0).contains(&j));
            let u = unit_accuracy(&pa.labels, &pb.labels);
            prop_assert!((0.0..=1.0).contains(&u));
        }
    }
}
