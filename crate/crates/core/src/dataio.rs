//! Dataset directories and the synthetic dataset generator.
//!
//! Layout of a dataset root:
//!
//! ```text
//! labels.txt               one class name per line, index = line number
//! train.txt, test.txt      video ids, one per line
//! features/<id>.feat       "FEAT1", T: u32, D: u32, T*D f32 row-major (all LE)
//! transcripts/<id>.txt     one class name per line
//! groundtruth/<id>.txt     optional, one class name per frame
//! grammar.txt              optional
//! ```

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::decoder::Segmentation;
use crate::error::{invalid, Error, Result};
use crate::network::FrameSequence;
use crate::{ClassId, Transcript};

const FEATURE_MAGIC: &[u8; 5] = b"FEAT1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    names: Vec<String>,
    index: HashMap<String, ClassId>,
}

impl LabelMap {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return invalid("label map is empty");
        }
        let mut index = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.chars().any(char::is_whitespace) {
                return invalid(format!("bad class name `{n}`"));
            }
            if index.insert(n.clone(), i).is_some() {
                return invalid(format!("duplicate class name `{n}`"));
            }
        }
        Ok(LabelMap { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, class: ClassId) -> Option<&str> {
        self.names.get(class).map(String::as_str)
    }

    pub fn index(&self, name: &str) -> Option<ClassId> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    pub features: Arc<FrameSequence>,
    pub transcript: Transcript,
    pub ground_truth: Option<Vec<ClassId>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub labels: LabelMap,
    /// Sorted by id.
    pub videos: Vec<Video>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub grammar: Option<String>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.videos.first().map_or(0, |v| v.features.dim())
    }

    pub fn find(&self, id: &str) -> Option<usize> {
        self.videos.binary_search_by(|v| v.id.as_str().cmp(id)).ok()
    }

    pub fn train_videos(&self) -> impl Iterator<Item = &Video> {
        self.train.iter().map(|&i| &self.videos[i])
    }

    pub fn test_videos(&self) -> impl Iterator<Item = &Video> {
        self.test.iter().map(|&i| &self.videos[i])
    }

    pub fn train_transcripts(&self) -> Vec<Transcript> {
        self.train_videos().map(|v| v.transcript.clone()).collect()
    }
}

fn load_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Load { path: path.to_path_buf(), msg: msg.into() }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| load_err(path, e.to_string()))
}

fn non_empty_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().map(str::trim).filter(|l| !l.is_empty())
}

pub fn read_features(path: &Path) -> Result<FrameSequence> {
    let bytes = fs::read(path).map_err(|e| load_err(path, e.to_string()))?;
    if bytes.len() < 13 || &bytes[..5] != FEATURE_MAGIC {
        return Err(load_err(path, "not a FEAT1 feature file"));
    }
    let frames = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let body = &bytes[13..];
    if body.len() != frames * dim * 4 {
        return Err(load_err(
            path,
            format!("expected {} bytes of features for {frames}x{dim}, found {}", frames * dim * 4, body.len()),
        ));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let arr = Array2::from_shape_vec((frames, dim), values).map_err(|e| load_err(path, e.to_string()))?;
    FrameSequence::new(arr).map_err(|e| load_err(path, e.to_string()))
}

pub fn write_features(path: &Path, seq: &FrameSequence) -> Result<()> {
    let (t, d) = seq.features().dim();
    let mut out = Vec::with_capacity(13 + t * d * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for &v in seq.features().iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Class names, one per line, resolved against `labels`.
pub fn read_label_file(path: &Path, labels: &LabelMap) -> Result<Vec<ClassId>> {
    non_empty_lines(&read_text(path)?)
        .map(|name| {
            labels
                .index(name)
                .ok_or_else(|| load_err(path, format!("unknown class `{name}`")))
        })
        .collect()
}

pub fn write_label_file(path: &Path, classes: &[ClassId], labels: &LabelMap) -> Result<()> {
    let mut out = String::new();
    for &c in classes {
        let name = labels
            .name(c)
            .ok_or_else(|| Error::InvalidInput(format!("class {c} has no name")))?;
        out.push_str(name);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_id_list(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(non_empty_lines(&read_text(path)?).map(str::to_owned).collect())
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let labels_path = root.join("labels.txt");
    let labels = LabelMap::new(non_empty_lines(&read_text(&labels_path)?).map(str::to_owned).collect())
        .map_err(|e| load_err(&labels_path, e.to_string()))?;

    let train_ids = read_id_list(&root.join("train.txt"))?;
    let test_ids = read_id_list(&root.join("test.txt"))?;
    let all: BTreeSet<&String> = train_ids.iter().chain(&test_ids).collect();
    if all.is_empty() {
        return Err(load_err(root, "no videos listed in train.txt or test.txt"));
    }

    let mut videos = Vec::with_capacity(all.len());
    let mut dim = None;
    for id in all {
        let feat_path = root.join("features").join(format!("{id}.feat"));
        let features = read_features(&feat_path)?;
        match dim {
            None => dim = Some(features.dim()),
            Some(d) if d != features.dim() => {
                return Err(load_err(&feat_path, format!("feature dim {} differs from {d}", features.dim())));
            }
            _ => {}
        }
        let tr_path = root.join("transcripts").join(format!("{id}.txt"));
        let transcript = read_label_file(&tr_path, &labels)?;
        if transcript.is_empty() {
            return Err(load_err(&tr_path, "empty transcript"));
        }
        let gt_path = root.join("groundtruth").join(format!("{id}.txt"));
        let ground_truth = if gt_path.exists() {
            let gt = read_label_file(&gt_path, &labels)?;
            if gt.len() != features.frames() {
                return Err(load_err(
                    &gt_path,
                    format!("{} ground-truth labels for {} frames", gt.len(), features.frames()),
                ));
            }
            if Segmentation::from_framewise(&gt).labels != transcript {
                return Err(load_err(&gt_path, "ground truth does not contract to the transcript"));
            }
            Some(gt)
        } else {
            None
        };
        videos.push(Video { id: id.clone(), features: Arc::new(features), transcript, ground_truth });
    }

    let index_of = |ids: &[String]| -> Vec<usize> {
        ids.iter()
            .map(|id| videos.binary_search_by(|v| v.id.cmp(id)).expect("listed video loaded"))
            .collect()
    };
    let train = index_of(&train_ids);
    let test = index_of(&test_ids);
    let grammar_path = root.join("grammar.txt");
    let grammar = if grammar_path.exists() { Some(read_text(&grammar_path)?) } else { None };
    Ok(Dataset { labels, videos, train, test, grammar })
}

pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    for sub in ["features", "transcripts", "groundtruth"] {
        fs::create_dir_all(root.join(sub))?;
    }
    fs::write(root.join("labels.txt"), ds.labels.names().join("\n") + "\n")?;
    let ids = |idx: &[usize]| -> String {
        idx.iter().map(|&i| format!("{}\n", ds.videos[i].id)).collect()
    };
    fs::write(root.join("train.txt"), ids(&ds.train))?;
    fs::write(root.join("test.txt"), ids(&ds.test))?;
    for v in &ds.videos {
        write_features(&root.join("features").join(format!("{}.feat", v.id)), &v.features)?;
        write_label_file(&root.join("transcripts").join(format!("{}.txt", v.id)), &v.transcript, &ds.labels)?;
        if let Some(gt) = &v.ground_truth {
            write_label_file(&root.join("groundtruth").join(format!("{}.txt", v.id)), gt, &ds.labels)?;
        }
    }
    if let Some(g) = &ds.grammar {
        fs::write(root.join("grammar.txt"), g)?;
    }
    Ok(())
}

/// Parameters of a synthetic weakly labeled dataset: Gaussian class clusters,
/// Poisson segment lengths and a weighted set of allowed transcripts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub class_means: Vec<Vec<f64>>,
    pub spread: f64,
    pub lambdas: Vec<f64>,
    pub transcripts: Vec<(Transcript, f64)>,
    pub num_train: usize,
    pub num_test: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// Three well separated classes with mean lengths 8, 12 and 20 frames and
    /// transcripts of about 100 frames.
    pub fn desk_scale(seed: u64) -> Self {
        let num_classes = 3;
        let feature_dim = 6;
        let class_means = (0..num_classes)
            .map(|c| (0..feature_dim).map(|d| if d == c { 4.0 } else { 0.0 }).collect())
            .collect();
        SynthConfig {
            num_classes,
            feature_dim,
            class_means,
            spread: 1.0,
            lambdas: vec![8.0, 12.0, 20.0],
            transcripts: vec![
                (vec![0, 1, 2, 0, 1, 2, 0, 1], 1.0),
                (vec![2, 0, 2, 0, 2, 1, 0], 1.0),
                (vec![1, 0, 1, 2, 1, 2, 0, 1], 1.0),
                (vec![0, 2, 0, 1, 0, 2, 0, 1], 1.0),
                (vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1], 1.0),
                (vec![2, 1, 2, 1, 2], 1.0),
            ],
            num_train: 60,
            num_test: 20,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes;
        if c == 0 || self.feature_dim == 0 {
            return invalid("synthetic config needs classes and feature dims");
        }
        if self.class_means.len() != c || self.class_means.iter().any(|m| m.len() != self.feature_dim) {
            return invalid("class_means must be num_classes x feature_dim");
        }
        if self.lambdas.len() != c || self.lambdas.iter().any(|&l| !(l >= 1.0)) {
            return invalid("every class needs a mean length >= 1");
        }
        if !(self.spread >= 0.0) {
            return invalid("spread must be non-negative");
        }
        if self.transcripts.is_empty() {
            return invalid("no transcripts to draw from");
        }
        for (t, w) in &self.transcripts {
            if t.is_empty() || t.iter().any(|&l| l >= c) {
                return invalid(format!("bad transcript {t:?}"));
            }
            if t.windows(2).any(|p| p[0] == p[1]) {
                return invalid(format!("transcript {t:?} repeats a class in adjacent segments"));
            }
            if !(*w > 0.0) {
                return invalid("transcript weights must be positive");
            }
        }
        Ok(())
    }

    /// Expected segment length of `class` given the `len >= 1` conditioning.
    pub fn conditioned_mean(&self, class: ClassId) -> f64 {
        let l = self.lambdas[class];
        l / (1.0 - (-l).exp())
    }
}

/// Draws a segment length from Poisson(lambda) conditioned on `len >= 1`.
fn draw_length(rng: &mut ChaCha8Rng, poisson: &Poisson<f64>) -> usize {
    loop {
        let v = poisson.sample(rng) as usize;
        if v >= 1 {
            return v;
        }
    }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pick = WeightedIndex::new(cfg.transcripts.iter().map(|t| t.1))
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let poissons: Vec<Poisson<f64>> = cfg
        .lambdas
        .iter()
        .map(|&l| Poisson::new(l).map_err(|e| Error::InvalidInput(e.to_string())))
        .collect::<Result<_>>()?;

    let names = (0..cfg.num_classes).map(|c| format!("class{c}")).collect();
    let labels = LabelMap::new(names)?;
    let mut videos = Vec::new();
    let mut split = Vec::new();
    for i in 0..cfg.num_train + cfg.num_test {
        let is_train = i < cfg.num_train;
        let id = if is_train { format!("train_{i:04}") } else { format!("test_{:04}", i - cfg.num_train) };
        let transcript = cfg.transcripts[pick.sample(&mut rng)].0.clone();
        let mut gt = Vec::new();
        for &c in &transcript {
            let len = draw_length(&mut rng, &poissons[c]);
            gt.extend(std::iter::repeat_n(c, len));
        }
        let mut feats = Array2::zeros((gt.len(), cfg.feature_dim));
        for (t, &c) in gt.iter().enumerate() {
            for d in 0..cfg.feature_dim {
                let noise: f64 = rng.sample(StandardNormal);
                // stored as f32 on disk; round now so save/load is lossless
                feats[[t, d]] = ((cfg.class_means[c][d] + cfg.spread * noise) as f32) as f64;
            }
        }
        videos.push(Video {
            id,
            features: Arc::new(FrameSequence::new(feats)?),
            transcript,
            ground_truth: Some(gt),
        });
        split.push(is_train);
    }

    // ids are zero-padded, so sorting keeps each split in generation order
    let mut tagged: Vec<(Video, bool)> = videos.into_iter().zip(split).collect();
    tagged.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, (_, is_train)) in tagged.iter().enumerate() {
        if *is_train {
            train.push(i);
        } else {
            test.push(i);
        }
    }
    let sorted = tagged.into_iter().map(|(v, _)| v).collect();
    Ok(Dataset { labels, videos: sorted, train, test, grammar: None })
}

/// Path of the per-video label output file.
pub fn label_output_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.txt"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let labels = LabelMap::new(vec!["a".into(), "b".into()]).unwrap();
        let features = FrameSequence::new(ndarray::array![[0.5, -1.25], [2.0, 3.5]]).unwrap();
        Dataset {
            labels,
            videos: vec![Video {
                id: "v1".into(),
                features: Arc::new(features),
                transcript: vec![0],
                ground_truth: Some(vec![0, 0]),
            }],
            train: vec![0],
            test: vec![],
            grammar: None,
        }
    }

    #[test]
    fn minimal_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn unknown_class_names_file() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        let tr = dir.path().join("transcripts/v1.txt");
        fs::write(&tr, "zzz\n").unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Load { path, .. }) => assert_eq!(path, tr),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn missing_features_names_file() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        let f = dir.path().join("features/v1.feat");
        fs::remove_file(&f).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Load { path, .. }) => assert_eq!(path, f),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny();
        let mut v2 = ds.videos[0].clone();
        v2.id = "v2".into();
        v2.features = Arc::new(FrameSequence::new(ndarray::array![[1.0], [2.0]]).unwrap());
        ds.videos.push(v2);
        ds.train.push(1);
        save_dataset(&ds, dir.path()).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Load { .. })));
    }

    #[test]
    fn synthetic_roundtrip_and_determinism() {
        let mut cfg = SynthConfig::desk_scale(3);
        cfg.num_train = 5;
        cfg.num_test = 3;
        let ds = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds, generate_synthetic(&cfg).unwrap());
        assert_eq!(ds.train.len(), 5);
        assert_eq!(ds.test.len(), 3);
        for v in &ds.videos {
            let gt = v.ground_truth.as_ref().unwrap();
            assert_eq!(Segmentation::from_framewise(gt).labels, v.transcript);
        }
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn synthetic_lengths_follow_lambda() {
        let mut cfg = SynthConfig::desk_scale(7);
        cfg.num_train = 1500;
        cfg.num_test = 0;
        let ds = generate_synthetic(&cfg).unwrap();
        let mut sums = vec![0usize; 3];
        let mut counts = vec![0usize; 3];
        for v in &ds.videos {
            let seg = Segmentation::from_framewise(v.ground_truth.as_ref().unwrap());
            for (&c, &l) in seg.labels.iter().zip(&seg.lengths) {
                sums[c] += l;
                counts[c] += 1;
            }
        }
        for c in 0..3 {
            assert!(counts[c] >= 1000, "class {c}: only {} segments", counts[c]);
            let mean = sums[c] as f64 / counts[c] as f64;
            let want = cfg.conditioned_mean(c);
            assert!((mean / want - 1.0).abs() < 0.05, "class {c}: {mean} vs {want}");
        }
    }

    #[test]
    fn clusters_are_trivially_separable() {
        // nearest class mean, estimated from ground truth on the train split
        let ds = generate_synthetic(&SynthConfig::desk_scale(1)).unwrap();
        let (c, d) = (ds.num_classes(), ds.feature_dim());
        let mut means = Array2::<f64>::zeros((c, d));
        let mut counts = vec![0.0; c];
        for v in ds.train_videos() {
            for (t, &y) in v.ground_truth.as_ref().unwrap().iter().enumerate() {
                let mut row = means.row_mut(y);
                row += &v.features.frame(t);
                counts[y] += 1.0;
            }
        }
        for k in 0..c {
            let mut row = means.row_mut(k);
            row /= counts[k];
        }
        let (mut hit, mut total) = (0usize, 0usize);
        for v in ds.test_videos() {
            for (t, &y) in v.ground_truth.as_ref().unwrap().iter().enumerate() {
                let x = v.features.frame(t);
                let pred = (0..c)
                    .min_by(|&a, &b| {
                        let da = (&means.row(a) - &x).mapv(|e| e * e).sum();
                        let db = (&means.row(b) - &x).mapv(|e| e * e).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                hit += usize::from(pred == y);
                total += 1;
            }
        }
        assert!(hit as f64 / total as f64 >= 0.99, "{hit}/{total}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = SynthConfig::desk_scale(0);
        cfg.lambdas[0] = 0.5;
        assert!(generate_synthetic(&cfg).is_err());
        let mut cfg = SynthConfig::desk_scale(0);
        cfg.transcripts.push((vec![0, 0], 1.0));
        assert!(cfg.validate().is_err());
    }
}
