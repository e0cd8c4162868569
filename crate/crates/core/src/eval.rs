//! Test-time score smoothing and frame-level metrics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::featio::write_atomic;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmoothMode {
    None,
    /// Non-overlapping blocks of `κ`; every index gets its block mean.
    Moving,
    /// Forward window `[i, i+κ-1]`.
    Sliding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tail {
    /// Positions past the end count as zero; divisor is always `κ`.
    Zero,
    /// Divide by the number of real positions in the window.
    Shrink,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingConfig {
    pub mode: SmoothMode,
    pub window: usize,
    pub tail: Tail,
}

impl SmoothingConfig {
    pub fn new(mode: SmoothMode, window: usize) -> Self {
        SmoothingConfig {
            mode,
            window,
            tail: Tail::Zero,
        }
    }

    pub fn none() -> Self {
        SmoothingConfig::new(SmoothMode::None, 1)
    }
}

pub fn smooth<S: Scalar>(s: &[S], cfg: &SmoothingConfig) -> Vec<S> {
    let k = cfg.window.max(1);
    if cfg.mode == SmoothMode::None || k == 1 {
        return s.to_vec();
    }
    let len = s.len();
    (0..len)
        .map(|i| {
            let start = match cfg.mode {
                SmoothMode::Moving => (i / k) * k,
                _ => i,
            };
            let end = (start + k).min(len);
            let total: S = s[start..end].iter().copied().sum();
            let div = match cfg.tail {
                Tail::Zero => k,
                Tail::Shrink => end - start,
            };
            total / S::lit(div as f64)
        })
        .collect()
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    (pos, labels.len() - pos)
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// ROC-AUC via the rank-sum statistic with midranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("ROC-AUC needs both positive and negative frames".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&o| labels[o] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Step-wise average precision; descending score order, ties by index.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(Error::Metric("average precision needs a positive frame".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &o) in order.iter().enumerate() {
        if labels[o] == 1 {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(acc / pos as f64)
}

/// Fraction of negative frames scored at or above `threshold`.
pub fn far(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (_, neg) = class_counts(labels);
    if neg == 0 {
        return Err(Error::Metric("false alarm rate needs a negative frame".into()));
    }
    let alarms = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| l == 0 && s >= threshold)
        .count();
    Ok(alarms as f64 / neg as f64)
}

pub const FAR_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FarScope {
    /// Frames of normal videos only.
    NormalVideos,
    /// Every frame labelled 0, including those inside abnormal videos.
    AllNegatives,
}

/// Frame scores and labels of one test video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoScores {
    pub id: String,
    pub class: String,
    pub label: u8,
    pub scores: Vec<f64>,
    pub frames: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub auc: f64,
    pub ap: f64,
    pub videos: usize,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub id: String,
    pub class: String,
    pub label: u8,
    pub frames: usize,
    pub mean_score: f64,
    pub max_score: f64,
    /// Only for videos with both frame classes.
    pub auc: Option<f64>,
    /// Only for videos with negative frames.
    pub far: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub videos: usize,
    pub frames: usize,
    pub positive_frames: usize,
    pub negative_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: f64,
    pub ap: f64,
    pub far: f64,
    pub far_threshold: f64,
    pub far_scope: FarScope,
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub per_video: Vec<VideoMetrics>,
    pub counts: Counts,
}

fn concat(videos: &[&VideoScores]) -> (Vec<f64>, Vec<u8>) {
    let mut s = Vec::new();
    let mut l = Vec::new();
    for v in videos {
        s.extend_from_slice(&v.scores);
        l.extend_from_slice(&v.frames);
    }
    (s, l)
}

/// Each anomaly class's abnormal videos evaluated against every normal video.
pub fn per_class_report(videos: &[VideoScores]) -> Result<BTreeMap<String, ClassMetrics>> {
    let normals: Vec<&VideoScores> = videos.iter().filter(|v| v.label == 0).collect();
    let mut classes: Vec<&str> = videos
        .iter()
        .filter(|v| v.label == 1)
        .map(|v| v.class.as_str())
        .collect();
    classes.sort();
    classes.dedup();
    let mut out = BTreeMap::new();
    for class in classes {
        let mut pool: Vec<&VideoScores> = videos
            .iter()
            .filter(|v| v.label == 1 && v.class == class)
            .collect();
        let n_videos = pool.len();
        pool.extend(normals.iter().copied());
        let (s, l) = concat(&pool);
        match (roc_auc(&s, &l), average_precision(&s, &l)) {
            (Ok(auc), Ok(ap)) => {
                out.insert(
                    class.to_string(),
                    ClassMetrics {
                        auc,
                        ap,
                        videos: n_videos,
                        frames: s.len(),
                    },
                );
            }
            (Err(e), _) | (_, Err(e)) => log::warn!("class {class} omitted from report: {e}"),
        }
    }
    Ok(out)
}

pub fn evaluate(videos: &[VideoScores], far_scope: FarScope) -> Result<MetricReport> {
    for v in videos {
        if v.scores.len() != v.frames.len() {
            return Err(Error::Metric(format!(
                "video {}: {} scores vs {} frame labels",
                v.id,
                v.scores.len(),
                v.frames.len()
            )));
        }
    }
    let all: Vec<&VideoScores> = videos.iter().collect();
    let (s, l) = concat(&all);
    let auc = roc_auc(&s, &l)?;
    let ap = average_precision(&s, &l)?;
    let far_value = match far_scope {
        FarScope::AllNegatives => far(&s, &l, FAR_THRESHOLD)?,
        FarScope::NormalVideos => {
            let normals: Vec<&VideoScores> = videos.iter().filter(|v| v.label == 0).collect();
            let (ns, nl) = concat(&normals);
            far(&ns, &nl, FAR_THRESHOLD)?
        }
    };
    let per_video = videos
        .iter()
        .map(|v| VideoMetrics {
            id: v.id.clone(),
            class: v.class.clone(),
            label: v.label,
            frames: v.scores.len(),
            mean_score: v.scores.iter().sum::<f64>() / v.scores.len().max(1) as f64,
            max_score: v.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            auc: roc_auc(&v.scores, &v.frames).ok(),
            far: far(&v.scores, &v.frames, FAR_THRESHOLD).ok(),
        })
        .collect();
    let (pos, neg) = class_counts(&l);
    Ok(MetricReport {
        auc,
        ap,
        far: far_value,
        far_threshold: FAR_THRESHOLD,
        far_scope,
        per_class: per_class_report(videos)?,
        per_video,
        counts: Counts {
            videos: videos.len(),
            frames: s.len(),
            positive_frames: pos,
            negative_frames: neg,
        },
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    /// One row per video and per class, plus an `overall` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["kind", "name", "class", "label", "videos", "frames", "auc", "ap", "far", "mean_score", "max_score"])?;
        w.write_record([
            "overall".to_string(),
            "all".to_string(),
            String::new(),
            String::new(),
            self.counts.videos.to_string(),
            self.counts.frames.to_string(),
            format!("{:.6}", self.auc),
            format!("{:.6}", self.ap),
            format!("{:.6}", self.far),
            String::new(),
            String::new(),
        ])?;
        for (class, m) in &self.per_class {
            w.write_record([
                "class".to_string(),
                class.clone(),
                class.clone(),
                "1".to_string(),
                m.videos.to_string(),
                m.frames.to_string(),
                format!("{:.6}", m.auc),
                format!("{:.6}", m.ap),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
        for v in &self.per_video {
            w.write_record([
                "video".to_string(),
                v.id.clone(),
                v.class.clone(),
                v.label.to_string(),
                "1".to_string(),
                v.frames.to_string(),
                opt(v.auc),
                String::new(),
                opt(v.far),
                format!("{:.6}", v.mean_score),
                format!("{:.6}", v.max_score),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Metric(format!("csv flush: {e}")))?;
        write_atomic(path, &bytes)
    }
}

/// Snippet-level scores of one video as written by the scoring command.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub frames: Vec<f64>,
}

/// Writes `<id>.snippets.csv` (snippet, raw, smoothed) and `<id>.csv`
/// (frame, score) into `dir`.
pub fn write_scores(dir: &Path, id: &str, rec: &ScoreRecord) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["snippet", "raw", "smoothed"])?;
    for (i, (r, s)) in rec.raw.iter().zip(&rec.smoothed).enumerate() {
        w.write_record([i.to_string(), format!("{r:.9}"), format!("{s:.9}")])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Metric(e.to_string()))?;
    write_atomic(&dir.join(format!("{id}.snippets.csv")), &bytes)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["frame", "score"])?;
    for (i, s) in rec.frames.iter().enumerate() {
        w.write_record([i.to_string(), format!("{s:.9}")])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Metric(e.to_string()))?;
    write_atomic(&dir.join(format!("{id}.csv")), &bytes)
}

/// Reads the frame-level scores written by [`write_scores`].
pub fn read_frame_scores(dir: &Path, id: &str) -> Result<Vec<f64>> {
    let path = dir.join(format!("{id}.csv"));
    let text = std::fs::read_to_string(&path).at(&path)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let v: f64 = row
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Metric(format!("bad score row in {}", path.display())))?;
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featio::NORMAL_CLASS;

    #[test]
    fn smoothing_examples() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(smooth(&s, &SmoothingConfig::new(SmoothMode::Moving, 2)), vec![1.5, 1.5, 3.5, 3.5]);
        assert_eq!(smooth(&s, &SmoothingConfig::new(SmoothMode::Sliding, 2)), vec![1.5, 2.5, 3.5, 2.0]);
        for mode in [SmoothMode::Moving, SmoothMode::Sliding, SmoothMode::None] {
            assert_eq!(smooth(&s, &SmoothingConfig::new(mode, 1)), s.to_vec());
        }
        let shrink = SmoothingConfig {
            tail: Tail::Shrink,
            ..SmoothingConfig::new(SmoothMode::Sliding, 2)
        };
        assert_eq!(smooth(&s, &shrink), vec![1.5, 2.5, 3.5, 4.0]);
        // moving window, partial last block
        assert_eq!(smooth(&[3.0, 3.0, 3.0], &SmoothingConfig::new(SmoothMode::Moving, 2)), vec![3.0, 3.0, 1.5]);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.9], &[0, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.1], &[0, 1]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.2, 0.8], &[1, 0]).unwrap(), 0.5);
        assert!(average_precision(&[0.2, 0.8], &[0, 0]).is_err());
    }

    #[test]
    fn far_examples() {
        assert_eq!(far(&[0.1, 0.4, 0.9], &[0, 0, 1], 0.5).unwrap(), 0.0);
        assert_eq!(far(&[0.6, 0.4], &[0, 0], 0.5).unwrap(), 0.5);
        assert_eq!(far(&[0.5], &[0], 0.5).unwrap(), 1.0);
        assert!(far(&[0.6], &[1], 0.5).is_err());
    }

    fn video(id: &str, class: &str, scores: Vec<f64>, frames: Vec<u8>) -> VideoScores {
        VideoScores {
            id: id.into(),
            class: class.into(),
            label: u8::from(class != NORMAL_CLASS),
            scores,
            frames,
        }
    }

    #[test]
    fn far_scope_switch() {
        let vids = vec![
            video("a", "fight", vec![0.9, 0.6], vec![1, 0]),
            video("n", NORMAL_CLASS, vec![0.1, 0.2], vec![0, 0]),
        ];
        assert_eq!(evaluate(&vids, FarScope::NormalVideos).unwrap().far, 0.0);
        assert!((evaluate(&vids, FarScope::AllNegatives).unwrap().far - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn per_class_symmetry_and_restriction() {
        let vids = vec![
            video("a", "fight", vec![0.9, 0.3], vec![1, 0]),
            video("b", "theft", vec![0.9, 0.3], vec![1, 0]),
            video("n", NORMAL_CLASS, vec![0.2, 0.4], vec![0, 0]),
        ];
        let pc = per_class_report(&vids).unwrap();
        assert_eq!(pc["fight"], pc["theft"]);

        let single = vec![vids[0].clone(), vids[2].clone()];
        let r = evaluate(&single, FarScope::NormalVideos).unwrap();
        assert_eq!(r.per_class["fight"].auc, r.auc);
        assert_eq!(r.per_class["fight"].ap, r.ap);
    }

    #[test]
    fn score_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = ScoreRecord {
            raw: vec![0.25, 0.5],
            smoothed: vec![0.375, 0.25],
            frames: vec![0.375; 20],
        };
        write_scores(dir.path(), "v1", &rec).unwrap();
        assert_eq!(read_frame_scores(dir.path(), "v1").unwrap(), rec.frames);
    }
}
