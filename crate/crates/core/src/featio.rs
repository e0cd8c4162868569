//! Snippet feature files, the video manifest, snippet sampling and
//! frame expansion.
//!
//! Container layout (`TFV1`), all integers little-endian:
//!
//! ```text
//! offset 0   4 bytes  magic "TFV1"
//! offset 4   u8       dtype code (0 = f32, 1 = f64)
//! offset 5   u8       rank
//! offset 6   u32 × rank dims
//! ...        payload, row-major, element size × product(dims) bytes
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::numkit::Tensor;
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"TFV1";

/// Frames covered by one snippet.
pub const SNIPPET_FRAMES: usize = 16;

pub fn encode_tensor<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.len() * S::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(S::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn read_payload<T: Scalar, S: Scalar>(bytes: &[u8], n: usize) -> Vec<S> {
    bytes
        .chunks_exact(T::DTYPE.size())
        .take(n)
        .map(|c| S::lit(T::read_le(c).as_f64()))
        .collect()
}

/// Decodes a container of any rank, converting elements to `S`.
pub fn decode_tensor<S: Scalar>(bytes: &[u8], path: &Path) -> Result<Tensor<S>> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let dtype = DType::from_code(bytes[4]).ok_or(Error::BadDType {
        path: path.to_path_buf(),
        code: bytes[4],
    })?;
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let n: usize = dims.iter().product();
    let expected = header + n * dtype.size();
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let payload = &bytes[header..];
    let data = match dtype {
        DType::F32 => read_payload::<f32, S>(payload, n),
        DType::F64 => read_payload::<f64, S>(payload, n),
    };
    Tensor::new(dims, data)
}

pub fn write_tensor<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    write_atomic(path, &encode_tensor(t))
}

pub fn read_tensor<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes = fs::read(path).at(path)?;
    decode_tensor(&bytes, path)
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    let tmp = path.with_extension("tmp~");
    {
        let mut f = fs::File::create(&tmp).at(&tmp)?;
        f.write_all(bytes).at(&tmp)?;
        f.sync_all().at(&tmp)?;
    }
    fs::rename(&tmp, path).at(path)
}

/// All crops of a feature file as `T×D` matrices (one for rank 2).
pub fn load_crops<S: Scalar>(path: &Path) -> Result<Vec<Tensor<S>>> {
    let t: Tensor<S> = read_tensor(path)?;
    match t.rank() {
        2 => Ok(vec![t]),
        3 => {
            let (c, len, d) = (t.dims()[0], t.dims()[1], t.dims()[2]);
            let data = t.into_data();
            (0..c)
                .map(|i| Tensor::new(vec![len, d], data[i * len * d..(i + 1) * len * d].to_vec()))
                .collect()
        }
        rank => Err(Error::BadRank {
            path: path.to_path_buf(),
            rank,
        }),
    }
}

/// Loads a `T×D` feature sequence, averaging over the crop axis if present.
pub fn load_features<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let crops = load_crops::<S>(path)?;
    if crops.len() == 1 {
        return Ok(crops.into_iter().next().expect("one crop"));
    }
    Ok(mean_of(&crops))
}

fn mean_of<S: Scalar>(crops: &[Tensor<S>]) -> Tensor<S> {
    let n = S::lit(crops.len() as f64);
    let mut acc = vec![S::zero(); crops[0].len()];
    for c in crops {
        for (a, &v) in acc.iter_mut().zip(c.data()) {
            *a += v;
        }
    }
    for a in &mut acc {
        *a /= n;
    }
    Tensor::new(crops[0].dims().to_vec(), acc).expect("same dims")
}

/// Reduces `T` snippets to at most `limit` by averaging contiguous,
/// near-equal segments. Segment `i` covers `[⌊iT/limit⌋, ⌊(i+1)T/limit⌋)`.
pub fn sample_snippets<S: Scalar>(x: &Tensor<S>, limit: usize) -> Result<Tensor<S>> {
    if limit == 0 {
        return Err(Error::InvalidArgument("snippet limit must be >= 1".into()));
    }
    let (t, d) = (x.rows(), x.cols());
    if t == 0 || x.is_empty() {
        return Err(Error::InvalidArgument("empty feature sequence".into()));
    }
    if t <= limit {
        return Ok(x.clone());
    }
    let mut out = Vec::with_capacity(limit * d);
    for i in 0..limit {
        let (lo, hi) = (i * t / limit, (i + 1) * t / limit);
        let n = S::lit((hi - lo) as f64);
        let mut acc = vec![S::zero(); d];
        for r in lo..hi {
            for (a, &v) in acc.iter_mut().zip(x.row(r)) {
                *a += v;
            }
        }
        out.extend(acc.into_iter().map(|v| v / n));
    }
    Tensor::new(vec![limit, d], out)
}

/// Repeats each snippet score over its 16 frames, then truncates or pads
/// with the last score to exactly `frame_count` values.
pub fn expand_to_frames<S: Scalar>(scores: &[S], frame_count: usize) -> Result<Vec<S>> {
    let last = *scores
        .last()
        .ok_or_else(|| Error::InvalidArgument("empty score sequence".into()))?;
    if frame_count == 0 {
        return Err(Error::InvalidArgument("frame count must be >= 1".into()));
    }
    let mut out: Vec<S> = scores
        .iter()
        .flat_map(|&s| std::iter::repeat_n(s, SNIPPET_FRAMES))
        .take(frame_count)
        .collect();
    out.resize(frame_count, last);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

pub const NORMAL_CLASS: &str = "normal";

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub id: String,
    /// Feature file path; relative paths resolve against the manifest directory.
    pub features: PathBuf,
    pub label: u8,
    pub class: String,
    /// Frame-level ground truth (0/1 per frame), evaluation split only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<Vec<u8>>,
    pub split: Split,
}

impl VideoRecord {
    pub fn is_abnormal(&self) -> bool {
        self.label == 1
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<VideoRecord>,
}

impl Manifest {
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: VideoRecord = serde_json::from_str(line).map_err(|e| Error::Manifest {
                line: line_no,
                msg: e.to_string(),
            })?;
            let bad = |msg: String| Error::Manifest { line: line_no, msg };
            if rec.label > 1 {
                return Err(bad(format!("label must be 0 or 1, got {}", rec.label)));
            }
            if rec.label == 0 && rec.class != NORMAL_CLASS {
                return Err(bad(format!(
                    "normal video {} has class {:?}",
                    rec.id, rec.class
                )));
            }
            if rec.label == 1 && rec.class == NORMAL_CLASS {
                return Err(bad(format!("abnormal video {} has class normal", rec.id)));
            }
            if rec.frames.is_some() && rec.split == Split::Train {
                return Err(bad(format!("train video {} carries frame labels", rec.id)));
            }
            if let Some(f) = &rec.frames {
                if f.iter().any(|&b| b > 1) {
                    return Err(bad(format!("frame labels of {} must be 0/1", rec.id)));
                }
            }
            if !seen.insert(rec.id.clone()) {
                return Err(bad(format!("duplicate id {}", rec.id)));
            }
            records.push(rec);
        }
        Ok(Manifest {
            root: root.to_path_buf(),
            records,
        })
    }

    /// Reads a manifest and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let root = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let m = Manifest::parse(&text, &root)?;
        for (i, r) in m.records.iter().enumerate() {
            let p = m.feature_path(r);
            if !p.exists() {
                return Err(Error::Manifest {
                    line: i + 1,
                    msg: format!("feature file {} does not exist", p.display()),
                });
            }
        }
        Ok(m)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn feature_path(&self, r: &VideoRecord) -> PathBuf {
        if r.features.is_absolute() {
            r.features.clone()
        } else {
            self.root.join(&r.features)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Sorted anomaly classes present in the manifest.
    pub fn anomaly_classes(&self) -> Vec<String> {
        let mut c: Vec<String> = self
            .records
            .iter()
            .filter(|r| r.is_abnormal())
            .map(|r| r.class.clone())
            .collect();
        c.sort();
        c.dedup();
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank2_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.tfv");
        let t = Tensor::<f32>::new(vec![4, 8], (0..32).map(|i| i as f32 * 0.5 - 3.0).collect()).unwrap();
        write_tensor(&p, &t).unwrap();
        assert_eq!(load_features::<f32>(&p).unwrap(), t);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..6], &[b'T', b'F', b'V', b'1', 0, 2]);
        assert_eq!(&bytes[6..10], &4u32.to_le_bytes());
        assert_eq!(bytes.len(), 6 + 8 + 32 * 4);
    }

    #[test]
    fn crop_axis_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.tfv");
        let t = Tensor::<f64>::new(vec![2, 1, 1], vec![1.0, 3.0]).unwrap();
        write_tensor(&p, &t).unwrap();
        assert_eq!(load_features::<f64>(&p).unwrap().data(), &[2.0]);

        let same = Tensor::<f64>::new(vec![2, 2, 3], [[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; 2].concat()).unwrap();
        write_tensor(&p, &same).unwrap();
        assert_eq!(
            load_features::<f64>(&p).unwrap(),
            Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        );
    }

    #[test]
    fn decode_errors_are_distinct() {
        let p = Path::new("x.tfv");
        let good = encode_tensor(&Tensor::<f32>::zeros(&[2, 2]));
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_tensor::<f32>(&bad_magic, p), Err(Error::BadMagic { .. })));
        let mut bad_dtype = good.clone();
        bad_dtype[4] = 9;
        assert!(matches!(decode_tensor::<f32>(&bad_dtype, p), Err(Error::BadDType { code: 9, .. })));
        let truncated = &good[..good.len() - 1];
        assert!(matches!(decode_tensor::<f32>(truncated, p), Err(Error::Truncated { .. })));
    }

    #[test]
    fn rank_one_feature_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.tfv");
        write_tensor(&p, &Tensor::<f32>::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(load_features::<f32>(&p), Err(Error::BadRank { rank: 1, .. })));
    }

    #[test]
    fn sampling_examples() {
        let x = Tensor::<f64>::new(vec![150, 2], (0..300).map(f64::from).collect()).unwrap();
        assert_eq!(sample_snippets(&x, 200).unwrap(), x);

        let x = Tensor::<f64>::new(vec![400, 1], (0..400).map(f64::from).collect()).unwrap();
        let y = sample_snippets(&x, 200).unwrap();
        assert_eq!(y.dims(), &[200, 1]);
        for i in 0..200 {
            assert_eq!(y.data()[i], (2 * i) as f64 + 0.5);
        }

        let c = Tensor::<f64>::full(&[333, 3], 0.25);
        assert!(sample_snippets(&c, 200).unwrap().data().iter().all(|&v| v == 0.25));

        assert!(sample_snippets(&Tensor::<f64>::zeros(&[0, 3]), 10).is_err());
        assert!(sample_snippets(&c, 0).is_err());
    }

    #[test]
    fn expansion_examples() {
        assert_eq!(expand_to_frames(&[0.2f64], 16).unwrap(), vec![0.2; 16]);
        let e = expand_to_frames(&[0.1f64, 0.9], 20).unwrap();
        assert_eq!(&e[..16], &[0.1; 16]);
        assert_eq!(&e[16..], &[0.9; 4]);
        assert_eq!(expand_to_frames(&[0.5f64], 20).unwrap(), vec![0.5; 20]);
        assert!(expand_to_frames::<f64>(&[], 4).is_err());
    }

    #[test]
    fn manifest_validation() {
        let root = Path::new("/data");
        let ok = r#"{"id":"a","features":"a.tfv","label":1,"class":"fighting","split":"train"}
{"id":"b","features":"b.tfv","label":0,"class":"normal","frames":[0,0,0],"split":"test"}"#;
        let m = Manifest::parse(ok, root).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.feature_path(&m.records[0]), Path::new("/data/a.tfv"));
        assert_eq!(m.anomaly_classes(), vec!["fighting".to_string()]);

        let dup = r#"{"id":"a","features":"a.tfv","label":0,"class":"normal","split":"train"}
{"id":"a","features":"b.tfv","label":0,"class":"normal","split":"train"}"#;
        assert!(matches!(Manifest::parse(dup, root), Err(Error::Manifest { line: 2, .. })));

        let bad_class = r#"{"id":"a","features":"a.tfv","label":0,"class":"fighting","split":"train"}"#;
        assert!(Manifest::parse(bad_class, root).is_err());

        let train_frames = r#"{"id":"a","features":"a.tfv","label":0,"class":"normal","frames":[0],"split":"train"}"#;
        assert!(Manifest::parse(train_frames, root).is_err());

        let unknown = r#"{"id":"a","features":"a.tfv","label":0,"class":"normal","split":"train","x":1}"#;
        assert!(Manifest::parse(unknown, root).is_err());
    }

    #[test]
    fn manifest_load_checks_files() {
        let dir = tempfile::tempdir().unwrap();
        let mp = dir.path().join("m.jsonl");
        fs::write(&mp, r#"{"id":"a","features":"missing.tfv","label":0,"class":"normal","split":"train"}"#).unwrap();
        assert!(Manifest::load(&mp).is_err());
    }
}
