//! Knowledge-graph prompt construction.
//!
//! Edges around each class label are pulled from ConceptNet (live or from
//! recorded responses), the most frequent relations are kept, low-relevance
//! nodes are filtered, and the surviving key phrases are embedded and
//! averaged into one prompt vector per class.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, IoContext, Result};
use crate::featio::{write_atomic, NORMAL_CLASS};
use crate::numkit::{derive_rng, Tensor};
use crate::scalar::Scalar;

/// Candidate relations considered before frequency selection.
pub const RELATIONS: [&str; 12] = [
    "IsA",
    "PartOf",
    "HasA",
    "UsedFor",
    "CapableOf",
    "Causes",
    "HasSubevent",
    "HasPrerequisite",
    "HasProperty",
    "DefinedAs",
    "MannerOf",
    "SimilarTo",
];

pub const DEFAULT_TOP_RELATIONS: usize = 5;
pub const DEFAULT_API: &str = "https://api.conceptnet.io";
pub const PAGE_LIMIT: usize = 1000;

pub fn check_relation(r: &str) -> Result<()> {
    if RELATIONS.contains(&r) {
        Ok(())
    } else {
        Err(Error::UnknownRelation(r.to_string()))
    }
}

/// Lowercased, underscore-joined form used in `/c/en/<label>` URIs and
/// fixture directory names.
pub fn uri_label(label: &str) -> String {
    label
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join("_")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ClassAsHead,
    ClassAsTail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptEdge {
    pub class: String,
    pub relation: String,
    pub key: String,
    pub score: f64,
    pub direction: Direction,
}

fn node_matches(node: &Value, uri: &str) -> bool {
    let id = node
        .get("term")
        .or_else(|| node.get("@id"))
        .and_then(Value::as_str)
        .unwrap_or("");
    id == uri || id.starts_with(&format!("{uri}/"))
}

fn is_english(node: &Value) -> bool {
    match node.get("language").and_then(Value::as_str) {
        Some(lang) => lang == "en",
        None => node
            .get("@id")
            .and_then(Value::as_str)
            .is_some_and(|id| id.starts_with("/c/en/")),
    }
}

/// One page of a `/query` response: edges touching `class` under `relation`
/// plus the `nextPage` link if any. Non-English key nodes are skipped.
pub fn parse_response(text: &str, class: &str, relation: &str) -> Result<(Vec<ConceptEdge>, Option<String>)> {
    let v: Value = serde_json::from_str(text)?;
    let uri = format!("/c/en/{}", uri_label(class));
    let mut out = Vec::new();
    for e in v.get("edges").and_then(Value::as_array).into_iter().flatten() {
        let rel = e
            .get("rel")
            .and_then(|r| r.get("label").or_else(|| r.get("@id")))
            .and_then(Value::as_str)
            .unwrap_or("")
            .trim_start_matches("/r/");
        if rel != relation {
            continue;
        }
        let (Some(start), Some(end)) = (e.get("start"), e.get("end")) else {
            continue;
        };
        let (direction, other) = match (node_matches(start, &uri), node_matches(end, &uri)) {
            (true, false) => (Direction::ClassAsHead, end),
            (false, true) => (Direction::ClassAsTail, start),
            _ => continue,
        };
        if !is_english(other) {
            continue;
        }
        let key = other
            .get("label")
            .and_then(Value::as_str)
            .unwrap_or("")
            .trim()
            .to_string();
        if key.is_empty() {
            continue;
        }
        let score = e.get("weight").and_then(Value::as_f64).unwrap_or(0.0);
        out.push(ConceptEdge {
            class: class.to_string(),
            relation: relation.to_string(),
            key,
            score,
            direction,
        });
    }
    let next = v
        .get("view")
        .and_then(|view| view.get("nextPage"))
        .and_then(Value::as_str)
        .map(str::to_string);
    Ok((out, next))
}

/// Where edges come from.
pub trait EdgeSource {
    fn fetch(&self, class: &str, relation: &str) -> Result<Vec<ConceptEdge>>;
}

fn page_file(dir: &Path, class: &str, relation: &str, page: usize) -> PathBuf {
    let name = if page == 0 {
        format!("{relation}.json")
    } else {
        format!("{relation}.p{page}.json")
    };
    dir.join(uri_label(class)).join(name)
}

/// Recorded responses under `<dir>/<label>/<Relation>.json`, with further
/// pages in `<Relation>.p1.json`, `<Relation>.p2.json`, ...
#[derive(Clone, Debug)]
pub struct FixtureSource {
    pub dir: PathBuf,
}

impl EdgeSource for FixtureSource {
    fn fetch(&self, class: &str, relation: &str) -> Result<Vec<ConceptEdge>> {
        check_relation(relation)?;
        let class_dir = self.dir.join(uri_label(class));
        if !class_dir.is_dir() {
            return Err(Error::MissingFixture {
                class: class.to_string(),
                dir: self.dir.clone(),
            });
        }
        let mut edges = Vec::new();
        for page in 0.. {
            let path = page_file(&self.dir, class, relation, page);
            if !path.exists() {
                break;
            }
            let text = fs::read_to_string(&path).at(&path)?;
            edges.extend(parse_response(&text, class, relation)?.0);
        }
        Ok(edges)
    }
}

/// Public REST API client. Responses are cached verbatim in fixture layout
/// so a later [`FixtureSource`] over `cache_dir` reproduces the crawl.
pub struct LiveSource {
    pub base_url: String,
    pub cache_dir: PathBuf,
    pub min_interval: Duration,
    pub attempts: usize,
    last_request: Mutex<Option<Instant>>,
}

impl LiveSource {
    pub fn new(cache_dir: PathBuf) -> Self {
        LiveSource {
            base_url: DEFAULT_API.to_string(),
            cache_dir,
            min_interval: Duration::from_millis(500),
            attempts: 3,
            last_request: Mutex::new(None),
        }
    }

    fn throttle(&self) {
        let mut last = self.last_request.lock().expect("rate limiter poisoned");
        if let Some(t) = *last {
            let elapsed = t.elapsed();
            if elapsed < self.min_interval {
                std::thread::sleep(self.min_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }

    fn get(&self, url: &str) -> Result<String> {
        let mut last_err = String::new();
        for attempt in 0..self.attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_secs(1 << (attempt - 1)));
            }
            self.throttle();
            match ureq::get(url).call() {
                Ok(mut resp) => match resp.body_mut().read_to_string() {
                    Ok(body) => return Ok(body),
                    Err(e) => last_err = e.to_string(),
                },
                Err(e) => last_err = e.to_string(),
            }
            log::warn!("GET {url} failed (attempt {}): {last_err}", attempt + 1);
        }
        Err(Error::Http {
            attempts: self.attempts,
            msg: last_err,
        })
    }
}

impl EdgeSource for LiveSource {
    fn fetch(&self, class: &str, relation: &str) -> Result<Vec<ConceptEdge>> {
        check_relation(relation)?;
        let mut url = format!(
            "{}/query?node=/c/en/{}&rel=/r/{}&limit={}",
            self.base_url,
            uri_label(class),
            relation,
            PAGE_LIMIT
        );
        let mut edges = Vec::new();
        for page in 0.. {
            let body = self.get(&url)?;
            write_atomic(&page_file(&self.cache_dir, class, relation, page), body.as_bytes())?;
            let (found, next) = parse_response(&body, class, relation)?;
            edges.extend(found);
            match next {
                Some(n) => url = format!("{}{}", self.base_url, n),
                None => break,
            }
        }
        Ok(edges)
    }
}

/// Edges for `class` under each listed relation.
pub fn fetch_edges(source: &dyn EdgeSource, class: &str, relations: &[&str]) -> Result<Vec<ConceptEdge>> {
    for r in relations {
        check_relation(r)?;
    }
    let mut out = Vec::new();
    for r in relations {
        out.extend(source.fetch(class, r)?);
    }
    Ok(out)
}

/// The `top_n` relations by total edge count; ties broken lexicographically.
pub fn select_relations(edges: &[ConceptEdge], top_n: usize) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in edges {
        *counts.entry(e.relation.as_str()).or_default() += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    if ranked.len() < top_n {
        log::warn!(
            "only {} distinct relations available, wanted {top_n}",
            ranked.len()
        );
    }
    ranked.into_iter().take(top_n).map(|(r, _)| r.to_string()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FilterMode {
    None,
    /// Drop scores `<= 0`.
    Step1,
    /// Step 1, then keep scores `>= θ`.
    Step1Fixed(f64),
    /// Step 1, then keep scores `>=` the class mean after step 1.
    Step1Dynamic,
}

impl FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FilterMode::None),
            "step1" => Ok(FilterMode::Step1),
            "step1+dynamic" => Ok(FilterMode::Step1Dynamic),
            other => {
                let theta = other
                    .strip_prefix("step1+fixed:")
                    .and_then(|t| t.parse::<f64>().ok())
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "filter mode {other:?}; expected none, step1, step1+fixed:<θ> or step1+dynamic"
                        ))
                    })?;
                Ok(FilterMode::Step1Fixed(theta))
            }
        }
    }
}

impl fmt::Display for FilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterMode::None => write!(f, "none"),
            FilterMode::Step1 => write!(f, "step1"),
            FilterMode::Step1Fixed(t) => write!(f, "step1+fixed:{t}"),
            FilterMode::Step1Dynamic => write!(f, "step1+dynamic"),
        }
    }
}

/// Applies node filtering per class, preserving edge order.
pub fn filter_nodes(edges: &[ConceptEdge], mode: FilterMode) -> Vec<ConceptEdge> {
    if mode == FilterMode::None {
        return edges.to_vec();
    }
    let step1: Vec<&ConceptEdge> = edges.iter().filter(|e| e.score > 0.0).collect();
    let out: Vec<ConceptEdge> = match mode {
        FilterMode::None => unreachable!(),
        FilterMode::Step1 => step1.into_iter().cloned().collect(),
        FilterMode::Step1Fixed(theta) => step1.into_iter().filter(|e| e.score >= theta).cloned().collect(),
        FilterMode::Step1Dynamic => {
            let mut means: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
            for e in &step1 {
                let m = means.entry(e.class.as_str()).or_default();
                m.0 += e.score;
                m.1 += 1;
            }
            step1
                .iter()
                .filter(|e| {
                    let (sum, n) = means[e.class.as_str()];
                    e.score >= sum / n as f64
                })
                .map(|e| (*e).clone())
                .collect()
        }
    };
    if out.is_empty() && !edges.is_empty() {
        log::warn!("node filtering ({mode}) removed every edge");
    }
    out
}

/// Per-class concept edges under the selected relations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConceptDictionary {
    pub relations: Vec<String>,
    pub classes: BTreeMap<String, Vec<ConceptEdge>>,
}

impl ConceptDictionary {
    /// Fetches every candidate relation for every class, keeps the `top_n`
    /// most frequent relations across classes.
    pub fn build(source: &dyn EdgeSource, classes: &[String], top_n: usize) -> Result<Self> {
        let mut all = BTreeMap::new();
        for c in classes {
            all.insert(c.clone(), fetch_edges(source, c, &RELATIONS)?);
        }
        let flat: Vec<ConceptEdge> = all.values().flatten().cloned().collect();
        let relations = select_relations(&flat, top_n);
        let classes = all
            .into_iter()
            .map(|(c, edges)| {
                let kept = edges
                    .into_iter()
                    .filter(|e| relations.contains(&e.relation))
                    .collect();
                (c, kept)
            })
            .collect();
        Ok(ConceptDictionary { relations, classes })
    }

    pub fn filtered(&self, mode: FilterMode) -> Self {
        ConceptDictionary {
            relations: self.relations.clone(),
            classes: self
                .classes
                .iter()
                .map(|(c, e)| (c.clone(), filter_nodes(e, mode)))
                .collect(),
        }
    }

    /// Distinct keys of a class in first-seen order.
    pub fn keys(&self, class: &str) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in self.classes.get(class).into_iter().flatten() {
            if !out.contains(&e.key) {
                out.push(e.key.clone());
            }
        }
        out
    }

    /// Text listing: one block per class, edges drawn head → tail, kept
    /// entries marked with `*`.
    pub fn dump(&self, kept: &ConceptDictionary) -> String {
        let mut s = format!("relations: {}\n", self.relations.join(", "));
        for (class, edges) in &self.classes {
            let survivors = kept.classes.get(class);
            s.push_str(&format!("\n[{class}]\n"));
            for e in edges {
                let mark = if survivors.is_some_and(|k| k.contains(e)) {
                    '*'
                } else {
                    ' '
                };
                let (head, tail) = match e.direction {
                    Direction::ClassAsHead => (class.as_str(), e.key.as_str()),
                    Direction::ClassAsTail => (e.key.as_str(), class.as_str()),
                };
                s.push_str(&format!(
                    "{mark} {head} --{}--> {tail}  ({:.3})\n",
                    e.relation, e.score
                ));
            }
        }
        s
    }
}

fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Deterministic unit-norm stand-in for a text encoder.
pub fn stub_embed(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = derive_rng(seed, 0x5eed_7e47, fnv1a(text));
    let mut v: Vec<f64> = (0..dim.max(1)).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    } else {
        v[0] = 1.0;
    }
    v
}

pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Option<Vec<f64>>;
    fn provenance(&self) -> Provenance;
}

pub struct StubEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Embedder for StubEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Option<Vec<f64>> {
        Some(stub_embed(text, self.dim, self.seed))
    }

    fn provenance(&self) -> Provenance {
        Provenance::StubEmbedder
    }
}

/// Pre-exported text embeddings, `{key: [floats]}`.
pub struct FileEmbedder {
    pub dim: usize,
    pub vectors: BTreeMap<String, Vec<f64>>,
}

impl FileEmbedder {
    pub fn from_map(vectors: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let dim = vectors.values().next().map_or(0, Vec::len);
        if let Some((k, _)) = vectors.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::InvalidArgument(format!(
                "embedding for {k:?} has a different dimension"
            )));
        }
        Ok(FileEmbedder { dim, vectors })
    }

    /// JSON map, or a TFV1 matrix with a sidecar `<file>.keys` (one key per line).
    pub fn load(path: &Path) -> Result<Self> {
        let is_json = path.extension().is_some_and(|e| e == "json");
        if is_json {
            let text = fs::read_to_string(path).at(path)?;
            return FileEmbedder::from_map(serde_json::from_str(&text)?);
        }
        let t: Tensor<f64> = crate::featio::read_tensor(path)?;
        let keys_path = PathBuf::from(format!("{}.keys", path.display()));
        let keys_text = fs::read_to_string(&keys_path).at(&keys_path)?;
        let keys: Vec<&str> = keys_text.lines().filter(|l| !l.is_empty()).collect();
        if t.rank() != 2 || keys.len() != t.rows() {
            return Err(Error::InvalidArgument(format!(
                "{} keys for embedding matrix {:?}",
                keys.len(),
                t.dims()
            )));
        }
        let map = keys
            .iter()
            .enumerate()
            .map(|(i, k)| (k.to_string(), t.row(i).to_vec()))
            .collect();
        FileEmbedder::from_map(map)
    }
}

impl Embedder for FileEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Option<Vec<f64>> {
        self.vectors.get(text).cloned()
    }

    fn provenance(&self) -> Provenance {
        Provenance::ClipFile
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ClipFile,
    StubEmbedder,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplateMode {
    /// `{label}`
    #[serde(rename = "label")]
    Label,
    /// `a video of {label}`
    #[serde(rename = "prefix")]
    Prefix,
    /// `{label}: {definition}` from a supplied definitions map.
    #[serde(rename = "label+wordnet")]
    LabelWordnet,
    /// Label embedding averaged with a fixed seeded random vector.
    #[serde(rename = "learnable")]
    Learnable,
    /// Mean embedding of the filtered concept keys.
    #[serde(rename = "label+conceptnet")]
    LabelConceptnet,
}

impl FromStr for TemplateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| Error::InvalidArgument(format!("unknown template mode {s:?}")))
    }
}

/// One prompt vector per class (anomaly classes plus `normal`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptBank {
    pub dim: usize,
    pub provenance: Provenance,
    pub template: TemplateMode,
    pub classes: BTreeMap<String, Vec<f64>>,
}

impl PromptBank {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let bank: PromptBank = serde_json::from_str(&text)?;
        if let Some((c, _)) = bank
            .classes
            .iter()
            .find(|(_, v)| v.len() != bank.dim || v.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::InvalidArgument(format!(
                "prompt for {c:?} is not a finite {}-vector",
                bank.dim
            )));
        }
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    /// Classes in `wanted` (plus `normal`) that have no prompt.
    pub fn missing(&self, wanted: &[String]) -> Vec<String> {
        wanted
            .iter()
            .map(String::as_str)
            .chain([NORMAL_CLASS])
            .filter(|c| !self.classes.contains_key(*c))
            .map(str::to_string)
            .collect()
    }

    /// `(C+1)×dim` matrix with rows in `order` followed by `normal`.
    pub fn matrix<S: Scalar>(&self, order: &[String]) -> Result<Tensor<S>> {
        let missing = self.missing(order);
        if !missing.is_empty() {
            return Err(Error::MissingPrompt(missing));
        }
        let rows: Vec<Vec<S>> = order
            .iter()
            .map(String::as_str)
            .chain([NORMAL_CLASS])
            .map(|c| self.classes[c].iter().map(|&v| S::lit(v)).collect())
            .collect();
        Ok(Tensor::from_rows(&rows))
    }
}

fn mean_vector(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; vs[0].len()];
    for v in vs {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let n = vs.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

pub struct BankOptions<'a> {
    pub template: TemplateMode,
    /// Definitions for `label+wordnet`.
    pub definitions: Option<&'a BTreeMap<String, String>>,
    pub seed: u64,
}

fn embed_one(embedder: &dyn Embedder, text: &str) -> Result<Vec<f64>> {
    embedder
        .embed(text)
        .ok_or_else(|| Error::MissingEmbeddings(vec![text.to_string()]))
}

/// Builds prompt vectors for `classes` (the normal class is added if absent).
pub fn build_prompt_bank(
    dict: Option<&ConceptDictionary>,
    classes: &[String],
    embedder: &dyn Embedder,
    opts: &BankOptions<'_>,
) -> Result<PromptBank> {
    let mut all: Vec<String> = classes.to_vec();
    if !all.iter().any(|c| c == NORMAL_CLASS) {
        all.push(NORMAL_CLASS.to_string());
    }
    let mut out = BTreeMap::new();
    let mut missing = Vec::new();
    for class in &all {
        let label = class.replace('_', " ");
        let vector = match opts.template {
            TemplateMode::Label => embed_one(embedder, &label),
            TemplateMode::Prefix => embed_one(embedder, &format!("a video of {label}")),
            TemplateMode::LabelWordnet => {
                match opts.definitions.and_then(|d| d.get(class)) {
                    Some(def) => embed_one(embedder, &format!("{label}: {def}")),
                    None => {
                        log::warn!("no definition for {class:?}, using the bare label");
                        embed_one(embedder, &label)
                    }
                }
            }
            TemplateMode::Learnable => embed_one(embedder, &label).map(|base| {
                let ctx = stub_embed(&format!("learnable-context:{class}"), base.len(), opts.seed);
                mean_vector(&[base, ctx])
            }),
            TemplateMode::LabelConceptnet => {
                let keys = dict.map(|d| d.keys(class)).unwrap_or_default();
                if keys.is_empty() {
                    log::warn!("no surviving concept keys for {class:?}, using the bare label");
                    embed_one(embedder, &label)
                } else {
                    let mut vs = Vec::with_capacity(keys.len());
                    for k in &keys {
                        match embedder.embed(k) {
                            Some(v) => vs.push(v),
                            None => missing.push(k.clone()),
                        }
                    }
                    if vs.is_empty() {
                        continue;
                    }
                    Ok(mean_vector(&vs))
                }
            }
        };
        match vector {
            Ok(v) => {
                out.insert(class.clone(), v);
            }
            Err(Error::MissingEmbeddings(keys)) => missing.extend(keys),
            Err(e) => return Err(e),
        }
    }
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(Error::MissingEmbeddings(missing));
    }
    Ok(PromptBank {
        dim: embedder.dim(),
        provenance: embedder.provenance(),
        template: opts.template,
        classes: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edge(class: &str, rel: &str, key: &str, score: f64) -> ConceptEdge {
        ConceptEdge {
            class: class.into(),
            relation: rel.into(),
            key: key.into(),
            score,
            direction: Direction::ClassAsHead,
        }
    }

    #[test]
    fn worked_filter_sequence() {
        let edges: Vec<ConceptEdge> = [2.0, 1.0, -0.5, 0.0]
            .iter()
            .enumerate()
            .map(|(i, &s)| edge("fighting", "IsA", &format!("k{i}"), s))
            .collect();
        let scores = |es: Vec<ConceptEdge>| es.iter().map(|e| e.score).collect::<Vec<_>>();
        assert_eq!(scores(filter_nodes(&edges, FilterMode::None)), vec![2.0, 1.0, -0.5, 0.0]);
        assert_eq!(scores(filter_nodes(&edges, FilterMode::Step1)), vec![2.0, 1.0]);
        assert_eq!(scores(filter_nodes(&edges, FilterMode::Step1Dynamic)), vec![2.0]);
        assert_eq!(scores(filter_nodes(&edges, FilterMode::Step1Fixed(0.5))), vec![2.0, 1.0]);
    }

    #[test]
    fn dynamic_threshold_is_per_class() {
        let edges = vec![
            edge("a", "IsA", "x", 1.0),
            edge("a", "IsA", "y", 3.0),
            edge("b", "IsA", "z", 0.5),
        ];
        let kept = filter_nodes(&edges, FilterMode::Step1Dynamic);
        let keys: Vec<&str> = kept.iter().map(|e| e.key.as_str()).collect();
        assert_eq!(keys, vec!["y", "z"]);
    }

    #[test]
    fn relation_selection() {
        let mut edges = Vec::new();
        for (rel, n) in [("IsA", 10), ("UsedFor", 8), ("HasA", 6), ("Causes", 5), ("PartOf", 4), ("HasProperty", 1)] {
            for i in 0..n {
                edges.push(edge("c", rel, &format!("{rel}{i}"), 1.0));
            }
        }
        assert_eq!(select_relations(&edges, 5), vec!["IsA", "UsedFor", "HasA", "Causes", "PartOf"]);
        assert_eq!(select_relations(&edges[..3], 5), vec!["IsA"]);
        let tie = vec![edge("c", "PartOf", "a", 1.0), edge("c", "Causes", "b", 1.0)];
        assert_eq!(select_relations(&tie, 1), vec!["Causes"]);
    }

    #[test]
    fn unknown_relation_rejected() {
        let src = FixtureSource { dir: PathBuf::from("/nonexistent") };
        assert!(matches!(src.fetch("fighting", "RelatedTo"), Err(Error::UnknownRelation(_))));
        assert!(matches!(fetch_edges(&src, "fighting", &["Antonym"]), Err(Error::UnknownRelation(_))));
    }

    #[test]
    fn parse_directions_and_languages() {
        let text = r#"{"edges":[
            {"rel":{"@id":"/r/IsA","label":"IsA"},"start":{"@id":"/c/en/fighting","label":"fighting","language":"en"},"end":{"@id":"/c/en/conflict","label":"conflict","language":"en"},"weight":2.0},
            {"rel":{"@id":"/r/IsA","label":"IsA"},"start":{"@id":"/c/en/boxing","label":"boxing","language":"en"},"end":{"@id":"/c/en/fighting/n","label":"fighting","language":"en"},"weight":1.0},
            {"rel":{"@id":"/r/IsA","label":"IsA"},"start":{"@id":"/c/en/fighting","label":"fighting","language":"en"},"end":{"@id":"/c/fr/combat","label":"combat","language":"fr"},"weight":1.0}
        ],"view":{"nextPage":"/query?offset=1000"}}"#;
        let (edges, next) = parse_response(text, "fighting", "IsA").unwrap();
        assert_eq!(edges.len(), 2);
        assert_eq!(edges[0].direction, Direction::ClassAsHead);
        assert_eq!(edges[0].key, "conflict");
        assert_eq!(edges[1].direction, Direction::ClassAsTail);
        assert_eq!(edges[1].key, "boxing");
        assert_eq!(next.as_deref(), Some("/query?offset=1000"));
    }

    #[test]
    fn stub_embedding_properties() {
        let a = stub_embed("fighting", 512, 0);
        assert_eq!(a, stub_embed("fighting", 512, 0));
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_ne!(a, stub_embed("fighting", 512, 1));
    }

    #[test]
    fn bank_means_and_fallback() {
        struct Fixed;
        impl Embedder for Fixed {
            fn dim(&self) -> usize {
                2
            }
            fn embed(&self, text: &str) -> Option<Vec<f64>> {
                match text {
                    "a" => Some(vec![1.0, 0.0]),
                    "b" => Some(vec![0.0, 1.0]),
                    "normal" => Some(vec![0.5, 0.5]),
                    "fighting" => Some(vec![0.3, 0.7]),
                    _ => None,
                }
            }
            fn provenance(&self) -> Provenance {
                Provenance::ClipFile
            }
        }
        let mut dict = ConceptDictionary::default();
        dict.classes.insert("fighting".into(), vec![edge("fighting", "IsA", "a", 1.0), edge("fighting", "IsA", "b", 1.0)]);
        let opts = BankOptions {
            template: TemplateMode::LabelConceptnet,
            definitions: None,
            seed: 0,
        };
        let classes = vec!["fighting".to_string()];
        let bank = build_prompt_bank(Some(&dict), &classes, &Fixed, &opts).unwrap();
        assert_eq!(bank.classes["fighting"], vec![0.5, 0.5]);
        // normal has no edges: label fallback
        assert_eq!(bank.classes["normal"], vec![0.5, 0.5]);

        dict.classes.insert("fighting".into(), vec![edge("fighting", "IsA", "zzz", 1.0)]);
        let err = build_prompt_bank(Some(&dict), &classes, &Fixed, &opts).unwrap_err();
        assert!(matches!(err, Error::MissingEmbeddings(ref k) if k == &vec!["zzz".to_string()]));

        let label = BankOptions {
            template: TemplateMode::Label,
            ..opts
        };
        let bank = build_prompt_bank(None, &classes, &Fixed, &label).unwrap();
        assert_eq!(bank.classes["fighting"], vec![0.3, 0.7]);
    }

    #[test]
    fn filter_mode_parsing() {
        for s in ["none", "step1", "step1+dynamic", "step1+fixed:0.5"] {
            assert_eq!(s.parse::<FilterMode>().unwrap().to_string(), s);
        }
        assert!("step2".parse::<FilterMode>().is_err());
        assert_eq!("label+conceptnet".parse::<TemplateMode>().unwrap(), TemplateMode::LabelConceptnet);
    }

    #[test]
    fn uri_labels() {
        assert_eq!(uri_label("Road Accidents"), "road_accidents");
        assert_eq!(uri_label("fighting"), "fighting");
    }
}
