//! Zero-shot retrieval by max-cosine scoring over generated candidates, and
//! the Precision@K / mAP metric suite.

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureRecord, ScalingParams};
use crate::error::{Error, Result};
use crate::model::ModelBundle;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    /// Generated candidates per query.
    pub candidates: usize,
    /// Cutoffs for Precision@K and mAP@K.
    pub ks: Vec<usize>,
    pub seed: u64,
    /// Retrieve against seen-class images too.
    pub include_seen: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            candidates: 10,
            ks: vec![10, 100, 200],
            seed: 0,
            include_seen: false,
        }
    }
}

impl RetrievalConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.candidates == 0 {
            out.push("candidates must be at least 1".to_string());
        }
        if self.ks.contains(&0) {
            out.push("every K must be positive".to_string());
        }
        out
    }
}

/// Produces image-feature candidates for a sketch.
pub trait CandidateGenerator: Sync {
    /// `count` candidates; the first `k` of `count + 1` must equal the
    /// `k` produced for `count` under the same generator state.
    fn generate(&self, sketch: &[f64], count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>>;
}

impl CandidateGenerator for ModelBundle {
    fn generate(&self, sketch: &[f64], count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        self.generate_from_prior(sketch, count, rng)
    }
}

/// Maps another generator's candidates out of the scaled training space
/// back to raw image-feature coordinates, then subtracts `center`.
pub struct Unscaled<'a, G: ?Sized> {
    pub inner: &'a G,
    pub image: &'a ScalingParams,
    pub center: &'a [f64],
}

impl<G: CandidateGenerator + ?Sized> CandidateGenerator for Unscaled<'_, G> {
    fn generate(&self, sketch: &[f64], count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        let cands = self.inner.generate(sketch, count, rng)?;
        Ok(cands
            .iter()
            .map(|c| {
                let mut v = self.image.inverse(c);
                for (x, m) in v.iter_mut().zip(self.center) {
                    *x -= m;
                }
                v
            })
            .collect())
    }
}

/// Coordinate-wise mean of `records`.
pub fn mean_vector(records: &[FeatureRecord]) -> Vec<f64> {
    let Some(first) = records.first() else {
        return Vec::new();
    };
    let mut m = vec![0.0; first.vector.len()];
    for r in records {
        for (a, b) in m.iter_mut().zip(&r.vector) {
            *a += b;
        }
    }
    let n = records.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// Subtracts `center` from every record.
pub fn center_records(records: &[FeatureRecord], center: &[f64]) -> Vec<FeatureRecord> {
    records
        .iter()
        .map(|r| FeatureRecord {
            vector: r.vector.iter().zip(center).map(|(a, b)| a - b).collect(),
            ..r.clone()
        })
        .collect()
}

/// Cosine similarity, defined as 0 when either vector has zero norm.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    (dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0)
}

/// Ranked database for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub query_id: usize,
    pub label: u32,
    /// Database indices, best first.
    pub ranking: Vec<usize>,
    /// Scores aligned with `ranking`.
    pub scores: Vec<f64>,
    /// Whether `ranking[i]` shares the query label.
    pub relevant: Vec<bool>,
}

impl QueryResult {
    /// Sorts by descending score, ties by ascending index.
    pub fn from_scores(query_id: usize, label: u32, scores: &[f64], db_labels: &[u32]) -> Self {
        let mut ranking: Vec<usize> = (0..scores.len()).collect();
        ranking.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
        QueryResult {
            query_id,
            label,
            scores: ranking.iter().map(|&i| scores[i]).collect(),
            relevant: ranking.iter().map(|&i| db_labels[i] == label).collect(),
            ranking,
        }
    }
}

/// Fraction of the top `k` that is relevant, with `k` clamped to the list
/// length. Returns the value and whether clamping happened.
pub fn precision_at_k(result: &QueryResult, k: usize) -> (f64, bool) {
    let n = result.relevant.len();
    let clamped = k > n;
    let k = k.min(n);
    if k == 0 {
        return (0.0, clamped);
    }
    let hits = result.relevant[..k].iter().filter(|r| **r).count();
    (hits as f64 / k as f64, clamped)
}

/// Average precision over the full list or the first `cutoff` ranks. The
/// normalizer is the number of relevant items, capped at `cutoff`. Zero when
/// nothing is relevant.
pub fn average_precision(result: &QueryResult, cutoff: Option<usize>) -> f64 {
    let total: usize = result.relevant.iter().filter(|r| **r).count();
    if total == 0 {
        return 0.0;
    }
    let limit = cutoff.map_or(result.relevant.len(), |c| c.min(result.relevant.len()));
    let norm = cutoff.map_or(total, |c| total.min(c));
    if norm == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (k, &rel) in result.relevant[..limit].iter().enumerate() {
        if rel {
            hits += 1;
            acc += hits as f64 / (k + 1) as f64;
        }
    }
    acc / norm as f64
}

/// Read-only retrieval database.
#[derive(Clone, Debug, PartialEq)]
pub struct Database {
    pub vectors: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
}

impl Database {
    pub fn from_records(records: &[FeatureRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("retrieval database is empty".into()));
        }
        let width = records[0].vector.len();
        if let Some(r) = records.iter().find(|r| r.vector.len() != width) {
            return Err(Error::dim(
                "database",
                format!("record width {} differs from {width}", r.vector.len()),
            ));
        }
        Ok(Database {
            vectors: records.iter().map(|r| r.vector.clone()).collect(),
            labels: records.iter().map(|r| r.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }
}

/// Noise stream of one query: depends only on the seed and the query id.
pub fn query_rng(seed: u64, query_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(query_id as u64);
    rng
}

/// Scores every database image by its best cosine against the candidates.
pub fn score_candidates(candidates: &[Vec<f64>], db: &Database) -> Vec<f64> {
    db.vectors
        .iter()
        .map(|x| {
            candidates
                .iter()
                .map(|g| cosine(g, x))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

pub fn score_query<G: CandidateGenerator + ?Sized>(
    generator: &G,
    query_id: usize,
    sketch: &FeatureRecord,
    db: &Database,
    cfg: &RetrievalConfig,
) -> Result<QueryResult> {
    if db.is_empty() {
        return Err(Error::Data("retrieval database is empty".into()));
    }
    let mut rng = query_rng(cfg.seed, query_id);
    let cands = generator.generate(&sketch.vector, cfg.candidates, &mut rng)?;
    if let Some(c) = cands.iter().find(|c| c.len() != db.width()) {
        return Err(Error::dim(
            "score_query",
            format!("candidate width {} != database width {}", c.len(), db.width()),
        ));
    }
    let scores = score_candidates(&cands, db);
    Ok(QueryResult::from_scores(query_id, sketch.label, &scores, &db.labels))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub queries: usize,
    pub database_size: usize,
    pub candidates: usize,
    pub precision_at_k: BTreeMap<usize, f64>,
    pub map_at_all: f64,
    pub map_at_k: BTreeMap<usize, f64>,
    pub per_query_ap: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
}

struct QueryMetrics {
    precision: Vec<f64>,
    ap_at_k: Vec<f64>,
    ap: f64,
    no_relevant: bool,
}

fn query_metrics(r: &QueryResult, ks: &[usize]) -> QueryMetrics {
    QueryMetrics {
        precision: ks.iter().map(|&k| precision_at_k(r, k).0).collect(),
        ap_at_k: ks.iter().map(|&k| average_precision(r, Some(k))).collect(),
        ap: average_precision(r, None),
        no_relevant: !r.relevant.iter().any(|x| *x),
    }
}

/// Scores all queries in parallel and merges results in query order.
/// Rankings are returned only when `keep_rankings` is set.
pub fn evaluate<G: CandidateGenerator + ?Sized>(
    generator: &G,
    queries: &[FeatureRecord],
    database: &[FeatureRecord],
    cfg: &RetrievalConfig,
    keep_rankings: bool,
) -> Result<(MetricsReport, Vec<QueryResult>)> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    if queries.is_empty() {
        return Err(Error::Data("no retrieval queries".into()));
    }
    let db = Database::from_records(database)?;
    let per_query: Vec<(QueryMetrics, Option<QueryResult>)> = queries
        .par_iter()
        .enumerate()
        .map(|(qid, q)| {
            let r = score_query(generator, qid, q, &db, cfg)?;
            let m = query_metrics(&r, &cfg.ks);
            Ok((m, keep_rankings.then_some(r)))
        })
        .collect::<Result<_>>()?;

    let n = per_query.len() as f64;
    let mut report = MetricsReport {
        queries: queries.len(),
        database_size: db.len(),
        candidates: cfg.candidates,
        ..MetricsReport::default()
    };
    for (i, &k) in cfg.ks.iter().enumerate() {
        report
            .precision_at_k
            .insert(k, per_query.iter().map(|(m, _)| m.precision[i]).sum::<f64>() / n);
        report
            .map_at_k
            .insert(k, per_query.iter().map(|(m, _)| m.ap_at_k[i]).sum::<f64>() / n);
        if k > db.len() {
            let w = format!("K = {k} exceeds database size {}; clamped", db.len());
            log::warn!("{w}");
            report.warnings.push(w);
        }
    }
    report.per_query_ap = per_query.iter().map(|(m, _)| m.ap).collect();
    report.map_at_all = report.per_query_ap.iter().sum::<f64>() / n;
    let empty = per_query.iter().filter(|(m, _)| m.no_relevant).count();
    if empty > 0 {
        let w = format!("{empty} quer(ies) have no relevant database item; their AP is 0");
        log::warn!("{w}");
        report.warnings.push(w);
    }
    let rankings = per_query.into_iter().filter_map(|(_, r)| r).collect();
    Ok((report, rankings))
}

/// `query_id,rank,db_index,score,relevant` rows, optionally truncated to
/// the top `limit` ranks per query.
pub fn write_rankings_csv<W: Write>(out: &mut W, results: &[QueryResult], limit: Option<usize>) -> std::io::Result<()> {
    writeln!(out, "query_id,rank,db_index,score,relevant")?;
    for r in results {
        let n = limit.map_or(r.ranking.len(), |l| l.min(r.ranking.len()));
        for k in 0..n {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.query_id,
                k + 1,
                r.ranking[k],
                r.scores[k],
                u8::from(r.relevant[k])
            )?;
        }
    }
    Ok(())
}
