//! Pre-retrieval query performance predictors: SCS, SCQ and Neural-CC, and
//! the paired comparison of original against refined requests.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::embedding::VocabularyIndex;
use crate::error::{Error, Result};
use crate::frame::SemanticFrame;
use crate::retrieval::CorpusEntry;
use crate::stats::mean;
use crate::text::tokenize_filtered;

/// Collection frequency assumed for terms missing from the corpus in SCS.
pub const OOV_CF: f64 = 0.5;
pub const DEFAULT_NEIGHBORS: usize = 10;
pub const DEFAULT_SIM_THRESHOLD: f64 = 0.5;
/// Requests with at most this many mentioned slots count as broad.
pub const BROAD_MAX_SLOTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QppConfig {
    pub neighbors: usize,
    pub sim_threshold: f64,
    pub drop_stopwords: bool,
}

impl Default for QppConfig {
    fn default() -> Self {
        Self {
            neighbors: DEFAULT_NEIGHBORS,
            sim_threshold: DEFAULT_SIM_THRESHOLD,
            drop_stopwords: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub cf: BTreeMap<String, u64>,
    pub df: BTreeMap<String, u64>,
    pub total_tokens: u64,
    pub num_docs: u64,
}

impl CorpusStats {
    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.cf.keys().map(String::as_str)
    }

    pub fn cf(&self, term: &str) -> u64 {
        self.cf.get(term).copied().unwrap_or(0)
    }

    pub fn df(&self, term: &str) -> u64 {
        self.df.get(term).copied().unwrap_or(0)
    }
}

/// Text of a corpus document: title followed by snippet.
pub fn document_text(entry: &CorpusEntry) -> String {
    format!("{} {}", entry.title, entry.snippet)
}

/// Counts term statistics over tokenized documents.
pub fn index_documents(documents: &[Vec<String>]) -> Result<CorpusStats> {
    if documents.is_empty() {
        return Err(Error::validation("cannot index an empty corpus"));
    }
    let mut cf: BTreeMap<String, u64> = BTreeMap::new();
    let mut df: BTreeMap<String, u64> = BTreeMap::new();
    let mut total = 0u64;
    for doc in documents {
        let mut seen = HashSet::new();
        for t in doc {
            *cf.entry(t.clone()).or_default() += 1;
            total += 1;
            if seen.insert(t.as_str()) {
                *df.entry(t.clone()).or_default() += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::validation("corpus contains no tokens"));
    }
    Ok(CorpusStats {
        cf,
        df,
        total_tokens: total,
        num_docs: documents.len() as u64,
    })
}

pub fn tokenize_corpus(entries: &[CorpusEntry], drop_stopwords: bool) -> Vec<Vec<String>> {
    entries
        .iter()
        .map(|e| tokenize_filtered(&document_text(e), drop_stopwords))
        .collect()
}

pub fn index_corpus(entries: &[CorpusEntry], drop_stopwords: bool) -> Result<CorpusStats> {
    index_documents(&tokenize_corpus(entries, drop_stopwords))
}

fn query_tokens(query: &str, drop_stopwords: bool) -> Result<Vec<String>> {
    let tokens = tokenize_filtered(query, drop_stopwords);
    if tokens.is_empty() {
        return Err(Error::validation(format!("query {query:?} has no terms")));
    }
    Ok(tokens)
}

/// Simplified clarity score in bits: KL divergence of the query language
/// model from the corpus model.
pub fn scs(query: &str, stats: &CorpusStats, drop_stopwords: bool) -> Result<f64> {
    let tokens = query_tokens(query, drop_stopwords)?;
    let mut tf: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &tokens {
        *tf.entry(t).or_default() += 1;
    }
    let q_len = tokens.len() as f64;
    let c_len = stats.total_tokens as f64;
    Ok(tf
        .into_iter()
        .map(|(term, n)| {
            let p_q = n as f64 / q_len;
            let cf = match stats.cf(term) {
                0 => OOV_CF,
                c => c as f64,
            };
            p_q * (p_q / (cf / c_len)).log2()
        })
        .sum())
}

/// Collection query similarity, averaged over token occurrences.
pub fn scq(query: &str, stats: &CorpusStats, drop_stopwords: bool) -> Result<f64> {
    let tokens = query_tokens(query, drop_stopwords)?;
    let n = stats.num_docs as f64;
    let total: f64 = tokens
        .iter()
        .map(|t| match (stats.cf(t), stats.df(t)) {
            (0, _) | (_, 0) => 0.0,
            (cf, df) => (1.0 + (cf as f64).ln()) * (1.0 + n / df as f64).ln(),
        })
        .sum();
    Ok(total / tokens.len() as f64)
}

/// Wasserman-Faust closeness of `v` in an unweighted graph:
/// `((r - 1) / sum d) * ((r - 1) / (n - 1))` over the `r` nodes reachable
/// from `v` (itself included). Isolated nodes score 0.
pub fn wf_closeness(adjacency: &[Vec<usize>], v: usize) -> f64 {
    let n = adjacency.len();
    if n < 2 {
        return 0.0;
    }
    let mut dist = vec![usize::MAX; n];
    dist[v] = 0;
    let mut queue = VecDeque::from([v]);
    let mut reached = 1usize;
    let mut sum = 0usize;
    while let Some(u) = queue.pop_front() {
        for &w in &adjacency[u] {
            if dist[w] == usize::MAX {
                dist[w] = dist[u] + 1;
                reached += 1;
                sum += dist[w];
                queue.push_back(w);
            }
        }
    }
    if reached == 1 {
        return 0.0;
    }
    let r1 = (reached - 1) as f64;
    (r1 / sum as f64) * (r1 / (n - 1) as f64)
}

/// The neighbourhood graph of a query: its terms plus the `k` nearest
/// vocabulary terms of each, linked when their cosine similarity reaches
/// `threshold`. Returns node labels, adjacency lists and the node indices of
/// the unique query terms.
pub fn query_graph(
    tokens: &[String],
    index: &VocabularyIndex,
    k: usize,
    threshold: f64,
) -> (Vec<String>, Vec<Vec<usize>>, Vec<usize>) {
    let mut nodes: Vec<String> = Vec::new();
    let mut pos: HashMap<String, usize> = HashMap::new();
    let mut add = |t: &str, nodes: &mut Vec<String>| -> usize {
        *pos.entry(t.to_string()).or_insert_with(|| {
            nodes.push(t.to_string());
            nodes.len() - 1
        })
    };
    let mut query_nodes = Vec::new();
    for t in tokens {
        let i = add(t, &mut nodes);
        if !query_nodes.contains(&i) {
            query_nodes.push(i);
        }
    }
    for t in tokens {
        for (nb, _) in index.nearest_terms(t, k) {
            add(&nb, &mut nodes);
        }
    }
    let vectors: Vec<Option<&[f64]>> = nodes
        .iter()
        .map(|t| index.vector(t).map(|v| v.as_slice()))
        .collect();
    let mut adjacency = vec![Vec::new(); nodes.len()];
    for i in 0..nodes.len() {
        for j in i + 1..nodes.len() {
            if let (Some(a), Some(b)) = (vectors[i], vectors[j]) {
                if cosine(a, b) >= threshold {
                    adjacency[i].push(j);
                    adjacency[j].push(i);
                }
            }
        }
    }
    (nodes, adjacency, query_nodes)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean closeness centrality of the query terms in their embedding
/// neighbourhood graph.
pub fn neural_cc(query: &str, index: &VocabularyIndex, config: &QppConfig) -> Result<f64> {
    let tokens = query_tokens(query, config.drop_stopwords)?;
    if config.neighbors == 0 {
        return Err(Error::validation("neighbour count must be at least 1"));
    }
    if index.is_empty() {
        log::warn!("empty vocabulary index, neural closeness is 0");
        return Ok(0.0);
    }
    let (_, adjacency, query_nodes) = query_graph(&tokens, index, config.neighbors, config.sim_threshold);
    let scores: Vec<f64> = query_nodes.iter().map(|&v| wf_closeness(&adjacency, v)).collect();
    Ok(mean(&scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QppScores {
    pub scs: f64,
    pub scq: f64,
    pub neural_cc: f64,
}

impl QppScores {
    fn mean_of(xs: &[QppScores]) -> Self {
        Self {
            scs: mean(&xs.iter().map(|s| s.scs).collect::<Vec<_>>()),
            scq: mean(&xs.iter().map(|s| s.scq).collect::<Vec<_>>()),
            neural_cc: mean(&xs.iter().map(|s| s.neural_cc).collect::<Vec<_>>()),
        }
    }
}

pub fn score_request(text: &str, stats: &CorpusStats, index: &VocabularyIndex, config: &QppConfig) -> Result<QppScores> {
    Ok(QppScores {
        scs: scs(text, stats, config.drop_stopwords)?,
        scq: scq(text, stats, config.drop_stopwords)?,
        neural_cc: neural_cc(text, index, config)?,
    })
}

/// `100 * (refined - original) / |original|`; undefined when original is 0.
pub fn percent_difference(original: f64, refined: f64) -> Option<f64> {
    (original != 0.0).then(|| 100.0 * (refined - original) / original.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PercentDiff {
    pub scs: Option<f64>,
    pub scq: Option<f64>,
    pub neural_cc: Option<f64>,
}

impl PercentDiff {
    pub fn between(original: &QppScores, refined: &QppScores) -> Self {
        Self {
            scs: percent_difference(original.scs, refined.scs),
            scq: percent_difference(original.scq, refined.scq),
            neural_cc: percent_difference(original.neural_cc, refined.neural_cc),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    /// Infinite when every difference is the same nonzero value; serialized
    /// as null in that case.
    pub t: f64,
    pub p: f64,
    pub n: usize,
}

/// Two-sided paired t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::validation(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::validation("a paired t-test needs at least 2 pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = mean(&d);
    if d.iter().all(|x| *x == 0.0) {
        return Ok(TTest { t: 0.0, p: 1.0, n });
    }
    let var = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(TTest {
            t: m.signum() * f64::INFINITY,
            p: 0.0,
            n,
        });
    }
    let t = m / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::validation(format!("t distribution: {e}")))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, p, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Breadth {
    Broad,
    Specific,
}

pub fn breadth_of(mentioned_slots: usize) -> Breadth {
    if mentioned_slots <= BROAD_MAX_SLOTS {
        Breadth::Broad
    } else {
        Breadth::Specific
    }
}

pub fn classify_breadth(frame: &SemanticFrame) -> Breadth {
    breadth_of(frame.mentioned_slots.len())
}

/// A request text with optional grouping labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QppRequest {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breadth: Option<Breadth>,
}

impl QppRequest {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            intent: None,
            breadth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestScores {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent: Option<String>,
    pub original: QppScores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined: Option<QppScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub n: usize,
    pub original_mean: QppScores,
    pub refined_mean: QppScores,
    pub percent_difference: PercentDiff,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTests {
    pub scs: TTest,
    pub scq: TTest,
    pub neural_cc: TTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QppReport {
    pub config: QppConfig,
    pub n: usize,
    pub requests: Vec<RequestScores>,
    pub original_mean: QppScores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined_mean: Option<QppScores>,
    /// Difference of the overall means.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub percent_difference: Option<PercentDiff>,
    /// Paired test of refined against original, per metric.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_tests: Option<MetricTests>,
    /// Per-intent means of the per-request scores.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_intent: Vec<GroupSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_breadth: Vec<GroupSummary>,
}

fn summarize(group: String, pairs: &[(QppScores, QppScores)]) -> GroupSummary {
    let o: Vec<QppScores> = pairs.iter().map(|p| p.0).collect();
    let r: Vec<QppScores> = pairs.iter().map(|p| p.1).collect();
    let original_mean = QppScores::mean_of(&o);
    let refined_mean = QppScores::mean_of(&r);
    GroupSummary {
        group,
        n: pairs.len(),
        original_mean,
        refined_mean,
        percent_difference: PercentDiff::between(&original_mean, &refined_mean),
    }
}

/// Scores requests alone, or original/refined pairs when `refineds` is given.
pub fn compare_requests(
    originals: &[QppRequest],
    refineds: Option<&[QppRequest]>,
    stats: &CorpusStats,
    index: &VocabularyIndex,
    config: &QppConfig,
) -> Result<QppReport> {
    if let Some(r) = refineds {
        if r.len() != originals.len() {
            return Err(Error::validation(format!(
                "{} original requests but {} refined ones",
                originals.len(),
                r.len()
            )));
        }
    }
    let mut requests = Vec::with_capacity(originals.len());
    for (i, o) in originals.iter().enumerate() {
        let original = score_request(&o.text, stats, index, config)?;
        let refined = match refineds {
            Some(r) => Some(score_request(&r[i].text, stats, index, config)?),
            None => None,
        };
        requests.push(RequestScores {
            text: o.text.clone(),
            intent: o.intent.clone(),
            original,
            refined,
        });
    }
    let original_mean = QppScores::mean_of(&requests.iter().map(|r| r.original).collect::<Vec<_>>());
    let mut report = QppReport {
        config: *config,
        n: requests.len(),
        requests,
        original_mean,
        refined_mean: None,
        percent_difference: None,
        t_tests: None,
        per_intent: Vec::new(),
        per_breadth: Vec::new(),
    };
    if refineds.is_none() {
        return Ok(report);
    }
    let pairs: Vec<(QppScores, QppScores)> = report
        .requests
        .iter()
        .map(|r| (r.original, r.refined.expect("refined scored")))
        .collect();
    let overall = summarize("all".into(), &pairs);
    report.refined_mean = Some(overall.refined_mean);
    report.percent_difference = Some(overall.percent_difference);
    if pairs.len() >= 2 {
        let col = |f: fn(&QppScores) -> f64| -> (Vec<f64>, Vec<f64>) {
            (pairs.iter().map(|p| f(&p.1)).collect(), pairs.iter().map(|p| f(&p.0)).collect())
        };
        let (rs, os) = col(|s| s.scs);
        let (rq, oq) = col(|s| s.scq);
        let (rn, on) = col(|s| s.neural_cc);
        report.t_tests = Some(MetricTests {
            scs: paired_t_test(&rs, &os)?,
            scq: paired_t_test(&rq, &oq)?,
            neural_cc: paired_t_test(&rn, &on)?,
        });
    }
    let mut by_intent: BTreeMap<String, Vec<(QppScores, QppScores)>> = BTreeMap::new();
    let mut by_breadth: BTreeMap<String, Vec<(QppScores, QppScores)>> = BTreeMap::new();
    for (o, p) in originals.iter().zip(&pairs) {
        if let Some(i) = &o.intent {
            by_intent.entry(i.clone()).or_default().push(*p);
        }
        if let Some(b) = o.breadth {
            let name = match b {
                Breadth::Broad => "broad",
                Breadth::Specific => "specific",
            };
            by_breadth.entry(name.into()).or_default().push(*p);
        }
    }
    report.per_intent = by_intent.into_iter().map(|(g, ps)| summarize(g, &ps)).collect();
    report.per_breadth = by_breadth.into_iter().map(|(g, ps)| summarize(g, &ps)).collect();
    Ok(report)
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map(|x| format!("{x:+.2}%")).unwrap_or_else(|| "n/a".into())
}

impl QppReport {
    /// Plain-text table: percent difference per group and metric when
    /// refined requests were scored, mean scores otherwise.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        match &self.percent_difference {
            Some(all) => {
                let _ = writeln!(out, "{:<28} {:>6} {:>10} {:>10} {:>10}", "group", "n", "SCS", "SCQ", "Neural-CC");
                let row = |out: &mut String, g: &str, n: usize, d: &PercentDiff| {
                    let _ = writeln!(
                        out,
                        "{:<28} {:>6} {:>10} {:>10} {:>10}",
                        g,
                        n,
                        fmt_pct(d.scs),
                        fmt_pct(d.scq),
                        fmt_pct(d.neural_cc)
                    );
                };
                for g in self.per_intent.iter().chain(&self.per_breadth) {
                    row(&mut out, &g.group, g.n, &g.percent_difference);
                }
                row(&mut out, "all", self.n, all);
                if let Some(t) = &self.t_tests {
                    let _ = writeln!(
                        out,
                        "{:<28} {:>6} {:>10.4} {:>10.4} {:>10.4}",
                        "p-value", "", t.scs.p, t.scq.p, t.neural_cc.p
                    );
                }
            }
            None => {
                let _ = writeln!(out, "{:<40} {:>10} {:>10} {:>10}", "request", "SCS", "SCQ", "Neural-CC");
                for r in &self.requests {
                    let text: String = r.text.chars().take(40).collect();
                    let _ = writeln!(
                        out,
                        "{:<40} {:>10.5} {:>10.5} {:>10.5}",
                        text, r.original.scs, r.original.scq, r.original.neural_cc
                    );
                }
                let m = &self.original_mean;
                let _ = writeln!(out, "{:<40} {:>10.5} {:>10.5} {:>10.5}", "mean", m.scs, m.scq, m.neural_cc);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingVector;

    fn docs(texts: &[&str]) -> Vec<Vec<String>> {
        texts.iter().map(|t| tokenize_filtered(t, false)).collect()
    }

    #[test]
    fn index_counts_by_hand() {
        let s = index_documents(&docs(&["a b", "a"])).unwrap();
        assert_eq!((s.cf("a"), s.df("a"), s.cf("b"), s.df("b")), (2, 2, 1, 1));
        assert_eq!((s.total_tokens, s.num_docs), (3, 2));
        assert_eq!(s, index_documents(&docs(&["a b", "a"])).unwrap());
        assert!(index_documents(&[]).is_err());
    }

    #[test]
    fn scs_spot_values() {
        // P(w|C) = 1/10
        let mut corpus = vec!["w".to_string()];
        corpus.extend((0..9).map(|i| format!("x{i}")));
        let s = index_documents(&[corpus]).unwrap();
        assert!((scs("w", &s, false).unwrap() - std::f64::consts::LOG2_10).abs() < 1e-6);
        // out of vocabulary with |C| = 100
        let s = index_documents(&[(0..100).map(|i| format!("t{i}")).collect()]).unwrap();
        assert!((scs("zzz", &s, false).unwrap() - 7.643856).abs() < 1e-6);
        assert!(scs("", &s, false).is_err());
    }

    #[test]
    fn scs_is_zero_for_corpus_distribution() {
        let s = index_documents(&docs(&["a a b c"])).unwrap();
        assert!(scs("a b c a", &s, false).unwrap().abs() < 1e-12);
    }

    #[test]
    fn scq_spot_values() {
        let s = index_documents(&docs(&["a"])).unwrap();
        assert!((scq("a", &s, false).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(scq("q r", &s, false).unwrap(), 0.0);
        let s = index_documents(&docs(&["a b b", "b c"])).unwrap();
        let sa = scq("a", &s, false).unwrap();
        let sb = scq("b", &s, false).unwrap();
        assert!((scq("a b", &s, false).unwrap() - (sa + sb) / 2.0).abs() < 1e-12);
    }

    fn path3() -> Vec<Vec<usize>> {
        vec![vec![1], vec![0, 2], vec![1]]
    }

    #[test]
    fn closeness_on_small_graphs() {
        assert!((wf_closeness(&path3(), 0) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(wf_closeness(&path3(), 1), 1.0);
        let complete: Vec<Vec<usize>> = (0..5).map(|i| (0..5).filter(|&j| j != i).collect()).collect();
        assert!((0..5).all(|v| wf_closeness(&complete, v) == 1.0));
        assert_eq!(wf_closeness(&[vec![], vec![]], 0), 0.0);
    }

    fn vocab(entries: &[(&str, [f64; 2])]) -> VocabularyIndex {
        VocabularyIndex::new(
            entries
                .iter()
                .map(|(t, v)| (t.to_string(), EmbeddingVector(v.to_vec())))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn neural_cc_cases() {
        let cfg = QppConfig::default();
        let idx = vocab(&[("a", [1.0, 0.0]), ("b", [0.9, 0.1]), ("c", [0.0, 1.0])]);
        // a and b are linked, c is alone.
        let a = neural_cc("a", &idx, &cfg).unwrap();
        assert!(a > 0.0 && a <= 1.0);
        assert_eq!(neural_cc("c", &idx, &cfg).unwrap(), 0.0);
        assert_eq!(neural_cc("zzz", &idx, &cfg).unwrap(), 0.0);
        let empty = VocabularyIndex::new(Vec::new()).unwrap();
        assert_eq!(neural_cc("a", &empty, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn t_test_conventions() {
        let t = paired_t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((t.t, t.p), (0.0, 1.0));
        let t = paired_t_test(&[2.0, 3.0, 4.0, 5.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(t.t.is_infinite() && t.p == 0.0);
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[2.0]).is_err());
    }

    #[test]
    fn t_test_matches_reference_values() {
        // Reference values computed independently with scipy.stats.ttest_rel.
        let t = paired_t_test(&[10.2, 11.5, 9.8, 12.1, 10.9], &[9.8, 11.0, 10.1, 11.2, 10.3]).unwrap();
        assert!((t.t - 2.1159294318114905).abs() < 1e-9, "{}", t.t);
        assert!((t.p - 0.10180780099736163).abs() < 1e-6, "{}", t.p);
        let t = paired_t_test(
            &[3.1, 2.4, 5.6, 4.4, 3.9, 4.1, 2.2, 3.3],
            &[2.9, 2.8, 4.1, 4.0, 3.1, 4.3, 1.9, 2.6],
        )
        .unwrap();
        assert!((t.t - 1.9488987346773323).abs() < 1e-9);
        assert!((t.p - 0.09231717647244118).abs() < 1e-6);
    }

    #[test]
    fn breadth_boundary() {
        assert_eq!(breadth_of(2), Breadth::Broad);
        assert_eq!(breadth_of(3), Breadth::Broad);
        assert_eq!(breadth_of(4), Breadth::Specific);
    }

    #[test]
    fn identical_refinement_is_zero_difference() {
        let s = index_documents(&docs(&["a b c", "b c d"])).unwrap();
        let idx = vocab(&[("a", [1.0, 0.0]), ("b", [0.9, 0.1])]);
        let reqs = vec![QppRequest::new("a b"), QppRequest::new("c d"), QppRequest::new("a d")];
        let r = compare_requests(&reqs, Some(&reqs), &s, &idx, &QppConfig::default()).unwrap();
        let d = r.percent_difference.unwrap();
        assert_eq!(d.scs, Some(0.0));
        assert_eq!(d.scq, Some(0.0));
        assert_eq!(r.t_tests.unwrap().scq.p, 1.0);
        assert!(compare_requests(&reqs, Some(&reqs[..1]), &s, &idx, &QppConfig::default()).is_err());
        assert!(r.to_table().contains("all"));
    }
}
