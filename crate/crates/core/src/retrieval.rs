//! Sub-query generation, search providers, corpus building and suggestion
//! ranking.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::SemanticFrame;
use crate::http::RetryPolicy;
use crate::nlu::CompletionProvider;
use crate::ontology::IntentOntology;
use crate::text::tokenize_filtered;

pub const DEFAULT_TOP_K: usize = 10;
pub const CORPUS_TOP_N: usize = 100;
pub const DEFAULT_CORPUS_CONCURRENCY: usize = 4;

pub const ASPECT_TERM_WEIGHT: f64 = 2.0;
pub const SLOT_TERM_WEIGHT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub title: String,
    pub url: String,
    pub snippet: String,
}

/// One corpus line: a document together with the query that found it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub query: String,
    pub title: String,
    pub url: String,
    pub snippet: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub document: Document,
    pub matched_slots: Vec<String>,
    pub score: f64,
}

pub trait SearchProvider: Send + Sync {
    /// Raw results for `query`, at most `count` of them.
    fn search_raw(&self, query: &str, count: usize) -> Result<Vec<Document>>;
}

/// Top-`k` documents for `query` with duplicate and empty urls removed.
pub fn search(provider: &dyn SearchProvider, query: &str, k: usize) -> Result<Vec<Document>> {
    let raw = provider.search_raw(query, k)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(k.min(raw.len()));
    for doc in raw {
        if doc.url.trim().is_empty() {
            log::warn!("dropping result without url for query {query:?}");
            continue;
        }
        if seen.insert(doc.url.clone()) {
            out.push(doc);
        }
        if out.len() == k {
            break;
        }
    }
    Ok(out)
}

/// Canned results keyed by exact query string.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FixtureSearch {
    results: BTreeMap<String, Vec<Document>>,
}

impl FixtureSearch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: impl Into<String>, docs: Vec<Document>) {
        self.results.insert(query.into(), docs);
    }

    pub fn from_json_str(text: &str, context: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json(context, &e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, &path.display().to_string())
    }
}

impl SearchProvider for FixtureSearch {
    /// Returns every stored result; [`search`] applies the limit after
    /// de-duplication.
    fn search_raw(&self, query: &str, _count: usize) -> Result<Vec<Document>> {
        Ok(self.results.get(query).cloned().unwrap_or_default())
    }
}

#[derive(Deserialize)]
struct WebResponse {
    #[serde(rename = "webPages", default)]
    web_pages: Option<WebPages>,
}

#[derive(Deserialize)]
struct WebPages {
    #[serde(default)]
    value: Vec<WebPage>,
}

#[derive(Deserialize)]
struct WebPage {
    #[serde(default)]
    name: String,
    #[serde(default)]
    url: String,
    #[serde(default)]
    snippet: String,
}

/// Web search over HTTP: `GET endpoint?q=..&count=..`, answered with a
/// `webPages.value[]` list of `{name, url, snippet}`.
pub struct HttpSearch {
    endpoint: String,
    api_key: Option<String>,
    key_header: String,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
}

impl HttpSearch {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key,
            key_header: "Ocp-Apim-Subscription-Key".into(),
            client: crate::http::client(Duration::from_secs(15)),
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_key_header(mut self, header: impl Into<String>) -> Self {
        self.key_header = header.into();
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

impl SearchProvider for HttpSearch {
    fn search_raw(&self, query: &str, count: usize) -> Result<Vec<Document>> {
        let body: WebResponse = self.retry.run(|| {
            let url = reqwest::Url::parse_with_params(
                &self.endpoint,
                &[("q", query), ("count", &count.to_string())],
            )
            .map_err(|e| format!("bad search endpoint {:?}: {e}", self.endpoint))?;
            let mut req = self.client.get(url);
            if let Some(key) = &self.api_key {
                req = req.header(self.key_header.as_str(), key);
            }
            let resp = req.send().map_err(|e| e.to_string())?;
            if !resp.status().is_success() {
                return Err(format!("search returned {}", resp.status()));
            }
            resp.json::<WebResponse>().map_err(|e| e.to_string())
        })?;
        Ok(body
            .web_pages
            .map(|p| p.value)
            .unwrap_or_default()
            .into_iter()
            .map(|p| Document {
                title: p.name,
                url: p.url,
                snippet: p.snippet,
            })
            .collect())
    }
}

/// Session-time sub-queries, one per mentioned or selected slot:
/// `<intent> with <slot> in <location>`.
pub fn generate_subqueries(
    ontology: &IntentOntology,
    frame: &SemanticFrame,
    selected: &[String],
    location: Option<&str>,
) -> Result<Vec<String>> {
    let key = frame.key();
    let intent = ontology.require_intent(&key)?;
    let location = location.map(str::trim).filter(|l| !l.is_empty());
    let suffix = location.map(|l| format!(" in {l}")).unwrap_or_default();
    let mut seen = HashSet::new();
    let mut queries = Vec::new();
    for slot_id in frame.mentioned_ids().iter().chain(selected) {
        if !seen.insert(slot_id.clone()) {
            continue;
        }
        let slot = ontology.slot_of(&key, slot_id)?;
        queries.push(format!("{} with {}{suffix}", intent.label, slot.label));
    }
    if queries.is_empty() {
        queries.push(format!("{}{suffix}", intent.label));
    }
    Ok(queries)
}

/// Corpus-time query: `<intent> near <location> with <slot>`.
pub fn corpus_query(intent_label: &str, location: &str, slot_label: &str) -> String {
    format!("{intent_label} near {location} with {slot_label}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusConfig {
    pub top_n: usize,
    pub concurrency: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            top_n: CORPUS_TOP_N,
            concurrency: DEFAULT_CORPUS_CONCURRENCY,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub queries: usize,
    pub documents: usize,
    pub failures: usize,
}

/// Issues one query per (location, intent, slot) and writes the results as
/// JSONL corpus entries, in query order.
pub fn build_corpus(
    ontology: &IntentOntology,
    locations: &[String],
    provider: &dyn SearchProvider,
    out: &mut dyn Write,
    config: CorpusConfig,
) -> Result<CorpusSummary> {
    let locations: Vec<&str> = locations
        .iter()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty())
        .collect();
    if locations.is_empty() {
        return Err(Error::validation("no locations given for corpus building"));
    }
    if ontology.is_empty() {
        log::warn!("ontology is empty, corpus will be empty");
    }
    let mut queries = Vec::new();
    for loc in &locations {
        for intent in &ontology.intents {
            let key = crate::ontology::IntentKey::new(&intent.topic_id, &intent.id);
            for slot in ontology.slots_for(&key) {
                queries.push(corpus_query(&intent.label, loc, &slot.label));
            }
        }
    }

    let next = AtomicUsize::new(0);
    let results: Vec<parking_lot::Mutex<Option<Result<Vec<Document>>>>> =
        queries.iter().map(|_| parking_lot::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..config.concurrency.max(1).min(queries.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= queries.len() {
                    break;
                }
                let mut docs = search(provider, &queries[i], config.top_n);
                if let Ok(d) = &mut docs {
                    d.sort_by(|a, b| a.url.cmp(&b.url));
                }
                *results[i].lock() = Some(docs);
            });
        }
    });

    let mut summary = CorpusSummary {
        queries: queries.len(),
        ..Default::default()
    };
    for (query, slot) in queries.iter().zip(results) {
        match slot.into_inner().expect("every query is processed") {
            Ok(docs) => {
                for d in docs {
                    let entry = CorpusEntry {
                        query: query.clone(),
                        title: d.title,
                        url: d.url,
                        snippet: d.snippet,
                    };
                    let line = serde_json::to_string(&entry).expect("entry serializes");
                    writeln!(out, "{line}").map_err(|e| Error::io("corpus output", e))?;
                    summary.documents += 1;
                }
            }
            Err(e) => {
                log::warn!("query {query:?} failed: {e}");
                summary.failures += 1;
            }
        }
    }
    Ok(summary)
}

/// Reads a JSONL corpus, reporting the line of the first malformed entry.
pub fn read_corpus(text: &str, context: &str) -> Result<Vec<CorpusEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: CorpusEntry = serde_json::from_str(line).map_err(|e| Error::Parse {
            context: context.into(),
            line: n + 1,
            column: e.column(),
            message: e.to_string(),
        })?;
        out.push(entry);
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<CorpusEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_corpus(&text, &path.display().to_string())
}

/// What the ranker matches candidates against.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankingTarget {
    pub request_text: String,
    /// (slot id, slot label) for every mentioned and selected slot.
    pub slots: Vec<(String, String)>,
    pub aspects: Vec<String>,
}

impl RankingTarget {
    pub fn from_frame(ontology: &IntentOntology, frame: &SemanticFrame, selected: &[String], request_text: &str) -> Result<Self> {
        let key = frame.key();
        let mut slots = Vec::new();
        let mut seen = HashSet::new();
        for id in frame.mentioned_ids().iter().chain(selected) {
            if seen.insert(id.clone()) {
                slots.push((id.clone(), ontology.slot_of(&key, id)?.label.clone()));
            }
        }
        let aspects = frame
            .mentioned_slots
            .iter()
            .filter_map(|m| m.aspect.as_ref().map(|a| a.normalized.clone()))
            .collect();
        Ok(Self {
            request_text: request_text.to_string(),
            slots,
            aspects,
        })
    }
}

fn doc_tokens(doc: &Document) -> Vec<String> {
    tokenize_filtered(&format!("{} {}", doc.title, doc.snippet), false)
}

/// Slots whose label terms (stopwords aside) all occur in the document.
pub fn matched_slots(doc: &Document, target: &RankingTarget) -> Vec<String> {
    let tokens: HashSet<String> = doc_tokens(doc).into_iter().collect();
    target
        .slots
        .iter()
        .filter(|(_, label)| {
            let terms = tokenize_filtered(label, true);
            !terms.is_empty() && terms.iter().all(|t| tokens.contains(t))
        })
        .map(|(id, _)| id.clone())
        .collect()
}

/// Weighted term overlap: every document token that is an aspect term adds
/// the aspect weight, a slot term adds the slot weight; the sum is divided by
/// the document length in tokens.
pub fn lexical_score(doc: &Document, target: &RankingTarget) -> f64 {
    let mut weights: HashMap<String, f64> = HashMap::new();
    for (_, label) in &target.slots {
        for t in tokenize_filtered(label, true) {
            weights.entry(t).or_insert(SLOT_TERM_WEIGHT);
        }
    }
    for aspect in &target.aspects {
        for t in tokenize_filtered(aspect, true) {
            weights.insert(t, ASPECT_TERM_WEIGHT);
        }
    }
    let tokens = doc_tokens(doc);
    if tokens.is_empty() {
        return 0.0;
    }
    let total: f64 = tokens.iter().filter_map(|t| weights.get(t)).sum();
    total / tokens.len() as f64
}

pub trait Ranker: Send + Sync {
    /// One finite score per candidate, in candidate order.
    fn score(&self, candidates: &[Document], target: &RankingTarget) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalRanker;

impl Ranker for LexicalRanker {
    fn score(&self, candidates: &[Document], target: &RankingTarget) -> Result<Vec<f64>> {
        Ok(candidates.iter().map(|d| lexical_score(d, target)).collect())
    }
}

/// Scores candidates in batches with a completion model. A batch whose
/// completion fails or does not parse as one number per candidate is scored
/// lexically instead.
pub struct LmRanker {
    completion: Arc<dyn CompletionProvider>,
    batch_size: usize,
}

impl LmRanker {
    pub fn new(completion: Arc<dyn CompletionProvider>) -> Self {
        Self {
            completion,
            batch_size: 5,
        }
    }

    pub fn with_batch_size(mut self, size: usize) -> Self {
        self.batch_size = size.max(1);
        self
    }
}

const RANK_PROMPT_HEADER: &str = "Rate how well each candidate satisfies the request, its slots and aspect values. \
Answer with a JSON array holding one score between 0 and 1 per candidate.";

const RANK_EXAMPLE: &str = "REQUEST: quiet cafe with wifi\nSLOTS: wifi\nASPECTS: quiet\n\
CANDIDATES:\n1. Quiet corner cafe | free wifi and calm tables\n2. Sports bar | loud games nightly\nSCORES: [0.9, 0.1]\n\n";

pub fn build_rank_prompt(batch: &[Document], target: &RankingTarget) -> String {
    let slots: Vec<&str> = target.slots.iter().map(|(_, l)| l.as_str()).collect();
    let mut prompt = format!(
        "{RANK_PROMPT_HEADER}\n\n{RANK_EXAMPLE}REQUEST: {}\nSLOTS: {}\nASPECTS: {}\nCANDIDATES:\n",
        target.request_text.replace('\n', " "),
        slots.join(", "),
        target.aspects.join(", ")
    );
    for (i, d) in batch.iter().enumerate() {
        prompt.push_str(&format!(
            "{}. {} | {}\n",
            i + 1,
            d.title.replace('\n', " "),
            d.snippet.replace('\n', " ")
        ));
    }
    prompt.push_str("SCORES:");
    prompt
}

/// Extracts a JSON array of `expected` finite numbers from a completion.
pub fn parse_rank_scores(text: &str, expected: usize) -> Option<Vec<f64>> {
    let start = text.find('[')?;
    let end = text[start..].find(']')? + start;
    let scores: Vec<f64> = serde_json::from_str(&text[start..=end]).ok()?;
    (scores.len() == expected && scores.iter().all(|s| s.is_finite())).then_some(scores)
}

impl Ranker for LmRanker {
    fn score(&self, candidates: &[Document], target: &RankingTarget) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(candidates.len());
        for batch in candidates.chunks(self.batch_size) {
            let prompt = build_rank_prompt(batch, target);
            let parsed = match self.completion.complete(&prompt) {
                Ok(raw) => parse_rank_scores(&raw, batch.len()),
                Err(e) => {
                    log::warn!("ranker completion failed: {e}");
                    None
                }
            };
            match parsed {
                Some(scores) => out.extend(scores),
                None => {
                    log::warn!("ranker batch scored lexically");
                    out.extend(batch.iter().map(|d| lexical_score(d, target)));
                }
            }
        }
        Ok(out)
    }
}

/// Scores `candidates` and keeps the best `k`, ties broken by url.
pub fn rank_suggestions(
    candidates: &[Document],
    target: &RankingTarget,
    ranker: &dyn Ranker,
    k: usize,
) -> Result<Vec<Suggestion>> {
    if candidates.is_empty() {
        return Err(Error::validation("no candidates to rank"));
    }
    let scores = ranker.score(candidates, target)?;
    if scores.len() != candidates.len() {
        return Err(Error::validation(format!(
            "ranker returned {} scores for {} candidates",
            scores.len(),
            candidates.len()
        )));
    }
    let mut ranked: Vec<Suggestion> = candidates
        .iter()
        .zip(scores)
        .map(|(d, s)| Suggestion {
            matched_slots: matched_slots(d, target),
            document: d.clone(),
            score: if s.is_finite() { s } else { 0.0 },
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.document.url.cmp(&b.document.url))
    });
    ranked.truncate(k);
    Ok(ranked)
}

/// Union of the per-query results with url de-duplication, in query order.
pub fn merge_results(lists: Vec<Vec<Document>>) -> Vec<Document> {
    let mut seen = HashSet::new();
    lists
        .into_iter()
        .flatten()
        .filter(|d| seen.insert(d.url.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::hiking;
    use crate::ontology::{AspectValue, IntentKey};

    fn doc(url: &str, title: &str, snippet: &str) -> Document {
        Document {
            title: title.into(),
            url: url.into(),
            snippet: snippet.into(),
        }
    }

    fn hike_frame(slots: &[&str]) -> SemanticFrame {
        let mut f = SemanticFrame::new(&IntentKey::new("activity", "hike"));
        for s in slots {
            f.mention(*s, None);
        }
        f
    }

    #[test]
    fn subquery_template() {
        let ont = hiking();
        let q = generate_subqueries(&ont, &hike_frame(&["scenery"]), &[], Some("San Francisco")).unwrap();
        assert_eq!(q, vec!["hike with scenery in San Francisco"]);
        let q = generate_subqueries(&ont, &hike_frame(&["scenery"]), &["parking".into()], None).unwrap();
        assert_eq!(q, vec!["hike with scenery", "hike with access to parking"]);
        let q = generate_subqueries(&ont, &hike_frame(&[]), &[], Some("Reno")).unwrap();
        assert_eq!(q, vec!["hike in Reno"]);
    }

    #[test]
    fn fixture_search_dedupes_and_truncates() {
        let mut f = FixtureSearch::new();
        f.insert("q", vec![doc("u1", "a", ""), doc("u1", "b", ""), doc("u2", "c", ""), doc("u3", "d", "")]);
        let got = search(&f, "q", 10).unwrap();
        assert_eq!(got.iter().map(|d| d.url.as_str()).collect::<Vec<_>>(), vec!["u1", "u2", "u3"]);
        assert_eq!(got[0].title, "a");
        assert_eq!(search(&f, "q", 2).unwrap().len(), 2);
        assert!(search(&f, "other", 10).unwrap().is_empty());
    }

    #[test]
    fn corpus_counts_lines_and_is_deterministic() {
        let ont = hiking();
        let mut f = FixtureSearch::new();
        for slot in ["access to parking", "scenery"] {
            let q = corpus_query("hike", "Reno", slot);
            f.insert(&q, (0..5).map(|i| doc(&format!("{q}/{i}"), "t", "s")).collect());
        }
        let run = || {
            let mut out = Vec::new();
            let s = build_corpus(&ont, &["Reno".into()], &f, &mut out, CorpusConfig::default()).unwrap();
            (s, out)
        };
        let (summary, bytes) = run();
        assert_eq!(summary.documents, 10);
        assert_eq!(String::from_utf8(bytes.clone()).unwrap().lines().count(), 10);
        assert_eq!(bytes, run().1);
        assert!(build_corpus(&ont, &[], &f, &mut Vec::new(), CorpusConfig::default()).is_err());
    }

    struct Failing;
    impl SearchProvider for Failing {
        fn search_raw(&self, _: &str, _: usize) -> Result<Vec<Document>> {
            Err(Error::Transport {
                attempts: 1,
                message: "down".into(),
            })
        }
    }

    #[test]
    fn corpus_continues_past_failures() {
        let mut out = Vec::new();
        let s = build_corpus(&hiking(), &["Reno".into()], &Failing, &mut out, CorpusConfig::default()).unwrap();
        assert_eq!(s.failures, 2);
        assert!(out.is_empty());
    }

    fn target() -> RankingTarget {
        RankingTarget {
            request_text: "hike".into(),
            slots: vec![("parking".into(), "access to parking".into())],
            aspects: vec!["summer".into()],
        }
    }

    #[test]
    fn lexical_scores_by_hand() {
        // tokens: [summer, parking, trail, loop] -> (2 + 1) / 4
        let a = doc("a", "summer parking", "trail loop");
        // tokens: [parking, access, lot] -> (1 + 1) / 3
        let b = doc("b", "parking access", "lot");
        // tokens: [river, walk] -> 0
        let c = doc("c", "river", "walk");
        let t = target();
        assert!((lexical_score(&a, &t) - 0.75).abs() < 1e-12);
        assert!((lexical_score(&b, &t) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(lexical_score(&c, &t), 0.0);
        let ranked = rank_suggestions(&[c.clone(), b.clone(), a.clone()], &t, &LexicalRanker, 3).unwrap();
        let order: Vec<&str> = ranked.iter().map(|s| s.document.url.as_str()).collect();
        assert_eq!(order, vec!["a", "b", "c"]);
        assert_eq!(ranked[1].matched_slots, vec!["parking"]);
        assert!(ranked[0].matched_slots.is_empty());
    }

    #[test]
    fn ties_break_by_url() {
        let t = target();
        let ranked = rank_suggestions(&[doc("z", "x", "y"), doc("m", "x", "y")], &t, &LexicalRanker, 5).unwrap();
        assert_eq!(ranked[0].document.url, "m");
        assert!(rank_suggestions(&[], &t, &LexicalRanker, 5).is_err());
    }

    struct Canned(&'static str);
    impl CompletionProvider for Canned {
        fn complete(&self, _: &str) -> Result<String> {
            Ok(self.0.into())
        }
    }

    #[test]
    fn lm_ranker_parses_or_falls_back() {
        let docs = [doc("a", "summer parking", "trail loop"), doc("b", "river", "walk")];
        let t = target();
        let lm = LmRanker::new(Arc::new(Canned(" [0.1, 0.9]")));
        let ranked = rank_suggestions(&docs, &t, &lm, 2).unwrap();
        assert_eq!(ranked[0].document.url, "b");
        let broken = LmRanker::new(Arc::new(Canned("no idea")));
        let ranked = rank_suggestions(&docs, &t, &broken, 2).unwrap();
        assert_eq!(ranked[0].document.url, "a");
        assert!((ranked[0].score - 0.75).abs() < 1e-12);
    }

    #[test]
    fn ranking_target_collects_aspects() {
        let ont = hiking();
        let mut f = hike_frame(&[]);
        f.mention("scenery", Some(AspectValue::new("scenery", "Beautiful").unwrap()));
        let t = RankingTarget::from_frame(&ont, &f, &["parking".into()], "req").unwrap();
        assert_eq!(t.slots.len(), 2);
        assert_eq!(t.aspects, vec!["beautiful"]);
    }
}
