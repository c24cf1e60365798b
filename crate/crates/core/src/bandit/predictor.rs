//! Multi-label slot predictor.
//!
//! Given the request text and the slots already active in a session, the
//! network predicts which further slots the user will pick. Architecture:
//!
//! * embedding layer: a learned table for slots and one for request words;
//! * representation layer: element-wise max over the active slot embeddings,
//!   concatenated with the mean word embedding, then a ReLU layer with
//!   dropout;
//! * prediction layer: one sigmoid unit per slot, trained with sigmoid
//!   cross-entropy.
//!
//! The learned slot embeddings double as the slot part of the third context
//! scheme. Everything is trained from scratch with Adam.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derived_rng;
use crate::text::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 100,
            hidden: 64,
            learning_rate: 0.001,
            batch_size: 8,
            dropout: 0.5,
            epochs: 50,
            seed: 0,
        }
    }
}

/// One supervised row: active slots in, slots the user went on to pick out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub request_text: String,
    pub input_slots: Vec<String>,
    pub target_slots: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Layout {
    slots: usize,
    vocab: usize,
    embed: usize,
    hidden: usize,
}

impl Layout {
    fn slot_emb(&self) -> usize {
        0
    }
    fn word_emb(&self) -> usize {
        self.slots * self.embed
    }
    fn w1(&self) -> usize {
        self.word_emb() + self.vocab * self.embed
    }
    fn b1(&self) -> usize {
        self.w1() + self.hidden * 2 * self.embed
    }
    fn w2(&self) -> usize {
        self.b1() + self.hidden
    }
    fn b2(&self) -> usize {
        self.w2() + self.slots * self.hidden
    }
    fn len(&self) -> usize {
        self.b2() + self.slots
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotPredictorModel {
    slots: Vec<String>,
    vocab: Vec<String>,
    config: PredictorConfig,
    layout: Layout,
    params: Vec<f64>,
    epochs_trained: usize,
    loss_history: Vec<f64>,
    #[serde(skip)]
    slot_pos: HashMap<String, usize>,
    #[serde(skip)]
    word_pos: HashMap<String, usize>,
}

struct Encoded {
    slots: Vec<usize>,
    words: Vec<usize>,
    targets: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
struct Trace {
    argmax: Vec<Option<usize>>,
    x: Vec<f64>,
    z1: Vec<f64>,
    mask: Vec<f64>,
    h: Vec<f64>,
    logits: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable binary cross-entropy on a logit.
fn bce_with_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

impl SlotPredictorModel {
    fn rebuild_maps(&mut self) {
        self.slot_pos = self.slots.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        self.word_pos = self.vocab.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    }

    /// Restores lookup tables after deserialization.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut model: Self =
            serde_json::from_str(text).map_err(|e| Error::json("slot predictor", &e))?;
        if model.params.len() != model.layout.len() {
            return Err(Error::validation("slot predictor parameters do not match layout"));
        }
        model.rebuild_maps();
        Ok(model)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("predictor serializes")
    }

    pub fn is_trained(&self) -> bool {
        self.epochs_trained > 0
    }

    pub fn slots(&self) -> &[String] {
        &self.slots
    }

    pub fn slot_embedding_dim(&self) -> usize {
        self.layout.embed
    }

    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    pub fn slot_embedding(&self, slot_id: &str) -> Option<&[f64]> {
        let e = self.layout.embed;
        self.slot_pos
            .get(slot_id)
            .map(|&i| &self.params[self.layout.slot_emb() + i * e..self.layout.slot_emb() + (i + 1) * e])
    }

    /// Element-wise max over the embeddings of `active`; zeros when empty.
    pub fn pool_slots(&self, active: &[String]) -> Result<Vec<f64>> {
        let ids = self.slot_ids(active)?;
        Ok(self.pool(&ids).0)
    }

    fn slot_ids(&self, slots: &[String]) -> Result<Vec<usize>> {
        slots
            .iter()
            .map(|s| {
                self.slot_pos
                    .get(s)
                    .copied()
                    .ok_or_else(|| Error::validation(format!("slot {s:?} unknown to the predictor")))
            })
            .collect()
    }

    fn word_ids(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .iter()
            .filter_map(|t| self.word_pos.get(t).copied())
            .collect()
    }

    fn pool(&self, ids: &[usize]) -> (Vec<f64>, Vec<Option<usize>>) {
        let e = self.layout.embed;
        let base = self.layout.slot_emb();
        let mut pooled = vec![0.0; e];
        let mut argmax = vec![None; e];
        for &id in ids {
            let row = &self.params[base + id * e..base + (id + 1) * e];
            for k in 0..e {
                if argmax[k].is_none() || row[k] > pooled[k] {
                    pooled[k] = row[k];
                    argmax[k] = Some(id);
                }
            }
        }
        (pooled, argmax)
    }

    fn forward(&self, slots: &[usize], words: &[usize], dropout: Option<&mut ChaCha8Rng>) -> Trace {
        let Layout { embed: e, hidden: hd, slots: n_out, .. } = self.layout;
        let (pooled, argmax) = self.pool(slots);
        let mut x = pooled;
        let mut mean = vec![0.0; e];
        if !words.is_empty() {
            let base = self.layout.word_emb();
            for &w in words {
                for (m, p) in mean.iter_mut().zip(&self.params[base + w * e..base + (w + 1) * e]) {
                    *m += p;
                }
            }
            let n = words.len() as f64;
            mean.iter_mut().for_each(|v| *v /= n);
        }
        x.extend(mean);

        let w1 = &self.params[self.layout.w1()..self.layout.b1()];
        let b1 = &self.params[self.layout.b1()..self.layout.w2()];
        let z1: Vec<f64> = (0..hd)
            .map(|j| {
                let row = &w1[j * 2 * e..(j + 1) * 2 * e];
                row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + b1[j]
            })
            .collect();
        let keep = 1.0 - self.config.dropout;
        let mask: Vec<f64> = match dropout {
            Some(rng) if self.config.dropout > 0.0 => (0..hd)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect(),
            _ => vec![1.0; hd],
        };
        let h: Vec<f64> = z1
            .iter()
            .zip(&mask)
            .map(|(z, m)| z.max(0.0) * m)
            .collect();
        let w2 = &self.params[self.layout.w2()..self.layout.b2()];
        let b2 = &self.params[self.layout.b2()..];
        let logits: Vec<f64> = (0..n_out)
            .map(|s| {
                let row = &w2[s * hd..(s + 1) * hd];
                row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + b2[s]
            })
            .collect();
        Trace {
            argmax,
            x,
            z1,
            mask,
            h,
            logits,
        }
    }

    /// Mean sigmoid cross-entropy of one row.
    fn row_loss(logits: &[f64], targets: &[f64]) -> f64 {
        logits
            .iter()
            .zip(targets)
            .map(|(l, y)| bce_with_logit(*l, *y))
            .sum::<f64>()
            / logits.len() as f64
    }

    /// Accumulates the gradient of one row's loss into `grad`.
    fn backward(&self, row: &Encoded, trace: &Trace, scale: f64, grad: &mut [f64]) {
        let Layout { embed: e, hidden: hd, slots: n_out, .. } = self.layout;
        let l = &self.layout;
        let dlogits: Vec<f64> = trace
            .logits
            .iter()
            .zip(&row.targets)
            .map(|(z, y)| (sigmoid(*z) - y) * scale / n_out as f64)
            .collect();
        let w2 = &self.params[l.w2()..l.b2()];
        let mut dh = vec![0.0; hd];
        for s in 0..n_out {
            let g = dlogits[s];
            if g == 0.0 {
                continue;
            }
            grad[l.b2() + s] += g;
            let base = l.w2() + s * hd;
            for j in 0..hd {
                grad[base + j] += g * trace.h[j];
                dh[j] += g * w2[s * hd + j];
            }
        }
        let w1 = &self.params[l.w1()..l.b1()];
        let mut dx = vec![0.0; 2 * e];
        for j in 0..hd {
            if trace.z1[j] <= 0.0 || trace.mask[j] == 0.0 {
                continue;
            }
            let g = dh[j] * trace.mask[j];
            grad[l.b1() + j] += g;
            let base = l.w1() + j * 2 * e;
            for k in 0..2 * e {
                grad[base + k] += g * trace.x[k];
                dx[k] += g * w1[j * 2 * e + k];
            }
        }
        for k in 0..e {
            if let Some(id) = trace.argmax[k] {
                grad[l.slot_emb() + id * e + k] += dx[k];
            }
        }
        if !row.words.is_empty() {
            let n = row.words.len() as f64;
            for &w in &row.words {
                for k in 0..e {
                    grad[l.word_emb() + w * e + k] += dx[e + k] / n;
                }
            }
        }
    }

    /// Probability of each slot (in [`Self::slots`] order) being picked next.
    pub fn predict(&self, request_text: &str, input_slots: &[String]) -> Result<Vec<f64>> {
        let ids = self.slot_ids(input_slots)?;
        let words = self.word_ids(request_text);
        Ok(self
            .forward(&ids, &words, None)
            .logits
            .into_iter()
            .map(sigmoid)
            .collect())
    }

    /// The `k` most probable slots that are not already among the inputs.
    pub fn rank(&self, request_text: &str, input_slots: &[String], k: usize) -> Result<Vec<String>> {
        let probs = self.predict(request_text, input_slots)?;
        let mut order: Vec<usize> = (0..self.slots.len())
            .filter(|&i| !input_slots.contains(&self.slots[i]))
            .collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        Ok(order.into_iter().take(k).map(|i| self.slots[i].clone()).collect())
    }

    /// Mean loss over `examples` without dropout.
    pub fn loss(&self, examples: &[TrainingExample]) -> Result<f64> {
        let rows = self.encode(examples)?;
        if rows.is_empty() {
            return Ok(0.0);
        }
        let total: f64 = rows
            .iter()
            .map(|r| Self::row_loss(&self.forward(&r.slots, &r.words, None).logits, &r.targets))
            .sum();
        Ok(total / rows.len() as f64)
    }

    fn encode(&self, examples: &[TrainingExample]) -> Result<Vec<Encoded>> {
        examples
            .iter()
            .map(|ex| {
                let slots = self.slot_ids(&ex.input_slots)?;
                let mut targets = vec![0.0; self.slots.len()];
                for id in self.slot_ids(&ex.target_slots)? {
                    targets[id] = 1.0;
                }
                Ok(Encoded {
                    slots,
                    words: self.word_ids(&ex.request_text),
                    targets,
                })
            })
            .collect()
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

/// Trains a predictor over `slots` (or, when empty, every slot appearing in
/// `examples`).
pub fn train_slot_predictor(
    examples: &[TrainingExample],
    slots: &[String],
    config: PredictorConfig,
) -> Result<SlotPredictorModel> {
    if examples.is_empty() {
        return Err(Error::validation("cannot train the slot predictor without examples"));
    }
    if config.batch_size == 0 || config.embed_dim == 0 || config.hidden == 0 {
        return Err(Error::validation("predictor sizes must be positive"));
    }
    if !(0.0..1.0).contains(&config.dropout) {
        return Err(Error::validation("dropout must be in [0, 1)"));
    }
    for ex in examples {
        if let Some(s) = ex.input_slots.iter().find(|s| ex.target_slots.contains(s)) {
            return Err(Error::validation(format!(
                "slot {s:?} is both an input and a target"
            )));
        }
    }
    let slots: Vec<String> = if slots.is_empty() {
        examples
            .iter()
            .flat_map(|e| e.input_slots.iter().chain(&e.target_slots))
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    } else {
        slots.to_vec()
    };
    let vocab: Vec<String> = examples
        .iter()
        .flat_map(|e| tokenize(&e.request_text))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let layout = Layout {
        slots: slots.len(),
        vocab: vocab.len(),
        embed: config.embed_dim,
        hidden: config.hidden,
    };

    let mut init = derived_rng(config.seed, &[0x51]);
    let mut params = vec![0.0; layout.len()];
    let mut uniform = |range: std::ops::Range<usize>, limit: f64| {
        for p in &mut params[range] {
            *p = (init.random::<f64>() * 2.0 - 1.0) * limit;
        }
    };
    uniform(layout.slot_emb()..layout.w1(), 0.1);
    let fan1 = (6.0 / (2 * layout.embed + layout.hidden) as f64).sqrt();
    uniform(layout.w1()..layout.b1(), fan1);
    let fan2 = (6.0 / (layout.hidden + layout.slots) as f64).sqrt();
    uniform(layout.w2()..layout.b2(), fan2);

    let mut model = SlotPredictorModel {
        slots,
        vocab,
        config,
        layout,
        params,
        epochs_trained: 0,
        loss_history: Vec::new(),
        slot_pos: HashMap::new(),
        word_pos: HashMap::new(),
    };
    model.rebuild_maps();

    let rows = model.encode(examples)?;
    let mut adam = Adam::new(layout.len(), config.learning_rate);
    let mut grad = vec![0.0; layout.len()];
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = derived_rng(config.seed, &[0xE0, epoch as u64]);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let row = &rows[i];
                let trace = model.forward(&row.slots, &row.words, Some(&mut rng));
                epoch_loss += SlotPredictorModel::row_loss(&trace.logits, &row.targets);
                model.backward(row, &trace, scale, &mut grad);
            }
            adam.step(&mut model.params, &grad);
        }
        model.loss_history.push(epoch_loss / rows.len() as f64);
        model.epochs_trained += 1;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: &str) -> String {
        x.to_string()
    }

    fn small_config(epochs: usize) -> PredictorConfig {
        PredictorConfig {
            embed_dim: 8,
            hidden: 8,
            epochs,
            dropout: 0.0,
            ..PredictorConfig::default()
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let examples = vec![TrainingExample {
            request_text: "quiet trail views".into(),
            input_slots: vec![s("a"), s("b")],
            target_slots: vec![s("c")],
        }];
        let model = train_slot_predictor(&examples, &[], small_config(3)).unwrap();
        let rows = model.encode(&examples).unwrap();
        let trace = model.forward(&rows[0].slots, &rows[0].words, None);
        let mut grad = vec![0.0; model.params.len()];
        model.backward(&rows[0], &trace, 1.0, &mut grad);

        let h = 1e-6;
        for i in (0..model.params.len()).step_by(7) {
            let mut plus = model.clone();
            plus.params[i] += h;
            let mut minus = model.clone();
            minus.params[i] -= h;
            let lp = plus.loss(&examples).unwrap();
            let lm = minus.loss(&examples).unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            assert!(
                (numeric - grad[i]).abs() < 1e-6,
                "param {i}: numeric {numeric} analytic {}",
                grad[i]
            );
        }
    }

    #[test]
    fn overfits_a_single_row() {
        let examples = vec![TrainingExample {
            request_text: "hike with kids".into(),
            input_slots: vec![s("kids")],
            target_slots: vec![s("shade")],
        }];
        let slots = vec![s("kids"), s("shade"), s("parking"), s("dogs")];
        let config = PredictorConfig {
            epochs: 1500,
            ..PredictorConfig::default()
        };
        let model = train_slot_predictor(&examples, &slots, config).unwrap();
        assert!(model.loss(&examples).unwrap() < 0.1);
    }

    #[test]
    fn all_zero_targets_push_outputs_down() {
        let examples: Vec<_> = (0..16)
            .map(|i| TrainingExample {
                request_text: format!("request {i}"),
                input_slots: vec![s(if i % 2 == 0 { "a" } else { "b" })],
                target_slots: vec![],
            })
            .collect();
        let slots = vec![s("a"), s("b"), s("c")];
        let model = train_slot_predictor(&examples, &slots, PredictorConfig::default()).unwrap();
        for p in model.predict("request 3", &[s("a")]).unwrap() {
            assert!(p < 0.5, "{p}");
        }
    }

    #[test]
    fn rejects_empty_and_overlapping_rows() {
        assert!(train_slot_predictor(&[], &[], PredictorConfig::default()).is_err());
        let bad = TrainingExample {
            request_text: "x".into(),
            input_slots: vec![s("a")],
            target_slots: vec![s("a")],
        };
        assert!(train_slot_predictor(&[bad], &[], PredictorConfig::default()).is_err());
    }

    #[test]
    fn pooling_is_elementwise_max() {
        let examples = vec![TrainingExample {
            request_text: "x".into(),
            input_slots: vec![s("a")],
            target_slots: vec![s("b")],
        }];
        let mut model = train_slot_predictor(&examples, &[], small_config(1)).unwrap();
        let e = model.layout.embed;
        for k in 0..e {
            model.params[k] = if k == 0 { 1.0 } else { 0.0 };
            model.params[e + k] = if k == 1 { 1.0 } else { 0.0 };
        }
        let pooled = model.pool_slots(&[s("a"), s("b")]).unwrap();
        assert_eq!(&pooled[..2], &[1.0, 1.0]);
        assert_eq!(model.pool_slots(&[s("a")]).unwrap(), model.slot_embedding("a").unwrap());
        assert_eq!(model.pool_slots(&[]).unwrap(), vec![0.0; e]);
    }

    #[test]
    fn json_round_trip_preserves_predictions() {
        let examples = vec![TrainingExample {
            request_text: "x y".into(),
            input_slots: vec![s("a")],
            target_slots: vec![s("b")],
        }];
        let model = train_slot_predictor(&examples, &[], small_config(2)).unwrap();
        let back = SlotPredictorModel::from_json_str(&model.to_json_string()).unwrap();
        assert_eq!(back.predict("x", &[s("a")]).unwrap(), model.predict("x", &[s("a")]).unwrap());
    }
}
