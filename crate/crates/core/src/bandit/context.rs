//! Context vectors fed to the per-intent bandits.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::predictor::SlotPredictorModel;
use crate::embedding::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::frame::SemanticFrame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextScheme {
    /// One-hot of mentioned and selected slots.
    #[default]
    Method1,
    /// One-hot followed by the request embedding.
    Method2,
    /// Max-pooled learned slot embeddings followed by the request embedding.
    Method3,
}

impl ContextScheme {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "method1" | "1" => Some(Self::Method1),
            "method2" | "2" => Some(Self::Method2),
            "method3" | "3" => Some(Self::Method3),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Method1 => "method1",
            Self::Method2 => "method2",
            Self::Method3 => "method3",
        }
    }

    pub fn dim(self, n_slots: usize, embed_dim: usize, slot_embed_dim: usize) -> usize {
        match self {
            Self::Method1 => n_slots,
            Self::Method2 => n_slots + embed_dim,
            Self::Method3 => slot_embed_dim + embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextVector {
    pub values: Vec<f64>,
    pub scheme: ContextScheme,
    pub step: u32,
}

impl ContextVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Mentioned slots followed by selections, without duplicates.
pub fn active_slots(frame: &SemanticFrame, selected: &[String]) -> Vec<String> {
    let mut seen = HashSet::new();
    frame
        .mentioned_slots
        .iter()
        .map(|m| &m.slot_id)
        .chain(selected)
        .filter(|s| seen.insert(s.as_str()))
        .cloned()
        .collect()
}

pub fn one_hot(active: &[String], universe: &[String]) -> Result<Vec<f64>> {
    let mut v = vec![0.0; universe.len()];
    for slot in active {
        let pos = universe
            .iter()
            .position(|u| u == slot)
            .ok_or_else(|| Error::validation(format!("slot {slot:?} is outside the arm universe")))?;
        v[pos] = 1.0;
    }
    Ok(v)
}

pub fn context_method1(
    frame: &SemanticFrame,
    selected: &[String],
    universe: &[String],
    step: u32,
) -> Result<ContextVector> {
    Ok(ContextVector {
        values: one_hot(&active_slots(frame, selected), universe)?,
        scheme: ContextScheme::Method1,
        step,
    })
}

pub fn context_method2(
    frame: &SemanticFrame,
    selected: &[String],
    universe: &[String],
    request_text: &str,
    embedder: &dyn EmbeddingProvider,
    step: u32,
) -> Result<ContextVector> {
    let mut values = one_hot(&active_slots(frame, selected), universe)?;
    values.extend(embedder.embed(request_text)?.0);
    Ok(ContextVector {
        values,
        scheme: ContextScheme::Method2,
        step,
    })
}

pub fn context_method3(
    frame: &SemanticFrame,
    selected: &[String],
    predictor: &SlotPredictorModel,
    request_text: &str,
    embedder: &dyn EmbeddingProvider,
    step: u32,
) -> Result<ContextVector> {
    if !predictor.is_trained() {
        return Err(Error::State("slot predictor has not been trained".into()));
    }
    let mut values = predictor.pool_slots(&active_slots(frame, selected))?;
    values.extend(embedder.embed(request_text)?.0);
    Ok(ContextVector {
        values,
        scheme: ContextScheme::Method3,
        step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedding;
    use crate::ontology::IntentKey;

    fn universe() -> Vec<String> {
        vec!["a".into(), "b".into(), "c".into()]
    }

    fn frame(mentioned: &[&str]) -> SemanticFrame {
        let mut f = SemanticFrame::new(&IntentKey::new("t", "i"));
        for m in mentioned {
            f.mention(*m, None);
        }
        f
    }

    #[test]
    fn method1_one_hot() {
        let c = context_method1(&frame(&["a", "c"]), &[], &universe(), 0).unwrap();
        assert_eq!(c.values, vec![1.0, 0.0, 1.0]);
        let c = context_method1(&frame(&[]), &[], &universe(), 0).unwrap();
        assert_eq!(c.values, vec![0.0; 3]);
        let c = context_method1(&frame(&["a", "c"]), &["b".into()], &universe(), 1).unwrap();
        assert_eq!(c.values, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn method1_rejects_foreign_slot() {
        assert!(context_method1(&frame(&["z"]), &[], &universe(), 0).is_err());
    }

    #[test]
    fn method2_appends_request_embedding() {
        let emb = HashEmbedding::new(32, 3);
        let c = context_method2(&frame(&[]), &[], &universe(), "a quiet hike", &emb, 0).unwrap();
        assert_eq!(c.dim(), 35);
        assert_eq!(&c.values[..3], &[0.0; 3]);
        assert_eq!(&c.values[3..], emb.embed("a quiet hike").unwrap().as_slice());
        let again = context_method2(&frame(&[]), &[], &universe(), "a quiet hike", &emb, 0).unwrap();
        assert_eq!(c, again);
    }
}
