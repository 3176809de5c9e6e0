//! Explicit conditional-probability-table model.

use std::collections::BTreeMap;

use super::{Distribution, ForwardCounter, LanguageModel, ModelError, Token, TokenSeq};

/// A language model backed by an explicit table of conditional distributions
/// keyed by context suffixes of length at most `order`.
///
/// Lookup tries the longest available suffix of the prefix first (length
/// `min(order, prefix_len)`), then successively shorter ones; when no stored
/// context matches, the `fallback` distribution applies. An order-0 model
/// therefore ignores its context entirely unless the empty context was
/// stored.
pub struct TableModel {
    vocab_size: usize,
    eos: Token,
    order: usize,
    table: BTreeMap<TokenSeq, Distribution>,
    fallback: Distribution,
    counter: ForwardCounter,
}

impl TableModel {
    pub fn new(
        vocab_size: usize,
        eos: Token,
        order: usize,
        fallback: Distribution,
    ) -> Result<Self, ModelError> {
        if vocab_size == 0 {
            return Err(ModelError::InvalidSpec {
                reason: "vocab_size must be positive".into(),
            });
        }
        if eos.index() >= vocab_size {
            return Err(ModelError::TokenOutOfRange {
                id: eos.id(),
                vocab_size,
            });
        }
        if fallback.len() != vocab_size {
            return Err(ModelError::InvalidSpec {
                reason: format!(
                    "fallback row has {} entries, expected vocab_size = {vocab_size}",
                    fallback.len()
                ),
            });
        }
        Ok(TableModel {
            vocab_size,
            eos,
            order,
            table: BTreeMap::new(),
            fallback,
            counter: ForwardCounter::new(),
        })
    }

    /// Uniform order-0 model: every conditional is `1/vocab_size`.
    pub fn uniform(vocab_size: usize, eos: Token) -> Self {
        TableModel::new(vocab_size, eos, 0, Distribution::uniform(vocab_size))
            .expect("uniform table model is always valid")
    }

    /// Register the conditional distribution for a context suffix.
    pub fn insert_row(&mut self, context: TokenSeq, dist: Distribution) -> Result<(), ModelError> {
        if context.len() > self.order {
            return Err(ModelError::InvalidSpec {
                reason: format!(
                    "context {context:?} has length {} but model order is {}",
                    context.len(),
                    self.order
                ),
            });
        }
        if let Some(t) = context.iter().find(|t| t.index() >= self.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id: t.id(),
                vocab_size: self.vocab_size,
            });
        }
        if dist.len() != self.vocab_size {
            return Err(ModelError::InvalidSpec {
                reason: format!(
                    "row for context {context:?} has {} entries, expected {}",
                    dist.len(),
                    self.vocab_size
                ),
            });
        }
        self.table.insert(context, dist);
        Ok(())
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn rows(&self) -> impl Iterator<Item = (&TokenSeq, &Distribution)> {
        self.table.iter()
    }

    pub fn fallback(&self) -> &Distribution {
        &self.fallback
    }
}

impl LanguageModel for TableModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn eos(&self) -> Token {
        self.eos
    }

    fn conditional(&self, prefix: &TokenSeq) -> Distribution {
        let max_len = self.order.min(prefix.len());
        for len in (0..=max_len).rev() {
            if let Some(dist) = self.table.get(&prefix.suffix(len)) {
                return dist.clone();
            }
        }
        self.fallback.clone()
    }

    fn counter(&self) -> &ForwardCounter {
        &self.counter
    }
}
