//! The on-disk model description format.
//!
//! Models are stored as JSON with a `type` tag:
//!
//! ```json
//! { "type": "table", "vocab_size": 3, "eos": 2, "order": 1,
//!   "fallback": [0.5, 0.3, 0.2],
//!   "rows": [ { "context": [0], "probs": [0.1, 0.6, 0.3] } ] }
//! ```
//!
//! ```json
//! { "type": "softmax", "vocab_size": 6, "eos": 5,
//!   "seed": 42, "embed_dim": 4, "temperature": 1.0 }
//! ```
//!
//! Probability rows must sum to one within `1e-6`; they are renormalized
//! exactly on load. The spec round-trips losslessly through serde.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    Distribution, LanguageModel, ModelError, SoftmaxModel, TableModel, Token, TokenSeq,
    FILE_SUM_TOLERANCE,
};

/// One stored conditional: `P(· | context)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub context: Vec<u32>,
    pub probs: Vec<f64>,
}

/// Serializable model description; see the module docs for the JSON shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Table {
        vocab_size: usize,
        eos: u32,
        order: usize,
        fallback: Vec<f64>,
        #[serde(default)]
        rows: Vec<TableRow>,
    },
    Softmax {
        vocab_size: usize,
        eos: u32,
        seed: u64,
        embed_dim: usize,
        temperature: f64,
    },
}

impl ModelSpec {
    pub fn vocab_size(&self) -> usize {
        match self {
            ModelSpec::Table { vocab_size, .. } | ModelSpec::Softmax { vocab_size, .. } => {
                *vocab_size
            }
        }
    }

    pub fn eos(&self) -> Token {
        match self {
            ModelSpec::Table { eos, .. } | ModelSpec::Softmax { eos, .. } => Token(*eos),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            ModelSpec::Table {
                vocab_size,
                eos,
                order,
                fallback,
                rows,
            } => {
                if *vocab_size == 0 {
                    return Err(ModelError::InvalidSpec {
                        reason: "vocab_size must be positive".into(),
                    });
                }
                if *eos as usize >= *vocab_size {
                    return Err(ModelError::InvalidSpec {
                        reason: format!("eos = {eos} out of range for vocab_size = {vocab_size}"),
                    });
                }
                check_row(fallback, *vocab_size, "fallback")?;
                for (i, row) in rows.iter().enumerate() {
                    if row.context.len() > *order {
                        return Err(ModelError::InvalidSpec {
                            reason: format!(
                                "table row {i} (context {:?}) has length {} > order {order}",
                                row.context,
                                row.context.len()
                            ),
                        });
                    }
                    if let Some(&id) = row.context.iter().find(|&&id| id as usize >= *vocab_size) {
                        return Err(ModelError::InvalidSpec {
                            reason: format!("table row {i}: context token {id} out of range"),
                        });
                    }
                    check_row(&row.probs, *vocab_size, &format!("table row {i}"))?;
                }
                Ok(())
            }
            ModelSpec::Softmax {
                vocab_size,
                eos,
                embed_dim,
                temperature,
                ..
            } => {
                if *vocab_size == 0 {
                    return Err(ModelError::InvalidSpec {
                        reason: "vocab_size must be positive".into(),
                    });
                }
                if *eos as usize >= *vocab_size {
                    return Err(ModelError::InvalidSpec {
                        reason: format!("eos = {eos} out of range for vocab_size = {vocab_size}"),
                    });
                }
                if *embed_dim == 0 {
                    return Err(ModelError::InvalidSpec {
                        reason: "embed_dim must be positive".into(),
                    });
                }
                if !temperature.is_finite() || *temperature <= 0.0 {
                    return Err(ModelError::InvalidSpec {
                        reason: format!("temperature = {temperature} must be positive"),
                    });
                }
                Ok(())
            }
        }
    }

    /// Instantiate a fresh model (counter at zero) from this description.
    pub fn build(&self) -> Result<Box<dyn LanguageModel>, ModelError> {
        self.validate()?;
        match self {
            ModelSpec::Table {
                vocab_size,
                eos,
                order,
                fallback,
                rows,
            } => {
                let fallback =
                    Distribution::new_renormalized(fallback.clone(), FILE_SUM_TOLERANCE)?;
                let mut model = TableModel::new(*vocab_size, Token(*eos), *order, fallback)?;
                for row in rows {
                    let dist =
                        Distribution::new_renormalized(row.probs.clone(), FILE_SUM_TOLERANCE)?;
                    model.insert_row(TokenSeq::from_ids(&row.context), dist)?;
                }
                Ok(Box::new(model))
            }
            ModelSpec::Softmax {
                vocab_size,
                eos,
                seed,
                embed_dim,
                temperature,
            } => Ok(Box::new(SoftmaxModel::new(
                *vocab_size,
                Token(*eos),
                *seed,
                *embed_dim,
                *temperature,
            ))),
        }
    }

    pub fn from_json(json: &str) -> Result<Self, ModelError> {
        let spec: ModelSpec = serde_json::from_str(json)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model spec serializes")
    }

    pub fn from_path(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_path(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}

fn check_row(probs: &[f64], vocab_size: usize, what: &str) -> Result<(), ModelError> {
    if probs.len() != vocab_size {
        return Err(ModelError::InvalidSpec {
            reason: format!(
                "{what} has {} entries, expected vocab_size = {vocab_size}",
                probs.len()
            ),
        });
    }
    if let Some((i, &p)) = probs
        .iter()
        .enumerate()
        .find(|(_, p)| !p.is_finite() || **p < 0.0)
    {
        return Err(ModelError::InvalidSpec {
            reason: format!("{what}: entry {i} is {p}, expected finite and non-negative"),
        });
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > FILE_SUM_TOLERANCE {
        return Err(ModelError::InvalidSpec {
            reason: format!("{what} sums to {sum}, expected 1 within {FILE_SUM_TOLERANCE}"),
        });
    }
    Ok(())
}

/// Build a model from a parsed description. Thin alias over
/// [`ModelSpec::build`] for call sites that read better as a free function.
pub fn generate_model(spec: &ModelSpec) -> Result<Box<dyn LanguageModel>, ModelError> {
    spec.build()
}

/// Generate a random complete table-model description: one row per context
/// of length exactly `order` over the non-EOS alphabet, plus a fallback row
/// for shorter prefixes.
///
/// Rows are drawn deterministically from `seed`: per entry a uniform draw
/// raised to `skew` (larger skew concentrates mass on fewer tokens), then
/// normalized. Every row gives the EOS token exactly `eos_prob` mass.
pub fn random_table_spec(
    vocab_size: usize,
    eos: u32,
    order: usize,
    seed: u64,
    skew: f64,
    eos_prob: f64,
) -> Result<ModelSpec, ModelError> {
    if vocab_size < 2 {
        return Err(ModelError::InvalidSpec {
            reason: "vocab_size must be at least 2".into(),
        });
    }
    if eos as usize >= vocab_size {
        return Err(ModelError::InvalidSpec {
            reason: format!("eos = {eos} out of range for vocab_size = {vocab_size}"),
        });
    }
    if !(0.0..1.0).contains(&eos_prob) {
        return Err(ModelError::InvalidSpec {
            reason: format!("eos_prob = {eos_prob} must be in [0, 1)"),
        });
    }
    if !skew.is_finite() || skew <= 0.0 {
        return Err(ModelError::InvalidSpec {
            reason: format!("skew = {skew} must be positive"),
        });
    }
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let draw_row = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        let mut probs: Vec<f64> = (0..vocab_size)
            .map(|i| {
                if i == eos as usize {
                    0.0
                } else {
                    rng.random::<f64>().powf(skew).max(1e-9)
                }
            })
            .collect();
        let sum: f64 = probs.iter().sum();
        for (i, p) in probs.iter_mut().enumerate() {
            *p = if i == eos as usize {
                eos_prob
            } else {
                *p / sum * (1.0 - eos_prob)
            };
        }
        probs
    };

    let alphabet: Vec<u32> = (0..vocab_size as u32).filter(|&t| t != eos).collect();
    let mut contexts: Vec<Vec<u32>> = vec![Vec::new()];
    for _ in 0..order {
        contexts = contexts
            .into_iter()
            .flat_map(|c| {
                alphabet.iter().map(move |&t| {
                    let mut c2 = c.clone();
                    c2.push(t);
                    c2
                })
            })
            .collect();
    }

    let fallback = draw_row(&mut rng);
    let rows = if order == 0 {
        Vec::new()
    } else {
        contexts
            .into_iter()
            .map(|context| TableRow {
                probs: draw_row(&mut rng),
                context,
            })
            .collect()
    };
    let spec = ModelSpec::Table {
        vocab_size,
        eos,
        order,
        fallback,
        rows,
    };
    spec.validate()?;
    Ok(spec)
}
