//! Corpus file I/O: one whitespace-separated token-id sequence per line.

use std::path::Path;

use rand::Rng;

use super::{LanguageModel, ModelError, TokenSeq};

/// Parse corpus text. Blank lines are skipped; anything that is not an
/// unsigned integer is an error naming the line.
pub fn parse_corpus(text: &str) -> Result<Vec<TokenSeq>, ModelError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut ids = Vec::new();
        for tok in line.split_whitespace() {
            let id: u32 = tok.parse().map_err(|_| ModelError::InvalidCorpus {
                line: i + 1,
                reason: format!("'{tok}' is not a token id"),
            })?;
            ids.push(id);
        }
        out.push(TokenSeq::from_ids(&ids));
    }
    Ok(out)
}

pub fn format_corpus(corpus: &[TokenSeq]) -> String {
    let mut out = String::new();
    for seq in corpus {
        out.push_str(&seq.to_string());
        out.push('\n');
    }
    out
}

pub fn read_corpus(path: &Path) -> Result<Vec<TokenSeq>, ModelError> {
    parse_corpus(&std::fs::read_to_string(path)?)
}

pub fn write_corpus(path: &Path, corpus: &[TokenSeq]) -> Result<(), ModelError> {
    std::fs::write(path, format_corpus(corpus))?;
    Ok(())
}

/// Draw `sequences` ancestral samples from `model`, each stopping at EOS or
/// after `max_len` tokens. EOS, when drawn, is kept as the final token.
pub fn sample_corpus<R: Rng + ?Sized>(
    model: &dyn LanguageModel,
    sequences: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<TokenSeq>, ModelError> {
    let mut out = Vec::with_capacity(sequences);
    for _ in 0..sequences {
        let mut seq = TokenSeq::new();
        for _ in 0..max_len {
            let dist = model.next_distribution(&seq)?;
            let t = dist.sample(rng);
            seq.push(t);
            if t == model.eos() {
                break;
            }
        }
        out.push(seq);
    }
    Ok(out)
}
