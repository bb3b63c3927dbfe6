use super::forward::{assemble_parts, forward_cached};
use super::params::Parameters;
use crate::error::{Error, Result};
use crate::mitigation::AdapterSet;
use crate::scalar::Scalar;
use crate::synthdata::{SyntheticImage, TokenId, EOS};
use crate::tensor::{argmax, logsumexp};

/// Greedy decoding until EOS (kept in the output) or `max_new` tokens.
/// Ties go to the lowest token id.
pub fn generate_greedy<S: Scalar>(
    params: &Parameters<S>,
    adapters: Option<&AdapterSet<S>>,
    image: Option<&SyntheticImage>,
    prompt: &[TokenId],
    max_new: usize,
) -> Result<Vec<TokenId>> {
    let mut out = Vec::with_capacity(max_new);
    let budget = params.config.context;
    while out.len() < max_new {
        let asm = assemble_parts(params, image, prompt, &out)?;
        let last = asm.len() - 1;
        let (logits, _) = forward_cached(params, adapters, &asm.embeddings, Some(&[last]))?;
        let next = argmax(logits.row(0)) as TokenId;
        out.push(next);
        if next == EOS || asm.len() + 1 >= budget {
            break;
        }
    }
    Ok(out)
}

/// Length-normalized candidate log-likelihood given the prompt.
pub fn score_candidates<S: Scalar>(
    params: &Parameters<S>,
    adapters: Option<&AdapterSet<S>>,
    image: Option<&SyntheticImage>,
    prompt: &[TokenId],
    candidates: &[Vec<TokenId>],
) -> Result<Vec<S>> {
    if candidates.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("empty candidate".into()));
    }
    if candidates.iter().all(|c| c.len() == 1) {
        // Causality makes the prompt's last row identical whatever follows it.
        let asm = assemble_parts(params, image, prompt, &[])?;
        let last = asm.len() - 1;
        let (logits, _) = forward_cached(params, adapters, &asm.embeddings, Some(&[last]))?;
        let row = logits.row(0);
        let lse = logsumexp(row);
        return candidates
            .iter()
            .map(|c| {
                row.get(c[0] as usize)
                    .map(|&z| z - lse)
                    .ok_or_else(|| Error::InvalidArgument(format!("candidate token {} outside vocabulary", c[0])))
            })
            .collect();
    }
    candidates
        .iter()
        .map(|c| {
            let asm = assemble_parts(params, image, prompt, c)?;
            let (logits, _) = forward_cached(params, adapters, &asm.embeddings, Some(&asm.target_positions))?;
            let total: S = c
                .iter()
                .enumerate()
                .map(|(j, &t)| {
                    let row = logits.row(j);
                    row[t as usize] - logsumexp(row)
                })
                .sum();
            Ok(total / S::of(c.len() as f64))
        })
        .collect()
}

/// Index of the best score, lowest index on ties.
pub fn pick_candidate<S: Scalar>(scores: &[S]) -> usize {
    argmax(scores)
}
