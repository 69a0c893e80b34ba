//! Markov/Zipf text proxy.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;

use super::{LogitSource, FIRST_CONTENT};
use crate::autodiff::MASK_NEG;
use crate::error::{invalid, Result};
use crate::seed::{rng_for, tag};
use crate::tensor::Tensor;

/// Order-`order` chain over `alphabet` content tokens. For every context the
/// next-token law is the Zipf law `p_r ~ (r + 1)^-s` applied through a
/// context-specific permutation, so the conditional entropy equals the Zipf
/// entropy exactly.
#[derive(Clone, Debug)]
pub struct MarkovLm {
    alphabet: usize,
    order: usize,
    vocab: usize,
    zipf: Vec<f64>,
    sampler: WeightedIndex<f64>,
    /// `contexts x alphabet`: rank `r` in context `c` emits `perms[c * alphabet + r]`.
    perms: Vec<u32>,
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

impl MarkovLm {
    pub fn new(alphabet: usize, order: usize, exponent: f64, vocab: usize, seed: u64) -> Result<Self> {
        if alphabet < 2 || order == 0 || FIRST_CONTENT + alphabet > vocab {
            return Err(invalid("markov model needs alphabet >= 2, order >= 1 and room in the vocabulary"));
        }
        let weights: Vec<f64> = (0..alphabet).map(|r| ((r + 1) as f64).powf(-exponent)).collect();
        let z: f64 = weights.iter().sum();
        let zipf: Vec<f64> = weights.iter().map(|w| w / z).collect();
        let sampler = WeightedIndex::new(&zipf).map_err(|e| invalid(e.to_string()))?;
        let contexts = alphabet.pow(order as u32);
        let mut rng = rng_for(seed, &[tag("markov-table")]);
        let mut perms = Vec::with_capacity(contexts * alphabet);
        let mut p: Vec<u32> = (0..alphabet as u32).collect();
        for _ in 0..contexts {
            p.shuffle(&mut rng);
            perms.extend_from_slice(&p);
        }
        Ok(MarkovLm {
            alphabet,
            order,
            vocab,
            zipf,
            sampler,
            perms,
        })
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    fn context(&self, history: &[usize]) -> usize {
        history[history.len() - self.order..]
            .iter()
            .fold(0, |acc, &t| acc * self.alphabet + (t - FIRST_CONTENT))
    }

    /// Samples `len` tokens. With probability `repeat_prob` per position a
    /// span of `repeat_len` earlier tokens is copied verbatim.
    pub fn sample<R: Rng + ?Sized>(&self, len: usize, repeat_prob: f64, repeat_len: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        while out.len() < len.min(self.order) {
            out.push(FIRST_CONTENT + self.sampler.sample(rng));
        }
        while out.len() < len {
            let pos = out.len();
            if repeat_prob > 0.0 && pos > repeat_len && rng.random::<f64>() < repeat_prob {
                let start = rng.random_range(0..pos - repeat_len);
                let n = repeat_len.min(len - pos);
                for i in 0..n {
                    out.push(out[start + i]);
                }
                continue;
            }
            let c = self.context(&out);
            let r = self.sampler.sample(rng);
            out.push(FIRST_CONTENT + self.perms[c * self.alphabet + r] as usize);
        }
        out
    }

    /// Next-token probabilities over the alphabet given a full context.
    fn next_probs(&self, c: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.alphabet];
        for (r, &tok) in self.perms[c * self.alphabet..(c + 1) * self.alphabet].iter().enumerate() {
            p[tok as usize] = self.zipf[r];
        }
        p
    }

    /// Entropy (nats) of the next-token law, identical for every context.
    pub fn conditional_entropy(&self) -> f64 {
        entropy(&self.zipf)
    }

    /// Stationary single-token law of the chain, by power iteration over
    /// contexts.
    pub fn stationary_unigram(&self) -> Vec<f64> {
        let m = self.alphabet;
        let contexts = self.perms.len() / m;
        let mut pi = vec![1.0 / contexts as f64; contexts];
        for _ in 0..10_000 {
            let mut next = vec![0.0; contexts];
            for (c, &w) in pi.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let shifted = (c * m) % contexts;
                for (tok, p) in self.next_probs(c).into_iter().enumerate() {
                    next[shifted + tok] += w * p;
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < 1e-13 {
                break;
            }
        }
        let mut uni = vec![0.0; m];
        for (c, w) in pi.iter().enumerate() {
            uni[c % m] += w;
        }
        uni
    }

    pub fn unigram_entropy(&self) -> f64 {
        entropy(&self.stationary_unigram())
    }
}

impl LogitSource for MarkovLm {
    fn vocab(&self) -> usize {
        self.vocab
    }

    /// Exact log-probabilities of the generating chain (no repeats).
    fn logits(&self, tokens: &[usize], batch: usize) -> Result<Tensor> {
        if batch == 0 || tokens.len() % batch != 0 {
            return Err(invalid("tokens do not split into the batch"));
        }
        if tokens.iter().any(|&t| t < FIRST_CONTENT || t >= FIRST_CONTENT + self.alphabet) {
            return Err(invalid("token outside the chain's alphabet"));
        }
        let t_len = tokens.len() / batch;
        let mut out = vec![MASK_NEG; tokens.len() * self.vocab];
        for b in 0..batch {
            let seq = &tokens[b * t_len..(b + 1) * t_len];
            for i in 0..t_len {
                let probs = if i + 1 < self.order {
                    self.zipf.clone()
                } else {
                    self.next_probs(self.context(&seq[..=i]))
                };
                let row = &mut out[(b * t_len + i) * self.vocab..][..self.vocab];
                for (tok, p) in probs.into_iter().enumerate() {
                    if p > 0.0 {
                        row[FIRST_CONTENT + tok] = p.ln();
                    }
                }
            }
        }
        Tensor::new(vec![tokens.len(), self.vocab], out)
    }
}
