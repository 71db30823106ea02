//! Synthetic Markov-chain sequence data.
//!
//! A row-stochastic transition matrix is drawn once per dataset
//! (Dirichlet(1) rows, i.e. normalized unit-exponential draws), then
//! sequences of length L+1 are sampled from it; the first L tokens are the
//! context and the last is the prediction target.

use crate::error::{Error, Result};
use crate::numkit::{Mat, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransitionKind {
    /// Random row-stochastic matrix, Dirichlet(1) per row.
    Dirichlet,
    /// Identity transitions: every sequence repeats its first token.
    Identity,
    /// Uniform transitions: targets carry no signal beyond chance.
    Uniform,
}

impl TransitionKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dirichlet" => Ok(TransitionKind::Dirichlet),
            "identity" => Ok(TransitionKind::Identity),
            "uniform" => Ok(TransitionKind::Uniform),
            other => Err(Error::InvalidArg(format!("unknown transition kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    contexts: Vec<Vec<usize>>,
    targets: Vec<usize>,
    vocab: usize,
    context_len: usize,
}

/// One minibatch of examples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub contexts: Vec<Vec<usize>>,
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn example(&self, i: usize) -> (&[usize], usize) {
        (&self.contexts[i], self.targets[i])
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            contexts: indices.iter().map(|&i| self.contexts[i].clone()).collect(),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
        }
    }

    /// Splits off the trailing fraction as a held-out set.
    pub fn split(&self, eval_fraction: f64) -> Result<(Dataset, Dataset)> {
        let n_eval = ((self.len() as f64) * eval_fraction).floor() as usize;
        if n_eval == 0 || n_eval >= self.len() {
            return Err(Error::InvalidArg(format!(
                "cannot split {} examples with eval fraction {eval_fraction}",
                self.len()
            )));
        }
        let cut = self.len() - n_eval;
        let train = Dataset {
            contexts: self.contexts[..cut].to_vec(),
            targets: self.targets[..cut].to_vec(),
            vocab: self.vocab,
            context_len: self.context_len,
        };
        let eval = Dataset {
            contexts: self.contexts[cut..].to_vec(),
            targets: self.targets[cut..].to_vec(),
            vocab: self.vocab,
            context_len: self.context_len,
        };
        Ok((train, eval))
    }
}

fn transition_matrix(vocab: usize, kind: TransitionKind, rng: &mut SeededRng) -> Mat {
    match kind {
        TransitionKind::Identity => Mat::identity(vocab),
        TransitionKind::Uniform => Mat::from_fn(vocab, vocab, |_, _| 1.0 / vocab as f64),
        TransitionKind::Dirichlet => {
            let mut m = Mat::zeros(vocab, vocab);
            for i in 0..vocab {
                let row = m.row_mut(i);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    // Unit exponential via inverse CDF; 1 - u stays in (0, 1].
                    *v = -(1.0 - rng.uniform()).ln();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            m
        }
    }
}

fn sample_row(row: &[f64], rng: &mut SeededRng) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.len() - 1
}

pub fn gen_markov_data(
    vocab: usize,
    context_len: usize,
    num_sequences: usize,
    kind: TransitionKind,
    rng: &mut SeededRng,
) -> Result<Dataset> {
    if vocab < 2 {
        return Err(Error::InvalidArg("vocab must be >= 2".into()));
    }
    if context_len < 2 || num_sequences == 0 {
        return Err(Error::InvalidArg(
            "need context_len >= 2 and at least one sequence".into(),
        ));
    }
    let trans = transition_matrix(vocab, kind, rng);
    let mut contexts = Vec::with_capacity(num_sequences);
    let mut targets = Vec::with_capacity(num_sequences);
    for _ in 0..num_sequences {
        let mut token = rng.index(vocab);
        let mut window = Vec::with_capacity(context_len + 1);
        window.push(token);
        for _ in 0..context_len {
            token = sample_row(trans.row(token), rng);
            window.push(token);
        }
        let target = window.pop().unwrap();
        contexts.push(window);
        targets.push(target);
    }
    Ok(Dataset {
        contexts,
        targets,
        vocab,
        context_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_chain_is_constant() {
        let mut rng = SeededRng::new(1);
        let data = gen_markov_data(5, 4, 50, TransitionKind::Identity, &mut rng).unwrap();
        for i in 0..data.len() {
            let (ctx, target) = data.example(i);
            assert!(ctx.iter().all(|&t| t == target));
        }
    }

    #[test]
    fn fixed_seed_reproduces_dataset() {
        let mut a = SeededRng::new(9);
        let mut b = SeededRng::new(9);
        let da = gen_markov_data(8, 6, 100, TransitionKind::Dirichlet, &mut a).unwrap();
        let db = gen_markov_data(8, 6, 100, TransitionKind::Dirichlet, &mut b).unwrap();
        for i in 0..da.len() {
            assert_eq!(da.example(i), db.example(i));
        }
    }

    #[test]
    fn tokens_in_range() {
        let mut rng = SeededRng::new(4);
        let data = gen_markov_data(7, 5, 200, TransitionKind::Dirichlet, &mut rng).unwrap();
        for i in 0..data.len() {
            let (ctx, t) = data.example(i);
            assert!(t < 7);
            assert!(ctx.iter().all(|&x| x < 7));
        }
    }

    #[test]
    fn split_fractions() {
        let mut rng = SeededRng::new(4);
        let data = gen_markov_data(4, 3, 100, TransitionKind::Uniform, &mut rng).unwrap();
        let (train, eval) = data.split(0.2).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(eval.len(), 20);
        assert!(data.split(0.0).is_err());
    }
}
