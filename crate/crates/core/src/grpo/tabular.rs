use rand::Rng;

use super::{DifferentiablePolicy, GrpoError, Policy};

/// Softmax over a finite vocabulary, one independent table per prompt and
/// position. With one position a trajectory is a single answer token; with
/// more, each token of the chain has its own table.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularSoftmaxPolicy {
    prompts: usize,
    positions: usize,
    vocab: usize,
    logits: Vec<f64>,
}

/// Enumerate full distributions only up to this many trajectories.
const MAX_ENUMERATION: usize = 1 << 14;

impl TabularSoftmaxPolicy {
    /// Uniform single-token policy.
    pub fn new(prompts: usize, vocab: usize) -> Self {
        Self::chain(prompts, 1, vocab)
    }

    pub fn chain(prompts: usize, positions: usize, vocab: usize) -> Self {
        assert!(prompts > 0 && positions > 0 && vocab > 0, "empty policy table");
        Self { prompts, positions, vocab, logits: vec![0.0; prompts * positions * vocab] }
    }

    pub fn prompts(&self) -> usize {
        self.prompts
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    fn offset(&self, prompt: usize, position: usize) -> usize {
        (prompt * self.positions + position) * self.vocab
    }

    pub fn param_index(&self, prompt: usize, position: usize, token: usize) -> usize {
        self.offset(prompt, position) + token
    }

    pub fn logits(&self, prompt: usize, position: usize) -> &[f64] {
        let o = self.offset(prompt, position);
        &self.logits[o..o + self.vocab]
    }

    pub fn set_logits(&mut self, prompt: usize, position: usize, values: &[f64]) {
        assert_eq!(values.len(), self.vocab);
        let o = self.offset(prompt, position);
        self.logits[o..o + self.vocab].copy_from_slice(values);
    }

    pub fn probs(&self, prompt: usize, position: usize) -> Vec<f64> {
        let l = self.logits(prompt, position);
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    }

    fn log_probs(&self, prompt: usize, position: usize) -> Vec<f64> {
        let l = self.logits(prompt, position);
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + l.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        l.iter().map(|x| x - lse).collect()
    }

    /// Single-token policy whose probability of `token` is `p`, with the
    /// rest spread evenly over the other tokens.
    pub fn set_token_probability(&mut self, prompt: usize, token: usize, p: f64) {
        let p = p.clamp(1e-9, 1.0 - 1e-9);
        let rest = (1.0 - p) / (self.vocab.max(2) - 1) as f64;
        let row: Vec<f64> = (0..self.vocab).map(|v| if v == token { p.ln() } else { rest.ln() }).collect();
        for pos in 0..self.positions {
            self.set_logits(prompt, pos, &row);
        }
    }
}

impl Policy for TabularSoftmaxPolicy {
    fn sample<R: Rng + ?Sized>(&self, prompt: usize, count: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let tables: Vec<Vec<f64>> = (0..self.positions).map(|t| self.probs(prompt, t)).collect();
        (0..count)
            .map(|_| {
                tables
                    .iter()
                    .map(|probs| {
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        for (v, p) in probs.iter().enumerate() {
                            acc += p;
                            if u < acc {
                                return v;
                            }
                        }
                        probs.len() - 1
                    })
                    .collect()
            })
            .collect()
    }

    fn log_prob(&self, prompt: usize, trajectory: &[usize]) -> Vec<f64> {
        trajectory.iter().enumerate().map(|(t, &tok)| self.log_probs(prompt, t)[tok]).collect()
    }

    fn parameters(&self) -> Vec<f64> {
        self.logits.clone()
    }

    fn set_parameters(&mut self, theta: &[f64]) -> Result<(), GrpoError> {
        if theta.len() != self.logits.len() {
            return Err(GrpoError::ParameterShape { expected: self.logits.len(), got: theta.len() });
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(GrpoError::NonFinite("parameters".into()));
        }
        self.logits.copy_from_slice(theta);
        Ok(())
    }

    fn full_distribution(&self, prompt: usize) -> Option<Vec<(Vec<usize>, f64)>> {
        let total = self.vocab.checked_pow(self.positions as u32)?;
        if total > MAX_ENUMERATION {
            return None;
        }
        let tables: Vec<Vec<f64>> = (0..self.positions).map(|t| self.probs(prompt, t)).collect();
        Some(
            (0..total)
                .map(|mut code| {
                    let mut traj = Vec::with_capacity(self.positions);
                    let mut p = 1.0;
                    for table in &tables {
                        let v = code % self.vocab;
                        code /= self.vocab;
                        traj.push(v);
                        p *= table[v];
                    }
                    (traj, p)
                })
                .collect(),
        )
    }
}

impl DifferentiablePolicy for TabularSoftmaxPolicy {
    /// `∂ log π(o_t) / ∂ logit_v = 1[v = o_t] − π(v)` on position `t`'s table.
    fn grad_log_prob(&self, prompt: usize, trajectory: &[usize], t: usize) -> Vec<(usize, f64)> {
        let probs = self.probs(prompt, t);
        let o = self.offset(prompt, t);
        probs
            .iter()
            .enumerate()
            .map(|(v, p)| (o + v, f64::from(u8::from(v == trajectory[t])) - p))
            .collect()
    }
}
