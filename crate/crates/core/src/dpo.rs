//! Direct preference optimization objective.
//!
//! For a preference tuple with chosen response `y+` and rejected response `y-`
//! the per-pair loss is
//!
//! ```text
//! delta = (log pi(y+) - log ref(y+)) - (log pi(y-) - log ref(y-))
//! loss  = -ln sigmoid(beta * delta)
//! ```
//!
//! The reference log-probabilities are constants; only the two policy terms
//! carry gradient.

use serde::{Deserialize, Serialize};

/// Preference-scaling default used for caption DPO.
pub const DEFAULT_BETA: f64 = 0.1;
/// Training epochs recorded in exported pair metadata.
pub const DEFAULT_EPOCHS: u32 = 3;
/// Sequence cutoff (tokens) recorded in exported pair metadata.
pub const DEFAULT_CUTOFF_LEN: u32 = 2048;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum DpoError {
    #[error("beta must be positive and finite, got {0}")]
    NonPositiveBeta(f64),
    #[error("log-probability inputs must be finite")]
    NonFiniteInput,
    #[error("preference index {index} out of range for alphabet of {alphabet_size}")]
    InvalidIndex { index: usize, alphabet_size: usize },
    #[error("alphabet must contain at least one symbol")]
    EmptyAlphabet,
}

/// Hyperparameters recorded alongside exported preference pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoHyperparams {
    pub beta: f64,
    pub epochs: u32,
    pub cutoff_len: u32,
}

impl Default for DpoHyperparams {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            epochs: DEFAULT_EPOCHS,
            cutoff_len: DEFAULT_CUTOFF_LEN,
        }
    }
}

/// The four log-probabilities entering one DPO loss term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogProbQuad {
    pub lp_theta_pos: f64,
    pub lp_theta_neg: f64,
    pub lp_ref_pos: f64,
    pub lp_ref_neg: f64,
}

impl LogProbQuad {
    pub fn new(lp_theta_pos: f64, lp_theta_neg: f64, lp_ref_pos: f64, lp_ref_neg: f64) -> Self {
        Self {
            lp_theta_pos,
            lp_theta_neg,
            lp_ref_pos,
            lp_ref_neg,
        }
    }

    fn check(&self) -> Result<(), DpoError> {
        let all_finite = [
            self.lp_theta_pos,
            self.lp_theta_neg,
            self.lp_ref_pos,
            self.lp_ref_neg,
        ]
        .iter()
        .all(|v| v.is_finite());
        if all_finite {
            Ok(())
        } else {
            Err(DpoError::NonFiniteInput)
        }
    }

    /// Difference of implicit rewards, chosen minus rejected.
    pub fn margin(&self) -> f64 {
        (self.lp_theta_pos - self.lp_ref_pos) - (self.lp_theta_neg - self.lp_ref_neg)
    }
}

fn check_beta(beta: f64) -> Result<(), DpoError> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(DpoError::NonPositiveBeta(beta))
    }
}

/// `-ln sigmoid(z)` without overflow for large `|z|`.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// Logistic sigmoid, evaluated on the side that cannot overflow.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn dpo_loss(q: &LogProbQuad, beta: f64) -> Result<f64, DpoError> {
    check_beta(beta)?;
    q.check()?;
    Ok(neg_log_sigmoid(beta * q.margin()))
}

/// Gradient of the loss with respect to the two policy log-probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoGrad {
    pub d_theta_pos: f64,
    pub d_theta_neg: f64,
}

pub fn dpo_loss_grad(q: &LogProbQuad, beta: f64) -> Result<DpoGrad, DpoError> {
    check_beta(beta)?;
    q.check()?;
    let g = beta * sigmoid(-beta * q.margin());
    Ok(DpoGrad {
        d_theta_pos: -g,
        d_theta_neg: g,
    })
}

/// Log-likelihood ratio of policy to reference.
pub fn implicit_reward(lp_theta: f64, lp_ref: f64) -> Result<f64, DpoError> {
    if !(lp_theta.is_finite() && lp_ref.is_finite()) {
        return Err(DpoError::NonFiniteInput);
    }
    Ok(lp_theta - lp_ref)
}

/// Softmax policy over a finite response alphabet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub logits: Vec<f64>,
}

impl TabularPolicy {
    pub fn uniform(alphabet_size: usize) -> Self {
        Self {
            logits: vec![0.0; alphabet_size],
        }
    }

    pub fn log_probs(&self) -> Vec<f64> {
        let max = self
            .logits
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let log_norm = max
            + self
                .logits
                .iter()
                .map(|l| (l - max).exp())
                .sum::<f64>()
                .ln();
        self.logits.iter().map(|l| l - log_norm).collect()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs().into_iter().map(f64::exp).collect()
    }
}

/// Chosen/rejected symbol indices for one tabular preference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexPair {
    pub pos: usize,
    pub neg: usize,
}

impl From<(usize, usize)> for IndexPair {
    fn from((pos, neg): (usize, usize)) -> Self {
        Self { pos, neg }
    }
}

/// Result of fitting a tabular policy, with the mean loss before every step
/// and after the last one (`steps + 1` entries).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyFit {
    pub policy: TabularPolicy,
    pub reference: TabularPolicy,
    pub loss_history: Vec<f64>,
}

/// Mean DPO loss of `policy` against `reference` over `pairs`.
pub fn mean_pair_loss(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    pairs: &[IndexPair],
    beta: f64,
) -> Result<f64, DpoError> {
    check_beta(beta)?;
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let lp = policy.log_probs();
    let lr = reference.log_probs();
    let mut total = 0.0;
    for p in pairs {
        let q = LogProbQuad::new(lp[p.pos], lp[p.neg], lr[p.pos], lr[p.neg]);
        total += dpo_loss(&q, beta)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Gradient descent on the mean DPO loss starting from `initial`, which also
/// serves as the frozen reference policy.
pub fn fit_policy_from(
    initial: TabularPolicy,
    pairs: &[IndexPair],
    beta: f64,
    steps: usize,
    learning_rate: f64,
) -> Result<PolicyFit, DpoError> {
    check_beta(beta)?;
    let n = initial.logits.len();
    if n == 0 {
        return Err(DpoError::EmptyAlphabet);
    }
    if initial.logits.iter().any(|l| !l.is_finite()) {
        return Err(DpoError::NonFiniteInput);
    }
    if let Some(bad) = pairs
        .iter()
        .flat_map(|p| [p.pos, p.neg])
        .find(|&i| i >= n)
    {
        return Err(DpoError::InvalidIndex {
            index: bad,
            alphabet_size: n,
        });
    }

    let reference = initial.clone();
    let ref_lp = reference.log_probs();
    let mut policy = initial;
    let mut loss_history = Vec::with_capacity(steps + 1);
    loss_history.push(mean_pair_loss(&policy, &reference, pairs, beta)?);

    for _ in 0..steps {
        if pairs.is_empty() {
            loss_history.push(0.0);
            continue;
        }
        let lp = policy.log_probs();
        let probs: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        let mut grad = vec![0.0; n];
        for p in pairs {
            let q = LogProbQuad::new(lp[p.pos], lp[p.neg], ref_lp[p.pos], ref_lp[p.neg]);
            let g = dpo_loss_grad(&q, beta)?;
            // d log_softmax_k / d logit_j = [k == j] - p_j
            for (j, gj) in grad.iter_mut().enumerate() {
                let dpos = f64::from(u8::from(j == p.pos)) - probs[j];
                let dneg = f64::from(u8::from(j == p.neg)) - probs[j];
                *gj += g.d_theta_pos * dpos + g.d_theta_neg * dneg;
            }
        }
        let scale = learning_rate / pairs.len() as f64;
        for (logit, g) in policy.logits.iter_mut().zip(&grad) {
            *logit -= scale * g;
        }
        loss_history.push(mean_pair_loss(&policy, &reference, pairs, beta)?);
    }

    Ok(PolicyFit {
        policy,
        reference,
        loss_history,
    })
}

/// Fits a policy over `alphabet_size` symbols starting from the uniform
/// policy.
pub fn fit_tabular_policy(
    alphabet_size: usize,
    pairs: &[IndexPair],
    beta: f64,
    steps: usize,
    learning_rate: f64,
) -> Result<PolicyFit, DpoError> {
    fit_policy_from(
        TabularPolicy::uniform(alphabet_size),
        pairs,
        beta,
        steps,
        learning_rate,
    )
}
