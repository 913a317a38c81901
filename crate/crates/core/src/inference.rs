//! Classification stage: majority voting and Dawid-Skene EM over the vote
//! table built from consensus groups.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use num_bigint::BigInt;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::localize::ConsensusGroup;
use crate::model::{AnnotatorId, CategoryId};
use crate::rational::Rational;
use crate::seed;

/// Classes voted for one matched group. Annotators that are not members of
/// the group are missing, not negative votes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteRow {
    /// Stable row identity, used to derive tie-breaking randomness.
    pub key: u64,
    pub votes: Vec<(AnnotatorId, CategoryId)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteTable {
    categories: Vec<CategoryId>,
    rows: Vec<VoteRow>,
}

impl VoteTable {
    pub fn new(categories: impl IntoIterator<Item = CategoryId>) -> Self {
        let mut categories: Vec<CategoryId> = categories.into_iter().collect();
        categories.sort_unstable();
        categories.dedup();
        Self { categories, rows: Vec::new() }
    }

    /// Table with one row per group, keyed by the supplied row keys.
    pub fn from_groups<'a>(
        categories: impl IntoIterator<Item = CategoryId>,
        groups: impl IntoIterator<Item = (u64, &'a ConsensusGroup)>,
    ) -> Result<Self> {
        let mut table = Self::new(categories);
        for (key, group) in groups {
            table.push_row(key, group.class_votes())?;
        }
        Ok(table)
    }

    pub fn push_row(&mut self, key: u64, votes: Vec<(AnnotatorId, CategoryId)>) -> Result<()> {
        if votes.is_empty() {
            return Err(Error::Domain(format!("vote row {key} is empty")));
        }
        for (i, (annotator, category)) in votes.iter().enumerate() {
            if self.categories.binary_search(category).is_err() {
                return Err(Error::Integrity(format!("vote for unknown category {category}")));
            }
            if votes[..i].iter().any(|(a, _)| a == annotator) {
                return Err(Error::Integrity(format!("annotator {annotator} votes twice in row {key}")));
            }
        }
        self.rows.push(VoteRow { key, votes });
        Ok(())
    }

    pub fn categories(&self) -> &[CategoryId] {
        &self.categories
    }

    pub fn rows(&self) -> &[VoteRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn annotators(&self) -> Vec<AnnotatorId> {
        let mut all: Vec<AnnotatorId> = self.rows.iter().flat_map(|r| r.votes.iter().map(|(a, _)| a.clone())).collect();
        all.sort();
        all.dedup();
        all
    }

    fn class_index(&self, category: CategoryId) -> usize {
        self.categories.binary_search(&category).expect("validated on insert")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MajorityOutcome {
    pub key: u64,
    pub category: CategoryId,
    /// Several classes shared the top count and one was drawn at random.
    pub tied: bool,
    /// Fraction of the row's votes for the chosen class.
    pub vote_share: Rational,
}

/// Plurality vote per row. Ties are settled by a uniform draw seeded from
/// `(seed, row key)`, so a row's outcome does not depend on row order.
pub fn majority_vote(table: &VoteTable, seed: u64) -> Vec<MajorityOutcome> {
    table
        .rows
        .iter()
        .map(|row| {
            let mut counts: BTreeMap<CategoryId, usize> = BTreeMap::new();
            for (_, c) in &row.votes {
                *counts.entry(*c).or_default() += 1;
            }
            let top = counts.values().copied().max().unwrap_or(0);
            let tied: Vec<CategoryId> = counts.iter().filter(|(_, n)| **n == top).map(|(c, _)| *c).collect();
            let category = if tied.len() == 1 {
                tied[0]
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[row.key]));
                tied[rng.gen_range(0..tied.len())]
            };
            MajorityOutcome {
                key: row.key,
                category,
                tied: tied.len() > 1,
                vote_share: Rational::new(BigInt::from(top), BigInt::from(row.votes.len())),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop once no posterior entry moves by this much or more.
    pub tol: f64,
    /// Pseudo-count added to every confusion and prior cell.
    pub smoothing: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-6, smoothing: 1e-2 }
    }
}

/// Estimated behaviour of one annotator: `matrix[t][o]` is the probability
/// of answering class `o` when the true class is `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub annotator: AnnotatorId,
    pub matrix: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    /// Scalar confidence: mean of the diagonal.
    pub fn confidence(&self) -> f64 {
        let n = self.matrix.len();
        if n == 0 {
            return 0.0;
        }
        (0..n).map(|k| self.matrix[k][k]).sum::<f64>() / n as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowPosterior {
    pub key: u64,
    pub category: CategoryId,
    pub posterior: Vec<f64>,
    /// The top posterior was shared and voter confidence decided.
    pub tie_broken: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    /// Class order of every posterior and confusion row.
    pub categories: Vec<CategoryId>,
    pub rows: Vec<RowPosterior>,
    pub confusion: BTreeMap<AnnotatorId, ConfusionMatrix>,
    pub priors: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Observed-data log-likelihood after each M-step.
    pub log_likelihood: Vec<f64>,
    /// Log-likelihood plus the smoothing (Dirichlet) log-prior; EM never
    /// decreases this.
    pub objective: Vec<f64>,
}

impl InferenceResult {
    pub fn confidences(&self) -> BTreeMap<AnnotatorId, f64> {
        self.confusion.iter().map(|(a, m)| (a.clone(), m.confidence())).collect()
    }
}

struct Encoded {
    classes: usize,
    annotators: Vec<AnnotatorId>,
    /// per row: (annotator index, class index)
    rows: Vec<Vec<(usize, usize)>>,
}

fn encode(table: &VoteTable) -> Encoded {
    let annotators = table.annotators();
    let rows = table
        .rows
        .iter()
        .map(|r| {
            r.votes
                .iter()
                .map(|(a, c)| (annotators.binary_search(a).expect("collected above"), table.class_index(*c)))
                .collect()
        })
        .collect();
    Encoded { classes: table.categories.len(), annotators, rows }
}

struct Params {
    log_prior: Vec<f64>,
    /// [annotator][true][observed]
    log_confusion: Vec<Vec<Vec<f64>>>,
}

fn m_step(data: &Encoded, posterior: &[Vec<f64>], smoothing: f64) -> Params {
    let c = data.classes;
    let mut prior = vec![smoothing; c];
    let mut counts = vec![vec![vec![smoothing; c]; c]; data.annotators.len()];
    for (row, t) in data.rows.iter().zip(posterior) {
        for k in 0..c {
            prior[k] += t[k];
        }
        for &(j, o) in row {
            for k in 0..c {
                counts[j][k][o] += t[k];
            }
        }
    }
    let total: f64 = prior.iter().sum();
    let log_prior = prior.iter().map(|p| libm::log(p / total)).collect();
    let log_confusion = counts
        .into_iter()
        .map(|m| {
            m.into_iter()
                .map(|row| {
                    let s: f64 = row.iter().sum();
                    row.into_iter().map(|x| libm::log(x / s)).collect()
                })
                .collect()
        })
        .collect();
    Params { log_prior, log_confusion }
}

/// Returns the new posteriors and the observed-data log-likelihood.
fn e_step(data: &Encoded, params: &Params) -> (Vec<Vec<f64>>, f64) {
    let c = data.classes;
    let mut ll = 0.0;
    let posterior = data
        .rows
        .iter()
        .map(|row| {
            let mut logs: Vec<f64> = (0..c)
                .map(|k| params.log_prior[k] + row.iter().map(|&(j, o)| params.log_confusion[j][k][o]).sum::<f64>())
                .collect();
            let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let norm: f64 = logs.iter().map(|l| libm::exp(l - max)).sum();
            let log_norm = max + libm::log(norm);
            ll += log_norm;
            for l in &mut logs {
                *l = libm::exp(*l - log_norm);
            }
            logs
        })
        .collect();
    (posterior, ll)
}

fn log_prior_term(params: &Params, smoothing: f64) -> f64 {
    let conf: f64 = params.log_confusion.iter().flatten().flatten().sum();
    let prior: f64 = params.log_prior.iter().sum();
    smoothing * (conf + prior)
}

/// Dawid-Skene expectation maximization, initialised from per-row vote
/// frequencies.
pub fn em_fit(table: &VoteTable, config: &EmConfig) -> Result<InferenceResult> {
    if table.is_empty() {
        return Err(Error::Domain("cannot fit EM on an empty vote table".to_string()));
    }
    if table.categories.is_empty() {
        return Err(Error::Domain("vote table has no classes".to_string()));
    }
    if config.smoothing.is_nan() || config.smoothing < 0.0 || config.tol.is_nan() || config.tol < 0.0 {
        return Err(Error::Config("EM smoothing and tolerance must be non-negative".to_string()));
    }
    let data = encode(table);
    let c = data.classes;
    let mut posterior: Vec<Vec<f64>> = data
        .rows
        .iter()
        .map(|row| {
            let mut t = vec![0.0; c];
            for &(_, o) in row {
                t[o] += 1.0;
            }
            let n = row.len() as f64;
            t.iter_mut().for_each(|x| *x /= n);
            t
        })
        .collect();

    let mut log_likelihood = Vec::new();
    let mut objective = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut params = m_step(&data, &posterior, config.smoothing);
    while iterations < config.max_iter {
        iterations += 1;
        let (next, ll) = e_step(&data, &params);
        log_likelihood.push(ll);
        objective.push(ll + log_prior_term(&params, config.smoothing));
        let delta = posterior
            .iter()
            .flatten()
            .zip(next.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        posterior = next;
        if delta < config.tol {
            converged = true;
            break;
        }
        params = m_step(&data, &posterior, config.smoothing);
    }

    let confusion: BTreeMap<AnnotatorId, ConfusionMatrix> = data
        .annotators
        .iter()
        .zip(&params.log_confusion)
        .map(|(a, m)| {
            let matrix = m.iter().map(|row| row.iter().map(|x| libm::exp(*x)).collect()).collect();
            (a.clone(), ConfusionMatrix { annotator: a.clone(), matrix })
        })
        .collect();
    let priors = params.log_prior.iter().map(|x| libm::exp(*x)).collect();

    let rows = table
        .rows
        .iter()
        .zip(&data.rows)
        .zip(posterior)
        .map(|((row, encoded), post)| {
            let (class, tie_broken) = argmax_with_confidence(&post, encoded, &params);
            RowPosterior { key: row.key, category: table.categories[class], posterior: post, tie_broken }
        })
        .collect();

    Ok(InferenceResult {
        categories: table.categories.clone(),
        rows,
        confusion,
        priors,
        iterations,
        converged,
        log_likelihood,
        objective,
    })
}

const TIE_EPS: f64 = 1e-12;

/// Highest posterior; among (numerically) equal maxima the class whose
/// voters have the largest summed diagonal confidence wins, then the lowest
/// class index.
fn argmax_with_confidence(post: &[f64], votes: &[(usize, usize)], params: &Params) -> (usize, bool) {
    let max = post.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = (0..post.len()).filter(|&k| max - post[k] <= TIE_EPS).collect();
    if tied.len() == 1 {
        return (tied[0], false);
    }
    let support = |k: usize| -> f64 {
        votes
            .iter()
            .filter(|(_, o)| *o == k)
            .map(|(j, _)| libm::exp(params.log_confusion[*j][k][k]))
            .sum()
    };
    let mut best = tied[0];
    let mut best_support = support(best);
    for &k in &tied[1..] {
        let s = support(k);
        if s > best_support {
            best = k;
            best_support = s;
        }
    }
    (best, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InferenceMethod {
    MajorityVote,
    ExpectationMaximization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferredClass {
    pub key: u64,
    pub category: CategoryId,
    /// Vote share (majority vote) or posterior mass (EM) of the class.
    pub score: f64,
    /// Whether a tie had to be broken (randomly for majority vote, by
    /// voter confidence for EM).
    pub tie: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassInference {
    pub classes: Vec<InferredClass>,
    /// Full EM fit, including annotator confidences, for the EM method.
    pub em: Option<InferenceResult>,
}

/// Assigns a class to every row of the table with the chosen method.
pub fn infer_classes(table: &VoteTable, method: InferenceMethod, config: &EmConfig, seed: u64) -> Result<ClassInference> {
    match method {
        InferenceMethod::MajorityVote => {
            let classes = majority_vote(table, seed)
                .into_iter()
                .map(|m| InferredClass {
                    key: m.key,
                    category: m.category,
                    score: crate::rational::to_f64(&m.vote_share),
                    tie: m.tied,
                })
                .collect();
            Ok(ClassInference { classes, em: None })
        }
        InferenceMethod::ExpectationMaximization => {
            let fit = em_fit(table, config)?;
            let classes = fit
                .rows
                .iter()
                .map(|r| {
                    let idx = fit.categories.binary_search(&r.category).expect("known class");
                    InferredClass { key: r.key, category: r.category, score: r.posterior[idx], tie: r.tie_broken }
                })
                .collect();
            Ok(ClassInference { classes, em: Some(fit) })
        }
    }
}
