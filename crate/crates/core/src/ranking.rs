//! Plackett-Luce aggregation of ranking ballots.
//!
//! Worth parameters are fitted by maximum likelihood with Hunter's MM
//! iteration, which increases the likelihood at every step.

use std::collections::BTreeSet;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Method ids, best first.
pub type Ballot = Vec<String>;

#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Stop when no worth changes by more than this relative amount.
    pub tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 10_000,
            tolerance: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlackettLuceFit {
    /// Sorted method ids.
    pub methods: Vec<String>,
    /// Worths normalized to sum to the number of methods.
    pub worth: Vec<f64>,
    /// Log worths centered to mean zero over methods with positive worth;
    /// `-inf` for methods that were never ranked above another.
    pub log_scores: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood before the first and after every iteration.
    pub log_likelihood: Vec<f64>,
}

impl PlackettLuceFit {
    pub fn score(&self, method: &str) -> Option<f64> {
        self.methods
            .iter()
            .position(|m| m == method)
            .map(|i| self.log_scores[i])
    }
}

/// Ballots as index permutations over sorted method ids.
fn index_ballots(ballots: &[Ballot]) -> Result<(Vec<String>, Vec<Vec<usize>>)> {
    let first = ballots
        .first()
        .ok_or_else(|| Error::Validation("no ballots to aggregate".into()))?;
    let methods: BTreeSet<&String> = first.iter().collect();
    if methods.len() != first.len() {
        return Err(Error::Validation("ballot 1 lists a method twice".into()));
    }
    if methods.len() < 2 {
        return Err(Error::Validation(
            "ballots must rank at least two methods".into(),
        ));
    }
    let methods: Vec<String> = methods.into_iter().cloned().collect();
    let mut indexed = Vec::with_capacity(ballots.len());
    for (b, ballot) in ballots.iter().enumerate() {
        let mut seen = vec![false; methods.len()];
        let mut order = Vec::with_capacity(ballot.len());
        for id in ballot {
            let i = methods.binary_search(id).map_err(|_| {
                Error::Validation(format!(
                    "ballot {} ranks '{id}', which ballot 1 does not",
                    b + 1
                ))
            })?;
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Validation(format!(
                    "ballot {} lists '{id}' twice",
                    b + 1
                )));
            }
            order.push(i);
        }
        if order.len() != methods.len() {
            return Err(Error::Validation(format!(
                "ballot {} ranks {} of {} methods",
                b + 1,
                order.len(),
                methods.len()
            )));
        }
        indexed.push(order);
    }
    Ok((methods, indexed))
}

/// Plackett-Luce log-likelihood of complete rankings under `worth`.
pub fn log_likelihood(ballots: &[Vec<usize>], worth: &[f64]) -> f64 {
    let mut ll = 0.0;
    for order in ballots {
        let mut remaining: f64 = order.iter().map(|&i| worth[i]).sum();
        for &chosen in &order[..order.len() - 1] {
            ll += worth[chosen].ln() - remaining.ln();
            remaining -= worth[chosen];
        }
    }
    ll
}

pub fn plackett_luce(ballots: &[Ballot]) -> Result<PlackettLuceFit> {
    plackett_luce_with(ballots, FitOptions::default())
}

pub fn plackett_luce_with(ballots: &[Ballot], options: FitOptions) -> Result<PlackettLuceFit> {
    let (methods, orders) = index_ballots(ballots)?;
    let m = methods.len();
    // Number of stages at which each method was picked.
    let mut wins = vec![0.0f64; m];
    for order in &orders {
        for &i in &order[..m - 1] {
            wins[i] += 1.0;
        }
    }
    for (id, _) in methods.iter().zip(&wins).filter(|(_, &w)| w == 0.0) {
        log::warn!("method '{id}' is never ranked above another; its worth is zero");
    }

    let mut worth = vec![1.0f64; m];
    let mut history = vec![log_likelihood(&orders, &worth)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iter {
        iterations += 1;
        let mut denom = vec![0.0f64; m];
        for order in &orders {
            let mut remaining: f64 = order.iter().map(|&i| worth[i]).sum();
            for r in 0..m - 1 {
                let inv = 1.0 / remaining;
                for &i in &order[r..] {
                    denom[i] += inv;
                }
                remaining -= worth[order[r]];
            }
        }
        let mut next: Vec<f64> = wins.iter().zip(&denom).map(|(w, d)| w / d).collect();
        let scale = m as f64 / next.iter().sum::<f64>();
        next.iter_mut().for_each(|w| *w *= scale);

        let ll = log_likelihood(&orders, &next);
        let prev = *history.last().expect("history starts non-empty");
        if ll < prev - 1e-9 * prev.abs().max(1.0) {
            return Err(Error::Numeric(format!(
                "Plackett-Luce log-likelihood decreased at iteration {iterations}: {prev} -> {ll}"
            )));
        }
        history.push(ll);
        let change = worth
            .iter()
            .zip(&next)
            .filter(|(old, _)| **old > 0.0)
            .map(|(old, new)| ((new - old) / old).abs())
            .fold(0.0, f64::max);
        worth = next;
        if change < options.tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("Plackett-Luce fit stopped after {iterations} iterations without converging");
    }

    let logs: Vec<f64> = worth.iter().map(|w| w.ln()).collect();
    let finite: Vec<f64> = logs.iter().copied().filter(|v| v.is_finite()).collect();
    let mean = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
    let log_scores = logs
        .iter()
        .map(|&v| {
            if v.is_finite() {
                v - mean
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    Ok(PlackettLuceFit {
        methods,
        worth,
        log_scores,
        iterations,
        converged,
        log_likelihood: history,
    })
}

/// Read ballots from a header-less CSV: one row per ballot, one method id
/// per column, best first.
pub fn read_ballots(path: &Path) -> Result<Vec<Ballot>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut ballots = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        let ballot: Ballot = record
            .iter()
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        if !ballot.is_empty() {
            ballots.push(ballot);
        }
    }
    Ok(ballots)
}
