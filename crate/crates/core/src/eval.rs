//! Full-catalog top-K evaluation.
//!
//! Conventions: training positives are removed before ranking, ties go to
//! the lower item index, Recall@K divides by |Test(u)| and users without test
//! items are left out of the means.

use std::cmp::Ordering;
use std::fmt::{self, Write as _};

use rayon::prelude::*;

use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const REPORT_HEADER: &str = "model,loss,K,recall,ndcg,n_users";

/// Indices of the `k` best items, best first, skipping `masked` (sorted).
pub fn top_k<T: Scalar>(scores: &[T], k: usize, masked: &[usize]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len())
        .filter(|i| masked.binary_search(i).is_err())
        .collect();
    let cmp = |a: &usize, b: &usize| -> Ordering {
        let (sa, sb) = (scores[*a].as_f64(), scores[*b].as_f64());
        // NaN ranks last
        match (sa.is_nan(), sb.is_nan()) {
            (true, true) => a.cmp(b),
            (true, false) => Ordering::Greater,
            (false, true) => Ordering::Less,
            _ => sb.partial_cmp(&sa).unwrap().then(a.cmp(b)),
        }
    };
    let k = k.min(idx.len());
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Recall@K and NDCG@K of one ranked list against a sorted test set.
pub fn user_metrics(ranked: &[usize], test: &[usize], k: usize) -> (f64, f64) {
    if test.is_empty() {
        return (0.0, 0.0);
    }
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (r, item) in ranked.iter().take(k).enumerate() {
        if test.binary_search(item).is_ok() {
            hits += 1;
            dcg += 1.0 / ((r + 2) as f64).log2();
        }
    }
    let idcg: f64 = (0..k.min(test.len())).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    (hits as f64 / test.len() as f64, dcg / idcg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserMetric {
    pub user: usize,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub n_users: usize,
    pub per_user: Vec<UserMetric>,
}

impl EvalReport {
    pub fn csv_row(&self, model: &str, loss: &str) -> String {
        format!(
            "{model},{loss},{},{:.6},{:.6},{}",
            self.k, self.recall, self.ndcg, self.n_users
        )
    }

    /// Header plus one row.
    pub fn to_csv(&self, model: &str, loss: &str) -> String {
        format!("{REPORT_HEADER}\n{}\n", self.csv_row(model, loss))
    }

    pub fn table(&self, model: &str, loss: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:<18} {:>4} {:>10} {:>10} {:>8}", "model", "loss", "K", "recall", "ndcg", "users");
        let _ = writeln!(
            s,
            "{:<12} {:<18} {:>4} {:>10.6} {:>10.6} {:>8}",
            model, loss, self.k, self.recall, self.ndcg, self.n_users
        );
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Recall@{k} = {:.6}  NDCG@{k} = {:.6}  ({} users)",
            self.recall,
            self.ndcg,
            self.n_users,
            k = self.k
        )
    }
}

/// Evaluates `scores` (full item score vector per user) on `test`.
pub fn evaluate<T, F>(
    scores: F,
    train: &InteractionDataset,
    test: &InteractionDataset,
    k: usize,
) -> Result<EvalReport>
where
    T: Scalar,
    F: Fn(usize) -> Vec<T> + Sync,
{
    if k == 0 {
        return Err(Error::Config("K must be ≥ 1".into()));
    }
    if test.n_interactions() == 0 {
        return Err(Error::EmptyDataset("test set"));
    }
    if train.n_users() != test.n_users() || train.n_items() != test.n_items() {
        return Err(Error::Dimension(format!(
            "train is {}×{}, test is {}×{}",
            train.n_users(),
            train.n_items(),
            test.n_users(),
            test.n_items()
        )));
    }
    let per_user: Vec<UserMetric> = (0..test.n_users())
        .into_par_iter()
        .filter(|&u| !test.items_of(u).is_empty())
        .map(|u| {
            let s = scores(u);
            let ranked = top_k(&s, k, train.items_of(u));
            let (recall, ndcg) = user_metrics(&ranked, test.items_of(u), k);
            UserMetric { user: u, recall, ndcg }
        })
        .collect();
    let n = per_user.len();
    let recall = per_user.iter().map(|m| m.recall).sum::<f64>() / n as f64;
    let ndcg = per_user.iter().map(|m| m.ndcg).sum::<f64>() / n as f64;
    Ok(EvalReport {
        k,
        recall,
        ndcg,
        n_users: n,
        per_user,
    })
}

/// Same ranking for every user: descending training popularity.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityScores {
    pub scores: Vec<f64>,
}

impl PopularityScores {
    pub fn for_user(&self, _u: usize) -> Vec<f64> {
        self.scores.clone()
    }
}

pub fn popularity_baseline(train: &InteractionDataset) -> Result<PopularityScores> {
    if train.n_interactions() == 0 {
        return Err(Error::EmptyDataset("training set"));
    }
    Ok(PopularityScores {
        scores: (0..train.n_items()).map(|i| train.users_of(i).len() as f64).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_metrics() {
        let (r, n) = user_metrics(&[0, 2], &[0, 1], 2);
        assert_eq!(r, 0.5);
        assert!((n - 1.0 / (1.0 + 1.0 / 3f64.log2())).abs() < 1e-12);
        assert!((n - 0.613_147_2).abs() < 1e-6);
        assert_eq!(user_metrics(&[1, 0], &[0, 1], 2), (1.0, 1.0));
        assert_eq!(user_metrics(&[3, 4], &[0, 1], 2), (0.0, 0.0));
    }

    #[test]
    fn top_k_ties_and_mask() {
        let s = [1.0, 3.0, 3.0, 2.0, f64::NAN];
        assert_eq!(top_k(&s, 3, &[]), vec![1, 2, 3]);
        assert_eq!(top_k(&s, 2, &[1]), vec![2, 3]);
        assert_eq!(top_k(&s, 10, &[0, 1, 2, 3]), vec![4]);
    }

    #[test]
    fn popularity_ranking() {
        let ds = InteractionDataset::from_pairs(
            5,
            3,
            [(0, 0), (1, 0), (2, 0), (3, 0), (4, 0), (0, 1), (0, 2), (1, 2), (2, 2)],
        )
        .unwrap();
        let pop = popularity_baseline(&ds).unwrap();
        assert_eq!(top_k(&pop.for_user(3), 3, &[]), vec![0, 2, 1]);
        assert_eq!(top_k(&pop.for_user(3), 3, ds.items_of(3)), vec![2, 1]);
    }

    #[test]
    fn empty_test_rejected() {
        let train = InteractionDataset::from_pairs(1, 2, [(0, 0)]).unwrap();
        let test = InteractionDataset::from_pairs(1, 2, []).unwrap();
        assert!(evaluate(|_| vec![0.0f64; 2], &train, &test, 1).is_err());
    }
}
