//! Matrix-factorization model: embeddings, initialization and scoring.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::data::write_text;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, DenseMatrix};
use crate::scalar::Scalar;
use crate::seed::{self, Stream};

/// Norms below this are treated as zero by cosine scoring.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreMode {
    #[default]
    Dot,
    Cosine,
}

impl ScoreMode {
    pub fn name(self) -> &'static str {
        match self {
            ScoreMode::Dot => "dot",
            ScoreMode::Cosine => "cosine",
        }
    }
}

impl FromStr for ScoreMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(ScoreMode::Dot),
            "cosine" => Ok(ScoreMode::Cosine),
            _ => Err(Error::Config(format!("unknown score mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    Normal { sigma: f64 },
    /// Normal with variance `2 / (fan_in + fan_out) = 1 / d`.
    Xavier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfModel<T> {
    pub user_emb: DenseMatrix<T>,
    pub item_emb: DenseMatrix<T>,
    pub score_mode: ScoreMode,
}

impl<T: Scalar> MfModel<T> {
    pub fn init(
        n_users: usize,
        n_items: usize,
        d: usize,
        scheme: InitScheme,
        score_mode: ScoreMode,
        seed: u64,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("embedding dimension must be ≥ 1".into()));
        }
        let sigma = match scheme {
            InitScheme::Normal { sigma } => sigma,
            InitScheme::Xavier => (2.0 / (d + d) as f64).sqrt(),
        };
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::Config(format!("init sigma must be ≥ 0, got {sigma}")));
        }
        let mut rng = seed::stream(seed, Stream::Init);
        let mut fill = |rows: usize| {
            if sigma == 0.0 {
                return DenseMatrix::zeros(rows, d);
            }
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            DenseMatrix::from_fn(rows, d, |_, _| T::of(normal.sample(&mut rng)))
        };
        let user_emb = fill(n_users);
        let item_emb = fill(n_items);
        Ok(Self {
            user_emb,
            item_emb,
            score_mode,
        })
    }

    pub fn from_parts(
        user_emb: DenseMatrix<T>,
        item_emb: DenseMatrix<T>,
        score_mode: ScoreMode,
    ) -> Result<Self> {
        if user_emb.cols() != item_emb.cols() || user_emb.cols() == 0 {
            return Err(Error::Dimension(format!(
                "user dim {} vs item dim {}",
                user_emb.cols(),
                item_emb.cols()
            )));
        }
        Ok(Self {
            user_emb,
            item_emb,
            score_mode,
        })
    }

    #[inline]
    pub fn n_users(&self) -> usize {
        self.user_emb.rows()
    }

    #[inline]
    pub fn n_items(&self) -> usize {
        self.item_emb.rows()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.user_emb.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.user_emb.is_finite() && self.item_emb.is_finite()
    }

    #[inline]
    pub fn score(&self, u: usize, i: usize) -> T {
        pair_score(self.score_mode, self.user_emb.row(u), self.item_emb.row(i))
    }

    /// Scores of user `u` against every item, as one matrix-vector product.
    pub fn score_all_items(&self, u: usize) -> Vec<T> {
        let w = self.user_emb.row(u);
        let mut scores = self.item_emb.mul_vec(w);
        if self.score_mode == ScoreMode::Cosine {
            let wn = norm(w);
            let eps = T::of(ZERO_NORM);
            for (s, h) in scores.iter_mut().zip(self.item_emb.row_iter()) {
                let hn = norm(h);
                *s = if wn < eps || hn < eps {
                    T::zero()
                } else {
                    *s / (wn * hn)
                };
            }
        }
        scores
    }

    /// Writes `header.txt`, `user_emb.txt` and `item_emb.txt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let header = format!(
            "n_users {}\nn_items {}\nd {}\nscore_mode {}\n",
            self.n_users(),
            self.n_items(),
            self.dim(),
            self.score_mode.name()
        );
        write_text(&dir.join("header.txt"), &header)?;
        write_matrix(&dir.join("user_emb.txt"), &self.user_emb)?;
        write_matrix(&dir.join("item_emb.txt"), &self.item_emb)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let header_path = dir.join("header.txt");
        let header = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let mut n_users = None;
        let mut n_items = None;
        let mut d = None;
        let mut mode = None;
        for (idx, line) in header.lines().enumerate() {
            let bad = |msg: &str| Error::Parse {
                path: header_path.display().to_string(),
                line: idx + 1,
                msg: msg.to_string(),
            };
            let mut parts = line.split_whitespace();
            let (Some(key), Some(value)) = (parts.next(), parts.next()) else {
                continue;
            };
            match key {
                "n_users" => n_users = Some(value.parse::<usize>().map_err(|_| bad("bad n_users"))?),
                "n_items" => n_items = Some(value.parse::<usize>().map_err(|_| bad("bad n_items"))?),
                "d" => d = Some(value.parse::<usize>().map_err(|_| bad("bad d"))?),
                "score_mode" => mode = Some(value.parse::<ScoreMode>()?),
                _ => return Err(bad("unknown header key")),
            }
        }
        let missing = |k: &str| Error::Config(format!("{}: missing `{k}`", header_path.display()));
        let (n_users, n_items, d) = (
            n_users.ok_or_else(|| missing("n_users"))?,
            n_items.ok_or_else(|| missing("n_items"))?,
            d.ok_or_else(|| missing("d"))?,
        );
        let user_emb = read_matrix(&dir.join("user_emb.txt"))?;
        let item_emb = read_matrix(&dir.join("item_emb.txt"))?;
        if user_emb.rows() != n_users || item_emb.rows() != n_items || user_emb.cols() != d {
            return Err(Error::Dimension("checkpoint header disagrees with matrices".into()));
        }
        Self::from_parts(user_emb, item_emb, mode.unwrap_or_default())
    }
}

/// Score of one (user vector, item vector) pair.
#[inline]
pub fn pair_score<T: Scalar>(mode: ScoreMode, w: &[T], h: &[T]) -> T {
    let d = dot(w, h);
    match mode {
        ScoreMode::Dot => d,
        ScoreMode::Cosine => {
            let (wn, hn) = (norm(w), norm(h));
            let eps = T::of(ZERO_NORM);
            if wn < eps || hn < eps {
                T::zero()
            } else {
                d / (wn * hn)
            }
        }
    }
}

/// Adds `coef · ∂s/∂w` and `coef · ∂s/∂h` for `s = pair_score(mode, w, h)`.
///
/// Either output may be `None` to skip it. Cosine gradients are zero when a
/// norm is below [`ZERO_NORM`].
#[inline]
pub fn pair_score_backward<T: Scalar>(
    mode: ScoreMode,
    w: &[T],
    h: &[T],
    coef: T,
    grad_w: Option<&mut [T]>,
    grad_h: Option<&mut [T]>,
) {
    match mode {
        ScoreMode::Dot => {
            if let Some(gw) = grad_w {
                crate::linalg::axpy(gw, coef, h);
            }
            if let Some(gh) = grad_h {
                crate::linalg::axpy(gh, coef, w);
            }
        }
        ScoreMode::Cosine => {
            let (wn, hn) = (norm(w), norm(h));
            let eps = T::of(ZERO_NORM);
            if wn < eps || hn < eps {
                return;
            }
            let inv = T::one() / (wn * hn);
            let s = dot(w, h) * inv;
            // ∂s/∂w = h/(|w||h|) − s·w/|w|²
            if let Some(gw) = grad_w {
                let a = coef * inv;
                let b = coef * s / (wn * wn);
                for ((g, &hk), &wk) in gw.iter_mut().zip(h).zip(w) {
                    *g += a * hk - b * wk;
                }
            }
            if let Some(gh) = grad_h {
                let a = coef * inv;
                let b = coef * s / (hn * hn);
                for ((g, &wk), &hk) in gh.iter_mut().zip(w).zip(h) {
                    *g += a * wk - b * hk;
                }
            }
        }
    }
}

/// Text matrix: a `rows cols` line, then one whitespace-separated row per
/// line. Values use Rust's shortest round-trip formatting.
pub fn write_matrix<T: Scalar>(path: &Path, m: &DenseMatrix<T>) -> Result<()> {
    let mut s = String::with_capacity(m.rows() * m.cols() * 12 + 16);
    s.push_str(&format!("{} {}\n", m.rows(), m.cols()));
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    write_text(path, &s)
}

pub fn read_matrix<T: Scalar>(path: &Path) -> Result<DenseMatrix<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, head) = lines.next().ok_or_else(|| bad(1, "empty matrix file".into()))?;
    let dims: Vec<usize> = head
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad(1, "expected `rows cols`".into()))?;
    if dims.len() != 2 {
        return Err(bad(1, "expected `rows cols`".into()));
    }
    let (rows, cols) = (dims[0], dims[1]);
    let mut data = Vec::with_capacity(rows * cols);
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| bad(idx + 1, format!("`{tok}` is not a number")))?;
            data.push(T::of(v));
        }
        if data.len() - before != cols {
            return Err(bad(idx + 1, format!("expected {cols} values")));
        }
    }
    DenseMatrix::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(w: &[f64], h: &[f64], mode: ScoreMode) -> MfModel<f64> {
        MfModel::from_parts(
            DenseMatrix::from_vec(1, w.len(), w.to_vec()).unwrap(),
            DenseMatrix::from_vec(1, h.len(), h.to_vec()).unwrap(),
            mode,
        )
        .unwrap()
    }

    #[test]
    fn score_examples() {
        for mode in [ScoreMode::Dot, ScoreMode::Cosine] {
            assert_eq!(model(&[1.0, 0.0], &[1.0, 0.0], mode).score(0, 0), 1.0);
            assert_eq!(model(&[1.0, 0.0], &[0.0, 1.0], mode).score(0, 0), 0.0);
        }
        assert_eq!(model(&[3.0, 4.0], &[3.0, 4.0], ScoreMode::Dot).score(0, 0), 25.0);
        let c = model(&[3.0, 4.0], &[3.0, 4.0], ScoreMode::Cosine).score(0, 0);
        assert!((c - 1.0).abs() < 1e-15);
        assert_eq!(model(&[0.0, 0.0], &[3.0, 4.0], ScoreMode::Cosine).score(0, 0), 0.0);
    }

    #[test]
    fn zero_sigma_init() {
        let m = MfModel::<f64>::init(3, 4, 2, InitScheme::Normal { sigma: 0.0 }, ScoreMode::Dot, 1)
            .unwrap();
        assert!(m.user_emb.as_slice().iter().all(|&x| x == 0.0));
        assert!(m.item_emb.as_slice().iter().all(|&x| x == 0.0));
        assert!(MfModel::<f64>::init(3, 4, 0, InitScheme::Xavier, ScoreMode::Dot, 1).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = MfModel::<f64>::init(5, 6, 3, InitScheme::Xavier, ScoreMode::Dot, 9).unwrap();
        let b = MfModel::<f64>::init(5, 6, 3, InitScheme::Xavier, ScoreMode::Dot, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn xavier_variance() {
        let d = 64;
        let m = MfModel::<f64>::init(800, 800, d, InitScheme::Xavier, ScoreMode::Dot, 5).unwrap();
        let xs = m.user_emb.as_slice();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = 2.0 / (d + d) as f64;
        assert!((var / target - 1.0).abs() < 0.2, "{var} vs {target}");
    }

    #[test]
    fn score_all_matches_naive_loop() {
        for mode in [ScoreMode::Dot, ScoreMode::Cosine] {
            let m = MfModel::<f64>::init(1000, 2000, 8, InitScheme::Xavier, mode, 3).unwrap();
            for u in [0, 17, 999] {
                let all = m.score_all_items(u);
                for (i, &s) in all.iter().enumerate() {
                    let w = m.user_emb.row(u);
                    let h = m.item_emb.row(i);
                    let mut naive = 0.0;
                    for k in 0..8 {
                        naive += w[k] * h[k];
                    }
                    if mode == ScoreMode::Cosine {
                        let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let hn = h.iter().map(|x| x * x).sum::<f64>().sqrt();
                        naive /= wn * hn;
                    }
                    assert!((s - naive).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn zero_user_scores_zero() {
        let mut m = MfModel::<f64>::init(2, 5, 3, InitScheme::Xavier, ScoreMode::Dot, 3).unwrap();
        m.user_emb.row_mut(1).fill(0.0);
        assert!(m.score_all_items(1).iter().all(|&s| s == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = MfModel::<f64>::init(4, 7, 3, InitScheme::Xavier, ScoreMode::Cosine, 2).unwrap();
        m.save(dir.path()).unwrap();
        let back = MfModel::<f64>::load(dir.path()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn cosine_backward_matches_finite_difference() {
        let w: [f64; 3] = [0.3, -1.2, 0.5];
        let h: [f64; 3] = [1.1, 0.4, -0.7];
        let mut gw = [0.0; 3];
        let mut gh = [0.0; 3];
        pair_score_backward(ScoreMode::Cosine, &w, &h, 1.0, Some(&mut gw), Some(&mut gh));
        let step = 1e-6;
        for k in 0..3 {
            let mut wp = w;
            let mut wm = w;
            wp[k] += step;
            wm[k] -= step;
            let fd = (pair_score(ScoreMode::Cosine, &wp, &h) - pair_score(ScoreMode::Cosine, &wm, &h))
                / (2.0 * step);
            assert!((fd - gw[k]).abs() < 1e-8);
            let mut hp = h;
            let mut hm = h;
            hp[k] += step;
            hm[k] -= step;
            let fd = (pair_score(ScoreMode::Cosine, &w, &hp) - pair_score(ScoreMode::Cosine, &w, &hm))
                / (2.0 * step);
            assert!((fd - gh[k]).abs() < 1e-8);
        }
    }
}
