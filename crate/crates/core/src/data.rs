//! Implicit-feedback interaction data: loading, splitting, popularity.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, LogNormal, Normal};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

/// Observed (user, item) positives in both orientations.
///
/// `pos_by_user[u]` is the sorted item list of user `u` and `pos_by_item[i]`
/// the sorted user list of item `i`; both encode the same pair set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionDataset {
    n_users: usize,
    n_items: usize,
    pos_by_user: Vec<Vec<usize>>,
    pos_by_item: Vec<Vec<usize>>,
    n_interactions: usize,
}

impl InteractionDataset {
    /// Builds a dataset from raw pairs. Duplicate pairs collapse to one.
    pub fn from_pairs(
        n_users: usize,
        n_items: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut pos_by_user = vec![Vec::new(); n_users];
        for (u, i) in pairs {
            if u >= n_users || i >= n_items {
                return Err(Error::OutOfRange(format!(
                    "pair ({u}, {i}) outside {n_users} users x {n_items} items"
                )));
            }
            pos_by_user[u].push(i);
        }
        for items in &mut pos_by_user {
            items.sort_unstable();
            items.dedup();
        }
        Ok(Self::from_user_lists(n_items, pos_by_user))
    }

    // lists must be sorted, deduplicated and in range
    fn from_user_lists(n_items: usize, pos_by_user: Vec<Vec<usize>>) -> Self {
        let mut pos_by_item = vec![Vec::new(); n_items];
        let mut n_interactions = 0;
        for (u, items) in pos_by_user.iter().enumerate() {
            n_interactions += items.len();
            for &i in items {
                pos_by_item[i].push(u);
            }
        }
        Self {
            n_users: pos_by_user.len(),
            n_items,
            pos_by_user,
            pos_by_item,
            n_interactions,
        }
    }

    #[inline]
    pub fn n_users(&self) -> usize {
        self.n_users
    }

    #[inline]
    pub fn n_items(&self) -> usize {
        self.n_items
    }

    #[inline]
    pub fn n_interactions(&self) -> usize {
        self.n_interactions
    }

    /// Sorted positives `I_u⁺` of user `u`.
    #[inline]
    pub fn items_of(&self, u: usize) -> &[usize] {
        &self.pos_by_user[u]
    }

    /// Sorted users `U_i⁺` of item `i`.
    #[inline]
    pub fn users_of(&self, i: usize) -> &[usize] {
        &self.pos_by_item[i]
    }

    pub fn pos_by_user(&self) -> &[Vec<usize>] {
        &self.pos_by_user
    }

    pub fn pos_by_item(&self) -> &[Vec<usize>] {
        &self.pos_by_item
    }

    #[inline]
    pub fn contains(&self, u: usize, i: usize) -> bool {
        self.pos_by_user
            .get(u)
            .is_some_and(|items| items.binary_search(&i).is_ok())
    }

    /// All pairs in user-major order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pos_by_user
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
    }

    /// Copy with the index space widened to at least `n_users` x `n_items`.
    pub fn with_dims(&self, n_users: usize, n_items: usize) -> Result<Self> {
        if n_users < self.n_users || n_items < self.n_items {
            return Err(Error::Dimension(format!(
                "cannot shrink {}x{} to {n_users}x{n_items}",
                self.n_users, self.n_items
            )));
        }
        let mut lists = self.pos_by_user.clone();
        lists.resize(n_users, Vec::new());
        Ok(Self::from_user_lists(n_items, lists))
    }

    pub fn stats(&self) -> DatasetStats {
        let active = self.pos_by_user.iter().filter(|l| !l.is_empty()).count();
        let cells = self.n_users as f64 * self.n_items as f64;
        DatasetStats {
            n_users: self.n_users,
            n_items: self.n_items,
            n_interactions: self.n_interactions,
            active_users: active,
            density: if cells > 0.0 {
                self.n_interactions as f64 / cells
            } else {
                0.0
            },
        }
    }

    /// Renders the dataset in pairs format with a `#dims` header.
    pub fn to_pairs_string(&self) -> String {
        let mut s = format!("#dims {} {}\n", self.n_users, self.n_items);
        for (u, i) in self.pairs() {
            s.push_str(&format!("{u} {i}\n"));
        }
        s
    }

    pub fn write_pairs(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_pairs_string()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    pub active_users: usize,
    pub density: f64,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "users={} items={} interactions={} active_users={} density={:.6}",
            self.n_users, self.n_items, self.n_interactions, self.active_users, self.density
        )
    }
}

/// On-disk layout of an interaction file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    /// One line per user: `u i1 i2 ...`.
    Adjacency,
    /// One `u i` pair per line.
    Pairs,
}

impl FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adjacency" => Ok(Format::Adjacency),
            "pairs" => Ok(Format::Pairs),
            other => Err(Error::Config(format!(
                "unknown format `{other}` (expected adjacency or pairs)"
            ))),
        }
    }
}

/// Reads an interaction file.
///
/// Blank lines and lines starting with `#` are ignored, except an optional
/// leading `#dims <n_users> <n_items>` header which fixes the index space.
/// Without it the dimensions are one past the largest observed index.
pub fn load_interactions(path: impl AsRef<Path>, format: Format) -> Result<InteractionDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text, format, &path.display().to_string())
}

pub fn parse_interactions(text: &str, format: Format, source: &str) -> Result<InteractionDataset> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: source.to_string(),
        line,
        msg,
    };
    let mut dims: Option<(usize, usize)> = None;
    let mut pairs = Vec::new();
    let mut max_u = None::<usize>;
    let mut max_i = None::<usize>;
    let mut seen_record = false;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#dims") {
            if seen_record || dims.is_some() {
                return Err(parse_err(lineno, "#dims header must come first".into()));
            }
            let nums = parse_ints(rest).map_err(|m| parse_err(lineno, m))?;
            if nums.len() != 2 {
                return Err(parse_err(lineno, "#dims expects two integers".into()));
            }
            dims = Some((nums[0], nums[1]));
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        seen_record = true;
        let nums = parse_ints(line).map_err(|m| parse_err(lineno, m))?;
        match format {
            Format::Pairs => {
                if nums.len() != 2 {
                    return Err(parse_err(
                        lineno,
                        format!("expected `user item`, found {} fields", nums.len()),
                    ));
                }
                pairs.push((nums[0], nums[1]));
                max_u = max_u.max(Some(nums[0]));
                max_i = max_i.max(Some(nums[1]));
            }
            Format::Adjacency => {
                let u = nums[0];
                max_u = max_u.max(Some(u));
                for &i in &nums[1..] {
                    pairs.push((u, i));
                    max_i = max_i.max(Some(i));
                }
            }
        }
    }

    if pairs.is_empty() {
        return Err(Error::EmptyInput(source.to_string()));
    }
    let observed = (
        max_u.map_or(0, |m| m + 1),
        max_i.map_or(0, |m| m + 1),
    );
    let (n_users, n_items) = match dims {
        Some((nu, ni)) => {
            if nu < observed.0 || ni < observed.1 {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: 1,
                    msg: format!(
                        "#dims {nu} {ni} smaller than observed {} {}",
                        observed.0, observed.1
                    ),
                });
            }
            (nu, ni)
        }
        None => observed,
    };
    InteractionDataset::from_pairs(n_users, n_items, pairs)
}

fn parse_ints(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split_whitespace()
        .map(|tok| {
            tok.parse::<usize>()
                .map_err(|_| format!("`{tok}` is not a non-negative integer"))
        })
        .collect()
}

/// Raw-id to dense-index mapping produced by [`densify`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IdMap {
    /// `raw[index]` is the original id of dense index `index`.
    pub raw: Vec<usize>,
}

impl IdMap {
    /// `raw_id index` lines.
    pub fn to_text(&self) -> String {
        self.raw
            .iter()
            .enumerate()
            .map(|(idx, raw)| format!("{raw} {idx}\n"))
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Drops users and items without interactions and renumbers the rest
/// contiguously, preserving order.
pub fn densify(ds: &InteractionDataset) -> (InteractionDataset, IdMap, IdMap) {
    let users: Vec<usize> = (0..ds.n_users())
        .filter(|&u| !ds.items_of(u).is_empty())
        .collect();
    let items: Vec<usize> = (0..ds.n_items())
        .filter(|&i| !ds.users_of(i).is_empty())
        .collect();
    let mut item_index = vec![usize::MAX; ds.n_items()];
    for (new, &old) in items.iter().enumerate() {
        item_index[old] = new;
    }
    let lists = users
        .iter()
        .map(|&u| ds.items_of(u).iter().map(|&i| item_index[i]).collect())
        .collect();
    (
        InteractionDataset::from_user_lists(items.len(), lists),
        IdMap { raw: users },
        IdMap { raw: items },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitStrategy {
    LeaveRatioOutPerUser,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub strategy: SplitStrategy,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(test_fraction: f64, seed: u64) -> Result<Self> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must lie in (0, 1), got {test_fraction}"
            )));
        }
        Ok(Self {
            strategy: SplitStrategy::LeaveRatioOutPerUser,
            test_fraction,
            seed,
        })
    }
}

/// Number of held-out interactions for a user with `n` positives.
pub fn held_out_count(n: usize, fraction: f64) -> usize {
    if n < 2 {
        return 0;
    }
    // the epsilon keeps exact products such as 0.2 * 5 from rounding up
    let k = (fraction * n as f64 - 1e-9).ceil().max(0.0) as usize;
    k.min(n - 1)
}

/// Per-user random hold-out. Both halves keep the full index space.
pub fn split(ds: &InteractionDataset, spec: &SplitSpec) -> (InteractionDataset, InteractionDataset) {
    split_stream(ds, spec, Stream::Data)
}

/// [`split`] drawing from another named sub-stream of `spec.seed`, e.g. to
/// carve a validation set out of a training split.
pub fn split_stream(
    ds: &InteractionDataset,
    spec: &SplitSpec,
    stream: Stream,
) -> (InteractionDataset, InteractionDataset) {
    let mut rng = seed::stream(spec.seed, stream);
    let mut train = Vec::with_capacity(ds.n_users());
    let mut test = Vec::with_capacity(ds.n_users());
    for u in 0..ds.n_users() {
        let mut items = ds.items_of(u).to_vec();
        let k = held_out_count(items.len(), spec.test_fraction);
        items.shuffle(&mut rng);
        let mut held: Vec<usize> = items[..k].to_vec();
        let mut kept: Vec<usize> = items[k..].to_vec();
        held.sort_unstable();
        kept.sort_unstable();
        test.push(held);
        train.push(kept);
    }
    (
        InteractionDataset::from_user_lists(ds.n_items(), train),
        InteractionDataset::from_user_lists(ds.n_items(), test),
    )
}

/// Marginal item distribution `p_i ∝ |U_i⁺|`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityTable {
    pub counts: Vec<usize>,
    pub probs: Vec<f64>,
}

pub fn popularity(ds: &InteractionDataset) -> Result<PopularityTable> {
    if ds.n_interactions() == 0 {
        return Err(Error::EmptyDataset("popularity needs at least one interaction"));
    }
    let counts: Vec<usize> = ds.pos_by_item().iter().map(Vec::len).collect();
    let total = ds.n_interactions() as f64;
    let probs = counts.iter().map(|&c| c as f64 / total).collect();
    Ok(PopularityTable { counts, probs })
}

/// Generator for latent-factor interaction data with popularity skew.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    /// Mean number of interactions per user.
    pub mean_activity: f64,
    pub latent_dim: usize,
    /// Strength of the user-item affinity relative to popularity.
    pub affinity: f64,
    /// Zipf-like exponent of the item popularity prior.
    pub popularity_skew: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Roughly the shape of MovieLens-100k: 943 users, 1682 items, ~100k
    /// interactions.
    pub fn movielens_100k_like(seed: u64) -> Self {
        Self {
            n_users: 943,
            n_items: 1682,
            mean_activity: 106.0,
            latent_dim: 8,
            affinity: 2.5,
            popularity_skew: 0.8,
            seed,
        }
    }
}

/// Draws each user's item set without replacement with probability
/// proportional to `pop_i · exp(affinity · <a_u, b_i>)`.
pub fn synthetic(spec: &SyntheticSpec) -> Result<InteractionDataset> {
    if spec.n_users == 0 || spec.n_items < 2 || spec.latent_dim == 0 {
        return Err(Error::Config("synthetic data needs users, ≥2 items, latent_dim ≥ 1".into()));
    }
    let mut rng = seed::stream(spec.seed, Stream::Data);
    let scale = 1.0 / (spec.latent_dim as f64).sqrt();
    let normal = Normal::new(0.0, scale).expect("valid normal");
    let users: Vec<Vec<f64>> = (0..spec.n_users)
        .map(|_| (0..spec.latent_dim).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let items: Vec<Vec<f64>> = (0..spec.n_items)
        .map(|_| (0..spec.latent_dim).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let mut rank: Vec<usize> = (0..spec.n_items).collect();
    rank.shuffle(&mut rng);
    let log_pop: Vec<f64> = rank
        .iter()
        .map(|&r| -spec.popularity_skew * ((r + 1) as f64).ln())
        .collect();
    let sigma = 0.8f64;
    let activity = LogNormal::new(spec.mean_activity.ln() - sigma * sigma / 2.0, sigma)
        .map_err(|e| Error::Config(e.to_string()))?;

    let mut lists = Vec::with_capacity(spec.n_users);
    for a in &users {
        let k = (activity.sample(&mut rng).round() as usize).clamp(2, spec.n_items / 2);
        // Gumbel top-k is sampling without replacement from the softmax weights.
        let mut keys: Vec<(f64, usize)> = items
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let aff: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let logit = log_pop[i] + spec.affinity * aff / scale;
                let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                (logit - (-u.ln()).ln(), i)
            })
            .collect();
        keys.select_nth_unstable_by(k - 1, |x, y| y.0.total_cmp(&x.0));
        let mut chosen: Vec<usize> = keys[..k].iter().map(|&(_, i)| i).collect();
        chosen.sort_unstable();
        lists.push(chosen);
    }
    Ok(InteractionDataset::from_user_lists(spec.n_items, lists))
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_readback() {
        let ds = parse_interactions("0 1\n0 2\n1 0\n", Format::Pairs, "t").unwrap();
        assert_eq!(ds.n_users(), 2);
        assert_eq!(ds.n_items(), 3);
        assert_eq!(ds.pos_by_user(), &[vec![1, 2], vec![0]]);
    }

    #[test]
    fn adjacency_readback() {
        let ds = parse_interactions("0 5 7\n1 5\n", Format::Adjacency, "t").unwrap();
        assert_eq!(ds.n_interactions(), 3);
        assert_eq!(ds.users_of(5), &[0, 1]);
        assert_eq!(ds.n_items(), 8);
    }

    #[test]
    fn header_overrides_dims() {
        let ds = parse_interactions("#dims 5 9\n0 1\n", Format::Pairs, "t").unwrap();
        assert_eq!((ds.n_users(), ds.n_items()), (5, 9));
        assert!(parse_interactions("#dims 1 1\n0 1\n", Format::Pairs, "t").is_err());
    }

    #[test]
    fn malformed_line_reports_number() {
        let err = parse_interactions("0 1\n0 x\n", Format::Pairs, "f.txt").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e:?}"),
        }
        let err = parse_interactions("0 1 2\n", Format::Pairs, "f.txt").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_interactions("-1 2\n", Format::Adjacency, "f.txt").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn empty_file_is_error() {
        assert!(matches!(
            parse_interactions("\n# nothing\n", Format::Pairs, "e"),
            Err(Error::EmptyInput(_))
        ));
        // a user line without items carries no interaction
        assert!(parse_interactions("3\n", Format::Adjacency, "e").is_err());
    }

    #[test]
    fn duplicates_collapse() {
        let ds = InteractionDataset::from_pairs(1, 2, [(0, 1), (0, 1)]).unwrap();
        assert_eq!(ds.n_interactions(), 1);
    }

    #[test]
    fn split_counts() {
        let ds = InteractionDataset::from_pairs(2, 6, [(0, 1), (0, 2), (0, 3), (0, 4), (0, 5), (1, 0)])
            .unwrap();
        let spec = SplitSpec::new(0.2, 11).unwrap();
        let (train, test) = split(&ds, &spec);
        assert_eq!(test.items_of(0).len(), 1);
        assert_eq!(train.items_of(0).len(), 4);
        assert!(test.items_of(1).is_empty());
        assert_eq!(train.items_of(1), &[0]);
        assert_eq!(split(&ds, &spec), (train, test));
    }

    #[test]
    fn held_out_caps() {
        assert_eq!(held_out_count(5, 0.2), 1);
        assert_eq!(held_out_count(10, 0.1), 1);
        assert_eq!(held_out_count(11, 0.1), 2);
        assert_eq!(held_out_count(2, 0.9), 1);
        assert_eq!(held_out_count(1, 0.9), 0);
    }

    #[test]
    fn popularity_counts() {
        let ds = InteractionDataset::from_pairs(2, 3, [(0, 1), (1, 1), (0, 2)]).unwrap();
        let p = popularity(&ds).unwrap();
        assert_eq!(p.counts, vec![0, 2, 1]);
        assert!((p.probs[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.probs[2] - 1.0 / 3.0).abs() < 1e-15);
        let empty = InteractionDataset::from_pairs(1, 1, []).unwrap();
        assert!(popularity(&empty).is_err());
    }

    #[test]
    fn uniform_popularity() {
        let pairs = (0..4).flat_map(|u| (0..5).map(move |i| (u, i)));
        let ds = InteractionDataset::from_pairs(4, 5, pairs).unwrap();
        let p = popularity(&ds).unwrap();
        assert!(p.probs.iter().all(|&q| (q - 0.2).abs() < 1e-15));
    }

    #[test]
    fn densify_renumbers() {
        let ds = InteractionDataset::from_pairs(4, 10, [(1, 9), (3, 2), (3, 9)]).unwrap();
        let (d, users, items) = densify(&ds);
        assert_eq!((d.n_users(), d.n_items()), (2, 2));
        assert_eq!(users.raw, vec![1, 3]);
        assert_eq!(items.raw, vec![2, 9]);
        assert_eq!(d.pos_by_user(), &[vec![1], vec![0, 1]]);
        assert_eq!(items.to_text(), "2 0\n9 1\n");
    }

    #[test]
    fn synthetic_shape() {
        let ds = synthetic(&SyntheticSpec::movielens_100k_like(3)).unwrap();
        assert_eq!(ds.n_users(), 943);
        assert_eq!(ds.n_items(), 1682);
        let per_user = ds.n_interactions() as f64 / 943.0;
        assert!(per_user > 70.0 && per_user < 150.0, "{per_user}");
        assert!(ds.pos_by_user().iter().all(|l| l.len() >= 2));
    }
}
