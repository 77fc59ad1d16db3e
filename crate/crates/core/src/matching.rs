//! Target expansion and optimal bipartite assignment between expanded
//! targets and retrieved vocabulary.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::KnowledgeStore;
use crate::retrieval::{cosine_unchecked, RetrievalResult};
use crate::tensor::Matrix;

/// Percentage of padding slots turned into injected vocabulary.
pub const INJECTION_PERCENT: usize = 15;

/// Largest K accepted by [`brute_force_assignment`].
pub const BRUTE_FORCE_MAX: usize = 9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetLabel {
    GroundTruth(String),
    NoObject,
    InjectedNovel(String),
}

impl TargetLabel {
    pub fn term(&self) -> Option<&str> {
        match self {
            TargetLabel::GroundTruth(t) | TargetLabel::InjectedNovel(t) => Some(t),
            TargetLabel::NoObject => None,
        }
    }

    pub fn is_no_object(&self) -> bool {
        matches!(self, TargetLabel::NoObject)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSet {
    pub targets: Vec<TargetLabel>,
    pub n_gt: usize,
    pub n_null: usize,
    pub n_injected: usize,
}

impl TargetSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Number of padding slots that receive injected vocabulary: 15% of
/// `padding`, rounded half up.
pub fn injection_count(padding: usize) -> usize {
    (INJECTION_PERCENT * padding + 50) / 100
}

/// Pads `gt_tags` to `k` targets. Ground truth keeps its order in the first
/// slots, injected vocabulary follows, `NoObject` fills the rest.
pub fn expand_targets<R: Rng + ?Sized>(
    gt_tags: &[String],
    k: usize,
    store: &KnowledgeStore,
    rng: &mut R,
) -> Result<TargetSet> {
    if gt_tags.len() > k {
        return Err(Error::TooManyTags {
            tags: gt_tags.len(),
            slots: k,
        });
    }
    for t in gt_tags {
        if !store.contains(t) {
            return Err(Error::UnknownTerm(t.clone()));
        }
    }
    let padding = k - gt_tags.len();
    let pool: Vec<&str> = store
        .terms()
        .filter(|t| !gt_tags.iter().any(|g| g == t))
        .collect();
    let quota = injection_count(padding).min(pool.len());
    let injected: Vec<&str> = pool.choose_multiple(rng, quota).copied().collect();

    let mut targets: Vec<TargetLabel> = gt_tags
        .iter()
        .map(|t| TargetLabel::GroundTruth(t.clone()))
        .collect();
    targets.extend(
        injected
            .iter()
            .map(|t| TargetLabel::InjectedNovel(t.to_string())),
    );
    targets.resize(k, TargetLabel::NoObject);
    Ok(TargetSet {
        n_gt: gt_tags.len(),
        n_injected: injected.len(),
        n_null: padding - injected.len(),
        targets,
    })
}

/// `C[i][j] = -sim(embed(target_i), embed(retrieved_j))`, zero for
/// `NoObject` rows.
pub fn matching_cost_matrix(
    targets: &TargetSet,
    retrieved: &RetrievalResult,
    store: &KnowledgeStore,
) -> Result<Matrix> {
    let k = targets.len();
    if retrieved.per_region.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "{k} targets vs {} retrieved terms",
            retrieved.per_region.len()
        )));
    }
    let retrieved_emb: Vec<&[f64]> = retrieved
        .per_region
        .iter()
        .map(|s| store.embedding(&s.term))
        .collect::<Result<_>>()?;
    let mut cost = Matrix::zeros(k, k);
    for (i, t) in targets.targets.iter().enumerate() {
        let Some(term) = t.term() else { continue };
        let te = store.embedding(term)?;
        for (j, re) in retrieved_emb.iter().enumerate() {
            cost.set(i, j, -cosine_unchecked(te, re));
        }
    }
    Ok(cost)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `permutation[i]` is the retrieved index matched to target `i`.
    pub permutation: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.permutation.len() != k {
            return Err(Error::InvalidAssignment(format!(
                "length {} for K = {k}",
                self.permutation.len()
            )));
        }
        let mut used = vec![false; k];
        for &j in &self.permutation {
            if j >= k || std::mem::replace(&mut used[j], true) {
                return Err(Error::InvalidAssignment(format!(
                    "{:?} is not a permutation",
                    self.permutation
                )));
            }
        }
        Ok(())
    }
}

fn check_square(cost: &Matrix) -> Result<usize> {
    let (r, c) = cost.shape();
    if r != c {
        return Err(Error::NotSquare { rows: r, cols: c });
    }
    for i in 0..r {
        for j in 0..c {
            if !cost.get(i, j).is_finite() {
                return Err(Error::NonFinite { row: i, col: j });
            }
        }
    }
    Ok(r)
}

fn path_cost(cost: &Matrix, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum()
}

/// Minimum-cost perfect matching (Kuhn–Munkres with potentials, O(K³)).
/// Among optimal matchings the lexicographically smallest permutation is
/// returned.
pub fn hungarian(cost: &Matrix) -> Result<Assignment> {
    let n = check_square(cost)?;
    if n == 0 {
        return Ok(Assignment {
            permutation: vec![],
            total_cost: 0.0,
        });
    }
    let (u, v, mut row_to_col) = solve_potentials(cost, n);

    // An assignment is optimal iff it only uses edges that are tight under
    // the optimal potentials, so the lexicographic minimum can be built
    // greedily over the tight graph.
    let scale = cost.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-11 * (1.0 + scale) * n as f64;
    let tight = |i: usize, j: usize| cost.get(i, j) - u[i] - v[j] <= tol;

    let mut col_to_row = vec![usize::MAX; n];
    for (i, &j) in row_to_col.iter().enumerate() {
        col_to_row[j] = i;
    }
    let mut fixed_row = vec![false; n];
    let mut fixed_col = vec![false; n];
    for i in 0..n {
        for j in 0..n {
            if fixed_col[j] || !tight(i, j) {
                continue;
            }
            if row_to_col[i] == j {
                break;
            }
            // Row `r` currently owns column j; it must move so that
            // column `row_to_col[i]` gets used instead.
            let r = col_to_row[j];
            let freed = row_to_col[i];
            if let Some(path) =
                alternating_path(r, freed, &row_to_col, &col_to_row, &fixed_row, &fixed_col, i, j, &tight, n)
            {
                // path: sequence of (row, new_col)
                for &(row, col) in &path {
                    row_to_col[row] = col;
                    col_to_row[col] = row;
                }
                row_to_col[i] = j;
                col_to_row[j] = i;
                break;
            }
        }
        fixed_row[i] = true;
        fixed_col[row_to_col[i]] = true;
    }
    Ok(Assignment {
        total_cost: path_cost(cost, &row_to_col),
        permutation: row_to_col,
    })
}

/// Searches, over tight edges among unfixed rows/columns (excluding row
/// `skip_row` and column `skip_col`), for a re-assignment that moves row
/// `start` off its column and eventually lands some row on `target_col`.
#[allow(clippy::too_many_arguments)]
fn alternating_path(
    start: usize,
    target_col: usize,
    row_to_col: &[usize],
    col_to_row: &[usize],
    fixed_row: &[bool],
    fixed_col: &[bool],
    skip_row: usize,
    skip_col: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    n: usize,
) -> Option<Vec<(usize, usize)>> {
    // BFS over rows; parent[col] = row that reached it.
    let mut parent_row_of_col = vec![usize::MAX; n];
    let mut visited_row = vec![false; n];
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(start);
    visited_row[start] = true;
    while let Some(row) = queue.pop_front() {
        for col in 0..n {
            if fixed_col[col]
                || col == skip_col
                || col == row_to_col[row]
                || parent_row_of_col[col] != usize::MAX
                || !tight(row, col)
            {
                continue;
            }
            parent_row_of_col[col] = row;
            if col == target_col {
                let mut path = Vec::new();
                let mut c = col;
                loop {
                    let r = parent_row_of_col[c];
                    path.push((r, c));
                    if r == start {
                        return Some(path);
                    }
                    c = row_to_col[r];
                }
            }
            let next = col_to_row[col];
            if next != usize::MAX && next != skip_row && !fixed_row[next] && !visited_row[next] {
                visited_row[next] = true;
                queue.push_back(next);
            }
        }
    }
    None
}

/// Shortest-augmenting-path Hungarian method. Returns row potentials,
/// column potentials and an optimal row → column matching.
fn solve_potentials(cost: &Matrix, n: usize) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    // 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    (u[1..].to_vec(), v[1..].to_vec(), row_to_col)
}

/// Exhaustive minimum over all K! permutations, visited in lexicographic
/// order so the first strict minimum wins ties.
pub fn brute_force_assignment(cost: &Matrix) -> Result<Assignment> {
    let n = check_square(cost)?;
    if n > BRUTE_FORCE_MAX {
        return Err(Error::TooLarge(n));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = Assignment {
        total_cost: path_cost(cost, &perm),
        permutation: perm.clone(),
    };
    while next_permutation(&mut perm) {
        let c = path_cost(cost, &perm);
        if c < best.total_cost {
            best = Assignment {
                permutation: perm.clone(),
                total_cost: c,
            };
        }
    }
    Ok(best)
}

fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Retrieved index assigned to each NoObject-free target, for reporting.
pub fn matched_terms<'a>(
    targets: &'a TargetSet,
    assignment: &Assignment,
    retrieved: &'a RetrievalResult,
) -> Vec<(&'a TargetLabel, &'a str)> {
    targets
        .targets
        .iter()
        .zip(&assignment.permutation)
        .map(|(t, &j)| (t, retrieved.per_region[j].term.as_str()))
        .collect()
}
