//! Weighted one-dimensional k-means for a single weight row.
//!
//! [`kmeans_lloyd`] is the production path: weighted k-means++ seeding,
//! Lloyd sweeps, best of several restarts. [`kmeans_exact_dp`] finds the
//! global optimum by dynamic programming over contiguous runs of the
//! sorted values and exists to check the heuristic.
//!
//! Both floor the weights first (see [`floor_weights`]) so that elements
//! with zero sensitivity still get a centroid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Lloyd stops after this many sweeps even if labels still move.
pub const MAX_SWEEPS: usize = 100;
/// Largest row length accepted by [`kmeans_exact_dp`].
pub const DP_LIMIT: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub labels: Vec<u32>,
    /// Strictly ascending, one entry per non-empty cluster.
    pub centroids: Vec<f64>,
    pub objective: f64,
}

impl ClusterResult {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KmeansConfig {
    pub seed: u64,
    pub restarts: usize,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        KmeansConfig { seed: 0, restarts: 3 }
    }
}

/// Clamps weights below at `1e-12 * max`, or replaces them with ones when
/// every weight is zero.
pub fn floor_weights(weights: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidArgument(format!("weight {bad} is not a finite nonnegative number")));
    }
    let max = weights.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(vec![1.0; weights.len()]);
    }
    let floor = 1e-12 * max;
    Ok(weights.iter().map(|&w| w.max(floor)).collect())
}

fn validate(values: &[f64], weights: &[f64], k: usize) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("cannot cluster an empty row".into()));
    }
    if k < 1 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if values.len() != weights.len() {
        return Err(shape_err(format!("{} values but {} weights", values.len(), weights.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("clustered value".into()));
    }
    floor_weights(weights)
}

fn sorted_distinct(values: &[f64]) -> Vec<f64> {
    let mut d = values.to_vec();
    d.sort_by(f64::total_cmp);
    d.dedup();
    d
}

#[inline]
fn nearest(centroids: &[f64], v: f64) -> usize {
    let p = centroids.partition_point(|&c| c < v);
    if p == 0 {
        return 0;
    }
    if p == centroids.len() {
        return p - 1;
    }
    if centroids[p] - v < v - centroids[p - 1] {
        p
    } else {
        p - 1
    }
}

fn objective_of(values: &[f64], w: &[f64], labels: &[u32], centroids: &[f64]) -> f64 {
    values
        .iter()
        .zip(w)
        .zip(labels)
        .map(|((&v, &wt), &l)| {
            let d = v - centroids[l as usize];
            wt * d * d
        })
        .sum()
}

/// Drops empty clusters, recomputes each centroid as the weighted mean of
/// its members, and merges clusters whose centroids coincide.
fn finalize(values: &[f64], w: &[f64], mut labels: Vec<u32>, k: usize) -> ClusterResult {
    loop {
        let mut sum_w = vec![0.0; k];
        let mut sum_wv = vec![0.0; k];
        let mut lo = vec![f64::INFINITY; k];
        let mut hi = vec![f64::NEG_INFINITY; k];
        for ((&v, &wt), &l) in values.iter().zip(w).zip(&labels) {
            let l = l as usize;
            sum_w[l] += wt;
            sum_wv[l] += wt * v;
            lo[l] = lo[l].min(v);
            hi[l] = hi[l].max(v);
        }
        let mut order: Vec<(f64, usize)> = (0..k)
            .filter(|&c| sum_w[c] > 0.0)
            .map(|c| ((sum_wv[c] / sum_w[c]).clamp(lo[c], hi[c]), c))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let mut remap = vec![u32::MAX; k];
        let mut centroids: Vec<f64> = Vec::with_capacity(order.len());
        let mut merged = false;
        for &(c, old) in &order {
            if centroids.last() == Some(&c) {
                merged = true;
            } else {
                centroids.push(c);
            }
            remap[old] = (centroids.len() - 1) as u32;
        }
        for l in labels.iter_mut() {
            *l = remap[*l as usize];
        }
        if merged {
            // merged clusters need their joint mean
            continue;
        }
        let objective = objective_of(values, w, &labels, &centroids);
        return ClusterResult { labels, centroids, objective };
    }
}

fn exact_when_few_distinct(values: &[f64], w: &[f64], distinct: &[f64]) -> ClusterResult {
    let labels = values
        .iter()
        .map(|v| distinct.binary_search_by(|d| d.total_cmp(v)).unwrap() as u32)
        .collect();
    finalize(values, w, labels, distinct.len())
}

fn sample_index(rng: &mut ChaCha8Rng, mass: &[f64]) -> Option<usize> {
    let total: f64 = mass.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = None;
    for (j, &p) in mass.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = Some(j);
            if target < acc {
                return Some(j);
            }
        }
    }
    last_positive
}

/// Greedy k-means++: each step draws `2 + ln k` candidates from the
/// weighted D² distribution and keeps the one that lowers the potential most.
fn seed_plus_plus(values: &[f64], w: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let trials = 2 + (k as f64).ln().floor() as usize;
    let first = sample_index(rng, w).expect("floored weights are positive");
    let mut centroids = vec![values[first]];
    let mut d2: Vec<f64> = values.iter().map(|&v| (v - values[first]).powi(2)).collect();
    while centroids.len() < k {
        let mass: Vec<f64> = w.iter().zip(&d2).map(|(a, b)| a * b).collect();
        let mut best: Option<(f64, f64)> = None;
        for _ in 0..trials {
            let Some(j) = sample_index(rng, &mass) else { break };
            let c = values[j];
            let pot: f64 = values.iter().zip(w).zip(&d2).map(|((&v, &wt), &d)| wt * d.min((v - c).powi(2))).sum();
            if best.is_none_or(|(p, _)| pot < p) {
                best = Some((pot, c));
            }
        }
        let Some((_, c)) = best else { break };
        centroids.push(c);
        for (d, &v) in d2.iter_mut().zip(values) {
            *d = d.min((v - c).powi(2));
        }
    }
    centroids.sort_by(f64::total_cmp);
    centroids
}

fn assign(values: &[f64], centroids: &[f64], labels: &mut [u32]) -> bool {
    let mut changed = false;
    for (l, &v) in labels.iter_mut().zip(values) {
        let n = nearest(centroids, v) as u32;
        if *l != n {
            *l = n;
            changed = true;
        }
    }
    changed
}

/// Moves centroids to weighted means; an empty cluster is reseeded at the
/// point with the largest weighted squared residual. Returns whether any
/// reseed happened (centroids are re-sorted in that case).
fn update(values: &[f64], w: &[f64], labels: &[u32], centroids: &mut [f64]) -> bool {
    let k = centroids.len();
    let mut sum_w = vec![0.0; k];
    let mut sum_wv = vec![0.0; k];
    for ((&v, &wt), &l) in values.iter().zip(w).zip(labels) {
        sum_w[l as usize] += wt;
        sum_wv[l as usize] += wt * v;
    }
    let mut residual: Option<Vec<f64>> = None;
    let mut reseeded = false;
    for c in 0..k {
        if sum_w[c] > 0.0 {
            centroids[c] = sum_wv[c] / sum_w[c];
            continue;
        }
        let res = residual.get_or_insert_with(|| {
            values
                .iter()
                .zip(w)
                .zip(labels)
                .map(|((&v, &wt), &l)| wt * (v - centroids[l as usize]).powi(2))
                .collect()
        });
        let mut best = 0;
        for j in 1..res.len() {
            if res[j] > res[best] {
                best = j;
            }
        }
        let v = values[best];
        centroids[c] = v;
        for (r, (&x, &wt)) in res.iter_mut().zip(values.iter().zip(w)) {
            *r = r.min(wt * (x - v).powi(2));
        }
        reseeded = true;
    }
    if reseeded {
        centroids.sort_by(f64::total_cmp);
    }
    reseeded
}

/// One seeded Lloyd run. Also returns the objective after every
/// assignment step, which never increases.
pub fn lloyd_run(values: &[f64], weights: &[f64], k: usize, seed: u64) -> Result<(ClusterResult, Vec<f64>)> {
    let w = validate(values, weights, k)?;
    let distinct = sorted_distinct(values);
    if k >= distinct.len() {
        let r = exact_when_few_distinct(values, &w, &distinct);
        let obj = r.objective;
        return Ok((r, vec![obj]));
    }
    Ok(lloyd_floored(values, &w, k, seed))
}

/// Hartigan single-point moves: relocate a point when doing so lowers the
/// objective once both centroids are updated. Returns whether any point moved.
fn hartigan_pass(values: &[f64], w: &[f64], labels: &mut [u32], centroids: &mut [f64]) -> bool {
    let k = centroids.len();
    let mut mass = vec![0.0; k];
    let mut sum = vec![0.0; k];
    for ((&v, &wt), &l) in values.iter().zip(w).zip(labels.iter()) {
        mass[l as usize] += wt;
        sum[l as usize] += wt * v;
    }
    let mut moved = false;
    for j in 0..values.len() {
        let (v, wt) = (values[j], w[j]);
        let a = labels[j] as usize;
        let rest = mass[a] - wt;
        if rest <= 1e-12 * mass[a] {
            continue;
        }
        let mean_a = sum[a] / mass[a];
        let leave = mass[a] * wt / rest * (v - mean_a).powi(2);
        let mut best: Option<(f64, usize)> = None;
        for b in (0..k).filter(|&b| b != a && mass[b] > 0.0) {
            let join = mass[b] * wt / (mass[b] + wt) * (v - sum[b] / mass[b]).powi(2);
            if best.is_none_or(|(c, _)| join < c) {
                best = Some((join, b));
            }
        }
        if let Some((join, b)) = best {
            if join < leave * (1.0 - 1e-10) {
                mass[a] -= wt;
                sum[a] -= wt * v;
                mass[b] += wt;
                sum[b] += wt * v;
                labels[j] = b as u32;
                moved = true;
            }
        }
    }
    if moved {
        // Fresh sums; the running ones drift after many moves.
        update(values, w, labels, centroids);
        // Means can cross after moves; `nearest` needs them sorted.
        if centroids.windows(2).any(|p| p[0] > p[1]) {
            let mut idx: Vec<usize> = (0..k).collect();
            idx.sort_by(|&a, &b| centroids[a].total_cmp(&centroids[b]).then(a.cmp(&b)));
            let mut remap = vec![0u32; k];
            for (new, &old) in idx.iter().enumerate() {
                remap[old] = new as u32;
            }
            let sorted: Vec<f64> = idx.iter().map(|&c| centroids[c]).collect();
            centroids.copy_from_slice(&sorted);
            for l in labels.iter_mut() {
                *l = remap[*l as usize];
            }
        }
    }
    moved
}

/// Lloyd sweeps alternated with Hartigan passes until neither changes
/// anything; appends the objective after every step to `history`.
fn converge(values: &[f64], w: &[f64], labels: &mut [u32], centroids: &mut [f64], history: &mut Vec<f64>) {
    let record = |labels: &[u32], centroids: &[f64], history: &mut Vec<f64>| {
        let obj = objective_of(values, w, labels, centroids);
        debug_assert!(
            obj <= history.last().copied().unwrap_or(f64::INFINITY) * (1.0 + 1e-12) + 1e-300,
            "k-means objective increased to {obj} from {:?}",
            history.last()
        );
        history.push(obj);
    };
    for _ in 0..MAX_SWEEPS {
        update(values, w, labels, centroids);
        let changed = assign(values, centroids, labels);
        record(labels, centroids, history);
        if changed {
            continue;
        }
        if !hartigan_pass(values, w, labels, centroids) {
            break;
        }
        record(labels, centroids, history);
    }
}

/// Centroids with `drop` removed and the cluster whose best two-way split
/// gains most split in two. `order` sorts `values` ascending.
fn swap_candidate(values: &[f64], w: &[f64], order: &[usize], centroids: &[f64], drop: usize) -> Option<Vec<f64>> {
    if centroids.len() < 2 {
        return None;
    }
    let mut rest: Vec<f64> = centroids.iter().enumerate().filter(|&(c, _)| c != drop).map(|(_, &c)| c).collect();
    // Nearest-centroid clusters are contiguous runs of the sorted order.
    let owner: Vec<usize> = order.iter().map(|&j| nearest(&rest, values[j])).collect();
    let mut best: Option<(f64, usize, f64, f64)> = None;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && owner[end] == owner[start] {
            end += 1;
        }
        let seg = &order[start..end];
        let shift = values[seg[0]];
        let (mut tw, mut tv, mut tq) = (0.0, 0.0, 0.0);
        for &j in seg {
            let x = values[j] - shift;
            tw += w[j];
            tv += w[j] * x;
            tq += w[j] * x * x;
        }
        let total = tq - tv * tv / tw;
        let (mut lw, mut lv, mut lq) = (0.0, 0.0, 0.0);
        for t in 0..seg.len() - 1 {
            let j = seg[t];
            let x = values[j] - shift;
            lw += w[j];
            lv += w[j] * x;
            lq += w[j] * x * x;
            if values[seg[t + 1]] == values[j] {
                continue;
            }
            let (rw, rv, rq) = (tw - lw, tv - lv, tq - lq);
            let gain = total - (lq - lv * lv / lw) - (rq - rv * rv / rw);
            if best.is_none_or(|b| gain > b.0) {
                best = Some((gain, owner[start], shift + lv / lw, shift + rv / rw));
            }
        }
        start = end;
    }
    let (gain, cluster, left, right) = best?;
    if !(gain > 0.0) {
        return None;
    }
    rest[cluster] = left;
    rest.push(right);
    rest.sort_by(f64::total_cmp);
    Some(rest)
}

fn lloyd_floored(values: &[f64], w: &[f64], k: usize, seed: u64) -> (ClusterResult, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(values, w, k, &mut rng);
    let mut labels = vec![0u32; values.len()];
    assign(values, &centroids, &mut labels);
    let mut history = vec![objective_of(values, w, &labels, &centroids)];
    converge(values, w, &mut labels, &mut centroids, &mut history);

    // Swap moves: try relocating each centroid, keep the best if it helps.
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut current = *history.last().unwrap();
    for _ in 0..centroids.len() {
        let mut best: Option<(f64, Vec<f64>, Vec<u32>)> = None;
        for drop in 0..centroids.len() {
            let Some(mut trial) = swap_candidate(values, w, &order, &centroids, drop) else { continue };
            let mut trial_labels = labels.clone();
            assign(values, &trial, &mut trial_labels);
            let mut trial_history = vec![objective_of(values, w, &trial_labels, &trial)];
            converge(values, w, &mut trial_labels, &mut trial, &mut trial_history);
            let obj = *trial_history.last().unwrap();
            if best.as_ref().is_none_or(|b| obj < b.0) {
                best = Some((obj, trial, trial_labels));
            }
        }
        match best {
            Some((obj, trial, trial_labels)) if obj < current * (1.0 - 1e-12) => {
                current = obj;
                centroids = trial;
                labels = trial_labels;
                history.push(obj);
            }
            _ => break,
        }
    }
    let k = centroids.len();
    (finalize(values, w, labels, k), history)
}

/// Best of `restarts` k-means++ seeded Lloyd runs; restart `r` uses seed
/// `seed + r`. Ties in assignment go to the lower centroid.
pub fn kmeans_lloyd(values: &[f64], weights: &[f64], k: usize, seed: u64, restarts: usize) -> Result<ClusterResult> {
    let w = validate(values, weights, k)?;
    let distinct = sorted_distinct(values);
    if k >= distinct.len() {
        return Ok(exact_when_few_distinct(values, &w, &distinct));
    }
    let mut best: Option<ClusterResult> = None;
    for r in 0..restarts.max(1) {
        let (res, _) = lloyd_floored(values, &w, k, seed.wrapping_add(r as u64));
        if best.as_ref().is_none_or(|b| res.objective < b.objective) {
            best = Some(res);
        }
    }
    Ok(best.unwrap())
}

/// Seed used for clustering `row` at `bits` bits. Error recording and
/// final labelling share it, so a row clustered at its allocated width
/// reproduces the recorded error.
pub fn row_seed(seed: u64, row: usize, bits: u8) -> u64 {
    let mut z = seed ^ ((row as u64) << 8 | bits as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl KmeansConfig {
    /// Clusters one row of a layer with its derived per-row seed.
    pub fn cluster_row(&self, row: usize, bits: u8, values: &[f64], weights: &[f64]) -> Result<ClusterResult> {
        kmeans_lloyd(values, weights, 1usize << bits, row_seed(self.seed, row, bits), self.restarts)
    }

    pub fn cluster(&self, values: &[f64], weights: &[f64], k: usize) -> Result<ClusterResult> {
        kmeans_lloyd(values, weights, k, self.seed, self.restarts)
    }
}

/// Globally optimal weighted k-means in O(k·d²) for `d` distinct values.
pub fn kmeans_exact_dp(values: &[f64], weights: &[f64], k: usize) -> Result<ClusterResult> {
    let w = validate(values, weights, k)?;
    if values.len() > DP_LIMIT {
        return Err(Error::ScaleGuard { what: "exact 1-D k-means", size: values.len(), limit: DP_LIMIT });
    }
    let distinct = sorted_distinct(values);
    let d = distinct.len();
    if k >= d {
        return Ok(exact_when_few_distinct(values, &w, &distinct));
    }

    let group_of: Vec<usize> = values
        .iter()
        .map(|v| distinct.binary_search_by(|x| x.total_cmp(v)).unwrap())
        .collect();
    let mut gw = vec![0.0; d];
    for (&g, &wt) in group_of.iter().zip(&w) {
        gw[g] += wt;
    }
    // shift to the weighted mean to limit cancellation in S2 - S1²/W
    let total_w: f64 = gw.iter().sum();
    let shift = gw.iter().zip(&distinct).map(|(a, b)| a * b).sum::<f64>() / total_w;
    let mut pw = vec![0.0; d + 1];
    let mut p1 = vec![0.0; d + 1];
    let mut p2 = vec![0.0; d + 1];
    for g in 0..d {
        let x = distinct[g] - shift;
        pw[g + 1] = pw[g] + gw[g];
        p1[g + 1] = p1[g] + gw[g] * x;
        p2[g + 1] = p2[g] + gw[g] * x * x;
    }
    let cost = |a: usize, b: usize| -> f64 {
        let ww = pw[b] - pw[a];
        let s1 = p1[b] - p1[a];
        (p2[b] - p2[a] - s1 * s1 / ww).max(0.0)
    };

    // best[c][j]: c+1 clusters over the first j groups
    let mut best = vec![vec![f64::INFINITY; d + 1]; k];
    let mut split = vec![vec![0usize; d + 1]; k];
    for j in 1..=d {
        best[0][j] = cost(0, j);
    }
    for c in 1..k {
        for j in (c + 1)..=d {
            let mut bv = f64::INFINITY;
            let mut bi = c;
            for i in c..j {
                let v = best[c - 1][i] + cost(i, j);
                if v < bv {
                    bv = v;
                    bi = i;
                }
            }
            best[c][j] = bv;
            split[c][j] = bi;
        }
    }

    let mut group_label = vec![0u32; d];
    let mut end = d;
    for c in (0..k).rev() {
        let start = if c == 0 { 0 } else { split[c][end] };
        for gl in &mut group_label[start..end] {
            *gl = c as u32;
        }
        end = start;
    }
    let labels = group_of.iter().map(|&g| group_label[g]).collect();
    Ok(finalize(values, &w, labels, k))
}

/// Recomputes `Σ w_j (v_j - c[label_j])²` with floored weights.
pub fn weighted_objective(values: &[f64], weights: &[f64], result: &ClusterResult) -> Result<f64> {
    if values.len() != weights.len() || values.len() != result.labels.len() {
        return Err(shape_err("values, weights and labels must have equal length"));
    }
    if result.labels.iter().any(|&l| l as usize >= result.centroids.len()) {
        return Err(Error::InvalidArgument("label out of range".into()));
    }
    let w = floor_weights(weights)?;
    Ok(objective_of(values, &w, &result.labels, &result.centroids))
}

pub fn reconstruct_row(result: &ClusterResult) -> Vec<f64> {
    result.labels.iter().map(|&l| result.centroids[l as usize]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_instance(rng: &mut ChaCha8Rng, m: usize) -> (Vec<f64>, Vec<f64>) {
        let v = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        (v, w)
    }

    fn check_invariants(values: &[f64], weights: &[f64], r: &ClusterResult) {
        assert!(r.centroids.windows(2).all(|p| p[0] < p[1]), "{:?}", r.centroids);
        let k = r.k();
        let mut seen = vec![false; k];
        for (j, &l) in r.labels.iter().enumerate() {
            let l = l as usize;
            assert!(l < k);
            seen[l] = true;
            let _ = values[j];
        }
        assert!(seen.iter().all(|&s| s), "empty cluster in output");
        for c in 0..k {
            let members: Vec<f64> = values.iter().zip(&r.labels).filter(|(_, &l)| l as usize == c).map(|(v, _)| *v).collect();
            let lo = members.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = members.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(lo <= r.centroids[c] && r.centroids[c] <= hi);
        }
        let obj = weighted_objective(values, weights, r).unwrap();
        assert!((obj - r.objective).abs() <= 1e-9 * obj.max(1e-300));
    }

    #[test]
    fn two_well_separated_pairs() {
        let r = kmeans_lloyd(&[0.0, 0.0, 1.0, 1.0], &[1.0; 4], 2, 0, 1).unwrap();
        assert_eq!(r.centroids, vec![0.0, 1.0]);
        assert_eq!(r.objective, 0.0);
        assert_eq!(r.labels, vec![0, 0, 1, 1]);
    }

    #[test]
    fn k_at_least_distinct_is_exact() {
        let v = [3.0, -1.0, 3.0, 2.0];
        for k in [3, 4, 9] {
            let r = kmeans_lloyd(&v, &[1.0, 0.5, 2.0, 0.0], k, 7, 2).unwrap();
            assert_eq!(r.centroids, vec![-1.0, 2.0, 3.0]);
            assert_eq!(r.objective, 0.0);
            assert_eq!(reconstruct_row(&r), v.to_vec());
            let d = kmeans_exact_dp(&v, &[1.0; 4], k).unwrap();
            assert_eq!(d.objective, 0.0);
        }
    }

    #[test]
    fn weighted_three_point_example() {
        // {0,1} | {4}: centroids 0.5 and 4, objective 0.25 + 0.25
        let v = [0.0, 1.0, 4.0];
        let w = [1.0, 1.0, 2.0];
        let dp = kmeans_exact_dp(&v, &w, 2).unwrap();
        assert_eq!(dp.centroids, vec![0.5, 4.0]);
        assert!((dp.objective - 0.5).abs() < 1e-15);
        let ll = kmeans_lloyd(&v, &w, 2, 0, 10).unwrap();
        assert_eq!(ll.centroids, dp.centroids);
        assert_eq!(ll.objective, dp.objective);
    }

    #[test]
    fn dp_two_pairs() {
        // splits: {1}|{2,8,9} = 0+26, {1,2}|{8,9} = 0.5+0.5, {1,2,8}|{9} = 26
        let dp = kmeans_exact_dp(&[1.0, 2.0, 8.0, 9.0], &[1.0; 4], 2).unwrap();
        assert_eq!(dp.centroids, vec![1.5, 8.5]);
        assert!((dp.objective - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dp_dominates_lloyd_on_random_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for t in 0..40 {
            let (v, w) = random_instance(&mut rng, 12);
            let dp = kmeans_exact_dp(&v, &w, 3).unwrap();
            check_invariants(&v, &w, &dp);
            for seed in 0..5 {
                let (ll, _) = lloyd_run(&v, &w, 3, seed * 100 + t).unwrap();
                check_invariants(&v, &w, &ll);
                assert!(dp.objective <= ll.objective * (1.0 + 1e-12), "{} > {}", dp.objective, ll.objective);
            }
        }
    }

    #[test]
    fn dp_matches_enumeration_of_contiguous_splits() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..30 {
            let (mut v, w) = random_instance(&mut rng, 9);
            v.sort_by(f64::total_cmp);
            let wf = floor_weights(&w).unwrap();
            let seg = |a: usize, b: usize| {
                let sw: f64 = wf[a..b].iter().sum();
                let mu = (a..b).map(|j| wf[j] * v[j]).sum::<f64>() / sw;
                (a..b).map(|j| wf[j] * (v[j] - mu).powi(2)).sum::<f64>()
            };
            let mut brute = f64::INFINITY;
            for i in 1..9 {
                for j in i + 1..9 {
                    brute = brute.min(seg(0, i) + seg(i, j) + seg(j, 9));
                }
            }
            let dp = kmeans_exact_dp(&v, &w, 3).unwrap();
            assert!((dp.objective - brute).abs() <= 1e-12 * brute.max(1.0));
        }
    }

    #[test]
    fn lloyd_history_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for s in 0..50 {
            let (v, w) = random_instance(&mut rng, 40);
            let (_, hist) = lloyd_run(&v, &w, 5, s).unwrap();
            for p in hist.windows(2) {
                assert!(p[1] <= p[0] * (1.0 + 1e-12), "{hist:?}");
            }
        }
    }

    #[test]
    fn lloyd_is_locally_optimal_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for s in 0..20 {
            let (v, w) = random_instance(&mut rng, 30);
            let a = kmeans_lloyd(&v, &w, 4, s, 3).unwrap();
            let b = kmeans_lloyd(&v, &w, 4, s, 3).unwrap();
            assert_eq!(a, b);
            let mut labels = a.labels.clone();
            assert!(!assign(&v, &a.centroids, &mut labels), "another sweep would move labels");
        }
    }

    #[test]
    fn weight_scaling_and_value_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for s in 0..30 {
            let (v, w) = random_instance(&mut rng, 24);
            let base = kmeans_lloyd(&v, &w, 4, s, 3).unwrap();

            let c = rng.random_range(0.1..10.0);
            let ws: Vec<f64> = w.iter().map(|x| x * c).collect();
            let scaled = kmeans_lloyd(&v, &ws, 4, s, 3).unwrap();
            assert_eq!(scaled.labels, base.labels);
            for (a, b) in scaled.centroids.iter().zip(&base.centroids) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((scaled.objective - c * base.objective).abs() <= 1e-9 * scaled.objective);

            let shift = rng.random_range(-3.0..3.0);
            let vs: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let shifted = kmeans_lloyd(&vs, &w, 4, s, 3).unwrap();
            assert_eq!(shifted.labels, base.labels);
            for (a, b) in shifted.centroids.iter().zip(&base.centroids) {
                assert!((a - b - shift).abs() < 1e-12);
            }
            assert!((shifted.objective - base.objective).abs() <= 1e-9 * base.objective.max(1e-12));
        }
    }

    #[test]
    fn objective_closed_form_single_cluster() {
        let v = [1.0, 2.0, 3.0, 6.0];
        let r = kmeans_lloyd(&v, &[1.0; 4], 1, 0, 1).unwrap();
        // mean 3, squared deviations 4 + 1 + 0 + 9
        assert_eq!(r.centroids, vec![3.0]);
        assert_eq!(weighted_objective(&v, &[1.0; 4], &r).unwrap(), 14.0);
        assert_eq!(reconstruct_row(&r), vec![3.0; 4]);
    }

    #[test]
    fn zero_weights_still_get_centroids() {
        let v = [0.0, 1.0, 10.0, 11.0];
        let r = kmeans_lloyd(&v, &[0.0; 4], 2, 0, 3).unwrap();
        assert_eq!(r.centroids, vec![0.5, 10.5]);
        let r = kmeans_lloyd(&v, &[1.0, 1.0, 0.0, 0.0], 2, 0, 3).unwrap();
        check_invariants(&v, &[1.0, 1.0, 0.0, 0.0], &r);
    }

    #[test]
    fn argument_errors() {
        assert!(kmeans_lloyd(&[], &[], 2, 0, 1).is_err());
        assert!(kmeans_lloyd(&[1.0], &[1.0], 0, 0, 1).is_err());
        assert!(kmeans_lloyd(&[1.0], &[-1.0], 1, 0, 1).is_err());
        assert!(kmeans_lloyd(&[1.0, 2.0], &[1.0], 1, 0, 1).is_err());
        let big = vec![0.5; DP_LIMIT + 1];
        assert!(matches!(kmeans_exact_dp(&big, &big, 2), Err(Error::ScaleGuard { .. })));
    }
}
