//! From-scratch HDBSCAN over embedding ⊕ coordinate points.
//!
//! The pipeline clusters the per-pixel embeddings of one frame or of an
//! overlapping pair of consecutive frames. Each pixel becomes a data point
//! of its d embedding values followed by its image coordinates (and the
//! frame index for pairs), each coordinate scaled by a factor `c`.
//!
//! The clusterer is exact: O(n^2) core distances, Prim's minimum spanning
//! tree over the implicit mutual-reachability graph, single-linkage
//! hierarchy, condensation by minimum cluster size, and excess-of-mass
//! stability selection. No approximate nearest neighbors, so results are
//! reproducible and directly comparable against reference implementations.

use serde::{Deserialize, Serialize};

use crate::loss::InstanceLabelMap;
use crate::tensor::{Real, Tensor};

/// Label of points assigned to no cluster.
pub const NOISE: i32 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    /// Neighbor count of the core distance (self included).
    pub m_pts: usize,
    /// Minimum cluster size of the condensed hierarchy.
    pub m_cl_size: usize,
    /// Minimum pixel count for a cluster to survive as an instance.
    pub t_size: usize,
    /// Scale factor applied to the coordinate features.
    pub coord_scale: Real,
    /// L2-normalize each pixel's embedding before clustering.
    pub normalize_embeddings: bool,
}

impl ClusterParams {
    /// Derives `m_cl_size = m_pts` and `t_size = m_pts / 2`.
    pub fn from_m_pts(m_pts: usize, coord_scale: Real) -> Self {
        ClusterParams {
            m_pts,
            m_cl_size: m_pts,
            t_size: m_pts / 2,
            coord_scale,
            normalize_embeddings: false,
        }
    }
}

/// Flat point storage: `n` points of `dim` features each.
#[derive(Clone, Debug)]
pub struct PointSet {
    pub dim: usize,
    pub data: Vec<Real>,
}

impl PointSet {
    pub fn new(dim: usize, data: Vec<Real>) -> Self {
        assert!(dim > 0 && data.len() % dim == 0);
        PointSet { dim, data }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[Real] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn dist2(&self, a: usize, b: usize) -> Real {
        let pa = self.point(a);
        let pb = self.point(b);
        pa.iter().zip(pb).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    pub fn dist(&self, a: usize, b: usize) -> Real {
        self.dist2(a, b).sqrt()
    }
}

/// Distance to the `m_pts`-th nearest neighbor of every point, the point
/// itself counting as the first neighbor.
pub fn core_distances(points: &PointSet, m_pts: usize) -> Vec<Real> {
    let n = points.len();
    assert!(m_pts >= 1, "m_pts must be >= 1");
    assert!(n >= m_pts, "core_distances: {n} points < m_pts {m_pts}");
    if m_pts == 1 {
        return vec![0.0; n];
    }
    let mut buf = vec![0.0; n];
    let mut core = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            buf[j] = points.dist2(i, j);
        }
        // (m_pts-1)th order statistic = m_pts-th neighbor with self at 0.
        let (_, kth, _) = buf.select_nth_unstable_by(m_pts - 1, Real::total_cmp);
        core[i] = kth.sqrt();
    }
    core
}

/// `max(core(a), core(b), dist(a, b))`.
pub fn mutual_reachability(points: &PointSet, core: &[Real], a: usize, b: usize) -> Real {
    points.dist(a, b).max(core[a]).max(core[b])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MstEdge {
    pub a: usize,
    pub b: usize,
    pub weight: Real,
}

/// Minimum spanning tree of the complete mutual-reachability graph
/// (Prim's algorithm, O(n^2), distances recomputed on the fly).
pub fn build_mst(points: &PointSet, core: &[Real]) -> Vec<MstEdge> {
    let n = points.len();
    assert!(n >= 2, "build_mst: need at least 2 points");
    let mut in_tree = vec![false; n];
    let mut best = vec![Real::INFINITY; n];
    let mut src = vec![0usize; n];
    let mut edges = Vec::with_capacity(n - 1);

    let mut current = 0usize;
    in_tree[0] = true;
    for _ in 1..n {
        let cc = core[current];
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let mr = points.dist(current, j).max(cc).max(core[j]);
            if mr < best[j] {
                best[j] = mr;
                src[j] = current;
            }
        }
        let mut pick = usize::MAX;
        let mut pick_w = Real::INFINITY;
        for j in 0..n {
            if !in_tree[j] && best[j] < pick_w {
                pick_w = best[j];
                pick = j;
            }
        }
        edges.push(MstEdge { a: src[pick], b: pick, weight: pick_w });
        in_tree[pick] = true;
        current = pick;
    }
    edges
}

/// One row of the condensed hierarchy: `child` (a point id `< n` or a
/// cluster id `>= n`) leaves `parent` at density `lambda = 1/distance`.
#[derive(Clone, Copy, Debug)]
pub struct CondensedNode {
    pub parent: usize,
    pub child: usize,
    pub lambda: Real,
    pub size: usize,
}

pub fn condensed_tree_csv(tree: &[CondensedNode]) -> String {
    let mut out = String::from("parent,child,lambda,size\n");
    for row in tree {
        out.push_str(&format!("{},{},{},{}\n", row.parent, row.child, row.lambda, row.size));
    }
    out
}

struct SltNode {
    left: usize,
    right: usize,
    dist: Real,
    size: usize,
}

/// Single-linkage hierarchy from the MST: internal node `n + k` merges the
/// components of the k-th smallest edge.
fn single_linkage(edges: &[MstEdge], n: usize) -> Vec<SltNode> {
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.sort_by(|&i, &j| edges[i].weight.total_cmp(&edges[j].weight));

    let slots = 2 * n - 1;
    let mut parent: Vec<usize> = (0..slots).collect();
    let mut size = vec![1usize; slots];
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }

    let mut slt = Vec::with_capacity(n - 1);
    for (k, &ei) in order.iter().enumerate() {
        let e = &edges[ei];
        let ra = find(&mut parent, e.a);
        let rb = find(&mut parent, e.b);
        debug_assert_ne!(ra, rb, "MST edge within one component");
        let new_id = n + k;
        slt.push(SltNode { left: ra, right: rb, dist: e.weight, size: size[ra] + size[rb] });
        parent[ra] = new_id;
        parent[rb] = new_id;
        size[new_id] = size[ra] + size[rb];
    }
    slt
}

fn collect_leaves(slt: &[SltNode], n: usize, root: usize, out: &mut Vec<usize>) {
    let mut stack = vec![root];
    while let Some(id) = stack.pop() {
        if id < n {
            out.push(id);
        } else {
            let node = &slt[id - n];
            stack.push(node.left);
            stack.push(node.right);
        }
    }
}

/// Condenses the single-linkage tree, discarding splits smaller than
/// `m_cl_size`. Cluster ids start at `n` (the root).
fn condense(slt: &[SltNode], n: usize, m_cl_size: usize) -> Vec<CondensedNode> {
    let mut tree = Vec::new();
    if slt.is_empty() {
        return tree;
    }
    let root = n + slt.len() - 1;
    let mut next_id = n + 1;
    let mut leaves = Vec::new();
    // (slt node id, condensed cluster id it belongs to)
    let mut stack: Vec<(usize, usize)> = vec![(root, n)];
    while let Some((id, cid)) = stack.pop() {
        let node = &slt[id - n];
        let lambda = if node.dist > 0.0 { 1.0 / node.dist } else { Real::INFINITY };
        let size =
            |child: usize| -> usize { if child < n { 1 } else { slt[child - n].size } };
        let (ls, rs) = (size(node.left), size(node.right));
        let emit_points = |sub: usize, tree: &mut Vec<CondensedNode>, leaves: &mut Vec<usize>| {
            leaves.clear();
            collect_leaves(slt, n, sub, leaves);
            leaves.sort_unstable();
            for &p in leaves.iter() {
                tree.push(CondensedNode { parent: cid, child: p, lambda, size: 1 });
            }
        };
        match (ls >= m_cl_size, rs >= m_cl_size) {
            (true, true) => {
                // Genuine split: both sides become new clusters.
                for &sub in &[node.left, node.right] {
                    let new_id = next_id;
                    next_id += 1;
                    tree.push(CondensedNode { parent: cid, child: new_id, lambda, size: size(sub) });
                    stack.push((sub, new_id));
                }
            }
            (true, false) => {
                emit_points(node.right, &mut tree, &mut leaves);
                if node.left < n {
                    tree.push(CondensedNode { parent: cid, child: node.left, lambda, size: 1 });
                } else {
                    stack.push((node.left, cid));
                }
            }
            (false, true) => {
                emit_points(node.left, &mut tree, &mut leaves);
                if node.right < n {
                    tree.push(CondensedNode { parent: cid, child: node.right, lambda, size: 1 });
                } else {
                    stack.push((node.right, cid));
                }
            }
            (false, false) => {
                emit_points(node.left, &mut tree, &mut leaves);
                emit_points(node.right, &mut tree, &mut leaves);
            }
        }
    }
    tree
}

/// Excess-of-mass cluster selection. Returns the selected condensed
/// cluster ids, ascending. The root is never selected.
fn select_clusters(tree: &[CondensedNode], n: usize) -> Vec<usize> {
    use std::collections::BTreeMap;
    let mut lambda_birth: BTreeMap<usize, Real> = BTreeMap::new();
    lambda_birth.insert(n, 0.0);
    for row in tree {
        if row.child >= n {
            lambda_birth.insert(row.child, row.lambda);
        }
    }
    // Stability of every cluster: sum over members of (lambda_leave - lambda_birth).
    let mut stability: BTreeMap<usize, Real> = BTreeMap::new();
    for (&c, &birth) in &lambda_birth {
        let mut s = 0.0;
        for row in tree.iter().filter(|r| r.parent == c) {
            let leave = if row.lambda.is_finite() { row.lambda } else { birth };
            s += (leave - birth) * row.size as Real;
        }
        stability.insert(c, s);
    }

    let mut selected: BTreeMap<usize, bool> = BTreeMap::new();
    let ids: Vec<usize> = lambda_birth.keys().copied().filter(|&c| c != n).collect();
    for &c in ids.iter().rev() {
        let child_sum: Real = tree
            .iter()
            .filter(|r| r.parent == c && r.child >= n)
            .map(|r| stability[&r.child])
            .sum();
        let has_cluster_children = tree.iter().any(|r| r.parent == c && r.child >= n);
        if has_cluster_children && child_sum > stability[&c] {
            selected.insert(c, false);
            stability.insert(c, child_sum);
        } else {
            selected.insert(c, true);
            // Deselect all cluster descendants.
            let mut stack: Vec<usize> =
                tree.iter().filter(|r| r.parent == c && r.child >= n).map(|r| r.child).collect();
            while let Some(d) = stack.pop() {
                selected.insert(d, false);
                stack.extend(tree.iter().filter(|r| r.parent == d && r.child >= n).map(|r| r.child));
            }
        }
    }
    selected.into_iter().filter(|&(_, keep)| keep).map(|(c, _)| c).collect()
}

fn label_points(tree: &[CondensedNode], n: usize, selected: &[usize]) -> Vec<i32> {
    use std::collections::BTreeMap;
    let mut labels = vec![NOISE; n];
    if selected.is_empty() {
        return labels;
    }
    let cluster_index: BTreeMap<usize, i32> =
        selected.iter().enumerate().map(|(i, &c)| (c, i as i32)).collect();
    let mut parent_of: BTreeMap<usize, usize> = BTreeMap::new();
    for row in tree {
        if row.child >= n {
            parent_of.insert(row.child, row.parent);
        }
    }
    for row in tree {
        if row.child >= n {
            continue;
        }
        // Walk up from the point's attachment cluster to the first
        // selected ancestor, if any.
        let mut c = row.parent;
        loop {
            if let Some(&idx) = cluster_index.get(&c) {
                labels[row.child] = idx;
                break;
            }
            match parent_of.get(&c) {
                Some(&p) => c = p,
                None => break,
            }
        }
    }
    labels
}

/// Extracts flat cluster labels from an MST via the condensed hierarchy and
/// excess-of-mass selection. `NOISE` marks unassigned points.
pub fn extract_clusters(edges: &[MstEdge], n: usize, m_cl_size: usize) -> Vec<i32> {
    let slt = single_linkage(edges, n);
    let tree = condense(&slt, n, m_cl_size);
    let selected = select_clusters(&tree, n);
    label_points(&tree, n, &selected)
}

/// Full HDBSCAN run. Fewer points than `m_pts` (or fewer than 2) yields
/// all-noise.
pub fn hdbscan(points: &PointSet, params: &ClusterParams) -> Vec<i32> {
    hdbscan_with_tree(points, params).0
}

/// Like [`hdbscan`], additionally returning the condensed hierarchy for
/// diagnostics.
pub fn hdbscan_with_tree(points: &PointSet, params: &ClusterParams) -> (Vec<i32>, Vec<CondensedNode>) {
    let n = points.len();
    if n < params.m_pts.max(2) {
        return (vec![NOISE; n], Vec::new());
    }
    let core = core_distances(points, params.m_pts);
    let mst = build_mst(points, &core);
    let slt = single_linkage(&mst, n);
    let tree = condense(&slt, n, params.m_cl_size);
    let selected = select_clusters(&tree, n);
    (label_points(&tree, n, &selected), tree)
}

// ---- frame clustering --------------------------------------------------------

/// Builds clustering points from 1 or 2 embedding maps (`[d, H, W]` each):
/// embedding values followed by `(x*c, y*c[, t*c])`.
pub fn build_points(embeddings: &[&Tensor], params: &ClusterParams) -> PointSet {
    assert!(
        embeddings.len() == 1 || embeddings.len() == 2,
        "build_points: expected 1 or 2 frames, got {}",
        embeddings.len()
    );
    let (d, h, w) = embeddings[0].dims3();
    for e in embeddings {
        assert_eq!(e.dims3(), (d, h, w), "build_points: frame shape mismatch");
    }
    let with_t = embeddings.len() == 2;
    let dim = d + 2 + usize::from(with_t);
    let c = params.coord_scale;
    let mut data = Vec::with_capacity(embeddings.len() * h * w * dim);
    for (t, emb) in embeddings.iter().enumerate() {
        let ed = emb.data();
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let start = data.len();
                for k in 0..d {
                    data.push(ed[k * h * w + p]);
                }
                if params.normalize_embeddings {
                    let norm = data[start..].iter().map(|v| v * v).sum::<Real>().sqrt();
                    if norm > 1e-12 {
                        for v in &mut data[start..] {
                            *v /= norm;
                        }
                    }
                }
                data.push(x as Real * c);
                data.push(y as Real * c);
                if with_t {
                    data.push(t as Real * c);
                }
            }
        }
    }
    PointSet::new(dim, data)
}

/// Clusters the embeddings of a single frame or an overlapping frame pair
/// and maps cluster labels back onto pixels. Clusters smaller than
/// `t_size` pixels are removed; the largest surviving cluster is taken as
/// background (label 0); the remaining clusters become instances 1, 2, ...
/// shared across the pair. Noise pixels map to background.
pub fn cluster_frames(embeddings: &[&Tensor], params: &ClusterParams) -> Vec<InstanceLabelMap> {
    let (_, h, w) = embeddings[0].dims3();
    let points = build_points(embeddings, params);
    let labels = hdbscan(&points, params);

    let k = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0)) as usize;
    let mut counts = vec![0usize; k];
    for &l in &labels {
        if l >= 0 {
            counts[l as usize] += 1;
        }
    }
    let survivors: Vec<usize> =
        (0..k).filter(|&c| counts[c] >= params.t_size.max(1)).collect();

    // Largest surviving cluster is background; ties break to the lower id.
    let background = survivors
        .iter()
        .copied()
        .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
        .unwrap_or(usize::MAX);
    let mut instance_id = vec![0u32; k];
    let mut next = 1u32;
    for &c in &survivors {
        if c != background {
            instance_id[c] = next;
            next += 1;
        }
    }

    let hw = h * w;
    embeddings
        .iter()
        .enumerate()
        .map(|(t, _)| {
            let frame_labels: Vec<u32> = (0..hw)
                .map(|p| {
                    let l = labels[t * hw + p];
                    if l < 0 || !survivors.contains(&(l as usize)) {
                        0
                    } else {
                        instance_id[l as usize]
                    }
                })
                .collect();
            InstanceLabelMap::new(h, w, frame_labels)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian_blob(rng: &mut ChaCha8Rng, center: &[Real], sigma: Real, count: usize, out: &mut Vec<Real>) {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, sigma as f64).unwrap();
        for _ in 0..count {
            for &c in center {
                out.push(c + normal.sample(rng) as Real);
            }
        }
    }

    #[test]
    fn core_distance_m1_is_zero() {
        let points = PointSet::new(2, vec![0.0, 0.0, 1.0, 1.0, 5.0, 2.0]);
        assert_eq!(core_distances(&points, 1), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn core_distance_collinear_points() {
        // Points at 0, 1, 2 on a line; m_pts = 2 means nearest other point.
        let points = PointSet::new(1, vec![0.0, 1.0, 2.0]);
        assert_eq!(core_distances(&points, 2), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn core_distance_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 50;
        let data: Vec<Real> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let points = PointSet::new(3, data);
        let m_pts = 5;
        let got = core_distances(&points, m_pts);
        for i in 0..n {
            let mut dists: Vec<Real> = (0..n).map(|j| points.dist(i, j)).collect();
            dists.sort_by(Real::total_cmp);
            assert!((got[i] - dists[m_pts - 1]).abs() < 1e-12);
        }
    }

    #[test]
    fn mutual_reachability_semantics() {
        let points = PointSet::new(2, vec![0.0, 0.0, 0.0, 0.0, 3.0, 4.0]);
        let core = vec![0.0, 0.0, 7.0];
        // Identical points with zero core distances.
        assert_eq!(mutual_reachability(&points, &core, 0, 1), 0.0);
        // A large core distance dominates the 5.0 geometric distance.
        assert_eq!(mutual_reachability(&points, &core, 0, 2), 7.0);
    }

    #[test]
    fn mst_of_two_points() {
        let points = PointSet::new(1, vec![0.0, 2.0]);
        let core = core_distances(&points, 1);
        let mst = build_mst(&points, &core);
        assert_eq!(mst.len(), 1);
        assert_eq!(mst[0].weight, 2.0);
    }

    #[test]
    fn mst_on_a_line_is_the_path() {
        let points = PointSet::new(1, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        let core = vec![0.0; 5];
        let mst = build_mst(&points, &core);
        let mut pairs: Vec<(usize, usize)> =
            mst.iter().map(|e| (e.a.min(e.b), e.a.max(e.b))).collect();
        pairs.sort_unstable();
        assert_eq!(pairs, vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
    }

    /// Kruskal with an explicit distance matrix as an oracle for the MST
    /// total weight.
    fn kruskal_weight(points: &PointSet, core: &[Real]) -> Real {
        let n = points.len();
        let mut edges = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                edges.push((mutual_reachability(points, core, a, b), a, b));
            }
        }
        edges.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut Vec<usize>, mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut total = 0.0;
        let mut used = 0;
        for (w, a, b) in edges {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra] = rb;
                total += w;
                used += 1;
                if used == n - 1 {
                    break;
                }
            }
        }
        total
    }

    #[test]
    fn prim_matches_kruskal_total_weight() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 40;
            let data: Vec<Real> = (0..n * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let points = PointSet::new(2, data);
            let core = core_distances(&points, 4);
            let mst = build_mst(&points, &core);
            let total: Real = mst.iter().map(|e| e.weight).sum();
            let want = kruskal_weight(&points, &core);
            assert!((total - want).abs() < 1e-9, "{total} vs {want}");
        }
    }

    #[test]
    fn two_separated_blobs_give_two_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut data = Vec::new();
        gaussian_blob(&mut rng, &[0.0, 0.0], 1.0, 30, &mut data);
        gaussian_blob(&mut rng, &[20.0, 0.0], 1.0, 30, &mut data);
        let points = PointSet::new(2, data);
        let params = ClusterParams {
            m_pts: 10,
            m_cl_size: 10,
            t_size: 0,
            coord_scale: 1.0,
            normalize_embeddings: false,
        };
        let labels = hdbscan(&points, &params);
        let first: Vec<i32> = labels[..30].to_vec();
        let second: Vec<i32> = labels[30..].to_vec();
        assert!(first.iter().all(|&l| l == first[0]), "{first:?}");
        assert!(second.iter().all(|&l| l == second[0]), "{second:?}");
        assert_ne!(first[0], second[0]);
        assert!(first[0] >= 0 && second[0] >= 0);
    }

    #[test]
    fn fewer_points_than_m_cl_size_is_all_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<Real> = (0..8 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let points = PointSet::new(2, data);
        let params = ClusterParams {
            m_pts: 3,
            m_cl_size: 20,
            t_size: 0,
            coord_scale: 1.0,
            normalize_embeddings: false,
        };
        assert!(hdbscan(&points, &params).iter().all(|&l| l == NOISE));
    }

    #[test]
    fn sparse_uniform_noise_yields_no_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<Real> = (0..60 * 2).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let points = PointSet::new(2, data);
        let params = ClusterParams {
            m_pts: 25,
            m_cl_size: 25,
            t_size: 0,
            coord_scale: 1.0,
            normalize_embeddings: false,
        };
        let labels = hdbscan(&points, &params);
        assert!(labels.iter().all(|&l| l == NOISE), "{labels:?}");
    }

    #[test]
    fn shuffling_points_preserves_memberships() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut data = Vec::new();
        gaussian_blob(&mut rng, &[0.0, 0.0, 0.0], 0.5, 40, &mut data);
        gaussian_blob(&mut rng, &[8.0, 0.0, 1.0], 0.5, 35, &mut data);
        gaussian_blob(&mut rng, &[0.0, 9.0, -1.0], 0.5, 30, &mut data);
        let n = 105;
        let points = PointSet::new(3, data.clone());
        let params = ClusterParams {
            m_pts: 8,
            m_cl_size: 8,
            t_size: 0,
            coord_scale: 1.0,
            normalize_embeddings: false,
        };
        let base = hdbscan(&points, &params);

        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let mut shuffled = vec![0.0; data.len()];
        for (new_i, &old_i) in perm.iter().enumerate() {
            shuffled[new_i * 3..(new_i + 1) * 3].copy_from_slice(&data[old_i * 3..(old_i + 1) * 3]);
        }
        let labels2 = hdbscan(&PointSet::new(3, shuffled), &params);

        // Memberships must agree up to a relabeling.
        use std::collections::BTreeMap;
        let mut mapping: BTreeMap<i32, i32> = BTreeMap::new();
        for (new_i, &old_i) in perm.iter().enumerate() {
            let (a, b) = (base[old_i], labels2[new_i]);
            if a == NOISE || b == NOISE {
                assert_eq!(a, b, "noise flag changed for point {old_i}");
            } else {
                let expect = *mapping.entry(a).or_insert(b);
                assert_eq!(expect, b, "membership changed for point {old_i}");
            }
        }
    }

    fn constant_embedding_frame(h: usize, w: usize, regions: &[(usize, usize, usize, usize, [Real; 2])], bg: [Real; 2]) -> Tensor {
        let mut emb = Tensor::zeros(&[2, h, w]);
        for y in 0..h {
            for x in 0..w {
                let mut v = bg;
                for &(y0, y1, x0, x1, dir) in regions {
                    if y >= y0 && y < y1 && x >= x0 && x < x1 {
                        v = dir;
                    }
                }
                emb.data_mut()[y * w + x] = v[0];
                emb.data_mut()[h * w + y * w + x] = v[1];
            }
        }
        emb
    }

    #[test]
    fn orthogonal_instances_recover_perfect_masks() {
        let (h, w) = (24, 24);
        let emb = constant_embedding_frame(
            h,
            w,
            &[(4, 10, 4, 10, [1.0, 0.0]), (14, 20, 14, 20, [0.0, 1.0])],
            [-0.7, -0.7],
        );
        let params = ClusterParams {
            m_pts: 10,
            m_cl_size: 10,
            t_size: 5,
            coord_scale: 0.001,
            normalize_embeddings: false,
        };
        let maps = cluster_frames(&[&emb], &params);
        assert_eq!(maps.len(), 1);
        let map = &maps[0];
        let ids = map.instance_ids();
        // Background plus two instances.
        assert_eq!(ids.len(), 3, "ids {ids:?}");
        // Each rectangle is one uniform non-background instance.
        let a = map.labels[5 * w + 5];
        let b = map.labels[15 * w + 15];
        assert!(a > 0 && b > 0 && a != b);
        for y in 4..10 {
            for x in 4..10 {
                assert_eq!(map.labels[y * w + x], a);
            }
        }
        for y in 14..20 {
            for x in 14..20 {
                assert_eq!(map.labels[y * w + x], b);
            }
        }
        assert_eq!(map.labels[0], 0);
    }

    #[test]
    fn coordinate_scaling_separates_distant_twins() {
        // The same embedding appears at two far-apart locations; with
        // coordinates in the feature vector they become two instances.
        let (h, w) = (16, 48);
        let emb = constant_embedding_frame(
            h,
            w,
            &[(4, 12, 2, 10, [1.0, 0.0]), (4, 12, 38, 46, [1.0, 0.0])],
            [-0.7, -0.7],
        );
        let params = ClusterParams {
            m_pts: 10,
            m_cl_size: 10,
            t_size: 5,
            coord_scale: 0.1,
            normalize_embeddings: false,
        };
        let maps = cluster_frames(&[&emb], &params);
        let map = &maps[0];
        let left = map.labels[8 * w + 5];
        let right = map.labels[8 * w + 40];
        assert!(left > 0 && right > 0);
        assert_ne!(left, right, "coordinate scaling failed to separate twins");
    }

    #[test]
    fn clusters_below_t_size_are_removed() {
        let (h, w) = (16, 16);
        // A 3x3 = 9 pixel instance with t_size 10 must vanish.
        let emb = constant_embedding_frame(h, w, &[(6, 9, 6, 9, [1.0, 0.0])], [-0.7, -0.7]);
        let params = ClusterParams {
            m_pts: 5,
            m_cl_size: 5,
            t_size: 10,
            coord_scale: 0.001,
            normalize_embeddings: false,
        };
        let maps = cluster_frames(&[&emb], &params);
        assert_eq!(maps[0].instance_ids(), vec![0]);
    }

    #[test]
    fn frame_pair_shares_cluster_ids() {
        let (h, w) = (16, 16);
        let f0 = constant_embedding_frame(h, w, &[(4, 10, 4, 10, [1.0, 0.0])], [-0.7, -0.7]);
        let f1 = constant_embedding_frame(h, w, &[(5, 11, 5, 11, [1.0, 0.0])], [-0.7, -0.7]);
        let params = ClusterParams {
            m_pts: 10,
            m_cl_size: 10,
            t_size: 5,
            coord_scale: 0.01,
            normalize_embeddings: false,
        };
        let maps = cluster_frames(&[&f0, &f1], &params);
        assert_eq!(maps.len(), 2);
        let a = maps[0].labels[5 * w + 5];
        let b = maps[1].labels[6 * w + 6];
        assert!(a > 0);
        assert_eq!(a, b, "instance identity not shared across the pair");
    }

    #[test]
    fn condensed_tree_csv_has_header_and_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut data = Vec::new();
        gaussian_blob(&mut rng, &[0.0, 0.0], 0.5, 20, &mut data);
        gaussian_blob(&mut rng, &[10.0, 0.0], 0.5, 20, &mut data);
        let points = PointSet::new(2, data);
        let params = ClusterParams {
            m_pts: 5,
            m_cl_size: 5,
            t_size: 0,
            coord_scale: 1.0,
            normalize_embeddings: false,
        };
        let (_, tree) = hdbscan_with_tree(&points, &params);
        let csv = condensed_tree_csv(&tree);
        assert!(csv.starts_with("parent,child,lambda,size\n"));
        assert!(csv.lines().count() > 40);
    }
}
