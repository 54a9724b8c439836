//! Hashed sharing of embedding coordinates between grouped words.
//!
//! For a word `i` with groups `groups(i) = [a_1, ..., a_K]` and a coordinate
//! `j`, a hash `route(i, j)` picks one of those groups and a signing hash
//! `sign(i, j) ∈ {+1, -1}` picks a sign. The shared matrix is then
//!
//! ```text
//! shared[i][j] = group[route(i, j)][j] * sign(i, j)
//! ```
//!
//! and the gradient reaching group coordinate `(k, j)` is the signed sum of
//! the gradients of every shared entry routed to it:
//!
//! ```text
//! d_group[k][j] = Σ_i d_shared[i][j] * [route(i, j) = k] * sign(i, j)
//! ```
//!
//! Words without groups (`k = 0`) keep private rows that are ordinary
//! parameters and are never touched by synchronization or aggregation.
//!
//! Routing is resolved once into a [`SharingPlan`]; both directions are then
//! flat loops over the plan.

use ndarray::Array2;

use crate::groups::{GroupEmbeddings, GroupTable};
use crate::seed::mix64;
use crate::{Error, Result};

/// Version of the hash mixing scheme. Stored in checkpoints; bumping it
/// invalidates every stored routing.
pub const MIXER_VERSION: u32 = 1;

const DIM_SALT: u64 = 0x243f_6a88_85a3_08d3;
const SIGN_SALT: u64 = 0x1319_8a2e_0370_7344;
const WORD_MUL: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashSpec {
    pub seed: u64,
    pub signing_enabled: bool,
}

impl HashSpec {
    pub fn new(seed: u64, signing_enabled: bool) -> Self {
        HashSpec {
            seed,
            signing_enabled,
        }
    }

    /// 64-bit digest of `(i, j)` under `seed`.
    #[inline]
    fn keyed(seed: u64, i: usize, j: usize) -> u64 {
        let word = mix64((i as u64).wrapping_mul(WORD_MUL) ^ mix64((j as u64).wrapping_add(1)));
        mix64(mix64(seed) ^ word)
    }

    /// `route(i, j)` as a position in the word's group list, i.e. a bucket in `[0, k)`.
    pub fn hash_dim(&self, i: usize, j: usize, k: usize) -> Result<usize> {
        if k == 0 {
            return Err(Error::InvalidArgument(format!(
                "word {i} has no groups; it must use a private row"
            )));
        }
        Ok((Self::keyed(self.seed ^ DIM_SALT, i, j) % k as u64) as usize)
    }

    /// `sign(i, j)`; always `+1` when signing is disabled.
    pub fn sign(&self, i: usize, j: usize) -> i8 {
        if !self.signing_enabled {
            return 1;
        }
        if Self::keyed(self.seed ^ SIGN_SALT, i, j) >> 63 == 0 {
            1
        } else {
            -1
        }
    }
}

/// `route(i, j)` as a bucket in `[0, k)`. `k = 0` is an error.
pub fn hash_dim(i: usize, j: usize, k: usize, spec: &HashSpec) -> Result<usize> {
    spec.hash_dim(i, j, k)
}

/// `sign(i, j)`.
pub fn sign(i: usize, j: usize, spec: &HashSpec) -> i8 {
    spec.sign(i, j)
}

/// Source of bucket and sign decisions. [`HashSpec`] is the production
/// router; [`TableRouter`] pins decisions explicitly.
pub trait Router {
    /// Position in `G(word)` (a value in `[0, k)`) owning coordinate `dim`.
    fn bucket(&self, word: usize, dim: usize, k: usize) -> usize;
    fn sign(&self, word: usize, dim: usize) -> i8;
}

impl Router for HashSpec {
    fn bucket(&self, word: usize, dim: usize, k: usize) -> usize {
        self.hash_dim(word, dim, k).expect("plan never routes ungrouped words")
    }

    fn sign(&self, word: usize, dim: usize) -> i8 {
        HashSpec::sign(self, word, dim)
    }
}

/// Explicit `(word, dim) → (bucket, sign)` tables.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRouter {
    pub buckets: Array2<usize>,
    pub signs: Array2<i8>,
}

impl TableRouter {
    /// All buckets 0, all signs +1.
    pub fn constant(rows: usize, dim: usize) -> Self {
        TableRouter {
            buckets: Array2::zeros((rows, dim)),
            signs: Array2::from_elem((rows, dim), 1),
        }
    }
}

impl Router for TableRouter {
    fn bucket(&self, word: usize, dim: usize, k: usize) -> usize {
        let b = self.buckets[[word, dim]];
        assert!(b < k, "table bucket {b} out of range for word {word} with K={k}");
        b
    }

    fn sign(&self, word: usize, dim: usize) -> i8 {
        self.signs[[word, dim]]
    }
}

const PRIVATE: u32 = u32::MAX;

/// Resolved routing of every `(word, dim)` entry of a shared matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharingPlan {
    rows: usize,
    dim: usize,
    num_groups: usize,
    /// Group id per entry, or `PRIVATE`.
    slot: Vec<u32>,
    sign: Vec<i8>,
    private_rows: Vec<usize>,
}

impl SharingPlan {
    /// Routes a `rows × dim` matrix. Word ids past `table.num_words()` are
    /// ungrouped and therefore private.
    pub fn build(table: &GroupTable, rows: usize, dim: usize, router: &dyn Router) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("embedding dimension must be positive".into()));
        }
        if table.num_words() > rows {
            return Err(Error::Shape(format!(
                "group table covers {} words, shared matrix has {rows} rows",
                table.num_words()
            )));
        }
        if table.num_groups() >= PRIVATE as usize {
            return Err(Error::Shape("too many groups".into()));
        }
        let mut slot = vec![PRIVATE; rows * dim];
        let mut sign = vec![1i8; rows * dim];
        let mut private_rows = Vec::new();
        for i in 0..rows {
            let groups = table.groups_of(i);
            if groups.is_empty() {
                private_rows.push(i);
                continue;
            }
            for j in 0..dim {
                let b = router.bucket(i, j, groups.len());
                let s = router.sign(i, j);
                debug_assert!(s == 1 || s == -1);
                slot[i * dim + j] = groups[b] as u32;
                sign[i * dim + j] = s;
            }
        }
        Ok(SharingPlan {
            rows,
            dim,
            num_groups: table.num_groups(),
            slot,
            sign,
            private_rows,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    /// Group owning `(i, j)`, `None` for private rows.
    pub fn group_at(&self, i: usize, j: usize) -> Option<usize> {
        match self.slot[i * self.dim + j] {
            PRIVATE => None,
            k => Some(k as usize),
        }
    }

    pub fn sign_at(&self, i: usize, j: usize) -> i8 {
        self.sign[i * self.dim + j]
    }

    pub fn is_private(&self, i: usize) -> bool {
        self.slot[i * self.dim] == PRIVATE
    }

    pub fn private_rows(&self) -> &[usize] {
        &self.private_rows
    }

    fn check_groups(&self, groups: &Array2<f64>) -> Result<()> {
        if groups.dim() != (self.num_groups, self.dim) {
            return Err(Error::Shape(format!(
                "group matrix is {:?}, plan expects ({}, {})",
                groups.dim(),
                self.num_groups,
                self.dim
            )));
        }
        Ok(())
    }

    fn check_rows(&self, m: &Array2<f64>, what: &str) -> Result<()> {
        if m.dim() != (self.rows, self.dim) {
            return Err(Error::Shape(format!(
                "{what} is {:?}, plan expects ({}, {})",
                m.dim(),
                self.rows,
                self.dim
            )));
        }
        Ok(())
    }

    /// Writes `group[route(i, j)][j] * sign(i, j)` into every non-private entry of `out`.
    pub fn expand_into(&self, groups: &Array2<f64>, out: &mut Array2<f64>) -> Result<()> {
        self.check_groups(groups)?;
        self.check_rows(out, "shared matrix")?;
        let g = groups.as_slice().expect("standard layout");
        let out = out.as_slice_mut().expect("standard layout");
        let d = self.dim;
        for (idx, (&k, &s)) in self.slot.iter().zip(&self.sign).enumerate() {
            if k != PRIVATE {
                out[idx] = g[k as usize * d + idx % d] * s as f64;
            }
        }
        Ok(())
    }

    /// Folds a gradient over the shared matrix into a gradient over groups.
    /// Rows are visited in ascending order; private rows are ignored.
    pub fn aggregate(&self, grad_shared: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_rows(grad_shared, "shared gradient")?;
        let mut out = Array2::zeros((self.num_groups, self.dim));
        let acc = out.as_slice_mut().expect("standard layout");
        let gs = grad_shared.as_slice().expect("standard layout");
        let d = self.dim;
        for (idx, (&k, &s)) in self.slot.iter().zip(&self.sign).enumerate() {
            if k != PRIVATE {
                acc[k as usize * d + idx % d] += gs[idx] * s as f64;
            }
        }
        Ok(out)
    }
}

/// Group-vector gradient from a shared-matrix gradient, routed by `router`.
pub fn aggregate_gradients(
    grad_shared: &Array2<f64>,
    table: &GroupTable,
    router: &dyn Router,
) -> Result<Array2<f64>> {
    let plan = SharingPlan::build(table, grad_shared.nrows(), grad_shared.ncols(), router)?;
    plan.aggregate(grad_shared)
}

/// The materialized shared matrix together with the group parameters it is
/// derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedEmbedding {
    plan: SharingPlan,
    groups: GroupEmbeddings,
    values: Array2<f64>,
}

/// Builds the shared matrix from hashed group routing. Private rows are copied from
/// `pretrained`, which must have one row per shared-matrix row.
pub fn init_shared(
    table: &GroupTable,
    groups: GroupEmbeddings,
    pretrained: &Array2<f64>,
    spec: &HashSpec,
) -> Result<SharedEmbedding> {
    SharedEmbedding::with_router(table, groups, pretrained, spec)
}

impl SharedEmbedding {
    pub fn with_router(
        table: &GroupTable,
        groups: GroupEmbeddings,
        pretrained: &Array2<f64>,
        router: &dyn Router,
    ) -> Result<Self> {
        if groups.dim() != pretrained.ncols() {
            return Err(Error::Shape(format!(
                "group dimension {} differs from pretrained dimension {}",
                groups.dim(),
                pretrained.ncols()
            )));
        }
        let plan = SharingPlan::build(table, pretrained.nrows(), pretrained.ncols(), router)?;
        Self::from_parts(plan, groups, pretrained.clone())
    }

    /// Reassembles from stored parts. Non-private entries of `values` are
    /// overwritten by a sync.
    pub fn from_parts(plan: SharingPlan, groups: GroupEmbeddings, values: Array2<f64>) -> Result<Self> {
        plan.check_groups(&groups.values)?;
        plan.check_rows(&values, "shared matrix")?;
        let mut shared = SharedEmbedding {
            plan,
            groups,
            values,
        };
        shared.sync_forward();
        Ok(shared)
    }

    /// Recomputes every non-private entry from the group parameters.
    pub fn sync_forward(&mut self) {
        self.plan
            .expand_into(&self.groups.values, &mut self.values)
            .expect("shapes fixed at construction");
    }

    /// Group-vector gradient for a gradient over this matrix.
    pub fn aggregate_gradients(&self, grad_shared: &Array2<f64>) -> Result<Array2<f64>> {
        self.plan.aggregate(grad_shared)
    }

    pub fn plan(&self) -> &SharingPlan {
        &self.plan
    }

    pub fn groups(&self) -> &GroupEmbeddings {
        &self.groups
    }

    /// Mutable group parameters. Call [`Self::sync_forward`] afterwards.
    pub fn group_values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.groups.values
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Mutable matrix, for updating private rows. Shared entries written
    /// here are overwritten by the next sync.
    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }

    pub fn is_private(&self, i: usize) -> bool {
        self.plan.is_private(i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groups::init_group_embeddings;
    use crate::corpus::EmbeddingMatrix;
    use ndarray::array;

    #[test]
    fn single_bucket_is_always_zero() {
        let spec = HashSpec::new(9, true);
        for i in 0..50 {
            for j in 0..50 {
                assert_eq!(spec.hash_dim(i, j, 1).unwrap(), 0);
            }
        }
    }

    #[test]
    fn zero_groups_is_an_error() {
        assert!(hash_dim(0, 0, 0, &HashSpec::new(0, true)).is_err());
    }

    #[test]
    fn hashes_are_deterministic() {
        let spec = HashSpec::new(42, true);
        assert_eq!(hash_dim(3, 7, 5, &spec).unwrap(), hash_dim(3, 7, 5, &spec).unwrap());
        assert_eq!(sign(3, 7, &spec), sign(3, 7, &spec));
    }

    #[test]
    fn signing_disabled_is_all_positive() {
        let spec = HashSpec::new(42, false);
        assert!((0..100).all(|i| (0..100).all(|j| sign(i, j, &spec) == 1)));
    }

    #[test]
    fn hash_outputs_are_frozen() {
        // Changing the mixer must bump MIXER_VERSION and these values.
        let spec = HashSpec::new(0, true);
        let buckets: Vec<usize> = (0..8).map(|j| spec.hash_dim(0, j, 16).unwrap()).collect();
        let signs: Vec<i8> = (0..8).map(|j| spec.sign(0, j)).collect();
        assert_eq!(buckets, FROZEN_BUCKETS);
        assert_eq!(signs, FROZEN_SIGNS);
    }

    const FROZEN_BUCKETS: [usize; 8] = [11, 9, 2, 3, 11, 9, 11, 4];
    const FROZEN_SIGNS: [i8; 8] = [1, -1, 1, 1, -1, 1, -1, 1];

    #[test]
    fn singleton_groups_without_signing_reproduce_pretrained() {
        let pre = array![[0.1, -0.2, 0.3], [1.0, 2.0, 3.0], [-4.0, 0.5, 0.25]];
        let table = GroupTable::singletons(3);
        let g = init_group_embeddings(&table, &EmbeddingMatrix::new(pre.clone()).unwrap()).unwrap();
        let shared = init_shared(&table, g, &pre, &HashSpec::new(1, false)).unwrap();
        assert_eq!(shared.values(), &pre);
    }

    #[test]
    fn figure_one_sharing_pattern() {
        // words: good(0) nice(1) amazing(2) interesting(3)
        // g1 = {good, nice, amazing}, g2 = {good, interesting}
        let table = GroupTable::from_members(4, vec![vec![0, 1, 2], vec![0, 3]]).unwrap();
        let pre = array![
            [1.0, 2.0, 3.0, 4.0],
            [5.0, 6.0, 7.0, 8.0],
            [9.0, 10.0, 11.0, 12.0],
            [-1.0, -2.0, -3.0, -4.0]
        ];
        let g = init_group_embeddings(&table, &EmbeddingMatrix::new(pre.clone()).unwrap()).unwrap();
        // good: dims 0 and 2 to g1 (bucket 0), dims 1 and 3 to g2 (bucket 1).
        let mut router = TableRouter::constant(4, 4);
        router.buckets[[0, 1]] = 1;
        router.buckets[[0, 3]] = 1;
        let shared = SharedEmbedding::with_router(&table, g.clone(), &pre, &router).unwrap();
        let e = shared.values();
        assert_eq!(e[[0, 0]], g.values[[0, 0]]);
        assert_eq!(e[[0, 0]], e[[1, 0]]);
        assert_eq!(e[[0, 2]], e[[1, 2]]);
        assert_eq!(e[[0, 2]], g.values[[0, 2]]);
        assert_eq!(e[[0, 1]], e[[3, 1]]);
        assert_eq!(e[[0, 1]], g.values[[1, 1]]);
    }

    #[test]
    fn ungrouped_rows_are_private_copies() {
        let table = GroupTable::from_members(3, vec![vec![0, 1]]).unwrap();
        let pre = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]];
        let g = init_group_embeddings(&table, &EmbeddingMatrix::new(pre.clone()).unwrap()).unwrap();
        let mut shared = init_shared(&table, g, &pre, &HashSpec::new(3, true)).unwrap();
        assert_eq!(shared.plan().private_rows(), &[2, 3]);
        assert_eq!(shared.values().row(2), pre.row(2));
        assert_eq!(shared.values().row(3), pre.row(3));
        shared.group_values_mut().fill(100.0);
        shared.sync_forward();
        assert_eq!(shared.values().row(2), pre.row(2));
        assert!(shared.values().row(0).iter().all(|v| v.abs() == 100.0));
    }

    #[test]
    fn sync_is_idempotent_and_tracks_groups() {
        let table = GroupTable::from_members(3, vec![vec![0, 1], vec![1, 2]]).unwrap();
        let pre = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]];
        let g = init_group_embeddings(&table, &EmbeddingMatrix::new(pre.clone()).unwrap()).unwrap();
        let mut shared = init_shared(&table, g, &pre, &HashSpec::new(5, true)).unwrap();
        shared.group_values_mut()[[0, 1]] += 1.5;
        shared.sync_forward();
        let once = shared.values().clone();
        shared.sync_forward();
        assert_eq!(&once, shared.values());
        for i in 0..3 {
            for j in 0..3 {
                let k = shared.plan().group_at(i, j).unwrap();
                let s = shared.plan().sign_at(i, j) as f64;
                assert_eq!(once[[i, j]], shared.groups().values[[k, j]] * s);
            }
        }
    }

    #[test]
    fn aggregate_single_word_single_group() {
        let table = GroupTable::singletons(1);
        let grad = array![[0.5, -1.5, 2.0]];
        let out = aggregate_gradients(&grad, &table, &HashSpec::new(0, false)).unwrap();
        assert_eq!(out, grad);
    }

    #[test]
    fn aggregate_sums_colliding_words_and_applies_sign() {
        let table = GroupTable::from_members(2, vec![vec![0, 1]]).unwrap();
        let grad = array![[0.25, 1.0], [0.5, 3.0]];
        let mut router = TableRouter::constant(2, 2);
        let out = aggregate_gradients(&grad, &table, &router).unwrap();
        assert_eq!(out, array![[0.75, 4.0]]);
        router.signs[[1, 1]] = -1;
        let out = aggregate_gradients(&grad, &table, &router).unwrap();
        assert_eq!(out, array![[0.75, -2.0]]);
    }

    #[test]
    fn aggregate_rejects_shape_mismatch() {
        let table = GroupTable::singletons(2);
        let spec = HashSpec::new(0, true);
        let pre = array![[1.0, 2.0], [3.0, 4.0]];
        let g = init_group_embeddings(&table, &EmbeddingMatrix::new(pre.clone()).unwrap()).unwrap();
        let shared = init_shared(&table, g, &pre, &spec).unwrap();
        assert!(shared.aggregate_gradients(&Array2::zeros((2, 3))).is_err());
        assert!(aggregate_gradients(&Array2::zeros((1, 2)), &table, &spec).is_err());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let table = GroupTable::singletons(2);
        let g = GroupEmbeddings {
            values: Array2::zeros((2, 3)),
            member_counts: vec![1, 1],
        };
        let pre = Array2::zeros((2, 2));
        assert!(init_shared(&table, g, &pre, &HashSpec::new(0, true)).is_err());
    }
}
