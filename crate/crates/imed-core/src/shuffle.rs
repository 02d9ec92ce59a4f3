//! Shuffle linear layers: grouped sparse linear maps with shuffled subgroup
//! connectivity and optional cross-group parameter sharing.
//!
//! The input is split into `h` groups, each group into `h` subgroups; output
//! group `j` is a linear function of subgroup `j` taken from every input
//! group. With sharing enabled the same weight block is replicated across
//! output groups.

use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ImedError, Result};

/// Sharing threshold default: parameters are shared across groups when `h` is
/// below this.
pub const DEFAULT_TAU: usize = 128;

/// Geometry of one shuffle linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShuffleLinearSpec {
    pub d_i: usize,
    pub d_o: usize,
    pub h: usize,
    pub tau: usize,
}

impl ShuffleLinearSpec {
    /// Validates divisibility: `h | d_i`, `h | d_o` and `h^2 | d_i` (each
    /// input group splits into `h` subgroups).
    pub fn new(d_i: usize, d_o: usize, h: usize) -> Result<Self> {
        Self::with_tau(d_i, d_o, h, DEFAULT_TAU)
    }

    pub fn with_tau(d_i: usize, d_o: usize, h: usize, tau: usize) -> Result<Self> {
        if h == 0 || d_i == 0 || d_o == 0 {
            return Err(ImedError::config("shuffle layer dims must be positive"));
        }
        if d_i % h != 0 || d_o % h != 0 {
            return Err(ImedError::config(format!(
                "group count h={h} must divide d_i={d_i} and d_o={d_o}"
            )));
        }
        if (d_i / h) % h != 0 {
            return Err(ImedError::config(format!(
                "subgroup split requires h^2 | d_i (d_i={d_i}, h={h})"
            )));
        }
        Ok(ShuffleLinearSpec { d_i, d_o, h, tau })
    }

    /// Whether weight blocks are shared across output groups (`h < tau`).
    pub fn shared(&self) -> bool {
        self.h < self.tau
    }

    /// Number of free parameters of this layer.
    pub fn param_count(&self) -> usize {
        param_count_formula(self.d_i, self.d_o, self.h, self.shared())
    }
}

/// Parameter-count formula, usable without constructing a valid spec:
/// `d_i*d_o/h` unshared, `d_i*d_o/h^2` shared.
pub fn param_count_formula(d_i: usize, d_o: usize, h: usize, shared: bool) -> usize {
    let base = d_i * d_o / h;
    if shared {
        base / h
    } else {
        base
    }
}

/// Precomputed connectivity of a shuffle layer.
///
/// Each triplet `(r, c, k)` states that dense-matrix position `W[r, c]` is
/// backed by flat parameter slot `k`; in shared mode several positions map to
/// the same slot.
#[derive(Debug)]
pub struct ShuffleTable {
    pub spec: ShuffleLinearSpec,
    pub triplets: Vec<(u32, u32, u32)>,
}

impl ShuffleTable {
    pub fn new(spec: ShuffleLinearSpec) -> Rc<Self> {
        let h = spec.h;
        let group_i = spec.d_i / h; // input group width
        let sub = spec.d_i / (h * h); // subgroup width
        let group_o = spec.d_o / h; // output group width
        let block_rows = spec.d_i / h; // concatenated subgroups feeding one output group
        let mut triplets = Vec::with_capacity(spec.d_i * spec.d_o / h);
        for j in 0..h {
            for i in 0..h {
                for t in 0..sub {
                    let r = i * group_i + j * sub + t;
                    let block_r = i * sub + t;
                    for c_in in 0..group_o {
                        let c = j * group_o + c_in;
                        let k = if spec.shared() {
                            block_r * group_o + c_in
                        } else {
                            j * block_rows * group_o + block_r * group_o + c_in
                        };
                        triplets.push((r as u32, c as u32, k as u32));
                    }
                }
            }
        }
        debug_assert_eq!(triplets.len(), spec.d_i * spec.d_o / h);
        Rc::new(ShuffleTable { spec, triplets })
    }

    /// Materializes the dense `d_i x d_o` weight matrix from flat parameters.
    pub fn dense_weight(&self, params: &[f64]) -> Result<Array2<f64>> {
        if params.len() != self.spec.param_count() {
            return Err(ImedError::dimension(
                "shuffle params",
                format!("{}", self.spec.param_count()),
                format!("{}", params.len()),
            ));
        }
        let mut w = Array2::zeros((self.spec.d_i, self.spec.d_o));
        for &(r, c, k) in &self.triplets {
            w[(r as usize, c as usize)] = params[k as usize];
        }
        Ok(w)
    }
}

/// Forward with owned parameters: `y = x W(params)`.
pub fn forward(table: &ShuffleTable, params: &[f64], x: &Array2<f64>) -> Result<Array2<f64>> {
    if params.len() != table.spec.param_count() {
        return Err(ImedError::dimension(
            "shuffle params",
            format!("{}", table.spec.param_count()),
            format!("{}", params.len()),
        ));
    }
    if x.ncols() != table.spec.d_i {
        return Err(ImedError::dimension(
            "shuffle input",
            format!("{}", table.spec.d_i),
            format!("{}", x.ncols()),
        ));
    }
    let b = x.nrows();
    let mut y = Array2::zeros((b, table.spec.d_o));
    for i in 0..b {
        for &(r, c, k) in &table.triplets {
            y[(i, c as usize)] += x[(i, r as usize)] * params[k as usize];
        }
    }
    Ok(y)
}

/// Forward with one parameter row per batch row.
pub fn forward_per_instance(
    table: &ShuffleTable,
    params: &Array2<f64>,
    x: &Array2<f64>,
) -> Result<Array2<f64>> {
    if params.nrows() != x.nrows() {
        return Err(ImedError::dimension(
            "per-instance shuffle batch",
            format!("{} param rows", x.nrows()),
            format!("{}", params.nrows()),
        ));
    }
    if params.ncols() != table.spec.param_count() {
        return Err(ImedError::dimension(
            "shuffle params",
            format!("{}", table.spec.param_count()),
            format!("{}", params.ncols()),
        ));
    }
    if x.ncols() != table.spec.d_i {
        return Err(ImedError::dimension(
            "shuffle input",
            format!("{}", table.spec.d_i),
            format!("{}", x.ncols()),
        ));
    }
    let b = x.nrows();
    let mut y = Array2::zeros((b, table.spec.d_o));
    for i in 0..b {
        for &(r, c, k) in &table.triplets {
            y[(i, c as usize)] += x[(i, r as usize)] * params[(i, k as usize)];
        }
    }
    Ok(y)
}

/// How a flat parameter vector maps onto every layer of a fusion sub-network.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct FusionParamLayout {
    pub blocks: Vec<LayoutBlock>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct LayoutBlock {
    pub layer_index: usize,
    /// `(d_i, d_o)` of the layer the block parameterizes.
    pub block_shape: (usize, usize),
    pub offset: usize,
    pub len: usize,
}

impl FusionParamLayout {
    pub fn from_param_counts(shapes: &[(usize, usize)], counts: &[usize]) -> Self {
        assert_eq!(shapes.len(), counts.len());
        let mut blocks = Vec::with_capacity(counts.len());
        let mut offset = 0;
        for (idx, (&shape, &len)) in shapes.iter().zip(counts.iter()).enumerate() {
            blocks.push(LayoutBlock {
                layer_index: idx,
                block_shape: shape,
                offset,
                len,
            });
            offset += len;
        }
        FusionParamLayout { blocks }
    }

    pub fn total_len(&self) -> usize {
        self.blocks.iter().map(|b| b.len).sum()
    }

    pub fn range(&self, layer: usize) -> std::ops::Range<usize> {
        let b = &self.blocks[layer];
        b.offset..b.offset + b.len
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::gradcheck::{finite_diff, max_rel_err};
    use ndarray::array;
    use ndarray::Array1;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn h1_is_fully_connected() {
        let spec = ShuffleLinearSpec::with_tau(6, 4, 1, 1).unwrap();
        assert!(!spec.shared());
        assert_eq!(spec.param_count(), 24);
        let table = ShuffleTable::new(spec);
        // every (r, c) position appears exactly once
        let mut seen = vec![false; 24];
        for &(r, c, k) in &table.triplets {
            assert!(!seen[(r * 4 + c) as usize]);
            seen[(r * 4 + c) as usize] = true;
            let _ = k;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn wiring_8_8_h2_mask_and_count() {
        // Enumerate the nonzero mask: d_i=8, d_o=8, h=2, non-shared.
        let spec = ShuffleLinearSpec::with_tau(8, 8, 2, 2).unwrap();
        assert_eq!(spec.param_count(), 32); // d_i*d_o/h
        let table = ShuffleTable::new(spec);
        let params: Vec<f64> = (1..=32).map(|v| v as f64).collect();
        let w = table.dense_weight(&params).unwrap();
        let nnz = w.iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nnz, 32);
        // Output group 0 (cols 0..4) reads subgroup 0 of input group 0
        // (rows 0,1) and subgroup 0 of input group 1 (rows 4,5).
        for c in 0..4 {
            for r in [0usize, 1, 4, 5] {
                assert_ne!(w[(r, c)], 0.0);
            }
            for r in [2usize, 3, 6, 7] {
                assert_eq!(w[(r, c)], 0.0);
            }
        }
        // Output group 1 (cols 4..8) reads rows {2,3} and {6,7}.
        for c in 4..8 {
            for r in [2usize, 3, 6, 7] {
                assert_ne!(w[(r, c)], 0.0);
            }
            for r in [0usize, 1, 4, 5] {
                assert_eq!(w[(r, c)], 0.0);
            }
        }
    }

    #[test]
    fn param_count_formula_examples() {
        // Pure formula arithmetic, independent of wiring validity.
        assert_eq!(param_count_formula(512, 256, 128, false), 1024);
        assert_eq!(param_count_formula(8, 8, 2, false), 32);
        assert_eq!(param_count_formula(8, 8, 2, true), 16);
    }

    #[test]
    fn shared_mode_replicates_blocks() {
        let spec = ShuffleLinearSpec::with_tau(8, 8, 2, 128).unwrap();
        assert!(spec.shared());
        assert_eq!(spec.param_count(), 16); // d_i*d_o/h^2
        let table = ShuffleTable::new(spec);
        let params: Vec<f64> = (1..=16).map(|v| v as f64).collect();
        let w = table.dense_weight(&params).unwrap();
        // Block feeding output group 0 equals block feeding output group 1
        // after the input shuffle: W[0..2,0..4] == W[2..4,4..8] etc.
        for t in 0..2 {
            for c in 0..4 {
                assert_eq!(w[(t, c)], w[(2 + t, 4 + c)]);
                assert_eq!(w[(4 + t, c)], w[(6 + t, 4 + c)]);
            }
        }
    }

    #[test]
    fn forward_zero_params_zero_output() {
        let spec = ShuffleLinearSpec::new(8, 8, 2).unwrap();
        let table = ShuffleTable::new(spec);
        let x = Array2::from_elem((3, 8), 1.5);
        let y = forward(&table, &vec![0.0; spec.param_count()], &x).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn h1_equals_dense_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = ShuffleLinearSpec::with_tau(6, 4, 1, 1).unwrap();
        let table = ShuffleTable::new(spec);
        let w_dense = random_matrix(&mut rng, 6, 4);
        // params laid out row-major over the single block
        let params: Vec<f64> = w_dense.iter().cloned().collect();
        let x = random_matrix(&mut rng, 5, 6);
        let y = forward(&table, &params, &x).unwrap();
        let expect = x.dot(&w_dense);
        assert!(max_rel_err(&y, &expect) < 1e-12);
    }

    #[test]
    fn forward_matches_dense_materialization_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for tau in [1usize, 128] {
            let spec = ShuffleLinearSpec::with_tau(16, 8, 2, tau).unwrap();
            let table = ShuffleTable::new(spec);
            let params: Vec<f64> = (0..spec.param_count())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let x = random_matrix(&mut rng, 4, 16);
            let y = forward(&table, &params, &x).unwrap();
            let oracle = x.dot(&table.dense_weight(&params).unwrap());
            assert!(max_rel_err(&y, &oracle) < 1e-6);
        }
    }

    #[test]
    fn per_instance_broadcast_and_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ShuffleLinearSpec::new(8, 8, 2).unwrap();
        let table = ShuffleTable::new(spec);
        let row: Vec<f64> = (0..spec.param_count())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let x = random_matrix(&mut rng, 3, 8);

        // identical rows == owned-parameter forward
        let stacked = Array2::from_shape_fn((3, row.len()), |(_, j)| row[j]);
        let per = forward_per_instance(&table, &stacked, &x).unwrap();
        let owned = forward(&table, &row, &x).unwrap();
        assert!(max_rel_err(&per, &owned) < 1e-12);

        // B=2 with distinct params equals two independent B=1 calls
        let p2 = random_matrix(&mut rng, 2, spec.param_count());
        let x2 = random_matrix(&mut rng, 2, 8);
        let both = forward_per_instance(&table, &p2, &x2).unwrap();
        for i in 0..2 {
            let pi = p2.row(i).insert_axis(ndarray::Axis(0)).to_owned();
            let xi = x2.row(i).insert_axis(ndarray::Axis(0)).to_owned();
            let yi = forward_per_instance(&table, &pi, &xi).unwrap();
            assert_eq!(yi.row(0), both.row(i));
        }
    }

    #[test]
    fn per_instance_batch_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ShuffleLinearSpec::new(8, 4, 2).unwrap();
        let table = ShuffleTable::new(spec);
        let p = random_matrix(&mut rng, 4, spec.param_count());
        let x = random_matrix(&mut rng, 4, 8);
        let perm = [2usize, 0, 3, 1];
        let y = forward_per_instance(&table, &p, &x).unwrap();
        let px = Array2::from_shape_fn(x.raw_dim(), |(i, j)| x[(perm[i], j)]);
        let pp = Array2::from_shape_fn(p.raw_dim(), |(i, j)| p[(perm[i], j)]);
        let py = forward_per_instance(&table, &pp, &px).unwrap();
        for i in 0..4 {
            assert_eq!(py.row(i), y.row(perm[i]));
        }
    }

    #[test]
    fn gradients_match_finite_differences_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = ShuffleLinearSpec::new(8, 4, 2).unwrap();
        let table = ShuffleTable::new(spec);
        let x0 = random_matrix(&mut rng, 3, 8);
        let weights = random_matrix(&mut rng, 1, 4); // mixing weights for a scalar loss

        for per_instance in [false, true] {
            let p_rows = if per_instance { 3 } else { 1 };
            let p0 = random_matrix(&mut rng, p_rows, spec.param_count());

            let eval = |p: &Array2<f64>, x: &Array2<f64>| {
                let mut t = Tape::new();
                let pv = t.leaf(p.clone());
                let xv = t.leaf(x.clone());
                let wv = t.leaf(weights.clone());
                let y = t.shuffle_forward(table.clone(), pv, xv);
                let wt = t.transpose(wv);
                let o = t.matmul(y, wt);
                let l = t.sum_all(o);
                (t, pv, xv, l)
            };

            let (t, pv, xv, l) = eval(&p0, &x0);
            let grads = t.backward(l);
            let gp = grads.get(pv, &t);
            let gx = grads.get(xv, &t);

            let fd_p = finite_diff(&p0, 1e-5, |p| {
                let (t, _, _, l) = eval(p, &x0);
                t.scalar(l)
            });
            let fd_x = finite_diff(&x0, 1e-5, |x| {
                let (t, _, _, l) = eval(&p0, x);
                t.scalar(l)
            });
            assert!(max_rel_err(&gp, &fd_p) < 1e-4);
            assert!(max_rel_err(&gx, &fd_x) < 1e-4);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ShuffleLinearSpec::new(8, 8, 3).is_err()); // h does not divide
        assert!(ShuffleLinearSpec::new(8, 8, 4).is_err()); // h^2 does not divide d_i
        assert!(ShuffleLinearSpec::new(512, 256, 128).is_err()); // h^2 > d_i
        assert!(ShuffleLinearSpec::new(0, 8, 1).is_err());
    }

    #[test]
    fn wrong_param_length_errors() {
        let spec = ShuffleLinearSpec::new(8, 8, 2).unwrap();
        let table = ShuffleTable::new(spec);
        let x = Array2::zeros((2, 8));
        assert!(forward(&table, &[0.0; 3], &x).is_err());
        let p = Array2::zeros((3, spec.param_count()));
        assert!(forward_per_instance(&table, &p, &x).is_err());
    }

    #[test]
    fn layout_offsets_contiguous() {
        let layout = FusionParamLayout::from_param_counts(&[(64, 64), (64, 32)], &[256, 128]);
        assert_eq!(layout.total_len(), 384);
        assert_eq!(layout.range(0), 0..256);
        assert_eq!(layout.range(1), 256..384);
    }

    proptest::proptest! {
        #[test]
        fn param_count_matches_formula_on_valid_grid(
            di_pow in 3u32..10, do_pow in 3u32..10, h_pow in 0u32..5,
        ) {
            let d_i = 1usize << di_pow;
            let d_o = 1usize << do_pow;
            let h = 1usize << h_pow;
            if d_i % h == 0 && d_o % h == 0 && (d_i / h) % h == 0 {
                let unshared = ShuffleLinearSpec::with_tau(d_i, d_o, h, h).unwrap();
                proptest::prop_assert_eq!(unshared.param_count(), d_i * d_o / h);
                let shared = ShuffleLinearSpec::with_tau(d_i, d_o, h, h + 1).unwrap();
                proptest::prop_assert_eq!(shared.param_count(), d_i * d_o / (h * h));
            }
        }

        #[test]
        fn sparsity_matches_param_count_unshared(seed in 0u64..64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = ShuffleLinearSpec::with_tau(16, 16, 2, 2).unwrap();
            let table = ShuffleTable::new(spec);
            let params: Vec<f64> = (0..spec.param_count())
                .map(|_| rng.gen_range(0.5..1.5))
                .collect();
            let w = table.dense_weight(&params).unwrap();
            let nnz = w.iter().filter(|&&v| v != 0.0).count();
            proptest::prop_assert_eq!(nnz, spec.param_count());
        }
    }

    #[test]
    fn dense_weight_row_param_order_is_block_row_major() {
        // Pin the layout so serialized parameters stay portable: slot k of an
        // unshared spec indexes (output group, block row, block col).
        let spec = ShuffleLinearSpec::with_tau(4, 4, 2, 2).unwrap();
        let table = ShuffleTable::new(spec);
        let params = Array1::linspace(1.0, spec.param_count() as f64, spec.param_count());
        let w = table.dense_weight(params.as_slice().unwrap()).unwrap();
        // group 0: rows {0, 2} (subgroup 0 of each input group), cols {0, 1}
        let expect = array![
            [1.0, 2.0, 0.0, 0.0],
            [0.0, 0.0, 5.0, 6.0],
            [3.0, 4.0, 0.0, 0.0],
            [0.0, 0.0, 7.0, 8.0],
        ];
        assert_eq!(w, expect);
    }
}
