//! Feature-label conditioning maps: the exact multilinear (outer-product) map,
//! its randomized approximation, and the threshold dispatch between them.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ImedError, Result};
use crate::tape::{Tape, Var};

/// Products `d_f * d_g` up to and including this use the exact map.
pub const ML_THRESHOLD: usize = 4096;

/// Conditioning mode actually used for a given geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CondMode {
    Ml,
    Rml,
}

/// Frozen random projections for the randomized multilinear map.
///
/// Sampled once from the standard normal distribution and never updated by
/// any optimizer; persisted as a seed and regenerated bit-identically.
#[derive(Debug, Clone)]
pub struct RandomProjection {
    pub w_f: Array2<f64>,
    pub w_g: Array2<f64>,
    pub d: usize,
    pub seed: u64,
}

impl RandomProjection {
    pub fn new(seed: u64, d: usize, d_f: usize, d_g: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sample = |rows: usize, cols: usize| {
            Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
        };
        let w_f = sample(d, d_f);
        let w_g = sample(d, d_g);
        RandomProjection { w_f, w_g, d, seed }
    }

    pub fn d_f(&self) -> usize {
        self.w_f.ncols()
    }

    pub fn d_g(&self) -> usize {
        self.w_g.ncols()
    }
}

/// Which map [`condition`] selects for a `(d_f, d_g)` geometry.
pub fn mode_for(d_f: usize, d_g: usize) -> CondMode {
    if d_f * d_g <= ML_THRESHOLD {
        CondMode::Ml
    } else {
        CondMode::Rml
    }
}

/// Exact multilinear map, batched: row `b` is the row-major flattened outer
/// product `f_b (x) g_b`, so `out[b, k*d_g + j] = f[b,k] * g[b,j]`.
pub fn t_ml(tape: &mut Tape, f: Var, g: Var) -> Var {
    tape.row_outer(f, g)
}

/// Randomized multilinear map `(1/sqrt(d)) (W_f f) . (W_g g)`, batched.
pub fn t_rml(tape: &mut Tape, proj: &RandomProjection, f: Var, g: Var) -> Result<Var> {
    if tape.value(f).ncols() != proj.d_f() {
        return Err(ImedError::dimension(
            "t_rml feature",
            format!("{}", proj.d_f()),
            format!("{}", tape.value(f).ncols()),
        ));
    }
    if tape.value(g).ncols() != proj.d_g() {
        return Err(ImedError::dimension(
            "t_rml label",
            format!("{}", proj.d_g()),
            format!("{}", tape.value(g).ncols()),
        ));
    }
    let wf_t = tape.leaf(proj.w_f.t().to_owned());
    let wg_t = tape.leaf(proj.w_g.t().to_owned());
    let pf = tape.matmul(f, wf_t);
    let pg = tape.matmul(g, wg_t);
    let prod = tape.mul(pf, pg);
    Ok(tape.scale(prod, 1.0 / (proj.d as f64).sqrt()))
}

/// Threshold dispatch: exact map when `d_f * d_g <= 4096`, randomized
/// otherwise (requires a projection).
pub fn condition(
    tape: &mut Tape,
    proj: Option<&RandomProjection>,
    f: Var,
    g: Var,
) -> Result<(Var, CondMode)> {
    let d_f = tape.value(f).ncols();
    let d_g = tape.value(g).ncols();
    match mode_for(d_f, d_g) {
        CondMode::Ml => Ok((t_ml(tape, f, g), CondMode::Ml)),
        CondMode::Rml => {
            let proj = proj.ok_or(ImedError::MissingProjection {
                threshold: ML_THRESHOLD,
                product: d_f * d_g,
            })?;
            Ok((t_rml(tape, proj, f, g)?, CondMode::Rml))
        }
    }
}

/// Concatenates per-component conditioning batches in component order.
pub fn assemble_v1(tape: &mut Tape, conds: &[Var]) -> Result<Var> {
    if conds.is_empty() {
        return Err(ImedError::config("assemble_v1 needs at least one input"));
    }
    let b = tape.value(conds[0]).nrows();
    let len = tape.value(conds[0]).ncols();
    for &c in conds {
        if tape.value(c).nrows() != b || tape.value(c).ncols() != len {
            return Err(ImedError::dimension(
                "assemble_v1",
                format!("{b}x{len}"),
                format!("{}x{}", tape.value(c).nrows(), tape.value(c).ncols()),
            ));
        }
    }
    Ok(tape.concat_cols(conds))
}
