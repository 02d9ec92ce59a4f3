//! The ensemble model: an endogeny network predicting per-instance fusion
//! parameters from conditioning features, a fusion sub-network of shuffle
//! linear layers consuming the concatenated component features, an affine
//! ensemble head, and a conditional domain discriminator.

use std::rc::Rc;

use indexmap::IndexMap;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{condition, mode_for, CondMode, RandomProjection};
use crate::error::{ImedError, Result};
use crate::nn::{Affine, Mlp, ParamStore};
use crate::shuffle::{FusionParamLayout, ShuffleLinearSpec, ShuffleTable, DEFAULT_TAU};
use crate::tape::{Tape, Var};

/// How component features are fused into the ensemble feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Shuffle linear layers (sparse, grouped).
    Shuffle,
    /// Fully connected fusion layers (a shuffle layer with `h = 1`).
    Dense,
    /// Arithmetic mean of component features; no fusion parameters.
    Average,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleConfig {
    /// Number of component models feeding the ensemble.
    pub n: usize,
    pub d_f: usize,
    pub d_g: usize,
    /// Group count of the shuffle layers.
    pub h: usize,
    /// Sharing threshold; blocks are shared across groups when `h < tau`.
    pub tau: usize,
    pub fusion_depth: usize,
    pub fusion_kind: FusionKind,
    /// When false the fusion parameters are owned and trained directly
    /// instead of being predicted per instance.
    pub instance_aware: bool,
    pub endogeny_hidden: usize,
    pub disc_hidden: usize,
    /// Projection dimension of the randomized conditioning map.
    pub d_rml: usize,
    /// Feed raw logits (not softmax) into the conditioning map.
    pub raw_logit_conditioning: bool,
    pub seed: u64,
}

impl EnsembleConfig {
    pub fn new(n: usize, d_f: usize, d_g: usize) -> Self {
        EnsembleConfig {
            n,
            d_f,
            d_g,
            h: 4,
            tau: DEFAULT_TAU,
            fusion_depth: 2,
            fusion_kind: FusionKind::Shuffle,
            instance_aware: true,
            endogeny_hidden: 256,
            disc_hidden: 1024,
            d_rml: 1024,
            raw_logit_conditioning: false,
            seed: 0,
        }
    }

    /// Conditioning vector length for one component.
    pub fn cond_len(&self) -> usize {
        match mode_for(self.d_f, self.d_g) {
            CondMode::Ml => self.d_f * self.d_g,
            CondMode::Rml => self.d_rml,
        }
    }

    /// Widths of the fusion sub-network: `n*d_f` in, `d_f` out, full width
    /// in between.
    pub fn fusion_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.n * self.d_f; self.fusion_depth];
        dims.push(self.d_f);
        dims
    }
}

/// The ensemble model `E` plus head `J` and discriminator `D`.
#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub config: EnsembleConfig,
    /// Hypernetwork mapping V1 to the flat fusion parameter vector; absent
    /// for averaging fusion or non-instance-aware training.
    pub endogeny: Option<Mlp>,
    pub fusion_tables: Vec<Rc<ShuffleTable>>,
    pub layout: FusionParamLayout,
    /// Names of owned fusion parameter rows (non-instance-aware mode).
    pub owned_fusion: Vec<String>,
    pub head: Affine,
    pub disc: Mlp,
    pub proj: Option<RandomProjection>,
}

impl EnsembleModel {
    pub fn init(store: &mut ParamStore, config: EnsembleConfig) -> Result<Self> {
        if config.n < 2 {
            return Err(ImedError::config("an ensemble needs at least 2 components"));
        }
        if config.fusion_depth == 0 {
            return Err(ImedError::config("fusion depth must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let (fusion_tables, layout) = match config.fusion_kind {
            FusionKind::Average => (Vec::new(), FusionParamLayout::from_param_counts(&[], &[])),
            kind => {
                let dims = config.fusion_dims();
                let mut tables = Vec::new();
                let mut shapes = Vec::new();
                let mut counts = Vec::new();
                for w in dims.windows(2) {
                    let spec = match kind {
                        FusionKind::Shuffle => {
                            ShuffleLinearSpec::with_tau(w[0], w[1], config.h, config.tau)?
                        }
                        FusionKind::Dense => ShuffleLinearSpec::with_tau(w[0], w[1], 1, 1)?,
                        FusionKind::Average => unreachable!(),
                    };
                    shapes.push((w[0], w[1]));
                    counts.push(spec.param_count());
                    tables.push(ShuffleTable::new(spec));
                }
                (tables, FusionParamLayout::from_param_counts(&shapes, &counts))
            }
        };
        let p_total = layout.total_len();

        let endogeny = if config.instance_aware && config.fusion_kind != FusionKind::Average {
            let dims = [
                config.n * config.cond_len(),
                config.endogeny_hidden,
                config.endogeny_hidden,
                p_total,
            ];
            let mlp = Mlp::init(store, &mut rng, "ens.endo", &dims);
            // Scale the final layer per fusion block so the first fusion
            // outputs start at unit-order variance.
            let fc_last = &mlp.layers[2];
            for (idx, table) in fusion_tables.iter().enumerate() {
                let fan_in = (table.spec.d_i / table.spec.h).max(1);
                let s = 1.0 / (fan_in as f64).sqrt();
                let range = layout.range(idx);
                {
                    let w = store.get_mut(&fc_last.weight);
                    for mut col in w.columns_mut().into_iter().skip(range.start).take(range.len())
                    {
                        col.mapv_inplace(|v| v * s);
                    }
                }
                let b = store.get_mut(&fc_last.bias);
                for j in range {
                    b[(0, j)] *= s;
                }
            }
            Some(mlp)
        } else {
            None
        };

        let owned_fusion = if !config.instance_aware && config.fusion_kind != FusionKind::Average
        {
            let mut names = Vec::new();
            for (idx, table) in fusion_tables.iter().enumerate() {
                let name = format!("ens.fusion{idx}.p");
                let fan_in = (table.spec.d_i / table.spec.h).max(1);
                let w = crate::nn::init_weight(&mut rng, 1, table.spec.param_count(), fan_in);
                store.insert(&name, w);
                names.push(name);
            }
            names
        } else {
            Vec::new()
        };

        let head = Affine::init(store, &mut rng, "ens.head", config.d_f, config.d_g);
        let disc = Mlp::init(
            store,
            &mut rng,
            "ens.disc",
            &[config.cond_len(), config.disc_hidden, config.disc_hidden, 1],
        );
        let proj = match mode_for(config.d_f, config.d_g) {
            CondMode::Ml => None,
            CondMode::Rml => Some(RandomProjection::new(
                config.seed.wrapping_add(0x517c),
                config.d_rml,
                config.d_f,
                config.d_g,
            )),
        };

        Ok(EnsembleModel {
            config,
            endogeny,
            fusion_tables,
            layout,
            owned_fusion,
            head,
            disc,
            proj,
        })
    }

    /// Parameters of the ensemble body and head (`theta_E`, `theta_J`).
    pub fn ej_param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if let Some(e) = &self.endogeny {
            names.extend(e.param_names());
        }
        names.extend(self.owned_fusion.iter().cloned());
        names.extend(self.head.param_names());
        names
    }

    pub fn disc_param_names(&self) -> Vec<String> {
        self.disc.param_names()
    }

    pub fn all_param_names(&self) -> Vec<String> {
        let mut names = self.ej_param_names();
        names.extend(self.disc_param_names());
        names
    }
}

/// Concatenates component feature batches in component order: V2.
pub fn assemble_v2(tape: &mut Tape, features: &[Var]) -> Result<Var> {
    if features.is_empty() {
        return Err(ImedError::config("assemble_v2 needs at least one input"));
    }
    let b = tape.value(features[0]).nrows();
    let w = tape.value(features[0]).ncols();
    for &f in features {
        if tape.value(f).dim() != (b, w) {
            return Err(ImedError::dimension(
                "assemble_v2",
                format!("{b}x{w}"),
                format!("{}x{}", tape.value(f).nrows(), tape.value(f).ncols()),
            ));
        }
    }
    Ok(tape.concat_cols(features))
}

/// Output of one ensemble forward pass.
pub struct EnsembleOutput {
    pub feature: Var,
    pub logits: Var,
}

/// Runs the ensemble on component outputs already present on the tape.
///
/// Per instance: conditioning of every `(f_i, g_i)` pair is concatenated into
/// V1, the endogeny network maps V1 to fusion parameters, V2 (concatenated
/// features) flows through the per-instance fusion sub-network (ReLU between
/// layers, none after the last), and the head maps the fused feature to
/// logits.
pub fn ensemble_forward(
    tape: &mut Tape,
    vars: &IndexMap<String, Var>,
    model: &EnsembleModel,
    features: &[Var],
    logits: &[Var],
) -> Result<EnsembleOutput> {
    ensemble_forward_with_params(tape, vars, model, features, logits, None)
}

/// [`ensemble_forward`] with an optional override of the flat fusion
/// parameter vector (applied to every instance), bypassing the endogeny
/// network.
pub fn ensemble_forward_with_params(
    tape: &mut Tape,
    vars: &IndexMap<String, Var>,
    model: &EnsembleModel,
    features: &[Var],
    logits: &[Var],
    override_params: Option<&Array1<f64>>,
) -> Result<EnsembleOutput> {
    let cfg = &model.config;
    if features.len() != cfg.n || logits.len() != cfg.n {
        return Err(ImedError::dimension(
            "ensemble components",
            format!("{}", cfg.n),
            format!("{}/{}", features.len(), logits.len()),
        ));
    }
    for (i, &f) in features.iter().enumerate() {
        if tape.value(f).ncols() != cfg.d_f {
            return Err(ImedError::dimension(
                format!("component {i} feature"),
                format!("{}", cfg.d_f),
                format!("{}", tape.value(f).ncols()),
            ));
        }
    }

    let v2 = assemble_v2(tape, features)?;

    let feature = match cfg.fusion_kind {
        FusionKind::Average => {
            let mut acc = features[0];
            for &f in &features[1..] {
                acc = tape.add(acc, f);
            }
            tape.scale(acc, 1.0 / cfg.n as f64)
        }
        _ => {
            let params: Option<Var> = if let Some(p) = override_params {
                if p.len() != model.layout.total_len() {
                    return Err(ImedError::dimension(
                        "fusion params override",
                        format!("{}", model.layout.total_len()),
                        format!("{}", p.len()),
                    ));
                }
                let row = p.clone().into_shape_with_order((1, p.len())).unwrap();
                Some(tape.leaf(row))
            } else if cfg.instance_aware {
                let conds: Vec<Var> = features
                    .iter()
                    .zip(logits.iter())
                    .map(|(&f, &g)| {
                        let g_in = if cfg.raw_logit_conditioning {
                            g
                        } else {
                            tape.softmax(g)
                        };
                        condition(tape, model.proj.as_ref(), f, g_in).map(|(c, _)| c)
                    })
                    .collect::<Result<_>>()?;
                let v1 = crate::conditioning::assemble_v1(tape, &conds)?;
                let endo = model.endogeny.as_ref().expect("endogeny present");
                Some(endo.forward(tape, vars, v1))
            } else {
                None
            };

            let mut x = v2;
            let depth = model.fusion_tables.len();
            for (l, table) in model.fusion_tables.iter().enumerate() {
                let p = match params {
                    Some(p) => tape.slice_cols(p, model.layout.range(l)),
                    None => vars[&model.owned_fusion[l]],
                };
                x = tape.shuffle_forward(table.clone(), p, x);
                if l + 1 < depth {
                    x = tape.relu(x);
                }
            }
            x
        }
    };

    let out_logits = model.head.forward(tape, vars, feature);
    Ok(EnsembleOutput {
        feature,
        logits: out_logits,
    })
}

/// Constructs the flat fusion parameter vector that makes a depth-1 fusion
/// layer output exactly the arithmetic mean of the component features.
///
/// Requires `d_o = d_f`, `d_i = n*d_f` and that every diagonal position
/// `(i*d_f + k, k)` lies in the layer's support with a consistent slot
/// assignment; otherwise the wiring cannot represent the average and an
/// error explains which position failed.
pub fn averaging_params(model: &EnsembleModel) -> Result<Array1<f64>> {
    if model.fusion_tables.len() != 1 {
        return Err(ImedError::config(format!(
            "averaging construction needs fusion depth 1, got {}",
            model.fusion_tables.len()
        )));
    }
    let table = &model.fusion_tables[0];
    let spec = table.spec;
    let n = model.config.n;
    let d_f = model.config.d_f;
    if spec.d_o != d_f || spec.d_i != n * d_f {
        return Err(ImedError::config(format!(
            "averaging construction needs d_i = n*d_f and d_o = d_f (got {}x{})",
            spec.d_i, spec.d_o
        )));
    }

    // Desired dense matrix: A[i*d_f + k, k] = 1/n, all else 0.
    let desired = |r: usize, c: usize| -> f64 {
        if r % d_f == c {
            1.0 / n as f64
        } else {
            0.0
        }
    };

    let mut assigned: Vec<Option<f64>> = vec![None; spec.param_count()];
    let mut covered = vec![false; spec.d_i * spec.d_o];
    for &(r, c, k) in &table.triplets {
        let (r, c, k) = (r as usize, c as usize, k as usize);
        covered[r * spec.d_o + c] = true;
        let want = desired(r, c);
        match assigned[k] {
            None => assigned[k] = Some(want),
            Some(v) if (v - want).abs() < 1e-15 => {}
            Some(v) => {
                return Err(ImedError::config(format!(
                    "wiring shares slot {k} between positions needing {v} and {want}; \
                     the diagonal average is not representable for h={}",
                    spec.h
                )))
            }
        }
    }
    for i in 0..n {
        for k in 0..d_f {
            let (r, c) = (i * d_f + k, k);
            if !covered[r * spec.d_o + c] {
                return Err(ImedError::config(format!(
                    "diagonal position ({r}, {c}) is outside the shuffle support for h={}; \
                     each output must read the matching coordinate of every component",
                    spec.h
                )));
            }
        }
    }
    Ok(Array1::from_iter(
        assigned.into_iter().map(|v| v.unwrap_or(0.0)),
    ))
}

/// Evaluates label averaging and feature averaging under one shared affine
/// head: returns `(mean_i(W f_i + b), W mean_i(f_i) + b)`.
pub fn lemma2_check(
    head_w: &Array2<f64>,
    head_b: Option<&Array2<f64>>,
    features: &[Array2<f64>],
) -> (Array2<f64>, Array2<f64>) {
    assert!(!features.is_empty());
    let n = features.len() as f64;
    let mut label_sum: Option<Array2<f64>> = None;
    let mut feat_sum: Option<Array2<f64>> = None;
    for f in features {
        let mut g = f.dot(head_w);
        if let Some(b) = head_b {
            g += b;
        }
        label_sum = Some(match label_sum {
            Some(acc) => acc + &g,
            None => g,
        });
        feat_sum = Some(match feat_sum {
            Some(acc) => acc + f,
            None => f.clone(),
        });
    }
    let label_avg = label_sum.unwrap() / n;
    let mut feat_avg_label = (feat_sum.unwrap() / n).dot(head_w);
    if let Some(b) = head_b {
        feat_avg_label += b;
    }
    (label_avg, feat_avg_label)
}
