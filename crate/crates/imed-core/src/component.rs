//! Component UDA models: small MLP feature extractors with affine classifier
//! heads, trained per method with their individual losses.
//!
//! Three methods are provided: plain source classification, an MMD-based
//! learner (source CE plus Gaussian-kernel MMD between domain features) and a
//! conditional-adversarial learner with its own small domain discriminator.

use indexmap::IndexMap;
use ndarray::{concatenate, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{condition, mode_for, CondMode, RandomProjection};
use crate::error::{ImedError, Result};
use crate::nn::{Affine, Mlp, ParamStore};
use crate::tape::{Tape, Var};

/// Which domain a mini-batch was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

/// A mini-batch of instances. Labels are present iff the batch is from the
/// source domain; target data is unlabeled.
#[derive(Debug, Clone)]
pub struct DomainBatch {
    inputs: Array2<f64>,
    labels: Option<Vec<usize>>,
    domain: Domain,
}

impl DomainBatch {
    pub fn source(inputs: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(ImedError::config("empty batch"));
        }
        if labels.len() != inputs.nrows() {
            return Err(ImedError::dimension(
                "source labels",
                format!("{}", inputs.nrows()),
                format!("{}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(ImedError::config(format!(
                "class index {bad} out of range (num_classes={num_classes})"
            )));
        }
        Ok(DomainBatch {
            inputs,
            labels: Some(labels),
            domain: Domain::Source,
        })
    }

    pub fn target(inputs: Array2<f64>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(ImedError::config("empty batch"));
        }
        Ok(DomainBatch {
            inputs,
            labels: None,
            domain: Domain::Target,
        })
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Training method of one component model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodTag {
    SourceOnly,
    JanLike,
    CdanLike,
}

/// MMD kernel bandwidth rule. The median heuristic is treated as a constant
/// of the batch (not differentiated through).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BandwidthRule {
    MedianPairwise,
    Fixed(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentConfig {
    pub d_x: usize,
    pub hidden: Vec<usize>,
    pub d_f: usize,
    pub d_g: usize,
    pub method: MethodTag,
    pub seed: u64,
    /// Weight on the MMD term (jan-like).
    pub mmd_weight: f64,
    /// Weight on the adversarial term (cdan-like).
    pub adv_weight: f64,
    pub bandwidth: BandwidthRule,
}

impl ComponentConfig {
    pub fn new(d_x: usize, d_f: usize, d_g: usize, method: MethodTag, seed: u64) -> Self {
        ComponentConfig {
            d_x,
            hidden: vec![64, 64],
            d_f,
            d_g,
            method,
            seed,
            mmd_weight: 1.0,
            adv_weight: 1.0,
            bandwidth: BandwidthRule::MedianPairwise,
        }
    }
}

/// One component model: backbone `F_i`, head `G_i`, plus method extras.
#[derive(Debug, Clone)]
pub struct ComponentModel {
    pub index: usize,
    pub config: ComponentConfig,
    pub backbone: Mlp,
    pub head: Affine,
    /// Per-component domain discriminator (cdan-like only).
    pub disc: Option<Mlp>,
    /// Frozen projection for the discriminator conditioning when
    /// `d_f * d_g` exceeds the exact-map threshold.
    pub proj: Option<RandomProjection>,
}

impl ComponentModel {
    /// Initializes parameters under `comp{index}.*`. When `shared_head` is
    /// given the model references those head parameters instead of creating
    /// its own.
    pub fn init(
        store: &mut ParamStore,
        index: usize,
        config: ComponentConfig,
        shared_head: Option<&Affine>,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut dims = vec![config.d_x];
        dims.extend_from_slice(&config.hidden);
        dims.push(config.d_f);
        let backbone = Mlp::init(store, &mut rng, &format!("comp{index}.backbone"), &dims);
        let head = match shared_head {
            Some(h) => h.clone(),
            None => Affine::init(
                store,
                &mut rng,
                &format!("comp{index}.head"),
                config.d_f,
                config.d_g,
            ),
        };
        let (disc, proj) = if config.method == MethodTag::CdanLike {
            let cond_len = match mode_for(config.d_f, config.d_g) {
                CondMode::Ml => config.d_f * config.d_g,
                CondMode::Rml => 1024,
            };
            let proj = match mode_for(config.d_f, config.d_g) {
                CondMode::Ml => None,
                CondMode::Rml => Some(RandomProjection::new(
                    config.seed.wrapping_add(0x9e37),
                    1024,
                    config.d_f,
                    config.d_g,
                )),
            };
            let disc = Mlp::init(
                store,
                &mut rng,
                &format!("comp{index}.disc"),
                &[cond_len, 64, 64, 1],
            );
            (Some(disc), proj)
        } else {
            (None, None)
        };
        ComponentModel {
            index,
            config,
            backbone,
            head,
            disc,
            proj,
        }
    }

    /// Shared-head helper: initializes the head once, outside any component.
    pub fn init_shared_head(store: &mut ParamStore, seed: u64, d_f: usize, d_g: usize) -> Affine {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Affine::init(store, &mut rng, "shared_head", d_f, d_g)
    }

    pub fn backbone_param_names(&self) -> Vec<String> {
        self.backbone.param_names()
    }

    pub fn head_param_names(&self) -> Vec<String> {
        self.head.param_names()
    }

    /// Backbone + head + any auxiliary (discriminator) parameters.
    pub fn all_param_names(&self) -> Vec<String> {
        let mut names = self.backbone_param_names();
        names.extend(self.head_param_names());
        if let Some(d) = &self.disc {
            names.extend(d.param_names());
        }
        names
    }

    /// Parameters counted toward model size (backbone + head, no training
    /// auxiliaries).
    pub fn model_param_names(&self) -> Vec<String> {
        let mut names = self.backbone_param_names();
        names.extend(self.head_param_names());
        names
    }
}

/// Runs one component on a batch: `(features, logits)` with
/// `logits = head(features)`.
pub fn forward_component(
    tape: &mut Tape,
    vars: &IndexMap<String, Var>,
    model: &ComponentModel,
    batch: &DomainBatch,
) -> Result<(Var, Var)> {
    if batch.inputs().ncols() != model.config.d_x {
        return Err(ImedError::dimension(
            format!("component {} input", model.index),
            format!("{}", model.config.d_x),
            format!("{}", batch.inputs().ncols()),
        ));
    }
    let x = tape.leaf(batch.inputs().clone());
    let features = model.backbone.forward(tape, vars, x);
    let logits = model.head.forward(tape, vars, features);
    Ok((features, logits))
}

/// Mean cross-entropy of `softmax(logits)` against integer labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Var {
    let (b, c) = tape.value(logits).dim();
    assert_eq!(b, labels.len(), "cross_entropy batch size");
    let mut one_hot = Array2::zeros((b, c));
    for (i, &y) in labels.iter().enumerate() {
        one_hot[(i, y)] = 1.0;
    }
    let ls = tape.log_softmax(logits);
    let oh = tape.leaf(one_hot);
    let picked = tape.mul(ls, oh);
    let total = tape.sum_all(picked);
    tape.scale(total, -1.0 / b as f64)
}

/// Squared pairwise Euclidean distances between the rows of `a` and `b`.
fn pairwise_sq_dists(tape: &mut Tape, a: Var, b: Var) -> Var {
    let aa = tape.mul(a, a);
    let ra = tape.sum_rows(aa); // Bx1
    let bb = tape.mul(b, b);
    let rb = tape.sum_rows(bb);
    let rbt = tape.transpose(rb); // 1xB'
    let bt = tape.transpose(b);
    let cross = tape.matmul(a, bt);
    let m2 = tape.scale(cross, -2.0);
    let sums = tape.add_col_row(ra, rbt);
    tape.add(m2, sums)
}

/// Median pairwise Euclidean distance over the pooled rows of two matrices.
/// Degenerate (all-identical) inputs fall back to bandwidth 1.
pub fn median_pairwise_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let pooled = concatenate![Axis(0), a.view(), b.view()];
    let n = pooled.nrows();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let d2: f64 = pooled
                .row(i)
                .iter()
                .zip(pooled.row(j).iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let med = if dists.is_empty() {
        0.0
    } else {
        dists[dists.len() / 2]
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Gaussian-kernel MMD^2 (biased V-statistic) between two feature batches.
/// The bandwidth is a constant of the computation, not differentiated.
pub fn mmd(tape: &mut Tape, source: Var, target: Var, rule: BandwidthRule) -> Var {
    let sigma = match rule {
        BandwidthRule::Fixed(s) => s,
        BandwidthRule::MedianPairwise => {
            median_pairwise_distance(tape.value(source), tape.value(target))
        }
    };
    let gamma = -1.0 / (2.0 * sigma * sigma);
    let mut kernel_mean = |x: Var, y: Var| {
        let d2 = pairwise_sq_dists(tape, x, y);
        let e = tape.scale(d2, gamma);
        let k = tape.exp(e);
        tape.mean_all(k)
    };
    let kss = kernel_mean(source, source);
    let ktt = kernel_mean(target, target);
    let kst = kernel_mean(source, target);
    let sum = tape.add(kss, ktt);
    let twice = tape.scale(kst, -2.0);
    tape.add(sum, twice)
}

/// Binary domain loss from discriminator logits: source labeled 1, target 0.
/// `-mean log D(src) - mean log (1 - D(tgt))`, computed from logits for
/// stability.
pub fn domain_bce(tape: &mut Tape, z_source: Var, z_target: Var) -> Var {
    let ns = tape.neg(z_source);
    let ls = tape.softplus(ns);
    let ms = tape.mean_all(ls);
    let lt = tape.softplus(z_target);
    let mt = tape.mean_all(lt);
    tape.add(ms, mt)
}

/// Loss terms of one component on a (source, target) batch pair.
pub struct ComponentLoss {
    /// Scalar node to backpropagate; adversarial sign handled internally.
    pub total: Var,
    pub ce: f64,
    /// MMD or domain-BCE value depending on the method; 0 for source-only.
    pub align: f64,
}

/// Individual loss of one component model per its training method.
pub fn component_loss(
    tape: &mut Tape,
    vars: &IndexMap<String, Var>,
    model: &ComponentModel,
    source: &DomainBatch,
    target: &DomainBatch,
) -> Result<ComponentLoss> {
    let labels = source.labels().ok_or(ImedError::MissingLabels)?;
    let (f_s, g_s) = forward_component(tape, vars, model, source)?;
    let ce = cross_entropy(tape, g_s, labels);
    let ce_val = tape.scalar(ce);

    match model.config.method {
        MethodTag::SourceOnly => Ok(ComponentLoss {
            total: ce,
            ce: ce_val,
            align: 0.0,
        }),
        MethodTag::JanLike => {
            let (f_t, _) = forward_component(tape, vars, model, target)?;
            let m = mmd(tape, f_s, f_t, model.config.bandwidth);
            let m_val = tape.scalar(m);
            let weighted = tape.scale(m, model.config.mmd_weight);
            let total = tape.add(ce, weighted);
            Ok(ComponentLoss {
                total,
                ce: ce_val,
                align: m_val,
            })
        }
        MethodTag::CdanLike => {
            let disc = model.disc.as_ref().expect("cdan component has disc");
            let (f_t, g_t) = forward_component(tape, vars, model, target)?;
            let cond_of = |tape: &mut Tape, f: Var, g: Var| -> Result<Var> {
                let p = tape.softmax(g);
                let (c, _) = condition(tape, model.proj.as_ref(), f, p)?;
                Ok(tape.grad_scale(c, -model.config.adv_weight))
            };
            let c_s = cond_of(tape, f_s, g_s)?;
            let c_t = cond_of(tape, f_t, g_t)?;
            let z_s = disc.forward(tape, vars, c_s);
            let z_t = disc.forward(tape, vars, c_t);
            let bce = domain_bce(tape, z_s, z_t);
            let bce_val = tape.scalar(bce);
            let total = tape.add(ce, bce);
            Ok(ComponentLoss {
                total,
                ce: ce_val,
                align: bce_val,
            })
        }
    }
}
