//! Gradient-inversion attacks against intercepted federated updates.
//!
//! Both attackers operate strictly on what crosses the wire: the public
//! global parameters and one client's (possibly defended) shared update.
//! They never touch client-local data.
//!
//! * [`april_reconstruct`] — closed-form recovery against the tiny ViT. The
//!   positional-embedding gradient equals the full embedding gradient, which
//!   pins the embedded sequence down to a linear system assembled from the
//!   attention weight gradients; inverting the patch embedding then yields
//!   pixels. Exact (not statistical) whenever the system is full rank.
//! * [`bias_ratio_reconstruct`] — the classical dense-layer identity: each
//!   first-layer input coordinate is the ratio of a weight-gradient entry to
//!   its unit's bias gradient. One division per pixel; exact without any
//!   defense, and the reason masking even a few coordinates destroys pixels.
//! * [`optimization_attack`] — adversarial gradient matching for any
//!   differentiable target: synthesize an image whose gradients maximize
//!   cosine similarity with the intercepted ones, ascending through the
//!   gradient computation itself (second-order differentiation on the same
//!   static graph).

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fl::Defense;
use crate::graph::{unpatchify_tensor, PatchGeom};
use crate::models::{MlpSpec, Model, VitSpec};
use crate::params::ParamSet;
use crate::seed;
use crate::tensor::Tensor;

/// Everything the attacker sees for one round: the public global model, one
/// client's shared payload (already defended by the client), the defense in
/// force (the threat model grants the attacker the algorithm and its
/// parameters, not the realized mask bits), and the sample's label.
#[derive(Clone, Debug)]
pub struct InterceptedRound {
    pub global: ParamSet,
    /// The shared payload. Gradients for the attacks implemented here;
    /// clients train with batch size one when a round is intercepted.
    pub update: ParamSet,
    pub label: usize,
    pub defense: Defense,
}

/// Knobs for the optimization attack. The generated image is initialized
/// uniformly in `[init_low, init_high]` and similarity is always cosine.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AttackConfig {
    pub iterations: usize,
    pub step: f64,
    pub init_low: f64,
    pub init_high: f64,
    /// Independent multi-start runs from fresh inits; the reconstruction
    /// with the best final objective wins. The objective is nonconvex, so
    /// single starts are hostage to their basin — multiple starts let the
    /// attacker keep whichever candidate actually matches the intercepted
    /// gradients best.
    pub attempts: usize,
    /// Extra retries from fresh inits after a non-finite objective.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> AttackConfig {
        AttackConfig {
            iterations: 2000,
            step: 0.01,
            init_low: 0.0,
            init_high: 1.0,
            attempts: 1,
            restarts: 3,
            seed: 0,
        }
    }
}

impl AttackConfig {
    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("attack iterations must be at least 1".into()));
        }
        if self.attempts == 0 {
            return Err(Error::Config("attack attempts must be at least 1".into()));
        }
        if !(self.step > 0.0) {
            return Err(Error::Config(format!(
                "attack step must be positive, got {}",
                self.step
            )));
        }
        if !(self.init_low <= self.init_high) {
            return Err(Error::Config(format!(
                "attack init range [{}, {}] is empty",
                self.init_low, self.init_high
            )));
        }
        Ok(())
    }
}

/// What an attack hands back. `degenerate` marks runs where the recovery
/// problem itself broke down (rank-deficient system, all-zero gradients,
/// non-finite objective on every restart) — the image is still the best
/// available answer and is scored like any other.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub image: Tensor,
    pub degenerate: bool,
    /// Optimization iterations spent (0 for the closed-form attacks).
    pub iterations: usize,
    /// Final gradient cosine similarity, when the attack computes one.
    pub cosine: Option<f64>,
}

// ── gradient similarity ──────────────────────────────────────────────────

/// Cosine similarity between two gradient collections, taken over all
/// scalars concatenated: <g1, g2> / (‖g1‖ ‖g2‖). Rejects mismatched shapes
/// and zero-norm collections.
pub fn cosine_similarity(g1: &ParamSet, g2: &ParamSet) -> Result<f64> {
    if g1.len() != g2.len() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("{} tensors", g1.len()),
            format!("{} tensors", g2.len()),
        ));
    }
    let mut dot = 0.0;
    let mut sq1 = 0.0;
    let mut sq2 = 0.0;
    for (name, t1) in g1.iter() {
        let t2 = g2.tensor(name)?;
        if t1.shape() != t2.shape() {
            return Err(Error::shape(
                format!("cosine_similarity at {name}"),
                format!("{:?}", t1.shape()),
                format!("{:?}", t2.shape()),
            ));
        }
        for (a, b) in t1.data().iter().zip(t2.data()) {
            dot += a * b;
            sq1 += a * a;
            sq2 += b * b;
        }
    }
    if sq1 == 0.0 || sq2 == 0.0 {
        return Err(Error::ZeroNorm(
            "cosine similarity of a zero gradient collection".into(),
        ));
    }
    Ok(dot / (sq1.sqrt() * sq2.sqrt()))
}

// ── APRIL: closed-form ViT inversion ─────────────────────────────────────

/// Relative singular-value cutoff for the least-squares solves.
const RANK_REL_TOL: f64 = 1e-9;

/// Closed-form reconstruction against the tiny ViT from the gradients of
/// E_pos, W_q, W_k, and W_v plus the public E_pos and E_patch.
///
/// Because the embedded sequence feeds the rest of the network only through
/// the positional-embedding sum, the intercepted E_pos gradient *is* the
/// gradient b with respect to the embedded sequence z0. Each attention
/// weight gradient factors as z0ᵀ·(gradient at its projection), so summing
/// W_•·(∂l/∂W_•)ᵀ over q, k, v collapses to bᵀ·z0 — a linear system whose
/// only unknown is z0. Solving it and then inverting the (public) patch
/// embedding by least squares recovers every patch; un-patchifying yields
/// the image, exactly when both systems are full rank. Pixels are reported
/// as solved, without clamping.
pub fn april_reconstruct(intercepted: &InterceptedRound, spec: &VitSpec) -> Result<Reconstruction> {
    spec.validate()?;
    let s = spec.seq_len();
    let d = spec.embed_dim;
    let pd = spec.patch_dim();

    let g_pos = expect_shape(&intercepted.update, "E_pos", &[s, d])?;
    let g_q = expect_shape(&intercepted.update, "W_q", &[d, d])?;
    let g_k = expect_shape(&intercepted.update, "W_k", &[d, d])?;
    let g_v = expect_shape(&intercepted.update, "W_v", &[d, d])?;
    let w_q = expect_shape(&intercepted.global, "W_q", &[d, d])?;
    let w_k = expect_shape(&intercepted.global, "W_k", &[d, d])?;
    let w_v = expect_shape(&intercepted.global, "W_v", &[d, d])?;
    let e_pos = expect_shape(&intercepted.global, "E_pos", &[s, d])?;
    let e_patch = expect_shape(&intercepted.global, "E_patch", &[pd, d])?;

    // bᵀ · z0 = Σ_• W_• · (∂l/∂W_•)ᵀ, unknown z0 of shape S×D.
    let a = to_na(g_pos).transpose();
    let rhs = to_na(w_q) * to_na(g_q).transpose()
        + to_na(w_k) * to_na(g_k).transpose()
        + to_na(w_v) * to_na(g_v).transpose();
    let (z0, rank_z0) = lstsq(a, &rhs)?;
    let mut degenerate = rank_z0 < s;

    // Rows 1.. of z0 − E_pos are patches·E_patch; invert the embedding.
    let y = z0 - to_na(e_pos);
    let y_patches = y.rows(1, s - 1).transpose();
    let (patches_t, rank_patch) = lstsq(to_na(e_patch).transpose(), &y_patches)?;
    degenerate |= rank_patch < pd;

    let patches = from_na(&patches_t.transpose());
    let geom = PatchGeom::for_shape(&image_shape(spec), spec.patch)?;
    let image = unpatchify_tensor(&patches, geom)?;
    Ok(Reconstruction {
        image,
        degenerate,
        iterations: 0,
        cosine: None,
    })
}

fn image_shape(spec: &VitSpec) -> Vec<usize> {
    if spec.channels == 1 {
        vec![spec.height, spec.width]
    } else {
        vec![spec.channels, spec.height, spec.width]
    }
}

fn expect_shape<'a>(set: &'a ParamSet, name: &str, shape: &[usize]) -> Result<&'a Tensor> {
    let t = set.tensor(name)?;
    if t.shape() != shape {
        return Err(Error::shape(
            name,
            format!("{shape:?}"),
            format!("{:?}", t.shape()),
        ));
    }
    Ok(t)
}

fn to_na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn from_na(m: &DMatrix<f64>) -> Tensor {
    let mut t = Tensor::zeros(&[m.nrows(), m.ncols()]);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            t.set2(i, j, m[(i, j)]);
        }
    }
    t
}

/// Minimum-norm least-squares solution of `a · x = rhs` by SVD, plus the
/// numerical rank of `a`. Singular values below a relative tolerance are
/// truncated, so an exactly singular system still yields the best solution.
fn lstsq(a: DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    let svd = a.svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    if !smax.is_finite() {
        return Err(Error::Model(
            "least-squares system contains non-finite values".into(),
        ));
    }
    let eps = smax * RANK_REL_TOL;
    let rank = svd.rank(eps);
    let x = svd
        .solve(rhs, eps)
        .map_err(|e| Error::Model(format!("least-squares solve: {e}")))?;
    Ok((x, rank))
}

// ── bias-ratio identity: closed-form dense-layer inversion ───────────────

/// Recover the MLP input from one sample's first-dense-layer gradients: for
/// any unit i with nonzero bias gradient, input_j = (∂L/∂W1)_{j,i} /
/// (∂L/∂b1)_i, and subtracting the public input bias (when the model has
/// one) turns the recovered layer input into pixels. Degenerate when every
/// bias gradient is zero.
pub fn bias_ratio_reconstruct(
    intercepted: &InterceptedRound,
    spec: &MlpSpec,
) -> Result<Reconstruction> {
    let g_w1 = intercepted.update.tensor("W1")?;
    let g_b1 = intercepted.update.tensor("b1")?;
    if g_w1.rows() != spec.input_dim || g_b1.cols() != g_w1.cols() {
        return Err(Error::shape(
            "bias_ratio_reconstruct",
            format!("W1 [{}, u] with b1 [1, u]", spec.input_dim),
            format!("{:?} with {:?}", g_w1.shape(), g_b1.shape()),
        ));
    }
    // The unit with the largest bias gradient gives the best-conditioned
    // division.
    let (unit, denom) = g_b1
        .data()
        .iter()
        .copied()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .expect("b1 is nonempty");
    let mut image = Tensor::zeros(&[1, spec.input_dim]);
    if denom == 0.0 {
        return Ok(Reconstruction {
            image,
            degenerate: true,
            iterations: 0,
            cosine: None,
        });
    }
    for j in 0..spec.input_dim {
        image.data_mut()[j] = g_w1.get2(j, unit) / denom;
    }
    if spec.input_bias {
        let b = intercepted.global.tensor("b")?;
        image = image.zip(b, |h, bias| h - bias)?;
    }
    Ok(Reconstruction {
        image,
        degenerate: false,
        iterations: 0,
        cosine: None,
    })
}

// ── optimization attack: adversarial gradient matching ───────────────────

/// Iteratively synthesize an image whose gradients match the intercepted
/// ones in cosine similarity, for any differentiable target model.
///
/// The objective cos(∇_θ L(x*, y), g) is built as an extension of the
/// model's own graph — the intercepted gradients enter as constants, the
/// model's gradient nodes as functions of x* — and one more differentiation
/// pass yields d(cos)/dx* exactly. Ascent uses per-coordinate RMS-normalized
/// steps with pixels clamped to [0, 1] after every update.
///
/// `cfg.attempts` independent starts run from fresh inits and the final
/// iterate with the highest objective is returned — the attacker keeps the
/// candidate its own score prefers. A non-finite objective consumes one of
/// `cfg.restarts` retries instead of an attempt; if every start aborts this
/// way, the best iterate seen anywhere is returned with the `degenerate`
/// flag set, as it also is when the intercepted gradients are all zero and
/// the objective is undefined.
pub fn optimization_attack(
    intercepted: &InterceptedRound,
    model: &Model,
    cfg: &AttackConfig,
) -> Result<Reconstruction> {
    cfg.validate()?;
    let shape = model.input_shape().to_vec();

    let mut target_sq = 0.0;
    for (name, _) in &model.param_nodes {
        let t = intercepted.update.tensor(name)?;
        target_sq += t.data().iter().map(|v| v * v).sum::<f64>();
    }
    if target_sq == 0.0 {
        let image = uniform_image(&shape, cfg, 0);
        return Ok(Reconstruction {
            image,
            degenerate: true,
            iterations: 0,
            cosine: None,
        });
    }

    // Extend the model's graph with the similarity objective and its input
    // gradient. The attack owns this clone; the model stays untouched.
    let mut g = model.graph.clone();
    let mut dot = g.constant(Tensor::scalar(0.0));
    let mut sq = g.constant(Tensor::scalar(0.0));
    for ((name, _), grad_id) in model.param_nodes.iter().zip(&model.grad_nodes) {
        let target = g.constant(intercepted.update.tensor(name)?.clone());
        let piece = g.mul(*grad_id, target)?;
        let piece = g.sum_all(piece)?;
        dot = g.add(dot, piece)?;
        let square = g.mul(*grad_id, *grad_id)?;
        let square = g.sum_all(square)?;
        sq = g.add(sq, square)?;
    }
    // The tiny offset keeps the norm differentiable if x*'s gradients
    // vanish; it perturbs the objective by far less than one ulp otherwise.
    let sq = g.add_scalar(sq, 1e-24)?;
    let norm = g.sqrt(sq)?;
    let target_norm = g.constant(Tensor::scalar(target_sq.sqrt()));
    let denom = g.mul(norm, target_norm)?;
    let cos = g.div(dot, denom)?;
    let grad_x = g.gradients(cos, &[model.input])?[0];

    let evaluate = |x: &Tensor| -> Result<(f64, Tensor)> {
        let mut b = model.bindings(&intercepted.global, x)?;
        b.insert(
            model.onehot,
            onehot(intercepted.label, model.num_classes())?,
        );
        let out = g.run(&b, &[cos, grad_x])?;
        Ok((out[0].item(), out[1].clone()))
    };

    // Best finished start by final objective, and best iterate seen anywhere
    // (the fallback when every start aborts on a non-finite objective).
    let mut best_clean: Option<(f64, Tensor)> = None;
    let mut best_any: Option<(f64, Tensor)> = None;
    let mut total_iterations = 0;
    let mut init_draws = 0u64;
    let mut retries_left = cfg.restarts;
    let mut finished = 0;
    while finished < cfg.attempts {
        let mut x = uniform_image(&shape, cfg, init_draws);
        init_draws += 1;
        let mut v = vec![0.0; x.len()];
        let mut aborted = false;
        for _ in 0..cfg.iterations {
            let (value, gx) = evaluate(&x)?;
            if !value.is_finite() || !gx.is_finite() {
                aborted = true;
                break;
            }
            total_iterations += 1;
            if best_any.as_ref().is_none_or(|(b, _)| value > *b) {
                best_any = Some((value, x.clone()));
            }
            for (i, (xi, gi)) in x.data_mut().iter_mut().zip(gx.data()).enumerate() {
                v[i] = 0.99 * v[i] + 0.01 * gi * gi;
                *xi = (*xi + cfg.step * gi / (v[i].sqrt() + 1e-8)).clamp(0.0, 1.0);
            }
        }
        if aborted {
            if retries_left == 0 {
                break;
            }
            retries_left -= 1;
            continue;
        }
        let (value, _) = evaluate(&x)?;
        if best_clean.as_ref().is_none_or(|(b, _)| value > *b) {
            best_clean = Some((value, x));
        }
        finished += 1;
    }
    if let Some((value, x)) = best_clean {
        return Ok(Reconstruction {
            image: x,
            degenerate: false,
            iterations: total_iterations,
            cosine: Some(value),
        });
    }
    // Every start hit a non-finite objective: best iterate, flagged.
    let (cosine, image) = match best_any {
        Some((value, x)) => (Some(value), x),
        None => (None, uniform_image(&shape, cfg, 0)),
    };
    Ok(Reconstruction {
        image,
        degenerate: true,
        iterations: total_iterations,
        cosine,
    })
}

fn uniform_image(shape: &[usize], cfg: &AttackConfig, attempt: u64) -> Tensor {
    let mut rng = seed::rng(cfg.seed, "attack-init", &[attempt]);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(cfg.init_low..=cfg.init_high);
    }
    t
}

fn onehot(label: usize, classes: usize) -> Result<Tensor> {
    if label >= classes {
        return Err(Error::Model(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    let mut t = Tensor::zeros(&[1, classes]);
    t.data_mut()[label] = 1.0;
    Ok(t)
}
