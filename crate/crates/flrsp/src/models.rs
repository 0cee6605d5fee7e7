//! The two attackable model families: an MLP classifier with an explicit
//! input-bias layer, and a tiny single-block vision transformer.
//!
//! The input-bias MLP prepends `x + b` to an ordinary ReLU stack, which makes
//! the gradient of the loss with respect to each input pixel available to an
//! eavesdropper as the gradient of the corresponding bias entry — the
//! identity the optimization attack leans on. The ViT keeps exactly the
//! structure the closed-form attack unrolls: patch embedding plus class token
//! plus positional embedding, one softmax attention block, and an MLP head on
//! the flattened attention output. No residual connections, layer norm, or
//! output projection: those would break the linear relation between the
//! positional-embedding gradient and the first-block weight gradients that
//! the attack solves against.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, NodeId};
use crate::params::ParamSet;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    /// Adds a trainable bias of `input_dim` entries directly to the input.
    pub input_bias: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct VitSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Patch side length; must divide both height and width.
    pub patch: usize,
    pub embed_dim: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
}

impl VitSpec {
    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Sequence length including the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0
            || self.height == 0
            || self.width == 0
            || self.embed_dim == 0
            || self.mlp_dim == 0
            || self.num_classes == 0
        {
            return Err(Error::Model("ViT spec has a zero dimension".into()));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Model(format!(
                "patch size {} does not divide image {}x{}",
                self.patch, self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Mlp(MlpSpec),
    Vit(VitSpec),
}

impl ModelSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            ModelSpec::Mlp(m) => m.num_classes,
            ModelSpec::Vit(v) => v.num_classes,
        }
    }

    pub fn as_vit(&self) -> Option<&VitSpec> {
        match self {
            ModelSpec::Vit(v) => Some(v),
            ModelSpec::Mlp(_) => None,
        }
    }
}

/// First-block activations and the gradients an eavesdropper reads from a
/// shared ViT update.
#[derive(Clone, Debug)]
pub struct CaptureRecord {
    pub z0: Tensor,
    pub q1: Tensor,
    pub k1: Tensor,
    pub v1: Tensor,
    pub grad_e_pos: Tensor,
    pub grad_w_q: Tensor,
    pub grad_w_k: Tensor,
    pub grad_w_v: Tensor,
}

/// Node ids of the ViT quantities the attacks and identity tests reach into.
#[derive(Clone, Copy, Debug)]
pub(crate) struct VitNodes {
    pub z0: NodeId,
    pub q1: NodeId,
    pub k1: NodeId,
    pub v1: NodeId,
    pub grad_z0: NodeId,
}

/// A built model: static graph, placeholder ids, seeded initial parameters,
/// and pre-appended gradient nodes so one `run` call yields loss plus all
/// gradients.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub(crate) graph: Graph,
    pub(crate) input: NodeId,
    pub(crate) onehot: NodeId,
    pub(crate) logits: NodeId,
    pub(crate) loss: NodeId,
    pub(crate) param_nodes: Vec<(String, NodeId)>,
    pub(crate) grad_nodes: Vec<NodeId>,
    pub(crate) grad_input: NodeId,
    pub(crate) vit_nodes: Option<VitNodes>,
    init: ParamSet,
}

impl Model {
    pub fn build(spec: &ModelSpec, init_seed: u64) -> Result<Model> {
        match spec {
            ModelSpec::Mlp(m) => build_mlp(m, init_seed),
            ModelSpec::Vit(v) => build_vit(v, init_seed),
        }
    }

    /// The seeded initial parameters this model was built with.
    pub fn init_params(&self) -> ParamSet {
        self.init.clone()
    }

    pub fn input_shape(&self) -> &[usize] {
        self.graph.shape(self.input)
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.param_nodes.iter().map(|(n, _)| n.as_str())
    }

    fn onehot_tensor(&self, label: usize) -> Result<Tensor> {
        let classes = self.num_classes();
        if label >= classes {
            return Err(Error::Model(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let mut t = Tensor::zeros(&[1, classes]);
        t.data_mut()[label] = 1.0;
        Ok(t)
    }

    pub(crate) fn bindings(&self, params: &ParamSet, x: &Tensor) -> Result<Bindings> {
        // Accept any layout with the right number of scalars, so dataset
        // images ([H, W] or [C, H, W]) feed the MLP's flat input directly.
        let x = if x.shape() == self.input_shape() {
            x.clone()
        } else if x.len() == self.input_shape().iter().product::<usize>() {
            x.reshaped(self.input_shape().to_vec())?
        } else {
            return Err(Error::shape(
                "model input",
                format!("{:?}", self.input_shape()),
                format!("{:?}", x.shape()),
            ));
        };
        let mut b = Bindings::new();
        b.insert(self.input, x);
        for (name, id) in &self.param_nodes {
            b.insert(*id, params.tensor(name)?.clone());
        }
        Ok(b)
    }

    /// Loss and logits for one sample.
    pub fn forward(&self, params: &ParamSet, x: &Tensor, label: usize) -> Result<(f64, Tensor)> {
        let mut b = self.bindings(params, x)?;
        b.insert(self.onehot, self.onehot_tensor(label)?);
        let out = self.graph.run(&b, &[self.loss, self.logits])?;
        Ok((out[0].item(), out[1].clone()))
    }

    /// Loss and parameter gradients for one sample.
    pub fn loss_and_grads(
        &self,
        params: &ParamSet,
        x: &Tensor,
        label: usize,
    ) -> Result<(f64, ParamSet)> {
        let mut b = self.bindings(params, x)?;
        b.insert(self.onehot, self.onehot_tensor(label)?);
        let mut wanted = vec![self.loss];
        wanted.extend_from_slice(&self.grad_nodes);
        let out = self.graph.run(&b, &wanted)?;
        let mut grads = ParamSet::new();
        for ((name, _), val) in self.param_nodes.iter().zip(&out[1..]) {
            grads.push(name.clone(), val.clone())?;
        }
        Ok((out[0].item(), grads))
    }

    /// Mean loss and mean parameter gradients over a mini-batch.
    pub fn batch_loss_and_grads(
        &self,
        params: &ParamSet,
        batch: &[(&Tensor, usize)],
    ) -> Result<(f64, ParamSet)> {
        if batch.is_empty() {
            return Err(Error::Config("empty mini-batch".into()));
        }
        let mut total_loss = 0.0;
        let mut total = params.zeros_like();
        for (x, y) in batch {
            let (l, g) = self.loss_and_grads(params, x, *y)?;
            total_loss += l;
            total = total.zip_with(&g, |a, b| a + b)?;
        }
        let n = batch.len() as f64;
        Ok((total_loss / n, total.map(|v| v / n)))
    }

    /// Gradient of the loss with respect to the input image.
    pub fn input_grad(&self, params: &ParamSet, x: &Tensor, label: usize) -> Result<Tensor> {
        let mut b = self.bindings(params, x)?;
        b.insert(self.onehot, self.onehot_tensor(label)?);
        let out = self.graph.run(&b, &[self.grad_input])?;
        Ok(out[0].clone())
    }

    /// Most likely class under the current parameters.
    pub fn predict(&self, params: &ParamSet, x: &Tensor) -> Result<usize> {
        let b = self.bindings(params, x)?;
        let out = self.graph.run(&b, &[self.logits])?;
        let logits = out[0].data();
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        Ok(best)
    }

    pub fn accuracy_on(&self, params: &ParamSet, data: &[(&Tensor, usize)]) -> Result<f64> {
        let mut predictions = Vec::with_capacity(data.len());
        let mut labels = Vec::with_capacity(data.len());
        for (x, y) in data {
            predictions.push(self.predict(params, x)?);
            labels.push(*y);
        }
        crate::metrics::accuracy(&predictions, &labels)
    }

    /// First-block activations plus the shared-gradient views; ViT only.
    pub fn capture(&self, params: &ParamSet, x: &Tensor, label: usize) -> Result<CaptureRecord> {
        let nodes = self
            .vit_nodes
            .ok_or_else(|| Error::Model("capture is only defined for ViT graphs".into()))?;
        let mut b = self.bindings(params, x)?;
        b.insert(self.onehot, self.onehot_tensor(label)?);
        let (_, grads) = self.loss_and_grads(params, x, label)?;
        let acts = self
            .graph
            .run(&b, &[nodes.z0, nodes.q1, nodes.k1, nodes.v1])?;
        Ok(CaptureRecord {
            z0: acts[0].clone(),
            q1: acts[1].clone(),
            k1: acts[2].clone(),
            v1: acts[3].clone(),
            grad_e_pos: grads.tensor("E_pos")?.clone(),
            grad_w_q: grads.tensor("W_q")?.clone(),
            grad_w_k: grads.tensor("W_k")?.clone(),
            grad_w_v: grads.tensor("W_v")?.clone(),
        })
    }

    /// Gradient of the loss with respect to z0; ViT only.
    pub fn z0_grad(&self, params: &ParamSet, x: &Tensor, label: usize) -> Result<Tensor> {
        let nodes = self
            .vit_nodes
            .ok_or_else(|| Error::Model("z0_grad is only defined for ViT graphs".into()))?;
        let mut b = self.bindings(params, x)?;
        b.insert(self.onehot, self.onehot_tensor(label)?);
        let out = self.graph.run(&b, &[nodes.grad_z0])?;
        Ok(out[0].clone())
    }

    /// Max over parameters of the relative disagreement between analytic
    /// gradients and central finite differences of the loss. The relative
    /// error's denominator is floored at 1e-6: central differences of an
    /// O(1) loss carry ~1e-11 absolute rounding noise, so gradients below
    /// that scale are effectively compared absolutely against the noise
    /// floor rather than inflating the ratio.
    pub fn grad_check(&self, params: &ParamSet, x: &Tensor, label: usize, eps: f64) -> Result<f64> {
        if !(eps > 0.0 && eps <= 1e-2) {
            return Err(Error::Config(format!(
                "grad_check eps {eps} outside (0, 1e-2]"
            )));
        }
        let (_, analytic) = self.loss_and_grads(params, x, label)?;
        let mut work = params.clone();
        let names: Vec<String> = params.names().map(String::from).collect();
        let mut worst = 0.0_f64;
        for name in &names {
            let n = params.tensor(name)?.len();
            for i in 0..n {
                let orig = params.tensor(name)?.data()[i];
                work.get_mut(name).expect("same names").data_mut()[i] = orig + eps;
                let (lp, _) = self.forward(&work, x, label)?;
                work.get_mut(name).expect("same names").data_mut()[i] = orig - eps;
                let (lm, _) = self.forward(&work, x, label)?;
                work.get_mut(name).expect("same names").data_mut()[i] = orig;
                let numeric = (lp - lm) / (2.0 * eps);
                let a = analytic.tensor(name)?.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        Ok(worst)
    }
}

fn uniform_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    t
}

/// MLP with an optional input-bias first layer, ReLU hidden activations, and
/// a softmax cross-entropy head.
pub fn build_mlp(spec: &MlpSpec, init_seed: u64) -> Result<Model> {
    if spec.input_dim == 0 || spec.num_classes == 0 || spec.hidden_dims.iter().any(|&d| d == 0) {
        return Err(Error::Model("MLP spec has a zero dimension".into()));
    }
    let mut rng = seed::rng(init_seed, "init", &[]);
    let mut g = Graph::new();
    let mut init = ParamSet::new();
    let mut param_nodes = Vec::new();

    let input = g.input(&[1, spec.input_dim]);
    let onehot = g.input(&[1, spec.num_classes]);

    let mut h = input;
    if spec.input_bias {
        let b = g.param(&[1, spec.input_dim]);
        init.push("b", Tensor::zeros(&[1, spec.input_dim]))?;
        param_nodes.push(("b".to_string(), b));
        h = g.add(input, b)?;
    }

    let mut prev = spec.input_dim;
    let widths: Vec<usize> = spec
        .hidden_dims
        .iter()
        .copied()
        .chain(std::iter::once(spec.num_classes))
        .collect();
    let mut logits = h;
    for (layer, &width) in widths.iter().enumerate() {
        let w = g.param(&[prev, width]);
        let b = g.param(&[1, width]);
        init.push(
            format!("W{}", layer + 1),
            uniform_init(&mut rng, &[prev, width], prev),
        )?;
        init.push(
            format!("b{}", layer + 1),
            uniform_init(&mut rng, &[1, width], prev),
        )?;
        param_nodes.push((format!("W{}", layer + 1), w));
        param_nodes.push((format!("b{}", layer + 1), b));
        let z = g.matmul(h, w)?;
        let z = g.add_row_vec(z, b)?;
        if layer + 1 < widths.len() {
            h = g.relu(z)?;
        } else {
            logits = z;
        }
        prev = width;
    }

    let loss = g.softmax_cross_entropy(logits, onehot)?;
    let mut wrt: Vec<NodeId> = param_nodes.iter().map(|(_, id)| *id).collect();
    wrt.push(input);
    let grads = g.gradients(loss, &wrt)?;
    let grad_input = grads[grads.len() - 1];

    Ok(Model {
        spec: ModelSpec::Mlp(spec.clone()),
        graph: g,
        input,
        onehot,
        logits,
        loss,
        grad_nodes: grads[..param_nodes.len()].to_vec(),
        param_nodes,
        grad_input,
        vit_nodes: None,
        init,
    })
}

/// Single-block, single-head ViT: patch embedding, class token, positional
/// embedding, softmax attention, and a GELU MLP head on the flattened
/// attention output.
pub fn build_vit(spec: &VitSpec, init_seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = seed::rng(init_seed, "init", &[]);
    let mut g = Graph::new();
    let mut init = ParamSet::new();
    let mut param_nodes = Vec::new();

    let d = spec.embed_dim;
    let s = spec.seq_len();
    let pd = spec.patch_dim();

    let input_shape: Vec<usize> = if spec.channels == 1 {
        vec![spec.height, spec.width]
    } else {
        vec![spec.channels, spec.height, spec.width]
    };
    let input = g.input(&input_shape);
    let onehot = g.input(&[1, spec.num_classes]);

    let param = |g: &mut Graph,
                 init: &mut ParamSet,
                 nodes: &mut Vec<(String, NodeId)>,
                 name: &str,
                 value: Tensor|
     -> Result<NodeId> {
        let id = g.param(value.shape());
        init.push(name, value)?;
        nodes.push((name.to_string(), id));
        Ok(id)
    };

    // Class token starts at zero so a zero input makes z0 = E_pos exactly.
    let cls = param(
        &mut g,
        &mut init,
        &mut param_nodes,
        "cls",
        Tensor::zeros(&[1, d]),
    )?;
    let e_patch = param(
        &mut g,
        &mut init,
        &mut param_nodes,
        "E_patch",
        uniform_init(&mut rng, &[pd, d], pd),
    )?;
    let e_pos = param(
        &mut g,
        &mut init,
        &mut param_nodes,
        "E_pos",
        uniform_init(&mut rng, &[s, d], d),
    )?;
    let w_q = param(
        &mut g,
        &mut init,
        &mut param_nodes,
        "W_q",
        uniform_init(&mut rng, &[d, d], d),
    )?;
    let w_k = param(
        &mut g,
        &mut init,
        &mut param_nodes,
        "W_k",
        uniform_init(&mut rng, &[d, d], d),
    )?;
    let w_v = param(
        &mut g,
        &mut init,
        &mut param_nodes,
        "W_v",
        uniform_init(&mut rng, &[d, d], d),
    )?;
    let w_h1 = param(
        &mut g,
        &mut init,
        &mut param_nodes,
        "W_h1",
        uniform_init(&mut rng, &[s * d, spec.mlp_dim], s * d),
    )?;
    let b_h1 = param(
        &mut g,
        &mut init,
        &mut param_nodes,
        "b_h1",
        uniform_init(&mut rng, &[1, spec.mlp_dim], s * d),
    )?;
    let w_h2 = param(
        &mut g,
        &mut init,
        &mut param_nodes,
        "W_h2",
        uniform_init(&mut rng, &[spec.mlp_dim, spec.num_classes], spec.mlp_dim),
    )?;
    let b_h2 = param(
        &mut g,
        &mut init,
        &mut param_nodes,
        "b_h2",
        uniform_init(&mut rng, &[1, spec.num_classes], spec.mlp_dim),
    )?;

    // Embedding: z0 = [cls; patchify(x) E_patch] + E_pos
    let patches = g.patchify(input, spec.patch)?;
    let embedded = g.matmul(patches, e_patch)?;
    let tokens = g.concat_rows(cls, embedded)?;
    let z0 = g.add(tokens, e_pos)?;

    // Single-head self-attention.
    let q1 = g.matmul(z0, w_q)?;
    let k1 = g.matmul(z0, w_k)?;
    let v1 = g.matmul(z0, w_v)?;
    let k1t = g.transpose(k1)?;
    let scores = g.matmul(q1, k1t)?;
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let attn = g.softmax(scaled)?;
    let mixed = g.matmul(attn, v1)?;

    // Head on the full flattened block output; restricting it to the class
    // token would starve dl/dz0 of rank and the closed-form attack with it.
    let flat = g.reshape(mixed, &[1, s * d])?;
    let h1 = g.matmul(flat, w_h1)?;
    let h1 = g.add_row_vec(h1, b_h1)?;
    let h1 = g.gelu(h1)?;
    let h2 = g.matmul(h1, w_h2)?;
    let logits = g.add_row_vec(h2, b_h2)?;
    let loss = g.softmax_cross_entropy(logits, onehot)?;

    let mut wrt: Vec<NodeId> = param_nodes.iter().map(|(_, id)| *id).collect();
    wrt.push(input);
    wrt.push(z0);
    let grads = g.gradients(loss, &wrt)?;
    let grad_input = grads[grads.len() - 2];
    let grad_z0 = grads[grads.len() - 1];

    Ok(Model {
        spec: ModelSpec::Vit(spec.clone()),
        graph: g,
        input,
        onehot,
        logits,
        loss,
        grad_nodes: grads[..param_nodes.len()].to_vec(),
        param_nodes,
        grad_input,
        vit_nodes: Some(VitNodes {
            z0,
            q1,
            k1,
            v1,
            grad_z0,
        }),
        init,
    })
}

/// Desk-scale defaults used across examples and tests: 8x8 grayscale images,
/// 4x4 patches, 16-dimensional embeddings.
pub fn desk_vit(num_classes: usize) -> VitSpec {
    VitSpec {
        channels: 1,
        height: 8,
        width: 8,
        patch: 4,
        embed_dim: 16,
        mlp_dim: 16,
        num_classes,
    }
}

/// Desk-scale general-purpose MLP: 8x8 inputs flattened to 64, one hidden
/// layer wide enough to train quickly, input bias on.
pub fn desk_mlp(num_classes: usize) -> MlpSpec {
    MlpSpec {
        input_dim: 64,
        hidden_dims: vec![16],
        num_classes,
        input_bias: true,
    }
}

/// Desk-scale MLP target for the gradient-inversion studies: narrow first
/// layer, deeper stack.
///
/// The shape is chosen for what masking does to it, not for how well it
/// trains. Each pixel appears in as many first-layer weight-gradient entries
/// as the first hidden layer is wide, so a wide first layer leaves so many
/// redundant witnesses per pixel that the attack shrugs off heavy masking —
/// a wide-MLP reconstruction survives near-unharmed even with half the
/// update withheld. Six first-layer units keep per-pixel redundancy low,
/// and the deeper stack entangles the backpropagated error signal so that
/// masked downstream entries corrupt the scales the attacker must infer.
/// Undefended reconstruction stays essentially exact; with masking, error
/// spreads through the inferred scales and reconstruction quality drops off.
pub fn desk_attack_mlp(num_classes: usize) -> MlpSpec {
    MlpSpec {
        input_dim: 64,
        hidden_dims: vec![6, 16, 16, 8],
        num_classes,
        input_bias: true,
    }
}
