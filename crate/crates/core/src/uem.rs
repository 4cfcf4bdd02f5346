//! Uncertainty estimation heads and the training objective.
//!
//! Each layer carries a linear head mapping `[token, timestep embedding]`
//! through a sigmoid to a per-token uncertainty in (0, 1). Supervision comes
//! from the pseudo target `uhat = tanh(mean |prediction - noise|)` pooled per
//! token. Four losses combine into the joint objective:
//!
//! - `simple`: MSE between the final prediction and the true noise
//! - `uncertainty`: sum over layers of mean squared (u - uhat)
//! - `layerwise`: per-layer prediction MSE, optionally reweighted by (1 - u)
//! - `total = simple + lambda_u * uncertainty + beta_ual * layerwise`
//!
//! Inside the reweighted layerwise loss the weights (1 - u) are detached:
//! otherwise the optimizer could push u toward 1 to null the loss instead of
//! learning anything. u is anchored by the uncertainty loss alone.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, ParamId, ParamSet, Tape, Var};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::sampling::ExitPolicy;
use crate::tensor::{dot, Mat};

/// How per-token uncertainties pool into the scalar exit signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

impl Aggregation {
    pub fn apply(&self, values: &[f64]) -> f64 {
        match self {
            Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Aggregation::Max => values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// One per-layer uncertainty head: a weight vector over
/// `[hidden_dim + embedding_dim]` plus a scalar bias.
#[derive(Debug, Clone)]
pub struct UemHead {
    pub w: ParamId,
    pub b: ParamId,
    pub layer_index: usize,
}

/// All uncertainty heads of a model. With `share_params` every layer reuses
/// one (w, b); the default is unshared heads.
#[derive(Debug, Clone)]
pub struct UemBank {
    pub heads: Vec<UemHead>,
    pub share_params: bool,
    pub input_dim: usize,
}

impl UemBank {
    pub fn init(
        params: &mut ParamSet,
        depth: usize,
        hidden_dim: usize,
        emb_dim: usize,
        share_params: bool,
        rng: &mut Rng,
    ) -> Self {
        let input_dim = hidden_dim + emb_dim;
        let limit = (6.0 / (input_dim + 1) as f64).sqrt();
        let mut heads = Vec::with_capacity(depth);
        if share_params {
            let w = params.add(
                "uem.shared.w",
                input_dim,
                1,
                (0..input_dim)
                    .map(|_| rng.uniform_in(-limit, limit))
                    .collect(),
            );
            let b = params.add("uem.shared.b", 1, 1, vec![0.0]);
            for layer in 1..=depth {
                heads.push(UemHead {
                    w,
                    b,
                    layer_index: layer,
                });
            }
        } else {
            for layer in 1..=depth {
                let w = params.add(
                    format!("uem{layer}.w"),
                    input_dim,
                    1,
                    (0..input_dim)
                        .map(|_| rng.uniform_in(-limit, limit))
                        .collect(),
                );
                let b = params.add(format!("uem{layer}.b"), 1, 1, vec![0.0]);
                heads.push(UemHead {
                    w,
                    b,
                    layer_index: layer,
                });
            }
        }
        UemBank {
            heads,
            share_params,
            input_dim,
        }
    }

    pub fn head(&self, layer: usize) -> &UemHead {
        &self.heads[layer - 1]
    }

    /// Graph op: per-token uncertainty for one layer.
    ///
    /// `data_toks` is `[batch*per, hidden]`, `temb` is `[batch, emb]`;
    /// the embedding row is broadcast to each of its sample's tokens.
    pub fn attach(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        layer: usize,
        data_toks: Var,
        temb: Var,
        per: usize,
    ) -> Var {
        let head = self.head(layer);
        let temb_rep = tape.repeat_rows(temb, per);
        let input = tape.concat_cols(data_toks, temb_rep);
        let w = tape.param(params, head.w);
        let b = tape.param(params, head.b);
        let z = tape.linear(input, w, b);
        tape.sigmoid(z)
    }

    /// Graph op: uncertainties for every executed layer, in order.
    pub fn attach_all(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        data_toks: &[Var],
        temb: Var,
        per: usize,
    ) -> Vec<Var> {
        data_toks
            .iter()
            .enumerate()
            .map(|(i, &dt)| self.attach(tape, params, i + 1, dt, temb, per))
            .collect()
    }
}

/// Per-token uncertainties with their aggregated exit signal.
#[derive(Debug, Clone)]
pub struct UncertaintyRecord {
    /// One value per data token, in (0, 1).
    pub u_map: Vec<f64>,
    pub u_scalar: f64,
    pub layer_index: usize,
    pub t: usize,
}

fn clamp_open_unit(v: f64) -> f64 {
    v.clamp(1e-300, 1.0 - 1e-16)
}

/// Value-level uncertainty estimate: `u = sigmoid(w . [token, temb] + b)`
/// per token, then aggregated.
pub fn estimate_uncertainty(
    tokens: &Mat,
    t_emb: &[f64],
    w: &[f64],
    b: f64,
    layer_index: usize,
    t: usize,
    aggregation: Aggregation,
) -> Result<UncertaintyRecord> {
    if w.len() != tokens.cols + t_emb.len() {
        return Err(Error::Shape(format!(
            "uncertainty head expects {} inputs, got token dim {} + embedding dim {}",
            w.len(),
            tokens.cols,
            t_emb.len()
        )));
    }
    let (w_tok, w_emb) = w.split_at(tokens.cols);
    let emb_term = dot(w_emb, t_emb);
    let u_map: Vec<f64> = (0..tokens.rows)
        .map(|r| clamp_open_unit(sigmoid(dot(w_tok, tokens.row(r)) + emb_term + b)))
        .collect();
    let u_scalar = aggregation.apply(&u_map);
    Ok(UncertaintyRecord {
        u_map,
        u_scalar,
        layer_index,
        t,
    })
}

/// Pseudo uncertainty target: absolute prediction error averaged per token,
/// squashed by tanh. Always treated as a constant during training.
pub fn pseudo_uncertainty(pred: &Mat, eps: &Mat, cfg: &BackboneConfig) -> Result<Mat> {
    pred.check_same_shape(eps, "pseudo_uncertainty pred vs eps")?;
    let pred_tok = crate::backbone::patchify(pred, cfg)?;
    let eps_tok = crate::backbone::patchify(eps, cfg)?;
    Ok(pseudo_uncertainty_tokens(&pred_tok, &eps_tok))
}

/// Token-space variant used inside the training graph.
pub fn pseudo_uncertainty_tokens(pred_tok: &Mat, eps_tok: &Mat) -> Mat {
    debug_assert!(pred_tok.same_shape(eps_tok));
    let data: Vec<f64> = (0..pred_tok.rows)
        .map(|r| {
            let mean_abs = pred_tok
                .row(r)
                .iter()
                .zip(eps_tok.row(r))
                .map(|(&p, &e)| (p - e).abs())
                .sum::<f64>()
                / pred_tok.cols as f64;
            mean_abs.tanh().min(1.0 - 1e-16)
        })
        .collect();
    Mat::from_vec(pred_tok.rows, 1, data)
}

/// Mean squared error over all elements.
pub fn loss_simple(eps_hat: &Mat, eps: &Mat) -> Result<f64> {
    eps_hat.check_same_shape(eps, "loss_simple")?;
    let n = eps_hat.len() as f64;
    Ok(eps_hat
        .data
        .iter()
        .zip(&eps.data)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Sum over layers of the per-layer token-mean squared uncertainty error.
/// Targets are constants; no gradient flows into them.
pub fn loss_uncertainty(u_all: &[Mat], uhat_all: &[Mat]) -> Result<f64> {
    if u_all.len() != uhat_all.len() {
        return Err(Error::Shape(format!(
            "uncertainty layer counts differ: {} vs {}",
            u_all.len(),
            uhat_all.len()
        )));
    }
    let mut total = 0.0;
    for (u, uhat) in u_all.iter().zip(uhat_all) {
        u.check_same_shape(uhat, "loss_uncertainty layer")?;
        let layer = u
            .data
            .iter()
            .zip(&uhat.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / u.len() as f64;
        total += layer;
    }
    Ok(total)
}

fn per_token_se(pred_tok: &Mat, eps_tok: &Mat) -> Vec<f64> {
    (0..pred_tok.rows)
        .map(|r| {
            pred_tok
                .row(r)
                .iter()
                .zip(eps_tok.row(r))
                .map(|(&p, &e)| (p - e) * (p - e))
                .sum::<f64>()
                / pred_tok.cols as f64
        })
        .collect()
}

/// Plain layer-wise loss over the intermediate heads (final layer excluded):
/// sum over layers of the token-mean squared prediction error.
pub fn loss_layerwise_plain(
    pred_toks: &[Mat],
    eps_tok: &Mat,
    num_intermediate: usize,
) -> Result<f64> {
    if pred_toks.len() != num_intermediate {
        return Err(Error::Shape(format!(
            "expected {num_intermediate} intermediate predictions, got {}",
            pred_toks.len()
        )));
    }
    let mut total = 0.0;
    for p in pred_toks {
        p.check_same_shape(eps_tok, "loss_layerwise_plain layer")?;
        let se = per_token_se(p, eps_tok);
        total += se.iter().sum::<f64>() / se.len() as f64;
    }
    Ok(total)
}

/// Uncertainty-aware layer-wise loss: per-layer token-mean of
/// `(1 - u) * squared error`, u entering as a constant.
pub fn loss_ual(
    pred_toks: &[Mat],
    eps_tok: &Mat,
    u_all: &[Mat],
    num_intermediate: usize,
) -> Result<f64> {
    if pred_toks.len() != num_intermediate || u_all.len() < num_intermediate {
        return Err(Error::Shape(format!(
            "expected {num_intermediate} predictions with matching uncertainties, got {} and {}",
            pred_toks.len(),
            u_all.len()
        )));
    }
    let mut total = 0.0;
    for (p, u) in pred_toks.iter().zip(u_all) {
        p.check_same_shape(eps_tok, "loss_ual layer")?;
        if u.rows != p.rows {
            return Err(Error::Shape("uncertainty map rows vs tokens".into()));
        }
        let se = per_token_se(p, eps_tok);
        let layer = se
            .iter()
            .zip(&u.data)
            .map(|(&s, &u)| (1.0 - u) * s)
            .sum::<f64>()
            / se.len() as f64;
        total += layer;
    }
    Ok(total)
}

/// Loss weights for the joint objective; both default to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_u: f64,
    pub beta_ual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_u: 1.0,
            beta_ual: 1.0,
        }
    }
}

/// `total = simple + lambda_u * uncertainty + beta_ual * layerwise`.
pub fn loss_joint(simple: f64, l_u: f64, l_ual: f64, weights: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("simple", simple),
        ("uncertainty", l_u),
        ("layerwise", l_ual),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                component: name,
                at_step: None,
            });
        }
    }
    Ok(simple + weights.lambda_u * l_u + weights.beta_ual * l_ual)
}

/// Exit rule: fire once the aggregated uncertainty drops below the threshold,
/// never before the policy's minimum layer.
pub fn exit_decision(record: &UncertaintyRecord, policy: &ExitPolicy) -> bool {
    record.u_scalar < policy.threshold && record.layer_index >= policy.min_layer
}

/// Which layer-wise term enters the joint objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LayerwiseMode {
    /// (1 - u)-weighted layer-wise loss.
    #[default]
    UncertaintyWeighted,
    /// Plain layer-wise loss (the uncertainty-weighting ablation).
    Plain,
}

/// Scalar loss vars of one training graph.
pub struct LossGraph {
    pub simple: Var,
    pub uncertainty: Var,
    pub layerwise: Var,
    pub total: Var,
}

/// Assemble the full objective on the tape.
///
/// `eps_hat_tok` is the model's final prediction (the shared deepest head,
/// or the separate output projection when heads are not shared).
/// `pred_toks` and `u_vars` cover every layer 1..=N and the uncertainty
/// loss sums over all of them. The layer-wise terms cover every auxiliary
/// head, which excludes the deepest one exactly when it doubles as the
/// output projection: layers 1..N shared, 1..=N unshared. `uhat` targets
/// enter as constants, and the (1 - u) weights are detached.
#[allow(clippy::too_many_arguments)]
pub fn build_loss_graph(
    tape: &mut Tape,
    eps_hat_tok: Var,
    pred_toks: &[Var],
    u_vars: &[Var],
    eps_tok: Var,
    uhat: &[Mat],
    weights: &LossWeights,
    mode: LayerwiseMode,
    num_layerwise: usize,
) -> LossGraph {
    build_loss_graph_pinned(
        tape,
        eps_hat_tok,
        pred_toks,
        u_vars,
        eps_tok,
        uhat,
        weights,
        mode,
        num_layerwise,
        None,
    )
}

/// Like [`build_loss_graph`], but with the stop-gradient weights of the
/// reweighted layer-wise term supplied as explicit constants. The training
/// path detaches the live uncertainties, which is numerically identical at
/// the current parameters; pinning exists so a finite-difference probe can
/// evaluate exactly the function the analytic gradient differentiates.
#[allow(clippy::too_many_arguments)]
pub fn build_loss_graph_pinned(
    tape: &mut Tape,
    eps_hat_tok: Var,
    pred_toks: &[Var],
    u_vars: &[Var],
    eps_tok: Var,
    uhat: &[Mat],
    weights: &LossWeights,
    mode: LayerwiseMode,
    num_layerwise: usize,
    pinned_ual_weights: Option<&[Mat]>,
) -> LossGraph {
    let n = pred_toks.len();
    assert_eq!(u_vars.len(), n);
    assert_eq!(uhat.len(), n);

    let se_toks: Vec<Var> = pred_toks
        .iter()
        .map(|&p| {
            let d = tape.sub(p, eps_tok);
            let sq = tape.square(d);
            tape.row_mean(sq)
        })
        .collect();

    let simple = {
        let d = tape.sub(eps_hat_tok, eps_tok);
        let sq = tape.square(d);
        tape.mean_all(sq)
    };

    let mut uncertainty: Option<Var> = None;
    for (i, &u) in u_vars.iter().enumerate() {
        let target = tape.constant(uhat[i].clone());
        let d = tape.sub(u, target);
        let sq = tape.square(d);
        let layer = tape.mean_all(sq);
        uncertainty = Some(match uncertainty {
            None => layer,
            Some(acc) => tape.add(acc, layer),
        });
    }
    let uncertainty = uncertainty.expect("at least one layer");

    assert!(num_layerwise >= 1 && num_layerwise <= n);
    let mut layerwise: Option<Var> = None;
    for i in 0..num_layerwise {
        let term = match mode {
            LayerwiseMode::UncertaintyWeighted => {
                let w = match pinned_ual_weights {
                    Some(ws) => tape.constant(ws[i].clone()),
                    None => {
                        let u_const = tape.detach(u_vars[i]);
                        let neg = tape.scale(u_const, -1.0);
                        tape.add_scalar(neg, 1.0)
                    }
                };
                let weighted = tape.mul(w, se_toks[i]);
                tape.mean_all(weighted)
            }
            LayerwiseMode::Plain => tape.mean_all(se_toks[i]),
        };
        layerwise = Some(match layerwise {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    let layerwise = layerwise.expect("depth >= 2");

    let lu_scaled = tape.scale(uncertainty, weights.lambda_u);
    let partial = tape.add(simple, lu_scaled);
    let ual_scaled = tape.scale(layerwise, weights.beta_ual);
    let total = tape.add(partial, ual_scaled);

    LossGraph {
        simple,
        uncertainty,
        layerwise,
        total,
    }
}

/// The loss graph plus the targets it was built against.
pub struct ObjectiveArtifacts {
    pub losses: LossGraph,
    pub u_vars: Vec<Var>,
    pub uhat: Vec<Mat>,
    pub eps_tok: Var,
}

/// Attach uncertainty heads and the joint objective to a completed forward
/// pass.
pub fn build_objective(
    trace: &mut crate::backbone::GraphTrace,
    params: &ParamSet,
    bank: &UemBank,
    cfg: &BackboneConfig,
    eps: &Mat,
    weights: &LossWeights,
    mode: LayerwiseMode,
) -> Result<ObjectiveArtifacts> {
    let per = cfg.tokens_per_sample();
    let eps_tok_mat = crate::backbone::patchify(eps, cfg)?;
    let tape = &mut trace.tape;
    let eps_tok = tape.constant(eps_tok_mat.clone());
    let u_vars = bank.attach_all(tape, params, &trace.data_toks, trace.temb, per);
    let uhat: Vec<Mat> = trace
        .pred_toks
        .iter()
        .map(|&p| pseudo_uncertainty_tokens(&tape.value_mat(p), &eps_tok_mat))
        .collect();
    let num_layerwise = if cfg.share_final_head {
        cfg.depth - 1
    } else {
        cfg.depth
    };
    let losses = build_loss_graph(
        tape,
        trace.eps_hat_tok,
        &trace.pred_toks,
        &u_vars,
        eps_tok,
        &uhat,
        weights,
        mode,
        num_layerwise,
    );
    Ok(ObjectiveArtifacts {
        losses,
        u_vars,
        uhat,
        eps_tok,
    })
}
