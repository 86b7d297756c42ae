//! Tape-recorded window forward for training, and its plain single-window
//! twin for evaluation.
//!
//! Batches stack windows along the row axis (window-major, node-minor);
//! everything row-wise stays batched, while the share/combine algebra runs
//! per window over row slices. Aggregate sums received through a
//! `ShareExchange` enter the tape as constants, so local backprop treats
//! them as fixed: gradients reach only the client's own parameters.

use thiserror::Error;

use crate::model::{
    affinity_features, augment_embedding, combine_l, gate_h, gate_zr, p_share, q_share, readout,
    AblationMode, GlobalParams, HyperConfig, ModelError,
};
use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::{Activation, Tensor};

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("share exchange failed: {0}")]
    Exchange(String),
    #[error("window length {got} != t_in {want}")]
    WindowLength { got: usize, want: usize },
    #[error("slot {0} out of range for {1} time slots")]
    SlotRange(usize, usize),
}

/// One collective-learning aggregation point. Shares and sums are stacked
/// per window: [batch, share_rows, d_in].
pub trait ShareExchange {
    fn exchange(
        &mut self,
        k: u8,
        step: usize,
        p_shares: Tensor,
        q_shares: Tensor,
    ) -> Result<(Tensor, Tensor), ForwardError>;
}

/// Single-block aggregation: the sums are the caller's own shares. This is
/// the monolithic evaluation and the degenerate single-client round.
pub struct LocalExchange;

impl ShareExchange for LocalExchange {
    fn exchange(
        &mut self,
        _k: u8,
        _step: usize,
        p_shares: Tensor,
        q_shares: Tensor,
    ) -> Result<(Tensor, Tensor), ForwardError> {
        Ok((p_shares, q_shares))
    }
}

/// One batch of windows belonging to one node block.
#[derive(Debug, Clone)]
pub struct BatchInputs {
    /// t_in step signals, each (batch * rows) x d.
    pub x_steps: Vec<Tensor>,
    /// Normalized targets, (batch * rows) x (t_out * d).
    pub targets: Tensor,
    /// Absolute time slot per step per window.
    pub slots: Vec<Vec<usize>>,
    /// Slot of the preceding step (wraps at day boundaries).
    pub prev_slots: Vec<Vec<usize>>,
    pub batch: usize,
    pub rows: usize,
}

/// Per-step intermediate values captured for equivalence checks.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub l1: Tensor,
    pub l2: Tensor,
    pub z: Tensor,
    pub r: Tensor,
    pub h_cand: Tensor,
    pub h: Tensor,
}

pub struct ForwardResult {
    pub loss: NodeId,
    pub prediction: NodeId,
    pub traces: Vec<StepTrace>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    /// Insert exchanged sums as constants (training semantics). When false
    /// the sums stay on-tape, making the whole graph differentiable for
    /// gradient verification; only the local exchange supports that.
    pub detach_sums: bool,
    /// Register model tensors as parameter leaves (training) or constants
    /// (evaluation, capture runs).
    pub trainable: bool,
    /// Record per-step traces.
    pub capture: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            detach_sums: true,
            trainable: true,
            capture: false,
        }
    }
}

struct ParamNodes {
    w_update: NodeId,
    b_update: NodeId,
    w_reset: NodeId,
    b_reset: NodeId,
    w_cand: NodeId,
    b_cand: NodeId,
    w_affinity: NodeId,
    b_affinity: NodeId,
    w_augment: NodeId,
    b_augment: NodeId,
    time_embed: NodeId,
    w_out: NodeId,
    b_out: NodeId,
    node_embed: NodeId,
}

fn register(
    tape: &mut Tape,
    params: &GlobalParams,
    node_embed: &Tensor,
    trainable: bool,
) -> Result<ParamNodes, TapeError> {
    let mut leaf = |name: &str, t: &Tensor| -> Result<NodeId, TapeError> {
        if trainable {
            tape.param(name, t.clone())
        } else {
            Ok(tape.constant(t.clone()))
        }
    };
    Ok(ParamNodes {
        w_update: leaf("w_update", &params.w_update)?,
        b_update: leaf("b_update", &params.b_update)?,
        w_reset: leaf("w_reset", &params.w_reset)?,
        b_reset: leaf("b_reset", &params.b_reset)?,
        w_cand: leaf("w_cand", &params.w_cand)?,
        b_cand: leaf("b_cand", &params.b_cand)?,
        w_affinity: leaf("w_affinity", &params.w_affinity)?,
        b_affinity: leaf("b_affinity", &params.b_affinity)?,
        w_augment: leaf("w_augment", &params.w_augment)?,
        b_augment: leaf("b_augment", &params.b_augment)?,
        time_embed: leaf("time_embed", &params.time_embed)?,
        w_out: leaf("w_out", &params.w_out)?,
        b_out: leaf("b_out", &params.b_out)?,
        node_embed: leaf("node_embed", node_embed)?,
    })
}

/// Node-adaptive affine map on tape. The input channels are expanded
/// against an all-ones block via the row-wise expansion so a single
/// Hadamard against ê·w forms every u[n,c] * W[n][c,o] product; the
/// grouped column sums then reduce over c in ascending order.
fn na_tape(
    tape: &mut Tape,
    u: NodeId,
    e_hat: NodeId,
    w: NodeId,
    b: NodeId,
    ones_h: NodeId,
    d_in: usize,
    h_dim: usize,
) -> Result<NodeId, TapeError> {
    let g = tape.matmul(e_hat, w)?;
    let u_exp = tape.gamma(u, ones_h)?;
    let prod = tape.hadamard(u_exp, g)?;
    let mut acc = tape.slice_cols(prod, 0, h_dim)?;
    for c in 1..d_in {
        let block = tape.slice_cols(prod, c * h_dim, (c + 1) * h_dim)?;
        acc = tape.add(acc, block)?;
    }
    let bias = tape.matmul(e_hat, b)?;
    tape.add(acc, bias)
}

fn affinity_tape(
    tape: &mut Tape,
    x: NodeId,
    nodes: &ParamNodes,
    cfg: &HyperConfig,
    rows_total: usize,
) -> Result<NodeId, TapeError> {
    match cfg.mode {
        AblationMode::StaticInter => {
            let uniform = Tensor::full(&[rows_total, cfg.d_phi], 1.0 / cfg.d_phi as f64);
            Ok(tape.constant(uniform))
        }
        AblationMode::StaticAll => {
            let c = Tensor::full(&[rows_total, cfg.d_phi], 1.0 / (cfg.d_phi as f64).sqrt());
            Ok(tape.constant(c))
        }
        _ => {
            let lin = tape.matmul(x, nodes.w_affinity)?;
            let pre = tape.add_row(lin, nodes.b_affinity)?;
            let act = apply_activation(tape, pre, cfg.activation)?;
            tape.softmax_rows(act)
        }
    }
}

fn augment_tape(
    tape: &mut Tape,
    nodes: &ParamNodes,
    cfg: &HyperConfig,
) -> Result<NodeId, TapeError> {
    match cfg.mode {
        AblationMode::NoGnea => tape.softmax_rows(nodes.node_embed),
        _ => {
            let lin = tape.matmul(nodes.node_embed, nodes.w_augment)?;
            let pre = tape.add_row(lin, nodes.b_augment)?;
            let act = apply_activation(tape, pre, cfg.activation)?;
            tape.softmax_rows(act)
        }
    }
}

fn apply_activation(tape: &mut Tape, x: NodeId, act: Activation) -> Result<NodeId, TapeError> {
    match act {
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Tanh => tape.tanh(x),
        Activation::Relu => tape.relu(x),
        Activation::LeakyRelu => tape.leaky_relu(x),
    }
}

/// Record the full batched window forward on `tape`.
pub fn build_batch_forward(
    tape: &mut Tape,
    params: &GlobalParams,
    node_embed: &Tensor,
    inputs: &BatchInputs,
    cfg: &HyperConfig,
    exchange: &mut dyn ShareExchange,
    opts: &ForwardOptions,
) -> Result<ForwardResult, ForwardError> {
    if inputs.x_steps.len() != cfg.t_in {
        return Err(ForwardError::WindowLength {
            got: inputs.x_steps.len(),
            want: cfg.t_in,
        });
    }
    let b = inputs.batch;
    let rows = inputs.rows;
    let rows_total = b * rows;
    let d = inputs.x_steps[0].cols();
    let d_in = cfg.d_in(d);
    let s_slots = params.time_embed.rows();
    for step in 0..cfg.t_in {
        for w in 0..b {
            for &slot in [inputs.slots[step][w], inputs.prev_slots[step][w]].iter() {
                if slot >= s_slots {
                    return Err(ForwardError::SlotRange(slot, s_slots));
                }
            }
        }
    }

    let nodes = register(tape, params, node_embed, opts.trainable)?;

    // Shared constants reused across steps.
    let ones_h = tape.constant(Tensor::ones(&[rows_total, cfg.h_dim]));
    let e_nu_tiled = tape.concat_rows(&vec![nodes.node_embed; b])?;
    let e_tilde = augment_tape(tape, &nodes, cfg)?;
    let e_tilde_tiled = tape.concat_rows(&vec![e_tilde; b])?;

    let mut h = tape.constant(Tensor::zeros(&[rows_total, cfg.h_dim]));
    let mut traces = Vec::new();

    for step in 0..cfg.t_in {
        let x = tape.constant(inputs.x_steps[step].clone());

        // Joint embedding rows: private embedding next to this window's
        // time-slot embedding.
        let mut tau_parts = Vec::with_capacity(b);
        for w in 0..b {
            let slot = inputs.slots[step][w];
            let row = tape.slice_rows(nodes.time_embed, slot, slot + 1)?;
            tau_parts.push(tape.concat_rows(&vec![row; rows])?);
        }
        let tau_block = tape.concat_rows(&tau_parts)?;
        let e_hat = tape.concat_cols(&[e_nu_tiled, tau_block])?;

        // Per-window trend factors.
        let mut etas = Vec::with_capacity(b);
        for w in 0..b {
            let cur = tape.slice_rows(nodes.time_embed, inputs.slots[step][w], inputs.slots[step][w] + 1)?;
            let prev = tape.slice_rows(
                nodes.time_embed,
                inputs.prev_slots[step][w],
                inputs.prev_slots[step][w] + 1,
            )?;
            let prev_t = tape.transpose(prev)?;
            etas.push(tape.matmul(cur, prev_t)?);
        }

        let (phi, gamma_full) = if cfg.mode == AblationMode::NoSpatial {
            (None, None)
        } else {
            let phi = affinity_tape(tape, x, &nodes, cfg, rows_total)?;
            let gamma_full = tape.gamma(phi, e_tilde_tiled)?;
            (Some(phi), Some(gamma_full))
        };

        let mut combine = |tape: &mut Tape, k: u8, i_k: NodeId| -> Result<NodeId, ForwardError> {
            if cfg.mode == AblationMode::NoSpatial {
                return Ok(i_k);
            }
            let (phi, gamma_full) = (phi.unwrap(), gamma_full.unwrap());
            let mut l_parts = Vec::with_capacity(b);
            if opts.detach_sums {
                // Shares leave the tape here: plain math on recorded values.
                let phi_val = tape.value(phi).clone();
                let gamma_val = tape.value(gamma_full).clone();
                let i_val = tape.value(i_k).clone();
                let mut p_parts = Vec::with_capacity(b);
                let mut q_parts = Vec::with_capacity(b);
                for w in 0..b {
                    let r0 = w * rows;
                    let r1 = (w + 1) * rows;
                    let phi_w = phi_val.slice_rows(r0, r1).map_err(ModelError::from)?;
                    let gamma_w = gamma_val.slice_rows(r0, r1).map_err(ModelError::from)?;
                    let i_w = i_val.slice_rows(r0, r1).map_err(ModelError::from)?;
                    p_parts.push(p_share(&phi_w, &i_w)?);
                    q_parts.push(
                        gamma_w
                            .transpose()
                            .map_err(ModelError::from)?
                            .matmul(&i_w)
                            .map_err(ModelError::from)?,
                    );
                }
                let p_stack = Tensor::stack(&p_parts).map_err(ModelError::from)?;
                let q_stack = Tensor::stack(&q_parts).map_err(ModelError::from)?;
                let (p_sums, q_sums) = exchange.exchange(k, step, p_stack, q_stack)?;
                for w in 0..b {
                    let p_sum = tape.constant(p_sums.unstack(w).map_err(ModelError::from)?);
                    let q_sum = tape.constant(q_sums.unstack(w).map_err(ModelError::from)?);
                    let phi_w = tape.slice_rows(phi, w * rows, (w + 1) * rows)?;
                    let gamma_w = tape.slice_rows(gamma_full, w * rows, (w + 1) * rows)?;
                    let trend = tape.matmul(phi_w, p_sum)?;
                    let trend = tape.scale_by_scalar(trend, etas[w])?;
                    let inter = tape.matmul(gamma_w, q_sum)?;
                    l_parts.push(tape.add(trend, inter)?);
                }
            } else {
                // Fully differentiable single-block route for gradient
                // verification; the sums are this block's own shares.
                for w in 0..b {
                    let phi_w = tape.slice_rows(phi, w * rows, (w + 1) * rows)?;
                    let gamma_w = tape.slice_rows(gamma_full, w * rows, (w + 1) * rows)?;
                    let i_w = tape.slice_rows(i_k, w * rows, (w + 1) * rows)?;
                    let phi_t = tape.transpose(phi_w)?;
                    let p_sum = tape.matmul(phi_t, i_w)?;
                    let gamma_t = tape.transpose(gamma_w)?;
                    let q_sum = tape.matmul(gamma_t, i_w)?;
                    let trend = tape.matmul(phi_w, p_sum)?;
                    let trend = tape.scale_by_scalar(trend, etas[w])?;
                    let inter = tape.matmul(gamma_w, q_sum)?;
                    l_parts.push(tape.add(trend, inter)?);
                }
            }
            Ok(tape.concat_rows(&l_parts)?)
        };

        let i1 = tape.concat_cols(&[x, h])?;
        let l1 = combine(tape, 1, i1)?;
        let z_pre = na_tape(tape, l1, e_hat, nodes.w_update, nodes.b_update, ones_h, d_in, cfg.h_dim)?;
        let z = tape.sigmoid(z_pre)?;
        let r_pre = na_tape(tape, l1, e_hat, nodes.w_reset, nodes.b_reset, ones_h, d_in, cfg.h_dim)?;
        let r = tape.sigmoid(r_pre)?;

        let rh = tape.hadamard(r, h)?;
        let i2 = tape.concat_cols(&[x, rh])?;
        let l2 = combine(tape, 2, i2)?;
        let c_pre = na_tape(tape, l2, e_hat, nodes.w_cand, nodes.b_cand, ones_h, d_in, cfg.h_dim)?;
        let h_cand = tape.tanh(c_pre)?;

        let one_minus_z = tape.sub(ones_h, z)?;
        let keep = tape.hadamard(one_minus_z, h)?;
        let take = tape.hadamard(z, h_cand)?;
        let h_next = tape.add(keep, take)?;

        if opts.capture {
            traces.push(StepTrace {
                l1: tape.value(l1).clone(),
                l2: tape.value(l2).clone(),
                z: tape.value(z).clone(),
                r: tape.value(r).clone(),
                h_cand: tape.value(h_cand).clone(),
                h: tape.value(h_next).clone(),
            });
        }
        h = h_next;
    }

    let lin = tape.matmul(h, nodes.w_out)?;
    let prediction = tape.add_row(lin, nodes.b_out)?;
    let target = tape.constant(inputs.targets.clone());
    let diff = tape.sub(prediction, target)?;
    let absdiff = tape.abs(diff)?;
    let loss = tape.mean(absdiff)?;

    Ok(ForwardResult {
        loss,
        prediction,
        traces,
    })
}

/// Plain single-window forecast over one node block with single-block
/// aggregation; mirrors the recorded route operation for operation.
/// Returns [t_out, rows, d].
pub fn forecast(
    x_steps: &[Tensor],
    slots: &[usize],
    prev_slots: &[usize],
    params: &GlobalParams,
    node_embed: &Tensor,
    cfg: &HyperConfig,
) -> Result<Tensor, ForwardError> {
    if x_steps.len() != cfg.t_in {
        return Err(ForwardError::WindowLength {
            got: x_steps.len(),
            want: cfg.t_in,
        });
    }
    let rows = node_embed.rows();
    let d = x_steps[0].cols();
    let e_tilde = augment_embedding(node_embed, params, cfg)?;
    let mut h = Tensor::zeros(&[rows, cfg.h_dim]);
    for step in 0..cfg.t_in {
        let x = &x_steps[step];
        let slot = slots[step];
        let prev = prev_slots[step];
        let s_slots = params.time_embed.rows();
        if slot >= s_slots || prev >= s_slots {
            return Err(ForwardError::SlotRange(slot.max(prev), s_slots));
        }
        let tau = params.time_embed.slice_rows(slot, slot + 1).map_err(ModelError::from)?;
        let tau_prev = params
            .time_embed
            .slice_rows(prev, prev + 1)
            .map_err(ModelError::from)?;
        let e_hat = crate::model::joint_embedding(node_embed, &tau)?;
        let eta = crate::model::trend_factor(&tau, &tau_prev)?;

        let i1 = Tensor::concat_cols(&[x, &h]).map_err(ModelError::from)?;
        let l1 = if cfg.mode == AblationMode::NoSpatial {
            i1.clone()
        } else {
            let phi = affinity_features(x, params, cfg)?;
            let p_sum = p_share(&phi, &i1)?;
            let q_sum = q_share(&phi, &e_tilde, &i1)?;
            combine_l(&phi, &e_tilde, eta, &p_sum, &q_sum)?
        };
        let (z, r) = gate_zr(&l1, &e_hat, params)?;

        let i2 = Tensor::concat_cols(&[x, &r.hadamard(&h).map_err(ModelError::from)?])
            .map_err(ModelError::from)?;
        let l2 = if cfg.mode == AblationMode::NoSpatial {
            i2.clone()
        } else {
            let phi = affinity_features(x, params, cfg)?;
            let p_sum = p_share(&phi, &i2)?;
            let q_sum = q_share(&phi, &e_tilde, &i2)?;
            combine_l(&phi, &e_tilde, eta, &p_sum, &q_sum)?
        };
        h = gate_h(&l2, &e_hat, &z, &h, params)?;
    }
    Ok(readout(&h, params, cfg.t_out, d)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> HyperConfig {
        HyperConfig {
            d_n: 3,
            d_t: 2,
            h_dim: 4,
            t_in: 3,
            t_out: 2,
            ..HyperConfig::default()
        }
    }

    fn rng_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        let n: usize = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn window_inputs(
        cfg: &HyperConfig,
        rows: usize,
        d: usize,
        batch: usize,
        seed: u64,
    ) -> BatchInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_steps = (0..cfg.t_in)
            .map(|_| rng_tensor(&mut rng, &[batch * rows, d]))
            .collect();
        let targets = rng_tensor(&mut rng, &[batch * rows, cfg.t_out * d]);
        let slots = (0..cfg.t_in)
            .map(|s| (0..batch).map(|w| (s + w + 1) % 8).collect())
            .collect();
        let prev_slots = (0..cfg.t_in)
            .map(|s| (0..batch).map(|w| (s + w) % 8).collect())
            .collect();
        BatchInputs {
            x_steps,
            targets,
            slots,
            prev_slots,
            batch,
            rows,
        }
    }

    #[test]
    fn forward_runs_and_replays() {
        let cfg = small_cfg();
        let (rows, d, batch) = (3, 2, 2);
        let params = GlobalParams::init(&cfg, d, 8, 4);
        let e_nu = crate::model::init_node_embed(rows, cfg.d_n, 4);
        let inputs = window_inputs(&cfg, rows, d, batch, 9);
        let mut tape = Tape::new();
        let out = build_batch_forward(
            &mut tape,
            &params,
            &e_nu,
            &inputs,
            &cfg,
            &mut LocalExchange,
            &ForwardOptions::default(),
        )
        .unwrap();
        assert!(tape.value(out.loss).item().is_finite());
        assert!(tape.replay_check().unwrap());
    }

    #[test]
    fn plain_forecast_matches_tape_forward() {
        let cfg = small_cfg();
        let (rows, d) = (4, 2);
        let params = GlobalParams::init(&cfg, d, 8, 11);
        let e_nu = crate::model::init_node_embed(rows, cfg.d_n, 11);
        let inputs = window_inputs(&cfg, rows, d, 1, 13);

        let mut tape = Tape::new();
        let opts = ForwardOptions {
            trainable: false,
            ..ForwardOptions::default()
        };
        let out = build_batch_forward(
            &mut tape,
            &params,
            &e_nu,
            &inputs,
            &cfg,
            &mut LocalExchange,
            &opts,
        )
        .unwrap();
        let pred_tape = tape.value(out.prediction);

        let slots: Vec<usize> = (0..cfg.t_in).map(|s| inputs.slots[s][0]).collect();
        let prevs: Vec<usize> = (0..cfg.t_in).map(|s| inputs.prev_slots[s][0]).collect();
        let y = forecast(&inputs.x_steps, &slots, &prevs, &params, &e_nu, &cfg).unwrap();
        assert_eq!(y.dims(), &[cfg.t_out, rows, d]);

        // Same values, different layout.
        for node in 0..rows {
            for tau in 0..cfg.t_out {
                for f in 0..d {
                    let a = y.data()[tau * rows * d + node * d + f];
                    let b = pred_tape.at2(node, tau * d + f);
                    assert_eq!(a, b, "node {node} tau {tau} f {f}");
                }
            }
        }
    }

    #[test]
    fn forecast_zero_readout_is_zero() {
        let cfg = small_cfg();
        let (rows, d) = (3, 2);
        let mut params = GlobalParams::init(&cfg, d, 8, 2);
        params.w_out = Tensor::zeros(params.w_out.dims());
        params.b_out = Tensor::zeros(params.b_out.dims());
        let e_nu = crate::model::init_node_embed(rows, cfg.d_n, 2);
        let inputs = window_inputs(&cfg, rows, d, 1, 3);
        let slots: Vec<usize> = (0..cfg.t_in).map(|s| inputs.slots[s][0]).collect();
        let prevs: Vec<usize> = (0..cfg.t_in).map(|s| inputs.prev_slots[s][0]).collect();
        let y = forecast(&inputs.x_steps, &slots, &prevs, &params, &e_nu, &cfg).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_targets_zero_readout_give_zero_loss_and_gradient() {
        let cfg = small_cfg();
        let (rows, d, batch) = (3, 2, 2);
        let mut params = GlobalParams::init(&cfg, d, 8, 8);
        params.w_out = Tensor::zeros(params.w_out.dims());
        params.b_out = Tensor::zeros(params.b_out.dims());
        let e_nu = crate::model::init_node_embed(rows, cfg.d_n, 8);
        let mut inputs = window_inputs(&cfg, rows, d, batch, 9);
        inputs.targets = Tensor::zeros(inputs.targets.dims());

        let mut tape = Tape::new();
        let out = build_batch_forward(
            &mut tape,
            &params,
            &e_nu,
            &inputs,
            &cfg,
            &mut LocalExchange,
            &ForwardOptions::default(),
        )
        .unwrap();
        assert_eq!(tape.value(out.loss).item(), 0.0);
        let grads = tape.backward(out.loss).unwrap();
        assert!(grads["w_out"].data().iter().all(|&g| g == 0.0));
        assert!(grads["b_out"].data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn forecast_rejects_wrong_window_length() {
        let cfg = small_cfg();
        let params = GlobalParams::init(&cfg, 2, 8, 2);
        let e_nu = crate::model::init_node_embed(3, cfg.d_n, 2);
        let x = vec![Tensor::zeros(&[3, 2]); cfg.t_in - 1];
        let err = forecast(&x, &[0; 2], &[0; 2], &params, &e_nu, &cfg);
        assert!(matches!(err, Err(ForwardError::WindowLength { .. })));
    }

    #[test]
    fn forecast_is_permutation_equivariant() {
        let cfg = small_cfg();
        let (rows, d) = (5, 2);
        let params = GlobalParams::init(&cfg, d, 8, 21);
        let e_nu = crate::model::init_node_embed(rows, cfg.d_n, 21);
        let inputs = window_inputs(&cfg, rows, d, 1, 22);
        let slots: Vec<usize> = (0..cfg.t_in).map(|s| inputs.slots[s][0]).collect();
        let prevs: Vec<usize> = (0..cfg.t_in).map(|s| inputs.prev_slots[s][0]).collect();
        let y = forecast(&inputs.x_steps, &slots, &prevs, &params, &e_nu, &cfg).unwrap();

        let perm = [3usize, 0, 4, 1, 2];
        let e_perm = e_nu.gather_rows(&perm).unwrap();
        let x_perm: Vec<Tensor> = inputs
            .x_steps
            .iter()
            .map(|x| x.gather_rows(&perm).unwrap())
            .collect();
        let y_perm = forecast(&x_perm, &slots, &prevs, &params, &e_perm, &cfg).unwrap();

        for tau in 0..cfg.t_out {
            for (new_row, &old_row) in perm.iter().enumerate() {
                for f in 0..d {
                    let a = y.data()[tau * rows * d + old_row * d + f];
                    let b = y_perm.data()[tau * rows * d + new_row * d + f];
                    assert!((a - b).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn hidden_traces_stay_bounded() {
        let cfg = small_cfg();
        let (rows, d, batch) = (3, 2, 2);
        let params = GlobalParams::init(&cfg, d, 8, 6);
        let e_nu = crate::model::init_node_embed(rows, cfg.d_n, 6);
        let inputs = window_inputs(&cfg, rows, d, batch, 7);
        let mut tape = Tape::new();
        let opts = ForwardOptions {
            capture: true,
            ..ForwardOptions::default()
        };
        let out = build_batch_forward(
            &mut tape,
            &params,
            &e_nu,
            &inputs,
            &cfg,
            &mut LocalExchange,
            &opts,
        )
        .unwrap();
        assert_eq!(out.traces.len(), cfg.t_in);
        for trace in &out.traces {
            assert!(trace.h.data().iter().all(|v| v.abs() <= 1.0));
            assert!(trace.z.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    /// Gradients of the full model (differentiable single-block route)
    /// against central differences.
    #[test]
    fn model_gradients_match_finite_difference() {
        use crate::tape::{finite_diff_check, ParamMap};

        let cfg = small_cfg();
        let (rows, d, batch) = (4, 1, 1);
        let params = GlobalParams::init(&cfg, d, 8, 31);
        let e_nu = crate::model::init_node_embed(rows, cfg.d_n, 31);
        let inputs = window_inputs(&cfg, rows, d, batch, 32);

        let f = |p: &ParamMap| {
            let globals = GlobalParams::from_map(p).expect("param map");
            let e = p.get("node_embed").expect("node_embed").clone();
            let mut tape = Tape::new();
            let opts = ForwardOptions {
                detach_sums: false,
                ..ForwardOptions::default()
            };
            let out = build_batch_forward(
                &mut tape,
                &globals,
                &e,
                &inputs,
                &cfg,
                &mut LocalExchange,
                &opts,
            )
            .map_err(|e| match e {
                ForwardError::Tape(t) => t,
                other => panic!("unexpected forward error: {other}"),
            })?;
            let grads = tape.backward(out.loss)?;
            Ok((tape.value(out.loss).item(), grads))
        };

        let mut pmap = params.to_map();
        pmap.insert("node_embed".into(), e_nu);
        let err = finite_diff_check(f, &pmap, 1e-5).unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
    }
}
