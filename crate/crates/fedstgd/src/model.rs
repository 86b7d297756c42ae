//! The recurrent dynamic-graph cell: centralized reference form, the
//! affinity/augmentation approximations, and the per-client share/combine
//! algebra the collective-learning protocol distributes.
//!
//! Everything here is plain tensor math; the tape-recorded twin used for
//! training lives in `forward`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tape::ParamMap;
use crate::tensor::{gamma_map, sigmoid, softmax_rows, Activation, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown ablation mode '{0}'")]
    UnknownMode(String),
    #[error("parameter bundle error: {0}")]
    Params(String),
}

/// Ablation switches for the approximated pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    /// Learned affinity features and augmented embeddings.
    Full,
    /// Skip the augmentation map: row-softmax the raw node embeddings.
    NoGnea,
    /// Server returns each client its own shares only.
    IntraOnly,
    /// Affinity features frozen to uniform rows (time-invariant).
    StaticInter,
    /// No graph mixing at all: the combine step passes inputs through.
    NoSpatial,
    /// Drop the data-driven gate factor: affinity Gram pinned to all-ones.
    StaticAll,
}

impl AblationMode {
    pub fn from_name(name: &str) -> Result<Self, ModelError> {
        match name {
            "full" => Ok(AblationMode::Full),
            "no_gnea" => Ok(AblationMode::NoGnea),
            "intra_only" => Ok(AblationMode::IntraOnly),
            "static_inter" => Ok(AblationMode::StaticInter),
            "no_spatial" => Ok(AblationMode::NoSpatial),
            "static_all" => Ok(AblationMode::StaticAll),
            other => Err(ModelError::UnknownMode(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoGnea => "no_gnea",
            AblationMode::IntraOnly => "intra_only",
            AblationMode::StaticInter => "static_inter",
            AblationMode::NoSpatial => "no_spatial",
            AblationMode::StaticAll => "static_all",
        }
    }
}

/// Model hyperparameters. Defaults follow the reference configuration:
/// gate factor 0.3, embedding and hidden widths 64, four-step windows,
/// four-unit affinity and augmentation heads.
#[derive(Debug, Clone)]
pub struct HyperConfig {
    pub alpha: f64,
    pub d_n: usize,
    pub d_t: usize,
    pub h_dim: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub d_phi: usize,
    pub d_psi: usize,
    pub activation: Activation,
    pub mode: AblationMode,
}

impl Default for HyperConfig {
    fn default() -> Self {
        HyperConfig {
            alpha: 0.3,
            d_n: 64,
            d_t: 64,
            h_dim: 64,
            t_in: 4,
            t_out: 4,
            d_phi: 4,
            d_psi: 4,
            activation: Activation::Relu,
            mode: AblationMode::Full,
        }
    }
}

impl HyperConfig {
    /// Joint embedding width.
    pub fn d_e(&self) -> usize {
        self.d_n + self.d_t
    }

    /// Gate input width for feature dimension `d`.
    pub fn d_in(&self, d: usize) -> usize {
        d + self.h_dim
    }

    /// Width of the augmented embedding actually used by the expansion map.
    pub fn psi_width(&self) -> usize {
        if self.mode == AblationMode::NoGnea {
            self.d_n
        } else {
            self.d_psi
        }
    }
}

/// Canonical order of the shared parameter tensors; wire format, FedAvg,
/// checkpointing and flattening all follow it.
pub const GLOBAL_PARAM_NAMES: [&str; 13] = [
    "w_update",
    "b_update",
    "w_reset",
    "b_reset",
    "w_cand",
    "b_cand",
    "w_affinity",
    "b_affinity",
    "w_augment",
    "b_augment",
    "time_embed",
    "w_out",
    "b_out",
];

/// Shared (server-aggregated) parameters. Node-adaptive weight generators
/// are stored flattened as d_e x (d_in * h) with column index c*h + o.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalParams {
    pub w_update: Tensor,
    pub b_update: Tensor,
    pub w_reset: Tensor,
    pub b_reset: Tensor,
    pub w_cand: Tensor,
    pub b_cand: Tensor,
    pub w_affinity: Tensor,
    pub b_affinity: Tensor,
    pub w_augment: Tensor,
    pub b_augment: Tensor,
    pub time_embed: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl GlobalParams {
    /// Deterministic initialization; the draw order is the canonical
    /// parameter order, so a seed pins every value.
    pub fn init(cfg: &HyperConfig, d: usize, steps_per_day: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_e = cfg.d_e();
        let d_in = cfg.d_in(d);
        let h = cfg.h_dim;
        let gate_a = 1.0 / ((d_e * d_in) as f64).sqrt();
        let mut uniform = |dims: &[usize], a: f64| -> Tensor {
            let n: usize = dims.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
            Tensor::new(dims.to_vec(), data).expect("init tensor")
        };
        GlobalParams {
            w_update: uniform(&[d_e, d_in * h], gate_a),
            b_update: Tensor::zeros(&[d_e, h]),
            w_reset: uniform(&[d_e, d_in * h], gate_a),
            b_reset: Tensor::zeros(&[d_e, h]),
            w_cand: uniform(&[d_e, d_in * h], gate_a),
            b_cand: Tensor::zeros(&[d_e, h]),
            w_affinity: uniform(&[d, cfg.d_phi], 1.0 / (d as f64).sqrt()),
            b_affinity: Tensor::zeros(&[1, cfg.d_phi]),
            w_augment: uniform(&[cfg.d_n, cfg.d_psi], 1.0 / (cfg.d_n as f64).sqrt()),
            b_augment: Tensor::zeros(&[1, cfg.d_psi]),
            time_embed: uniform(&[steps_per_day, cfg.d_t], 0.1),
            w_out: uniform(&[h, cfg.t_out * d], 1.0 / (h as f64).sqrt()),
            b_out: Tensor::zeros(&[1, cfg.t_out * d]),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_update", &self.w_update),
            ("b_update", &self.b_update),
            ("w_reset", &self.w_reset),
            ("b_reset", &self.b_reset),
            ("w_cand", &self.w_cand),
            ("b_cand", &self.b_cand),
            ("w_affinity", &self.w_affinity),
            ("b_affinity", &self.b_affinity),
            ("w_augment", &self.w_augment),
            ("b_augment", &self.b_augment),
            ("time_embed", &self.time_embed),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
        ]
    }

    pub fn to_map(&self) -> ParamMap {
        self.named()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    pub fn from_map(map: &ParamMap) -> Result<Self, ModelError> {
        let get = |k: &str| {
            map.get(k)
                .cloned()
                .ok_or_else(|| ModelError::Params(format!("missing tensor '{k}'")))
        };
        Ok(GlobalParams {
            w_update: get("w_update")?,
            b_update: get("b_update")?,
            w_reset: get("w_reset")?,
            b_reset: get("b_reset")?,
            w_cand: get("w_cand")?,
            b_cand: get("b_cand")?,
            w_affinity: get("w_affinity")?,
            b_affinity: get("b_affinity")?,
            w_augment: get("w_augment")?,
            b_augment: get("b_augment")?,
            time_embed: get("time_embed")?,
            w_out: get("w_out")?,
            b_out: get("b_out")?,
        })
    }

    /// Total shared parameter count |θ|.
    pub fn num_values(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Canonical-order flat vector.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for (_, t) in self.named() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of `flatten` against this bundle's shapes.
    pub fn unflatten_like(&self, flat: &[f64]) -> Result<Self, ModelError> {
        if flat.len() != self.num_values() {
            return Err(ModelError::Params(format!(
                "flat vector length {} != |θ| {}",
                flat.len(),
                self.num_values()
            )));
        }
        let mut map = ParamMap::new();
        let mut off = 0;
        for (name, t) in self.named() {
            let n = t.len();
            map.insert(
                name.to_string(),
                Tensor::new(t.dims().to_vec(), flat[off..off + n].to_vec())?,
            );
            off += n;
        }
        GlobalParams::from_map(&map)
    }
}

/// Private per-client node embeddings; never enters a protocol message.
pub fn init_node_embed(n: usize, d_n: usize, seed: u64) -> Tensor {
    // Separate stream so the same full-graph embedding is produced no
    // matter how the graph is partitioned.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let data = (0..n * d_n).map(|_| rng.gen_range(-0.5..0.5)).collect();
    Tensor::new(vec![n, d_n], data).expect("embedding init")
}

/// Gram matrix m·mᵀ with each off-diagonal pair computed once and
/// mirrored, so the output is symmetric to the bit.
fn gram_symmetric(m: &Tensor) -> Tensor {
    let n = m.rows();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    Tensor::new(vec![n, n], out).expect("gram")
}

/// Self-learned adjacency from node embeddings.
pub fn self_adjacency(e_nu: &Tensor) -> Result<Tensor, ModelError> {
    if e_nu.rank() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "self_adjacency",
            detail: format!("{:?}", e_nu.dims()),
        }
        .into());
    }
    Ok(gram_symmetric(e_nu))
}

/// Scalar trend factor: inner product of consecutive time-embedding rows.
pub fn trend_factor(row_t: &Tensor, row_prev: &Tensor) -> Result<f64, ModelError> {
    if row_t.dims() != row_prev.dims() || row_t.rank() != 2 || row_t.rows() != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "trend_factor",
            detail: format!("{:?} vs {:?}", row_t.dims(), row_prev.dims()),
        }
        .into());
    }
    Ok(row_t.row(0).iter().zip(row_prev.row(0)).map(|(a, b)| a * b).sum())
}

/// Periodic discriminant: tanh of the signal Gram, entries in (−1, 1).
pub fn periodic_discriminant(x: &Tensor) -> Result<Tensor, ModelError> {
    if x.rank() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "periodic_discriminant",
            detail: format!("{:?}", x.dims()),
        }
        .into());
    }
    Ok(gram_symmetric(x).map(f64::tanh))
}

/// Time-varying adjacency: (1 + α·σ(a_rho)) ⊙ (a_nu + η).
pub fn dynamic_adjacency(
    a_nu: &Tensor,
    a_rho: &Tensor,
    eta: f64,
    alpha: f64,
) -> Result<Tensor, ModelError> {
    if a_nu.dims() != a_rho.dims() {
        return Err(TensorError::ShapeMismatch {
            op: "dynamic_adjacency",
            detail: format!("{:?} vs {:?}", a_nu.dims(), a_rho.dims()),
        }
        .into());
    }
    let gate = a_rho.map(|v| 1.0 + alpha * sigmoid(v));
    let base = a_nu.map(|v| v + eta);
    Ok(gate.hadamard(&base)?)
}

/// Per-node joint embedding: node embedding row next to the (shared)
/// time-embedding row of the current slot.
pub fn joint_embedding(e_nu: &Tensor, e_tau_row: &Tensor) -> Result<Tensor, ModelError> {
    if e_tau_row.rank() != 2 || e_tau_row.rows() != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "joint_embedding",
            detail: format!("time row {:?}", e_tau_row.dims()),
        }
        .into());
    }
    let n = e_nu.rows();
    let tiled: Vec<&Tensor> = (0..n).map(|_| e_tau_row).collect();
    let time_block = Tensor::concat_rows(&tiled)?;
    Ok(Tensor::concat_cols(&[e_nu, &time_block])?)
}

/// Node-adaptive affine map: out[n] = u[n] · reshape(ê[n]·w, d_in x h)
/// + ê[n]·b. Accumulates over input channels in ascending order, matching
/// the recorded-op route exactly.
pub fn node_adaptive(
    u: &Tensor,
    e_hat: &Tensor,
    w: &Tensor,
    b: &Tensor,
) -> Result<Tensor, ModelError> {
    let rows = u.rows();
    let d_in = u.cols();
    let h = b.cols();
    if w.cols() != d_in * h || w.rows() != e_hat.cols() || e_hat.rows() != rows {
        return Err(TensorError::ShapeMismatch {
            op: "node_adaptive",
            detail: format!(
                "u {:?}, e_hat {:?}, w {:?}, b {:?}",
                u.dims(),
                e_hat.dims(),
                w.dims(),
                b.dims()
            ),
        }
        .into());
    }
    let g = e_hat.matmul(w)?;
    let bias = e_hat.matmul(b)?;
    let mut out = vec![0.0; rows * h];
    for n in 0..rows {
        let grow = g.row(n);
        let urow = u.row(n);
        let orow = &mut out[n * h..(n + 1) * h];
        for (c, &uv) in urow.iter().enumerate() {
            let block = &grow[c * h..(c + 1) * h];
            for (o, &gv) in orow.iter_mut().zip(block) {
                *o += uv * gv;
            }
        }
        for (o, &bv) in orow.iter_mut().zip(bias.row(n)) {
            *o += bv;
        }
    }
    Ok(Tensor::new(vec![rows, h], out)?)
}

/// One step of the centralized reference cell over the full graph.
pub fn cell_step_central(
    a: &Tensor,
    x: &Tensor,
    h_prev: &Tensor,
    e_hat: &Tensor,
    p: &GlobalParams,
) -> Result<Tensor, ModelError> {
    let i1 = Tensor::concat_cols(&[x, h_prev])?;
    let ai1 = a.matmul(&i1)?;
    let z = node_adaptive(&ai1, e_hat, &p.w_update, &p.b_update)?.map(sigmoid);
    let r = node_adaptive(&ai1, e_hat, &p.w_reset, &p.b_reset)?.map(sigmoid);
    let i2 = Tensor::concat_cols(&[x, &r.hadamard(h_prev)?])?;
    let ai2 = a.matmul(&i2)?;
    let h_cand = node_adaptive(&ai2, e_hat, &p.w_cand, &p.b_cand)?.map(f64::tanh);
    convex_update(&z, h_prev, &h_cand)
}

/// h = (1−z)⊙h_prev + z⊙h_cand; keeps the state inside [−1, 1].
pub fn convex_update(z: &Tensor, h_prev: &Tensor, h_cand: &Tensor) -> Result<Tensor, ModelError> {
    let keep = z.map(|v| 1.0 - v).hadamard(h_prev)?;
    let take = z.hadamard(h_cand)?;
    let h = keep.add(&take)?;
    debug_assert!(h.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
    Ok(h)
}

/// Affinity features Φ: a linear layer into d_phi units, the configured
/// activation, then a row softmax. Static modes freeze Φ to constants.
pub fn affinity_features(
    x: &Tensor,
    p: &GlobalParams,
    cfg: &HyperConfig,
) -> Result<Tensor, ModelError> {
    let n = x.rows();
    match cfg.mode {
        AblationMode::StaticInter => Ok(softmax_rows(&Tensor::ones(&[n, cfg.d_phi]))?),
        // 1/sqrt(d_phi) entries make the affinity Gram the all-ones matrix,
        // which is the Hadamard identity: the gate factor drops out.
        AblationMode::StaticAll => Ok(Tensor::full(
            &[n, cfg.d_phi],
            1.0 / (cfg.d_phi as f64).sqrt(),
        )),
        _ => {
            let pre = x.matmul(&p.w_affinity)?.add_row_broadcast(&p.b_affinity)?;
            Ok(softmax_rows(&cfg.activation.apply(&pre))?)
        }
    }
}

/// Augmented node embedding Ẽ: nonlinear map plus row softmax; the
/// `no_gnea` ablation row-softmaxes the raw embedding instead.
pub fn augment_embedding(
    e_nu: &Tensor,
    p: &GlobalParams,
    cfg: &HyperConfig,
) -> Result<Tensor, ModelError> {
    match cfg.mode {
        AblationMode::NoGnea => Ok(softmax_rows(e_nu)?),
        _ => {
            let pre = e_nu.matmul(&p.w_augment)?.add_row_broadcast(&p.b_augment)?;
            Ok(softmax_rows(&cfg.activation.apply(&pre))?)
        }
    }
}

/// Client-side P share: Φᵀ·I, a d_phi x d_in summary independent of the
/// client's node count.
pub fn p_share(phi: &Tensor, i_k: &Tensor) -> Result<Tensor, ModelError> {
    if phi.rows() != i_k.rows() {
        return Err(TensorError::ShapeMismatch {
            op: "p_share",
            detail: format!("{:?} vs {:?}", phi.dims(), i_k.dims()),
        }
        .into());
    }
    Ok(phi.transpose()?.matmul(i_k)?)
}

/// Client-side Q share: Γ(Φ, Ẽ)ᵀ·I.
pub fn q_share(phi: &Tensor, e_tilde: &Tensor, i_k: &Tensor) -> Result<Tensor, ModelError> {
    if phi.rows() != i_k.rows() || e_tilde.rows() != i_k.rows() {
        return Err(TensorError::ShapeMismatch {
            op: "q_share",
            detail: format!(
                "{:?}, {:?} vs {:?}",
                phi.dims(),
                e_tilde.dims(),
                i_k.dims()
            ),
        }
        .into());
    }
    let g = gamma_map(phi, e_tilde)?;
    Ok(g.transpose()?.matmul(i_k)?)
}

/// Local combine: L̃ = η·(Φ·ΣP) + Γ(Φ, Ẽ)·ΣQ.
pub fn combine_l(
    phi: &Tensor,
    e_tilde: &Tensor,
    eta: f64,
    p_sum: &Tensor,
    q_sum: &Tensor,
) -> Result<Tensor, ModelError> {
    let trend = phi.matmul(p_sum)?.scale(eta);
    let g = gamma_map(phi, e_tilde)?;
    Ok(trend.add(&g.matmul(q_sum)?)?)
}

/// Update/reset gates from the first combined input.
pub fn gate_zr(
    l1: &Tensor,
    e_hat: &Tensor,
    p: &GlobalParams,
) -> Result<(Tensor, Tensor), ModelError> {
    let z = node_adaptive(l1, e_hat, &p.w_update, &p.b_update)?.map(sigmoid);
    let r = node_adaptive(l1, e_hat, &p.w_reset, &p.b_reset)?.map(sigmoid);
    Ok((z, r))
}

/// Candidate state and convex update from the second combined input.
pub fn gate_h(
    l2: &Tensor,
    e_hat: &Tensor,
    z: &Tensor,
    h_prev: &Tensor,
    p: &GlobalParams,
) -> Result<Tensor, ModelError> {
    let h_cand = node_adaptive(l2, e_hat, &p.w_cand, &p.b_cand)?.map(f64::tanh);
    convex_update(z, h_prev, &h_cand)
}

/// Full gate pass given both combined inputs (the caller has already run
/// the two collective rounds).
pub fn client_gate_update(
    l1: &Tensor,
    l2: &Tensor,
    e_hat: &Tensor,
    h_prev: &Tensor,
    p: &GlobalParams,
) -> Result<Tensor, ModelError> {
    let (z, _r) = gate_zr(l1, e_hat, p)?;
    gate_h(l2, e_hat, &z, h_prev, p)
}

/// Readout: per node, h · w_out + b_out reshaped to [t_out, n, d] with
/// column index τ·d + f.
pub fn readout(
    h: &Tensor,
    p: &GlobalParams,
    t_out: usize,
    d: usize,
) -> Result<Tensor, ModelError> {
    let flat = h.matmul(&p.w_out)?.add_row_broadcast(&p.b_out)?;
    let n = h.rows();
    let mut out = vec![0.0; t_out * n * d];
    for node in 0..n {
        let row = flat.row(node);
        for tau in 0..t_out {
            for f in 0..d {
                out[tau * n * d + node * d + f] = row[tau * d + f];
            }
        }
    }
    Ok(Tensor::new(vec![t_out, n, d], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg() -> HyperConfig {
        HyperConfig {
            d_n: 3,
            d_t: 2,
            h_dim: 4,
            t_in: 2,
            t_out: 2,
            ..HyperConfig::default()
        }
    }

    fn rng_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        let n: usize = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn self_adjacency_examples() {
        assert_eq!(self_adjacency(&Tensor::eye(2)).unwrap(), Tensor::eye(2));
        let e = Tensor::matrix(&[&[1.0], &[2.0]]);
        let a = self_adjacency(&e).unwrap();
        assert_eq!(a.data(), &[1.0, 2.0, 2.0, 4.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let e = rng_tensor(&mut rng, &[5, 3]);
        let a = self_adjacency(&e).unwrap();
        let at = a.transpose().unwrap();
        assert_eq!(a.data(), at.data(), "symmetric to the bit");
    }

    #[test]
    fn trend_factor_examples() {
        let unit = Tensor::matrix(&[&[1.0, 0.0, 0.0]]);
        assert_eq!(trend_factor(&unit, &unit).unwrap(), 1.0);

        let a = Tensor::matrix(&[&[0.5, 0.5]]);
        let b = Tensor::matrix(&[&[0.2, 0.4]]);
        assert!((trend_factor(&a, &b).unwrap() - 0.3).abs() < 1e-15);

        let x = Tensor::matrix(&[&[1.0, 0.0]]);
        let y = Tensor::matrix(&[&[0.0, 1.0]]);
        assert_eq!(trend_factor(&x, &y).unwrap(), 0.0);

        assert!(trend_factor(&a, &unit).is_err());
    }

    #[test]
    fn periodic_discriminant_examples() {
        let zero = Tensor::zeros(&[3, 2]);
        assert_eq!(periodic_discriminant(&zero).unwrap(), Tensor::zeros(&[3, 3]));

        let x = Tensor::matrix(&[&[1.0], &[2.0]]);
        let a = periodic_discriminant(&x).unwrap();
        assert!((a.at2(0, 0) - 0.76159).abs() < 1e-5);
        assert!((a.at2(0, 1) - 0.96403).abs() < 1e-5);
        assert!((a.at2(1, 0) - 0.96403).abs() < 1e-5);
        assert!((a.at2(1, 1) - 0.99933).abs() < 1e-5);
        assert_eq!(a.data(), a.transpose().unwrap().data());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rng_tensor(&mut rng, &[4, 3]);
        let a = periodic_discriminant(&x).unwrap();
        assert!(a.data().iter().all(|v| v.abs() < 1.0));
        // tanh rounds to ±1.0 in f64 once the Gram saturates.
        let big = periodic_discriminant(&x.scale(50.0)).unwrap();
        assert!(big.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn dynamic_adjacency_examples() {
        // Zero discriminant, zero trend, identity self-adjacency.
        let a = dynamic_adjacency(&Tensor::eye(2), &Tensor::zeros(&[2, 2]), 0.0, 0.3).unwrap();
        assert!((a.at2(0, 0) - 1.15).abs() < 1e-15);
        assert!((a.at2(0, 1) - 0.0).abs() < 1e-15);

        // Gate disabled.
        let a_nu = Tensor::matrix(&[&[0.2, -0.4], &[-0.4, 0.8]]);
        let rho = Tensor::matrix(&[&[0.5, -1.0], &[-1.0, 2.0]]);
        let a = dynamic_adjacency(&a_nu, &rho, 0.25, 0.0).unwrap();
        assert!((a.at2(0, 1) - (-0.4 + 0.25)).abs() < 1e-15);

        // Annihilation.
        let a = dynamic_adjacency(&Tensor::zeros(&[2, 2]), &rho, 0.0, 0.3).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn joint_embedding_examples() {
        let e = Tensor::matrix(&[&[1.0]]);
        let tau = Tensor::matrix(&[&[2.0, 3.0]]);
        assert_eq!(joint_embedding(&e, &tau).unwrap().data(), &[1.0, 2.0, 3.0]);

        let e3 = Tensor::matrix(&[&[1.0], &[2.0], &[3.0]]);
        let je = joint_embedding(&e3, &tau).unwrap();
        assert_eq!(je.dims(), &[3, 3]);
        for r in 0..3 {
            assert_eq!(&je.row(r)[1..], &[2.0, 3.0]);
        }
    }

    fn zero_params(cfg: &HyperConfig, d: usize, s: usize) -> GlobalParams {
        let mut p = GlobalParams::init(cfg, d, s, 0);
        p.w_update = Tensor::zeros(p.w_update.dims());
        p.b_update = Tensor::zeros(p.b_update.dims());
        p.w_reset = Tensor::zeros(p.w_reset.dims());
        p.b_reset = Tensor::zeros(p.b_reset.dims());
        p.w_cand = Tensor::zeros(p.w_cand.dims());
        p.b_cand = Tensor::zeros(p.b_cand.dims());
        p
    }

    #[test]
    fn central_cell_zero_weights_closed_form() {
        let cfg = small_cfg();
        let d = 2;
        let p = zero_params(&cfg, d, 8);
        let n = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rng_tensor(&mut rng, &[n, d]);
        let h_prev = rng_tensor(&mut rng, &[n, cfg.h_dim]).scale(0.5);
        let e_nu = rng_tensor(&mut rng, &[n, cfg.d_n]);
        let e_hat = joint_embedding(&e_nu, &p.time_embed.slice_rows(0, 1).unwrap()).unwrap();
        let a = Tensor::eye(n);
        let h = cell_step_central(&a, &x, &h_prev, &e_hat, &p).unwrap();
        // z = r = 0.5, candidate = tanh(0) = 0, so h = 0.5 * h_prev.
        assert!(h.max_abs_diff(&h_prev.scale(0.5)) < 1e-15);
    }

    /// Straight-line re-implementation of the reference cell, looping the
    /// node-adaptive map per node directly from the defining equations.
    fn cell_step_reference(
        a: &Tensor,
        x: &Tensor,
        h_prev: &Tensor,
        e_hat: &Tensor,
        p: &GlobalParams,
    ) -> Tensor {
        let n = x.rows();
        let d_in = x.cols() + h_prev.cols();
        let h_dim = h_prev.cols();
        let na = |u: &Tensor, w: &Tensor, b: &Tensor| -> Tensor {
            let mut vals = vec![0.0; n * h_dim];
            for node in 0..n {
                // per-node weight matrix W[node] = ê[node] · w, d_in x h
                let mut wn = vec![0.0; d_in * h_dim];
                for e in 0..e_hat.cols() {
                    let ev = e_hat.at2(node, e);
                    for c in 0..d_in * h_dim {
                        wn[c] += ev * w.at2(e, c);
                    }
                }
                for o in 0..h_dim {
                    let mut acc = 0.0;
                    for c in 0..d_in {
                        acc += u.at2(node, c) * wn[c * h_dim + o];
                    }
                    for e in 0..e_hat.cols() {
                        acc += e_hat.at2(node, e) * b.at2(e, o);
                    }
                    vals[node * h_dim + o] = acc;
                }
            }
            Tensor::new(vec![n, h_dim], vals).unwrap()
        };
        let i1 = Tensor::concat_cols(&[x, h_prev]).unwrap();
        let ai1 = a.matmul(&i1).unwrap();
        let z = na(&ai1, &p.w_update, &p.b_update).map(sigmoid);
        let r = na(&ai1, &p.w_reset, &p.b_reset).map(sigmoid);
        let i2 = Tensor::concat_cols(&[x, &r.hadamard(h_prev).unwrap()]).unwrap();
        let ai2 = a.matmul(&i2).unwrap();
        let hc = na(&ai2, &p.w_cand, &p.b_cand).map(f64::tanh);
        z.map(|v| 1.0 - v)
            .hadamard(h_prev)
            .unwrap()
            .add(&z.hadamard(&hc).unwrap())
            .unwrap()
    }

    #[test]
    fn central_cell_matches_straight_line_reference() {
        let cfg = small_cfg();
        let d = 2;
        let n = 4;
        let p = GlobalParams::init(&cfg, d, 8, 42);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rng_tensor(&mut rng, &[n, d]);
        let h_prev = rng_tensor(&mut rng, &[n, cfg.h_dim]).scale(0.8);
        let e_nu = rng_tensor(&mut rng, &[n, cfg.d_n]);
        let e_tau_t = p.time_embed.slice_rows(1, 2).unwrap();
        let e_tau_prev = p.time_embed.slice_rows(0, 1).unwrap();
        let e_hat = joint_embedding(&e_nu, &e_tau_t).unwrap();
        let a_nu = self_adjacency(&e_nu).unwrap();
        let a_rho = periodic_discriminant(&x).unwrap();
        let eta = trend_factor(&e_tau_t, &e_tau_prev).unwrap();
        let a = dynamic_adjacency(&a_nu, &a_rho, eta, cfg.alpha).unwrap();

        let fast = cell_step_central(&a, &x, &h_prev, &e_hat, &p).unwrap();
        let slow = cell_step_reference(&a, &x, &h_prev, &e_hat, &p);
        assert!(fast.max_abs_diff(&slow) <= 1e-12);
    }

    #[test]
    fn hidden_state_stays_bounded() {
        let cfg = small_cfg();
        let d = 2;
        let n = 3;
        for seed in 0..5u64 {
            let p = GlobalParams::init(&cfg, d, 8, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let e_nu = rng_tensor(&mut rng, &[n, cfg.d_n]);
            let mut h = Tensor::zeros(&[n, cfg.h_dim]);
            for t in 0..20 {
                let x = rng_tensor(&mut rng, &[n, d]).scale(3.0);
                let slot = t % 8;
                let e_tau = p.time_embed.slice_rows(slot, slot + 1).unwrap();
                let prev = p.time_embed.slice_rows((t + 7) % 8, (t + 7) % 8 + 1).unwrap();
                let e_hat = joint_embedding(&e_nu, &e_tau).unwrap();
                let a = dynamic_adjacency(
                    &self_adjacency(&e_nu).unwrap(),
                    &periodic_discriminant(&x).unwrap(),
                    trend_factor(&e_tau, &prev).unwrap(),
                    cfg.alpha,
                )
                .unwrap();
                h = cell_step_central(&a, &x, &h, &e_hat, &p).unwrap();
                assert!(h.data().iter().all(|v| v.abs() <= 1.0));
            }
        }
    }

    #[test]
    fn affinity_feature_laws() {
        let cfg = HyperConfig {
            d_n: 3,
            d_t: 2,
            ..HyperConfig::default()
        };
        let p = GlobalParams::init(&cfg, 2, 8, 9);
        let x = Tensor::matrix(&[&[0.5, -0.2], &[0.5, -0.2], &[1.0, 3.0]]);
        let phi = affinity_features(&x, &p, &cfg).unwrap();
        assert_eq!(phi.dims(), &[3, 4]);
        for r in 0..3 {
            let s: f64 = phi.row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
        // Identical inputs map to identical rows.
        assert_eq!(phi.row(0), phi.row(1));

        let static_cfg = HyperConfig {
            mode: AblationMode::StaticInter,
            ..cfg.clone()
        };
        let phi_s = affinity_features(&x, &p, &static_cfg).unwrap();
        assert!(phi_s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let ones_cfg = HyperConfig {
            mode: AblationMode::StaticAll,
            ..cfg
        };
        let phi_1 = affinity_features(&x, &p, &ones_cfg).unwrap();
        let gram = phi_1.matmul(&phi_1.transpose().unwrap()).unwrap();
        assert!(gram.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn augment_embedding_laws() {
        let cfg = HyperConfig {
            d_n: 3,
            d_t: 2,
            ..HyperConfig::default()
        };
        let p = GlobalParams::init(&cfg, 2, 8, 10);
        let e = Tensor::matrix(&[&[0.1, 0.2, 0.3], &[0.1, 0.2, 0.3]]);
        let et = augment_embedding(&e, &p, &cfg).unwrap();
        assert_eq!(et.dims(), &[2, 4]);
        assert_eq!(et.row(0), et.row(1));
        for r in 0..2 {
            let s: f64 = et.row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }

        let raw_cfg = HyperConfig {
            mode: AblationMode::NoGnea,
            ..cfg
        };
        let raw = augment_embedding(&e, &p, &raw_cfg).unwrap();
        assert_eq!(raw.dims(), &[2, 3]);
        let s: f64 = raw.row(0).iter().sum();
        assert!((s - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn p_share_examples() {
        let phi = Tensor::matrix(&[&[1.0]]);
        let i = Tensor::matrix(&[&[2.0, 3.0]]);
        assert_eq!(p_share(&phi, &i).unwrap().data(), &[2.0, 3.0]);

        let phi = Tensor::matrix(&[&[0.25; 4], &[0.25; 4], &[0.25; 4]]);
        let zero = Tensor::zeros(&[3, 5]);
        assert_eq!(p_share(&phi, &zero).unwrap(), Tensor::zeros(&[4, 5]));
        // Share shape never depends on the row count.
        for n in [1usize, 3, 9] {
            let phi = Tensor::ones(&[n, 4]);
            let i = Tensor::ones(&[n, 5]);
            assert_eq!(p_share(&phi, &i).unwrap().dims(), &[4, 5]);
        }
        assert!(p_share(&Tensor::ones(&[2, 4]), &Tensor::ones(&[3, 5])).is_err());
    }

    #[test]
    fn q_share_hand_expansion() {
        let phi = Tensor::matrix(&[&[1.0, 2.0]]);
        let et = Tensor::matrix(&[&[3.0]]);
        let i = Tensor::matrix(&[&[1.0, 0.0]]);
        let q = q_share(&phi, &et, &i).unwrap();
        assert_eq!(q.dims(), &[2, 2]);
        assert_eq!(q.data(), &[3.0, 0.0, 6.0, 0.0]);

        let zero = Tensor::zeros(&[1, 2]);
        assert_eq!(q_share(&phi, &et, &zero).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn single_client_round_trip_matches_direct_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 6;
        let phi = rng_tensor(&mut rng, &[n, 4]);
        let et = rng_tensor(&mut rng, &[n, 3]);
        let i = rng_tensor(&mut rng, &[n, 5]);
        let q = q_share(&phi, &et, &i).unwrap();
        let g = gamma_map(&phi, &et).unwrap();
        let left = g.matmul(&q).unwrap();
        let direct = phi
            .matmul(&phi.transpose().unwrap())
            .unwrap()
            .hadamard(&et.matmul(&et.transpose().unwrap()).unwrap())
            .unwrap()
            .matmul(&i)
            .unwrap();
        assert!(left.max_abs_diff(&direct) <= 1e-9);
    }

    #[test]
    fn combine_l_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let phi = rng_tensor(&mut rng, &[3, 4]);
        let et = rng_tensor(&mut rng, &[3, 2]);
        let p0 = Tensor::zeros(&[4, 5]);
        let q0 = Tensor::zeros(&[8, 5]);
        let l = combine_l(&phi, &et, 0.7, &p0, &q0).unwrap();
        assert_eq!(l, Tensor::zeros(&[3, 5]));

        let p_sum = rng_tensor(&mut rng, &[4, 5]);
        let q_sum = rng_tensor(&mut rng, &[8, 5]);
        let l = combine_l(&phi, &et, 0.0, &p_sum, &q_sum).unwrap();
        let q_only = gamma_map(&phi, &et).unwrap().matmul(&q_sum).unwrap();
        assert!(l.max_abs_diff(&q_only) < 1e-15);
    }

    #[test]
    fn single_block_gates_match_central_cell_on_approximated_adjacency() {
        // With one client the share/combine pipeline is the centralized
        // cell run on A = (ΦΦᵀ) ⊙ (η·1 + ẼẼᵀ).
        let cfg = small_cfg();
        let d = 2;
        let n = 5;
        let p = GlobalParams::init(&cfg, d, 8, 19);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = rng_tensor(&mut rng, &[n, d]);
        let h_prev = rng_tensor(&mut rng, &[n, cfg.h_dim]).scale(0.7);
        let e_nu = rng_tensor(&mut rng, &[n, cfg.d_n]);
        let e_tau = p.time_embed.slice_rows(2, 3).unwrap();
        let e_tau_prev = p.time_embed.slice_rows(1, 2).unwrap();
        let e_hat = joint_embedding(&e_nu, &e_tau).unwrap();
        let eta = trend_factor(&e_tau, &e_tau_prev).unwrap();
        let phi = affinity_features(&x, &p, &cfg).unwrap();
        let e_tilde = augment_embedding(&e_nu, &p, &cfg).unwrap();

        // Pipeline route: combine on own shares, then the gate halves.
        let i1 = Tensor::concat_cols(&[&x, &h_prev]).unwrap();
        let l1 = combine_l(
            &phi,
            &e_tilde,
            eta,
            &p_share(&phi, &i1).unwrap(),
            &q_share(&phi, &e_tilde, &i1).unwrap(),
        )
        .unwrap();
        let (_z, r) = gate_zr(&l1, &e_hat, &p).unwrap();
        let i2 = Tensor::concat_cols(&[&x, &r.hadamard(&h_prev).unwrap()]).unwrap();
        let l2 = combine_l(
            &phi,
            &e_tilde,
            eta,
            &p_share(&phi, &i2).unwrap(),
            &q_share(&phi, &e_tilde, &i2).unwrap(),
        )
        .unwrap();
        let h_pipeline = client_gate_update(&l1, &l2, &e_hat, &h_prev, &p).unwrap();

        // Central-cell route on the explicit approximated adjacency.
        let gram_e = e_tilde.matmul(&e_tilde.transpose().unwrap()).unwrap();
        let a_approx = phi
            .matmul(&phi.transpose().unwrap())
            .unwrap()
            .hadamard(&gram_e.map(|v| v + eta))
            .unwrap();
        let h_central = cell_step_central(&a_approx, &x, &h_prev, &e_hat, &p).unwrap();

        assert!(h_pipeline.max_abs_diff(&h_central) <= 1e-12);
    }

    #[test]
    fn params_flatten_round_trip() {
        let cfg = small_cfg();
        let p = GlobalParams::init(&cfg, 2, 8, 77);
        let flat = p.flatten();
        assert_eq!(flat.len(), p.num_values());
        let back = p.unflatten_like(&flat).unwrap();
        assert_eq!(p, back);
        assert!(p.unflatten_like(&flat[1..]).is_err());
    }

    #[test]
    fn readout_zero_weights_gives_zero() {
        let cfg = small_cfg();
        let mut p = GlobalParams::init(&cfg, 2, 8, 1);
        p.w_out = Tensor::zeros(p.w_out.dims());
        p.b_out = Tensor::zeros(p.b_out.dims());
        let h = Tensor::ones(&[3, cfg.h_dim]);
        let y = readout(&h, &p, cfg.t_out, 2).unwrap();
        assert_eq!(y.dims(), &[cfg.t_out, 3, 2]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mode_names_round_trip() {
        for mode in [
            AblationMode::Full,
            AblationMode::NoGnea,
            AblationMode::IntraOnly,
            AblationMode::StaticInter,
            AblationMode::NoSpatial,
            AblationMode::StaticAll,
        ] {
            assert_eq!(AblationMode::from_name(mode.name()).unwrap(), mode);
        }
        assert!(AblationMode::from_name("bogus").is_err());
    }
}
