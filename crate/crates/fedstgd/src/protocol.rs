//! Client and server state machines for synchronous collective learning:
//! per-timestep P/Q share rounds, node-weighted parameter averaging,
//! round accounting, and the centralized twin trainer.
//!
//! Every collective phase is a full barrier: the server releases sums only
//! after all clients' shares for a (step, k) pair arrived, reducing in
//! ascending client id so results do not depend on arrival order.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::Window;
use crate::forward::{
    build_batch_forward, BatchInputs, ForwardError, ForwardOptions, LocalExchange, ShareExchange,
    StepTrace,
};
use crate::model::{
    init_node_embed, AblationMode, GlobalParams, HyperConfig, ModelError, GLOBAL_PARAM_NAMES,
};
use crate::optim::{Adam, AdamConfig};
use crate::tape::{ParamMap, Tape, TapeError};
use crate::tensor::{Tensor, TensorError};
use crate::transport::{
    memory_pair, recv_msg, send_msg, Endpoint, MsgType, ProtocolMessage, TcpEndpoint,
    TransportError,
};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("client {client} timed out during {phase}")]
    Timeout { client: usize, phase: String },
    #[error("protocol abort: {0}")]
    Abort(String),
    #[error("parameter shape drift: {0}")]
    ShapeDrift(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionScheme {
    ContiguousEqual,
    /// Geometric size bias: client i carries weight skew^i.
    ContiguousSkewed(u32),
}

/// Disjoint covering node ranges, one per client, larger blocks first.
pub fn partition_graph(
    n: usize,
    m: usize,
    scheme: PartitionScheme,
) -> Result<Vec<Vec<usize>>, ProtocolError> {
    if m == 0 || m > n {
        return Err(ProtocolError::Config(format!(
            "cannot split {n} nodes across {m} clients"
        )));
    }
    let sizes: Vec<usize> = match scheme {
        PartitionScheme::ContiguousEqual => {
            let base = n / m;
            let extra = n % m;
            (0..m).map(|i| base + usize::from(i < extra)).collect()
        }
        PartitionScheme::ContiguousSkewed(skew) => {
            let skew = skew.max(1) as f64;
            let weights: Vec<f64> = (0..m).map(|i| skew.powi(i as i32)).collect();
            let total: f64 = weights.iter().sum();
            // Everyone gets at least one node; the remainder goes out by
            // quota, largest fractional part first, lower id on ties.
            let spare = n - m;
            let quotas: Vec<f64> = weights.iter().map(|w| spare as f64 * w / total).collect();
            let mut sizes: Vec<usize> = quotas.iter().map(|q| 1 + q.floor() as usize).collect();
            let mut left = n - sizes.iter().sum::<usize>();
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| {
                let fa = quotas[a] - quotas[a].floor();
                let fb = quotas[b] - quotas[b].floor();
                fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
            });
            for &i in order.iter().cycle() {
                if left == 0 {
                    break;
                }
                sizes[i] += 1;
                left -= 1;
            }
            sizes
        }
    };
    let mut out = Vec::with_capacity(m);
    let mut start = 0;
    for size in sizes {
        out.push((start..start + size).collect());
        start += size;
    }
    debug_assert_eq!(start, n);
    Ok(out)
}

/// Node-count-weighted average of shape-identical parameter snapshots,
/// reduced in ascending client id.
pub fn fedavg(snapshots: &[ParamMap], node_counts: &[usize]) -> Result<ParamMap, ProtocolError> {
    if snapshots.is_empty() || snapshots.len() != node_counts.len() {
        return Err(ProtocolError::Config(
            "fedavg needs one snapshot per client".into(),
        ));
    }
    let total: usize = node_counts.iter().sum();
    if node_counts.iter().any(|&c| c == 0) || total == 0 {
        return Err(ProtocolError::Config("node counts must be positive".into()));
    }
    let mut out = ParamMap::new();
    for (i, snap) in snapshots.iter().enumerate() {
        let weight = node_counts[i] as f64 / total as f64;
        if snap.len() != snapshots[0].len() {
            return Err(ProtocolError::ShapeDrift(format!(
                "client {i} has {} tensors, expected {}",
                snap.len(),
                snapshots[0].len()
            )));
        }
        for (name, value) in snap {
            match out.get_mut(name) {
                None => {
                    out.insert(name.clone(), value.scale(weight));
                }
                Some(acc) => {
                    if acc.dims() != value.dims() {
                        return Err(ProtocolError::ShapeDrift(format!(
                            "tensor '{name}': {:?} vs {:?}",
                            acc.dims(),
                            value.dims()
                        )));
                    }
                    *acc = acc.add(&value.scale(weight))?;
                }
            }
        }
    }
    Ok(out)
}

/// Per-global-round accounting, emitted as one line-delimited record.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundStats {
    pub round: usize,
    pub train_loss: f64,
    pub bytes_up: usize,
    pub bytes_down: usize,
    pub msgs_up: usize,
    pub msgs_down: usize,
    pub seconds: f64,
}

impl RoundStats {
    pub fn log_line(&self) -> String {
        format!(
            "round={} train_loss={:.9} bytes_up={} bytes_down={} msgs_up={} msgs_down={} seconds={:.3}",
            self.round,
            self.train_loss,
            self.bytes_up,
            self.bytes_down,
            self.msgs_up,
            self.msgs_down,
            self.seconds
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Memory,
    Tcp,
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub hyper: HyperConfig,
    pub adam: AdamConfig,
    pub global_rounds: usize,
    pub local_rounds: usize,
    pub batch: usize,
    pub seed: u64,
    pub timeout: Duration,
    /// Record the flattened parameter vector after every optimizer step.
    pub trace: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            hyper: HyperConfig::default(),
            adam: AdamConfig::default(),
            global_rounds: 30,
            local_rounds: 5,
            batch: 16,
            seed: 0,
            timeout: Duration::from_secs(300),
            trace: false,
        }
    }
}

/// Full-graph training windows shared by every party.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub windows: Vec<Window>,
    pub n: usize,
    pub d: usize,
    pub steps_per_day: usize,
}

/// Fixed shuffled window order, identical for all parties.
pub fn batch_order(count: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed);
    order.shuffle(&mut rng);
    order
}

fn batch_indices(order: &[usize], step: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|j| order[(step * batch + j) % order.len()]).collect()
}

/// Assemble one client's (or the full graph's) batch: rows are stacked
/// window-major, node-minor.
pub fn client_batch(
    windows: &[Window],
    idxs: &[usize],
    nodes: &[usize],
    t_in: usize,
) -> Result<BatchInputs, ProtocolError> {
    let mut x_steps = Vec::with_capacity(t_in);
    for s in 0..t_in {
        let parts: Vec<Tensor> = idxs
            .iter()
            .map(|&w| windows[w].x[s].gather_rows(nodes))
            .collect::<Result<_, _>>()?;
        let refs: Vec<&Tensor> = parts.iter().collect();
        x_steps.push(Tensor::concat_rows(&refs)?);
    }
    let y_parts: Vec<Tensor> = idxs
        .iter()
        .map(|&w| windows[w].y.gather_rows(nodes))
        .collect::<Result<_, _>>()?;
    let y_refs: Vec<&Tensor> = y_parts.iter().collect();
    let targets = Tensor::concat_rows(&y_refs)?;
    let slots = (0..t_in)
        .map(|s| idxs.iter().map(|&w| windows[w].slots[s]).collect())
        .collect();
    let prev_slots = (0..t_in)
        .map(|s| idxs.iter().map(|&w| windows[w].prev_slots[s]).collect())
        .collect();
    Ok(BatchInputs {
        x_steps,
        targets,
        slots,
        prev_slots,
        batch: idxs.len(),
        rows: nodes.len(),
    })
}

fn flatten_with_embed(params: &ParamMap) -> Vec<f64> {
    let mut out = Vec::new();
    for name in GLOBAL_PARAM_NAMES {
        out.extend_from_slice(params[name].data());
    }
    out.extend_from_slice(params["node_embed"].data());
    out
}

// ---------------------------------------------------------------------------
// Client side
// ---------------------------------------------------------------------------

struct ClientExchange<'a> {
    endpoint: &'a mut dyn Endpoint,
    client_id: u16,
    global_step: u32,
    timeout: Duration,
    bytes_up: usize,
    bytes_down: usize,
}

impl ClientExchange<'_> {
    fn expect_sum(
        &mut self,
        want: MsgType,
        step: usize,
        k: u8,
        dims: &[usize],
    ) -> Result<Tensor, ForwardError> {
        let (msg, len) = recv_msg(self.endpoint, self.timeout)
            .map_err(|e| ForwardError::Exchange(format!("waiting for {want:?}: {e}")))?;
        self.bytes_down += len;
        if msg.msg_type != want
            || msg.round != self.global_step
            || msg.timestep != step as u32
            || msg.k != k
            || msg.tensors.len() != 1
        {
            return Err(ForwardError::Exchange(format!(
                "unexpected reply {:?} (round {}, step {}, k {})",
                msg.msg_type, msg.round, msg.timestep, msg.k
            )));
        }
        let sum = msg.tensors.into_iter().next().unwrap();
        if sum.dims() != dims {
            return Err(ForwardError::Exchange(format!(
                "sum dims {:?}, expected {:?}",
                sum.dims(),
                dims
            )));
        }
        Ok(sum)
    }
}

impl ShareExchange for ClientExchange<'_> {
    fn exchange(
        &mut self,
        k: u8,
        step: usize,
        p_shares: Tensor,
        q_shares: Tensor,
    ) -> Result<(Tensor, Tensor), ForwardError> {
        let p_dims = p_shares.dims().to_vec();
        let q_dims = q_shares.dims().to_vec();
        for (ty, tensor) in [(MsgType::PShare, p_shares), (MsgType::QShare, q_shares)] {
            let msg = ProtocolMessage::new(ty, self.global_step, step as u32, k, self.client_id)
                .with_tensors(vec![tensor]);
            self.bytes_up += send_msg(self.endpoint, &msg)
                .map_err(|e| ForwardError::Exchange(format!("sending {ty:?}: {e}")))?;
        }
        let p_sum = self.expect_sum(MsgType::PSum, step, k, &p_dims)?;
        let q_sum = self.expect_sum(MsgType::QSum, step, k, &q_dims)?;
        Ok((p_sum, q_sum))
    }
}

struct ClientTask {
    id: usize,
    nodes: Vec<usize>,
    node_embed: Tensor,
    windows: Arc<Vec<Window>>,
    order: Arc<Vec<usize>>,
    settings: TrainSettings,
}

struct ClientOutcome {
    node_embed: Tensor,
    trace: Vec<Vec<f64>>,
}

fn run_client(
    task: ClientTask,
    endpoint: &mut dyn Endpoint,
) -> Result<ClientOutcome, ProtocolError> {
    let s = &task.settings;
    let mut adam = Adam::new(s.adam.clone());
    let mut params = ParamMap::new();
    params.insert("node_embed".into(), task.node_embed.clone());
    let mut trace = Vec::new();

    for r_g in 0..s.global_rounds {
        // Round opens with the aggregated parameter broadcast.
        let (msg, _len) = recv_msg(endpoint, s.timeout).map_err(|e| ProtocolError::Timeout {
            client: task.id,
            phase: format!("param broadcast round {r_g}: {e}"),
        })?;
        if msg.msg_type != MsgType::ParamDown
            || msg.round != r_g as u32
            || msg.tensors.len() != GLOBAL_PARAM_NAMES.len()
        {
            return Err(ProtocolError::Abort(format!(
                "client {}: unexpected broadcast {:?} round {}",
                task.id, msg.msg_type, msg.round
            )));
        }
        for (name, tensor) in GLOBAL_PARAM_NAMES.iter().zip(msg.tensors) {
            params.insert(name.to_string(), tensor);
        }

        let mut loss_sum = 0.0;
        for r_l in 0..s.local_rounds {
            let gs = r_g * s.local_rounds + r_l;
            let idxs = batch_indices(&task.order, gs, s.batch);
            let inputs = client_batch(&task.windows, &idxs, &task.nodes, s.hyper.t_in)?;

            let globals = GlobalParams::from_map(&params)?;
            let embed = params["node_embed"].clone();
            let mut tape = Tape::new();
            let mut exchange = ClientExchange {
                endpoint,
                client_id: task.id as u16,
                global_step: gs as u32,
                timeout: s.timeout,
                bytes_up: 0,
                bytes_down: 0,
            };
            let out = build_batch_forward(
                &mut tape,
                &globals,
                &embed,
                &inputs,
                &s.hyper,
                &mut exchange,
                &ForwardOptions::default(),
            )?;
            let loss = tape.value(out.loss).item();
            if !loss.is_finite() {
                return Err(ProtocolError::Numeric(format!(
                    "client {} hit non-finite loss at global step {gs}",
                    task.id
                )));
            }
            loss_sum += loss;
            let grads = tape.backward(out.loss)?;
            // Epochs for the decay schedule are passes over the window set.
            let epoch = gs * s.batch / task.windows.len();
            adam.step(&mut params, &grads, epoch);
            if s.trace {
                trace.push(flatten_with_embed(&params));
            }
        }

        let loss_mean = loss_sum / s.local_rounds.max(1) as f64;
        let stats = ProtocolMessage::new(MsgType::Stats, r_g as u32, 0, 0, task.id as u16)
            .with_tensors(vec![Tensor::new(vec![1, 1], vec![loss_mean])?]);
        send_msg(endpoint, &stats)?;

        let upload: Vec<Tensor> = GLOBAL_PARAM_NAMES
            .iter()
            .map(|name| params[*name].clone())
            .collect();
        let up = ProtocolMessage::new(MsgType::ParamUp, r_g as u32, 0, 0, task.id as u16)
            .with_tensors(upload);
        send_msg(endpoint, &up)?;
    }

    Ok(ClientOutcome {
        node_embed: params["node_embed"].clone(),
        trace,
    })
}

// ---------------------------------------------------------------------------
// Server side
// ---------------------------------------------------------------------------

/// Shapes every emitted message must match exactly; anything else is a
/// data-locality violation.
#[derive(Debug, Clone)]
pub struct ShapeContract {
    pub p_share: Vec<usize>,
    pub q_share: Vec<usize>,
    pub param_shapes: Vec<Vec<usize>>,
    pub stats: Vec<usize>,
}

impl ShapeContract {
    pub fn new(hyper: &HyperConfig, globals: &GlobalParams, d: usize, batch: usize) -> Self {
        ShapeContract {
            p_share: vec![batch, hyper.d_phi, hyper.d_in(d)],
            q_share: vec![batch, hyper.d_phi * hyper.psi_width(), hyper.d_in(d)],
            param_shapes: globals.named().iter().map(|(_, t)| t.dims().to_vec()).collect(),
            stats: vec![1, 1],
        }
    }
}

/// Record of one message that crossed the server boundary.
#[derive(Debug, Clone)]
pub struct AuditRecord {
    pub msg_type: MsgType,
    pub client_id: u16,
    pub dims: Vec<Vec<usize>>,
}

/// Messages seen at the server plus any contract violations.
#[derive(Debug, Default, Clone)]
pub struct AuditLog {
    pub records: Vec<AuditRecord>,
    pub violations: Vec<String>,
}

impl AuditLog {
    fn inspect(&mut self, msg: &ProtocolMessage, contract: &ShapeContract) {
        let dims: Vec<Vec<usize>> = msg.tensors.iter().map(|t| t.dims().to_vec()).collect();
        let ok = match msg.msg_type {
            MsgType::PShare | MsgType::PSum => {
                dims.len() == 1 && dims[0] == contract.p_share
            }
            MsgType::QShare | MsgType::QSum => {
                dims.len() == 1 && dims[0] == contract.q_share
            }
            MsgType::ParamUp | MsgType::ParamDown => {
                dims.len() == contract.param_shapes.len()
                    && dims.iter().zip(&contract.param_shapes).all(|(a, b)| a == b)
            }
            MsgType::Stats => dims.len() == 1 && dims[0] == contract.stats,
        };
        if !ok {
            self.violations.push(format!(
                "{:?} from client {} carried off-contract payload {:?}",
                msg.msg_type, msg.client_id, dims
            ));
        }
        self.records.push(AuditRecord {
            msg_type: msg.msg_type,
            client_id: msg.client_id,
            dims,
        });
    }
}

pub struct FedOutcome {
    pub globals: GlobalParams,
    pub node_embeds: Vec<Tensor>,
    pub stats: Vec<RoundStats>,
    pub traces: Vec<Vec<Vec<f64>>>,
    pub audit: AuditLog,
}

struct Flow {
    up: usize,
    down: usize,
    msgs_up: usize,
    msgs_down: usize,
}

fn server_recv(
    endpoint: &mut dyn Endpoint,
    timeout: Duration,
    client: usize,
    phase: &str,
    flow: &mut Flow,
    audit: &mut AuditLog,
    contract: &ShapeContract,
) -> Result<ProtocolMessage, ProtocolError> {
    let (msg, len) = recv_msg(endpoint, timeout).map_err(|e| match e {
        TransportError::Timeout(_) => ProtocolError::Timeout {
            client,
            phase: phase.to_string(),
        },
        other => ProtocolError::Abort(format!("client {client} during {phase}: {other}")),
    })?;
    flow.up += len;
    flow.msgs_up += 1;
    audit.inspect(&msg, contract);
    if msg.client_id as usize != client {
        return Err(ProtocolError::Abort(format!(
            "message from client {} arrived on endpoint {client}",
            msg.client_id
        )));
    }
    Ok(msg)
}

fn server_send(
    endpoint: &mut dyn Endpoint,
    msg: &ProtocolMessage,
    flow: &mut Flow,
    audit: &mut AuditLog,
    contract: &ShapeContract,
) -> Result<(), ProtocolError> {
    audit.inspect(msg, contract);
    let len = send_msg(endpoint, msg)?;
    flow.down += len;
    flow.msgs_down += 1;
    Ok(())
}

/// One (step, k) barrier: gather every client's P and Q shares, reduce in
/// id order, broadcast the sums (or echo own shares back in intra-only
/// ablation).
#[allow(clippy::too_many_arguments)]
fn serve_collective_phase(
    endpoints: &mut [Box<dyn Endpoint>],
    gs: u32,
    step: usize,
    k: u8,
    mode: AblationMode,
    timeout: Duration,
    flow: &mut Flow,
    audit: &mut AuditLog,
    contract: &ShapeContract,
) -> Result<(), ProtocolError> {
    let m = endpoints.len();
    let mut p_shares: Vec<Tensor> = Vec::with_capacity(m);
    let mut q_shares: Vec<Tensor> = Vec::with_capacity(m);
    for (client, ep) in endpoints.iter_mut().enumerate() {
        let phase = format!("collective step {step} k {k} of global step {gs}");
        for want in [MsgType::PShare, MsgType::QShare] {
            let msg = server_recv(ep.as_mut(), timeout, client, &phase, flow, audit, contract)?;
            if msg.msg_type != want
                || msg.round != gs
                || msg.timestep != step as u32
                || msg.k != k
                || msg.tensors.len() != 1
            {
                return Err(ProtocolError::Abort(format!(
                    "client {client}: expected {want:?} for (gs {gs}, step {step}, k {k}), got {:?} (gs {}, step {}, k {})",
                    msg.msg_type, msg.round, msg.timestep, msg.k
                )));
            }
            let tensor = msg.tensors.into_iter().next().unwrap();
            let expected = if want == MsgType::PShare {
                &contract.p_share
            } else {
                &contract.q_share
            };
            if tensor.dims() != expected.as_slice() {
                return Err(ProtocolError::Abort(format!(
                    "client {client}: {want:?} dims {:?}, contract {:?}",
                    tensor.dims(),
                    expected
                )));
            }
            if want == MsgType::PShare {
                p_shares.push(tensor);
            } else {
                q_shares.push(tensor);
            }
        }
    }

    // Barrier complete; reduce in ascending client id.
    let reduce = |shares: &[Tensor]| -> Result<Tensor, ProtocolError> {
        let mut sum = shares[0].clone();
        for share in &shares[1..] {
            sum = sum.add(share)?;
        }
        Ok(sum)
    };
    let (p_sum, q_sum) = (reduce(&p_shares)?, reduce(&q_shares)?);

    for (client, ep) in endpoints.iter_mut().enumerate() {
        let (p_out, q_out) = if mode == AblationMode::IntraOnly {
            (p_shares[client].clone(), q_shares[client].clone())
        } else {
            (p_sum.clone(), q_sum.clone())
        };
        let pm = ProtocolMessage::new(MsgType::PSum, gs, step as u32, k, client as u16)
            .with_tensors(vec![p_out]);
        server_send(ep.as_mut(), &pm, flow, audit, contract)?;
        let qm = ProtocolMessage::new(MsgType::QSum, gs, step as u32, k, client as u16)
            .with_tensors(vec![q_out]);
        server_send(ep.as_mut(), &qm, flow, audit, contract)?;
    }
    Ok(())
}

struct ServerResult {
    globals: GlobalParams,
    stats: Vec<RoundStats>,
    audit: AuditLog,
}

fn run_server(
    mut endpoints: Vec<Box<dyn Endpoint>>,
    mut globals: GlobalParams,
    node_counts: &[usize],
    settings: &TrainSettings,
    d: usize,
) -> Result<ServerResult, ProtocolError> {
    let m = endpoints.len();
    let total_nodes: usize = node_counts.iter().sum();
    let contract = ShapeContract::new(&settings.hyper, &globals, d, settings.batch);
    let mut audit = AuditLog::default();
    let mut stats = Vec::with_capacity(settings.global_rounds);

    for r_g in 0..settings.global_rounds {
        let started = Instant::now();
        let mut flow = Flow {
            up: 0,
            down: 0,
            msgs_up: 0,
            msgs_down: 0,
        };

        let broadcast: Vec<Tensor> = globals.named().iter().map(|(_, t)| (*t).clone()).collect();
        for (client, ep) in endpoints.iter_mut().enumerate() {
            let msg = ProtocolMessage::new(MsgType::ParamDown, r_g as u32, 0, 0, client as u16)
                .with_tensors(broadcast.clone());
            server_send(ep.as_mut(), &msg, &mut flow, &mut audit, &contract)?;
        }

        if settings.hyper.mode != AblationMode::NoSpatial {
            for r_l in 0..settings.local_rounds {
                let gs = (r_g * settings.local_rounds + r_l) as u32;
                for step in 0..settings.hyper.t_in {
                    for k in 1..=2u8 {
                        serve_collective_phase(
                            &mut endpoints,
                            gs,
                            step,
                            k,
                            settings.hyper.mode,
                            settings.timeout,
                            &mut flow,
                            &mut audit,
                            &contract,
                        )?;
                    }
                }
            }
        }

        let mut train_loss = 0.0;
        for (client, ep) in endpoints.iter_mut().enumerate() {
            let msg = server_recv(
                ep.as_mut(),
                settings.timeout,
                client,
                "round stats",
                &mut flow,
                &mut audit,
                &contract,
            )?;
            if msg.msg_type != MsgType::Stats || msg.tensors.len() != 1 {
                return Err(ProtocolError::Abort(format!(
                    "client {client}: expected stats, got {:?}",
                    msg.msg_type
                )));
            }
            train_loss += msg.tensors[0].item() * node_counts[client] as f64 / total_nodes as f64;
        }

        let mut snapshots: Vec<ParamMap> = Vec::with_capacity(m);
        for (client, ep) in endpoints.iter_mut().enumerate() {
            let msg = server_recv(
                ep.as_mut(),
                settings.timeout,
                client,
                "parameter upload",
                &mut flow,
                &mut audit,
                &contract,
            )?;
            if msg.msg_type != MsgType::ParamUp
                || msg.tensors.len() != GLOBAL_PARAM_NAMES.len()
            {
                return Err(ProtocolError::Abort(format!(
                    "client {client}: expected parameter upload, got {:?}",
                    msg.msg_type
                )));
            }
            for (tensor, expected) in msg.tensors.iter().zip(&contract.param_shapes) {
                if tensor.dims() != expected.as_slice() {
                    return Err(ProtocolError::ShapeDrift(format!(
                        "client {client}: uploaded {:?}, expected {:?}",
                        tensor.dims(),
                        expected
                    )));
                }
            }
            let snap: ParamMap = GLOBAL_PARAM_NAMES
                .iter()
                .map(|n| n.to_string())
                .zip(msg.tensors)
                .collect();
            snapshots.push(snap);
        }
        let merged = fedavg(&snapshots, node_counts)?;
        globals = GlobalParams::from_map(&merged)?;

        stats.push(RoundStats {
            round: r_g,
            train_loss,
            bytes_up: flow.up,
            bytes_down: flow.down,
            msgs_up: flow.msgs_up,
            msgs_down: flow.msgs_down,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    Ok(ServerResult {
        globals,
        stats,
        audit,
    })
}

// ---------------------------------------------------------------------------
// Drivers
// ---------------------------------------------------------------------------

fn make_endpoints(
    m: usize,
    kind: TransportKind,
) -> Result<(Vec<Box<dyn Endpoint>>, Vec<Box<dyn Endpoint>>), ProtocolError> {
    match kind {
        TransportKind::Memory => {
            let mut servers: Vec<Box<dyn Endpoint>> = Vec::with_capacity(m);
            let mut clients: Vec<Box<dyn Endpoint>> = Vec::with_capacity(m);
            for _ in 0..m {
                let (a, b) = memory_pair();
                servers.push(Box::new(a));
                clients.push(Box::new(b));
            }
            Ok((servers, clients))
        }
        TransportKind::Tcp => {
            let listener = std::net::TcpListener::bind("127.0.0.1:0")
                .map_err(TransportError::Io)?;
            let addr = listener.local_addr().map_err(TransportError::Io)?;
            let mut servers: Vec<Box<dyn Endpoint>> = Vec::with_capacity(m);
            let mut clients: Vec<Box<dyn Endpoint>> = Vec::with_capacity(m);
            for _ in 0..m {
                // Sequential connect/accept keeps endpoint order = id order.
                let client = std::net::TcpStream::connect(addr).map_err(TransportError::Io)?;
                let (server, _) = listener.accept().map_err(TransportError::Io)?;
                servers.push(Box::new(TcpEndpoint::new(server)));
                clients.push(Box::new(TcpEndpoint::new(client)));
            }
            Ok((servers, clients))
        }
    }
}

/// Run synchronous federated training over the given node partition.
pub fn train_federated(
    data: &TrainData,
    partitions: &[Vec<usize>],
    settings: &TrainSettings,
    transport: TransportKind,
) -> Result<FedOutcome, ProtocolError> {
    let m = partitions.len();
    if m == 0 {
        return Err(ProtocolError::Config("need at least one client".into()));
    }
    if data.windows.is_empty() {
        return Err(ProtocolError::Config("no training windows".into()));
    }
    let node_counts: Vec<usize> = partitions.iter().map(|p| p.len()).collect();
    let globals = GlobalParams::init(&settings.hyper, data.d, data.steps_per_day, settings.seed);
    let full_embed = init_node_embed(data.n, settings.hyper.d_n, settings.seed);
    let windows = Arc::new(data.windows.clone());
    let order = Arc::new(batch_order(data.windows.len(), settings.seed));

    let (server_eps, client_eps) = make_endpoints(m, transport)?;

    let mut tasks: Vec<(ClientTask, Box<dyn Endpoint>)> = Vec::with_capacity(m);
    for (id, ep) in client_eps.into_iter().enumerate() {
        tasks.push((
            ClientTask {
                id,
                nodes: partitions[id].clone(),
                node_embed: full_embed.gather_rows(&partitions[id])?,
                windows: windows.clone(),
                order: order.clone(),
                settings: settings.clone(),
            },
            ep,
        ));
    }

    let (server_result, client_results) = std::thread::scope(|scope| {
        let handles: Vec<_> = tasks
            .into_iter()
            .map(|(task, mut ep)| scope.spawn(move || run_client(task, ep.as_mut())))
            .collect();
        let server = run_server(server_eps, globals, &node_counts, settings, data.d);
        let clients: Vec<Result<ClientOutcome, ProtocolError>> =
            handles.into_iter().map(|h| h.join().expect("client thread")).collect();
        (server, clients)
    });

    // A client-side failure explains the server-side abort; prefer it.
    let mut outcomes = Vec::with_capacity(m);
    for result in client_results {
        outcomes.push(result?);
    }
    let server = server_result?;

    Ok(FedOutcome {
        globals: server.globals,
        node_embeds: outcomes.iter().map(|o| o.node_embed.clone()).collect(),
        stats: server.stats,
        traces: outcomes.into_iter().map(|o| o.trace).collect(),
        audit: server.audit,
    })
}

pub struct CentralOutcome {
    pub globals: GlobalParams,
    pub node_embed: Tensor,
    pub stats: Vec<RoundStats>,
    pub trace: Vec<Vec<f64>>,
}

/// Centralized twin: the same approximated forward, batch schedule, and
/// optimizer on the unpartitioned graph, with single-block sums. Matches
/// single-client federated training step for step.
pub fn train_central(
    data: &TrainData,
    settings: &TrainSettings,
) -> Result<CentralOutcome, ProtocolError> {
    if data.windows.is_empty() {
        return Err(ProtocolError::Config("no training windows".into()));
    }
    let mut globals = GlobalParams::init(&settings.hyper, data.d, data.steps_per_day, settings.seed);
    let embed = init_node_embed(data.n, settings.hyper.d_n, settings.seed);
    let order = batch_order(data.windows.len(), settings.seed);
    let nodes: Vec<usize> = (0..data.n).collect();

    let mut adam = Adam::new(settings.adam.clone());
    let mut params = globals.to_map();
    params.insert("node_embed".into(), embed);
    let mut trace = Vec::new();
    let mut stats = Vec::with_capacity(settings.global_rounds);

    for r_g in 0..settings.global_rounds {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        for r_l in 0..settings.local_rounds {
            let gs = r_g * settings.local_rounds + r_l;
            let idxs = batch_indices(&order, gs, settings.batch);
            let inputs = client_batch(&data.windows, &idxs, &nodes, settings.hyper.t_in)?;
            globals = GlobalParams::from_map(&params)?;
            let embed_now = params["node_embed"].clone();
            let mut tape = Tape::new();
            let out = build_batch_forward(
                &mut tape,
                &globals,
                &embed_now,
                &inputs,
                &settings.hyper,
                &mut LocalExchange,
                &ForwardOptions::default(),
            )?;
            let loss = tape.value(out.loss).item();
            if !loss.is_finite() {
                return Err(ProtocolError::Numeric(format!(
                    "non-finite loss at global step {gs}"
                )));
            }
            loss_sum += loss;
            let grads = tape.backward(out.loss)?;
            let epoch = gs * settings.batch / data.windows.len();
            adam.step(&mut params, &grads, epoch);
            if settings.trace {
                trace.push(flatten_with_embed(&params));
            }
        }
        stats.push(RoundStats {
            round: r_g,
            train_loss: loss_sum / settings.local_rounds.max(1) as f64,
            bytes_up: 0,
            bytes_down: 0,
            msgs_up: 0,
            msgs_down: 0,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    globals = GlobalParams::from_map(&params)?;
    Ok(CentralOutcome {
        globals,
        node_embed: params["node_embed"].clone(),
        stats,
        trace,
    })
}

/// Forward-only federated pass over one batch with trace capture, used by
/// the verification harness. No optimizer, no aggregation; parameters stay
/// fixed.
pub fn forward_capture_federated(
    data: &TrainData,
    partitions: &[Vec<usize>],
    globals: &GlobalParams,
    full_embed: &Tensor,
    hyper: &HyperConfig,
    idxs: &[usize],
    transport: TransportKind,
    timeout: Duration,
) -> Result<Vec<Vec<StepTrace>>, ProtocolError> {
    let m = partitions.len();
    let (mut server_eps, client_eps) = make_endpoints(m, transport)?;
    let batch = idxs.len();
    let contract = ShapeContract::new(hyper, globals, data.d, batch);
    let windows = Arc::new(data.windows.clone());

    let mut tasks = Vec::with_capacity(m);
    for (id, ep) in client_eps.into_iter().enumerate() {
        tasks.push((
            id,
            partitions[id].clone(),
            full_embed.gather_rows(&partitions[id])?,
            ep,
        ));
    }

    let (server_result, client_results) = std::thread::scope(|scope| {
        let handles: Vec<_> = tasks
            .into_iter()
            .map(|(id, nodes, embed, mut ep)| {
                let windows = windows.clone();
                let hyper = hyper.clone();
                let globals = globals.clone();
                let idxs = idxs.to_vec();
                scope.spawn(move || -> Result<Vec<StepTrace>, ProtocolError> {
                    let inputs = client_batch(&windows, &idxs, &nodes, hyper.t_in)?;
                    let mut tape = Tape::new();
                    let mut exchange = ClientExchange {
                        endpoint: ep.as_mut(),
                        client_id: id as u16,
                        global_step: 0,
                        timeout,
                        bytes_up: 0,
                        bytes_down: 0,
                    };
                    let opts = ForwardOptions {
                        trainable: false,
                        capture: true,
                        ..ForwardOptions::default()
                    };
                    let out = build_batch_forward(
                        &mut tape, &globals, &embed, &inputs, &hyper, &mut exchange, &opts,
                    )?;
                    Ok(out.traces)
                })
            })
            .collect();

        let server = (|| -> Result<AuditLog, ProtocolError> {
            let mut audit = AuditLog::default();
            let mut flow = Flow {
                up: 0,
                down: 0,
                msgs_up: 0,
                msgs_down: 0,
            };
            if hyper.mode != AblationMode::NoSpatial {
                for step in 0..hyper.t_in {
                    for k in 1..=2u8 {
                        serve_collective_phase(
                            &mut server_eps,
                            0,
                            step,
                            k,
                            hyper.mode,
                            timeout,
                            &mut flow,
                            &mut audit,
                            &contract,
                        )?;
                    }
                }
            }
            Ok(audit)
        })();

        let clients: Vec<Result<Vec<StepTrace>, ProtocolError>> =
            handles.into_iter().map(|h| h.join().expect("client thread")).collect();
        (server, clients)
    });

    let mut traces = Vec::with_capacity(m);
    for result in client_results {
        traces.push(result?);
    }
    server_result?;
    Ok(traces)
}

// ---------------------------------------------------------------------------
// Communication accounting
// ---------------------------------------------------------------------------

/// Exact frame size for a message carrying the given tensor shapes:
/// 22 header bytes (length, magic, version, type, round, timestep, k,
/// client, tensor count), per-tensor rank/dims/values, 4 CRC bytes.
pub fn frame_len(tensor_dims: &[Vec<usize>]) -> usize {
    let payload: usize = tensor_dims
        .iter()
        .map(|dims| 1 + 4 * dims.len() + 8 * dims.iter().product::<usize>())
        .sum();
    22 + payload + 4
}

/// Closed-form byte predictor for the synchronous protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct CommPrediction {
    pub p_share_frame: usize,
    pub q_share_frame: usize,
    pub param_frame: usize,
    pub stats_frame: usize,
    /// Client->server bytes for one local round of collective phases.
    pub local_round_up: usize,
    /// Server->client bytes for one local round of collective phases.
    pub local_round_down: usize,
    pub global_round_up: usize,
    pub global_round_down: usize,
}

pub fn predict_comm(
    hyper: &HyperConfig,
    d: usize,
    steps_per_day: usize,
    m: usize,
    batch: usize,
    local_rounds: usize,
) -> CommPrediction {
    let probe = GlobalParams::init(hyper, d, steps_per_day, 0);
    let param_shapes: Vec<Vec<usize>> =
        probe.named().iter().map(|(_, t)| t.dims().to_vec()).collect();
    let d_in = hyper.d_in(d);
    let p_share_frame = frame_len(&[vec![batch, hyper.d_phi, d_in]]);
    let q_share_frame = frame_len(&[vec![batch, hyper.d_phi * hyper.psi_width(), d_in]]);
    let param_frame = frame_len(&param_shapes);
    let stats_frame = frame_len(&[vec![1, 1]]);

    let phases = if hyper.mode == AblationMode::NoSpatial {
        0
    } else {
        hyper.t_in * 2
    };
    let local_round_up = phases * m * (p_share_frame + q_share_frame);
    let local_round_down = phases * m * (p_share_frame + q_share_frame);
    CommPrediction {
        p_share_frame,
        q_share_frame,
        param_frame,
        stats_frame,
        local_round_up,
        local_round_down,
        global_round_up: local_rounds * local_round_up + m * (stats_frame + param_frame),
        global_round_down: local_rounds * local_round_down + m * param_frame,
    }
}
