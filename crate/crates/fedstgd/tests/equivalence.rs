//! Cross-route equivalences that span modules: stacked federated
//! evaluation against the monolithic route, and the centralized oracle
//! against the approximated pipeline at the single-block limit.

use std::time::Duration;

use fedstgd::data::{split_and_window, synth_diffusion};
use fedstgd::metrics::{mae, rmse};
use fedstgd::model::{init_node_embed, readout, GlobalParams, HyperConfig};
use fedstgd::protocol::{
    forward_capture_federated, partition_graph, PartitionScheme, TrainData, TransportKind,
};
use fedstgd::tensor::Tensor;

/// Stacked per-client forecasts through the real protocol equal the
/// monolithic evaluation, so metric reports agree to 1e-9.
#[test]
fn federated_and_monolithic_evaluation_reports_agree() {
    let hyper = HyperConfig {
        d_n: 8,
        d_t: 6,
        h_dim: 8,
        t_in: 3,
        t_out: 2,
        ..HyperConfig::default()
    };
    let n = 8;
    let d = 2;
    let steps_per_day = 12;
    let series = synth_diffusion(31, n, 240, d, steps_per_day, 0.05);
    let splits = split_and_window(&series, hyper.t_in, hyper.t_out, (7, 1, 2), steps_per_day)
        .unwrap();
    let globals = GlobalParams::init(&hyper, d, steps_per_day, 31);
    let embed = init_node_embed(n, hyper.d_n, 31);
    let partitions = partition_graph(n, 2, PartitionScheme::ContiguousEqual).unwrap();
    let data = TrainData {
        windows: splits.test.clone(),
        n,
        d,
        steps_per_day,
    };

    let mut mono_preds = Vec::new();
    let mut fed_preds = Vec::new();
    let mut targets = Vec::new();
    for (w_idx, window) in splits.test.iter().take(6).enumerate() {
        // Monolithic route.
        let mono = fedstgd::forward::forecast(
            &window.x,
            &window.slots,
            &window.prev_slots,
            &globals,
            &embed,
            &hyper,
        )
        .unwrap();

        // Federated route: protocol forward, readout per client block,
        // blocks stacked back in node order.
        let traces = forward_capture_federated(
            &data,
            &partitions,
            &globals,
            &embed,
            &hyper,
            &[w_idx],
            TransportKind::Memory,
            Duration::from_secs(60),
        )
        .unwrap();
        let blocks: Vec<Tensor> = traces
            .iter()
            .map(|client| {
                let h_final = client.last().unwrap().h.clone();
                readout(&h_final, &globals, hyper.t_out, d).unwrap()
            })
            .collect();
        // Reassemble [t_out, n, d] from per-block [t_out, n_i, d].
        let mut stacked = vec![0.0; hyper.t_out * n * d];
        for (block, nodes) in blocks.iter().zip(&partitions) {
            for tau in 0..hyper.t_out {
                for (row, &node) in nodes.iter().enumerate() {
                    for f in 0..d {
                        stacked[tau * n * d + node * d + f] =
                            block.data()[tau * nodes.len() * d + row * d + f];
                    }
                }
            }
        }
        let fed = Tensor::new(vec![hyper.t_out, n, d], stacked).unwrap();
        assert!(mono.max_abs_diff(&fed) <= 1e-9, "window {w_idx}");

        // Targets reshaped to frames for direct metric computation.
        let mut y = vec![0.0; hyper.t_out * n * d];
        for node in 0..n {
            for tau in 0..hyper.t_out {
                for f in 0..d {
                    y[tau * n * d + node * d + f] = window.y.at2(node, tau * d + f);
                }
            }
        }
        targets.push(Tensor::new(vec![hyper.t_out, n, d], y).unwrap());
        mono_preds.push(mono);
        fed_preds.push(fed);
    }

    let cat = |parts: &[Tensor]| {
        let flat: Vec<f64> = parts.iter().flat_map(|t| t.data().to_vec()).collect();
        Tensor::new(vec![flat.len()], flat).unwrap()
    };
    let (mono_all, fed_all, y_all) = (cat(&mono_preds), cat(&fed_preds), cat(&targets));
    let rmse_mono = rmse(&mono_all, &y_all).unwrap();
    let rmse_fed = rmse(&fed_all, &y_all).unwrap();
    let mae_mono = mae(&mono_all, &y_all).unwrap();
    let mae_fed = mae(&fed_all, &y_all).unwrap();
    assert!((rmse_mono - rmse_fed).abs() <= 1e-9);
    assert!((mae_mono - mae_fed).abs() <= 1e-9);
}
