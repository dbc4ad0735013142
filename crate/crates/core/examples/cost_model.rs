//! Parameters and multiply-accumulates per prediction, dense and with pruned
//! attractor heads, checked against the instrumented kernels.
//!
//!     cargo run --example cost_model

use dpars::autodiff::kernels::count_macs;
use dpars::eval::mac_count;
use dpars::model::{streaming_step, DparsConfig, DparsParams, StreamState};

/// MACs of one streaming prediction once the ring buffer is full.
fn measured(params: &DparsParams) -> dpars::Result<u64> {
    let c = params.config();
    let frame = vec![0.5; c.c_in];
    let mut state = StreamState::new();
    for _ in 1..c.t_seq {
        streaming_step(&frame, &mut state, params)?;
    }
    let (out, macs) = count_macs(|| streaming_step(&frame, &mut state, params));
    out?;
    Ok(macs)
}

fn main() -> dpars::Result<()> {
    let config = DparsConfig::default();
    let dense = DparsParams::init(&config, 1)?;
    let cost = mac_count(&config, None)?;
    print!("{}", cost.summary());
    println!("measured per streaming step: {}\n", measured(&dense)?);

    for supports in [vec![vec![0, 10]; 6], vec![vec![0], vec![0, 5], vec![5, 10], vec![0, 1, 2], vec![10], vec![4, 5]]] {
        let sizes: Vec<usize> = supports.iter().map(Vec::len).collect();
        let pruned = dense.with_supports(&supports)?;
        let cost = mac_count(&config, Some(&sizes))?;
        print!("{}", cost.summary());
        println!("measured per streaming step: {}\n", measured(&pruned)?);
    }
    Ok(())
}
