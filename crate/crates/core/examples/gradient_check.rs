//! Reverse-mode gradients of the training objective against finite
//! differences, on a tiny model.
//!
//!     cargo run --example gradient_check

use dpars::model::{forward_frames, DparsConfig, DparsParams, RefinementInput};
use dpars::train::{gradient_check, Stencil};

fn main() -> dpars::Result<()> {
    let config = DparsConfig {
        c_in: 4,
        d_enc: 3,
        t_seq: 5,
        h_atn: 3,
        d_exp: 4,
        h_attr: 3,
        h_refn: 2,
        n_states: 4,
        refinement_input: RefinementInput::Expansion,
        ..DparsConfig::default()
    };
    let params = DparsParams::init(&config, 3)?;
    let frames: Vec<f64> = (0..config.t_seq * config.c_in).map(|k| (k as f64 * 0.7).sin()).collect();
    let y = forward_frames(&frames, &params)?.y;
    let mut target = [0.0; 6];
    for (f, t) in target.iter_mut().enumerate() {
        *t = y[f] + if f % 2 == 0 { 12.0 } else { -12.0 };
    }
    println!("{} parameters", params.store().num_scalars());
    for lambda in [0.0, 0.05] {
        for (stencil, h, floor) in [(Stencil::Central, 1e-5, 1e-3), (Stencil::Central4, 1e-2, 1e-5)] {
            let gc = gradient_check(&params, &frames, &target, lambda, stencil, h, floor)?;
            println!(
                "lambda {lambda:<4} {stencil:?} h={h:e}: max rel err {:.2e} at {}[{}]",
                gc.max_rel_err, gc.worst.0, gc.worst.1
            );
        }
    }
    Ok(())
}
