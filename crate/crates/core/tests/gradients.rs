//! Central finite-difference checks of every hand-written backward pass.

mod common;

use common::*;

fn over_seeds(name: &str, f: fn(u64) -> GradReport) {
    for seed in 0..FD_SEEDS {
        let rep = f(seed);
        assert!(rep.passed(), "{name} seed {seed}: worst {:.3e} at {} ({} entries)", rep.worst, rep.worst_at, rep.checked);
    }
}

#[test]
fn selective_scan() {
    over_seeds("selective_scan_1d", grad_scan);
}

#[test]
fn four_direction_scan() {
    over_seeds("ss2d", grad_ss2d);
}

#[test]
fn channel_attention() {
    over_seeds("encf", grad_encf);
}

#[test]
fn state_space_block() {
    over_seeds("envss_block", grad_block);
}

#[test]
fn tensor_attention_unit() {
    over_seeds("tcma", grad_tcma);
}

#[test]
fn segmentation_loss() {
    over_seeds("sample_loss", grad_sample_loss);
}

#[test]
fn whole_network_sampled() {
    for seed in 0..2 {
        let rep = grad_model(seed, 7);
        assert!(rep.passed(), "model seed {seed}: worst {:.3e} at {}", rep.worst, rep.worst_at);
    }
}
