//! Finite-difference checks of every hand-written backward pass.

mod common;
#[path = "common/gradient_checks.rs"]
mod gradient_checks;

use gradient_checks::*;
use promptseg_core::backbone::DecoderKind;

const SEEDS: u64 = 20;

#[test]
fn adapter() {
    (0..SEEDS).for_each(adapter_gradients);
}

#[test]
fn prompt_head_through_aux_loss() {
    (0..SEEDS).for_each(prompt_head_gradients_through_aux_loss);
}

#[test]
fn scorer() {
    (0..SEEDS).for_each(scorer_gradients);
}

#[test]
fn segmentation_loss() {
    (0..SEEDS).for_each(segmentation_loss_gradients);
}

#[test]
fn toy_decoder() {
    (0..SEEDS).for_each(toy_decoder_gradients);
}

#[test]
fn encoder_reaches_every_adapter() {
    (0..SEEDS).for_each(encoder_gradients_reach_every_adapter);
}

#[test]
fn end_to_end_with_toy_decoder() {
    let with_masks = (0..SEEDS).filter(|&s| end_to_end(DecoderKind::ToyDecoder, s)).count();
    assert!(with_masks >= 10);
}

#[test]
fn end_to_end_with_oracle_decoder() {
    let with_masks = (0..SEEDS).filter(|&s| end_to_end(DecoderKind::Oracle, s)).count();
    assert!(with_masks >= 10);
}
