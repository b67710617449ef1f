use std::time::Instant;

use daevi_core::gradcheck::{default_suite, run_suite, DEFAULT_SEEDS, TOLERANCE};

#[test]
fn the_full_suite_passes_on_twenty_seeds() {
    assert_eq!(DEFAULT_SEEDS, 20);
    let start = Instant::now();
    let reports = run_suite(DEFAULT_SEEDS).unwrap();
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed).map(|r| format!("{} {:.3e}", r.name, r.max_rel_error)).collect();
    assert!(failed.is_empty(), "{failed:?}");
    assert!(reports.iter().all(|r| r.max_rel_error <= TOLERANCE && r.seeds == 20));
    assert!(start.elapsed().as_secs() < 120, "{:?}", start.elapsed());
}

#[test]
fn the_suite_covers_every_module_and_loss() {
    let names: Vec<&str> = default_suite().iter().map(|c| c.name).collect();
    for want in [
        "matmul", "softmax", "masked_softmax", "conv2d_input", "conv2d_weight", "conv3d_input", "leaky_relu", "sigmoid",
        "codec_encoder_params", "codec_decoder_params", "stgde_block_params", "stgde_depth_head", "bmpcf_params", "ded_params",
        "loss_ded", "loss_gen", "l1_loss", "perceptual_loss", "style_loss", "generator_objective_params",
    ] {
        assert!(names.contains(&want), "{want} is not checked");
    }
}
