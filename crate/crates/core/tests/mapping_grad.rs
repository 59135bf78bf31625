//! Finite-difference validation of the complete mapping objective, with the
//! photometric, depth, surface, and scale-regularizer terms all active.

mod common;

#[test]
fn mapping_gradients_match_finite_differences() {
    let scenes = common::safe_map_scenes(3, 32, 6);
    assert_eq!(scenes.len(), 3, "seed scan must yield enough safe scenes");

    // The regularizer path (including the threshold's dependence on the
    // deepest Gaussian) must actually be exercised somewhere.
    let any_over = scenes.iter().any(|s| {
        let loss = common::map_loss_at(s, &s.field, &s.pose);
        loss.over_gamma > 0
    });
    assert!(any_over, "no scene has an oversized scale component");

    for (i, scene) in scenes.iter().enumerate() {
        common::check_map_gradients(scene).unwrap_or_else(|e| panic!("scene {i}: {e}"));
    }
}
