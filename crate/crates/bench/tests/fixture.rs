use escounts_bench::{instance_gradients, DecoderConfig, Fixture, Objective};

#[test]
fn fixtures_have_requested_shape() {
    let cfg = DecoderConfig::desk();
    let f = Fixture::new(cfg.clone(), 4, 2);
    assert_eq!(f.instance.sequence.grid.t, 4 * cfg.tokens_per_window);
    assert_eq!(f.instance.exemplars.len(), 2);
    let total: f32 = f.instance.target.iter().sum();
    assert!((total - f.instance.count as f32).abs() < 1e-4);
    let (rep, grads) = instance_gradients(&f.decoder, &f.instance, Objective::default()).unwrap();
    assert!(rep.total.is_finite());
    assert_eq!(grads.len(), f.decoder.params.len());
}
