mod support;

#[test]
fn tiny_preset_gradients_match_central_differences() {
    let r = support::gradient_check(3, 7);
    println!(
        "{} probes checked, {} excluded as non-smooth, max relative error {:.2e} ({}) in {:.1?}",
        r.checked, r.excluded, r.max_rel_err, r.worst, r.elapsed
    );
    assert!(r.checked >= 12);
    assert!(r.max_rel_err < 1e-4, "{}", r.worst);
}
