use polylens_core::sae::{loss_gradcheck, LossKind};

#[test]
fn both_losses_match_central_differences() {
    for kind in [LossKind::Standard, LossKind::StandardSquared, LossKind::Gated] {
        let r = loss_gradcheck(kind, 100, 11).unwrap();
        println!("{}: max rel error {:.2e}, excluded {}", r.name, r.max_rel_error, r.excluded);
        assert!(r.max_rel_error < 1e-3, "{}: {}", r.name, r.max_rel_error);
        // with inputs drawn away from zero most coordinates are smooth
        assert!(r.excluded < r.instances * 10, "{}: {} excluded", r.name, r.excluded);
    }
}
