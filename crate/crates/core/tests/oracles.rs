mod common;

#[test]
fn every_formula_matches_its_scalar_oracle() {
    let checks = common::oracles::all();
    for c in &checks {
        println!("{c}");
    }
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    assert!(failed.is_empty(), "oracle mismatch: {failed:?}");
}
