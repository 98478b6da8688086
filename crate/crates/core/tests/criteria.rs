#[path = "shared/criteria.rs"]
mod criteria;

fn check(r: criteria::Outcome) {
    match r {
        Ok(summary) => eprintln!("{summary}"),
        Err(why) => panic!("{why}"),
    }
}

#[test]
fn loss_oracles() {
    check(criteria::loss_oracles());
}

#[test]
fn grl_contract() {
    check(criteria::grl_contract());
}

#[test]
fn stage_gating() {
    check(criteria::stage_gating());
}

#[test]
fn retrieval_oracle() {
    check(criteria::retrieval_oracle());
}

#[test]
fn persistence() {
    check(criteria::persistence());
}
