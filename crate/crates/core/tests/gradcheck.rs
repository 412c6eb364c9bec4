use medfuse_core::gradcheck::{self, CheckModule, TOLERANCE};

#[test]
fn every_module_passes_the_finite_difference_check() {
    for module in CheckModule::ALL {
        for seed in [11, 12] {
            let report = gradcheck::check_module(module, seed).unwrap();
            assert!(report.param_count() > 0);
            assert!(report.passed(), "{} seed {}: {:?}", module.name(), seed, gradcheck::worst_by_param(&report));
            assert!(report.max_rel_err() < TOLERANCE);
        }
    }
}

#[test]
fn module_lists_parse() {
    assert_eq!(CheckModule::parse_list("all").unwrap(), CheckModule::ALL.to_vec());
    assert_eq!(CheckModule::parse_list("losses").unwrap(), vec![CheckModule::Losses]);
    assert!(CheckModule::parse_list("optimizer").is_err());
}
