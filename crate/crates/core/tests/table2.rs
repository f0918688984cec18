use std::fs;
use std::path::PathBuf;

use nbsynth::evidence::{classify_subset, parse_dataset, select_subset, serialize_dataset, tally_subsets, SubsetLabel};
use nbsynth::hiermodel::{HierModel, PriorSpec, SeArmRouting};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/table2.csv")
}

#[test]
fn tallies_by_subset_and_format() {
    let studies = parse_dataset(fs::File::open(fixture()).unwrap()).unwrap();
    let t = tally_subsets(&studies);
    assert_eq!((t.subset_a, t.subset_b, t.subset_c), (4, 12, 24));
    assert_eq!((t.total_only, t.zeroes_only, t.both, t.neither), (3, 9, 8, 0));
}

#[test]
fn reported_groups_agree_with_classification() {
    let studies = parse_dataset(fs::File::open(fixture()).unwrap()).unwrap();
    for s in &studies {
        assert_eq!(s.reported_group, classify_subset(s).primary(), "{}", s.study_id);
    }
}

#[test]
fn fixture_round_trips_byte_for_byte() {
    let text = fs::read_to_string(fixture()).unwrap();
    let studies = parse_dataset(text.as_bytes()).unwrap();
    let mut out = Vec::new();
    serialize_dataset(&studies, &mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap(), text);
}

#[test]
fn every_subset_builds_a_model() {
    let studies = parse_dataset(fs::File::open(fixture()).unwrap()).unwrap();
    for (label, k) in [(SubsetLabel::A, 4), (SubsetLabel::B, 12), (SubsetLabel::C, 24)] {
        let sub = select_subset(&studies, label);
        assert_eq!(sub.len(), k);
        let model = HierModel::new(&sub, PriorSpec::default(), SeArmRouting::Normal).unwrap();
        let start = model.default_state();
        assert!(model.log_posterior(&start).unwrap().is_finite(), "{label}");
    }
}
