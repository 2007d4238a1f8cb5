use std::fs;

use dynmom::data::{load_panel, write_panel, AssetClass, AssetSeries, ColumnMap, PanelDataset, YearMonth};
use proptest::prelude::*;

fn panel() -> impl Strategy<Value = PanelDataset> {
    prop::collection::vec((0usize..4, 0i64..40, prop::collection::vec(-0.5f64..0.5, 1..60)), 1..6).prop_map(
        |assets| {
            let start = YearMonth::new(1995, 7).unwrap();
            let series = assets
                .into_iter()
                .enumerate()
                .map(|(i, (c, off, r))| {
                    AssetSeries::new(format!("X{i:02}"), AssetClass::ALL[c], start.offset(off), r).unwrap()
                })
                .collect();
            PanelDataset::new(series).unwrap()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn write_then_load_is_lossless(p in panel()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        write_panel(&p, &path).unwrap();
        let back = load_panel(&path, &ColumnMap::default()).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn truncation_keeps_the_prefix(p in panel(), keep in 1i64..80) {
        let last = p.start().offset(keep - 1);
        if let Ok(t) = p.truncated(last) {
            for a in t.assets() {
                let full = p.get(&a.asset_id).unwrap();
                prop_assert!(a.end_month() <= last);
                prop_assert_eq!(&full.returns[..a.len()], &a.returns[..]);
            }
        }
    }
}

#[test]
fn gaps_and_duplicates_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    fs::write(
        &path,
        "asset_id,asset_class,year_month,log_return\n\
         A,equity,2000-01,0.01\n\
         A,equity,2000-03,0.02\n\
         B,bond,2000-01,0.01\n\
         B,bond,2000-01,0.03\n",
    )
    .unwrap();
    let diag = dynmom::engine::validate_data(&path, &ColumnMap::default()).unwrap();
    assert!(diag.findings.len() >= 2, "{:?}", diag.findings);
    assert!(diag.findings.iter().any(|f| f.asset_id == "A"));
    assert!(diag.findings.iter().any(|f| f.asset_id == "B"));
}
