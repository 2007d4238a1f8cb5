//! Monthly futures return panels: loading, validation and the per-asset
//! training/test split.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A calendar month. Ordering follows the calendar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::config(format!("month {month} out of range")));
        }
        Ok(Self { year, month })
    }

    fn ordinal(self) -> i64 {
        self.year as i64 * 12 + (self.month as i64 - 1)
    }

    fn from_ordinal(ord: i64) -> Self {
        Self {
            year: ord.div_euclid(12) as i32,
            month: ord.rem_euclid(12) as u32 + 1,
        }
    }

    /// The month `n` months after `self` (negative moves backwards).
    pub fn offset(self, n: i64) -> Self {
        Self::from_ordinal(self.ordinal() + n)
    }

    /// Signed number of months from `earlier` to `self`.
    pub fn months_since(self, earlier: YearMonth) -> i64 {
        self.ordinal() - earlier.ordinal()
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for YearMonth {
    type Err = Error;

    /// Accepts `YYYY-MM` and the `YYYYmMM` spelling used in reporting windows.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (y, m) = s
            .split_once('-')
            .or_else(|| s.split_once('m'))
            .ok_or_else(|| Error::config(format!("bad month `{s}`, expected YYYY-MM")))?;
        let year = y
            .parse::<i32>()
            .map_err(|_| Error::config(format!("bad year in `{s}`")))?;
        let month = m
            .parse::<u32>()
            .map_err(|_| Error::config(format!("bad month in `{s}`")))?;
        YearMonth::new(year, month)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AssetClass {
    Equity,
    Bond,
    Currency,
    Commodity,
}

impl AssetClass {
    pub const ALL: [AssetClass; 4] = [
        AssetClass::Equity,
        AssetClass::Bond,
        AssetClass::Currency,
        AssetClass::Commodity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AssetClass::Equity => "equity",
            AssetClass::Bond => "bond",
            AssetClass::Currency => "currency",
            AssetClass::Commodity => "commodity",
        }
    }
}

impl fmt::Display for AssetClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AssetClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "equity" | "equities" => Ok(AssetClass::Equity),
            "bond" | "bonds" => Ok(AssetClass::Bond),
            "currency" | "currencies" | "fx" => Ok(AssetClass::Currency),
            "commodity" | "commodities" => Ok(AssetClass::Commodity),
            other => Err(Error::config(format!("unknown asset class `{other}`"))),
        }
    }
}

/// Contiguous monthly log-returns of one futures contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetSeries {
    pub asset_id: String,
    pub asset_class: AssetClass,
    pub start_month: YearMonth,
    pub returns: Vec<f64>,
}

impl AssetSeries {
    pub fn new(
        asset_id: impl Into<String>,
        asset_class: AssetClass,
        start_month: YearMonth,
        returns: Vec<f64>,
    ) -> Result<Self> {
        let asset_id = asset_id.into();
        if returns.is_empty() {
            return Err(Error::Panel(format!("asset {asset_id} has no returns")));
        }
        if let Some(i) = returns.iter().position(|r| !r.is_finite()) {
            return Err(Error::Panel(format!(
                "asset {asset_id}: non-finite return in {}",
                start_month.offset(i as i64)
            )));
        }
        Ok(Self {
            asset_id,
            asset_class,
            start_month,
            returns,
        })
    }

    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }

    /// Last observed month; the asset exits the portfolio after it.
    pub fn end_month(&self) -> YearMonth {
        self.start_month.offset(self.returns.len() as i64 - 1)
    }

    /// Series truncated to months `<= last`, or `None` when nothing remains.
    pub fn truncated(&self, last: YearMonth) -> Option<AssetSeries> {
        let keep = last.months_since(self.start_month) + 1;
        if keep <= 0 {
            return None;
        }
        let keep = (keep as usize).min(self.returns.len());
        Some(AssetSeries {
            returns: self.returns[..keep].to_vec(),
            ..self.clone()
        })
    }
}

/// An immutable collection of assets on a shared monthly calendar.
///
/// Month indices are offsets from the earliest month of any asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    assets: Vec<AssetSeries>,
    start: YearMonth,
    len: usize,
}

impl PanelDataset {
    /// Builds a panel; assets are sorted by id and ids must be unique.
    pub fn new(mut assets: Vec<AssetSeries>) -> Result<Self> {
        if assets.is_empty() {
            return Err(Error::Panel("panel has no assets".into()));
        }
        assets.sort_by(|a, b| a.asset_id.cmp(&b.asset_id));
        for pair in assets.windows(2) {
            if pair[0].asset_id == pair[1].asset_id {
                return Err(Error::Panel(format!(
                    "duplicate asset id {}",
                    pair[0].asset_id
                )));
            }
        }
        let start = assets.iter().map(|a| a.start_month).min().unwrap();
        let end = assets.iter().map(|a| a.end_month()).max().unwrap();
        let len = end.months_since(start) as usize + 1;
        Ok(Self { assets, start, len })
    }

    pub fn assets(&self) -> &[AssetSeries] {
        &self.assets
    }

    pub fn start(&self) -> YearMonth {
        self.start
    }

    pub fn calendar_len(&self) -> usize {
        self.len
    }

    pub fn month(&self, index: usize) -> YearMonth {
        self.start.offset(index as i64)
    }

    pub fn calendar(&self) -> Vec<YearMonth> {
        (0..self.len).map(|i| self.month(i)).collect()
    }

    /// Calendar index of `month`, if it lies on the calendar.
    pub fn index_of(&self, month: YearMonth) -> Option<usize> {
        let i = month.months_since(self.start);
        (i >= 0 && (i as usize) < self.len).then_some(i as usize)
    }

    /// Calendar index of the asset's first return.
    pub fn offset_of(&self, asset: &AssetSeries) -> usize {
        asset.start_month.months_since(self.start) as usize
    }

    pub fn get(&self, asset_id: &str) -> Option<&AssetSeries> {
        self.assets
            .binary_search_by(|a| a.asset_id.as_str().cmp(asset_id))
            .ok()
            .map(|i| &self.assets[i])
    }

    /// Panel restricted to months `<= last`. Assets starting after `last` are dropped.
    pub fn truncated(&self, last: YearMonth) -> Result<PanelDataset> {
        let assets = self
            .assets
            .iter()
            .filter_map(|a| a.truncated(last))
            .collect();
        PanelDataset::new(assets)
    }
}

/// Column names of the panel CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMap {
    pub asset_id: String,
    pub asset_class: String,
    pub year_month: String,
    pub log_return: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            asset_id: "asset_id".into(),
            asset_class: "asset_class".into(),
            year_month: "year_month".into(),
            log_return: "log_return".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPolicy {
    pub train_months: usize,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        Self { train_months: 36 }
    }
}

impl SplitPolicy {
    pub fn new(train_months: usize, max_lookback: usize) -> Result<Self> {
        if train_months < max_lookback + 1 {
            return Err(Error::config(format!(
                "train_months {train_months} must be at least max lookback + 1 = {}",
                max_lookback + 1
            )));
        }
        Ok(Self { train_months })
    }
}

/// First out-of-sample month of `asset`, or `None` when the asset is too
/// short to leave any test months and must be excluded.
pub fn test_start(asset: &AssetSeries, policy: SplitPolicy) -> Option<YearMonth> {
    if asset.len() <= policy.train_months {
        log::info!(
            "excluding {}: {} months does not exceed the {}-month training window",
            asset.asset_id,
            asset.len(),
            policy.train_months
        );
        return None;
    }
    Some(asset.start_month.offset(policy.train_months as i64))
}

/// One parsed CSV row before grouping.
#[derive(Debug, Clone)]
pub struct RawRow {
    pub path: PathBuf,
    pub row: usize,
    pub asset_id: String,
    pub asset_class: String,
    pub month: String,
    pub value: String,
}

/// A problem found while validating panel rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    pub location: String,
    pub asset_id: String,
    pub message: String,
}

fn csv_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Panel(format!("no csv files in {}", path.display())));
        }
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

/// Reads raw rows from a panel file or a directory of per-asset files.
pub fn read_rows(path: &Path, schema: &ColumnMap) -> Result<Vec<RawRow>> {
    let mut rows = Vec::new();
    for file in csv_files(path)? {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(&file)?;
        let headers = reader.headers()?.clone();
        let col = |name: &str| -> Result<usize> {
            headers.iter().position(|h| h == name).ok_or_else(|| Error::Data {
                path: file.clone(),
                row: 1,
                msg: format!("missing column `{name}`"),
            })
        };
        let (ia, ic, im, ir) = (
            col(&schema.asset_id)?,
            col(&schema.asset_class)?,
            col(&schema.year_month)?,
            col(&schema.log_return)?,
        );
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let get = |k: usize| record.get(k).unwrap_or("").to_string();
            rows.push(RawRow {
                path: file.clone(),
                // header is line 1
                row: i + 2,
                asset_id: get(ia),
                asset_class: get(ic),
                month: get(im),
                value: get(ir),
            });
        }
    }
    Ok(rows)
}

struct Grouped {
    class: AssetClass,
    months: BTreeMap<YearMonth, (f64, PathBuf, usize)>,
}

/// Groups rows per asset, collecting every problem instead of stopping at
/// the first. Assets with findings are omitted from the result.
pub fn assemble(rows: Vec<RawRow>) -> (Vec<AssetSeries>, Vec<Finding>) {
    let mut findings = Vec::new();
    let mut groups: BTreeMap<String, Grouped> = BTreeMap::new();
    let mut broken: std::collections::BTreeSet<String> = Default::default();

    for r in rows {
        let loc = format!("{}:{}", r.path.display(), r.row);
        let fail = |msg: String, findings: &mut Vec<Finding>| {
            findings.push(Finding {
                location: loc.clone(),
                asset_id: r.asset_id.clone(),
                message: msg,
            });
        };
        if r.asset_id.is_empty() {
            fail("empty asset_id".into(), &mut findings);
            continue;
        }
        let class = match r.asset_class.parse::<AssetClass>() {
            Ok(c) => c,
            Err(e) => {
                fail(e.to_string(), &mut findings);
                broken.insert(r.asset_id.clone());
                continue;
            }
        };
        let month = match r.month.parse::<YearMonth>() {
            Ok(m) => m,
            Err(e) => {
                fail(e.to_string(), &mut findings);
                broken.insert(r.asset_id.clone());
                continue;
            }
        };
        let value = match r.value.parse::<f64>() {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(_) => {
                fail(
                    format!("non-finite log_return `{}` for {} in {month}", r.value, r.asset_id),
                    &mut findings,
                );
                broken.insert(r.asset_id.clone());
                continue;
            }
        };
        let g = groups.entry(r.asset_id.clone()).or_insert_with(|| Grouped {
            class,
            months: BTreeMap::new(),
        });
        if g.class != class {
            fail(
                format!("{} changes asset class from {} to {class}", r.asset_id, g.class),
                &mut findings,
            );
            broken.insert(r.asset_id.clone());
            continue;
        }
        if let Some((_, p, row)) = g.months.get(&month) {
            fail(
                format!(
                    "duplicate row for {} in {month} (first at {}:{row})",
                    r.asset_id,
                    p.display()
                ),
                &mut findings,
            );
            broken.insert(r.asset_id.clone());
            continue;
        }
        g.months.insert(month, (value, r.path.clone(), r.row));
    }

    let mut assets = Vec::new();
    for (id, g) in groups {
        let months: Vec<_> = g.months.iter().collect();
        let mut gap = false;
        for w in months.windows(2) {
            let (m0, _) = w[0];
            let (m1, (_, p, row)) = w[1];
            if m1.months_since(*m0) != 1 {
                gap = true;
                let missing = m0.offset(1);
                findings.push(Finding {
                    location: format!("{}:{row}", p.display()),
                    asset_id: id.clone(),
                    message: format!("calendar gap for {id}: missing {missing} (next row is {m1})"),
                });
            }
        }
        if gap || broken.contains(&id) {
            continue;
        }
        let start = *months[0].0;
        let returns = months.iter().map(|(_, (v, _, _))| *v).collect();
        assets.push(AssetSeries {
            asset_id: id,
            asset_class: g.class,
            start_month: start,
            returns,
        });
    }
    (assets, findings)
}

/// Loads and validates a panel. The first problem found is returned as an
/// error carrying file and row context.
pub fn load_panel(path: &Path, schema: &ColumnMap) -> Result<PanelDataset> {
    let rows = read_rows(path, schema)?;
    if rows.is_empty() {
        return Err(Error::Panel(format!("{} has no data rows", path.display())));
    }
    let (assets, findings) = assemble(rows);
    if let Some(f) = findings.into_iter().next() {
        let (p, row) = f
            .location
            .rsplit_once(':')
            .map(|(p, r)| (PathBuf::from(p), r.parse().unwrap_or(0)))
            .unwrap_or_else(|| (path.to_path_buf(), 0));
        return Err(Error::Data {
            path: p,
            row,
            msg: f.message,
        });
    }
    PanelDataset::new(assets)
}

/// Writes the panel in the single-file CSV schema. Values use the shortest
/// representation that round-trips, so reloading is bit-exact.
pub fn write_panel(panel: &PanelDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["asset_id", "asset_class", "year_month", "log_return"])?;
    for a in panel.assets() {
        for (i, r) in a.returns.iter().enumerate() {
            w.write_record([
                a.asset_id.as_str(),
                a.asset_class.as_str(),
                &a.start_month.offset(i as i64).to_string(),
                &format!("{r:?}"),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn ym(s: &str) -> YearMonth {
        s.parse().unwrap()
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    const HEADER: &str = "asset_id,asset_class,year_month,log_return\n";

    #[test]
    fn month_arithmetic() {
        assert_eq!(ym("1980-01").offset(36), ym("1983-01"));
        assert_eq!(ym("1999-10").offset(36), ym("2002-10"));
        assert_eq!(ym("2020-09").months_since(ym("1980-01")), 488);
        assert_eq!(ym("2009m03"), ym("2009-03"));
        assert_eq!(ym("1980-01").offset(-1), ym("1979-12"));
        assert!("2020-13".parse::<YearMonth>().is_err());
    }

    #[test]
    fn minimal_panel_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "p.csv",
            &format!("{HEADER}ES,equity,2000-02,0.01\nES,equity,2000-01,-0.02\nES,equity,2000-03,0.0\n"),
        );
        let panel = load_panel(&p, &ColumnMap::default()).unwrap();
        assert_eq!(panel.calendar_len(), 3);
        assert_eq!(panel.assets()[0].returns, vec![-0.02, 0.01, 0.0]);
        assert_eq!(panel.assets()[0].start_month, ym("2000-01"));
    }

    #[test]
    fn nan_is_rejected_with_context() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "p.csv",
            &format!("{HEADER}CL,commodity,2000-01,0.01\nCL,commodity,2000-02,NaN\n"),
        );
        let err = load_panel(&p, &ColumnMap::default()).unwrap_err().to_string();
        assert!(err.contains("CL") && err.contains("2000-02") && err.contains(":3"), "{err}");
    }

    #[test]
    fn gap_and_duplicate_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "gap.csv",
            &format!("{HEADER}TY,bond,2000-01,0.01\nTY,bond,2000-03,0.02\n"),
        );
        let err = load_panel(&p, &ColumnMap::default()).unwrap_err().to_string();
        assert!(err.contains("missing 2000-02"), "{err}");

        let p = write(
            dir.path(),
            "dup.csv",
            &format!("{HEADER}TY,bond,2000-01,0.01\nTY,bond,2000-01,0.02\n"),
        );
        let err = load_panel(&p, &ColumnMap::default()).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn directory_of_per_asset_files() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "b.csv", &format!("{HEADER}B,bond,2001-01,0.01\nB,bond,2001-02,0.02\n"));
        write(dir.path(), "a.csv", &format!("{HEADER}A,fx,2000-11,0.01\n"));
        let panel = load_panel(dir.path(), &ColumnMap::default()).unwrap();
        assert_eq!(panel.assets().len(), 2);
        assert_eq!(panel.assets()[0].asset_id, "A");
        assert_eq!(panel.calendar_len(), 4);
        assert_eq!(panel.offset_of(&panel.assets()[1]), 2);
    }

    #[test]
    fn custom_schema() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "p.csv", "id,cls,ym,r\nX,equity,2000-01,0.5\n");
        let schema = ColumnMap {
            asset_id: "id".into(),
            asset_class: "cls".into(),
            year_month: "ym".into(),
            log_return: "r".into(),
        };
        assert_eq!(load_panel(&p, &schema).unwrap().assets()[0].returns, vec![0.5]);
        assert!(load_panel(&p, &ColumnMap::default()).is_err());
    }

    #[test]
    fn full_sample_calendar_length() {
        let assets = (0..56)
            .map(|i| {
                AssetSeries::new(format!("A{i:02}"), AssetClass::ALL[i % 4], ym("1980-01"), vec![0.0; 489])
                    .unwrap()
            })
            .collect();
        let panel = PanelDataset::new(assets).unwrap();
        assert_eq!(panel.calendar_len(), 489);
        assert_eq!(panel.assets().len(), 56);
        assert_eq!(panel.month(488), ym("2020-09"));
    }

    #[test]
    fn split_offsets() {
        let policy = SplitPolicy::default();
        let a = AssetSeries::new("A", AssetClass::Equity, ym("1980-01"), vec![0.0; 40]).unwrap();
        assert_eq!(test_start(&a, policy), Some(ym("1983-01")));
        let b = AssetSeries::new("B", AssetClass::Equity, ym("1999-10"), vec![0.0; 40]).unwrap();
        assert_eq!(test_start(&b, policy), Some(ym("2002-10")));
        let c = AssetSeries::new("C", AssetClass::Equity, ym("1999-10"), vec![0.0; 20]).unwrap();
        assert_eq!(test_start(&c, policy), None);
        assert!(SplitPolicy::new(12, 12).is_err());
        assert!(SplitPolicy::new(13, 12).is_ok());
    }

    #[test]
    fn truncation() {
        let a = AssetSeries::new("A", AssetClass::Equity, ym("2000-01"), vec![0.1, 0.2, 0.3]).unwrap();
        let b = AssetSeries::new("B", AssetClass::Bond, ym("2000-03"), vec![0.4]).unwrap();
        let panel = PanelDataset::new(vec![a, b]).unwrap();
        let t = panel.truncated(ym("2000-02")).unwrap();
        assert_eq!(t.assets().len(), 1);
        assert_eq!(t.assets()[0].returns, vec![0.1, 0.2]);
    }
}
