//! Country-year panel ingestion, validation, and slicing.
//!
//! Panels are unbalanced: each country contributes one contiguous block of
//! complete observations ("window") inside the global year range. Cells
//! outside the window are tracked by an explicit missingness mask rather than
//! dropped. Group flags (poor/hot/agricultural) and regions are input
//! metadata used for subsample estimation and regional aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Missing-value encodings accepted in input CSVs.
fn is_missing_token(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t == "NA"
}

/// Country metadata: identifier, region tag, and group flags.
///
/// `rich` and `non_agricultural` are the complements of `poor` and
/// `agricultural`; only the base flags are stored so the pairs can never
/// disagree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountryMeta {
    pub id: String,
    pub region: String,
    pub poor: bool,
    pub hot: bool,
    pub agricultural: bool,
}

impl CountryMeta {
    pub fn unknown(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            region: "all".to_string(),
            poor: false,
            hot: false,
            agricultural: false,
        }
    }

    pub fn rich(&self) -> bool {
        !self.poor
    }

    pub fn non_agricultural(&self) -> bool {
        !self.agricultural
    }
}

/// One observed variable with its unit annotation (e.g. "celsius",
/// "percent"). Units are carried as labels only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub unit: String,
}

/// Group flags usable as subsample filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupFlag {
    Poor,
    Rich,
    Hot,
    Agricultural,
    NonAgricultural,
}

impl GroupFlag {
    fn matches(self, meta: &CountryMeta) -> bool {
        match self {
            GroupFlag::Poor => meta.poor,
            GroupFlag::Rich => meta.rich(),
            GroupFlag::Hot => meta.hot,
            GroupFlag::Agricultural => meta.agricultural,
            GroupFlag::NonAgricultural => meta.non_agricultural(),
        }
    }
}

impl fmt::Display for GroupFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            GroupFlag::Poor => "poor",
            GroupFlag::Rich => "rich",
            GroupFlag::Hot => "hot",
            GroupFlag::Agricultural => "agricultural",
            GroupFlag::NonAgricultural => "non-agricultural",
        };
        f.write_str(s)
    }
}

/// Subsample selector: a country group or a year split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsampleFilter {
    Group(GroupFlag),
    /// Keep years strictly before the split year.
    Before(i32),
    /// Keep the split year and everything after.
    From(i32),
}

impl fmt::Display for SubsampleFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubsampleFilter::Group(g) => write!(f, "{g}"),
            SubsampleFilter::Before(y) => write!(f, "pre{y}"),
            SubsampleFilter::From(y) => write!(f, "post{y}"),
        }
    }
}

impl std::str::FromStr for SubsampleFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse_year = |digits: &str, what: &str| -> Result<i32> {
            digits
                .parse()
                .map_err(|_| Error::Config(format!("invalid {what} filter `{s}`")))
        };
        match s {
            "poor" => Ok(SubsampleFilter::Group(GroupFlag::Poor)),
            "rich" => Ok(SubsampleFilter::Group(GroupFlag::Rich)),
            "hot" => Ok(SubsampleFilter::Group(GroupFlag::Hot)),
            "agricultural" => Ok(SubsampleFilter::Group(GroupFlag::Agricultural)),
            "non-agricultural" => Ok(SubsampleFilter::Group(GroupFlag::NonAgricultural)),
            _ if s.starts_with("pre") => Ok(SubsampleFilter::Before(parse_year(&s[3..], "pre")?)),
            _ if s.starts_with("post") => Ok(SubsampleFilter::From(parse_year(&s[4..], "post")?)),
            _ => Err(Error::Config(format!("unknown subsample filter `{s}`"))),
        }
    }
}

/// Column mapping for panel CSV ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub country: String,
    pub year: String,
    pub values: Vec<Variable>,
}

/// Contiguous block of complete observations for one country, as inclusive
/// row indices into the global year range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false // constructed only for non-empty spans
    }
}

/// Country-year panel with metadata and per-country sample windows.
///
/// `values[i]` is a (years x N) matrix over the global year range;
/// `missing[i][t * n_vars + v]` flags cells outside country i's window.
/// Within the window every cell is observed and finite. Immutable after
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    countries: Vec<CountryMeta>,
    variables: Vec<Variable>,
    first_year: i32,
    values: Vec<DMatrix<f64>>,
    missing: Vec<Vec<bool>>,
    windows: Vec<Window>,
}

impl PanelDataset {
    /// Assemble and validate a dataset from per-country year->values maps.
    /// Absent years and missing cells are masked; each country must end up
    /// with one contiguous block of complete rows.
    fn assemble(
        countries: Vec<CountryMeta>,
        variables: Vec<Variable>,
        rows: Vec<BTreeMap<i32, Vec<Option<f64>>>>,
    ) -> Result<Self> {
        if variables.len() < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 value columns, got {}",
                variables.len()
            )));
        }
        let n_vars = variables.len();
        let all_years: Vec<i32> = rows.iter().flat_map(|m| m.keys().copied()).collect();
        let first_year = *all_years
            .iter()
            .min()
            .ok_or_else(|| Error::Validation("dataset contains no observations".into()))?;
        let last_year = *all_years.iter().max().unwrap();
        let n_years = (last_year - first_year + 1) as usize;

        let mut values = Vec::with_capacity(countries.len());
        let mut missing = Vec::with_capacity(countries.len());
        let mut windows = Vec::with_capacity(countries.len());

        for (meta, country_rows) in countries.iter().zip(&rows) {
            let mut mat = DMatrix::zeros(n_years, n_vars);
            let mut mask = vec![true; n_years * n_vars];
            for (&year, cells) in country_rows {
                let t = (year - first_year) as usize;
                for (v, cell) in cells.iter().enumerate() {
                    if let Some(x) = cell {
                        if !x.is_finite() {
                            return Err(Error::Validation(format!(
                                "non-finite value for country {}, year {year}, column {}",
                                meta.id, variables[v].name
                            )));
                        }
                        mat[(t, v)] = *x;
                        mask[t * n_vars + v] = false;
                    }
                }
            }

            let complete =
                |t: usize| -> bool { (0..n_vars).all(|v| !mask[t * n_vars + v]) };
            let start = (0..n_years).find(|&t| complete(t));
            let Some(start) = start else {
                return Err(Error::Validation(format!(
                    "country {} has no complete observations",
                    meta.id
                )));
            };
            let end = (0..n_years).rev().find(|&t| complete(t)).unwrap();
            for t in start..=end {
                if !complete(t) {
                    return Err(Error::NonContiguousSample {
                        country: meta.id.clone(),
                        year: first_year + t as i32,
                    });
                }
            }
            // Cells in trimmed-off rows stay masked; zero the payload so the
            // matrix carries no stray numbers outside the mask.
            for t in 0..n_years {
                for v in 0..n_vars {
                    if mask[t * n_vars + v] {
                        mat[(t, v)] = 0.0;
                    }
                }
            }
            values.push(mat);
            missing.push(mask);
            windows.push(Window { start, end });
        }

        Ok(Self {
            countries,
            variables,
            first_year,
            values,
            missing,
            windows,
        })
    }

    /// Build a dataset from in-memory complete per-country series.
    /// `start_offsets[i]` places country i's first observation relative to
    /// `first_year`; series lengths may differ (ragged starts/ends).
    pub fn from_parts(
        countries: Vec<CountryMeta>,
        variables: Vec<Variable>,
        first_year: i32,
        start_offsets: &[usize],
        series: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        if countries.len() != series.len() || countries.len() != start_offsets.len() {
            return Err(Error::Validation(
                "countries, start_offsets and series must have equal length".into(),
            ));
        }
        let mut rows = Vec::with_capacity(series.len());
        for (offset, mat) in start_offsets.iter().zip(&series) {
            let mut m = BTreeMap::new();
            for t in 0..mat.nrows() {
                let year = first_year + (*offset + t) as i32;
                let cells: Vec<Option<f64>> = (0..mat.ncols()).map(|v| Some(mat[(t, v)])).collect();
                m.insert(year, cells);
            }
            rows.push(m);
        }
        Self::assemble(countries, variables, rows)
    }

    pub fn n_countries(&self) -> usize {
        self.countries.len()
    }

    pub fn n_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn n_years(&self) -> usize {
        self.values.first().map_or(0, |m| m.nrows())
    }

    pub fn first_year(&self) -> i32 {
        self.first_year
    }

    pub fn last_year(&self) -> i32 {
        self.first_year + self.n_years() as i32 - 1
    }

    pub fn year_of(&self, t: usize) -> i32 {
        self.first_year + t as i32
    }

    pub fn countries(&self) -> &[CountryMeta] {
        &self.countries
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn window(&self, country: usize) -> Window {
        self.windows[country]
    }

    /// Raw (years x N) value matrix for a country; consult `is_missing`
    /// before reading cells outside the window.
    pub fn values(&self, country: usize) -> &DMatrix<f64> {
        &self.values[country]
    }

    pub fn is_missing(&self, country: usize, t: usize, var: usize) -> bool {
        self.missing[country][t * self.n_vars() + var]
    }

    /// Observed value or None when masked.
    pub fn get(&self, country: usize, t: usize, var: usize) -> Option<f64> {
        if self.is_missing(country, t, var) {
            None
        } else {
            Some(self.values[country][(t, var)])
        }
    }

    /// Load a panel from a CSV file. Rows with missing cells are masked, not
    /// dropped; duplicate (country, year) pairs and interior gaps are errors.
    pub fn load(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<Self> {
        let path = path.as_ref();
        let path_str = path.display().to_string();
        let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(
                &path_str,
                std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
            ),
            _ => Error::Parse {
                path: path_str.clone(),
                row: 0,
                detail: e.to_string(),
            },
        })?;

        let headers = reader
            .headers()
            .map_err(|e| Error::Parse {
                path: path_str.clone(),
                row: 1,
                detail: e.to_string(),
            })?
            .clone();
        let find_col = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Config(format!("column `{name}` not found in {path_str}")))
        };
        let country_col = find_col(&schema.country)?;
        let year_col = find_col(&schema.year)?;
        let value_cols: Vec<usize> = schema
            .values
            .iter()
            .map(|v| find_col(&v.name))
            .collect::<Result<_>>()?;

        let mut ids: Vec<String> = Vec::new();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let mut rows: Vec<BTreeMap<i32, Vec<Option<f64>>>> = Vec::new();

        for (rec_idx, record) in reader.records().enumerate() {
            let line = rec_idx + 2; // 1-based, after the header line
            let record = record.map_err(|e| Error::Parse {
                path: path_str.clone(),
                row: line,
                detail: e.to_string(),
            })?;
            let field = |col: usize| record.get(col).unwrap_or("");
            let country = field(country_col).trim().to_string();
            if country.is_empty() {
                return Err(Error::Parse {
                    path: path_str.clone(),
                    row: line,
                    detail: "empty country field".into(),
                });
            }
            let year: i32 = field(year_col).trim().parse().map_err(|_| Error::Parse {
                path: path_str.clone(),
                row: line,
                detail: format!("invalid year `{}`", field(year_col)),
            })?;
            let mut cells = Vec::with_capacity(value_cols.len());
            for (&col, var) in value_cols.iter().zip(&schema.values) {
                let raw = field(col);
                if is_missing_token(raw) {
                    cells.push(None);
                } else {
                    let x: f64 = raw.trim().parse().map_err(|_| Error::Parse {
                        path: path_str.clone(),
                        row: line,
                        detail: format!("invalid value `{raw}` in column {}", var.name),
                    })?;
                    cells.push(Some(x));
                }
            }

            let ci = *index.entry(country.clone()).or_insert_with(|| {
                ids.push(country.clone());
                rows.push(BTreeMap::new());
                ids.len() - 1
            });
            if rows[ci].insert(year, cells).is_some() {
                return Err(Error::DuplicateObservation { country, year });
            }
        }

        let countries = ids.into_iter().map(CountryMeta::unknown).collect();
        Self::assemble(countries, schema.values.clone(), rows)
    }

    /// Attach metadata from a CSV with columns country, region, poor, hot,
    /// agricultural (flags as 0/1). Every row must reference a known country;
    /// countries absent from the file keep default metadata.
    pub fn with_metadata(mut self, path: impl AsRef<Path>) -> Result<Self> {
        let path_str = path.as_ref().display().to_string();
        let mut reader = csv::Reader::from_path(path.as_ref()).map_err(|e| Error::Io {
            path: path_str.clone(),
            source: std::io::Error::other(e.to_string()),
        })?;
        let headers = reader
            .headers()
            .map_err(|e| Error::Parse {
                path: path_str.clone(),
                row: 1,
                detail: e.to_string(),
            })?
            .clone();
        let col = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Config(format!("column `{name}` not found in {path_str}")))
        };
        let c_country = col("country")?;
        let c_region = col("region")?;
        let c_poor = col("poor")?;
        let c_hot = col("hot")?;
        let c_agri = col("agricultural")?;

        let parse_flag = |raw: &str, line: usize| -> Result<bool> {
            match raw.trim() {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::Parse {
                    path: path_str.clone(),
                    row: line,
                    detail: format!("flag must be 0 or 1, got `{other}`"),
                }),
            }
        };

        for (rec_idx, record) in reader.records().enumerate() {
            let line = rec_idx + 2;
            let record = record.map_err(|e| Error::Parse {
                path: path_str.clone(),
                row: line,
                detail: e.to_string(),
            })?;
            let field = |c: usize| record.get(c).unwrap_or("").trim().to_string();
            let id = field(c_country);
            let Some(ci) = self.countries.iter().position(|c| c.id == id) else {
                return Err(Error::Validation(format!(
                    "metadata references unknown country `{id}`"
                )));
            };
            self.countries[ci] = CountryMeta {
                id,
                region: field(c_region),
                poor: parse_flag(&field(c_poor), line)?,
                hot: parse_flag(&field(c_hot), line)?,
                agricultural: parse_flag(&field(c_agri), line)?,
            };
        }
        Ok(self)
    }

    /// Serialize back to CSV. Reloading the output with the same schema
    /// reproduces this dataset exactly.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<Self> {
        let path_str = path.as_ref().display().to_string();
        let mut w = csv::Writer::from_path(path.as_ref())
            .map_err(|e| Error::Io {
                path: path_str.clone(),
                source: std::io::Error::other(e.to_string()),
            })?;
        let mut header = vec!["country".to_string(), "year".to_string()];
        header.extend(self.variables.iter().map(|v| v.name.clone()));
        w.write_record(&header).map_err(|e| Error::Io {
            path: path_str.clone(),
            source: std::io::Error::other(e.to_string()),
        })?;
        for (ci, meta) in self.countries.iter().enumerate() {
            for t in 0..self.n_years() {
                let any = (0..self.n_vars()).any(|v| !self.is_missing(ci, t, v));
                if !any {
                    continue;
                }
                let mut rec = vec![meta.id.clone(), self.year_of(t).to_string()];
                for v in 0..self.n_vars() {
                    rec.push(match self.get(ci, t, v) {
                        Some(x) => format!("{x}"),
                        None => "NA".to_string(),
                    });
                }
                w.write_record(&rec).map_err(|e| Error::Io {
                    path: path_str.clone(),
                    source: std::io::Error::other(e.to_string()),
                })?;
            }
        }
        w.flush()
            .map_err(|e| Error::io(&path_str, e))?;
        Ok(self.clone())
    }

    /// Restrict the panel to a country group or year range. Metadata is
    /// preserved; countries with no remaining observations are removed.
    pub fn subsample(&self, filter: SubsampleFilter) -> Result<Self> {
        match filter {
            SubsampleFilter::Group(flag) => {
                let keep: Vec<usize> = (0..self.n_countries())
                    .filter(|&i| flag.matches(&self.countries[i]))
                    .collect();
                if keep.is_empty() {
                    return Err(Error::EmptySubsample(flag.to_string()));
                }
                Ok(Self {
                    countries: keep.iter().map(|&i| self.countries[i].clone()).collect(),
                    variables: self.variables.clone(),
                    first_year: self.first_year,
                    values: keep.iter().map(|&i| self.values[i].clone()).collect(),
                    missing: keep.iter().map(|&i| self.missing[i].clone()).collect(),
                    windows: keep.iter().map(|&i| self.windows[i]).collect(),
                })
            }
            SubsampleFilter::Before(year) | SubsampleFilter::From(year) => {
                if year <= self.first_year() || year > self.last_year() {
                    return Err(Error::Config(format!(
                        "split year {year} outside data range {}..={}",
                        self.first_year(),
                        self.last_year()
                    )));
                }
                let split = (year - self.first_year) as usize;
                let (lo, hi) = match filter {
                    SubsampleFilter::Before(_) => (0usize, split - 1),
                    _ => (split, self.n_years() - 1),
                };
                self.slice_years(lo, hi, &filter.to_string())
            }
        }
    }

    /// Split into (years < split_year, years >= split_year).
    pub fn split_at(&self, split_year: i32) -> Result<(Self, Self)> {
        Ok((
            self.subsample(SubsampleFilter::Before(split_year))?,
            self.subsample(SubsampleFilter::From(split_year))?,
        ))
    }

    fn slice_years(&self, lo: usize, hi: usize, filter_name: &str) -> Result<Self> {
        let n_vars = self.n_vars();
        let n_years = hi - lo + 1;
        let mut countries = Vec::new();
        let mut values = Vec::new();
        let mut missing = Vec::new();
        let mut windows = Vec::new();
        for ci in 0..self.n_countries() {
            let w = self.windows[ci];
            let start = w.start.max(lo);
            let end = w.end.min(hi);
            if start > end {
                continue;
            }
            let mut mat = DMatrix::zeros(n_years, n_vars);
            let mut mask = vec![true; n_years * n_vars];
            for t in start..=end {
                for v in 0..n_vars {
                    mat[(t - lo, v)] = self.values[ci][(t, v)];
                    mask[(t - lo) * n_vars + v] = false;
                }
            }
            countries.push(self.countries[ci].clone());
            values.push(mat);
            missing.push(mask);
            windows.push(Window {
                start: start - lo,
                end: end - lo,
            });
        }
        if countries.is_empty() {
            return Err(Error::EmptySubsample(filter_name.to_string()));
        }
        Ok(Self {
            countries,
            variables: self.variables.clone(),
            first_year: self.first_year + lo as i32,
            values,
            missing,
            windows,
        })
    }

    /// Unweighted per-region average of one per-country series. Output is
    /// keyed by region name; a region-year with no observing members is
    /// `None`.
    pub fn regional_average(
        &self,
        series: &[Vec<Option<f64>>],
    ) -> Result<BTreeMap<String, Vec<Option<f64>>>> {
        regional_average(series, &self.region_names())
    }

    fn region_names(&self) -> Vec<String> {
        self.countries.iter().map(|c| c.region.clone()).collect()
    }
}

/// Arithmetic mean across countries within each region, year by year,
/// skipping missing values. Invariant to country ordering within a region.
pub fn regional_average(
    series: &[Vec<Option<f64>>],
    regions: &[String],
) -> Result<BTreeMap<String, Vec<Option<f64>>>> {
    if series.len() != regions.len() {
        return Err(Error::Validation(
            "series and region map must have equal length".into(),
        ));
    }
    let n_years = series.iter().map(Vec::len).max().unwrap_or(0);
    if series.iter().any(|s| s.len() != n_years) {
        return Err(Error::Validation(
            "all series must span the same year range".into(),
        ));
    }
    let mut sums: BTreeMap<String, (Vec<f64>, Vec<usize>)> = BTreeMap::new();
    for (s, region) in series.iter().zip(regions) {
        let entry = sums
            .entry(region.clone())
            .or_insert_with(|| (vec![0.0; n_years], vec![0; n_years]));
        for (t, cell) in s.iter().enumerate() {
            if let Some(x) = cell {
                entry.0[t] += x;
                entry.1[t] += 1;
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(region, (sum, count))| {
            let avg = sum
                .iter()
                .zip(&count)
                .map(|(s, &c)| if c > 0 { Some(s / c as f64) } else { None })
                .collect();
            (region, avg)
        })
        .collect())
}
