//! Estimation frame: dataset views in model order plus the regressor layout
//! of the mean equation.
//!
//! Every consumer of the conditional mean — the GLS coefficient block, the
//! observation likelihood inside the particle filter, residual computation —
//! goes through this module, so the regression design and the likelihood can
//! never drift apart.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{
    gaussian_obs_loglik, ExtraRegressor, MeanCoefficients, ModelSpec, ParameterSet, VarKind,
    VolatilityStates,
};
use crate::panel::PanelDataset;

/// One expanded extra-regressor column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtraCol {
    /// Squared value of a model variable, lagged one year.
    SquaredVar(usize),
    /// Squared log-variance of a model variable at a given lag.
    SquaredVol { var: usize, lag: usize },
}

/// Sentinel region id for plain (non region-by-year) time effects.
const NO_REGION: usize = usize::MAX;

/// Column layout of the mean-equation regression. Coefficients for equation
/// `n` and regressor `r` live at flat index `r * n_vars + n`.
#[derive(Debug, Clone)]
pub struct CoeffLayout {
    pub n_vars: usize,
    pub n_intercepts: usize,
    pub time_cols: Vec<(usize, usize)>, // (region or NO_REGION, global year index)
    time_lookup: HashMap<(usize, usize), usize>,
    pub mean_lags: usize,
    pub vol_lags: usize, // K: volatility lags 0..=K enter
    pub extra_cols: Vec<ExtraCol>,
}

impl CoeffLayout {
    pub fn n_regressors(&self) -> usize {
        self.n_intercepts
            + self.time_cols.len()
            + self.mean_lags * self.n_vars
            + (self.vol_lags + 1) * self.n_vars
            + self.extra_cols.len()
    }

    pub fn n_coeffs(&self) -> usize {
        self.n_regressors() * self.n_vars
    }

    fn time_offset(&self) -> usize {
        self.n_intercepts
    }

    fn lag_offset(&self) -> usize {
        self.time_offset() + self.time_cols.len()
    }

    fn vol_offset(&self) -> usize {
        self.lag_offset() + self.mean_lags * self.n_vars
    }

    fn extra_offset(&self) -> usize {
        self.vol_offset() + (self.vol_lags + 1) * self.n_vars
    }

    /// Human-readable regressor names, used for draw-file headers.
    pub fn regressor_names(&self, frame: &ModelFrame) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_regressors());
        if self.n_intercepts == 1 {
            names.push("intercept".to_string());
        } else {
            for c in frame.country_ids() {
                names.push(format!("c[{c}]"));
            }
        }
        for &(region, year_idx) in &self.time_cols {
            let year = frame.first_year + year_idx as i32;
            if region == NO_REGION {
                names.push(format!("tau[{year}]"));
            } else {
                names.push(format!("tau[{}:{year}]", frame.region_names[region]));
            }
        }
        for j in 1..=self.mean_lags {
            for v in 0..self.n_vars {
                names.push(format!("l{j}[{}]", frame.var_names[v]));
            }
        }
        for k in 0..=self.vol_lags {
            for v in 0..self.n_vars {
                names.push(format!("h{k}[{}]", frame.var_names[v]));
            }
        }
        for col in &self.extra_cols {
            names.push(match col {
                ExtraCol::SquaredVar(v) => format!("sq[{}]", frame.var_names[*v]),
                ExtraCol::SquaredVol { var, lag } => {
                    format!("sqh{lag}[{}]", frame.var_names[*var])
                }
            });
        }
        names
    }
}

/// Per-country data in model order with usable windows and the coefficient
/// layout. Immutable after construction; safe to share across workers.
#[derive(Debug, Clone)]
pub struct ModelFrame {
    pub spec: ModelSpec,
    var_names: Vec<String>,
    country_ids: Vec<String>,
    pub regions: Vec<usize>,
    pub region_names: Vec<String>,
    /// Window-local data, one (window_len x N) matrix per country.
    data: Vec<DMatrix<f64>>,
    /// Global year index of each country's first observation.
    pub window_starts: Vec<usize>,
    pub n_years_global: usize,
    pub first_year: i32,
    pub layout: CoeffLayout,
}

impl ModelFrame {
    /// Resolve a model spec against a dataset. Requires each country window
    /// to hold at least `mean_lags + vol_in_mean_lags + 2` observations.
    pub fn build(ds: &PanelDataset, spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.n_vars();
        let var_cols: Vec<usize> = spec
            .variables
            .iter()
            .map(|v| {
                ds.variable_index(&v.name).ok_or_else(|| {
                    Error::Config(format!("model variable `{}` not in dataset", v.name))
                })
            })
            .collect::<Result<_>>()?;

        let min_window = spec.mean_lags + spec.vol_in_mean_lags + 2;
        let mut data = Vec::with_capacity(ds.n_countries());
        let mut window_starts = Vec::with_capacity(ds.n_countries());
        for ci in 0..ds.n_countries() {
            let w = ds.window(ci);
            if w.len() < min_window {
                return Err(Error::Validation(format!(
                    "country {} has {} observations; need at least {}",
                    ds.countries()[ci].id,
                    w.len(),
                    min_window
                )));
            }
            let mat = DMatrix::from_fn(w.len(), n, |r, v| {
                ds.values(ci)[(w.start + r, var_cols[v])]
            });
            data.push(mat);
            window_starts.push(w.start);
        }

        let mut region_names: Vec<String> = Vec::new();
        let regions: Vec<usize> = ds
            .countries()
            .iter()
            .map(|c| {
                if let Some(i) = region_names.iter().position(|r| *r == c.region) {
                    i
                } else {
                    region_names.push(c.region.clone());
                    region_names.len() - 1
                }
            })
            .collect();

        let layout = Self::build_layout(spec, &data, &window_starts, &regions, ds.n_years())?;
        Ok(Self {
            spec: spec.clone(),
            var_names: spec.variables.iter().map(|v| v.name.clone()).collect(),
            country_ids: ds.countries().iter().map(|c| c.id.clone()).collect(),
            regions,
            region_names,
            data,
            window_starts,
            n_years_global: ds.n_years(),
            first_year: ds.first_year(),
            layout,
        })
    }

    fn build_layout(
        spec: &ModelSpec,
        data: &[DMatrix<f64>],
        window_starts: &[usize],
        regions: &[usize],
        n_years: usize,
    ) -> Result<CoeffLayout> {
        let usable = spec.usable_offset();
        // Years (or region-years) with at least one usable observation, in
        // ascending order; the first of each group is the identification base
        // and gets no column.
        let group_count = if spec.fixed_effects.region_by_year {
            regions.iter().max().map_or(0, |m| m + 1)
        } else {
            1
        };
        let mut seen = vec![vec![false; n_years]; group_count];
        for (ci, mat) in data.iter().enumerate() {
            let g = if spec.fixed_effects.region_by_year {
                regions[ci]
            } else {
                0
            };
            for r in usable..mat.nrows() {
                seen[g][window_starts[ci] + r] = true;
            }
        }

        let mut time_cols = Vec::new();
        if spec.fixed_effects.time || spec.fixed_effects.region_by_year {
            for (g, years) in seen.iter().enumerate() {
                let region = if spec.fixed_effects.region_by_year {
                    g
                } else {
                    NO_REGION
                };
                let mut first = true;
                for (y, present) in years.iter().enumerate() {
                    if *present {
                        if first {
                            first = false; // base year pinned to zero
                        } else {
                            time_cols.push((region, y));
                        }
                    }
                }
            }
        }
        let time_lookup = time_cols
            .iter()
            .enumerate()
            .map(|(i, &key)| (key, i))
            .collect();

        let n = spec.n_vars();
        let mut extra_cols = Vec::new();
        for e in &spec.extra_regressors {
            match e {
                ExtraRegressor::SquaredTemperature => {
                    let v = spec
                        .variables
                        .iter()
                        .position(|v| v.kind == VarKind::Climate)
                        .ok_or_else(|| {
                            Error::Validation(
                                "squared_temperature requires a climate variable".into(),
                            )
                        })?;
                    extra_cols.push(ExtraCol::SquaredVar(v));
                }
                ExtraRegressor::SquaredGdp => {
                    let v = spec
                        .variables
                        .iter()
                        .position(|v| v.kind == VarKind::Macro)
                        .unwrap(); // validated in ModelSpec::validate
                    extra_cols.push(ExtraCol::SquaredVar(v));
                }
                ExtraRegressor::SquaredVolatility => {
                    for lag in 0..=spec.vol_in_mean_lags {
                        for var in 0..n {
                            extra_cols.push(ExtraCol::SquaredVol { var, lag });
                        }
                    }
                }
            }
        }

        Ok(CoeffLayout {
            n_vars: n,
            n_intercepts: if spec.fixed_effects.country {
                data.len()
            } else {
                1
            },
            time_cols,
            time_lookup,
            mean_lags: spec.mean_lags,
            vol_lags: spec.vol_in_mean_lags,
            extra_cols,
        })
    }

    pub fn n_countries(&self) -> usize {
        self.data.len()
    }

    pub fn n_vars(&self) -> usize {
        self.layout.n_vars
    }

    pub fn country_ids(&self) -> &[String] {
        &self.country_ids
    }

    pub fn var_names(&self) -> &[String] {
        &self.var_names
    }

    pub fn window_len(&self, country: usize) -> usize {
        self.data[country].nrows()
    }

    pub fn window_lens(&self) -> Vec<usize> {
        self.data.iter().map(|d| d.nrows()).collect()
    }

    pub fn usable_offset(&self) -> usize {
        self.spec.usable_offset()
    }

    /// Total usable observations across countries.
    pub fn n_usable_obs(&self) -> usize {
        let u = self.usable_offset();
        self.data.iter().map(|d| d.nrows() - u).sum()
    }

    /// Observation vector at a window-local row.
    pub fn obs(&self, country: usize, t: usize) -> DVector<f64> {
        self.data[country].row(t).transpose()
    }

    pub fn data(&self, country: usize) -> &DMatrix<f64> {
        &self.data[country]
    }

    pub fn global_year_index(&self, country: usize, t: usize) -> usize {
        self.window_starts[country] + t
    }

    /// Sparse regressor row for a usable observation, as (index, value)
    /// pairs. Panics if `t` lacks the required lags.
    pub fn regressors(
        &self,
        country: usize,
        t: usize,
        states: &VolatilityStates,
    ) -> Vec<(usize, f64)> {
        assert!(t >= self.usable_offset(), "observation lacks lags");
        let lay = &self.layout;
        let n = lay.n_vars;
        let mut row = Vec::with_capacity(
            2 + lay.mean_lags * n + (lay.vol_lags + 1) * n + lay.extra_cols.len(),
        );
        if lay.n_intercepts == 1 {
            row.push((0, 1.0));
        } else {
            row.push((country, 1.0));
        }
        let year = self.global_year_index(country, t);
        let group = if self.spec.fixed_effects.region_by_year {
            self.regions[country]
        } else {
            NO_REGION
        };
        if let Some(&col) = lay.time_lookup.get(&(group, year)) {
            row.push((lay.time_offset() + col, 1.0));
        }
        let mat = &self.data[country];
        for j in 1..=lay.mean_lags {
            for v in 0..n {
                row.push((lay.lag_offset() + (j - 1) * n + v, mat[(t - j, v)]));
            }
        }
        let h = &states.paths[country];
        for k in 0..=lay.vol_lags {
            for v in 0..n {
                row.push((lay.vol_offset() + k * n + v, h[(t - k, v)]));
            }
        }
        for (e, col) in lay.extra_cols.iter().enumerate() {
            let value = match col {
                ExtraCol::SquaredVar(v) => {
                    let x = mat[(t - 1, *v)];
                    x * x
                }
                ExtraCol::SquaredVol { var, lag } => {
                    let x = h[(t - lag, *var)];
                    x * x
                }
            };
            row.push((lay.extra_offset() + e, value));
        }
        row
    }

    /// Conditional mean of the observation at (country, t) under the given
    /// coefficients and states.
    pub fn conditional_mean(
        &self,
        country: usize,
        t: usize,
        mean: &MeanCoefficients,
        states: &VolatilityStates,
    ) -> DVector<f64> {
        let h = &states.paths[country];
        let stack = |k: usize, v: usize| h[(t - k, v)];
        self.base_mean_at(country, t, mean) + self.vol_mean_adjust(mean, &stack)
    }

    /// Mean contribution of everything except the volatility terms: country
    /// and time effects, data lags, and squared-data extras.
    fn base_mean_at(&self, country: usize, t: usize, mean: &MeanCoefficients) -> DVector<f64> {
        let mat = &self.data[country];
        let mut mu = if self.layout.n_intercepts == 1 {
            mean.country_intercepts.row(0).transpose()
        } else {
            mean.country_intercepts.row(country).transpose()
        };
        let year = self.global_year_index(country, t);
        if self.spec.fixed_effects.region_by_year {
            if let Some(rye) = &mean.region_year_effects {
                mu += rye
                    .row(self.regions[country] * self.n_years_global + year)
                    .transpose();
            }
        } else if self.spec.fixed_effects.time {
            mu += mean.time_effects.row(year).transpose();
        }
        for (j, b) in mean.lag_coeffs.iter().enumerate() {
            mu += b * mat.row(t - j - 1).transpose();
        }
        if let Some(extra) = &mean.extra {
            for (e, col) in self.layout.extra_cols.iter().enumerate() {
                if let ExtraCol::SquaredVar(v) = col {
                    let x = mat[(t - 1, *v)];
                    mu += extra.row(e).transpose() * (x * x);
                }
            }
        }
        mu
    }

    /// Precompute base means for all usable rows of one country (used by the
    /// particle filter, where only the volatility terms vary per particle).
    pub fn base_means(&self, country: usize, mean: &MeanCoefficients) -> DMatrix<f64> {
        let len = self.window_len(country);
        let n = self.n_vars();
        let u = self.usable_offset();
        let mut out = DMatrix::zeros(len, n);
        for t in u..len {
            out.row_mut(t)
                .copy_from(&self.base_mean_at(country, t, mean).transpose());
        }
        out
    }

    /// Volatility-term contribution to the mean; `h_stack(k, v)` returns the
    /// log-variance of variable v at lag k (k = 0..=K).
    pub fn vol_mean_adjust(
        &self,
        mean: &MeanCoefficients,
        h_stack: &dyn Fn(usize, usize) -> f64,
    ) -> DVector<f64> {
        let n = self.n_vars();
        let mut adj = DVector::zeros(n);
        for (k, g) in mean.vol_in_mean.iter().enumerate() {
            for row in 0..n {
                let mut s = 0.0;
                for v in 0..n {
                    s += g[(row, v)] * h_stack(k, v);
                }
                adj[row] += s;
            }
        }
        if let Some(extra) = &mean.extra {
            for (e, col) in self.layout.extra_cols.iter().enumerate() {
                if let ExtraCol::SquaredVol { var, lag } = col {
                    let x = h_stack(*lag, *var);
                    for row in 0..n {
                        adj[row] += extra[(e, row)] * x * x;
                    }
                }
            }
        }
        adj
    }

    /// Log-likelihood of the observation at (country, t) under a full
    /// parameter set. Errors if t lacks the required lags.
    pub fn observation_loglik(
        &self,
        country: usize,
        t: usize,
        params: &ParameterSet,
    ) -> Result<f64> {
        if t < self.usable_offset() {
            return Err(Error::InsufficientLags {
                time: t,
                usable_start: self.usable_offset(),
            });
        }
        let z = self.obs(country, t);
        let mu = self.conditional_mean(country, t, &params.mean, &params.states);
        let h_t = params.states.at(country, t);
        Ok(gaussian_obs_loglik(&z, &mu, &params.impact, &h_t))
    }

    /// Residuals of the mean equation for one country over its usable rows
    /// (rows before the usable offset are zero).
    pub fn residuals(
        &self,
        country: usize,
        mean: &MeanCoefficients,
        states: &VolatilityStates,
    ) -> DMatrix<f64> {
        let len = self.window_len(country);
        let n = self.n_vars();
        let mut out = DMatrix::zeros(len, n);
        for t in self.usable_offset()..len {
            let resid = self.obs(country, t) - self.conditional_mean(country, t, mean, states);
            out.row_mut(t).copy_from(&resid.transpose());
        }
        out
    }

    /// Flatten structured coefficients into the regression vector (regressor
    /// major, equation minor).
    pub fn flatten_mean(&self, mean: &MeanCoefficients) -> DVector<f64> {
        let lay = &self.layout;
        let n = lay.n_vars;
        let mut beta = DVector::zeros(lay.n_coeffs());
        {
            let mut set = |r: usize, eq: usize, v: f64| beta[r * n + eq] = v;
            for c in 0..lay.n_intercepts {
                for eq in 0..n {
                    set(c, eq, mean.country_intercepts[(c, eq)]);
                }
            }
            for (col, &(region, year)) in lay.time_cols.iter().enumerate() {
                for eq in 0..n {
                    let v = if region == NO_REGION {
                        mean.time_effects[(year, eq)]
                    } else {
                        mean.region_year_effects
                            .as_ref()
                            .map_or(0.0, |rye| rye[(region * self.n_years_global + year, eq)])
                    };
                    set(lay.time_offset() + col, eq, v);
                }
            }
            for (j, b) in mean.lag_coeffs.iter().enumerate() {
                for eq in 0..n {
                    for v in 0..n {
                        set(lay.lag_offset() + j * n + v, eq, b[(eq, v)]);
                    }
                }
            }
            for (k, g) in mean.vol_in_mean.iter().enumerate() {
                for eq in 0..n {
                    for v in 0..n {
                        set(lay.vol_offset() + k * n + v, eq, g[(eq, v)]);
                    }
                }
            }
            if let Some(extra) = &mean.extra {
                for e in 0..lay.extra_cols.len() {
                    for eq in 0..n {
                        set(lay.extra_offset() + e, eq, extra[(e, eq)]);
                    }
                }
            }
        }
        beta
    }

    /// Inverse of `flatten_mean`.
    pub fn unflatten_mean(&self, beta: &DVector<f64>) -> MeanCoefficients {
        let lay = &self.layout;
        let n = lay.n_vars;
        assert_eq!(beta.len(), lay.n_coeffs());
        let get = |r: usize, eq: usize| beta[r * n + eq];
        let n_regions = self.region_names.len();
        let mut mean = MeanCoefficients::zeros(
            self.n_countries(),
            self.n_years_global,
            n_regions,
            &self.spec,
            lay.extra_cols.len(),
        );
        if lay.n_intercepts == 1 {
            // single shared intercept broadcast into every row so per-country
            // reads stay uniform
            for c in 0..self.n_countries() {
                for eq in 0..n {
                    mean.country_intercepts[(c, eq)] = get(0, eq);
                }
            }
        } else {
            for c in 0..lay.n_intercepts {
                for eq in 0..n {
                    mean.country_intercepts[(c, eq)] = get(c, eq);
                }
            }
        }
        for (col, &(region, year)) in lay.time_cols.iter().enumerate() {
            for eq in 0..n {
                let v = get(lay.time_offset() + col, eq);
                if region == NO_REGION {
                    mean.time_effects[(year, eq)] = v;
                } else if let Some(rye) = &mut mean.region_year_effects {
                    rye[(region * self.n_years_global + year, eq)] = v;
                }
            }
        }
        for (j, b) in mean.lag_coeffs.iter_mut().enumerate() {
            for eq in 0..n {
                for v in 0..n {
                    b[(eq, v)] = get(lay.lag_offset() + j * n + v, eq);
                }
            }
        }
        for (k, g) in mean.vol_in_mean.iter_mut().enumerate() {
            for eq in 0..n {
                for v in 0..n {
                    g[(eq, v)] = get(lay.vol_offset() + k * n + v, eq);
                }
            }
        }
        if let Some(extra) = &mut mean.extra {
            for e in 0..lay.extra_cols.len() {
                for eq in 0..n {
                    extra[(e, eq)] = get(lay.extra_offset() + e, eq);
                }
            }
        }
        mean
    }
}
