//! Synthetic panel generation from known parameters.
//!
//! The simulator is the ground-truth oracle for parameter-recovery and
//! impulse-response tests: it stores the exact shocks it drew, so generated
//! data satisfies the model equations identically given those shocks. Every
//! country runs on its own derived random stream, making output independent
//! of scheduling and reproducible from the seed alone.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::design::ExtraCol;
use crate::error::{Error, Result};
use crate::model::{
    companion_matrix, spectral_radius, ImpactMatrix, MeanCoefficients, ModelSpec, ParameterSet,
    VolatilityParams, VolatilityStates,
};
use crate::panel::{CountryMeta, PanelDataset, Variable};
use crate::rng::{StreamFactory, StreamTag};

const GUARD_OBS: f64 = 1e8;
const GUARD_LOGVAR: f64 = 1e3;

/// Unconditional mean and covariance of the volatility VAR(1) for one
/// country: mean solves (I - persistence) m = effect, covariance solves the
/// discrete Lyapunov equation.
pub fn stationary_state_moments(
    vol: &VolatilityParams,
    country: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let cov = stationary_state_cov(vol)?;
    let n = vol.n_vars();
    let eye = DMatrix::identity(n, n);
    let lhs = &eye - &vol.persistence;
    let mean = lhs
        .lu()
        .solve(&vol.country_effect(country))
        .ok_or_else(|| Error::NonstationaryVolatility {
            radius: vol.spectral_radius(),
        })?;
    Ok((mean, cov))
}

/// Solve S = P S P' + Q for S via the vectorized linear system.
pub fn stationary_state_cov(vol: &VolatilityParams) -> Result<DMatrix<f64>> {
    let radius = vol.spectral_radius();
    if !(radius < 1.0) {
        return Err(Error::NonstationaryVolatility { radius });
    }
    let n = vol.n_vars();
    let p = &vol.persistence;
    let mut kron = DMatrix::zeros(n * n, n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                for l in 0..n {
                    kron[(i * n + k, j * n + l)] = p[(i, j)] * p[(k, l)];
                }
            }
        }
    }
    let lhs = DMatrix::identity(n * n, n * n) - kron;
    let q_vec = DVector::from_fn(n * n, |idx, _| vol.innovation_cov[(idx / n, idx % n)]);
    let s_vec = lhs
        .lu()
        .solve(&q_vec)
        .ok_or_else(|| Error::NonstationaryVolatility { radius })?;
    let s = DMatrix::from_fn(n, n, |i, j| s_vec[i * n + j]);
    Ok(crate::model::symmetrize(&s))
}

/// How the volatility path is initialized.
#[derive(Debug, Clone)]
pub enum StateInit {
    /// Draw from the stationary distribution.
    StationaryDraw,
    /// Start exactly at the stationary mean (no randomness).
    StationaryMean,
    /// Draw from a caller-supplied normal distribution (mean, covariance
    /// Cholesky factor).
    Normal(DVector<f64>, DMatrix<f64>),
}

/// Optional shock injected into one simulated period, used by generalized
/// impulse responses and stability checks.
#[derive(Debug, Clone, Copy)]
pub struct Injection {
    /// Window-local period index receiving the shock.
    pub at: usize,
    pub var: usize,
    /// Added to the volatility innovation (before the Cholesky loading) when
    /// true, to the orthogonalized level shock when false.
    pub to_volatility: bool,
    pub size: f64,
}

/// Dynamics of one simulated unit.
pub struct CountryDynamics<'a> {
    pub intercept: DVector<f64>,
    /// Per-period additive effects (time fixed effects), one row per period.
    pub period_effects: Option<&'a DMatrix<f64>>,
    pub lag_coeffs: &'a [DMatrix<f64>],
    pub vol_in_mean: &'a [DMatrix<f64>],
    pub extra: Option<(&'a [ExtraCol], &'a DMatrix<f64>)>,
    pub impact: &'a ImpactMatrix,
    pub vol_effect: DVector<f64>,
    pub persistence: &'a DMatrix<f64>,
    pub vol_chol: &'a DMatrix<f64>,
}

/// Simulated paths for one unit. Observations satisfy the mean equation
/// exactly given `level_shocks` and `log_vars`; log-variances satisfy the
/// volatility equation exactly given `vol_shocks`.
pub struct CountryPaths {
    pub obs: DMatrix<f64>,
    pub log_vars: DMatrix<f64>,
    pub level_shocks: DMatrix<f64>,
    pub vol_shocks: DMatrix<f64>,
}

impl CountryDynamics<'_> {
    fn n_vars(&self) -> usize {
        self.intercept.len()
    }

    /// Stationary moments of the volatility block of this unit.
    pub fn state_moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = self.n_vars();
        let vol = VolatilityParams::new(
            DMatrix::from_fn(1, n, |_, v| self.vol_effect[v]),
            self.persistence.clone(),
            self.vol_chol * self.vol_chol.transpose(),
        )?;
        stationary_state_moments(&vol, 0)
    }

    /// Fixed point of the deterministic part of the mean equation, with the
    /// volatility terms held at `state_mean`.
    pub fn fixed_point(&self, state_mean: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.n_vars();
        let mut lhs = DMatrix::identity(n, n);
        for b in self.lag_coeffs {
            lhs -= b;
        }
        let mut rhs = self.intercept.clone();
        for g in self.vol_in_mean {
            rhs += g * state_mean;
        }
        lhs.lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Validation("mean equation has no fixed point".into()))
    }
}

/// Simulate one unit for `n_periods` observations. The first `presample`
/// periods hold the deterministic fixed point; the volatility path starts
/// per `init` and runs through `burn_in` discarded transitions first. With
/// `zero_shocks` every innovation is forced to zero (injections still
/// apply).
#[allow(clippy::too_many_arguments)]
pub fn simulate_country(
    dynamics: &CountryDynamics,
    n_periods: usize,
    presample: usize,
    burn_in: usize,
    init: &StateInit,
    zero_shocks: bool,
    inject: Option<&Injection>,
    rng: &mut impl Rng,
) -> Result<CountryPaths> {
    let n = dynamics.n_vars();
    assert!(presample < n_periods);

    let mut draw = |rng: &mut dyn rand::RngCore| -> DVector<f64> {
        if zero_shocks {
            DVector::zeros(n)
        } else {
            DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
        }
    };

    let (init_mean, init_chol) = match init {
        StateInit::Normal(mean, chol) => (mean.clone(), Some(chol.clone())),
        StateInit::StationaryMean => (dynamics.state_moments()?.0, None),
        StateInit::StationaryDraw => {
            let (mean, cov) = dynamics.state_moments()?;
            let chol = cov
                .clone()
                .cholesky()
                .ok_or_else(|| {
                    Error::Validation("stationary state covariance not positive definite".into())
                })?
                .l();
            (mean, Some(chol))
        }
    };
    let mut h = match (&init_chol, zero_shocks) {
        (Some(chol), false) => &init_mean + chol * draw(rng),
        _ => init_mean.clone(),
    };

    let step_vol = |h: &DVector<f64>, eta: &DVector<f64>| {
        &dynamics.vol_effect + dynamics.persistence * h + dynamics.vol_chol * eta
    };

    for step in 0..burn_in {
        let eta = draw(rng);
        h = step_vol(&h, &eta);
        if h.amax() > GUARD_LOGVAR {
            return Err(Error::Divergence {
                block: "volatility".into(),
                country: 0,
                step,
            });
        }
    }

    let mut log_vars = DMatrix::zeros(n_periods, n);
    let mut vol_shocks = DMatrix::zeros(n_periods, n);
    for t in 0..n_periods {
        // period 0 carries no innovation of its own: the initial state was
        // drawn above; only an injection can perturb it
        let mut eta = if t > 0 { draw(rng) } else { DVector::zeros(n) };
        if let Some(inj) = inject {
            if inj.to_volatility && inj.at == t {
                eta[inj.var] += inj.size;
            }
        }
        if t > 0 {
            h = step_vol(&h, &eta);
        } else if eta.amax() != 0.0 {
            h += dynamics.vol_chol * &eta;
        }
        if h.amax() > GUARD_LOGVAR {
            return Err(Error::Divergence {
                block: "volatility".into(),
                country: 0,
                step: t,
            });
        }
        log_vars.row_mut(t).copy_from(&h.transpose());
        vol_shocks.row_mut(t).copy_from(&eta.transpose());
    }

    let a_inv = dynamics.impact.inverse();
    let fp = dynamics.fixed_point(&init_mean)?;
    let mut obs = DMatrix::zeros(n_periods, n);
    let mut level_shocks = DMatrix::zeros(n_periods, n);
    for t in 0..presample {
        obs.row_mut(t).copy_from(&fp.transpose());
    }
    for t in presample..n_periods {
        let mut mu = dynamics.intercept.clone();
        if let Some(effects) = dynamics.period_effects {
            mu += effects.row(t).transpose();
        }
        for (j, b) in dynamics.lag_coeffs.iter().enumerate() {
            mu += b * obs.row(t - j - 1).transpose();
        }
        for (k, g) in dynamics.vol_in_mean.iter().enumerate() {
            mu += g * log_vars.row(t - k).transpose();
        }
        if let Some((cols, coef)) = &dynamics.extra {
            for (e, col) in cols.iter().enumerate() {
                let x = match col {
                    ExtraCol::SquaredVar(v) => obs[(t - 1, *v)],
                    ExtraCol::SquaredVol { var, lag } => log_vars[(t - lag, *var)],
                };
                mu += coef.row(e).transpose() * (x * x);
            }
        }
        let eps = draw(rng);
        let mut e_t = DVector::from_fn(n, |v, _| (0.5 * log_vars[(t, v)]).exp() * eps[v]);
        if let Some(inj) = inject {
            if !inj.to_volatility && inj.at == t {
                e_t[inj.var] += inj.size;
            }
        }
        let z = mu + &a_inv * &e_t;
        if z.amax() > GUARD_OBS {
            return Err(Error::Divergence {
                block: "mean".into(),
                country: 0,
                step: t,
            });
        }
        obs.row_mut(t).copy_from(&z.transpose());
        level_shocks.row_mut(t).copy_from(&e_t.transpose());
    }

    Ok(CountryPaths {
        obs,
        log_vars,
        level_shocks,
        vol_shocks,
    })
}

/// Simulation settings for a synthetic panel.
#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub n_countries: usize,
    pub n_periods: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub first_year: i32,
    /// Force all innovations to zero (deterministic paths).
    pub zero_shocks: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_countries: 2,
            n_periods: 40,
            burn_in: 200,
            seed: 0,
            first_year: 1961,
            zero_shocks: false,
        }
    }
}

/// A simulated panel with its generating parameters and the exact shocks.
/// Replaying the seed reproduces the record bit for bit.
pub struct SimulationRecord {
    pub dataset: PanelDataset,
    pub true_params: ParameterSet,
    pub level_shocks: Vec<DMatrix<f64>>,
    pub vol_shocks: Vec<DMatrix<f64>>,
    pub seed: u64,
}

/// Simulate a balanced panel under `spec` from the given parameter blocks.
/// Requires a stationary volatility process and a stable mean companion;
/// explosive realized paths (possible through strong volatility-in-mean
/// feedback) abort with a divergence error naming the offending block.
pub fn simulate_panel(
    spec: &ModelSpec,
    mean: &MeanCoefficients,
    impact: &ImpactMatrix,
    vol: &VolatilityParams,
    cfg: &SimulationConfig,
) -> Result<SimulationRecord> {
    spec.validate()?;
    let m = cfg.n_countries;
    if vol.n_countries() < m || mean.country_intercepts.nrows() < m {
        return Err(Error::Validation(
            "parameter blocks cover fewer countries than requested".into(),
        ));
    }
    if !vol.is_stationary() {
        return Err(Error::NonstationaryVolatility {
            radius: vol.spectral_radius(),
        });
    }
    let comp_radius = spectral_radius(&companion_matrix(&mean.lag_coeffs));
    if !(comp_radius < 1.0) {
        return Err(Error::Validation(format!(
            "mean-equation companion matrix is explosive (spectral radius {comp_radius:.6})"
        )));
    }
    let presample = spec.usable_offset();
    if cfg.n_periods <= presample + 2 {
        return Err(Error::Validation(format!(
            "n_periods must exceed presample + 2 = {}",
            presample + 2
        )));
    }

    let extra_cols = extra_columns(spec)?;
    let period_effects = if mean.time_effects.nrows() >= cfg.n_periods
        && mean.time_effects.iter().any(|x| *x != 0.0)
    {
        Some(mean.time_effects.rows(0, cfg.n_periods).into_owned())
    } else {
        None
    };

    let factory = StreamFactory::new(cfg.seed);
    let mut obs_all = Vec::with_capacity(m);
    let mut states_all = Vec::with_capacity(m);
    let mut level_all = Vec::with_capacity(m);
    let mut vol_all = Vec::with_capacity(m);
    for ci in 0..m {
        let dynamics = CountryDynamics {
            intercept: mean.country_intercepts.row(ci).transpose(),
            period_effects: period_effects.as_ref(),
            lag_coeffs: &mean.lag_coeffs,
            vol_in_mean: &mean.vol_in_mean,
            extra: mean
                .extra
                .as_ref()
                .map(|coef| (extra_cols.as_slice(), coef)),
            impact,
            vol_effect: vol.country_effect(ci),
            persistence: &vol.persistence,
            vol_chol: &vol.innovation_chol,
        };
        let mut rng = factory.stream(StreamTag::Simulation, 0, ci as u64);
        let paths = simulate_country(
            &dynamics,
            cfg.n_periods,
            presample,
            cfg.burn_in,
            &if cfg.zero_shocks {
                StateInit::StationaryMean
            } else {
                StateInit::StationaryDraw
            },
            cfg.zero_shocks,
            None,
            &mut rng,
        )
        .map_err(|e| match e {
            Error::Divergence { block, step, .. } => Error::Divergence {
                block,
                country: ci,
                step,
            },
            other => other,
        })?;
        obs_all.push(paths.obs);
        states_all.push(paths.log_vars);
        level_all.push(paths.level_shocks);
        vol_all.push(paths.vol_shocks);
    }

    let countries: Vec<CountryMeta> = (0..m)
        .map(|i| CountryMeta::unknown(format!("SIM{i:03}")))
        .collect();
    let variables: Vec<Variable> = spec
        .variables
        .iter()
        .map(|v| Variable {
            name: v.name.clone(),
            unit: match v.kind {
                crate::model::VarKind::Climate => "celsius".into(),
                crate::model::VarKind::Macro => "percent".into(),
            },
        })
        .collect();
    let dataset =
        PanelDataset::from_parts(countries, variables, cfg.first_year, &vec![0; m], obs_all)?;

    let true_params = ParameterSet {
        mean: mean.clone(),
        impact: impact.clone(),
        vol: vol.clone(),
        states: VolatilityStates { paths: states_all },
    };
    Ok(SimulationRecord {
        dataset,
        true_params,
        level_shocks: level_all,
        vol_shocks: vol_all,
        seed: cfg.seed,
    })
}

/// Expanded extra columns for a spec, identical to the estimation frame's
/// expansion.
pub fn extra_columns(spec: &ModelSpec) -> Result<Vec<ExtraCol>> {
    use crate::model::{ExtraRegressor, VarKind};
    let mut cols = Vec::new();
    for e in &spec.extra_regressors {
        match e {
            ExtraRegressor::SquaredTemperature => {
                let v = spec
                    .variables
                    .iter()
                    .position(|v| v.kind == VarKind::Climate)
                    .ok_or_else(|| {
                        Error::Validation("squared_temperature requires a climate variable".into())
                    })?;
                cols.push(ExtraCol::SquaredVar(v));
            }
            ExtraRegressor::SquaredGdp => {
                let v = spec
                    .variables
                    .iter()
                    .position(|v| v.kind == VarKind::Macro)
                    .ok_or_else(|| {
                        Error::Validation("squared_gdp requires a macro variable".into())
                    })?;
                cols.push(ExtraCol::SquaredVar(v));
            }
            ExtraRegressor::SquaredVolatility => {
                for lag in 0..=spec.vol_in_mean_lags {
                    for var in 0..spec.n_vars() {
                        cols.push(ExtraCol::SquaredVol { var, lag });
                    }
                }
            }
        }
    }
    Ok(cols)
}
