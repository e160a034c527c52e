//! Composite training objective: masked data loss plus knowledge-guided soft
//! constraints (flux non-negativity, Ra <= same-day GPP, Rh rising with
//! temperature) and L2 regularization on weights.
//!
//! Penalties operate on predictions after denormalization to physical units,
//! so the constraint semantics are unit-true regardless of target scaling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ModelParams, PredictionGrad};
use crate::pipeline::preprocess::{NormStats, PreparedSample, TEMP_FEATURE_INDEX};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub flux_weight: f64,
    pub yield_weight: f64,
    pub lambda_nonneg: f64,
    pub lambda_budget: f64,
    pub lambda_response: f64,
    pub lambda_l2: f64,
    /// Temperature perturbation (degrees C) for the response probe.
    pub response_delta_t: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            flux_weight: 1.0,
            yield_weight: 1.0,
            lambda_nonneg: 0.1,
            lambda_budget: 0.1,
            lambda_response: 0.1,
            lambda_l2: 1e-5,
            response_delta_t: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            self.flux_weight,
            self.yield_weight,
            self.lambda_nonneg,
            self.lambda_budget,
            self.lambda_response,
            self.lambda_l2,
        ];
        if nonneg.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.flux_weight == 0.0 && self.yield_weight == 0.0 {
            return Err(Error::Config(
                "at least one of flux_weight/yield_weight must be positive".into(),
            ));
        }
        if self.response_delta_t <= 0.0 {
            return Err(Error::Config("response_delta_t must be positive".into()));
        }
        Ok(())
    }
}

/// Per-component values of one loss evaluation. `total` is composed from the
/// components in one fixed summation order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse_flux: f64,
    pub mse_yield: f64,
    pub pen_nonneg: f64,
    pub pen_budget: f64,
    pub pen_response: f64,
    pub reg_l2: f64,
    pub n_observed_flux_days: usize,
}

impl LossBreakdown {
    pub fn compose_total(&self, w: &LossWeights) -> f64 {
        w.flux_weight * self.mse_flux
            + w.yield_weight * self.mse_yield
            + w.lambda_nonneg * self.pen_nonneg
            + w.lambda_budget * self.pen_budget
            + w.lambda_response * self.pen_response
            + w.lambda_l2 * self.reg_l2
    }
}

/// Mean squared error over observed elements; gradient is
/// 2(pred - target)/n_observed on observed elements, 0 elsewhere.
/// With nothing observed the value is 0 by convention (n_observed = 0 flags it).
pub fn masked_mse(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<(f64, Vec<f64>, usize)> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::Shape(format!(
            "masked_mse: lengths {} / {} / {}",
            pred.len(),
            target.len(),
            mask.len()
        )));
    }
    let n_obs = mask.iter().filter(|&&m| m).count();
    let mut grad = vec![0.0; pred.len()];
    if n_obs == 0 {
        return Ok((0.0, grad, 0));
    }
    let mut acc = 0.0;
    for i in 0..pred.len() {
        if mask[i] {
            let d = pred[i] - target[i];
            acc += d * d;
            grad[i] = 2.0 * d / n_obs as f64;
        }
    }
    Ok((acc / n_obs as f64, grad, n_obs))
}

/// Mean over all entries of max(0, -p)^2, with subgradient -2 max(0,-p)/n.
pub fn penalty_nonneg(pred: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len().max(1) as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (g, &p) in grad.iter_mut().zip(pred) {
        let v = (-p).max(0.0);
        value += v * v;
        *g = -2.0 * v / n;
    }
    (value / n, grad)
}

/// Mean over days of max(0, ra - gpp)^2: autotrophic respiration cannot
/// exceed same-day assimilation.
pub fn penalty_budget(ra: &[f64], gpp: &[f64]) -> Result<(f64, Vec<f64>)> {
    if ra.len() != gpp.len() {
        return Err(Error::Shape(format!(
            "penalty_budget: {} predictions vs {} gpp days",
            ra.len(),
            gpp.len()
        )));
    }
    let n = ra.len().max(1) as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; ra.len()];
    for i in 0..ra.len() {
        let v = (ra[i] - gpp[i]).max(0.0);
        value += v * v;
        grad[i] = 2.0 * v / n;
    }
    Ok((value / n, grad))
}

/// Probe the Rh-temperature response direction: run the model on the sample
/// and on a copy with air temperature raised by `delta_t` (physical degrees,
/// divided by the training temperature std before entering the model), and
/// penalize days where Rh decreases. Returns the penalty and its gradient
/// with respect to the parameters.
pub fn penalty_response(
    sample: &PreparedSample,
    params: &ModelParams,
    norm: &NormStats,
    delta_t: f64,
) -> Result<(f64, ModelParams)> {
    if delta_t <= 0.0 {
        return Err(Error::Config("response_delta_t must be positive".into()));
    }
    let (value, grads, _, _) = response_parts(sample, params, norm, delta_t)?;
    Ok((value, grads))
}

/// Internals shared with `total_loss`: also returns the upstream gradient on
/// the unperturbed pass so the caller can fold it into its own backward call.
fn response_parts(
    sample: &PreparedSample,
    params: &ModelParams,
    norm: &NormStats,
    delta_t: f64,
) -> Result<(f64, ModelParams, Vec<f64>, usize)> {
    if norm.feature_names.get(TEMP_FEATURE_INDEX).map(String::as_str) != Some("t_air_c") {
        return Err(Error::Config(
            "temperature feature not found at the expected layout position".into(),
        ));
    }
    let t_len = sample.features.len();
    let delta_norm = delta_t / norm.feature_std[TEMP_FEATURE_INDEX];
    let warmed: Vec<crate::ndmath::Vector> = sample
        .features
        .iter()
        .map(|f| {
            let mut v = f.as_slice().to_vec();
            v[TEMP_FEATURE_INDEX] += delta_norm;
            crate::ndmath::Vector::from_raw(v)
        })
        .collect();

    let (pred_base, cache_base) = model::forward(&sample.features, params)?;
    let (pred_warm, cache_warm) = model::forward(&warmed, params)?;

    let mut value = 0.0;
    let mut d_rh_base = vec![0.0; t_len];
    let mut d_rh_warm = vec![0.0; t_len];
    for t in 0..t_len {
        let gap = (norm.denorm_rh(pred_base.rh_hat[t]) - norm.denorm_rh(pred_warm.rh_hat[t])).max(0.0);
        value += gap * gap;
        let d_gap = 2.0 * gap / t_len as f64;
        // Chain through denormalization: d(phys)/d(norm) = rh_std.
        d_rh_base[t] = d_gap * norm.rh_std;
        d_rh_warm[t] = -d_gap * norm.rh_std;
    }
    value /= t_len as f64;

    let mut grads = model::backward(
        &cache_base,
        params,
        &PredictionGrad {
            d_ra: vec![0.0; t_len],
            d_rh: d_rh_base.clone(),
            d_yield: 0.0,
        },
    )?;
    let g_warm = model::backward(
        &cache_warm,
        params,
        &PredictionGrad {
            d_ra: vec![0.0; t_len],
            d_rh: d_rh_warm,
            d_yield: 0.0,
        },
    )?;
    grads.add_scaled(&g_warm, 1.0);
    Ok((value, grads, d_rh_base, t_len))
}

/// Full composite objective over a batch, with exact analytic gradients.
/// Data terms and penalties are averaged over the batch; reg_l2 is the sum of
/// squared weights (biases excluded) counted once.
pub fn total_loss(
    params: &ModelParams,
    batch: &[&PreparedSample],
    weights: &LossWeights,
    norm: &NormStats,
) -> Result<(LossBreakdown, ModelParams)> {
    weights.validate()?;
    if batch.is_empty() {
        return Err(Error::Config("total_loss over an empty batch".into()));
    }
    let b = batch.len() as f64;
    let mut grads = params.zeros_like();
    let mut mse_flux = 0.0;
    let mut mse_yield = 0.0;
    let mut pen_nonneg = 0.0;
    let mut pen_budget = 0.0;
    let mut pen_response = 0.0;
    let mut n_observed = 0usize;

    for sample in batch {
        let t_len = sample.features.len();
        let (pred, cache) = model::forward(&sample.features, params)?;
        let mut upstream = PredictionGrad::zeros(t_len);

        // Data loss on the normalized scale, pooled over Ra and Rh entries.
        let mut both_pred = pred.ra_hat.clone();
        both_pred.extend_from_slice(&pred.rh_hat);
        let mut both_target = sample.ra_norm.clone();
        both_target.extend_from_slice(&sample.rh_norm);
        let mut both_mask = sample.mask.clone();
        both_mask.extend_from_slice(&sample.mask);
        let (flux_val, flux_grad, n_obs_elems) = masked_mse(&both_pred, &both_target, &both_mask)?;
        mse_flux += flux_val;
        n_observed += n_obs_elems / 2;
        if weights.flux_weight > 0.0 {
            for t in 0..t_len {
                upstream.d_ra[t] += weights.flux_weight * flux_grad[t];
                upstream.d_rh[t] += weights.flux_weight * flux_grad[t_len + t];
            }
        }

        if sample.yield_observed {
            let d = pred.yield_hat - sample.yield_norm;
            mse_yield += d * d;
            upstream.d_yield += weights.yield_weight * 2.0 * d;
        }

        // Physical-unit predictions for the knowledge penalties.
        let ra_phys: Vec<f64> = pred.ra_hat.iter().map(|&z| norm.denorm_ra(z)).collect();
        let rh_phys: Vec<f64> = pred.rh_hat.iter().map(|&z| norm.denorm_rh(z)).collect();

        if weights.lambda_nonneg > 0.0 {
            let mut all_phys = ra_phys.clone();
            all_phys.extend_from_slice(&rh_phys);
            let (v, g) = penalty_nonneg(&all_phys);
            pen_nonneg += v;
            for t in 0..t_len {
                upstream.d_ra[t] += weights.lambda_nonneg * g[t] * norm.ra_std;
                upstream.d_rh[t] += weights.lambda_nonneg * g[t_len + t] * norm.rh_std;
            }
        }

        if weights.lambda_budget > 0.0 {
            let (v, g) = penalty_budget(&ra_phys, &sample.gpp_phys)?;
            pen_budget += v;
            for t in 0..t_len {
                upstream.d_ra[t] += weights.lambda_budget * g[t] * norm.ra_std;
            }
        }

        if weights.lambda_response > 0.0 {
            let (v, mut g_resp, _, _) =
                response_parts(sample, params, norm, weights.response_delta_t)?;
            pen_response += v;
            g_resp.scale(weights.lambda_response);
            grads.add_scaled(&g_resp, 1.0);
        }

        let g_sample = model::backward(&cache, params, &upstream)?;
        grads.add_scaled(&g_sample, 1.0);
    }

    grads.scale(1.0 / b);
    mse_flux /= b;
    mse_yield /= b;
    pen_nonneg /= b;
    pen_budget /= b;
    pen_response /= b;

    let reg_l2 = params.l2_weights();
    if weights.lambda_l2 > 0.0 {
        let pflat = params.flatten();
        let kinds = params.block_kinds_flat();
        let mut gflat = grads.flatten();
        for i in 0..gflat.len() {
            if !kinds[i].is_bias {
                gflat[i] += 2.0 * weights.lambda_l2 * pflat[i];
            }
        }
        grads.set_from_flat(&gflat)?;
    }

    let mut breakdown = LossBreakdown {
        total: 0.0,
        mse_flux,
        mse_yield,
        pen_nonneg,
        pen_budget,
        pen_response,
        reg_l2,
        n_observed_flux_days: n_observed,
    };
    breakdown.total = breakdown.compose_total(weights);
    Ok((breakdown, grads))
}
