//! Brute-force oracle for the bundled toy-model fixtures.
//!
//! Every decoding step of the cobsat-mini protocol is recomputed here by
//! direct arithmetic on the fixture's mixture definition. Nothing below
//! touches the distribution kernel, the rule matcher, or the decoding loop
//! it cross-checks; only the task-file loader is shared, as plumbing.

use qcd_core::evalkit::TaskInstance;

pub const ATTRS: [&str; 5] = ["red", "green", "purple", "wooden", "glass"];

/// The fixture's knobs, copied by hand from `fixtures/apple-task*.tablelm`.
#[derive(Debug, Clone, Copy)]
pub struct FixtureParams {
    pub prior_bias: f64,
    pub compliance_gain: f64,
    pub temperature: f64,
}

impl FixtureParams {
    pub fn plain() -> Self {
        Self { prior_bias: 0.7, compliance_gain: 0.0, temperature: 0.7 }
    }

    pub fn hint_sensitive() -> Self {
        Self { prior_bias: 0.7, compliance_gain: 1.0, temperature: 0.7 }
    }
}

fn prior(attr: &str) -> f64 {
    match attr {
        "red" => 0.85,
        "green" => 0.09,
        "purple" => 0.03,
        "wooden" => 0.02,
        "glass" => 0.01,
        other => panic!("not a fixture attribute: {other}"),
    }
}

fn normalize(values: &mut [f64]) {
    let sum: f64 = values.iter().sum();
    for v in values.iter_mut() {
        *v /= sum;
    }
}

fn pow_temperature(values: &mut [f64], t: f64) {
    for v in values.iter_mut() {
        *v = v.powf(1.0 / t);
    }
    normalize(values);
}

/// Full-input attribute-step distribution: the query point mass mixed
/// toward the prior, optionally compliance-boosted under the hint.
pub fn attribute_step_full(query: &str, hint: bool, params: FixtureParams) -> Vec<f64> {
    let b = params.prior_bias;
    let mut dist: Vec<f64> = ATTRS
        .iter()
        .map(|a| {
            let point = if *a == query { 1.0 } else { 0.0 };
            (1.0 - b) * point + b * prior(a)
        })
        .collect();
    if hint && params.compliance_gain > 0.0 {
        let boost = params.compliance_gain.exp();
        for (a, v) in ATTRS.iter().zip(dist.iter_mut()) {
            if *a == query {
                *v *= boost;
            }
        }
        normalize(&mut dist);
    }
    pow_temperature(&mut dist, params.temperature);
    dist
}

/// Query-omitted attribute-step distribution: the prior alone. The hint
/// never reaches it because the query region is gone.
pub fn attribute_step_sub(params: FixtureParams) -> Vec<f64> {
    let mut dist: Vec<f64> = ATTRS.iter().map(|a| prior(a)).collect();
    pow_temperature(&mut dist, params.temperature);
    dist
}

/// Post-contrast attribute distribution for one query.
pub fn attribute_step_combined(
    query: &str,
    alpha: f64,
    hint: bool,
    params: FixtureParams,
) -> Vec<f64> {
    let full = attribute_step_full(query, hint, params);
    let sub = attribute_step_sub(params);
    let logits: Vec<f64> = full
        .iter()
        .zip(&sub)
        .map(|(&f, &s)| (1.0 + alpha) * f.ln() - alpha * s.ln())
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    normalize(&mut out);
    out
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    Base,
    Qcd,
}

/// The attribute the greedy loop picks at step one. The following steps are
/// point masses by construction (object from the image-ref rule, then the
/// end marker), so this decides the whole answer.
pub fn predicted_attribute(
    query: &str,
    mode: OracleMode,
    alpha: f64,
    hint: bool,
    params: FixtureParams,
) -> &'static str {
    let dist = match mode {
        OracleMode::Base => attribute_step_full(query, hint, params),
        OracleMode::Qcd => attribute_step_combined(query, alpha, hint, params),
    };
    ATTRS[argmax(&dist)]
}

/// Fraction of tasks whose greedy answer matches both truth dimensions.
pub fn accuracy(
    tasks: &[TaskInstance],
    mode: OracleMode,
    alpha: f64,
    hint: bool,
    params: FixtureParams,
) -> f64 {
    let correct = tasks
        .iter()
        .filter(|t| {
            let attr = predicted_attribute(&t.query, mode, alpha, hint, params);
            // The object step is a point mass on the context object, which
            // equals the truth object in this protocol.
            attr == t.truth_attribute
        })
        .count();
    correct as f64 / tasks.len() as f64
}
