//! Central finite-difference verification of the analytic gradients.

use rand::seq::index;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hyper::HyperParams;
use crate::model::{self, Grads, ParamView, Params, Triple};
use crate::rng;
use crate::ItemId;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_THRESHOLD: f64 = 1e-4;
/// Hinge arguments closer than this to zero are treated as sitting on the kink.
pub const KINK_TOLERANCE: f64 = 1e-7;
/// Floor on the relative-error denominator so near-zero gradients are judged
/// on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-3;
/// Transform coordinates checked per instance before subsampling kicks in.
const MAX_TRANSFORM_COORDS: usize = 512;
const INSTANCE_ITEMS: usize = 8;
const MAX_SUPPORT_PAIRS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Coordinate {
    Embedding { item: u32, col: usize },
    Transform { row: usize, col: usize },
    Bias { row: usize },
}

impl std::fmt::Display for Coordinate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Coordinate::Embedding { item, col } => write!(f, "E[{item}][{col}]"),
            Coordinate::Transform { row, col } => write!(f, "W[{row}][{col}]"),
            Coordinate::Bias { row } => write!(f, "b[{row}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mismatch {
    pub trial: usize,
    pub coordinate: Coordinate,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub trials: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub worst: Option<Mismatch>,
    /// Coordinates above the threshold (first 16).
    pub failures: Vec<Mismatch>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn empty(threshold: f64) -> Self {
        GradCheckReport {
            trials: 0,
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            threshold,
            worst: None,
            failures: Vec::new(),
            passed: true,
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.trials += other.trials;
        self.checked += other.checked;
        self.skipped += other.skipped;
        if let Some(w) = other.worst {
            if self.worst.is_none() || other.max_rel_error > self.max_rel_error {
                self.max_rel_error = other.max_rel_error;
                self.worst = Some(w);
            }
        }
        for f in other.failures {
            if self.failures.len() < 16 {
                self.failures.push(f);
            }
        }
        self.passed &= other.passed;
    }

    /// One-line summary.
    pub fn summary(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        let mut line = format!(
            "checkgrad {verdict}: trials={} checked={} skipped={} max_rel_error={:.3e} threshold={:.0e}",
            self.trials, self.checked, self.skipped, self.max_rel_error, self.threshold
        );
        if let Some(f) = self.failures.first() {
            line.push_str(&format!(
                " offending={} (trial {}, analytic={:.6e}, numeric={:.6e})",
                f.coordinate, f.trial, f.analytic, f.numeric
            ));
        }
        line
    }
}

/// A randomly generated loss instance.
#[derive(Debug, Clone)]
pub struct Instance {
    pub params: Params,
    pub margin: f64,
    pub triples: Vec<Triple>,
}

/// Random parameters plus 1..=`max_pairs` support triples whose negatives
/// avoid every support item.
pub fn random_instance<R: Rng + ?Sized>(
    rng: &mut R,
    dim: usize,
    max_pairs: usize,
    margin: f64,
) -> Result<Instance> {
    let mut params = Params::init(INSTANCE_ITEMS, dim, rng)?;
    for b in params.bias_mut() {
        *b = rng.random_range(-1.0..1.0);
    }
    let n_pairs = rng.random_range(1..=max_pairs.max(1));
    // a short chronological sequence of interacted items
    let seq: Vec<ItemId> = (0..=n_pairs)
        .map(|_| ItemId(rng.random_range(0..4u32)))
        .collect();
    let triples = seq
        .windows(2)
        .map(|w| {
            let negative = ItemId(rng.random_range(4..INSTANCE_ITEMS as u32));
            Triple::new(w[0], w[1], negative)
        })
        .collect();
    Ok(Instance {
        params,
        margin,
        triples,
    })
}

/// Loss plus every hinge argument, from the forward ops only.
fn forward(params: &Params, margin: f64, triples: &[Triple]) -> Result<(f64, Vec<f64>)> {
    let pairs: Vec<_> = triples.iter().map(Triple::pair).collect();
    let tr = model::support_rep(params, &pairs)?;
    let loss = model::margin_loss(params, margin, &tr, triples)?;
    let args = triples
        .iter()
        .map(|t| {
            Ok(margin + model::score(params, &tr, t.head, t.tail)?
                - model::score(params, &tr, t.head, t.negative)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((loss, args))
}

fn active(args: &[f64]) -> Vec<bool> {
    args.iter().map(|&a| a > 0.0).collect()
}

fn coordinate_slot(params: &mut Params, c: Coordinate) -> &mut f64 {
    let dim = params.dim();
    match c {
        Coordinate::Embedding { item, col } => {
            &mut params.embeddings_mut()[item as usize * dim + col]
        }
        Coordinate::Transform { row, col } => &mut params.transform_mut()[row * 2 * dim + col],
        Coordinate::Bias { row } => &mut params.bias_mut()[row],
    }
}

fn analytic_value(grads: &Grads, c: Coordinate) -> f64 {
    let dim = grads.dim;
    match c {
        Coordinate::Embedding { item, col } => grads
            .d_embeddings
            .get(&ItemId(item))
            .map_or(0.0, |row| row[col]),
        Coordinate::Transform { row, col } => grads.d_transform[row * 2 * dim + col],
        Coordinate::Bias { row } => grads.d_bias[row],
    }
}

fn coordinates<R: Rng + ?Sized>(params: &Params, rng: &mut R) -> Vec<Coordinate> {
    let dim = params.dim();
    let mut coords = Vec::new();
    for item in 0..params.n_items() as u32 {
        for col in 0..dim {
            coords.push(Coordinate::Embedding { item, col });
        }
    }
    let n_transform = 2 * dim * dim;
    let transform_idx: Vec<usize> = if n_transform <= MAX_TRANSFORM_COORDS {
        (0..n_transform).collect()
    } else {
        let mut idx = index::sample(rng, n_transform, MAX_TRANSFORM_COORDS).into_vec();
        idx.sort_unstable();
        idx
    };
    for i in transform_idx {
        coords.push(Coordinate::Transform {
            row: i / (2 * dim),
            col: i % (2 * dim),
        });
    }
    for row in 0..dim {
        coords.push(Coordinate::Bias { row });
    }
    coords
}

/// Compare a supplied analytic gradient against central differences.
///
/// Coordinates whose finite-difference stencil crosses a hinge kink are
/// skipped, as are all coordinates of an instance that sits on a kink.
pub fn compare_gradient(
    instance: &Instance,
    analytic: &Grads,
    step: f64,
    threshold: f64,
    trial: usize,
    coords: &[Coordinate],
) -> Result<GradCheckReport> {
    let Instance {
        params,
        margin,
        triples,
    } = instance;
    let (_, base_args) = forward(params, *margin, triples)?;
    let mut report = GradCheckReport::empty(threshold);
    report.trials = 1;
    if base_args.iter().any(|a| a.abs() < KINK_TOLERANCE) {
        report.skipped = coords.len();
        return Ok(report);
    }
    let base_active = active(&base_args);
    let mut probe = params.clone();
    for &c in coords {
        let orig = *coordinate_slot(&mut probe, c);
        *coordinate_slot(&mut probe, c) = orig + step;
        let (plus, plus_args) = forward(&probe, *margin, triples)?;
        *coordinate_slot(&mut probe, c) = orig - step;
        let (minus, minus_args) = forward(&probe, *margin, triples)?;
        *coordinate_slot(&mut probe, c) = orig;

        if active(&plus_args) != base_active || active(&minus_args) != base_active {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic_value(analytic, c);
        let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        report.checked += 1;
        let mismatch = Mismatch {
            trial,
            coordinate: c,
            analytic: a,
            numeric,
            rel_error,
        };
        if report.worst.is_none() || rel_error > report.max_rel_error {
            report.max_rel_error = rel_error;
            report.worst = Some(mismatch.clone());
        }
        if rel_error.is_nan() || rel_error >= threshold {
            report.passed = false;
            if report.failures.len() < 16 {
                report.failures.push(mismatch);
            }
        }
    }
    Ok(report)
}

/// Check the analytic gradient of one instance.
pub fn check_instance<R: Rng + ?Sized>(
    instance: &Instance,
    step: f64,
    threshold: f64,
    trial: usize,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let (_, grads) = model::loss_and_grad(&instance.params, instance.margin, &instance.triples)?;
    let coords = coordinates(&instance.params, rng);
    compare_gradient(instance, &grads, step, threshold, trial, &coords)
}

/// Run `trials` randomised gradient checks at the configured dim and margin.
pub fn check_gradients(hp: &HyperParams, trials: usize) -> Result<GradCheckReport> {
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let mut rng = rng::stream(hp.seed, rng::CHECKGRAD_STREAM);
    let mut report = GradCheckReport::empty(DEFAULT_THRESHOLD);
    for trial in 0..trials {
        let instance = random_instance(&mut rng, hp.dim, MAX_SUPPORT_PAIRS, hp.margin)?;
        let r = check_instance(&instance, DEFAULT_STEP, DEFAULT_THRESHOLD, trial, &mut rng)?;
        report.merge(r);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_hp(dim: usize) -> HyperParams {
        HyperParams {
            dim,
            ..Default::default()
        }
    }

    #[test]
    fn zeroed_params_run_to_completion() {
        let instance = Instance {
            params: Params::zeros(INSTANCE_ITEMS, 3).unwrap(),
            margin: 1.0,
            triples: vec![Triple::new(ItemId(0), ItemId(1), ItemId(5))],
        };
        let mut rng = rng::stream(0, 0);
        let r = check_instance(&instance, DEFAULT_STEP, DEFAULT_THRESHOLD, 0, &mut rng).unwrap();
        assert!(r.max_rel_error.is_finite());
        assert!(r.passed);
        assert!(r.checked > 0);
    }

    #[test]
    fn hundred_trials_at_dim_four_pass() {
        let report = check_gradients(&small_hp(4), 100).unwrap();
        assert!(report.passed, "{}", report.summary());
        assert_eq!(report.trials, 100);
        assert!(report.checked > report.skipped);
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let mut rng = rng::stream(11, 0);
        let mut instance = random_instance(&mut rng, 2, 2, 1.0).unwrap();
        // a large margin keeps every hinge active
        instance.margin = 1e3;
        let (_, mut grads) =
            model::loss_and_grad(&instance.params, instance.margin, &instance.triples).unwrap();
        grads.d_bias[1] += 0.5;
        let coords = coordinates(&instance.params, &mut rng);
        let r = compare_gradient(
            &instance,
            &grads,
            DEFAULT_STEP,
            DEFAULT_THRESHOLD,
            0,
            &coords,
        )
        .unwrap();
        assert!(!r.passed);
        assert!(r
            .failures
            .iter()
            .any(|f| f.coordinate == Coordinate::Bias { row: 1 }));
        assert!(r.summary().contains("b[1]"), "{}", r.summary());
    }

    #[test]
    fn zero_trials_is_an_error() {
        assert!(check_gradients(&small_hp(2), 0).is_err());
    }

    #[test]
    fn large_dim_subsamples_transform() {
        let mut rng = rng::stream(0, 0);
        let p = Params::zeros(2, 32).unwrap();
        let coords = coordinates(&p, &mut rng);
        let n_transform = coords
            .iter()
            .filter(|c| matches!(c, Coordinate::Transform { .. }))
            .count();
        assert_eq!(n_transform, MAX_TRANSFORM_COORDS);
    }
}
