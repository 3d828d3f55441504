//! Named presets over the diagnostics checks.

use faer::Mat;
use serde_json::json;
use sketchtucker::diagnostics::{
    bound_rhosvd, bound_theorem33, bound_theorem34, coherent_matrix, incoherent_matrix, lemma31_check, prop_a1_check,
    CheckReport, ModeBound,
};
use sketchtucker::linalg::Matrix;
use sketchtucker::sketch::{gaussian_matrix, RngStream};
use sketchtucker::{Error, Result};

/// Highest tolerated failure rate of the sampling events.
const MAX_EVENT_FAILURE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    BoundSpots,
    PropA1Scalar,
    PropA1Random,
    Lemma31Full,
    Lemma31Incoherent,
    /// Canonical (maximally coherent) row space with few samples. Fails by design.
    Lemma31Coherent,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::BoundSpots,
        Preset::PropA1Scalar,
        Preset::PropA1Random,
        Preset::Lemma31Full,
        Preset::Lemma31Incoherent,
        Preset::Lemma31Coherent,
    ];

    pub fn defaults() -> Vec<Preset> {
        Self::ALL.into_iter().filter(|p| *p != Preset::Lemma31Coherent).collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::BoundSpots => "bound-spots",
            Preset::PropA1Scalar => "prop-a1-scalar",
            Preset::PropA1Random => "prop-a1-random",
            Preset::Lemma31Full => "lemma31-full",
            Preset::Lemma31Incoherent => "lemma31-incoherent",
            Preset::Lemma31Coherent => "lemma31-coherent",
        }
    }

    pub fn parse(name: &str) -> Result<Preset> {
        Self::ALL.into_iter().find(|p| p.name() == name).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|p| p.name()).collect();
            Error::InvalidArgument(format!("unknown preset '{name}'; available: {}", names.join(", ")))
        })
    }

    pub fn run(self, seed: u64) -> Result<CheckReport> {
        match self {
            Preset::BoundSpots => bound_spots(),
            Preset::PropA1Scalar => {
                let one = Mat::from_fn(1, 1, |_, _| 1.0);
                prop_a1(self, &one, &one, 200_000, seed)
            }
            Preset::PropA1Random => {
                let s = diagonal(5, RngStream::new(seed, 11));
                let t = diagonal(7, RngStream::new(seed, 12));
                prop_a1(self, &s, &t, 100_000, seed)
            }
            Preset::Lemma31Full => lemma31(self, incoherent_matrix(10, 300, 3, seed), 3, 300, 0.0, 0.0, 20, seed),
            Preset::Lemma31Incoherent => {
                lemma31(self, incoherent_matrix(10, 5000, 5, seed), 5, 200, 0.5, 0.5, 100, seed)
            }
            Preset::Lemma31Coherent => lemma31(self, coherent_matrix(10, 5000, 5, seed), 5, 200, 0.5, 0.5, 100, seed),
        }
    }
}

fn diagonal(n: usize, stream: RngStream) -> Matrix {
    let g = gaussian_matrix(n, 1, stream);
    Mat::from_fn(n, n, |i, j| if i == j { g[(i, 0)] } else { 0.0 })
}

fn bound_spots() -> Result<CheckReport> {
    let c = 27f64.sqrt();
    let zero = |r| ModeBound { r, p: 4, delta: 0.0, eta: 0.0 };
    let cases = [
        ("theorem33", bound_theorem33(zero(1), 1.0)?, (1.0 + c).sqrt()),
        ("theorem34", bound_theorem34(&[zero(5); 4], 1.0)?, (4.0 + 36.0 * c).sqrt()),
        ("rhosvd", bound_rhosvd(&[1], 2)?, 2f64.sqrt()),
    ];
    let worst = cases.iter().map(|(_, got, want)| (got - want).abs()).fold(0.0, f64::max);
    let inputs: serde_json::Value = cases.iter().map(|(n, got, want)| json!({"formula": n, "value": got, "expected": want})).collect();
    Ok(CheckReport {
        check: Preset::BoundSpots.name().into(),
        inputs,
        estimate: worst,
        bound: 1e-14,
        pass: worst <= 1e-14,
        note: Some("largest deviation from hand-evaluated values".into()),
    })
}

fn prop_a1(preset: Preset, s: &Matrix, t: &Matrix, trials: usize, seed: u64) -> Result<CheckReport> {
    let r = prop_a1_check(s, t, trials, seed)?;
    Ok(CheckReport {
        check: preset.name().into(),
        inputs: json!({"s_shape": [s.nrows(), s.ncols()], "t_shape": [t.nrows(), t.ncols()], "trials": trials, "seed": seed,
                       "standard_error": r.standard_error, "exact": r.exact}),
        estimate: r.estimate,
        bound: r.bound,
        pass: r.within_bound(),
        note: None,
    })
}

#[allow(clippy::too_many_arguments)]
fn lemma31(
    preset: Preset,
    x: Matrix,
    r: usize,
    s: usize,
    delta: f64,
    eta: f64,
    trials: usize,
    seed: u64,
) -> Result<CheckReport> {
    let rep = lemma31_check(&x, r, s, delta, eta, trials, seed)?;
    let rate_ok = rep.failure_rate <= MAX_EVENT_FAILURE;
    let pass = rep.within_bound() && rate_ok;
    let note = (!pass).then(|| {
        format!(
            "sampling events failed in {:.0}% of trials (tolerated {:.0}%); M1 = m·μ(V1) = {:.0} of m = {}, \
             so uniform sampling rarely hits the few columns carrying the dominant row space",
            100.0 * rep.failure_rate,
            100.0 * MAX_EVENT_FAILURE,
            rep.m1,
            x.ncols()
        )
    });
    Ok(CheckReport {
        check: preset.name().into(),
        inputs: json!({"shape": [x.nrows(), x.ncols()], "r": r, "s": s, "delta": delta, "eta": eta, "trials": trials,
                       "seed": seed, "m1": rep.m1, "m2": rep.m2, "standard_error": rep.standard_error,
                       "lower_failures": rep.lower_failures, "upper_failures": rep.upper_failures}),
        estimate: rep.failure_rate,
        bound: rep.bound,
        pass,
        note,
    })
}

/// Runs the presets in order. An empty list passes trivially.
pub fn check_suite(presets: &[Preset], seed: u64) -> Result<Vec<CheckReport>> {
    presets.iter().map(|p| p.run(seed)).collect()
}

pub fn all_pass(reports: &[CheckReport]) -> bool {
    reports.iter().all(|r| r.pass)
}
