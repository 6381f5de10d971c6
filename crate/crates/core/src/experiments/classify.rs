use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use super::generate::{gen_finite_model, sample_moments};
use crate::consistency::condition_value;
use crate::error::Result;
use crate::model::default_pattern;
use crate::rng;
use crate::solver::{regularization_path, GridSpec};

/// Error threshold separating classes 1 and 2.
pub const GOOD_ERROR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PathClass {
    /// Some grid point has the true pattern and `‖ŵ − w‖ ≤ 0.1`.
    ConsistentAccurate,
    /// The true pattern occurs, but never with error `≤ 0.1`.
    ConsistentInaccurate,
    /// The true pattern never occurs.
    Inconsistent,
}

impl PathClass {
    pub fn index(self) -> usize {
        match self {
            PathClass::ConsistentAccurate => 0,
            PathClass::ConsistentInaccurate => 1,
            PathClass::Inconsistent => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassifiedPath {
    pub condition_max: f64,
    pub class: PathClass,
}

#[derive(Debug, Clone)]
pub struct Classification {
    pub paths: Vec<ClassifiedPath>,
    /// Models whose path could not be computed.
    pub failures: usize,
}

/// Samples `count` models (m = 4, size 2, |J| = 2), computes one
/// 50-per-decade path from `n` samples each and classifies it.
pub fn classify_paths(seed: u64, count: usize, n: usize) -> Result<Classification> {
    let outcomes: Vec<Result<ClassifiedPath>> = (0..count)
        .into_par_iter()
        .map(|k| {
            let fixture = gen_finite_model(rng::derive_seed(seed, &[k as u64, 0]), 4, 2, 2)?;
            let report = condition_value(&fixture.model, &fixture.blocks, &fixture.pattern)?;
            let mut r = rng::stream(seed, &[k as u64, 1]);
            let mom = sample_moments(&fixture.model, n, &mut r)?;
            let path = regularization_path(&mom, &fixture.blocks, &GridSpec::per_decade(50, 1e-3))?;
            let mut consistent = false;
            let mut accurate = false;
            for sol in &path.solutions {
                if default_pattern(&sol.w, &fixture.blocks) == fixture.pattern {
                    consistent = true;
                    accurate |= (&sol.w - &fixture.model.w).norm() <= GOOD_ERROR;
                }
            }
            let class = match (consistent, accurate) {
                (true, true) => PathClass::ConsistentAccurate,
                (true, false) => PathClass::ConsistentInaccurate,
                _ => PathClass::Inconsistent,
            };
            Ok(ClassifiedPath {
                condition_max: report.max_value,
                class,
            })
        })
        .collect();
    let failures = outcomes.iter().filter(|o| o.is_err()).count();
    Ok(Classification {
        paths: outcomes.into_iter().filter_map(|o| o.ok()).collect(),
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    pub log10_lo: f64,
    pub log10_hi: f64,
    pub count: usize,
    /// Class proportions, summing to 1.
    pub proportions: [f64; 3],
}

/// Bins paths by `log10` of the condition value with the given width
/// (bins aligned on multiples of `width`); empty bins are omitted.
pub fn histogram(paths: &[ClassifiedPath], width: f64) -> Vec<HistogramBin> {
    let mut bins: std::collections::BTreeMap<i64, [usize; 3]> = Default::default();
    for p in paths {
        let key = (p.condition_max.max(1e-300).log10() / width).floor() as i64;
        bins.entry(key).or_default()[p.class.index()] += 1;
    }
    bins.into_iter()
        .map(|(key, counts)| {
            let total: usize = counts.iter().sum();
            HistogramBin {
                log10_lo: key as f64 * width,
                log10_hi: (key + 1) as f64 * width,
                count: total,
                proportions: counts.map(|c| c as f64 / total as f64),
            }
        })
        .collect()
}

/// CSV with header `log10_lo,log10_hi,count,class1,class2,class3`.
pub fn write_histogram_csv<W: Write>(bins: &[HistogramBin], writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["log10_lo", "log10_hi", "count", "class1", "class2", "class3"])?;
    for b in bins {
        out.write_record([
            b.log10_lo.to_string(),
            b.log10_hi.to_string(),
            b.count.to_string(),
            b.proportions[0].to_string(),
            b.proportions[1].to_string(),
            b.proportions[2].to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
