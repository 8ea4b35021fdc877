use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Example, MetricSpec, SubmoduleId, Trace};
use crate::numerics::Var;

/// A scalar read off a forward pass, the target of attribution.
pub trait Objective: Sync {
    fn build(&self, trace: &mut Trace, example: &Example) -> Result<Var>;

    fn describe(&self) -> String;
}

impl Objective for MetricSpec {
    fn build(&self, trace: &mut Trace, _example: &Example) -> Result<Var> {
        MetricSpec::build(self, trace)
    }

    fn describe(&self) -> String {
        format!(
            "{:?}(+{:?} -{:?})",
            self.mode, self.positive, self.negative
        )
    }
}

/// One term `linear·a + quadratic·a²` of a [`FeatureMetric`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTerm {
    pub position: usize,
    pub feature: usize,
    #[serde(default)]
    pub linear: f64,
    #[serde(default)]
    pub quadratic: f64,
}

/// A polynomial directly in the SAE features of one site. Used as a test
/// fixture where exact and linearised effects are known in closed form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMetric {
    pub site: SubmoduleId,
    pub terms: Vec<FeatureTerm>,
}

impl FeatureMetric {
    pub fn linear(site: SubmoduleId, position: usize, feature: usize, c: f64) -> Self {
        FeatureMetric {
            site,
            terms: vec![FeatureTerm {
                position,
                feature,
                linear: c,
                quadratic: 0.0,
            }],
        }
    }

    pub fn square(site: SubmoduleId, position: usize, feature: usize) -> Self {
        FeatureMetric {
            site,
            terms: vec![FeatureTerm {
                position,
                feature,
                linear: 0.0,
                quadratic: 1.0,
            }],
        }
    }
}

impl Objective for FeatureMetric {
    fn build(&self, trace: &mut Trace, _example: &Example) -> Result<Var> {
        let f = trace
            .site(&self.site)?
            .features
            .ok_or_else(|| Error::invalid(format!("feature metric at {} needs an SAE", self.site)))?;
        let width = trace.tape.value(f).shape()[1];
        let tape = &mut trace.tape;
        let mut lin_idx = Vec::new();
        let mut lin_w = Vec::new();
        let mut sq_idx = Vec::new();
        let mut sq_w = Vec::new();
        for t in &self.terms {
            if t.feature >= width {
                return Err(Error::invalid(format!("feature {} outside width {width}", t.feature)));
            }
            let i = t.position * width + t.feature;
            if t.linear != 0.0 {
                lin_idx.push(i);
                lin_w.push(t.linear);
            }
            if t.quadratic != 0.0 {
                sq_idx.push(i);
                sq_w.push(t.quadratic);
            }
        }
        let mut total = None;
        for (idx, w, square) in [(lin_idx, lin_w, false), (sq_idx, sq_w, true)] {
            if idx.is_empty() {
                continue;
            }
            let a = tape.pick(f, idx)?;
            let a = if square { tape.mul(a, a)? } else { a };
            let c = tape.constant(crate::numerics::Tensor::vector(w));
            let term = tape.mul(a, c)?;
            let term = tape.sum_all(term)?;
            total = Some(match total {
                None => term,
                Some(prev) => tape.add(prev, term)?,
            });
        }
        match total {
            Some(v) => Ok(v),
            None => {
                let zero = tape.constant(crate::numerics::Tensor::vector(vec![0.0]));
                tape.sum_all(zero)
            }
        }
    }

    fn describe(&self) -> String {
        format!("feature-polynomial at {}", self.site)
    }
}
