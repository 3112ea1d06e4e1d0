use std::collections::BTreeMap;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{}`", name)));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

/// Parameters bound as leaves of one graph.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }
}

impl Graph {
    /// Register every parameter as a leaf of this graph.
    pub fn bind(&mut self, params: &ParameterSet) -> Bound {
        let vars = params
            .iter()
            .map(|(name, t)| (name.to_string(), self.param(name, t.clone())))
            .collect();
        Bound { vars }
    }
}

/// Parameter-path → gradient map produced by [`Graph::backward`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub(crate) fn accumulate(&mut self, name: &str, g: Tensor) -> Result<()> {
        match self.grads.get_mut(name) {
            Some(acc) => acc.axpy(1.0, &g),
            None => {
                self.grads.insert(name.to_string(), g);
                Ok(())
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}

#[derive(Clone, Debug)]
pub struct FdOptions {
    /// Central-difference step.
    pub step: f64,
    /// Gradient magnitudes below this are compared in absolute terms.
    pub abs_floor: f64,
    /// Check at most this many coordinates per parameter (evenly spaced).
    pub max_coords_per_param: Option<usize>,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: 1e-5,
            abs_floor: 1e-6,
            max_coords_per_param: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compare reverse-mode gradients of `f` against central finite differences.
///
/// The relative error of one coordinate is
/// `|analytic − numeric| / max(|analytic|, |numeric|, abs_floor)`.
pub fn fd_check<F>(f: F, params: &ParameterSet, opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    for (name, t) in params.iter() {
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("parameter `{}`", name)));
        }
    }
    let eval = |p: &ParameterSet| -> Result<f64> {
        let mut g = Graph::new();
        let b = g.bind(p);
        let out = f(&mut g, &b)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("objective value".into()));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let b = g.bind(params);
    let out = f(&mut g, &b)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::NonFinite("objective value".into()));
    }
    let grads = g.backward(out)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite("analytic gradient".into()));
    }

    let mut work = params.clone();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name)?.len();
        let analytic = grads.get(&name);
        let stride = match opts.max_coords_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = params.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = orig + opts.step;
            let fp = eval(&work)?;
            work.get_mut(&name)?.data_mut()[i] = orig - opts.step;
            let fm = eval(&work)?;
            work.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic.map_or(0.0, |t| t.data()[i]);
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            let err = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(name: &str, t: Tensor) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert(name, t).unwrap();
        p
    }

    #[test]
    fn quadratic_is_exact() {
        let p = one_param("p", Tensor::from_fn(&[5], |i| 0.3 * i as f64 - 0.7));
        let r = fd_check(
            |g, b| {
                let p = b.get("p")?;
                let sq = g.mul(p, p)?;
                Ok(g.sum(sq))
            },
            &p,
            &FdOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-8, "{:?}", r);
        assert_eq!(r.coords_checked, 5);
    }

    #[test]
    fn constant_objective_has_zero_error() {
        let p = one_param("p", Tensor::ones(&[3]));
        let r = fd_check(
            |g, _| Ok(g.input(Tensor::scalar(4.0))),
            &p,
            &FdOptions::default(),
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn nan_is_reported() {
        let p = one_param("p", Tensor::ones(&[2]));
        let r = fd_check(
            |g, b| {
                let p = b.get("p")?;
                let s = g.scale(p, f64::NAN);
                Ok(g.sum(s))
            },
            &p,
            &FdOptions::default(),
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = one_param("a", Tensor::ones(&[1]));
        assert!(p.insert("a", Tensor::ones(&[1])).is_err());
    }
}
