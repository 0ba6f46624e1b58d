use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference gradient check settings.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Check a seeded random subset of at most this many coordinates.
    pub max_coords: Option<usize>,
    /// With `max_coords`, draw half of the subset from coordinates whose
    /// analytic gradient is nonzero so sparse gradients are still exercised.
    pub favor_nonzero: bool,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rtol: 1e-3,
            atol: 1e-6,
            max_coords: None,
            favor_nonzero: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |a - n| / (atol/rtol + max(|a|, |n|))`; at most `rtol` iff every
    /// coordinate satisfies `|a - n| <= atol + rtol * max(|a|, |n|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    pub rtol: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.rtol
    }
}

/// Compares reverse-mode gradients of the scalar `f` at `inputs` with
/// central finite differences.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], opts: &GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], track: bool| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), track)).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(Error::dims("check_gradients", g.shape(out), &[1]));
        }
        if !g.scalar(out).is_finite() {
            return Err(Error::Numeric(format!(
                "function value {} is not finite",
                g.scalar(out)
            )));
        }
        Ok((g, vars, out))
    };

    let (mut g, vars, out) = eval(inputs, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    if analytic.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("analytic gradient is not finite".into()));
    }
    drop(g);

    let mut coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |c| (i, c)))
        .collect();
    if let Some(limit) = opts.max_coords {
        if coords.len() > limit {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let nonzero: Vec<usize> = (0..coords.len())
                .filter(|&k| analytic[coords[k].0][coords[k].1] != 0.0)
                .collect();
            let mut picked = Vec::with_capacity(limit);
            if opts.favor_nonzero {
                let take = (limit / 2).min(nonzero.len());
                picked.extend(
                    rand::seq::index::sample(&mut rng, nonzero.len(), take)
                        .into_iter()
                        .map(|k| nonzero[k]),
                );
            }
            let rest = limit - picked.len();
            picked.extend(rand::seq::index::sample(&mut rng, coords.len(), rest));
            picked.sort_unstable();
            picked.dedup();
            coords = picked.into_iter().map(|i| coords[i]).collect();
        }
    }

    let floor = opts.atol / opts.rtol;
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        rtol: opts.rtol,
        worst: None,
    };
    for (i, c) in coords {
        let orig = work[i].data()[c];
        work[i].data_mut()[c] = orig + opts.step;
        let (g, _, out) = eval(&work, false)?;
        let plus = g.scalar(out);
        work[i].data_mut()[c] = orig - opts.step;
        let (g, _, out) = eval(&work, false)?;
        let minus = g.scalar(out);
        work[i].data_mut()[c] = orig;

        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[i][c];
        let rel = (a - numeric).abs() / (floor + a.abs().max(numeric.abs()));
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some(Mismatch {
                input: i,
                coord: c,
                analytic: a,
                numeric,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_analytic() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), true);
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[2.0, 4.0]);

        let opts = GradCheck {
            rtol: 1e-6,
            ..GradCheck::default()
        };
        let r = check_gradients(
            |g, x| {
                let sq = g.mul(x[0], x[0])?;
                Ok(g.sum(sq))
            },
            &[x],
            &opts,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = check_gradients(|g, _| Ok(g.constant(Tensor::scalar(4.0))), &[x], &GradCheck::default())
            .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.worst.unwrap().analytic, 0.0);
    }

    #[test]
    fn non_finite_is_numeric_error() {
        let x = Tensor::new(vec![1], vec![-1.0]).unwrap();
        let err = check_gradients(
            |g, x| {
                let l = g.ln(x[0]);
                Ok(g.sum(l))
            },
            &[x],
            &GradCheck::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // clamp_min has zero gradient below the floor; a finite difference that
        // straddles the kink disagrees.
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let r = check_gradients(
            |g, x| {
                let c = g.clamp_min(x[0], 0.0);
                Ok(g.sum(c))
            },
            &[x],
            &GradCheck::default(),
        )
        .unwrap();
        assert!(!r.passed());
    }
}
