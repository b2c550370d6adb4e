use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute terms. Central
/// differences of an O(1) loss carry round-off near `1e-16 / h`, about
/// `1e-11` at `h = 1e-5`.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

/// Outcome of a central-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares the analytic gradient returned by `f` against central
/// differences with step `h`.
///
/// `f` maps a flat parameter vector to `(value, gradient)`. The per-coordinate
/// error is `|a - n| / max(DENOMINATOR_FLOOR, |a| + |n|)` and the maximum is
/// reported.
/// `f` is evaluated twice at `params` first; any difference between the two
/// evaluations makes the oracle invalid.
pub fn finite_difference_check<F>(mut f: F, params: &[f64], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(h > 0.0) {
        return Err(Error::config(format!("step h must be positive, got {h}")));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::contract("parameters must be finite"));
    }
    let (v1, g1) = f(params)?;
    let (v2, g2) = f(params)?;
    if v1.to_bits() != v2.to_bits() || g1 != g2 {
        return Err(Error::OracleInvalid(format!(
            "function is not deterministic: {v1} vs {v2}"
        )));
    }
    if g1.len() != params.len() {
        return Err(Error::Dimension {
            op: "finite_difference_check",
            lhs: vec![params.len()],
            rhs: vec![g1.len()],
        });
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: params.len(),
    };
    let mut x = params.to_vec();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let (fp, _) = f(&x)?;
        x[i] = orig - h;
        let (fm, _) = f(&x)?;
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = g1[i];
        let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(DENOMINATOR_FLOOR);
        if err > report.max_rel_error || i == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Rng, Tensor};

    #[test]
    fn square_at_three() {
        let r = finite_difference_check(|x| Ok((x[0] * x[0], vec![2.0 * x[0]])), &[3.0], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert!((r.numeric - 6.0).abs() < 1e-8);
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        let mut rng = Rng::seeded(1);
        // Dropout-style random zeroing.
        let res = finite_difference_check(
            |x| {
                let keep = if rng.uniform() < 0.5 { 0.0 } else { 2.0 };
                Ok((keep * x[0], vec![keep]))
            },
            &[1.0],
            1e-5,
        );
        // Two consecutive draws may coincide; retry until they differ.
        let mut res = res;
        let mut tries = 0;
        while res.is_ok() && tries < 20 {
            res = finite_difference_check(
                |x| {
                    let keep = if rng.uniform() < 0.5 { 0.0 } else { 2.0 };
                    Ok((keep * x[0], vec![keep]))
                },
                &[1.0],
                1e-5,
            );
            tries += 1;
        }
        assert!(matches!(res, Err(Error::OracleInvalid(_))));
    }

    #[test]
    fn two_layer_mlp_matches_central_differences() {
        let mut rng = Rng::seeded(11);
        let x = Tensor::<f64>::randn([5, 4], 1.0, &mut rng);
        let shapes = [(4usize, 6usize), (6, 3)];
        let init: Vec<f64> = (0..(4 * 6 + 6 + 6 * 3 + 3)).map(|_| rng.normal() * 0.5).collect();
        let f = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut g = Graph::<f64>::new();
            let xin = g.constant(x.clone());
            let mut off = 0;
            let mut vars = Vec::new();
            let mut h = xin;
            for (li, &(i, o)) in shapes.iter().enumerate() {
                let w = g.variable(Tensor::from_f64([i, o], &p[off..off + i * o])?);
                off += i * o;
                let b = g.variable(Tensor::from_f64([o], &p[off..off + o])?);
                off += o;
                vars.push(w);
                vars.push(b);
                h = g.matmul(h, w)?;
                h = g.add_bias(h, b)?;
                if li == 0 {
                    h = g.gelu(h);
                }
            }
            let sq = g.mul(h, h)?;
            let loss = g.mean(sq);
            g.backward(loss)?;
            let grad = vars.iter().flat_map(|&v| g.grad(v).unwrap().to_vec()).collect();
            Ok((g.scalar(loss), grad))
        };
        let r = finite_difference_check(f, &init, 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }
}
