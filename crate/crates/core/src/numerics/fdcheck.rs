use super::tensor::{NumericsError, Result, Scalar, Tensor};

/// Central finite-difference verification of tape gradients.
///
/// `f` must be a deterministic scalar function of `params` (re-invoked many
/// times with perturbed parameter values). Returns the maximum over all
/// parameter elements of `|g_ad - g_fd| / max(1e-8, s, |g_ad| + |g_fd|)`,
/// where `s` is the largest analytic gradient magnitude across all
/// parameters. The `s` floor makes the check mixed absolute/relative:
/// elements whose gradient is near the overall scale are compared
/// relatively, while near-zero elements are compared against that scale
/// absolutely, so central-difference rounding noise on tiny gradients does
/// not dominate (which would otherwise make 32-bit checks vacuous).
pub fn finite_diff_check<F: Scalar>(
    f: &dyn Fn() -> Result<Tensor<F>>,
    params: &[Tensor<F>],
    h: f64,
) -> Result<f64> {
    if h <= 0.0 {
        return Err(NumericsError::Contract {
            op: "finite_diff_check",
            msg: format!("step must be positive, got {}", h),
        });
    }
    for p in params {
        p.zero_grad();
    }
    let loss = f()?;
    if loss.numel() != 1 {
        return Err(NumericsError::Contract {
            op: "finite_diff_check",
            msg: "f must return a scalar".into(),
        });
    }
    let base = loss.item().to_f64();
    loss.backward()?;
    // Determinism check: identical value on re-evaluation.
    let recheck = f()?.item().to_f64();
    if recheck != base {
        return Err(NumericsError::Contract {
            op: "finite_diff_check",
            msg: format!("f is not deterministic: {} vs {}", base, recheck),
        });
    }

    let grad_scale = params
        .iter()
        .flat_map(|p| p.grad().unwrap_or_default())
        .fold(0.0f64, |m, g| m.max(g.to_f64().abs()));

    let mut max_rel = 0.0f64;
    let hs = F::from_f64(h);
    for p in params {
        let g_ad = p.grad().unwrap_or_else(|| vec![F::zero(); p.numel()]);
        let mut vals = p.data();
        for i in 0..vals.len() {
            let orig = vals[i];
            vals[i] = orig + hs;
            p.set_data(&vals);
            let fp = f()?.item().to_f64();
            vals[i] = orig - hs;
            p.set_data(&vals);
            let fm = f()?.item().to_f64();
            vals[i] = orig;
            p.set_data(&vals);
            let g_fd = (fp - fm) / (2.0 * h);
            let ga = g_ad[i].to_f64();
            let rel = (ga - g_fd).abs() / 1e-8f64.max(grad_scale).max(ga.abs() + g_fd.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
