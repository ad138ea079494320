//! Conjugate gradients on a subspace, used by every global solve in the crate.

pub(crate) struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `||b - A x|| / ||b - A x0||`, recomputed from the returned iterate.
    pub rel_residual: f64,
    pub converged: bool,
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `A x = b` restricted to the range of `project`, an orthogonal projector
/// onto the complement of `ker A`. `precond` is an optional diagonal.
pub(crate) fn projected_cg(
    apply: impl Fn(&[f64], &mut [f64]),
    project: impl Fn(&mut [f64]),
    precond: Option<&[f64]>,
    b: &[f64],
    x0: Option<Vec<f64>>,
    tol: f64,
    max_iter: usize,
) -> CgOutcome {
    let n = b.len();
    let mut rhs = b.to_vec();
    project(&mut rhs);
    let mut x = x0.unwrap_or_else(|| vec![0.0; n]);
    project(&mut x);

    let mut ax = vec![0.0; n];
    apply(&x, &mut ax);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    project(&mut r);
    let r0 = dot(&r, &r).sqrt();
    if r0 == 0.0 {
        return CgOutcome {
            x,
            iterations: 0,
            rel_residual: 0.0,
            converged: true,
        };
    }

    let precondition = |r: &[f64], z: &mut [f64]| {
        match precond {
            Some(d) => {
                for ((z, r), d) in z.iter_mut().zip(r).zip(d) {
                    *z = r / d;
                }
            }
            None => z.copy_from_slice(r),
        }
        project(z);
    };

    let mut z = vec![0.0; n];
    precondition(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        apply(&p, &mut ap);
        project(&mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for ((xi, ri), (pi, api)) in x.iter_mut().zip(r.iter_mut()).zip(p.iter().zip(&ap)) {
            *xi += alpha * pi;
            *ri -= alpha * api;
        }
        iterations += 1;
        if dot(&r, &r).sqrt() <= tol * r0 {
            converged = true;
            break;
        }
        precondition(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    project(&mut x);

    apply(&x, &mut ax);
    let mut res: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    project(&mut res);
    let rel_residual = dot(&res, &res).sqrt() / r0;
    CgOutcome {
        x,
        iterations,
        rel_residual,
        converged: converged || rel_residual <= tol,
    }
}

/// Removes the plain node average.
pub(crate) fn project_mean_zero(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    for x in v.iter_mut() {
        *x -= m;
    }
}
