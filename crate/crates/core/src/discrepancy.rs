//! Alternative attention discrepancy measures: L1 distance, multi-kernel
//! Gaussian MMD and joint MMD (product kernel across layers).

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::{Matrix, Real};

pub const MEDIAN_MULTIPLIERS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Gaussian bandwidths. With `median_heuristic` the values are multipliers of
/// the median pairwise distance of the pooled sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSet {
    pub bandwidths: Vec<f64>,
    pub median_heuristic: bool,
}

impl KernelSet {
    pub fn fixed(bandwidths: Vec<f64>) -> Result<Self> {
        let k = Self {
            bandwidths,
            median_heuristic: false,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn median() -> Self {
        Self {
            bandwidths: MEDIAN_MULTIPLIERS.to_vec(),
            median_heuristic: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.bandwidths.is_empty(), InvalidArgument, "kernel set is empty");
        ensure!(
            self.bandwidths.iter().all(|&s| s > 0.0 && s.is_finite()),
            InvalidArgument,
            "bandwidths must be positive"
        );
        Ok(())
    }

    /// Concrete σ values for the pooled sample `x ∪ y`.
    pub fn resolve<F: Real>(&self, x: &Matrix<F>, y: &Matrix<F>) -> Result<Vec<F>> {
        self.validate()?;
        let base = if self.median_heuristic {
            median_pairwise_distance(x, y)
        } else {
            1.0
        };
        Ok(self.bandwidths.iter().map(|&b| F::lit(b * base)).collect())
    }
}

fn median_pairwise_distance<F: Real>(x: &Matrix<F>, y: &Matrix<F>) -> f64 {
    let rows: Vec<&[F]> = x.iter_rows().chain(y.iter_rows()).collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]).to_f64_lossy().sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let m = if d.len() % 2 == 0 {
        0.5 * (d[mid - 1] + d[mid])
    } else {
        d[mid]
    };
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// V-statistic, includes the diagonal; always ≥ 0.
    Biased,
    /// U-statistic, excludes the diagonal; may be negative.
    Unbiased,
}

#[inline]
fn sq_dist<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&p, &q)| (p - q) * (p - q)).sum()
}

#[inline]
fn multi_kernel<F: Real>(d2: F, sigmas: &[F]) -> F {
    let two = F::lit(2.0);
    sigmas.iter().map(|&s| (-d2 / (two * s * s)).exp()).sum()
}

/// Σ_σ ∂k/∂(d²) for the multi-kernel.
#[inline]
fn multi_kernel_d2_grad<F: Real>(d2: F, sigmas: &[F]) -> F {
    let two = F::lit(2.0);
    sigmas
        .iter()
        .map(|&s| -(-d2 / (two * s * s)).exp() / (two * s * s))
        .sum()
}

fn gram<F: Real>(a: &Matrix<F>, b: &Matrix<F>, sigmas: &[F]) -> Matrix<F> {
    let mut k = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            k.data[i * b.rows + j] = multi_kernel(sq_dist(a.row(i), b.row(j)), sigmas);
        }
    }
    k
}

fn mmd_from_grams<F: Real>(kxx: &Matrix<F>, kyy: &Matrix<F>, kxy: &Matrix<F>, est: Estimator) -> F {
    let (n, m) = (kxx.rows, kyy.rows);
    let sum = |k: &Matrix<F>, skip_diag: bool| -> F {
        let mut s = F::zero();
        for i in 0..k.rows {
            for j in 0..k.cols {
                if !(skip_diag && i == j) {
                    s += k.get(i, j);
                }
            }
        }
        s
    };
    let nf = F::from_usize(n).expect("count");
    let mf = F::from_usize(m).expect("count");
    let cross = F::lit(2.0) * sum(kxy, false) / (nf * mf);
    match est {
        Estimator::Biased => sum(kxx, false) / (nf * nf) + sum(kyy, false) / (mf * mf) - cross,
        Estimator::Unbiased => {
            sum(kxx, true) / (nf * (nf - F::one())) + sum(kyy, true) / (mf * (mf - F::one())) - cross
        }
    }
}

fn check_samples<F>(x: &Matrix<F>, y: &Matrix<F>, est: Estimator) -> Result<()> {
    ensure!(
        x.cols == y.cols,
        Shape,
        "sample dimensions differ: {} vs {}",
        x.cols,
        y.cols
    );
    let min = if est == Estimator::Unbiased { 2 } else { 1 };
    ensure!(
        x.rows >= min && y.rows >= min,
        InvalidArgument,
        "{est:?} MMD needs at least {min} samples per side, got {} and {}",
        x.rows,
        y.rows
    );
    Ok(())
}

/// Squared MMD summed over the kernel set's bandwidths.
pub fn gaussian_mmd<F: Real>(
    x: &Matrix<F>,
    y: &Matrix<F>,
    kernels: &KernelSet,
    est: Estimator,
) -> Result<F> {
    check_samples(x, y, est)?;
    let sigmas = kernels.resolve(x, y)?;
    Ok(mmd_from_grams(
        &gram(x, x, &sigmas),
        &gram(y, y, &sigmas),
        &gram(x, y, &sigmas),
        est,
    ))
}

/// MMD with the product over layers of per-layer multi-kernels.
pub fn joint_mmd<F: Real>(
    layers_x: &[Matrix<F>],
    layers_y: &[Matrix<F>],
    kernels: &[KernelSet],
    est: Estimator,
) -> Result<F> {
    ensure!(
        layers_x.len() == layers_y.len() && layers_x.len() == kernels.len(),
        Shape,
        "layer counts differ: {} / {} / {} kernel sets",
        layers_x.len(),
        layers_y.len(),
        kernels.len()
    );
    ensure!(!layers_x.is_empty(), InvalidArgument, "joint MMD needs at least one layer");
    let (n, m) = (layers_x[0].rows, layers_y[0].rows);
    let mut kxx = Matrix::filled_ones(n, n);
    let mut kyy = Matrix::filled_ones(m, m);
    let mut kxy = Matrix::filled_ones(n, m);
    for ((x, y), ks) in layers_x.iter().zip(layers_y).zip(kernels) {
        check_samples(x, y, est)?;
        ensure!(
            x.rows == n && y.rows == m,
            Shape,
            "all layers must hold the same samples"
        );
        let sigmas = ks.resolve(x, y)?;
        kxx.hadamard_assign(&gram(x, x, &sigmas));
        kyy.hadamard_assign(&gram(y, y, &sigmas));
        kxy.hadamard_assign(&gram(x, y, &sigmas));
    }
    Ok(mmd_from_grams(&kxx, &kyy, &kxy, est))
}

/// Biased MMD² with fixed bandwidths and its gradient with respect to `y`.
pub fn gaussian_mmd_grad_y<F: Real>(x: &Matrix<F>, y: &Matrix<F>, sigmas: &[F]) -> Result<(F, Matrix<F>)> {
    let (value, mut grads) = joint_mmd_grad_y(
        std::slice::from_ref(x),
        std::slice::from_ref(y),
        &[sigmas.to_vec()],
    )?;
    Ok((value, grads.remove(0)))
}

/// Biased joint MMD² with fixed per-layer bandwidths and its gradient with
/// respect to every layer of `y`.
pub fn joint_mmd_grad_y<F: Real>(
    layers_x: &[Matrix<F>],
    layers_y: &[Matrix<F>],
    sigmas: &[Vec<F>],
) -> Result<(F, Vec<Matrix<F>>)> {
    ensure!(
        layers_x.len() == layers_y.len() && layers_x.len() == sigmas.len() && !layers_x.is_empty(),
        Shape,
        "layer counts differ"
    );
    let (n, m) = (layers_x[0].rows, layers_y[0].rows);
    for (x, y) in layers_x.iter().zip(layers_y) {
        check_samples(x, y, Estimator::Biased)?;
        ensure!(x.rows == n && y.rows == m, Shape, "all layers must hold the same samples");
    }
    let per_xx: Vec<Matrix<F>> = layers_x.iter().zip(sigmas).map(|(x, s)| gram(x, x, s)).collect();
    let per_yy: Vec<Matrix<F>> = layers_y.iter().zip(sigmas).map(|(y, s)| gram(y, y, s)).collect();
    let per_xy: Vec<Matrix<F>> = layers_x
        .iter()
        .zip(layers_y)
        .zip(sigmas)
        .map(|((x, y), s)| gram(x, y, s))
        .collect();
    let product = |mats: &[Matrix<F>], skip: Option<usize>| {
        let mut p = Matrix::filled_ones(mats[0].rows, mats[0].cols);
        for (l, mm) in mats.iter().enumerate() {
            if Some(l) != skip {
                p.hadamard_assign(mm);
            }
        }
        p
    };
    let value = mmd_from_grams(
        &product(&per_xx, None),
        &product(&per_yy, None),
        &product(&per_xy, None),
        Estimator::Biased,
    );

    let nf = F::from_usize(n).expect("count");
    let mf = F::from_usize(m).expect("count");
    let two = F::lit(2.0);
    let mut grads = Vec::with_capacity(layers_y.len());
    for (l, (x, y)) in layers_x.iter().zip(layers_y).enumerate() {
        let others_yy = product(&per_yy, Some(l));
        let others_xy = product(&per_xy, Some(l));
        let mut g = Matrix::zeros(m, y.cols);
        for a in 0..m {
            let ya = y.row(a);
            let mut acc = vec![F::zero(); y.cols];
            // (1/m²) Σ_{j,j'} k(y_j, y_j'): both slots depend on y_a
            for b in 0..m {
                let yb = y.row(b);
                let coef = two / (mf * mf)
                    * others_yy.get(a, b)
                    * multi_kernel_d2_grad(sq_dist(ya, yb), &sigmas[l])
                    * two;
                for (d, (&p, &q)) in acc.iter_mut().zip(ya.iter().zip(yb)) {
                    *d += coef * (p - q);
                }
            }
            // −(2/nm) Σ_i k(x_i, y_a)
            for i in 0..n {
                let xi = x.row(i);
                let coef = -two / (nf * mf)
                    * others_xy.get(i, a)
                    * multi_kernel_d2_grad(sq_dist(xi, ya), &sigmas[l])
                    * two;
                for (d, (&p, &q)) in acc.iter_mut().zip(ya.iter().zip(xi)) {
                    *d += coef * (p - q);
                }
            }
            g.row_mut(a).copy_from_slice(&acc);
        }
        grads.push(g);
    }
    Ok((value, grads))
}

/// `Σ |a_i − b_i|`.
pub fn attention_l1_distance<F: Real>(a: &[F], b: &[F]) -> Result<F> {
    ensure!(
        a.len() == b.len(),
        Shape,
        "vector lengths differ: {} vs {}",
        a.len(),
        b.len()
    );
    Ok(a.iter().zip(b).map(|(&p, &q)| (p - q).abs()).sum())
}

impl<F: Real> Matrix<F> {
    fn filled_ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::one(); rows * cols],
        }
    }

    fn hadamard_assign(&mut self, other: &Matrix<F>) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a *= b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn col(v: &[f64]) -> Matrix<f64> {
        Matrix::<f64>::from_rows(&v.iter().map(|&x| vec![x]).collect::<Vec<_>>())
    }

    fn one_sigma() -> KernelSet {
        KernelSet::fixed(vec![1.0]).unwrap()
    }

    // Independent scalar-loop oracle for the biased estimator.
    fn oracle_biased(x: &[Vec<f64>], y: &[Vec<f64>], sigma: f64) -> f64 {
        let k = |a: &[f64], b: &[f64]| {
            let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum();
            (-d2 / (2.0 * sigma * sigma)).exp()
        };
        let mut sxx = 0.0;
        for a in x {
            for b in x {
                sxx += k(a, b);
            }
        }
        let mut syy = 0.0;
        for a in y {
            for b in y {
                syy += k(a, b);
            }
        }
        let mut sxy = 0.0;
        for a in x {
            for b in y {
                sxy += k(a, b);
            }
        }
        let (n, m) = (x.len() as f64, y.len() as f64);
        sxx / (n * n) + syy / (m * m) - 2.0 * sxy / (n * m)
    }

    #[test]
    fn identical_samples_zero() {
        let x = Matrix::<f64>::from_rows(&[vec![0.1, 0.3], vec![1.0, -2.0], vec![0.5, 0.5]]);
        let v = gaussian_mmd(&x, &x, &KernelSet::median(), Estimator::Biased).unwrap();
        assert!(v.abs() <= 1e-9);
    }

    #[test]
    fn single_points_hand_value() {
        let v = gaussian_mmd(&col(&[0.0]), &col(&[1.0]), &one_sigma(), Estimator::Biased).unwrap();
        let expected = 2.0 * (1.0 - (-0.5f64).exp());
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.7869).abs() < 1e-4);
    }

    #[test]
    fn matches_scalar_oracle() {
        let x = vec![vec![0.2, 1.0, -0.3], vec![0.0, 0.4, 0.9], vec![1.5, -0.7, 0.1]];
        let y = vec![vec![0.1, 0.1, 0.1], vec![-1.0, 0.3, 0.6]];
        for sigma in [0.5, 1.0, 2.0] {
            let v = gaussian_mmd(
                &Matrix::<f64>::from_rows(&x),
                &Matrix::<f64>::from_rows(&y),
                &KernelSet::fixed(vec![sigma]).unwrap(),
                Estimator::Biased,
            )
            .unwrap();
            assert!((v - oracle_biased(&x, &y, sigma)).abs() < 1e-12);
        }
    }

    #[test]
    fn unbiased_needs_two_samples() {
        assert!(gaussian_mmd(&col(&[0.0]), &col(&[1.0, 2.0]), &one_sigma(), Estimator::Unbiased).is_err());
        assert!(gaussian_mmd(&col(&[0.0, 1.0]), &col(&[1.0, 2.0]), &one_sigma(), Estimator::Unbiased).is_ok());
    }

    #[test]
    fn unbiased_mean_near_zero_for_same_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut total = 0.0;
        let mut negatives = 0;
        for _ in 0..100 {
            let x = col(&(0..30).map(|_| normal.sample(&mut rng)).collect::<Vec<_>>());
            let y = col(&(0..30).map(|_| normal.sample(&mut rng)).collect::<Vec<_>>());
            let v = gaussian_mmd(&x, &y, &one_sigma(), Estimator::Unbiased).unwrap();
            total += v;
            negatives += usize::from(v < 0.0);
        }
        assert!((total / 100.0).abs() < 0.01, "mean {}", total / 100.0);
        assert!(negatives > 0);
    }

    #[test]
    fn biased_symmetric_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let normal = Normal::new(0.0, 1.0).unwrap();
        for _ in 0..20 {
            let x = Matrix::<f64>::from_rows(&(0..5).map(|_| vec![normal.sample(&mut rng), normal.sample(&mut rng)]).collect::<Vec<_>>());
            let y = Matrix::<f64>::from_rows(&(0..7).map(|_| vec![normal.sample(&mut rng), normal.sample(&mut rng)]).collect::<Vec<_>>());
            let a = gaussian_mmd(&x, &y, &KernelSet::median(), Estimator::Biased).unwrap();
            let b = gaussian_mmd(&y, &x, &KernelSet::median(), Estimator::Biased).unwrap();
            assert!(a >= 0.0);
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_single_layer_equals_mmd() {
        let x = Matrix::<f64>::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.5]]);
        let y = Matrix::<f64>::from_rows(&[vec![1.0, 1.0], vec![0.0, -0.5], vec![0.3, 0.3]]);
        let ks = KernelSet::median();
        let a = joint_mmd(std::slice::from_ref(&x), std::slice::from_ref(&y), std::slice::from_ref(&ks), Estimator::Biased).unwrap();
        let b = gaussian_mmd(&x, &y, &ks, Estimator::Biased).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(joint_mmd(&[x.clone()], &[y.clone(), y], &[ks], Estimator::Biased).is_err());
        let same = joint_mmd(&[x.clone(), x.clone()], &[x.clone(), x], &[one_sigma(), one_sigma()], Estimator::Biased).unwrap();
        assert!(same.abs() < 1e-12);
    }

    #[test]
    fn joint_two_layer_hand_case() {
        let x1 = vec![vec![0.0], vec![1.0]];
        let x2 = vec![vec![0.5, 0.0], vec![0.0, 0.5]];
        let y1 = vec![vec![2.0], vec![0.5]];
        let y2 = vec![vec![1.0, 1.0], vec![0.0, 0.0]];
        let (s1, s2) = (1.0, 0.7);
        let k = |a: &[f64], b: &[f64], s: f64| {
            let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum();
            (-d2 / (2.0 * s * s)).exp()
        };
        let mut oracle = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                oracle += k(&x1[i], &x1[j], s1) * k(&x2[i], &x2[j], s2) / 4.0;
                oracle += k(&y1[i], &y1[j], s1) * k(&y2[i], &y2[j], s2) / 4.0;
                oracle -= 2.0 * k(&x1[i], &y1[j], s1) * k(&x2[i], &y2[j], s2) / 4.0;
            }
        }
        let v = joint_mmd(
            &[Matrix::<f64>::from_rows(&x1), Matrix::<f64>::from_rows(&x2)],
            &[Matrix::<f64>::from_rows(&y1), Matrix::<f64>::from_rows(&y2)],
            &[KernelSet::fixed(vec![s1]).unwrap(), KernelSet::fixed(vec![s2]).unwrap()],
            Estimator::Biased,
        )
        .unwrap();
        assert!((v - oracle).abs() < 1e-12);
    }

    #[test]
    fn joint_with_constant_layer_scales_single_layer() {
        let x = Matrix::<f64>::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]);
        let y = Matrix::<f64>::from_rows(&[vec![0.5], vec![2.0]]);
        let cx = Matrix::<f64>::from_rows(&vec![vec![4.0, 4.0]; 3]);
        let cy = Matrix::<f64>::from_rows(&vec![vec![4.0, 4.0]; 2]);
        let ks = KernelSet::fixed(vec![0.5, 1.0, 2.0]).unwrap();
        let single = gaussian_mmd(&x, &y, &ks, Estimator::Biased).unwrap();
        let joint = joint_mmd(&[x, cx], &[y, cy], &[ks.clone(), ks], Estimator::Biased).unwrap();
        // the constant layer contributes k = 3 (three bandwidths at distance 0)
        assert!((joint - 3.0 * single).abs() < 1e-12);
    }

    #[test]
    fn separated_means_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut wins = 0;
        for _ in 0..100 {
            let mut draw = |shift: f64| col(&(0..200).map(|_| normal.sample(&mut rng) + shift).collect::<Vec<_>>());
            let (a, b, c, d) = (draw(0.0), draw(3.0), draw(0.0), draw(0.0));
            let far = gaussian_mmd(&a, &b, &KernelSet::median(), Estimator::Unbiased).unwrap();
            let near = gaussian_mmd(&c, &d, &KernelSet::median(), Estimator::Unbiased).unwrap();
            wins += usize::from(far > near);
        }
        assert!(wins >= 99, "{wins}/100");
    }

    #[test]
    fn l1_distance_cases() {
        assert_eq!(attention_l1_distance(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert_eq!(attention_l1_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert!(attention_l1_distance(&[1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn mmd_gradient_matches_finite_differences() {
        let x = Matrix::<f64>::from_rows(&[vec![0.1, 0.9], vec![0.7, 0.2], vec![0.4, 0.4]]);
        let y = Matrix::<f64>::from_rows(&[vec![0.3, 0.5], vec![0.9, 0.1]]);
        let sig = vec![vec![0.3, 1.0], vec![0.6]];
        let x2 = Matrix::<f64>::from_rows(&[vec![1.0], vec![0.0], vec![0.5]]);
        let y2 = Matrix::<f64>::from_rows(&[vec![0.2], vec![0.8]]);
        let (_, g) = joint_mmd_grad_y(&[x.clone(), x2.clone()], &[y.clone(), y2.clone()], &sig).unwrap();
        let h = 1e-6;
        for (layer, idx) in [(0, 0), (0, 3), (1, 1)] {
            let eval = |delta: f64| {
                let (mut ya, mut yb) = (y.clone(), y2.clone());
                if layer == 0 {
                    ya.data[idx] += delta;
                } else {
                    yb.data[idx] += delta;
                }
                joint_mmd_grad_y(&[x.clone(), x2.clone()], &[ya, yb], &sig).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g[layer].data[idx];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "{fd} vs {an}");
        }
        let (v, _) = gaussian_mmd_grad_y(&x, &y, &sig[0]).unwrap();
        let w = gaussian_mmd(&x, &y, &KernelSet::fixed(vec![0.3, 1.0]).unwrap(), Estimator::Biased).unwrap();
        assert!((v - w).abs() < 1e-12);
    }
}
