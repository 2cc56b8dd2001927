//! Independent reference implementations used by the integration tests.
//! Written from the textbook formulas, sharing no code with the library.

#![allow(dead_code)]

/// Pearson r from two-pass sums with n - 1 denominators.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        cov += (xs[i] - mx) * (ys[i] - my) / (n - 1.0);
        vx += (xs[i] - mx) * (xs[i] - mx) / (n - 1.0);
        vy += (ys[i] - my) * (ys[i] - my) / (n - 1.0);
    }
    cov / (vx.sqrt() * vy.sqrt())
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Exact rational p / q in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio(pub i128, pub i128);

impl Ratio {
    pub fn new(p: i128, q: i128) -> Self {
        let g = gcd(p, q).max(1);
        let s = if q < 0 { -1 } else { 1 };
        Ratio(s * p / g, s * q / g)
    }
    pub fn to_f64(self) -> f64 {
        self.0 as f64 / self.1 as f64
    }
}

/// Simple kappa of an integer table, exactly: (D N - S) / (N^2 - S) with
/// D the diagonal sum and S the sum of row-by-column marginal products.
pub fn kappa_exact(table: &[Vec<i64>]) -> Ratio {
    let k = table.len();
    let n: i128 = table.iter().flatten().map(|&c| c as i128).sum();
    let d: i128 = (0..k).map(|i| table[i][i] as i128).sum();
    let s: i128 = (0..k)
        .map(|i| {
            let row: i128 = table[i].iter().map(|&c| c as i128).sum();
            let col: i128 = table.iter().map(|r| r[i] as i128).sum();
            row * col
        })
        .sum();
    Ratio::new(d * n - s, n * n - s)
}

/// Linear-weighted kappa, exactly. Weights 1 - |i - j| / (k - 1), scaled
/// by (k - 1) to stay integral.
pub fn linear_kappa_exact(table: &[Vec<i64>]) -> Ratio {
    let k = table.len();
    let km1 = (k - 1) as i128;
    let n: i128 = table.iter().flatten().map(|&c| c as i128).sum();
    let rows: Vec<i128> = table.iter().map(|r| r.iter().map(|&c| c as i128).sum()).collect();
    let cols: Vec<i128> = (0..k).map(|j| table.iter().map(|r| r[j] as i128).sum()).collect();
    let mut o = 0i128; // sum w'_ij n_ij, w' = (k-1) w
    let mut e = 0i128; // sum w'_ij r_i c_j
    for i in 0..k {
        for j in 0..k {
            let w = km1 - (i as i128 - j as i128).abs();
            o += w * table[i][j] as i128;
            e += w * rows[i] * cols[j];
        }
    }
    // po = o / ((k-1) n), pe = e / ((k-1) n^2)
    Ratio::new(o * n - e, km1 * n * n - e)
}

/// Large-sample SE of simple kappa, in the Fleiss-Cohen-Everitt form
/// written with separate diagonal and off-diagonal sums.
pub fn kappa_se(table: &[Vec<i64>]) -> f64 {
    let k = table.len();
    let n: f64 = table.iter().flatten().map(|&c| c as f64).sum();
    let p = |i: usize, j: usize| table[i][j] as f64 / n;
    let row = |i: usize| (0..k).map(|j| p(i, j)).sum::<f64>();
    let col = |j: usize| (0..k).map(|i| p(i, j)).sum::<f64>();
    let po: f64 = (0..k).map(|i| p(i, i)).sum();
    let pe: f64 = (0..k).map(|i| row(i) * col(i)).sum();
    let kappa = (po - pe) / (1.0 - pe);
    let mut a = 0.0;
    for i in 0..k {
        a += p(i, i) * (1.0 - (row(i) + col(i)) * (1.0 - kappa)).powi(2);
    }
    let mut b = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                b += p(i, j) * (col(i) + row(j)).powi(2);
            }
        }
    }
    b *= (1.0 - kappa).powi(2);
    let c = (kappa - pe * (1.0 - kappa)).powi(2);
    ((a + b - c) / (n * (1.0 - pe).powi(2))).sqrt()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    // Insertion sort, to avoid leaning on the library's sort path.
    for i in 1..s.len() {
        let mut j = i;
        while j > 0 && s[j - 1] > s[j] {
            s.swap(j - 1, j);
            j -= 1;
        }
    }
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Paired t statistic from raw differences.
pub fn paired_t(d: &[f64]) -> f64 {
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    mean / (var / n).sqrt()
}

/// Bucket index of an absolute difference in whole micrometers:
/// [0, 4000) -> 0, [4000, 10000] -> 1, above -> 2.
pub fn bucket_um(d_um: i64) -> usize {
    let d = d_um.abs();
    if d < 4000 {
        0
    } else if d <= 10_000 {
        1
    } else {
        2
    }
}

fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, eps: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * eps {
        left + right + delta / 15.0
    } else {
        simpson(f, a, m, fa, flm, fm, left, eps / 2.0, depth - 1)
            + simpson(f, m, b, fm, frm, fb, right, eps / 2.0, depth - 1)
    }
}

pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, eps: f64) -> f64 {
    let (fa, fb) = (f(a), f(b));
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson(&f, a, b, fa, fm, fb, whole, eps, 50)
}

/// Two-sided Student-t tail by quadrature of the unnormalized density
/// under x = tan(theta); the normalizer is integrated the same way.
pub fn t_two_sided_quadrature(t: f64, df: f64) -> f64 {
    let h = |theta: f64| {
        let x = theta.tan();
        let c = theta.cos();
        (1.0 + x * x / df).powf(-(df + 1.0) / 2.0) / (c * c)
    };
    let top = std::f64::consts::FRAC_PI_2;
    let total = integrate(h, 0.0, top, 1e-14);
    let tail = integrate(h, t.abs().atan(), top, 1e-14);
    tail / total
}
