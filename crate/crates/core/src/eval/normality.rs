//! Normality tests for small samples: Shapiro–Wilk with Royston's
//! approximation of the coefficients and the null distribution of `W`, and
//! Anderson–Darling with estimated mean and variance.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Significance level for the reject flag.
pub const ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormalityTest {
    #[default]
    ShapiroWilk,
    AndersonDarling,
}

impl NormalityTest {
    pub fn name(self) -> &'static str {
        match self {
            NormalityTest::ShapiroWilk => "shapiro_wilk",
            NormalityTest::AndersonDarling => "anderson_darling",
        }
    }

    pub fn run(self, xs: &[f64]) -> Result<NormalityVerdict> {
        match self {
            NormalityTest::ShapiroWilk => shapiro_wilk(xs),
            NormalityTest::AndersonDarling => anderson_darling(xs),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalityVerdict {
    pub statistic: f64,
    pub p_value: f64,
    /// `p_value < ALPHA`.
    pub reject: bool,
}

impl NormalityVerdict {
    fn new(statistic: f64, p_value: f64) -> Self {
        let p_value = p_value.clamp(0.0, 1.0);
        Self {
            statistic,
            p_value,
            reject: p_value < ALPHA,
        }
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// `c[0] + c[1] x + c[2] x^2 + ...`
fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

fn sorted_checked(xs: &[f64], min_n: usize, max_n: usize) -> Result<Vec<f64>> {
    if xs.len() < min_n || xs.len() > max_n {
        return Err(Error::InvalidArgument(format!(
            "normality test needs {min_n}..={max_n} values, got {}",
            xs.len()
        )));
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("normality test input".into()));
    }
    let mut x = xs.to_vec();
    x.sort_by(f64::total_cmp);
    if x[x.len() - 1] - x[0] < 1e-300 {
        return Err(Error::Degenerate("normality test input has zero range".into()));
    }
    Ok(x)
}

const SW_C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056];
const SW_C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
const SW_C3: [f64; 4] = [0.5440, -0.39978, 0.025054, -6.714e-4];
const SW_C4: [f64; 4] = [1.3822, -0.77857, 0.062767, -0.0020322];
const SW_C5: [f64; 4] = [-1.5861, -0.31082, -0.083751, 0.0038915];
const SW_C6: [f64; 3] = [-0.4803, -0.082676, 0.0030302];
const SW_G: [f64; 2] = [-2.273, 0.459];

/// Shapiro–Wilk `W` and its p-value, for `3 <= n <= 5000`.
pub fn shapiro_wilk(xs: &[f64]) -> Result<NormalityVerdict> {
    let x = sorted_checked(xs, 3, 5000)?;
    let n = x.len();
    let nf = n as f64;
    let half = n / 2;

    // a[i] for the lower half, positive; the full vector is antisymmetric.
    let mut a = vec![0.0; half];
    if n == 3 {
        a[0] = 0.5f64.sqrt();
    } else {
        let normal = std_normal();
        let m: Vec<f64> = (1..=half)
            .map(|i| -normal.inverse_cdf((i as f64 - 0.375) / (nf + 0.25)))
            .collect();
        let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / nf.sqrt();
        let a1 = poly(&SW_C1, rsn) + m[0] / ssumm2;
        let (first, fac) = if n > 5 {
            let a2 = poly(&SW_C2, rsn) + m[1] / ssumm2;
            let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2)).sqrt();
            a[1] = a2;
            (2, fac)
        } else {
            (1, ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt())
        };
        a[0] = a1;
        for i in first..half {
            a[i] = m[i] / fac;
        }
    }

    let mean = x.iter().sum::<f64>() / nf;
    let ssq: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    let num: f64 = (0..half).map(|i| a[i] * (x[n - 1 - i] - x[i])).sum();
    let w = (num * num / ssq).min(1.0);

    if n == 3 {
        let p = 6.0 / std::f64::consts::PI * (w.sqrt().asin() - 0.75f64.sqrt().asin());
        return Ok(NormalityVerdict::new(w, p.max(0.0)));
    }
    let y = (1.0 - w).ln();
    let (z_arg, m, s) = if n <= 11 {
        let gamma = poly(&SW_G, nf);
        if y >= gamma {
            return Ok(NormalityVerdict::new(w, 0.0));
        }
        (-(gamma - y).ln(), poly(&SW_C3, nf), poly(&SW_C4, nf).exp())
    } else {
        let ln_n = nf.ln();
        (y, poly(&SW_C5, ln_n), poly(&SW_C6, ln_n).exp())
    };
    let p = std_normal().sf((z_arg - m) / s);
    Ok(NormalityVerdict::new(w, p))
}

/// Anderson–Darling `A^2` against a normal law with estimated parameters;
/// the p-value uses the small-sample corrected `A*^2`.
pub fn anderson_darling(xs: &[f64]) -> Result<NormalityVerdict> {
    let x = sorted_checked(xs, 8, usize::MAX)?;
    let n = x.len();
    let nf = n as f64;
    let mean = x.iter().sum::<f64>() / nf;
    let sd = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0)).sqrt();
    let normal = std_normal();
    let z: Vec<f64> = x.iter().map(|v| (v - mean) / sd).collect();
    let s: f64 = (0..n)
        .map(|i| (2 * i + 1) as f64 * (normal.cdf(z[i]).ln() + normal.sf(z[n - 1 - i]).ln()))
        .sum();
    let a2 = -nf - s / nf;
    let a = a2 * (1.0 + 0.75 / nf + 2.25 / (nf * nf));
    let p = if a >= 0.6 {
        (1.2937 - 5.709 * a + 0.0186 * a * a).exp()
    } else if a >= 0.34 {
        (0.9177 - 4.279 * a - 1.38 * a * a).exp()
    } else if a >= 0.2 {
        1.0 - (-8.318 + 42.796 * a - 59.938 * a * a).exp()
    } else {
        1.0 - (-13.436 + 101.14 * a - 223.73 * a * a).exp()
    };
    Ok(NormalityVerdict::new(a2, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    // Reference values from scipy.stats.shapiro / scipy.stats.anderson.
    const SAMPLE: [f64; 12] = [
        0.31, -1.2, 0.77, 2.05, -0.41, 0.0, 1.13, -0.88, 0.52, -2.3, 0.19, 0.95,
    ];

    // scipy evaluates W in single precision.
    const SW_REF_W: f64 = 0.978_862_09;
    const SW_REF_P: f64 = 0.978_716_49;
    const SW_SMALL_W: f64 = 0.897_572_38;
    const SW_SMALL_P: f64 = 0.396_613_94;
    const SW_THREE_P: f64 = 0.636_886_85;
    const AD_REF_A2: f64 = 0.188_245_934;

    #[test]
    fn shapiro_wilk_matches_reference() {
        let v = shapiro_wilk(&SAMPLE).unwrap();
        assert!((v.statistic - SW_REF_W).abs() < 1e-5, "{v:?}");
        assert!((v.p_value - SW_REF_P).abs() < 1e-4, "{v:?}");

        let small = [1.0, 2.5, 2.0, 4.0, 7.5];
        let v = shapiro_wilk(&small).unwrap();
        assert!((v.statistic - SW_SMALL_W).abs() < 1e-5, "{v:?}");
        assert!((v.p_value - SW_SMALL_P).abs() < 1e-4, "{v:?}");

        let three = [1.0, 2.0, 4.0];
        let v = shapiro_wilk(&three).unwrap();
        assert!((v.statistic - 27.0 / 28.0).abs() < 1e-12);
        assert!((v.p_value - SW_THREE_P).abs() < 1e-5, "{v:?}");
    }

    #[test]
    fn anderson_darling_matches_reference() {
        let v = anderson_darling(&SAMPLE).unwrap();
        assert!((v.statistic - AD_REF_A2).abs() < 1e-6, "{v:?}");
    }

    #[test]
    fn degenerate_inputs() {
        assert!(shapiro_wilk(&[1.0, 1.0, 1.0, 1.0]).is_err());
        assert!(shapiro_wilk(&[1.0, 2.0]).is_err());
        assert!(anderson_darling(&[0.0; 3]).is_err());
        assert!(shapiro_wilk(&[0.0, f64::NAN, 1.0]).is_err());
    }

    fn rejection_rate(test: NormalityTest, draw: impl Fn(&mut crate::rng::StreamRng) -> f64, seed: u64) -> f64 {
        let mut rng = stream(seed, "test/normality");
        let trials = 1000;
        let mut rejected = 0;
        for _ in 0..trials {
            let xs: Vec<f64> = (0..50).map(|_| draw(&mut rng)).collect();
            if test.run(&xs).unwrap().reject {
                rejected += 1;
            }
        }
        rejected as f64 / trials as f64
    }

    #[test]
    fn calibration_and_power() {
        for test in [NormalityTest::ShapiroWilk, NormalityTest::AndersonDarling] {
            let size = rejection_rate(test, |r| StandardNormal.sample(r), 1);
            assert!((0.03..=0.07).contains(&size), "{test:?} size {size}");
            let power = rejection_rate(test, |r| r.random_range(-1.0..1.0), 2);
            assert!(power > 0.5, "{test:?} power {power}");
        }
    }
}
