//! Aggregation and the paired comparison: medians, interquartile ranges,
//! an exact one-sided sign test, and the CSV/summary writers every study
//! shares. Float formatting goes through one helper so reruns reproduce
//! reports byte for byte.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Shortest round-tripping decimal form; stable across runs because it is
/// a pure function of the bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn sorted(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::contract("statistic of an empty sample".to_string()));
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sample for a statistic".to_string()));
    }
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(s)
}

pub fn median(xs: &[f64]) -> Result<f64> {
    let s = sorted(xs)?;
    let n = s.len();
    Ok(if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 })
}

/// Linearly interpolated quantile (the convention numpy defaults to):
/// rank h = q·(n−1), value = s[⌊h⌋] + (h−⌊h⌋)·(s[⌊h⌋+1] − s[⌊h⌋]).
pub fn quantile(xs: &[f64], q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::contract(format!("quantile {q} outside [0, 1]")));
    }
    let s = sorted(xs)?;
    let h = q * (s.len() - 1) as f64;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    Ok(if lo + 1 < s.len() { s[lo] + frac * (s[lo + 1] - s[lo]) } else { s[lo] })
}

/// (first quartile, third quartile).
pub fn iqr(xs: &[f64]) -> Result<(f64, f64)> {
    Ok((quantile(xs, 0.25)?, quantile(xs, 0.75)?))
}

#[derive(Clone, Copy, Debug)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: f64,
}

/// Exact one-sided sign test of H1: a tends to exceed b, over paired
/// samples. Ties carry no direction and are dropped; with no effective
/// pairs the test is uninformative and p = 1. p = P[Bin(n, ½) ≥ wins].
pub fn sign_test_greater(a: &[f64], b: &[f64]) -> Result<SignTest> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "paired samples have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut wins = 0usize;
    let mut losses = 0usize;
    let mut ties = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::NonFinite("sign test pair".to_string()));
        }
        if x > y {
            wins += 1;
        } else if x < y {
            losses += 1;
        } else {
            ties += 1;
        }
    }
    let n = wins + losses;
    let p_value = if n == 0 { 1.0 } else { binomial_upper_tail(n, wins) };
    Ok(SignTest { wins, losses, ties, p_value })
}

/// P[Bin(n, 1/2) ≥ k] via the pmf recurrence, exact to f64 roundoff.
fn binomial_upper_tail(n: usize, k: usize) -> f64 {
    let mut pmf = 0.5f64.powi(n as i32);
    let mut tail = 0.0;
    for j in 0..=n {
        if j >= k {
            tail += pmf;
        }
        if j < n {
            pmf *= (n - j) as f64 / (j + 1) as f64;
        }
    }
    tail.min(1.0)
}

/// Write rows as comma-separated UTF-8. Cells must not contain commas or
/// newlines; the writer refuses rather than inventing an escaping scheme
/// downstream readers would then need to know about.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(Error::contract(format!(
                "csv row {i} has {} cells, header has {}",
                row.len(),
                header.len()
            )));
        }
        for cell in row {
            if cell.contains(',') || cell.contains('\n') {
                return Err(Error::contract(format!("csv cell {cell:?} needs escaping")));
            }
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Per-noise-source aggregate of localization quality.
#[derive(Clone, Debug)]
pub struct Aggregate {
    pub median_iou: f64,
    pub iou_q1: f64,
    pub iou_q3: f64,
    pub median_offset: f64,
    pub blank_count: usize,
}

/// Offsets exist only for records with a nonblank output, so that list may
/// be empty even when the IoU list is not; its median is then undefined.
pub fn aggregate(ious: &[f64], offsets: &[f64], blanks: usize) -> Result<Aggregate> {
    let (q1, q3) = iqr(ious)?;
    Ok(Aggregate {
        median_iou: median(ious)?,
        iou_q1: q1,
        iou_q3: q3,
        median_offset: if offsets.is_empty() { f64::NAN } else { median(offsets)? },
        blank_count: blanks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even_and_errors() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
        assert!(median(&[]).is_err());
        assert!(median(&[f64::NAN]).is_err());
    }

    #[test]
    fn quartiles_interpolate_linearly() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let (q1, q3) = iqr(&xs).unwrap();
        assert!((q1 - 1.75).abs() < 1e-12);
        assert!((q3 - 3.25).abs() < 1e-12);
        assert_eq!(quantile(&xs, 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&xs, 1.0).unwrap(), 4.0);
    }

    #[test]
    fn sign_test_known_values() {
        // 5 wins of 5: p = 2^-5 = 0.03125
        let a = [2.0, 2.0, 2.0, 2.0, 2.0];
        let b = [1.0, 1.0, 1.0, 1.0, 1.0];
        let t = sign_test_greater(&a, &b).unwrap();
        assert_eq!(t.wins, 5);
        assert!((t.p_value - 0.03125).abs() < 1e-12);

        // 4 wins, 1 loss: p = (5 choose 4 + 5 choose 5)/32 = 6/32
        let b2 = [1.0, 1.0, 1.0, 1.0, 3.0];
        let t2 = sign_test_greater(&a, &b2).unwrap();
        assert!((t2.p_value - 6.0 / 32.0).abs() < 1e-12);
    }

    #[test]
    fn sign_test_identical_samples_is_uninformative() {
        let a = [1.0, 2.0, 3.0];
        let t = sign_test_greater(&a, &a).unwrap();
        assert_eq!(t.ties, 3);
        assert_eq!(t.p_value, 1.0);
    }

    #[test]
    fn sign_test_threshold_at_twenty_pairs() {
        // the acceptance studies run 20 pairs: 15 wins is the smallest
        // count that clears p < 0.05
        let mut a = vec![1.0; 20];
        let b = vec![0.0; 20];
        let p15 = {
            let mut a = a.clone();
            for x in a.iter_mut().take(5) {
                *x = -1.0;
            }
            sign_test_greater(&a, &b).unwrap().p_value
        };
        assert!(p15 < 0.05, "15/20 gives p = {p15}");
        for x in a.iter_mut().take(6) {
            *x = -1.0;
        }
        let p14 = sign_test_greater(&a, &b).unwrap().p_value;
        assert!(p14 >= 0.05, "14/20 gives p = {p14}");
    }

    #[test]
    fn sign_test_rejects_unpaired_input() {
        assert!(sign_test_greater(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn binomial_tail_full_range() {
        assert_eq!(binomial_upper_tail(10, 0), 1.0);
        assert!((binomial_upper_tail(10, 10) - 0.5f64.powi(10)).abs() < 1e-15);
        // symmetry: P[X ≥ k] + P[X ≥ n−k+1] = 1 for p = 1/2
        for k in 0..=7 {
            let s = binomial_upper_tail(7, k) + binomial_upper_tail(7, 7 - k + 1);
            assert!((s - 1.0).abs() < 1e-12, "k={k}: {s}");
        }
    }

    #[test]
    fn csv_writer_layout_and_refusals() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_csv(
            &path,
            &["a", "b"],
            &[vec!["1".into(), "x".into()], vec![fmt_f64(0.5), "y".into()]],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "a,b\n1,x\n0.5,y\n");
        assert!(write_csv(&path, &["a"], &[vec!["1,2".into()]]).is_err());
        assert!(write_csv(&path, &["a", "b"], &[vec!["1".into()]]).is_err());
    }

    #[test]
    fn float_formatting_round_trips() {
        for v in [0.0, -1.5, 1.0 / 3.0, 6.02e23, 1e-12] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
        }
    }
}
