//! Euclidean projection onto the probability simplex by the sort-and-threshold
//! closed form: find the largest prefix of the sorted coordinates whose
//! running mean stays below each member, shift by that mean, clip at zero.

/// Project `y` onto {x : x >= 0, sum x = 1}.
pub fn project_simplex(y: &[f64]) -> Vec<f64> {
    let k = y.len();
    assert!(k >= 1);
    let mut sorted = y.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let candidate = (cumsum - 1.0) / (i as f64 + 1.0);
        if v - candidate > 0.0 {
            theta = candidate;
        }
    }
    y.iter().map(|&v| (v - theta).max(0.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use approx::assert_abs_diff_eq;

    /// Exhaustive active-set oracle: for every subset S of coordinates forced
    /// to zero, project onto the affine set {sum over complement = 1}, keep
    /// feasible candidates, return the nearest. Independent of the
    /// sort-based route.
    fn oracle_project(y: &[f64]) -> Vec<f64> {
        let k = y.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 0..(1u32 << k) {
            let free: Vec<usize> = (0..k).filter(|i| mask & (1 << i) == 0).collect();
            if free.is_empty() {
                continue;
            }
            let s: f64 = free.iter().map(|&i| y[i]).sum();
            let shift = (s - 1.0) / free.len() as f64;
            let mut x = vec![0.0; k];
            let mut ok = true;
            for &i in &free {
                x[i] = y[i] - shift;
                if x[i] < -1e-12 {
                    ok = false;
                    break;
                }
            }
            if !ok {
                continue;
            }
            let dist: f64 = (0..k).map(|i| (x[i] - y[i]).powi(2)).sum();
            if best.as_ref().map_or(true, |(d, _)| dist < *d) {
                best = Some((dist, x));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn already_on_simplex_is_fixed() {
        let y = vec![0.2, 0.5, 0.3];
        let x = project_simplex(&y);
        for i in 0..3 {
            assert_abs_diff_eq!(x[i], y[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn matches_active_set_oracle_on_random_points() {
        let mut rng = CounterRng::new(31, 0);
        for trial in 0..200 {
            let k = 1 + trial % 5;
            let y: Vec<f64> = (0..k).map(|_| 4.0 * rng.normal()).collect();
            let x = project_simplex(&y);
            let x_oracle = oracle_project(&y);
            let sum: f64 = x.iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
            assert!(x.iter().all(|&v| v >= 0.0));
            for i in 0..k {
                assert_abs_diff_eq!(x[i], x_oracle[i], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn dominant_coordinate_wins() {
        let x = project_simplex(&[10.0, 0.0, 0.0]);
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], 0.0, epsilon = 1e-12);
    }
}
