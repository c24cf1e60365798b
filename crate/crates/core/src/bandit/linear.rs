use serde::{Deserialize, Serialize};

/// Online ridge regression with an implicit bias feature.
///
/// Keeps `A^-1` and `b` for `A = lambda*I + sum w x x^T`, `b = sum w r x`,
/// updated by Sherman-Morrison in `O(d^2)`. Storage is allocated on the first
/// update; until then the model predicts 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineRidge {
    dim: usize,
    lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    state: Option<RidgeState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RidgeState {
    a_inv: Vec<f64>,
    b: Vec<f64>,
    theta: Vec<f64>,
}

impl OnlineRidge {
    /// `features` excludes the bias term.
    pub fn new(features: usize, lambda: f64) -> Self {
        Self {
            dim: features + 1,
            lambda,
            state: None,
        }
    }

    pub fn features(&self) -> usize {
        self.dim - 1
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let Some(s) = &self.state else {
            return 0.0;
        };
        x.iter().zip(&s.theta).map(|(a, b)| a * b).sum::<f64>() + s.theta[self.dim - 1]
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.state.as_ref().map(|s| s.theta.as_slice())
    }

    pub fn update(&mut self, x: &[f64], reward: f64, weight: f64) {
        debug_assert_eq!(x.len(), self.dim - 1);
        if weight <= 0.0 {
            return;
        }
        let d = self.dim;
        let lambda = self.lambda;
        let s = self.state.get_or_insert_with(|| {
            let mut a_inv = vec![0.0; d * d];
            for i in 0..d {
                a_inv[i * d + i] = 1.0 / lambda;
            }
            RidgeState {
                a_inv,
                b: vec![0.0; d],
                theta: vec![0.0; d],
            }
        });
        let feat = |i: usize| if i + 1 == d { 1.0 } else { x[i] };
        // u = A^-1 x  (A^-1 is symmetric)
        let mut u = vec![0.0; d];
        for (i, ui) in u.iter_mut().enumerate() {
            let row = &s.a_inv[i * d..(i + 1) * d];
            *ui = (0..d).map(|j| row[j] * feat(j)).sum();
        }
        let denom = 1.0 + weight * (0..d).map(|i| feat(i) * u[i]).sum::<f64>();
        let scale = weight / denom;
        for i in 0..d {
            let ui = u[i] * scale;
            let row = &mut s.a_inv[i * d..(i + 1) * d];
            for (j, cell) in row.iter_mut().enumerate() {
                *cell -= ui * u[j];
            }
        }
        for i in 0..d {
            s.b[i] += weight * reward * feat(i);
        }
        for i in 0..d {
            let row = &s.a_inv[i * d..(i + 1) * d];
            s.theta[i] = row.iter().zip(&s.b).map(|(a, b)| a * b).sum();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Closed-form ridge solution via Gaussian elimination.
    fn batch_solution(xs: &[Vec<f64>], ys: &[f64], lambda: f64) -> Vec<f64> {
        let d = xs[0].len() + 1;
        let mut a = vec![vec![0.0; d + 1]; d];
        for (i, row) in a.iter_mut().enumerate() {
            row[i] = lambda;
        }
        for (x, y) in xs.iter().zip(ys) {
            let f: Vec<f64> = x.iter().copied().chain(std::iter::once(1.0)).collect();
            for i in 0..d {
                for j in 0..d {
                    a[i][j] += f[i] * f[j];
                }
                a[i][d] += f[i] * y;
            }
        }
        for col in 0..d {
            let pivot = (col..d).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs())).unwrap();
            a.swap(col, pivot);
            for r in 0..d {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    let pivot = a[col].clone();
                    for (x, p) in a[r][col..=d].iter_mut().zip(&pivot[col..=d]) {
                        *x -= f * p;
                    }
                }
            }
        }
        (0..d).map(|i| a[i][d] / a[i][i]).collect()
    }

    #[test]
    fn matches_batch_ridge() {
        let xs = vec![
            vec![1.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0],
            vec![1.0, 1.0, 0.0],
            vec![0.5, -0.2, 0.3],
            vec![0.0, 0.0, 1.0],
        ];
        let ys = vec![1.0, 0.0, 1.0, 0.3, 0.0];
        let mut model = OnlineRidge::new(3, 1.0);
        for (x, y) in xs.iter().zip(&ys) {
            model.update(x, *y, 1.0);
        }
        let want = batch_solution(&xs, &ys, 1.0);
        for (got, want) in model.weights().unwrap().iter().zip(&want) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn weight_acts_as_repetition() {
        let mut twice = OnlineRidge::new(2, 1.0);
        twice.update(&[1.0, 0.0], 1.0, 1.0);
        twice.update(&[1.0, 0.0], 1.0, 1.0);
        let mut weighted = OnlineRidge::new(2, 1.0);
        weighted.update(&[1.0, 0.0], 1.0, 2.0);
        assert!((twice.predict(&[1.0, 0.0]) - weighted.predict(&[1.0, 0.0])).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_is_a_no_op() {
        let mut m = OnlineRidge::new(2, 1.0);
        m.update(&[1.0, 1.0], 1.0, 0.0);
        assert_eq!(m, OnlineRidge::new(2, 1.0));
        assert_eq!(m.predict(&[1.0, 1.0]), 0.0);
    }
}
