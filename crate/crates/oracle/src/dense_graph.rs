//! Straight-line dense graph convolution and graph attention.

use crate::{OracleError, MAX_DENSE_NODES};

pub enum DenseMode<'a> {
    /// Stacked `ReLU(Â X W)` layers; `Â` is the self-loop symmetric
    /// renormalization of the raw adjacency, computed here.
    Gcn { layers: &'a [Vec<Vec<f64>>] },
    /// Single-head attention over the neighbourhoods `A[i][j] > 0`; nodes with
    /// no neighbour attend to themselves.
    Gat {
        w: &'a [Vec<f64>],
        a: &'a [f64],
        negative_slope: f64,
    },
}

fn project(x: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
    let out = w[0].len();
    let mut y = vec![0.0; out];
    for (c, xc) in x.iter().enumerate() {
        for o in 0..out {
            y[o] += xc * w[c][o];
        }
    }
    y
}

pub fn dense_graph_reference(
    x: &[Vec<f64>],
    adjacency: &[Vec<f64>],
    mode: DenseMode<'_>,
) -> Result<Vec<Vec<f64>>, OracleError> {
    let n = x.len();
    if n > MAX_DENSE_NODES {
        return Err(OracleError::SizeCapExceeded {
            got: n,
            cap: MAX_DENSE_NODES,
        });
    }
    if adjacency.len() != n || adjacency.iter().any(|r| r.len() != n) {
        return Err(OracleError::Shape("adjacency must be n x n".into()));
    }
    match mode {
        DenseMode::Gcn { layers } => {
            let mut degree = vec![0.0; n];
            for i in 0..n {
                degree[i] = 1.0 + adjacency[i].iter().sum::<f64>();
            }
            let mut norm = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    let self_loop = if i == j { 1.0 } else { 0.0 };
                    norm[i][j] = (adjacency[i][j] + self_loop) / (degree[i].sqrt() * degree[j].sqrt());
                }
            }
            let mut h: Vec<Vec<f64>> = x.to_vec();
            for w in layers {
                let projected: Vec<Vec<f64>> = h.iter().map(|row| project(row, w)).collect();
                let width = w[0].len();
                let mut next = vec![vec![0.0; width]; n];
                for i in 0..n {
                    for j in 0..n {
                        for o in 0..width {
                            next[i][o] += norm[i][j] * projected[j][o];
                        }
                    }
                    for v in next[i].iter_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                h = next;
            }
            Ok(h)
        }
        DenseMode::Gat { w, a, negative_slope } => {
            let h: Vec<Vec<f64>> = x.iter().map(|row| project(row, w)).collect();
            let width = w[0].len();
            if a.len() != 2 * width {
                return Err(OracleError::Shape("attention vector must have length 2C'".into()));
            }
            let mut out = vec![vec![0.0; width]; n];
            for i in 0..n {
                let mut neighbours: Vec<usize> = (0..n).filter(|&j| adjacency[i][j] > 0.0).collect();
                if neighbours.is_empty() {
                    neighbours.push(i);
                }
                let scores: Vec<f64> = neighbours
                    .iter()
                    .map(|&j| {
                        let mut s = 0.0;
                        for o in 0..width {
                            s += a[o] * h[i][o] + a[width + o] * h[j][o];
                        }
                        if s < 0.0 {
                            s * negative_slope
                        } else {
                            s
                        }
                    })
                    .collect();
                let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                let total: f64 = exps.iter().sum();
                for (&j, e) in neighbours.iter().zip(&exps) {
                    for o in 0..width {
                        out[i][o] += e / total * h[j][o];
                    }
                }
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
    }

    #[test]
    fn identity_gcn_is_relu() {
        let x = vec![vec![1.0, -2.0], vec![-0.5, 3.0]];
        let a = vec![vec![0.0; 2]; 2];
        let layers = vec![eye(2), eye(2)];
        let out = dense_graph_reference(&x, &a, DenseMode::Gcn { layers: &layers }).unwrap();
        assert_eq!(out, vec![vec![1.0, 0.0], vec![0.0, 3.0]]);
    }

    #[test]
    fn singleton_attention_copies_projection() {
        let x = vec![vec![1.0, 2.0], vec![5.0, -1.0]];
        let a = vec![vec![0.0; 2]; 2];
        let w = eye(2);
        let out = dense_graph_reference(
            &x,
            &a,
            DenseMode::Gat {
                w: &w,
                a: &[0.3, -0.2, 1.0, 4.0],
                negative_slope: 0.2,
            },
        )
        .unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn refuses_large_graphs() {
        let x = vec![vec![0.0]; MAX_DENSE_NODES + 1];
        let a = vec![vec![0.0; MAX_DENSE_NODES + 1]; MAX_DENSE_NODES + 1];
        let layers = vec![vec![vec![1.0]]];
        assert!(dense_graph_reference(&x, &a, DenseMode::Gcn { layers: &layers }).is_err());
    }
}
