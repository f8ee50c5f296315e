//! Vector-Jacobian products, one arm per [`Op`].

use nalgebra::Matrix3;

use crate::ops::{gemm_acc, rows_cols, sigmoid, transpose};
use crate::tape::{Node, Op, Tape, Var};

fn acc(tape: &Tape, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    if !tape.rg(v) {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Like `acc` but builds the contribution lazily, skipping work for
/// inputs that do not require grad.
fn acc_with(tape: &Tape, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce() -> Vec<f64>) {
    if tape.rg(v) {
        acc(tape, grads, v, f());
    }
}

pub(crate) fn vjp(tape: &Tape, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Linear { x, w, b } => {
            let (rows, cin) = rows_cols(tape.shape(*x));
            let cout = tape.shape(*w)[1];
            acc_with(tape, grads, *x, || {
                let wt = transpose(tape.data(*w), cin, cout);
                let mut dx = vec![0.0; rows * cin];
                gemm_acc(g, &wt, &mut dx, rows, cout, cin);
                dx
            });
            acc_with(tape, grads, *w, || {
                let xt = transpose(tape.data(*x), rows, cin);
                let mut dw = vec![0.0; cin * cout];
                gemm_acc(&xt, g, &mut dw, cin, rows, cout);
                dw
            });
            if let Some(b) = b {
                acc_with(tape, grads, *b, || column_sums(g, rows, cout));
            }
        }
        Op::MatMul { a, b } => {
            let (m, k) = (tape.shape(*a)[0], tape.shape(*a)[1]);
            let n = tape.shape(*b)[1];
            acc_with(tape, grads, *a, || {
                let bt = transpose(tape.data(*b), k, n);
                let mut da = vec![0.0; m * k];
                gemm_acc(g, &bt, &mut da, m, n, k);
                da
            });
            acc_with(tape, grads, *b, || {
                let at = transpose(tape.data(*a), m, k);
                let mut db = vec![0.0; k * n];
                gemm_acc(&at, g, &mut db, k, m, n);
                db
            });
        }
        Op::Transpose(x) => {
            let s = tape.shape(*x);
            let (r, c) = (s[0], s[1]);
            acc_with(tape, grads, *x, || transpose(g, c, r));
        }
        Op::Reshape(x) => acc(tape, grads, *x, g.to_vec()),
        Op::Add(a, b) => {
            acc(tape, grads, *a, g.to_vec());
            acc(tape, grads, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            acc(tape, grads, *a, g.to_vec());
            acc_with(tape, grads, *b, || g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            acc_with(tape, grads, *a, || g.iter().zip(tape.data(*b)).map(|(g, y)| g * y).collect());
            acc_with(tape, grads, *b, || g.iter().zip(tape.data(*a)).map(|(g, x)| g * x).collect());
        }
        Op::AddRow { x, row } => {
            let (rows, cols) = rows_cols(tape.shape(*x));
            acc(tape, grads, *x, g.to_vec());
            acc_with(tape, grads, *row, || column_sums(g, rows, cols));
        }
        Op::MulCol { x, col } => {
            let (rows, cols) = rows_cols(tape.shape(*x));
            let c = tape.data(*col);
            acc_with(tape, grads, *x, || {
                let mut dx = g.to_vec();
                for r in 0..rows {
                    dx[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v *= c[r]);
                }
                dx
            });
            acc_with(tape, grads, *col, || {
                let xd = tape.data(*x);
                (0..rows)
                    .map(|r| {
                        let s = r * cols..(r + 1) * cols;
                        g[s.clone()].iter().zip(&xd[s]).map(|(a, b)| a * b).sum()
                    })
                    .collect()
            });
        }
        Op::Scale(x, s) => acc_with(tape, grads, *x, || g.iter().map(|v| v * s).collect()),
        Op::LeakyRelu(x, slope) => acc_with(tape, grads, *x, || {
            g.iter()
                .zip(tape.data(*x))
                .map(|(g, &v)| if v > 0.0 { *g } else { g * slope })
                .collect()
        }),
        Op::Sigmoid(x) => acc_with(tape, grads, *x, || {
            g.iter().zip(&node.data).map(|(g, y)| g * y * (1.0 - y)).collect()
        }),
        Op::Softplus(x) => acc_with(tape, grads, *x, || {
            g.iter().zip(tape.data(*x)).map(|(g, &v)| g * sigmoid(v)).collect()
        }),
        Op::Abs(x) => acc_with(tape, grads, *x, || {
            g.iter()
                .zip(tape.data(*x))
                .map(|(g, &v)| {
                    if v > 0.0 {
                        *g
                    } else if v < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })
                .collect()
        }),
        Op::Softmax(x) => acc_with(tape, grads, *x, || {
            let (rows, k) = rows_cols(&node.shape);
            let y = &node.data;
            let mut dx = vec![0.0; y.len()];
            for r in 0..rows {
                let s = r * k..(r + 1) * k;
                let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                for i in s {
                    dx[i] = y[i] * (g[i] - dot);
                }
            }
            dx
        }),
        Op::RowNorm(x) => acc_with(tape, grads, *x, || {
            let (rows, cols) = rows_cols(tape.shape(*x));
            let xd = tape.data(*x);
            let mut dx = vec![0.0; xd.len()];
            for r in 0..rows {
                let n = node.data[r];
                if n > 0.0 {
                    for c in 0..cols {
                        dx[r * cols + c] = g[r] * xd[r * cols + c] / n;
                    }
                }
            }
            dx
        }),
        Op::Sum(x) => acc_with(tape, grads, *x, || vec![g[0]; tape.data(*x).len()]),
        Op::SumRows(x) => acc_with(tape, grads, *x, || {
            let (rows, _) = rows_cols(tape.shape(*x));
            let mut dx = Vec::with_capacity(rows * g.len());
            for _ in 0..rows {
                dx.extend_from_slice(g);
            }
            dx
        }),
        Op::SumLastAxis(x) => acc_with(tape, grads, *x, || {
            let (rows, cols) = rows_cols(tape.shape(*x));
            let mut dx = Vec::with_capacity(rows * cols);
            for &gr in &g[..rows] {
                dx.extend(std::iter::repeat_n(gr, cols));
            }
            dx
        }),
        Op::DivScalar { x, s } => {
            let sv = tape.data(*s)[0];
            acc_with(tape, grads, *x, || g.iter().map(|v| v / sv).collect());
            acc_with(tape, grads, *s, || {
                let dot: f64 = g.iter().zip(tape.data(*x)).map(|(a, b)| a * b).sum();
                vec![-dot / (sv * sv)]
            });
        }
        Op::Gather { x, idx } => acc_with(tape, grads, *x, || {
            let c = tape.shape(*x)[1];
            let mut dx = vec![0.0; tape.data(*x).len()];
            for (pos, &i) in idx.iter().enumerate() {
                for (d, v) in dx[i * c..(i + 1) * c].iter_mut().zip(&g[pos * c..(pos + 1) * c]) {
                    *d += v;
                }
            }
            dx
        }),
        Op::MaxNeighbors { x, argmax } => acc_with(tape, grads, *x, || {
            let s = tape.shape(*x);
            let (m, k, c) = (s[0], s[1], s[2]);
            let mut dx = vec![0.0; m * k * c];
            for i in 0..m {
                for ch in 0..c {
                    let j = argmax[i * c + ch];
                    dx[(i * k + j) * c + ch] += g[i * c + ch];
                }
            }
            dx
        }),
        Op::WeightedSum { x, w } => {
            let s = tape.shape(*x);
            let (m, k, c) = (s[0], s[1], s[2]);
            acc_with(tape, grads, *x, || {
                let wd = tape.data(*w);
                let mut dx = vec![0.0; m * k * c];
                for i in 0..m {
                    for j in 0..k {
                        let wij = wd[i * k + j];
                        for ch in 0..c {
                            dx[(i * k + j) * c + ch] = wij * g[i * c + ch];
                        }
                    }
                }
                dx
            });
            acc_with(tape, grads, *w, || {
                let xd = tape.data(*x);
                let mut dw = vec![0.0; m * k];
                for i in 0..m {
                    let gi = &g[i * c..(i + 1) * c];
                    for j in 0..k {
                        let row = &xd[(i * k + j) * c..(i * k + j + 1) * c];
                        dw[i * k + j] = gi.iter().zip(row).map(|(a, b)| a * b).sum();
                    }
                }
                dw
            });
        }
        Op::MaxLastAxis { x, argmax } => acc_with(tape, grads, *x, || {
            let (rows, cols) = rows_cols(tape.shape(*x));
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                dx[r * cols + argmax[r]] = g[r];
            }
            dx
        }),
        Op::Concat { parts } => {
            let total = *node.shape.last().unwrap();
            let rows = node.data.len() / total;
            let mut offset = 0;
            for &p in parts {
                let w = *tape.shape(p).last().unwrap();
                acc_with(tape, grads, p, || {
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    dp
                });
                offset += w;
            }
        }
        Op::Norm {
            x,
            scale,
            shift,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let (rows, c) = rows_cols(&node.shape);
            acc_with(tape, grads, *shift, || column_sums(g, rows, c));
            acc_with(tape, grads, *scale, || {
                let mut ds = vec![0.0; c];
                for r in 0..rows {
                    for ch in 0..c {
                        ds[ch] += g[r * c + ch] * xhat[r * c + ch];
                    }
                }
                ds
            });
            acc_with(tape, grads, *x, || {
                let gamma = tape.data(*scale);
                let mut dx = vec![0.0; rows * c];
                if *batch_stats {
                    let n = rows as f64;
                    let mut sum_dh = vec![0.0; c];
                    let mut sum_dh_h = vec![0.0; c];
                    for r in 0..rows {
                        for ch in 0..c {
                            let dh = g[r * c + ch] * gamma[ch];
                            sum_dh[ch] += dh;
                            sum_dh_h[ch] += dh * xhat[r * c + ch];
                        }
                    }
                    for r in 0..rows {
                        for ch in 0..c {
                            let dh = g[r * c + ch] * gamma[ch];
                            dx[r * c + ch] = inv_std[ch] / n
                                * (n * dh - sum_dh[ch] - xhat[r * c + ch] * sum_dh_h[ch]);
                        }
                    }
                } else {
                    for r in 0..rows {
                        for ch in 0..c {
                            dx[r * c + ch] = g[r * c + ch] * gamma[ch] * inv_std[ch];
                        }
                    }
                }
                dx
            });
        }
        Op::Polar { h, u, v, sigma } => acc_with(tape, grads, *h, || {
            // dR = U [(X − Xᵀ) ∘ F] Vᵀ with X = Uᵀ dH V, F_ij = 1/(σ_i + σ_j);
            // its adjoint maps G to U [(K∘F) − (K∘F)ᵀ] Vᵀ with K = Uᵀ G V.
            let u = Matrix3::from_row_slice(u);
            let v = Matrix3::from_row_slice(v);
            let gm = Matrix3::from_row_slice(g);
            let k = u.transpose() * gm * v;
            let mut kf = Matrix3::zeros();
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        let den = sigma[i] + sigma[j];
                        if den.abs() > 1e-300 {
                            kf[(i, j)] = k[(i, j)] / den;
                        }
                    }
                }
            }
            let dh = u * (kf - kf.transpose()) * v.transpose();
            crate::ops::row_major(&dh).to_vec()
        }),
    }
}

fn column_sums(g: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
    out
}
