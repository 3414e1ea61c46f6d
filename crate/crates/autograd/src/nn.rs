use ndarray::{ArrayD, Axis, IxDyn};

use crate::tape::{Tape, Var};
use crate::Element;

impl<E: Element> Tape<E> {
    pub fn silu(&self, x: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            inner.nodes[x.0].value.mapv(|v| v * sigmoid(v))
        };
        self.push(
            out,
            vec![x.0],
            Box::new(|args| {
                let dx = ndarray::Zip::from(args.grad)
                    .and(args.inputs[0])
                    .map_collect(|&g, &v| {
                        let s = sigmoid(v);
                        g * s * (E::one() + v * (E::one() - s))
                    });
                vec![Some(dx)]
            }),
        )
    }

    pub fn exp(&self, x: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            inner.nodes[x.0].value.mapv(|v| v.exp())
        };
        self.push(
            out,
            vec![x.0],
            Box::new(|args| {
                let dx = ndarray::Zip::from(args.grad)
                    .and(args.out)
                    .map_collect(|&g, &y| g * y);
                vec![Some(dx)]
            }),
        )
    }

    pub fn tanh(&self, x: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            inner.nodes[x.0].value.mapv(|v| v.tanh())
        };
        self.push(
            out,
            vec![x.0],
            Box::new(|args| {
                let dx = ndarray::Zip::from(args.grad)
                    .and(args.out)
                    .map_collect(|&g, &y| g * (E::one() - y * y));
                vec![Some(dx)]
            }),
        )
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self, x: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let v = &inner.nodes[x.0].value;
            softmax_host(v)
        };
        self.push(
            out,
            vec![x.0],
            Box::new(|args| {
                let y = args.out;
                let g = args.grad;
                let last = y.ndim() - 1;
                let gy = g * y;
                let dot = gy.sum_axis(Axis(last));
                let dotb = dot.insert_axis(Axis(last));
                let dx = ndarray::Zip::from(g)
                    .and(y)
                    .and(dotb.broadcast(y.raw_dim()).unwrap())
                    .map_collect(|&gi, &yi, &di| yi * (gi - di));
                vec![Some(dx)]
            }),
        )
    }

    /// Group normalization over `[n, c, h, w]` with per-channel affine.
    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let (out, xhat) = {
            let inner = self.inner.borrow();
            let v = &inner.nodes[x.0].value;
            let gm = &inner.nodes[gamma.0].value;
            let bt = &inner.nodes[beta.0].value;
            assert_eq!(v.ndim(), 4, "group_norm expects [n, c, h, w]");
            let c = v.shape()[1];
            assert_eq!(c % groups, 0, "group_norm: channels not divisible by groups");
            assert_eq!(gm.len(), c);
            assert_eq!(bt.len(), c);
            let (n, _, h, w) = (v.shape()[0], c, v.shape()[2], v.shape()[3]);
            let cg = c / groups;
            let m = cg * h * w;
            let epe = E::from_f64(eps);
            let mut xhat = ArrayD::<E>::zeros(v.raw_dim());
            let mut out = ArrayD::<E>::zeros(v.raw_dim());
            for ni in 0..n {
                for gi in 0..groups {
                    let mut mean = E::zero();
                    for ci in gi * cg..(gi + 1) * cg {
                        for yi in 0..h {
                            for xi in 0..w {
                                mean += v[[ni, ci, yi, xi]];
                            }
                        }
                    }
                    mean = mean / E::from_f64(m as f64);
                    let mut var = E::zero();
                    for ci in gi * cg..(gi + 1) * cg {
                        for yi in 0..h {
                            for xi in 0..w {
                                let d = v[[ni, ci, yi, xi]] - mean;
                                var += d * d;
                            }
                        }
                    }
                    var = var / E::from_f64(m as f64);
                    let inv = (var + epe).sqrt().recip();
                    for ci in gi * cg..(gi + 1) * cg {
                        let (g_c, b_c) = (gm[ci], bt[ci]);
                        for yi in 0..h {
                            for xi in 0..w {
                                let xh = (v[[ni, ci, yi, xi]] - mean) * inv;
                                xhat[[ni, ci, yi, xi]] = xh;
                                out[[ni, ci, yi, xi]] = g_c * xh + b_c;
                            }
                        }
                    }
                }
            }
            (out, xhat)
        };
        self.push(
            out,
            vec![x.0, gamma.0, beta.0],
            Box::new(move |args| {
                let g = args.grad;
                let gm = args.inputs[1];
                let shape = g.shape();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let cg = c / groups;
                let m = E::from_f64((cg * h * w) as f64);

                let mut dgamma = ArrayD::<E>::zeros(IxDyn(&[c]));
                let mut dbeta = ArrayD::<E>::zeros(IxDyn(&[c]));
                for ci in 0..c {
                    let mut dg = E::zero();
                    let mut db = E::zero();
                    for ni in 0..n {
                        for yi in 0..h {
                            for xi in 0..w {
                                let gi = g[[ni, ci, yi, xi]];
                                dg += gi * xhat[[ni, ci, yi, xi]];
                                db += gi;
                            }
                        }
                    }
                    dgamma[ci] = dg;
                    dbeta[ci] = db;
                }

                // recompute inv std per (n, group) from x
                let v = args.inputs[0];
                let mut dx = ArrayD::<E>::zeros(v.raw_dim());
                for ni in 0..n {
                    for grp in 0..groups {
                        let mut mean = E::zero();
                        for ci in grp * cg..(grp + 1) * cg {
                            for yi in 0..h {
                                for xi in 0..w {
                                    mean += v[[ni, ci, yi, xi]];
                                }
                            }
                        }
                        mean = mean / m;
                        let mut var = E::zero();
                        for ci in grp * cg..(grp + 1) * cg {
                            for yi in 0..h {
                                for xi in 0..w {
                                    let d = v[[ni, ci, yi, xi]] - mean;
                                    var += d * d;
                                }
                            }
                        }
                        var = var / m;
                        let inv = (var + E::from_f64(eps)).sqrt().recip();

                        // dxhat = g * gamma; then standard normalization backward
                        let mut sum_dxh = E::zero();
                        let mut sum_dxh_xh = E::zero();
                        for ci in grp * cg..(grp + 1) * cg {
                            for yi in 0..h {
                                for xi in 0..w {
                                    let dxh = g[[ni, ci, yi, xi]] * gm[[ci]];
                                    sum_dxh += dxh;
                                    sum_dxh_xh += dxh * xhat[[ni, ci, yi, xi]];
                                }
                            }
                        }
                        let mean_dxh = sum_dxh / m;
                        let mean_dxh_xh = sum_dxh_xh / m;
                        for ci in grp * cg..(grp + 1) * cg {
                            for yi in 0..h {
                                for xi in 0..w {
                                    let dxh = g[[ni, ci, yi, xi]] * gm[[ci]];
                                    let xh = xhat[[ni, ci, yi, xi]];
                                    dx[[ni, ci, yi, xi]] =
                                        inv * (dxh - mean_dxh - xh * mean_dxh_xh);
                                }
                            }
                        }
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        )
    }

    /// Layer normalization over the last axis with per-feature affine.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (out, xhat) = {
            let inner = self.inner.borrow();
            let v = &inner.nodes[x.0].value;
            let gm = &inner.nodes[gamma.0].value;
            let bt = &inner.nodes[beta.0].value;
            let d = *v.shape().last().unwrap();
            assert_eq!(gm.len(), d);
            assert_eq!(bt.len(), d);
            let rows = v.len() / d;
            let v2 = v.view().into_shape_with_order((rows, d)).unwrap();
            let mut xhat = ndarray::Array2::<E>::zeros((rows, d));
            let mut out = ndarray::Array2::<E>::zeros((rows, d));
            let epe = E::from_f64(eps);
            let me = E::from_f64(d as f64);
            for r in 0..rows {
                let row = v2.index_axis(Axis(0), r);
                let mut mean = E::zero();
                for &a in row.iter() {
                    mean += a;
                }
                mean = mean / me;
                let mut var = E::zero();
                for &a in row.iter() {
                    let dd = a - mean;
                    var += dd * dd;
                }
                var = var / me;
                let inv = (var + epe).sqrt().recip();
                for ci in 0..d {
                    let xh = (row[ci] - mean) * inv;
                    xhat[[r, ci]] = xh;
                    out[[r, ci]] = gm[ci] * xh + bt[ci];
                }
            }
            (
                out.into_dyn().into_shape_with_order(v.raw_dim()).unwrap(),
                xhat,
            )
        };
        self.push(
            out,
            vec![x.0, gamma.0, beta.0],
            Box::new(move |args| {
                let g = args.grad;
                let v = args.inputs[0];
                let gm = args.inputs[1];
                let d = *v.shape().last().unwrap();
                let rows = v.len() / d;
                let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
                let v2 = v.view().into_shape_with_order((rows, d)).unwrap();
                let me = E::from_f64(d as f64);
                let mut dgamma = ArrayD::<E>::zeros(IxDyn(&[d]));
                let mut dbeta = ArrayD::<E>::zeros(IxDyn(&[d]));
                let mut dx2 = ndarray::Array2::<E>::zeros((rows, d));
                for r in 0..rows {
                    let row = v2.index_axis(Axis(0), r);
                    let mut mean = E::zero();
                    for &a in row.iter() {
                        mean += a;
                    }
                    mean = mean / me;
                    let mut var = E::zero();
                    for &a in row.iter() {
                        let dd = a - mean;
                        var += dd * dd;
                    }
                    var = var / me;
                    let inv = (var + E::from_f64(eps)).sqrt().recip();

                    let mut sum_dxh = E::zero();
                    let mut sum_dxh_xh = E::zero();
                    for ci in 0..d {
                        let gi = g2[[r, ci]];
                        let xh = xhat[[r, ci]];
                        dgamma[ci] += gi * xh;
                        dbeta[ci] += gi;
                        let dxh = gi * gm[[ci]];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    let mean_dxh = sum_dxh / me;
                    let mean_dxh_xh = sum_dxh_xh / me;
                    for ci in 0..d {
                        let dxh = g2[[r, ci]] * gm[[ci]];
                        let xh = xhat[[r, ci]];
                        dx2[[r, ci]] = inv * (dxh - mean_dxh - xh * mean_dxh_xh);
                    }
                }
                vec![
                    Some(dx2.into_dyn().into_shape_with_order(v.raw_dim()).unwrap()),
                    Some(dgamma),
                    Some(dbeta),
                ]
            }),
        )
    }

    /// Table lookup `table [v, d]` by `ids [n, l]` -> `[n, l, d]`.
    pub fn embedding(&self, table: Var, ids: &ndarray::Array2<usize>) -> Var {
        let ids_owned = ids.clone();
        let out = {
            let inner = self.inner.borrow();
            let t = &inner.nodes[table.0].value;
            assert_eq!(t.ndim(), 2);
            let (vsz, d) = (t.shape()[0], t.shape()[1]);
            let (n, l) = (ids.shape()[0], ids.shape()[1]);
            let mut out = ArrayD::<E>::zeros(IxDyn(&[n, l, d]));
            for ni in 0..n {
                for li in 0..l {
                    let id = ids[[ni, li]];
                    assert!(id < vsz, "embedding: id {} out of range {}", id, vsz);
                    for di in 0..d {
                        out[[ni, li, di]] = t[[id, di]];
                    }
                }
            }
            out
        };
        self.push(
            out,
            vec![table.0],
            Box::new(move |args| {
                let g = args.grad;
                let t = args.inputs[0];
                let d = t.shape()[1];
                let mut dt = ArrayD::<E>::zeros(t.raw_dim());
                let (n, l) = (ids_owned.shape()[0], ids_owned.shape()[1]);
                for ni in 0..n {
                    for li in 0..l {
                        let id = ids_owned[[ni, li]];
                        for di in 0..d {
                            dt[[id, di]] += g[[ni, li, di]];
                        }
                    }
                }
                vec![Some(dt)]
            }),
        )
    }

    /// Mean squared error between two same-shape nodes, scalar output.
    pub fn mse(&self, pred: Var, target: Var) -> Var {
        let (out, n) = {
            let inner = self.inner.borrow();
            let p = &inner.nodes[pred.0].value;
            let t = &inner.nodes[target.0].value;
            assert_eq!(p.shape(), t.shape(), "mse: shape mismatch");
            let n = p.len();
            let mut acc = E::zero();
            for (a, b) in p.iter().zip(t.iter()) {
                let d = *a - *b;
                acc += d * d;
            }
            (
                ArrayD::from_elem(IxDyn(&[1]), acc / E::from_f64(n as f64)),
                n,
            )
        };
        self.push(
            out,
            vec![pred.0, target.0],
            Box::new(move |args| {
                let k = args.grad[[0]] * E::from_f64(2.0 / n as f64);
                let dp = ndarray::Zip::from(args.inputs[0])
                    .and(args.inputs[1])
                    .map_collect(|&p, &t| k * (p - t));
                let dt = dp.mapv(|v| -v);
                vec![Some(dp), Some(dt)]
            }),
        )
    }

    /// KL divergence of `N(mu, exp(logvar))` from the standard normal,
    /// averaged over all elements.
    pub fn kl_standard_normal(&self, mu: Var, logvar: Var) -> Var {
        let (out, n) = {
            let inner = self.inner.borrow();
            let m = &inner.nodes[mu.0].value;
            let lv = &inner.nodes[logvar.0].value;
            assert_eq!(m.shape(), lv.shape());
            let n = m.len();
            let half = E::from_f64(0.5);
            let mut acc = E::zero();
            for (a, b) in m.iter().zip(lv.iter()) {
                acc += half * (*a * *a + b.exp() - E::one() - *b);
            }
            (
                ArrayD::from_elem(IxDyn(&[1]), acc / E::from_f64(n as f64)),
                n,
            )
        };
        self.push(
            out,
            vec![mu.0, logvar.0],
            Box::new(move |args| {
                let k = args.grad[[0]] / E::from_f64(n as f64);
                let half = E::from_f64(0.5);
                let dm = args.inputs[0].mapv(|m| k * m);
                let dlv = args.inputs[1].mapv(|lv| k * half * (lv.exp() - E::one()));
                vec![Some(dm), Some(dlv)]
            }),
        )
    }
}

#[inline]
fn sigmoid<E: Element>(v: E) -> E {
    E::one() / (E::one() + (-v).exp())
}

/// Host-side softmax over the last axis (shared by the taped op).
pub(crate) fn softmax_host<E: Element>(x: &ArrayD<E>) -> ArrayD<E> {
    let last = x.ndim() - 1;
    let d = x.shape()[last];
    let rows = x.len() / d;
    let x2 = x.view().into_shape_with_order((rows, d)).unwrap();
    let mut out = ndarray::Array2::<E>::zeros((rows, d));
    for r in 0..rows {
        let row = x2.index_axis(Axis(0), r);
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut denom = E::zero();
        for ci in 0..d {
            let e = (row[ci] - mx).exp();
            out[[r, ci]] = e;
            denom += e;
        }
        for ci in 0..d {
            out[[r, ci]] = out[[r, ci]] / denom;
        }
    }
    out.into_dyn().into_shape_with_order(x.raw_dim()).unwrap()
}
