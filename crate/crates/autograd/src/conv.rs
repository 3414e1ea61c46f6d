use ndarray::parallel::prelude::*;
use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix3, Ix4, Ix5, IxDyn};

use crate::tape::{Tape, Var};
use crate::Element;

fn im2col<E: Element>(
    x: &ndarray::ArrayView3<'_, E>, // [Cin, H, W]
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<E> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut col = Array2::<E>::zeros((cin * kh * kw, ho * wo));
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * wo + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im_accum<E: Element>(
    dcol: &ArrayView2<'_, E>, // [Cin*kh*kw, Ho*Wo]
    dx: &mut ndarray::ArrayViewMut3<'_, E>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let (cin, h, w) = (dx.shape()[0], dx.shape()[1], dx.shape()[2]);
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[ci, iy as usize, ix as usize]] += dcol[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
}

impl<E: Element> Tape<E> {
    /// 2D convolution, `x [n, cin, h, w]`, `w [cout, cin, kh, kw]`, `b [cout]`.
    /// Zero padding, square stride. Parallel over the batch axis; gradient
    /// reductions run in batch order so results are deterministic.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let vx = inner.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
            let vw = inner.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
            let vb = &inner.nodes[b.0].value;
            let (n, cin, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
            let (cout, wcin, kh, kw) = (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]);
            assert_eq!(cin, wcin, "conv2d: channel mismatch");
            assert_eq!(vb.len(), cout, "conv2d: bias mismatch");
            assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d: kernel larger than input");
            let ho = (h + 2 * pad - kh) / stride + 1;
            let wo = (wd + 2 * pad - kw) / stride + 1;
            let w2 = vw.into_shape_with_order((cout, cin * kh * kw)).unwrap();
            let mut out = ArrayD::<E>::zeros(IxDyn(&[n, cout, ho, wo]));
            {
                let mut o4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
                let bias = vb.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                ndarray::Zip::from(o4.axis_iter_mut(Axis(0)))
                    .and(vx.axis_iter(Axis(0)))
                    .par_for_each(|mut on, xn| {
                        let col = im2col(&xn, kh, kw, stride, pad, ho, wo);
                        let mut y = w2.dot(&col); // [cout, ho*wo]
                        y += &bias.view().insert_axis(Axis(1));
                        on.assign(&y.into_shape_with_order((cout, ho, wo)).unwrap());
                    });
            }
            out
        };
        self.push(
            out,
            vec![x.0, w.0, b.0],
            Box::new(move |args| {
                let g = args.grad.view().into_dimensionality::<Ix4>().unwrap();
                let vx = args.inputs[0].view().into_dimensionality::<Ix4>().unwrap();
                let vw = args.inputs[1].view().into_dimensionality::<Ix4>().unwrap();
                let (n, cin) = (vx.shape()[0], vx.shape()[1]);
                let (cout, _, kh, kw) = (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]);
                let (ho, wo) = (g.shape()[2], g.shape()[3]);
                let w2 = vw.into_shape_with_order((cout, cin * kh * kw)).unwrap();

                // bias gradient, batch order
                let mut db = ndarray::Array1::<E>::zeros(cout);
                for ni in 0..n {
                    for co in 0..cout {
                        let mut acc = E::zero();
                        for v in g.index_axis(Axis(0), ni).index_axis(Axis(0), co).iter() {
                            acc += *v;
                        }
                        db[co] += acc;
                    }
                }

                // weight gradient: per-sample partials, reduced in order
                let partials: Vec<Array2<E>> = (0..n)
                    .into_par_iter()
                    .map(|ni| {
                        let xn = vx.index_axis(Axis(0), ni);
                        let col = im2col(&xn, kh, kw, stride, pad, ho, wo);
                        let gn = g
                            .index_axis(Axis(0), ni)
                            .into_shape_with_order((cout, ho * wo))
                            .unwrap();
                        gn.dot(&col.t())
                    })
                    .collect();
                let mut dw2 = Array2::<E>::zeros((cout, cin * kh * kw));
                for p in &partials {
                    dw2 += p;
                }
                let dw = dw2
                    .into_shape_with_order((cout, cin, kh, kw))
                    .unwrap()
                    .into_dyn();

                // input gradient
                let mut dx = ArrayD::<E>::zeros(args.inputs[0].raw_dim());
                {
                    let mut dx4 = dx.view_mut().into_dimensionality::<Ix4>().unwrap();
                    ndarray::Zip::from(dx4.axis_iter_mut(Axis(0)))
                        .and(g.axis_iter(Axis(0)))
                        .par_for_each(|mut dxn, gn| {
                            let gn2 = gn.into_shape_with_order((cout, ho * wo)).unwrap();
                            let dcol = w2.t().dot(&gn2);
                            col2im_accum(&dcol.view(), &mut dxn, kh, kw, stride, pad, ho, wo);
                        });
                }

                vec![Some(dx), Some(dw), Some(db.into_dyn())]
            }),
        )
    }

    /// Temporal convolution over the T axis of `x [b, t, c, h, w]` with kernel
    /// `w [cout, cin, kt]` (a `kt x 1 x 1` 3D convolution), zero padded so the
    /// sequence length is preserved.
    pub fn temporal_conv(&self, x: Var, w: Var, b: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let vx = inner.nodes[x.0].value.view().into_dimensionality::<Ix5>().unwrap();
            let vw = inner.nodes[w.0].value.view().into_dimensionality::<Ix3>().unwrap();
            let vbias = &inner.nodes[b.0].value;
            let (bs, t, c, h, wd) = (
                vx.shape()[0],
                vx.shape()[1],
                vx.shape()[2],
                vx.shape()[3],
                vx.shape()[4],
            );
            let (cout, cin, kt) = (vw.shape()[0], vw.shape()[1], vw.shape()[2]);
            assert_eq!(c, cin, "temporal_conv: channel mismatch");
            assert_eq!(vbias.len(), cout);
            assert!(kt % 2 == 1, "temporal_conv: kernel must be odd");
            let pad = kt / 2;
            let hw = h * wd;
            let xr = vx.into_shape_with_order((bs, t, c, hw)).unwrap();
            let mut out = ArrayD::<E>::zeros(IxDyn(&[bs, t, cout, h, wd]));
            {
                let mut o5 = out
                    .view_mut()
                    .into_shape_with_order((bs, t, cout, hw))
                    .unwrap();
                let bias = vbias.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                ndarray::Zip::from(o5.axis_iter_mut(Axis(0)))
                    .and(xr.axis_iter(Axis(0)))
                    .par_for_each(|mut ob, xb| {
                        for ti in 0..t {
                            let mut acc = Array2::<E>::zeros((cout, hw));
                            acc += &bias.view().insert_axis(Axis(1));
                            for dt in 0..kt {
                                let ts = ti as isize + dt as isize - pad as isize;
                                if ts < 0 || ts >= t as isize {
                                    continue;
                                }
                                let wdt = vw.index_axis(Axis(2), dt);
                                let xs = xb.index_axis(Axis(0), ts as usize);
                                acc += &wdt.dot(&xs);
                            }
                            ob.index_axis_mut(Axis(0), ti).assign(&acc);
                        }
                    });
            }
            out
        };
        self.push(
            out,
            vec![x.0, w.0, b.0],
            Box::new(|args| {
                let g = args.grad.view().into_dimensionality::<Ix5>().unwrap();
                let vx = args.inputs[0].view().into_dimensionality::<Ix5>().unwrap();
                let vw = args.inputs[1].view().into_dimensionality::<Ix3>().unwrap();
                let (bs, t, c, h, wd) = (
                    vx.shape()[0],
                    vx.shape()[1],
                    vx.shape()[2],
                    vx.shape()[3],
                    vx.shape()[4],
                );
                let (cout, cin, kt) = (vw.shape()[0], vw.shape()[1], vw.shape()[2]);
                let pad = kt / 2;
                let hw = h * wd;
                let xr = vx.into_shape_with_order((bs, t, c, hw)).unwrap();
                let gr = g.into_shape_with_order((bs, t, cout, hw)).unwrap();

                let mut db = ndarray::Array1::<E>::zeros(cout);
                for bi in 0..bs {
                    for ti in 0..t {
                        for co in 0..cout {
                            let mut acc = E::zero();
                            for v in gr
                                .index_axis(Axis(0), bi)
                                .index_axis(Axis(0), ti)
                                .index_axis(Axis(0), co)
                                .iter()
                            {
                                acc += *v;
                            }
                            db[co] += acc;
                        }
                    }
                }

                let partials: Vec<ndarray::Array3<E>> = (0..bs)
                    .into_par_iter()
                    .map(|bi| {
                        let mut dwp = ndarray::Array3::<E>::zeros((cout, cin, kt));
                        let grb = gr.index_axis(Axis(0), bi);
                        let xrb = xr.index_axis(Axis(0), bi);
                        for ti in 0..t {
                            let gt = grb.index_axis(Axis(0), ti);
                            for dt in 0..kt {
                                let ts = ti as isize + dt as isize - pad as isize;
                                if ts < 0 || ts >= t as isize {
                                    continue;
                                }
                                let xs = xrb.index_axis(Axis(0), ts as usize);
                                let d = gt.dot(&xs.t()); // [cout, cin]
                                dwp.index_axis_mut(Axis(2), dt).scaled_add(E::one(), &d);
                            }
                        }
                        dwp
                    })
                    .collect();
                let mut dw = ndarray::Array3::<E>::zeros((cout, cin, kt));
                for p in &partials {
                    dw += p;
                }

                let mut dx = ArrayD::<E>::zeros(args.inputs[0].raw_dim());
                {
                    let mut dxr = dx
                        .view_mut()
                        .into_shape_with_order((bs, t, c, hw))
                        .unwrap();
                    ndarray::Zip::from(dxr.axis_iter_mut(Axis(0)))
                        .and(gr.axis_iter(Axis(0)))
                        .par_for_each(|mut dxb, gb| {
                            for ti in 0..t {
                                let gt = gb.index_axis(Axis(0), ti);
                                for dt in 0..kt {
                                    let ts = ti as isize + dt as isize - pad as isize;
                                    if ts < 0 || ts >= t as isize {
                                        continue;
                                    }
                                    let wdt = vw.index_axis(Axis(2), dt);
                                    let d = wdt.t().dot(&gt); // [cin, hw]
                                    let mut slot = dxb.index_axis_mut(Axis(0), ts as usize);
                                    slot.scaled_add(E::one(), &d);
                                }
                            }
                        });
                }
                vec![Some(dx), Some(dw.into_dyn()), Some(db.into_dyn())]
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of `[n, c, h, w]`.
    pub fn upsample_nearest_2x(&self, x: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let vx = inner.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
            let (n, c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
            let mut out = ArrayD::<E>::zeros(IxDyn(&[n, c, 2 * h, 2 * w]));
            {
                let mut o4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
                ndarray::Zip::from(o4.axis_iter_mut(Axis(0)))
                    .and(vx.axis_iter(Axis(0)))
                    .par_for_each(|mut on, xn| {
                        for ci in 0..c {
                            for yi in 0..h {
                                for xi in 0..w {
                                    let v = xn[[ci, yi, xi]];
                                    on[[ci, 2 * yi, 2 * xi]] = v;
                                    on[[ci, 2 * yi, 2 * xi + 1]] = v;
                                    on[[ci, 2 * yi + 1, 2 * xi]] = v;
                                    on[[ci, 2 * yi + 1, 2 * xi + 1]] = v;
                                }
                            }
                        }
                    });
            }
            out
        };
        self.push(
            out,
            vec![x.0],
            Box::new(|args| {
                let g = args.grad.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, h2, w2) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
                let (h, w) = (h2 / 2, w2 / 2);
                let mut dx = ArrayD::<E>::zeros(IxDyn(&[n, c, h, w]));
                {
                    let mut d4 = dx.view_mut().into_dimensionality::<Ix4>().unwrap();
                    ndarray::Zip::from(d4.axis_iter_mut(Axis(0)))
                        .and(g.axis_iter(Axis(0)))
                        .par_for_each(|mut dn, gn| {
                            for ci in 0..c {
                                for yi in 0..h {
                                    for xi in 0..w {
                                        dn[[ci, yi, xi]] = gn[[ci, 2 * yi, 2 * xi]]
                                            + gn[[ci, 2 * yi, 2 * xi + 1]]
                                            + gn[[ci, 2 * yi + 1, 2 * xi]]
                                            + gn[[ci, 2 * yi + 1, 2 * xi + 1]];
                                    }
                                }
                            }
                        });
                }
                vec![Some(dx)]
            }),
        )
    }
}
