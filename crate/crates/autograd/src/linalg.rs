use ndarray::{Array2, ArrayD, Ix2, Ix3, IxDyn};

use crate::tape::{Tape, Var};
use crate::Element;

fn as2<E: Element>(a: &ArrayD<E>) -> ndarray::ArrayView2<'_, E> {
    a.view().into_dimensionality::<Ix2>().expect("expected rank-2 tensor")
}

impl<E: Element> Tape<E> {
    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let va = as2(&inner.nodes[a.0].value);
            let vb = as2(&inner.nodes[b.0].value);
            assert_eq!(va.shape()[1], vb.shape()[0], "matmul: inner dim mismatch");
            va.dot(&vb).into_dyn()
        };
        self.push(
            out,
            vec![a.0, b.0],
            Box::new(|args| {
                let g = as2(args.grad);
                let va = as2(args.inputs[0]);
                let vb = as2(args.inputs[1]);
                let da = g.dot(&vb.t());
                let db = va.t().dot(&g);
                vec![Some(da.into_dyn()), Some(db.into_dyn())]
            }),
        )
    }

    /// Batched matmul: `[b, m, k] x [b, k, n] -> [b, m, n]`
    pub fn bmm(&self, a: Var, b: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let va = inner.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
            let vb = inner.nodes[b.0].value.view().into_dimensionality::<Ix3>().unwrap();
            assert_eq!(va.shape()[0], vb.shape()[0], "bmm: batch mismatch");
            assert_eq!(va.shape()[2], vb.shape()[1], "bmm: inner dim mismatch");
            let (bs, m, n) = (va.shape()[0], va.shape()[1], vb.shape()[2]);
            let mut out = ArrayD::<E>::zeros(IxDyn(&[bs, m, n]));
            {
                let mut o3 = out.view_mut().into_dimensionality::<Ix3>().unwrap();
                for bi in 0..bs {
                    let y = va.index_axis(ndarray::Axis(0), bi).dot(&vb.index_axis(ndarray::Axis(0), bi));
                    o3.index_axis_mut(ndarray::Axis(0), bi).assign(&y);
                }
            }
            out
        };
        self.push(
            out,
            vec![a.0, b.0],
            Box::new(|args| {
                let g = args.grad.view().into_dimensionality::<Ix3>().unwrap();
                let va = args.inputs[0].view().into_dimensionality::<Ix3>().unwrap();
                let vb = args.inputs[1].view().into_dimensionality::<Ix3>().unwrap();
                let bs = g.shape()[0];
                let mut da = ArrayD::<E>::zeros(args.inputs[0].raw_dim());
                let mut db = ArrayD::<E>::zeros(args.inputs[1].raw_dim());
                {
                    let mut da3 = da.view_mut().into_dimensionality::<Ix3>().unwrap();
                    let mut db3 = db.view_mut().into_dimensionality::<Ix3>().unwrap();
                    for bi in 0..bs {
                        let gb = g.index_axis(ndarray::Axis(0), bi);
                        let ab = va.index_axis(ndarray::Axis(0), bi);
                        let bb = vb.index_axis(ndarray::Axis(0), bi);
                        da3.index_axis_mut(ndarray::Axis(0), bi).assign(&gb.dot(&bb.t()));
                        db3.index_axis_mut(ndarray::Axis(0), bi).assign(&ab.t().dot(&gb));
                    }
                }
                vec![Some(da), Some(db)]
            }),
        )
    }

    /// Batched matmul against the transpose: `[b, m, k] x [b, n, k] -> [b, m, n]`
    pub fn bmm_nt(&self, a: Var, b: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let va = inner.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
            let vb = inner.nodes[b.0].value.view().into_dimensionality::<Ix3>().unwrap();
            assert_eq!(va.shape()[0], vb.shape()[0], "bmm_nt: batch mismatch");
            assert_eq!(va.shape()[2], vb.shape()[2], "bmm_nt: inner dim mismatch");
            let (bs, m, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            let mut out = ArrayD::<E>::zeros(IxDyn(&[bs, m, n]));
            {
                let mut o3 = out.view_mut().into_dimensionality::<Ix3>().unwrap();
                for bi in 0..bs {
                    let y = va
                        .index_axis(ndarray::Axis(0), bi)
                        .dot(&vb.index_axis(ndarray::Axis(0), bi).t());
                    o3.index_axis_mut(ndarray::Axis(0), bi).assign(&y);
                }
            }
            out
        };
        self.push(
            out,
            vec![a.0, b.0],
            Box::new(|args| {
                let g = args.grad.view().into_dimensionality::<Ix3>().unwrap();
                let va = args.inputs[0].view().into_dimensionality::<Ix3>().unwrap();
                let vb = args.inputs[1].view().into_dimensionality::<Ix3>().unwrap();
                let bs = g.shape()[0];
                let mut da = ArrayD::<E>::zeros(args.inputs[0].raw_dim());
                let mut db = ArrayD::<E>::zeros(args.inputs[1].raw_dim());
                {
                    let mut da3 = da.view_mut().into_dimensionality::<Ix3>().unwrap();
                    let mut db3 = db.view_mut().into_dimensionality::<Ix3>().unwrap();
                    for bi in 0..bs {
                        let gb = g.index_axis(ndarray::Axis(0), bi);
                        let ab = va.index_axis(ndarray::Axis(0), bi);
                        let bb = vb.index_axis(ndarray::Axis(0), bi);
                        da3.index_axis_mut(ndarray::Axis(0), bi).assign(&gb.dot(&bb));
                        db3.index_axis_mut(ndarray::Axis(0), bi).assign(&gb.t().dot(&ab));
                    }
                }
                vec![Some(da), Some(db)]
            }),
        )
    }

    /// Fully connected layer: `x [n, k] · w [o, k]ᵀ + b [o] -> [n, o]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let vx = as2(&inner.nodes[x.0].value);
            let vw = as2(&inner.nodes[w.0].value);
            let vb = &inner.nodes[b.0].value;
            assert_eq!(vx.shape()[1], vw.shape()[1], "linear: feature dim mismatch");
            assert_eq!(vb.len(), vw.shape()[0], "linear: bias dim mismatch");
            let mut y = vx.dot(&vw.t());
            let vb1 = vb.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            y += &vb1.view().insert_axis(ndarray::Axis(0));
            y.into_dyn()
        };
        self.push(
            out,
            vec![x.0, w.0, b.0],
            Box::new(|args| {
                let g = as2(args.grad);
                let vx = as2(args.inputs[0]);
                let vw = as2(args.inputs[1]);
                let dx = g.dot(&vw);
                let dw = g.t().dot(&vx);
                let dw = dw.as_standard_layout().to_owned();
                let db: ndarray::Array1<E> = g.sum_axis(ndarray::Axis(0));
                vec![
                    Some(dx.into_dyn()),
                    Some(dw.into_dyn()),
                    Some(db.into_dyn()),
                ]
            }),
        )
    }
}

/// Plain (non-taped) 2D matmul helper for host-side math.
pub fn matmul2<E: Element>(a: &ArrayD<E>, b: &ArrayD<E>) -> Array2<E> {
    as2(a).dot(&as2(b))
}
