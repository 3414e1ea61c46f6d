use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use crate::params::{ParamId, ParamStore};
use crate::Element;

/// Handle to a node on the tape. Cheap to copy; only valid for the tape that
/// produced it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

pub(crate) struct BackArgs<'a, E: Element> {
    pub grad: &'a ArrayD<E>,
    pub out: &'a ArrayD<E>,
    pub inputs: &'a [&'a ArrayD<E>],
}

type BackFn<E> = Box<dyn Fn(BackArgs<'_, E>) -> Vec<Option<ArrayD<E>>>>;

pub(crate) struct Node<E: Element> {
    pub value: ArrayD<E>,
    back: Option<(Vec<usize>, BackFn<E>)>,
}

pub(crate) struct Inner<E: Element> {
    pub nodes: Vec<Node<E>>,
    param_of_node: HashMap<usize, ParamId>,
    param_cache: HashMap<ParamId, usize>,
}

/// Records a computation graph as operations execute.
///
/// A tape lives for one forward (+ optional backward) pass; parameters are
/// re-inserted from the [`ParamStore`] each iteration via [`Tape::param`].
pub struct Tape<E: Element> {
    pub(crate) inner: RefCell<Inner<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                param_of_node: HashMap::new(),
                param_cache: HashMap::new(),
            }),
        }
    }

    pub(crate) fn push(&self, value: ArrayD<E>, parents: Vec<usize>, f: BackFn<E>) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            back: Some((parents, f)),
        });
        Var(inner.nodes.len() - 1)
    }

    /// Inserts an input with no gradient history of its own. Gradients still
    /// accumulate on leaves so they can serve as differentiable inputs in
    /// tests.
    pub fn leaf(&self, value: ArrayD<E>) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, back: None });
        Var(inner.nodes.len() - 1)
    }

    /// Inserts a parameter value from the store, memoized per tape so a
    /// parameter used twice maps to a single node (and a single gradient).
    pub fn param(&self, store: &ParamStore<E>, id: ParamId) -> Var {
        if let Some(&idx) = self.inner.borrow().param_cache.get(&id) {
            return Var(idx);
        }
        let value = store.value(id).clone();
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, back: None });
        let idx = inner.nodes.len() - 1;
        inner.param_cache.insert(id, idx);
        inner.param_of_node.insert(idx, id);
        Var(idx)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Owned copy of a node's value.
    pub fn value(&self, v: Var) -> ArrayD<E> {
        self.inner.borrow().nodes[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.0].value.shape().to_vec()
    }

    /// Scalar accessor for 1-element nodes (losses).
    pub fn scalar(&self, v: Var) -> E {
        let inner = self.inner.borrow();
        let val = &inner.nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar() called on node with {} elements", val.len());
        *val.iter().next().unwrap()
    }

    /// Reverse pass from `root` (a 1-element node). Returns gradients for
    /// every leaf and parameter node reachable from the root.
    pub fn backward(&self, root: Var) -> Gradients<E> {
        let inner = self.inner.borrow();
        let n = inner.nodes.len();
        assert!(root.0 < n);
        assert_eq!(
            inner.nodes[root.0].value.len(),
            1,
            "backward root must be a scalar node"
        );
        let mut grads: Vec<Option<ArrayD<E>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(inner.nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            let Some((parents, back)) = inner.nodes[i].back.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&ArrayD<E>> = parents.iter().map(|&p| &inner.nodes[p].value).collect();
            let contribs = back(BackArgs {
                grad: &g,
                out: &inner.nodes[i].value,
                inputs: &inputs,
            });
            debug_assert_eq!(contribs.len(), parents.len());
            for (slot, &p) in contribs.into_iter().zip(parents.iter()) {
                if let Some(c) = slot {
                    debug_assert_eq!(c.shape(), inner.nodes[p].value.shape());
                    match &mut grads[p] {
                        Some(a) => *a += &c,
                        none => *none = Some(c),
                    }
                }
            }
        }
        Gradients {
            grads,
            params: inner.param_cache.clone(),
        }
    }
}

/// Gradient bundle produced by [`Tape::backward`].
pub struct Gradients<E: Element> {
    grads: Vec<Option<ArrayD<E>>>,
    params: HashMap<ParamId, usize>,
}

impl<E: Element> Gradients<E> {
    pub fn of(&self, v: Var) -> Option<&ArrayD<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn of_param(&self, id: ParamId) -> Option<&ArrayD<E>> {
        self.params.get(&id).and_then(|&idx| self.grads[idx].as_ref())
    }
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

impl<E: Element> Tape<E> {
    fn val(&self, v: Var) -> std::cell::Ref<'_, ArrayD<E>> {
        std::cell::Ref::map(self.inner.borrow(), |inner| &inner.nodes[v.0].value)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = {
            let va = self.val(a);
            let vb = self.val(b);
            assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
            &*va + &*vb
        };
        self.push(
            out,
            vec![a.0, b.0],
            Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.clone())]),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = {
            let va = self.val(a);
            let vb = self.val(b);
            assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
            &*va - &*vb
        };
        self.push(
            out,
            vec![a.0, b.0],
            Box::new(|args| {
                vec![
                    Some(args.grad.clone()),
                    Some(args.grad.mapv(|g| -g)),
                ]
            }),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = {
            let va = self.val(a);
            let vb = self.val(b);
            assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
            &*va * &*vb
        };
        self.push(
            out,
            vec![a.0, b.0],
            Box::new(|args| {
                vec![
                    Some(args.grad * args.inputs[1]),
                    Some(args.grad * args.inputs[0]),
                ]
            }),
        )
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let c = E::from_f64(s);
        let out = self.val(a).mapv(|v| v * c);
        self.push(
            out,
            vec![a.0],
            Box::new(move |args| vec![Some(args.grad.mapv(|g| g * c))]),
        )
    }

    /// Adds a constant (non-differentiated) array, broadcast into `a`'s shape.
    pub fn add_const(&self, a: Var, c: &ArrayD<E>) -> Var {
        let out = {
            let va = self.val(a);
            let cb = c
                .broadcast(va.raw_dim())
                .unwrap_or_else(|| panic!("add_const: cannot broadcast {:?} to {:?}", c.shape(), va.shape()));
            &*va + &cb
        };
        self.push(
            out,
            vec![a.0],
            Box::new(|args| vec![Some(args.grad.clone())]),
        )
    }

    /// Multiplies by a constant array, broadcast into `a`'s shape.
    pub fn mul_const(&self, a: Var, c: &ArrayD<E>) -> Var {
        let cb_owned = {
            let va = self.val(a);
            c.broadcast(va.raw_dim())
                .unwrap_or_else(|| panic!("mul_const: cannot broadcast {:?} to {:?}", c.shape(), va.shape()))
                .to_owned()
        };
        let out = {
            let va = self.val(a);
            &*va * &cb_owned
        };
        self.push(
            out,
            vec![a.0],
            Box::new(move |args| vec![Some(args.grad * &cb_owned)]),
        )
    }

    /// Multiplies every element by a single-element parameter node.
    pub fn mul_scalar_var(&self, a: Var, s: Var) -> Var {
        let sv = {
            let v = self.val(s);
            assert_eq!(v.len(), 1, "mul_scalar_var: scalar operand must have 1 element");
            *v.iter().next().unwrap()
        };
        let out = self.val(a).mapv(|v| v * sv);
        self.push(
            out,
            vec![a.0, s.0],
            Box::new(move |args| {
                let da = args.grad.mapv(|g| g * sv);
                let mut acc = E::zero();
                for (g, x) in args.grad.iter().zip(args.inputs[0].iter()) {
                    acc += *g * *x;
                }
                let ds = ArrayD::from_elem(IxDyn(&[1]), acc);
                vec![Some(da), Some(ds)]
            }),
        )
    }

    /// Bias add along axis 1 of an N-d tensor (channels of `[N, C, ...]`).
    pub fn add_bias_ch(&self, x: Var, b: Var) -> Var {
        let out = {
            let vx = self.val(x);
            let vb = self.val(b);
            assert_eq!(vb.ndim(), 1);
            assert_eq!(vx.shape()[1], vb.shape()[0], "add_bias_ch: channel mismatch");
            let mut shape = vec![1; vx.ndim()];
            shape[1] = vb.shape()[0];
            let vb2 = vb.view().into_shape_with_order(IxDyn(&shape)).unwrap();
            &*vx + &vb2
        };
        self.push(
            out,
            vec![x.0, b.0],
            Box::new(|args| {
                let g = args.grad;
                let c = g.shape()[1];
                let mut db = ArrayD::zeros(IxDyn(&[c]));
                // reduce over every axis except 1, in index order
                let mut moved = g.view();
                moved.swap_axes(0, 1);
                for (ci, lane) in moved.outer_iter().enumerate() {
                    let mut acc = E::zero();
                    for v in lane.iter() {
                        acc += *v;
                    }
                    db[ci] = acc;
                }
                vec![Some(args.grad.clone()), Some(db)]
            }),
        )
    }

    /// `x[n, c, ...] + s[n, c]` broadcast over trailing spatial axes.
    pub fn add_per_sample_ch(&self, x: Var, s: Var) -> Var {
        let out = {
            let vx = self.val(x);
            let vs = self.val(s);
            assert_eq!(vs.ndim(), 2);
            assert_eq!(vx.shape()[0], vs.shape()[0]);
            assert_eq!(vx.shape()[1], vs.shape()[1]);
            let mut shape = vec![1; vx.ndim()];
            shape[0] = vs.shape()[0];
            shape[1] = vs.shape()[1];
            let vs2 = vs.view().into_shape_with_order(IxDyn(&shape)).unwrap();
            &*vx + &vs2
        };
        self.push(
            out,
            vec![x.0, s.0],
            Box::new(|args| {
                let g = args.grad;
                let (n, c) = (g.shape()[0], g.shape()[1]);
                let mut ds = ArrayD::zeros(IxDyn(&[n, c]));
                let spatial: usize = g.shape()[2..].iter().product();
                let gflat = g
                    .view()
                    .into_shape_with_order(IxDyn(&[n, c, spatial]))
                    .unwrap();
                for ni in 0..n {
                    for ci in 0..c {
                        let mut acc = E::zero();
                        for k in 0..spatial {
                            acc += gflat[[ni, ci, k]];
                        }
                        ds[[ni, ci]] = acc;
                    }
                }
                vec![Some(args.grad.clone()), Some(ds)]
            }),
        )
    }

    pub fn concat(&self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (out, widths) = {
            let inner = self.inner.borrow();
            let views: Vec<_> = parts.iter().map(|p| inner.nodes[p.0].value.view()).collect();
            let widths: Vec<usize> = views.iter().map(|v| v.shape()[axis]).collect();
            let out = ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
            (out.as_standard_layout().to_owned(), widths)
        };
        let parents: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            out,
            parents,
            Box::new(move |args| {
                let mut grads = Vec::with_capacity(widths.len());
                let mut start = 0isize;
                for &w in &widths {
                    let sl = args
                        .grad
                        .slice_axis(Axis(axis), Slice::from(start..start + w as isize));
                    grads.push(Some(sl.as_standard_layout().to_owned()));
                    start += w as isize;
                }
                grads
            }),
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let old_shape: Vec<usize> = self.val(a).shape().to_vec();
        let out = {
            let va = self.val(a);
            assert_eq!(
                va.len(),
                shape.iter().product::<usize>(),
                "reshape: element count mismatch {:?} -> {:?}",
                va.shape(),
                shape
            );
            va.as_standard_layout()
                .to_owned()
                .into_shape_with_order(IxDyn(shape))
                .unwrap()
        };
        self.push(
            out,
            vec![a.0],
            Box::new(move |args| {
                vec![Some(
                    args.grad
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order(IxDyn(&old_shape))
                        .unwrap(),
                )]
            }),
        )
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Var {
        let axes_fwd = axes.to_vec();
        let out = {
            let va = self.val(a);
            assert_eq!(axes.len(), va.ndim());
            va.view()
                .permuted_axes(IxDyn(axes))
                .as_standard_layout()
                .to_owned()
        };
        let mut axes_inv = vec![0usize; axes_fwd.len()];
        for (i, &ax) in axes_fwd.iter().enumerate() {
            axes_inv[ax] = i;
        }
        self.push(
            out,
            vec![a.0],
            Box::new(move |args| {
                vec![Some(
                    args.grad
                        .view()
                        .permuted_axes(IxDyn(&axes_inv))
                        .as_standard_layout()
                        .to_owned(),
                )]
            }),
        )
    }

    /// Inserts a new axis at `pos` and tiles it `times` times.
    pub fn repeat_new_axis(&self, a: Var, pos: usize, times: usize) -> Var {
        let out = {
            let va = self.val(a);
            let expanded = va.view().insert_axis(Axis(pos));
            let mut shape: Vec<usize> = expanded.shape().to_vec();
            shape[pos] = times;
            expanded
                .broadcast(IxDyn(&shape))
                .unwrap()
                .as_standard_layout()
                .to_owned()
        };
        self.push(
            out,
            vec![a.0],
            Box::new(move |args| {
                let summed = args.grad.sum_axis(Axis(pos));
                vec![Some(summed)]
            }),
        )
    }

    /// `x[n, c] -> [n, c, h, w]`, constant over the spatial axes.
    pub fn broadcast_spatial(&self, a: Var, h: usize, w: usize) -> Var {
        let out = {
            let va = self.val(a);
            assert_eq!(va.ndim(), 2);
            let (n, c) = (va.shape()[0], va.shape()[1]);
            va.view()
                .insert_axis(Axis(2))
                .insert_axis(Axis(3))
                .broadcast(IxDyn(&[n, c, h, w]))
                .unwrap()
                .as_standard_layout()
                .to_owned()
        };
        self.push(
            out,
            vec![a.0],
            Box::new(|args| {
                let summed = args.grad.sum_axis(Axis(3)).sum_axis(Axis(2));
                vec![Some(summed)]
            }),
        )
    }

    pub fn sum_axis(&self, a: Var, axis: usize) -> Var {
        let n = self.val(a).shape()[axis];
        let out = self.val(a).sum_axis(Axis(axis));
        self.push(
            out,
            vec![a.0],
            Box::new(move |args| {
                let expanded = args.grad.view().insert_axis(Axis(axis));
                let mut shape: Vec<usize> = expanded.shape().to_vec();
                shape[axis] = n;
                vec![Some(
                    expanded
                        .broadcast(IxDyn(&shape))
                        .unwrap()
                        .as_standard_layout()
                        .to_owned(),
                )]
            }),
        )
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Var {
        let n = self.val(a).shape()[axis];
        let summed = self.sum_axis(a, axis);
        self.scale(summed, 1.0 / n as f64)
    }

    /// Mean over all elements, producing a 1-element node.
    pub fn mean_all(&self, a: Var) -> Var {
        let (out, n) = {
            let va = self.val(a);
            let n = va.len();
            let mut acc = E::zero();
            for v in va.iter() {
                acc += *v;
            }
            (
                ArrayD::from_elem(IxDyn(&[1]), acc / E::from_f64(n as f64)),
                n,
            )
        };
        self.push(
            out,
            vec![a.0],
            Box::new(move |args| {
                let g = args.grad[[0]] / E::from_f64(n as f64);
                vec![Some(ArrayD::from_elem(
                    args.inputs[0].raw_dim(),
                    g,
                ))]
            }),
        )
    }
}
