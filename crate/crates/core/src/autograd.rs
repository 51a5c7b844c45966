//! Tape-based reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Nodes whose
//! inputs are all constants are recorded without a backward closure, so
//! forward passes through frozen models cost no gradient bookkeeping.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{linalg::general_mat_mul, s, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};

pub type Tensor = ArrayD<f64>;

type Backward = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<Backward>,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of a scalar root with respect to every recorded node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Vec::new(), None, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Vec::new(), None, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    fn insert(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<Backward>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn record<'t>(&'t self, value: Tensor, inputs: &[Var<'t>], backward: Backward) -> Var<'t> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        if requires_grad {
            let parents = inputs.iter().map(|v| v.id).collect();
            self.insert(value, parents, Some(backward), true)
        } else {
            self.insert(value, Vec::new(), None, false)
        }
    }

    /// Back-propagates from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(nodes[root.id].value.len(), 1, "backward root must be a scalar");
        grads[root.id] = Some(ArrayD::from_elem(nodes[root.id].value.raw_dim(), 1.0));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[pid].requires_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        Grads { grads }
    }
}

fn to4(t: &Tensor) -> ndarray::ArrayView4<'_, f64> {
    t.view().into_dimensionality::<Ix4>().expect("expected a 4-d tensor")
}

fn to2(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("expected a 2-d tensor")
}

fn unary<'t>(
    x: Var<'t>,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Var<'t> {
    let xv = x.value();
    let out = xv.mapv(&f);
    let outv = Rc::new(out.clone());
    x.tape.record(
        out,
        &[x],
        Box::new(move |g| {
            let mut d = g.clone();
            ndarray::Zip::from(&mut d)
                .and(&*xv)
                .and(&*outv)
                .for_each(|d, &x, &y| *d *= df(x, y));
            vec![d]
        }),
    )
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value; panics if the tensor has more than one element.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a non-scalar tensor");
        *v.iter().next().unwrap()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let out = &*self.value() + &*other.value();
        self.tape
            .record(out, &[self, other], Box::new(|g| vec![g.clone(), g.clone()]))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let out = &*self.value() - &*other.value();
        self.tape
            .record(out, &[self, other], Box::new(|g| vec![g.clone(), -g]))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let out = &*a * &*b;
        self.tape.record(
            out,
            &[self, other],
            Box::new(move |g| vec![g * &*b, g * &*a]),
        )
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let out = &*self.value() * k;
        self.tape.record(out, &[self], Box::new(move |g| vec![g * k]))
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        let out = &*self.value() + k;
        self.tape.record(out, &[self], Box::new(|g| vec![g.clone()]))
    }

    /// `k - self`.
    pub fn rsub_scalar(self, k: f64) -> Var<'t> {
        let out = self.value().mapv(|x| k - x);
        self.tape.record(out, &[self], Box::new(|g| vec![-g]))
    }

    pub fn abs(self) -> Var<'t> {
        unary(self, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(self) -> Var<'t> {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn ln(self) -> Var<'t> {
        unary(self, f64::ln, |x, _| 1.0 / x)
    }

    pub fn exp(self) -> Var<'t> {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn sigmoid(self) -> Var<'t> {
        unary(self, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        unary(
            self,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        unary(
            self,
            move |x| x.clamp(lo, hi),
            move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
        )
    }

    pub fn sum(self) -> Var<'t> {
        let v = self.value();
        let shape = v.raw_dim();
        let out = ArrayD::from_elem(IxDyn(&[]), v.sum());
        self.tape.record(
            out,
            &[self],
            Box::new(move |g| vec![ArrayD::from_elem(shape.clone(), g[[]])]),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let v = self.value();
        let old = v.raw_dim();
        let out = v
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.tape.record(
            out,
            &[self],
            Box::new(move |g| {
                vec![g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(old.clone())
                    .unwrap()]
            }),
        )
    }

    /// Column `k` of an `[N, K]` matrix, as `[N]`.
    pub fn column(self, k: usize) -> Var<'t> {
        let v = self.value();
        let m = to2(&v);
        let (n, cols) = m.dim();
        let out = m.column(k).to_owned().into_dyn();
        self.tape.record(
            out,
            &[self],
            Box::new(move |g| {
                let mut d = Array2::<f64>::zeros((n, cols));
                d.column_mut(k)
                    .assign(&g.view().into_dimensionality::<Ix1>().unwrap());
                vec![d.into_dyn()]
            }),
        )
    }

    /// `[N, D] x [O, D]^T + [O]`.
    pub fn linear(self, weight: Var<'t>, bias: Var<'t>) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        let xm = to2(&x);
        let wm = to2(&w);
        let mut out = xm.dot(&wm.t());
        out += &b.view().into_dimensionality::<Ix1>().expect("bias must be 1-d");
        self.tape.record(
            out.into_dyn(),
            &[self, weight, bias],
            Box::new(move |g| {
                let gm = to2(g);
                let dx = gm.dot(&to2(&w));
                let dw = gm.t().dot(&to2(&x));
                let db = gm.sum_axis(Axis(0));
                vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
            }),
        )
    }

    /// Log-softmax along the last axis of an `[N, K]` matrix.
    pub fn log_softmax(self) -> Var<'t> {
        let v = self.value();
        let m = to2(&v);
        let mut out = m.to_owned();
        for mut row in out.rows_mut() {
            let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let soft = out.mapv(f64::exp);
        self.tape.record(
            out.into_dyn(),
            &[self],
            Box::new(move |g| {
                let gm = to2(g);
                let mut d = gm.to_owned();
                for (mut drow, srow) in d.rows_mut().into_iter().zip(soft.rows()) {
                    let total: f64 = drow.sum();
                    ndarray::Zip::from(&mut drow)
                        .and(&srow)
                        .for_each(|d, &s| *d -= s * total);
                }
                vec![d.into_dyn()]
            }),
        )
    }

    /// Global average pool `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(self) -> Var<'t> {
        let v = self.value();
        let x = to4(&v);
        let (n, c, h, w) = x.dim();
        let area = (h * w) as f64;
        let out = x
            .to_owned()
            .into_shape_with_order((n, c, h * w))
            .unwrap()
            .sum_axis(Axis(2))
            / area;
        self.tape.record(
            out.into_dyn(),
            &[self],
            Box::new(move |g| {
                let gm = to2(g);
                let mut d = Array4::<f64>::zeros((n, c, h, w));
                for ((i, j), &gv) in gm.indexed_iter() {
                    d.slice_mut(s![i, j, .., ..]).fill(gv / area);
                }
                vec![d.into_dyn()]
            }),
        )
    }

    /// Standardises every `(sample, channel)` plane of `[N, C, H, W]` to zero
    /// mean and unit variance over its spatial positions.
    pub fn instance_norm(self, eps: f64) -> Var<'t> {
        let v = self.value();
        let x = to4(&v);
        let (n, c, h, w) = x.dim();
        let area = (h * w) as f64;
        let mut y = Array4::<f64>::zeros((n, c, h, w));
        let mut inv_std = Array2::<f64>::zeros((n, c));
        for i in 0..n {
            for j in 0..c {
                let plane = x.slice(s![i, j, .., ..]);
                let mean = plane.sum() / area;
                let var = plane.mapv(|p| (p - mean) * (p - mean)).sum() / area;
                let k = 1.0 / (var + eps).sqrt();
                inv_std[[i, j]] = k;
                y.slice_mut(s![i, j, .., ..]).assign(&plane.mapv(|p| (p - mean) * k));
            }
        }
        let yc = y.clone();
        self.tape.record(
            y.into_dyn(),
            &[self],
            Box::new(move |g| {
                let g4 = to4(g);
                let mut d = Array4::<f64>::zeros((n, c, h, w));
                for i in 0..n {
                    for j in 0..c {
                        let gp = g4.slice(s![i, j, .., ..]);
                        let yp = yc.slice(s![i, j, .., ..]);
                        let gm = gp.sum() / area;
                        let gy = (&gp * &yp).sum() / area;
                        let k = inv_std[[i, j]];
                        d.slice_mut(s![i, j, .., ..])
                            .assign(&ndarray::Zip::from(&gp).and(&yp).map_collect(|&gv, &yv| k * (gv - gm - yv * gy)));
                    }
                }
                vec![d.into_dyn()]
            }),
        )
    }

    /// Multiplies `[N, C, H, W]` by a `[N, 1, H, W]` map broadcast over channels.
    pub fn mul_channel_broadcast(self, map: Var<'t>) -> Var<'t> {
        let xv = self.value();
        let mv = map.value();
        let x = to4(&xv);
        let m = to4(&mv);
        let (n, c, h, w) = x.dim();
        assert_eq!(m.dim(), (n, 1, h, w), "broadcast map shape mismatch");
        let out = &x * &m;
        self.tape.record(
            out.into_dyn(),
            &[self, map],
            Box::new(move |g| {
                let g4 = to4(g);
                let x = to4(&xv);
                let m = to4(&mv);
                let dx = &g4 * &m;
                let dm = (&g4 * &x).sum_axis(Axis(1)).insert_axis(Axis(1));
                let _ = c;
                vec![dx.into_dyn(), dm.into_dyn()]
            }),
        )
    }

    /// Separable linear resampling of `[N, C, H, W]`:
    /// each plane `P` becomes `rows · P · colsᵀ`.
    pub fn resample(self, rows: &Array2<f64>, cols: &Array2<f64>) -> Var<'t> {
        let xv = self.value();
        let x = to4(&xv);
        let (n, c, h, w) = x.dim();
        assert_eq!(rows.ncols(), h, "resample: row operator width mismatch");
        assert_eq!(cols.ncols(), w, "resample: column operator width mismatch");
        let (ho, wo) = (rows.nrows(), cols.nrows());
        let mut out = Array4::<f64>::zeros((n, c, ho, wo));
        let mut tmp = Array2::<f64>::zeros((ho, w));
        for i in 0..n {
            for j in 0..c {
                general_mat_mul(1.0, rows, &x.slice(s![i, j, .., ..]), 0.0, &mut tmp);
                let mut dst = out.slice_mut(s![i, j, .., ..]);
                general_mat_mul(1.0, &tmp, &cols.t(), 0.0, &mut dst);
            }
        }
        let rows = rows.clone();
        let cols = cols.clone();
        self.tape.record(
            out.into_dyn(),
            &[self],
            Box::new(move |g| {
                let g4 = to4(g);
                let mut d = Array4::<f64>::zeros((n, c, h, w));
                let mut tmp = Array2::<f64>::zeros((h, wo));
                for i in 0..n {
                    for j in 0..c {
                        general_mat_mul(1.0, &rows.t(), &g4.slice(s![i, j, .., ..]), 0.0, &mut tmp);
                        let mut dst = d.slice_mut(s![i, j, .., ..]);
                        general_mat_mul(1.0, &tmp, &cols, 0.0, &mut dst);
                    }
                }
                vec![d.into_dyn()]
            }),
        )
    }

    /// 2-d convolution (cross-correlation) with zero padding.
    /// `x: [N, C, H, W]`, `weight: [O, C, K, K]`, `bias: [O]`.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
        let xv = self.value();
        let wv = weight.value();
        let bv = bias.value();
        let x = to4(&xv);
        let w4 = to4(&wv);
        let (n, c, h, wd) = x.dim();
        let (o, wc, k, k2) = w4.dim();
        assert_eq!(wc, c, "conv2d: input has {c} channels, kernel expects {wc}");
        assert_eq!(k, k2, "conv2d: square kernels only");
        let geo = ConvGeometry::new(n, c, h, wd, k, stride, pad);
        let cols = geo.im2col(&xv);
        let wflat = w4.to_owned().into_shape_with_order((o, c * k * k)).unwrap();
        let mut out2 = cols.dot(&wflat.t());
        out2 += &bv.view().into_dimensionality::<Ix1>().expect("bias must be 1-d");
        let out = geo.rows_to_nchw(&out2, o);
        self.tape.record(
            out.into_dyn(),
            &[self, weight, bias],
            Box::new(move |g| {
                let g2 = geo.nchw_to_rows(&to4(g));
                let dw = g2.t().dot(&cols).into_shape_with_order((o, c, k, k)).unwrap();
                let db = g2.sum_axis(Axis(0));
                let dcols = g2.dot(&wflat);
                let dx = geo.col2im(&dcols);
                vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
            }),
        )
    }
}

/// Concatenates `[N, C_i, H, W]` tensors along the channel axis.
pub fn concat_channels<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let tape = parts[0].tape;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = values.iter().map(|v| to4(v)).collect();
    let out = ndarray::concatenate(Axis(1), &views).expect("concat: spatial shapes differ");
    let splits: Vec<usize> = views.iter().map(|v| v.dim().1).collect();
    tape.record(
        out.into_dyn(),
        parts,
        Box::new(move |g| {
            let g4 = to4(g);
            let mut start = 0;
            splits
                .iter()
                .map(|&c| {
                    let part = g4.slice(s![.., start..start + c, .., ..]).to_owned().into_dyn();
                    start += c;
                    part
                })
                .collect()
        }),
    )
}

/// Numerically stable mean binary cross-entropy on logits against fixed targets.
pub fn bce_with_logits<'t>(logits: Var<'t>, targets: &Tensor) -> Var<'t> {
    let z = logits.value();
    assert_eq!(z.shape(), targets.shape(), "bce: target shape mismatch");
    let n = z.len().max(1) as f64;
    let loss: f64 = z
        .iter()
        .zip(targets.iter())
        .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
        .sum::<f64>()
        / n;
    let targets = targets.clone();
    logits.tape.record(
        ArrayD::from_elem(IxDyn(&[]), loss),
        &[logits],
        Box::new(move |g| {
            let scale = g[[]] / n;
            let mut d = z.mapv(sigmoid);
            d -= &targets;
            d *= scale;
            vec![d]
        }),
    )
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(n: usize, c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "conv2d: kernel larger than padded input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self { n, c, h, w, k, stride, pad, ho, wo }
    }

    fn im2col(&self, x: &Tensor) -> Array2<f64> {
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let ckk = self.c * self.k * self.k;
        let mut cols = Array2::<f64>::zeros((self.n * self.ho * self.wo, ckk));
        let buf = cols.as_slice_mut().unwrap();
        for ni in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = (ni * self.ho + oy) * self.wo + ox;
                    let dst = &mut buf[row * ckk..(row + 1) * ckk];
                    for ci in 0..self.c {
                        let plane = &xs[(ni * self.c + ci) * self.h * self.w..][..self.h * self.w];
                        for ky in 0..self.k {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            for kx in 0..self.k {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                dst[(ci * self.k + ky) * self.k + kx] =
                                    plane[iy as usize * self.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>) -> Array4<f64> {
        let ckk = self.c * self.k * self.k;
        let src = cols.as_standard_layout();
        let src = src.as_slice().unwrap();
        let mut out = Array4::<f64>::zeros((self.n, self.c, self.h, self.w));
        let buf = out.as_slice_mut().unwrap();
        for ni in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = (ni * self.ho + oy) * self.wo + ox;
                    let s = &src[row * ckk..(row + 1) * ckk];
                    for ci in 0..self.c {
                        let base = (ni * self.c + ci) * self.h * self.w;
                        for ky in 0..self.k {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            for kx in 0..self.k {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                buf[base + iy as usize * self.w + ix as usize] +=
                                    s[(ci * self.k + ky) * self.k + kx];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn rows_to_nchw(&self, rows: &Array2<f64>, o: usize) -> Array4<f64> {
        rows.view()
            .into_shape_with_order((self.n, self.ho, self.wo, o))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .into_owned()
    }

    fn nchw_to_rows(&self, g: &ndarray::ArrayView4<'_, f64>) -> Array2<f64> {
        let o = g.dim().1;
        g.view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.n * self.ho * self.wo, o))
            .unwrap()
    }
}

/// Row operator for bilinear resampling (half-pixel centres, edge clamped).
pub fn bilinear_operator(out_len: usize, in_len: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((out_len, in_len));
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        let frac = src - lo as f64;
        m[[i, lo]] += 1.0 - frac;
        m[[i, hi]] += frac;
    }
    m
}

/// Row operator for average pooling by an integer factor.
pub fn avg_pool_operator(out_len: usize, in_len: usize) -> Array2<f64> {
    assert!(out_len > 0 && in_len % out_len == 0, "avg pool needs an integer factor");
    let f = in_len / out_len;
    let mut m = Array2::<f64>::zeros((out_len, in_len));
    for i in 0..out_len {
        for j in 0..f {
            m[[i, i * f + j]] = 1.0 / f as f64;
        }
    }
    m
}

/// Row operator for nearest-neighbour resampling.
pub fn nearest_operator(out_len: usize, in_len: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((out_len, in_len));
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize;
        m[[i, src.min(in_len - 1)]] = 1.0;
    }
    m
}

/// Average-pools when shrinking by an integer factor, bilinear otherwise.
pub fn resize_operator(out_len: usize, in_len: usize) -> Array2<f64> {
    if out_len == in_len {
        Array2::eye(in_len)
    } else if out_len < in_len && in_len % out_len == 0 {
        avg_pool_operator(out_len, in_len)
    } else {
        bilinear_operator(out_len, in_len)
    }
}

/// Spatially resizes `[N, C, H, W]` to `[N, C, out_h, out_w]`.
pub fn resize<'t>(x: Var<'t>, out_h: usize, out_w: usize) -> Var<'t> {
    let shape = x.shape();
    if shape[2] == out_h && shape[3] == out_w {
        return x;
    }
    x.resample(&resize_operator(out_h, shape[2]), &resize_operator(out_w, shape[3]))
}

/// Bilinear upsampling/downsampling of `[N, C, H, W]`.
pub fn bilinear<'t>(x: Var<'t>, out_h: usize, out_w: usize) -> Var<'t> {
    let shape = x.shape();
    if shape[2] == out_h && shape[3] == out_w {
        return x;
    }
    x.resample(&bilinear_operator(out_h, shape[2]), &bilinear_operator(out_w, shape[3]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array};

    #[test]
    fn constants_record_no_backward() {
        let tape = Tape::new();
        let a = tape.constant(arr1(&[1.0, 2.0]).into_dyn());
        let b = a.square().sum();
        assert!(!b.requires_grad());
    }

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let a = tape.leaf(arr1(&[2.0, 3.0]).into_dyn());
        let b = tape.leaf(arr1(&[5.0, 7.0]).into_dyn());
        let y = a.mul(b).sum();
        let grads = tape.backward(y);
        assert_eq!(grads.get(a).unwrap().as_slice().unwrap(), &[5.0, 7.0]);
        assert_eq!(grads.get(b).unwrap().as_slice().unwrap(), &[2.0, 3.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        let tape = Tape::new();
        let a = tape.leaf(arr1(&[3.0]).into_dyn());
        let y = a.mul(a).add(a).sum();
        let grads = tape.backward(y);
        assert_eq!(grads.get(a).unwrap()[[0]], 7.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let tape = Tape::new();
        let x = Array::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64).into_dyn();
        let mut w = Array4::<f64>::zeros((1, 1, 3, 3));
        w[[0, 0, 1, 1]] = 1.0;
        let xv = tape.constant(x.clone());
        let y = xv.conv2d(tape.constant(w.into_dyn()), tape.constant(arr1(&[0.0]).into_dyn()), 1, 1);
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn conv_stride_shapes() {
        let tape = Tape::new();
        let x = tape.constant(Array4::<f64>::ones((2, 3, 8, 8)).into_dyn());
        let w = tape.constant(Array4::<f64>::ones((5, 3, 3, 3)).into_dyn());
        let b = tape.constant(Array::zeros(5).into_dyn());
        assert_eq!(x.conv2d(w, b, 2, 1).shape(), vec![2, 5, 4, 4]);
    }

    #[test]
    fn operators_preserve_constants() {
        for (o, i) in [(8, 4), (4, 8), (6, 4), (5, 5)] {
            for m in [bilinear_operator(o, i), resize_operator(o, i), nearest_operator(o, i)] {
                for row in m.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn instance_norm_matches_finite_differences() {
        let x0 = Array::from_shape_fn((2, 2, 3, 3), |(a, b, i, j)| ((a * 7 + b * 5 + i * 3 + j) as f64 * 0.37).sin());
        let wts = Array::from_shape_fn((2, 2, 3, 3), |(a, b, i, j)| ((a + 2 * b + 3 * i + 5 * j) as f64 * 0.61).cos());
        let f = |x: &Tensor| {
            let tape = Tape::new();
            let v = tape.leaf(x.clone());
            let y = v.instance_norm(1e-5).mul(tape.constant(wts.clone().into_dyn())).sum();
            (y.item(), tape.backward(y).get(v).unwrap().clone())
        };
        let x0 = x0.into_dyn();
        let (_, g) = f(&x0);
        let h = 1e-6;
        for idx in 0..x0.len() {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (f(&xp).0 - f(&xm).0) / (2.0 * h);
            let an = g.as_slice().unwrap()[idx];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "{idx}: {fd} vs {an}");
        }
    }

    #[test]
    fn log_softmax_rows_normalise() {
        let tape = Tape::new();
        let x = tape.constant(ndarray::arr2(&[[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]]).into_dyn());
        let y = x.log_softmax().value();
        for row in to2(&y).rows() {
            assert!((row.mapv(f64::exp).sum() - 1.0).abs() < 1e-12);
        }
    }
}
