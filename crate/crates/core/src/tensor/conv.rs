//! 2-D convolution (cross-correlation convention) via im2col, plus a
//! depthwise variant used by CNN exit branches.

use super::ops::{gemm, gemm_nt, gemm_tn};
use super::{Elem, Tensor};
use crate::{Error, Result};

struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    hout: usize,
    wout: usize,
}

fn geometry(
    op: &'static str,
    input: &[usize],
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<Geometry> {
    let err = |details: String| Error::Shape { op, details };
    if input.len() != 4 {
        return Err(err(format!("expected rank-4 input, got {:?}", input)));
    }
    if stride == 0 {
        return Err(err("stride must be positive".into()));
    }
    let (batch, cin, h, w) = (input[0], input[1], input[2], input[3]);
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(err(format!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    let hout = (h + 2 * padding - kh) / stride + 1;
    let wout = (w + 2 * padding - kw) / stride + 1;
    Ok(Geometry {
        batch,
        cin,
        h,
        w,
        kh,
        kw,
        stride,
        padding,
        hout,
        wout,
    })
}

// col[(c*kh+ki)*kw+kj, oh*wout+ow] = x[c, oh*s+ki-p, ow*s+kj-p], zero-padded.
fn im2col<T: Elem>(x: &[T], g: &Geometry, col: &mut [T]) {
    let hw = g.hout * g.wout;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * hw;
                for oh in 0..g.hout {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih as usize >= g.h {
                        for ow in 0..g.wout {
                            col[row + oh * g.wout + ow] = T::zero();
                        }
                        continue;
                    }
                    let ih = ih as usize;
                    for ow in 0..g.wout {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        col[row + oh * g.wout + ow] = if iw < 0 || iw as usize >= g.w {
                            T::zero()
                        } else {
                            x[(c * g.h + ih) * g.w + iw as usize]
                        };
                    }
                }
            }
        }
    }
}

// Scatter-add the adjoint of im2col back onto the input.
fn col2im_add<T: Elem>(col: &[T], g: &Geometry, dx: &mut [T]) {
    let hw = g.hout * g.wout;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * hw;
                for oh in 0..g.hout {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    let ih = ih as usize;
                    for ow in 0..g.wout {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        if iw < 0 || iw as usize >= g.w {
                            continue;
                        }
                        dx[(c * g.h + ih) * g.w + iw as usize] += col[row + oh * g.wout + ow];
                    }
                }
            }
        }
    }
}

impl<T: Elem> Tensor<T> {
    /// 2-D convolution: input `[B,Cin,H,W]`, weight `[Cout,Cin,kh,kw]`,
    /// optional per-channel bias `[Cout]`. Output extents are
    /// `floor((H + 2p - kh)/stride) + 1`.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let ws = weight.shape();
        if ws.len() != 4 {
            return Err(Error::Shape {
                op: "conv2d",
                details: format!("expected rank-4 weight, got {:?}", ws),
            });
        }
        let g = geometry("conv2d", &self.shape(), ws[2], ws[3], stride, padding)?;
        if ws[1] != g.cin {
            return Err(Error::Shape {
                op: "conv2d",
                details: format!("input channels {} vs weight {:?}", g.cin, ws),
            });
        }
        let cout = ws[0];
        if let Some(b) = bias {
            if b.shape() != vec![cout] {
                return Err(Error::Shape {
                    op: "conv2d",
                    details: format!("bias {:?} vs {cout} output channels", b.shape()),
                });
            }
        }
        let k = g.cin * g.kh * g.kw;
        let hw = g.hout * g.wout;
        let x = self.data();
        let wd = weight.data();
        let mut col = vec![T::zero(); k * hw];
        let mut data = vec![T::zero(); g.batch * cout * hw];
        for bi in 0..g.batch {
            im2col(&x[bi * g.cin * g.h * g.w..], &g, &mut col);
            gemm(cout, k, hw, &wd, &col, &mut data[bi * cout * hw..(bi + 1) * cout * hw]);
        }
        drop(x);
        drop(wd);
        if let Some(b) = bias {
            let bd = b.data();
            for bi in 0..g.batch {
                for co in 0..cout {
                    let base = (bi * cout + co) * hw;
                    for v in &mut data[base..base + hw] {
                        *v += bd[co];
                    }
                }
            }
        }
        let out_shape = vec![g.batch, cout, g.hout, g.wout];
        let xh = self.clone();
        let wh = weight.clone();
        let has_bias = bias.is_some();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::from_op("conv2d", out_shape, data, parents, move |gout| {
            let x = xh.data();
            let wd = wh.data();
            let mut dx = vec![T::zero(); x.len()];
            let mut dw = vec![T::zero(); wd.len()];
            let mut col = vec![T::zero(); k * hw];
            let mut tmp = vec![T::zero(); k * hw];
            for bi in 0..g.batch {
                let dout = &gout[bi * cout * hw..(bi + 1) * cout * hw];
                im2col(&x[bi * g.cin * g.h * g.w..], &g, &mut col);
                // dW += dout * col^T
                gemm_nt(cout, hw, k, dout, &col, &mut dw);
                // dX += col2im(W^T * dout)
                tmp.iter_mut().for_each(|v| *v = T::zero());
                gemm_tn(cout, k, hw, &wd, dout, &mut tmp);
                col2im_add(&tmp, &g, &mut dx[bi * g.cin * g.h * g.w..]);
            }
            let mut grads = vec![Some(dx), Some(dw)];
            if has_bias {
                let mut db = vec![T::zero(); cout];
                for bi in 0..g.batch {
                    for co in 0..cout {
                        let base = (bi * cout + co) * hw;
                        for &v in &gout[base..base + hw] {
                            db[co] += v;
                        }
                    }
                }
                grads.push(Some(db));
            }
            grads
        })
    }

    /// Depthwise 2-D convolution: input `[B,C,H,W]`, weight `[C,1,kh,kw]`,
    /// one filter per channel.
    pub fn conv2d_depthwise(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let ws = weight.shape();
        if ws.len() != 4 || ws[1] != 1 {
            return Err(Error::Shape {
                op: "conv2d_depthwise",
                details: format!("expected weight [C,1,kh,kw], got {:?}", ws),
            });
        }
        let g = geometry("conv2d_depthwise", &self.shape(), ws[2], ws[3], stride, padding)?;
        if ws[0] != g.cin {
            return Err(Error::Shape {
                op: "conv2d_depthwise",
                details: format!("input channels {} vs weight {:?}", g.cin, ws),
            });
        }
        if let Some(b) = bias {
            if b.shape() != vec![g.cin] {
                return Err(Error::Shape {
                    op: "conv2d_depthwise",
                    details: format!("bias {:?} vs {} channels", b.shape(), g.cin),
                });
            }
        }
        let hw = g.hout * g.wout;
        let x = self.data();
        let wd = weight.data();
        let bd: Option<Vec<T>> = bias.map(|b| b.to_vec());
        let mut data = vec![T::zero(); g.batch * g.cin * hw];
        for bi in 0..g.batch {
            for c in 0..g.cin {
                let xs = &x[(bi * g.cin + c) * g.h * g.w..];
                let wsl = &wd[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
                let out = &mut data[(bi * g.cin + c) * hw..(bi * g.cin + c + 1) * hw];
                let b0 = bd.as_ref().map(|b| b[c]).unwrap_or_else(T::zero);
                for oh in 0..g.hout {
                    for ow in 0..g.wout {
                        let mut acc = b0;
                        for ki in 0..g.kh {
                            let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                            if ih < 0 || ih as usize >= g.h {
                                continue;
                            }
                            for kj in 0..g.kw {
                                let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                                if iw < 0 || iw as usize >= g.w {
                                    continue;
                                }
                                acc += xs[ih as usize * g.w + iw as usize] * wsl[ki * g.kw + kj];
                            }
                        }
                        out[oh * g.wout + ow] = acc;
                    }
                }
            }
        }
        drop(x);
        drop(wd);
        let out_shape = vec![g.batch, g.cin, g.hout, g.wout];
        let xh = self.clone();
        let wh = weight.clone();
        let has_bias = bias.is_some();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::from_op("conv2d_depthwise", out_shape, data, parents, move |gout| {
            let x = xh.data();
            let wd = wh.data();
            let mut dx = vec![T::zero(); x.len()];
            let mut dw = vec![T::zero(); wd.len()];
            let mut db = vec![T::zero(); g.cin];
            for bi in 0..g.batch {
                for c in 0..g.cin {
                    let xs = &x[(bi * g.cin + c) * g.h * g.w..(bi * g.cin + c + 1) * g.h * g.w];
                    let dxs = (bi * g.cin + c) * g.h * g.w;
                    let wsl = &wd[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
                    let go = &gout[(bi * g.cin + c) * hw..(bi * g.cin + c + 1) * hw];
                    for oh in 0..g.hout {
                        for ow in 0..g.wout {
                            let gv = go[oh * g.wout + ow];
                            db[c] += gv;
                            for ki in 0..g.kh {
                                let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                                if ih < 0 || ih as usize >= g.h {
                                    continue;
                                }
                                for kj in 0..g.kw {
                                    let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                                    if iw < 0 || iw as usize >= g.w {
                                        continue;
                                    }
                                    let xi = ih as usize * g.w + iw as usize;
                                    dw[c * g.kh * g.kw + ki * g.kw + kj] += gv * xs[xi];
                                    dx[dxs + xi] += gv * wsl[ki * g.kw + kj];
                                }
                            }
                        }
                    }
                }
            }
            let mut grads = vec![Some(dx), Some(dw)];
            if has_bias {
                grads.push(Some(db));
            }
            grads
        })
    }
}
