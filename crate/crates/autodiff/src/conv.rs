//! Strided-GEMM kernels for 1-D convolution and its transpose.
//!
//! Each kernel tap is one GEMM over a strided view of the (padded) signal,
//! so no im2col buffer is materialized.

use crate::error::{check_dim, AutodiffError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Padding {
    /// No padding; the output shrinks by `dilation * (kernel - 1)`.
    #[default]
    None,
    /// `dilation * (kernel - 1)` zeros on the left only.
    SameCausal,
    /// Same total as [`Padding::SameCausal`], split evenly with the extra
    /// sample on the right.
    SameCentered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: Padding,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            groups: 1,
            padding: Padding::None,
        }
    }
}

impl ConvGeometry {
    pub fn new(stride: usize, dilation: usize, groups: usize, padding: Padding) -> Self {
        Self {
            stride,
            dilation,
            groups,
            padding,
        }
    }

    /// (left, right) zero padding for a kernel of `kernel` taps.
    pub fn pads(&self, kernel: usize) -> (usize, usize) {
        let total = self.dilation * (kernel - 1);
        match self.padding {
            Padding::None => (0, 0),
            Padding::SameCausal => (total, 0),
            Padding::SameCentered => (total / 2, total - total / 2),
        }
    }

    pub fn output_len(&self, input_len: usize, kernel: usize) -> Option<usize> {
        let (l, r) = self.pads(kernel);
        let padded = input_len + l + r;
        let span = self.dilation * (kernel - 1) + 1;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

pub(crate) struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub t_in: usize,
    pub t_pad: usize,
    pub t_out: usize,
    pub pad_left: usize,
}

pub(crate) fn conv_shape(
    input: &[usize],
    weight: &[usize],
    bias: Option<&[usize]>,
    geom: &ConvGeometry,
) -> Result<ConvShape> {
    const OP: &str = "conv1d";
    if input.len() != 2 {
        return Err(AutodiffError::Rank {
            op: OP,
            expected: 2,
            got: input.len(),
        });
    }
    if weight.len() != 3 {
        return Err(AutodiffError::Rank {
            op: OP,
            expected: 3,
            got: weight.len(),
        });
    }
    if geom.stride == 0 || geom.dilation == 0 || geom.groups == 0 {
        return Err(AutodiffError::Invalid {
            op: OP,
            msg: "stride, dilation and groups must be >= 1".into(),
        });
    }
    let (c_in, t_in) = (input[0], input[1]);
    let (c_out, kernel) = (weight[0], weight[2]);
    if c_in % geom.groups != 0 {
        return Err(AutodiffError::Invalid {
            op: OP,
            msg: format!("input channels {c_in} not divisible by groups {}", geom.groups),
        });
    }
    if c_out % geom.groups != 0 {
        return Err(AutodiffError::Invalid {
            op: OP,
            msg: format!("output channels {c_out} not divisible by groups {}", geom.groups),
        });
    }
    check_dim(OP, "weight input channels", c_in / geom.groups, weight[1])?;
    if let Some(b) = bias {
        check_dim(OP, "bias length", c_out, b.iter().product())?;
    }
    let t_out = geom.output_len(t_in, kernel).ok_or(AutodiffError::Invalid {
        op: OP,
        msg: format!("input length {t_in} shorter than kernel span"),
    })?;
    let (l, r) = geom.pads(kernel);
    Ok(ConvShape {
        c_in,
        c_out,
        kernel,
        t_in,
        t_pad: t_in + l + r,
        t_out,
        pad_left: l,
    })
}

fn pad_signal<F: Scalar>(x: &[F], s: &ConvShape) -> Vec<F> {
    let mut out = vec![F::zero(); s.c_in * s.t_pad];
    for c in 0..s.c_in {
        let dst = c * s.t_pad + s.pad_left;
        out[dst..dst + s.t_in].copy_from_slice(&x[c * s.t_in..(c + 1) * s.t_in]);
    }
    out
}

pub(crate) fn conv1d_forward<F: Scalar>(
    x: &[F],
    w: &[F],
    bias: Option<&[F]>,
    s: &ConvShape,
    geom: &ConvGeometry,
) -> Vec<F> {
    let padded;
    let xp: &[F] = if s.t_pad == s.t_in {
        x
    } else {
        padded = pad_signal(x, s);
        &padded
    };
    let mut out = vec![F::zero(); s.c_out * s.t_out];
    let g = geom.groups;
    let cin_g = s.c_in / g;
    let cout_g = s.c_out / g;
    let (st, dl, p_len) = (geom.stride, geom.dilation, s.kernel);
    if cin_g == 1 && cout_g == 1 {
        for c in 0..s.c_out {
            let xr = &xp[c * s.t_pad..(c + 1) * s.t_pad];
            let wr = &w[c * p_len..(c + 1) * p_len];
            let orow = &mut out[c * s.t_out..(c + 1) * s.t_out];
            for (p, &wv) in wr.iter().enumerate() {
                let off = p * dl;
                for (t, o) in orow.iter_mut().enumerate() {
                    *o += wv * xr[off + t * st];
                }
            }
        }
    } else {
        for gi in 0..g {
            for p in 0..p_len {
                // SAFETY: views index within w, xp and out by construction of ConvShape.
                unsafe {
                    F::gemm(
                        cout_g,
                        cin_g,
                        s.t_out,
                        F::one(),
                        w.as_ptr().add(gi * cout_g * cin_g * p_len + p),
                        (cin_g * p_len) as isize,
                        p_len as isize,
                        xp.as_ptr().add(gi * cin_g * s.t_pad + p * dl),
                        s.t_pad as isize,
                        st as isize,
                        if p == 0 { F::zero() } else { F::one() },
                        out.as_mut_ptr().add(gi * cout_g * s.t_out),
                        s.t_out as isize,
                        1,
                    );
                }
            }
        }
    }
    if let Some(b) = bias {
        for (c, &bv) in b.iter().enumerate() {
            for o in &mut out[c * s.t_out..(c + 1) * s.t_out] {
                *o += bv;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<F> {
    pub input: Option<Vec<F>>,
    pub weight: Option<Vec<F>>,
    pub bias: Option<Vec<F>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    gout: &[F],
    s: &ConvShape,
    geom: &ConvGeometry,
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> ConvGrads<F> {
    let g = geom.groups;
    let cin_g = s.c_in / g;
    let cout_g = s.c_out / g;
    let (st, dl, p_len) = (geom.stride, geom.dilation, s.kernel);
    let padded;
    let xp: &[F] = if !want_weight || s.t_pad == s.t_in {
        x
    } else {
        padded = pad_signal(x, s);
        &padded
    };

    let bias = want_bias.then(|| {
        (0..s.c_out)
            .map(|c| gout[c * s.t_out..(c + 1) * s.t_out].iter().copied().sum())
            .collect()
    });

    let mut dw = want_weight.then(|| vec![F::zero(); w.len()]);
    let mut dxp = want_input.then(|| vec![F::zero(); s.c_in * s.t_pad]);

    if cin_g == 1 && cout_g == 1 {
        for c in 0..s.c_out {
            let grow = &gout[c * s.t_out..(c + 1) * s.t_out];
            if let Some(dw) = dw.as_mut() {
                let xr = &xp[c * s.t_pad..(c + 1) * s.t_pad];
                for p in 0..p_len {
                    let off = p * dl;
                    let mut acc = F::zero();
                    for (t, &gv) in grow.iter().enumerate() {
                        acc += gv * xr[off + t * st];
                    }
                    dw[c * p_len + p] = acc;
                }
            }
            if let Some(dxp) = dxp.as_mut() {
                let dr = &mut dxp[c * s.t_pad..(c + 1) * s.t_pad];
                for p in 0..p_len {
                    let wv = w[c * p_len + p];
                    let off = p * dl;
                    for (t, &gv) in grow.iter().enumerate() {
                        dr[off + t * st] += wv * gv;
                    }
                }
            }
        }
    } else {
        for gi in 0..g {
            for p in 0..p_len {
                // SAFETY: same view bounds as the forward pass; dw/dxp are fresh buffers.
                unsafe {
                    if let Some(dw) = dw.as_mut() {
                        F::gemm(
                            cout_g,
                            s.t_out,
                            cin_g,
                            F::one(),
                            gout.as_ptr().add(gi * cout_g * s.t_out),
                            s.t_out as isize,
                            1,
                            xp.as_ptr().add(gi * cin_g * s.t_pad + p * dl),
                            st as isize,
                            s.t_pad as isize,
                            F::zero(),
                            dw.as_mut_ptr().add(gi * cout_g * cin_g * p_len + p),
                            (cin_g * p_len) as isize,
                            p_len as isize,
                        );
                    }
                    if let Some(dxp) = dxp.as_mut() {
                        F::gemm(
                            cin_g,
                            cout_g,
                            s.t_out,
                            F::one(),
                            w.as_ptr().add(gi * cout_g * cin_g * p_len + p),
                            p_len as isize,
                            (cin_g * p_len) as isize,
                            gout.as_ptr().add(gi * cout_g * s.t_out),
                            s.t_out as isize,
                            1,
                            F::one(),
                            dxp.as_mut_ptr().add(gi * cin_g * s.t_pad + p * dl),
                            s.t_pad as isize,
                            st as isize,
                        );
                    }
                }
            }
        }
    }

    let input = dxp.map(|dxp| {
        if s.t_pad == s.t_in {
            dxp
        } else {
            let mut dx = vec![F::zero(); s.c_in * s.t_in];
            for c in 0..s.c_in {
                let src = c * s.t_pad + s.pad_left;
                dx[c * s.t_in..(c + 1) * s.t_in].copy_from_slice(&dxp[src..src + s.t_in]);
            }
            dx
        }
    });
    ConvGrads {
        input,
        weight: dw,
        bias,
    }
}

pub(crate) struct ConvTShape {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub frames: usize,
    pub t_out: usize,
}

pub(crate) fn conv_transpose_shape(
    input: &[usize],
    weight: &[usize],
    bias: Option<&[usize]>,
    stride: usize,
) -> Result<ConvTShape> {
    const OP: &str = "transposed_conv1d";
    if input.len() != 2 {
        return Err(AutodiffError::Rank {
            op: OP,
            expected: 2,
            got: input.len(),
        });
    }
    if weight.len() != 3 {
        return Err(AutodiffError::Rank {
            op: OP,
            expected: 3,
            got: weight.len(),
        });
    }
    if stride == 0 {
        return Err(AutodiffError::Invalid {
            op: OP,
            msg: "stride must be >= 1".into(),
        });
    }
    check_dim(OP, "weight input channels", input[0], weight[0])?;
    if let Some(b) = bias {
        check_dim(OP, "bias length", weight[1], b.iter().product())?;
    }
    let frames = input[1];
    Ok(ConvTShape {
        c_in: input[0],
        c_out: weight[1],
        kernel: weight[2],
        frames,
        t_out: (frames - 1) * stride + weight[2],
    })
}

pub(crate) fn conv_transpose_forward<F: Scalar>(
    x: &[F],
    w: &[F],
    bias: Option<&[F]>,
    s: &ConvTShape,
    stride: usize,
) -> Vec<F> {
    let mut out = vec![F::zero(); s.c_out * s.t_out];
    let p_len = s.kernel;
    for p in 0..p_len {
        // SAFETY: out view [c_out, frames] at offset p with column stride `stride`
        // ends at (frames-1)*stride + p < t_out.
        unsafe {
            F::gemm(
                s.c_out,
                s.c_in,
                s.frames,
                F::one(),
                w.as_ptr().add(p),
                p_len as isize,
                (s.c_out * p_len) as isize,
                x.as_ptr(),
                s.frames as isize,
                1,
                F::one(),
                out.as_mut_ptr().add(p),
                s.t_out as isize,
                stride as isize,
            );
        }
    }
    if let Some(b) = bias {
        for (c, &bv) in b.iter().enumerate() {
            for o in &mut out[c * s.t_out..(c + 1) * s.t_out] {
                *o += bv;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    gout: &[F],
    s: &ConvTShape,
    stride: usize,
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> ConvGrads<F> {
    let p_len = s.kernel;
    let bias = want_bias.then(|| {
        (0..s.c_out)
            .map(|c| gout[c * s.t_out..(c + 1) * s.t_out].iter().copied().sum())
            .collect()
    });
    let mut dx = want_input.then(|| vec![F::zero(); s.c_in * s.frames]);
    let mut dw = want_weight.then(|| vec![F::zero(); w.len()]);
    for p in 0..p_len {
        // SAFETY: mirrors the forward views.
        unsafe {
            if let Some(dx) = dx.as_mut() {
                F::gemm(
                    s.c_in,
                    s.c_out,
                    s.frames,
                    F::one(),
                    w.as_ptr().add(p),
                    (s.c_out * p_len) as isize,
                    p_len as isize,
                    gout.as_ptr().add(p),
                    s.t_out as isize,
                    stride as isize,
                    F::one(),
                    dx.as_mut_ptr(),
                    s.frames as isize,
                    1,
                );
            }
            if let Some(dw) = dw.as_mut() {
                F::gemm(
                    s.c_in,
                    s.frames,
                    s.c_out,
                    F::one(),
                    x.as_ptr(),
                    s.frames as isize,
                    1,
                    gout.as_ptr().add(p),
                    stride as isize,
                    s.t_out as isize,
                    F::zero(),
                    dw.as_mut_ptr().add(p),
                    (s.c_out * p_len) as isize,
                    p_len as isize,
                );
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_len_formula() {
        let g = ConvGeometry::new(2, 1, 1, Padding::None);
        assert_eq!(g.output_len(10, 3), Some(4));
        let g = ConvGeometry::new(1, 4, 1, Padding::SameCausal);
        assert_eq!(g.output_len(10, 3), Some(10));
        assert_eq!(g.pads(3), (8, 0));
        let g = ConvGeometry::new(1, 1, 1, Padding::SameCentered);
        assert_eq!(g.pads(4), (1, 2));
        let g = ConvGeometry::new(2, 1, 1, Padding::SameCentered);
        assert_eq!(g.output_len(32, 11), Some(16));
        assert_eq!(ConvGeometry::default().output_len(2, 3), None);
    }
}
