//! Forward and backward kernels on raw slices. The tape owns shapes and
//! bookkeeping; everything here is plain arithmetic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Element, gemm};
use crate::error::{HdcError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output extent `ceil(n / s)`; zero padding split evenly, odd pixel trailing.
    Same,
    /// No padding; output extent `floor((n - k) / s) + 1`.
    Valid,
}

/// Leading and trailing zero padding for "same" convolution along one axis.
pub fn same_padding(n: usize, k: usize, s: usize) -> (usize, usize) {
    let out = n.div_ceil(s);
    let total = ((out - 1) * s + k).saturating_sub(n);
    (total / 2, total - total / 2)
}

pub fn conv_output_extent(n: usize, k: usize, s: usize, padding: Padding) -> Option<usize> {
    if s == 0 || k == 0 || n == 0 {
        return None;
    }
    match padding {
        Padding::Same => {
            let (lo, hi) = same_padding(n, k, s);
            (k <= n + lo + hi).then(|| n.div_ceil(s))
        }
        Padding::Valid => (k <= n).then(|| (n - k) / s + 1),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub input: [usize; 3],
    pub cin: usize,
    pub kernel: [usize; 3],
    pub cout: usize,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn new(
        input_shape: &[usize],
        kernel_shape: &[usize],
        bias_len: usize,
        stride: [usize; 3],
        padding: Padding,
    ) -> Result<Self> {
        if input_shape.len() != 5 || kernel_shape.len() != 5 {
            return Err(HdcError::shape(
                "conv3d",
                format!(
                    "expected rank-5 input and kernel, got {input_shape:?} and {kernel_shape:?}"
                ),
            ));
        }
        let cin = input_shape[4];
        if kernel_shape[3] != cin {
            return Err(HdcError::shape(
                "conv3d",
                format!(
                    "kernel expects {} input channels, input has {cin}",
                    kernel_shape[3]
                ),
            ));
        }
        let cout = kernel_shape[4];
        if bias_len != cout {
            return Err(HdcError::shape(
                "conv3d",
                format!("bias has {bias_len} entries for {cout} output channels"),
            ));
        }
        if stride.contains(&0) {
            return Err(HdcError::InvalidArgument(
                "conv3d strides must be >= 1".into(),
            ));
        }
        let mut pad = [0; 3];
        let mut output = [0; 3];
        for d in 0..3 {
            let (n, k, s) = (input_shape[d + 1], kernel_shape[d], stride[d]);
            output[d] = conv_output_extent(n, k, s, padding).ok_or_else(|| {
                HdcError::shape(
                    "conv3d",
                    format!("kernel extent {k} exceeds padded input extent {n} on axis {d}"),
                )
            })?;
            if padding == Padding::Same {
                pad[d] = same_padding(n, k, s).0;
            }
        }
        Ok(ConvGeometry {
            batch: input_shape[0],
            input: [input_shape[1], input_shape[2], input_shape[3]],
            cin,
            kernel: [kernel_shape[0], kernel_shape[1], kernel_shape[2]],
            cout,
            stride,
            pad,
            output,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.output[0],
            self.output[1],
            self.output[2],
            self.cout,
        ]
    }

    fn input_len(&self) -> usize {
        self.input.iter().product::<usize>() * self.cin
    }

    fn rows(&self) -> usize {
        self.output.iter().product()
    }

    fn patch(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.cin
    }

    /// Calls `f(row, span, src)` for every output row and every `(dt, dh)`
    /// kernel slice. `span` indexes the `kw * cin` block of the im2col row
    /// and `src` is the input offset of tap `dw = 0` (padding may put it out
    /// of range), or `None` when the slice lies entirely in the padding.
    fn for_each_span(&self, mut f: impl FnMut(usize, usize, Option<(usize, usize)>)) {
        let [it, ih, _] = self.input;
        let [ot, oh, ow] = self.output;
        let [kt, kh, _] = self.kernel;
        let [st, sh, sw] = self.stride;
        let [pt, ph, _] = self.pad;
        let mut row = 0;
        for t in 0..ot {
            for h in 0..oh {
                for w in 0..ow {
                    let mut span = 0;
                    for dt in 0..kt {
                        let y = (t * st + dt).wrapping_sub(pt);
                        for dh in 0..kh {
                            let r = (h * sh + dh).wrapping_sub(ph);
                            let src = (y < it && r < ih).then(|| (y * ih + r, w * sw));
                            f(row, span, src);
                            span += 1;
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Input column of tap `dw` for an output column starting at `w0`, if in bounds.
    fn column(&self, w0: usize, dw: usize) -> Option<usize> {
        let c = (w0 + dw).wrapping_sub(self.pad[2]);
        (c < self.input[2]).then_some(c)
    }

    fn im2col<F: Element>(&self, x: &[F], col: &mut [F]) {
        let (patch, cin, kw, iw) = (self.patch(), self.cin, self.kernel[2], self.input[2]);
        let width = kw * cin;
        self.for_each_span(|row, span, src| {
            let at = row * patch + span * width;
            let dst = &mut col[at..at + width];
            let Some((line, w0)) = src else {
                dst.fill(F::zero());
                return;
            };
            let first = w0.wrapping_sub(self.pad[2]);
            if first < iw && first + kw <= iw {
                let from = (line * iw + first) * cin;
                dst.copy_from_slice(&x[from..from + width]);
                return;
            }
            for dw in 0..kw {
                let d = &mut dst[dw * cin..(dw + 1) * cin];
                match self.column(w0, dw) {
                    Some(c) => {
                        d.copy_from_slice(&x[(line * iw + c) * cin..(line * iw + c + 1) * cin])
                    }
                    None => d.fill(F::zero()),
                }
            }
        });
    }

    fn col2im_add<F: Element>(&self, col: &[F], dx: &mut [F]) {
        let (patch, cin, kw, iw) = (self.patch(), self.cin, self.kernel[2], self.input[2]);
        let width = kw * cin;
        self.for_each_span(|row, span, src| {
            let Some((line, w0)) = src else { return };
            let at = row * patch + span * width;
            let from = &col[at..at + width];
            for dw in 0..kw {
                if let Some(c) = self.column(w0, dw) {
                    let d = &mut dx[(line * iw + c) * cin..(line * iw + c + 1) * cin];
                    for (a, v) in d.iter_mut().zip(&from[dw * cin..(dw + 1) * cin]) {
                        *a += *v;
                    }
                }
            }
        });
    }
}

pub(crate) fn conv3d_forward<F: Element>(
    geo: &ConvGeometry,
    x: &[F],
    kernel: &[F],
    bias: &[F],
) -> Vec<F> {
    let (rows, patch, cout) = (geo.rows(), geo.patch(), geo.cout);
    let mut out = vec![F::zero(); geo.batch * rows * cout];
    out.par_chunks_mut(rows * cout)
        .zip(x.par_chunks(geo.input_len()))
        .for_each_init(
            || vec![F::zero(); rows * patch],
            |col, (out_b, x_b)| {
                for row in out_b.chunks_mut(cout) {
                    row.copy_from_slice(bias);
                }
                geo.im2col(x_b, col);
                gemm(
                    false,
                    false,
                    rows,
                    patch,
                    cout,
                    col,
                    kernel,
                    F::one(),
                    out_b,
                );
            },
        );
    out
}

pub(crate) struct ConvGrads<F> {
    pub input: Option<Vec<F>>,
    pub kernel: Vec<F>,
    pub bias: Vec<F>,
}

pub(crate) fn conv3d_backward<F: Element>(
    geo: &ConvGeometry,
    x: &[F],
    kernel: &[F],
    dy: &[F],
    need_input: bool,
) -> ConvGrads<F> {
    let (rows, patch, cout) = (geo.rows(), geo.patch(), geo.cout);
    let in_len = geo.input_len();
    let per_item: Vec<ItemGrads<F>> = x
        .par_chunks(in_len)
        .zip(dy.par_chunks(rows * cout))
        .map_init(
            || vec![F::zero(); rows * patch],
            |col, (x_b, dy_b)| {
                geo.im2col(x_b, col);
                let mut dk = vec![F::zero(); patch * cout];
                gemm(
                    true,
                    false,
                    patch,
                    rows,
                    cout,
                    col,
                    dy_b,
                    F::zero(),
                    &mut dk,
                );
                let mut db = vec![F::zero(); cout];
                for row in dy_b.chunks(cout) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += *g;
                    }
                }
                let dx = need_input.then(|| {
                    gemm(false, true, rows, cout, patch, dy_b, kernel, F::zero(), col);
                    let mut dx_b = vec![F::zero(); in_len];
                    geo.col2im_add(col, &mut dx_b);
                    dx_b
                });
                (dx, dk, db)
            },
        )
        .collect();

    // Reduce in batch order so results do not depend on thread scheduling.
    let mut grads = ConvGrads {
        input: need_input.then(|| Vec::with_capacity(geo.batch * in_len)),
        kernel: vec![F::zero(); patch * cout],
        bias: vec![F::zero(); cout],
    };
    for (dx, dk, db) in per_item {
        if let (Some(all), Some(dx)) = (grads.input.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        for (a, b) in grads.kernel.iter_mut().zip(&dk) {
            *a += *b;
        }
        for (a, b) in grads.bias.iter_mut().zip(&db) {
            *a += *b;
        }
    }
    grads
}

type ItemGrads<F> = (Option<Vec<F>>, Vec<F>, Vec<F>);

/// Normalized activations and per-(instance, channel) inverse std kept for backward.
pub(crate) struct NormSaved<F> {
    pub xhat: Vec<F>,
    pub inv_std: Vec<F>,
}

/// Instance norm over `[B, S, C]` where `S` is the flattened T*H*W extent.
pub(crate) fn instance_norm_forward<F: Element>(
    x: &[F],
    batch: usize,
    positions: usize,
    channels: usize,
    gamma: &[F],
    beta: &[F],
    eps: F,
) -> (Vec<F>, NormSaved<F>) {
    let count = F::from_usize(positions).unwrap();
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut inv_std = vec![F::zero(); batch * channels];
    let item = positions * channels;
    let mut mean = vec![F::zero(); channels];
    let mut var = vec![F::zero(); channels];
    for b in 0..batch {
        let xb = &x[b * item..(b + 1) * item];
        mean.fill(F::zero());
        for row in xb.chunks_exact(channels) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += *v);
        }
        mean.iter_mut().for_each(|m| *m = *m / count);
        var.fill(F::zero());
        for row in xb.chunks_exact(channels) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = *v - *m;
                *s += d * d;
            }
        }
        let istd = &mut inv_std[b * channels..(b + 1) * channels];
        for (i, s) in istd.iter_mut().zip(&var) {
            *i = F::one() / (*s / count + eps).sqrt();
        }
        let xh = &mut xhat[b * item..(b + 1) * item];
        for (hr, xr) in xh.chunks_exact_mut(channels).zip(xb.chunks_exact(channels)) {
            for (((h, v), m), is) in hr.iter_mut().zip(xr).zip(&mean).zip(istd.iter()) {
                *h = (*v - *m) * *is;
            }
        }
        for (yr, hr) in y[b * item..(b + 1) * item]
            .chunks_exact_mut(channels)
            .zip(xh.chunks_exact(channels))
        {
            for (((o, h), g), bt) in yr.iter_mut().zip(hr).zip(gamma).zip(beta) {
                *o = *g * *h + *bt;
            }
        }
    }
    (y, NormSaved { xhat, inv_std })
}

pub(crate) struct NormGrads<F> {
    pub input: Vec<F>,
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
}

pub(crate) fn instance_norm_backward<F: Element>(
    saved: &NormSaved<F>,
    dy: &[F],
    batch: usize,
    positions: usize,
    channels: usize,
    gamma: &[F],
) -> NormGrads<F> {
    let count = F::from_usize(positions).unwrap();
    let item = positions * channels;
    let mut dx = vec![F::zero(); dy.len()];
    let mut dgamma = vec![F::zero(); channels];
    let mut dbeta = vec![F::zero(); channels];
    let mut sum_g = vec![F::zero(); channels];
    let mut sum_gh = vec![F::zero(); channels];
    for b in 0..batch {
        let range = b * item..(b + 1) * item;
        let (dyb, xh) = (&dy[range.clone()], &saved.xhat[range.clone()]);
        let istd = &saved.inv_std[b * channels..(b + 1) * channels];
        // Per-channel sums of dy and dy * xhat; the gamma factor is applied after.
        sum_g.fill(F::zero());
        sum_gh.fill(F::zero());
        for (gr, hr) in dyb.chunks_exact(channels).zip(xh.chunks_exact(channels)) {
            for (((sg, sgh), g), h) in sum_g.iter_mut().zip(sum_gh.iter_mut()).zip(gr).zip(hr) {
                *sg += *g;
                *sgh += *g * *h;
            }
        }
        for c in 0..channels {
            dbeta[c] += sum_g[c];
            dgamma[c] += sum_gh[c];
        }
        // dx = gamma * istd / n * (n * dy - sum(dy) - xhat * sum(dy * xhat))
        let scale: Vec<F> = gamma.iter().zip(istd).map(|(g, i)| *g * *i / count).collect();
        for ((dr, gr), hr) in dx[range]
            .chunks_exact_mut(channels)
            .zip(dyb.chunks_exact(channels))
            .zip(xh.chunks_exact(channels))
        {
            let per_channel = dr.iter_mut().zip(gr).zip(hr).zip(&scale).zip(&sum_g).zip(&sum_gh);
            for (((((d, g), h), s), sg), sgh) in per_channel {
                *d = *s * (count * *g - *sg - *h * *sgh);
            }
        }
    }
    NormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

/// Mean over the H*W positions of each time slice: `[B, T, HW, C] -> [B, T, C]`.
pub(crate) fn spatial_pool_forward<F: Element>(
    x: &[F],
    outer: usize,
    positions: usize,
    channels: usize,
) -> Vec<F> {
    let count = F::from_usize(positions).unwrap();
    let mut out = vec![F::zero(); outer * channels];
    for (o, chunk) in out.chunks_mut(channels).zip(x.chunks(positions * channels)) {
        for row in chunk.chunks(channels) {
            for (a, v) in o.iter_mut().zip(row) {
                *a += *v;
            }
        }
        for a in o.iter_mut() {
            *a = *a / count;
        }
    }
    out
}

pub(crate) fn spatial_pool_backward<F: Element>(
    dy: &[F],
    outer: usize,
    positions: usize,
    channels: usize,
) -> Vec<F> {
    let count = F::from_usize(positions).unwrap();
    let mut dx = vec![F::zero(); outer * positions * channels];
    for (g, chunk) in dy.chunks(channels).zip(dx.chunks_mut(positions * channels)) {
        for row in chunk.chunks_mut(channels) {
            for (d, v) in row.iter_mut().zip(g) {
                *d = *v / count;
            }
        }
    }
    dx
}

/// Cosine similarity matrix between the rows of `a` `[n, d]` and `c` `[m, d]`.
pub(crate) fn cosine_forward<F: Element>(
    a: &[F],
    c: &[F],
    n: usize,
    m: usize,
    d: usize,
) -> Result<(Vec<F>, Vec<F>, Vec<F>)> {
    let norms = |x: &[F], which: &'static str| -> Result<Vec<F>> {
        x.chunks(d)
            .enumerate()
            .map(|(row, r)| {
                let norm = r.iter().map(|v| *v * *v).sum::<F>().sqrt();
                if norm > F::zero() && norm.is_finite() {
                    Ok(norm)
                } else {
                    Err(HdcError::ZeroNorm { which, row })
                }
            })
            .collect()
    };
    let na = norms(a, "left")?;
    let nc = norms(c, "right")?;
    let mut out = vec![F::zero(); n * m];
    gemm(false, true, n, d, m, a, c, F::zero(), &mut out);
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = out[i * m + j] / (na[i] * nc[j]);
        }
    }
    Ok((out, na, nc))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn cosine_backward<F: Element>(
    a: &[F],
    c: &[F],
    sim: &[F],
    na: &[F],
    nc: &[F],
    dy: &[F],
    n: usize,
    m: usize,
    d: usize,
) -> (Vec<F>, Vec<F>) {
    // d sim_ij / d a_i = c_j / (|a_i||c_j|) - sim_ij a_i / |a_i|^2
    let mut scaled = vec![F::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            scaled[i * m + j] = dy[i * m + j] / (na[i] * nc[j]);
        }
    }
    let mut da = vec![F::zero(); n * d];
    gemm(false, false, n, m, d, &scaled, c, F::zero(), &mut da);
    for i in 0..n {
        let w: F = (0..m).map(|j| dy[i * m + j] * sim[i * m + j]).sum::<F>() / (na[i] * na[i]);
        for (g, v) in da[i * d..(i + 1) * d]
            .iter_mut()
            .zip(&a[i * d..(i + 1) * d])
        {
            *g -= w * *v;
        }
    }
    let mut dc = vec![F::zero(); m * d];
    gemm(true, false, m, n, d, &scaled, a, F::zero(), &mut dc);
    for j in 0..m {
        let w: F = (0..n).map(|i| dy[i * m + j] * sim[i * m + j]).sum::<F>() / (nc[j] * nc[j]);
        for (g, v) in dc[j * d..(j + 1) * d]
            .iter_mut()
            .zip(&c[j * d..(j + 1) * d])
        {
            *g -= w * *v;
        }
    }
    (da, dc)
}

/// Row-softmax cross-entropy of a square logit matrix against identity
/// targets, summed over rows. Returns the loss and the row softmax.
pub(crate) fn diag_cross_entropy_forward<F: Element>(logits: &[F], n: usize) -> (F, Vec<F>) {
    let mut probs = vec![F::zero(); n * n];
    let mut loss = F::zero();
    for i in 0..n {
        let row = &logits[i * n..(i + 1) * n];
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut denom = F::zero();
        for (p, z) in probs[i * n..(i + 1) * n].iter_mut().zip(row) {
            *p = (*z - max).exp();
            denom += *p;
        }
        for p in probs[i * n..(i + 1) * n].iter_mut() {
            *p = *p / denom;
        }
        loss += max + denom.ln() - row[i];
    }
    (loss, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_puts_odd_pixel_last() {
        assert_eq!(same_padding(32, 3, 2), (0, 1));
        assert_eq!(same_padding(32, 3, 1), (1, 1));
        assert_eq!(same_padding(5, 4, 1), (1, 2));
        assert_eq!(same_padding(8, 1, 2), (0, 0));
    }

    #[test]
    fn output_extents() {
        assert_eq!(conv_output_extent(8, 3, 2, Padding::Same), Some(4));
        assert_eq!(conv_output_extent(1, 3, 1, Padding::Same), Some(1));
        assert_eq!(conv_output_extent(7, 3, 2, Padding::Valid), Some(3));
        assert_eq!(conv_output_extent(2, 3, 1, Padding::Valid), None);
        assert_eq!(conv_output_extent(4, 3, 0, Padding::Same), None);
    }

    #[test]
    fn cross_entropy_uniform_rows() {
        let (loss, probs) = diag_cross_entropy_forward(&[0.5f64; 9], 3);
        assert!((loss - 3.0 * 3f64.ln()).abs() < 1e-12);
        assert!(probs.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-12));
    }
}
