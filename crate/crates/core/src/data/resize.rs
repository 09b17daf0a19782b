use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Source coordinate and blend weight along one axis, align-corners.
fn taps(out: usize, inp: usize) -> Vec<(usize, usize, f32)> {
    (0..out)
        .map(|d| {
            let src = if out == 1 {
                0.0
            } else {
                d as f64 * (inp - 1) as f64 / (out - 1) as f64
            };
            let lo = (src.floor() as usize).min(inp - 1);
            let hi = (lo + 1).min(inp - 1);
            (lo, hi, (src - lo as f64) as f32)
        })
        .collect()
}

/// Bilinear resize of `[H, W, C]` mapping `src = dst * (in - 1) / (out - 1)`
/// per axis. Same-size requests return an exact copy.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let &[h, w, c] = img.shape() else {
        return Err(Error::Dimension(format!(
            "resize expects [H, W, C], got {:?}",
            img.shape()
        )));
    };
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Dimension(format!("cannot resize {h}x{w} to {out_h}x{out_w}")));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let (rows, cols) = (taps(out_h, h), taps(out_w, w));
    let src = img.data();
    let at = |y: usize, x: usize, ch: usize| src[(y * w + x) * c + ch];
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let top = at(y0, x0, ch) * (1.0 - fx) + at(y0, x1, ch) * fx;
                let bottom = at(y1, x0, ch) * (1.0 - fx) + at(y1, x1, ch) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new([out_h, out_w, c], out)
}
